//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line
//! (run with `--nocapture` to see them next to the harness output).

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chr_core::backbone::{batch_from_images, BackboneConfig};
use chr_core::datamodel::{BBox, DatasetManifest, Image, ManifestEntry, SplitTag, NUM_CLASSES};
use chr_core::eval::{
    average_precision, evaluate_model, pointing_localize, Pointing, Ranked,
};
use chr_core::head::Heatmap;
use chr_core::loss::{
    chr_loss, compute_gates, loss_and_logit_grad, plain_bce_loss, sigmoid64, GateMask,
    LevelPredictions,
};
use chr_core::synthgen::{
    build_subsets, compose, generate_records, CompositionMode, Generator, Scene, SubsetSpec,
    SynthConfig,
};
use chr_core::trainer::{checkpoint, train, TrainConfig, CHECKPOINT_FILE};
use chr_core::{Model, Variant};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn report(n: usize, ok: bool, detail: &str) {
    println!("criterion {n}: {} {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {detail}");
}

// 1

#[test]
fn criterion_01_gate_masks() {
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let mut triples: Vec<[f64; 3]> = Vec::new();
    for &a in &grid {
        for &b in &grid {
            for &c in &grid {
                triples.push([a, b, c]);
            }
        }
    }
    let mut cases = 0usize;
    let mut bad = Vec::new();
    for bits in 0u32..32 {
        let y: Vec<u8> = (0..NUM_CLASSES).map(|c| ((bits >> c) & 1) as u8).collect();
        for eps in [0.1, 0.3, 0.5] {
            for t in 0..triples.len() {
                // every class walks the whole grid, at different offsets
                let per_class: Vec<[f64; 3]> = (0..NUM_CLASSES)
                    .map(|c| triples[(t + c * 257) % triples.len()])
                    .collect();
                let levels: Vec<Vec<f64>> = (0..3)
                    .map(|l| per_class.iter().map(|p| p[l]).collect())
                    .collect();
                let refs: Vec<&[f64]> = levels.iter().map(Vec::as_slice).collect();
                let g = compute_gates(&y, &refs, eps);
                cases += 1;
                for c in 0..NUM_CLASSES {
                    for l in 0..3 {
                        let on = g.get(l, c);
                        let expect = y[c] == 1 || (l..3).all(|m| per_class[c][m] > eps);
                        if on != expect || (y[c] == 1 && !on) || (l < 2 && on && !g.get(l + 1, c)) {
                            bad.push((bits, eps, t, c, l));
                        }
                    }
                }
            }
        }
    }
    report(
        1,
        bad.is_empty(),
        &format!("gate masks: {cases} cases, {} violations", bad.len()),
    );
}

// 2

fn preds(levels: usize, batch: usize, classes: usize, data: &[f64]) -> LevelPredictions {
    LevelPredictions::new(levels, batch, classes, data.to_vec()).unwrap()
}

#[test]
fn criterion_02_loss_oracle() {
    let delta = 1e-7f64;
    let mut ok = true;
    let mut notes = Vec::new();

    // perfect prediction
    let y = [1u8, 0, 1, 0, 0];
    let p = preds(1, 1, 5, &[1.0, 0.0, 1.0, 0.0, 0.0]);
    let g = vec![GateMask::all_on(1, 5)];
    let l = chr_loss(&[&y], &p, &g).unwrap();
    let bound = -(1.0 - delta).ln() * 5.0;
    ok &= l <= bound + 1e-12;
    notes.push(format!("perfect {l:.3e}"));

    // one class, one level, positive at 0.5
    let p = preds(1, 1, 1, &[0.5]);
    let l = chr_loss(&[&[1]], &p, &[GateMask::all_on(1, 1)]).unwrap();
    ok &= (l - std::f64::consts::LN_2).abs() < 1e-6;
    notes.push(format!("half {l:.6}"));

    // negative, two levels, eps 0.3, (0.1, 0.4): only the top level counts
    let p = preds(2, 1, 1, &[0.1, 0.4]);
    let levels = [p.row(0, 0), p.row(1, 0)];
    let g = compute_gates(&[0], &levels, 0.3);
    ok &= !g.get(0, 0) && g.get(1, 0);
    let l = chr_loss(&[&[0]], &p, &[g]).unwrap();
    let expect = 0.5 * -(0.6f64).ln();
    ok &= (l - expect).abs() < 1e-6;
    notes.push(format!("cascade {l:.6}"));

    // all-positive labels: balanced equals plain exactly
    let mut r = rng(2);
    let mut exact = 0;
    for _ in 0..200 {
        let (lv, b) = (r.random_range(1..=3), r.random_range(1..=4));
        let data: Vec<f64> = (0..lv * b * 5).map(|_| r.random::<f64>()).collect();
        let p = preds(lv, b, 5, &data);
        let labels = vec![[1u8; 5]; b];
        let refs: Vec<&[u8]> = labels.iter().map(|x| x.as_slice()).collect();
        let gates: Vec<GateMask> = (0..b)
            .map(|n| {
                let rows: Vec<&[f64]> = (0..lv).map(|l| p.row(l, n)).collect();
                compute_gates(&labels[n], &rows, r.random())
            })
            .collect();
        if chr_loss(&refs, &p, &gates).unwrap() == plain_bce_loss(&refs, &p).unwrap() {
            exact += 1;
        }
    }
    ok &= exact == 200;
    notes.push(format!("all-positive equal {exact}/200"));
    report(2, ok, &format!("loss oracle: {}", notes.join(", ")));
}

// 3

#[test]
fn criterion_03_gradient_check() {
    let h = 1e-3;
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (lv, b, k) = (r.random_range(1..=3), r.random_range(1..=4), NUM_CLASSES);
        let z: Vec<f64> = (0..lv * b * k).map(|_| r.random_range(-4.0..4.0)).collect();
        let labels: Vec<Vec<u8>> = (0..b)
            .map(|_| (0..k).map(|_| r.random_bool(0.3) as u8).collect())
            .collect();
        let refs: Vec<&[u8]> = labels.iter().map(Vec::as_slice).collect();
        let eps = *[0.1, 0.3, 0.5].choose(&mut r).unwrap();
        let logits = preds(lv, b, k, &z);
        let probs = logits.map(sigmoid64);
        let gates: Vec<GateMask> = (0..b)
            .map(|n| {
                let rows: Vec<&[f64]> = (0..lv).map(|l| probs.row(l, n)).collect();
                compute_gates(&labels[n], &rows, eps)
            })
            .collect();
        let (_, grad) = loss_and_logit_grad(&refs, &logits, &gates).unwrap();
        let at = |zz: &[f64]| chr_loss(&refs, &preds(lv, b, k, zz).map(sigmoid64), &gates).unwrap();
        for i in 0..z.len() {
            let mut up = z.clone();
            let mut dn = z.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (at(&up) - at(&dn)) / (2.0 * h);
            let an = grad.data()[i];
            let denom = an.abs().max(fd.abs());
            let rel = if denom < 1e-10 { 0.0 } else { (an - fd).abs() / denom };
            worst = worst.max(rel);
        }
    }
    report(3, worst < 1e-3, &format!("gradient check: max relative error {worst:.2e} over 50 instances"));
}

// 4

/// Quadratic reference: for each positive in ranked order, the best
/// precision at that rank or any later rank.
fn brute_ap(items: &[Ranked]) -> Option<f64> {
    let mut v = items.to_vec();
    v.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.sample_id.cmp(&b.sample_id)));
    let total = v.iter().filter(|x| x.positive).count();
    if total == 0 {
        return None;
    }
    let precision_at = |k: usize| v[..=k].iter().filter(|x| x.positive).count() as f64 / (k + 1) as f64;
    let mut sum = 0.0;
    for k in 0..v.len() {
        if v[k].positive {
            sum += (k..v.len()).map(precision_at).fold(0.0, f64::max);
        }
    }
    Some(sum / total as f64)
}

#[test]
fn criterion_04_ap_oracle() {
    let mut r = rng(4);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = r.random_range(1..=16);
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut r);
        let items: Vec<Ranked> = ids
            .iter()
            .map(|i| Ranked {
                sample_id: format!("id{i:02}"),
                // coarse scores force ties
                score: r.random_range(0..6) as f64 / 5.0,
                positive: r.random_bool(0.4),
            })
            .collect();
        match (average_precision(&items), brute_ap(&items)) {
            (None, None) => {}
            (Some(a), Some(b)) if (a - b).abs() <= 1e-9 => {}
            _ => mismatches += 1,
        }
    }
    let worked: Vec<Ranked> = [(0.9, true), (0.8, false), (0.7, true)]
        .iter()
        .enumerate()
        .map(|(i, (s, p))| Ranked {
            sample_id: format!("w{i}"),
            score: *s,
            positive: *p,
        })
        .collect();
    let w = average_precision(&worked).unwrap();
    let ok = mismatches == 0 && (w - 5.0 / 6.0).abs() < 1e-9;
    report(4, ok, &format!("AP oracle: {mismatches}/1000 mismatches, worked example {w:.10}"));
}

// 5

fn small_backbone(input: usize) -> BackboneConfig {
    BackboneConfig {
        input_size: input,
        stem_channels: 4,
        stage_channels: vec![4, 6, 8, 8],
        blocks_per_stage: vec![1, 1, 1, 1],
        taps: vec![1, 2, 3],
    }
}

#[test]
fn criterion_05_cam_gap_consistency() {
    let mut r = rng(5);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let variant = Variant::ALL[trial % Variant::ALL.len()];
        let cfg = TrainConfig {
            variant,
            head_width: r.random_range(3..=8),
            backbone: small_backbone(32 * r.random_range(1..=2)),
            ..TrainConfig::default()
        };
        let mut model = Model::new(cfg.model_config(), r.random()).unwrap();
        for p in model.params_mut() {
            for v in p.value.iter_mut() {
                *v += r.random_range(-0.3..0.3);
            }
        }
        let side = cfg.backbone.input_size;
        let images: Vec<Image> = (0..2)
            .map(|_| {
                let data = (0..side * side * 3).map(|_| r.random()).collect();
                Image::from_raw(side, side, data).unwrap()
            })
            .collect();
        let refs: Vec<&Image> = images.iter().collect();
        let (out, _) = model.forward(&batch_from_images(&refs).unwrap(), false, false).unwrap();
        for l in 0..model.levels() {
            for i in 0..images.len() {
                for c in 0..NUM_CLASSES {
                    let cam = model.head.cam(&out.refined[l], i, l, c).unwrap();
                    let lhs = cam.mean() + model.head.classifier(l).bias(c) as f64;
                    let rhs = out.level_logits[l][i * NUM_CLASSES + c] as f64;
                    worst = worst.max((lhs - rhs).abs());
                }
            }
        }
    }
    report(5, worst < 1e-5, &format!("CAM/GAP consistency: max |mean(CAM)+b - logit| = {worst:.2e} over 100 trials"));
}

// 6

#[test]
fn criterion_06_composition_algebra() {
    let mut r = rng(6);
    let gen = Generator::new(SynthConfig::new(64, CompositionMode::Additive), 6).unwrap();
    let (mut perm_ok, mut ident_ok, mut multi) = (0, 0, 0);
    for i in 0..200 {
        let scene = gen.scene(i, r.random_bool(0.7)).unwrap();
        let base = compose(&scene);
        let mut shuffled = scene.clone();
        shuffled.items.shuffle(&mut r);
        shuffled.items.reverse();
        if compose(&shuffled) == base {
            perm_ok += 1;
        }
        multi += usize::from(scene.items.len() > 1);

        let item = scene.items.choose(&mut r).cloned();
        let identity = match item {
            None => compose(&scene) == scene.canvas,
            Some(g) => {
                let mut alone = Scene::new(Image::zeros(64, 64), CompositionMode::Additive);
                alone.items.push(g.clone());
                let mut on_bg = Scene::new(scene.canvas.clone(), CompositionMode::Additive);
                on_bg.items.push(g.clone());
                let expect: Vec<f32> = scene
                    .canvas
                    .data()
                    .iter()
                    .zip(g.image.data())
                    .map(|(a, b)| (a + b).clamp(0.0, 1.0))
                    .collect();
                compose(&alone) == g.image && compose(&on_bg).data() == expect.as_slice()
            }
        };
        ident_ok += usize::from(identity);
    }
    report(
        6,
        perm_ok == 200 && ident_ok == 200 && multi > 0,
        &format!("composition: permutation {perm_ok}/200 ({multi} multi-item), identity {ident_ok}/200"),
    );
}

// 7

fn label_pool(pos: usize, neg: usize) -> DatasetManifest {
    let entries = (0..pos + neg)
        .map(|i| ManifestEntry {
            sample_id: format!("p{i:06}"),
            image: format!("images/p{i:06}.png"),
            labels: if i < pos {
                let mut l = vec![0; NUM_CLASSES];
                l[i % NUM_CLASSES] = 1;
                l
            } else {
                vec![0; NUM_CLASSES]
            },
            bboxes: None,
            split: SplitTag::Pool,
        })
        .collect();
    DatasetManifest::new(entries, SplitTag::Pool, 0)
}

#[test]
fn criterion_07_subset_exactness() {
    let mut lines = Vec::new();
    let mut ok = true;
    let capped = SubsetSpec::capped(20, 20_000, 7).unwrap();
    let cases = [
        (label_pool(80, 2_000), SubsetSpec::new(10, 50, 7)),
        (label_pool(80, 6_000), SubsetSpec::new(100, 50, 7)),
        (label_pool(60, 20_000), capped.clone()),
    ];
    for (pool, spec) in &cases {
        let (train, test) = build_subsets(pool, spec).unwrap();
        let count = |m: &DatasetManifest, p: bool| m.entries.iter().filter(|e| e.is_positive() == p).count();
        let (tp, tn, sp, sn) = (count(&train, true), count(&train, false), count(&test, true), count(&test, false));
        let (pos, neg) = (tp + sp, tn + sn);
        let split = |n: usize| ((n as f64 * 0.8).round() as usize, n - (n as f64 * 0.8).round() as usize);
        let mut ids: Vec<&str> = train.entries.iter().chain(&test.entries).map(|e| e.sample_id.as_str()).collect();
        let total = ids.len();
        ids.sort_unstable();
        ids.dedup();
        let good = pos == spec.positive_count
            && neg == spec.ratio * pos
            && (tp, sp) == split(pos)
            && (tn, sn) == split(neg)
            && ids.len() == total
            && train.entries.iter().all(|e| e.split == SplitTag::Train)
            && test.entries.iter().all(|e| e.split == SplitTag::Test);
        ok &= good;
        lines.push(format!("({pos},{}) train {tp}+{tn} test {sp}+{sn}", spec.ratio));
    }
    ok &= capped.ratio == 1000;
    report(7, ok, &format!("subsets: {}", lines.join("; ")));
}

// 8

/// Fixed desk protocol: a shared backbone is first trained (variant H) on a
/// separate balanced pool, then every cell fine-tunes from it for a fixed
/// number of steps. 500 positives, ratios 10 and 100, seeds 1-3.
fn desk_base() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        steps_per_epoch: DESK_STEPS,
        lr: 0.002,
        optimizer: chr_core::trainer::OptimizerKind::Adaptive,
        epsilon: 0.05,
        eval_interval: 0,
        ..TrainConfig::default()
    }
}

const PRETRAIN_STEPS: usize = 1500;
const DESK_STEPS: usize = 600;

fn pretrain(dir: &Path) -> std::path::PathBuf {
    let balanced = generate_records(1500, 1500, &SynthConfig::default(), 99).unwrap();
    let cfg = TrainConfig {
        variant: Variant::H,
        steps_per_epoch: PRETRAIN_STEPS,
        seed: 0,
        ..desk_base()
    };
    train(&cfg, &balanced, None, dir, false).unwrap().checkpoint
}

#[test]
fn criterion_08_desk_direction() {
    use chr_core::ablation::{run_ablation, AblationSpec};
    let dir = tempfile::tempdir().unwrap();
    let init = pretrain(&dir.path().join("pretrain"));
    let spec = AblationSpec {
        variants: vec![Variant::Baseline, Variant::CHR],
        ratios: vec![10, 100],
        seeds: vec![1, 2, 3],
        positives: 500,
        base: TrainConfig {
            init_from: Some(init),
            ..desk_base()
        },
    };
    let pool = generate_records(500, 50_000, &SynthConfig::default(), 8).unwrap();
    let table = run_ablation(&spec, &pool, &dir.path().join("grid")).unwrap();
    println!("{}", table.to_markdown());
    let wins = spec
        .seeds
        .iter()
        .filter(|s| {
            let m = |v| table.get(v, 100, **s).and_then(|c| c.map);
            matches!((m(Variant::CHR), m(Variant::Baseline)), (Some(a), Some(b)) if a > b)
        })
        .count();
    let g10 = table.mean_gap(Variant::CHR, Variant::Baseline, 10);
    let g100 = table.mean_gap(Variant::CHR, Variant::Baseline, 100);
    let ok = wins >= 2 && matches!((g100, g10), (Some(a), Some(b)) if a >= b);
    report(
        8,
        ok,
        &format!("desk direction: CHR beats baseline at ratio 100 in {wins}/3 seeds, gap r10 {g10:?} r100 {g100:?}"),
    );
}

// 9

fn tiny_records(seed: u64) -> (Vec<chr_core::Record>, Vec<chr_core::Record>) {
    let recs = generate_records(12, 36, &SynthConfig::new(64, CompositionMode::Additive), seed).unwrap();
    let (train, test): (Vec<_>, Vec<_>) = recs.into_iter().enumerate().partition(|(i, _)| i % 4 != 0);
    (
        train.into_iter().map(|x| x.1).collect(),
        test.into_iter().map(|x| x.1).collect(),
    )
}

#[test]
fn criterion_09_determinism() {
    let (train_set, test_set) = tiny_records(9);
    let mut notes = Vec::new();
    let mut ok = true;
    for optimizer in [chr_core::trainer::OptimizerKind::SgdMomentum, chr_core::trainer::OptimizerKind::Adaptive] {
        let cfg = TrainConfig {
            variant: Variant::CHR,
            epochs: 3,
            batch_size: 8,
            head_width: 6,
            optimizer,
            backbone: small_backbone(64),
            seed: 4,
            ..TrainConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let c = tempfile::tempdir().unwrap();
        train(&cfg, &train_set, Some(&test_set), a.path(), false).unwrap();
        train(&cfg, &train_set, Some(&test_set), c.path(), false).unwrap();
        let first = TrainConfig { stop_after: Some(1), ..cfg.clone() };
        train(&first, &train_set, Some(&test_set), b.path(), false).unwrap();
        let second = TrainConfig { stop_after: Some(2), ..cfg.clone() };
        train(&second, &train_set, Some(&test_set), b.path(), true).unwrap();
        train(&cfg, &train_set, Some(&test_set), b.path(), true).unwrap();

        let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
        let ck = |d: &Path| checkpoint::load(&d.join(CHECKPOINT_FILE)).unwrap();
        let (ca, cb) = (ck(a.path()), ck(b.path()));
        let same_state = ca.model == cb.model && ca.optimizer == cb.optimizer && (ca.epoch, ca.step) == (cb.epoch, cb.step);
        let same_bytes = read(a.path(), CHECKPOINT_FILE) == read(b.path(), CHECKPOINT_FILE)
            && read(a.path(), CHECKPOINT_FILE) == read(c.path(), CHECKPOINT_FILE);
        let metrics = "metrics_seed4.jsonl";
        let same_log = read(a.path(), metrics) == read(b.path(), metrics);

        let r1 = evaluate_model(&ca.model, &ca.config_hash, &test_set).unwrap().to_json().unwrap();
        let r2 = evaluate_model(&cb.model, &cb.config_hash, &test_set).unwrap().to_json().unwrap();
        let same_eval = r1 == r2;
        ok &= same_state && same_bytes && same_log && same_eval;
        notes.push(format!(
            "{optimizer}: state {same_state}, checkpoint bytes {same_bytes}, metrics {same_log}, report {same_eval}"
        ));
    }
    report(9, ok, &format!("determinism: {}", notes.join("; ")));
}

// 10

fn bilinear_oracle(m: &Heatmap, h: usize, w: usize) -> Vec<f32> {
    let pos = |o: usize, n_src: usize, n_dst: usize| {
        let s = ((o as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_src - 1);
        (i0, (i0 + 1).min(n_src - 1), s - i0 as f64)
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, fy) = pos(y, m.height, h);
        for x in 0..w {
            let (x0, x1, fx) = pos(x, m.width, w);
            let g = |r: usize, c: usize| m.data[r * m.width + c] as f64;
            let top = g(y0, x0) * (1.0 - fx) + g(y0, x1) * fx;
            let bot = g(y1, x0) * (1.0 - fx) + g(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    out
}

/// First maximum over (level, row, col).
fn scan(cams: &[Heatmap], h: usize, w: usize) -> (usize, usize, usize) {
    let mut best = (f32::NEG_INFINITY, (0, 0, 0));
    for (l, m) in cams.iter().enumerate() {
        let up = bilinear_oracle(m, h, w);
        for (i, v) in up.iter().enumerate() {
            if *v > best.0 {
                best = (*v, (l, i / w, i % w));
            }
        }
    }
    best.1
}

fn map(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> Heatmap {
    Heatmap {
        height: h,
        width: w,
        data: (0..h * w).map(|i| f(i / w, i % w)).collect(),
    }
}

#[test]
fn criterion_10_pointing() {
    const S: usize = 24;
    let class = 2;
    let fixtures: Vec<(&str, Vec<Heatmap>)> = vec![
        // peak of the 6x6 level at cell (4, 1): pixels rows 16..20, cols 4..8
        ("peak", vec![
            map(3, 3, |_, _| 0.1),
            map(6, 6, |r, c| if (r, c) == (4, 1) { 5.0 } else { 0.0 }),
            map(12, 12, |r, c| (r + c) as f32 * 0.01),
        ]),
        ("constant", vec![map(3, 3, |_, _| 1.0), map(6, 6, |_, _| 1.0), map(12, 12, |_, _| 1.0)]),
        ("plateau", vec![map(6, 6, |r, _| if r >= 3 { 2.0 } else { 0.0 }), map(12, 12, |_, c| if c >= 6 { 2.0 } else { 1.0 })]),
    ];
    let mut checked = 0;
    let mut wrong = Vec::new();
    for (name, cams) in &fixtures {
        let peak = scan(cams, S, S);
        // every box position and a few sizes, plus boxes of another class
        for bh in [1, 3, 8] {
            for bw in [1, 4, 8] {
                for y in 0..=S - bh {
                    for x in 0..=S - bw {
                        let b = BBox::new(x as u32, y as u32, (x + bw) as u32, (y + bh) as u32, class).unwrap();
                        let other = BBox::new(0, 0, S as u32, S as u32, class + 1).unwrap();
                        let inside = peak.1 >= y && peak.1 < y + bh && peak.2 >= x && peak.2 < x + bw;
                        let got = pointing_localize(cams, S, S, &[other, b], class);
                        let expect_point = (peak.0, peak.1, peak.2);
                        let good = match got {
                            Pointing::Hit(p) => inside && (p.level, p.row, p.col) == expect_point,
                            Pointing::Miss(p) => !inside && (p.level, p.row, p.col) == expect_point,
                            Pointing::Excluded => false,
                        };
                        checked += 1;
                        if !good {
                            wrong.push((*name, y, x, bh, bw));
                        }
                    }
                }
            }
        }
    }
    let peak = scan(&fixtures[0].1, S, S);
    let constant = scan(&fixtures[1].1, S, S);
    let hit_box = BBox::new(4, 16, 8, 20, class).unwrap();
    let miss_box = BBox::new(12, 0, 24, 8, class).unwrap();
    let named = matches!(pointing_localize(&fixtures[0].1, S, S, &[hit_box], class), Pointing::Hit(_))
        && matches!(pointing_localize(&fixtures[0].1, S, S, &[miss_box], class), Pointing::Miss(_))
        && matches!(pointing_localize(&fixtures[1].1, S, S, &[BBox::new(0, 0, 1, 1, class).unwrap()], class), Pointing::Hit(_))
        && matches!(pointing_localize(&fixtures[1].1, S, S, &[BBox::new(1, 0, 24, 24, class).unwrap()], class), Pointing::Miss(_))
        && matches!(pointing_localize(&fixtures[1].1, S, S, &[], class), Pointing::Excluded);
    let ok = wrong.is_empty() && named && constant == (0, 0, 0) && (16..20).contains(&peak.1) && (4..8).contains(&peak.2);
    report(
        10,
        ok,
        &format!("pointing: {checked} box placements over 3 fixtures, {} disagreements; peak at {peak:?}, constant tie at {constant:?}", wrong.len()),
    );
}
