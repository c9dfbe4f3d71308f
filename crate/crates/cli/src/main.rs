//! `chr`: generate, ingest, train, evaluate, ablate, report.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use chr_core::ablation::{run_ablation, AblationSpec};
use chr_core::datamodel::{DatasetManifest, Record, CLASS_NAMES};
use chr_core::eval::{self, plot};
use chr_core::ingest::{ingest, IngestConfig};
use chr_core::synthgen::{build_subsets, generate_dataset, CompositionMode, SubsetSpec, SynthConfig};
use chr_core::trainer::{self, checkpoint, TrainConfig, CHECKPOINT_FILE};
use chr_core::Variant;

#[derive(Parser, Debug)]
#[command(name = "chr", version, about = "Class-balanced hierarchical refinement toolkit")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic pool (and optionally one train/test subset).
    Generate(GenerateArgs),
    /// Build a manifest from an image directory and CSV label tables.
    Ingest(IngestArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest and write the JSON report.
    Evaluate(EvaluateArgs),
    /// Train and evaluate every variant at every ratio and seed.
    Ablate(AblateArgs),
    /// PR curves, class-map overlays and the gain-vs-ratio plot.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct OutArgs {
    /// Output directory; every written path is relative to it.
    #[arg(long)]
    out_dir: PathBuf,
    /// Continue into an existing output directory instead of refusing.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    n_pos: usize,
    /// Negatives in the pool; defaults to ratio x n-pos.
    #[arg(long)]
    n_neg: Option<usize>,
    /// Negative-positive ratio of the train/test subset.
    #[arg(long)]
    ratio: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = chr_core::synthgen::DEFAULT_CANVAS)]
    canvas: usize,
    #[arg(long, default_value = "additive")]
    mode: CompositionMode,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    images: PathBuf,
    /// CSV: sample_id,gun,knife,wrench,pliers,scissors
    #[arg(long)]
    labels: PathBuf,
    /// CSV: sample_id,x_min,y_min,x_max,y_max,class
    #[arg(long)]
    bboxes: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ModelArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        for kv in &self.overrides {
            let Some((k, v)) = kv.split_once('=') else {
                return Err(chr_core::Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")).into());
            };
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    train_manifest: PathBuf,
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Fail unless the checkpoint was trained under this config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Pool manifest to draw subsets from.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [10usize, 100])]
    ratios: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_values = ["baseline", "H", "CH", "HR", "CHR"])]
    variants: Vec<Variant>,
    /// Positives per subset.
    #[arg(long, default_value_t = 500)]
    positives: usize,
    /// Print the run plan and exit.
    #[arg(long)]
    dry_run: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// results.jsonl of an ablation run.
    #[arg(long)]
    ablation: Option<PathBuf>,
    /// Class-map overlays to draw.
    #[arg(long, default_value_t = 8)]
    cams: usize,
    #[command(flatten)]
    out: OutArgs,
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn load_records(manifest: &Path) -> Result<Vec<Record>> {
    let m = DatasetManifest::read(manifest)?;
    let recs = m.load_records(&base_dir(manifest))?;
    log::info!("{}: {} samples", manifest.display(), recs.len());
    Ok(recs)
}

/// Creates the output directory; refuses when `marker` already exists
/// there unless resuming.
fn prepare_out(out: &OutArgs, marker: &str) -> Result<()> {
    let target = out.out_dir.join(marker);
    if target.exists() && !out.resume {
        return Err(chr_core::Error::Config(format!(
            "{} exists; pass --resume to continue or pick another --out-dir",
            target.display()
        ))
        .into());
    }
    std::fs::create_dir_all(&out.out_dir)
        .with_context(|| format!("creating {}", out.out_dir.display()))?;
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    prepare_out(&a.out, "pool.jsonl")?;
    let n_neg = match (a.n_neg, a.ratio) {
        (Some(n), _) => n,
        (None, Some(r)) => r * a.n_pos,
        (None, None) => bail!(chr_core::Error::Config("give --n-neg or --ratio".into())),
    };
    let cfg = SynthConfig::new(a.canvas, a.mode);
    let pool = generate_dataset(a.n_pos, n_neg, &cfg, a.seed, &a.out.out_dir)?;
    pool.write(&a.out.out_dir.join("pool.jsonl"))?;
    let meta = serde_json::json!({
        "seed": a.seed,
        "canvas": a.canvas,
        "mode": a.mode.to_string(),
        "positives": a.n_pos,
        "negatives": n_neg,
    });
    write(&a.out.out_dir.join("generation.json"), &format!("{meta:#}\n"))?;
    if let Some(r) = a.ratio {
        let (train, test) = build_subsets(&pool, &SubsetSpec::new(r, a.n_pos, a.seed))?;
        train.write(&a.out.out_dir.join("train.jsonl"))?;
        test.write(&a.out.out_dir.join("test.jsonl"))?;
        println!("train {} / test {} samples", train.len(), test.len());
    }
    println!("pool of {} samples in {}", pool.len(), a.out.out_dir.display());
    Ok(())
}

fn cmd_ingest(a: &IngestArgs) -> Result<()> {
    prepare_out(&a.out, "manifest.jsonl")?;
    let mut cfg = IngestConfig::new(&a.images, &a.labels);
    if let Some(b) = &a.bboxes {
        cfg = cfg.with_bboxes(b);
    }
    let report = ingest(&cfg)?;
    for id in &report.skipped {
        log::warn!("{id}: image not found, skipped");
    }
    report.manifest.write(&a.out.out_dir.join("manifest.jsonl"))?;
    println!(
        "{} samples ingested, {} skipped",
        report.manifest.len(),
        report.skipped.len()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.model.resolve()?;
    prepare_out(&a.out, CHECKPOINT_FILE)?;
    let train_set = load_records(&a.train_manifest)?;
    let val_set = a.val_manifest.as_deref().map(load_records).transpose()?;
    write(&a.out.out_dir.join("config.txt"), &cfg.to_text())?;
    let resume = a.out.resume && a.out.out_dir.join(CHECKPOINT_FILE).exists();
    let out = trainer::train(&cfg, &train_set, val_set.as_deref(), &a.out.out_dir, resume)?;
    println!(
        "trained {} to epoch {} ({} steps); checkpoint {}",
        cfg.variant,
        out.epoch,
        out.step,
        out.checkpoint.display()
    );
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    prepare_out(&a.out, "report.json")?;
    let expected = a.config.as_deref().map(TrainConfig::load).transpose()?;
    let manifest = DatasetManifest::read(&a.manifest)?;
    let report = eval::evaluate(
        &a.checkpoint,
        &manifest,
        &base_dir(&a.manifest),
        expected.as_ref(),
    )?;
    let path = a.out.out_dir.join("report.json");
    write(&path, &report.to_json()?)?;
    match report.map {
        Some(m) => println!("mAP {:.4}", m),
        None => println!("mAP undefined (no positives)"),
    }
    if let Some(p) = report.mean_pointing {
        println!("pointing accuracy {:.4}", p);
    }
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let spec = AblationSpec {
        variants: a.variants.clone(),
        ratios: a.ratios.clone(),
        seeds: a.seeds.clone(),
        positives: a.positives,
        base: a.model.resolve()?,
    };
    spec.validate()?;
    if a.dry_run {
        print!("{}", spec.plan_text());
        return Ok(());
    }
    prepare_out(&a.out, "results.jsonl")?;
    let pool = load_records(&a.manifest)?;
    let table = run_ablation(&spec, &pool, &a.out.out_dir)?;
    print!("{}", table.to_markdown());
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    prepare_out(&a.out, "pr_curves.png")?;
    let mut wrote = 0;
    if let (Some(ck_path), Some(manifest)) = (&a.checkpoint, &a.manifest) {
        let ck = checkpoint::load(ck_path)?;
        let recs = load_records(manifest)?;
        let scores = eval::score_records(&ck.model, &recs, 64)?;
        let curves: Vec<Vec<(f64, f64)>> = (0..CLASS_NAMES.len())
            .map(|c| {
                eval::pr_curve(&scores.ranked(&recs, c))
                    .into_iter()
                    .map(|(p, r)| (r, p))
                    .collect()
            })
            .collect();
        plot::pr_curves(&curves, &a.out.out_dir.join("pr_curves.png"))?;
        wrote += 1;
        let cam_dir = a.out.out_dir.join("cams");
        std::fs::create_dir_all(&cam_dir)?;
        let positives: Vec<&Record> = recs.iter().filter(|r| r.is_positive()).take(a.cams).collect();
        for r in positives {
            let batch = chr_core::backbone::batch_from_records(&[r])?;
            let (out, _) = ck.model.forward(&batch, false, false)?;
            for c in (0..CLASS_NAMES.len()).filter(|c| r.labels.has(*c)) {
                // the finest level carries the most spatial detail
                let cam = ck.model.head.cam(&out.refined[0], 0, 0, c)?;
                let path = cam_dir.join(format!("{}_{}.png", r.sample_id, CLASS_NAMES[c]));
                plot::cam_overlay(&r.image, &cam, &path)?;
                wrote += 1;
            }
        }
    }
    if let Some(results) = &a.ablation {
        let text = std::fs::read_to_string(results)
            .with_context(|| format!("reading {}", results.display()))?;
        let table = chr_core::ablation::AblationTable {
            results: text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<std::result::Result<_, _>>()
                .map_err(chr_core::Error::from)?,
        };
        let mut ratios: Vec<usize> = table.results.iter().map(|r| r.ratio).collect();
        ratios.sort_unstable();
        ratios.dedup();
        let series: Vec<Vec<(usize, f64)>> = [Variant::H, Variant::CH, Variant::HR, Variant::CHR]
            .iter()
            .map(|v| {
                ratios
                    .iter()
                    .filter_map(|r| Some((*r, table.mean_gap(*v, Variant::Baseline, *r)?)))
                    .collect::<Vec<_>>()
            })
            .filter(|s| !s.is_empty())
            .collect();
        plot::gain_vs_ratio(&series, &a.out.out_dir.join("gain_vs_ratio.png"))?;
        write(&a.out.out_dir.join("table.md"), &table.to_markdown())?;
        wrote += 2;
    }
    if wrote == 0 {
        bail!(chr_core::Error::Config(
            "nothing to report: give --checkpoint with --manifest, or --ablation".into()
        ));
    }
    println!("{} files written to {}", wrote, a.out.out_dir.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<chr_core::Error>() {
            return e.exit_code() as u8;
        }
    }
    3
}

/// The cause chain, skipping causes already spelled out by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, _) => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp_secs()
        .init();
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
