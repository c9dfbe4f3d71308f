use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "variant = CHR
epochs = 2
batch_size = 8
lr = 0.01
head.width = 6
backbone.input_size = 64
backbone.stem_channels = 4
backbone.stage_channels = 4,6,8,8
backbone.blocks_per_stage = 1,1,1,1
backbone.taps = 1,2,3
";

fn chr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chr"))
        .current_dir(dir)
        .arg("-q")
        .args(args)
        .output()
        .expect("spawn chr")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn generate(dir: &Path) {
    let o = chr(
        dir,
        &["generate", "--n-pos", "10", "--ratio", "3", "--seed", "2", "--canvas", "64", "--out-dir", "data"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn generate_train_evaluate_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("tiny.cfg"), TINY).unwrap();
    generate(dir);
    for f in ["pool.jsonl", "train.jsonl", "test.jsonl", "generation.json"] {
        assert!(dir.join("data").join(f).exists(), "{f}");
    }
    let train = |out: &str| {
        chr(
            dir,
            &["train", "--config", "tiny.cfg", "--train-manifest", "data/train.jsonl",
              "--val-manifest", "data/test.jsonl", "--out-dir", out],
        )
    };
    let o = train("run");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.join("run/checkpoint.safetensors").exists());
    assert!(dir.join("run/metrics_seed0.jsonl").exists());

    // second run into the same directory is refused
    assert_eq!(code(&train("run")), 2);

    let eval = |out: &str| {
        chr(
            dir,
            &["evaluate", "--checkpoint", "run/checkpoint.safetensors", "--manifest",
              "data/test.jsonl", "--config", "tiny.cfg", "--out-dir", out],
        )
    };
    assert_eq!(code(&eval("ev1")), 0);
    assert_eq!(code(&eval("ev2")), 0);
    let a = std::fs::read(dir.join("ev1/report.json")).unwrap();
    let b = std::fs::read(dir.join("ev2/report.json")).unwrap();
    assert_eq!(a, b);
    let report: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["variant"], "CHR");
    assert_eq!(report["samples"], 8);

    std::fs::write(dir.join("other.cfg"), "variant = H\n").unwrap();
    let o = chr(
        dir,
        &["evaluate", "--checkpoint", "run/checkpoint.safetensors", "--manifest",
          "data/test.jsonl", "--config", "other.cfg", "--out-dir", "ev3"],
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let o = chr(
        dir,
        &["report", "--checkpoint", "run/checkpoint.safetensors", "--manifest",
          "data/test.jsonl", "--cams", "1", "--out-dir", "rep"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.join("rep/pr_curves.png").exists());
    assert_eq!(std::fs::read_dir(dir.join("rep/cams")).unwrap().count(), 1);
}

#[test]
fn generate_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate(a.path());
    generate(b.path());
    for f in ["pool.jsonl", "train.jsonl", "test.jsonl", "images/syn0000003.png"] {
        let x = std::fs::read(a.path().join("data").join(f)).unwrap();
        let y = std::fs::read(b.path().join("data").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
    assert_eq!(code(&chr(a.path(), &["generate", "--n-pos", "1", "--n-neg", "1", "--out-dir", "data"])), 2);
}

#[test]
fn ingest_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir);
    std::fs::write(
        dir.join("labels.csv"),
        "sample_id,gun,knife,wrench,pliers,scissors\nsyn0000000,0,0,0,0,1\nsyn0000011,0,0,0,0,0\nghost,1,0,0,0,0\n",
    )
    .unwrap();
    let o = chr(
        dir,
        &["ingest", "--images", "data/images", "--labels", "labels.csv", "--out-dir", "ing"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.join("ing/manifest.jsonl")).unwrap();
    assert!(text.contains("syn0000000") && text.contains("syn0000011"));
    assert!(!text.contains("ghost"));
}

#[test]
fn ablate_dry_run_lists_the_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let o = chr(
        tmp.path(),
        &["ablate", "--manifest", "missing.jsonl", "--ratios", "100", "--seeds", "1,2,3",
          "--dry-run", "--out-dir", "ab"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let plan = String::from_utf8(o.stdout).unwrap();
    assert!(plan.starts_with("15 runs"), "{plan}");
    assert_eq!(plan.lines().count(), 16);
    assert!(!tmp.path().join("ab").exists());
}

#[test]
fn error_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    // usage
    assert_eq!(code(&chr(dir, &["frobnicate"])), 2);
    // bad config value
    std::fs::write(dir.join("bad.cfg"), "epochs = many\n").unwrap();
    let o = chr(dir, &["train", "--config", "bad.cfg", "--train-manifest", "x.jsonl", "--out-dir", "r"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
    // missing data
    let o = chr(dir, &["train", "--train-manifest", "x.jsonl", "--out-dir", "r"]);
    assert_eq!(code(&o), 3);
    assert_eq!(stderr(&o).matches("No such file").count(), 1, "{}", stderr(&o));
    // corrupt checkpoint
    std::fs::write(dir.join("junk.safetensors"), b"junk").unwrap();
    std::fs::write(dir.join("m.jsonl"), "").unwrap();
    let o = chr(dir, &["evaluate", "--checkpoint", "junk.safetensors", "--manifest", "m.jsonl", "--out-dir", "e"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}
