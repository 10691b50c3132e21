use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_semaug");

fn semaug(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .args(args)
        .env_remove("SEMAUG_GRADCHECK_FAULT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = semaug(dir, args);
    assert_eq!(code(&o), 0, "{args:?} failed:\n{}", stderr(&o));
    o
}

/// Tiny toy dataset plus its pool, under a fresh directory.
fn fixture() -> TempDir {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["gen-toydata", "--train", "4", "--test", "4", "--parsing", "3", "--out", "data"]);
    ok(t.path(), &["build-pool", "--dataset", "data/parsing", "--out", "pool"]);
    t
}

/// Every file under `root` with its bytes, keyed by relative path.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn metrics(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn help_lists_every_valued_flag_with_a_default() {
    let t = tempfile::tempdir().unwrap();
    for sub in ["build-pool", "augment", "train", "eval", "gradcheck", "gen-toydata"] {
        let help = stdout(&ok(t.path(), &[sub, "--help"]));
        for line in help.lines().map(str::trim_start).filter(|l| l.starts_with("--") && l.contains(" <")) {
            if line.starts_with("--out ") {
                assert!(line.contains("own default"), "{sub}: {line}");
                continue;
            }
            assert!(line.contains("[default: "), "{sub}: {line}");
        }
        for flag in ["--config", "--seed", "--out", "--force", "--verbose"] {
            assert!(help.contains(flag), "{sub} help lacks {flag}");
        }
    }
    let train = stdout(&ok(t.path(), &["train", "--help"]));
    assert!(train.contains("--epochs <EPOCHS>") && train.contains("[default: 60]"));
}

#[test]
fn unknown_flag_is_a_validation_error() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&semaug(t.path(), &["train", "--nope"])), 1);
}

#[test]
fn gen_toydata_with_zero_counts_writes_empty_splits() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["gen-toydata", "--train", "0", "--test", "0", "--parsing", "0", "--out", "d"]);
    for split in ["train", "test", "parsing"] {
        for sub in ["images", "labels", "meta"] {
            let p = t.path().join("d").join(split).join(sub);
            assert!(p.is_dir(), "{}", p.display());
            assert_eq!(fs::read_dir(&p).unwrap().count(), 0);
        }
    }
}

#[test]
fn build_pool_on_empty_dataset_and_rerun_policy() {
    let t = tempfile::tempdir().unwrap();
    fs::create_dir(t.path().join("empty")).unwrap();
    let o = ok(t.path(), &["build-pool", "--dataset", "empty", "--out", "pool"]);
    assert!(stdout(&o).contains("total 0 patches"));
    assert!(t.path().join("pool/manifest.json").is_file());

    let again = semaug(t.path(), &["build-pool", "--dataset", "empty", "--out", "pool"]);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("--force"));
    ok(t.path(), &["build-pool", "--dataset", "empty", "--out", "pool", "--force"]);
}

#[test]
fn missing_dataset_is_an_io_error() {
    let t = tempfile::tempdir().unwrap();
    let o = semaug(t.path(), &["build-pool", "--dataset", "absent", "--out", "pool"]);
    assert_eq!(code(&o), 2);
    assert!(!t.path().join("pool").exists());
}

#[test]
fn invalid_settings_leave_no_output() {
    let t = fixture();
    let d = t.path();
    let o = semaug(d, &["augment", "--dataset", "data/train", "--pool", "pool", "--n-parts", "0", "--out", "aug"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("n_parts"));
    assert!(!d.join("aug").exists());

    let o = semaug(d, &["train", "--dataset", "data", "--lr=-1", "--out", "run"]);
    assert_eq!(code(&o), 1);
    assert!(!d.join("run").exists());

    fs::write(d.join("bad.toml"), "[train]\nbogus = 1\n").unwrap();
    let o = semaug(d, &["--config", "bad.toml", "train", "--dataset", "data", "--out", "run"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bogus"));
    assert!(!d.join("run").exists());

    let o = semaug(d, &["gen-toydata", "--parsing-scale", "0", "--out", "gen"]);
    assert_eq!(code(&o), 1);
    assert!(!d.join("gen").exists());
    assert!(fs::read_dir(d).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().ends_with(".partial")));
}

#[test]
fn config_file_supplies_settings_and_flags_override_it() {
    let t = fixture();
    let d = t.path();
    fs::write(
        d.join("cfg.toml"),
        "seed = 9\n[paths]\ndataset = \"data/train\"\npool = \"pool\"\n[augment]\nn_parts = 2\n",
    )
    .unwrap();
    ok(d, &["--config", "cfg.toml", "augment", "--out", "a"]);
    let car: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("a/sidecars/00000.json")).unwrap()).unwrap();
    assert_eq!(car["pastes"].as_array().unwrap().len(), 2);

    ok(d, &["--config", "cfg.toml", "augment", "--n-parts", "3", "--seed", "9", "--out", "b"]);
    let car: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("b/sidecars/00000.json")).unwrap()).unwrap();
    assert_eq!(car["pastes"].as_array().unwrap().len(), 3);
}

#[test]
fn augment_is_deterministic_and_replays_exactly() {
    let t = fixture();
    let d = t.path();
    let args = |out: &'static str| ["augment", "--dataset", "data/train", "--pool", "pool", "--seed", "5", "--out", out];
    ok(d, &args("a1"));
    ok(d, &args("a2"));
    let (a1, a2) = (tree(&d.join("a1")), tree(&d.join("a2")));
    assert_eq!(a1.len(), 8);
    assert_eq!(a1, a2);

    ok(d, &["augment", "--dataset", "data/train", "--pool", "pool", "--seed", "6", "--out", "other"]);
    assert_ne!(tree(&d.join("other")), a1);

    for stem in ["00000", "00003"] {
        let car = format!("a1/sidecars/{stem}.json");
        ok(d, &["augment", "--dataset", "data/train", "--pool", "pool", "--replay", &car, "--out", "re"]);
        let png = format!("images/{stem}.png");
        assert_eq!(fs::read(d.join("re").join(&png)).unwrap(), a1[Path::new(&png)]);
    }
}

#[test]
fn replay_against_another_pool_is_refused() {
    let t = fixture();
    let d = t.path();
    ok(d, &["augment", "--dataset", "data/train", "--pool", "pool", "--out", "a"]);
    ok(d, &["build-pool", "--dataset", "data/parsing", "--min-area", "5000", "--out", "pool2"]);
    let o = semaug(d, &["augment", "--dataset", "data/train", "--pool", "pool2", "--replay", "a/sidecars/00000.json", "--out", "re"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn train_baseline_and_asda_logs() {
    let t = fixture();
    let d = t.path();
    let o = ok(d, &["train", "--dataset", "data", "--epochs", "1", "--out", "base"]);
    assert!(stdout(&o).contains("epoch 0"));
    assert!(d.join("base/checkpoints/epoch_0001.ckpt").is_file());
    assert!(d.join("base/config.toml").is_file());
    let log = metrics(&d.join("base/metrics.jsonl"));
    assert!(log.iter().all(|r| r["l_g"].is_null()));

    ok(d, &["train", "--dataset", "data", "--pool", "pool", "--mode", "asda", "--epochs", "2", "--batch-size", "2", "--out", "adv"]);
    let log = metrics(&d.join("adv/metrics.jsonl"));
    assert_eq!(log.iter().filter(|r| r["kind"] == "step").count(), 4);
    assert_eq!(log.iter().filter(|r| r["kind"] == "epoch").count(), 2);
    for r in &log {
        let (l_d, l_g) = (r["l_d"].as_f64().unwrap(), r["l_g"].as_f64().unwrap());
        assert_eq!(l_g.to_bits(), (-l_d).to_bits());
    }
}

#[test]
fn train_twice_is_byte_identical_and_resume_matches() {
    let t = fixture();
    let d = t.path();
    let run = |out: &str| ok(d, &["train", "--dataset", "data", "--pool", "pool", "--mode", "sda", "--epochs", "2", "--batch-size", "2", "--every-epoch", "--out", out]);
    run("r1");
    run("r2");
    assert_eq!(tree(&d.join("r1")), tree(&d.join("r2")));

    ok(d, &["train", "--dataset", "data", "--pool", "pool", "--mode", "sda", "--epochs", "2", "--batch-size", "2", "--resume", "r1/checkpoints/epoch_0001.ckpt", "--out", "r3"]);
    assert_eq!(
        fs::read(d.join("r1/checkpoints/epoch_0002.ckpt")).unwrap(),
        fs::read(d.join("r3/checkpoints/epoch_0002.ckpt")).unwrap()
    );
    assert_eq!(fs::read(d.join("r1/metrics.jsonl")).unwrap(), fs::read(d.join("r3/metrics.jsonl")).unwrap());

    let o = semaug(d, &["train", "--dataset", "data", "--epochs", "2", "--lr", "0.5", "--resume", "r1/checkpoints/epoch_0001.ckpt", "--out", "r4"]);
    assert_ne!(code(&o), 0, "a checkpoint of another config must be rejected");
}

#[test]
fn train_without_pool_in_sda_mode_fails() {
    let t = fixture();
    let o = semaug(t.path(), &["train", "--dataset", "data", "--mode", "sda", "--pool", "nowhere", "--out", "r"]);
    assert_eq!(code(&o), 2);
    assert!(!t.path().join("r").exists());
}

fn write_ground_truth(d: &Path, mask_all: bool) {
    let mut preds = serde_json::Map::new();
    let mut mask = serde_json::Map::new();
    for e in fs::read_dir(d.join("data/test/meta")).unwrap() {
        let p = e.unwrap().path();
        let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        let stem = p.file_stem().unwrap().to_string_lossy().into_owned();
        let kps = meta["keypoints"].as_array().unwrap();
        preds.insert(stem.clone(), kps.iter().map(|k| serde_json::json!([k["x"], k["y"]])).collect());
        mask.insert(stem, kps.iter().map(|_| serde_json::Value::Bool(!mask_all)).collect());
    }
    fs::write(d.join("preds.json"), serde_json::Value::Object(preds).to_string()).unwrap();
    fs::write(d.join("mask.json"), serde_json::Value::Object(mask).to_string()).unwrap();
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let t = fixture();
    let d = t.path();
    write_ground_truth(d, false);
    let o = ok(d, &["eval", "--dataset", "data/test", "--predictions", "preds.json", "--invisible-only", "--out", "ev"]);
    let out = stdout(&o);
    let header = out.lines().find(|l| l.contains("Hea")).unwrap();
    let cols: Vec<&str> = header.split_whitespace().collect();
    assert_eq!(cols, ["Hea", "Sho", "Elb", "Wri", "Hip", "Kne", "Ank", "Total"]);
    let row = out.lines().nth(2).unwrap();
    assert_eq!(row.split_whitespace().last().unwrap(), "100.0");
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ev/pck.json")).unwrap()).unwrap();
    assert_eq!(rep["all"]["total"].as_f64().unwrap(), 100.0);
    assert!(rep.get("invisible").is_some());
}

#[test]
fn eval_with_everything_masked_reports_no_joints() {
    let t = fixture();
    let d = t.path();
    write_ground_truth(d, true);
    let o = semaug(d, &["eval", "--dataset", "data/test", "--predictions", "preds.json", "--mask", "mask.json"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("no joints evaluated"));
}

#[test]
fn eval_of_a_trained_run() {
    let t = fixture();
    let d = t.path();
    ok(d, &["train", "--dataset", "data", "--epochs", "1", "--out", "run"]);
    let o = ok(d, &["eval", "--dataset", "data/test"]);
    assert!(stdout(&o).contains("Total"));
}

#[test]
fn gradcheck_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let o = ok(t.path(), &["gradcheck"]);
    assert_eq!(stdout(&o).lines().filter(|l| l.ends_with(" ok")).count(), 3);
    assert_eq!(code(&semaug(t.path(), &["gradcheck", "--suite", "bogus"])), 1);

    for (fault, suite) in [("relu", "ops"), ("conv-weight", "end-to-end")] {
        let o = Command::new(BIN)
            .current_dir(t.path())
            .args(["gradcheck", "--suite", suite])
            .env("SEMAUG_GRADCHECK_FAULT", fault)
            .output()
            .unwrap();
        assert_eq!(code(&o), 3, "{fault}: {}", stderr(&o));
        assert!(stdout(&o).contains("FAIL"));
    }
}
