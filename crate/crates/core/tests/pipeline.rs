use std::fs;
use std::path::Path;

use chexfusion::cli;
use chexfusion::data::{generate_synthetic, load_dataset, save_dataset, SyntheticConfig};
use chexfusion::model::load_checkpoint;

const TINY: [&str; 9] = [
    "synthetic.studies=40",
    "stage1.epochs=1",
    "stage2.epochs=1",
    "concat.epochs=1",
    "selftrain.iterations=1",
    "model.dim=16",
    "model.ff_dim=24",
    "model.stage_widths=[8,12,16]",
    "ablate.losses=[\"bce\"]",
];

fn cli_in(dir: &Path, extra: &[&str], cmd: &[&str]) -> i32 {
    let mut args = vec!["chexfusion".to_string(), "--out".into(), dir.display().to_string()];
    for s in TINY.iter().chain(extra) {
        args.push("--set".into());
        args.push(s.to_string());
    }
    args.extend(cmd.iter().map(|s| s.to_string()));
    cli::run(args)
}

#[test]
fn generator_is_seeded() {
    let a = generate_synthetic(&SyntheticConfig::with_classes(12, 30, 4)).unwrap().0;
    let b = generate_synthetic(&SyntheticConfig::with_classes(12, 30, 4)).unwrap().0;
    let c = generate_synthetic(&SyntheticConfig::with_classes(12, 30, 5)).unwrap().0;
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn dataset_round_trips_through_disk() {
    let (ds, _) = generate_synthetic(&SyntheticConfig::with_classes(6, 25, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    let manifest = fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), ds.num_views());
}

#[test]
fn every_command_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for cmd in ["gen-data", "train-backbone", "train-fusion", "eval", "baseline", "self-train", "ablate"] {
        assert_eq!(cli_in(d, &[], &[cmd]), 0, "{cmd} failed");
        assert!(d.join(format!("{cmd}.config")).exists());
    }
    for f in ["stage1.ckpt", "stage2.ckpt", "selftrain.ckpt", "concat.ckpt", "eval.report.json", "baseline.report.txt"] {
        assert!(d.join(f).exists(), "missing {f}");
    }
    let table = fs::read_to_string(d.join("baseline.report.txt")).unwrap();
    assert!(table.contains("w_f=0.3") && table.contains("concat+gap"));

    // a single-view checkpoint evaluates too
    let s1 = d.join("stage1.ckpt").display().to_string();
    assert_eq!(cli_in(d, &[], &["eval", "--checkpoint", &s1]), 0);
    assert!(load_checkpoint(&d.join("stage2.ckpt")).unwrap().contains("fusion.pad"));
    assert!(!load_checkpoint(&d.join("stage1.ckpt")).unwrap().contains("fusion.pad"));
}

#[test]
fn eval_rejects_a_class_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(cli_in(d, &[], &["gen-data"]), 0);
    assert_eq!(cli_in(d, &[], &["train-backbone"]), 0);
    let other = tempfile::tempdir().unwrap();
    assert_eq!(cli_in(other.path(), &["synthetic.classes=6"], &["gen-data"]), 0);
    let data = other.path().join("data").display().to_string();
    let ckpt = d.join("stage1.ckpt").display().to_string();
    assert_eq!(cli_in(d, &[], &["eval", "--data", &data, "--checkpoint", &ckpt]), 1);
}

#[test]
fn bad_configuration_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli_in(dir.path(), &["stage1.not_a_key=1"], &["gen-data"]), 2);
    assert_eq!(cli_in(dir.path(), &["stage1.epochs=0"], &["gen-data"]), 2);
}
