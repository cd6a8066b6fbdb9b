//! Runs the `odfield` binary end to end in temporary directories.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use odfield::data::{load_nifti, CoefficientVolume};

fn odfield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odfield"))
        .args(args)
        .arg("-q")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = odfield(args);
    assert!(
        out.status.success(),
        "odfield {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn phantom(dir: &Path, size: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("phantom-{size}-{seed}"));
    ok(&["phantom", "--out", s(&out), "--size", &size.to_string(), "--seed", &seed.to_string()]);
    out
}

fn data_args(p: &Path) -> Vec<String> {
    ["dwi.nii.gz", "dwi.bvec", "dwi.bval"]
        .iter()
        .zip(["--dwi", "--bvec", "--bval"])
        .flat_map(|(f, flag)| [flag.to_string(), p.join(f).to_str().unwrap().to_string()])
        .collect()
}

fn train(dir: &Path, p: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("run");
    let mut args: Vec<String> = vec!["train".into()];
    args.extend(data_args(p));
    args.extend(["--out", s(&out), "--epochs", "3", "--batch-size", "128"].map(String::from));
    args.extend(extra.iter().map(|a| a.to_string()));
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    out
}

#[test]
fn default_phantom_has_expected_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    ok(&["phantom", "--out", s(&out)]);
    let dwi = load_nifti(&out.join("dwi.nii.gz")).unwrap();
    assert_eq!(dwi.dims, vec![32, 32, 32, 70]);
    let truth = load_nifti(&out.join("truth.nii.gz")).unwrap();
    assert_eq!(truth.dims, vec![32, 32, 32, 45]);
    for f in ["dwi.bvec", "dwi.bval", "mask.nii.gz", "labels.nii.gz", "phantom.toml"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
}

#[test]
fn phantom_spec_with_unknown_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = phantom(dir.path(), 4, 0);
    let spec = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(p.join("phantom.toml")).unwrap();
    std::fs::write(&spec, format!("colour = \"red\"\n{text}")).unwrap();
    let out = odfield(&["phantom", "--spec", s(&spec), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["phantom", "--out", s(&a), "--size", "6", "--seed", "7"]);
    ok(&["phantom", "--out", s(&b), "--size", "6", "--seed", "7"]);
    for f in ["dwi.nii.gz", "truth.nii.gz", "dwi.bvec"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn existing_outputs_need_force() {
    let dir = tempfile::tempdir().unwrap();
    let p = phantom(dir.path(), 4, 0);
    let again = odfield(&["phantom", "--out", s(&p), "--size", "4"]);
    assert_eq!(again.status.code(), Some(1));
    ok(&["phantom", "--out", s(&p), "--size", "4", "--force"]);
}

#[test]
fn train_infer_sample_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = phantom(dir.path(), 6, 1);
    let run = train(dir.path(), &p, &["--seed", "3"]);
    for f in ["model.ckpt", "loss.csv", "config.toml", "train.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let loss = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 4);
    let config = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(config.contains("seed = 3"));

    let ckpt = run.join("model.ckpt");
    let coeffs = dir.path().join("coeffs.nii.gz");
    ok(&["infer", "--checkpoint", s(&ckpt), "--out", s(&coeffs)]);
    let img = load_nifti(&coeffs).unwrap();
    assert_eq!(img.dims, vec![6, 6, 6, 45]);
    assert!(CoefficientVolume::from_nifti(&img).is_ok());

    let fine = dir.path().join("fine.nii.gz");
    ok(&["infer", "--checkpoint", s(&ckpt), "--out", s(&fine), "--upsample", "2"]);
    assert_eq!(load_nifti(&fine).unwrap().dims, vec![12, 12, 12, 45]);

    let coords = dir.path().join("pts.txt");
    std::fs::write(&coords, "0.5 0.5 0.5\n0.1,0.2,0.3\n").unwrap();
    let csv = dir.path().join("pts.csv");
    ok(&["infer", "--checkpoint", s(&ckpt), "--out", s(&csv), "--coords", s(&coords)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with(|c: char| c.is_alphabetic())).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].split(',').count(), 3 + 45);

    let sample = |out: &Path, n: &str| {
        let mut args: Vec<String> = vec!["sample".into(), "--checkpoint".into(), s(&ckpt).into()];
        args.extend(data_args(&p));
        args.extend(["-n", n, "--seed", "4", "--out", s(out)].map(String::from));
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    };
    let (s1, s2) = (dir.path().join("s1"), dir.path().join("s2"));
    sample(&s1, "20");
    sample(&s2, "20");
    assert_eq!(
        std::fs::read(s1.join("uncertainty.nii.gz")).unwrap(),
        std::fs::read(s2.join("uncertainty.nii.gz")).unwrap()
    );
    let single = dir.path().join("single");
    sample(&single, "1");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(single.join("sample.json")).unwrap()).unwrap();
    assert_eq!(summary["single_sample"], serde_json::Value::Bool(true), "{summary}");
}

#[test]
fn missing_mask_falls_back_to_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let p = phantom(dir.path(), 4, 2);
    let out = dir.path().join("shls.nii.gz");
    let mut args: Vec<String> = vec!["fit-shls".into()];
    args.extend(data_args(&p));
    args.extend(["--out", s(&out)].map(String::from));
    let res = Command::new(env!("CARGO_BIN_EXE_odfield"))
        .args(&args)
        .output()
        .unwrap();
    assert!(res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).to_lowercase().contains("mask"));
    assert_eq!(load_nifti(&out).unwrap().dims, vec![4, 4, 4, 45]);
}

#[test]
fn train_rejects_unknown_config_key() {
    let dir = tempfile::tempdir().unwrap();
    let p = phantom(dir.path(), 4, 0);
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "version = 1\n[train]\nepochs = 2\nmomentum = 0.9\n").unwrap();
    let mut args: Vec<String> = vec!["train".into(), "--config".into(), s(&cfg).into()];
    args.extend(data_args(&p));
    args.extend(["--out", s(&dir.path().join("r"))].map(String::from));
    let out = odfield(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("momentum"));
}

#[test]
fn metrics_identity_and_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let a = phantom(dir.path(), 8, 0);
    let b = phantom(dir.path(), 6, 0);
    let truth = a.join("truth.nii.gz");
    let out = dir.path().join("m");
    ok(&["metrics", "--ref", s(&truth), "--test", s(&truth), "--out", s(&out), "--png"]);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!((summary["median"].as_f64().unwrap() - 1.0).abs() < 1e-9, "{summary}");
    assert!(out.join("report.tsv").exists());
    assert!(std::fs::read_dir(&out).unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "png")));

    let bad = odfield(&[
        "metrics",
        "--ref",
        s(&truth),
        "--test",
        s(&b.join("truth.nii.gz")),
        "--out",
        s(&dir.path().join("m2")),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn bench_rejects_multiple_threads() {
    let dir = tempfile::tempdir().unwrap();
    let out = odfield(&["bench", "--threads", "2", "--out", s(&dir.path().join("b.json"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(odfield(&["phantom"]).status.code(), Some(1));
    assert_eq!(odfield(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(odfield(&["--help"]).status.code(), Some(0));
}
