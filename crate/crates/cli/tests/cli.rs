use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cst_core::config::RunConfig;
use cst_core::hsi::{load_cube, PatchProtocol};
use cst_core::metrics::CSV_COLUMNS;

fn cst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cst")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, side: usize, bands: usize) -> std::path::PathBuf {
    let out = dir.join(name);
    let (s, b) = (side.to_string(), bands.to_string());
    let o = cst(&[
        "synth",
        "--h",
        &s,
        "--w",
        &s,
        "--b",
        &b,
        "--seed",
        "1",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn synth_is_deterministic_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a.hsc", 32, 8);
    let b = synth(dir.path(), "b.hsc", 32, 8);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(load_cube(&a).unwrap().dims(), (32, 32, 8));
    let o = cst(&[
        "synth",
        "--h",
        "32",
        "--w",
        "32",
        "--b",
        "0",
        "--out",
        p(&dir.path().join("z")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("positive"));
}

#[test]
fn prepare_counts_match_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let cube = synth(dir.path(), "c.hsc", 128, 8);
    let out1 = dir.path().join("d1");
    let out2 = dir.path().join("d2");
    for out in [&out1, &out2] {
        let o = cst(&[
            "prepare",
            "--cube",
            p(&cube),
            "--protocol",
            "desk",
            "--scale",
            "2",
            "--seed",
            "3",
            "--out-dir",
            p(out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let manifest = fs::read_to_string(out1.join("manifest.tsv")).unwrap();
    assert_eq!(manifest, fs::read_to_string(out2.join("manifest.tsv")).unwrap());
    let proto = PatchProtocol::desk(128, 128, 2);
    let n_train = proto.train_origins().len();
    let n_val = proto.val_count(n_train);
    let count = |split: &str| {
        manifest
            .lines()
            .filter(|l| l.starts_with(&format!("{}\t", split)))
            .count()
    };
    assert_eq!(count("test"), proto.test_count);
    assert_eq!(count("val"), n_val);
    assert_eq!(count("train"), n_train - n_val);
    assert!(manifest.lines().skip(1).all(|l| l.ends_with("bicubic-x2-aa")));
    let o = cst(&[
        "prepare",
        "--cube",
        p(&cube),
        "--scale",
        "3",
        "--out-dir",
        p(&dir.path().join("d3")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_eval_infer_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cube = synth(root, "c.hsc", 64, 4);
    let data = root.join("data");
    let o = cst(&["prepare", "--cube", p(&cube), "--scale", "2", "--out-dir", p(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let mut run = RunConfig::desk(4, 2, 64);
    run.model.channels = 8;
    run.train.max_steps = Some(3);
    let cfg = root.join("run.cfg");
    run.save(&cfg).unwrap();
    let out = root.join("run");
    let o = cst(&[
        "train",
        "--config",
        p(&cfg),
        "--data-dir",
        p(&data),
        "--out-dir",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["best.ckpt", "last.ckpt", "train.log", "run.cfg"] {
        assert!(out.join(f).is_file(), "{}", f);
    }
    let log = fs::read_to_string(out.join("train.log")).unwrap();
    assert!(log.starts_with("epoch\tlr\tl1\tsam\tgrad\ttotal\tval_psnr\tval_sam\n"));

    let report = root.join("report.csv");
    let ck = out.join("best.ckpt");
    let emit = root.join("emit");
    let o = cst(&[
        "eval",
        "--checkpoint",
        p(&ck),
        "--data-dir",
        p(&data),
        "--report",
        p(&report),
        "--emit",
        p(&emit),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&report).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
    assert_eq!(lines.count(), 2 + 1);
    assert!(emit.join("sr_0.hsc").is_file() && emit.join("spec_1.csv").is_file());

    let lr = data.join("test_0000_lr.hsc");
    let sr = root.join("sr.hsc");
    let o = cst(&["infer", "--checkpoint", p(&ck), "--in", p(&lr), "--out", p(&sr)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lr_dims = load_cube(&lr).unwrap().dims();
    assert_eq!(load_cube(&sr).unwrap().dims(), (lr_dims.0 * 2, lr_dims.1 * 2, 4));

    let wrong = synth(root, "w.hsc", 16, 5);
    let o = cst(&[
        "infer",
        "--checkpoint",
        p(&ck),
        "--in",
        p(&wrong),
        "--out",
        p(&root.join("x.hsc")),
    ]);
    assert_eq!(code(&o), 2);
    let o = cst(&[
        "infer",
        "--checkpoint",
        p(&root.join("missing.ckpt")),
        "--in",
        p(&lr),
        "--out",
        p(&sr),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_with_unknown_key_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "[model]\ndepth = 3\n").unwrap();
    let o = cst(&["params", "--config", p(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("depth"));
}

#[test]
fn flops_table_for_full_model() {
    let o = cst(&["flops"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("csa.attention") && text.contains("cse.attention_map"));
    let total: f64 = text
        .lines()
        .find(|l| l.starts_with("total"))
        .and_then(|l| l.split_whitespace().nth(1))
        .unwrap()
        .parse()
        .unwrap();
    assert!((total / 21.287e9 - 1.0).abs() < 0.15, "{}", total);
    let o = cst(&["params"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn selfcheck_passes() {
    let o = cst(&["selfcheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(!String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn simcurve_writes_two_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cube = synth(dir.path(), "c.hsc", 16, 6);
    let out = dir.path().join("sim");
    let o = cst(&["simcurve", "--cube", p(&cube), "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    let band = fs::read_to_string(out.join("band_similarity.csv")).unwrap();
    assert_eq!(band.lines().count(), 1 + 6);
    assert!(band.lines().nth(1).unwrap().starts_with("0,1.0"));
    let pixel = fs::read_to_string(out.join("pixel_similarity.csv")).unwrap();
    assert_eq!(pixel.lines().count(), 1 + 16 * 16);
}
