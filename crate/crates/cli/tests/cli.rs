//! The `metamorph` binary on small inputs: outputs, snapshots, exit codes.

use std::path::Path;
use std::process::{Command, Output};

use metamorph_core::kv::KvFile;
use metamorph_core::{load_gray, save_gray, Checkpoint, Metrics, ScalarField};

fn metamorph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metamorph"))
        .args(args)
        .arg("--quiet")
        .output()
        .expect("run metamorph")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn small_model() -> [&'static str; 6] {
    ["--mu", "1", "--T", "3", "--hidden", "1"]
}

#[test]
fn synth_register_infer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    ok(&metamorph(&["synth", "--n", "2", "--size", "64", "--seed", "5", "--out", s(&data)]));
    for f in ["manifest.txt", "target.png", "config.txt", "images/c_00000.png", "images/c_00001.png"] {
        assert!(data.join(f).is_file(), "{f}");
    }

    let src = data.join("images/c_00000.png");
    let tgt = data.join("target.png");
    let reg = d.join("reg");
    let mut args = vec!["register", "--source", s(&src), "--target", s(&tgt), "--max-iters", "4", "--record"];
    args.extend(small_model());
    args.extend(["--out", s(&reg)]);
    ok(&metamorph(&args));
    for f in [
        "config.txt", "energy.txt", "deformed.png", "shape_only.png", "diff.png", "panel.png", "params.ckpt",
        "metrics.txt", "fit.txt", "trajectory.bin", "fields/velocity_000.field", "fields/image_003.png",
    ] {
        assert!(reg.join(f).is_file(), "{f}");
    }
    let snapshot = KvFile::read(&reg.join("config.txt")).unwrap();
    assert_eq!(snapshot.get("command"), Some("register"));
    assert_eq!(snapshot.get("config.steps"), Some("3"));
    assert_eq!(snapshot.get("config.max_iters"), Some("4"));
    let energy = std::fs::read_to_string(reg.join("energy.txt")).unwrap();
    assert_eq!(energy.lines().count(), 5);
    let metrics = Metrics::read(&reg.join("metrics.txt")).unwrap();
    assert!(metrics.ssd <= metrics.initial_ssd);
    assert!(metrics.timing("fit").is_some());

    // inference with the saved parameters reproduces the registered image
    let inf = d.join("inf");
    ok(&metamorph(&["infer", "--checkpoint", s(&reg.join("params.ckpt")), "--source", s(&src), "--out", s(&inf)]));
    let a: ScalarField = load_gray(&reg.join("deformed.png")).unwrap();
    let b: ScalarField = load_gray(&inf.join("deformed.png")).unwrap();
    assert_eq!(a, b);
    let m = Metrics::read(&inf.join("metrics.txt")).unwrap();
    assert_eq!(m.ssd, Metrics::read(&reg.join("metrics.txt")).unwrap().ssd);

    let out = metamorph(&["eval", "--output", s(&reg.join("deformed.png")), "--target", s(&tgt), "--source", s(&src)]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("ssd_reduction"));

    let mask = d.join("mask.png");
    save_gray(&ScalarField::from_fn(64, 64, |y, _| (y < 20) as u8 as f64), &mask).unwrap();
    let ev = d.join("eval");
    ok(&metamorph(&[
        "eval", "--output", s(&src), "--target", s(&src), "--pred-mask", s(&mask), "--ref-mask", s(&mask),
        "--out", s(&ev),
    ]));
    let m = Metrics::read(&ev.join("metrics.txt")).unwrap();
    assert_eq!((m.ssd, m.dice), (0.0, Some(1.0)));
}

#[test]
fn train_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    ok(&metamorph(&["synth", "--n", "3", "--size", "64", "--out", s(&data)]));
    let ckpt = d.join("model/m.ckpt");
    let target = data.join("target.png");
    let base = ["train", "--manifest", s(&data), "--target", s(&target), "--batch-size", "2"];
    let mut first = base.to_vec();
    first.extend(small_model());
    first.extend(["--epochs", "1", "--checkpoint", s(&ckpt)]);
    ok(&metamorph(&first));
    let c = Checkpoint::<f64>::load(&ckpt).unwrap();
    assert_eq!(c.meta.get("epochs_completed"), Some("1"));
    assert!(c.adam.is_some());
    assert!(d.join("model/epochs.txt").is_file());

    let mut second = base.to_vec();
    second.extend(small_model());
    second.extend(["--epochs", "2", "--resume", "--checkpoint", s(&ckpt)]);
    ok(&metamorph(&second));
    let c = Checkpoint::<f64>::load(&ckpt).unwrap();
    assert_eq!(c.meta.get("epochs_completed"), Some("2"));
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let a = d.join("a.png");
    let b = d.join("b.png");
    save_gray(&ScalarField::from_fn(16, 16, |y, x| ((x + y) % 2) as f64), &a).unwrap();
    save_gray(&ScalarField::from_fn(12, 16, |_, _| 0.5), &b).unwrap();
    let out = s(&d.join("out")).to_string();

    // usage error: missing required flag
    assert_eq!(code(&metamorph(&["register", "--source", s(&a), "--target", s(&a), "--out", &out])), 2);
    let shape = metamorph(&["register", "--source", s(&a), "--target", s(&b), "--mu", "1", "--out", &out]);
    assert_eq!(code(&shape), 3);
    assert!(String::from_utf8_lossy(&shape.stderr).starts_with("error[shape]"));
    assert_eq!(code(&metamorph(&["register", "--source", s(&a), "--target", s(&a), "--mu", "-1", "--out", &out])), 4);
    let missing = d.join("missing.png");
    assert_eq!(code(&metamorph(&["eval", "--output", s(&missing), "--target", s(&a)])), 7);
    let bad = d.join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    assert_eq!(code(&metamorph(&["infer", "--checkpoint", s(&bad), "--source", s(&a), "--out", &out])), 8);
}
