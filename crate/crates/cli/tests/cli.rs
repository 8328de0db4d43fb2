use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use sgdrop_core::data::{read_dataset_dir, read_kv, BOXES_HEADER};
use sgdrop_core::metrics::{saliency_bbox, MetricsReport, CSV_HEADER};
use sgdrop_core::nn::checkpoint;

const SMALL: [&str; 6] = ["--set", "synth.n_train=10", "--set", "synth.n_test=10", "--set", "epochs=1"];

fn sgdrop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgdrop")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = sgdrop(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn rows(dir: &Path) -> Vec<MetricsReport> {
    let text = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    lines.map(|l| MetricsReport::parse_csv_row(l).unwrap()).collect()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn smoke_run_is_fast_and_logs_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let mut args = vec!["train", "--out", p(dir.path())];
    args.extend(SMALL);
    ok(&args);
    assert!(start.elapsed().as_secs_f64() < 5.0);
    let r = rows(dir.path());
    assert_eq!(r.len(), 2);
    assert_eq!((r[0].split.as_str(), r[1].split.as_str()), ("train", "test"));
    assert!(r[1].area_ratio.is_some() && r[1].hit_ratio.is_some() && r[0].area_ratio.is_none());
    for f in ["summary.kv", "config.kv", "checkpoints/latest.ckpt", "checkpoints/best.ckpt"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(&[
            "train", "--deterministic", "--seed", "4", "--out", p(d.path()),
            "--set", "synth.n_train=64", "--set", "synth.n_test=32", "--set", "epochs=2",
            "--set", "regularizer=sgdrop", "--set", "sgdrop.rho=0.05",
        ]);
    }
    let csv = fs::read(a.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, fs::read(b.path().join("metrics.csv")).unwrap());
    assert_eq!(
        fs::read(a.path().join("checkpoints/latest.ckpt")).unwrap(),
        fs::read(b.path().join("checkpoints/latest.ckpt")).unwrap()
    );
}

#[test]
fn rho_zero_matches_vanilla_every_epoch() {
    let v = tempfile::tempdir().unwrap();
    let s = tempfile::tempdir().unwrap();
    let common = ["--deterministic", "--set", "synth.n_train=64", "--set", "synth.n_test=32", "--set", "epochs=3", "--set", "lr=0.001"];
    let mut args = vec!["train", "--out", p(v.path())];
    args.extend(common);
    ok(&args);
    let mut args = vec!["train", "--out", p(s.path()), "--set", "regularizer=sgdrop", "--set", "sgdrop.rho=0"];
    args.extend(common);
    ok(&args);
    for (a, b) in rows(v.path()).iter().zip(rows(s.path()).iter()) {
        assert_eq!((a.loss.to_bits(), a.accuracy.to_bits()), (b.loss.to_bits(), b.accuracy.to_bits()));
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sgdrop(&["train", "--set", "bogus=1"]).status.code(), Some(1));
    assert_eq!(sgdrop(&["train", "--set", "epochs=0"]).status.code(), Some(1));
    assert_eq!(sgdrop(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(sgdrop(&["eval", "--checkpoint", "/nonexistent/ckpt"]).status.code(), Some(1));
    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let out = sgdrop(&["eval", "--checkpoint", p(&junk), "--out", p(dir.path()), "--set", "synth.n_train=10", "--set", "synth.n_test=10"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn eval_saliency_and_transfer_from_a_trained_run() {
    let run = tempfile::tempdir().unwrap();
    let data = ["--set", "synth.n_train=64", "--set", "synth.n_test=40", "--set", "epochs=2", "--set", "lr=0.001"];
    let mut args = vec!["train", "--out", p(run.path()), "--seed", "3"];
    args.extend(data);
    ok(&args);
    let last = rows(run.path()).pop().unwrap();
    let ckpt = run.path().join("checkpoints/latest.ckpt");
    let config = run.path().join("config.kv");

    let ev = tempfile::tempdir().unwrap();
    ok(&["eval", "--config", p(&config), "--checkpoint", p(&ckpt), "--out", p(ev.path())]);
    let kv = read_kv(&ev.path().join("eval.kv")).unwrap();
    assert_eq!(kv["accuracy"].parse::<f64>().unwrap(), last.accuracy);
    assert_eq!(kv["loss"].parse::<f64>().unwrap(), last.loss);
    assert!(kv.contains_key("hit_ratio"));

    let sal = tempfile::tempdir().unwrap();
    ok(&["saliency", "--config", p(&config), "--checkpoint", p(&ckpt), "--indices", "0,5,39", "--method", "gradcam", "--out", p(sal.path())]);
    let boxes = fs::read_to_string(sal.path().join("saliency/boxes.csv")).unwrap();
    let mut lines = boxes.lines();
    assert_eq!(lines.next(), Some(BOXES_HEADER));
    for (line, i) in lines.zip([0usize, 5, 39]) {
        let pgm = fs::read(sal.path().join(format!("saliency/sample_{i:05}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
        let values: Vec<f64> = pgm[pgm.len() - 1024..].iter().map(|&b| b as f64 / 255.0).collect();
        let map = sgdrop_core::attribution::SaliencyImage { height: 32, width: 32, values };
        let expected = match saliency_bbox(&map) {
            Some(b) => format!("{i},{},{},{},{}", b.x_min, b.y_min, b.x_max, b.y_max),
            None => format!("{i},,,,"),
        };
        assert_eq!(line, expected);
        assert!(sal.path().join(format!("saliency/sample_{i:05}_overlay.ppm")).is_file());
    }
    let bad = sgdrop(&["saliency", "--config", p(&config), "--checkpoint", p(&ckpt), "--indices", "40", "--out", p(sal.path())]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("0..40"));

    let tr = tempfile::tempdir().unwrap();
    let mut args = vec!["transfer", "--pretrained", p(&ckpt), "--out", p(tr.path()), "--set", "synth.seed=11"];
    args.extend(data);
    ok(&args);
    let before = checkpoint::load::<f32>(&ckpt).unwrap();
    let after = checkpoint::load::<f32>(&tr.path().join("checkpoints/latest.ckpt")).unwrap();
    for ((n, a), (m, b)) in before.iter().zip(&after) {
        assert_eq!(n, m);
        if n.starts_with("encoder.") {
            assert_eq!(a, b, "{n}");
        } else {
            assert_ne!(a, b, "{n}");
        }
    }
    assert_eq!(read_kv(&tr.path().join("summary.kv")).unwrap()["encoder_unchanged"], "true");
}

#[test]
fn synth_writes_a_reloadable_deterministic_dataset() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(&["synth", "--out", p(d.path()), "--set", "synth.n_train=30", "--set", "synth.n_test=12"]);
    }
    let boxes = fs::read_to_string(a.path().join("boxes.csv")).unwrap();
    assert_eq!(boxes.lines().count(), 1 + 42);
    for f in ["images.bin", "labels.bin", "boxes.csv", "meta.kv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let (train, test) = read_dataset_dir(a.path()).unwrap();
    assert_eq!((train.len(), test.len()), (30, 12));

    let run = tempfile::tempdir().unwrap();
    ok(&["train", "--out", p(run.path()), "--set", "dataset=dir", "--set", &format!("data_path={}", p(a.path())), "--set", "epochs=1"]);
    assert_eq!(rows(run.path()).len(), 2);
}

#[test]
fn bench_overhead_reports_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["bench-overhead", "--steps", "10", "--out", p(dir.path()), "--set", "synth.n_train=64", "--set", "synth.n_test=8"]);
    assert!(text.contains("ratio=") && text.contains("vanilla_self_ratio="));
    assert_eq!(sgdrop(&["bench-overhead", "--steps", "5"]).status.code(), Some(1));
}
