use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use repapq::error::Error;
use repapq::pipeline::{self, MANIFEST_FILE, REPORT_FILE, WEIGHTS_FILE};
use repapq::report::{BOXPLOT_HEADER, CLIP_HEADER};
use repapq::weights;
use repapq_core::topology::Topology;
use tempfile::TempDir;

fn repapq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_repapq")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = repapq(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        ok(&["gen-data", "--train", "600", "--test", "200", "--out", s(&root.join("data"))]);
        Self { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn train(&self, out: &str) -> PathBuf {
        let out = self.path(out);
        ok(&[
            "train-desk",
            "--data",
            s(&self.path("data/train.bin")),
            "--train-size",
            "512",
            "--epochs",
            "1",
            "--out",
            s(&out),
        ]);
        out
    }
}

#[test]
fn end_to_end_commands() {
    let fx = Fixture::new();
    let fp = fx.train("fp");
    for f in [MANIFEST_FILE, WEIGHTS_FILE, "train.log", "train.json"] {
        assert!(fp.join(f).exists(), "{f}");
    }
    let again = fx.train("fp2");
    assert_eq!(
        std::fs::read(fp.join(WEIGHTS_FILE)).unwrap(),
        std::fs::read(again.join(WEIGHTS_FILE)).unwrap()
    );

    let fused = fx.path("fused");
    ok(&["fuse", "--model", s(&fp), "--out", s(&fused)]);
    let topo = std::fs::read_to_string(fused.join(MANIFEST_FILE)).unwrap();
    assert!(topo.contains("fused = true"), "{topo}");

    let q = fx.path("q");
    let train = fx.path("data/train.bin");
    let test = fx.path("data/test.bin");
    ok(&[
        "quantize", "--model", s(&fp), "--data", s(&train), "--eval-data", s(&test), "--scheme", "W8A8", "--iters", "0",
        "--calib-size", "64", "--out", s(&q),
    ]);
    for f in [MANIFEST_FILE, WEIGHTS_FILE, REPORT_FILE, "deploy.rapq", "calib.log"] {
        assert!(q.join(f).exists(), "{f}");
    }

    let ev = fx.path("ev");
    let out = ok(&[
        "eval", "--model", s(&q), "--data", s(&test), "--reference", s(&fp), "--deploy", s(&q.join("deploy.rapq")), "--out",
        s(&ev),
    ]);
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let written: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    assert_eq!(printed, written);

    let an = fx.path("an");
    ok(&[
        "analyze", "--model", s(&fp), "--data", s(&test), "--samples", "32", "--boxplot", "--clip-ratios", "0.01,0.05",
        "--out", s(&an),
    ]);
    let boxplot = std::fs::read_to_string(an.join("boxplot.csv")).unwrap();
    assert_eq!(boxplot.lines().next(), Some(BOXPLOT_HEADER));
    assert_eq!(boxplot.lines().count(), 1 + Topology::desk_reference().stages.iter().map(|s| s.blocks.len()).sum::<usize>());
    let clip = std::fs::read_to_string(an.join("clip.csv")).unwrap();
    assert_eq!(clip.lines().next(), Some(CLIP_HEADER));
    assert_eq!(clip.lines().count(), 3);
}

#[test]
fn lossless_width_matches_float() {
    let fx = Fixture::new();
    let fp = fx.train("fp");
    let q = fx.path("q");
    ok(&[
        "quantize", "--model", s(&fp), "--data", s(&fx.path("data/train.bin")), "--eval-data",
        s(&fx.path("data/test.bin")), "--scheme", "W32A32", "--iters", "0", "--calib-size", "64", "--out", s(&q),
    ]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(q.join(REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(report["final"]["top1"], report["final"]["fp_top1"]);
    let mae = report["final"]["per_block_mae"].as_array().unwrap();
    assert!(mae[0].as_f64().unwrap() < 1e-6, "{mae:?}");
    assert!(!q.join("deploy.rapq").exists());
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    assert_eq!(repapq(&["quantize", "--bogus"]).status.code(), Some(2));
    let missing = dir.path().join("nope");
    assert_eq!(repapq(&["fuse", "--model", s(&missing), "--out", s(dir.path())]).status.code(), Some(4));
    let out = repapq(&[
        "verify", "--prop1-samples", "20000", "--prop2-samples", "100000", "--out", s(&dir.path().join("v")),
    ]);
    // The clipping power-mean claim does not hold, so verification reports failure.
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("v/verify.csv").exists());
}

#[test]
fn empty_weights_table_reports_missing_tensor() {
    let dir = TempDir::new().unwrap();
    let graph = Topology::desk_reference().build().unwrap();
    pipeline::save_model(&graph, dir.path()).unwrap();
    weights::write_tensors(&dir.path().join(WEIGHTS_FILE), &[]).unwrap();
    let err = pipeline::load_model(dir.path()).unwrap_err();
    assert!(matches!(root(&err), Error::MissingTensor(_)), "{err}");
}

fn root(e: &Error) -> &Error {
    match e {
        Error::Stage { source, .. } => root(source),
        other => other,
    }
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "scheme = \"W4A4\"\niters = 0\ncalib_size = 32\n").unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "iterations = 3\n").unwrap();
    let fx = Fixture::new();
    let fp = fx.train("fp");
    let (q, q2) = (fx.path("q"), fx.path("q2"));
    let (train, test) = (fx.path("data/train.bin"), fx.path("data/test.bin"));
    let base = ["quantize", "--model", s(&fp), "--data", s(&train), "--eval-data", s(&test)];
    let mut args = base.to_vec();
    args.extend(["--config", s(&cfg), "--scheme", "W6A6", "--out", s(&q)]);
    ok(&args);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(q.join(REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(report["scheme"], "W6A6");
    assert_eq!(report["calib_samples"], 32);
    let mut args = base.to_vec();
    args.extend(["--config", s(&bad), "--out", s(&q2)]);
    assert_eq!(repapq(&args).status.code(), Some(2));
}
