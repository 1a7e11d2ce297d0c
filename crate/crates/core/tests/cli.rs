//! The command-line binary, run as a subprocess.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use swt_hmm_edge::image_io::{read_bitmap, read_pgm};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swt-hmm-edge"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines()
        .find_map(|l| l.strip_prefix(key)?.strip_prefix('='))
}

#[test]
fn synth_step_writes_image_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("step.pgm");
    let o = run(&[
        "synth",
        "step",
        "--width",
        "64",
        "--height",
        "64",
        "--edge-col",
        "32",
        "--out",
        p(&img),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let image = read_pgm(&fs::read(&img).unwrap()).unwrap();
    assert_eq!((image.width(), image.height()), (64, 64));
    assert_eq!(image.get(31, 0), 0.0);
    assert_eq!(image.get(32, 0), 1.0);
    let truth = read_bitmap(&fs::read(dir.path().join("step.truth.pbm")).unwrap()).unwrap();
    for (i, &b) in truth.bits.iter().enumerate() {
        assert_eq!(b, i % 64 == 32);
    }
}

#[test]
fn synth_constant_has_empty_truth() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("c.pgm");
    let truth = dir.path().join("t.pbm");
    let o = run(&[
        "synth",
        "constant",
        "--value",
        "0.5",
        "--out",
        p(&img),
        "--truth",
        p(&truth),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let t = read_bitmap(&fs::read(&truth).unwrap()).unwrap();
    assert!(t.bits.iter().all(|b| !b));
}

#[test]
fn synth_rejects_bad_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.pgm");
    let o = run(&[
        "synth",
        "step",
        "--width",
        "8",
        "--edge-col",
        "8",
        "--out",
        p(&img),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!img.exists());
    let o = run(&[
        "synth",
        "ramp",
        "--edge-col",
        "2",
        "--ramp-width",
        "5",
        "--out",
        p(&img),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn detect_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("step.pgm");
    let edges = dir.path().join("edges.pbm");
    assert!(run(&["synth", "step", "--out", p(&img)]).status.success());
    let o = run(&[
        "detect",
        "--in",
        p(&img),
        "--out",
        p(&edges),
        "--scales",
        "2",
        "--model",
        "hmc",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(dir.path().join("edges.pbm.metrics.txt")).unwrap();
    for key in [
        "edge_count",
        "em_iterations",
        "final_log_likelihood",
        "model",
        "HL.1.sigma0",
        "HL.1.b1",
    ] {
        assert!(
            value(&metrics, key).is_some(),
            "missing {key} in\n{metrics}"
        );
    }
    assert!(metrics.ends_with('\n'));
    let o = run(&[
        "eval",
        "--map",
        p(&edges),
        "--truth",
        p(&dir.path().join("step.truth.pbm")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(value(&text, "f1"), Some("1"));
    assert_eq!(value(&text, "edge_count"), value(&metrics, "edge_count"));
}

#[test]
fn eval_identical_and_empty_maps() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("s.pgm");
    let truth = dir.path().join("s.truth.pbm");
    assert!(run(&[
        "synth",
        "step",
        "--width",
        "16",
        "--height",
        "8",
        "--out",
        p(&img)
    ])
    .status
    .success());
    let o = run(&[
        "eval",
        "--map",
        p(&truth),
        "--truth",
        p(&truth),
        "--tolerance",
        "0",
    ]);
    assert_eq!(value(&stdout(&o), "f1"), Some("1"));
    let empty = dir.path().join("e.pbm");
    let ci = dir.path().join("c.pgm");
    assert!(run(&[
        "synth",
        "constant",
        "--width",
        "16",
        "--height",
        "8",
        "--out",
        p(&ci),
        "--truth",
        p(&empty)
    ])
    .status
    .success());
    let o = run(&["eval", "--map", p(&empty), "--truth", p(&truth)]);
    let text = stdout(&o);
    assert_eq!(value(&text, "f1"), Some("0"));
    assert_eq!(value(&text, "precision"), Some("1"));
    assert_eq!(value(&text, "recall"), Some("0"));
}

#[test]
fn eval_rejects_dimension_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.pgm");
    let b = dir.path().join("b.pgm");
    assert!(run(&["synth", "step", "--width", "16", "--out", p(&a)])
        .status
        .success());
    assert!(run(&["synth", "step", "--width", "20", "--out", p(&b)])
        .status
        .success());
    let o = run(&[
        "eval",
        "--map",
        p(&dir.path().join("a.truth.pbm")),
        "--truth",
        p(&dir.path().join("b.truth.pbm")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("16x64"), "{}", stderr(&o));
}

#[test]
fn detect_rejects_zero_scales_naming_the_flag() {
    let o = run(&[
        "detect",
        "--in",
        "missing.pgm",
        "--out",
        "x.pbm",
        "--scales",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--scales"), "{}", stderr(&o));
}

#[test]
fn detect_reports_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.pbm");
    let o = run(&[
        "detect",
        "--in",
        p(&dir.path().join("nope.pgm")),
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.pgm"));
    assert!(!out.exists());
}

#[test]
fn params_file_reuse_and_pgm_output() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("s.pgm");
    assert!(run(&[
        "synth",
        "step",
        "--noise-sigma",
        "0.05",
        "--seed",
        "3",
        "--out",
        p(&img)
    ])
    .status
    .success());
    let first = dir.path().join("a.pgm");
    let params = dir.path().join("model.txt");
    let o = run(&[
        "detect",
        "--in",
        p(&img),
        "--out",
        p(&first),
        "--model",
        "hmt",
        "--params-out",
        p(&params),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = fs::read(&first).unwrap();
    assert!(bytes.starts_with(b"P5"));
    let second = dir.path().join("b.pgm");
    let o = run(&[
        "detect",
        "--in",
        p(&img),
        "--out",
        p(&second),
        "--model",
        "hmt",
        "--params-in",
        p(&params),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&second).unwrap(), bytes);
    let metrics = fs::read_to_string(dir.path().join("b.pgm.metrics.txt")).unwrap();
    assert_eq!(value(&metrics, "em_iterations"), Some("0"));
}

#[test]
fn dump_planes_and_json_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("s.pgm");
    assert!(run(&["synth", "step", "--out", p(&img)]).status.success());
    let planes = dir.path().join("planes");
    let json = dir.path().join("m.json");
    let o = run(&[
        "detect",
        "--in",
        p(&img),
        "--out",
        p(&dir.path().join("e.pbm")),
        "--scales",
        "2",
        "--include-diagonal",
        "--dump-planes",
        p(&planes),
        "--metrics-json",
        p(&json),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_dir(&planes).unwrap().count(), 6);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["edge_count"], 64);
    assert_eq!(v["training"].as_array().unwrap().len(), 6);
    assert!(v["params"]["HL.1.b1"].is_string());
}

#[test]
fn ascii_pgm_input_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.pgm");
    let mut text = String::from("P2\n# plain\n8 8\n9\n");
    for _ in 0..8 {
        text.push_str("0 0 0 0 9 9 9 9\n");
    }
    fs::write(&img, text).unwrap();
    let o = run(&[
        "detect",
        "--in",
        p(&img),
        "--out",
        p(&dir.path().join("e.pbm")),
        "--scales",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(value(&stdout(&o), "edge_count"), Some("8"));
}
