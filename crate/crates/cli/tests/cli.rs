use std::path::Path;
use std::process::Command;

use wdst_core::imgcore::save_image;
use wdst_core::{ColorImage, ColorSpace, ImagePlane};

fn wdst() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_wdst"));
    c.env("WDST_THREADS", "1");
    c
}

fn texture(w: usize, h: usize, phase: f64) -> ColorImage {
    let plane = |k: f64| {
        ImagePlane::from_fn(w, h, |x, y| {
            0.5 + 0.3 * ((x as f64 * 0.7 + phase + k).sin() * (y as f64 * 0.45).cos())
        })
    };
    ColorImage::new([plane(0.0), plane(0.4), plane(0.9)], ColorSpace::Rgb).unwrap()
}

fn write_inputs(dir: &Path) {
    save_image(&texture(24, 20, 0.0), dir.join("content.png")).unwrap();
    save_image(&texture(24, 20, 0.3), dir.join("style.png")).unwrap();
    save_image(&texture(24, 20, 0.1), dir.join("gt.png")).unwrap();
    std::fs::write(
        dir.join("cfg.json"),
        r#"{"levels": 1, "wavelet": "haar", "wdst": {"max_iters_per_level": [3]}}"#,
    )
    .unwrap();
}

#[test]
fn fuse_writes_image_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_inputs(d);
    std::fs::write(d.join("scores.json"), r#"{"A_r": 0.25}"#).unwrap();
    let status = wdst()
        .args(["fuse", "--content"])
        .arg(d.join("content.png"))
        .arg("--style")
        .arg(d.join("style.png"))
        .arg("--gt")
        .arg(d.join("gt.png"))
        .arg("--out")
        .arg(d.join("r.png"))
        .arg("--config")
        .arg(d.join("cfg.json"))
        .arg("--scores")
        .arg(d.join("scores.json"))
        .arg("--trace")
        .status()
        .unwrap();
    assert!(status.success());
    assert!(d.join("r.png").exists());
    let report = std::fs::read_to_string(d.join("r.report.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = report
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(lines.iter().all(|l| l["schema"] == 1));
    let kinds: Vec<&str> = lines
        .iter()
        .map(|l| l["record"].as_str().unwrap())
        .collect();
    assert_eq!(kinds.iter().filter(|k| **k == "subband").count(), 3);
    for stage in ["decompose", "lse", "wdst", "synthesize", "metrics"] {
        assert!(
            lines
                .iter()
                .any(|l| l["record"] == "stage" && l["stage"] == stage),
            "{stage}"
        );
    }
    let ar = lines
        .iter()
        .find(|l| l["record"] == "metric" && l["image"] == "A_r")
        .unwrap();
    assert_eq!(ar["external_score"], 0.25);
    assert!(ar["psnr"].as_f64().unwrap() > 10.0);
    let trace = std::fs::read_to_string(d.join("r.trace.jsonl")).unwrap();
    assert!(trace.lines().count() > 0);
}

#[test]
fn missing_flag_is_usage_error() {
    let out = wdst()
        .args(["fuse", "--content", "a.png"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    let help = wdst().arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn exit_codes_separate_config_from_io() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_inputs(d);
    let missing = wdst()
        .args(["fuse", "--content"])
        .arg(d.join("nope.png"))
        .arg("--style")
        .arg(d.join("style.png"))
        .arg("--out")
        .arg(d.join("r.png"))
        .status()
        .unwrap();
    assert_eq!(missing.code(), Some(2));
    let bad_filter = wdst()
        .args(["swt-dump", "--in"])
        .arg(d.join("content.png"))
        .arg("--out")
        .arg(d.join("dump"))
        .args(["--filter", "db7"])
        .status()
        .unwrap();
    assert_eq!(bad_filter.code(), Some(1));
    std::fs::write(d.join("bad.json"), r#"{"levles": 2}"#).unwrap();
    let bad_cfg = wdst()
        .args(["swt-dump", "--in"])
        .arg(d.join("content.png"))
        .arg("--out")
        .arg(d.join("dump"))
        .arg("--config")
        .arg(d.join("bad.json"))
        .status()
        .unwrap();
    assert_eq!(bad_cfg.code(), Some(1));
}

#[test]
fn swt_dump_writes_every_band() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_inputs(d);
    let status = wdst()
        .args(["swt-dump", "--in"])
        .arg(d.join("content.png"))
        .arg("--out")
        .arg(d.join("dump"))
        .args(["--levels", "2", "--histograms"])
        .status()
        .unwrap();
    assert!(status.success());
    let count = |ext: &str| {
        std::fs::read_dir(d.join("dump"))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().to_string_lossy().ends_with(ext))
            .count()
    };
    assert_eq!(count(".pgm"), 7);
    assert_eq!(count(".hist.csv"), 7);
    assert!(d.join("dump/scales.txt").exists());
}

#[test]
fn substitute_and_pd_curve() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_inputs(d);
    let status = wdst()
        .args(["substitute", "--content"])
        .arg(d.join("content.png"))
        .arg("--style")
        .arg(d.join("style.png"))
        .arg("--gt")
        .arg(d.join("gt.png"))
        .arg("--out")
        .arg(d.join("sub"))
        .args(["--levels", "1"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(d.join("sub/tilde_p.png").exists() && d.join("sub/tilde_o.png").exists());
    let report = std::fs::read_to_string(d.join("sub/substitute.report.jsonl")).unwrap();
    assert_eq!(
        report.lines().filter(|l| l.contains("\"metric\"")).count(),
        4
    );

    let status = wdst()
        .args(["pd-curve", "--content"])
        .arg(d.join("content.png"))
        .arg("--style")
        .arg(d.join("style.png"))
        .arg("--gt")
        .arg(d.join("gt.png"))
        .arg("--out")
        .arg(d.join("pd.csv"))
        .args(["--mu", "0,0.5,1"])
        .status()
        .unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(d.join("pd.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("mu,psnr,hist_distance"));
}

#[test]
fn ablate_skips_orientations() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_inputs(d);
    let status = wdst()
        .args(["ablate", "--content"])
        .arg(d.join("content.png"))
        .arg("--style")
        .arg(d.join("style.png"))
        .arg("--out")
        .arg(d.join("a.png"))
        .arg("--config")
        .arg(d.join("cfg.json"))
        .args(["--skip", "hh,lh"])
        .status()
        .unwrap();
    assert!(status.success());
    let report = std::fs::read_to_string(d.join("a.report.jsonl")).unwrap();
    assert_eq!(
        report.lines().filter(|l| l.contains("\"subband\"")).count(),
        1
    );
}

#[test]
fn lse_train_writes_weights_and_history() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let status = wdst()
        .args(["lse-train", "--out"])
        .arg(d.join("lse.bin"))
        .args([
            "--synthetic",
            "4",
            "--patch",
            "12",
            "--epochs",
            "2",
            "--batch",
            "2",
            "--seed",
            "3",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(wdst_core::lse::LseNetwork::load(d.join("lse.bin")).is_ok());
    let hist = std::fs::read_to_string(d.join("lse.loss.txt")).unwrap();
    assert_eq!(hist.lines().filter(|l| !l.starts_with('#')).count(), 3);
}
