use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wdst_core::features::{random_network, save_weights, PoolMode};
use wdst_core::lse::{random_texture, LseNetwork};
use wdst_core::pipeline::{
    parse_skip, pd_curve, pd_curve_csv, ChannelMode, FeatureWeights, FusionConfig, FusionEngine,
};
use wdst_core::wavelet::Orientation;
use wdst_core::{ColorImage, ColorSpace, Error};

fn texture(size: usize, seed: u64) -> ColorImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planes = [(); 3].map(|_| random_texture(size, size, &mut rng));
    ColorImage::new(planes, ColorSpace::Rgb).unwrap()
}

fn quick_config(levels: usize) -> FusionConfig {
    let mut cfg = FusionConfig {
        levels,
        ..Default::default()
    };
    cfg.wdst.max_iters_per_level = vec![5];
    cfg
}

#[test]
fn one_level_gives_three_traces() {
    let engine = FusionEngine::new(quick_config(1)).unwrap();
    let (out, report) = engine.fuse(&texture(24, 1), &texture(24, 2)).unwrap();
    assert_eq!(out.dims(), (24, 24));
    assert_eq!(report.subbands.len(), 3);
    for stage in ["decompose", "lse", "wdst", "synthesize", "metrics"] {
        assert!(report.stage(stage).is_some(), "{stage}");
    }
}

#[test]
fn rgb_mode_runs_every_channel() {
    let cfg = FusionConfig {
        channel_mode: ChannelMode::Rgb,
        ..quick_config(1)
    };
    let (_, report) = FusionEngine::new(cfg)
        .unwrap()
        .fuse(&texture(16, 3), &texture(16, 4))
        .unwrap();
    let channels: BTreeSet<&str> = report.subbands.iter().map(|s| s.channel.as_str()).collect();
    assert_eq!(channels, ["b", "g", "r"].into_iter().collect());
    assert_eq!(report.subbands.len(), 9);
}

#[test]
fn skipped_orientations_are_not_optimized() {
    let engine = FusionEngine::new(quick_config(2)).unwrap();
    let (a_o, a_p) = (texture(24, 5), texture(24, 6));
    let skip = parse_skip("hh").unwrap();
    let (_, report) = engine.ablation_fuse(&a_o, &a_p, &skip, None).unwrap();
    assert_eq!(report.subbands.len(), 4);
    assert!(report
        .subbands
        .iter()
        .all(|s| s.orientation != Orientation::Hh));

    // With every orientation skipped nothing is optimized and the content
    // image comes back. (Skipping only HH does not pin the output's HH bands:
    // the transform is redundant, so edited LH/HL leak into it.)
    let all = parse_skip("lh,hl,hh").unwrap();
    let (out, report) = engine.ablation_fuse(&a_o, &a_p, &all, None).unwrap();
    assert!(report.subbands.is_empty());
    assert!(out.max_abs_diff(&a_o) < 1e-9);
}

#[test]
fn fusion_is_deterministic() {
    let engine = FusionEngine::new(quick_config(2)).unwrap();
    let (a_o, a_p) = (texture(20, 7), texture(20, 8));
    let (x, _) = engine.fuse(&a_o, &a_p).unwrap();
    let (y, _) = engine.fuse(&a_o, &a_p).unwrap();
    assert_eq!(x.max_abs_diff(&y), 0.0);
}

#[test]
fn report_lines_parse() {
    let engine = FusionEngine::new(quick_config(1)).unwrap();
    let gt = texture(16, 9);
    let (_, mut report) = engine
        .fuse_with_reference(&texture(16, 10), &texture(16, 11), Some(&gt))
        .unwrap();
    report.attach_external_scores(&[("A_o".to_string(), 3.5)].into_iter().collect());
    let text = report.to_jsonl("fuse");
    let lines: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines[0]["record"], "config");
    assert_eq!(lines[0]["command"], "fuse");
    let metrics: Vec<_> = lines.iter().filter(|l| l["record"] == "metric").collect();
    assert_eq!(metrics.len(), 3);
    assert_eq!(metrics[0]["external_score"], 3.5);
    assert_eq!(metrics[0]["hist_reference"], "gt");
    assert!(metrics
        .iter()
        .all(|m| m["psnr"].is_f64() && m["ssim"].is_f64()));
    let trace = report.trace_jsonl();
    assert!(trace
        .lines()
        .all(|l| l.contains("\"record\":\"iteration\"")));
}

#[test]
fn configuration_errors() {
    assert!(matches!(
        FusionConfig::from_json(r#"{"levels": 0}"#),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        FusionConfig::from_json(r#"{"wavelet": "db9"}"#),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        FusionConfig::from_json(r#"{"wdst": {"style_layer_weights": [1.0]}}"#),
        Err(Error::Config(_))
    ));

    let missing = FusionConfig {
        lse_weights: Some("/nonexistent/lse.bin".into()),
        ..Default::default()
    };
    assert!(matches!(FusionEngine::new(missing), Err(Error::Config(_))));

    let mut bad_tag = FusionConfig::default();
    bad_tag.wdst.content_tag = "conv9_9".into();
    assert!(matches!(FusionEngine::new(bad_tag), Err(Error::Config(_))));

    let engine = FusionEngine::new(quick_config(1)).unwrap();
    assert!(matches!(
        engine.fuse(&texture(16, 1), &texture(18, 1)),
        Err(Error::Config(_))
    ));
    assert!(parse_skip("lh,xx").is_err());
}

#[test]
fn weights_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let feat = dir.path().join("features.bin");
    save_weights(&random_network(5, 0.2), &feat).unwrap();
    let lse = dir.path().join("lse.bin");
    LseNetwork::zeros().save(&lse).unwrap();

    let from_files = FusionEngine::new(FusionConfig {
        feature_weights: FeatureWeights::File(feat),
        lse_weights: Some(lse),
        ..quick_config(1)
    })
    .unwrap();
    let seeded = FusionEngine::new(FusionConfig {
        feature_weights: FeatureWeights::Random {
            seed: 5,
            scale: 0.2,
            pool: PoolMode::Average,
        },
        ..quick_config(1)
    })
    .unwrap();
    let (a_o, a_p) = (texture(16, 12), texture(16, 13));
    // A zero LSE network is the identity, so both engines agree.
    let (x, _) = from_files.fuse(&a_o, &a_p).unwrap();
    let (y, _) = seeded.fuse(&a_o, &a_p).unwrap();
    assert!(x.max_abs_diff(&y) < 1e-12);
}

#[test]
fn pd_curve_trades_psnr_for_style() {
    let gt = texture(24, 20);
    let a_p = texture(24, 21);
    let cfg = FusionConfig::default();
    let mus = [0.0, 0.25, 0.5, 0.75, 1.0];
    let points = pd_curve(&gt, &a_p, &gt, &mus, &cfg).unwrap();
    // With A_o = gt the error grows like mu^2, so PSNR falls monotonically.
    assert_eq!(points[0].psnr, 99.0);
    assert!(points.windows(2).all(|w| w[1].psnr < w[0].psnr));
    assert_eq!(points[0].hist_distance, 0.0);
    let csv = pd_curve_csv(&points);
    assert_eq!(csv.lines().count(), 6);
}
