//! End-to-end fusion and the experiment protocols built on it.
//!
//! [`FusionEngine::fuse`] decomposes both inputs, enhances the content LL
//! band with the optional LSE network, restyles every detail band, and
//! synthesizes the result. The remaining entry points reuse the same pieces:
//! LL substitution, pixel-space interpolation between the two inputs, and
//! per-orientation ablation.

mod report;
pub mod training;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use report::{FusionReport, MetricRow, StageTiming, SubbandTrace, REPORT_SCHEMA};

use crate::error::{Error, Result};
use crate::features::{load_weights, random_network_with_pool, FeatureNetwork, PoolMode};
use crate::imgcore::{rgb_to_ycbcr, ycbcr_to_rgb, ColorImage, ColorSpace, ImagePlane};
use crate::lse::{lse_forward, LseNetwork};
use crate::metrics::{plane_histogram_distance, psnr, ssim, MetricChannel};
use crate::wavelet::{
    iswt2, make_filter_pair, replace_ll, swt2, FilterFamily, Orientation, SubbandPyramid,
    WaveletFilterPair,
};
use crate::wdst::{transfer_subband, StyleTransferConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    /// Fuse the Y plane only; chroma comes from the content image.
    #[default]
    Luma,
    /// Fuse R, G and B independently.
    Rgb,
}

/// Where the feature extractor's weights come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureWeights {
    Random {
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_scale")]
        scale: f64,
        #[serde(default = "default_pool")]
        pool: PoolMode,
    },
    File(PathBuf),
}

fn default_scale() -> f64 {
    0.2
}
fn default_pool() -> PoolMode {
    PoolMode::Average
}
fn default_wavelet() -> FilterFamily {
    FilterFamily::Bior22
}
fn default_levels() -> usize {
    2
}
fn default_true() -> bool {
    true
}
fn default_bins() -> usize {
    64
}

impl Default for FeatureWeights {
    fn default() -> Self {
        FeatureWeights::Random {
            seed: 0,
            scale: default_scale(),
            pool: default_pool(),
        }
    }
}

/// Everything a fusion run needs. An empty JSON object gives the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    #[serde(default = "default_wavelet")]
    pub wavelet: FilterFamily,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default)]
    pub wdst: StyleTransferConfig,
    #[serde(default)]
    pub lse_weights: Option<PathBuf>,
    #[serde(default)]
    pub feature_weights: FeatureWeights,
    #[serde(default)]
    pub channel_mode: ChannelMode,
    #[serde(default = "default_true")]
    pub parallel_subbands: bool,
    #[serde(default)]
    pub metric_channel: MetricChannel,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl FusionConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::config("levels must be at least 1"));
        }
        if self.histogram_bins == 0 {
            return Err(Error::config("histogram_bins must be positive"));
        }
        if let FeatureWeights::Random { scale, .. } = self.feature_weights {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::config(
                    "random feature weight scale must be positive",
                ));
            }
        }
        self.wdst.validate()
    }

    pub fn filter(&self) -> WaveletFilterPair {
        make_filter_pair(self.wavelet)
    }
}

/// A validated configuration with its networks loaded.
pub struct FusionEngine {
    cfg: FusionConfig,
    filter: WaveletFilterPair,
    features: FeatureNetwork,
    lse: Option<LseNetwork>,
}

fn missing_file_is_config(e: Error) -> Error {
    match e {
        Error::Io { path, reason } => {
            Error::config(format!("cannot read weights {}: {reason}", path.display()))
        }
        Error::Format { offset, reason } => {
            Error::config(format!("bad weight file (byte {offset}): {reason}"))
        }
        other => other,
    }
}

impl FusionEngine {
    /// Validates the config and loads every weight file, so configuration
    /// problems surface before any optimization starts.
    pub fn new(cfg: FusionConfig) -> Result<Self> {
        cfg.validate()?;
        let features = match &cfg.feature_weights {
            FeatureWeights::Random { seed, scale, pool } => {
                random_network_with_pool(*seed, *scale, *pool)
            }
            FeatureWeights::File(path) => load_weights(path).map_err(missing_file_is_config)?,
        };
        for tag in cfg.wdst.style_tags.iter().chain([&cfg.wdst.content_tag]) {
            features
                .layer_index(tag)
                .map_err(|e| Error::config(e.to_string()))?;
        }
        let lse = cfg
            .lse_weights
            .as_ref()
            .map(|p| LseNetwork::load(p).map_err(missing_file_is_config))
            .transpose()?;
        Ok(Self {
            filter: cfg.filter(),
            cfg,
            features,
            lse,
        })
    }

    /// Engine with explicit networks instead of the ones named in the config.
    pub fn with_networks(
        cfg: FusionConfig,
        features: FeatureNetwork,
        lse: Option<LseNetwork>,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            filter: cfg.filter(),
            cfg,
            features,
            lse,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn filter(&self) -> &WaveletFilterPair {
        &self.filter
    }

    pub fn features(&self) -> &FeatureNetwork {
        &self.features
    }

    pub fn fuse(&self, a_o: &ColorImage, a_p: &ColorImage) -> Result<(ColorImage, FusionReport)> {
        self.run(a_o, a_p, &BTreeSet::new(), None)
    }

    /// Fuse and also score `A_o`, `A_p` and `A_r` against a ground truth.
    pub fn fuse_with_reference(
        &self,
        a_o: &ColorImage,
        a_p: &ColorImage,
        gt: Option<&ColorImage>,
    ) -> Result<(ColorImage, FusionReport)> {
        self.run(a_o, a_p, &BTreeSet::new(), gt)
    }

    /// Like [`FusionEngine::fuse`], but detail bands of the `skip`
    /// orientations keep the content image's coefficients at every level.
    pub fn ablation_fuse(
        &self,
        a_o: &ColorImage,
        a_p: &ColorImage,
        skip: &BTreeSet<Orientation>,
        gt: Option<&ColorImage>,
    ) -> Result<(ColorImage, FusionReport)> {
        self.run(a_o, a_p, skip, gt)
    }

    fn run(
        &self,
        a_o: &ColorImage,
        a_p: &ColorImage,
        skip: &BTreeSet<Orientation>,
        gt: Option<&ColorImage>,
    ) -> Result<(ColorImage, FusionReport)> {
        if a_o.dims() != a_p.dims() {
            return Err(Error::config(format!(
                "content is {}x{} but style is {}x{}",
                a_o.width(),
                a_o.height(),
                a_p.width(),
                a_p.height()
            )));
        }
        if let Some(g) = gt {
            if g.dims() != a_o.dims() {
                return Err(Error::config("ground truth size differs from the inputs"));
            }
        }
        let mut report = FusionReport {
            config: Some(self.cfg.clone()),
            ..Default::default()
        };

        let t = Instant::now();
        let (o_planes, p_planes, names): (Vec<ImagePlane>, Vec<ImagePlane>, Vec<&str>) =
            match self.cfg.channel_mode {
                ChannelMode::Luma => {
                    let o = rgb_to_ycbcr(a_o)?;
                    let p = rgb_to_ycbcr(a_p)?;
                    (
                        vec![o.plane(0).clone()],
                        vec![p.plane(0).clone()],
                        vec!["y"],
                    )
                }
                ChannelMode::Rgb => (
                    a_o.planes().to_vec(),
                    a_p.planes().to_vec(),
                    vec!["r", "g", "b"],
                ),
            };
        let color_seconds = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let mut o_pyr = Vec::new();
        let mut p_pyr = Vec::new();
        for (o, p) in o_planes.iter().zip(&p_planes) {
            o_pyr.push(swt2(o, &self.filter, self.cfg.levels)?);
            p_pyr.push(swt2(p, &self.filter, self.cfg.levels)?);
        }
        report.add_stage(
            "decompose",
            color_seconds + t.elapsed().as_secs_f64(),
            vec![format!(
                "{} levels, filter {}, channels {}",
                self.cfg.levels,
                self.filter.name(),
                names.join(",")
            )],
        );

        let t = Instant::now();
        let note = match &self.lse {
            Some(net) => {
                for pyr in &mut o_pyr {
                    let ll = lse_forward(net, pyr.ll())?;
                    *pyr = replace_ll(pyr, ll)?;
                }
                "LL of content enhanced by LSE".to_string()
            }
            None => "no LSE weights; content LL passed through".to_string(),
        };
        report.add_stage("lse", t.elapsed().as_secs_f64(), vec![note]);

        let t = Instant::now();
        let mut jobs = Vec::new();
        for c in 0..names.len() {
            for level in 1..=self.cfg.levels {
                for o in Orientation::ALL {
                    if !skip.contains(&o) {
                        jobs.push((c, level, o));
                    }
                }
            }
        }
        let run_job = |&(c, level, o): &(usize, usize, Orientation)| {
            transfer_subband(
                o_pyr[c].detail(level, o),
                p_pyr[c].detail(level, o),
                &self.features,
                &self.cfg.wdst,
                level,
            )
        };
        let results: Vec<_> = if self.cfg.parallel_subbands {
            jobs.par_iter().map(run_job).collect::<Result<_>>()?
        } else {
            jobs.iter().map(run_job).collect::<Result<_>>()?
        };
        let mut fused = o_pyr.clone();
        let mut notes = vec![format!(
            "{} sub-band runs ({})",
            jobs.len(),
            if self.cfg.parallel_subbands {
                "parallel"
            } else {
                "serial"
            }
        )];
        if !skip.is_empty() {
            let names: Vec<String> = skip.iter().map(|o| o.to_string()).collect();
            notes.push(format!(
                "skipped {} at every level; content coefficients kept",
                names.join(",")
            ));
        }
        for (&(c, level, o), r) in jobs.iter().zip(results) {
            fused[c].set_detail(level, o, r.plane)?;
            if let Some(w) = &r.report.warning {
                notes.push(format!("{}{}{}: {w}", names[c], o.name(), level));
            }
            report.subbands.push(SubbandTrace {
                channel: names[c].to_string(),
                level,
                orientation: o,
                report: r.report,
            });
        }
        report.add_stage("wdst", t.elapsed().as_secs_f64(), notes);

        let t = Instant::now();
        let planes: Vec<ImagePlane> = fused.iter().map(iswt2).collect::<Result<_>>()?;
        let out = match self.cfg.channel_mode {
            ChannelMode::Luma => {
                let o = rgb_to_ycbcr(a_o)?;
                let [_, cb, cr] = o.into_planes();
                let y = planes.into_iter().next().expect("one luma plane");
                ycbcr_to_rgb(&ColorImage::new([y, cb, cr], ColorSpace::YCbCr)?)?
            }
            ChannelMode::Rgb => {
                let [r, g, b]: [ImagePlane; 3] = planes.try_into().expect("three planes");
                ColorImage::new([r, g, b], ColorSpace::Rgb)?
            }
        };
        report.add_stage("synthesize", t.elapsed().as_secs_f64(), vec![]);

        let t = Instant::now();
        let (reference, label) = match gt {
            Some(g) => (g, "gt"),
            None => (a_p, "style"),
        };
        for (name, img) in [("A_o", a_o), ("A_p", a_p), ("A_r", &out)] {
            report
                .metrics
                .push(self.metric_row(name, img, gt, reference, label)?);
        }
        report.add_stage(
            "metrics",
            t.elapsed().as_secs_f64(),
            vec![format!("histogram distance measured against {label}")],
        );
        Ok((out, report))
    }

    fn metric_row(
        &self,
        name: &str,
        img: &ColorImage,
        gt: Option<&ColorImage>,
        hist_ref: &ColorImage,
        hist_label: &str,
    ) -> Result<MetricRow> {
        evaluate_image(name, img, gt, hist_ref, hist_label, &self.cfg, &self.filter)
    }
}

fn metric_planes(img: &ColorImage, channel: MetricChannel) -> Vec<ImagePlane> {
    match channel {
        MetricChannel::Y => vec![img.luma()],
        MetricChannel::Rgb => img.planes().to_vec(),
    }
}

fn mean(values: impl Iterator<Item = Result<f64>>) -> Result<f64> {
    let v: Vec<f64> = values.collect::<Result<_>>()?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean histogram distance over every detail band of the two planes'
/// decompositions. Each band is binned on a symmetric range set by the
/// reference band.
pub fn detail_histogram_distance(
    plane: &ImagePlane,
    reference: &ImagePlane,
    filter: &WaveletFilterPair,
    levels: usize,
    bins: usize,
) -> Result<f64> {
    let a = swt2(plane, filter, levels)?;
    let b = swt2(reference, filter, levels)?;
    mean((1..=levels).flat_map(|l| {
        let (a, b) = (&a, &b);
        Orientation::ALL
            .into_iter()
            .map(move |o| plane_histogram_distance(a.detail(l, o), b.detail(l, o), bins))
    }))
}

fn evaluate_image(
    name: &str,
    img: &ColorImage,
    gt: Option<&ColorImage>,
    hist_ref: &ColorImage,
    hist_label: &str,
    cfg: &FusionConfig,
    filter: &WaveletFilterPair,
) -> Result<MetricRow> {
    let planes = metric_planes(img, cfg.metric_channel);
    let mut row = MetricRow {
        image: name.to_string(),
        ..Default::default()
    };
    if let Some(gt) = gt {
        let g = metric_planes(gt, cfg.metric_channel);
        row.psnr = Some(mean(planes.iter().zip(&g).map(|(a, b)| psnr(a, b, 1.0)))?);
        if img.width() >= 11 && img.height() >= 11 {
            row.ssim = Some(mean(planes.iter().zip(&g).map(|(a, b)| ssim(a, b)))?);
        }
    }
    let r = metric_planes(hist_ref, cfg.metric_channel);
    row.hist_distance = Some(mean(planes.iter().zip(&r).map(|(a, b)| {
        detail_histogram_distance(a, b, filter, cfg.levels, cfg.histogram_bins)
    }))?);
    row.hist_reference = Some(hist_label.to_string());
    Ok(row)
}

fn zip_planes(
    x: &ColorImage,
    y: &ColorImage,
    f: impl Fn(&ImagePlane, &ImagePlane) -> Result<ImagePlane>,
) -> Result<ColorImage> {
    let (p, q) = (x.planes(), y.planes());
    ColorImage::new(
        [f(&p[0], &q[0])?, f(&p[1], &q[1])?, f(&p[2], &q[2])?],
        x.space(),
    )
}

/// Outcome of the LL-substitution experiment.
pub struct Substitution {
    /// LL from `A_o`, details from `A_p`.
    pub tilde_p: ColorImage,
    /// LL from `A_p`, details from `A_o`.
    pub tilde_o: ColorImage,
    pub report: FusionReport,
}

/// Swaps the low-frequency bands of the two inputs and scores `A_p`,
/// `Ã_p`, `A_o`, `Ã_o` against the ground truth (in that order).
///
/// The swap is applied to all three RGB planes. Because the transform is
/// linear and the color conversion affine, this equals swapping in YCbCr.
pub fn substitution_experiment(
    a_o: &ColorImage,
    a_p: &ColorImage,
    a_gt: &ColorImage,
    cfg: &FusionConfig,
) -> Result<Substitution> {
    cfg.validate()?;
    if a_o.dims() != a_p.dims() || a_o.dims() != a_gt.dims() {
        return Err(Error::contract(
            "substitution needs three images of one size",
        ));
    }
    let filter = cfg.filter();
    let mut report = FusionReport {
        config: Some(cfg.clone()),
        ..Default::default()
    };
    let t = Instant::now();
    let swap = |keep_details: &ImagePlane, take_ll: &ImagePlane| -> Result<ImagePlane> {
        let d = swt2(keep_details, &filter, cfg.levels)?;
        let l: SubbandPyramid = swt2(take_ll, &filter, cfg.levels)?;
        iswt2(&replace_ll(&d, l.ll().clone())?)
    };
    let tilde_p = zip_planes(a_p, a_o, swap)?;
    let tilde_o = zip_planes(a_o, a_p, swap)?;
    report.add_stage(
        "decompose",
        0.0,
        vec![format!("{} levels, filter {}", cfg.levels, filter.name())],
    );
    report.add_stage(
        "synthesize",
        t.elapsed().as_secs_f64(),
        vec!["LL swapped on R, G and B".into()],
    );

    let t = Instant::now();
    for (name, img) in [
        ("A_p", a_p),
        ("Ã_p", &tilde_p),
        ("A_o", a_o),
        ("Ã_o", &tilde_o),
    ] {
        report.metrics.push(evaluate_image(
            name,
            img,
            Some(a_gt),
            a_gt,
            "gt",
            cfg,
            &filter,
        )?);
    }
    report.add_stage("metrics", t.elapsed().as_secs_f64(), vec![]);
    Ok(Substitution {
        tilde_p,
        tilde_o,
        report,
    })
}

/// `mu * a_p + (1 - mu) * a_o`, per pixel.
pub fn pd_interpolate(a_o: &ColorImage, a_p: &ColorImage, mu: f64) -> Result<ColorImage> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::contract(format!("mu must lie in [0, 1], got {mu}")));
    }
    if a_o.dims() != a_p.dims() {
        return Err(Error::contract("interpolated images differ in size"));
    }
    if mu == 0.0 {
        return Ok(a_o.clone());
    }
    if mu == 1.0 {
        return Ok(a_p.clone());
    }
    zip_planes(a_o, a_p, |o, p| o.lin_comb(1.0 - mu, p, mu))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdPoint {
    pub mu: f64,
    pub psnr: f64,
    /// Detail-band histogram distance to the ground truth (lower is closer).
    pub hist_distance: f64,
}

/// Scores `pd_interpolate` at each `mu` against the ground truth.
pub fn pd_curve(
    a_o: &ColorImage,
    a_p: &ColorImage,
    a_gt: &ColorImage,
    mus: &[f64],
    cfg: &FusionConfig,
) -> Result<Vec<PdPoint>> {
    let filter = cfg.filter();
    mus.iter()
        .map(|&mu| {
            let img = pd_interpolate(a_o, a_p, mu)?;
            let row = evaluate_image("mix", &img, Some(a_gt), a_gt, "gt", cfg, &filter)?;
            Ok(PdPoint {
                mu,
                psnr: row.psnr.expect("ground truth given"),
                hist_distance: row.hist_distance.expect("always computed"),
            })
        })
        .collect()
}

pub fn pd_curve_csv(points: &[PdPoint]) -> String {
    let mut s = String::from("mu,psnr,hist_distance\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.mu, p.psnr, p.hist_distance);
    }
    s
}

/// Parses `lh,hl` style orientation lists.
pub fn parse_skip(list: &str) -> Result<BTreeSet<Orientation>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> ColorImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut plane = || ImagePlane::from_fn(w, h, |_, _| rng.gen_range(0.0..1.0));
        ColorImage::new([plane(), plane(), plane()], ColorSpace::Rgb).unwrap()
    }

    #[test]
    fn empty_config_gives_documented_defaults() {
        let cfg = FusionConfig::from_json("{}").unwrap();
        assert_eq!(cfg.wavelet, FilterFamily::Bior22);
        assert_eq!(cfg.levels, 2);
        assert_eq!(cfg.channel_mode, ChannelMode::Luma);
        assert!(cfg.parallel_subbands);
        assert_eq!(cfg.wdst, StyleTransferConfig::default());
        assert!(cfg.lse_weights.is_none());
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(FusionConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn config_errors() {
        assert!(matches!(
            FusionConfig::from_json(r#"{"wavelet":"db9"}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            FusionConfig::from_json(r#"{"levels":0}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            FusionConfig::from_json(r#"{"bogus":1}"#),
            Err(Error::Config(_))
        ));
        let cfg = FusionConfig::from_json(r#"{"feature_weights":{"file":"/nonexistent/w.bin"}}"#)
            .unwrap();
        assert!(matches!(FusionEngine::new(cfg), Err(Error::Config(_))));
        let cfg = FusionConfig::from_json(r#"{"lse_weights":"/nonexistent/lse.bin"}"#).unwrap();
        assert!(matches!(FusionEngine::new(cfg), Err(Error::Config(_))));
        let cfg = FusionConfig::from_json(r#"{"wdst":{"content_tag":"conv9_9"}}"#).unwrap();
        assert!(matches!(FusionEngine::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn size_mismatch_is_config_error() {
        let engine = FusionEngine::new(FusionConfig::default()).unwrap();
        let r = engine.fuse(&random_image(16, 16, 1), &random_image(16, 17, 2));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn interpolation_endpoints() {
        let a = random_image(5, 4, 1);
        let b = random_image(5, 4, 2);
        assert_eq!(pd_interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(pd_interpolate(&a, &b, 1.0).unwrap(), b);
        let z = ColorImage::from_gray(ImagePlane::zeros(3, 3));
        let o = ColorImage::from_gray(ImagePlane::filled(3, 3, 1.0));
        let m = pd_interpolate(&z, &o, 0.5).unwrap();
        assert!(m
            .planes()
            .iter()
            .all(|p| p.data().iter().all(|&v| v == 0.5)));
        assert!(pd_interpolate(&a, &b, 1.5).is_err());
        assert!(pd_interpolate(&a, &b, -0.1).is_err());
    }

    #[test]
    fn skip_parsing() {
        let s = parse_skip("lh, HH").unwrap();
        assert_eq!(
            s.into_iter().collect::<Vec<_>>(),
            vec![Orientation::Lh, Orientation::Hh]
        );
        assert!(parse_skip("").unwrap().is_empty());
        assert!(parse_skip("xx").is_err());
    }
}
