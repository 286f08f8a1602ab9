//! Style transfer on wavelet coefficients.
//!
//! A detail sub-band of the distortion-optimized image (content) and the
//! matching sub-band of the perception-optimized image (style) are
//! normalized to `[0, 1]`, fed through a [`FeatureNetwork`], and a new
//! sub-band is found by L-BFGS on
//! `alpha * content + beta * style + gamma * |x|_1`.

pub mod lbfgs;
mod loss;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use lbfgs::{LbfgsOptions, Termination};
pub use loss::{
    content_loss, gram, style_layer_loss, total_loss, total_loss_gradient, total_style_loss,
    GramMatrix, LossTerms, SubbandObjective,
};

use crate::error::{Error, Result};
use crate::features::FeatureNetwork;
use crate::imgcore::ImagePlane;

/// A plane min-max scaled to `[0, 1]` together with the original range.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedSubband {
    pub plane: ImagePlane,
    pub lo: f64,
    pub hi: f64,
}

impl NormalizedSubband {
    /// Maps a `[0, 1]` plane back to this sub-band's original range.
    pub fn restore(&self, plane: &ImagePlane) -> ImagePlane {
        let span = self.hi - self.lo;
        plane.map(|v| v * span + self.lo)
    }

    pub fn denormalize(&self) -> ImagePlane {
        if self.hi == self.lo {
            return ImagePlane::filled(self.plane.width(), self.plane.height(), self.lo);
        }
        self.restore(&self.plane)
    }
}

/// Constant planes map to 0.5.
pub fn normalize_subband(s: &ImagePlane) -> NormalizedSubband {
    let (lo, hi) = s.min_max();
    let plane = if hi > lo {
        let inv = 1.0 / (hi - lo);
        s.map(|v| ((v - lo) * inv).clamp(0.0, 1.0))
    } else {
        ImagePlane::filled(s.width(), s.height(), 0.5)
    };
    NormalizedSubband { plane, lo, hi }
}

pub fn denormalize_subband(n: &NormalizedSubband) -> ImagePlane {
    n.denormalize()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitPolicy {
    #[default]
    Content,
    Style,
    Average,
}

fn default_alpha() -> f64 {
    1.0
}
fn default_beta() -> f64 {
    1e3
}
fn default_gamma() -> f64 {
    1e-5
}
fn default_content_tag() -> String {
    "conv2_2".into()
}
fn default_style_tags() -> Vec<String> {
    ["relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1"]
        .map(String::from)
        .to_vec()
}
fn default_style_weights() -> Vec<f64> {
    vec![0.2; 5]
}
fn default_max_iters() -> Vec<usize> {
    vec![5000, 1000]
}
fn default_grad_tol() -> f64 {
    1e-6
}
fn default_memory() -> usize {
    10
}
fn default_c1() -> f64 {
    1e-4
}
fn default_c2() -> f64 {
    0.9
}
fn default_line_evals() -> usize {
    25
}

/// Weights, layers and optimizer settings for one sub-band transfer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleTransferConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_content_tag")]
    pub content_tag: String,
    #[serde(default = "default_style_tags")]
    pub style_tags: Vec<String>,
    #[serde(default = "default_style_weights")]
    pub style_layer_weights: Vec<f64>,
    /// Iteration cap by wavelet level (finest first); deeper levels reuse
    /// the last entry.
    #[serde(default = "default_max_iters")]
    pub max_iters_per_level: Vec<usize>,
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    #[serde(default = "default_memory")]
    pub lbfgs_memory: usize,
    #[serde(default)]
    pub init: InitPolicy,
    #[serde(default = "default_c1")]
    pub wolfe_c1: f64,
    #[serde(default = "default_c2")]
    pub wolfe_c2: f64,
    #[serde(default = "default_line_evals")]
    pub max_line_evals: usize,
}

impl Default for StyleTransferConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl StyleTransferConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.style_layer_weights.len() != self.style_tags.len() {
            return Err(Error::config(format!(
                "{} style tags but {} style layer weights",
                self.style_tags.len(),
                self.style_layer_weights.len()
            )));
        }
        if self.style_layer_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::config("style layer weights must be finite"));
        }
        if self.max_iters_per_level.is_empty() || self.max_iters_per_level.contains(&0) {
            return Err(Error::config("max_iters_per_level needs positive entries"));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::config("grad_tol must be positive"));
        }
        if self.lbfgs_memory == 0 || self.max_line_evals == 0 {
            return Err(Error::config(
                "lbfgs_memory and max_line_evals must be positive",
            ));
        }
        if !(0.0 < self.wolfe_c1 && self.wolfe_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return Err(Error::config("Wolfe constants need 0 < c1 < c2 < 1"));
        }
        Ok(())
    }

    /// Iteration cap for a 1-based wavelet level.
    pub fn max_iters_for_level(&self, level: usize) -> usize {
        let i = level
            .saturating_sub(1)
            .min(self.max_iters_per_level.len() - 1);
        self.max_iters_per_level[i]
    }

    pub fn lbfgs_options(&self, level: usize) -> LbfgsOptions {
        LbfgsOptions {
            memory: self.lbfgs_memory,
            max_iters: self.max_iters_for_level(level),
            grad_tol: self.grad_tol,
            c1: self.wolfe_c1,
            c2: self.wolfe_c2,
            max_line_evals: self.max_line_evals,
        }
    }
}

/// One accepted optimizer iterate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub total: f64,
    pub content: f64,
    pub style: f64,
    pub l1: f64,
    pub grad_inf: f64,
    pub step: f64,
    pub line_evals: usize,
}

/// Summary of one sub-band optimization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub level: usize,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// Set when the line search gave up and the best iterate was returned.
    pub warning: Option<String>,
    pub uphill_steps: usize,
    pub initial: LossTerms,
    #[serde(rename = "final")]
    pub final_terms: LossTerms,
    pub grad_inf: f64,
    pub seconds: f64,
    pub history: Vec<IterationRecord>,
}

#[derive(Clone, Debug)]
pub struct SubbandTransfer {
    pub plane: ImagePlane,
    pub report: TransferReport,
}

/// Restyles one detail sub-band. `level` is 1-based and selects the
/// iteration cap.
pub fn transfer_subband(
    content: &ImagePlane,
    style: &ImagePlane,
    net: &FeatureNetwork,
    cfg: &StyleTransferConfig,
    level: usize,
) -> Result<SubbandTransfer> {
    let started = Instant::now();
    content.ensure_same_dims(style, "style sub-band")?;
    cfg.validate()?;
    let nc = normalize_subband(content);
    let ns = normalize_subband(style);
    let objective = SubbandObjective::new(net, cfg, &nc.plane, &ns.plane)?;

    let x0 = match cfg.init {
        InitPolicy::Content => nc.plane.data().to_vec(),
        InitPolicy::Style => ns.plane.data().to_vec(),
        InitPolicy::Average => nc
            .plane
            .data()
            .iter()
            .zip(ns.plane.data())
            .map(|(a, b)| 0.5 * (a + b))
            .collect(),
    };

    // The objective only fails on shape errors, which `new` already ruled
    // out; keep the first error anyway and report it after the run.
    let mut failure: Option<Error> = None;
    let eval = |x: &[f64]| match objective.value_and_gradient(x) {
        Ok((terms, g)) => (terms.total, g, terms),
        Err(e) => {
            failure.get_or_insert(e);
            (f64::NAN, vec![0.0; x.len()], LossTerms::default())
        }
    };
    let result = lbfgs::minimize(eval, x0, &cfg.lbfgs_options(level), |_| {});
    if let Some(e) = failure {
        return Err(e);
    }

    let history: Vec<IterationRecord> = result
        .history
        .iter()
        .map(|it| IterationRecord {
            iteration: it.iteration,
            total: it.value,
            content: it.aux.content,
            style: it.aux.style,
            l1: it.aux.l1,
            grad_inf: it.grad_inf,
            step: it.step,
            line_evals: it.line_evals,
        })
        .collect();
    let warning = (result.termination == Termination::LineSearchFailed).then(|| {
        format!(
            "line search failed after {} iterations; returning best iterate",
            result.iterations
        )
    });
    if let Some(w) = &warning {
        log::warn!("level {level}: {w}");
    }

    let (w, h) = content.dims();
    let fused = ImagePlane::new(w, h, result.x)?.clamp(0.0, 1.0);
    let plane = nc.restore(&fused);
    Ok(SubbandTransfer {
        plane,
        report: TransferReport {
            level,
            iterations: result.iterations,
            evaluations: result.evaluations,
            termination: result.termination,
            warning,
            uphill_steps: result.uphill_steps,
            initial: result.history[0].aux,
            final_terms: result.aux,
            grad_inf: result.history.last().map_or(0.0, |r| r.grad_inf),
            seconds: started.elapsed().as_secs_f64(),
            history,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::random_network;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(w: usize, h: usize, seed: u64, scale: f64) -> ImagePlane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImagePlane::new(
            w,
            h,
            (0..w * h).map(|_| rng.gen_range(-scale..scale)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn normalize_examples() {
        let p = ImagePlane::new(3, 1, vec![-2.0, 0.0, 2.0]).unwrap();
        let n = normalize_subband(&p);
        assert_eq!(n.plane.data(), &[0.0, 0.5, 1.0]);
        assert_eq!((n.lo, n.hi), (-2.0, 2.0));

        let c = ImagePlane::filled(4, 3, 0.7);
        let n = normalize_subband(&c);
        assert!(n.plane.data().iter().all(|&v| v == 0.5));
        assert_eq!(denormalize_subband(&n), c);

        let r = random_plane(9, 7, 1, 3.0);
        assert!(normalize_subband(&r).denormalize().max_abs_diff(&r) < 1e-12);
    }

    #[test]
    fn defaults() {
        let cfg = StyleTransferConfig::default();
        assert_eq!((cfg.alpha, cfg.beta, cfg.gamma), (1.0, 1e3, 1e-5));
        assert_eq!(cfg.style_layer_weights, vec![0.2; 5]);
        assert_eq!(cfg.max_iters_per_level, vec![5000, 1000]);
        assert_eq!(cfg.max_iters_for_level(1), 5000);
        assert_eq!(cfg.max_iters_for_level(2), 1000);
        assert_eq!(cfg.max_iters_for_level(3), 1000);
        assert_eq!(cfg.content_tag, "conv2_2");
        assert_eq!(cfg.init, InitPolicy::Content);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        let mut cfg = StyleTransferConfig::default();
        cfg.style_layer_weights.pop();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = StyleTransferConfig {
            beta: -1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let bad: std::result::Result<StyleTransferConfig, _> =
            serde_json::from_str(r#"{"alpah": 1}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn content_only_is_a_no_op() {
        let net = random_network(3, 0.2);
        let cfg = StyleTransferConfig {
            beta: 0.0,
            gamma: 0.0,
            ..Default::default()
        };
        let c = random_plane(8, 8, 2, 0.3);
        let s = random_plane(8, 8, 3, 0.3);
        let out = transfer_subband(&c, &s, &net, &cfg, 1).unwrap();
        assert!(out.plane.max_abs_diff(&c) < 1e-12);
        assert_eq!(out.report.iterations, 0);
        assert!(out.report.final_terms.content < 1e-8);
    }

    #[test]
    fn style_equal_content_is_a_no_op() {
        let net = random_network(3, 0.2);
        let cfg = StyleTransferConfig {
            alpha: 0.0,
            gamma: 0.0,
            ..Default::default()
        };
        let c = random_plane(8, 8, 2, 0.3);
        let out = transfer_subband(&c, &c, &net, &cfg, 2).unwrap();
        assert_eq!(out.report.initial.total, 0.0);
        assert!(out.plane.max_abs_diff(&c) < 1e-12);
    }

    #[test]
    fn full_objective_descends_monotonically() {
        let net = random_network(7, 0.2);
        let cfg = StyleTransferConfig {
            max_iters_per_level: vec![40],
            ..Default::default()
        };
        let c = random_plane(8, 8, 4, 1.0);
        let s = random_plane(8, 8, 5, 2.0);
        let out = transfer_subband(&c, &s, &net, &cfg, 1).unwrap();
        let r = &out.report;
        assert_eq!(r.uphill_steps, 0);
        assert!(r.final_terms.total < r.initial.total);
        for w in r.history.windows(2) {
            assert!(w[1].total <= w[0].total);
        }
        assert!(out.plane.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let net = random_network(3, 0.2);
        let cfg = StyleTransferConfig::default();
        let c = random_plane(8, 8, 2, 0.3);
        let s = random_plane(8, 9, 3, 0.3);
        assert!(matches!(
            transfer_subband(&c, &s, &net, &cfg, 1),
            Err(Error::Contract(_))
        ));
    }
}
