//! Low-frequency sub-band enhancement: a six-layer residual CNN.
//!
//! The network predicts a correction that is added back to its input, so a
//! network with all-zero parameters is exactly the identity.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    load_weights, save_weights, Conv2d, ConvGrad, FeatureNetwork, LayerKind, LayerSpec, Tensor3,
};
use crate::imgcore::ImagePlane;

pub const LSE_LAYERS: usize = 6;
pub const LSE_WIDTH: usize = 64;

/// Residual conv stack `1 -> 64 -> ... -> 64 -> 1` with ReLU after the first
/// five convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct LseNetwork {
    net: FeatureNetwork,
}

fn layout(mut conv: impl FnMut(usize, usize, usize) -> Conv2d) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for i in 0..LSE_LAYERS {
        let in_c = if i == 0 { 1 } else { LSE_WIDTH };
        let out_c = if i == LSE_LAYERS - 1 { 1 } else { LSE_WIDTH };
        layers.push(LayerSpec::conv(
            conv(i, in_c, out_c),
            format!("conv{}", i + 1),
        ));
        if i < LSE_LAYERS - 1 {
            layers.push(LayerSpec::relu(format!("relu{}", i + 1)));
        }
    }
    layers
}

impl LseNetwork {
    /// All weights and biases zero: the identity map.
    pub fn zeros() -> Self {
        let net =
            FeatureNetwork::new(1, layout(|_, i, o| Conv2d::zeros(i, o))).expect("valid layout");
        Self { net }
    }

    /// He-style uniform init, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, zero
    /// biases. Weights are rounded through f32 so they save losslessly.
    pub fn he_uniform(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layout(|_, in_c, out_c| {
            let bound = (6.0 / (in_c * 9) as f64).sqrt();
            let mut c = Conv2d::zeros(in_c, out_c);
            for w in &mut c.weights {
                *w = f64::from(rng.gen_range(-bound..bound) as f32);
            }
            c
        });
        Self {
            net: FeatureNetwork::new(1, layers).expect("valid layout"),
        }
    }

    /// Checks that `net` has the six-conv residual layout.
    pub fn from_network(net: FeatureNetwork) -> Result<Self> {
        let kinds: Vec<&LayerKind> = net.layers().iter().map(|l| &l.kind).collect();
        let convs: Vec<&Conv2d> = kinds
            .iter()
            .filter_map(|k| match k {
                LayerKind::Conv(c) => Some(c),
                _ => None,
            })
            .collect();
        let relus = kinds
            .iter()
            .filter(|k| matches!(k, LayerKind::Relu))
            .count();
        let ok = net.input_channels() == 1
            && convs.len() == LSE_LAYERS
            && relus == LSE_LAYERS - 1
            && kinds.len() == 2 * LSE_LAYERS - 1
            && matches!(kinds.last(), Some(LayerKind::Conv(c)) if c.out_channels == 1)
            && kinds
                .iter()
                .enumerate()
                .all(|(i, k)| matches!(k, LayerKind::Conv(_)) == (i % 2 == 0));
        if !ok {
            return Err(Error::config(
                "LSE weights must hold 6 conv layers (1 input, 1 output channel) with ReLU between them",
            ));
        }
        Ok(Self { net })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_network(load_weights(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_weights(&self.net, path)
    }

    pub fn network(&self) -> &FeatureNetwork {
        &self.net
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }
}

/// `ll + R(ll)`.
pub fn lse_forward(net: &LseNetwork, ll: &ImagePlane) -> Result<ImagePlane> {
    residual_forward(&net.net, ll)
}

/// `ll + R(ll)` for any single-channel residual network.
pub fn residual_forward(net: &FeatureNetwork, ll: &ImagePlane) -> Result<ImagePlane> {
    let trace = net.trace(&Tensor3::from_plane(ll), usize::MAX)?;
    let r = trace.last();
    let data = ll.data().iter().zip(r.data()).map(|(a, b)| a + b).collect();
    ImagePlane::new(ll.width(), ll.height(), data)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LseLoss {
    /// Euclidean norm of the difference per image, summed over images.
    #[default]
    L2Norm,
    /// Squared Euclidean norm per image, summed over images.
    SquaredError,
}

impl LseLoss {
    fn value(self, diff_sq: f64) -> f64 {
        match self {
            LseLoss::L2Norm => diff_sq.sqrt(),
            LseLoss::SquaredError => diff_sq,
        }
    }
}

/// Per-image loss of one prediction.
pub fn lse_loss_with(pred: &ImagePlane, gt: &ImagePlane, kind: LseLoss) -> Result<f64> {
    pred.ensure_same_dims(gt, "ground truth")?;
    let ss: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(kind.value(ss))
}

/// `|gt - pred|_2` for one image.
pub fn lse_loss(pred: &ImagePlane, gt: &ImagePlane) -> Result<f64> {
    lse_loss_with(pred, gt, LseLoss::L2Norm)
}

/// Sum of per-image losses over a batch.
pub fn lse_batch_loss(preds: &[ImagePlane], gts: &[ImagePlane], kind: LseLoss) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::contract("prediction and ground-truth counts differ"));
    }
    preds
        .iter()
        .zip(gts)
        .map(|(p, g)| lse_loss_with(p, g, kind))
        .sum()
}

fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_epochs() -> usize {
    10
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss: LseLoss,
    /// Rescales the batch gradient to at most this global L2 norm; `null`
    /// disables clipping. Without it the default learning rate diverges
    /// from a He-initialized start.
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("grad_clip must be positive"));
        }
        Ok(())
    }
}

/// A training pair: degraded low-frequency band and its target.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub input: ImagePlane,
    pub target: ImagePlane,
}

pub struct TrainOutcome {
    pub net: LseNetwork,
    /// `history[0]` is the mean per-image loss before training,
    /// `history[k]` the mean loss over the batches of epoch `k`.
    pub history: Vec<f64>,
}

/// Loss and conv parameter gradients of one pair for any single-channel
/// residual network (the LSE layout or a smaller one).
pub fn residual_loss_gradient(
    net: &FeatureNetwork,
    pair: &TrainPair,
    kind: LseLoss,
) -> Result<(f64, Vec<Option<ConvGrad>>)> {
    let trace = net.trace(&Tensor3::from_plane(&pair.input), usize::MAX)?;
    let r = trace.last();
    let diff: Vec<f64> = pair
        .input
        .data()
        .iter()
        .zip(r.data())
        .zip(pair.target.data())
        .map(|((x, r), t)| x + r - t)
        .collect();
    let ss: f64 = diff.iter().map(|d| d * d).sum();
    let loss = kind.value(ss);
    let scale = match kind {
        // subgradient 0 at a perfect prediction
        LseLoss::L2Norm if loss == 0.0 => 0.0,
        LseLoss::L2Norm => 1.0 / loss,
        LseLoss::SquaredError => 2.0,
    };
    let (c, h, w) = r.shape();
    let seed = Tensor3::from_raw(c, h, w, diff.into_iter().map(|d| d * scale).collect());
    let mut seeds: Vec<Option<&Tensor3>> = vec![None; net.layers().len()];
    *seeds.last_mut().expect("non-empty network") = Some(&seed);
    let back = net.backprop_seeded(&trace, &seeds, true)?;
    Ok((loss, back.params.expect("parameter gradients requested")))
}

/// Mean loss and mean parameter gradient over a batch. Per-sample work runs
/// in parallel; the reduction runs in sample order so the result does not
/// depend on the thread count.
fn batch_gradient(
    net: &FeatureNetwork,
    batch: &[&TrainPair],
    kind: LseLoss,
) -> Result<(f64, Vec<Option<ConvGrad>>)> {
    let per_sample: Vec<(f64, Vec<Option<ConvGrad>>)> = batch
        .par_iter()
        .map(|p| residual_loss_gradient(net, p, kind))
        .collect::<Result<_>>()?;
    let inv = 1.0 / batch.len() as f64;
    let mut iter = per_sample.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            if let (Some(acc), Some(gi)) = (acc.as_mut(), gi) {
                for (a, b) in acc.weights.iter_mut().zip(gi.weights) {
                    *a += b;
                }
                for (a, b) in acc.bias.iter_mut().zip(gi.bias) {
                    *a += b;
                }
            }
        }
    }
    for g in grads.iter_mut().flatten() {
        g.weights.iter_mut().for_each(|v| *v *= inv);
        g.bias.iter_mut().for_each(|v| *v *= inv);
    }
    Ok((loss * inv, grads))
}

fn clip_global_norm(grads: &mut [Option<ConvGrad>], limit: f64) {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.weights.iter().chain(&g.bias))
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > limit {
        let k = limit / norm;
        for g in grads.iter_mut().flatten() {
            g.weights
                .iter_mut()
                .chain(g.bias.iter_mut())
                .for_each(|v| *v *= k);
        }
    }
}

fn mean_loss(net: &FeatureNetwork, data: &[TrainPair], kind: LseLoss) -> Result<f64> {
    let losses: Vec<f64> = data
        .par_iter()
        .map(|p| {
            let pred = residual_forward(net, &p.input)?;
            lse_loss_with(&pred, &p.target, kind)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / data.len() as f64)
}

/// Mini-batch SGD with momentum (`v = mu v - lr g; w += v`) on the mean
/// batch gradient, batches drawn from a seeded shuffle each epoch.
pub fn lse_train(
    net: LseNetwork,
    dataset: &[TrainPair],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut net = net.net;
    train_network(&mut net, dataset, cfg).map(|history| TrainOutcome {
        net: LseNetwork { net },
        history,
    })
}

fn train_network(
    net: &mut FeatureNetwork,
    dataset: &[TrainPair],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    for (i, p) in dataset.iter().enumerate() {
        p.input
            .ensure_same_dims(&p.target, &format!("target of training pair {i}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Option<ConvGrad>> = net
        .layers()
        .iter()
        .map(|l| match &l.kind {
            LayerKind::Conv(c) => Some(ConvGrad {
                weights: vec![0.0; c.weights.len()],
                bias: vec![0.0; c.bias.len()],
            }),
            _ => None,
        })
        .collect();

    let initial = mean_loss(net, dataset, cfg.loss)?;
    if !initial.is_finite() {
        return Err(Error::Diverged { epoch: 0 });
    }
    let mut history = vec![initial];
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainPair> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (loss, grads) = batch_gradient(net, &batch, cfg.loss)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            total += loss * chunk.len() as f64;
            let mut grads = grads;
            if let Some(limit) = cfg.grad_clip {
                clip_global_norm(&mut grads, limit);
            }
            for ((layer, v), g) in net.layers_mut().iter_mut().zip(&mut velocity).zip(grads) {
                if let (LayerKind::Conv(c), Some(v), Some(g)) = (&mut layer.kind, v.as_mut(), g) {
                    for ((w, vel), gw) in c.weights.iter_mut().zip(&mut v.weights).zip(&g.weights) {
                        *vel = cfg.momentum * *vel - cfg.learning_rate * gw;
                        *w += *vel;
                    }
                    for ((b, vel), gb) in c.bias.iter_mut().zip(&mut v.bias).zip(&g.bias) {
                        *vel = cfg.momentum * *vel - cfg.learning_rate * gb;
                        *b += *vel;
                    }
                }
            }
        }
        let mean = total / dataset.len() as f64;
        log::info!("lse epoch {epoch}: mean loss {mean:.6}");
        history.push(mean);
    }
    Ok(history)
}

/// One line per entry: `epoch loss`.
pub fn write_history(path: impl AsRef<Path>, history: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("# epoch mean_loss\n");
    for (i, v) in history.iter().enumerate() {
        let _ = writeln!(s, "{i} {v:.12e}");
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Periodic Gaussian blur, used to build deblurring pairs.
pub fn gaussian_blur(plane: &ImagePlane, sigma: f64) -> ImagePlane {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / s).collect();
    let (w, h) = plane.dims();
    let wrap = |i: isize, n: usize| i.rem_euclid(n as isize) as usize;
    let rows = ImagePlane::from_fn(w, h, |x, y| {
        taps.iter()
            .enumerate()
            .map(|(k, t)| t * plane.get(wrap(x as isize + k as isize - r, w), y))
            .sum()
    });
    ImagePlane::from_fn(w, h, |x, y| {
        taps.iter()
            .enumerate()
            .map(|(k, t)| t * rows.get(x, wrap(y as isize + k as isize - r, h)))
            .sum()
    })
}

/// Seeded deblurring pairs: each target is a random smooth texture with a
/// few hard edges, each input its Gaussian blur.
pub fn synthetic_deblur_dataset(
    count: usize,
    size: usize,
    sigma: f64,
    seed: u64,
) -> Vec<TrainPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let target = random_texture(size, size, &mut rng);
            TrainPair {
                input: gaussian_blur(&target, sigma),
                target,
            }
        })
        .collect()
}

/// Sum of random plane waves plus a random step edge, scaled into `[0, 1]`.
pub fn random_texture(w: usize, h: usize, rng: &mut ChaCha8Rng) -> ImagePlane {
    use std::f64::consts::TAU;
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(1..6) as f64 * TAU / w as f64,
                rng.gen_range(1..6) as f64 * TAU / h as f64,
                rng.gen_range(0.0..TAU),
                rng.gen_range(0.05..0.2),
            )
        })
        .collect();
    let (nx, ny) = (rng.gen_range(-1.0..1.0f64), rng.gen_range(-1.0..1.0f64));
    let offset = rng.gen_range(-0.3..0.3) * (w + h) as f64;
    let step = rng.gen_range(0.1..0.3);
    ImagePlane::from_fn(w, h, |x, y| {
        let (fx, fy) = (x as f64, y as f64);
        let mut v = 0.5;
        for &(kx, ky, ph, a) in &waves {
            v += a * (kx * fx + ky * fy + ph).sin();
        }
        if nx * fx + ny * fy > offset {
            v += step;
        }
        v.clamp(0.0, 1.0)
    })
}
