//! Convolutional feature extractor with activation capture and reverse-mode
//! gradients.
//!
//! A [`FeatureNetwork`] is a plain list of conv / ReLU / pool layers. Layers
//! may carry a tag (`relu1_1`, `conv2_2`, ...); [`FeatureNetwork::forward`]
//! returns the activations at requested tags and
//! [`FeatureNetwork::backward`] pulls cotangents at those tags back to the
//! input, which is all the style-transfer losses need.

mod conv;
mod weights;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub(crate) use conv::gemm;
pub use conv::ConvGrad;
pub use weights::{load_weights, read_weights, save_weights, write_weights};

use crate::error::{Error, Result};
use crate::imgcore::ImagePlane;

/// Dense `channels x height x width` activation tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::contract(format!(
                "tensor {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self::from_raw(channels, height, width, data))
    }

    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::from_raw(
            channels,
            height,
            width,
            vec![0.0; channels * height * width],
        )
    }

    /// Copies one plane into every channel.
    pub fn replicate(plane: &ImagePlane, channels: usize) -> Self {
        let mut data = Vec::with_capacity(channels * plane.len());
        for _ in 0..channels {
            data.extend_from_slice(plane.data());
        }
        Self::from_raw(channels, plane.height(), plane.width(), data)
    }

    pub fn from_plane(plane: &ImagePlane) -> Self {
        Self::replicate(plane, 1)
    }

    /// Sums all channels into one plane (adjoint of [`Tensor3::replicate`]).
    pub fn sum_channels(&self) -> ImagePlane {
        let hw = self.height * self.width;
        let mut out = vec![0.0; hw];
        for ch in self.data.chunks_exact(hw) {
            for (o, v) in out.iter_mut().zip(ch) {
                *o += v;
            }
        }
        ImagePlane::new(self.width, self.height, out).expect("non-finite channel sum")
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Spatial size `height * width`.
    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.spatial();
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn scale(&self, k: f64) -> Tensor3 {
        Self::from_raw(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|v| v * k).collect(),
        )
    }

    fn add_assign(&mut self, other: &Tensor3) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Average,
    Max,
}

/// 3x3 convolution weights, `out x in x 3 x 3`, and one bias per output.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weights: vec![0.0; out_channels * in_channels * conv::KAREA],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.in_channels + i) * 3 + ky) * 3 + kx]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv(Conv2d),
    Relu,
    Pool {
        mode: PoolMode,
        window: usize,
        stride: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub tag: Option<String>,
}

impl LayerSpec {
    pub fn conv(conv: Conv2d, tag: impl Into<String>) -> Self {
        Self {
            kind: LayerKind::Conv(conv),
            tag: Some(tag.into()),
        }
    }

    pub fn relu(tag: impl Into<String>) -> Self {
        Self {
            kind: LayerKind::Relu,
            tag: Some(tag.into()),
        }
    }

    pub fn pool(mode: PoolMode, tag: impl Into<String>) -> Self {
        Self {
            kind: LayerKind::Pool {
                mode,
                window: 2,
                stride: 2,
            },
            tag: Some(tag.into()),
        }
    }
}

/// Activations captured at the requested tags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureMaps {
    maps: BTreeMap<String, Tensor3>,
}

impl FeatureMaps {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, tag: impl Into<String>, tensor: Tensor3) {
        self.maps.insert(tag.into(), tensor);
    }

    pub fn get(&self, tag: &str) -> Result<&Tensor3> {
        self.maps.get(tag).ok_or_else(|| {
            Error::contract(format!(
                "tag {tag:?} not captured; available: {}",
                self.maps.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    /// Number of feature maps `N_l` at a tag.
    pub fn n(&self, tag: &str) -> Result<usize> {
        Ok(self.get(tag)?.channels())
    }

    /// Spatial size `M_l = width * height` at a tag.
    pub fn m(&self, tag: &str) -> Result<usize> {
        Ok(self.get(tag)?.spatial())
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.maps.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor3)> {
        self.maps.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// Everything the backward pass needs from a forward run.
pub struct ForwardTrace {
    input: Tensor3,
    /// Output of every executed layer.
    outputs: Vec<Tensor3>,
    /// Flat argmax indices for max-pool layers.
    argmax: Vec<Option<Vec<usize>>>,
}

impl ForwardTrace {
    pub fn output(&self, layer: usize) -> &Tensor3 {
        &self.outputs[layer]
    }

    pub fn last(&self) -> &Tensor3 {
        self.outputs.last().unwrap_or(&self.input)
    }

    pub fn input(&self) -> &Tensor3 {
        &self.input
    }

    fn layer_input(&self, layer: usize) -> &Tensor3 {
        if layer == 0 {
            &self.input
        } else {
            &self.outputs[layer - 1]
        }
    }
}

/// Input gradient and, optionally, per-layer parameter gradients.
pub struct Backprop {
    pub input: Tensor3,
    /// One entry per layer; `Some` only for conv layers.
    pub params: Option<Vec<Option<ConvGrad>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNetwork {
    input_channels: usize,
    layers: Vec<LayerSpec>,
}

impl FeatureNetwork {
    /// Validates the channel chain and tag uniqueness.
    pub fn new(input_channels: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_channels == 0 {
            return Err(Error::contract("network needs at least one input channel"));
        }
        let mut channels = input_channels;
        let mut seen = std::collections::HashSet::new();
        for (i, layer) in layers.iter().enumerate() {
            if let Some(tag) = &layer.tag {
                if tag.is_empty() {
                    return Err(Error::contract(format!("layer {i} has an empty tag")));
                }
                if !seen.insert(tag.clone()) {
                    return Err(Error::contract(format!("duplicate layer tag {tag:?}")));
                }
            }
            match &layer.kind {
                LayerKind::Conv(c) => {
                    if c.in_channels != channels {
                        return Err(Error::contract(format!(
                            "layer {i}: conv expects {} input channels but receives {channels}",
                            c.in_channels
                        )));
                    }
                    if c.out_channels == 0
                        || c.weights.len() != c.out_channels * c.in_channels * conv::KAREA
                        || c.bias.len() != c.out_channels
                    {
                        return Err(Error::contract(format!(
                            "layer {i}: conv parameter sizes do not match {}x{}x3x3",
                            c.out_channels, c.in_channels
                        )));
                    }
                    channels = c.out_channels;
                }
                LayerKind::Relu => {}
                LayerKind::Pool { window, stride, .. } => {
                    if *window == 0 || *stride == 0 {
                        return Err(Error::contract(format!(
                            "layer {i}: pool window and stride must be positive"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            input_channels,
            layers,
        })
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerSpec] {
        &mut self.layers
    }

    pub fn output_channels(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match &l.kind {
                LayerKind::Conv(c) => Some(c.out_channels),
                _ => None,
            })
            .unwrap_or(self.input_channels)
    }

    pub fn tags(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter_map(|l| l.tag.as_deref())
            .collect()
    }

    pub fn layer_index(&self, tag: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.tag.as_deref() == Some(tag))
            .ok_or_else(|| {
                Error::contract(format!(
                    "unknown layer tag {tag:?}; available: {}",
                    self.tags().join(", ")
                ))
            })
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match &l.kind {
                LayerKind::Conv(c) => c.param_count(),
                _ => 0,
            })
            .sum()
    }

    /// Runs layers `0..upto` and keeps every intermediate output.
    pub fn trace(&self, input: &Tensor3, upto: usize) -> Result<ForwardTrace> {
        if input.channels() != self.input_channels {
            return Err(Error::contract(format!(
                "network expects {} input channels, got {}",
                self.input_channels,
                input.channels()
            )));
        }
        let upto = upto.min(self.layers.len());
        let mut outputs: Vec<Tensor3> = Vec::with_capacity(upto);
        let mut argmax = Vec::with_capacity(upto);
        for (i, layer) in self.layers[..upto].iter().enumerate() {
            let x = outputs.last().unwrap_or(input);
            let (y, arg) = match &layer.kind {
                LayerKind::Conv(c) => (conv::forward(&c.weights, &c.bias, c.out_channels, x), None),
                LayerKind::Relu => (relu(x), None),
                LayerKind::Pool {
                    mode,
                    window,
                    stride,
                } => {
                    let (oh, ow) = pooled_dims(x, *window, *stride);
                    if oh == 0 || ow == 0 {
                        return Err(Error::contract(format!(
                            "layer {i} ({}): input {}x{} is too small to pool",
                            layer.tag.as_deref().unwrap_or("pool"),
                            x.height(),
                            x.width()
                        )));
                    }
                    pool_forward(x, *mode, *window, *stride)
                }
            };
            outputs.push(y);
            argmax.push(arg);
        }
        Ok(ForwardTrace {
            input: input.clone(),
            outputs,
            argmax,
        })
    }

    /// Activations at each requested tag.
    pub fn forward(&self, input: &Tensor3, tags: &[&str]) -> Result<FeatureMaps> {
        let idx = tags
            .iter()
            .map(|t| self.layer_index(t))
            .collect::<Result<Vec<_>>>()?;
        let upto = idx.iter().map(|i| i + 1).max().unwrap_or(0);
        let trace = self.trace(input, upto)?;
        let mut maps = FeatureMaps::new();
        for (tag, i) in tags.iter().zip(idx) {
            maps.insert(*tag, trace.outputs[i].clone());
        }
        Ok(maps)
    }

    /// Reverse-mode pass: cotangents are attached to layer outputs by tag and
    /// pulled back to the input (and optionally to the conv parameters).
    pub fn backprop(
        &self,
        trace: &ForwardTrace,
        cotangents: &FeatureMaps,
        want_params: bool,
    ) -> Result<Backprop> {
        let mut seeds: Vec<Option<&Tensor3>> = vec![None; trace.outputs.len()];
        for (tag, g) in cotangents.iter() {
            let i = self.layer_index(tag)?;
            if i >= trace.outputs.len() {
                return Err(Error::contract(format!(
                    "tag {tag:?} lies beyond the traced layers"
                )));
            }
            if g.shape() != trace.outputs[i].shape() {
                return Err(Error::contract(format!(
                    "cotangent for {tag:?} has shape {:?}, activation has {:?}",
                    g.shape(),
                    trace.outputs[i].shape()
                )));
            }
            seeds[i] = Some(g);
        }
        self.backprop_seeded(trace, &seeds, want_params)
    }

    pub(crate) fn backprop_seeded(
        &self,
        trace: &ForwardTrace,
        seeds: &[Option<&Tensor3>],
        want_params: bool,
    ) -> Result<Backprop> {
        let n = trace.outputs.len();
        let mut params: Vec<Option<ConvGrad>> = vec![None; n];
        let Some(start) = seeds.iter().rposition(Option::is_some) else {
            return Ok(Backprop {
                input: Tensor3::zeros(
                    trace.input.channels(),
                    trace.input.height(),
                    trace.input.width(),
                ),
                params: want_params.then_some(params),
            });
        };
        let mut grad = seeds[start].expect("seed present").clone();
        for i in (0..=start).rev() {
            if i < start {
                if let Some(seed) = seeds[i] {
                    grad.add_assign(seed);
                }
            }
            let x = trace.layer_input(i);
            grad = match &self.layers[i].kind {
                LayerKind::Conv(c) => {
                    let (gx, p) = conv::backward(&c.weights, c.out_channels, x, &grad, want_params);
                    params[i] = p;
                    gx
                }
                LayerKind::Relu => relu_backward(x, &grad),
                LayerKind::Pool {
                    mode,
                    window,
                    stride,
                } => pool_backward(
                    x,
                    &grad,
                    *mode,
                    *window,
                    *stride,
                    trace.argmax[i].as_deref(),
                ),
            };
        }
        Ok(Backprop {
            input: grad,
            params: want_params.then_some(params),
        })
    }

    /// Gradient of `sum_tags <cotangent, activation>` with respect to the input.
    pub fn backward(&self, input: &Tensor3, cotangents: &FeatureMaps) -> Result<Tensor3> {
        let upto = cotangents
            .tags()
            .map(|t| self.layer_index(t).map(|i| i + 1))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .max()
            .unwrap_or(0);
        let trace = self.trace(input, upto)?;
        Ok(self.backprop(&trace, cotangents, false)?.input)
    }
}

fn relu(x: &Tensor3) -> Tensor3 {
    Tensor3::from_raw(
        x.channels,
        x.height,
        x.width,
        x.data.iter().map(|&v| v.max(0.0)).collect(),
    )
}

fn relu_backward(x: &Tensor3, grad: &Tensor3) -> Tensor3 {
    Tensor3::from_raw(
        x.channels,
        x.height,
        x.width,
        x.data
            .iter()
            .zip(&grad.data)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    )
}

/// Output size with floor division; trailing rows/columns are dropped.
fn pooled_dims(x: &Tensor3, window: usize, stride: usize) -> (usize, usize) {
    let f = |n: usize| {
        if n < window {
            0
        } else {
            (n - window) / stride + 1
        }
    };
    (f(x.height), f(x.width))
}

fn pool_forward(
    x: &Tensor3,
    mode: PoolMode,
    window: usize,
    stride: usize,
) -> (Tensor3, Option<Vec<usize>>) {
    let (oh, ow) = pooled_dims(x, window, stride);
    let mut out = Vec::with_capacity(x.channels * oh * ow);
    let mut arg = (mode == PoolMode::Max).then(|| Vec::with_capacity(x.channels * oh * ow));
    let inv = 1.0 / (window * window) as f64;
    for c in 0..x.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for ky in 0..window {
                    for kx in 0..window {
                        let idx = (c * x.height + oy * stride + ky) * x.width + ox * stride + kx;
                        let v = x.data[idx];
                        acc += v;
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                match mode {
                    PoolMode::Average => out.push(acc * inv),
                    PoolMode::Max => {
                        out.push(best);
                        arg.as_mut().expect("max pool").push(best_idx);
                    }
                }
            }
        }
    }
    (Tensor3::from_raw(x.channels, oh, ow, out), arg)
}

fn pool_backward(
    x: &Tensor3,
    grad: &Tensor3,
    mode: PoolMode,
    window: usize,
    stride: usize,
    argmax: Option<&[usize]>,
) -> Tensor3 {
    let mut gx = vec![0.0; x.data.len()];
    let (oh, ow) = (grad.height, grad.width);
    match mode {
        PoolMode::Max => {
            let argmax = argmax.expect("max pool without argmax");
            for (&idx, &g) in argmax.iter().zip(&grad.data) {
                gx[idx] += g;
            }
        }
        PoolMode::Average => {
            let inv = 1.0 / (window * window) as f64;
            for c in 0..x.channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = grad.data[(c * oh + oy) * ow + ox] * inv;
                        for ky in 0..window {
                            for kx in 0..window {
                                gx[(c * x.height + oy * stride + ky) * x.width
                                    + ox * stride
                                    + kx] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor3::from_raw(x.channels, x.height, x.width, gx)
}

fn uniform_conv(rng: &mut ChaCha8Rng, in_c: usize, out_c: usize, scale: f64) -> Conv2d {
    // Weights are rounded through f32 so the network serializes losslessly.
    let mut draw = |_| f64::from(rng.gen_range(-scale..=scale) as f32);
    let weights = (0..out_c * in_c * conv::KAREA).map(&mut draw).collect();
    let bias = (0..out_c).map(&mut draw).collect();
    Conv2d {
        in_channels: in_c,
        out_channels: out_c,
        weights,
        bias,
    }
}

/// Block layout of a VGG-style network: `(block, convs, channels)`.
fn build_vgg(
    blocks: &[(usize, usize)],
    pools_after: usize,
    pool_mode: PoolMode,
    rng: &mut ChaCha8Rng,
    scale: f64,
) -> FeatureNetwork {
    let mut layers = Vec::new();
    let mut channels = 3;
    for (b, &(convs, width)) in blocks.iter().enumerate() {
        let block = b + 1;
        for j in 1..=convs {
            layers.push(LayerSpec::conv(
                uniform_conv(rng, channels, width, scale),
                format!("conv{block}_{j}"),
            ));
            layers.push(LayerSpec::relu(format!("relu{block}_{j}")));
            channels = width;
        }
        if block <= pools_after {
            layers.push(LayerSpec::pool(pool_mode, format!("pool{block}")));
        }
    }
    FeatureNetwork::new(3, layers).expect("valid VGG layout")
}

/// Seeded reduced VGG-style network (3 -> 8 -> 16 channels) exposing
/// `conv2_2` and `relu1_1 .. relu5_1`. Weights are uniform in `[-scale, scale]`.
///
/// Only the first two blocks end with a pool, so deep tags keep a usable
/// spatial size on small sub-bands (8x8 input leaves 2x2 at `relu5_1`).
pub fn random_network(seed: u64, scale: f64) -> FeatureNetwork {
    random_network_with_pool(seed, scale, PoolMode::Average)
}

pub fn random_network_with_pool(seed: u64, scale: f64, pool: PoolMode) -> FeatureNetwork {
    assert!(scale > 0.0, "scale must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_vgg(
        &[(1, 8), (2, 16), (1, 16), (1, 16), (1, 16)],
        2,
        pool,
        &mut rng,
        scale,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VggDepth {
    Vgg16,
    Vgg19,
}

/// Full VGG conv stack (up to `relu5_x`) with channel widths divided by
/// `width_divisor`, filled with seeded uniform weights. Useful as a layout
/// template for converted pretrained weights.
pub fn vgg_network(
    depth: VggDepth,
    width_divisor: usize,
    seed: u64,
    scale: f64,
    pool: PoolMode,
) -> FeatureNetwork {
    let div = width_divisor.max(1);
    let w = |c: usize| (c / div).max(1);
    let deep = match depth {
        VggDepth::Vgg16 => 3,
        VggDepth::Vgg19 => 4,
    };
    let blocks = [
        (2, w(64)),
        (2, w(128)),
        (deep, w(256)),
        (deep, w(512)),
        (deep, w(512)),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_vgg(&blocks, 4, pool, &mut rng, scale)
}
