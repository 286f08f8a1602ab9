//! Content, Gram-style and l1 losses on feature maps, with their gradients.

use serde::{Deserialize, Serialize};

use super::StyleTransferConfig;
use crate::error::{Error, Result};
use crate::features::{gemm, FeatureMaps, FeatureNetwork, ForwardTrace, Tensor3};
use crate::imgcore::ImagePlane;

/// Symmetric `N x N` inner-product matrix of vectorized feature maps.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    n: usize,
    data: Vec<f64>,
}

impl GramMatrix {
    pub fn of(f: &Tensor3) -> Self {
        let n = f.channels();
        let m = f.spatial();
        let mut data = vec![0.0; n * n];
        gemm(n, m, n, f.data(), (m, 1), f.data(), (1, m), 0.0, &mut data);
        // The product is symmetric in exact arithmetic; make it so bitwise.
        for i in 0..n {
            for j in i + 1..n {
                let v = data[i * n + j];
                data[j * n + i] = v;
            }
        }
        Self { n, data }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

pub fn gram(maps: &FeatureMaps, tag: &str) -> Result<GramMatrix> {
    Ok(GramMatrix::of(maps.get(tag)?))
}

fn same_shape<'a>(
    a: &'a FeatureMaps,
    b: &'a FeatureMaps,
    tag: &str,
) -> Result<(&'a Tensor3, &'a Tensor3)> {
    let (x, y) = (a.get(tag)?, b.get(tag)?);
    if x.shape() != y.shape() {
        return Err(Error::contract(format!(
            "feature shapes differ at {tag:?}: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    Ok((x, y))
}

fn content_value(fr: &Tensor3, fo: &Tensor3) -> f64 {
    let nm = (fr.channels() * fr.spatial()) as f64;
    let ss: f64 = fr
        .data()
        .iter()
        .zip(fo.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    ss / (2.0 * nm.sqrt())
}

/// `1 / (2 sqrt(N M)) * sum (Fr - Fo)^2` at one tag.
pub fn content_loss(fr: &FeatureMaps, fo: &FeatureMaps, tag: &str) -> Result<f64> {
    let (a, b) = same_shape(fr, fo, tag)?;
    Ok(content_value(a, b))
}

fn gram_value(gr: &GramMatrix, gp: &GramMatrix, m: usize) -> f64 {
    let n = gr.n as f64;
    let m = m as f64;
    let ss: f64 = gr
        .data
        .iter()
        .zip(&gp.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    ss / (4.0 * n * n * m * m)
}

/// `1 / (4 N^2 M^2) * sum (G(Fr) - G(Fp))^2` at one tag.
pub fn style_layer_loss(fr: &FeatureMaps, fp: &FeatureMaps, tag: &str) -> Result<f64> {
    let (a, b) = same_shape(fr, fp, tag)?;
    Ok(gram_value(
        &GramMatrix::of(a),
        &GramMatrix::of(b),
        a.spatial(),
    ))
}

/// Weighted sum of per-layer style losses over the configured style tags.
pub fn total_style_loss(
    fr: &FeatureMaps,
    fp: &FeatureMaps,
    cfg: &StyleTransferConfig,
) -> Result<f64> {
    cfg.style_tags
        .iter()
        .zip(&cfg.style_layer_weights)
        .map(|(tag, w)| Ok(w * style_layer_loss(fr, fp, tag)?))
        .sum()
}

/// Components of the sub-band objective at one point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// Unweighted content loss.
    pub content: f64,
    /// Layer-weighted style loss, before `beta`.
    pub style: f64,
    /// Sum of absolute values of the optimized plane.
    pub l1: f64,
    /// `alpha * content + beta * style + gamma * l1`.
    pub total: f64,
}

/// The sub-band objective with content features and style Gram matrices
/// computed once up front.
pub struct SubbandObjective<'a> {
    net: &'a FeatureNetwork,
    cfg: &'a StyleTransferConfig,
    width: usize,
    height: usize,
    content_layer: usize,
    content_target: Option<Tensor3>,
    /// `(layer index, weight, target Gram, M_l)`.
    style_targets: Vec<(usize, f64, GramMatrix, usize)>,
    upto: usize,
}

impl<'a> SubbandObjective<'a> {
    pub fn new(
        net: &'a FeatureNetwork,
        cfg: &'a StyleTransferConfig,
        content: &ImagePlane,
        style: &ImagePlane,
    ) -> Result<Self> {
        content.ensure_same_dims(style, "style sub-band")?;
        cfg.validate()?;
        let content_layer = net.layer_index(&cfg.content_tag)?;
        let style_layers = cfg
            .style_tags
            .iter()
            .map(|t| net.layer_index(t))
            .collect::<Result<Vec<_>>>()?;
        let upto = style_layers
            .iter()
            .copied()
            .chain([content_layer])
            .max()
            .unwrap_or(0)
            + 1;
        let needs_net = cfg.alpha != 0.0 || cfg.beta != 0.0;
        let mut obj = Self {
            net,
            cfg,
            width: content.width(),
            height: content.height(),
            content_layer,
            content_target: None,
            style_targets: Vec::new(),
            upto,
        };
        if needs_net {
            let tc = obj.trace(content)?;
            obj.check_nonempty(&tc, content_layer, &cfg.content_tag)?;
            obj.content_target = Some(tc.output(content_layer).clone());
            let ts = obj.trace(style)?;
            for ((tag, &layer), &w) in cfg
                .style_tags
                .iter()
                .zip(&style_layers)
                .zip(&cfg.style_layer_weights)
            {
                obj.check_nonempty(&ts, layer, tag)?;
                let f = ts.output(layer);
                obj.style_targets
                    .push((layer, w, GramMatrix::of(f), f.spatial()));
            }
        }
        Ok(obj)
    }

    fn check_nonempty(&self, trace: &ForwardTrace, layer: usize, tag: &str) -> Result<()> {
        if trace.output(layer).spatial() == 0 {
            return Err(Error::contract(format!(
                "layer {tag:?} has no spatial extent for a {}x{} sub-band",
                self.width, self.height
            )));
        }
        Ok(())
    }

    fn trace(&self, plane: &ImagePlane) -> Result<ForwardTrace> {
        let input = Tensor3::replicate(plane, self.net.input_channels());
        self.net.trace(&input, self.upto)
    }

    fn plane(&self, x: &[f64]) -> Result<ImagePlane> {
        if x.len() != self.width * self.height {
            return Err(Error::contract(format!(
                "expected {} coefficients, got {}",
                self.width * self.height,
                x.len()
            )));
        }
        ImagePlane::new(self.width, self.height, x.to_vec())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn loss(&self, x: &ImagePlane) -> Result<LossTerms> {
        self.evaluate(x, false).map(|(t, _)| t)
    }

    pub fn loss_and_gradient(&self, x: &ImagePlane) -> Result<(LossTerms, ImagePlane)> {
        self.evaluate(x, true)
            .map(|(t, g)| (t, g.expect("gradient requested")))
    }

    /// Flat-slice entry point for the optimizer.
    pub fn value_and_gradient(&self, x: &[f64]) -> Result<(LossTerms, Vec<f64>)> {
        let (t, g) = self.loss_and_gradient(&self.plane(x)?)?;
        Ok((t, g.into_data()))
    }

    fn evaluate(&self, x: &ImagePlane, want_grad: bool) -> Result<(LossTerms, Option<ImagePlane>)> {
        if x.dims() != (self.width, self.height) {
            return Err(Error::contract(format!(
                "sub-band is {}x{}, objective expects {}x{}",
                x.width(),
                x.height(),
                self.width,
                self.height
            )));
        }
        let cfg = self.cfg;
        let mut terms = LossTerms {
            l1: x.data().iter().map(|v| v.abs()).sum(),
            ..LossTerms::default()
        };
        let mut grad = want_grad.then(|| {
            x.data()
                .iter()
                .map(|&v| {
                    if v == 0.0 {
                        0.0
                    } else {
                        cfg.gamma * v.signum()
                    }
                })
                .collect::<Vec<f64>>()
        });

        if let Some(target) = &self.content_target {
            let trace = self.trace(x)?;
            let mut seeds: Vec<Option<Tensor3>> = vec![None; self.upto];

            let fr = trace.output(self.content_layer);
            terms.content = content_value(fr, target);
            if want_grad && cfg.alpha != 0.0 {
                let k = cfg.alpha / ((fr.channels() * fr.spatial()) as f64).sqrt();
                let cot: Vec<f64> = fr
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| k * (a - b))
                    .collect();
                accumulate(&mut seeds[self.content_layer], fr, cot);
            }

            for (layer, w, target_gram, m) in &self.style_targets {
                let f = trace.output(*layer);
                let g = GramMatrix::of(f);
                terms.style += w * gram_value(&g, target_gram, *m);
                let scale = cfg.beta * w;
                if want_grad && scale != 0.0 {
                    // d/dF of the layer loss = (G - Gp) F / (N^2 M^2)
                    let n = f.channels();
                    let nm = (n * n) as f64 * (*m as f64) * (*m as f64);
                    let diff: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&target_gram.data)
                        .map(|(a, b)| scale * (a - b) / nm)
                        .collect();
                    let mut cot = vec![0.0; n * m];
                    gemm(n, n, *m, &diff, (n, 1), f.data(), (*m, 1), 0.0, &mut cot);
                    accumulate(&mut seeds[*layer], f, cot);
                }
            }

            if let Some(grad) = grad.as_mut() {
                if seeds.iter().any(Option::is_some) {
                    let refs: Vec<Option<&Tensor3>> = seeds.iter().map(Option::as_ref).collect();
                    let back = self.net.backprop_seeded(&trace, &refs, false)?;
                    for (g, v) in grad.iter_mut().zip(back.input.sum_channels().data()) {
                        *g += v;
                    }
                }
            }
        }
        terms.total = cfg.alpha * terms.content + cfg.beta * terms.style + cfg.gamma * terms.l1;
        let grad = grad
            .map(|g| ImagePlane::new(self.width, self.height, g))
            .transpose()?;
        Ok((terms, grad))
    }
}

fn accumulate(slot: &mut Option<Tensor3>, like: &Tensor3, cot: Vec<f64>) {
    let (c, h, w) = like.shape();
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(cot) {
                *a += b;
            }
        }
        None => *slot = Some(Tensor3::from_raw(c, h, w, cot)),
    }
}

/// `alpha * Lc + beta * Ls + gamma * |x|_1` for one sub-band.
pub fn total_loss(
    x: &ImagePlane,
    content: &ImagePlane,
    style: &ImagePlane,
    net: &FeatureNetwork,
    cfg: &StyleTransferConfig,
) -> Result<f64> {
    Ok(SubbandObjective::new(net, cfg, content, style)?
        .loss(x)?
        .total)
}

/// Analytic gradient of [`total_loss`] with respect to `x`.
pub fn total_loss_gradient(
    x: &ImagePlane,
    content: &ImagePlane,
    style: &ImagePlane,
    net: &FeatureNetwork,
    cfg: &StyleTransferConfig,
) -> Result<ImagePlane> {
    Ok(SubbandObjective::new(net, cfg, content, style)?
        .loss_and_gradient(x)?
        .1)
}
