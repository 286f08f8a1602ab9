//! PSNR, SSIM and coefficient histograms.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{ColorImage, ImagePlane};

/// Returned by [`psnr`] for identical inputs.
pub const PSNR_CAP_DB: f64 = 99.0;

pub fn mse(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    a.ensure_same_dims(b, "second image")?;
    let ss: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(ss / a.len() as f64)
}

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImagePlane, b: &ImagePlane, peak: f64) -> Result<f64> {
    psnr_capped(a, b, peak, PSNR_CAP_DB)
}

pub fn psnr_capped(a: &ImagePlane, b: &ImagePlane, peak: f64, cap: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::contract(format!(
            "peak must be positive, got {peak}"
        )));
    }
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (peak * peak / e).log10()).min(cap))
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WIN] {
    let mut w = [0.0; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filtering with the SSIM window.
fn filter_valid(data: &[f64], w: usize, h: usize, win: &[f64; SSIM_WIN]) -> Vec<f64> {
    let ow = w - SSIM_WIN + 1;
    let oh = h - SSIM_WIN + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let src = &data[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = win
                .iter()
                .zip(&src[x..x + SSIM_WIN])
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = win
                .iter()
                .enumerate()
                .map(|(k, c)| c * rows[(y + k) * ow + x])
                .sum();
        }
    }
    out
}

struct SsimMaps {
    luminance: Vec<f64>,
    contrast_structure: Vec<f64>,
}

fn ssim_maps(a: &ImagePlane, b: &ImagePlane) -> Result<SsimMaps> {
    a.ensure_same_dims(b, "second image")?;
    let (w, h) = a.dims();
    if w < SSIM_WIN || h < SSIM_WIN {
        return Err(Error::contract(format!(
            "SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {w}x{h}"
        )));
    }
    let win = gaussian_window();
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let (x, y) = (a.data(), b.data());
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect()
    };
    let mu_x = filter_valid(x, w, h, &win);
    let mu_y = filter_valid(y, w, h, &win);
    let xx = filter_valid(&prod(&|p, _| p * p), w, h, &win);
    let yy = filter_valid(&prod(&|_, q| q * q), w, h, &win);
    let xy = filter_valid(&prod(&|p, q| p * q), w, h, &win);
    let mut luminance = Vec::with_capacity(mu_x.len());
    let mut contrast_structure = Vec::with_capacity(mu_x.len());
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let sx = xx[i] - mx * mx;
        let sy = yy[i] - my * my;
        let sxy = xy[i] - mx * my;
        luminance.push((2.0 * mx * my + c1) / (mx * mx + my * my + c1));
        contrast_structure.push((2.0 * sxy + c2) / (sx + sy + c2));
    }
    Ok(SsimMaps {
        luminance,
        contrast_structure,
    })
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1, over valid window positions.
pub fn ssim(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    let m = ssim_maps(a, b)?;
    let n = m.luminance.len() as f64;
    Ok(m.luminance
        .iter()
        .zip(&m.contrast_structure)
        .map(|(l, cs)| l * cs)
        .sum::<f64>()
        / n)
}

/// Mean of the contrast-structure factor of SSIM alone. Unlike full SSIM it
/// does not depend on the local means.
pub fn ssim_contrast_structure(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    let m = ssim_maps(a, b)?;
    Ok(m.contrast_structure.iter().sum::<f64>() / m.contrast_structure.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricChannel {
    /// BT.601 luma.
    #[default]
    Y,
    /// Mean of the per-channel values over R, G and B.
    Rgb,
}

/// PSNR on color images, on luma or averaged over RGB channels.
pub fn psnr_color(a: &ColorImage, b: &ColorImage, channel: MetricChannel) -> Result<f64> {
    match channel {
        MetricChannel::Y => psnr(&a.luma(), &b.luma(), 1.0),
        MetricChannel::Rgb => {
            let mut acc = 0.0;
            for i in 0..3 {
                acc += psnr(a.plane(i), b.plane(i), 1.0)?;
            }
            Ok(acc / 3.0)
        }
    }
}

pub fn ssim_color(a: &ColorImage, b: &ColorImage, channel: MetricChannel) -> Result<f64> {
    match channel {
        MetricChannel::Y => ssim(&a.luma(), &b.luma()),
        MetricChannel::Rgb => {
            let mut acc = 0.0;
            for i in 0..3 {
                acc += ssim(a.plane(i), b.plane(i))?;
            }
            Ok(acc / 3.0)
        }
    }
}

/// Uniform-bin histogram of plane values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    /// Counts divided by the total.
    pub fn normalized(&self) -> Vec<f64> {
        let t = self.total.max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }

    /// `bin_lo,bin_hi,count` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", self.bin_edges[i], self.bin_edges[i + 1], c);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Values outside `[lo, hi]` are counted in the first or last bin.
pub fn subband_histogram(s: &ImagePlane, bins: usize, (lo, hi): (f64, f64)) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::contract("histogram needs at least one bin"));
    }
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::contract(format!(
            "invalid histogram range [{lo}, {hi}]"
        )));
    }
    let width = (hi - lo) / bins as f64;
    let bin_edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + i as f64 * width })
        .collect();
    let mut counts = vec![0u64; bins];
    for &v in s.data() {
        let t = ((v - lo) / (hi - lo) * bins as f64).floor();
        let i = if t < 0.0 {
            0
        } else {
            (t as usize).min(bins - 1)
        };
        counts[i] += 1;
    }
    Ok(Histogram {
        bin_edges,
        counts,
        total: s.len() as u64,
    })
}

/// Chi-squared distance `sum (p - q)^2 / (p + q)` between normalized
/// histograms; 0 for identical distributions, 2 for disjoint ones.
pub fn histogram_distance(h1: &Histogram, h2: &Histogram) -> Result<f64> {
    if h1.bin_edges != h2.bin_edges {
        return Err(Error::contract("histograms use different binning"));
    }
    let (p, q) = (h1.normalized(), h2.normalized());
    Ok(p.iter()
        .zip(&q)
        .filter(|(a, b)| **a + **b > 0.0)
        .map(|(a, b)| (a - b) * (a - b) / (a + b))
        .sum())
}

/// Histogram distance between two planes, binned over a symmetric range set
/// by the reference plane's largest magnitude.
pub fn plane_histogram_distance(
    plane: &ImagePlane,
    reference: &ImagePlane,
    bins: usize,
) -> Result<f64> {
    let r = reference.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let r = if r > 0.0 { r } else { 1.0 };
    let a = subband_histogram(plane, bins, (-r, r))?;
    let b = subband_histogram(reference, bins, (-r, r))?;
    histogram_distance(&a, &b)
}
