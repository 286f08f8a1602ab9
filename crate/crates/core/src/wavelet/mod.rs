//! Undecimated (stationary) 2D wavelet transform with the à trous scheme.
//!
//! Level `i` filters the previous approximation with the base filters
//! upsampled by `2^(i-1)`: `2^(i-1) - 1` zeros between taps. Rows are filtered
//! first, then columns, both with periodic extension, and nothing is ever
//! downsampled, so all `3N + 1` sub-bands keep the input size.
//!
//! Each output sample accumulates its taps in a fixed order, which makes
//! `swt2` commute bit-for-bit with circular shifts.

mod filters;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use filters::{filter_pair_by_name, make_filter_pair, FilterFamily, WaveletFilterPair};

use crate::error::{Error, Result};
use crate::imgcore::{save_plane, ImagePlane};

/// Detail orientation of a high-frequency sub-band.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// Low-pass along x, high-pass along y (horizontal details).
    Lh,
    /// High-pass along x, low-pass along y (vertical details).
    Hl,
    /// High-pass in both directions (diagonal details).
    Hh,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::Lh, Orientation::Hl, Orientation::Hh];

    pub fn name(self) -> &'static str {
        match self {
            Orientation::Lh => "lh",
            Orientation::Hl => "hl",
            Orientation::Hh => "hh",
        }
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name().to_ascii_uppercase())
    }
}

impl FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lh" => Ok(Orientation::Lh),
            "hl" => Ok(Orientation::Hl),
            "hh" => Ok(Orientation::Hh),
            other => Err(Error::config(format!(
                "unknown sub-band orientation {other:?}; expected lh, hl or hh"
            ))),
        }
    }
}

/// The three detail sub-bands of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct DetailBands {
    pub lh: ImagePlane,
    pub hl: ImagePlane,
    pub hh: ImagePlane,
}

impl DetailBands {
    pub fn get(&self, orientation: Orientation) -> &ImagePlane {
        match orientation {
            Orientation::Lh => &self.lh,
            Orientation::Hl => &self.hl,
            Orientation::Hh => &self.hh,
        }
    }

    pub fn get_mut(&mut self, orientation: Orientation) -> &mut ImagePlane {
        match orientation {
            Orientation::Lh => &mut self.lh,
            Orientation::Hl => &mut self.hl,
            Orientation::Hh => &mut self.hh,
        }
    }
}

/// `LL_N` plus `(LH_i, HL_i, HH_i)` for `i = 1..=N`, all of the source size.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandPyramid {
    ll: ImagePlane,
    details: Vec<DetailBands>,
    filter: WaveletFilterPair,
}

impl SubbandPyramid {
    /// Assembles a pyramid from parts; every band must share one size.
    pub fn from_parts(
        ll: ImagePlane,
        details: Vec<DetailBands>,
        filter: WaveletFilterPair,
    ) -> Result<Self> {
        if details.is_empty() {
            return Err(Error::contract("a pyramid needs at least one level"));
        }
        for (i, level) in details.iter().enumerate() {
            for o in Orientation::ALL {
                ll.ensure_same_dims(level.get(o), &format!("sub-band {o}{}", i + 1))?;
            }
        }
        Ok(Self {
            ll,
            details,
            filter,
        })
    }

    pub fn levels(&self) -> usize {
        self.details.len()
    }

    pub fn ll(&self) -> &ImagePlane {
        &self.ll
    }

    /// Detail bands of level `level` (1-based, 1 is the finest).
    pub fn level(&self, level: usize) -> &DetailBands {
        &self.details[level - 1]
    }

    pub fn detail(&self, level: usize, orientation: Orientation) -> &ImagePlane {
        self.level(level).get(orientation)
    }

    pub fn set_detail(
        &mut self,
        level: usize,
        orientation: Orientation,
        band: ImagePlane,
    ) -> Result<()> {
        if level == 0 || level > self.levels() {
            return Err(Error::contract(format!(
                "level {level} outside 1..={}",
                self.levels()
            )));
        }
        self.ll.ensure_same_dims(&band, "set_detail")?;
        *self.details[level - 1].get_mut(orientation) = band;
        Ok(())
    }

    pub fn details(&self) -> &[DetailBands] {
        &self.details
    }

    pub fn filter(&self) -> &WaveletFilterPair {
        &self.filter
    }

    pub fn dims(&self) -> (usize, usize) {
        self.ll.dims()
    }

    /// Number of sub-bands, `3N + 1`.
    pub fn band_count(&self) -> usize {
        3 * self.levels() + 1
    }

    /// Every sub-band with a short name (`ll2`, `lh1`, ...), coarse LL first.
    pub fn named_bands(&self) -> Vec<(String, &ImagePlane)> {
        let mut out = vec![(format!("ll{}", self.levels()), &self.ll)];
        for (i, level) in self.details.iter().enumerate() {
            for o in Orientation::ALL {
                out.push((format!("{}{}", o.name(), i + 1), level.get(o)));
            }
        }
        out
    }

    /// Sub-band-wise `a * self + b * other`.
    pub fn lin_comb(&self, a: f64, other: &SubbandPyramid, b: f64) -> Result<SubbandPyramid> {
        if self.levels() != other.levels() {
            return Err(Error::contract("pyramids have different level counts"));
        }
        let ll = self.ll.lin_comb(a, &other.ll, b)?;
        let details = self
            .details
            .iter()
            .zip(&other.details)
            .map(|(p, q)| {
                Ok(DetailBands {
                    lh: p.lh.lin_comb(a, &q.lh, b)?,
                    hl: p.hl.lin_comb(a, &q.hl, b)?,
                    hh: p.hh.lin_comb(a, &q.hh, b)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SubbandPyramid {
            ll,
            details,
            filter: self.filter.clone(),
        })
    }
}

#[derive(Clone, Copy)]
enum Axis {
    X,
    Y,
}

/// Periodic filtering along one axis with taps spaced `step` samples apart:
/// `out[n] = sum_k taps[k] * input[n - (k - offset) * step]`.
fn filter_axis(
    input: &[f64],
    width: usize,
    height: usize,
    axis: Axis,
    taps: &[f64],
    offset: isize,
    step: usize,
) -> Vec<f64> {
    let len = match axis {
        Axis::X => width,
        Axis::Y => height,
    };
    // Source index (mod len) of tap k relative to output position 0.
    let lags: Vec<(usize, f64)> = taps
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != 0.0)
        .map(|(k, &t)| {
            let lag = -((k as isize - offset) * step as isize);
            (lag.rem_euclid(len as isize) as usize, t)
        })
        .collect();

    let mut out = vec![0.0; input.len()];
    match axis {
        Axis::X => {
            for (row_in, row_out) in input.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
                for (n, o) in row_out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for &(lag, t) in &lags {
                        let mut idx = n + lag;
                        if idx >= width {
                            idx -= width;
                        }
                        acc += t * row_in[idx];
                    }
                    *o = acc;
                }
            }
        }
        Axis::Y => {
            for n in 0..height {
                let row_out = &mut out[n * width..(n + 1) * width];
                for &(lag, t) in &lags {
                    let mut src = n + lag;
                    if src >= height {
                        src -= height;
                    }
                    let row_in = &input[src * width..(src + 1) * width];
                    for (o, &v) in row_out.iter_mut().zip(row_in) {
                        *o += t * v;
                    }
                }
            }
        }
    }
    out
}

/// Periodic filtering is exact for any length, even one shorter than the
/// filter, so the only requirement is room for a detail component.
const MIN_SIDE: usize = 2;

fn check_size(width: usize, height: usize, filter: &WaveletFilterPair) -> Result<()> {
    if width < MIN_SIDE || height < MIN_SIDE {
        return Err(Error::contract(format!(
            "image {width}x{height} is too small for the {} transform; need at least {MIN_SIDE}x{MIN_SIDE}",
            filter.name()
        )));
    }
    Ok(())
}

/// `levels`-level 2D stationary wavelet decomposition.
pub fn swt2(
    image: &ImagePlane,
    filter: &WaveletFilterPair,
    levels: usize,
) -> Result<SubbandPyramid> {
    if levels < 1 {
        return Err(Error::contract("swt2 needs at least one level"));
    }
    let (w, h) = image.dims();
    check_size(w, h, filter)?;
    let offset = filter.analysis_offset() as isize;

    let mut approx = image.data().to_vec();
    let mut details = Vec::with_capacity(levels);
    for level in 1..=levels {
        let step = 1usize << (level - 1);
        let lo_x = filter_axis(&approx, w, h, Axis::X, filter.h0(), offset, step);
        let hi_x = filter_axis(&approx, w, h, Axis::X, filter.g0(), offset, step);
        let ll = filter_axis(&lo_x, w, h, Axis::Y, filter.h0(), offset, step);
        let lh = filter_axis(&lo_x, w, h, Axis::Y, filter.g0(), offset, step);
        let hl = filter_axis(&hi_x, w, h, Axis::Y, filter.h0(), offset, step);
        let hh = filter_axis(&hi_x, w, h, Axis::Y, filter.g0(), offset, step);
        details.push(DetailBands {
            lh: ImagePlane::from_raw(w, h, lh),
            hl: ImagePlane::from_raw(w, h, hl),
            hh: ImagePlane::from_raw(w, h, hh),
        });
        approx = ll;
    }
    Ok(SubbandPyramid {
        ll: ImagePlane::from_raw(w, h, approx),
        details,
        filter: filter.clone(),
    })
}

/// Inverse of [`swt2`]: synthesizes from the coarsest level down to level 1.
///
/// The undecimated filter bank satisfies `H0 H1 + G0 G1 = 2 z^-d`, so each
/// axis pass carries a factor 1/2.
pub fn iswt2(pyramid: &SubbandPyramid) -> Result<ImagePlane> {
    let (w, h) = pyramid.dims();
    for (i, level) in pyramid.details.iter().enumerate() {
        for o in Orientation::ALL {
            pyramid
                .ll
                .ensure_same_dims(level.get(o), &format!("iswt2 sub-band {o}{}", i + 1))?;
        }
    }
    let filter = &pyramid.filter;
    let offset = filter.synthesis_offset();

    let mut approx = pyramid.ll.data().to_vec();
    for level in (1..=pyramid.levels()).rev() {
        let step = 1usize << (level - 1);
        let bands = pyramid.level(level);
        let combine = |lo_band: &[f64], hi_band: &[f64], axis: Axis| -> Vec<f64> {
            let a = filter_axis(lo_band, w, h, axis, filter.h1(), offset, step);
            let b = filter_axis(hi_band, w, h, axis, filter.g1(), offset, step);
            a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect()
        };
        let lo_x = combine(&approx, bands.lh.data(), Axis::Y);
        let hi_x = combine(bands.hl.data(), bands.hh.data(), Axis::Y);
        approx = combine(&lo_x, &hi_x, Axis::X);
    }
    Ok(ImagePlane::from_raw(w, h, approx))
}

/// Same pyramid with the low-frequency band swapped for `new_ll`.
pub fn replace_ll(pyramid: &SubbandPyramid, new_ll: ImagePlane) -> Result<SubbandPyramid> {
    pyramid.ll.ensure_same_dims(&new_ll, "replace_ll")?;
    Ok(SubbandPyramid {
        ll: new_ll,
        details: pyramid.details.clone(),
        filter: pyramid.filter.clone(),
    })
}

/// Writes each sub-band as a min-max scaled PGM plus a `scales.txt` sidecar
/// holding `name lo hi` per band (`value = lo + pixel * (hi - lo)`).
pub fn dump_pyramid(pyramid: &SubbandPyramid, dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut sidecar = format!(
        "# filter {} levels {} size {}x{}\n",
        pyramid.filter.name(),
        pyramid.levels(),
        pyramid.dims().0,
        pyramid.dims().1
    );
    let mut written = Vec::new();
    for (name, band) in pyramid.named_bands() {
        let (lo, hi) = band.min_max();
        let span = hi - lo;
        let view = if span > 0.0 {
            band.map(|v| (v - lo) / span)
        } else {
            band.map(|_| 0.5)
        };
        let file = format!("{name}.pgm");
        save_plane(&view, dir.join(&file))?;
        sidecar.push_str(&format!("{name} {lo:.17e} {hi:.17e}\n"));
        written.push(file);
    }
    let path = dir.join("scales.txt");
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(sidecar.as_bytes())
        .map_err(|e| Error::io(&path, e))?;
    Ok(written)
}
