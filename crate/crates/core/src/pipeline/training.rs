//! Training pairs for the LSE network built from clean images.
//!
//! The target is the LL band of a clean image; the input is the LL band of
//! the same image after a bicubic down/up round trip.

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::imgcore::ImagePlane;
use crate::lse::TrainPair;
use crate::wavelet::{swt2, WaveletFilterPair};

type GrayF32 = ImageBuffer<Luma<f32>, Vec<f32>>;

fn to_buffer(p: &ImagePlane) -> GrayF32 {
    let data = p.data().iter().map(|&v| v as f32).collect();
    GrayF32::from_raw(p.width() as u32, p.height() as u32, data).expect("buffer size matches")
}

/// Bicubic downscale by `factor`, then bicubic upscale back to full size.
pub fn degrade_bicubic(plane: &ImagePlane, factor: usize) -> Result<ImagePlane> {
    if factor < 2 {
        return Err(Error::contract("degradation factor must be at least 2"));
    }
    let (w, h) = plane.dims();
    let (sw, sh) = (w / factor, h / factor);
    if sw == 0 || sh == 0 {
        return Err(Error::contract(format!(
            "{w}x{h} image is too small to downscale by {factor}"
        )));
    }
    let buf = to_buffer(plane);
    let small = imageops::resize(&buf, sw as u32, sh as u32, FilterType::CatmullRom);
    let back = imageops::resize(&small, w as u32, h as u32, FilterType::CatmullRom);
    ImagePlane::new(w, h, back.into_raw().into_iter().map(f64::from).collect())
}

/// Cuts `patch x patch` windows with the given stride out of the LL bands of
/// every clean image and its degraded copy.
pub fn lse_pairs_from_images(
    images: &[ImagePlane],
    filter: &WaveletFilterPair,
    levels: usize,
    factor: usize,
    patch: usize,
    stride: usize,
) -> Result<Vec<TrainPair>> {
    if patch == 0 || stride == 0 {
        return Err(Error::contract("patch size and stride must be positive"));
    }
    let mut pairs = Vec::new();
    for clean in images {
        let (w, h) = clean.dims();
        if w < patch || h < patch {
            return Err(Error::contract(format!(
                "{w}x{h} training image is smaller than the {patch}x{patch} patch"
            )));
        }
        let gt = swt2(clean, filter, levels)?;
        let input = swt2(&degrade_bicubic(clean, factor)?, filter, levels)?;
        for y0 in (0..=h - patch).step_by(stride) {
            for x0 in (0..=w - patch).step_by(stride) {
                let crop = |p: &ImagePlane| {
                    ImagePlane::from_fn(patch, patch, |x, y| p.get(x0 + x, y0 + y))
                };
                pairs.push(TrainPair {
                    input: crop(input.ll()),
                    target: crop(gt.ll()),
                });
            }
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavelet::{make_filter_pair, FilterFamily};

    #[test]
    fn constant_survives_degradation() {
        let p = ImagePlane::filled(16, 12, 0.25);
        let d = degrade_bicubic(&p, 2).unwrap();
        assert!(d.max_abs_diff(&p) < 1e-6);
        assert!(degrade_bicubic(&p, 1).is_err());
        assert!(degrade_bicubic(&ImagePlane::zeros(3, 3), 4).is_err());
    }

    #[test]
    fn patch_grid() {
        let img = ImagePlane::from_fn(20, 16, |x, y| ((x * 7 + y * 3) % 11) as f64 / 10.0);
        let f = make_filter_pair(FilterFamily::Haar);
        let pairs = lse_pairs_from_images(&[img], &f, 1, 2, 8, 4).unwrap();
        // x0 in {0,4,8,12}, y0 in {0,4,8}
        assert_eq!(pairs.len(), 12);
        assert!(pairs.iter().all(|p| p.input.dims() == (8, 8)));
    }
}
