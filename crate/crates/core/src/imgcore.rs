//! Image containers, color conversion and file I/O.
//!
//! All samples are `f64`. Pixel intensities live in `[0, 1]` by convention;
//! wavelet coefficients stored in the same container are unbounded. 8-bit
//! quantization only happens in [`load_image`] and [`save_image`].

use std::path::Path;

use image::{DynamicImage, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single-channel, row-major 2D array of finite samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImagePlane {
    /// Builds a plane, checking the length and that every sample is finite.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::contract(format!(
                "plane dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::contract(format!(
                "plane {width}x{height} needs {} samples, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "non-finite sample {} at index {i}",
                data[i]
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Skips the finiteness scan. Callers guarantee the invariants.
    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "plane dimensions must be positive");
        assert!(value.is_finite());
        Self::from_raw(width, height, vec![value; width * height])
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    /// Builds a plane by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data).expect("from_fn produced an invalid plane")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn same_dims(&self, other: &ImagePlane) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn ensure_same_dims(&self, other: &ImagePlane, what: &str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "{what}: dimension mismatch {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    /// Applies `f` sample-wise. The result must stay finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImagePlane {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self::from_raw(self.width, self.height, data)
    }

    /// `a * self + b * other`, sample-wise.
    pub fn lin_comb(&self, a: f64, other: &ImagePlane, b: f64) -> Result<ImagePlane> {
        self.ensure_same_dims(other, "linear combination")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&x, &y)| a * x + b * y)
            .collect();
        ImagePlane::new(self.width, self.height, data)
    }

    pub fn max_abs_diff(&self, other: &ImagePlane) -> f64 {
        assert!(self.same_dims(other), "max_abs_diff on mismatched planes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> ImagePlane {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Circular shift: output(x, y) = input(x - dx, y - dy) with wrap-around.
    pub fn circular_shift(&self, dx: isize, dy: isize) -> ImagePlane {
        let (w, h) = (self.width as isize, self.height as isize);
        let mut data = vec![0.0; self.data.len()];
        for y in 0..h {
            let sy = (y - dy).rem_euclid(h);
            for x in 0..w {
                let sx = (x - dx).rem_euclid(w);
                data[(y * w + x) as usize] = self.data[(sy * w + sx) as usize];
            }
        }
        Self::from_raw(self.width, self.height, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Rgb,
    YCbCr,
}

/// Three same-sized planes tagged with their color space.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorImage {
    planes: [ImagePlane; 3],
    space: ColorSpace,
}

impl ColorImage {
    pub fn new(planes: [ImagePlane; 3], space: ColorSpace) -> Result<Self> {
        if !planes[0].same_dims(&planes[1]) || !planes[0].same_dims(&planes[2]) {
            return Err(Error::contract("color planes must share dimensions"));
        }
        Ok(Self { planes, space })
    }

    /// RGB image with three copies of `plane`.
    pub fn from_gray(plane: ImagePlane) -> Self {
        Self {
            planes: [plane.clone(), plane.clone(), plane],
            space: ColorSpace::Rgb,
        }
    }

    pub fn planes(&self) -> &[ImagePlane; 3] {
        &self.planes
    }

    pub fn into_planes(self) -> [ImagePlane; 3] {
        self.planes
    }

    pub fn plane(&self, i: usize) -> &ImagePlane {
        &self.planes[i]
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn width(&self) -> usize {
        self.planes[0].width()
    }

    pub fn height(&self) -> usize {
        self.planes[0].height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.planes[0].dims()
    }

    pub fn max_abs_diff(&self, other: &ColorImage) -> f64 {
        self.planes
            .iter()
            .zip(&other.planes)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    /// Luma plane, converting from RGB when needed.
    pub fn luma(&self) -> ImagePlane {
        match self.space {
            ColorSpace::YCbCr => self.planes[0].clone(),
            ColorSpace::Rgb => {
                let [r, g, b] = &self.planes;
                let data = r
                    .data()
                    .iter()
                    .zip(g.data())
                    .zip(b.data())
                    .map(|((&r, &g), &b)| KR * r + KG * g + KB * b)
                    .collect();
                ImagePlane::from_raw(r.width(), r.height(), data)
            }
        }
    }
}

// Full-range BT.601 (JFIF) luma weights.
const KR: f64 = 0.299;
const KG: f64 = 0.587;
const KB: f64 = 0.114;
const CB_SCALE: f64 = 2.0 * (1.0 - KB);
const CR_SCALE: f64 = 2.0 * (1.0 - KR);

pub fn rgb_to_ycbcr(image: &ColorImage) -> Result<ColorImage> {
    if image.space != ColorSpace::Rgb {
        return Err(Error::contract("rgb_to_ycbcr expects an RGB image"));
    }
    let [r, g, b] = &image.planes;
    let n = r.len();
    let (mut y, mut cb, mut cr) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for i in 0..n {
        let (rv, gv, bv) = (r.data[i], g.data[i], b.data[i]);
        let yv = KR * rv + KG * gv + KB * bv;
        y.push(yv);
        cb.push(0.5 + (bv - yv) / CB_SCALE);
        cr.push(0.5 + (rv - yv) / CR_SCALE);
    }
    let (w, h) = r.dims();
    Ok(ColorImage {
        planes: [
            ImagePlane::from_raw(w, h, y),
            ImagePlane::from_raw(w, h, cb),
            ImagePlane::from_raw(w, h, cr),
        ],
        space: ColorSpace::YCbCr,
    })
}

pub fn ycbcr_to_rgb(image: &ColorImage) -> Result<ColorImage> {
    if image.space != ColorSpace::YCbCr {
        return Err(Error::contract("ycbcr_to_rgb expects a YCbCr image"));
    }
    let [y, cb, cr] = &image.planes;
    let n = y.len();
    let (mut r, mut g, mut b) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for i in 0..n {
        let yv = y.data[i];
        let rv = yv + CR_SCALE * (cr.data[i] - 0.5);
        let bv = yv + CB_SCALE * (cb.data[i] - 0.5);
        let gv = (yv - KR * rv - KB * bv) / KG;
        r.push(rv);
        g.push(gv);
        b.push(bv);
    }
    let (w, h) = y.dims();
    Ok(ColorImage {
        planes: [
            ImagePlane::from_raw(w, h, r),
            ImagePlane::from_raw(w, h, g),
            ImagePlane::from_raw(w, h, b),
        ],
        space: ColorSpace::Rgb,
    })
}

/// Reads an 8-bit PNG or PGM/PPM (plain or binary) as an RGB image in `[0, 1]`.
///
/// Grayscale files yield three identical planes. An alpha channel, if
/// present, is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<ColorImage> {
    let path = path.as_ref();
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| Error::io(path, e))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let scale = |v: u8| f64::from(v) / 255.0;
    match decoded {
        DynamicImage::ImageLuma8(buf) => {
            let data = buf.as_raw().iter().map(|&v| scale(v)).collect();
            Ok(ColorImage::from_gray(ImagePlane::from_raw(w, h, data)))
        }
        DynamicImage::ImageLumaA8(buf) => {
            let data = buf.as_raw().chunks_exact(2).map(|p| scale(p[0])).collect();
            Ok(ColorImage::from_gray(ImagePlane::from_raw(w, h, data)))
        }
        DynamicImage::ImageRgb8(buf) => Ok(interleaved_to_rgb(buf.as_raw(), 3, w, h)),
        DynamicImage::ImageRgba8(buf) => Ok(interleaved_to_rgb(buf.as_raw(), 4, w, h)),
        other => Err(Error::io(
            path,
            format!(
                "unsupported sample format {:?}; only 8-bit images are accepted",
                other.color()
            ),
        )),
    }
}

fn interleaved_to_rgb(raw: &[u8], stride: usize, w: usize, h: usize) -> ColorImage {
    let mut planes = [
        Vec::with_capacity(w * h),
        Vec::with_capacity(w * h),
        Vec::with_capacity(w * h),
    ];
    for px in raw.chunks_exact(stride) {
        for c in 0..3 {
            planes[c].push(f64::from(px[c]) / 255.0);
        }
    }
    let [r, g, b] = planes;
    ColorImage {
        planes: [
            ImagePlane::from_raw(w, h, r),
            ImagePlane::from_raw(w, h, g),
            ImagePlane::from_raw(w, h, b),
        ],
        space: ColorSpace::Rgb,
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an image; the format follows the extension (`.png`, `.pgm`, `.ppm`, `.pnm`).
///
/// YCbCr input is converted to RGB first; `.pgm` stores the luma plane.
/// Samples are clamped to `[0, 1]` and rounded to 8 bits.
pub fn save_image(image: &ColorImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    for plane in image.planes() {
        if let Some(v) = plane.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "refusing to write non-finite sample {v} to {}",
                path.display()
            )));
        }
    }
    let rgb = match image.space {
        ColorSpace::Rgb => image.clone(),
        ColorSpace::YCbCr => ycbcr_to_rgb(image)?,
    };
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let format = match ext.as_str() {
        "png" => ImageFormat::Png,
        "pgm" | "ppm" | "pnm" => ImageFormat::Pnm,
        _ => {
            return Err(Error::io(
                path,
                format!("unsupported output extension {ext:?} (use png, pgm or ppm)"),
            ))
        }
    };
    let (w, h) = rgb.dims();
    let result = if ext == "pgm" {
        let luma: Vec<u8> = rgb.luma().data().iter().map(|&v| quantize(v)).collect();
        image::save_buffer_with_format(
            path,
            &luma,
            w as u32,
            h as u32,
            image::ColorType::L8,
            format,
        )
    } else {
        let mut buf = Vec::with_capacity(w * h * 3);
        for i in 0..w * h {
            for plane in rgb.planes() {
                buf.push(quantize(plane.data[i]));
            }
        }
        image::save_buffer_with_format(
            path,
            &buf,
            w as u32,
            h as u32,
            image::ColorType::Rgb8,
            format,
        )
    };
    result.map_err(|e| Error::io(path, e))
}

/// Writes a single plane as an 8-bit grayscale file.
pub fn save_plane(plane: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    save_image(&ColorImage::from_gray(plane.clone()), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rgb(w: usize, h: usize, seed: u64) -> ColorImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut plane = || ImagePlane::from_fn(w, h, |_, _| rng.gen::<f64>());
        let planes = [plane(), plane(), plane()];
        ColorImage::new(planes, ColorSpace::Rgb).unwrap()
    }

    #[test]
    fn plane_rejects_bad_length_and_nan() {
        assert!(ImagePlane::new(2, 2, vec![0.0; 3]).is_err());
        assert!(ImagePlane::new(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(ImagePlane::new(1, 1, vec![f64::INFINITY]).is_err());
        assert!(ImagePlane::new(0, 1, vec![]).is_err());
    }

    #[test]
    fn loads_plain_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.pgm");
        std::fs::write(&path, "P2\n2 2\n255\n0 255 128 64\n").unwrap();
        let img = load_image(&path).unwrap();
        let expected = [0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0];
        for plane in img.planes() {
            assert_eq!(plane.dims(), (2, 2));
            for (a, b) in plane.data().iter().zip(expected) {
                assert_eq!(*a, b);
            }
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_image("/definitely/not/here.png").unwrap_err();
        assert!(err.is_io());
        assert!(err.to_string().contains("not/here.png"));
    }

    #[test]
    fn sixteen_bit_pgm_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.pgm");
        std::fs::write(&path, "P2\n1 1\n65535\n1000\n").unwrap();
        assert!(load_image(&path).unwrap_err().is_io());
    }

    #[test]
    fn png_round_trip_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.png");
        let img = random_rgb(64, 64, 3);
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.dims(), (64, 64));
        assert!(img.max_abs_diff(&back) <= 1.0 / 255.0 + 1e-12);
    }

    #[test]
    fn ppm_round_trip_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.ppm");
        let img = random_rgb(13, 7, 4);
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert!(img.max_abs_diff(&back) <= 1.0 / 255.0 + 1e-12);
    }

    #[test]
    fn out_of_range_is_clamped_on_save() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clamp.png");
        let img = ColorImage::from_gray(ImagePlane::new(2, 1, vec![1.7, -0.3]).unwrap());
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.plane(0).data(), &[1.0, 0.0]);
    }

    #[test]
    fn nan_never_reaches_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.png");
        let mut img = ColorImage::from_gray(ImagePlane::zeros(2, 2));
        img.planes[1].data[3] = f64::NAN;
        assert!(matches!(save_image(&img, &path), Err(Error::Contract(_))));
        assert!(!path.exists());
    }

    #[test]
    fn gray_maps_to_neutral_chroma() {
        for v in [0.0, 0.25, 1.0] {
            let img = ColorImage::from_gray(ImagePlane::filled(3, 2, v));
            let ycc = rgb_to_ycbcr(&img).unwrap();
            for i in 0..6 {
                assert!((ycc.plane(0).data()[i] - v).abs() < 1e-15);
                assert!((ycc.plane(1).data()[i] - 0.5).abs() < 1e-15);
                assert!((ycc.plane(2).data()[i] - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn color_round_trip() {
        let img = random_rgb(17, 9, 11);
        let back = ycbcr_to_rgb(&rgb_to_ycbcr(&img).unwrap()).unwrap();
        assert!(img.max_abs_diff(&back) < 1e-6);
        assert!(img.max_abs_diff(&back) < 1e-14);
    }

    #[test]
    fn wrong_space_is_rejected() {
        let img = random_rgb(2, 2, 0);
        assert!(ycbcr_to_rgb(&img).is_err());
        let ycc = rgb_to_ycbcr(&img).unwrap();
        assert!(rgb_to_ycbcr(&ycc).is_err());
    }

    #[test]
    fn circular_shift_wraps() {
        let p = ImagePlane::from_fn(3, 2, |x, y| (x + 10 * y) as f64);
        let s = p.circular_shift(1, 1);
        assert_eq!(s.get(0, 0), p.get(2, 1));
        assert_eq!(s.get(1, 1), p.get(0, 0));
        assert_eq!(s.circular_shift(-1, -1), p);
    }
}
