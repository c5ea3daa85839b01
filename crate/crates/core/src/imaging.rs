//! Image and mask rasters, value-range bookkeeping, file I/O and CIE L*a*b*
//! conversion.
//!
//! Every raster is stored row-major with interleaved channels (`H×W×C`), in
//! 64-bit reals. The [`RangeTag`] records which value convention the data
//! follows so that conversions can check their preconditions.

use std::fmt;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value convention of a [`FloatImage`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RangeTag {
    /// Byte intensities in `[0, 255]`.
    Raw255,
    /// Signed intensities in `[-1, 1]`.
    Signed1,
    /// Unit intensities in `[0, 1]`.
    Unit1,
    /// CIE L*a*b*: L in `[0, 100]`, a and b in `[-128, 128]`.
    Lab,
    /// Output of region reweighting; no bound.
    Reweighted,
}

impl fmt::Display for RangeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RangeTag::Raw255 => "raw255",
            RangeTag::Signed1 => "signed1",
            RangeTag::Unit1 => "unit1",
            RangeTag::Lab => "lab",
            RangeTag::Reweighted => "reweighted",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    range: RangeTag,
}

impl FloatImage {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
        range: RangeTag,
    ) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "data length {} != {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            range,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64, range: RangeTag) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
            range,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn range(&self) -> RangeTag {
        self.range
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

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    pub fn with_range(mut self, range: RangeTag) -> Self {
        self.range = range;
        self
    }

    pub fn same_dims(&self, other: &FloatImage) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn expect_range(&self, expected: RangeTag) -> Result<()> {
        if self.range != expected {
            return Err(Error::RangeTag {
                expected: expected.to_string(),
                actual: self.range.to_string(),
            });
        }
        Ok(())
    }

    /// Checks that every value lies inside the bounds implied by the range tag.
    pub fn check_bounds(&self) -> bool {
        match self.range {
            RangeTag::Raw255 => self.data.iter().all(|v| (0.0..=255.0).contains(v)),
            RangeTag::Signed1 => self.data.iter().all(|v| (-1.0..=1.0).contains(v)),
            RangeTag::Unit1 => self.data.iter().all(|v| (0.0..=1.0).contains(v)),
            RangeTag::Lab => self.data.chunks(self.channels).all(|px| {
                (0.0..=100.0).contains(&px[0])
                    && px[1..].iter().all(|v| (-128.0..=128.0).contains(v))
            }),
            RangeTag::Reweighted => self.data.iter().all(|v| v.is_finite()),
        }
    }

    /// Raw byte intensities scaled to `[0, 1]`.
    pub fn to_unit(&self) -> Result<FloatImage> {
        self.expect_range(RangeTag::Raw255)?;
        let data = self.data.iter().map(|v| v / 255.0).collect();
        FloatImage::new(self.height, self.width, self.channels, data, RangeTag::Unit1)
    }

    pub fn clamp_raw(&self) -> FloatImage {
        let data = self.data.iter().map(|v| v.clamp(0.0, 255.0)).collect();
        FloatImage {
            data,
            ..self.clone()
        }
    }

    /// Rounds to whole bytes, matching what [`save_image`] writes.
    pub fn quantize(&self) -> FloatImage {
        let data = self.data.iter().map(|v| v.round().clamp(0.0, 255.0)).collect();
        FloatImage {
            data,
            ..self.clone()
        }
    }

    /// Nearest-neighbour resampling to `height × width`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> FloatImage {
        let mut data = Vec::with_capacity(height * width * self.channels);
        for r in 0..height {
            let sr = r * self.height / height;
            for c in 0..width {
                let sc = c * self.width / width;
                let base = self.index(sr, sc, 0);
                data.extend_from_slice(&self.data[base..base + self.channels]);
            }
        }
        FloatImage {
            height,
            width,
            channels: self.channels,
            data,
            range: self.range,
        }
    }
}

/// A shadow mask as stored on disk: shadow 255, non-shadow 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

pub const SHADOW: u8 = 255;
pub const NON_SHADOW: u8 = 0;
/// Soft masks are binarized with `value > MASK_THRESHOLD`.
pub const MASK_THRESHOLD: u8 = 127;

impl RawMask {
    /// Builds a mask, binarizing any soft values at [`MASK_THRESHOLD`].
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "mask data length {} != {height}x{width}",
                data.len()
            )));
        }
        let data = data
            .into_iter()
            .map(|v| if v > MASK_THRESHOLD { SHADOW } else { NON_SHADOW })
            .collect();
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut shadow: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(if shadow(r, c) { SHADOW } else { NON_SHADOW });
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |_, _| false)
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |_, _| true)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn is_shadow(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] == SHADOW
    }

    #[inline]
    pub fn is_shadow_at(&self, index: usize) -> bool {
        self.data[index] == SHADOW
    }

    pub fn set(&mut self, row: usize, col: usize, shadow: bool) {
        self.data[row * self.width + col] = if shadow { SHADOW } else { NON_SHADOW };
    }

    pub fn shadow_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == SHADOW).count()
    }

    pub fn complement(&self) -> RawMask {
        let data = self.data.iter().map(|&v| SHADOW - v).collect();
        RawMask { data, ..self.clone() }
    }

    pub fn matches(&self, img: &FloatImage) -> bool {
        self.height == img.height() && self.width == img.width()
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> RawMask {
        RawMask::from_fn(height, width, |r, c| {
            self.is_shadow(r * self.height / height, c * self.width / width)
        })
    }
}

fn decode_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn open_dynamic(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(decode_err(path, "file does not exist"));
    }
    image::open(path).map_err(|e| decode_err(path, e.to_string()))
}

/// Loads an 8-bit grayscale or RGB PNG/PPM/PGM as a `raw255` image.
pub fn load_image(path: impl AsRef<Path>) -> Result<FloatImage> {
    let path = path.as_ref();
    let img = open_dynamic(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, bytes) = match img {
        DynamicImage::ImageLuma8(buf) => (1, buf.into_raw()),
        DynamicImage::ImageRgb8(buf) => (3, buf.into_raw()),
        other => {
            return Err(decode_err(
                path,
                format!("unsupported pixel format {:?}", other.color()),
            ))
        }
    };
    let data = bytes.into_iter().map(f64::from).collect();
    FloatImage::new(h, w, channels, data, RangeTag::Raw255)
}

/// Loads a single-channel mask, binarizing at [`MASK_THRESHOLD`].
pub fn load_mask(path: impl AsRef<Path>) -> Result<RawMask> {
    let path = path.as_ref();
    let img = open_dynamic(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(buf) => RawMask::new(h, w, buf.into_raw()),
        other => Err(decode_err(
            path,
            format!("mask must be 8-bit single channel, got {:?}", other.color()),
        )),
    }
}

fn to_bytes(img: &FloatImage) -> Vec<u8> {
    img.data()
        .iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect()
}

fn write_dynamic(dynamic: DynamicImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    dynamic.save(path).map_err(|e| Error::Encode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Saves a `raw255` image, rounding to the nearest byte. The format follows
/// the file extension (`.png`, `.ppm`, `.pgm`).
pub fn save_image(img: &FloatImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    img.expect_range(RangeTag::Raw255)?;
    let (w, h) = (img.width() as u32, img.height() as u32);
    let bytes = to_bytes(img);
    let dynamic = match img.channels() {
        1 => DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, bytes).expect("length checked")),
        3 => DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, bytes).expect("length checked")),
        c => {
            return Err(Error::Channels {
                expected: 3,
                actual: c,
            })
        }
    };
    write_dynamic(dynamic, path)
}

pub fn save_mask(mask: &RawMask, path: impl AsRef<Path>) -> Result<()> {
    let buf: GrayImage =
        ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, mask.data().to_vec())
            .expect("length checked");
    write_dynamic(DynamicImage::ImageLuma8(buf), path.as_ref())
}

/// `x / 255 * 2 - 1`.
pub fn normalize_signed(img: &FloatImage) -> Result<FloatImage> {
    img.expect_range(RangeTag::Raw255)?;
    let data = img.data().iter().map(|v| v / 255.0 * 2.0 - 1.0).collect();
    FloatImage::new(img.height(), img.width(), img.channels(), data, RangeTag::Signed1)
}

/// Inverse of [`normalize_signed`]; values are clamped to `[-1, 1]` first.
pub fn denormalize_signed(img: &FloatImage) -> Result<FloatImage> {
    img.expect_range(RangeTag::Signed1)?;
    let data = img
        .data()
        .iter()
        .map(|v| (v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0)
        .collect();
    FloatImage::new(img.height(), img.width(), img.channels(), data, RangeTag::Raw255)
}

/// D65 reference white.
pub const D65_WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

#[inline]
fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// Converts one sRGB pixel with components in `[0, 1]` to L*a*b*.
pub fn srgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let xyz: [f64; 3] =
        std::array::from_fn(|i| SRGB_TO_XYZ[i].iter().zip(&lin).map(|(m, c)| m * c).sum());
    let [fx, fy, fz] = std::array::from_fn(|i| lab_f(xyz[i] / D65_WHITE[i]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// sRGB (unit range, 3 channels) to CIE L*a*b* under D65.
pub fn rgb_to_lab(img: &FloatImage) -> Result<FloatImage> {
    img.expect_range(RangeTag::Unit1)?;
    if img.channels() != 3 {
        return Err(Error::Channels {
            expected: 3,
            actual: img.channels(),
        });
    }
    let mut data = Vec::with_capacity(img.data().len());
    for px in img.data().chunks_exact(3) {
        data.extend_from_slice(&srgb_pixel_to_lab([px[0], px[1], px[2]]));
    }
    FloatImage::new(img.height(), img.width(), 3, data, RangeTag::Lab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn raw(data: Vec<f64>, c: usize) -> FloatImage {
        let n = data.len() / c;
        FloatImage::new(1, n, c, data, RangeTag::Raw255).unwrap()
    }

    #[test]
    fn normalize_endpoints() {
        let out = normalize_signed(&raw(vec![0.0, 255.0, 127.5], 1)).unwrap();
        assert_eq!(out.data(), &[-1.0, 1.0, 0.0]);
        assert_eq!(out.range(), RangeTag::Signed1);
    }

    #[test]
    fn normalize_rejects_wrong_tag() {
        let img = FloatImage::filled(2, 2, 1, 0.0, RangeTag::Unit1);
        assert!(matches!(normalize_signed(&img), Err(Error::RangeTag { .. })));
        assert!(matches!(denormalize_signed(&img), Err(Error::RangeTag { .. })));
    }

    #[test]
    fn denormalize_endpoints() {
        let img = FloatImage::new(1, 2, 1, vec![-1.0, 1.0], RangeTag::Signed1).unwrap();
        assert_eq!(denormalize_signed(&img).unwrap().data(), &[0.0, 255.0]);
    }

    #[test]
    fn denormalize_clamps_out_of_range() {
        let img = FloatImage::new(1, 2, 1, vec![-3.0, 1.5], RangeTag::Signed1).unwrap();
        assert_eq!(denormalize_signed(&img).unwrap().data(), &[0.0, 255.0]);
    }

    proptest! {
        #[test]
        fn signed_round_trip(values in proptest::collection::vec(-1.5f64..1.5, 1..64)) {
            let n = values.len();
            let img = FloatImage::new(1, n, 1, values.clone(), RangeTag::Signed1).unwrap();
            let back = normalize_signed(&denormalize_signed(&img).unwrap()).unwrap();
            for (b, v) in back.data().iter().zip(&values) {
                prop_assert!((b - v.clamp(-1.0, 1.0)).abs() < 1e-12);
            }
        }

        #[test]
        fn normalize_is_strictly_monotone(a in 0.0f64..255.0, b in 0.0f64..255.0) {
            prop_assume!(a < b);
            let out = normalize_signed(&raw(vec![a, b], 1)).unwrap();
            prop_assert!(out.data()[0] < out.data()[1]);
        }

        #[test]
        fn grayscale_has_neutral_chroma(g in 0.0f64..=1.0) {
            let [_, a, b] = srgb_pixel_to_lab([g, g, g]);
            prop_assert!(a.abs() < 0.01 && b.abs() < 0.01);
        }
    }

    #[test]
    fn lab_white_black_red() {
        let [l, a, b] = srgb_pixel_to_lab([1.0, 1.0, 1.0]);
        assert_abs_diff_eq!(l, 100.0, epsilon = 1e-3);
        assert!(a.abs() < 0.01 && b.abs() < 0.01);
        assert_eq!(srgb_pixel_to_lab([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0]);
        let [l, a, b] = srgb_pixel_to_lab([1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(l, 53.24, epsilon = 0.05);
        assert_abs_diff_eq!(a, 80.09, epsilon = 0.05);
        assert_abs_diff_eq!(b, 67.20, epsilon = 0.05);
    }

    #[test]
    fn lab_requires_three_channels() {
        let img = FloatImage::filled(2, 2, 1, 0.5, RangeTag::Unit1);
        assert!(matches!(rgb_to_lab(&img), Err(Error::Channels { .. })));
    }

    #[test]
    fn soft_mask_is_binarized() {
        let m = RawMask::new(1, 4, vec![0, 127, 128, 255]).unwrap();
        assert_eq!(m.data(), &[0, 0, 255, 255]);
    }

    #[test]
    fn load_rejects_missing_file() {
        let err = load_image("/nonexistent/foo.png").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/foo.png"));
    }

    #[test]
    fn png_and_pnm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..8 * 8 * 3).map(|i| ((i * 37 + 11) % 256) as f64).collect();
        let img = FloatImage::new(8, 8, 3, data, RangeTag::Raw255).unwrap();
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            save_image(&img, &p).unwrap();
            assert_eq!(load_image(&p).unwrap(), img);
        }
        let gray = FloatImage::filled(3, 5, 1, 200.0, RangeTag::Raw255);
        let p = dir.path().join("g.pgm");
        save_image(&gray, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), gray);
    }

    #[test]
    fn load_rejects_sixteen_bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.png");
        let buf: ImageBuffer<image::Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(2, 2, vec![0u16; 4]).unwrap();
        buf.save(&p).unwrap();
        let err = load_image(&p).unwrap_err();
        assert!(matches!(err, Error::Decode { .. }));
        assert!(err.to_string().contains("deep.png"));
    }
}
