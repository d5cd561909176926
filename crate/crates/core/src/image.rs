//! RGB images with values in `[0, 1]` and the resampling kernels used by the
//! encoder, the degradation chain and the generator.

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{RasrError, Result};

/// Rec.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// An H×W×3 image stored row-major, channel-interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Interpolation used when resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    Area,
    Bilinear,
    Bicubic,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(RasrError::InvalidShape(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(RasrError::InvalidShape(format!(
                "expected {} values for {height}x{width}x3, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(RasrError::InvalidInput(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image from arbitrary values, clamping into `[0, 1]`.
    /// NaN maps to 0.
    pub fn from_clamped(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let data = data
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::from_clamped(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(RasrError::InvalidShape(format!(
                "crop {height}x{width}@({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for y in top..top + height {
            let start = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    /// Center crop to at most `size`×`size`.
    pub fn center_crop(&self, size: usize) -> Image {
        let h = size.min(self.height);
        let w = size.min(self.width);
        self.crop((self.height - h) / 2, (self.width - w) / 2, h, w)
            .expect("center crop is always in bounds")
    }

    /// Per-pixel luma plane.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| {
                LUMA_WEIGHTS[0] * p[0] as f64
                    + LUMA_WEIGHTS[1] * p[1] as f64
                    + LUMA_WEIGHTS[2] * p[2] as f64
            })
            .collect()
    }

    /// Channel-major `(3, H, W)` array in double precision.
    pub fn to_chw(&self) -> Array3<f64> {
        let (h, w) = (self.height, self.width);
        Array3::from_shape_fn((3, h, w), |(c, y, x)| self.data[(y * w + x) * 3 + c] as f64)
    }

    /// Inverse of [`Image::to_chw`]; values are clamped into `[0, 1]`.
    pub fn from_chw(arr: &Array3<f64>) -> Result<Image> {
        let (c, h, w) = arr.dim();
        if c != 3 {
            return Err(RasrError::InvalidShape(format!(
                "expected 3 channels, got {c}"
            )));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    data.push(arr[[ch, y, x]] as f32);
                }
            }
        }
        Image::from_clamped(h, w, data)
    }

    pub fn resize(&self, height: usize, width: usize, mode: ResizeMode) -> Result<Image> {
        if height == 0 || width == 0 {
            return Err(RasrError::InvalidShape(format!(
                "target size must be positive, got {height}x{width}"
            )));
        }
        if (height, width) == self.dims() {
            return Ok(self.clone());
        }
        match mode {
            ResizeMode::Area => Ok(self.resize_area(height, width)),
            ResizeMode::Bilinear => Ok(self.resize_separable(height, width, Kernel::Bilinear)),
            ResizeMode::Bicubic => Ok(self.resize_separable(height, width, Kernel::Bicubic)),
        }
    }

    /// Box-filter resampling with fractional pixel coverage.
    fn resize_area(&self, height: usize, width: usize) -> Image {
        let rows = area_weights(self.height, height);
        let cols = area_weights(self.width, width);
        self.apply_separable(height, width, &rows, &cols)
    }

    fn resize_separable(&self, height: usize, width: usize, kernel: Kernel) -> Image {
        let rows = interp_weights(self.height, height, kernel);
        let cols = interp_weights(self.width, width, kernel);
        self.apply_separable(height, width, &rows, &cols)
    }

    fn apply_separable(
        &self,
        height: usize,
        width: usize,
        rows: &[Vec<(usize, f64)>],
        cols: &[Vec<(usize, f64)>],
    ) -> Image {
        // horizontal pass
        let mut tmp = vec![0.0f64; self.height * width * 3];
        for y in 0..self.height {
            for (ox, taps) in cols.iter().enumerate() {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for &(sx, wgt) in taps {
                        acc += wgt * self.get(y, sx, c) as f64;
                    }
                    tmp[(y * width + ox) * 3 + c] = acc;
                }
            }
        }
        let mut out = Vec::with_capacity(height * width * 3);
        for taps in rows {
            for ox in 0..width {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for &(sy, wgt) in taps {
                        acc += wgt * tmp[(sy * width + ox) * 3 + c];
                    }
                    out.push(acc as f32);
                }
            }
        }
        Image::from_clamped(height, width, out).expect("resize preserves shape invariants")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| RasrError::ImageCodec {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Image::new(h as usize, w as usize, data)
    }

    /// Writes an 8-bit PNG. The file is written to a sibling temporary path
    /// and renamed into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize_u8(v)).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions");
        let mut png = std::io::Cursor::new(Vec::new());
        buf.write_to(&mut png, image::ImageFormat::Png)
            .map_err(|e| RasrError::ImageCodec {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        crate::io::write_atomic(path, png.get_ref())
    }

    /// Round-trips the pixel values through 8-bit quantization.
    pub fn quantized_u8(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| quantize_u8(v) as f32 / 255.0)
                .collect(),
        }
    }
}

fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Clone, Copy)]
enum Kernel {
    Bilinear,
    Bicubic,
}

fn cubic(x: f64) -> f64 {
    // Keys kernel, a = -0.5
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Half-pixel-centered interpolation taps with clamped borders. Weights of
/// each output sample sum to one.
fn interp_weights(src: usize, dst: usize, kernel: Kernel) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let base = center.floor() as isize;
            let frac = center - base as f64;
            let taps: Vec<(isize, f64)> = match kernel {
                Kernel::Bilinear => vec![(base, 1.0 - frac), (base + 1, frac)],
                Kernel::Bicubic => (-1..=2)
                    .map(|d| (base + d, cubic(frac - d as f64)))
                    .collect(),
            };
            let total: f64 = taps.iter().map(|t| t.1).sum();
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(taps.len());
            for (i, w) in taps {
                let idx = i.clamp(0, src as isize - 1) as usize;
                match merged.iter_mut().find(|(j, _)| *j == idx) {
                    Some(slot) => slot.1 += w / total,
                    None => merged.push((idx, w / total)),
                }
            }
            merged
        })
        .collect()
}

/// Box filter weights: output sample `o` averages the source interval
/// `[o*s, (o+1)*s)` with fractional coverage at the ends.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let mut taps = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < src {
                let cover = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                if cover > 0.0 {
                    taps.push((i, cover / scale));
                }
                i += 1;
            }
            taps
        })
        .collect()
}
