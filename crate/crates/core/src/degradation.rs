//! Seeded synthetic degradation: Gaussian blur, resampling, additive
//! Gaussian noise and block-DCT compression, with an optional second pass.
//!
//! Every random choice is sampled up front into a [`DegradationTrace`];
//! [`replay`] applies a trace deterministically, so `degrade` is exactly
//! "sample a trace, replay it".

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{RasrError, Result};
use crate::image::{Image, ResizeMode};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationConfig {
    pub scale: usize,
    pub blur_kernel_sizes: Vec<usize>,
    pub blur_sigma_range: [f64; 2],
    pub noise_sigma_range: [f64; 2],
    pub jpeg_quality_range: [u8; 2],
    pub second_order: bool,
    pub resize_modes: Vec<ResizeMode>,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            scale: 4,
            blur_kernel_sizes: (7..=21).step_by(2).collect(),
            blur_sigma_range: [0.2, 3.0],
            noise_sigma_range: [1.0 / 255.0, 25.0 / 255.0],
            jpeg_quality_range: [30, 95],
            second_order: false,
            resize_modes: vec![ResizeMode::Area, ResizeMode::Bilinear, ResizeMode::Bicubic],
        }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(RasrError::InvalidInput(format!("degradation config: {m}")));
        if self.scale == 0 {
            return bad("scale must be at least 1");
        }
        if self.blur_kernel_sizes.is_empty() || self.blur_kernel_sizes.iter().any(|k| k % 2 == 0) {
            return bad("blur kernel sizes must be a non-empty list of odd integers");
        }
        let ordered = |r: [f64; 2]| r[0] >= 0.0 && r[0] <= r[1] && r[1].is_finite();
        if !ordered(self.blur_sigma_range) || !ordered(self.noise_sigma_range) {
            return bad("sigma ranges must satisfy 0 <= lo <= hi");
        }
        let [qlo, qhi] = self.jpeg_quality_range;
        if qlo == 0 || qlo > qhi || qhi > 100 {
            return bad("jpeg quality range must satisfy 1 <= lo <= hi <= 100");
        }
        if self.resize_modes.is_empty() {
            return bad("at least one resize mode is required");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum Stage {
    Blur { kernel_size: usize, sigma: f64 },
    Resize { mode: ResizeMode, height: usize, width: usize },
    Noise { sigma: f64, seed: u64 },
    Jpeg { quality: u8 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationTrace {
    pub seed: u64,
    pub stages: Vec<Stage>,
}

pub fn degrade(hr: &Image, config: &DegradationConfig, seed: u64) -> Result<(Image, DegradationTrace)> {
    config.validate()?;
    let (h, w) = hr.dims();
    if h % config.scale != 0 || w % config.scale != 0 {
        return Err(RasrError::InvalidShape(format!(
            "{h}x{w} is not divisible by scale {}",
            config.scale
        )));
    }
    let trace = sample_trace(config, (h, w), seed);
    let lr = replay(hr, &trace)?;
    Ok((lr, trace))
}

fn sample_trace(config: &DegradationConfig, (h, w): (usize, usize), seed: u64) -> DegradationTrace {
    let mut rng = rng::stream(seed, &[0xde9]);
    let target = (h / config.scale, w / config.scale);
    let mut stages = Vec::new();
    if config.second_order {
        let f = rng.random_range(1.0..=config.scale as f64);
        let mid = (
            ((h as f64 / f).round() as usize).max(1),
            ((w as f64 / f).round() as usize).max(1),
        );
        push_chain(&mut stages, config, mid, &mut rng);
    }
    push_chain(&mut stages, config, target, &mut rng);
    DegradationTrace { seed, stages }
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn push_chain(
    stages: &mut Vec<Stage>,
    config: &DegradationConfig,
    (height, width): (usize, usize),
    rng: &mut impl Rng,
) {
    let kernel_size = config.blur_kernel_sizes[rng.random_range(0..config.blur_kernel_sizes.len())];
    let sigma = uniform(rng, config.blur_sigma_range);
    if sigma > 0.0 {
        stages.push(Stage::Blur { kernel_size, sigma });
    }
    let mode = config.resize_modes[rng.random_range(0..config.resize_modes.len())];
    stages.push(Stage::Resize {
        mode,
        height,
        width,
    });
    let sigma = uniform(rng, config.noise_sigma_range);
    let seed = rng.next_u64();
    if sigma > 0.0 {
        stages.push(Stage::Noise { sigma, seed });
    }
    let [qlo, qhi] = config.jpeg_quality_range;
    let quality = rng.random_range(qlo..=qhi);
    // quality 100 means the compression stage is skipped
    if quality < 100 {
        stages.push(Stage::Jpeg { quality });
    }
}

/// Applies the stages of `trace` in order.
pub fn replay(hr: &Image, trace: &DegradationTrace) -> Result<Image> {
    trace
        .stages
        .iter()
        .try_fold(hr.clone(), |img, stage| apply_stage(&img, stage))
}

pub fn apply_stage(img: &Image, stage: &Stage) -> Result<Image> {
    match *stage {
        Stage::Blur { kernel_size, sigma } => gaussian_blur(img, kernel_size, sigma),
        Stage::Resize {
            mode,
            height,
            width,
        } => img.resize(height, width, mode),
        Stage::Noise { sigma, seed } => add_gaussian_noise(img, sigma, seed),
        Stage::Jpeg { quality } => jpeg_quantize(img, quality),
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Separable isotropic Gaussian blur with reflected borders.
pub fn gaussian_blur(img: &Image, kernel_size: usize, sigma: f64) -> Result<Image> {
    if kernel_size % 2 == 0 || sigma <= 0.0 {
        return Err(RasrError::InvalidInput(format!(
            "blur needs an odd kernel and positive sigma, got {kernel_size} / {sigma}"
        )));
    }
    let r = (kernel_size / 2) as isize;
    let mut kernel: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w) = img.dims();
    let mut tmp = vec![0.0f64; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (t, k) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + t as isize - r, w);
                    acc += k * img.get(y, sx, c) as f64;
                }
                tmp[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (t, k) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + t as isize - r, h);
                    acc += k * tmp[(sy * w + x) * 3 + c];
                }
                out[(y * w + x) * 3 + c] = acc as f32;
            }
        }
    }
    Image::from_clamped(h, w, out)
}

/// Additive per-channel Gaussian noise, clipped to `[0, 1]`.
pub fn add_gaussian_noise(img: &Image, sigma: f64, seed: u64) -> Result<Image> {
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| RasrError::InvalidInput(format!("noise sigma {sigma}: {e}")))?;
    let mut rng = rng::stream(seed, &[0x0015e]);
    let data = img
        .data()
        .iter()
        .map(|&v| (v as f64 + normal.sample(&mut rng)) as f32)
        .collect();
    Image::from_clamped(img.height(), img.width(), data)
}

const LUMA_QUANT: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., //
    12., 12., 14., 19., 26., 58., 60., 55., //
    14., 13., 16., 24., 40., 57., 69., 56., //
    14., 17., 22., 29., 51., 87., 80., 62., //
    18., 22., 37., 56., 68., 109., 103., 77., //
    24., 35., 55., 64., 81., 104., 113., 92., //
    49., 64., 78., 87., 103., 121., 120., 101., //
    72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Luminance quantization table scaled by quality, IJG convention.
pub fn quant_table(quality: u8) -> [f64; 64] {
    let q = quality.clamp(1, 100) as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    LUMA_QUANT.map(|t| ((t * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0))
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = alpha * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    c
}

/// JPEG-style lossy compression of each RGB channel: 8×8 orthonormal DCT,
/// quantization with the scaled luminance table, inverse DCT. Partial edge
/// blocks are padded by edge replication.
pub fn jpeg_quantize(img: &Image, quality: u8) -> Result<Image> {
    if !(1..=100).contains(&quality) {
        return Err(RasrError::InvalidInput(format!(
            "jpeg quality {quality} outside [1, 100]"
        )));
    }
    let table = quant_table(quality);
    let basis = dct_basis();
    let (h, w) = img.dims();
    let mut out = vec![0.0f32; h * w * 3];
    let mut block = [[0.0f64; 8]; 8];
    let mut tmp = [[0.0f64; 8]; 8];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            for c in 0..3 {
                for (i, row) in block.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        let y = (by + i).min(h - 1);
                        let x = (bx + j).min(w - 1);
                        *v = img.get(y, x, c) as f64 * 255.0 - 128.0;
                    }
                }
                // forward: C · B · Cᵀ
                for u in 0..8 {
                    for j in 0..8 {
                        tmp[u][j] = (0..8).map(|i| basis[u][i] * block[i][j]).sum();
                    }
                }
                for u in 0..8 {
                    for v in 0..8 {
                        let coef: f64 = (0..8).map(|j| tmp[u][j] * basis[v][j]).sum();
                        let q = table[u * 8 + v];
                        block[u][v] = (coef / q).round() * q;
                    }
                }
                // inverse: Cᵀ · Y · C
                for i in 0..8 {
                    for v in 0..8 {
                        tmp[i][v] = (0..8).map(|u| basis[u][i] * block[u][v]).sum();
                    }
                }
                for i in 0..8 {
                    for j in 0..8 {
                        let (y, x) = (by + i, bx + j);
                        if y < h && x < w {
                            let px: f64 = (0..8).map(|v| tmp[i][v] * basis[v][j]).sum();
                            out[(y * w + x) * 3 + c] = ((px + 128.0) / 255.0) as f32;
                        }
                    }
                }
            }
        }
    }
    Image::from_clamped(h, w, out)
}
