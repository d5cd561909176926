//! Training objective: pixel MSE, feature-space perceptual distance, Gram
//! texture loss and a hinge adversarial term, combined as a weighted sum.
//!
//! All functions work on channel-major `(C, H, W)` arrays in double precision
//! and return analytic gradients with respect to the prediction.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RasrError, Result};
use crate::nn::{self, Conv2d};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_lpips: f64,
    pub lambda_gram: f64,
    pub lambda_gan: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_lpips: 2.0,
            lambda_gram: 1e-3,
            lambda_gan: 0.1,
        }
    }
}

/// Per-layer Gram weights. An empty list means weight 1 for every layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GramLossConfig {
    pub layer_weights: Vec<f64>,
}

impl GramLossConfig {
    pub fn weight(&self, layer: usize) -> f64 {
        self.layer_weights.get(layer).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(RasrError::InvalidInput("gram layer weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Loss settings as they appear in the training config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    #[serde(flatten)]
    pub weights: LossWeights,
    #[serde(default)]
    pub gram_layer_weights: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            gram_layer_weights: Vec::new(),
        }
    }
}

impl LossConfig {
    pub fn gram(&self) -> GramLossConfig {
        GramLossConfig {
            layer_weights: self.gram_layer_weights.clone(),
        }
    }
}

fn check_same(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(RasrError::InvalidShape(format!(
            "shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn can_pool(x: &Array3<f64>) -> bool {
    let (_, h, w) = x.dim();
    h >= 2 && w >= 2 && h % 2 == 0 && w % 2 == 0
}

#[derive(Debug, Clone, PartialEq)]
struct StackStage {
    pool_before: bool,
    conv: Conv2d,
}

/// Frozen stack of `[pool] → conv3×3 → SiLU` stages. Each stage output is
/// one feature layer. With no stages the input itself is the only layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    stages: Vec<StackStage>,
}

pub struct FeatureTrace {
    pub layers: Vec<Array3<f64>>,
    inputs: Vec<Array3<f64>>,
    pre_act: Vec<Array3<f64>>,
    cols: Vec<Array2<f64>>,
    pooled: Vec<bool>,
}

impl FeatureExtractor {
    /// Seeded random stand-in for a pretrained classification backbone.
    pub fn toy(seed: u64) -> Self {
        Self::random(&[8, 16, 32], seed)
    }

    pub fn random(widths: &[usize], seed: u64) -> Self {
        let mut r = rng::stream(seed, &[rng::hash_str("feature-extractor")]);
        let mut in_ch = 3;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let mut conv = Conv2d::random(in_ch, w, 3, 1, 1.5, &mut r);
                nn::fill_normal(conv.bias.as_slice_mut().unwrap(), 0.05, &mut r);
                in_ch = w;
                StackStage {
                    pool_before: i > 0,
                    conv,
                }
            })
            .collect();
        Self { stages }
    }

    /// Single layer whose features are the input.
    pub fn identity() -> Self {
        Self { stages: Vec::new() }
    }

    pub fn num_layers(&self) -> usize {
        self.stages.len().max(1)
    }

    pub fn out_channels(&self) -> Option<usize> {
        self.stages.last().map(|s| s.conv.out_ch)
    }

    pub fn forward(&self, x: &Array3<f64>) -> FeatureTrace {
        let mut trace = FeatureTrace {
            layers: Vec::with_capacity(self.stages.len()),
            inputs: Vec::new(),
            pre_act: Vec::new(),
            cols: Vec::new(),
            pooled: Vec::new(),
        };
        if self.stages.is_empty() {
            trace.layers.push(x.clone());
            return trace;
        }
        let mut h = x.clone();
        for stage in &self.stages {
            let pooled = stage.pool_before && can_pool(&h);
            let input = if pooled { nn::avg_pool2(&h) } else { h };
            let (pre, cols) = stage.conv.forward(&input);
            h = nn::silu(&pre);
            trace.layers.push(h.clone());
            trace.inputs.push(input);
            trace.pre_act.push(pre);
            trace.cols.push(cols);
            trace.pooled.push(pooled);
        }
        trace
    }

    /// Gradient with respect to the input given gradients for each layer
    /// (`None` for layers that do not contribute).
    pub fn backward(&self, trace: &FeatureTrace, d_layers: &[Option<Array3<f64>>]) -> Array3<f64> {
        if self.stages.is_empty() {
            return d_layers[0].clone().expect("identity extractor needs its layer gradient");
        }
        let mut carry: Option<Array3<f64>> = None;
        for (i, stage) in self.stages.iter().enumerate().rev() {
            let mut d = match (carry.take(), &d_layers[i]) {
                (Some(c), Some(l)) => c + l,
                (Some(c), None) => c,
                (None, Some(l)) => l.clone(),
                (None, None) => Array3::zeros(trace.layers[i].dim()),
            };
            d = nn::silu_backward(&d, &trace.pre_act[i]);
            let dx = nn::conv_backward_input(
                &d,
                stage.conv.weight.view(),
                trace.inputs[i].dim(),
                stage.conv.kernel,
                stage.conv.stride,
            );
            carry = Some(if trace.pooled[i] {
                nn::avg_pool2_backward(&dx)
            } else {
                dx
            });
        }
        carry.expect("at least one stage")
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64])) {
        for (i, s) in self.stages.iter().enumerate() {
            f(format!("{prefix}.{i}.weight"), s.conv.weight.as_slice().unwrap());
            f(format!("{prefix}.{i}.bias"), s.conv.bias.as_slice().unwrap());
        }
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            f(format!("{prefix}.{i}.weight"), s.conv.weight.as_slice_mut().unwrap());
            f(format!("{prefix}.{i}.bias"), s.conv.bias.as_slice_mut().unwrap());
        }
    }
}

pub fn mse_loss(pred: &Array3<f64>, gt: &Array3<f64>) -> Result<(f64, Array3<f64>)> {
    check_same(pred, gt)?;
    let n = pred.len() as f64;
    let diff = pred - gt;
    let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((value, diff * (2.0 / n)))
}

/// Mean squared feature distance averaged over layers.
pub fn perceptual_loss(
    pred: &Array3<f64>,
    gt: &Array3<f64>,
    extractor: &FeatureExtractor,
) -> Result<(f64, Array3<f64>)> {
    check_same(pred, gt)?;
    let tp = extractor.forward(pred);
    let tg = extractor.forward(gt);
    let (value, d_layers) = perceptual_from_features(&tp.layers, &tg.layers);
    Ok((value, extractor.backward(&tp, &d_layers)))
}

fn perceptual_from_features(
    fp: &[Array3<f64>],
    fg: &[Array3<f64>],
) -> (f64, Vec<Option<Array3<f64>>>) {
    let layers = fp.len() as f64;
    let mut value = 0.0;
    let grads = fp
        .iter()
        .zip(fg)
        .map(|(p, g)| {
            let n = p.len() as f64;
            let diff = p - g;
            value += diff.iter().map(|d| d * d).sum::<f64>() / n / layers;
            Some(diff * (2.0 / n / layers))
        })
        .collect();
    (value, grads)
}

/// `F·Fᵀ` for the `C × (H·W)` flattening of `feature`.
pub fn gram_matrix(feature: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = feature.dim();
    let f = feature
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h * w))
        .unwrap();
    f.dot(&f.t())
}

/// `Σ_l λ_l / (C_l H_l W_l) · ‖G(p_l) − G(g_l)‖²_F` and its gradient with
/// respect to each predicted feature map.
pub fn gram_loss_features(
    pred: &[Array3<f64>],
    gt: &[Array3<f64>],
    config: &GramLossConfig,
) -> Result<(f64, Vec<Array3<f64>>)> {
    if pred.len() != gt.len() {
        return Err(RasrError::InvalidShape("layer count mismatch".into()));
    }
    config.validate()?;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(pred.len());
    for (l, (p, g)) in pred.iter().zip(gt).enumerate() {
        check_same(p, g)?;
        let (c, h, w) = p.dim();
        let norm = config.weight(l) / (c * h * w) as f64;
        let diff = gram_matrix(p) - gram_matrix(g);
        value += norm * diff.iter().map(|d| d * d).sum::<f64>();
        // dL/dG = 2·norm·diff (symmetric), dL/dF = (dG + dGᵀ)·F = 4·norm·diff·F
        let f = p
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, h * w))
            .unwrap();
        let df = (diff * (4.0 * norm)).dot(&f);
        grads.push(df.into_shape_with_order((c, h, w)).unwrap());
    }
    Ok((value, grads))
}

pub fn gram_loss(
    pred: &Array3<f64>,
    gt: &Array3<f64>,
    extractor: &FeatureExtractor,
    config: &GramLossConfig,
) -> Result<(f64, Array3<f64>)> {
    check_same(pred, gt)?;
    let tp = extractor.forward(pred);
    let tg = extractor.forward(gt);
    let (value, grads) = gram_loss_features(&tp.layers, &tg.layers, config)?;
    let d_layers: Vec<_> = grads.into_iter().map(Some).collect();
    Ok((value, extractor.backward(&tp, &d_layers)))
}

/// Frozen feature backbone followed by a trainable linear head on the
/// globally pooled last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub backbone: FeatureExtractor,
    pub head_weight: Array1<f64>,
    pub head_bias: f64,
}

/// Cached discriminator evaluation of one image.
pub struct DiscFeatures {
    trace: FeatureTrace,
    pooled: Array1<f64>,
}

impl Discriminator {
    pub fn toy(seed: u64) -> Self {
        let backbone = FeatureExtractor::random(&[8, 16, 32], rng::derive_seed(seed, &[0xd15c]));
        let width = backbone.out_channels().unwrap();
        let mut r = rng::stream(seed, &[0xd15c, 1]);
        let mut head_weight = Array1::zeros(width);
        nn::fill_normal(
            head_weight.as_slice_mut().unwrap(),
            1.0 / (width as f64).sqrt(),
            &mut r,
        );
        Self {
            backbone,
            head_weight,
            head_bias: 0.0,
        }
    }

    /// Discriminator with a fixed output, for tests of the hinge formulas.
    pub fn constant(value: f64) -> Self {
        Self {
            backbone: FeatureExtractor::random(&[1], 0),
            head_weight: Array1::zeros(1),
            head_bias: value,
        }
    }

    pub fn features(&self, x: &Array3<f64>) -> DiscFeatures {
        let trace = self.backbone.forward(x);
        let pooled = trace
            .layers
            .last()
            .unwrap()
            .mean_axis(Axis(2))
            .unwrap()
            .mean_axis(Axis(1))
            .unwrap();
        DiscFeatures { trace, pooled }
    }

    pub fn score(&self, f: &DiscFeatures) -> f64 {
        self.head_weight.dot(&f.pooled) + self.head_bias
    }

    pub fn forward(&self, x: &Array3<f64>) -> f64 {
        self.score(&self.features(x))
    }

    /// Gradient of `dscore · D(x)` with respect to `x`.
    pub fn input_grad(&self, f: &DiscFeatures, dscore: f64) -> Array3<f64> {
        let last = f.trace.layers.last().unwrap();
        let (c, h, w) = last.dim();
        let inv = 1.0 / (h * w) as f64;
        let d_last = Array3::from_shape_fn((c, h, w), |(ci, _, _)| dscore * self.head_weight[ci] * inv);
        let n = f.trace.layers.len();
        let mut d_layers: Vec<Option<Array3<f64>>> = vec![None; n];
        d_layers[n - 1] = Some(d_last);
        self.backbone.backward(&f.trace, &d_layers)
    }

    pub(crate) fn visit(&self, f: &mut dyn FnMut(String, &[f64], bool)) {
        self.backbone.visit("disc.backbone", &mut |n, v| f(n, v, false));
        f("disc.head.weight".into(), self.head_weight.as_slice().unwrap(), true);
        f("disc.head.bias".into(), std::slice::from_ref(&self.head_bias), true);
    }

    pub(crate) fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut [f64], bool)) {
        self.backbone.visit_mut("disc.backbone", &mut |n, v| f(n, v, false));
        f("disc.head.weight".into(), self.head_weight.as_slice_mut().unwrap(), true);
        f("disc.head.bias".into(), std::slice::from_mut(&mut self.head_bias), true);
    }
}

/// Hinge discriminator loss and its gradient with respect to the head,
/// over a batch of real and fake scores.
pub struct HeadGrad {
    pub d_loss: f64,
    pub weight: Array1<f64>,
    pub bias: f64,
}

pub fn discriminator_step_grad(
    disc: &Discriminator,
    real: &[DiscFeatures],
    fake: &[DiscFeatures],
) -> HeadGrad {
    let mut grad = HeadGrad {
        d_loss: 0.0,
        weight: Array1::zeros(disc.head_weight.len()),
        bias: 0.0,
    };
    for (set, sign) in [(real, -1.0), (fake, 1.0)] {
        let n = set.len() as f64;
        for f in set {
            let margin = 1.0 + sign * disc.score(f);
            if margin > 0.0 {
                grad.d_loss += margin / n;
                grad.weight.scaled_add(sign / n, &f.pooled);
                grad.bias += sign / n;
            }
        }
    }
    grad
}

/// `(d_loss, g_loss)` for one real/fake pair: `relu(1 − D(real)) +
/// relu(1 + D(fake))` and `−D(fake)`.
pub fn gan_losses(disc: &Discriminator, real: &Array3<f64>, fake: &Array3<f64>) -> Result<(f64, f64)> {
    check_same(real, fake)?;
    let dr = disc.forward(real);
    let df = disc.forward(fake);
    Ok(((1.0 - dr).max(0.0) + (1.0 + df).max(0.0), -df))
}

/// Generator adversarial term `−D(fake)` and its gradient.
pub fn generator_gan_loss(disc: &Discriminator, fake: &Array3<f64>) -> (f64, Array3<f64>) {
    let f = disc.features(fake);
    (-disc.score(&f), disc.input_grad(&f, -1.0))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub perceptual: f64,
    pub gram: f64,
    pub gan: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 4] {
        [self.mse, self.perceptual, self.gram, self.gan]
    }

    pub fn weighted_total(terms: [f64; 4], w: &LossWeights) -> f64 {
        terms[0] + w.lambda_lpips * terms[1] + w.lambda_gram * terms[2] + w.lambda_gan * terms[3]
    }

    pub fn accumulate(&mut self, other: &LossBreakdown, scale: f64) {
        self.mse += scale * other.mse;
        self.perceptual += scale * other.perceptual;
        self.gram += scale * other.gram;
        self.gan += scale * other.gan;
        self.total += scale * other.total;
    }
}

/// Weighted composite loss and its gradient with respect to `pred`.
/// Terms whose weight is zero are still reported but not differentiated.
pub fn total_loss(
    pred: &Array3<f64>,
    gt: &Array3<f64>,
    extractor: &FeatureExtractor,
    disc: &Discriminator,
    weights: &LossWeights,
    gram_cfg: &GramLossConfig,
) -> Result<(LossBreakdown, Array3<f64>)> {
    let (mse, mut grad) = mse_loss(pred, gt)?;
    let tp = extractor.forward(pred);
    let tg = extractor.forward(gt);
    let (perceptual, d_perc) = perceptual_from_features(&tp.layers, &tg.layers);
    let (gram, d_gram) = gram_loss_features(&tp.layers, &tg.layers, gram_cfg)?;
    let d_layers: Vec<Option<Array3<f64>>> = d_perc
        .into_iter()
        .zip(d_gram)
        .map(|(p, g)| {
            Some(p.unwrap() * weights.lambda_lpips + g * weights.lambda_gram)
        })
        .collect();
    if weights.lambda_lpips != 0.0 || weights.lambda_gram != 0.0 {
        grad += &extractor.backward(&tp, &d_layers);
    }
    let fake = disc.features(pred);
    let gan = -disc.score(&fake);
    if weights.lambda_gan != 0.0 {
        grad += &disc.input_grad(&fake, -weights.lambda_gan);
    }
    let terms = [mse, perceptual, gram, gan];
    let breakdown = LossBreakdown {
        mse,
        perceptual,
        gram,
        gan,
        total: LossBreakdown::weighted_total(terms, weights),
    };
    Ok((breakdown, grad))
}

/// Uniform random array in `[lo, hi)`, handy for tests and probes.
pub fn random_array(dim: (usize, usize, usize), lo: f64, hi: f64, seed: u64) -> Array3<f64> {
    let mut r = rng::stream(seed, &[0xa77]);
    Array3::from_shape_fn(dim, |_| r.random_range(lo..hi))
}
