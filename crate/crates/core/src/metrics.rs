//! Full-reference image quality metrics and the evaluation harness.
//!
//! PSNR is computed on RGB with peak 1.0 and capped at 100 dB. SSIM is the
//! single-scale Gaussian-window variant on Rec.601 luma, averaged over
//! valid window positions.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{RasrError, Result};
use crate::image::Image;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Registry slots that need pretrained networks and ship without a plugin.
pub const PLUGIN_SLOTS: [&str; 6] = ["lpips", "dists", "fid", "niqe", "musiq", "clipiqa"];

fn check_pair(pred: &Image, gt: &Image) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(RasrError::InvalidShape(format!(
            "metric inputs differ in size: {:?} vs {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

pub fn mse(pred: &Image, gt: &Image) -> Result<f64> {
    check_pair(pred, gt)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(sum / pred.data().len() as f64)
}

/// PSNR in decibels for a given mean squared error.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, gt)?))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h`×`w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    check_pair(pred, gt)?;
    let (h, w) = pred.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(RasrError::InvalidShape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let a = pred.luma();
    let b = gt.luma();
    let k = gaussian_window();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(&a, h, w, &k);
    let mu_b = filter_valid(&b, h, w, &k);
    let e_aa = filter_valid(&prod(&a, &a), h, w, &k);
    let e_bb = filter_valid(&prod(&b, &b), h, w, &k);
    let e_ab = filter_valid(&prod(&a, &b), h, w, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

pub type MetricFn = Arc<dyn Fn(&Image, &Image) -> Result<f64> + Send + Sync>;

/// Metrics by name. Names in [`PLUGIN_SLOTS`] are known but unavailable
/// until a plugin is registered for them.
#[derive(Clone)]
pub struct MetricRegistry {
    metrics: BTreeMap<String, MetricFn>,
}

impl Default for MetricRegistry {
    fn default() -> Self {
        let mut r = Self {
            metrics: BTreeMap::new(),
        };
        r.register("psnr", Arc::new(psnr));
        r.register("ssim", Arc::new(ssim));
        r
    }
}

impl MetricRegistry {
    pub fn register(&mut self, name: &str, f: MetricFn) {
        self.metrics.insert(name.to_lowercase(), f);
    }

    pub fn get(&self, name: &str) -> Option<&MetricFn> {
        self.metrics.get(&name.to_lowercase())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.metrics.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub per_image: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(default)]
    pub method: String,
    #[serde(default)]
    pub dataset: String,
    pub metrics: BTreeMap<String, MetricSummary>,
    #[serde(default)]
    pub unavailable: Vec<String>,
}

impl MetricReport {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).map(|m| m.mean)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        crate::io::write_atomic(path.as_ref(), text.as_bytes())
    }
}

/// Scores named `(pred, gt)` pairs with every requested metric.
pub fn evaluate_pairs(
    pairs: &[(String, Image, Image)],
    metric_names: &[String],
    registry: &MetricRegistry,
) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for name in metric_names {
        let key = name.trim().to_lowercase();
        if key.is_empty() || report.metrics.contains_key(&key) || report.unavailable.contains(&key) {
            continue;
        }
        let Some(f) = registry.get(&key) else {
            report.unavailable.push(key);
            continue;
        };
        let mut per_image = BTreeMap::new();
        for (file, pred, gt) in pairs {
            per_image.insert(file.clone(), f(pred, gt)?);
        }
        let mean = if per_image.is_empty() {
            0.0
        } else {
            per_image.values().sum::<f64>() / per_image.len() as f64
        };
        report.metrics.insert(key, MetricSummary { mean, per_image });
    }
    Ok(report)
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| RasrError::io(dir, e))? {
        let entry = entry.map_err(|e| RasrError::io(dir, e))?;
        let p = entry.path();
        if p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Evaluates every PNG in `pred_dir` against the same-named file in
/// `gt_dir`.
pub fn evaluate(
    pred_dir: impl AsRef<Path>,
    gt_dir: impl AsRef<Path>,
    metric_names: &[String],
    registry: &MetricRegistry,
) -> Result<MetricReport> {
    let (pred_dir, gt_dir) = (pred_dir.as_ref(), gt_dir.as_ref());
    let pred = png_names(pred_dir)?;
    let gt = png_names(gt_dir)?;
    if pred != gt {
        let only_pred: Vec<&String> = pred.iter().filter(|n| !gt.contains(n)).collect();
        let only_gt: Vec<&String> = gt.iter().filter(|n| !pred.contains(n)).collect();
        return Err(RasrError::PairingError(format!(
            "file sets differ; only in predictions: {only_pred:?}; only in ground truth: {only_gt:?}"
        )));
    }
    let pairs = pred
        .into_iter()
        .map(|name| {
            let p = Image::load(pred_dir.join(&name))?;
            let g = Image::load(gt_dir.join(&name))?;
            Ok((name, p, g))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_pairs(&pairs, metric_names, registry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::add_gaussian_noise;
    use crate::toydata::texture;
    use proptest::prelude::*;

    #[test]
    fn psnr_unit_values() {
        let a = texture(1, 16, 0);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let zero = Image::filled(4, 4, [0.0; 3]).unwrap();
        let half = Image::filled(4, 4, [0.5; 3]).unwrap();
        let v = psnr(&zero, &half).unwrap();
        assert!((v - 6.0206).abs() < 1e-3, "{v}");
        assert!((v - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert!(psnr(&zero, &Image::filled(4, 5, [0.0; 3]).unwrap()).is_err());
    }

    #[test]
    fn psnr_drops_with_noise() {
        let a = texture(4, 32, 1);
        let mut last = f64::INFINITY;
        for sigma in [0.01, 0.03, 0.1, 0.3] {
            let v = psnr(&add_gaussian_noise(&a, sigma, 3).unwrap(), &a).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = texture(2, 32, 2);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
        let inv = Image::from_fn(32, 32, |y, x, c| 1.0 - a.get(y, x, c)).unwrap();
        assert!(ssim(&inv, &a).unwrap() < 0.5);
        let small = Image::filled(10, 20, [0.5; 3]).unwrap();
        assert!(matches!(ssim(&small, &small), Err(RasrError::InvalidShape(_))));
    }

    /// Direct per-window evaluation of the SSIM formula.
    fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let (h, w) = a.dims();
        let (la, lb) = (a.luma(), b.luma());
        let k = gaussian_window();
        let mut total = 0.0;
        let mut n = 0;
        for y in 0..=h - SSIM_WINDOW {
            for x in 0..=w - SSIM_WINDOW {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let wt = k[i] * k[j];
                        let p = la[(y + i) * w + x + j];
                        let q = lb[(y + i) * w + x + j];
                        ma += wt * p;
                        mb += wt * q;
                        aa += wt * p * p;
                        bb += wt * q * q;
                        ab += wt * p * q;
                    }
                }
                let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                let (c1, c2) = (1e-4, 9e-4);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1;
            }
        }
        total / n as f64
    }

    #[test]
    fn ssim_matches_direct_window_evaluation() {
        let a = texture(3, 24, 5);
        let b = add_gaussian_noise(&a, 0.1, 1).unwrap();
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn ssim_is_symmetric(s1 in 0u64..1000, s2 in 0u64..1000) {
            let a = texture(s1 as usize, 16, s1);
            let b = texture(s2 as usize, 16, s2);
            let d = ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap();
            prop_assert!(d.abs() <= 1e-12);
            let v = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn report_means_and_unavailable_slots() {
        let a = texture(0, 16, 0);
        let b = texture(0, 16, 1);
        let pairs = vec![
            ("x.png".to_string(), a.clone(), b.clone()),
            ("y.png".to_string(), b.clone(), b.clone()),
        ];
        let names: Vec<String> = ["psnr", "SSIM", "lpips", "fid"].iter().map(|s| s.to_string()).collect();
        let r = evaluate_pairs(&pairs, &names, &MetricRegistry::default()).unwrap();
        let p = &r.metrics["psnr"];
        assert_eq!(p.mean, (p.per_image["x.png"] + p.per_image["y.png"]) / 2.0);
        assert_eq!(p.per_image["y.png"], 100.0);
        assert_eq!(r.unavailable, vec!["lpips", "fid"]);
        let single = evaluate_pairs(&pairs[..1], &names, &MetricRegistry::default()).unwrap();
        assert_eq!(single.metrics["ssim"].mean, single.metrics["ssim"].per_image["x.png"]);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["metrics"]["psnr"]["mean"].is_number());
        assert!(json["metrics"]["psnr"]["per_image"]["x.png"].is_number());
    }

    #[test]
    fn plugins_fill_slots() {
        let mut reg = MetricRegistry::default();
        reg.register("lpips", Arc::new(|_: &Image, _: &Image| Ok(0.25)));
        let a = texture(0, 16, 0);
        let r = evaluate_pairs(&[("a.png".into(), a.clone(), a)], &["lpips".into()], &reg).unwrap();
        assert_eq!(r.metrics["lpips"].mean, 0.25);
        assert!(r.unavailable.is_empty());
    }

    #[test]
    fn directory_evaluation() {
        let pred = tempfile::tempdir().unwrap();
        let gt = tempfile::tempdir().unwrap();
        for i in 0..3 {
            let img = texture(i, 16, i as u64);
            img.save(pred.path().join(format!("{i}.png"))).unwrap();
            img.save(gt.path().join(format!("{i}.png"))).unwrap();
        }
        let names = vec!["psnr".to_string(), "ssim".to_string()];
        let r = evaluate(pred.path(), gt.path(), &names, &MetricRegistry::default()).unwrap();
        assert_eq!(r.metrics["psnr"].mean, 100.0);
        assert!((r.metrics["ssim"].mean - 1.0).abs() < 1e-9);
        texture(0, 16, 0).save(gt.path().join("extra.png")).unwrap();
        assert!(matches!(
            evaluate(pred.path(), gt.path(), &names, &MetricRegistry::default()),
            Err(RasrError::PairingError(_))
        ));
    }
}
