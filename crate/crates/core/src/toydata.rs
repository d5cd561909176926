//! Procedural texture categories for smoke tests and toy training runs.
//!
//! Each category pairs a two-color palette with a periodic pattern. Images
//! within a category differ in phase, frequency, orientation and color
//! jitter, so a reference from the same category shares the texture
//! statistics that a 4× downsampled input loses.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;

use crate::dataset::MemoryStore;
use crate::error::Result;
use crate::image::Image;
use crate::rng;

pub const CATEGORIES: [(&str, [f32; 3], [f32; 3]); 8] = [
    ("horizontal_stripes", [0.85, 0.75, 0.30], [0.25, 0.15, 0.10]),
    ("vertical_stripes", [0.20, 0.45, 0.80], [0.90, 0.90, 0.95]),
    ("diagonal_weave", [0.70, 0.20, 0.25], [0.95, 0.80, 0.60]),
    ("checker_tiles", [0.10, 0.30, 0.15], [0.60, 0.85, 0.45]),
    ("ring_ripples", [0.45, 0.20, 0.60], [0.85, 0.70, 0.90]),
    ("dot_grid", [0.95, 0.60, 0.15], [0.30, 0.20, 0.45]),
    ("plaid_fabric", [0.30, 0.60, 0.60], [0.80, 0.30, 0.15]),
    ("mottled_stone", [0.55, 0.50, 0.45], [0.25, 0.22, 0.20]),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySpec {
    pub categories: usize,
    pub per_category: usize,
    pub size: usize,
    pub seed: u64,
}

/// One texture of `category` (taken modulo the category count).
pub fn texture(category: usize, size: usize, seed: u64) -> Image {
    let (_, c1, c2) = CATEGORIES[category % CATEGORIES.len()];
    let mut r = rng::stream(seed, &[rng::hash_str("texture"), category as u64]);
    let period = match category % CATEGORIES.len() {
        0 => 6.0,
        1 => 8.0,
        2 => 5.0,
        3 => 12.0,
        4 => 7.0,
        5 => 9.0,
        6 => 10.0,
        _ => 16.0,
    } * r.random_range(0.85..1.15);
    let freq = 2.0 * PI / period;
    let angle: f64 = r.random_range(-0.15..0.15);
    let (px, py): (f64, f64) = (r.random_range(0.0..2.0 * PI), r.random_range(0.0..2.0 * PI));
    let (cx, cy) = (
        r.random_range(0.0..size as f64),
        r.random_range(0.0..size as f64),
    );
    let blobs: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                r.random_range(0.3..1.2) * freq,
                r.random_range(0.0..PI),
                r.random_range(0.0..2.0 * PI),
                r.random_range(0.5..1.0),
            )
        })
        .collect();
    let jitter: [f32; 3] = std::array::from_fn(|_| r.random_range(-0.05..0.05));
    let (sa, ca) = angle.sin_cos();
    let mut grain = rng::stream(seed, &[rng::hash_str("grain"), category as u64]);
    Image::from_fn(size, size, |y, x, ch| {
        let (yf, xf) = (y as f64, x as f64);
        let u = ca * xf - sa * yf;
        let v = sa * xf + ca * yf;
        let p = match category % CATEGORIES.len() {
            0 => 0.5 + 0.5 * (freq * v + py).sin(),
            1 => 0.5 + 0.5 * (freq * u + px).sin(),
            2 => 0.5 + 0.25 * ((freq * (u + v) + px).sin() + (freq * (u - v) + py).sin()),
            3 => {
                let a = (freq * u + px).sin() * (freq * v + py).sin();
                if a > 0.0 { 0.9 } else { 0.1 }
            }
            4 => 0.5 + 0.5 * (freq * ((xf - cx).powi(2) + (yf - cy).powi(2)).sqrt() + px).sin(),
            5 => {
                let a = (freq * u + px).cos() * (freq * v + py).cos();
                if a > 0.55 { 1.0 } else { 0.0 }
            }
            6 => 0.5 + 0.25 * ((freq * u + px).sin().signum() * 0.6 + (2.0 * freq * v + py).sin()),
            _ => {
                let s: f64 = blobs
                    .iter()
                    .map(|&(f, th, ph, a)| a * (f * (th.cos() * xf + th.sin() * yf) + ph).sin())
                    .sum();
                0.5 + 0.15 * s
            }
        }
        .clamp(0.0, 1.0) as f32;
        let g = if ch == 0 { grain.random_range(-0.02..0.02) } else { 0.0 };
        c1[ch] + (c2[ch] - c1[ch]) * p + jitter[ch] + g
    })
    .expect("texture size is positive")
}

pub fn category_name(category: usize) -> &'static str {
    CATEGORIES[category % CATEGORIES.len()].0
}

/// Relative path of image `i` of `category`.
pub fn toy_path(category: usize, i: usize) -> String {
    format!("{}/{i:04}.png", category_name(category))
}

fn image_seed(spec: &ToySpec, category: usize, i: usize) -> u64 {
    rng::derive_seed(spec.seed, &[category as u64, i as u64])
}

/// In-memory toy dataset: category listing plus the images.
pub fn toy_store(spec: &ToySpec) -> (BTreeMap<String, Vec<String>>, MemoryStore) {
    let mut cats = BTreeMap::new();
    let mut store = MemoryStore::default();
    for c in 0..spec.categories {
        let paths: Vec<String> = (0..spec.per_category).map(|i| toy_path(c, i)).collect();
        for (i, p) in paths.iter().enumerate() {
            store
                .images
                .insert(p.clone(), texture(c, spec.size, image_seed(spec, c, i)));
        }
        cats.insert(category_name(c).to_string(), paths);
    }
    (cats, store)
}

/// Writes the toy dataset as `root/<category>/<nnnn>.png`.
pub fn write_toy_dataset(root: impl AsRef<Path>, spec: &ToySpec) -> Result<()> {
    let (_, store) = toy_store(spec);
    for (path, img) in &store.images {
        img.save(root.as_ref().join(path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textures_are_deterministic_and_distinct() {
        assert_eq!(texture(2, 32, 5), texture(2, 32, 5));
        assert_ne!(texture(2, 32, 5), texture(2, 32, 6));
        assert_ne!(texture(2, 32, 5), texture(3, 32, 5));
    }

    #[test]
    fn category_means_differ() {
        let means: Vec<[f64; 3]> = (0..8)
            .map(|c| {
                let img = texture(c, 48, 1);
                let mut m = [0.0; 3];
                for (i, v) in img.data().iter().enumerate() {
                    m[i % 3] += *v as f64 / (48 * 48) as f64;
                }
                m
            })
            .collect();
        for a in 0..8 {
            for b in a + 1..8 {
                let d: f64 = (0..3).map(|k| (means[a][k] - means[b][k]).abs()).sum();
                assert!(d > 0.1, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn store_layout() {
        let spec = ToySpec {
            categories: 2,
            per_category: 3,
            size: 16,
            seed: 0,
        };
        let (cats, store) = toy_store(&spec);
        assert_eq!(cats.len(), 2);
        assert_eq!(store.images.len(), 6);
        assert!(cats["horizontal_stripes"].contains(&"horizontal_stripes/0002.png".to_string()));
    }
}
