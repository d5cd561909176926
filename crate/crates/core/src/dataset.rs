//! Dataset manifests: per-category train/test/reference partitions,
//! reference preselection by embedding similarity, and seeded sampling of
//! training pairs.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degradation::{degrade, DegradationConfig, DegradationTrace};
use crate::embedding::{EncoderRegistry, EncoderSpec};
use crate::error::{RasrError, Result};
use crate::image::Image;
use crate::retrieval::{build_index, ReferenceRecord};
use crate::rng;

pub const DEFAULT_PATCH_TRAIN: usize = 512;
pub const DEFAULT_PATCH_SOURCE: usize = 768;
pub const DEFAULT_PRESELECT: usize = 5;
pub const MIN_CATEGORY_IMAGES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryPartition {
    pub name: String,
    pub train_paths: Vec<String>,
    pub test_paths: Vec<String>,
    pub reference_paths: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub patch_size_train: usize,
    pub patch_size_source: usize,
    pub categories: Vec<CategoryPartition>,
    /// Train image path → preselected reference paths, best first.
    #[serde(default)]
    pub preselected_refs: BTreeMap<String, Vec<String>>,
    /// Per-image prompt overrides; images without one use their category
    /// name.
    #[serde(default)]
    pub prompts: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<String>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| RasrError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        crate::io::write_atomic(path, text.as_bytes())
    }

    /// Train images across all categories, in manifest order.
    pub fn train_items(&self) -> Vec<(&str, &str)> {
        self.categories
            .iter()
            .flat_map(|c| c.train_paths.iter().map(move |p| (c.name.as_str(), p.as_str())))
            .collect()
    }

    pub fn test_items(&self) -> Vec<(&str, &str)> {
        self.categories
            .iter()
            .flat_map(|c| c.test_paths.iter().map(move |p| (c.name.as_str(), p.as_str())))
            .collect()
    }

    pub fn category_of(&self, path: &str) -> Option<&CategoryPartition> {
        self.categories.iter().find(|c| {
            c.train_paths.iter().chain(&c.test_paths).chain(&c.reference_paths).any(|p| p == path)
        })
    }

    pub fn prompt_for(&self, path: &str) -> String {
        if let Some(p) = self.prompts.get(path) {
            return p.clone();
        }
        self.category_of(path)
            .map(|c| category_prompt(&c.name))
            .unwrap_or_default()
    }
}

/// Prompt derived from a category directory name.
pub fn category_prompt(name: &str) -> String {
    name.replace(['_', '-'], " ")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRule {
    pub train: usize,
    pub test: usize,
}

impl Default for SplitRule {
    fn default() -> Self {
        Self { train: 40, test: 5 }
    }
}

impl SplitRule {
    /// `(train, test, reference)` sizes for a category of `n` images.
    pub fn sizes(&self, n: usize) -> Option<(usize, usize, usize)> {
        if n < MIN_CATEGORY_IMAGES {
            return None;
        }
        if n > self.train + self.test {
            return Some((self.train, self.test, n - self.train - self.test));
        }
        let test = ((n as f64 * 0.1).round() as usize).clamp(1, self.test.max(1));
        let train = ((n as f64 * 0.8).floor() as usize)
            .min(self.train)
            .min(n - test - 1)
            .max(1);
        Some((train, test, n - train - test))
    }
}

/// Seeded per-category shuffle and split.
pub fn partition(
    category_images: &BTreeMap<String, Vec<String>>,
    seed: u64,
    rule: &SplitRule,
) -> Result<DatasetManifest> {
    let mut categories = Vec::with_capacity(category_images.len());
    for (name, paths) in category_images {
        let (train, test, _) = rule.sizes(paths.len()).ok_or_else(|| RasrError::TooFewImages {
            category: name.clone(),
            count: paths.len(),
        })?;
        let mut shuffled = paths.clone();
        shuffled.sort();
        shuffled.dedup();
        if shuffled.len() != paths.len() {
            return Err(RasrError::InvalidInput(format!(
                "category `{name}` lists duplicate paths"
            )));
        }
        shuffled.shuffle(&mut rng::stream(seed, &[rng::hash_str("partition"), rng::hash_str(name)]));
        let reference_paths = shuffled.split_off(train + test);
        let test_paths = shuffled.split_off(train);
        categories.push(CategoryPartition {
            name: name.clone(),
            train_paths: shuffled,
            test_paths,
            reference_paths,
        });
    }
    Ok(DatasetManifest {
        patch_size_train: DEFAULT_PATCH_TRAIN,
        patch_size_source: DEFAULT_PATCH_SOURCE,
        categories,
        preselected_refs: BTreeMap::new(),
        prompts: BTreeMap::new(),
        root: None,
    })
}

/// Source of images addressed by manifest path.
pub trait ImageStore: Send + Sync {
    fn load(&self, path: &str) -> Result<Image>;
}

/// Images on disk, manifest paths relative to `root`.
#[derive(Debug, Clone)]
pub struct FsStore {
    pub root: PathBuf,
}

impl FsStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl ImageStore for FsStore {
    fn load(&self, path: &str) -> Result<Image> {
        Image::load(self.root.join(path))
    }
}

#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    pub images: BTreeMap<String, Image>,
}

impl ImageStore for MemoryStore {
    fn load(&self, path: &str) -> Result<Image> {
        self.images
            .get(path)
            .cloned()
            .ok_or_else(|| RasrError::InvalidInput(format!("no image `{path}` in store")))
    }
}

/// Memoizing wrapper around another store.
pub struct CachedStore<S> {
    inner: S,
    cache: Mutex<HashMap<String, Arc<Image>>>,
}

impl<S: ImageStore> CachedStore<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn get(&self, path: &str) -> Result<Arc<Image>> {
        if let Some(img) = self.cache.lock().unwrap().get(path) {
            return Ok(img.clone());
        }
        let img = Arc::new(self.inner.load(path)?);
        self.cache
            .lock()
            .unwrap()
            .insert(path.to_string(), img.clone());
        Ok(img)
    }
}

impl<S: ImageStore> ImageStore for CachedStore<S> {
    fn load(&self, path: &str) -> Result<Image> {
        Ok((*self.get(path)?).clone())
    }
}

/// Center crop of `path` to the manifest's source size.
pub fn load_source(store: &dyn ImageStore, manifest: &DatasetManifest, path: &str) -> Result<Image> {
    Ok(store.load(path)?.center_crop(manifest.patch_size_source))
}

/// Lists `root/<category>/*.png`, paths relative to `root`.
pub fn scan_categories(root: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<String>>> {
    let root = root.as_ref();
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(root).map_err(|e| RasrError::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| RasrError::io(root, e))?;
        let dir = entry.path();
        if !dir.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        let mut paths = Vec::new();
        for f in fs::read_dir(&dir).map_err(|e| RasrError::io(&dir, e))? {
            let f = f.map_err(|e| RasrError::io(&dir, e))?;
            let p = f.path();
            if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                paths.push(format!("{name}/{}", f.file_name().to_string_lossy()));
            }
        }
        paths.sort();
        out.insert(name, paths);
    }
    Ok(out)
}

/// Scans `root`, partitions it and reads per-image prompts from `.txt`
/// files next to the images.
pub fn build_manifest(root: impl AsRef<Path>, seed: u64, rule: &SplitRule) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let cats = scan_categories(root)?;
    let mut manifest = partition(&cats, seed, rule)?;
    for path in cats.values().flatten() {
        let txt = root.join(path).with_extension("txt");
        if txt.is_file() {
            let text = fs::read_to_string(&txt).map_err(|e| RasrError::io(&txt, e))?;
            manifest.prompts.insert(path.clone(), text.trim().to_string());
        }
    }
    manifest.root = Some(root.to_string_lossy().into_owned());
    Ok(manifest)
}

/// Fills `preselected_refs` with the `n` references of the same category
/// most similar to each train image.
pub fn preselect_references(
    mut manifest: DatasetManifest,
    store: &dyn ImageStore,
    encoder_spec: &EncoderSpec,
    n: usize,
) -> Result<DatasetManifest> {
    let encoder = EncoderRegistry::default().build(encoder_spec)?;
    let mut selected = BTreeMap::new();
    for cat in &manifest.categories {
        if cat.train_paths.is_empty() {
            continue;
        }
        if cat.reference_paths.is_empty() {
            return Err(RasrError::EmptyReferencePool(cat.name.clone()));
        }
        let mut records = Vec::with_capacity(cat.reference_paths.len());
        for (id, path) in cat.reference_paths.iter().enumerate() {
            let img = load_source(store, &manifest, path)?;
            records.push(ReferenceRecord {
                id: id as u64,
                category: cat.name.clone(),
                path: path.clone(),
                embedding: encoder.encode(&img)?,
            });
        }
        let index = build_index(records, encoder_spec.clone())?;
        let k = n.min(index.len());
        for path in &cat.train_paths {
            let q = encoder.encode(&load_source(store, &manifest, path)?)?;
            let hits = if k == 0 { Vec::new() } else { index.query(&q, k)? };
            selected.insert(path.clone(), hits.into_iter().map(|h| h.path).collect());
        }
    }
    manifest.preselected_refs = selected;
    Ok(manifest)
}

/// Uniform choice among `n` preselected references for sample `index`.
pub fn pick_reference(n: usize, index: usize, seed: u64) -> usize {
    rng::stream(seed, &[rng::hash_str("pick-ref"), index as u64]).random_range(0..n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub gt_patch: Image,
    pub ref_patch: Image,
    pub lr_patch: Image,
    pub prompt_gt: String,
    pub prompt_ref: String,
    pub gt_offset: (usize, usize),
    pub ref_offset: (usize, usize),
    pub trace: DegradationTrace,
}

/// Top-left corner of a random `patch`×`patch` crop.
pub fn random_offset(img: &Image, patch: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    let (h, w) = img.dims();
    if h < patch || w < patch || patch == 0 {
        return Err(RasrError::InvalidShape(format!(
            "image {h}x{w} is smaller than the {patch}px patch"
        )));
    }
    Ok((rng.random_range(0..=h - patch), rng.random_range(0..=w - patch)))
}

/// Deterministic training pair for train image `index` under `seed`.
pub fn sample_training_pair(
    manifest: &DatasetManifest,
    store: &dyn ImageStore,
    index: usize,
    seed: u64,
    degradation: &DegradationConfig,
) -> Result<TrainingSample> {
    let items = manifest.train_items();
    let &(_, gt_path) = items.get(index).ok_or_else(|| {
        RasrError::InvalidInput(format!("train index {index} out of range 0..{}", items.len()))
    })?;
    let refs = manifest
        .preselected_refs
        .get(gt_path)
        .filter(|r| !r.is_empty())
        .ok_or_else(|| RasrError::InvalidInput(format!("no preselected references for `{gt_path}`")))?;
    let ref_path = &refs[pick_reference(refs.len(), index, seed)];
    let patch = manifest.patch_size_train;
    let mut r = rng::stream(seed, &[rng::hash_str("crop"), index as u64]);
    let gt_src = load_source(store, manifest, gt_path)?;
    let ref_src = load_source(store, manifest, ref_path)?;
    let gt_offset = random_offset(&gt_src, patch, &mut r)?;
    let ref_offset = random_offset(&ref_src, patch, &mut r)?;
    let gt_patch = gt_src.crop(gt_offset.0, gt_offset.1, patch, patch)?;
    let ref_patch = ref_src.crop(ref_offset.0, ref_offset.1, patch, patch)?;
    let (lr_patch, trace) = degrade(
        &gt_patch,
        degradation,
        rng::derive_seed(seed, &[rng::hash_str("degrade"), index as u64]),
    )?;
    Ok(TrainingSample {
        gt_patch,
        ref_patch,
        lr_patch,
        prompt_gt: manifest.prompt_for(gt_path),
        prompt_ref: manifest.prompt_for(ref_path),
        gt_offset,
        ref_offset,
        trace,
    })
}

/// Two independent `patch`-sized crops per image: the first is the target,
/// the second its reference.
pub fn make_self_reference_pairs(
    images: &[Image],
    seed: u64,
    patch: usize,
    degradation: &DegradationConfig,
) -> Result<Vec<TrainingSample>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut r = rng::stream(seed, &[rng::hash_str("self-ref"), i as u64]);
            let gt_offset = random_offset(img, patch, &mut r)?;
            let ref_offset = random_offset(img, patch, &mut r)?;
            let gt_patch = img.crop(gt_offset.0, gt_offset.1, patch, patch)?;
            let ref_patch = img.crop(ref_offset.0, ref_offset.1, patch, patch)?;
            let (lr_patch, trace) = degrade(&gt_patch, degradation, r.random())?;
            Ok(TrainingSample {
                gt_patch,
                ref_patch,
                lr_patch,
                prompt_gt: String::new(),
                prompt_ref: String::new(),
                gt_offset,
                ref_offset,
                trace,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::encode;
    use crate::retrieval::brute_force_topk;
    use crate::toydata;

    fn names(cat: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{cat}/{i:04}.png")).collect()
    }

    fn one_category(n: usize) -> BTreeMap<String, Vec<String>> {
        BTreeMap::from([("otter".to_string(), names("otter", n))])
    }

    #[test]
    fn canonical_split_sizes() {
        for (n, expect) in [(145, (40, 5, 100)), (46, (40, 5, 1)), (200, (40, 5, 155))] {
            let m = partition(&one_category(n), 1, &SplitRule::default()).unwrap();
            let c = &m.categories[0];
            assert_eq!(
                (c.train_paths.len(), c.test_paths.len(), c.reference_paths.len()),
                expect
            );
        }
    }

    #[test]
    fn fallback_split_keeps_every_part_nonempty() {
        for n in 3..=45 {
            let (tr, te, re) = SplitRule::default().sizes(n).unwrap();
            assert_eq!(tr + te + re, n);
            assert!(tr >= 1 && te >= 1 && re >= 1, "n={n}: {tr}/{te}/{re}");
            assert!(tr <= 40 && te <= 5);
        }
        assert_eq!(SplitRule::default().sizes(10), Some((8, 1, 1)));
        assert!(matches!(
            partition(&one_category(2), 0, &SplitRule::default()),
            Err(RasrError::TooFewImages { count: 2, .. })
        ));
    }

    #[test]
    fn partition_is_deterministic_disjoint_and_complete() {
        let cats = BTreeMap::from([
            ("a".to_string(), names("a", 145)),
            ("b".to_string(), names("b", 20)),
        ]);
        let m1 = partition(&cats, 9, &SplitRule::default()).unwrap();
        let m2 = partition(&cats, 9, &SplitRule::default()).unwrap();
        assert_eq!(m1, m2);
        assert_ne!(m1, partition(&cats, 10, &SplitRule::default()).unwrap());
        for c in &m1.categories {
            let mut all: Vec<&String> = c
                .train_paths
                .iter()
                .chain(&c.test_paths)
                .chain(&c.reference_paths)
                .collect();
            let n = all.len();
            all.sort();
            all.dedup();
            assert_eq!(all.len(), n);
            assert_eq!(n, cats[&c.name].len());
        }
    }

    #[test]
    fn manifest_json_shape() {
        let m = partition(&one_category(50), 0, &SplitRule::default()).unwrap();
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["patch_size_train"], 512);
        assert_eq!(v["patch_size_source"], 768);
        assert!(v["categories"][0]["train_paths"].is_array());
        assert!(v["preselected_refs"].is_object());
        let back: DatasetManifest = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
    }

    fn toy_manifest(per_category: usize, seed: u64) -> (DatasetManifest, MemoryStore) {
        let spec = toydata::ToySpec {
            categories: 3,
            per_category,
            size: 48,
            seed,
        };
        let (cats, store) = toydata::toy_store(&spec);
        let mut m = partition(&cats, seed, &SplitRule::default()).unwrap();
        m.patch_size_source = 48;
        m.patch_size_train = 32;
        (m, store)
    }

    #[test]
    fn preselection_matches_brute_force() {
        let (m, store) = toy_manifest(20, 3);
        let spec = EncoderSpec::default();
        let m = preselect_references(m, &store, &spec, 5).unwrap();
        for cat in &m.categories {
            let records: Vec<ReferenceRecord> = cat
                .reference_paths
                .iter()
                .enumerate()
                .map(|(i, p)| ReferenceRecord {
                    id: i as u64,
                    category: cat.name.clone(),
                    path: p.clone(),
                    embedding: encode(&store.load(p).unwrap(), &spec).unwrap(),
                })
                .collect();
            for path in &cat.train_paths {
                let q = encode(&store.load(path).unwrap(), &spec).unwrap();
                let expect: Vec<String> = brute_force_topk(&records, &q, 5)
                    .unwrap()
                    .into_iter()
                    .map(|h| h.path)
                    .collect();
                assert_eq!(m.preselected_refs[path], expect);
            }
        }
    }

    #[test]
    fn preselection_truncates_and_finds_duplicates() {
        let (mut m, mut store) = toy_manifest(6, 4);
        // 6 images: 4 train, 1 test, 1 reference; make the reference a copy
        let cat = &mut m.categories[0];
        let dup = cat.train_paths[0].clone();
        let extra = format!("{}/dup.png", cat.name);
        store.images.insert(extra.clone(), store.images[&dup].clone());
        cat.reference_paths.push(extra.clone());
        let m = preselect_references(m, &store, &EncoderSpec::default(), 5).unwrap();
        assert_eq!(m.preselected_refs[&dup].len(), 2);
        assert_eq!(m.preselected_refs[&dup][0], extra);
    }

    #[test]
    fn empty_reference_pool_is_an_error() {
        let (mut m, store) = toy_manifest(6, 5);
        m.categories[1].reference_paths.clear();
        assert!(matches!(
            preselect_references(m, &store, &EncoderSpec::default(), 5),
            Err(RasrError::EmptyReferencePool(_))
        ));
    }

    #[test]
    fn samples_are_deterministic_and_well_formed() {
        let (m, store) = toy_manifest(12, 6);
        let m = preselect_references(m, &store, &EncoderSpec::default(), 5).unwrap();
        let cfg = DegradationConfig::default();
        let a = sample_training_pair(&m, &store, 3, 77, &cfg).unwrap();
        let b = sample_training_pair(&m, &store, 3, 77, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.gt_patch.dims(), (32, 32));
        assert_eq!(a.ref_patch.dims(), (32, 32));
        assert_eq!(a.lr_patch.dims(), (8, 8));
        assert!(a.gt_offset.0 <= 16 && a.gt_offset.1 <= 16);
        let items = m.train_items();
        assert!(m.preselected_refs[items[3].1].iter().any(|r| m.prompt_for(r) == a.prompt_ref));
        assert_eq!(a.prompt_gt, category_prompt(items[3].0));
        assert!(sample_training_pair(&m, &store, items.len(), 0, &cfg).is_err());
    }

    #[test]
    fn reference_choice_is_uniform() {
        let mut counts = [0usize; 5];
        for i in 0..10_000 {
            counts[pick_reference(5, i, 42)] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((f - 0.2).abs() <= 0.02, "{counts:?}");
        }
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - 2000.0).powi(2) / 2000.0)
            .sum();
        // 99.9th percentile of chi-square with 4 degrees of freedom
        assert!(chi2 < 18.47, "chi2 {chi2}");
    }

    #[test]
    fn self_reference_pairs() {
        let imgs: Vec<Image> = (0..50)
            .map(|i| toydata::texture(i % 8, 64, i as u64))
            .collect();
        let cfg = DegradationConfig::default();
        let a = make_self_reference_pairs(&imgs, 3, 32, &cfg).unwrap();
        assert_eq!(a, make_self_reference_pairs(&imgs, 3, 32, &cfg).unwrap());
        assert!(a.iter().all(|s| s.gt_patch.dims() == (32, 32) && s.lr_patch.dims() == (8, 8)));
        let differing = a.iter().filter(|s| s.gt_offset != s.ref_offset).count();
        assert!(differing >= 49, "{differing}");
        assert!(matches!(
            make_self_reference_pairs(&imgs[..1], 0, 65, &cfg),
            Err(RasrError::InvalidShape(_))
        ));
    }
}
