//! End-to-end composition: retrieve a reference for each LR input, combine
//! prompts, generate, write the result and optionally score it.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_generator, save_generator};
use crate::dataset::{category_prompt, scan_categories, CachedStore, DatasetManifest, FsStore};
use crate::embedding::{EncoderRegistry, EncoderSpec};
use crate::error::{RasrError, Result};
use crate::generator::{combine_prompts, GeneratorState};
use crate::image::Image;
use crate::metrics::{evaluate, MetricRegistry, MetricReport};
use crate::retrieval::{build_index, load_index, save_index, RankedHit, ReferenceIndex, ReferenceRecord};
use crate::rng;
use crate::training::{train_loop, TrainConfig, FINAL_CHECKPOINT};

/// Which prompts condition generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptSource {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "lr")]
    Lr,
    #[serde(rename = "ref")]
    Ref,
    #[serde(rename = "ref+lr")]
    RefLr,
}

impl PromptSource {
    pub const ALL: [PromptSource; 4] = [Self::None, Self::Lr, Self::Ref, Self::RefLr];

    pub fn prompt(self, ref_prompt: &str, lr_prompt: &str) -> String {
        match self {
            Self::None => String::new(),
            Self::Lr => lr_prompt.trim().to_string(),
            Self::Ref => ref_prompt.trim().to_string(),
            Self::RefLr => combine_prompts(ref_prompt, lr_prompt),
        }
    }
}

impl fmt::Display for PromptSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Lr => "lr",
            Self::Ref => "ref",
            Self::RefLr => "ref+lr",
        })
    }
}

impl FromStr for PromptSource {
    type Err = RasrError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.to_string() == s.trim().to_lowercase())
            .ok_or_else(|| RasrError::InvalidInput(format!("unknown prompt source `{s}`")))
    }
}

/// How the reference for each input is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// Top-1 retrieval from the index.
    Retrieved,
    /// A seeded uniformly random record from the index.
    Random,
    /// No reference; the control branch is skipped.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub index_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub gt_dir: Option<PathBuf>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_prompt_source")]
    pub prompt_source: PromptSource,
    #[serde(default = "default_reference_mode")]
    pub reference_mode: ReferenceMode,
    #[serde(default)]
    pub category: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<String>,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn default_alpha() -> f64 {
    0.5
}

fn default_prompt_source() -> PromptSource {
    PromptSource::RefLr
}

fn default_reference_mode() -> ReferenceMode {
    ReferenceMode::Retrieved
}

fn default_metrics() -> Vec<String> {
    vec!["psnr".into(), "ssim".into()]
}

fn default_jobs() -> usize {
    1
}

impl PipelineRun {
    pub fn new(
        index_path: impl Into<PathBuf>,
        checkpoint_path: impl Into<PathBuf>,
        input_dir: impl Into<PathBuf>,
        output_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            index_path: index_path.into(),
            checkpoint_path: checkpoint_path.into(),
            input_dir: input_dir.into(),
            output_dir: output_dir.into(),
            gt_dir: None,
            alpha: default_alpha(),
            prompt_source: default_prompt_source(),
            reference_mode: default_reference_mode(),
            category: None,
            seed: 0,
            metrics: default_metrics(),
            jobs: default_jobs(),
        }
    }
}

/// Path of the encoder description stored next to an index file.
pub fn encoder_sidecar(index_path: &Path) -> PathBuf {
    let mut name = index_path.file_name().unwrap_or_default().to_os_string();
    name.push(".encoder.json");
    index_path.with_file_name(name)
}

/// Writes the index and its encoder sidecar.
pub fn save_index_with_encoder(index: &ReferenceIndex, path: &Path) -> Result<()> {
    save_index(index, path)?;
    let spec = index.encoder_spec().cloned().unwrap_or_default();
    crate::io::write_atomic(&encoder_sidecar(path), serde_json::to_string_pretty(&spec)?.as_bytes())
}

/// Loads an index and attaches the encoder from its sidecar, or the default
/// encoder when there is none.
pub fn open_index(path: &Path) -> Result<ReferenceIndex> {
    let index = load_index(path)?;
    let sidecar = encoder_sidecar(path);
    let spec = if sidecar.is_file() {
        let text = fs::read_to_string(&sidecar).map_err(|e| RasrError::io(&sidecar, e))?;
        serde_json::from_str(&text)?
    } else {
        EncoderSpec::default()
    };
    index.with_encoder(spec)
}

/// Embeds every `root/<category>/*.png`; ids follow sorted path order.
pub fn build_reference_index(root: &Path, spec: &EncoderSpec) -> Result<ReferenceIndex> {
    let encoder = EncoderRegistry::default().build(spec)?;
    let mut records = Vec::new();
    for (category, paths) in scan_categories(root)? {
        for rel in paths {
            let path = root.join(&rel);
            let img = Image::load(&path)?;
            records.push(ReferenceRecord {
                id: records.len() as u64,
                category: category.clone(),
                path: path.to_string_lossy().into_owned(),
                embedding: encoder.encode(&img)?,
            });
        }
    }
    build_index(records, spec.clone())
}

fn list_pngs(dir: &Path) -> Result<Vec<String>> {
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

/// Text from the `.txt` file next to `image_path`, or empty.
pub fn sidecar_prompt(image_path: &Path) -> String {
    fs::read_to_string(image_path.with_extension("txt"))
        .map(|s| s.trim().to_string())
        .unwrap_or_default()
}

fn resolve(index_path: &Path, stored: &str) -> PathBuf {
    let p = PathBuf::from(stored);
    if p.is_absolute() || p.exists() {
        return p;
    }
    index_path.parent().map(|d| d.join(&p)).unwrap_or(p)
}

/// Reference record for one input under `mode`.
pub fn choose_reference(
    index: &ReferenceIndex,
    lr: &Image,
    file_name: &str,
    run: &PipelineRun,
) -> Result<Option<RankedHit>> {
    match run.reference_mode {
        ReferenceMode::Disabled => Ok(None),
        ReferenceMode::Retrieved => {
            let spec = index.encoder_spec().cloned().unwrap_or_default();
            let q = EncoderRegistry::default().build(&spec)?.encode(lr)?;
            Ok(index.query_filtered(&q, 1, run.category.as_deref())?.into_iter().next())
        }
        ReferenceMode::Random => {
            if index.is_empty() {
                return Err(RasrError::EmptyIndex);
            }
            let pick = rng::stream(run.seed, &[rng::hash_str("random-ref"), rng::hash_str(file_name)])
                .random_range(0..index.len());
            let r = &index.records()[pick];
            Ok(Some(RankedHit {
                id: r.id,
                category: r.category.clone(),
                path: r.path.clone(),
                similarity: f64::NAN,
            }))
        }
    }
}

/// What happened to one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineItem {
    pub file: String,
    pub reference: Option<String>,
    pub prompt: String,
}

/// Restores one LR image: retrieve, combine prompts, generate.
pub fn restore_one(
    state: &GeneratorState,
    index: &ReferenceIndex,
    run: &PipelineRun,
    file_name: &str,
) -> Result<(Image, PipelineItem)> {
    let lr_path = run.input_dir.join(file_name);
    let lr = Image::load(&lr_path)?;
    let hit = choose_reference(index, &lr, file_name, run)?;
    let (reference, ref_prompt) = match &hit {
        Some(h) => {
            let path = resolve(&run.index_path, &h.path);
            let text = sidecar_prompt(&path);
            let prompt = if text.is_empty() {
                category_prompt(&h.category)
            } else {
                text
            };
            (Some(Image::load(&path)?), prompt)
        }
        None => (None, String::new()),
    };
    let prompt = run.prompt_source.prompt(&ref_prompt, &sidecar_prompt(&lr_path));
    let out = state.generate(&lr, reference.as_ref(), &prompt, run.alpha)?;
    Ok((
        out,
        PipelineItem {
            file: file_name.to_string(),
            reference: hit.map(|h| h.path),
            prompt,
        },
    ))
}

/// Runs the full pipeline over `run.input_dir`. Returns the report, which
/// has no metrics when no ground-truth directory is configured.
pub fn run_rasr(run: &PipelineRun) -> Result<MetricReport> {
    if !(0.0..=1.0).contains(&run.alpha) {
        return Err(RasrError::InvalidInput(format!("alpha {} outside [0, 1]", run.alpha)));
    }
    let index = open_index(&run.index_path)?;
    if index.is_empty() && run.reference_mode != ReferenceMode::Disabled {
        return Err(RasrError::EmptyIndex);
    }
    let state = load_generator(&run.checkpoint_path)?;
    let files = list_pngs(&run.input_dir)?;
    fs::create_dir_all(&run.output_dir).map_err(|e| RasrError::io(&run.output_dir, e))?;
    let work = |name: &String| -> Result<PipelineItem> {
        let (img, item) = restore_one(&state, &index, run, name)?;
        img.save(run.output_dir.join(name))?;
        Ok(item)
    };
    let items: Vec<PipelineItem> = if run.jobs > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(run.jobs)
            .build()
            .map_err(|e| RasrError::InvalidInput(format!("thread pool: {e}")))?
            .install(|| files.par_iter().map(work).collect::<Result<Vec<_>>>())?
    } else {
        files.iter().map(work).collect::<Result<Vec<_>>>()?
    };
    for item in &items {
        log::info!(
            "{}: reference {:?}, prompt {:?}",
            item.file,
            item.reference,
            item.prompt
        );
    }
    let mut report = match &run.gt_dir {
        Some(gt) => evaluate(&run.output_dir, gt, &run.metrics, &MetricRegistry::default())?,
        None => MetricReport::default(),
    };
    report.method = format!("rasr alpha={} prompt={}", run.alpha, run.prompt_source);
    report.dataset = run.input_dir.to_string_lossy().into_owned();
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    Prompts,
    Losses,
    Encoders,
}

impl FromStr for AblationKind {
    type Err = RasrError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "prompts" => Ok(Self::Prompts),
            "losses" => Ok(Self::Losses),
            "encoders" => Ok(Self::Encoders),
            other => Err(RasrError::InvalidInput(format!("unknown ablation kind `{other}`"))),
        }
    }
}

impl AblationKind {
    pub fn default_variants(self) -> Vec<String> {
        let v: &[&str] = match self {
            Self::Prompts => &["none", "lr", "ref", "ref+lr"],
            Self::Losses => &["none", "gram", "gan", "gram+gan"],
            Self::Encoders => &["none", "toy"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Variant grid; absent means the kind's default grid.
    #[serde(default)]
    pub variants: Option<Vec<String>>,
    pub run: PipelineRun,
    /// Dataset and base training configuration for the losses grid.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.variant);
            for c in &self.columns {
                out.push(',');
                if let Some(v) = row.values.get(c) {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

fn row_from_report(variant: &str, report: &MetricReport) -> AblationRow {
    AblationRow {
        variant: variant.to_string(),
        values: report.metrics.iter().map(|(k, m)| (k.clone(), m.mean)).collect(),
    }
}

fn loss_variant(variant: &str, base: &TrainConfig) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    let parts: Vec<&str> = variant.split('+').map(str::trim).collect();
    for p in &parts {
        if !matches!(*p, "none" | "gram" | "gan") {
            return Err(RasrError::InvalidInput(format!("unknown loss variant `{variant}`")));
        }
    }
    if !parts.contains(&"gram") {
        cfg.loss.weights.lambda_gram = 0.0;
    }
    if !parts.contains(&"gan") {
        cfg.loss.weights.lambda_gan = 0.0;
    }
    Ok(cfg)
}

/// Runs every variant of the grid and tabulates the mean metrics.
pub fn run_ablation(kind: AblationKind, config: &AblationConfig) -> Result<AblationTable> {
    let variants = config.variants.clone().unwrap_or_else(|| kind.default_variants());
    let mut rows = Vec::with_capacity(variants.len());
    for variant in &variants {
        let mut run = config.run.clone();
        run.output_dir = config.run.output_dir.join(variant.replace('+', "_"));
        let report = match kind {
            AblationKind::Prompts => {
                run.prompt_source = variant.parse()?;
                run_rasr(&run)?
            }
            AblationKind::Encoders => {
                if variant == "none" {
                    run.reference_mode = ReferenceMode::Random;
                } else {
                    let index_encoder = open_index(&run.index_path)?
                        .encoder_spec()
                        .map(|s| s.name.clone())
                        .unwrap_or_default();
                    if &index_encoder != variant {
                        return Err(RasrError::InvalidInput(format!(
                            "encoder variant `{variant}` does not match the index encoder `{index_encoder}`"
                        )));
                    }
                    run.reference_mode = ReferenceMode::Retrieved;
                }
                run_rasr(&run)?
            }
            AblationKind::Losses => {
                let manifest_path = config.manifest.as_ref().ok_or_else(|| {
                    RasrError::InvalidInput("the losses grid needs a manifest".into())
                })?;
                let manifest = DatasetManifest::load(manifest_path)?;
                let root = manifest.root.clone().map(PathBuf::from).unwrap_or_else(|| {
                    manifest_path.parent().map(Path::to_path_buf).unwrap_or_default()
                });
                let store = CachedStore::new(FsStore::new(root));
                let base = config.train.clone().unwrap_or_default();
                let train_dir = run.output_dir.join("train");
                train_loop(&manifest, &store, loss_variant(variant, &base)?, Some(&train_dir), None, |_| {})?;
                run.checkpoint_path = train_dir.join(FINAL_CHECKPOINT);
                run.output_dir = run.output_dir.join("images");
                run_rasr(&run)?
            }
        };
        rows.push(row_from_report(variant, &report));
    }
    let mut columns: Vec<String> = rows.iter().flat_map(|r| r.values.keys().cloned()).collect();
    columns.sort();
    columns.dedup();
    Ok(AblationTable { kind, columns, rows })
}

/// Writes a freshly initialized generator checkpoint.
pub fn init_checkpoint(config: crate::generator::GeneratorConfig, path: &Path) -> Result<()> {
    save_generator(&crate::generator::init_generator(config)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::{degrade, DegradationConfig};
    use crate::generator::GeneratorConfig;
    use crate::toydata::{texture, write_toy_dataset, ToySpec};

    fn small_generator() -> GeneratorConfig {
        GeneratorConfig {
            widths: [8, 12, 16, 20],
            text_dim: 8,
            max_tokens: 16,
            ..Default::default()
        }
    }

    struct Fixture {
        _dir: tempfile::TempDir,
        run: PipelineRun,
    }

    fn fixture() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        write_toy_dataset(
            root.join("refs"),
            &ToySpec {
                categories: 3,
                per_category: 4,
                size: 32,
                seed: 2,
            },
        )
        .unwrap();
        let index = build_reference_index(&root.join("refs"), &EncoderSpec::default()).unwrap();
        save_index_with_encoder(&index, &root.join("refs.idx")).unwrap();
        let (lr_dir, gt_dir) = (root.join("lr"), root.join("gt"));
        for i in 0..3 {
            let gt = texture(i, 32, 100 + i as u64);
            let (lr, _) = degrade(&gt, &DegradationConfig::default(), i as u64).unwrap();
            gt.save(gt_dir.join(format!("{i}.png"))).unwrap();
            lr.save(lr_dir.join(format!("{i}.png"))).unwrap();
        }
        fs::write(lr_dir.join("1.txt"), "striped cloth").unwrap();
        init_checkpoint(small_generator(), &root.join("fresh.ckpt")).unwrap();
        let mut run = PipelineRun::new(root.join("refs.idx"), root.join("fresh.ckpt"), lr_dir, root.join("out"));
        run.gt_dir = Some(gt_dir);
        Fixture { _dir: dir, run }
    }

    #[test]
    fn prompt_sources() {
        assert_eq!(PromptSource::RefLr.prompt("otter fur", "animal water"), "otter fur, animal water");
        assert_eq!(PromptSource::None.prompt("a", "b"), "");
        assert_eq!(PromptSource::Lr.prompt("a", "b"), "b");
        assert_eq!(PromptSource::Ref.prompt("a", "b"), "a");
        for p in PromptSource::ALL {
            assert_eq!(p.to_string().parse::<PromptSource>().unwrap(), p);
        }
        assert!("both".parse::<PromptSource>().is_err());
    }

    #[test]
    fn fresh_checkpoint_matches_baseline_and_reports() {
        let f = fixture();
        let mut run = f.run.clone();
        run.prompt_source = PromptSource::Lr;
        let report = run_rasr(&run).unwrap();
        assert_eq!(report.metrics["psnr"].per_image.len(), 3);
        let mut base = run.clone();
        base.reference_mode = ReferenceMode::Disabled;
        base.output_dir = run.output_dir.with_file_name("base");
        run_rasr(&base).unwrap();
        for i in 0..3 {
            let a = fs::read(run.output_dir.join(format!("{i}.png"))).unwrap();
            let b = fs::read(base.output_dir.join(format!("{i}.png"))).unwrap();
            assert_eq!(a, b);
        }
        let again = run_rasr(&run).unwrap();
        assert_eq!(serde_json::to_string(&again).unwrap(), serde_json::to_string(&report).unwrap());
    }

    #[test]
    fn composition_equals_manual_chaining() {
        let f = fixture();
        let mut run = f.run.clone();
        run.jobs = 2;
        run_rasr(&run).unwrap();
        let index = open_index(&run.index_path).unwrap();
        let state = load_generator(&run.checkpoint_path).unwrap();
        let lr = Image::load(run.input_dir.join("1.png")).unwrap();
        let q = EncoderRegistry::default()
            .build(index.encoder_spec().unwrap())
            .unwrap()
            .encode(&lr)
            .unwrap();
        let hit = index.query(&q, 1).unwrap().remove(0);
        let reference = Image::load(&hit.path).unwrap();
        let prompt = combine_prompts(&category_prompt(&hit.category), "striped cloth");
        let manual = state.generate(&lr, Some(&reference), &prompt, 0.5).unwrap();
        assert_eq!(Image::load(run.output_dir.join("1.png")).unwrap(), manual.quantized_u8());
    }

    #[test]
    fn prompt_ablation_has_four_rows_and_empty_grid_is_empty() {
        let f = fixture();
        let cfg = AblationConfig {
            variants: None,
            run: f.run.clone(),
            manifest: None,
            train: None,
        };
        let t = run_ablation(AblationKind::Prompts, &cfg).unwrap();
        let names: Vec<&str> = t.rows.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(names, ["none", "lr", "ref", "ref+lr"]);
        assert_eq!(t.columns, ["psnr", "ssim"]);
        assert_eq!(t.to_csv().lines().count(), 5);
        let empty = run_ablation(
            AblationKind::Encoders,
            &AblationConfig {
                variants: Some(vec![]),
                ..cfg
            },
        )
        .unwrap();
        assert!(empty.rows.is_empty());
    }

    #[test]
    fn random_reference_mode_is_seeded() {
        let f = fixture();
        let index = open_index(&f.run.index_path).unwrap();
        let lr = Image::load(f.run.input_dir.join("0.png")).unwrap();
        let mut run = f.run.clone();
        run.reference_mode = ReferenceMode::Random;
        let a = choose_reference(&index, &lr, "0.png", &run).unwrap().unwrap();
        let b = choose_reference(&index, &lr, "0.png", &run).unwrap().unwrap();
        assert_eq!(a.id, b.id);
        let picks: std::collections::BTreeSet<u64> = (0..40)
            .map(|i| {
                choose_reference(&index, &lr, &format!("{i}.png"), &run)
                    .unwrap()
                    .unwrap()
                    .id
            })
            .collect();
        assert!(picks.len() > 3);
    }

    #[test]
    fn missing_inputs_are_reported() {
        let f = fixture();
        let mut run = f.run.clone();
        run.checkpoint_path = run.checkpoint_path.with_file_name("absent.ckpt");
        assert!(matches!(run_rasr(&run), Err(RasrError::Io { .. })));
        let mut run = f.run.clone();
        run.alpha = 2.0;
        assert!(run_rasr(&run).is_err());
    }
}
