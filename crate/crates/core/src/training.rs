//! Seeded training of the control branch with decoupled-weight-decay Adam,
//! alternating one discriminator-head step and one generator step per batch.
//!
//! Every random choice of step `s` is derived from `(seed, s, slot)`, so a
//! run resumed from a checkpoint retraces the uninterrupted run exactly.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{assign_generator, generator_tensors, Checkpoint, Tensor, TensorRole};
use crate::dataset::{sample_training_pair, DatasetManifest, ImageStore, TrainingSample};
use crate::degradation::DegradationConfig;
use crate::error::{RasrError, Result};
use crate::generator::{init_generator, GeneratorConfig, GeneratorState, Grads};
use crate::losses::{
    discriminator_step_grad, total_loss, Discriminator, FeatureExtractor, LossBreakdown, LossConfig,
};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub generator: GeneratorConfig,
    pub degradation: DegradationConfig,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 4,
            steps: 1000,
            seed: 0,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            generator: GeneratorConfig::default(),
            degradation: DegradationConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(RasrError::InvalidInput(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(RasrError::InvalidInput("steps and batch_size must be at least 1".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 || a.weight_decay < 0.0 {
            return Err(RasrError::InvalidInput("invalid optimizer settings".into()));
        }
        self.loss.gram().validate()?;
        self.generator.validate()?;
        self.degradation.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| RasrError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Adam with decoupled weight decay. Parameters and moments are rounded to
/// single precision after every update so that checkpoints restore them
/// exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamConfig,
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, name: &str, params: &mut [f64], grad: &[f64], lr: f64) {
        let c = &self.config;
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; params.len()]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; params.len()]);
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            m[i] = round32(c.beta1 * m[i] + (1.0 - c.beta1) * g);
            v[i] = round32(c.beta2 * v[i] + (1.0 - c.beta2) * g * g);
            let step = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps) + c.weight_decay * params[i];
            params[i] = round32(params[i] - lr * step);
        }
    }
}

fn round32(x: f64) -> f64 {
    x as f32 as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: u64,
    pub loss: LossBreakdown,
    pub d_loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// Configuration block stored in trainer checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainerMeta {
    generator: GeneratorConfig,
    train: TrainConfig,
    opt_g_t: u64,
    opt_d_t: u64,
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub state: GeneratorState,
    pub disc: Discriminator,
    pub extractor: FeatureExtractor,
    pub opt_g: AdamW,
    pub opt_d: AdamW,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            state: init_generator(config.generator.clone())?,
            disc: Discriminator::toy(rng::derive_seed(config.seed, &[rng::hash_str("discriminator")])),
            extractor: FeatureExtractor::toy(rng::derive_seed(config.seed, &[rng::hash_str("perceptual")])),
            opt_g: AdamW::new(config.adam.clone()),
            opt_d: AdamW::new(config.adam.clone()),
            step: 0,
            config,
        })
    }

    /// Batch of step `step`: train indices and sample seeds both derive from
    /// `(seed, step, slot)`.
    pub fn batch_for_step(
        &self,
        manifest: &DatasetManifest,
        store: &dyn ImageStore,
        step: u64,
    ) -> Result<Vec<TrainingSample>> {
        let n = manifest.train_items().len();
        if n == 0 {
            return Err(RasrError::InvalidInput("manifest has no train images".into()));
        }
        let seed = self.config.seed;
        (0..self.config.batch_size as u64)
            .map(|b| {
                let index = rng::stream(seed, &[rng::hash_str("batch"), step, b]).random_range(0..n);
                let sample_seed = rng::derive_seed(seed, &[rng::hash_str("sample"), step, b]);
                sample_training_pair(manifest, store, index, sample_seed, &self.config.degradation)
            })
            .collect()
    }

    /// One discriminator-head update followed by one generator update.
    pub fn train_step(&mut self, batch: &[TrainingSample]) -> Result<TrainLogEntry> {
        if batch.is_empty() {
            return Err(RasrError::InvalidInput("empty batch".into()));
        }
        let started = Instant::now();
        let step = self.step + 1;
        let cfg = &self.config;
        let alpha = cfg.generator.fusion_alpha_train;
        let inv_b = 1.0 / batch.len() as f64;
        let mut passes = Vec::with_capacity(batch.len());
        let mut gts = Vec::with_capacity(batch.len());
        for s in batch {
            let pass = self.state.forward(&s.lr_patch, Some(&s.ref_patch), &s.prompt_gt, alpha)?;
            let gt = s.gt_patch.to_chw();
            if pass.pred.dim() != gt.dim() {
                return Err(RasrError::InvalidShape(format!(
                    "prediction {:?} does not match ground truth {:?}",
                    pass.pred.dim(),
                    gt.dim()
                )));
            }
            passes.push(pass);
            gts.push(gt);
        }

        let real: Vec<_> = gts.iter().map(|g| self.disc.features(g)).collect();
        let fake: Vec<_> = passes.iter().map(|p| self.disc.features(&p.pred)).collect();
        let hg = discriminator_step_grad(&self.disc, &real, &fake);
        if !hg.d_loss.is_finite() {
            return Err(RasrError::NonFiniteLoss {
                step,
                detail: format!("discriminator loss {}", hg.d_loss),
            });
        }
        let lr = cfg.learning_rate;
        self.opt_d.begin_step();
        self.opt_d.update(
            "disc.head.weight",
            self.disc.head_weight.as_slice_mut().unwrap(),
            hg.weight.as_slice().unwrap(),
            lr,
        );
        self.opt_d
            .update("disc.head.bias", std::slice::from_mut(&mut self.disc.head_bias), &[hg.bias], lr);

        let gram_cfg = cfg.loss.gram();
        let mut breakdown = LossBreakdown::default();
        let mut grads: Grads = BTreeMap::new();
        for (pass, gt) in passes.iter().zip(&gts) {
            let (bd, d_pred) = total_loss(
                &pass.pred,
                gt,
                &self.extractor,
                &self.disc,
                &cfg.loss.weights,
                &gram_cfg,
            )?;
            breakdown.accumulate(&bd, inv_b);
            for (name, g) in self.state.backward(pass, &(d_pred * inv_b)) {
                match grads.get_mut(&name) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
        }
        let grad_norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if !breakdown.total.is_finite() || !grad_norm.is_finite() {
            return Err(RasrError::NonFiniteLoss {
                step,
                detail: format!("loss {:?}, gradient norm {grad_norm}", breakdown),
            });
        }
        self.opt_g.begin_step();
        let opt = &mut self.opt_g;
        self.state.visit_params_mut(&mut |name, v, trainable| {
            if trainable {
                if let Some(g) = grads.get(&name) {
                    opt.update(&name, v, g, lr);
                }
            }
        });
        self.step = step;
        Ok(TrainLogEntry {
            step,
            loss: breakdown,
            d_loss: hg.d_loss,
            grad_norm,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = generator_tensors(&self.state);
        self.disc.visit(&mut |name, v, trainable| {
            tensors.push(Tensor {
                name,
                role: if trainable {
                    TensorRole::Trainable
                } else {
                    TensorRole::Frozen
                },
                values: v.iter().map(|&x| x as f32).collect(),
            })
        });
        self.extractor.visit("perceptual", &mut |name, v| {
            tensors.push(Tensor {
                name,
                role: TensorRole::Frozen,
                values: v.iter().map(|&x| x as f32).collect(),
            })
        });
        for (prefix, opt) in [("opt_g", &self.opt_g), ("opt_d", &self.opt_d)] {
            for (kind, moments) in [("m", &opt.m), ("v", &opt.v)] {
                for (name, values) in moments {
                    tensors.push(Tensor {
                        name: format!("{prefix}.{kind}.{name}"),
                        role: TensorRole::Optimizer,
                        values: values.iter().map(|&x| x as f32).collect(),
                    });
                }
            }
        }
        Ok(Checkpoint {
            config: serde_json::to_value(TrainerMeta {
                generator: self.state.config.clone(),
                train: self.config.clone(),
                opt_g_t: self.opt_g.t,
                opt_d_t: self.opt_d.t,
            })?,
            step: self.step,
            tensors,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: TrainerMeta = serde_json::from_value(ckpt.config.clone()).map_err(|e| {
            RasrError::CorruptCheckpoint(format!("not a training checkpoint: {e}"))
        })?;
        let mut t = Trainer::new(TrainConfig {
            generator: meta.generator,
            ..meta.train
        })?;
        assign_generator(&mut t.state, ckpt)?;
        let mut missing = None;
        t.disc.visit_mut(&mut |name, v, _| match ckpt.tensor(&name) {
            Some(src) if src.values.len() == v.len() => {
                v.iter_mut().zip(&src.values).for_each(|(d, s)| *d = *s as f64)
            }
            _ => missing = Some(name),
        });
        if let Some(name) = missing {
            return Err(RasrError::CorruptCheckpoint(format!("bad or missing tensor `{name}`")));
        }
        t.opt_g.t = meta.opt_g_t;
        t.opt_d.t = meta.opt_d_t;
        for tensor in ckpt.tensors.iter().filter(|t| t.role == TensorRole::Optimizer) {
            let (opt, rest) = if let Some(r) = tensor.name.strip_prefix("opt_g.") {
                (&mut t.opt_g, r)
            } else if let Some(r) = tensor.name.strip_prefix("opt_d.") {
                (&mut t.opt_d, r)
            } else {
                return Err(RasrError::CorruptCheckpoint(format!(
                    "unknown optimizer tensor `{}`",
                    tensor.name
                )));
            };
            let values = tensor.values.iter().map(|&x| x as f64).collect();
            if let Some(name) = rest.strip_prefix("m.") {
                opt.m.insert(name.to_string(), values);
            } else if let Some(name) = rest.strip_prefix("v.") {
                opt.v.insert(name.to_string(), values);
            } else {
                return Err(RasrError::CorruptCheckpoint(format!(
                    "unknown optimizer tensor `{}`",
                    tensor.name
                )));
            }
        }
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Names and sizes of the parameters the optimizer updates.
pub fn trainable_parameters(state: &GeneratorState) -> Vec<(String, usize)> {
    state.trainable_parameters()
}

/// Output locations of a training run.
pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint_{step:06}.ckpt"))
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Trains until `config.steps`, starting from `resume` when given. With an
/// output directory, log lines and checkpoints are written as the run
/// progresses.
pub fn train_loop(
    manifest: &DatasetManifest,
    store: &dyn ImageStore,
    config: TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<Trainer>,
    mut on_step: impl FnMut(&TrainLogEntry),
) -> Result<(Trainer, Vec<TrainLogEntry>)> {
    let mut trainer = match resume {
        Some(mut t) => {
            config.validate()?;
            t.config.steps = config.steps;
            t.config.checkpoint_every = config.checkpoint_every;
            t
        }
        None => Trainer::new(config)?,
    };
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| RasrError::io(dir, e))?;
            let path = dir.join(TRAIN_LOG);
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(trainer.step > 0)
                .truncate(trainer.step == 0)
                .open(&path)
                .map_err(|e| RasrError::io(&path, e))?;
            Some((path, f))
        }
        None => None,
    };
    let mut log = Vec::new();
    while trainer.step < trainer.config.steps {
        let batch = trainer.batch_for_step(manifest, store, trainer.step + 1)?;
        let entry = trainer.train_step(&batch)?;
        if let Some((path, f)) = log_file.as_mut() {
            let line = serde_json::to_string(&entry)?;
            writeln!(f, "{line}").map_err(|e| RasrError::io(&*path, e))?;
        }
        on_step(&entry);
        log.push(entry);
        let k = trainer.config.checkpoint_every;
        if let Some(dir) = out_dir {
            if k > 0 && trainer.step % k == 0 {
                trainer.save(checkpoint_path(dir, trainer.step))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        trainer.save(dir.join(FINAL_CHECKPOINT))?;
    }
    Ok((trainer, log))
}

/// Centered moving average over `window` entries, shrinking at the ends.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{partition, preselect_references, MemoryStore, SplitRule};
    use crate::embedding::EncoderSpec;
    use crate::toydata::{toy_store, ToySpec};

    fn setup() -> (DatasetManifest, MemoryStore, TrainConfig) {
        let (cats, store) = toy_store(&ToySpec {
            categories: 2,
            per_category: 8,
            size: 40,
            seed: 1,
        });
        let mut m = partition(&cats, 1, &SplitRule::default()).unwrap();
        m.patch_size_source = 40;
        m.patch_size_train = 32;
        let m = preselect_references(m, &store, &EncoderSpec::default(), 5).unwrap();
        let config = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 2,
            steps: 6,
            seed: 4,
            generator: GeneratorConfig {
                widths: [8, 12, 16, 20],
                text_dim: 8,
                max_tokens: 16,
                ..Default::default()
            },
            ..Default::default()
        };
        (m, store, config)
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut opt = AdamW::new(AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut p = vec![1.0, -2.0, 0.5];
        opt.begin_step();
        opt.update("p", &mut p, &[0.3, -4.0, 0.0], 0.01);
        assert!((p[0] - 0.99).abs() < 1e-6);
        assert!((p[1] + 1.99).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (m, store, config) = setup();
        let mut t = Trainer::new(config).unwrap();
        t.config.learning_rate = 0.0;
        let before = t.clone();
        let batch = t.batch_for_step(&m, &store, 1).unwrap();
        t.train_step(&batch).unwrap();
        assert_eq!(t.state, before.state);
        assert_eq!(t.disc, before.disc);
    }

    #[test]
    fn one_step_changes_trainable_and_nothing_frozen() {
        let (m, store, config) = setup();
        let mut t = Trainer::new(config).unwrap();
        let before = t.state.clone();
        let checksum = before.frozen_checksum();
        let batch = t.batch_for_step(&m, &store, 1).unwrap();
        let entry = t.train_step(&batch).unwrap();
        assert!(entry.loss.total.is_finite() && entry.grad_norm > 0.0);
        assert_eq!(t.state.frozen_checksum(), checksum);
        let mut changed = 0;
        let mut old = BTreeMap::new();
        before.visit_params(&mut |n, v, _| {
            old.insert(n, v.to_vec());
        });
        t.state.visit_params(&mut |n, v, trainable| {
            if old[&n] != v {
                assert!(trainable, "{n} changed");
                changed += 1;
            }
        });
        assert!(changed > 0);
        let z = t.state.latent_of(&batch[0].ref_patch).unwrap();
        let feats = t.state.control_features(&z).unwrap();
        assert!(feats.values().any(|f| f.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn runs_are_deterministic_and_resumable() {
        let (m, store, config) = setup();
        let dir = tempfile::tempdir().unwrap();
        let (a, log_a) = train_loop(&m, &store, config.clone(), Some(dir.path()), None, |_| {}).unwrap();
        let (b, _) = train_loop(&m, &store, config.clone(), None, None, |_| {}).unwrap();
        assert_eq!(a.to_checkpoint().unwrap(), b.to_checkpoint().unwrap());
        assert_eq!(log_a.len(), 6);
        let lines = fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
        assert_eq!(lines.lines().count(), 6);

        let half = TrainConfig {
            steps: 3,
            ..config.clone()
        };
        let (h, _) = train_loop(&m, &store, half, Some(dir.path()), None, |_| {}).unwrap();
        let path = dir.path().join("half.ckpt");
        h.save(&path).unwrap();
        let resumed = Trainer::load(&path).unwrap();
        assert_eq!(resumed, h);
        let (c, log_c) = train_loop(&m, &store, config, None, Some(resumed), |_| {}).unwrap();
        assert_eq!(log_c.len(), 3);
        assert_eq!(c.to_checkpoint().unwrap().encode().unwrap(), a.to_checkpoint().unwrap().encode().unwrap());
    }

    #[test]
    fn periodic_checkpoints_are_written() {
        let (m, store, mut config) = setup();
        config.steps = 4;
        config.checkpoint_every = 2;
        let dir = tempfile::tempdir().unwrap();
        train_loop(&m, &store, config, Some(dir.path()), None, |_| {}).unwrap();
        assert!(checkpoint_path(dir.path(), 2).is_file());
        assert!(checkpoint_path(dir.path(), 4).is_file());
        assert!(dir.path().join(FINAL_CHECKPOINT).is_file());
        let t = Trainer::load(checkpoint_path(dir.path(), 2)).unwrap();
        assert_eq!(t.step, 2);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let (m, store, config) = setup();
        let mut t = Trainer::new(config).unwrap();
        let mut batch = t.batch_for_step(&m, &store, 1).unwrap();
        t.disc.head_bias = f64::NAN;
        assert!(matches!(t.train_step(&batch), Err(RasrError::NonFiniteLoss { step: 1, .. })));
        t.disc.head_bias = 0.0;
        batch.clear();
        assert!(t.train_step(&batch).is_err());
    }

    #[test]
    fn config_validation() {
        for bad in [
            TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            TrainConfig {
                steps: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
        let json = r#"{"learning_rate": 0.001, "steps": 10}"#;
        let c: TrainConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.loss.weights.lambda_lpips, 2.0);
    }

    #[test]
    fn smoothing() {
        assert_eq!(smoothed(&[1.0, 2.0, 3.0, 4.0], 3), vec![1.5, 2.0, 3.0, 3.5]);
    }
}
