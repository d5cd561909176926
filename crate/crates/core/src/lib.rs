//! Retrieval-augmented super-resolution.
//!
//! A low-resolution input is embedded, the most similar high-quality
//! reference is fetched from a per-category database, and a one-step latent
//! generator reconstructs the high-resolution output with reference features
//! injected into its deepest decoder blocks.

pub mod checkpoint;
pub mod dataset;
pub mod degradation;
pub mod embedding;
pub mod error;
pub mod generator;
pub mod image;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod retrieval;
pub mod rng;
pub mod toydata;
pub mod training;

pub use error::{RasrError, Result};
pub use checkpoint::{load_generator, save_generator, Checkpoint};
pub use dataset::{DatasetManifest, SplitRule, TrainingSample};
pub use degradation::{degrade, DegradationConfig, DegradationTrace};
pub use embedding::{Embedding, EncoderRegistry, EncoderSpec, ImageEncoder};
pub use generator::{init_generator, GeneratorConfig, GeneratorState};
pub use image::{Image, ResizeMode};
pub use losses::{LossConfig, LossWeights};
pub use metrics::{MetricRegistry, MetricReport};
pub use pipeline::{run_ablation, run_rasr, AblationKind, PipelineRun, PromptSource, ReferenceMode};
pub use retrieval::{RankedHit, ReferenceIndex, ReferenceRecord};
pub use training::{TrainConfig, Trainer};
