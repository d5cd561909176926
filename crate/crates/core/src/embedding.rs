//! Semantic image embeddings behind a pluggable encoder interface.
//!
//! The built-in `toy` encoder area-resizes the image to 16×16, flattens it
//! in row-major `(y, x, channel)` order into 768 values and projects them
//! through a `dim × 768` matrix whose entries are standard normal draws from
//! `ChaCha8Rng::seed_from_u64(seed)`, taken row by row. The projection is
//! L2-normalized.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{RasrError, Result};
use crate::image::{Image, ResizeMode};

pub const DEFAULT_DIM: usize = 64;
pub const MIN_ENCODER_SIDE: usize = 8;
const TOY_SIDE: usize = 16;
const TOY_INPUT: usize = TOY_SIDE * TOY_SIDE * 3;

/// A unit-norm retrieval key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f32>,
    pub source_encoder: String,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub name: String,
    pub dim: usize,
    pub seed: u64,
}

impl EncoderSpec {
    pub fn toy(dim: usize, seed: u64) -> Self {
        Self {
            name: "toy".to_string(),
            dim,
            seed,
        }
    }
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self::toy(DEFAULT_DIM, 0)
    }
}

/// Scales `vector` to unit Euclidean norm.
pub fn normalize(vector: &[f32]) -> Result<Embedding> {
    normalize_f64(&vector.iter().map(|&v| v as f64).collect::<Vec<_>>(), "")
}

pub(crate) fn normalize_f64(vector: &[f64], source: &str) -> Result<Embedding> {
    let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(RasrError::ZeroVector);
    }
    Ok(Embedding {
        vector: vector.iter().map(|v| (v / norm) as f32).collect(),
        source_encoder: source.to_string(),
    })
}

/// Dot product accumulated in double precision.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub trait ImageEncoder: Send + Sync {
    fn spec(&self) -> &EncoderSpec;
    fn encode(&self, image: &Image) -> Result<Embedding>;
}

/// Seeded random-projection encoder.
pub struct ToyEncoder {
    spec: EncoderSpec,
    projection: Vec<f64>,
}

impl ToyEncoder {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        if spec.dim == 0 {
            return Err(RasrError::InvalidInput("encoder dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let projection = (0..spec.dim * TOY_INPUT)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Ok(Self { spec, projection })
    }
}

impl ImageEncoder for ToyEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode(&self, image: &Image) -> Result<Embedding> {
        check_encoder_input(image)?;
        let small = image.resize(TOY_SIDE, TOY_SIDE, ResizeMode::Area)?;
        let flat: Vec<f64> = small.data().iter().map(|&v| v as f64).collect();
        let projected: Vec<f64> = self
            .projection
            .chunks_exact(TOY_INPUT)
            .map(|row| row.iter().zip(&flat).map(|(p, x)| p * x).sum())
            .collect();
        normalize_f64(&projected, &self.spec.name)
    }
}

pub fn check_encoder_input(image: &Image) -> Result<()> {
    if image.height() < MIN_ENCODER_SIDE || image.width() < MIN_ENCODER_SIDE {
        return Err(RasrError::InvalidInput(format!(
            "encoder input must be at least {MIN_ENCODER_SIDE}x{MIN_ENCODER_SIDE}, got {}x{}",
            image.height(),
            image.width()
        )));
    }
    Ok(())
}

type EncoderFactory = Arc<dyn Fn(&EncoderSpec) -> Result<Box<dyn ImageEncoder>> + Send + Sync>;

/// Name-keyed encoder constructors. Real vision backbones register here.
#[derive(Clone)]
pub struct EncoderRegistry {
    factories: BTreeMap<String, EncoderFactory>,
}

impl Default for EncoderRegistry {
    fn default() -> Self {
        let mut reg = Self {
            factories: BTreeMap::new(),
        };
        reg.register("toy", |spec| Ok(Box::new(ToyEncoder::new(spec.clone())?)));
        reg
    }
}

impl EncoderRegistry {
    pub fn register(
        &mut self,
        name: &str,
        factory: impl Fn(&EncoderSpec) -> Result<Box<dyn ImageEncoder>> + Send + Sync + 'static,
    ) {
        self.factories.insert(name.to_string(), Arc::new(factory));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, spec: &EncoderSpec) -> Result<Box<dyn ImageEncoder>> {
        let factory = self
            .factories
            .get(&spec.name)
            .ok_or_else(|| RasrError::UnknownEncoder(spec.name.clone()))?;
        factory(spec)
    }
}

/// Encodes one image with an encoder from the default registry.
pub fn encode(image: &Image, spec: &EncoderSpec) -> Result<Embedding> {
    EncoderRegistry::default().build(spec)?.encode(image)
}
