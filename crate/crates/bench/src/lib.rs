//! Fixtures shared by the benchmarks.

use rasr_core::generator::{init_generator, GeneratorConfig, GeneratorState};
use rasr_core::toydata::texture;
use rasr_core::Image;

/// Default-width generator with the given seed.
pub fn generator(seed: u64) -> GeneratorState {
    init_generator(GeneratorConfig {
        seed,
        ..Default::default()
    })
    .expect("default generator config is valid")
}

/// Textured image of category `category`.
pub fn image(category: usize, size: usize, seed: u64) -> Image {
    texture(category, size, seed)
}
