//! Fixtures shared by the kernel and model benchmarks.

use vcr_core::data::{synthetic, Dataset, SyntheticSpec};
use vcr_core::network::{Model, NetworkSpec};
use vcr_core::{rng, Tensor};

/// Uniform `[-1, 1)` tensor from a fixed stream.
pub fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng::seeded(seed))
}

pub fn model(preset: &str) -> Model {
    Model::new(&NetworkSpec::preset(preset).expect("known preset"), 0).expect("preset builds")
}

/// 64 synthetic 16×16 images.
pub fn images() -> Dataset {
    synthetic(
        &SyntheticSpec {
            count: 64,
            ..SyntheticSpec::default()
        },
        0,
    )
    .expect("valid spec")
}
