//! Shared fixtures for the criterion benches.

use ommx_core::toy::Dataset;
use ommx_core::train::{prepare_examples, TaskData};
use ommx_core::{Model, ModelConfig};

/// Desk-scale model with default settings.
pub fn desk_model(seed: u64) -> Model<f32> {
    Model::init(ModelConfig::default(), seed).expect("default config is valid")
}

/// Tokenized toy examples for both tasks.
pub fn toy_batch(model: &Model<f32>, count: usize, seed: u64) -> TaskData {
    let data = Dataset::generate(seed, count);
    prepare_examples(model, &data, false).expect("toy data fits the model")
}
