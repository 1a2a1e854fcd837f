//! Fixtures shared by the criterion benches.

use attrfuse_core::model::{Model, ModelConfig};
use attrfuse_core::train::{gen_synthetic, SceneSample};

pub use attrfuse_core;

/// A freshly initialised model and one synthetic scene of side `size`.
pub struct Fixture {
    pub model: Model,
    pub sample: SceneSample,
}

impl Fixture {
    pub fn new(size: usize, stages: usize, channels: usize) -> Self {
        let config = ModelConfig { stages, channels, seg_classes: 4, seg_channels: 16 };
        let model = Model::init(config, 0).expect("valid config");
        let sample = gen_synthetic(1, size, 4, 0).expect("valid size").remove(0);
        Fixture { model, sample }
    }
}
