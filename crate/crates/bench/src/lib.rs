//! Shared fixtures for the kernel benchmarks.

use std::sync::Arc;

use stden::data::{random_network, simulate, Dataset, SynthConfig};
use stden::model::Batch;
use stden::{Architecture, Model, ModelConfig, RoadNetwork};

/// Default-sized synthetic network, its dataset and one training batch.
pub struct Fixture {
    pub net: Arc<RoadNetwork>,
    pub data: Dataset,
    pub batch: Batch,
}

impl Fixture {
    pub fn new(batch_size: usize) -> Self {
        let cfg = SynthConfig { steps: 2 * 288, ..SynthConfig::default() };
        let net = Arc::new(random_network(&cfg).expect("network"));
        let sim = simulate(&net, &cfg).expect("simulation");
        let data = Dataset::window_and_split(sim.flows, 12, 12).expect("dataset");
        let starts: Vec<usize> = (0..batch_size).collect();
        let batch = data.batch(&starts).expect("batch");
        Self { net, data, batch }
    }

    pub fn model(&self, architecture: Architecture) -> Model {
        let cfg = ModelConfig { architecture, ..ModelConfig::default() };
        Model::new(cfg, Arc::clone(&self.net), *self.data.normalizer(), 0).expect("model")
    }
}
