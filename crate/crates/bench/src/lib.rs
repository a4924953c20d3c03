//! Shared fixtures for the criterion benches.

use sotta_core::harness::{pretrain, RunConfig};
use sotta_core::seed::RngTree;
use sotta_core::stream::{build_stream, Scenario, StreamSample, World};
use sotta_core::{Network, Tensor};

/// A pretrained source model with a short pretraining schedule.
pub struct Fixture {
    pub config: RunConfig,
    pub net: Network,
    pub world: World,
}

impl Fixture {
    pub fn new() -> Self {
        let mut config = RunConfig::default();
        config.pretrain.epochs = 5;
        config.stream.benign_count = 500;
        let (net, _) = pretrain(&config).expect("default config pretrains");
        let world = World::new(config.world.clone()).expect("default world");
        Self { config, net, world }
    }

    /// The shuffled stream for `scenario` and `seed`.
    pub fn stream(&self, scenario: Scenario, seed: u64) -> Vec<StreamSample> {
        build_stream(
            &self.world,
            &self.config.scenario_config(scenario),
            &self.net,
            &RngTree::new(seed),
        )
        .expect("stream builds")
        .samples
    }

    /// The first `rows` stream samples stacked into one batch.
    pub fn batch(&self, rows: usize) -> Tensor {
        let samples = self.stream(Scenario::Noise, 0);
        let rows: Vec<&Tensor> = samples.iter().take(rows).map(|s| &s.features).collect();
        Tensor::vstack(&rows).expect("rows share a width")
    }
}

impl Default for Fixture {
    fn default() -> Self {
        Self::new()
    }
}
