//! Shared fixtures for the benchmarks.

use spikefed::data::{synth_generate, SynthConfig};
use spikefed::{ArchitectureSpec, Backbone, Network, Sample};

/// Default architecture over the default synthetic shape.
pub fn default_network(backbone: Backbone) -> Network {
    let cfg = SynthConfig::default();
    Network::new(ArchitectureSpec::new_default(cfg.channels, cfg.length, cfg.num_classes, backbone))
        .expect("default architecture is valid")
}

/// First `n` training samples of client 0 of the default synthetic set.
pub fn samples(n: usize) -> Vec<Sample> {
    let data = synth_generate(&SynthConfig::default(), 7).expect("default synth config is valid");
    data.dataset.clients[0].train.iter().take(n).cloned().collect()
}
