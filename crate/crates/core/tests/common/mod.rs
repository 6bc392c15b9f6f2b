#![allow(dead_code)]

use pedcast_core::models::{ModelConfig, ModelKind};
use pedcast_core::seqdata::{windows_by_video, GapPolicy, ObservationWindow, WindowSpec};
use pedcast_core::synth::{generate, ScenarioConfig};

/// Windows cut from a small seeded synthetic corpus, in video order.
pub fn synth_windows(seed: u64, tracks: usize, obs: usize, pred: usize, stride: usize) -> Vec<ObservationWindow> {
    let corpus = generate(&ScenarioConfig {
        seed,
        num_tracks: tracks,
        ..ScenarioConfig::default()
    })
    .unwrap();
    let spec = WindowSpec::new(obs, pred, stride).unwrap();
    windows_by_video(&corpus.perturbed, &spec, GapPolicy::Split)
        .unwrap()
        .into_values()
        .flatten()
        .collect()
}

pub fn downsized(kind: ModelKind, obs: usize, pred: usize, dim: usize) -> ModelConfig {
    let mut cfg = ModelConfig::default_for(kind, obs, pred);
    cfg.embed_dim = dim;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.ff_dim = 2 * dim;
    cfg
}
