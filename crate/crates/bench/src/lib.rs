//! Shared fixtures for the criterion benchmarks.

use sdconet::data::synth_scene;
use sdconet::{ModelConfig, Sample, SceneSpec, TrainConfig, Trainer};

/// A freshly initialised trainer for `config`.
pub fn trainer(config: &ModelConfig) -> Trainer {
    Trainer::new(config, TrainConfig::default()).expect("valid config")
}

/// One synthetic scene with a square HR canvas of `side` pixels.
pub fn scene(side: usize) -> Sample {
    let spec = SceneSpec {
        canvas: (side, side),
        ..SceneSpec::default()
    };
    synth_scene(&spec, 0).expect("valid scene")
}

/// A dense cost matrix with no exploitable structure.
pub fn cost_matrix(rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|i| (0..cols).map(|j| ((i * 7919 + j * 104_729) % 1009) as f64 / 1009.0).collect())
        .collect()
}
