#![allow(dead_code)]

use tlq_core::model::{Activation, CalibSet, LayerSpec, LayerStack, Modality};
use tlq_core::rng::{Distribution, Rng};
use tlq_core::{CalibSet64, LayerStack64, Tensor64};

/// `blocks` × (rmsnorm → linear → relu) with two outlier channels per norm.
pub fn stack(seed: u64, blocks: usize, channels: usize) -> LayerStack64 {
    let mut rng = Rng::new(seed);
    let outliers = rng.sample_indices(channels, 2);
    let mut layers = Vec::new();
    for b in 0..blocks {
        let gain = (0..channels)
            .map(|j| rng.uniform(0.8, 1.2) * if outliers.contains(&j) { 30.0 } else { 1.0 })
            .collect();
        let w: Tensor64 = rng
            .tensor(
                vec![channels, channels],
                Distribution::Normal {
                    mean: 0.0,
                    std: 1.0 / (channels as f64).sqrt(),
                },
            )
            .unwrap();
        let bias = (0..channels).map(|_| rng.normal(0.0, 0.1)).collect();
        layers.push(LayerSpec::rmsnorm(format!("norm{b}"), gain, 1e-6).unwrap());
        layers.push(LayerSpec::linear(format!("fc{b}"), w, bias).unwrap());
        layers.push(LayerSpec::act(format!("act{b}"), Activation::Relu));
    }
    LayerStack::new(channels, layers).unwrap()
}

/// Gaussian calibration set whose first quarter of positions is tagged visual.
pub fn calib(seed: u64, batch: usize, tokens: usize, channels: usize) -> CalibSet64 {
    let mut rng = Rng::with_stream(seed, 9);
    let data = rng
        .tensor(
            vec![batch, tokens, channels],
            Distribution::Normal { mean: 0.0, std: 1.0 },
        )
        .unwrap();
    let modality = (0..batch * tokens)
        .map(|i| {
            if i % tokens < tokens / 4 {
                Modality::Visual
            } else {
                Modality::Text
            }
        })
        .collect();
    CalibSet::new(data, modality).unwrap()
}
