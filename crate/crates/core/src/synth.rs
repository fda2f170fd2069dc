//! Seeded synthetic models with Laplace-distributed weights, used as test
//! fixtures and by the `synth` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OpqError, Result};
use crate::tensor::{Layer, LayerSpec, ModelTensors};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthLayer {
    pub name: String,
    pub shape: Vec<usize>,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub layers: Vec<SynthLayer>,
    pub seed: u64,
}

impl SynthConfig {
    /// `taus.len()` layers named `layer{i}`, each shaped `[channels, count / channels]`.
    pub fn uniform(taus: &[f64], count: usize, channels: usize, seed: u64) -> Result<Self> {
        if channels == 0 || !count.is_multiple_of(channels) {
            return Err(OpqError::InvalidArgument(format!(
                "weights per layer ({count}) must be a positive multiple of channels ({channels})"
            )));
        }
        Ok(SynthConfig {
            layers: taus
                .iter()
                .enumerate()
                .map(|(i, &tau)| SynthLayer {
                    name: format!("layer{i}"),
                    shape: vec![channels, count / channels],
                    tau,
                })
                .collect(),
            seed,
        })
    }
}

fn fill_laplace(rng: &mut ChaCha8Rng, tau: f64, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let magnitude = -tau * (1.0 - rng.gen::<f64>()).ln();
            let v = if rng.gen::<bool>() { magnitude } else { -magnitude };
            v as f32
        })
        .collect()
}

/// `n` draws from Laplace(0, tau) with a fixed seed.
pub fn sample_laplace(tau: f64, n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fill_laplace(&mut rng, tau, n)
}

/// Build the model described by `config`. Layer `i` draws from ChaCha stream `i`,
/// so the result does not depend on thread scheduling.
pub fn synth_model(config: &SynthConfig) -> Result<ModelTensors> {
    if let Some(bad) = config.layers.iter().find(|l| !(l.tau > 0.0 && l.tau.is_finite())) {
        return Err(OpqError::InvalidArgument(format!(
            "layer {}: tau must be positive, got {}",
            bad.name, bad.tau
        )));
    }
    let layers = config
        .layers
        .par_iter()
        .enumerate()
        .map(|(i, l)| {
            let spec = LayerSpec::new(l.name.clone(), l.shape.clone(), 0)?;
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let values = fill_laplace(&mut rng, l.tau, spec.count());
            Ok(Layer { spec, values })
        })
        .collect::<Result<Vec<_>>>()?;
    ModelTensors::new(layers)
}
