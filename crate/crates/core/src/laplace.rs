//! Zero-centered Laplace fits of per-layer weight distributions.
//!
//! The scale `tau` is fitted by Levenberg-Marquardt least squares of the
//! folded model CDF `1 - exp(-x / tau)` against the empirical CDF of `|w|`,
//! sampled on a grid of magnitude quantiles and started from the maximum
//! likelihood estimate `mean(|w|)`.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OpqError, Result};
use crate::tensor::ModelTensors;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Number of quantile abscissae.
    pub grid_size: usize,
    pub initial_damping: f64,
    pub max_iterations: usize,
    /// Stop once `|step| / tau` falls below this.
    pub rel_tol: f64,
    /// `tau` is confined to `[tau0 / bound_factor, tau0 * bound_factor]`.
    pub bound_factor: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            grid_size: 256,
            initial_damping: 1e-3,
            max_iterations: 100,
            rel_tol: 1e-8,
            bound_factor: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaplaceFitResult {
    pub tau: f64,
    /// Root-mean-square CDF residual at the solution.
    pub rmse: f64,
    pub sample_points: usize,
    /// Maximum likelihood starting value.
    pub tau_init: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit; `tau` is then the best iterate.
    pub converged: bool,
}

impl LaplaceFitResult {
    /// A fit carrying only a known scale, for evaluating the model at a given `tau`.
    pub fn from_tau(tau: f64) -> Self {
        LaplaceFitResult {
            tau,
            rmse: 0.0,
            sample_points: 0,
            tau_init: tau,
            iterations: 0,
            converged: true,
        }
    }
}

/// Probability under Laplace(0, tau) that `|w| > beta`.
pub fn laplace_tail_mass(tau: f64, beta: f64) -> f64 {
    debug_assert!(tau > 0.0, "tau must be positive");
    debug_assert!(beta >= 0.0, "beta must be nonnegative");
    (-beta / tau).exp()
}

/// Empirical CDF of `|values|` evaluated at each grid point.
pub fn empirical_folded_cdf(values: &[f32], grid: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(OpqError::InvalidArgument("empirical CDF of empty input".into()));
    }
    if grid.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(OpqError::InvalidArgument("CDF grid must be sorted ascending".into()));
    }
    let mags = sorted_magnitudes(values);
    Ok(folded_cdf_sorted(&mags, grid))
}

fn sorted_magnitudes(values: &[f32]) -> Vec<f64> {
    let mut mags: Vec<f64> = values.iter().map(|v| v.abs() as f64).collect();
    mags.sort_unstable_by(f64::total_cmp);
    mags
}

fn folded_cdf_sorted(mags: &[f64], grid: &[f64]) -> Vec<f64> {
    let n = mags.len() as f64;
    grid.iter()
        .map(|&x| mags.partition_point(|&m| m <= x) as f64 / n)
        .collect()
}

/// Quantiles of the nonzero sorted magnitudes at probabilities `(k + 0.5) / size`.
fn quantile_grid(mags: &[f64], size: usize) -> Vec<f64> {
    let nonzero = &mags[mags.partition_point(|&m| m == 0.0)..];
    let m = nonzero.len();
    (0..size)
        .map(|k| {
            let q = (k as f64 + 0.5) / size as f64;
            nonzero[((q * m as f64) as usize).min(m - 1)]
        })
        .collect()
}

/// Fit the Laplace scale of one layer.
pub fn fit_laplace(values: &[f32], config: &FitConfig) -> Result<LaplaceFitResult> {
    if values.is_empty() || values.iter().all(|&v| v == 0.0) {
        return Err(OpqError::DegenerateLayer {
            layer: "<unnamed>".into(),
        });
    }
    if config.grid_size == 0 || config.bound_factor < 1.0 {
        return Err(OpqError::InvalidArgument(format!("bad fit config {config:?}")));
    }
    let mags = sorted_magnitudes(values);
    let tau_init = mags.iter().sum::<f64>() / mags.len() as f64;
    let grid = quantile_grid(&mags, config.grid_size);
    let target = folded_cdf_sorted(&mags, &grid);

    let lo = tau_init / config.bound_factor;
    let hi = tau_init * config.bound_factor;
    let cost = |tau: f64| -> f64 {
        grid.iter()
            .zip(&target)
            .map(|(&x, &g)| {
                let r = g - (1.0 - (-x / tau).exp());
                r * r
            })
            .sum()
    };

    let mut tau = tau_init.clamp(lo, hi);
    let mut current = cost(tau);
    let mut damping = config.initial_damping;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iterations {
        iterations += 1;
        // r_g = G_g - (1 - e^{-x/tau}),  dr/dtau = e^{-x/tau} x / tau^2
        let (mut gradient, mut hessian) = (0.0, 0.0);
        for (&x, &g) in grid.iter().zip(&target) {
            let e = (-x / tau).exp();
            let r = g - (1.0 - e);
            let j = e * x / (tau * tau);
            gradient += j * r;
            hessian += j * j;
        }
        if hessian == 0.0 {
            converged = true;
            break;
        }
        let trial = (tau - gradient / (hessian * (1.0 + damping))).clamp(lo, hi);
        let step = trial - tau;
        if step.abs() / tau < config.rel_tol {
            converged = true;
            break;
        }
        let trial_cost = cost(trial);
        if trial_cost < current {
            tau = trial;
            current = trial_cost;
            damping /= 10.0;
        } else {
            damping *= 10.0;
        }
    }

    Ok(LaplaceFitResult {
        tau,
        rmse: (current / grid.len() as f64).sqrt(),
        sample_points: grid.len(),
        tau_init,
        iterations,
        converged,
    })
}

/// Fit every layer of `model` (in parallel); degenerate layers abort with their name.
pub fn fit_model(model: &ModelTensors, config: &FitConfig) -> Result<Vec<LaplaceFitResult>> {
    model
        .layers()
        .par_iter()
        .map(|layer| {
            let fit = fit_laplace(&layer.values, config).map_err(|e| match e {
                OpqError::DegenerateLayer { .. } => OpqError::DegenerateLayer {
                    layer: layer.spec.name.clone(),
                },
                other => other,
            })?;
            if !fit.converged {
                log::warn!(
                    "laplace fit of {} stopped at the iteration cap (tau {:e})",
                    layer.spec.name,
                    fit.tau
                );
            }
            Ok(fit)
        })
        .collect()
}

/// CSV columns: `layer,tau,rmse,sample_points`.
pub fn write_fits_csv<W: Write>(out: W, model: &ModelTensors, fits: &[LaplaceFitResult]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "tau", "rmse", "sample_points"])?;
    for (layer, fit) in model.layers().iter().zip(fits) {
        w.write_record([
            layer.spec.name.clone(),
            format!("{:e}", fit.tau),
            format!("{:e}", fit.rmse),
            fit.sample_points.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_fits_csv(path: &Path, model: &ModelTensors, fits: &[LaplaceFitResult]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| OpqError::io(path, e))?;
    write_fits_csv(file, model, fits).map_err(|e| OpqError::io(path, e.into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::sample_laplace;

    #[test]
    fn folded_cdf_direct_count() {
        let g = empirical_folded_cdf(&[-1.0, 2.0, -3.0], &[0.5, 2.5]).unwrap();
        assert_eq!(g[0], 0.0);
        assert!((g[1] - 2.0 / 3.0).abs() < 1e-12);
        let top = empirical_folded_cdf(&[-1.0, 2.0, -3.0], &[3.0, 10.0]).unwrap();
        assert_eq!(top, vec![1.0, 1.0]);
        assert_eq!(empirical_folded_cdf(&[0.0, 0.0], &[0.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn folded_cdf_errors() {
        assert!(empirical_folded_cdf(&[], &[0.0]).is_err());
        assert!(empirical_folded_cdf(&[1.0], &[1.0, 0.5]).is_err());
    }

    #[test]
    fn tail_mass_values() {
        assert_eq!(laplace_tail_mass(0.3, 0.0), 1.0);
        assert!((laplace_tail_mass(0.7, 0.7 * 2f64.ln()) - 0.5).abs() < 1e-15);
        // e^{-2.303} = 0.09998...
        assert!((laplace_tail_mass(0.1, 0.2303) - 0.1).abs() < 1e-4);
    }

    #[test]
    fn recovers_scale_from_large_sample() {
        let values = sample_laplace(0.05, 1_000_000, 1234);
        let fit = fit_laplace(&values, &FitConfig::default()).unwrap();
        assert!(fit.converged);
        assert!((0.049..=0.051).contains(&fit.tau), "tau {}", fit.tau);
        assert!(fit.rmse < 0.01);
        assert_eq!(fit.sample_points, 256);
    }

    #[test]
    fn two_point_data_stays_in_bounds() {
        let c = 0.25f32;
        let values: Vec<f32> = (0..1000).map(|k| if k % 2 == 0 { c } else { -c }).collect();
        let fit = fit_laplace(&values, &FitConfig::default()).unwrap();
        assert!((fit.tau_init - c as f64).abs() < 1e-12);
        assert!(fit.tau >= 0.5 * c as f64 - 1e-12 && fit.tau <= 2.0 * c as f64 + 1e-12);
        assert!(fit.rmse > 0.0 && fit.rmse <= 1.0);
    }

    #[test]
    fn all_zero_layer_is_degenerate() {
        let err = fit_laplace(&[0.0; 16], &FitConfig::default()).unwrap_err();
        assert!(err.to_string().starts_with("degenerate layer: zero weights"));
    }

    #[test]
    fn scale_equivariant() {
        let values = sample_laplace(0.02, 50_000, 9);
        let base = fit_laplace(&values, &FitConfig::default()).unwrap();
        for c in [0.125f32, 3.0, 40.0] {
            let scaled: Vec<f32> = values.iter().map(|v| v * c).collect();
            let fit = fit_laplace(&scaled, &FitConfig::default()).unwrap();
            let rel = (fit.tau - c as f64 * base.tau).abs() / (c as f64 * base.tau);
            assert!(rel < 1e-6, "c={c} rel={rel}");
        }
    }
}
