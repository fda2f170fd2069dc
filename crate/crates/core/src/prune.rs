//! Unified layer-wise magnitude pruning.
//!
//! Minimizing the total squared magnitude of removed weights subject to a
//! global pruning rate gives one threshold `beta = sqrt(lambda)` shared by
//! every layer. Under per-layer Laplace fits the rate constraint reads
//!
//! ```text
//! (1/N) * sum_i N_i * (1 - exp(-beta / tau_i)) = p*
//! ```
//!
//! which is solved for `beta` by safeguarded Newton-Raphson.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{OpqError, Result};
use crate::laplace::{laplace_tail_mass, LaplaceFitResult};
use crate::tensor::{LayerSpec, ModelTensors};

pub const DEFAULT_RATE_TOL: f64 = 1e-10;
const MAX_ITERATIONS: usize = 100;

/// Binary keep-mask of one layer: `true` = kept, `false` = pruned.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Mask(Vec<bool>);

impl Mask {
    pub fn new(bits: Vec<bool>) -> Self {
        Mask(bits)
    }

    pub fn ones(len: usize) -> Self {
        Mask(vec![true; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn get(&self, k: usize) -> bool {
        self.0[k]
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn count_kept(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn count_pruned(&self) -> usize {
        self.len() - self.count_kept()
    }
}

/// Result of the pruning allocation for a whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct PruningAllocation {
    pub layers: Vec<String>,
    pub tau: Vec<f64>,
    pub lambda: f64,
    /// Per-layer thresholds; all equal to `sqrt(lambda)`.
    pub beta: Vec<f64>,
    pub p_target: f64,
    /// Laplace-model rate at the solved threshold.
    pub p_model: f64,
    /// Fraction of weights actually removed by the masks.
    pub p_empirical: f64,
    pub tolerance: f64,
    pub layer_rate_model: Vec<f64>,
    pub layer_rate_empirical: Vec<f64>,
    pub masks: Vec<Mask>,
}

impl PruningAllocation {
    pub fn threshold(&self) -> f64 {
        self.lambda.sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.layers.len();
        let inv = |m: String| Err(OpqError::Invariant(m));
        if [
            self.tau.len(),
            self.beta.len(),
            self.layer_rate_model.len(),
            self.layer_rate_empirical.len(),
            self.masks.len(),
        ]
        .iter()
        .any(|&n| n != l)
        {
            return inv("pruning allocation: per-layer arrays disagree in length".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return inv(format!(
                "pruning allocation: lambda {} is not a finite nonnegative value",
                self.lambda
            ));
        }
        let root = self.lambda.sqrt();
        if let Some(b) = self.beta.iter().find(|&&b| (b - root).abs() > 1e-12 * root.max(1e-300)) {
            return inv(format!("pruning allocation: beta {b} differs from sqrt(lambda) {root}"));
        }
        if !(0.0..1.0).contains(&self.p_target) {
            return inv(format!("pruning allocation: p_target {} outside [0, 1)", self.p_target));
        }
        if (self.p_model - self.p_target).abs() > self.tolerance {
            return inv(format!(
                "pruning allocation: model rate {} misses target {} by more than {}",
                self.p_model, self.p_target, self.tolerance
            ));
        }
        let total: usize = self.masks.iter().map(Mask::len).sum();
        let pruned: usize = self.masks.iter().map(Mask::count_pruned).sum();
        if total == 0 || self.p_empirical != pruned as f64 / total as f64 {
            return inv("pruning allocation: p_empirical disagrees with the masks".into());
        }
        let in_unit = |v: &f64| (0.0..=1.0).contains(v);
        if !self.tau.iter().all(|&t| t > 0.0)
            || !self.layer_rate_model.iter().all(in_unit)
            || !self.layer_rate_empirical.iter().all(in_unit)
        {
            return inv("pruning allocation: tau or per-layer rates out of range".into());
        }
        Ok(())
    }
}

/// Laplace-model pruning rate of the whole model for a common threshold `beta`.
pub fn model_prune_rate(fits: &[LaplaceFitResult], specs: &[LayerSpec], beta: f64) -> f64 {
    let (rate, _) = rate_and_slope(fits, specs, beta);
    rate
}

fn rate_and_slope(fits: &[LaplaceFitResult], specs: &[LayerSpec], u: f64) -> (f64, f64) {
    debug_assert_eq!(fits.len(), specs.len());
    let total: f64 = specs.iter().map(|s| s.count() as f64).sum();
    let mut rate = 0.0;
    let mut slope = 0.0;
    for (fit, spec) in fits.iter().zip(specs) {
        let n = spec.count() as f64;
        let tail = laplace_tail_mass(fit.tau, u);
        rate += n * (1.0 - tail);
        slope += n / fit.tau * tail;
    }
    (rate / total, slope / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdSolution {
    pub lambda: f64,
    pub beta: f64,
    /// `model_prune_rate(beta) - p_target`.
    pub residual: f64,
    pub iterations: usize,
}

/// Solve the rate constraint for the common threshold.
///
/// Newton-Raphson in `u = sqrt(lambda)`, falling back to bisection whenever a
/// step leaves the current bracket.
pub fn solve_threshold(
    fits: &[LaplaceFitResult],
    specs: &[LayerSpec],
    p_target: f64,
    tol: f64,
) -> Result<ThresholdSolution> {
    if !(p_target > 0.0 && p_target < 1.0) {
        return Err(OpqError::InvalidArgument(format!(
            "target pruning rate {p_target} must lie in (0, 1)"
        )));
    }
    if !(tol > 0.0) {
        return Err(OpqError::InvalidArgument(format!("tolerance {tol} must be positive")));
    }
    if fits.is_empty() || fits.len() != specs.len() {
        return Err(OpqError::InvalidArgument(format!(
            "{} fits for {} layers",
            fits.len(),
            specs.len()
        )));
    }
    if let Some(f) = fits.iter().find(|f| !(f.tau > 0.0 && f.tau.is_finite())) {
        return Err(OpqError::InvalidArgument(format!("tau {} must be positive", f.tau)));
    }

    // Every layer alone would need tau_i * ln(1/(1-p)); the common root lies between
    // the smallest and largest of these.
    let log_keep = -(-p_target).ln_1p();
    let tau_min = fits.iter().map(|f| f.tau).fold(f64::INFINITY, f64::min);
    let tau_max = fits.iter().map(|f| f.tau).fold(0.0, f64::max);
    let (mut lo, mut hi) = (tau_min * log_keep, tau_max * log_keep);

    let total: f64 = specs.iter().map(|s| s.count() as f64).sum();
    let mean_tau: f64 = fits
        .iter()
        .zip(specs)
        .map(|(f, s)| f.tau * s.count() as f64)
        .sum::<f64>()
        / total;
    let mut u = mean_tau * log_keep;

    for iteration in 1..=MAX_ITERATIONS {
        let (rate, slope) = rate_and_slope(fits, specs, u);
        let residual = rate - p_target;
        if residual.abs() <= tol {
            return Ok(ThresholdSolution {
                lambda: u * u,
                beta: u,
                residual,
                iterations: iteration,
            });
        }
        if residual < 0.0 {
            lo = lo.max(u);
        } else {
            hi = hi.min(u);
        }
        let newton = u - residual / slope;
        u = if slope > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    let residual = model_prune_rate(fits, specs, u) - p_target;
    Err(OpqError::NoConvergence {
        iterations: MAX_ITERATIONS,
        residual,
    })
}

/// Keep-masks for threshold `beta` (`|w| <= beta` is pruned), with per-layer
/// and global empirical pruning rates.
pub fn build_masks(model: &ModelTensors, beta: f64) -> (Vec<Mask>, Vec<f64>, f64) {
    let masks: Vec<Mask> = model
        .layers()
        .par_iter()
        .map(|l| {
            // compared at storage precision so a weight equal to the threshold is pruned
            let t = beta as f32;
            Mask(l.values.iter().map(|&v| v.abs() > t).collect())
        })
        .collect();
    let rates = masks.iter().map(|m| m.count_pruned() as f64 / m.len() as f64).collect();
    let pruned: usize = masks.iter().map(Mask::count_pruned).sum();
    let p_empirical = pruned as f64 / model.total_count() as f64;
    (masks, rates, p_empirical)
}

/// Lower incomplete gamma function `gamma(3, x) = integral_0^x t^2 e^{-t} dt`.
pub(crate) fn lower_gamma3(x: f64) -> f64 {
    if x < 1.0 {
        // x^3 * sum_k (-x)^k / (k! (k + 3))
        let mut term = 1.0;
        let mut sum = 1.0 / 3.0;
        for k in 1..40 {
            term *= -x / k as f64;
            let add = term / (k as f64 + 3.0);
            sum += add;
            if add.abs() < 1e-18 * sum.abs() {
                break;
            }
        }
        x * x * x * sum
    } else {
        2.0 - (-x).exp() * (x * x + 2.0 * x + 2.0)
    }
}

/// Laplace-model pruning error of one layer: `2 N_i * integral_0^beta x^2 f_i(x) dx`.
pub fn model_pruning_error(count: usize, tau: f64, beta: f64) -> f64 {
    count as f64 * tau * tau * lower_gamma3(beta / tau)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruningError {
    /// Per layer: sum of squared removed weights.
    pub real: Vec<f64>,
    /// Per layer: closed-form Laplace estimate of the same quantity.
    pub model: Vec<f64>,
    /// `(1/N) * sum_i real_i`.
    pub real_total: f64,
    pub model_total: f64,
}

pub fn pruning_error(model: &ModelTensors, fits: &[LaplaceFitResult], beta: f64) -> PruningError {
    let real: Vec<f64> = model
        .layers()
        .par_iter()
        .map(|l| {
            let t = beta as f32;
            l.values
                .iter()
                .filter(|v| v.abs() <= t)
                .map(|&v| (v as f64) * (v as f64))
                .sum()
        })
        .collect();
    let analytic: Vec<f64> = model
        .layers()
        .iter()
        .zip(fits)
        .map(|(l, f)| model_pruning_error(l.spec.count(), f.tau, beta))
        .collect();
    let n = model.total_count() as f64;
    PruningError {
        real_total: real.iter().sum::<f64>() / n,
        model_total: analytic.iter().sum::<f64>() / n,
        real,
        model: analytic,
    }
}

/// Solve the threshold and build the masks in one step.
pub fn allocate_pruning(
    model: &ModelTensors,
    fits: &[LaplaceFitResult],
    p_target: f64,
    tol: f64,
) -> Result<PruningAllocation> {
    let specs = model.specs();
    let solution = solve_threshold(fits, &specs, p_target, tol)?;
    let (masks, layer_rate_empirical, p_empirical) = build_masks(model, solution.beta);
    let allocation = PruningAllocation {
        layers: specs.iter().map(|s| s.name.clone()).collect(),
        tau: fits.iter().map(|f| f.tau).collect(),
        lambda: solution.lambda,
        beta: vec![solution.beta; specs.len()],
        p_target,
        p_model: model_prune_rate(fits, &specs, solution.beta),
        p_empirical,
        tolerance: tol,
        layer_rate_model: fits
            .iter()
            .map(|f| 1.0 - laplace_tail_mass(f.tau, solution.beta))
            .collect(),
        layer_rate_empirical,
        masks,
    };
    allocation.validate()?;
    Ok(allocation)
}

/// CSV columns: `layer,tau,beta,p_model,p_empirical,real_error,model_error`.
pub fn write_pruning_csv<W: Write>(out: W, allocation: &PruningAllocation, errors: &PruningError) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "layer",
        "tau",
        "beta",
        "p_model",
        "p_empirical",
        "real_error",
        "model_error",
    ])?;
    for i in 0..allocation.layers.len() {
        w.write_record([
            allocation.layers[i].clone(),
            format!("{:e}", allocation.tau[i]),
            format!("{:e}", allocation.beta[i]),
            format!("{:.10}", allocation.layer_rate_model[i]),
            format!("{:.10}", allocation.layer_rate_empirical[i]),
            format!("{:e}", errors.real[i]),
            format!("{:e}", errors.model[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_pruning_csv(path: &Path, allocation: &PruningAllocation, errors: &PruningError) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| OpqError::io(path, e))?;
    write_pruning_csv(file, allocation, errors).map_err(|e| OpqError::io(path, e.into()))
}
