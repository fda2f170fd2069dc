//! Unified channel-wise quantization steps.
//!
//! Every channel of layer `i` shares one uniform step `delta_i`. Channel `j`
//! spans `[-alpha_ij, alpha_ij]` over its unpruned weights and so needs
//! `K_ij = round(2 alpha_ij / delta_i)` bins. Minimizing `sum_i delta_i^2 / 12`
//! subject to the model-average bin count `2^B` has the closed form
//!
//! ```text
//! S_i            = sum_j Nbar_ij * alpha_ij
//! lambda^(1/3)   = sum_i (Nbar / 12)^(1/3) * S_i^(2/3) / (2^(B-1) * Nbar)
//! delta_i        = (12 * lambda * S_i / Nbar)^(1/3)
//! ```

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{OpqError, Result};
use crate::prune::Mask;
use crate::tensor::ModelTensors;

/// Relative tolerance of the continuous bin-budget identity.
pub const BUDGET_REL_TOL: f64 = 1e-6;

/// Round half away from zero (`f64::round` semantics), the tie rule used for
/// bin counts and quantization levels alike.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Per-channel maxima over unpruned weights and unpruned counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    /// `alpha[i][j]`; 0 for a fully pruned channel.
    pub alpha: Vec<Vec<f64>>,
    /// `unpruned[i][j]` = Nbar_ij.
    pub unpruned: Vec<Vec<u64>>,
}

impl ChannelStats {
    /// `S_i = sum_j Nbar_ij * alpha_ij`.
    pub fn weighted_range(&self) -> Vec<f64> {
        self.alpha
            .iter()
            .zip(&self.unpruned)
            .map(|(a, n)| a.iter().zip(n).map(|(&a, &n)| a * n as f64).sum())
            .collect()
    }

    pub fn layer_unpruned(&self) -> Vec<u64> {
        self.unpruned.iter().map(|n| n.iter().sum()).collect()
    }

    pub fn total_unpruned(&self) -> u64 {
        self.unpruned.iter().flatten().sum()
    }
}

pub fn channel_maxima(model: &ModelTensors, masks: &[Mask]) -> Result<ChannelStats> {
    if masks.len() != model.len() {
        return Err(OpqError::InvalidArgument(format!(
            "{} masks for {} layers",
            masks.len(),
            model.len()
        )));
    }
    for (layer, mask) in model.layers().iter().zip(masks) {
        if mask.len() != layer.values.len() {
            return Err(OpqError::LengthMismatch {
                layer: layer.spec.name.clone(),
                expected: layer.values.len(),
                actual: mask.len(),
            });
        }
    }
    let (alpha, unpruned) = model
        .layers()
        .par_iter()
        .zip(masks)
        .map(|(layer, mask)| {
            let spec = &layer.spec;
            let mut alpha = vec![0.0f64; spec.channels()];
            let mut count = vec![0u64; spec.channels()];
            for (k, &v) in layer.values.iter().enumerate() {
                if mask.get(k) {
                    let j = spec.channel_of(k);
                    alpha[j] = alpha[j].max(v.abs() as f64);
                    count[j] += 1;
                }
            }
            (alpha, count)
        })
        .unzip();
    Ok(ChannelStats { alpha, unpruned })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepSolution {
    pub lambda: f64,
    /// `None` for a layer with no unpruned weights (no codebook).
    pub delta: Vec<Option<f64>>,
    /// Layers whose step exceeds twice their largest channel range, so every
    /// weight quantizes to zero.
    pub collapsed: Vec<usize>,
}

/// Closed-form Lagrange solution of the step allocation.
pub fn solve_steps(stats: &ChannelStats, b_target: f64) -> Result<StepSolution> {
    if !(b_target > 0.0 && b_target.is_finite()) {
        return Err(OpqError::InvalidArgument(format!(
            "target bitwidth {b_target} must be positive"
        )));
    }
    let ranges = stats.weighted_range();
    let total = stats.total_unpruned() as f64;
    if total == 0.0 || ranges.iter().all(|&s| s <= 0.0) {
        return Err(OpqError::AllLayersPruned);
    }
    let lambda_cbrt = ranges
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| (total / 12.0).cbrt() * s.powf(2.0 / 3.0))
        .sum::<f64>()
        / (2f64.powf(b_target - 1.0) * total);
    let lambda = lambda_cbrt.powi(3);

    let delta: Vec<Option<f64>> = ranges
        .iter()
        .map(|&s| (s > 0.0).then(|| lambda_cbrt * (12.0 * s / total).cbrt()))
        .collect();

    let collapsed: Vec<usize> = delta
        .iter()
        .zip(&stats.alpha)
        .enumerate()
        .filter_map(|(i, (d, a))| {
            let max_alpha = a.iter().copied().fold(0.0, f64::max);
            d.filter(|&d| d > 2.0 * max_alpha).map(|_| i)
        })
        .collect();
    for &i in &collapsed {
        log::warn!("layer {i}: step exceeds twice the largest channel range; the layer quantizes to zero");
    }
    Ok(StepSolution {
        lambda,
        delta,
        collapsed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinCounts {
    pub k: Vec<Vec<u64>>,
    /// `log2` of the average unrounded bin count `2 alpha / delta`.
    pub b_effective_continuous: f64,
    /// `log2` of the average rounded bin count, each stored channel counted at least once.
    pub b_effective_rounded: f64,
}

fn bins(alpha: f64, delta: Option<f64>) -> u64 {
    match delta {
        Some(d) if alpha > 0.0 => round_half_away(2.0 * alpha / d) as u64,
        _ => 0,
    }
}

pub fn bin_counts(stats: &ChannelStats, delta: &[Option<f64>]) -> BinCounts {
    let k: Vec<Vec<u64>> = stats
        .alpha
        .iter()
        .zip(delta)
        .map(|(a, &d)| a.iter().map(|&a| bins(a, d)).collect())
        .collect();
    let total = stats.total_unpruned() as f64;
    let mut continuous = 0.0;
    let mut rounded = 0.0;
    for (i, layer_k) in k.iter().enumerate() {
        for (j, &kij) in layer_k.iter().enumerate() {
            let n = stats.unpruned[i][j] as f64;
            if n == 0.0 {
                continue;
            }
            if let Some(d) = delta[i] {
                continuous += n * 2.0 * stats.alpha[i][j] / d;
            }
            rounded += n * kij.max(1) as f64;
        }
    }
    BinCounts {
        k,
        b_effective_continuous: (continuous / total).log2(),
        b_effective_rounded: (rounded / total).log2(),
    }
}

/// Analytic quantization MSE `sum_i delta_i^2 / 12`.
pub fn quant_error_estimate(delta: &[Option<f64>]) -> f64 {
    delta.iter().flatten().map(|d| d * d / 12.0).sum()
}

/// Continuous model-average bin count `(1/Nbar) sum_ij Nbar_ij 2 alpha_ij / delta_i`.
pub fn average_bins(stats: &ChannelStats, delta: &[Option<f64>]) -> f64 {
    let ranges = stats.weighted_range();
    ranges
        .iter()
        .zip(delta)
        .filter_map(|(&s, d)| d.map(|d| 2.0 * s / d))
        .sum::<f64>()
        / stats.total_unpruned() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantAllocation {
    pub layers: Vec<String>,
    pub b_target: f64,
    pub lambda: f64,
    pub delta: Vec<Option<f64>>,
    pub alpha: Vec<Vec<f64>>,
    pub k: Vec<Vec<u64>>,
    pub unpruned: Vec<Vec<u64>>,
    pub b_effective_continuous: f64,
    pub b_effective_rounded: f64,
}

impl QuantAllocation {
    pub fn stats(&self) -> ChannelStats {
        ChannelStats {
            alpha: self.alpha.clone(),
            unpruned: self.unpruned.clone(),
        }
    }

    pub fn total_unpruned(&self) -> u64 {
        self.unpruned.iter().flatten().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let inv = |m: String| Err(OpqError::Invariant(format!("quant allocation: {m}")));
        let l = self.layers.len();
        if self.delta.len() != l || self.alpha.len() != l || self.k.len() != l || self.unpruned.len() != l {
            return inv("per-layer arrays disagree in length".into());
        }
        if !(self.b_target > 0.0) || !(self.lambda > 0.0) {
            return inv(format!(
                "b_target {} / lambda {} must be positive",
                self.b_target, self.lambda
            ));
        }
        for i in 0..l {
            let c = self.alpha[i].len();
            if self.k[i].len() != c || self.unpruned[i].len() != c {
                return inv(format!("layer {} channel arrays disagree", self.layers[i]));
            }
            let kept: u64 = self.unpruned[i].iter().sum();
            match self.delta[i] {
                Some(d) if !(d > 0.0 && d.is_finite()) => return inv(format!("layer {} has step {d}", self.layers[i])),
                None if kept > 0 => return inv(format!("layer {} has unpruned weights but no step", self.layers[i])),
                _ => {}
            }
            for j in 0..c {
                let a = self.alpha[i][j];
                if !(a >= 0.0 && a.is_finite()) || (self.unpruned[i][j] == 0 && a != 0.0) {
                    return inv(format!("layer {} channel {j} range {a}", self.layers[i]));
                }
                if self.k[i][j] != bins(a, self.delta[i]) {
                    return inv(format!("layer {} channel {j} bin count", self.layers[i]));
                }
            }
        }
        if self.total_unpruned() == 0 {
            return inv("no unpruned weights".into());
        }
        let avg = average_bins(&self.stats(), &self.delta);
        let target = self.b_target.exp2();
        if ((avg - target) / target).abs() > BUDGET_REL_TOL {
            return inv(format!("average bins {avg} differ from 2^B = {target}"));
        }
        Ok(())
    }
}

/// Channel maxima, steps and bin counts for masked weights at bitwidth `b_target`.
pub fn allocate_quantization(model: &ModelTensors, masks: &[Mask], b_target: f64) -> Result<QuantAllocation> {
    let stats = channel_maxima(model, masks)?;
    let steps = solve_steps(&stats, b_target)?;
    let counts = bin_counts(&stats, &steps.delta);
    let allocation = QuantAllocation {
        layers: model.layers().iter().map(|l| l.spec.name.clone()).collect(),
        b_target,
        lambda: steps.lambda,
        delta: steps.delta,
        alpha: stats.alpha,
        k: counts.k,
        unpruned: stats.unpruned,
        b_effective_continuous: counts.b_effective_continuous,
        b_effective_rounded: counts.b_effective_rounded,
    };
    allocation.validate()?;
    Ok(allocation)
}

fn min_mean_max<I: Iterator<Item = f64>>(it: I) -> (f64, f64, f64) {
    let (mut lo, mut hi, mut sum, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for v in it {
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v;
        n += 1;
    }
    (lo, sum / n as f64, hi)
}

/// CSV columns: `layer,delta,alpha_min,alpha_mean,alpha_max,k_min,k_mean,k_max,unpruned,b_eff_continuous,b_eff_rounded`.
///
/// The two bit columns are per layer; a layer without a codebook has an empty `delta`.
pub fn write_quant_csv<W: Write>(out: W, q: &QuantAllocation) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "layer",
        "delta",
        "alpha_min",
        "alpha_mean",
        "alpha_max",
        "k_min",
        "k_mean",
        "k_max",
        "unpruned",
        "b_eff_continuous",
        "b_eff_rounded",
    ])?;
    for i in 0..q.layers.len() {
        let (a_lo, a_mean, a_hi) = min_mean_max(q.alpha[i].iter().copied());
        let (k_lo, k_mean, k_hi) = min_mean_max(q.k[i].iter().map(|&k| k as f64));
        let kept: u64 = q.unpruned[i].iter().sum();
        let (cont, rounded) = match q.delta[i] {
            Some(d) if kept > 0 => {
                let mut c = 0.0;
                let mut r = 0.0;
                for j in 0..q.alpha[i].len() {
                    let n = q.unpruned[i][j] as f64;
                    if n > 0.0 {
                        c += n * 2.0 * q.alpha[i][j] / d;
                        r += n * q.k[i][j].max(1) as f64;
                    }
                }
                (
                    format!("{:.6}", (c / kept as f64).log2()),
                    format!("{:.6}", (r / kept as f64).log2()),
                )
            }
            _ => (String::new(), String::new()),
        };
        w.write_record([
            q.layers[i].clone(),
            q.delta[i].map(|d| format!("{d:e}")).unwrap_or_default(),
            format!("{a_lo:e}"),
            format!("{a_mean:e}"),
            format!("{a_hi:e}"),
            format!("{k_lo}"),
            format!("{k_mean:.4}"),
            format!("{k_hi}"),
            kept.to_string(),
            cont,
            rounded,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_quant_csv(path: &Path, q: &QuantAllocation) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| OpqError::io(path, e))?;
    write_quant_csv(file, q).map_err(|e| OpqError::io(path, e.into()))
}
