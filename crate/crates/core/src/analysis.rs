//! Real versus analytic compression error over sweeps of the pruning rate
//! and the bitwidth.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::quantize_layer;
use crate::error::{OpqError, Result};
use crate::laplace::LaplaceFitResult;
use crate::prune::{allocate_pruning, pruning_error, Mask};
use crate::quant::{allocate_quantization, quant_error_estimate, QuantAllocation};
use crate::tensor::ModelTensors;

/// Denominator floor of `relative_gap`.
pub const GAP_EPSILON: f64 = 1e-30;

pub fn relative_gap(real: f64, analytic: f64) -> f64 {
    (real - analytic).abs() / real.max(GAP_EPSILON)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantError {
    /// `(1/Nbar_i) sum_j M_ij (W_ij - Q_i(W_ij))^2`; 0 for layers with no unpruned weight.
    pub per_layer: Vec<f64>,
    pub total: f64,
}

/// Empirical quantization MSE of the masked weights.
pub fn real_quant_error(model: &ModelTensors, masks: &[Mask], quant: &QuantAllocation) -> Result<QuantError> {
    if masks.len() != model.len() || quant.delta.len() != model.len() {
        return Err(OpqError::InvalidArgument("allocation does not cover the model".into()));
    }
    let per_layer: Vec<f64> = model
        .layers()
        .par_iter()
        .zip(masks)
        .zip(&quant.delta)
        .map(|((layer, mask), delta)| {
            let Some(delta) = delta else { return 0.0 };
            let kept = mask.count_kept();
            if kept == 0 {
                return 0.0;
            }
            let q = quantize_layer(&layer.values, mask, *delta as f32);
            let sum: f64 = layer
                .values
                .iter()
                .zip(&q)
                .zip(mask.bits())
                .filter(|(_, &keep)| keep)
                .map(|((&w, &q), _)| {
                    let d = w as f64 - q as f64;
                    d * d
                })
                .sum();
            sum / kept as f64
        })
        .collect();
    Ok(QuantError {
        total: per_layer.iter().sum(),
        per_layer,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    PruneRate,
    Bitwidth,
}

impl SweepVariable {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepVariable::PruneRate => "prune_rate",
            SweepVariable::Bitwidth => "bitwidth",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub setting: f64,
    pub real_error: f64,
    pub analytic_error: f64,
    pub relative_gap: f64,
    /// Allocation failure at this setting; the error columns are NaN then.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRow {
    pub setting: f64,
    pub layer: String,
    pub real_error: f64,
    pub analytic_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub sweep_variable: SweepVariable,
    pub rows: Vec<SweepRow>,
    pub layers: Vec<LayerRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Pruning rate held fixed during a bitwidth sweep.
    pub p_target: f64,
    /// Bitwidth held fixed during a pruning-rate sweep (unused by the pruning error itself).
    pub b_target: f64,
    pub rate_tol: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            p_target: 0.5,
            b_target: 4.0,
            rate_tol: crate::prune::DEFAULT_RATE_TOL,
        }
    }
}

type Point = (f64, f64, Vec<(f64, f64)>);

fn prune_point(model: &ModelTensors, fits: &[LaplaceFitResult], p: f64, tol: f64) -> Result<Point> {
    let alloc = allocate_pruning(model, fits, p, tol)?;
    let e = pruning_error(model, fits, alloc.threshold());
    let n = model.total_count() as f64;
    let per_layer = e.real.iter().zip(&e.model).map(|(r, m)| (r / n, m / n)).collect();
    Ok((e.real_total, e.model_total, per_layer))
}

fn quant_point(model: &ModelTensors, masks: &[Mask], b: f64) -> Result<Point> {
    let q = allocate_quantization(model, masks, b)?;
    let real = real_quant_error(model, masks, &q)?;
    let per_layer = real
        .per_layer
        .iter()
        .zip(&q.delta)
        .map(|(&r, d)| (r, d.map_or(0.0, |d| d * d / 12.0)))
        .collect();
    Ok((real.total, quant_error_estimate(&q.delta), per_layer))
}

/// Run the allocation at every setting and compare real and analytic errors.
///
/// Pruning errors are the `(1/N)`-normalized sums of squared removed weights;
/// quantization errors are the per-layer MSE summed over layers against
/// `sum_i delta_i^2 / 12`. Failures are recorded per row.
pub fn error_sweep(
    model: &ModelTensors,
    fits: &[LaplaceFitResult],
    variable: SweepVariable,
    settings: &[f64],
    config: &SweepConfig,
) -> Result<ErrorReport> {
    let masks = match variable {
        SweepVariable::Bitwidth if !settings.is_empty() => {
            Some(allocate_pruning(model, fits, config.p_target, config.rate_tol)?.masks)
        }
        _ => None,
    };
    let points: Vec<Result<Point>> = settings
        .par_iter()
        .map(|&s| match variable {
            SweepVariable::PruneRate => prune_point(model, fits, s, config.rate_tol),
            SweepVariable::Bitwidth => quant_point(model, masks.as_deref().unwrap(), s),
        })
        .collect();

    let mut rows = Vec::with_capacity(settings.len());
    let mut layers = Vec::new();
    for (&setting, point) in settings.iter().zip(points) {
        match point {
            Ok((real, analytic, per_layer)) => {
                rows.push(SweepRow {
                    setting,
                    real_error: real,
                    analytic_error: analytic,
                    relative_gap: relative_gap(real, analytic),
                    error: None,
                });
                for (layer, (r, a)) in model.layers().iter().zip(per_layer) {
                    layers.push(LayerRow {
                        setting,
                        layer: layer.spec.name.clone(),
                        real_error: r,
                        analytic_error: a,
                    });
                }
            }
            Err(e) => rows.push(SweepRow {
                setting,
                real_error: f64::NAN,
                analytic_error: f64::NAN,
                relative_gap: f64::NAN,
                error: Some(e.to_string()),
            }),
        }
    }
    Ok(ErrorReport {
        sweep_variable: variable,
        rows,
        layers,
    })
}

impl ErrorReport {
    /// Columns: `sweep,setting,real_error,analytic_error,relative_gap,error`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "sweep",
            "setting",
            "real_error",
            "analytic_error",
            "relative_gap",
            "error",
        ])?;
        for r in &self.rows {
            w.write_record([
                self.sweep_variable.as_str().to_string(),
                format!("{}", r.setting),
                format!("{:e}", r.real_error),
                format!("{:e}", r.analytic_error),
                format!("{:.6}", r.relative_gap),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Columns: `sweep,setting,layer,real_error,analytic_error,relative_gap`.
    pub fn write_layers_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "sweep",
            "setting",
            "layer",
            "real_error",
            "analytic_error",
            "relative_gap",
        ])?;
        for r in &self.layers {
            w.write_record([
                self.sweep_variable.as_str().to_string(),
                format!("{}", r.setting),
                r.layer.clone(),
                format!("{:e}", r.real_error),
                format!("{:e}", r.analytic_error),
                format!("{:.6}", relative_gap(r.real_error, r.analytic_error)),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let name = self.sweep_variable.as_str();
        let rows = dir.join(format!("{name}_sweep.csv"));
        let file = std::fs::File::create(&rows).map_err(|e| OpqError::io(&rows, e))?;
        self.write_csv(file).map_err(|e| OpqError::io(&rows, e.into()))?;
        let layers = dir.join(format!("{name}_layers.csv"));
        let file = std::fs::File::create(&layers).map_err(|e| OpqError::io(&layers, e))?;
        self.write_layers_csv(file).map_err(|e| OpqError::io(&layers, e.into()))
    }
}
