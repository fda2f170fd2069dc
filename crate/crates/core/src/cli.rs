//! Pipeline commands behind the `opq` binary: allocate, compress, verify,
//! report and synth. Each command validates its configuration before doing
//! any work and leaves no partial files behind on failure.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{error_sweep, ErrorReport, SweepConfig, SweepVariable};
use crate::artifact::{load_artifact, save_artifact, write_atomic};
use crate::codec::{
    compress_dense, compression_rate, decode, encode, measured_rate, CompressedModel, DEFAULT_GAP_BITS,
};
use crate::error::{OpqError, Result};
use crate::laplace::{fit_model, save_fits_csv, FitConfig, LaplaceFitResult};
use crate::prune::{
    allocate_pruning, build_masks, model_prune_rate, pruning_error, save_pruning_csv, PruningAllocation,
    DEFAULT_RATE_TOL,
};
use crate::quant::{allocate_quantization, channel_maxima, save_quant_csv, QuantAllocation};
use crate::synth::{synth_model, SynthConfig};
use crate::tensor::{load_model, save_model, LayerFilter, ModelHash, ModelTensors};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_COMPUTATION: i32 = 2;
pub const EXIT_VERIFICATION: i32 = 3;

pub const FITS_FILE: &str = "fits.csv";
pub const PRUNING_FILE: &str = "pruning.art";
pub const QUANT_FILE: &str = "quant.art";
pub const PRUNING_CSV: &str = "pruning.csv";
pub const QUANT_CSV: &str = "quant.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const COMPRESSED_FILE: &str = "model.opq";
pub const RATE_FILE: &str = "rate.json";
pub const REPORT_CONFIG_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model_path: PathBuf,
    pub output_dir: PathBuf,
    pub p_target: f64,
    pub b_target: f64,
    pub rate_tol: f64,
    pub fit: FitConfig,
    pub filter: LayerFilter,
    pub channel_axis: Option<usize>,
    pub gap_bits: u8,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model_path: PathBuf::new(),
            output_dir: PathBuf::from("."),
            p_target: 0.5,
            b_target: 4.0,
            rate_tol: DEFAULT_RATE_TOL,
            fit: FitConfig::default(),
            filter: LayerFilter::default(),
            channel_axis: None,
            gap_bits: DEFAULT_GAP_BITS,
        }
    }
}

/// Config-file contents; every field optional. Command-line flags are applied on top.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub model_path: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub p_target: Option<f64>,
    pub b_target: Option<f64>,
    pub rate_tol: Option<f64>,
    pub fit: Option<FitConfig>,
    pub include: Option<Vec<String>>,
    pub exclude: Option<Vec<String>>,
    pub channel_axis: Option<usize>,
    pub gap_bits: Option<u8>,
}

impl PartialConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| OpqError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| OpqError::InvalidArgument(format!("config file {}: {e}", path.display())))
    }

    /// Fields set in `over` win.
    pub fn merge(self, over: PartialConfig) -> PartialConfig {
        PartialConfig {
            model_path: over.model_path.or(self.model_path),
            output_dir: over.output_dir.or(self.output_dir),
            p_target: over.p_target.or(self.p_target),
            b_target: over.b_target.or(self.b_target),
            rate_tol: over.rate_tol.or(self.rate_tol),
            fit: over.fit.or(self.fit),
            include: over.include.or(self.include),
            exclude: over.exclude.or(self.exclude),
            channel_axis: over.channel_axis.or(self.channel_axis),
            gap_bits: over.gap_bits.or(self.gap_bits),
        }
    }

    pub fn resolve(self) -> RunConfig {
        let d = RunConfig::default();
        RunConfig {
            model_path: self.model_path.unwrap_or(d.model_path),
            output_dir: self.output_dir.unwrap_or(d.output_dir),
            p_target: self.p_target.unwrap_or(d.p_target),
            b_target: self.b_target.unwrap_or(d.b_target),
            rate_tol: self.rate_tol.unwrap_or(d.rate_tol),
            fit: self.fit.unwrap_or(d.fit),
            filter: LayerFilter {
                include: self.include.unwrap_or_default(),
                exclude: self.exclude.unwrap_or_default(),
            },
            channel_axis: self.channel_axis,
            gap_bits: self.gap_bits.unwrap_or(d.gap_bits),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OpqError::InvalidArgument(m));
        if self.model_path.as_os_str().is_empty() {
            return bad("model path is required".into());
        }
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return bad(format!("pruning rate {} must lie in (0, 1)", self.p_target));
        }
        if !(self.b_target > 0.0 && self.b_target.is_finite()) {
            return bad(format!("bitwidth {} must be positive", self.b_target));
        }
        if !(self.rate_tol > 0.0) || !(self.fit.rel_tol > 0.0) || self.fit.grid_size == 0 {
            return bad("tolerances and grid size must be positive".into());
        }
        if !(1..=32).contains(&self.gap_bits) {
            return bad(format!("gap bits {} must be in 1..=32", self.gap_bits));
        }
        Ok(())
    }

    /// Load the model and apply the layer filter and channel-axis override.
    pub fn load_model(&self) -> Result<ModelTensors> {
        let model = load_model(&self.model_path)?.select(&self.filter)?;
        match self.channel_axis {
            Some(axis) => model.with_channel_axis(axis),
            None => Ok(model),
        }
    }
}

/// Tracks files written by a command so they can be removed on failure.
struct Outputs(Vec<PathBuf>);

impl Outputs {
    fn record(&mut self, path: PathBuf) -> PathBuf {
        self.0.push(path.clone());
        path
    }

    fn rollback(&self) {
        for p in &self.0 {
            let _ = fs::remove_file(p);
        }
    }
}

fn guarded<T>(f: impl FnOnce(&mut Outputs) -> Result<T>) -> Result<T> {
    let mut outputs = Outputs(Vec::new());
    let result = f(&mut outputs);
    if result.is_err() {
        outputs.rollback();
    }
    result
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("summary serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocateSummary {
    pub model_hash: String,
    pub layers: usize,
    pub weights: usize,
    pub p_target: f64,
    pub p_model: f64,
    pub p_empirical: f64,
    pub lambda_p: f64,
    pub beta: f64,
    pub b_target: f64,
    pub lambda_q: f64,
    pub b_effective_continuous: f64,
    pub b_effective_rounded: f64,
    pub unpruned: u64,
    pub pruning_error_real: f64,
    pub pruning_error_model: f64,
}

/// Fit, solve both allocations, and write `fits.csv`, `pruning.art`,
/// `quant.art`, `pruning.csv`, `quant.csv` and `summary.json`.
pub fn cmd_allocate(config: &RunConfig) -> Result<AllocateSummary> {
    config.validate()?;
    let model = config.load_model()?;
    let hash = model.hash();
    let fits = fit_model(&model, &config.fit)?;
    let pruning = allocate_pruning(&model, &fits, config.p_target, config.rate_tol)?;
    let quant = allocate_quantization(&model, &pruning.masks, config.b_target)?;
    let errors = pruning_error(&model, &fits, pruning.threshold());

    let summary = AllocateSummary {
        model_hash: hash.to_string(),
        layers: model.len(),
        weights: model.total_count(),
        p_target: pruning.p_target,
        p_model: pruning.p_model,
        p_empirical: pruning.p_empirical,
        lambda_p: pruning.lambda,
        beta: pruning.threshold(),
        b_target: quant.b_target,
        lambda_q: quant.lambda,
        b_effective_continuous: quant.b_effective_continuous,
        b_effective_rounded: quant.b_effective_rounded,
        unpruned: quant.total_unpruned(),
        pruning_error_real: errors.real_total,
        pruning_error_model: errors.model_total,
    };

    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| OpqError::io(dir, e))?;
    guarded(|out| {
        save_fits_csv(&out.record(dir.join(FITS_FILE)), &model, &fits)?;
        save_artifact(&pruning, &hash, out.record(dir.join(PRUNING_FILE)))?;
        save_artifact(&quant, &hash, out.record(dir.join(QUANT_FILE)))?;
        save_pruning_csv(&out.record(dir.join(PRUNING_CSV)), &pruning, &errors)?;
        save_quant_csv(&out.record(dir.join(QUANT_CSV)), &quant)?;
        write_json(&out.record(dir.join(SUMMARY_FILE)), &summary)
    })?;
    Ok(summary)
}

fn check_hash(artifact: &ModelHash, model: &ModelHash) -> Result<()> {
    if artifact != model {
        return Err(OpqError::HashMismatch {
            artifact: artifact.to_string(),
            model: model.to_string(),
        });
    }
    Ok(())
}

/// Paths of the allocation artifacts produced by `allocate`.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationPaths {
    pub pruning: PathBuf,
    pub quant: PathBuf,
}

impl AllocationPaths {
    pub fn in_dir(dir: &Path) -> Self {
        AllocationPaths {
            pruning: dir.join(PRUNING_FILE),
            quant: dir.join(QUANT_FILE),
        }
    }

    fn load(&self, model_hash: &ModelHash) -> Result<(PruningAllocation, QuantAllocation)> {
        let (pruning, p_hash) = load_artifact::<PruningAllocation>(&self.pruning)?;
        let (quant, q_hash) = load_artifact::<QuantAllocation>(&self.quant)?;
        check_hash(&p_hash, model_hash)?;
        check_hash(&q_hash, model_hash)?;
        Ok((pruning, quant))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub weights: u64,
    pub p_empirical: f64,
    pub b_effective_rounded: f64,
    /// `32 / ((1 - p) B)` with the realized rate and rounded effective bits.
    pub ideal_rate: f64,
    pub compressed_bytes: u64,
    /// Dense FP32 size over the compressed file size.
    pub actual_rate: f64,
}

impl RateReport {
    fn new(pruning: &PruningAllocation, quant: &QuantAllocation, weights: u64, bytes: u64) -> Self {
        RateReport {
            weights,
            p_empirical: pruning.p_empirical,
            b_effective_rounded: quant.b_effective_rounded,
            ideal_rate: compression_rate(pruning.p_empirical, quant.b_effective_rounded, 0, weights),
            compressed_bytes: bytes,
            actual_rate: measured_rate(weights, bytes),
        }
    }
}

/// Encode the model under existing allocations and write the compressed file.
pub fn cmd_compress(config: &RunConfig, allocation: &AllocationPaths, output: &Path) -> Result<RateReport> {
    config.validate()?;
    let model = config.load_model()?;
    let hash = model.hash();
    let (pruning, quant) = allocation.load(&hash)?;
    let compressed = encode(&model, &pruning.masks, &quant, pruning.p_target, config.gap_bits)?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| OpqError::io(parent, e))?;
    }
    guarded(|out| {
        let bytes = save_artifact(&compressed, &hash, out.record(output.to_path_buf()))?;
        let report = RateReport::new(&pruning, &quant, model.total_count() as u64, bytes);
        let rate_path = output.with_file_name(RATE_FILE);
        write_json(&out.record(rate_path), &report)?;
        Ok(report)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<String>,
    pub rate: RateReport,
}

fn verification(invariant: &str, detail: impl std::fmt::Display) -> OpqError {
    OpqError::Verification(format!("{invariant}: {detail}"))
}

/// Decode the compressed file, recompute everything from the model and the
/// allocations, and check every invariant. Any failure is a verification error
/// naming the invariant.
pub fn cmd_verify(config: &RunConfig, allocation: &AllocationPaths, compressed_path: &Path) -> Result<VerifyReport> {
    config.validate()?;
    let model = config.load_model()?;
    let hash = model.hash();
    let bytes = fs::read(compressed_path).map_err(|e| OpqError::io(compressed_path, e))?;
    let (compressed, c_hash) =
        crate::artifact::from_bytes::<CompressedModel>(&bytes).map_err(|e| verification("artifact integrity", e))?;
    check_hash(&c_hash, &hash).map_err(|e| verification("model provenance", e))?;
    let (pruning, quant) = allocation
        .load(&hash)
        .map_err(|e| verification("allocation integrity", e))?;
    let mut checks: Vec<String> = ["artifact integrity", "model provenance", "allocation integrity"]
        .map(String::from)
        .to_vec();

    let (masks, _, p_empirical) = build_masks(&model, pruning.threshold());
    if masks != pruning.masks || p_empirical != pruning.p_empirical {
        return Err(verification(
            "mask reproduction",
            "masks differ from thresholding at sqrt(lambda)",
        ));
    }
    checks.push("mask reproduction".to_string());

    let fits: Vec<_> = pruning.tau.iter().map(|&tau| LaplaceFitResult::from_tau(tau)).collect();
    let p_model = model_prune_rate(&fits, &model.specs(), pruning.threshold());
    if (p_model - pruning.p_target).abs() > pruning.tolerance {
        return Err(verification(
            "pruning-rate constraint",
            format!(
                "model rate {p_model} vs target {} (tolerance {})",
                pruning.p_target, pruning.tolerance
            ),
        ));
    }
    checks.push("pruning-rate constraint".to_string());

    let stats = channel_maxima(&model, &pruning.masks)?;
    if stats != quant.stats() {
        return Err(verification(
            "channel ranges",
            "alpha or unpruned counts differ from the model",
        ));
    }
    checks.push("channel ranges".to_string());
    // budget identity is re-checked by QuantAllocation::validate on load
    checks.push("bit budget".to_string());

    let expected = compress_dense(&model, &pruning.masks, &quant)?;
    let decoded = decode(&compressed).map_err(|e| verification("stream decoding", e))?;
    let identical = expected.len() == decoded.len()
        && expected.layers().iter().zip(decoded.layers()).all(|(a, b)| {
            a.spec == b.spec
                && a.values.len() == b.values.len()
                && a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    if !identical {
        return Err(verification(
            "dense reconstruction",
            "decoded tensors differ from M o Q(W)",
        ));
    }
    checks.push("dense reconstruction".to_string());

    let rate = RateReport::new(&pruning, &quant, model.total_count() as u64, bytes.len() as u64);
    if rate.actual_rate > rate.ideal_rate {
        return Err(verification(
            "compression rate",
            format!("measured rate {} exceeds ideal {}", rate.actual_rate, rate.ideal_rate),
        ));
    }
    checks.push("compression rate".to_string());
    Ok(VerifyReport { checks, rate })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ReportConfig<'a> {
    model_hash: String,
    prune_settings: &'a [f64],
    bit_settings: &'a [f64],
    sweep: SweepConfig,
    fit: FitConfig,
}

/// Run both error sweeps and write `prune_rate_sweep.csv`, `bitwidth_sweep.csv`,
/// their per-layer tables, and `report.json` (run configuration).
pub fn cmd_report(
    config: &RunConfig,
    prune_settings: &[f64],
    bit_settings: &[f64],
) -> Result<(ErrorReport, ErrorReport)> {
    config.validate()?;
    if let Some(p) = prune_settings.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(OpqError::InvalidArgument(format!(
            "sweep pruning rate {p} outside (0, 1)"
        )));
    }
    if let Some(b) = bit_settings.iter().find(|b| !(**b > 0.0)) {
        return Err(OpqError::InvalidArgument(format!(
            "sweep bitwidth {b} must be positive"
        )));
    }
    let model = config.load_model()?;
    let fits = fit_model(&model, &config.fit)?;
    let sweep = SweepConfig {
        p_target: config.p_target,
        b_target: config.b_target,
        rate_tol: config.rate_tol,
    };
    let prune = error_sweep(&model, &fits, SweepVariable::PruneRate, prune_settings, &sweep)?;
    let bits = error_sweep(&model, &fits, SweepVariable::Bitwidth, bit_settings, &sweep)?;

    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| OpqError::io(dir, e))?;
    guarded(|out| {
        for report in [&prune, &bits] {
            let name = report.sweep_variable.as_str();
            out.record(dir.join(format!("{name}_sweep.csv")));
            out.record(dir.join(format!("{name}_layers.csv")));
            report.save(dir)?;
        }
        let sidecar = ReportConfig {
            model_hash: model.hash().to_string(),
            prune_settings,
            bit_settings,
            sweep,
            fit: config.fit,
        };
        write_json(&out.record(dir.join(REPORT_CONFIG_FILE)), &sidecar)
    })?;
    Ok((prune, bits))
}

/// Generate a synthetic Laplace model container.
pub fn cmd_synth(config: &SynthConfig, output: &Path) -> Result<ModelTensors> {
    if config.layers.is_empty() {
        return Err(OpqError::InvalidArgument("synth needs at least one layer".into()));
    }
    let model = synth_model(config)?;
    save_model(&model, output)?;
    Ok(model)
}
