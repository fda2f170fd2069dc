//! Real versus analytic errors across pruning rates and bitwidths.
//!
//! cargo run --example error_analysis

use opq::analysis::{error_sweep, SweepConfig, SweepVariable};
use opq::laplace::{fit_model, FitConfig};
use opq::prune::DEFAULT_RATE_TOL;
use opq::synth::{synth_model, SynthConfig};

fn main() -> opq::Result<()> {
    let model = synth_model(&SynthConfig::uniform(&[0.01, 0.03, 0.05, 0.07, 0.09], 102_400, 64, 5)?)?;
    let fits = fit_model(&model, &FitConfig::default())?;
    let config = SweepConfig {
        p_target: 0.5,
        b_target: 4.0,
        rate_tol: DEFAULT_RATE_TOL,
    };

    let rates: Vec<f64> = (1..10).map(|k| k as f64 / 10.0).collect();
    let bits: Vec<f64> = (2..=8).map(f64::from).collect();
    for (variable, settings) in [(SweepVariable::PruneRate, rates), (SweepVariable::Bitwidth, bits)] {
        let report = error_sweep(&model, &fits, variable, &settings, &config)?;
        println!(
            "{:>10} {:>12} {:>12} {:>8}",
            variable.as_str(),
            "real",
            "analytic",
            "gap"
        );
        for row in &report.rows {
            println!(
                "{:>10} {:>12.4e} {:>12.4e} {:>7.2}%",
                row.setting,
                row.real_error,
                row.analytic_error,
                100.0 * row.relative_gap
            );
        }
        println!();
    }
    Ok(())
}
