//! One global threshold for a target pruning rate.
//!
//! Layers with small scales lose a larger share of their weights than layers
//! with wide distributions, because all of them share the same cut-off.
//!
//! cargo run --example solve_pruning -- 0.8

use opq::laplace::{fit_model, FitConfig};
use opq::prune::{allocate_pruning, pruning_error, DEFAULT_RATE_TOL};
use opq::synth::{synth_model, SynthConfig};

fn main() -> opq::Result<()> {
    let p: f64 = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("pruning rate"))
        .unwrap_or(0.8);
    let model = synth_model(&SynthConfig::uniform(&[0.01, 0.03, 0.06, 0.12], 102_400, 64, 7)?)?;
    let fits = fit_model(&model, &FitConfig::default())?;
    let alloc = allocate_pruning(&model, &fits, p, DEFAULT_RATE_TOL)?;
    let errors = pruning_error(&model, &fits, alloc.threshold());

    println!("target {p}  beta {:.6}  lambda {:.3e}", alloc.threshold(), alloc.lambda);
    println!("model rate {:.12}  empirical {:.6}\n", alloc.p_model, alloc.p_empirical);
    println!(
        "{:<8} {:>8} {:>9} {:>9} {:>11} {:>11}",
        "layer", "tau", "p_model", "p_emp", "err_real", "err_model"
    );
    for i in 0..model.len() {
        println!(
            "{:<8} {:>8.4} {:>9.4} {:>9.4} {:>11.4e} {:>11.4e}",
            alloc.layers[i],
            alloc.tau[i],
            alloc.layer_rate_model[i],
            alloc.layer_rate_empirical[i],
            errors.real[i],
            errors.model[i]
        );
    }
    println!(
        "\nnormalized pruning error: real {:.5e}  model {:.5e}",
        errors.real_total, errors.model_total
    );
    Ok(())
}
