//! Fit Laplace scales to synthetic layers and compare with the true values.
//!
//! cargo run --example fit_laplace

use opq::laplace::{fit_model, laplace_tail_mass, FitConfig};
use opq::synth::{synth_model, SynthConfig};

fn main() -> opq::Result<()> {
    let taus = [0.005, 0.02, 0.08];
    let model = synth_model(&SynthConfig::uniform(&taus, 200_000, 50, 1)?)?;
    let fits = fit_model(&model, &FitConfig::default())?;

    println!(
        "{:<8} {:>10} {:>10} {:>10} {:>9} {:>5}",
        "layer", "true", "mle", "fitted", "rmse", "iter"
    );
    for ((layer, fit), tau) in model.layers().iter().zip(&fits).zip(taus) {
        println!(
            "{:<8} {:>10.6} {:>10.6} {:>10.6} {:>9.2e} {:>5}",
            layer.spec.name, tau, fit.tau_init, fit.tau, fit.rmse, fit.iterations
        );
    }

    // fraction of weights above 2 tau, fitted model vs data
    let layer = &model.layers()[1];
    let beta = 2.0 * fits[1].tau;
    let above = layer.values.iter().filter(|v| v.abs() as f64 > beta).count() as f64 / layer.values.len() as f64;
    println!(
        "\nP(|w| > 2 tau) in {}: model {:.4}, data {:.4}",
        layer.spec.name,
        laplace_tail_mass(fits[1].tau, beta),
        above
    );
    Ok(())
}
