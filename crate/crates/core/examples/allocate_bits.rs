//! Quantization steps for a target average bitwidth.
//!
//! Every layer gets one step shared by all of its channels. The steps are
//! proportional to the cube root of each layer's range mass, scaled so the
//! average number of bins equals 2^B.
//!
//! cargo run --example allocate_bits

use opq::laplace::{fit_model, FitConfig};
use opq::prune::{allocate_pruning, DEFAULT_RATE_TOL};
use opq::quant::{allocate_quantization, quant_error_estimate};
use opq::synth::{synth_model, SynthConfig};

fn main() -> opq::Result<()> {
    let model = synth_model(&SynthConfig::uniform(&[0.01, 0.04, 0.1], 65_536, 32, 3)?)?;
    let fits = fit_model(&model, &FitConfig::default())?;
    let pruning = allocate_pruning(&model, &fits, 0.5, DEFAULT_RATE_TOL)?;

    for b in [2.0, 3.0, 4.0, 2.99] {
        let q = allocate_quantization(&model, &pruning.masks, b)?;
        println!(
            "B = {b}: lambda {:.3e}, B_eff {:.4} (continuous {:.6})",
            q.lambda, q.b_effective_rounded, q.b_effective_continuous
        );
        for i in 0..q.layers.len() {
            let delta = q.delta[i].expect("layer has unpruned weights");
            let kmax = q.k[i].iter().max().unwrap();
            let kmin = q.k[i].iter().min().unwrap();
            println!("  {:<8} delta {:.5}  K {kmin}..{kmax}", q.layers[i], delta);
        }
        println!("  estimated MSE {:.4e}\n", quant_error_estimate(&q.delta));
    }
    Ok(())
}
