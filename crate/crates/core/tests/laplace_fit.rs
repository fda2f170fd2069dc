mod common;

use opq::laplace::{empirical_folded_cdf, fit_laplace, fit_model, FitConfig};
use opq::synth::sample_laplace;
use proptest::prelude::*;

#[test]
fn recovers_scale_within_two_percent() {
    let model = common::synthetic_model();
    let fits = fit_model(&model, &FitConfig::default()).unwrap();
    for (fit, tau) in fits.iter().zip(common::SYNTH_TAUS) {
        let rel = (fit.tau - tau).abs() / tau;
        assert!(rel <= 0.02, "tau {tau}: fitted {} ({rel:.4})", fit.tau);
        assert!(fit.converged);
        assert!(fit.rmse >= 0.0 && fit.rmse <= 1.0);
    }
}

#[test]
fn residual_is_small_on_laplace_and_large_on_uniform() {
    let laplace = sample_laplace(0.1, 100_000, 3);
    let good = fit_laplace(&laplace, &FitConfig::default()).unwrap();
    let uniform: Vec<f32> = (0..100_000).map(|k| (k as f32 / 100_000.0) - 0.5).collect();
    let bad = fit_laplace(&uniform, &FitConfig::default()).unwrap();
    assert!(good.rmse < 0.01, "{}", good.rmse);
    assert!(bad.rmse > 5.0 * good.rmse, "{} vs {}", bad.rmse, good.rmse);
}

#[test]
fn exact_zeros_do_not_move_the_grid() {
    let mut values = sample_laplace(0.05, 50_000, 11);
    let base = fit_laplace(&values, &FitConfig::default()).unwrap();
    values.extend(std::iter::repeat_n(0.0, 500));
    let padded = fit_laplace(&values, &FitConfig::default()).unwrap();
    // zeros change the empirical CDF levels but not the abscissae
    assert!((padded.tau - base.tau).abs() / base.tau < 0.05);
    assert!(padded.tau_init < base.tau_init);
}

/// Least-squares CDF cost on the 256-point quantile grid, written out directly.
fn cdf_cost(values: &[f32]) -> impl Fn(f64) -> f64 {
    let mut mags: Vec<f64> = values.iter().map(|v| v.abs() as f64).collect();
    mags.sort_by(f64::total_cmp);
    let nonzero: Vec<f64> = mags.iter().copied().filter(|&m| m > 0.0).collect();
    let grid: Vec<f64> = (0..256)
        .map(|k| nonzero[(((k as f64 + 0.5) / 256.0 * nonzero.len() as f64) as usize).min(nonzero.len() - 1)])
        .collect();
    let cdf: Vec<f64> = grid
        .iter()
        .map(|&x| mags.iter().filter(|&&m| m <= x).count() as f64 / mags.len() as f64)
        .collect();
    move |tau: f64| {
        grid.iter()
            .zip(&cdf)
            .map(|(&x, &g)| (g - (1.0 - (-x / tau).exp())).powi(2))
            .sum()
    }
}

/// Golden-section minimum of a unimodal function on `[lo, hi]`.
fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    while hi - lo > 1e-12 * hi {
        let a = hi - r * (hi - lo);
        let b = lo + r * (hi - lo);
        if f(a) < f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn minimizes_the_least_squares_cost() {
    let uniform: Vec<f32> = (0..20_000).map(|k| (k as f32 / 20_000.0) - 0.5).collect();
    let gauss: Vec<f32> = sample_laplace(1.0, 40_000, 5)
        .chunks(4)
        .map(|c| c.iter().sum::<f32>() * 0.25)
        .collect();
    let mut padded = sample_laplace(0.03, 30_000, 8);
    padded.extend(std::iter::repeat_n(0.0, 3000));
    for values in [uniform, gauss, sample_laplace(0.07, 30_000, 2), padded] {
        let fit = fit_laplace(&values, &FitConfig::default()).unwrap();
        let cost = cdf_cost(&values);
        let oracle = golden_min(&cost, fit.tau_init / 2.0, fit.tau_init * 2.0);
        assert!((fit.tau - oracle).abs() <= 1e-6 * oracle, "{} vs {}", fit.tau, oracle);
        assert!(cost(fit.tau) <= cost(fit.tau_init));
        assert!((fit.rmse - (cost(fit.tau) / 256.0).sqrt()).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn folded_cdf_monotone(values in prop::collection::vec(-10.0f32..10.0, 1..200),
                           mut grid in prop::collection::vec(0.0f64..12.0, 1..50)) {
        grid.sort_by(f64::total_cmp);
        let g = empirical_folded_cdf(&values, &grid).unwrap();
        prop_assert!(g.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(g.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn fit_scale_equivariant(seed in 0u64..1000, tau in 0.001f64..1.0, exp in -6i32..6) {
        // powers of two keep the scaled samples exact in f32
        let c = 2f64.powi(exp);
        let values = sample_laplace(tau, 20_000, seed);
        let scaled: Vec<f32> = values.iter().map(|v| v * c as f32).collect();
        let a = fit_laplace(&values, &FitConfig::default()).unwrap();
        let b = fit_laplace(&scaled, &FitConfig::default()).unwrap();
        prop_assert!((b.tau - c * a.tau).abs() <= 1e-6 * c * a.tau, "{} vs {}", b.tau, c * a.tau);
    }

    #[test]
    fn fit_respects_bounds(values in prop::collection::vec(-5.0f32..5.0, 2..300)) {
        prop_assume!(values.iter().any(|&v| v != 0.0));
        let fit = fit_laplace(&values, &FitConfig::default()).unwrap();
        prop_assert!(fit.tau > 0.0);
        prop_assert!(fit.tau >= fit.tau_init / 2.0 * (1.0 - 1e-12));
        prop_assert!(fit.tau <= fit.tau_init * 2.0 * (1.0 + 1e-12));
        prop_assert!(fit.rmse >= 0.0 && fit.rmse <= 1.0);
    }
}
