#![allow(dead_code)]

use opq::laplace::LaplaceFitResult;
use opq::quant::ChannelStats;
use opq::synth::{synth_model, SynthConfig};
use opq::{LayerSpec, ModelTensors};

/// Five layers of 102 400 weights in 64 channels, scales 0.01..0.09.
pub const SYNTH_TAUS: [f64; 5] = [0.01, 0.03, 0.05, 0.07, 0.09];
pub const SYNTH_COUNT: usize = 102_400;
pub const SYNTH_CHANNELS: usize = 64;
pub const SYNTH_SEED: u64 = 20240917;

pub fn synthetic_model() -> ModelTensors {
    let cfg = SynthConfig::uniform(&SYNTH_TAUS, SYNTH_COUNT, SYNTH_CHANNELS, SYNTH_SEED).unwrap();
    synth_model(&cfg).unwrap()
}

pub fn small_model(taus: &[f64], count: usize, channels: usize, seed: u64) -> ModelTensors {
    synth_model(&SynthConfig::uniform(taus, count, channels, seed).unwrap()).unwrap()
}

pub fn fits(taus: &[f64]) -> Vec<LaplaceFitResult> {
    taus.iter().map(|&t| LaplaceFitResult::from_tau(t)).collect()
}

pub fn specs(counts: &[usize]) -> Vec<LayerSpec> {
    counts
        .iter()
        .enumerate()
        .map(|(i, &n)| LayerSpec::new(format!("l{i}"), vec![1, n], 0).unwrap())
        .collect()
}

/// Mixture rate written out independently of the library.
pub fn mixture_rate(taus: &[f64], counts: &[usize], beta: f64) -> f64 {
    let n: f64 = counts.iter().map(|&c| c as f64).sum();
    taus.iter()
        .zip(counts)
        .map(|(t, &c)| c as f64 * (1.0 - (-beta / t).exp()))
        .sum::<f64>()
        / n
}

/// Plain bisection on the mixture rate until the bracket is narrower than `tol`.
pub fn bisection_threshold(taus: &[f64], counts: &[usize], p: f64, tol: f64) -> f64 {
    let mut lo = 0.0;
    let mut hi = taus.iter().cloned().fold(0.0, f64::max);
    while mixture_rate(taus, counts, hi) < p {
        hi *= 2.0;
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mixture_rate(taus, counts, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Adaptive Simpson quadrature.
#[allow(clippy::too_many_arguments)]
pub fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, eps: f64) -> f64 {
    fn step<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        eps: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * eps {
            return left + right + (left + right - whole) / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, eps / 2.0, depth - 1) + step(f, m, b, fm, frm, fb, right, eps / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, eps, 50)
}

/// Channel statistics with one channel per layer.
pub fn single_channel_stats(alpha: &[f64], counts: &[u64]) -> ChannelStats {
    ChannelStats {
        alpha: alpha.iter().map(|&a| vec![a]).collect(),
        unpruned: counts.iter().map(|&n| vec![n]).collect(),
    }
}

/// Continuous average bin count for per-layer ranges `s` and steps `delta`.
pub fn budget(s: &[f64], total: f64, delta: &[f64]) -> f64 {
    s.iter().zip(delta).map(|(s, d)| 2.0 * s / d).sum::<f64>() / total
}

pub fn objective(delta: &[f64]) -> f64 {
    delta.iter().map(|d| d * d / 12.0).sum()
}

pub fn bit_identical(a: &ModelTensors, b: &ModelTensors) -> bool {
    a.len() == b.len()
        && a.layers().iter().zip(b.layers()).all(|(x, y)| {
            x.spec == y.spec
                && x.values.len() == y.values.len()
                && x.values.iter().zip(&y.values).all(|(u, v)| u.to_bits() == v.to_bits())
        })
}

/// Dense search for the three steps minimizing `sum delta^2 / 12` on the budget
/// surface. `delta_3` is eliminated through the budget; the search runs over a
/// log grid in `(delta_1, delta_2)` that is repeatedly narrowed around the best point.
pub fn grid_search_steps(s: [f64; 3], total: f64, b: f64) -> [f64; 3] {
    let bins = 2f64.powf(b) * total;
    // each term 2 s_i / delta_i must stay below the whole budget
    let lower = |i: usize| 2.0 * s[i] / bins;
    // an even split of the budget is feasible; nothing larger than its objective can win
    let even: Vec<f64> = (0..3).map(|i| 3.0 * lower(i)).collect();
    let cap = (12.0 * objective(&even)).sqrt();
    let third = |d1: f64, d2: f64| {
        let rest = bins - 2.0 * s[0] / d1 - 2.0 * s[1] / d2;
        (rest > 0.0).then(|| 2.0 * s[2] / rest)
    };

    let (mut lo1, mut hi1) = (lower(0).ln(), cap.ln());
    let (mut lo2, mut hi2) = (lower(1).ln(), cap.ln());
    let mut best = (f64::INFINITY, [0.0; 3]);
    let steps = 400;
    for _ in 0..8 {
        for a in 0..=steps {
            let d1 = (lo1 + (hi1 - lo1) * a as f64 / steps as f64).exp();
            for c in 0..=steps {
                let d2 = (lo2 + (hi2 - lo2) * c as f64 / steps as f64).exp();
                if let Some(d3) = third(d1, d2) {
                    let f = objective(&[d1, d2, d3]);
                    if f < best.0 {
                        best = (f, [d1, d2, d3]);
                    }
                }
            }
        }
        let (w1, w2) = ((hi1 - lo1) / 20.0, (hi2 - lo2) / 20.0);
        let (c1, c2) = (best.1[0].ln(), best.1[1].ln());
        lo1 = c1 - w1;
        hi1 = c1 + w1;
        lo2 = c2 - w2;
        hi2 = c2 + w2;
    }
    best.1
}
