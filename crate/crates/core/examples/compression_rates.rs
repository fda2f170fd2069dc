//! Ideal compression rates 32 / ((1 - p) B) for a few reference settings, and
//! what the rate becomes once the index stream is counted.
//!
//! cargo run --example compression_rates

use opq::codec::compression_rate;

fn main() {
    let rows = [
        ("AlexNet", 0.9230, 2.99),
        ("VGG-16", 0.9441, 2.92),
        ("MobileNet-V1", 0.5778, 3.26),
        ("ResNet-50", 0.7414, 3.25),
    ];
    let n = 10_000_000u64;
    println!(
        "{:<14} {:>7} {:>5} {:>9} {:>12}",
        "model", "prune", "bits", "ideal", "with 8b gaps"
    );
    for (name, p, b) in rows {
        let ideal = compression_rate(p, b, 0, n);
        // each stored weight also carries an 8-bit gap
        let with_gaps = compression_rate(p, b + 8.0, 0, n);
        println!(
            "{name:<14} {:>6.2}% {b:>5.2} {ideal:>8.2}x {with_gaps:>11.2}x",
            100.0 * p
        );
    }
}
