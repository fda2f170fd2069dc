//! The whole pipeline through the command layer: generate a model, allocate,
//! compress, verify. Artifacts land in a temporary directory (or the path
//! given as the first argument).
//!
//! cargo run --example end_to_end -- /tmp/opq_demo

use std::path::PathBuf;

use opq::cli::{cmd_allocate, cmd_compress, cmd_synth, cmd_verify, AllocationPaths, RunConfig, COMPRESSED_FILE};
use opq::synth::SynthConfig;

fn main() -> opq::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("opq_end_to_end"));

    let synth = SynthConfig::uniform(&[0.01, 0.03, 0.05, 0.07, 0.09], 102_400, 64, 2024)?;
    cmd_synth(&synth, &root.join("model"))?;

    let config = RunConfig {
        model_path: root.join("model"),
        output_dir: root.join("run"),
        p_target: 0.9,
        b_target: 3.0,
        ..RunConfig::default()
    };
    let summary = cmd_allocate(&config)?;
    println!("{}", serde_json::to_string_pretty(&summary).unwrap());

    let paths = AllocationPaths::in_dir(&config.output_dir);
    let compressed = config.output_dir.join(COMPRESSED_FILE);
    let rate = cmd_compress(&config, &paths, &compressed)?;
    println!(
        "\nideal {:.2}x, actual {:.2}x ({} bytes)",
        rate.ideal_rate, rate.actual_rate, rate.compressed_bytes
    );

    let report = cmd_verify(&config, &paths, &compressed)?;
    for check in report.checks {
        println!("ok  {check}");
    }
    println!("\nartifacts in {}", config.output_dir.display());
    Ok(())
}
