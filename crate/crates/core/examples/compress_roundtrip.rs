//! Encode a pruned and quantized model as an index-difference stream, write
//! it to disk, read it back and decode it.
//!
//! cargo run --example compress_roundtrip

use opq::artifact::{load_artifact, save_artifact};
use opq::codec::{compress_dense, decode, encode, layer_entries, measured_rate, CompressedModel, DEFAULT_GAP_BITS};
use opq::laplace::{fit_model, FitConfig};
use opq::prune::{allocate_pruning, DEFAULT_RATE_TOL};
use opq::quant::allocate_quantization;
use opq::synth::{synth_model, SynthConfig};

fn main() -> opq::Result<()> {
    let model = synth_model(&SynthConfig::uniform(&[0.02, 0.05], 32_768, 16, 11)?)?;
    let fits = fit_model(&model, &FitConfig::default())?;
    let pruning = allocate_pruning(&model, &fits, 0.9, DEFAULT_RATE_TOL)?;
    let quant = allocate_quantization(&model, &pruning.masks, 3.0)?;

    let compressed = encode(&model, &pruning.masks, &quant, 0.9, DEFAULT_GAP_BITS)?;
    for layer in &compressed.layers {
        let entries = layer_entries(layer)?;
        let placeholders = entries.iter().filter(|e| e.2 == 0).count();
        println!(
            "{}: delta {:.5}, {} entries ({} zero-level), {} + {} bits each, {} bytes",
            layer.spec.name,
            layer.delta,
            layer.entries,
            placeholders,
            layer.gap_bits,
            layer.level_bits,
            layer.stream.len()
        );
    }

    let path = std::env::temp_dir().join("opq_example.opq");
    let bytes = save_artifact(&compressed, &model.hash(), &path)?;
    let (back, hash) = load_artifact::<CompressedModel>(&path)?;
    assert_eq!(hash, model.hash());

    let decoded = decode(&back)?;
    let expected = compress_dense(&model, &pruning.masks, &quant)?;
    let exact = decoded
        .layers()
        .iter()
        .zip(expected.layers())
        .all(|(a, b)| a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    println!(
        "\n{} bytes on disk, {:.1}x smaller than fp32, bit-exact: {exact}",
        bytes,
        measured_rate(model.total_count() as u64, bytes)
    );
    std::fs::remove_file(path).ok();
    Ok(())
}
