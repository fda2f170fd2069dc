//! Compression operator `W_hat = M o (delta * round(W / delta))` and the
//! sparse index-difference encoding of the result.
//!
//! Each layer keeps one binary32 step and a bitstream of entries
//! `(gap: g bits, sign: 1 bit, magnitude: b - 1 bits)`, packed MSB-first.
//! `gap` counts the positions skipped since the previous entry (the first entry
//! counts from position 0). A run of more than `2^g - 1` skipped positions is
//! bridged with zero-level placeholder entries, each consuming `2^g - 1`
//! skipped positions plus its own.

use crate::bits::{BitReader, BitWriter};
use crate::error::{OpqError, Result};
use crate::prune::Mask;
use crate::quant::{round_half_away, QuantAllocation};
use crate::tensor::{Layer, LayerSpec, ModelHash, ModelTensors};

pub const DEFAULT_GAP_BITS: u8 = 8;

/// Quantization level magnitude `round(|v| / delta)`.
#[inline]
pub fn level_of(value: f32, delta: f32) -> u64 {
    round_half_away(value.abs() as f64 / delta as f64) as u64
}

/// `sgn * delta * level`; level 0 always yields `+0.0`.
#[inline]
pub fn dequantize(level: u64, negative: bool, delta: f32) -> f32 {
    if level == 0 {
        return 0.0;
    }
    let magnitude = level as f32 * delta;
    if negative {
        -magnitude
    } else {
        magnitude
    }
}

/// Masked uniform quantization of one layer.
pub fn quantize_layer(values: &[f32], mask: &Mask, delta: f32) -> Vec<f32> {
    debug_assert_eq!(values.len(), mask.len());
    values
        .iter()
        .zip(mask.bits())
        .map(|(&v, &keep)| {
            if keep {
                dequantize(level_of(v, delta), v < 0.0, delta)
            } else {
                0.0
            }
        })
        .collect()
}

/// Apply masks and per-layer steps to a whole model. Layers without a
/// codebook must be fully pruned.
pub fn compress_dense(model: &ModelTensors, masks: &[Mask], quant: &QuantAllocation) -> Result<ModelTensors> {
    check_coverage(model, masks, quant)?;
    let layers = model
        .layers()
        .iter()
        .zip(masks)
        .zip(&quant.delta)
        .map(|((layer, mask), delta)| {
            let values = match delta {
                Some(d) => quantize_layer(&layer.values, mask, *d as f32),
                None => vec![0.0; layer.values.len()],
            };
            Layer {
                spec: layer.spec.clone(),
                values,
            }
        })
        .collect();
    ModelTensors::new(layers)
}

fn check_coverage(model: &ModelTensors, masks: &[Mask], quant: &QuantAllocation) -> Result<()> {
    if masks.len() != model.len() || quant.delta.len() != model.len() {
        return Err(OpqError::InvalidArgument(format!(
            "allocation covers {} masks / {} steps for {} layers",
            masks.len(),
            quant.delta.len(),
            model.len()
        )));
    }
    for ((layer, mask), delta) in model.layers().iter().zip(masks).zip(&quant.delta) {
        if mask.len() != layer.values.len() {
            return Err(OpqError::LengthMismatch {
                layer: layer.spec.name.clone(),
                expected: layer.values.len(),
                actual: mask.len(),
            });
        }
        if delta.is_none() && mask.count_kept() > 0 {
            return Err(OpqError::MissingCodebook {
                layer: layer.spec.name.clone(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer {
    pub spec: LayerSpec,
    /// Codebook step; 0.0 for a layer with no codebook.
    pub delta: f32,
    pub gap_bits: u8,
    /// Sign bit plus magnitude bits.
    pub level_bits: u8,
    pub entries: u64,
    pub stream: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedModel {
    pub model_hash: ModelHash,
    pub p_target: f64,
    pub b_target: f64,
    pub layers: Vec<CompressedLayer>,
}

impl CompressedModel {
    pub fn total_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.count()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for l in &self.layers {
            l.spec.validate()?;
            if !(1..=32).contains(&l.gap_bits) || !(1..=32).contains(&l.level_bits) {
                return Err(OpqError::Invariant(format!(
                    "layer {}: gap bits {} / level bits {} outside 1..=32",
                    l.spec.name, l.gap_bits, l.level_bits
                )));
            }
            if !(l.delta >= 0.0 && l.delta.is_finite()) {
                return Err(OpqError::Invariant(format!("layer {}: step {}", l.spec.name, l.delta)));
            }
            let needed = l.entries * (l.gap_bits as u64 + l.level_bits as u64);
            if needed.div_ceil(8) != l.stream.len() as u64 {
                return Err(OpqError::Invariant(format!(
                    "layer {}: {} entries need {} bytes, stream holds {}",
                    l.spec.name,
                    l.entries,
                    needed.div_ceil(8),
                    l.stream.len()
                )));
            }
        }
        Ok(())
    }
}

/// Number of bits needed to represent `x` (0 for 0).
fn bit_width(x: u64) -> u32 {
    64 - x.leading_zeros()
}

/// Encode with one gap width for every layer.
pub fn encode(
    model: &ModelTensors,
    masks: &[Mask],
    quant: &QuantAllocation,
    p_target: f64,
    gap_bits: u8,
) -> Result<CompressedModel> {
    encode_with(model, masks, quant, p_target, &vec![gap_bits; model.len()])
}

/// Encode with a per-layer gap width.
pub fn encode_with(
    model: &ModelTensors,
    masks: &[Mask],
    quant: &QuantAllocation,
    p_target: f64,
    gap_bits: &[u8],
) -> Result<CompressedModel> {
    check_coverage(model, masks, quant)?;
    if gap_bits.len() != model.len() || gap_bits.iter().any(|g| !(1..=32).contains(g)) {
        return Err(OpqError::InvalidArgument(
            "gap bits must be 1..=32 for every layer".into(),
        ));
    }
    let layers = model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let k_max = quant.k.get(i).and_then(|k| k.iter().copied().max()).unwrap_or(0);
            encode_layer(layer, &masks[i], quant.delta[i], k_max, gap_bits[i])
        })
        .collect::<Result<Vec<_>>>()?;
    let compressed = CompressedModel {
        model_hash: model.hash(),
        p_target,
        b_target: quant.b_target,
        layers,
    };
    compressed.validate()?;
    Ok(compressed)
}

fn encode_layer(layer: &Layer, mask: &Mask, delta: Option<f64>, k_max: u64, gap_bits: u8) -> Result<CompressedLayer> {
    let name = &layer.spec.name;
    let Some(delta) = delta else {
        return Ok(CompressedLayer {
            spec: layer.spec.clone(),
            delta: 0.0,
            gap_bits,
            level_bits: 1,
            entries: 0,
            stream: Vec::new(),
        });
    };
    let delta = delta as f32;
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(OpqError::Invariant(format!(
            "layer {name}: step {delta} not representable as binary32"
        )));
    }

    let kept: Vec<(usize, u64, bool)> = layer
        .values
        .iter()
        .enumerate()
        .filter(|&(k, _)| mask.get(k))
        .map(|(k, &v)| {
            let level = level_of(v, delta);
            (k, level, v < 0.0 && level > 0)
        })
        .collect();

    // Magnitude width from the largest bin count; widened only if a level at a
    // binary32 rounding tie lands one past it.
    let observed = kept.iter().map(|e| e.1).max().unwrap_or(0);
    let magnitude_bits = bit_width(k_max).max(bit_width(observed));
    if magnitude_bits > 31 {
        return Err(OpqError::LevelOverflow {
            layer: name.clone(),
            level: observed.max(k_max),
            bits: 32,
        });
    }
    let level_bits = magnitude_bits as u8 + 1;
    let max_gap = (1u64 << gap_bits) - 1;

    let mut writer = BitWriter::new();
    let mut entries = 0u64;
    let mut next = 0u64;
    let emit = |writer: &mut BitWriter, gap: u64, negative: bool, level: u64| {
        writer.write(gap, gap_bits as u32);
        writer.write_bit(negative);
        writer.write(level, magnitude_bits);
    };
    for (position, level, negative) in kept {
        let position = position as u64;
        let mut skipped = position - next;
        while skipped > max_gap {
            emit(&mut writer, max_gap, false, 0);
            entries += 1;
            skipped -= max_gap + 1;
        }
        emit(&mut writer, skipped, negative, level);
        entries += 1;
        next = position + 1;
    }
    Ok(CompressedLayer {
        spec: layer.spec.clone(),
        delta,
        gap_bits,
        level_bits,
        entries,
        stream: writer.finish(),
    })
}

/// Decoded `(position, negative, level)` entries of a layer, placeholders included.
pub fn layer_entries(layer: &CompressedLayer) -> Result<Vec<(u64, bool, u64)>> {
    let name = &layer.spec.name;
    let n = layer.spec.count() as u64;
    let magnitude_bits = layer.level_bits as u32 - 1;
    let mut reader = BitReader::new(&layer.stream);
    let mut next = 0u64;
    let mut out = Vec::with_capacity(layer.entries as usize);
    for _ in 0..layer.entries {
        let offset = reader.byte_offset();
        let truncated = || OpqError::corrupt(format!("layer {name}: truncated stream"), offset);
        let gap = reader.read(layer.gap_bits as u32).ok_or_else(truncated)?;
        let negative = reader.read_bit().ok_or_else(truncated)?;
        let level = reader.read(magnitude_bits).ok_or_else(truncated)?;
        let position = next + gap;
        if position >= n {
            return Err(OpqError::corrupt(
                format!("layer {name}: position {position} past layer size {n}"),
                offset,
            ));
        }
        out.push((position, negative, level));
        next = position + 1;
    }
    Ok(out)
}

/// Dense reconstruction of every layer.
pub fn decode(compressed: &CompressedModel) -> Result<ModelTensors> {
    let layers = compressed
        .layers
        .iter()
        .map(|layer| {
            let mut values = vec![0.0f32; layer.spec.count()];
            for (position, negative, level) in layer_entries(layer)? {
                values[position as usize] = dequantize(level, negative, layer.delta);
            }
            Ok(Layer {
                spec: layer.spec.clone(),
                values,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ModelTensors::new(layers)
}

/// `32 N / ((1 - p) B N + 8 overhead_bytes)`; with zero overhead this is `32 / ((1 - p) B)`.
pub fn compression_rate(p: f64, bits: f64, overhead_bytes: u64, n: u64) -> f64 {
    let n = n as f64;
    32.0 * n / ((1.0 - p) * bits * n + 8.0 * overhead_bytes as f64)
}

/// Dense FP32 size over a measured compressed size.
pub fn measured_rate(n: u64, compressed_bytes: u64) -> f64 {
    32.0 * n as f64 / (8.0 * compressed_bytes as f64)
}
