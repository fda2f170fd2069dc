//! Self-describing binary artifact files.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "OPQART01"
//! 8       1     type tag (1 pruning, 2 quantization, 3 compressed model)
//! 9       1     format version (1)
//! 10      2     reserved, zero
//! 12      32    SHA-256 model hash
//! 44      4     section count S (u32)
//! 48      ...   S sections, each: u64 payload length, payload
//! end-4   4     CRC-32 of every preceding byte
//! ```
//!
//! All integers are little-endian; reals are IEEE-754 little-endian
//! (binary64 for allocation values, binary32 for codebook steps). Strings are
//! a u32 byte length followed by UTF-8. Section payloads per type are described
//! on the `Artifact` impls below.

use std::fs;
use std::path::Path;

use crate::codec::{CompressedLayer, CompressedModel};
use crate::error::{OpqError, Result};
use crate::prune::{Mask, PruningAllocation};
use crate::quant::QuantAllocation;
use crate::tensor::{LayerSpec, ModelHash};

pub const MAGIC: &[u8; 8] = b"OPQART01";
pub const FORMAT_VERSION: u8 = 1;
const HEADER_LEN: usize = 48;

pub trait Artifact: Sized {
    const TAG: u8;
    const KIND: &'static str;

    fn validate(&self) -> Result<()>;
    fn write_sections(&self) -> Vec<Vec<u8>>;
    fn read_sections(sections: Vec<Section<'_>>, hash: ModelHash) -> Result<Self>;
}

#[derive(Default)]
pub(crate) struct ByteWriter(Vec<u8>);

impl ByteWriter {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.0.extend_from_slice(v);
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn finish(self) -> Vec<u8> {
        self.0
    }
}

/// Cursor over one section payload; errors carry absolute file offsets.
pub struct Section<'a> {
    data: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Section<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(OpqError::corrupt(format!("truncated {what}"), self.base + self.pos));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1, "u8")?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, "u32")?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, "u64")?.try_into().unwrap()))
    }
    fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.base + self.pos;
        let v = self.u64()?;
        if v > (self.data.len() - self.pos) as u64 * 8 + 64 {
            return Err(OpqError::corrupt(format!("implausible {what} {v}"), at));
        }
        Ok(v as usize)
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, "f32")?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, "f64")?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.base + self.pos;
        let raw = self.take(n, "string")?;
        String::from_utf8(raw.to_vec()).map_err(|_| OpqError::corrupt("invalid UTF-8 name", at))
    }
    fn offset(&self) -> usize {
        self.base + self.pos
    }
    fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(OpqError::corrupt("trailing bytes in section", self.base + self.pos));
        }
        Ok(())
    }
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (k, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        out[k / 8] |= 0x80 >> (k % 8);
    }
    out
}

fn unpack_bits(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|k| bytes[k / 8] & (0x80 >> (k % 8)) != 0).collect()
}

/// Serialize an artifact (after validating it).
pub fn to_bytes<A: Artifact>(artifact: &A, hash: &ModelHash) -> Result<Vec<u8>> {
    artifact.validate()?;
    let sections = artifact.write_sections();
    let mut w = ByteWriter::default();
    w.bytes(MAGIC);
    w.u8(A::TAG);
    w.u8(FORMAT_VERSION);
    w.bytes(&[0, 0]);
    w.bytes(&hash.0);
    w.u32(sections.len() as u32);
    for s in &sections {
        w.u64(s.len() as u64);
        w.bytes(s);
    }
    let mut bytes = w.finish();
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    Ok(bytes)
}

/// Parse and validate an artifact, returning it with its embedded model hash.
pub fn from_bytes<A: Artifact>(bytes: &[u8]) -> Result<(A, ModelHash)> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(OpqError::corrupt(
            format!("{} artifact shorter than header", A::KIND),
            bytes.len(),
        ));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(OpqError::Checksum {
            context: format!("{} artifact", A::KIND),
            stored,
            computed,
        });
    }
    if &body[..8] != MAGIC {
        return Err(OpqError::corrupt("bad magic", 0));
    }
    if body[8] != A::TAG {
        return Err(OpqError::corrupt(
            format!("expected {} artifact (tag {}), found tag {}", A::KIND, A::TAG, body[8]),
            8,
        ));
    }
    if body[9] != FORMAT_VERSION || body[10..12] != [0, 0] {
        return Err(OpqError::corrupt(format!("unsupported format version {}", body[9]), 9));
    }
    let hash = ModelHash(body[12..44].try_into().unwrap());
    let count = u32::from_le_bytes(body[44..48].try_into().unwrap()) as usize;

    let mut sections = Vec::new();
    let mut pos = HEADER_LEN;
    for _ in 0..count {
        if body.len() - pos < 8 {
            return Err(OpqError::corrupt("truncated section length", pos));
        }
        let len = u64::from_le_bytes(body[pos..pos + 8].try_into().unwrap());
        pos += 8;
        if len > (body.len() - pos) as u64 {
            return Err(OpqError::corrupt(
                format!("section length {len} overruns file"),
                pos - 8,
            ));
        }
        let len = len as usize;
        sections.push(Section {
            data: &body[pos..pos + len],
            pos: 0,
            base: pos,
        });
        pos += len;
    }
    if pos != body.len() {
        return Err(OpqError::corrupt("bytes after last section", pos));
    }
    let artifact = A::read_sections(sections, hash)?;
    artifact.validate()?;
    Ok((artifact, hash))
}

/// Validate, serialize and write atomically (temporary file + rename).
pub fn save_artifact<A: Artifact>(artifact: &A, hash: &ModelHash, path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let bytes = to_bytes(artifact, hash)?;
    write_atomic(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load_artifact<A: Artifact>(path: impl AsRef<Path>) -> Result<(A, ModelHash)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| OpqError::io(path, e))?;
    from_bytes(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| OpqError::io(path, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        OpqError::io(path, e)
    })
}

fn expect_sections(sections: &[Section<'_>], want: usize, kind: &str) -> Result<()> {
    if sections.len() != want {
        return Err(OpqError::corrupt(
            format!("{kind}: {} sections, header declares {want} layers", sections.len()),
            44,
        ));
    }
    Ok(())
}

/// Section 0: `p_target, p_model, p_empirical, lambda, tolerance` (f64), layer count (u32).
/// One section per layer: name, `tau, beta, rate_model, rate_empirical` (f64),
/// mask length (u64), mask bits packed MSB-first.
impl Artifact for PruningAllocation {
    const TAG: u8 = 1;
    const KIND: &'static str = "pruning";

    fn validate(&self) -> Result<()> {
        PruningAllocation::validate(self)
    }

    fn write_sections(&self) -> Vec<Vec<u8>> {
        let mut head = ByteWriter::default();
        for v in [
            self.p_target,
            self.p_model,
            self.p_empirical,
            self.lambda,
            self.tolerance,
        ] {
            head.f64(v);
        }
        head.u32(self.layers.len() as u32);
        let mut out = vec![head.finish()];
        for i in 0..self.layers.len() {
            let mut w = ByteWriter::default();
            w.str(&self.layers[i]);
            for v in [
                self.tau[i],
                self.beta[i],
                self.layer_rate_model[i],
                self.layer_rate_empirical[i],
            ] {
                w.f64(v);
            }
            w.u64(self.masks[i].len() as u64);
            w.bytes(&pack_bits(self.masks[i].bits()));
            out.push(w.finish());
        }
        out
    }

    fn read_sections(sections: Vec<Section<'_>>, _hash: ModelHash) -> Result<Self> {
        let mut iter = sections.into_iter();
        let mut head = iter
            .next()
            .ok_or_else(|| OpqError::corrupt("pruning: no sections", 44))?;
        let (p_target, p_model, p_empirical, lambda, tolerance) =
            (head.f64()?, head.f64()?, head.f64()?, head.f64()?, head.f64()?);
        let n = head.u32()? as usize;
        head.finish()?;
        let rest: Vec<Section<'_>> = iter.collect();
        expect_sections(&rest, n, "pruning")?;
        let mut a = PruningAllocation {
            layers: Vec::with_capacity(n),
            tau: Vec::with_capacity(n),
            lambda,
            beta: Vec::with_capacity(n),
            p_target,
            p_model,
            p_empirical,
            tolerance,
            layer_rate_model: Vec::with_capacity(n),
            layer_rate_empirical: Vec::with_capacity(n),
            masks: Vec::with_capacity(n),
        };
        for mut s in rest {
            a.layers.push(s.str()?);
            a.tau.push(s.f64()?);
            a.beta.push(s.f64()?);
            a.layer_rate_model.push(s.f64()?);
            a.layer_rate_empirical.push(s.f64()?);
            let len = s.len("mask length")?;
            let packed = s.take(len.div_ceil(8), "mask bits")?;
            a.masks.push(Mask::new(unpack_bits(packed, len)));
            s.finish()?;
        }
        Ok(a)
    }
}

/// Section 0: `b_target, lambda, b_effective_continuous, b_effective_rounded` (f64), layer count (u32).
/// One section per layer: name, has-step flag (u8), step (f64, 0 when absent),
/// channel count (u64), then per channel `alpha` (f64), `K` (u64), unpruned count (u64).
impl Artifact for QuantAllocation {
    const TAG: u8 = 2;
    const KIND: &'static str = "quantization";

    fn validate(&self) -> Result<()> {
        QuantAllocation::validate(self)
    }

    fn write_sections(&self) -> Vec<Vec<u8>> {
        let mut head = ByteWriter::default();
        for v in [
            self.b_target,
            self.lambda,
            self.b_effective_continuous,
            self.b_effective_rounded,
        ] {
            head.f64(v);
        }
        head.u32(self.layers.len() as u32);
        let mut out = vec![head.finish()];
        for i in 0..self.layers.len() {
            let mut w = ByteWriter::default();
            w.str(&self.layers[i]);
            w.u8(self.delta[i].is_some() as u8);
            w.f64(self.delta[i].unwrap_or(0.0));
            w.u64(self.alpha[i].len() as u64);
            for j in 0..self.alpha[i].len() {
                w.f64(self.alpha[i][j]);
                w.u64(self.k[i][j]);
                w.u64(self.unpruned[i][j]);
            }
            out.push(w.finish());
        }
        out
    }

    fn read_sections(sections: Vec<Section<'_>>, _hash: ModelHash) -> Result<Self> {
        let mut iter = sections.into_iter();
        let mut head = iter
            .next()
            .ok_or_else(|| OpqError::corrupt("quantization: no sections", 44))?;
        let (b_target, lambda, b_effective_continuous, b_effective_rounded) =
            (head.f64()?, head.f64()?, head.f64()?, head.f64()?);
        let n = head.u32()? as usize;
        head.finish()?;
        let rest: Vec<Section<'_>> = iter.collect();
        expect_sections(&rest, n, "quantization")?;
        let mut q = QuantAllocation {
            layers: Vec::with_capacity(n),
            b_target,
            lambda,
            delta: Vec::with_capacity(n),
            alpha: Vec::with_capacity(n),
            k: Vec::with_capacity(n),
            unpruned: Vec::with_capacity(n),
            b_effective_continuous,
            b_effective_rounded,
        };
        for mut s in rest {
            q.layers.push(s.str()?);
            let at = s.offset();
            let flag = s.u8()?;
            let step = s.f64()?;
            q.delta.push(match flag {
                0 => None,
                1 => Some(step),
                other => return Err(OpqError::corrupt(format!("bad step flag {other}"), at)),
            });
            let c = s.len("channel count")?;
            let (mut alpha, mut k, mut kept) = (Vec::with_capacity(c), Vec::with_capacity(c), Vec::with_capacity(c));
            for _ in 0..c {
                alpha.push(s.f64()?);
                k.push(s.u64()?);
                kept.push(s.u64()?);
            }
            s.finish()?;
            q.alpha.push(alpha);
            q.k.push(k);
            q.unpruned.push(kept);
        }
        Ok(q)
    }
}

/// Section 0: `p_target, b_target` (f64), layer count (u32).
/// One section per layer: name, rank (u32), dims (u64 each), channel axis (u32),
/// step (f32), gap bits (u8), level bits (u8), entry count (u64),
/// stream length (u64), stream bytes, CRC-32 of the preceding section bytes.
impl Artifact for CompressedModel {
    const TAG: u8 = 3;
    const KIND: &'static str = "compressed model";

    fn validate(&self) -> Result<()> {
        CompressedModel::validate(self)
    }

    fn write_sections(&self) -> Vec<Vec<u8>> {
        let mut head = ByteWriter::default();
        head.f64(self.p_target);
        head.f64(self.b_target);
        head.u32(self.layers.len() as u32);
        let mut out = vec![head.finish()];
        for l in &self.layers {
            let mut w = ByteWriter::default();
            w.str(&l.spec.name);
            w.u32(l.spec.shape.len() as u32);
            for &d in &l.spec.shape {
                w.u64(d as u64);
            }
            w.u32(l.spec.channel_axis as u32);
            w.f32(l.delta);
            w.u8(l.gap_bits);
            w.u8(l.level_bits);
            w.u64(l.entries);
            w.u64(l.stream.len() as u64);
            w.bytes(&l.stream);
            let crc = crc32fast::hash(&w.0);
            w.u32(crc);
            out.push(w.finish());
        }
        out
    }

    fn read_sections(sections: Vec<Section<'_>>, hash: ModelHash) -> Result<Self> {
        let mut iter = sections.into_iter();
        let mut head = iter
            .next()
            .ok_or_else(|| OpqError::corrupt("compressed model: no sections", 44))?;
        let p_target = head.f64()?;
        let b_target = head.f64()?;
        let n = head.u32()? as usize;
        head.finish()?;
        let rest: Vec<Section<'_>> = iter.collect();
        expect_sections(&rest, n, "compressed model")?;
        let mut layers = Vec::with_capacity(n);
        for mut s in rest {
            let name = s.str()?;
            let rank = s.u32()? as usize;
            if rank > 16 {
                return Err(OpqError::corrupt(format!("layer {name}: rank {rank}"), s.offset()));
            }
            let shape = (0..rank)
                .map(|_| s.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let channel_axis = s.u32()? as usize;
            let spec = LayerSpec::new(name.clone(), shape, channel_axis)
                .map_err(|e| OpqError::corrupt(e.to_string(), s.offset()))?;
            let delta = s.f32()?;
            let gap_bits = s.u8()?;
            let level_bits = s.u8()?;
            let entries = s.u64()?;
            let stream_len = s.len("stream length")?;
            let stream = s.take(stream_len, "stream")?.to_vec();
            let covered = &s.data[..s.pos];
            let at = s.offset();
            let stored = s.u32()?;
            let computed = crc32fast::hash(covered);
            if stored != computed {
                return Err(OpqError::Checksum {
                    context: format!("layer {name} section at byte {at}"),
                    stored,
                    computed,
                });
            }
            s.finish()?;
            layers.push(CompressedLayer {
                spec,
                delta,
                gap_bits,
                level_bits,
                entries,
                stream,
            });
        }
        Ok(CompressedModel {
            model_hash: hash,
            p_target,
            b_target,
            layers,
        })
    }
}

/// Serialize a compressed model under its own embedded hash.
pub fn compressed_to_bytes(model: &CompressedModel) -> Result<Vec<u8>> {
    to_bytes(model, &model.model_hash)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_bits_msb_first() {
        let bits = [true, false, false, false, false, false, false, true, true];
        let packed = pack_bits(&bits);
        assert_eq!(packed, vec![0b1000_0001, 0b1000_0000]);
        assert_eq!(unpack_bits(&packed, bits.len()), bits);
    }

    #[test]
    fn rejects_short_and_foreign_files() {
        assert!(matches!(
            from_bytes::<QuantAllocation>(b"OPQART01"),
            Err(OpqError::Corrupt { .. })
        ));
        let mut fake = Vec::from(&MAGIC[..]);
        fake.extend_from_slice(&[9, 1, 0, 0]);
        fake.extend_from_slice(&[0; 32]);
        fake.extend_from_slice(&0u32.to_le_bytes());
        let crc = crc32fast::hash(&fake);
        fake.extend_from_slice(&crc.to_le_bytes());
        let err = from_bytes::<PruningAllocation>(&fake).unwrap_err();
        assert!(err.to_string().contains("expected pruning artifact"), "{err}");
    }
}
