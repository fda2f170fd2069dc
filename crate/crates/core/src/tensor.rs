//! Weight tensor container: manifest + raw little-endian binary32 blobs.
//!
//! A model directory holds `manifest.json`, an ordered array of
//! `{name, shape, channel_axis, dtype}` records, and one `<name>.bin` per
//! layer containing the layer's values in row-major order.
//!
//! A *channel* of a layer is the set of elements whose `channel_axis`
//! coordinate equals `j`. With the default axis 0 every channel is a
//! contiguous run of the flat array.

use std::borrow::Cow;
use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{OpqError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(default)]
    pub channel_axis: usize,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, channel_axis: usize) -> Result<Self> {
        let spec = LayerSpec {
            name: name.into(),
            shape,
            channel_axis,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| OpqError::InvalidLayer {
            layer: self.name.clone(),
            message,
        };
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == "." || self.name == ".." {
            return Err(bad("layer name must be a non-empty file-name-safe string".into()));
        }
        if self.shape.is_empty() {
            return Err(bad("shape must have at least one dimension".into()));
        }
        if self.shape.contains(&0) {
            return Err(bad(format!("shape {:?} has a zero dimension", self.shape)));
        }
        if self.channel_axis >= self.shape.len() {
            return Err(bad(format!(
                "channel_axis {} out of range for rank {}",
                self.channel_axis,
                self.shape.len()
            )));
        }
        self.shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad("element count overflows".into()))?;
        Ok(())
    }

    /// Number of weights `N_i`.
    pub fn count(&self) -> usize {
        self.shape.iter().product()
    }

    /// Number of channels `C_i`.
    pub fn channels(&self) -> usize {
        self.shape[self.channel_axis]
    }

    /// Weights per channel `N_ij`.
    pub fn per_channel(&self) -> usize {
        self.count() / self.channels()
    }

    /// Product of the dimensions after the channel axis.
    pub fn inner_stride(&self) -> usize {
        self.shape[self.channel_axis + 1..].iter().product()
    }

    /// Channel owning flat (row-major) index `k`.
    #[inline]
    pub fn channel_of(&self, k: usize) -> usize {
        (k / self.inner_stride()) % self.channels()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub values: Vec<f32>,
}

/// Ordered, validated set of FP32 weight tensors. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTensors {
    layers: Vec<Layer>,
    total: usize,
}

impl ModelTensors {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(OpqError::InvalidArgument("model has no layers".into()));
        }
        let mut seen = HashSet::new();
        for layer in &layers {
            layer.spec.validate()?;
            if !seen.insert(layer.spec.name.as_str()) {
                return Err(OpqError::DuplicateLayer(layer.spec.name.clone()));
            }
            if layer.values.len() != layer.spec.count() {
                return Err(OpqError::LengthMismatch {
                    layer: layer.spec.name.clone(),
                    expected: layer.spec.count(),
                    actual: layer.values.len(),
                });
            }
            if let Some(index) = layer.values.iter().position(|v| !v.is_finite()) {
                return Err(OpqError::NonFinite {
                    layer: layer.spec.name.clone(),
                    index,
                });
            }
        }
        let total = layers.iter().map(|l| l.values.len()).sum();
        Ok(ModelTensors { layers, total })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> Result<&Layer> {
        self.layers.get(i).ok_or(OpqError::OutOfRange {
            what: "layer",
            index: i,
            len: self.layers.len(),
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Total weight count `N`.
    pub fn total_count(&self) -> usize {
        self.total
    }

    /// Values `W_ijk` of channel `channel` in layer `layer`.
    ///
    /// Borrowed when the channel is contiguous (channel axis 0), otherwise
    /// gathered in row-major order of the remaining coordinates.
    pub fn channel_view(&self, layer: usize, channel: usize) -> Result<Cow<'_, [f32]>> {
        let l = self.layer(layer)?;
        let spec = &l.spec;
        let channels = spec.channels();
        if channel >= channels {
            return Err(OpqError::OutOfRange {
                what: "channel",
                index: channel,
                len: channels,
            });
        }
        let inner = spec.inner_stride();
        if spec.channel_axis == 0 {
            return Ok(Cow::Borrowed(&l.values[channel * inner..(channel + 1) * inner]));
        }
        let block = inner * channels;
        let gathered = l
            .values
            .chunks_exact(block)
            .flat_map(|outer| outer[channel * inner..(channel + 1) * inner].iter().copied())
            .collect();
        Ok(Cow::Owned(gathered))
    }

    /// Keep only layers passing `filter`, preserving order.
    pub fn select(&self, filter: &LayerFilter) -> Result<ModelTensors> {
        let layers: Vec<Layer> = self
            .layers
            .iter()
            .filter(|l| filter.accepts(&l.spec.name))
            .cloned()
            .collect();
        if layers.is_empty() {
            return Err(OpqError::InvalidArgument("layer filter excludes every layer".into()));
        }
        ModelTensors::new(layers)
    }

    /// Replace the channel axis of every layer.
    pub fn with_channel_axis(&self, axis: usize) -> Result<ModelTensors> {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                spec: LayerSpec {
                    channel_axis: axis,
                    ..l.spec.clone()
                },
                values: l.values.clone(),
            })
            .collect();
        ModelTensors::new(layers)
    }

    /// SHA-256 over the canonical manifest and blob bytes of every layer.
    pub fn hash(&self) -> ModelHash {
        let mut h = Sha256::new();
        h.update((self.layers.len() as u64).to_le_bytes());
        for l in &self.layers {
            h.update((l.spec.name.len() as u64).to_le_bytes());
            h.update(l.spec.name.as_bytes());
            h.update((l.spec.shape.len() as u64).to_le_bytes());
            for &d in &l.spec.shape {
                h.update((d as u64).to_le_bytes());
            }
            h.update((l.spec.channel_axis as u64).to_le_bytes());
            for v in &l.values {
                h.update(v.to_le_bytes());
            }
        }
        ModelHash(h.finalize().into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ModelHash(pub [u8; 32]);

impl fmt::Display for ModelHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

/// Include/exclude filter over layer names. An empty include list accepts all.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFilter {
    #[serde(default)]
    pub include: Vec<String>,
    #[serde(default)]
    pub exclude: Vec<String>,
}

impl LayerFilter {
    pub fn accepts(&self, name: &str) -> bool {
        (self.include.is_empty() || self.include.iter().any(|n| n == name)) && !self.exclude.iter().any(|n| n == name)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    #[serde(default)]
    channel_axis: usize,
    dtype: String,
}

fn model_dir(path: &Path) -> PathBuf {
    if path.file_name().is_some_and(|f| f == MANIFEST_FILE) {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        path.to_path_buf()
    }
}

/// Load and validate a model container directory.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelTensors> {
    let dir = model_dir(path.as_ref());
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| OpqError::io(&manifest_path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| OpqError::Manifest {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;

    let mut seen = HashSet::new();
    let mut layers = Vec::with_capacity(entries.len());
    for entry in entries {
        if entry.dtype != "f32" {
            return Err(OpqError::Manifest {
                path: manifest_path.clone(),
                message: format!("layer {}: unsupported dtype {:?}", entry.name, entry.dtype),
            });
        }
        if !seen.insert(entry.name.clone()) {
            return Err(OpqError::DuplicateLayer(entry.name));
        }
        let spec = LayerSpec::new(entry.name, entry.shape, entry.channel_axis)?;
        let blob_path = dir.join(format!("{}.bin", spec.name));
        let bytes = fs::read(&blob_path).map_err(|e| OpqError::io(&blob_path, e))?;
        if bytes.len() % 4 != 0 || bytes.len() / 4 != spec.count() {
            return Err(OpqError::LengthMismatch {
                layer: spec.name.clone(),
                expected: spec.count(),
                actual: bytes.len() / 4,
            });
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        layers.push(Layer { spec, values });
    }
    ModelTensors::new(layers)
}

/// Write a model container (manifest + blobs) into `dir`, creating it if needed.
pub fn save_model(model: &ModelTensors, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| OpqError::io(dir, e))?;
    let entries: Vec<ManifestEntry> = model
        .layers()
        .iter()
        .map(|l| ManifestEntry {
            name: l.spec.name.clone(),
            shape: l.spec.shape.clone(),
            channel_axis: l.spec.channel_axis,
            dtype: "f32".into(),
        })
        .collect();
    for l in model.layers() {
        let blob_path = dir.join(format!("{}.bin", l.spec.name));
        let bytes: Vec<u8> = l.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&blob_path, bytes).map_err(|e| OpqError::io(&blob_path, e))?;
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&entries).expect("manifest serializes");
    fs::write(&manifest_path, json).map_err(|e| OpqError::io(&manifest_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_layer() -> ModelTensors {
        ModelTensors::new(vec![
            Layer {
                spec: LayerSpec::new("fc1", vec![4, 3], 0).unwrap(),
                values: (0..12).map(|v| v as f32).collect(),
            },
            Layer {
                spec: LayerSpec::new("fc2", vec![2, 4], 0).unwrap(),
                values: (0..8).map(|v| v as f32 * 0.5).collect(),
            },
        ])
        .unwrap()
    }

    #[test]
    fn counts_follow_shapes() {
        let m = two_layer();
        assert_eq!(m.total_count(), 20);
        assert_eq!(m.layers()[0].spec.channels(), 4);
        assert_eq!(m.layers()[0].spec.per_channel(), 3);
    }

    #[test]
    fn channel_view_axis0_is_contiguous() {
        let m = two_layer();
        let v = m.channel_view(0, 2).unwrap();
        assert!(matches!(v, Cow::Borrowed(_)));
        assert_eq!(&*v, &[6.0, 7.0, 8.0]);
    }

    #[test]
    fn channel_view_out_of_range() {
        let m = two_layer();
        assert!(matches!(
            m.channel_view(0, 4),
            Err(OpqError::OutOfRange { what: "channel", .. })
        ));
        assert!(m.channel_view(2, 0).is_err());
    }

    #[test]
    fn single_channel_view_is_whole_layer() {
        let m = ModelTensors::new(vec![Layer {
            spec: LayerSpec::new("w", vec![1, 5], 0).unwrap(),
            values: vec![1.0, 2.0, 3.0, 4.0, 5.0],
        }])
        .unwrap();
        assert_eq!(&*m.channel_view(0, 0).unwrap(), m.layers()[0].values.as_slice());
    }

    #[test]
    fn channel_view_inner_axis_gathers() {
        // shape [2, 3, 2], axis 1: channel j = elements with middle coordinate j
        let m = ModelTensors::new(vec![Layer {
            spec: LayerSpec::new("conv", vec![2, 3, 2], 1).unwrap(),
            values: (0..12).map(|v| v as f32).collect(),
        }])
        .unwrap();
        assert_eq!(&*m.channel_view(0, 1).unwrap(), &[2.0, 3.0, 8.0, 9.0]);
        let spec = &m.layers()[0].spec;
        assert_eq!(spec.channel_of(8), 1);
        assert_eq!(spec.channel_of(11), 2);
        let total: usize = (0..3).map(|j| m.channel_view(0, j).unwrap().len()).sum();
        assert_eq!(total, 12);
    }

    #[test]
    fn rejects_bad_models() {
        let spec = LayerSpec::new("a", vec![2], 0).unwrap();
        let nan = ModelTensors::new(vec![Layer {
            spec: spec.clone(),
            values: vec![1.0, f32::NAN],
        }]);
        assert!(matches!(nan, Err(OpqError::NonFinite { index: 1, .. })));
        let dup = ModelTensors::new(vec![
            Layer {
                spec: spec.clone(),
                values: vec![1.0, 2.0],
            },
            Layer {
                spec,
                values: vec![1.0, 2.0],
            },
        ]);
        assert!(matches!(dup, Err(OpqError::DuplicateLayer(_))));
        assert!(LayerSpec::new("a", vec![2, 2], 2).is_err());
        assert!(LayerSpec::new("a/b", vec![2], 0).is_err());
    }

    #[test]
    fn filter_and_hash() {
        let m = two_layer();
        let only = m
            .select(&LayerFilter {
                include: vec![],
                exclude: vec!["fc1".into()],
            })
            .unwrap();
        assert_eq!(only.len(), 1);
        assert_eq!(only.total_count(), 8);
        assert_ne!(m.hash(), only.hash());
        assert_eq!(m.hash(), two_layer().hash());
        assert!(m
            .select(&LayerFilter {
                include: vec!["nope".into()],
                exclude: vec![]
            })
            .is_err());
    }
}
