//! One-shot pruning and unified channel-wise quantization allocation.
//!
//! Given only pre-trained weight tensors, a target pruning rate `p*` and a
//! target bitwidth `B`, this crate:
//!
//! 1. fits a zero-centered Laplace scale to every layer ([`laplace`]),
//! 2. solves one global magnitude threshold meeting `p*` and builds the
//!    pruning masks ([`prune`]),
//! 3. solves one quantization step per layer, shared by all of its channels,
//!    meeting the average bin budget `2^B` ([`quant`]),
//! 4. applies `M o Q(W)` and stores the result as an index-difference sparse
//!    stream ([`codec`], [`artifact`]),
//! 5. compares analytic and empirical errors ([`analysis`]).
//!
//! ```
//! use opq::{laplace, prune, quant, synth};
//!
//! let cfg = synth::SynthConfig::uniform(&[0.02, 0.05], 4096, 16, 7).unwrap();
//! let model = synth::synth_model(&cfg).unwrap();
//! let fits = laplace::fit_model(&model, &laplace::FitConfig::default()).unwrap();
//! let pruning = prune::allocate_pruning(&model, &fits, 0.8, 1e-10).unwrap();
//! let q = quant::allocate_quantization(&model, &pruning.masks, 3.0).unwrap();
//! assert!((pruning.p_model - 0.8).abs() < 1e-10);
//! assert!(q.delta.iter().all(|d| d.is_some()));
//! ```

// `!(x > 0.0)` is used on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod artifact;
pub mod bits;
pub mod cli;
pub mod codec;
pub mod error;
pub mod laplace;
pub mod prune;
pub mod quant;
pub mod synth;
pub mod tensor;

pub use error::{OpqError, Result};
pub use tensor::{load_model, save_model, Layer, LayerFilter, LayerSpec, ModelHash, ModelTensors};
