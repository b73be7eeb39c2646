//! An attention-free vision backbone built from axial sparse-MLP token
//! mixing, depthwise 3x3 convolutions, and per-token feed-forward channel
//! mixing, arranged in a four-stage pyramid.
//!
//! The crate is self-contained: a reverse-mode autodiff tensor core, the
//! layers and model assembly (including every ablation variant), static
//! parameter/MAC analyzers with the closed-form cost expressions, a
//! receptive-field probe, and a desk-scale training harness for the CIFAR-10
//! binary format.
//!
//! Numeric work is generic over the scalar type: `f32` for training, `f64`
//! for every verification path (gradient checks, receptive-field probes).
//! Concrete aliases for both live at the crate root.
//!
//! ```
//! use smlp::analyzer::count_costs;
//! use smlp::arch::{build_variant, Overrides};
//! use smlp::layers::Mode;
//! use smlp::{Model32, Tape32, Tensor32};
//!
//! // a desk-sized take on the tiny layout
//! let overrides = Overrides {
//!     resolution: Some((32, 32)),
//!     embed_dim: Some(16),
//!     depths: Some(vec![1, 1, 1, 1]),
//!     num_classes: Some(10),
//!     ..Overrides::default()
//! };
//! let mut model: Model32 = build_variant("smlpnet-t", &overrides, 0).unwrap();
//! assert!(count_costs(&model).params > 0);
//!
//! let mut tape = Tape32::new();
//! let image = tape.leaf(Tensor32::zeros(&[1, 32, 32, 3]));
//! let logits = model.forward(&mut tape, image, Mode::Eval, None).unwrap();
//! assert_eq!(tape.value(logits).shape(), &[1, 10]);
//! ```

pub mod analyzer;
pub mod arch;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod textcfg;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamId, ParamKind, ParamStore};
pub use scalar::{cast, Scalar};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

pub use arch::{Model, ModelConfig, SmlpNet};
pub use layers::Mode;

/// Training-precision aliases.
pub type Tensor32 = Tensor<f32>;
pub type Tape32 = Tape<f32>;
pub type Model32 = Model<f32>;
pub type ParamStore32 = ParamStore<f32>;

/// Verification-precision aliases.
pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
pub type Model64 = Model<f64>;
pub type ParamStore64 = ParamStore<f64>;
