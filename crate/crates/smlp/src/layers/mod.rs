//! Parameterized layers: linear, depthwise 3x3 convolution, batch/layer
//! norm, and DropPath.
//!
//! Layers hold [`crate::params::ParamId`] handles plus static dimensions;
//! the tensors themselves live in a [`crate::params::ParamStore`]. Forward
//! methods are generic over the scalar type and record onto a [`crate::Tape`].

mod conv;
mod droppath;
mod linear;
mod norm;

pub use conv::DepthwiseConv3x3;
pub use droppath::DropPath;
pub use linear::Linear;
pub use norm::{NormKind, NormLayer};

/// Whether a forward pass trains (batch-norm batch statistics, DropPath
/// sampling) or evaluates (frozen statistics, DropPath identity).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train)
    }
}
