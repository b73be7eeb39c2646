//! Architecture: the sMLP block, mixing modules, patch embedding/merging,
//! staged model assembly and the named-variant builder.

pub mod block;
pub mod config;
pub mod model;
pub mod variants;

pub use block::{ChannelMixing, DenseTokenMlp, GlobalMixer, MixerBlock, SmlpBlock, TokenMixing};
pub use config::{FusionKind, GlobalMixerKind, ModelConfig, SmlpSettings, StageConfig, Topology};
pub use model::{Model, PatchEmbed, PatchMerge, SmlpNet, Stage, IMG_CHANNELS};
pub use variants::{build_variant, variant_config, Overrides, VARIANT_NAMES};
