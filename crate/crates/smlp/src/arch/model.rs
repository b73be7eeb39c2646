//! Full network assembly: patch embedding, staged mixer blocks with patch
//! merging between stages, global average pooling and the linear head.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::block::{ChannelMixing, MixerBlock, TokenMixing};
use crate::arch::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{DropPath, Linear, Mode};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

pub const IMG_CHANNELS: usize = 3;

/// Splits the image into non-overlapping `patch x patch` squares, flattens
/// each to `patch * patch * 3` values and maps them linearly to `C`.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub patch: usize,
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        patch: usize,
        embed_dim: usize,
    ) -> Self {
        let in_dim = patch * patch * IMG_CHANNELS;
        Self {
            patch,
            proj: Linear::init(store, rng, name, in_dim, embed_dim, true),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let patches = tape.extract_patches(x, self.patch)?;
        self.proj.forward(tape, store, patches)
    }
}

/// Downsampling between stages: concatenates each 2x2 token neighborhood to
/// `4C` and maps it linearly to `2C`, halving both spatial extents.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub proj: Linear,
}

impl PatchMerge {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
    ) -> Self {
        Self {
            proj: Linear::init(store, rng, name, 4 * in_channels, 2 * in_channels, true),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let merged = tape.extract_patches(x, 2)?;
        self.proj.forward(tape, store, merged)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    /// Present from the second stage on.
    pub merge: Option<PatchMerge>,
    pub blocks: Vec<MixerBlock>,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

/// The assembled network. Parameters live in a separate [`ParamStore`];
/// see [`Model`] for the owning bundle.
#[derive(Clone, Debug)]
pub struct SmlpNet {
    pub embed: PatchEmbed,
    pub stages: Vec<Stage>,
    pub head: Linear,
    pub img_h: usize,
    pub img_w: usize,
    pub num_classes: usize,
}

impl SmlpNet {
    pub fn build<T: Scalar, R: Rng>(
        config: &ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let droppath = DropPath::new(config.droppath)?;
        let embed = PatchEmbed::init(store, rng, "stem", config.patch, config.embed_dim);
        let dims = config.stage_dims();
        let mut stages = Vec::with_capacity(config.stages.len());
        for (i, (stage_cfg, &(h, w, c))) in config.stages.iter().zip(&dims).enumerate() {
            let prefix = format!("s{}", i + 1);
            let merge =
                (i > 0).then(|| PatchMerge::init(store, rng, &format!("{prefix}.merge"), c / 2));
            let blocks = (0..stage_cfg.depth)
                .map(|j| {
                    let name = format!("{prefix}.b{}", j + 1);
                    MixerBlock {
                        token: TokenMixing::init(
                            store,
                            rng,
                            &format!("{name}.tok"),
                            h,
                            w,
                            c,
                            stage_cfg,
                            droppath,
                        ),
                        channel: ChannelMixing::init(
                            store,
                            rng,
                            &format!("{name}.ch"),
                            c,
                            config.ffn_expansion,
                            droppath,
                        ),
                    }
                })
                .collect();
            stages.push(Stage {
                merge,
                blocks,
                h,
                w,
                c,
            });
        }
        let head = Linear::init(
            store,
            rng,
            "head",
            config.last_channels(),
            config.num_classes,
            true,
        );
        Ok(Self {
            embed,
            stages,
            head,
            img_h: config.img_h,
            img_w: config.img_w,
            num_classes: config.num_classes,
        })
    }

    /// `batch` is `(N, H, W, 3)`; returns `(N, num_classes)` logits.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        batch: NodeId,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let shape = tape.value(batch).shape().to_vec();
        if shape.len() != 4 || shape[3] != IMG_CHANNELS {
            return Err(Error::shape(
                "model input",
                "rank 4 (N, H, W, 3)",
                format!("{shape:?}"),
            ));
        }
        if (shape[1], shape[2]) != (self.img_h, self.img_w) {
            return Err(Error::Resolution {
                expected_h: self.img_h,
                expected_w: self.img_w,
                actual_h: shape[1],
                actual_w: shape[2],
            });
        }
        let mut x = self.embed.forward(tape, store, batch)?;
        for stage in &self.stages {
            if let Some(merge) = &stage.merge {
                x = merge.forward(tape, store, x)?;
            }
            for block in &stage.blocks {
                x = block.forward(tape, store, x, mode, rng.as_deref_mut())?;
            }
        }
        let pooled = tape.spatial_mean(x)?;
        self.head.forward(tape, store, pooled)
    }
}

/// A network together with its parameters and the config that built it.
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub net: SmlpNet,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = SmlpNet::build(&config, &mut params, &mut rng)?;
        Ok(Self {
            config,
            net,
            params,
        })
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        batch: NodeId,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let Model { net, params, .. } = self;
        net.forward(tape, params, batch, mode, rng)
    }
}
