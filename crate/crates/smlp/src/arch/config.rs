//! Structural description of a network: every field needed to rebuild a
//! model (including each ablation variant) and a canonical text serialization
//! whose digest keys checkpoints.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::textcfg::{parse_bool, TextConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Topology {
    /// Horizontal and vertical mixing run side by side (the default).
    Parallel,
    /// Horizontal mixing feeds vertical mixing.
    SequentialHorizontalFirst,
    /// Vertical mixing feeds horizontal mixing.
    SequentialVerticalFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionKind {
    /// Concatenate the branches and mix with an FC layer (the default).
    ConcatFc,
    /// Element-wise addition; parameter-free.
    Sum,
    /// Per-channel learnable gains, then addition.
    WeightedSum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SmlpSettings {
    pub topology: Topology,
    pub identity_branch: bool,
    pub fusion: FusionKind,
}

impl Default for SmlpSettings {
    fn default() -> Self {
        Self {
            topology: Topology::Parallel,
            identity_branch: true,
            fusion: FusionKind::ConcatFc,
        }
    }
}

impl SmlpSettings {
    pub fn branch_count(&self) -> usize {
        let mixing = match self.topology {
            Topology::Parallel => 2,
            _ => 1,
        };
        mixing + usize::from(self.identity_branch)
    }
}

/// The global token-mixing branch of a stage's blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlobalMixerKind {
    Smlp(SmlpSettings),
    /// Dense token MLP over all HW positions, weights shared across channels.
    DenseMlp {
        expansion: usize,
    },
    /// No global branch (local-only blocks).
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub depth: usize,
    pub use_dwconv: bool,
    pub mixer: GlobalMixerKind,
}

impl StageConfig {
    pub fn smlp(depth: usize) -> Self {
        Self {
            depth,
            use_dwconv: true,
            mixer: GlobalMixerKind::Smlp(SmlpSettings::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub img_h: usize,
    pub img_w: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    /// FFN expansion ratio of the channel-mixing module.
    pub ffn_expansion: usize,
    pub droppath: f64,
    pub stages: Vec<StageConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("model needs at least one stage".into()));
        }
        if self.patch == 0
            || self.embed_dim == 0
            || self.num_classes == 0
            || self.ffn_expansion == 0
        {
            return Err(Error::Config(
                "patch, embed_dim, num_classes and ffn_expansion must be positive".into(),
            ));
        }
        if self.stages.iter().any(|s| s.depth == 0) {
            return Err(Error::Config("stage depths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.droppath) {
            return Err(Error::Config(format!(
                "droppath must lie in [0, 1), got {}",
                self.droppath
            )));
        }
        // spatial halving at each merge must stay integral down to the last
        // stage, and the final grid must keep at least one token per axis
        let downsample = self.patch << (self.stages.len() - 1);
        if self.img_h < downsample || self.img_w < downsample {
            return Err(Error::Config(format!(
                "resolution {}x{} is smaller than one {downsample}x{downsample} token \
                 of the last stage",
                self.img_h, self.img_w
            )));
        }
        if !self.img_h.is_multiple_of(downsample) || !self.img_w.is_multiple_of(downsample) {
            return Err(Error::Config(format!(
                "resolution {}x{} is not divisible by patch {} times 2^{} merges",
                self.img_h,
                self.img_w,
                self.patch,
                self.stages.len() - 1
            )));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if let GlobalMixerKind::DenseMlp { expansion } = stage.mixer {
                if expansion == 0 {
                    return Err(Error::Config(format!(
                        "stage {} dense mixer expansion must be positive",
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// `(h, w, c)` of the token grid inside each stage.
    pub fn stage_dims(&self) -> Vec<(usize, usize, usize)> {
        (0..self.stages.len())
            .map(|i| {
                (
                    (self.img_h / self.patch) >> i,
                    (self.img_w / self.patch) >> i,
                    self.embed_dim << i,
                )
            })
            .collect()
    }

    pub fn last_channels(&self) -> usize {
        self.embed_dim << (self.stages.len() - 1)
    }

    /// Canonical text form; also the checkpoint digest input.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("[model]\n");
        out.push_str(&format!("name = {}\n", self.name));
        out.push_str(&format!("height = {}\n", self.img_h));
        out.push_str(&format!("width = {}\n", self.img_w));
        out.push_str(&format!("patch = {}\n", self.patch));
        out.push_str(&format!("embed_dim = {}\n", self.embed_dim));
        out.push_str(&format!("num_classes = {}\n", self.num_classes));
        out.push_str(&format!("ffn_expansion = {}\n", self.ffn_expansion));
        out.push_str(&format!("droppath = {}\n", self.droppath));
        for (i, stage) in self.stages.iter().enumerate() {
            out.push_str(&format!("\n[stage{}]\n", i + 1));
            out.push_str(&format!("depth = {}\n", stage.depth));
            out.push_str(&format!("dwconv = {}\n", stage.use_dwconv));
            match stage.mixer {
                GlobalMixerKind::Smlp(s) => {
                    out.push_str("mixer = smlp\n");
                    let topology = match s.topology {
                        Topology::Parallel => "parallel",
                        Topology::SequentialHorizontalFirst => "sequential_h_first",
                        Topology::SequentialVerticalFirst => "sequential_v_first",
                    };
                    out.push_str(&format!("topology = {topology}\n"));
                    out.push_str(&format!("identity = {}\n", s.identity_branch));
                    let fusion = match s.fusion {
                        FusionKind::ConcatFc => "concat_fc",
                        FusionKind::Sum => "sum",
                        FusionKind::WeightedSum => "weighted_sum",
                    };
                    out.push_str(&format!("fusion = {fusion}\n"));
                }
                GlobalMixerKind::DenseMlp { expansion } => {
                    out.push_str("mixer = dense_mlp\n");
                    out.push_str(&format!("expansion = {expansion}\n"));
                }
                GlobalMixerKind::None => out.push_str("mixer = none\n"),
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_config(&TextConfig::parse(text)?)
    }

    pub fn from_config(cfg: &TextConfig) -> Result<Self> {
        let mut stages = Vec::new();
        for i in 1.. {
            let section = format!("stage{i}");
            if !cfg.has_section(&section) {
                break;
            }
            let depth = cfg.require_value::<usize>(&section, "depth")?;
            let use_dwconv = parse_bool(cfg.get(&section, "dwconv").unwrap_or("true"))?;
            let mixer = match cfg.get(&section, "mixer").unwrap_or("smlp") {
                "smlp" => {
                    let topology = match cfg.get(&section, "topology").unwrap_or("parallel") {
                        "parallel" => Topology::Parallel,
                        "sequential_h_first" => Topology::SequentialHorizontalFirst,
                        "sequential_v_first" => Topology::SequentialVerticalFirst,
                        other => return Err(Error::Config(format!("unknown topology '{other}'"))),
                    };
                    let identity_branch =
                        parse_bool(cfg.get(&section, "identity").unwrap_or("true"))?;
                    let fusion = match cfg.get(&section, "fusion").unwrap_or("concat_fc") {
                        "concat_fc" => FusionKind::ConcatFc,
                        "sum" => FusionKind::Sum,
                        "weighted_sum" => FusionKind::WeightedSum,
                        other => return Err(Error::Config(format!("unknown fusion '{other}'"))),
                    };
                    GlobalMixerKind::Smlp(SmlpSettings {
                        topology,
                        identity_branch,
                        fusion,
                    })
                }
                "dense_mlp" => GlobalMixerKind::DenseMlp {
                    expansion: cfg
                        .parse_value::<usize>(&section, "expansion")?
                        .unwrap_or(4),
                },
                "none" => GlobalMixerKind::None,
                other => return Err(Error::Config(format!("unknown mixer '{other}'"))),
            };
            stages.push(StageConfig {
                depth,
                use_dwconv,
                mixer,
            });
        }
        let height = cfg.require_value::<usize>("model", "height")?;
        let config = ModelConfig {
            name: cfg.get("model", "name").unwrap_or("custom").to_string(),
            img_h: height,
            img_w: cfg
                .parse_value::<usize>("model", "width")?
                .unwrap_or(height),
            patch: cfg.parse_value::<usize>("model", "patch")?.unwrap_or(4),
            embed_dim: cfg.require_value::<usize>("model", "embed_dim")?,
            num_classes: cfg.require_value::<usize>("model", "num_classes")?,
            ffn_expansion: cfg
                .parse_value::<usize>("model", "ffn_expansion")?
                .unwrap_or(3),
            droppath: cfg.parse_value::<f64>("model", "droppath")?.unwrap_or(0.0),
            stages,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_text().as_bytes());
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
