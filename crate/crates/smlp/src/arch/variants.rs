//! Named model variants: the main T*/T/S/B ladder plus every ablation
//! configuration (branch removal, per-stage mixing masks, fusion
//! alternatives, branch topologies, dense-MLP and single-stage baselines).

use crate::arch::config::{
    FusionKind, GlobalMixerKind, ModelConfig, SmlpSettings, StageConfig, Topology,
};
use crate::arch::model::Model;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Builder knobs that adjust a named variant; `None` keeps the default.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub resolution: Option<(usize, usize)>,
    pub num_classes: Option<usize>,
    pub embed_dim: Option<usize>,
    pub depths: Option<Vec<usize>>,
    pub ffn_expansion: Option<usize>,
    pub droppath: Option<f64>,
    pub patch: Option<usize>,
    /// Which stages keep their sMLP block (per-stage mixing mask).
    pub smlp_mask: Option<Vec<bool>>,
}

pub const VARIANT_NAMES: &[&str] = &[
    "smlpnet-t-star",
    "smlpnet-t",
    "smlpnet-s",
    "smlpnet-b",
    "local-only",
    "global-only",
    "per-stage-smlp",
    "fusion-sum",
    "fusion-weighted-sum",
    "sequential",
    "sequential-no-identity",
    "sequential-v-first",
    "parallel-no-identity",
    "multistage-dense-mlp",
    "singlestage-dense-mlp",
];

fn base(
    name: &str,
    embed_dim: usize,
    depths: [usize; 4],
    alpha: usize,
    droppath: f64,
) -> ModelConfig {
    ModelConfig {
        name: name.into(),
        img_h: 224,
        img_w: 224,
        patch: 4,
        embed_dim,
        num_classes: 1000,
        ffn_expansion: alpha,
        droppath,
        stages: depths.into_iter().map(StageConfig::smlp).collect(),
    }
}

fn tiny_star() -> ModelConfig {
    base("smlpnet-t-star", 80, [2, 8, 14, 2], 2, 0.0)
}

fn tiny() -> ModelConfig {
    base("smlpnet-t", 80, [2, 8, 14, 2], 3, 0.0)
}

fn small() -> ModelConfig {
    base("smlpnet-s", 96, [2, 10, 24, 2], 3, 0.2)
}

fn big() -> ModelConfig {
    base("smlpnet-b", 112, [2, 10, 24, 2], 3, 0.3)
}

fn with_settings(mut config: ModelConfig, settings: SmlpSettings) -> ModelConfig {
    for stage in &mut config.stages {
        if let GlobalMixerKind::Smlp(s) = &mut stage.mixer {
            *s = settings;
        }
    }
    config
}

/// Resolves a variant name (case-insensitive, `_`/`-` interchangeable,
/// `smlpnet-t*` accepted for the alpha=2 tiny model) into a full config.
pub fn variant_config(name: &str, overrides: &Overrides) -> Result<ModelConfig> {
    let key = name.to_ascii_lowercase().replace('_', "-");
    let mut config = match key.as_str() {
        "smlpnet-t-star" | "smlpnet-t*" | "smlpnet-tstar" => tiny_star(),
        "smlpnet-t" => tiny(),
        "smlpnet-s" => small(),
        "smlpnet-b" => big(),
        // branch-removal ablations build on the alpha=2 tiny model; the
        // local-only one widens to C=112 to stay size-comparable
        "local-only" => {
            let mut config = tiny_star();
            config.name = "local-only".into();
            config.embed_dim = 112;
            for stage in &mut config.stages {
                stage.mixer = GlobalMixerKind::None;
            }
            config
        }
        "global-only" => {
            let mut config = tiny_star();
            config.name = "global-only".into();
            for stage in &mut config.stages {
                stage.use_dwconv = false;
            }
            config
        }
        "per-stage-smlp" => {
            let mut config = big();
            config.name = "per-stage-smlp".into();
            let mask = overrides
                .smlp_mask
                .clone()
                .unwrap_or_else(|| vec![true; config.stages.len()]);
            if mask.len() != config.stages.len() {
                return Err(Error::Config(format!(
                    "smlp mask needs {} entries, got {}",
                    config.stages.len(),
                    mask.len()
                )));
            }
            for (stage, keep) in config.stages.iter_mut().zip(mask) {
                if !keep {
                    stage.mixer = GlobalMixerKind::None;
                }
            }
            config
        }
        "fusion-sum" => {
            let mut config = with_settings(
                small(),
                SmlpSettings {
                    fusion: FusionKind::Sum,
                    ..SmlpSettings::default()
                },
            );
            config.name = "fusion-sum".into();
            config
        }
        "fusion-weighted-sum" => {
            let mut config = with_settings(
                small(),
                SmlpSettings {
                    fusion: FusionKind::WeightedSum,
                    ..SmlpSettings::default()
                },
            );
            config.name = "fusion-weighted-sum".into();
            config
        }
        "sequential" => {
            let mut config = with_settings(
                tiny_star(),
                SmlpSettings {
                    topology: Topology::SequentialHorizontalFirst,
                    ..SmlpSettings::default()
                },
            );
            config.name = "sequential".into();
            config
        }
        "sequential-v-first" => {
            let mut config = with_settings(
                tiny_star(),
                SmlpSettings {
                    topology: Topology::SequentialVerticalFirst,
                    ..SmlpSettings::default()
                },
            );
            config.name = "sequential-v-first".into();
            config
        }
        "sequential-no-identity" => {
            let mut config = with_settings(
                tiny_star(),
                SmlpSettings {
                    topology: Topology::SequentialHorizontalFirst,
                    identity_branch: false,
                    ..SmlpSettings::default()
                },
            );
            config.name = "sequential-no-identity".into();
            config
        }
        "parallel-no-identity" => {
            let mut config = with_settings(
                tiny_star(),
                SmlpSettings {
                    identity_branch: false,
                    ..SmlpSettings::default()
                },
            );
            config.name = "parallel-no-identity".into();
            config
        }
        // dense token MLPs in stages 2-4, locality only in stage 1
        "multistage-dense-mlp" => {
            let mut config = tiny_star();
            config.name = "multistage-dense-mlp".into();
            for (i, stage) in config.stages.iter_mut().enumerate() {
                stage.mixer = if i == 0 {
                    GlobalMixerKind::None
                } else {
                    GlobalMixerKind::DenseMlp { expansion: 4 }
                };
            }
            config
        }
        // one stage at patch 16, all token mixing dense, total depth kept
        "singlestage-dense-mlp" => ModelConfig {
            name: "singlestage-dense-mlp".into(),
            img_h: 224,
            img_w: 224,
            patch: 16,
            embed_dim: 80,
            num_classes: 1000,
            ffn_expansion: 2,
            droppath: 0.0,
            stages: vec![StageConfig {
                depth: 26,
                use_dwconv: true,
                mixer: GlobalMixerKind::DenseMlp { expansion: 4 },
            }],
        },
        _ => return Err(Error::UnknownVariant(name.to_string())),
    };

    if let Some((h, w)) = overrides.resolution {
        config.img_h = h;
        config.img_w = w;
    }
    if let Some(k) = overrides.num_classes {
        config.num_classes = k;
    }
    if let Some(c) = overrides.embed_dim {
        config.embed_dim = c;
    }
    if let Some(alpha) = overrides.ffn_expansion {
        config.ffn_expansion = alpha;
    }
    if let Some(p) = overrides.droppath {
        config.droppath = p;
    }
    if let Some(patch) = overrides.patch {
        config.patch = patch;
    }
    if let Some(depths) = &overrides.depths {
        if depths.len() != config.stages.len() {
            return Err(Error::Config(format!(
                "variant has {} stages, got {} depths",
                config.stages.len(),
                depths.len()
            )));
        }
        for (stage, &d) in config.stages.iter_mut().zip(depths) {
            stage.depth = d;
        }
    }
    config.validate()?;
    Ok(config)
}

pub fn build_variant<T: Scalar>(name: &str, overrides: &Overrides, seed: u64) -> Result<Model<T>> {
    Model::build(variant_config(name, overrides)?, seed)
}
