//! Static cost analysis and structural probes.
//!
//! Parameter counts come from an exact walk over the stored tensors; MAC
//! counts multiply each linear/conv application by its position count. One
//! MAC is one multiply-accumulate ("FLOPs" in the usual reporting of these
//! models follows the same convention). Normalization, activation, pooling
//! and bias additions cost zero MACs; bias parameters do count as parameters,
//! the closed forms below are weight-only.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::block::{DenseTokenMlp, GlobalMixer, MixerBlock, SmlpBlock, TokenMixing};
use crate::arch::config::SmlpSettings;
use crate::arch::model::Model;
use crate::arch::variants::{build_variant, Overrides};
use crate::error::{Error, Result};
use crate::init::uniform;
use crate::layers::{DepthwiseConv3x3, Linear, NormLayer};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub weight_params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug)]
pub struct BlockCost {
    pub name: String,
    pub layers: Vec<LayerCost>,
    pub params: u64,
    pub weight_params: u64,
    pub macs: u64,
}

impl BlockCost {
    fn tally(name: String, layers: Vec<LayerCost>) -> Self {
        let params = layers.iter().map(|l| l.params).sum();
        let weight_params = layers.iter().map(|l| l.weight_params).sum();
        let macs = layers.iter().map(|l| l.macs).sum();
        Self {
            name,
            layers,
            params,
            weight_params,
            macs,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StageCost {
    pub name: String,
    pub blocks: Vec<BlockCost>,
    pub params: u64,
    pub weight_params: u64,
    pub macs: u64,
}

impl StageCost {
    fn tally(name: String, blocks: Vec<BlockCost>) -> Self {
        let params = blocks.iter().map(|b| b.params).sum();
        let weight_params = blocks.iter().map(|b| b.weight_params).sum();
        let macs = blocks.iter().map(|b| b.macs).sum();
        Self {
            name,
            blocks,
            params,
            weight_params,
            macs,
        }
    }
}

/// Per-layer, per-block, per-stage and total parameter and MAC counts of one
/// model at one input resolution.
#[derive(Clone, Debug)]
pub struct CostReport {
    pub model: String,
    pub resolution: (usize, usize),
    pub stages: Vec<StageCost>,
    pub params: u64,
    pub weight_params: u64,
    pub macs: u64,
}

impl CostReport {
    fn tally(model: String, resolution: (usize, usize), stages: Vec<StageCost>) -> Self {
        let params = stages.iter().map(|s| s.params).sum();
        let weight_params = stages.iter().map(|s| s.weight_params).sum();
        let macs = stages.iter().map(|s| s.macs).sum();
        Self {
            model,
            resolution,
            stages,
            params,
            weight_params,
            macs,
        }
    }

    pub fn params_millions(&self) -> f64 {
        self.params as f64 / 1e6
    }

    pub fn macs_billions(&self) -> f64 {
        self.macs as f64 / 1e9
    }
}

fn linear_cost<T: Scalar>(
    store: &ParamStore<T>,
    layer: &Linear,
    name: &str,
    positions: u64,
) -> LayerCost {
    let weight_params = store.value(layer.weight).numel() as u64;
    let bias_params = layer
        .bias
        .map(|b| store.value(b).numel() as u64)
        .unwrap_or(0);
    LayerCost {
        name: name.into(),
        params: weight_params + bias_params,
        weight_params,
        macs: layer.macs(positions),
    }
}

fn conv_cost<T: Scalar>(
    store: &ParamStore<T>,
    layer: &DepthwiseConv3x3,
    name: &str,
    h: u64,
    w: u64,
) -> LayerCost {
    let weight_params = store.value(layer.kernel).numel() as u64;
    let bias_params = layer
        .bias
        .map(|b| store.value(b).numel() as u64)
        .unwrap_or(0);
    LayerCost {
        name: name.into(),
        params: weight_params + bias_params,
        weight_params,
        macs: layer.macs(h, w),
    }
}

fn norm_cost<T: Scalar>(store: &ParamStore<T>, layer: &NormLayer, name: &str) -> LayerCost {
    let params = store.value(layer.gamma).numel() as u64 + store.value(layer.beta).numel() as u64;
    LayerCost {
        name: name.into(),
        params,
        weight_params: 0,
        macs: 0,
    }
}

/// Cost of one sMLP block on its own grid: the shared projections applied to
/// every column/row plus the fusion. For the default settings the MACs equal
/// `HWC(H+W) + 3HWC^2` and the weight-only parameters `H^2 + W^2 + 3C^2`.
pub fn smlp_block_cost<T: Scalar>(store: &ParamStore<T>, block: &SmlpBlock) -> BlockCost {
    let (h, w, c) = (block.h as u64, block.w as u64, block.c as u64);
    let mut layers = vec![
        linear_cost(store, &block.w_h, "w_h", w * c),
        linear_cost(store, &block.w_w, "w_w", h * c),
    ];
    if let Some(fuse) = &block.fuse {
        layers.push(linear_cost(store, fuse, "fuse", h * w));
    }
    if let Some(gains) = &block.branch_gains {
        let params: u64 = gains.iter().map(|&g| store.value(g).numel() as u64).sum();
        // per-channel gains are elementwise scales, costed at zero MACs
        layers.push(LayerCost {
            name: "gains".into(),
            params,
            weight_params: 0,
            macs: 0,
        });
    }
    BlockCost::tally("smlp".into(), layers)
}

/// Cost of one dense token-mixing MLP applied over `channels` channel planes:
/// `2 e (HW)^2 C` MACs with `2 e (HW)^2` shared weights.
pub fn dense_mlp_cost<T: Scalar>(
    store: &ParamStore<T>,
    mlp: &DenseTokenMlp,
    channels: usize,
) -> BlockCost {
    let positions = channels as u64;
    BlockCost::tally(
        "token_mlp".into(),
        vec![
            linear_cost(store, &mlp.fc1, "fc1", positions),
            linear_cost(store, &mlp.fc2, "fc2", positions),
        ],
    )
}

fn token_mixing_costs<T: Scalar>(
    store: &ParamStore<T>,
    token: &TokenMixing,
    h: u64,
    w: u64,
    c: usize,
) -> Vec<LayerCost> {
    let mut layers = Vec::new();
    if let Some(bn) = &token.bn_local {
        layers.push(norm_cost(store, bn, "bn_local"));
    }
    if let Some(conv) = &token.dwconv {
        layers.push(conv_cost(store, conv, "dwconv", h, w));
    }
    if let Some(bn) = &token.bn_global {
        layers.push(norm_cost(store, bn, "bn_global"));
    }
    match &token.global {
        Some(GlobalMixer::Smlp(block)) => {
            let cost = smlp_block_cost(store, block);
            layers.extend(cost.layers.into_iter().map(|mut l| {
                l.name = format!("smlp.{}", l.name);
                l
            }));
        }
        Some(GlobalMixer::Dense(mlp)) => {
            let cost = dense_mlp_cost(store, mlp, c);
            layers.extend(cost.layers.into_iter().map(|mut l| {
                l.name = format!("token_mlp.{}", l.name);
                l
            }));
        }
        None => {}
    }
    layers
}

fn mixer_block_cost<T: Scalar>(
    store: &ParamStore<T>,
    block: &MixerBlock,
    name: String,
    h: u64,
    w: u64,
    c: usize,
) -> BlockCost {
    let mut layers = token_mixing_costs(store, &block.token, h, w, c);
    layers.push(norm_cost(store, &block.channel.ln, "ln"));
    layers.push(linear_cost(store, &block.channel.fc1, "ffn.fc1", h * w));
    layers.push(linear_cost(store, &block.channel.fc2, "ffn.fc2", h * w));
    BlockCost::tally(name, layers)
}

/// Exact walk over a constructed model: every stored trainable tensor is
/// visited exactly once, grouped by stem / stage / head.
pub fn count_costs<T: Scalar>(model: &Model<T>) -> CostReport {
    let store = &model.params;
    let net = &model.net;
    let mut stages = Vec::new();

    let (h1, w1) = (net.stages[0].h as u64, net.stages[0].w as u64);
    stages.push(StageCost::tally(
        "stem".into(),
        vec![BlockCost::tally(
            "patch_embed".into(),
            vec![linear_cost(store, &net.embed.proj, "proj", h1 * w1)],
        )],
    ));

    for (i, stage) in net.stages.iter().enumerate() {
        let (h, w) = (stage.h as u64, stage.w as u64);
        let mut blocks = Vec::new();
        if let Some(merge) = &stage.merge {
            blocks.push(BlockCost::tally(
                "merge".into(),
                vec![linear_cost(store, &merge.proj, "proj", h * w)],
            ));
        }
        for (j, block) in stage.blocks.iter().enumerate() {
            blocks.push(mixer_block_cost(
                store,
                block,
                format!("b{}", j + 1),
                h,
                w,
                stage.c,
            ));
        }
        stages.push(StageCost::tally(format!("stage{}", i + 1), blocks));
    }

    stages.push(StageCost::tally(
        "head".into(),
        vec![BlockCost::tally(
            "classifier".into(),
            vec![linear_cost(store, &net.head, "proj", 1)],
        )],
    ));

    CostReport::tally(
        model.config.name.clone(),
        (model.config.img_h, model.config.img_w),
        stages,
    )
}

pub fn count_params<T: Scalar>(model: &Model<T>) -> CostReport {
    count_costs(model)
}

/// MAC counting is resolution-bound: the mixing weights fix the grid, so any
/// other resolution is an error rather than a rescale.
pub fn count_macs<T: Scalar>(model: &Model<T>, resolution: (usize, usize)) -> Result<CostReport> {
    if resolution != (model.config.img_h, model.config.img_w) {
        return Err(Error::Resolution {
            expected_h: model.config.img_h,
            expected_w: model.config.img_w,
            actual_h: resolution.0,
            actual_w: resolution.1,
        });
    }
    Ok(count_costs(model))
}

/// MACs of one default sMLP block: `HWC(H+W) + 3HWC^2`.
pub fn closed_form_smlp(h: u64, w: u64, c: u64) -> u64 {
    h * w * c * (h + w) + 3 * h * w * c * c
}

/// MACs (and shared weights) of one dense token-mixing MLP: `2a(HW)^2 C`
/// MACs, `2a(HW)^2` weights.
pub fn closed_form_dense_mlp(h: u64, w: u64, c: u64, alpha: u64) -> u64 {
    2 * alpha * (h * w) * (h * w) * c
}

/// Weight-count ratio of the dense token MLP over the sparse block.
pub fn dense_to_sparse_weight_ratio(h: u64, w: u64, c: u64, alpha: u64) -> f64 {
    let dense = 2 * alpha * (h * w) * (h * w);
    let sparse = h * h + w * w + 3 * c * c;
    dense as f64 / sparse as f64
}

/// Tokens whose output moved when one source token was perturbed.
#[derive(Clone, Debug)]
pub struct ReceptiveFieldReport {
    pub grid: (usize, usize),
    pub source: (usize, usize),
    pub passes: usize,
    pub influenced: BTreeSet<(usize, usize)>,
}

impl ReceptiveFieldReport {
    /// The set a single pass must produce: the source's row plus column.
    pub fn row_and_column(&self) -> BTreeSet<(usize, usize)> {
        let mut set = BTreeSet::new();
        for j in 0..self.grid.1 {
            set.insert((self.source.0, j));
        }
        for i in 0..self.grid.0 {
            set.insert((i, self.source.1));
        }
        set
    }

    pub fn full_grid(&self) -> BTreeSet<(usize, usize)> {
        (0..self.grid.0)
            .flat_map(|i| (0..self.grid.1).map(move |j| (i, j)))
            .collect()
    }
}

const PROBE_CHANNELS: usize = 3;
const PROBE_TOLERANCE: f64 = 1e-12;

/// Perturbs one token of a random default block and reports which output
/// tokens changed after `passes` applications. Weights are drawn strictly
/// positive so influence paths cannot cancel.
pub fn receptive_probe(
    h: usize,
    w: usize,
    source: (usize, usize),
    passes: usize,
    seed: u64,
) -> Result<ReceptiveFieldReport> {
    if source.0 >= h || source.1 >= w {
        return Err(Error::Config(format!(
            "source token {:?} outside the {h}x{w} grid",
            source
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let block = SmlpBlock::init(
        &mut store,
        &mut rng,
        "probe",
        h,
        w,
        PROBE_CHANNELS,
        SmlpSettings::default(),
    );
    for id in [
        block.w_h.weight,
        block.w_w.weight,
        block.fuse.as_ref().unwrap().weight,
    ] {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = uniform(&shape, 0.1, 1.0, &mut rng);
    }

    let run = |input: Tensor<f64>| -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let mut x = tape.leaf(input);
        for _ in 0..passes {
            x = block.forward(&mut tape, &store, x)?;
        }
        Ok(tape.value(x).clone())
    };

    let base: Tensor<f64> = uniform(&[h, w, PROBE_CHANNELS], -1.0, 1.0, &mut rng);
    let mut perturbed = base.clone();
    for ch in 0..PROBE_CHANNELS {
        let v = perturbed.get(&[source.0, source.1, ch]);
        perturbed.set(&[source.0, source.1, ch], v + 1.0);
    }
    let out_base = run(base)?;
    let out_pert = run(perturbed)?;

    let mut influenced = BTreeSet::new();
    for i in 0..h {
        for j in 0..w {
            let moved = (0..PROBE_CHANNELS).any(|ch| {
                (out_base.get(&[i, j, ch]) - out_pert.get(&[i, j, ch])).abs() > PROBE_TOLERANCE
            });
            if moved {
                influenced.insert((i, j));
            }
        }
    }
    Ok(ReceptiveFieldReport {
        grid: (h, w),
        source,
        passes,
        influenced,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Text,
    Csv,
}

fn fmt_scaled(v: f64) -> String {
    if v >= 0.95 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

/// Renders reports with columns Model, Params(M), MACs(B) in the given order.
pub fn emit_table(reports: &[CostReport], format: TableFormat) -> String {
    let rows: Vec<[String; 3]> = reports
        .iter()
        .map(|r| {
            [
                r.model.clone(),
                fmt_scaled(r.params_millions()),
                fmt_scaled(r.macs_billions()),
            ]
        })
        .collect();
    let header = ["Model", "Params(M)", "MACs(B)"];
    match format {
        TableFormat::Csv => {
            let mut out = String::from("Model,Params(M),MACs(B)\n");
            for row in rows {
                out.push_str(&format!("{},{},{}\n", row[0], row[1], row[2]));
            }
            out
        }
        TableFormat::Text => {
            let mut widths = [header[0].len(), header[1].len(), header[2].len()];
            for row in &rows {
                for (wd, cell) in widths.iter_mut().zip(row) {
                    *wd = (*wd).max(cell.len());
                }
            }
            let mut out = format!(
                "{:<w0$}  {:>w1$}  {:>w2$}\n",
                header[0],
                header[1],
                header[2],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2]
            );
            for row in &rows {
                out.push_str(&format!(
                    "{:<w0$}  {:>w1$}  {:>w2$}\n",
                    row[0],
                    row[1],
                    row[2],
                    w0 = widths[0],
                    w1 = widths[1],
                    w2 = widths[2]
                ));
            }
            out
        }
    }
}

/// The four main models, in size order.
pub fn main_model_reports(seed: u64) -> Result<Vec<CostReport>> {
    ["smlpnet-t-star", "smlpnet-t", "smlpnet-s", "smlpnet-b"]
        .iter()
        .map(|name| {
            let model: Model<f32> = build_variant(name, &Overrides::default(), seed)?;
            Ok(count_costs(&model))
        })
        .collect()
}

/// The per-stage mixing sweep on the base model: sMLP removed from the front,
/// one stage at a time, down to the local-only network.
pub fn stage_mask_sweep_reports(seed: u64) -> Result<Vec<CostReport>> {
    let masks = [
        [true, true, true, true],
        [false, true, true, true],
        [false, false, true, true],
        [false, false, false, true],
        [false, false, false, false],
    ];
    masks
        .iter()
        .map(|mask| {
            let overrides = Overrides {
                smlp_mask: Some(mask.to_vec()),
                ..Overrides::default()
            };
            let model: Model<f32> = build_variant("per-stage-smlp", &overrides, seed)?;
            let mut report = count_costs(&model);
            let tag: String = mask.iter().map(|&m| if m { '1' } else { '0' }).collect();
            report.model = format!("per-stage-smlp[{tag}]");
            Ok(report)
        })
        .collect()
}
