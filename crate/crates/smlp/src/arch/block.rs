//! The sparse-MLP block and the mixing modules built around it.
//!
//! An sMLP block mixes tokens along the two grid axes with shared 1D
//! projections: one `H x H` map applied to every column (vertical mixing,
//! weights `w_h`) and one `W x W` map applied to every row (horizontal
//! mixing, weights `w_w`), plus an identity branch. Branch outputs are fused
//! by concat + FC by default. With the defaults the weight-only parameter
//! count is exactly `H^2 + W^2 + 3C^2`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::arch::config::{FusionKind, GlobalMixerKind, SmlpSettings, StageConfig, Topology};
use crate::error::{Error, Result};
use crate::layers::{DepthwiseConv3x3, DropPath, Linear, Mode, NormKind, NormLayer};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::{cast, Scalar};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Inserts a unit batch axis for rank-3 `(H,W,C)` inputs.
fn ensure_batched<T: Scalar>(tape: &mut Tape<T>, x: NodeId) -> Result<(NodeId, bool)> {
    let shape = tape.value(x).shape().to_vec();
    match shape.len() {
        3 => {
            let batched = tape.reshape(x, &[1, shape[0], shape[1], shape[2]])?;
            Ok((batched, true))
        }
        4 => Ok((x, false)),
        _ => Err(Error::shape(
            "token grid",
            "rank 3 (H,W,C) or rank 4 (N,H,W,C)",
            format!("{shape:?}"),
        )),
    }
}

fn restore_rank<T: Scalar>(tape: &mut Tape<T>, y: NodeId, was_rank3: bool) -> Result<NodeId> {
    if !was_rank3 {
        return Ok(y);
    }
    let shape = tape.value(y).shape().to_vec();
    tape.reshape(y, &shape[1..])
}

#[derive(Clone, Debug)]
pub struct SmlpBlock {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub settings: SmlpSettings,
    /// `H x H` vertical mixing, shared by every column.
    pub w_h: Linear,
    /// `W x W` horizontal mixing, shared by every row.
    pub w_w: Linear,
    /// Present for concat-FC fusion: `(branches * C) -> C`.
    pub fuse: Option<Linear>,
    /// Present for weighted-sum fusion: one per-channel gain vector per branch.
    pub branch_gains: Option<Vec<ParamId>>,
}

impl SmlpBlock {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        h: usize,
        w: usize,
        c: usize,
        settings: SmlpSettings,
    ) -> Self {
        let w_h = Linear::init(store, rng, &format!("{name}.w_h"), h, h, true);
        let w_w = Linear::init(store, rng, &format!("{name}.w_w"), w, w, true);
        let branches = settings.branch_count();
        let (fuse, branch_gains) = match settings.fusion {
            FusionKind::ConcatFc => (
                Some(Linear::init(
                    store,
                    rng,
                    &format!("{name}.fuse"),
                    branches * c,
                    c,
                    true,
                )),
                None,
            ),
            FusionKind::Sum => (None, None),
            FusionKind::WeightedSum => {
                let init: T = cast(1.0 / branches as f64);
                let gains = (0..branches)
                    .map(|b| {
                        store.add(
                            format!("{name}.gain{b}"),
                            ParamKind::Norm,
                            Tensor::full(&[c], init),
                        )
                    })
                    .collect();
                (None, Some(gains))
            }
        };
        Self {
            h,
            w,
            c,
            settings,
            w_h,
            w_w,
            fuse,
            branch_gains,
        }
    }

    fn check_grid<T: Scalar>(&self, tape: &Tape<T>, x: NodeId) -> Result<()> {
        let shape = tape.value(x).shape();
        let (h, w, c) = (shape[1], shape[2], shape[3]);
        if (h, w) != (self.h, self.w) {
            return Err(Error::Resolution {
                expected_h: self.h,
                expected_w: self.w,
                actual_h: h,
                actual_w: w,
            });
        }
        if c != self.c {
            return Err(Error::shape(
                "sMLP channels",
                format!("{}", self.c),
                format!("{c}"),
            ));
        }
        Ok(())
    }

    /// Applies the shared `H x H` projection along the vertical axis:
    /// every column of every channel plane is mixed by the same weights.
    pub fn mix_vertical<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let turned = tape.permute(x, &[0, 2, 3, 1])?; // (N, W, C, H)
        let mixed = self.w_h.forward(tape, store, turned)?;
        tape.permute(mixed, &[0, 3, 1, 2])
    }

    /// Applies the shared `W x W` projection along the horizontal axis.
    pub fn mix_horizontal<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let turned = tape.permute(x, &[0, 1, 3, 2])?; // (N, H, C, W)
        let mixed = self.w_w.forward(tape, store, turned)?;
        tape.permute(mixed, &[0, 1, 3, 2])
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let (x, was_rank3) = ensure_batched(tape, x)?;
        self.check_grid(tape, x)?;
        let mut branches = Vec::with_capacity(3);
        match self.settings.topology {
            Topology::Parallel => {
                branches.push(self.mix_vertical(tape, store, x)?);
                branches.push(self.mix_horizontal(tape, store, x)?);
            }
            Topology::SequentialHorizontalFirst => {
                let hz = self.mix_horizontal(tape, store, x)?;
                branches.push(self.mix_vertical(tape, store, hz)?);
            }
            Topology::SequentialVerticalFirst => {
                let vt = self.mix_vertical(tape, store, x)?;
                branches.push(self.mix_horizontal(tape, store, vt)?);
            }
        }
        if self.settings.identity_branch {
            branches.push(x);
        }
        let fused = match self.settings.fusion {
            FusionKind::ConcatFc => {
                let cat = tape.concat_last(&branches)?;
                self.fuse.as_ref().unwrap().forward(tape, store, cat)?
            }
            FusionKind::Sum => {
                let mut acc = branches[0];
                for &b in &branches[1..] {
                    acc = tape.add(acc, b)?;
                }
                acc
            }
            FusionKind::WeightedSum => {
                let gains = self.branch_gains.as_ref().unwrap();
                let mut acc = None;
                for (&branch, &gain) in branches.iter().zip(gains) {
                    let g = tape.param(store, gain);
                    let scaled = tape.channel_mul(branch, g)?;
                    acc = Some(match acc {
                        None => scaled,
                        Some(a) => tape.add(a, scaled)?,
                    });
                }
                acc.unwrap()
            }
        };
        restore_rank(tape, fused, was_rank3)
    }
}

/// Dense token-mixing MLP: flattens the grid to `HW` tokens and mixes them
/// with two shared linear layers (`HW -> e*HW -> HW`) applied per channel.
#[derive(Clone, Debug)]
pub struct DenseTokenMlp {
    pub h: usize,
    pub w: usize,
    pub expansion: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl DenseTokenMlp {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        h: usize,
        w: usize,
        expansion: usize,
    ) -> Self {
        let tokens = h * w;
        let hidden = expansion * tokens;
        Self {
            h,
            w,
            expansion,
            fc1: Linear::init(store, rng, &format!("{name}.fc1"), tokens, hidden, true),
            fc2: Linear::init(store, rng, &format!("{name}.fc2"), hidden, tokens, true),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let (x, was_rank3) = ensure_batched(tape, x)?;
        let shape = tape.value(x).shape().to_vec();
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        if (h, w) != (self.h, self.w) {
            return Err(Error::Resolution {
                expected_h: self.h,
                expected_w: self.w,
                actual_h: h,
                actual_w: w,
            });
        }
        let flat = tape.reshape(x, &[n, h * w, c])?;
        let turned = tape.permute(flat, &[0, 2, 1])?; // (N, C, HW)
        let hidden = self.fc1.forward(tape, store, turned)?;
        let hidden = tape.gelu(hidden);
        let mixed = self.fc2.forward(tape, store, hidden)?;
        let back = tape.permute(mixed, &[0, 2, 1])?;
        let y = tape.reshape(back, &[n, h, w, c])?;
        restore_rank(tape, y, was_rank3)
    }
}

#[derive(Clone, Debug)]
pub enum GlobalMixer {
    Smlp(SmlpBlock),
    Dense(DenseTokenMlp),
}

impl GlobalMixer {
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        match self {
            GlobalMixer::Smlp(block) => block.forward(tape, store, x),
            GlobalMixer::Dense(mlp) => mlp.forward(tape, store, x),
        }
    }
}

/// Token-mixing module: a local depthwise-conv residual followed by a global
/// mixing residual, both pre-normalized by batch norm and wrapped in
/// DropPath. Either residual can be absent in ablation variants. Shapes are
/// preserved throughout.
#[derive(Clone, Debug)]
pub struct TokenMixing {
    pub bn_local: Option<NormLayer>,
    pub dwconv: Option<DepthwiseConv3x3>,
    pub bn_global: Option<NormLayer>,
    pub global: Option<GlobalMixer>,
    pub droppath: DropPath,
}

impl TokenMixing {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        h: usize,
        w: usize,
        c: usize,
        stage: &StageConfig,
        droppath: DropPath,
    ) -> Self {
        let (bn_local, dwconv) = if stage.use_dwconv {
            (
                Some(NormLayer::init(
                    store,
                    &format!("{name}.bn_local"),
                    NormKind::Batch,
                    c,
                )),
                Some(DepthwiseConv3x3::init(
                    store,
                    rng,
                    &format!("{name}.dwconv"),
                    c,
                    true,
                )),
            )
        } else {
            (None, None)
        };
        let (bn_global, global) = match stage.mixer {
            GlobalMixerKind::Smlp(settings) => (
                Some(NormLayer::init(
                    store,
                    &format!("{name}.bn_global"),
                    NormKind::Batch,
                    c,
                )),
                Some(GlobalMixer::Smlp(SmlpBlock::init(
                    store,
                    rng,
                    &format!("{name}.smlp"),
                    h,
                    w,
                    c,
                    settings,
                ))),
            ),
            GlobalMixerKind::DenseMlp { expansion } => (
                Some(NormLayer::init(
                    store,
                    &format!("{name}.bn_global"),
                    NormKind::Batch,
                    c,
                )),
                Some(GlobalMixer::Dense(DenseTokenMlp::init(
                    store,
                    rng,
                    &format!("{name}.token_mlp"),
                    h,
                    w,
                    expansion,
                ))),
            ),
            GlobalMixerKind::None => (None, None),
        };
        Self {
            bn_local,
            dwconv,
            bn_global,
            global,
            droppath,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: NodeId,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let mut x = x;
        if let (Some(bn), Some(conv)) = (&self.bn_local, &self.dwconv) {
            let normed = bn.forward(tape, store, x, mode)?;
            let local = conv.forward(tape, store, normed)?;
            let local = self.droppath.apply(tape, local, mode, rng.as_deref_mut())?;
            x = tape.add(x, local)?;
        }
        if let (Some(bn), Some(global)) = (&self.bn_global, &self.global) {
            let normed = bn.forward(tape, store, x, mode)?;
            let mixed = global.forward(tape, store, normed)?;
            let mixed = self.droppath.apply(tape, mixed, mode, rng)?;
            x = tape.add(x, mixed)?;
        }
        Ok(x)
    }
}

/// Channel-mixing module: `x + DropPath(FC2(GeLU(FC1(LN(x)))))`, where FC1
/// expands `C` to `expansion * C` and FC2 projects back.
#[derive(Clone, Debug)]
pub struct ChannelMixing {
    pub ln: NormLayer,
    pub fc1: Linear,
    pub fc2: Linear,
    pub droppath: DropPath,
}

impl ChannelMixing {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c: usize,
        expansion: usize,
        droppath: DropPath,
    ) -> Self {
        let hidden = expansion * c;
        Self {
            ln: NormLayer::init(store, &format!("{name}.ln"), NormKind::Layer, c),
            fc1: Linear::init(store, rng, &format!("{name}.fc1"), c, hidden, true),
            fc2: Linear::init(store, rng, &format!("{name}.fc2"), hidden, c, true),
            droppath,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: NodeId,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let normed = self.ln.forward(tape, store, x, mode)?;
        let hidden = self.fc1.forward(tape, store, normed)?;
        let hidden = tape.gelu(hidden);
        let out = self.fc2.forward(tape, store, hidden)?;
        let out = self.droppath.apply(tape, out, mode, rng)?;
        tape.add(x, out)
    }
}

/// One token-mixing + channel-mixing pair.
#[derive(Clone, Debug)]
pub struct MixerBlock {
    pub token: TokenMixing,
    pub channel: ChannelMixing,
}

impl MixerBlock {
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: NodeId,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let x = self
            .token
            .forward(tape, store, x, mode, rng.as_deref_mut())?;
        self.channel.forward(tape, store, x, mode, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn fixture(
        h: usize,
        w: usize,
        c: usize,
        settings: SmlpSettings,
        seed: u64,
    ) -> (SmlpBlock, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = SmlpBlock::init(&mut store, &mut rng, "smlp", h, w, c, settings);
        (block, store)
    }

    fn run(block: &SmlpBlock, store: &ParamStore<f64>, input: Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(input);
        let y = block.forward(&mut tape, store, x).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn zero_input_zero_biases_gives_zero_output() {
        let (block, store) = fixture(3, 5, 2, SmlpSettings::default(), 1);
        let out = run(&block, &store, Tensor::zeros(&[3, 5, 2]));
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_weights_and_averaging_fuse_pass_input_through() {
        // W_H = W_W = I and fuse = [1/3, 1/3, 1/3] averages three copies of x.
        let (block, mut store) = fixture(2, 2, 1, SmlpSettings::default(), 2);
        let eye2 = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        *store.value_mut(block.w_h.weight) = eye2.clone();
        *store.value_mut(block.w_w.weight) = eye2;
        *store.value_mut(block.fuse.as_ref().unwrap().weight) =
            Tensor::new(vec![1, 3], vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).unwrap();
        let input = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = run(&block, &store, input.clone());
        for (got, want) in out.data().iter().zip(input.data()) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    /// Independent nested-loop evaluation of the default block: mix rows,
    /// mix columns, concatenate, fuse by explicit summation.
    #[allow(clippy::needless_range_loop)]
    fn naive_smlp(
        x: &Tensor<f64>,
        wh: &Tensor<f64>,
        bh: &[f64],
        ww: &Tensor<f64>,
        bw: &[f64],
        wf: &Tensor<f64>,
        bf: &[f64],
    ) -> Tensor<f64> {
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = Tensor::zeros(&[h, w, c]);
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    // vertical: mix along the column at fixed (j, ch)
                    let mut xv = bh[i];
                    for i2 in 0..h {
                        xv += wh.get(&[i, i2]) * x.get(&[i2, j, ch]);
                    }
                    // horizontal: mix along the row at fixed (i, ch)
                    let mut xh = bw[j];
                    for j2 in 0..w {
                        xh += ww.get(&[j, j2]) * x.get(&[i, j2, ch]);
                    }
                    // the fuse FC sees concat(vertical, horizontal, identity)
                    for oc in 0..c {
                        let cur = out.get(&[i, j, oc]);
                        out.set(
                            &[i, j, oc],
                            cur + wf.get(&[oc, ch]) * xv
                                + wf.get(&[oc, c + ch]) * xh
                                + wf.get(&[oc, 2 * c + ch]) * x.get(&[i, j, ch]),
                        );
                    }
                }
            }
        }
        for i in 0..h {
            for j in 0..w {
                for oc in 0..c {
                    let cur = out.get(&[i, j, oc]);
                    out.set(&[i, j, oc], cur + bf[oc]);
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive_loop_oracle() {
        for (h, w, c, seed) in [(2, 2, 1, 3u64), (3, 4, 2, 4), (5, 3, 3, 5)] {
            let (block, mut store) = fixture(h, w, c, SmlpSettings::default(), seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            // nonzero biases so the oracle exercises them too
            for id in [
                block.w_h.bias.unwrap(),
                block.w_w.bias.unwrap(),
                block.fuse.as_ref().unwrap().bias.unwrap(),
            ] {
                *store.value_mut(id) =
                    crate::init::uniform(store.value(id).shape(), -0.5, 0.5, &mut rng);
            }
            let input: Tensor<f64> = crate::init::uniform(&[h, w, c], -1.0, 1.0, &mut rng);
            let got = run(&block, &store, input.clone());
            let expected = naive_smlp(
                &input,
                store.value(block.w_h.weight),
                store.value(block.w_h.bias.unwrap()).data(),
                store.value(block.w_w.weight),
                store.value(block.w_w.bias.unwrap()).data(),
                store.value(block.fuse.as_ref().unwrap().weight),
                store
                    .value(block.fuse.as_ref().unwrap().bias.unwrap())
                    .data(),
            );
            for (g, e) in got.data().iter().zip(expected.data()) {
                assert!((g - e).abs() < 1e-12, "{g} vs {e} at {h}x{w}x{c}");
            }
        }
    }

    #[test]
    fn resolution_mismatch_reports_extents() {
        let (block, store) = fixture(4, 4, 2, SmlpSettings::default(), 6);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(&[5, 4, 2]));
        let err = block.forward(&mut tape, &store, x).unwrap_err();
        match err {
            Error::Resolution {
                expected_h,
                expected_w,
                actual_h,
                actual_w,
            } => {
                assert_eq!((expected_h, expected_w), (4, 4));
                assert_eq!((actual_h, actual_w), (5, 4));
            }
            other => panic!("wrong error {other}"),
        }
    }

    #[test]
    fn row_permutation_commutes_with_horizontal_mixing() {
        // all rows share W_W, so permuting rows then mixing equals mixing
        // then permuting, bit-exactly
        let (block, store) = fixture(4, 5, 3, SmlpSettings::default(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let input: Tensor<f64> = crate::init::uniform(&[4, 5, 3], -1.0, 1.0, &mut rng);
        let sigma = [2usize, 0, 3, 1];
        let permuted = Tensor::from_fn(&[4, 5, 3], |flat| {
            let (i, rest) = (flat / 15, flat % 15);
            input.data()[sigma[i] * 15 + rest]
        });

        let mix = |x: Tensor<f64>| {
            let mut tape = Tape::new();
            let id = tape.leaf(x);
            let (b, _) = ensure_batched(&mut tape, id).unwrap();
            let y = block.mix_horizontal(&mut tape, &store, b).unwrap();
            tape.value(y).clone()
        };
        let mixed_permuted = mix(permuted);
        let mixed = mix(input);
        let expected = Tensor::from_fn(&[1, 4, 5, 3], |flat| {
            let (i, rest) = (flat / 15, flat % 15);
            mixed.data()[sigma[i] * 15 + rest]
        });
        assert_eq!(mixed_permuted, expected);
    }

    #[test]
    fn sequential_orders_differ_for_generic_weights() {
        // With zero biases the two orders coincide: the axis operators act on
        // independent axes and commute. Generic weights include nonzero
        // projection biases, and those break the symmetry.
        let hf = SmlpSettings {
            topology: Topology::SequentialHorizontalFirst,
            ..SmlpSettings::default()
        };
        let vf = SmlpSettings {
            topology: Topology::SequentialVerticalFirst,
            ..SmlpSettings::default()
        };
        // same seed, same parameter shapes in the same order: identical weights
        let (block_hf, mut store_hf) = fixture(4, 4, 2, hf, 9);
        let (block_vf, mut store_vf) = fixture(4, 4, 2, vf, 9);
        assert_eq!(
            store_hf.value(block_hf.w_h.weight),
            store_vf.value(block_vf.w_h.weight)
        );
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let bias_h: Tensor<f64> = crate::init::uniform(&[4], -0.5, 0.5, &mut rng);
        let bias_w: Tensor<f64> = crate::init::uniform(&[4], -0.5, 0.5, &mut rng);
        for (block, store) in [(&block_hf, &mut store_hf), (&block_vf, &mut store_vf)] {
            *store.value_mut(block.w_h.bias.unwrap()) = bias_h.clone();
            *store.value_mut(block.w_w.bias.unwrap()) = bias_w.clone();
        }
        let input: Tensor<f64> = crate::init::uniform(&[4, 4, 2], -1.0, 1.0, &mut rng);
        let a = run(&block_hf, &store_hf, input.clone());
        let b = run(&block_vf, &store_vf, input);
        let max_diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 1e-9, "orders coincide, diff {max_diff}");
    }

    #[test]
    fn fusion_and_branch_variants_preserve_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let input: Tensor<f64> = crate::init::uniform(&[3, 4, 2], -1.0, 1.0, &mut rng);
        for fusion in [
            FusionKind::ConcatFc,
            FusionKind::Sum,
            FusionKind::WeightedSum,
        ] {
            for topology in [
                Topology::Parallel,
                Topology::SequentialHorizontalFirst,
                Topology::SequentialVerticalFirst,
            ] {
                for identity_branch in [true, false] {
                    let settings = SmlpSettings {
                        topology,
                        identity_branch,
                        fusion,
                    };
                    let (block, store) = fixture(3, 4, 2, settings, 40);
                    let out = run(&block, &store, input.clone());
                    assert_eq!(out.shape(), &[3, 4, 2]);
                }
            }
        }
    }

    #[test]
    fn weighted_sum_at_init_averages_branches() {
        let settings = SmlpSettings {
            fusion: FusionKind::WeightedSum,
            ..SmlpSettings::default()
        };
        let (block, mut store) = fixture(2, 2, 1, settings, 50);
        let eye2 = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        *store.value_mut(block.w_h.weight) = eye2.clone();
        *store.value_mut(block.w_w.weight) = eye2;
        // gains start at 1/3 each, so three identity branches average to x
        let input = Tensor::new(vec![2, 2, 1], vec![4.0, -2.0, 0.5, 1.0]).unwrap();
        let out = run(&block, &store, input.clone());
        for (g, e) in out.data().iter().zip(input.data()) {
            assert!((g - e).abs() < 1e-15);
        }
    }

    #[test]
    fn token_mixing_with_zeroed_branches_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let stage = StageConfig::smlp(1);
        let mixing = TokenMixing::init(
            &mut store,
            &mut rng,
            "tok",
            4,
            4,
            3,
            &stage,
            DropPath::new(0.0).unwrap(),
        );
        // zero the conv kernel/bias and the fuse weights/bias: both residual
        // branches contribute exactly zero
        let conv = mixing.dwconv.as_ref().unwrap();
        *store.value_mut(conv.kernel) = Tensor::zeros(&[3, 3, 3]);
        *store.value_mut(conv.bias.unwrap()) = Tensor::zeros(&[3]);
        if let Some(GlobalMixer::Smlp(block)) = &mixing.global {
            let fuse = block.fuse.as_ref().unwrap();
            *store.value_mut(fuse.weight) = Tensor::zeros(&[3, 9]);
            *store.value_mut(fuse.bias.unwrap()) = Tensor::zeros(&[3]);
        }
        let input: Tensor<f64> = crate::init::uniform(&[2, 4, 4, 3], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let y = mixing
            .forward(&mut tape, &mut store, x, Mode::Eval, None)
            .unwrap();
        assert_eq!(tape.value(y), &input);
    }

    #[test]
    fn local_only_and_global_only_drop_the_other_branch() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let local_only = StageConfig {
            depth: 1,
            use_dwconv: true,
            mixer: GlobalMixerKind::None,
        };
        let tm = TokenMixing::init(
            &mut store,
            &mut rng,
            "a",
            4,
            4,
            2,
            &local_only,
            DropPath::new(0.0).unwrap(),
        );
        assert!(tm.global.is_none() && tm.dwconv.is_some());

        let global_only = StageConfig {
            depth: 1,
            use_dwconv: false,
            mixer: GlobalMixerKind::Smlp(SmlpSettings::default()),
        };
        let tm = TokenMixing::init(
            &mut store,
            &mut rng,
            "b",
            4,
            4,
            2,
            &global_only,
            DropPath::new(0.0).unwrap(),
        );
        assert!(tm.global.is_some() && tm.dwconv.is_none() && tm.bn_local.is_none());
    }

    #[test]
    fn channel_mixing_hidden_extent_and_zero_projection_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let cm = ChannelMixing::init(
            &mut store,
            &mut rng,
            "ch",
            80,
            3,
            DropPath::new(0.0).unwrap(),
        );
        assert_eq!(cm.fc1.out_dim, 240);

        let cm_small =
            ChannelMixing::init(&mut store, &mut rng, "s", 4, 2, DropPath::new(0.0).unwrap());
        *store.value_mut(cm_small.fc2.weight) = Tensor::zeros(&[4, 8]);
        let input: Tensor<f64> = crate::init::uniform(&[1, 2, 2, 4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let y = cm_small
            .forward(&mut tape, &mut store, x, Mode::Eval, None)
            .unwrap();
        assert_eq!(tape.value(y), &input);
    }

    #[test]
    fn channel_mixing_parameter_count_closed_form() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let (c, alpha) = (16usize, 3usize);
        let cm = ChannelMixing::init(
            &mut store,
            &mut rng,
            "ch",
            c,
            alpha,
            DropPath::new(0.0).unwrap(),
        );
        let counted = cm.fc1.param_count() + cm.fc2.param_count() + cm.ln.param_count();
        let closed = 2 * alpha * c * c + alpha * c + c + 2 * c;
        assert_eq!(counted, closed as u64);
    }
}
