use crate::error::Result;
use crate::layers::Mode;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::{cast, Scalar};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Normalizes each channel over all batch and spatial positions; keeps
    /// running statistics for eval mode.
    Batch,
    /// Normalizes each token's channel vector independently.
    Layer,
}

/// Batch or layer normalization with learnable per-channel gamma/beta.
///
/// Both kinds use the biased (population) variance with eps 1e-5, so outputs
/// are bit-reproducible across runs. Running statistics are `Buffer` entries
/// in the store: saved in checkpoints, excluded from parameter counts.
#[derive(Clone, Debug)]
pub struct NormLayer {
    pub kind: NormKind,
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    running_mean: Option<ParamId>,
    running_var: Option<ParamId>,
}

impl NormLayer {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: NormKind,
        channels: usize,
    ) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            ParamKind::Norm,
            Tensor::ones(&[channels]),
        );
        let beta = store.add(
            format!("{name}.beta"),
            ParamKind::Norm,
            Tensor::zeros(&[channels]),
        );
        let (running_mean, running_var) = match kind {
            NormKind::Batch => (
                Some(store.add(
                    format!("{name}.running_mean"),
                    ParamKind::Buffer,
                    Tensor::zeros(&[channels]),
                )),
                Some(store.add(
                    format!("{name}.running_var"),
                    ParamKind::Buffer,
                    Tensor::ones(&[channels]),
                )),
            ),
            NormKind::Layer => (None, None),
        };
        Self {
            kind,
            channels,
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        let eps: T = cast(NORM_EPS);
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        match self.kind {
            NormKind::Layer => tape.layernorm(x, gamma, beta, eps),
            NormKind::Batch => match mode {
                Mode::Train => {
                    let (node, stats) = tape.batchnorm_train(x, gamma, beta, eps)?;
                    let momentum: T = cast(BN_MOMENTUM);
                    let keep = T::one() - momentum;
                    let rm = self.running_mean.unwrap();
                    let rv = self.running_var.unwrap();
                    for (slot, &batch) in store
                        .value_mut(rm)
                        .data_mut()
                        .iter_mut()
                        .zip(stats.mean.data())
                    {
                        *slot = keep * *slot + momentum * batch;
                    }
                    for (slot, &batch) in store
                        .value_mut(rv)
                        .data_mut()
                        .iter_mut()
                        .zip(stats.var.data())
                    {
                        *slot = keep * *slot + momentum * batch;
                    }
                    Ok(node)
                }
                Mode::Eval => {
                    let mean = store.value(self.running_mean.unwrap()).clone();
                    let var = store.value(self.running_var.unwrap()).clone();
                    tape.batchnorm_eval(x, gamma, beta, &mean, &var, eps)
                }
            },
        }
    }

    /// gamma + beta; running statistics are buffers, not parameters.
    pub fn param_count(&self) -> u64 {
        2 * self.channels as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bn_fixture(c: usize) -> (NormLayer, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let layer = NormLayer::init(&mut store, "bn", NormKind::Batch, c);
        (layer, store)
    }

    #[test]
    fn constant_input_train_mode_gives_zeros() {
        let (layer, mut store) = bn_fixture(2);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 3, 3, 2], 4.2));
        let y = layer
            .forward(&mut tape, &mut store, x, Mode::Train)
            .unwrap();
        // variance is zero, the eps floor keeps it finite: (x - mean) = 0
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_two_channel_token() {
        let mut store = ParamStore::new();
        let layer = NormLayer::init(&mut store, "ln", NormKind::Layer, 2);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap());
        let y = layer.forward(&mut tape, &mut store, x, Mode::Eval).unwrap();
        let out = tape.value(y).data();
        // population variance of [1,3] is 1; eps shifts the result by ~5e-6
        assert!((out[0] + 1.0).abs() < 1e-4, "{out:?}");
        assert!((out[1] - 1.0).abs() < 1e-4, "{out:?}");
    }

    #[test]
    fn eval_mode_with_unit_stats_is_affine_identity() {
        let (layer, mut store) = bn_fixture(3);
        // fresh running stats are mean 0 / var 1
        let mut tape = Tape::new();
        let input = Tensor::from_fn(&[2, 2, 3], |i| i as f64 * 0.25 - 1.0);
        let x = tape.leaf(input.clone());
        let y = layer.forward(&mut tape, &mut store, x, Mode::Eval).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(input.data()) {
            assert!((got - want).abs() < 1e-5);
        }
    }

    #[test]
    fn train_mode_updates_running_statistics() {
        let (layer, mut store) = bn_fixture(1);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        layer
            .forward(&mut tape, &mut store, x, Mode::Train)
            .unwrap();
        let rm = store.value(layer.running_mean.unwrap()).data()[0];
        let rv = store.value(layer.running_var.unwrap()).data()[0];
        // momentum 0.1: 0.9 * 0 + 0.1 * 2.5, 0.9 * 1 + 0.1 * 1.25
        assert!((rm - 0.25).abs() < 1e-12);
        assert!((rv - 1.025).abs() < 1e-12);
    }

    #[test]
    fn param_count_is_two_c() {
        let (bn, _) = bn_fixture(16);
        assert_eq!(bn.param_count(), 32);
    }
}
