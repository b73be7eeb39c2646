use rand::Rng;

use crate::error::Result;
use crate::init::trunc_normal;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Fully-connected layer `y = x W^T + b` over the trailing axis.
///
/// Weight is `(out, in)`, so the parameter count is `out * in` plus `out`
/// when a bias is present.
#[derive(Clone, Debug)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            trunc_normal(&[out_dim, in_dim], 0.02, rng),
        );
        let bias = with_bias.then(|| {
            store.add(
                format!("{name}.bias"),
                ParamKind::Bias,
                Tensor::zeros(&[out_dim]),
            )
        });
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|id| tape.param(store, id));
        tape.linear(x, w, b)
    }

    pub fn param_count(&self) -> u64 {
        (self.out_dim * self.in_dim) as u64
            + if self.bias.is_some() {
                self.out_dim as u64
            } else {
                0
            }
    }

    pub fn weight_param_count(&self) -> u64 {
        (self.out_dim * self.in_dim) as u64
    }

    /// Multiply-accumulates when applied at `positions` input rows.
    pub fn macs(&self, positions: u64) -> u64 {
        positions * self.in_dim as u64 * self.out_dim as u64
    }
}
