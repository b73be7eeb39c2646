//! Finite-difference verification of tape gradients.
//!
//! All checks run at `f64` with central differences
//! `(f(x + eps e) - f(x - eps e)) / (2 eps)` and report the worst relative
//! error, with `max(|a|, |b|, 1e-8)` as the denominator.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn scalar_value(tape: &Tape<f64>, id: NodeId) -> Result<f64> {
    let v = tape.value(id);
    if !v.is_scalar() {
        return Err(Error::NonScalarLoss { numel: v.numel() });
    }
    Ok(v.item())
}

/// Checks the tape gradient of `f` with respect to every coordinate of every
/// tensor in `inputs`. `f` receives fresh leaves on a fresh tape per call and
/// must return a scalar node.
pub fn gradcheck_inputs<F>(mut f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let analytic: Vec<Option<Tensor<f64>>> = {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &ids)?;
        scalar_value(&tape, loss)?;
        let grads = tape.backward(loss)?;
        ids.iter().map(|&id| grads.get(id).cloned()).collect()
    };

    let eval = |f: &mut F, perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &ids)?;
        scalar_value(&tape, loss)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for coord in 0..input.numel() {
            let orig = input.data()[coord];
            work[ti].data_mut()[coord] = orig + eps;
            let plus = eval(&mut f, &work)?;
            work[ti].data_mut()[coord] = orig - eps;
            let minus = eval(&mut f, &work)?;
            work[ti].data_mut()[coord] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let an = analytic[ti].as_ref().map_or(0.0, |g| g.data()[coord]);
            worst = worst.max(rel_error(an, fd));
        }
    }
    Ok(worst)
}

/// Checks tape gradients with respect to stored parameters. `forward` builds
/// the scalar loss from the store's current values; parameters are perturbed
/// in place between evaluations and restored afterwards. The closure may
/// update `Buffer` entries (batch-norm running statistics) — those are never
/// perturbed or differentiated, and in train mode they are outputs of the
/// forward pass, not inputs, so the finite differences stay valid.
///
/// `max_coords_per_param` caps the coordinates sampled per parameter tensor
/// (0 means all); large models are spot-checked rather than swept.
pub fn gradcheck_params<F>(
    mut forward: F,
    store: &mut ParamStore<f64>,
    eps: f64,
    max_coords_per_param: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &mut ParamStore<f64>) -> Result<NodeId>,
{
    let analytic: Vec<Option<Tensor<f64>>> = {
        let mut tape = Tape::new();
        let loss = forward(&mut tape, store)?;
        scalar_value(&tape, loss)?;
        let grads = tape.backward(loss)?;
        store.ids().map(|id| grads.for_param(id).cloned()).collect()
    };

    let mut worst = 0.0f64;
    let param_ids: Vec<_> = store
        .entries()
        .filter(|(_, e)| e.kind != ParamKind::Buffer)
        .map(|(id, _)| id)
        .collect();
    for pid in param_ids {
        let numel = store.value(pid).numel();
        let mut coords: Vec<usize> = (0..numel).collect();
        if max_coords_per_param > 0 && numel > max_coords_per_param {
            coords.shuffle(rng);
            coords.truncate(max_coords_per_param);
        }
        for coord in coords {
            let orig = store.value(pid).data()[coord];
            store.value_mut(pid).data_mut()[coord] = orig + eps;
            let plus = {
                let mut tape = Tape::new();
                let loss = forward(&mut tape, store)?;
                scalar_value(&tape, loss)?
            };
            store.value_mut(pid).data_mut()[coord] = orig - eps;
            let minus = {
                let mut tape = Tape::new();
                let loss = forward(&mut tape, store)?;
                scalar_value(&tape, loss)?
            };
            store.value_mut(pid).data_mut()[coord] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let an = analytic[pid.index()]
                .as_ref()
                .map_or(0.0, |g| g.data()[coord]);
            worst = worst.max(rel_error(an, fd));
        }
    }
    Ok(worst)
}
