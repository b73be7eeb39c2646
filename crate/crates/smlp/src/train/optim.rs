//! AdamW: bias-corrected Adam moments plus decoupled weight decay.
//!
//! The decay `w <- w - lr * wd * w` is applied separately from the adaptive
//! update and only to `Weight`-kind parameters; biases and norm gains are
//! never decayed. Moment defaults are beta1 0.9, beta2 0.999, eps 1e-8.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::{cast, Scalar};
use crate::tape::Gradients;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter first/second moments, aligned with the store by index.
/// Buffer entries carry no state.
pub struct AdamState<T> {
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let m = store
            .entries()
            .map(|(_, e)| e.kind.trainable().then(|| Tensor::zeros(e.value.shape())))
            .collect::<Vec<_>>();
        let v = m.clone();
        Self { m, v, step: 0 }
    }
}

/// One optimizer step. A parameter the loss never reached gets a zero
/// gradient (its moments still decay and weight decay still applies).
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let beta1: T = cast(BETA1);
    let beta2: T = cast(BETA2);
    let eps: T = cast(ADAM_EPS);
    let lr_t: T = cast(lr);
    let bias1 = T::one() - beta1.powi(t);
    let bias2 = T::one() - beta2.powi(t);
    let decay_factor: T = cast(1.0 - lr * weight_decay);

    for (id, entry) in store.entries_mut() {
        if !entry.kind.trainable() {
            continue;
        }
        let grad = grads.for_param(id);
        if let Some(g) = grad {
            if g.shape() != entry.value.shape() {
                return Err(Error::shape(
                    format!("gradient for {}", entry.name),
                    format!("{:?}", entry.value.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
        }
        if entry.kind.decays() && weight_decay != 0.0 {
            entry.value.scale_in_place(decay_factor);
        }
        let m = state.m[id.index()].as_mut().unwrap();
        let v = state.v[id.index()].as_mut().unwrap();
        let one_minus_b1 = T::one() - beta1;
        let one_minus_b2 = T::one() - beta2;
        for i in 0..entry.value.numel() {
            let g = grad.map_or(T::zero(), |g| g.data()[i]);
            let mi = beta1 * m.data()[i] + one_minus_b1 * g;
            let vi = beta2 * v.data()[i] + one_minus_b2 * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bias1;
            let v_hat = vi / bias2;
            let cur = entry.value.data()[i];
            entry.value.data_mut()[i] = cur - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::tape::Tape;

    fn scalar_store(w: f64, kind: ParamKind) -> (ParamStore<f64>, crate::params::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", kind, Tensor::scalar(w));
        (store, id)
    }

    fn zero_grads(_store: &ParamStore<f64>) -> Gradients<f64> {
        // a loss that touches nothing: gradients default to zero
        let mut tape = Tape::<f64>::new();
        let c = tape.leaf(Tensor::scalar(0.0));
        tape.backward(c).unwrap()
    }

    #[test]
    fn zero_gradient_fresh_state_applies_pure_decay() {
        let (mut store, id) = scalar_store(2.0, ParamKind::Weight);
        let mut state = AdamState::new(&store);
        let grads = zero_grads(&store);
        adamw_step(&mut store, &grads, &mut state, 1e-3, 0.05).unwrap();
        let expected = 2.0 * (1.0 - 1e-3 * 0.05);
        assert_eq!(store.value(id).item(), expected);
    }

    #[test]
    fn decay_compounds_exactly() {
        let (mut store, id) = scalar_store(1.0, ParamKind::Weight);
        let mut state = AdamState::new(&store);
        let n = 10;
        for _ in 0..n {
            let grads = zero_grads(&store);
            adamw_step(&mut store, &grads, &mut state, 1e-2, 0.5).unwrap();
        }
        let expected = (1.0 - 1e-2 * 0.5f64).powi(n);
        assert!((store.value(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn biases_and_norm_parameters_never_decay() {
        for kind in [ParamKind::Bias, ParamKind::Norm] {
            let (mut store, id) = scalar_store(3.0, kind);
            let mut state = AdamState::new(&store);
            let grads = zero_grads(&store);
            adamw_step(&mut store, &grads, &mut state, 1e-3, 0.05).unwrap();
            assert_eq!(store.value(id).item(), 3.0);
        }
    }

    #[test]
    fn first_step_moves_by_lr_towards_minus_sign_of_gradient() {
        let (mut store, id) = scalar_store(1.0, ParamKind::Weight);
        let mut state = AdamState::new(&store);
        // constant positive gradient via loss = 3 * w
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let scaled = tape.scale(w, 3.0);
        let loss = tape.sum(scaled);
        let grads = tape.backward(loss).unwrap();
        adamw_step(&mut store, &grads, &mut state, 0.1, 0.0).unwrap();
        // bias-corrected first step is -lr * g / (|g| + eps) = -lr up to eps
        let moved = 1.0 - store.value(id).item();
        assert!((moved - 0.1).abs() < 1e-8, "moved {moved}");
    }

    #[test]
    fn hundred_steps_descend_a_parabola() {
        // f(w) = w^2 from w = 1 at lr 0.1 lands well inside |w| < 0.1
        let (mut store, id) = scalar_store(1.0, ParamKind::Weight);
        let mut state = AdamState::new(&store);
        for _ in 0..100 {
            let mut tape = Tape::new();
            let w = tape.param(&store, id);
            let sq = tape.mul(w, w).unwrap();
            let loss = tape.sum(sq);
            let grads = tape.backward(loss).unwrap();
            adamw_step(&mut store, &grads, &mut state, 0.1, 0.0).unwrap();
        }
        let w = store.value(id).item();
        assert!(w.abs() < 0.1, "w = {w}");
    }

    #[test]
    fn gradient_shape_mismatch_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", ParamKind::Weight, Tensor::zeros(&[2, 2]));
        let mut state = AdamState::new(&store);
        // bind the param on a tape, then make its recorded shape diverge by
        // tampering with the stored value's shape
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        *store.value_mut(id) = Tensor::zeros(&[4]);
        assert!(adamw_step(&mut store, &grads, &mut state, 0.1, 0.0).is_err());
    }
}
