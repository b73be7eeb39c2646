use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::scalar::{cast, Scalar};
use crate::tape::{NodeId, Tape};

/// Stochastic depth over a residual branch.
///
/// Train mode keeps each sample's branch with probability `1 - p` and scales
/// kept branches by `1 / (1 - p)`, so the map equals the identity in
/// expectation. Eval mode is the identity.
#[derive(Clone, Copy, Debug)]
pub struct DropPath {
    p: f64,
}

impl DropPath {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "drop-path probability must lie in [0, 1), got {p}"
            )));
        }
        Ok(Self { p })
    }

    pub fn prob(&self) -> f64 {
        self.p
    }

    /// `branch` is `(N, ..)`; axis 0 indexes samples.
    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        branch: NodeId,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        if self.p == 0.0 || mode == Mode::Eval {
            return Ok(branch);
        }
        let rng =
            rng.ok_or_else(|| Error::Config("train-mode DropPath with p > 0 needs an RNG".into()))?;
        let n = tape.value(branch).shape()[0];
        let keep_prob = 1.0 - self.p;
        let scale: T = cast(1.0 / keep_prob);
        let factors: Vec<T> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < keep_prob {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        tape.sample_scale(branch, &factors)
    }
}
