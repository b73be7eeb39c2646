use rand::Rng;

use crate::error::Result;
use crate::init::trunc_normal;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Depthwise 3x3 convolution (cross-correlation, stride 1, zero padding 1).
///
/// One 3x3 kernel per channel, so channels never mix and the parameter count
/// is `9C` plus `C` with a bias. Output spatial extents equal the input's.
#[derive(Clone, Debug)]
pub struct DepthwiseConv3x3 {
    pub channels: usize,
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
}

impl DepthwiseConv3x3 {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        with_bias: bool,
    ) -> Self {
        let kernel = store.add(
            format!("{name}.kernel"),
            ParamKind::Weight,
            trunc_normal(&[channels, 3, 3], 0.02, rng),
        );
        let bias = with_bias.then(|| {
            store.add(
                format!("{name}.bias"),
                ParamKind::Bias,
                Tensor::zeros(&[channels]),
            )
        });
        Self {
            channels,
            kernel,
            bias,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let k = tape.param(store, self.kernel);
        let b = self.bias.map(|id| tape.param(store, id));
        tape.dwconv3x3(x, k, b)
    }

    pub fn param_count(&self) -> u64 {
        9 * self.channels as u64
            + if self.bias.is_some() {
                self.channels as u64
            } else {
                0
            }
    }

    pub fn weight_param_count(&self) -> u64 {
        9 * self.channels as u64
    }

    /// 9 taps per output position; zero-padded edge taps are counted like
    /// interior ones, the usual convention for conv cost accounting.
    pub fn macs(&self, h: u64, w: u64) -> u64 {
        9 * h * w * self.channels as u64
    }
}
