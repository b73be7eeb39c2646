//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Tape`] records every operation of a forward pass in topological order;
//! [`Tape::backward`] replays the records in reverse, accumulating gradients
//! additively across fan-out. One tape serves one forward/backward pass and is
//! confined to a single thread; a fresh pass gets a fresh tape.
//!
//! ```
//! use smlp::{Tape64, Tensor64};
//!
//! let mut tape = Tape64::new();
//! let x = tape.leaf(Tensor64::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq); // sum of squares
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
//! ```

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{cast, Scalar};
use crate::tensor::{inverse_permutation, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Per-channel batch statistics a train-mode batch norm produces, so the
/// layer can fold them into its running estimates.
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

enum Op<T> {
    Leaf,
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: T,
    },
    Gelu {
        x: NodeId,
    },
    Permute {
        x: NodeId,
        axes: Vec<usize>,
    },
    Reshape {
        x: NodeId,
    },
    ConcatLast {
        parts: Vec<NodeId>,
        widths: Vec<usize>,
    },
    ExtractPatches {
        x: NodeId,
        patch: usize,
    },
    DwConv3x3 {
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Tensor<T>,
        inv_std: Tensor<T>,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Tensor<T>,
        inv_std: Tensor<T>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Tensor<T>,
        inv_std: Tensor<T>,
    },
    ChannelMul {
        x: NodeId,
        w: NodeId,
    },
    SampleScale {
        x: NodeId,
        factors: Vec<T>,
    },
    SpatialMean {
        x: NodeId,
    },
    Sum {
        x: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        smoothing: T,
        probs: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_leaves: HashMap<ParamId, NodeId>,
}

/// Gradient map produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    param_leaves: HashMap<ParamId, NodeId>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.by_node[id.0].as_ref()
    }

    /// Gradient for a bound parameter; `None` means no path from the loss
    /// reached it (treated as a zero gradient by the optimizer).
    pub fn for_param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.param_leaves.get(&id).and_then(|n| self.get(*n))
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Records an input or parameter value as a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Binds a stored parameter as a leaf. Repeated bindings of the same
    /// parameter return the same node, so fan-out gradients accumulate.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_leaves.get(&id) {
            return node;
        }
        let node = self.push(store.value(id).clone(), Op::Leaf);
        self.param_leaves.insert(id, node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    /// `y = x W^T + b` over the last axis; all leading axes are batch.
    /// `w` must be `(out, in)`, `b` `(out)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (out_dim, in_dim) = {
            let ws = self.value(w).shape();
            if ws.len() != 2 {
                return Err(Error::shape("linear weight", "rank 2", format!("{ws:?}")));
            }
            (ws[0], ws[1])
        };
        let xs = self.value(x).shape().to_vec();
        let last = *xs
            .last()
            .ok_or_else(|| Error::shape("linear input", "rank >= 1", "rank 0"))?;
        if last != in_dim {
            return Err(Error::shape(
                "linear input",
                format!("trailing extent {in_dim}"),
                format!("{xs:?}"),
            ));
        }
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs != [out_dim] {
                return Err(Error::shape(
                    "linear bias",
                    format!("[{out_dim}]"),
                    format!("{bs:?}"),
                ));
            }
        }
        let rows = self.value(x).numel() / in_dim;
        let mut out = vec![T::zero(); rows * out_dim];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            for i in 0..rows {
                let x_row = &xd[i * in_dim..(i + 1) * in_dim];
                let y_row = &mut out[i * out_dim..(i + 1) * out_dim];
                for (j, y) in y_row.iter_mut().enumerate() {
                    let w_row = &wd[j * in_dim..(j + 1) * in_dim];
                    let mut acc = T::zero();
                    for (&xv, &wv) in x_row.iter().zip(w_row) {
                        acc += xv * wv;
                    }
                    *y = acc;
                }
            }
            if let Some(b) = b {
                let bd = self.value(b).data();
                for i in 0..rows {
                    let y_row = &mut out[i * out_dim..(i + 1) * out_dim];
                    for (y, &bv) in y_row.iter_mut().zip(bd) {
                        *y += bv;
                    }
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = out_dim;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x, c })
    }

    /// Exact GeLU: `x * Phi(x)` with the Gaussian CDF written via `erf`.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(gelu_scalar);
        self.push(value, Op::Gelu { x })
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let value = self.value(x).permuted(axes)?;
        Ok(self.push(
            value,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Concatenates along the last axis. All parts must share leading extents.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Config("concat of zero tensors".into()));
        }
        let lead = {
            let s = self.value(parts[0]).shape();
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(
                    "concat leading extents",
                    format!("{lead:?}"),
                    format!("{:?}", &s[..s.len() - 1]),
                ));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![T::zero(); rows * total];
        let mut col = 0;
        for (&p, &wd) in parts.iter().zip(&widths) {
            let pd = self.value(p).data();
            for r in 0..rows {
                out[r * total + col..r * total + col + wd]
                    .copy_from_slice(&pd[r * wd..(r + 1) * wd]);
            }
            col += wd;
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::ConcatLast {
                parts: parts.to_vec(),
                widths,
            },
        ))
    }

    /// Non-overlapping `patch x patch` neighborhoods flattened into the channel
    /// axis: `(.., H, W, C) -> (.., H/p, W/p, p*p*C)`. Within a patch the
    /// layout is row-major over (dy, dx), channels fastest.
    pub fn extract_patches(&mut self, x: NodeId, patch: usize) -> Result<NodeId> {
        let (n, h, w, c, rank3) = grid_dims("extract_patches", self.value(x).shape())?;
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::shape(
                "extract_patches",
                format!("spatial extents divisible by {patch}"),
                format!("{h}x{w}"),
            ));
        }
        let (oh, ow, oc) = (h / patch, w / patch, patch * patch * c);
        let sample = h * w * c;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * sample];
        for s in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            let src = s * sample + ((i * patch + dy) * w + (j * patch + dx)) * c;
                            let dst =
                                s * sample + ((i * ow + j) * patch * patch + dy * patch + dx) * c;
                            out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                        }
                    }
                }
            }
        }
        let shape = if rank3 {
            vec![oh, ow, oc]
        } else {
            vec![n, oh, ow, oc]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::ExtractPatches { x, patch }))
    }

    /// Per-channel 3x3 cross-correlation, stride 1, zero padding 1.
    /// `kernel` is `(C, 3, 3)`, `bias` `(C)`. Channels never mix.
    pub fn dwconv3x3(&mut self, x: NodeId, kernel: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let (n, h, w, c, _) = grid_dims("dwconv3x3", self.value(x).shape())?;
        let ks = self.value(kernel).shape();
        if ks != [c, 3, 3] {
            return Err(Error::shape(
                "dwconv3x3 kernel",
                format!("[{c}, 3, 3]"),
                format!("{ks:?}"),
            ));
        }
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [c] {
                return Err(Error::shape(
                    "dwconv3x3 bias",
                    format!("[{c}]"),
                    format!("{bs:?}"),
                ));
            }
        }
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let sample = h * w * c;
        let mut out = vec![T::zero(); n * sample];
        for s in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let dst = s * sample + (i * w + j) * c;
                    for (u, v) in TAPS {
                        let (si, sj) = (i as isize + u - 1, j as isize + v - 1);
                        if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                            continue;
                        }
                        let src = s * sample + (si as usize * w + sj as usize) * c;
                        let toff = (u * 3 + v) as usize;
                        for ch in 0..c {
                            out[dst + ch] += xd[src + ch] * kd[ch * 9 + toff];
                        }
                    }
                }
            }
        }
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in out.chunks_mut(c) {
                for (y, &bv) in row.iter_mut().zip(bd) {
                    *y += bv;
                }
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(value, Op::DwConv3x3 { x, kernel, bias }))
    }

    /// Train-mode batch norm over every axis except the last (channel) axis,
    /// using the biased (population) variance. Returns the batch statistics
    /// so the owning layer can update its running estimates.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    ) -> Result<(NodeId, BatchStats<T>)> {
        let c = channels_of("batchnorm", self.value(x).shape())?;
        check_channel_vec("batchnorm gamma", self.value(gamma).shape(), c)?;
        check_channel_vec("batchnorm beta", self.value(beta).shape(), c)?;
        let m = self.value(x).numel() / c;
        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        for (i, &v) in xd.iter().enumerate() {
            mean[i % c] += v;
        }
        let inv_m = T::one() / cast::<T>(m as f64);
        for v in &mut mean {
            *v *= inv_m;
        }
        let mut var = vec![T::zero(); c];
        for (i, &v) in xd.iter().enumerate() {
            let d = v - mean[i % c];
            var[i % c] += d * d;
        }
        for v in &mut var {
            *v *= inv_m;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let out: Vec<T> = xd
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = i % c;
                gd[ch] * (v - mean[ch]) * inv_std[ch] + bd[ch]
            })
            .collect();
        let mean_t = Tensor::new(vec![c], mean)?;
        let var_t = Tensor::new(vec![c], var)?;
        let inv_std_t = Tensor::new(vec![c], inv_std)?;
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let node = self.push(
            value,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean: mean_t.clone(),
                inv_std: inv_std_t,
            },
        );
        Ok((
            node,
            BatchStats {
                mean: mean_t,
                var: var_t,
            },
        ))
    }

    /// Eval-mode batch norm: a deterministic per-channel affine map built from
    /// frozen running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
    ) -> Result<NodeId> {
        let c = channels_of("batchnorm", self.value(x).shape())?;
        check_channel_vec("batchnorm gamma", self.value(gamma).shape(), c)?;
        check_channel_vec("batchnorm running stats", running_mean.shape(), c)?;
        let inv_std: Vec<T> = running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let inv_std = Tensor::new(vec![c], inv_std)?;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let md = running_mean.data();
        let sd = inv_std.data();
        let out: Vec<T> = xd
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = i % c;
                gd[ch] * (v - md[ch]) * sd[ch] + bd[ch]
            })
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.clone(),
                inv_std,
            },
        ))
    }

    /// Layer norm over the trailing channel axis of every token, with the
    /// biased (population) variance.
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        let c = channels_of("layernorm", self.value(x).shape())?;
        check_channel_vec("layernorm gamma", self.value(gamma).shape(), c)?;
        check_channel_vec("layernorm beta", self.value(beta).shape(), c)?;
        let rows = self.value(x).numel() / c;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let inv_c = T::one() / cast::<T>(c as f64);
        let mut mean = Vec::with_capacity(rows);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); rows * c];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mut mu = T::zero();
            for &v in row {
                mu += v;
            }
            mu *= inv_c;
            let mut var = T::zero();
            for &v in row {
                let d = v - mu;
                var += d * d;
            }
            var *= inv_c;
            let istd = T::one() / (var + eps).sqrt();
            mean.push(mu);
            inv_std.push(istd);
            let orow = &mut out[r * c..(r + 1) * c];
            for (k, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
                *o = gd[k] * (v - mu) * istd + bd[k];
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let mean = Tensor::new(vec![rows], mean)?;
        let inv_std = Tensor::new(vec![rows], inv_std)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
        ))
    }

    /// `y[.., ch] = x[.., ch] * w[ch]`: a learnable per-channel gain.
    pub fn channel_mul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let c = channels_of("channel_mul", self.value(x).shape())?;
        check_channel_vec("channel_mul weights", self.value(w).shape(), c)?;
        let wd = self.value(w).data().to_vec();
        let value = {
            let xd = self.value(x).data();
            let out: Vec<T> = xd.iter().enumerate().map(|(i, &v)| v * wd[i % c]).collect();
            Tensor::new(self.value(x).shape().to_vec(), out)?
        };
        Ok(self.push(value, Op::ChannelMul { x, w }))
    }

    /// Scales each slice along axis 0 by a fixed per-sample factor; the
    /// DropPath primitive (factors are 0 or 1/keep).
    pub fn sample_scale(&mut self, x: NodeId, factors: &[T]) -> Result<NodeId> {
        let shape = self.value(x).shape();
        if shape.is_empty() || shape[0] != factors.len() {
            return Err(Error::shape(
                "sample_scale",
                format!("axis 0 extent {}", factors.len()),
                format!("{shape:?}"),
            ));
        }
        let block = self.value(x).numel() / factors.len();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(xd.len());
        for (s, &f) in factors.iter().enumerate() {
            out.extend(xd[s * block..(s + 1) * block].iter().map(|&v| v * f));
        }
        let value = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(
            value,
            Op::SampleScale {
                x,
                factors: factors.to_vec(),
            },
        ))
    }

    /// Global average pool over the token grid: `(N,H,W,C) -> (N,C)` (or
    /// `(H,W,C) -> (C)` for an unbatched grid).
    pub fn spatial_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, h, w, c, rank3) = grid_dims("spatial_mean", self.value(x).shape())?;
        let xd = self.value(x).data();
        let inv = T::one() / cast::<T>((h * w) as f64);
        let mut out = vec![T::zero(); n * c];
        for s in 0..n {
            for t in 0..h * w {
                let src = (s * h * w + t) * c;
                for ch in 0..c {
                    out[s * c + ch] += xd[src + ch];
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let shape = if rank3 { vec![c] } else { vec![n, c] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SpatialMean { x }))
    }

    /// Sum of all elements, as a `[1]`-shaped scalar tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::Sum { x })
    }

    /// Mean cross-entropy between softmaxed logits `(N, K)` and label-smoothed
    /// targets: `1 - eps` on the true class, `eps / (K - 1)` elsewhere.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        smoothing: T,
    ) -> Result<NodeId> {
        let shape = self.value(logits).shape();
        if shape.len() != 2 {
            return Err(Error::shape(
                "cross entropy logits",
                "rank 2 (N, K)",
                format!("{shape:?}"),
            ));
        }
        let (n, k) = (shape[0], shape[1]);
        if n != targets.len() {
            return Err(Error::shape(
                "cross entropy targets",
                format!("{n} labels"),
                format!("{}", targets.len()),
            ));
        }
        if smoothing < T::zero() || smoothing >= T::one() {
            return Err(Error::Config(format!(
                "label smoothing must lie in [0, 1), got {smoothing}"
            )));
        }
        for &t in targets {
            if t >= k {
                return Err(Error::LabelOutOfRange {
                    label: t,
                    num_classes: k,
                });
            }
        }
        let xd = self.value(logits).data();
        let off_target = if k > 1 {
            smoothing / cast::<T>((k - 1) as f64)
        } else {
            T::zero()
        };
        let on_target = T::one() - smoothing;
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for r in 0..n {
            let row = &xd[r * k..(r + 1) * k];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut denom = T::zero();
            for &v in row {
                denom += (v - max).exp();
            }
            let log_denom = denom.ln();
            let prow = &mut probs[r * k..(r + 1) * k];
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - max - log_denom).exp();
            }
            for (cls, &v) in row.iter().enumerate() {
                let t = if cls == targets[r] {
                    on_target
                } else {
                    off_target
                };
                if t != T::zero() {
                    loss -= t * (v - max - log_denom);
                }
            }
        }
        loss /= cast::<T>(n as f64);
        let probs = Tensor::new(vec![n, k], probs)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
        ))
    }

    /// Propagates gradients from a scalar loss back to every reachable node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss {
                numel: self.value(loss).numel(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let g = match &grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backprop_node(id, &g, &mut grads);
        }
        Ok(Gradients {
            by_node: grads,
            param_leaves: self.param_leaves.clone(),
        })
    }

    fn backprop_node(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let acc = |grads: &mut [Option<Tensor<T>>], node: NodeId, delta: Tensor<T>| match &mut grads
            [node.0]
        {
            Some(existing) => existing.add_assign_tensor(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let da = g.matmul_nt(self.value(*b));
                let db = self.value(*a).matmul_tn(g);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Linear { x, w, b } => {
                let (out_dim, in_dim) = {
                    let ws = self.value(*w).shape();
                    (ws[0], ws[1])
                };
                let rows = g.numel() / out_dim;
                let gd = g.data();
                let wd = self.value(*w).data();
                let xd = self.value(*x).data();
                let mut dx = vec![T::zero(); rows * in_dim];
                let mut dw = vec![T::zero(); out_dim * in_dim];
                for i in 0..rows {
                    let g_row = &gd[i * out_dim..(i + 1) * out_dim];
                    let x_row = &xd[i * in_dim..(i + 1) * in_dim];
                    let dx_row = &mut dx[i * in_dim..(i + 1) * in_dim];
                    for (p, &gv) in g_row.iter().enumerate() {
                        let w_row = &wd[p * in_dim..(p + 1) * in_dim];
                        let dw_row = &mut dw[p * in_dim..(p + 1) * in_dim];
                        for q in 0..in_dim {
                            dx_row[q] += gv * w_row[q];
                            dw_row[q] += gv * x_row[q];
                        }
                    }
                }
                acc(
                    grads,
                    *x,
                    Tensor::new(self.value(*x).shape().to_vec(), dx).unwrap(),
                );
                acc(grads, *w, Tensor::new(vec![out_dim, in_dim], dw).unwrap());
                if let Some(b) = b {
                    let mut db = vec![T::zero(); out_dim];
                    for i in 0..rows {
                        for (p, d) in db.iter_mut().enumerate() {
                            *d += gd[i * out_dim + p];
                        }
                    }
                    acc(grads, *b, Tensor::new(vec![out_dim], db).unwrap());
                }
            }
            Op::Add { a, b } => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Mul { a, b } => {
                let da = g
                    .zip_map(self.value(*b), "mul backward", |gv, bv| gv * bv)
                    .unwrap();
                let db = g
                    .zip_map(self.value(*a), "mul backward", |gv, av| gv * av)
                    .unwrap();
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Scale { x, c } => {
                let c = *c;
                acc(grads, *x, g.map(|v| v * c));
            }
            Op::Gelu { x } => {
                let dx = g
                    .zip_map(self.value(*x), "gelu backward", |gv, xv| {
                        gv * gelu_grad_scalar(xv)
                    })
                    .unwrap();
                acc(grads, *x, dx);
            }
            Op::Permute { x, axes } => {
                let dx = g.permuted(&inverse_permutation(axes)).unwrap();
                acc(grads, *x, dx);
            }
            Op::Reshape { x } => {
                let dx = g.reshaped(self.value(*x).shape()).unwrap();
                acc(grads, *x, dx);
            }
            Op::ConcatLast { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.numel() / total;
                let gd = g.data();
                let mut col = 0;
                for (&p, &wd) in parts.iter().zip(widths) {
                    let mut dp = vec![T::zero(); rows * wd];
                    for r in 0..rows {
                        dp[r * wd..(r + 1) * wd]
                            .copy_from_slice(&gd[r * total + col..r * total + col + wd]);
                    }
                    acc(
                        grads,
                        p,
                        Tensor::new(self.value(p).shape().to_vec(), dp).unwrap(),
                    );
                    col += wd;
                }
            }
            Op::ExtractPatches { x, patch } => {
                let (n, h, w, c, _) = grid_dims("", self.value(*x).shape()).unwrap();
                let p = *patch;
                let (oh, ow) = (h / p, w / p);
                let sample = h * w * c;
                let gd = g.data();
                let mut dx = vec![T::zero(); n * sample];
                for s in 0..n {
                    for i in 0..oh {
                        for j in 0..ow {
                            for dy in 0..p {
                                for dx_ in 0..p {
                                    let src =
                                        s * sample + ((i * ow + j) * p * p + dy * p + dx_) * c;
                                    let dst = s * sample + ((i * p + dy) * w + (j * p + dx_)) * c;
                                    for ch in 0..c {
                                        dx[dst + ch] += gd[src + ch];
                                    }
                                }
                            }
                        }
                    }
                }
                acc(
                    grads,
                    *x,
                    Tensor::new(self.value(*x).shape().to_vec(), dx).unwrap(),
                );
            }
            Op::DwConv3x3 { x, kernel, bias } => {
                let (n, h, w, c, _) = grid_dims("", self.value(*x).shape()).unwrap();
                let xd = self.value(*x).data();
                let kd = self.value(*kernel).data();
                let gd = g.data();
                let sample = h * w * c;
                let mut dx = vec![T::zero(); n * sample];
                let mut dk = vec![T::zero(); c * 9];
                for s in 0..n {
                    for i in 0..h {
                        for j in 0..w {
                            let gro = s * sample + (i * w + j) * c;
                            for (u, v) in TAPS {
                                let (si, sj) = (i as isize + u - 1, j as isize + v - 1);
                                if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                    continue;
                                }
                                let src = s * sample + (si as usize * w + sj as usize) * c;
                                let toff = (u * 3 + v) as usize;
                                for ch in 0..c {
                                    let gv = gd[gro + ch];
                                    dx[src + ch] += gv * kd[ch * 9 + toff];
                                    dk[ch * 9 + toff] += gv * xd[src + ch];
                                }
                            }
                        }
                    }
                }
                acc(
                    grads,
                    *x,
                    Tensor::new(self.value(*x).shape().to_vec(), dx).unwrap(),
                );
                acc(grads, *kernel, Tensor::new(vec![c, 3, 3], dk).unwrap());
                if let Some(b) = bias {
                    let mut db = vec![T::zero(); c];
                    for (i, &gv) in gd.iter().enumerate() {
                        db[i % c] += gv;
                    }
                    acc(grads, *b, Tensor::new(vec![c], db).unwrap());
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let c = mean.numel();
                let m = self.value(*x).numel() / c;
                let xd = self.value(*x).data();
                let gd = g.data();
                let gamma_d = self.value(*gamma).data();
                let md = mean.data();
                let sd = inv_std.data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for (i, &gv) in gd.iter().enumerate() {
                    let ch = i % c;
                    let xhat = (xd[i] - md[ch]) * sd[ch];
                    sum_dy[ch] += gv;
                    sum_dy_xhat[ch] += gv * xhat;
                }
                acc(grads, *beta, Tensor::new(vec![c], sum_dy.clone()).unwrap());
                acc(
                    grads,
                    *gamma,
                    Tensor::new(vec![c], sum_dy_xhat.clone()).unwrap(),
                );
                let inv_m = T::one() / cast::<T>(m as f64);
                let dx: Vec<T> = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| {
                        let ch = i % c;
                        let xhat = (xd[i] - md[ch]) * sd[ch];
                        gamma_d[ch]
                            * sd[ch]
                            * (gv - sum_dy[ch] * inv_m - xhat * sum_dy_xhat[ch] * inv_m)
                    })
                    .collect();
                acc(
                    grads,
                    *x,
                    Tensor::new(self.value(*x).shape().to_vec(), dx).unwrap(),
                );
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let c = mean.numel();
                let xd = self.value(*x).data();
                let gd = g.data();
                let gamma_d = self.value(*gamma).data();
                let md = mean.data();
                let sd = inv_std.data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xd.len()];
                for (i, &gv) in gd.iter().enumerate() {
                    let ch = i % c;
                    let xhat = (xd[i] - md[ch]) * sd[ch];
                    sum_dy[ch] += gv;
                    sum_dy_xhat[ch] += gv * xhat;
                    dx[i] = gv * gamma_d[ch] * sd[ch];
                }
                acc(grads, *beta, Tensor::new(vec![c], sum_dy).unwrap());
                acc(grads, *gamma, Tensor::new(vec![c], sum_dy_xhat).unwrap());
                acc(
                    grads,
                    *x,
                    Tensor::new(self.value(*x).shape().to_vec(), dx).unwrap(),
                );
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let rows = mean.numel();
                let c = self.value(*x).numel() / rows;
                let xd = self.value(*x).data();
                let gd = g.data();
                let gamma_d = self.value(*gamma).data();
                let md = mean.data();
                let sd = inv_std.data();
                let inv_c = T::one() / cast::<T>(c as f64);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xd.len()];
                for r in 0..rows {
                    let x_row = &xd[r * c..(r + 1) * c];
                    let g_row = &gd[r * c..(r + 1) * c];
                    let mut sum_dyg = T::zero();
                    let mut sum_dyg_xhat = T::zero();
                    for k in 0..c {
                        let xhat = (x_row[k] - md[r]) * sd[r];
                        let dyg = g_row[k] * gamma_d[k];
                        dgamma[k] += g_row[k] * xhat;
                        dbeta[k] += g_row[k];
                        sum_dyg += dyg;
                        sum_dyg_xhat += dyg * xhat;
                    }
                    let dx_row = &mut dx[r * c..(r + 1) * c];
                    for k in 0..c {
                        let xhat = (x_row[k] - md[r]) * sd[r];
                        let dyg = g_row[k] * gamma_d[k];
                        dx_row[k] = sd[r] * (dyg - sum_dyg * inv_c - xhat * sum_dyg_xhat * inv_c);
                    }
                }
                acc(grads, *gamma, Tensor::new(vec![c], dgamma).unwrap());
                acc(grads, *beta, Tensor::new(vec![c], dbeta).unwrap());
                acc(
                    grads,
                    *x,
                    Tensor::new(self.value(*x).shape().to_vec(), dx).unwrap(),
                );
            }
            Op::ChannelMul { x, w } => {
                let c = self.value(*w).numel();
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let gd = g.data();
                let mut dw = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xd.len()];
                for (i, &gv) in gd.iter().enumerate() {
                    let ch = i % c;
                    dx[i] = gv * wd[ch];
                    dw[ch] += gv * xd[i];
                }
                acc(
                    grads,
                    *x,
                    Tensor::new(self.value(*x).shape().to_vec(), dx).unwrap(),
                );
                acc(grads, *w, Tensor::new(vec![c], dw).unwrap());
            }
            Op::SampleScale { x, factors } => {
                let block = g.numel() / factors.len();
                let gd = g.data();
                let mut dx = Vec::with_capacity(gd.len());
                for (s, &f) in factors.iter().enumerate() {
                    dx.extend(gd[s * block..(s + 1) * block].iter().map(|&v| v * f));
                }
                acc(
                    grads,
                    *x,
                    Tensor::new(self.value(*x).shape().to_vec(), dx).unwrap(),
                );
            }
            Op::SpatialMean { x } => {
                let (n, h, w, c, _) = grid_dims("", self.value(*x).shape()).unwrap();
                let gd = g.data();
                let inv = T::one() / cast::<T>((h * w) as f64);
                let mut dx = vec![T::zero(); n * h * w * c];
                for s in 0..n {
                    for t in 0..h * w {
                        let dst = (s * h * w + t) * c;
                        for ch in 0..c {
                            dx[dst + ch] = gd[s * c + ch] * inv;
                        }
                    }
                }
                acc(
                    grads,
                    *x,
                    Tensor::new(self.value(*x).shape().to_vec(), dx).unwrap(),
                );
            }
            Op::Sum { x } => {
                let gv = g.item();
                acc(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                let (n, k) = (probs.shape()[0], probs.shape()[1]);
                let gv = g.item();
                let scale = gv / cast::<T>(n as f64);
                let off_target = if k > 1 {
                    *smoothing / cast::<T>((k - 1) as f64)
                } else {
                    T::zero()
                };
                let on_target = T::one() - *smoothing;
                let pd = probs.data();
                let mut dl = vec![T::zero(); n * k];
                for r in 0..n {
                    for cls in 0..k {
                        let t = if cls == targets[r] {
                            on_target
                        } else {
                            off_target
                        };
                        dl[r * k + cls] = (pd[r * k + cls] - t) * scale;
                    }
                }
                acc(grads, *logits, Tensor::new(vec![n, k], dl).unwrap());
            }
        }
    }
}

const TAPS: [(isize, isize); 9] = [
    (0, 0),
    (0, 1),
    (0, 2),
    (1, 0),
    (1, 1),
    (1, 2),
    (2, 0),
    (2, 1),
    (2, 2),
];

fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half: T = cast(0.5);
    let inv_sqrt2: T = cast(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (T::one() + (x * inv_sqrt2).erf())
}

fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half: T = cast(0.5);
    let inv_sqrt2: T = cast(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi: T = cast(0.3989422804014327);
    let cdf = half * (T::one() + (x * inv_sqrt2).erf());
    let pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
    cdf + x * pdf
}

/// Splits a rank-3 `(H,W,C)` or rank-4 `(N,H,W,C)` shape into batched grid
/// dimensions; `rank3` reports whether the batch axis was implicit.
fn grid_dims(context: &str, shape: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match shape.len() {
        3 => Ok((1, shape[0], shape[1], shape[2], true)),
        4 => Ok((shape[0], shape[1], shape[2], shape[3], false)),
        _ => Err(Error::shape(
            context,
            "rank 3 (H,W,C) or rank 4 (N,H,W,C)",
            format!("{shape:?}"),
        )),
    }
}

fn channels_of(context: &str, shape: &[usize]) -> Result<usize> {
    shape
        .last()
        .copied()
        .ok_or_else(|| Error::shape(context, "rank >= 1", "rank 0"))
}

fn check_channel_vec(context: &str, shape: &[usize], c: usize) -> Result<()> {
    if shape != [c] {
        return Err(Error::shape(
            context,
            format!("[{c}]"),
            format!("{shape:?}"),
        ));
    }
    Ok(())
}
