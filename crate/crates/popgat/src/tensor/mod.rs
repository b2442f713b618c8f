//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor created during one forward pass.  Operations
//! validate their inputs, compute the forward value eagerly, and append a
//! node recording which inputs produced it plus whatever context the
//! backward pass needs (argmax indices, dropout masks, normalisation
//! statistics).  [`Tape::backward`] then walks the record once in reverse
//! topological order — which is simply reverse insertion order, since an
//! operation can only consume tensors that already exist — accumulating
//! gradients additively.  Calling `backward` twice without clearing doubles
//! every gradient; that is deliberate and tested, because gradient
//! accumulation over micro-batches relies on it.
//!
//! The op set is intentionally small: dense matmul, 2-D convolution, the
//! pointwise nonlinearities, pooling/resampling, batch normalisation,
//! dropout, soft-Dice and binary cross-entropy losses, and a few
//! gather/segment primitives from which the graph layers are composed.
//! Everything is generic over [`Scalar`] so the same code runs in `f32` for
//! training and `f64` for finite-difference gradient checks.
//!
//! Learnable parameters live outside the tape in a [`ParamStore`]; each
//! forward pass binds them in as leaves and [`Tape::accumulate_param_grads`]
//! scatters the resulting gradients back after `backward`.

mod backward;
pub mod gradcheck;
mod kernels;
pub mod params;

pub use params::{load_checkpoint, load_checkpoint_into, save_checkpoint, Adam, Param, ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle to a tensor on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(pub(crate) usize);

/// Context saved by batch normalisation for its backward pass.
#[derive(Debug)]
pub(crate) struct BnCtx<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    /// True when normalised with batch statistics (training mode); false
    /// when running statistics were used and only the affine part carries
    /// gradient structure.
    pub batch_stats: bool,
}

#[derive(Debug)]
pub(crate) struct DiceCtx<T> {
    /// Ground-truth class index per (batch, pixel).
    pub gt: Vec<u8>,
    /// Class groups scored jointly (e.g. all pathology classes merged for
    /// lung-only pre-training).  Probabilities within a group are summed.
    pub groups: Vec<Vec<usize>>,
    pub eps: T,
    /// Per group: (sum p*g, sum p^2, sum g).
    pub sums: Vec<(T, T, T)>,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Conv2d { x: TensorId, k: TensorId, bias: Option<TensorId>, pad: usize },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: T },
    LeakyRelu { x: TensorId, slope: T },
    Sigmoid { x: TensorId },
    Softmax { x: TensorId, axis: usize },
    MaxPool2d { x: TensorId, argmax: Vec<u32> },
    GlobalAvgPool { x: TensorId },
    Upsample2x { x: TensorId },
    ReduceMax { x: TensorId, argmax: Vec<u32> },
    Concat { xs: Vec<TensorId>, axis: usize },
    BatchNorm { x: TensorId, gamma: TensorId, beta: TensorId, ctx: BnCtx<T> },
    Dropout { x: TensorId, mask: Vec<bool>, scale: T },
    Sum { x: TensorId },
    Mean { x: TensorId },
    GatherRows { x: TensorId, idx: Vec<u32> },
    SegmentSum { x: TensorId, seg: Vec<u32> },
    SegmentSoftmax { x: TensorId, seg: Vec<u32>, n_seg: usize },
    ScaleRows { x: TensorId, v: TensorId },
    AddRowBroadcast { x: TensorId, b: TensorId },
    Reshape { x: TensorId },
    DiceLoss { p: TensorId, ctx: DiceCtx<T> },
    BceLoss { p: TensorId, targets: Vec<T> },
}

pub(crate) struct Node<T> {
    pub data: Vec<T>,
    pub shape: Vec<usize>,
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
    pub op: Op<T>,
}

/// Computation record for one forward/backward cycle.
pub struct Tape<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) bindings: Vec<(TensorId, ParamId)>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Split a shape into (pre, axis, post) extents for lane-wise iteration
/// along `axis`.
pub(crate) fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let pre = shape[..axis].iter().product();
    let ax = shape[axis];
    let post = shape[axis + 1..].iter().product();
    (pre, ax, post)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values but never tracks gradients; used for
    /// validation/test forward passes.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, requires_grad: bool, op: Op<T>) -> TensorId {
        debug_assert_eq!(data.len(), numel(&shape));
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            requires_grad: requires_grad && self.grad_enabled,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        self.grad_enabled && ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ---- accessors -------------------------------------------------------

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Forget all accumulated gradients (the forward values stay).
    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- leaves ----------------------------------------------------------

    pub fn leaf(&mut self, data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        if data.len() != numel(shape) {
            return Err(Error::InvalidShape {
                op: "leaf",
                shape: shape.to_vec(),
                reason: format!("data length {} does not match shape", data.len()),
            });
        }
        Ok(self.push(data, shape.to_vec(), requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, data: Vec<T>, shape: &[usize]) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: T) -> TensorId {
        self.push(vec![v], vec![1], false, Op::Leaf)
    }

    /// Bind a stored parameter onto the tape as a leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> TensorId {
        let p = store.get(id);
        let t = self.push(
            p.data.clone(),
            p.shape.clone(),
            p.trainable,
            Op::Leaf,
        );
        self.bindings.push((t, id));
        t
    }

    /// Scatter leaf gradients back into the parameter store (additively).
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for &(tid, pid) in &self.bindings {
            if let Some(g) = self.grad(tid) {
                let p = store.get_mut(pid);
                for (pg, &gg) in p.grad.iter_mut().zip(g) {
                    *pg += gg;
                }
            }
        }
    }

    // ---- linear algebra --------------------------------------------------

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(out, vec![m, n], rg, Op::Matmul { a, b }))
    }

    /// Same-padded stride-1 2-D convolution.
    ///
    /// `x` is `[n, c_in, h, w]`, `k` is `[c_out, c_in, kh, kw]` with odd
    /// square kernels (1x1 and 3x3 are the sizes the networks use), and the
    /// optional bias is `[c_out]`.
    pub fn conv2d(&mut self, x: TensorId, k: TensorId, bias: Option<TensorId>) -> Result<TensorId> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sk,
            });
        }
        let (kh, kw) = (sk[2], sk[3]);
        if kh != kw || kh % 2 == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: sk,
                reason: "kernel must be square with odd size".into(),
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [sk[0]] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![sk[0]],
                });
            }
        }
        let pad = (kh - 1) / 2;
        let (n, ci, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let co = sk[0];
        let mut out = kernels::conv2d_fwd(self.data(x), self.data(k), n, ci, h, w, co, kh, pad);
        if let Some(b) = bias {
            let bd = self.data(b).to_vec();
            for bi in 0..n {
                for o in 0..co {
                    let base = (bi * co + o) * h * w;
                    let bv = bd[o];
                    for v in &mut out[base..base + h * w] {
                        *v += bv;
                    }
                }
            }
        }
        let mut inputs = vec![x, k];
        if let Some(b) = bias {
            inputs.push(b);
        }
        let rg = self.needs_grad(&inputs);
        Ok(self.push(out, vec![n, co, h, w], rg, Op::Conv2d { x, k, bias, pad }))
    }

    // ---- elementwise -----------------------------------------------------

    fn binary_shapes(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_shapes("add", a, b)?;
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(out, shape, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_shapes("sub", a, b)?;
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(out, shape, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_shapes("mul", a, b)?;
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(out, shape, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: TensorId, c: T) -> TensorId {
        let out: Vec<T> = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.push(out, shape, rg, Op::Scale { x, c })
    }

    pub fn leaky_relu(&mut self, x: TensorId, slope: T) -> TensorId {
        let out: Vec<T> = self
            .data(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { v * slope })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.push(out, shape, rg, Op::LeakyRelu { x, slope })
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.leaky_relu(x, T::zero())
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let out: Vec<T> = self
            .data(x)
            .iter()
            .map(|&v| {
                // Evaluate on the negative branch to avoid overflowing exp.
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.push(out, shape, rg, Op::Sigmoid { x })
    }

    /// Numerically stable softmax along `axis` (shifts by the lane maximum).
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument {
                op: "softmax",
                reason: format!("axis {axis} out of range for rank {}", shape.len()),
            });
        }
        let (pre, ax, post) = lanes(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for p in 0..pre {
            for q in 0..post {
                let base = p * ax * post + q;
                let mut mx = T::neg_infinity();
                for j in 0..ax {
                    mx = mx.max(xd[base + j * post]);
                }
                let mut sum = T::zero();
                for j in 0..ax {
                    let e = (xd[base + j * post] - mx).exp();
                    out[base + j * post] = e;
                    sum += e;
                }
                for j in 0..ax {
                    out[base + j * post] /= sum;
                }
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(out, shape, rg, Op::Softmax { x, axis }))
    }

    // ---- pooling / resampling -------------------------------------------

    /// 2x2 stride-2 max pooling on `[n, c, h, w]`; h and w must be even.
    pub fn maxpool2d(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "maxpool2d",
                shape: s,
                reason: "expect [n,c,h,w] with even h and w".into(),
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.data(x);
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for nc in 0..n * c {
            let ibase = nc * h * w;
            let obase = nc * oh * ow;
            for y in 0..oh {
                for xq in 0..ow {
                    let i00 = ibase + (2 * y) * w + 2 * xq;
                    let cand = [i00, i00 + 1, i00 + w, i00 + w + 1];
                    let mut best = cand[0];
                    for &ci in &cand[1..] {
                        if xd[ci] > xd[best] {
                            best = ci;
                        }
                    }
                    out[obase + y * ow + xq] = xd[best];
                    argmax[obase + y * ow + xq] = best as u32;
                }
            }
        }
        let rg = self.needs_grad(&[x]);
        let argmax = if rg { argmax } else { Vec::new() };
        Ok(self.push(out, vec![n, c, oh, ow], rg, Op::MaxPool2d { x, argmax }))
    }

    /// Mean over the spatial plane: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::InvalidShape {
                op: "global_avg_pool",
                shape: s,
                reason: "expect [n,c,h,w]".into(),
            });
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let inv = T::from_usize(hw).recip();
        let xd = self.data(x);
        let mut out = vec![T::zero(); n * c];
        for nc in 0..n * c {
            let mut acc = T::zero();
            for v in &xd[nc * hw..(nc + 1) * hw] {
                acc += *v;
            }
            out[nc] = acc * inv;
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(out, vec![n, c], rg, Op::GlobalAvgPool { x }))
    }

    /// Nearest-neighbour x2 upsampling on `[n, c, h, w]`.
    pub fn upsample2x(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::InvalidShape {
                op: "upsample2x",
                shape: s,
                reason: "expect [n,c,h,w]".into(),
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xd = self.data(x);
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for nc in 0..n * c {
            let ibase = nc * h * w;
            let obase = nc * 4 * h * w;
            let ow = 2 * w;
            for y in 0..h {
                for xq in 0..w {
                    let v = xd[ibase + y * w + xq];
                    let o = obase + (2 * y) * ow + 2 * xq;
                    out[o] = v;
                    out[o + 1] = v;
                    out[o + ow] = v;
                    out[o + ow + 1] = v;
                }
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(out, vec![n, c, 2 * h, 2 * w], rg, Op::Upsample2x { x }))
    }

    /// Maximum along `axis`, removing that axis.  Ties resolve to the first
    /// maximal index so the backward routing is deterministic.
    pub fn reduce_max(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument {
                op: "reduce_max",
                reason: format!("axis {axis} out of range for rank {}", shape.len()),
            });
        }
        let (pre, ax, post) = lanes(&shape, axis);
        if ax == 0 {
            return Err(Error::InvalidShape {
                op: "reduce_max",
                shape,
                reason: "cannot reduce an empty axis".into(),
            });
        }
        let xd = self.data(x);
        let mut out = vec![T::zero(); pre * post];
        let mut argmax = vec![0u32; pre * post];
        for p in 0..pre {
            for q in 0..post {
                let base = p * ax * post + q;
                let mut bi = base;
                for j in 1..ax {
                    let idx = base + j * post;
                    if xd[idx] > xd[bi] {
                        bi = idx;
                    }
                }
                out[p * post + q] = xd[bi];
                argmax[p * post + q] = bi as u32;
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let rg = self.needs_grad(&[x]);
        let argmax = if rg { argmax } else { Vec::new() };
        Ok(self.push(out, oshape, rg, Op::ReduceMax { x, argmax }))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[TensorId], axis: usize) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument {
                op: "concat",
                reason: "no inputs".into(),
            });
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidArgument {
                op: "concat",
                reason: format!("axis {axis} out of range for rank {}", first.len()),
            });
        }
        let mut ax_total = 0;
        for &x in xs {
            let s = self.shape(x);
            let same = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            ax_total += s[axis];
        }
        let mut oshape = first.clone();
        oshape[axis] = ax_total;
        let (pre, _, post) = lanes(&first, axis);
        let mut out = vec![T::zero(); pre * ax_total * post];
        let mut off = 0;
        for &x in xs {
            let ax_i = self.shape(x)[axis];
            let xd = self.data(x);
            for p in 0..pre {
                let src = &xd[p * ax_i * post..(p + 1) * ax_i * post];
                let dst_base = p * ax_total * post + off * post;
                out[dst_base..dst_base + ax_i * post].copy_from_slice(src);
            }
            off += ax_i;
        }
        let rg = self.needs_grad(xs);
        Ok(self.push(out, oshape, rg, Op::Concat { xs: xs.to_vec(), axis }))
    }

    // ---- normalisation / regularisation ---------------------------------

    fn bn_layout(&self, op: &'static str, x: TensorId) -> Result<(usize, usize, usize)> {
        // Channel axis is 1 for both supported layouts: [n, f] feature
        // vectors and [n, c, h, w] images.  Returns (channels, reduce count,
        // spatial extent).
        let s = self.shape(x);
        match s.len() {
            2 => Ok((s[1], s[0], 1)),
            4 => Ok((s[1], s[0] * s[2] * s[3], s[2] * s[3])),
            _ => Err(Error::InvalidShape {
                op,
                shape: s.to_vec(),
                reason: "expect [n,f] or [n,c,h,w]".into(),
            }),
        }
    }

    /// Batch normalisation using batch statistics.  Returns the output
    /// tensor plus the biased batch mean/variance per channel so the caller
    /// can maintain running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: T,
    ) -> Result<(TensorId, Vec<T>, Vec<T>)> {
        let (c, m, _) = self.bn_layout("batchnorm", x)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch {
                op: "batchnorm scale/shift",
                lhs: self.shape(gamma).to_vec(),
                rhs: vec![c],
            });
        }
        if m == 0 {
            return Err(Error::Degenerate {
                what: "batchnorm",
                reason: "empty batch".into(),
            });
        }
        let (mean, var) = self.bn_batch_stats(x, c);
        let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let out = self.bn_apply(x, c, &mean, &inv_std, gamma, beta);
        let rg = self.needs_grad(&[x, gamma, beta]);
        let ctx = BnCtx {
            mean: mean.clone(),
            inv_std,
            batch_stats: true,
        };
        let shape = self.shape(x).to_vec();
        let id = self.push(out, shape, rg, Op::BatchNorm { x, gamma, beta, ctx });
        Ok((id, mean, var))
    }

    /// Batch normalisation with externally supplied (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<TensorId> {
        let (c, _, _) = self.bn_layout("batchnorm", x)?;
        if mean.len() != c || var.len() != c || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch {
                op: "batchnorm eval stats",
                lhs: vec![mean.len(), var.len()],
                rhs: vec![c],
            });
        }
        let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let out = self.bn_apply(x, c, mean, &inv_std, gamma, beta);
        let rg = self.needs_grad(&[x, gamma, beta]);
        let ctx = BnCtx {
            mean: mean.to_vec(),
            inv_std,
            batch_stats: false,
        };
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, rg, Op::BatchNorm { x, gamma, beta, ctx }))
    }

    fn bn_batch_stats(&self, x: TensorId, c: usize) -> (Vec<T>, Vec<T>) {
        let s = self.shape(x);
        let (n, hw) = if s.len() == 2 { (s[0], 1) } else { (s[0], s[2] * s[3]) };
        let xd = self.data(x);
        let m = T::from_usize(n * hw);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let mut acc = T::zero();
                for v in &xd[base..base + hw] {
                    acc += *v;
                }
                mean[ch] += acc;
            }
        }
        for v in &mut mean {
            *v /= m;
        }
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let mu = mean[ch];
                let mut acc = T::zero();
                for v in &xd[base..base + hw] {
                    let d = *v - mu;
                    acc += d * d;
                }
                var[ch] += acc;
            }
        }
        for v in &mut var {
            *v /= m;
        }
        (mean, var)
    }

    fn bn_apply(
        &self,
        x: TensorId,
        c: usize,
        mean: &[T],
        inv_std: &[T],
        gamma: TensorId,
        beta: TensorId,
    ) -> Vec<T> {
        let s = self.shape(x);
        let (n, hw) = if s.len() == 2 { (s[0], 1) } else { (s[0], s[2] * s[3]) };
        let xd = self.data(x);
        let g = self.data(gamma);
        let be = self.data(beta);
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let (mu, is, ga, bb) = (mean[ch], inv_std[ch], g[ch], be[ch]);
                for i in base..base + hw {
                    out[i] = (xd[i] - mu) * is * ga + bb;
                }
            }
        }
        out
    }

    /// Inverted dropout: zero each element with probability `rate` and scale
    /// survivors by `1/(1-rate)` so expectations match evaluation mode.
    pub fn dropout(&mut self, x: TensorId, rate: f64, rng: &mut ChaCha8Rng) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument {
                op: "dropout",
                reason: format!("rate {rate} outside [0, 1)"),
            });
        }
        if rate == 0.0 {
            // Still draws nothing; identity via reshape keeps the graph tidy.
            let shape = self.shape(x).to_vec();
            let out = self.data(x).to_vec();
            let rg = self.needs_grad(&[x]);
            return Ok(self.push(out, shape, rg, Op::Reshape { x }));
        }
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<bool> = (0..self.data(x).len())
            .map(|_| rng.random::<f64>() >= rate)
            .collect();
        let out: Vec<T> = self
            .data(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &keep)| if keep { v * scale } else { T::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(out, shape, rg, Op::Dropout { x, mask, scale }))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let mut acc = T::zero();
        for v in self.data(x) {
            acc += *v;
        }
        let rg = self.needs_grad(&[x]);
        self.push(vec![acc], vec![1], rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.data(x).len().max(1);
        let inv = T::from_usize(n).recip();
        let mut acc = T::zero();
        for v in self.data(x) {
            acc += *v;
        }
        let rg = self.needs_grad(&[x]);
        self.push(vec![acc * inv], vec![1], rg, Op::Mean { x })
    }

    // ---- gather / segment ops (graph building blocks) -------------------

    /// Copy rows (axis-0 slices) of `x` in the order given by `idx`;
    /// duplicate indices are allowed.
    pub fn gather_rows(&mut self, x: TensorId, idx: &[usize]) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        let rows = s[0];
        let span = numel(&s) / rows.max(1);
        for &i in idx {
            if i >= rows {
                return Err(Error::InvalidArgument {
                    op: "gather_rows",
                    reason: format!("row index {i} out of range ({rows} rows)"),
                });
            }
        }
        let xd = self.data(x);
        let mut out = vec![T::zero(); idx.len() * span];
        for (e, &i) in idx.iter().enumerate() {
            out[e * span..(e + 1) * span].copy_from_slice(&xd[i * span..(i + 1) * span]);
        }
        let mut oshape = s.clone();
        oshape[0] = idx.len();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            out,
            oshape,
            rg,
            Op::GatherRows {
                x,
                idx: idx.iter().map(|&i| i as u32).collect(),
            },
        ))
    }

    /// Sum rows of `x` into `n_seg` output rows according to `seg` (one
    /// segment id per input row).  Empty segments stay zero.
    pub fn segment_sum(&mut self, x: TensorId, seg: &[usize], n_seg: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if seg.len() != s[0] {
            return Err(Error::InvalidArgument {
                op: "segment_sum",
                reason: format!("{} segment ids for {} rows", seg.len(), s[0]),
            });
        }
        let span = numel(&s) / s[0].max(1);
        for &g in seg {
            if g >= n_seg {
                return Err(Error::InvalidArgument {
                    op: "segment_sum",
                    reason: format!("segment id {g} out of range ({n_seg} segments)"),
                });
            }
        }
        let xd = self.data(x);
        let mut out = vec![T::zero(); n_seg * span];
        for (e, &g) in seg.iter().enumerate() {
            let dst = &mut out[g * span..(g + 1) * span];
            let src = &xd[e * span..(e + 1) * span];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += v;
            }
        }
        let mut oshape = s.clone();
        oshape[0] = n_seg;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            out,
            oshape,
            rg,
            Op::SegmentSum {
                x,
                seg: seg.iter().map(|&g| g as u32).collect(),
            },
        ))
    }

    /// Softmax of a vector `x` within segments: entries sharing a segment id
    /// normalise together (shift-invariant, per-segment max subtracted).
    pub fn segment_softmax(&mut self, x: TensorId, seg: &[usize], n_seg: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 1 || seg.len() != s[0] {
            return Err(Error::InvalidArgument {
                op: "segment_softmax",
                reason: format!("expect rank-1 input with one segment id per entry, got shape {s:?} and {} ids", seg.len()),
            });
        }
        for &g in seg {
            if g >= n_seg {
                return Err(Error::InvalidArgument {
                    op: "segment_softmax",
                    reason: format!("segment id {g} out of range ({n_seg} segments)"),
                });
            }
        }
        let xd = self.data(x);
        let mut mx = vec![T::neg_infinity(); n_seg];
        for (e, &g) in seg.iter().enumerate() {
            mx[g] = mx[g].max(xd[e]);
        }
        let mut out = vec![T::zero(); xd.len()];
        let mut sums = vec![T::zero(); n_seg];
        for (e, &g) in seg.iter().enumerate() {
            let v = (xd[e] - mx[g]).exp();
            out[e] = v;
            sums[g] += v;
        }
        for (e, &g) in seg.iter().enumerate() {
            out[e] /= sums[g];
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            out,
            s,
            rg,
            Op::SegmentSoftmax {
                x,
                seg: seg.iter().map(|&g| g as u32).collect(),
                n_seg,
            },
        ))
    }

    /// Multiply row `e` of matrix `x` by scalar `v[e]`.
    pub fn scale_rows(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        let sv = self.shape(v).to_vec();
        if sv.len() != 1 || sv[0] != s[0] {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: s,
                rhs: sv,
            });
        }
        let span = numel(&s) / s[0].max(1);
        let xd = self.data(x);
        let vd = self.data(v);
        let mut out = vec![T::zero(); xd.len()];
        for e in 0..s[0] {
            let c = vd[e];
            for i in 0..span {
                out[e * span + i] = xd[e * span + i] * c;
            }
        }
        let rg = self.needs_grad(&[x, v]);
        Ok(self.push(out, s, rg, Op::ScaleRows { x, v }))
    }

    /// Add a bias row vector `b[f]` to every row of `x[n,f]`.
    pub fn add_row_broadcast(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        if s.len() != 2 || sb.len() != 1 || sb[0] != s[1] {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: s,
                rhs: sb,
            });
        }
        let xd = self.data(x);
        let bd = self.data(b);
        let (n, f) = (s[0], s[1]);
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..n {
            for c in 0..f {
                out[r * f + c] = xd[r * f + c] + bd[c];
            }
        }
        let rg = self.needs_grad(&[x, b]);
        Ok(self.push(out, s, rg, Op::AddRowBroadcast { x, b }))
    }

    /// Reinterpret `x` with a new shape of identical element count.
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        if numel(shape) != self.data(x).len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("element count {} does not match {}", numel(shape), self.data(x).len()),
            });
        }
        let out = self.data(x).to_vec();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(out, shape.to_vec(), rg, Op::Reshape { x }))
    }

    // ---- losses ----------------------------------------------------------

    /// Soft Dice loss over class probability maps.
    ///
    /// `probs` is `[n, c, h, w]` (softmax output), `gt` one class index per
    /// `(n, h, w)` position.  Classes listed together in `groups` are scored
    /// as one (their probabilities sum); the loss is `1 - mean` of the
    /// per-group soft Dice coefficients, background included.
    pub fn dice_loss(
        &mut self,
        probs: TensorId,
        gt: &[u8],
        groups: &[Vec<usize>],
        eps: T,
    ) -> Result<TensorId> {
        let s = self.shape(probs).to_vec();
        if s.len() != 4 {
            return Err(Error::InvalidShape {
                op: "dice_loss",
                shape: s,
                reason: "expect [n,c,h,w] probabilities".into(),
            });
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        if gt.len() != n * hw {
            return Err(Error::InvalidArgument {
                op: "dice_loss",
                reason: format!("{} ground-truth labels for {} positions", gt.len(), n * hw),
            });
        }
        if groups.is_empty() || groups.iter().flatten().any(|&ch| ch >= c) {
            return Err(Error::InvalidArgument {
                op: "dice_loss",
                reason: "class groups empty or reference missing channels".into(),
            });
        }
        // Membership lookup: class index -> group index (or none).
        let mut member = vec![usize::MAX; c];
        for (gi, grp) in groups.iter().enumerate() {
            for &ch in grp {
                member[ch] = gi;
            }
        }
        let pd = self.data(probs);
        let mut sums = vec![(T::zero(), T::zero(), T::zero()); groups.len()];
        for b in 0..n {
            for (gi, grp) in groups.iter().enumerate() {
                let (mut spg, mut spp, mut sg) = (T::zero(), T::zero(), T::zero());
                for pix in 0..hw {
                    let mut pg = T::zero();
                    for &ch in grp {
                        pg += pd[(b * c + ch) * hw + pix];
                    }
                    let is_gt = member
                        .get(gt[b * hw + pix] as usize)
                        .map(|&m| m == gi)
                        .unwrap_or(false);
                    if is_gt {
                        spg += pg;
                        sg += T::one();
                    }
                    spp += pg * pg;
                }
                sums[gi].0 += spg;
                sums[gi].1 += spp;
                sums[gi].2 += sg;
            }
        }
        let two = T::from_f64(2.0);
        let mut dice_total = T::zero();
        for &(spg, spp, sg) in &sums {
            dice_total += (two * spg + eps) / (spp + sg + eps);
        }
        let gcount = T::from_usize(groups.len());
        let loss = T::one() - dice_total / gcount;
        let rg = self.needs_grad(&[probs]);
        let ctx = DiceCtx {
            gt: gt.to_vec(),
            groups: groups.to_vec(),
            eps,
            sums,
        };
        Ok(self.push(vec![loss], vec![1], rg, Op::DiceLoss { p: probs, ctx }))
    }

    /// Binary cross-entropy on probabilities `[n, labels]`, averaged over
    /// the batch and summed over labels.  Probabilities are clamped away
    /// from 0/1 before the logs.
    pub fn bce_loss(&mut self, probs: TensorId, targets: &[T]) -> Result<TensorId> {
        let s = self.shape(probs).to_vec();
        if s.len() != 2 || targets.len() != numel(&s) {
            return Err(Error::InvalidArgument {
                op: "bce_loss",
                reason: format!(
                    "probabilities {s:?} and {} targets do not line up",
                    targets.len()
                ),
            });
        }
        let n = T::from_usize(s[0]);
        let lo = T::from_f64(1e-7);
        let hi = T::one() - lo;
        let pd = self.data(probs);
        let mut acc = T::zero();
        for (&p, &y) in pd.iter().zip(targets) {
            let pc = p.max(lo).min(hi);
            acc += -(y * pc.ln() + (T::one() - y) * (T::one() - pc).ln());
        }
        let loss = acc / n;
        let rg = self.needs_grad(&[probs]);
        Ok(self.push(
            vec![loss],
            vec![1],
            rg,
            Op::BceLoss {
                p: probs,
                targets: targets.to_vec(),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let mut t = tape();
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], false).unwrap();
        let b = t.leaf(vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0], &[3, 2], false).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), &[58.0, 64.0, 139.0, 154.0]);
        assert_eq!(t.shape(c), &[2, 2]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = tape();
        let a = t.leaf(vec![0.0; 6], &[2, 3], false).unwrap();
        let b = t.leaf(vec![0.0; 4], &[2, 2], false).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn conv2d_identity_kernel_preserves_input() {
        let mut t = tape();
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let xt = t.leaf(x.clone(), &[1, 1, 4, 4], false).unwrap();
        // 3x3 kernel with a single centre one.
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0;
        let k = t.leaf(kd, &[1, 1, 3, 3], false).unwrap();
        let y = t.conv2d(xt, k, None).unwrap();
        assert_eq!(t.data(y), &x[..]);
    }

    #[test]
    fn conv2d_sum_kernel_counts_neighbours_with_zero_padding() {
        let mut t = tape();
        let xt = t.leaf(vec![1.0; 9], &[1, 1, 3, 3], false).unwrap();
        let k = t.leaf(vec![1.0; 9], &[1, 1, 3, 3], false).unwrap();
        let y = t.conv2d(xt, k, None).unwrap();
        // Corner sees a 2x2 patch, edge 2x3, centre the full 3x3.
        assert_eq!(
            t.data(y),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariance_holds() {
        let mut t = tape();
        let x = t.leaf(vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0], &[2, 3], false).unwrap();
        let s = t.softmax(x, 1).unwrap();
        for row in t.data(s).chunks(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        // Shifting a lane by a constant must not change the output.
        let shifted = t
            .leaf(vec![101.0, 102.0, 103.0, 999.0, 1000.0, 1001.0], &[2, 3], false)
            .unwrap();
        let s2 = t.softmax(shifted, 1).unwrap();
        let (a, b) = (t.data(s).to_vec(), t.data(s2).to_vec());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_takes_plane_maxima() {
        let mut t = tape();
        let x = t
            .leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0, 16.0], &[1, 1, 4, 4], false)
            .unwrap();
        let y = t.maxpool2d(x).unwrap();
        assert_eq!(t.data(y), &[6.0, 8.0, 14.0, 16.0]);
    }

    #[test]
    fn reduce_max_resolves_ties_to_first_index() {
        let mut t = tape();
        let x = t.leaf(vec![5.0, 5.0, 1.0, 3.0, 9.0, 9.0], &[3, 2], true).unwrap();
        let y = t.reduce_max(x, 0).unwrap();
        assert_eq!(t.data(y), &[9.0, 9.0]);
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        // Column 1 max 9.0 appears once (row 2); column 0 ties route to the
        // first occurrence (row 2 value 9.0 is the max there... check col 0:
        // values 5,1,9 -> row 2).
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn concat_roundtrips_blocks() {
        let mut t = tape();
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], false).unwrap();
        let b = t.leaf(vec![5.0, 6.0], &[2, 1], false).unwrap();
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.shape(c), &[2, 3]);
        assert_eq!(t.data(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_on_non_scalar_is_an_error() {
        let mut t = tape();
        let x = t.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let mut t = tape();
        let x = t.leaf(vec![3.0, -2.0], &[2], true).unwrap();
        let y = t.mul(x, x).unwrap();
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0, -4.0]);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[12.0, -8.0]);
    }

    #[test]
    fn dropout_rate_validation_and_scaling() {
        let mut t = tape();
        let x = t.leaf(vec![1.0; 1000], &[1000], false).unwrap();
        let mut rng = crate::rng::stream(9, "dropout-test");
        assert!(t.dropout(x, 1.0, &mut rng).is_err());
        let y = t.dropout(x, 0.25, &mut rng).unwrap();
        let kept: Vec<f64> = t.data(y).iter().copied().filter(|&v| v != 0.0).collect();
        // Survivors are scaled by 1/(1-rate).
        for v in &kept {
            assert!((v - 1.0 / 0.75).abs() < 1e-12);
        }
        let frac = kept.len() as f64 / 1000.0;
        assert!((frac - 0.75).abs() < 0.05, "kept {frac}");
    }

    #[test]
    fn segment_softmax_normalises_within_segments() {
        let mut t = tape();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 0.5], &[4], false).unwrap();
        let s = t.segment_softmax(x, &[0, 0, 1, 1], 2).unwrap();
        let d = t.data(s);
        assert!((d[0] + d[1] - 1.0).abs() < 1e-12);
        assert!((d[2] + d[3] - 1.0).abs() < 1e-12);
        assert!(d[1] > d[0] && d[2] > d[3]);
    }

    #[test]
    fn dice_loss_uniform_prediction_two_pixels() {
        // Uniform 4-class prediction on 2 pixels with ground truth classes
        // 1 and 2.  Groups are the singleton classes.
        let mut t = tape();
        let mut probs = vec![0.25; 8];
        // layout [n=1, c=4, h=1, w=2]
        probs.iter_mut().for_each(|_| {});
        let p = t.leaf(probs, &[1, 4, 1, 2], false).unwrap();
        let groups: Vec<Vec<usize>> = (0..4).map(|c| vec![c]).collect();
        let loss = t.dice_loss(p, &[1, 2], &groups, 1e-6).unwrap();
        // Per present class: (2*0.25+eps)/(2*0.0625+1+eps) ~= 0.4444;
        // per absent class: eps/(0.125+eps) ~= 0.  Mean over 4 classes.
        let eps = 1e-6;
        let present = (2.0 * 0.25 + eps) / (0.125 + 1.0 + eps);
        let absent = eps / (0.125 + eps);
        let expect = 1.0 - (2.0 * present + 2.0 * absent) / 4.0;
        assert!((t.data(loss)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_has_near_zero_dice_loss() {
        let mut t = tape();
        // One-hot prediction matching ground truth exactly.
        let mut probs = vec![0.0; 2 * 4];
        let gt = [3u8, 0u8];
        for (pix, &cls) in gt.iter().enumerate() {
            probs[cls as usize * 2 + pix] = 1.0;
        }
        let p = t.leaf(probs, &[1, 4, 1, 2], false).unwrap();
        let groups: Vec<Vec<usize>> = (0..4).map(|c| vec![c]).collect();
        let loss = t.dice_loss(p, &gt, &groups, 1e-6).unwrap();
        assert!(t.data(loss)[0].abs() < 1e-5);
    }
}
