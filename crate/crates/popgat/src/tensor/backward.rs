//! Reverse pass over the tape.
//!
//! Each `backward` call computes a fresh derivative flow seeded with 1 at
//! the loss node, pushes it through every recorded op in reverse insertion
//! order, and then *adds* the flow into the persistent `grad` buffers.
//! Running `backward` twice therefore doubles every gradient — accumulation
//! semantics, not replacement.

use super::kernels;
use super::{lanes, Op, Tape, TensorId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

type Flow<T> = Vec<Option<Vec<T>>>;

fn slot<'a, T: Scalar>(flow: &'a mut Flow<T>, id: TensorId, len: usize) -> &'a mut Vec<T> {
    flow[id.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_vec<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Scalar> Tape<T> {
    /// Accumulate `d loss / d tensor` into every gradient buffer reachable
    /// from `loss`.  The loss must be scalar.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.data(loss).len() != 1 {
            return Err(Error::InvalidArgument {
                op: "backward",
                reason: format!(
                    "loss must be scalar, got shape {:?}",
                    self.shape(loss)
                ),
            });
        }
        let mut flow: Flow<T> = (0..=loss.0).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            flow[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = flow[i].take() else { continue };
            self.propagate(TensorId(i), &g, &mut flow);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(buf) => add_vec(buf, &g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn wants(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, i: TensorId, g: &[T], flow: &mut Flow<T>) {
        let len_of = |id: TensorId| self.nodes[id.0].data.len();
        match &self.nodes[i.0].op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    let da = kernels::matmul_grad_a(g, self.data(*b), m, k, n);
                    add_vec(slot(flow, *a, len_of(*a)), &da);
                }
                if self.wants(*b) {
                    let db = kernels::matmul_grad_b(g, self.data(*a), m, k, n);
                    add_vec(slot(flow, *b, len_of(*b)), &db);
                }
            }

            Op::Conv2d { x, k, bias, pad } => {
                let sx = self.shape(*x);
                let sk = self.shape(*k);
                let (n, ci, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let (co, ks) = (sk[0], sk[2]);
                if self.wants(*x) {
                    let dx =
                        kernels::conv2d_grad_x(g, self.data(*k), n, ci, h, w, co, ks, *pad);
                    add_vec(slot(flow, *x, len_of(*x)), &dx);
                }
                if self.wants(*k) {
                    let dk =
                        kernels::conv2d_grad_k(g, self.data(*x), n, ci, h, w, co, ks, *pad);
                    add_vec(slot(flow, *k, len_of(*k)), &dk);
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let db = slot(flow, *b, co);
                        for bi in 0..n {
                            for o in 0..co {
                                let base = (bi * co + o) * h * w;
                                let mut acc = T::zero();
                                for &gv in &g[base..base + h * w] {
                                    acc += gv;
                                }
                                db[o] += acc;
                            }
                        }
                    }
                }
            }

            Op::Add { a, b } => {
                if self.wants(*a) {
                    add_vec(slot(flow, *a, len_of(*a)), g);
                }
                if self.wants(*b) {
                    add_vec(slot(flow, *b, len_of(*b)), g);
                }
            }

            Op::Sub { a, b } => {
                if self.wants(*a) {
                    add_vec(slot(flow, *a, len_of(*a)), g);
                }
                if self.wants(*b) {
                    let fb = slot(flow, *b, len_of(*b));
                    for (d, &gv) in fb.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }

            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let bd = self.data(*b);
                    let fa = slot(flow, *a, len_of(*a));
                    for ((d, &gv), &bv) in fa.iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                }
                if self.wants(*b) {
                    let ad = self.data(*a);
                    let fb = slot(flow, *b, len_of(*b));
                    for ((d, &gv), &av) in fb.iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                }
            }

            Op::Scale { x, c } => {
                if self.wants(*x) {
                    let fx = slot(flow, *x, len_of(*x));
                    for (d, &gv) in fx.iter_mut().zip(g) {
                        *d += gv * *c;
                    }
                }
            }

            Op::LeakyRelu { x, slope } => {
                if self.wants(*x) {
                    let xd = self.data(*x);
                    let fx = slot(flow, *x, len_of(*x));
                    for ((d, &gv), &xv) in fx.iter_mut().zip(g).zip(xd) {
                        *d += if xv > T::zero() { gv } else { gv * *slope };
                    }
                }
            }

            Op::Sigmoid { x } => {
                if self.wants(*x) {
                    let s = &self.nodes[i.0].data;
                    let fx = slot(flow, *x, len_of(*x));
                    for ((d, &gv), &sv) in fx.iter_mut().zip(g).zip(s) {
                        *d += gv * sv * (T::one() - sv);
                    }
                }
            }

            Op::Softmax { x, axis } => {
                if self.wants(*x) {
                    let s = &self.nodes[i.0].data;
                    let shape = &self.nodes[i.0].shape;
                    let (pre, ax, post) = lanes(shape, *axis);
                    let fx = slot(flow, *x, len_of(*x));
                    for p in 0..pre {
                        for q in 0..post {
                            let base = p * ax * post + q;
                            let mut dot = T::zero();
                            for j in 0..ax {
                                let idx = base + j * post;
                                dot += g[idx] * s[idx];
                            }
                            for j in 0..ax {
                                let idx = base + j * post;
                                fx[idx] += s[idx] * (g[idx] - dot);
                            }
                        }
                    }
                }
            }

            Op::MaxPool2d { x, argmax } => {
                if self.wants(*x) {
                    let fx = slot(flow, *x, len_of(*x));
                    for (o, &src) in argmax.iter().enumerate() {
                        fx[src as usize] += g[o];
                    }
                }
            }

            Op::GlobalAvgPool { x } => {
                if self.wants(*x) {
                    let sx = self.shape(*x);
                    let hw = sx[2] * sx[3];
                    let inv = T::from_usize(hw).recip();
                    let fx = slot(flow, *x, len_of(*x));
                    for nc in 0..sx[0] * sx[1] {
                        let gv = g[nc] * inv;
                        for d in &mut fx[nc * hw..(nc + 1) * hw] {
                            *d += gv;
                        }
                    }
                }
            }

            Op::Upsample2x { x } => {
                if self.wants(*x) {
                    let sx = self.shape(*x);
                    let (h, w) = (sx[2], sx[3]);
                    let ow = 2 * w;
                    let fx = slot(flow, *x, len_of(*x));
                    for nc in 0..sx[0] * sx[1] {
                        let ibase = nc * h * w;
                        let obase = nc * 4 * h * w;
                        for y in 0..h {
                            for xq in 0..w {
                                let o = obase + (2 * y) * ow + 2 * xq;
                                fx[ibase + y * w + xq] +=
                                    g[o] + g[o + 1] + g[o + ow] + g[o + ow + 1];
                            }
                        }
                    }
                }
            }

            Op::ReduceMax { x, argmax } => {
                if self.wants(*x) {
                    let fx = slot(flow, *x, len_of(*x));
                    for (o, &src) in argmax.iter().enumerate() {
                        fx[src as usize] += g[o];
                    }
                }
            }

            Op::Concat { xs, axis } => {
                let oshape = &self.nodes[i.0].shape;
                let (pre, ax_total, post) = lanes(oshape, *axis);
                let mut off = 0;
                for &xid in xs {
                    let ax_i = self.shape(xid)[*axis];
                    if self.wants(xid) {
                        let fx = slot(flow, xid, len_of(xid));
                        for p in 0..pre {
                            let src_base = p * ax_total * post + off * post;
                            let dst_base = p * ax_i * post;
                            add_vec(
                                &mut fx[dst_base..dst_base + ax_i * post],
                                &g[src_base..src_base + ax_i * post],
                            );
                        }
                    }
                    off += ax_i;
                }
            }

            Op::BatchNorm { x, gamma, beta, ctx } => {
                let sx = self.shape(*x);
                let (c, hw) = if sx.len() == 2 {
                    (sx[1], 1)
                } else {
                    (sx[1], sx[2] * sx[3])
                };
                let n = sx[0];
                let m = T::from_usize(n * hw);
                let xd = self.data(*x);
                let gd = self.data(*gamma);
                // Per-channel reductions of g and g*xhat.
                let mut dbeta = vec![T::zero(); c];
                let mut dgamma = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        let (mu, is) = (ctx.mean[ch], ctx.inv_std[ch]);
                        let mut sb = T::zero();
                        let mut sgx = T::zero();
                        for idx in base..base + hw {
                            let xhat = (xd[idx] - mu) * is;
                            sb += g[idx];
                            sgx += g[idx] * xhat;
                        }
                        dbeta[ch] += sb;
                        dgamma[ch] += sgx;
                    }
                }
                if self.wants(*gamma) {
                    add_vec(slot(flow, *gamma, c), &dgamma);
                }
                if self.wants(*beta) {
                    add_vec(slot(flow, *beta, c), &dbeta);
                }
                if self.wants(*x) {
                    let fx = slot(flow, *x, len_of(*x));
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let (mu, is, ga) = (ctx.mean[ch], ctx.inv_std[ch], gd[ch]);
                            if ctx.batch_stats {
                                let mb = dbeta[ch] / m;
                                let mg = dgamma[ch] / m;
                                for idx in base..base + hw {
                                    let xhat = (xd[idx] - mu) * is;
                                    fx[idx] += ga * is * (g[idx] - mb - xhat * mg);
                                }
                            } else {
                                for idx in base..base + hw {
                                    fx[idx] += g[idx] * ga * is;
                                }
                            }
                        }
                    }
                }
            }

            Op::Dropout { x, mask, scale } => {
                if self.wants(*x) {
                    let fx = slot(flow, *x, len_of(*x));
                    for ((d, &gv), &keep) in fx.iter_mut().zip(g).zip(mask) {
                        if keep {
                            *d += gv * *scale;
                        }
                    }
                }
            }

            Op::Sum { x } => {
                if self.wants(*x) {
                    let gv = g[0];
                    let fx = slot(flow, *x, len_of(*x));
                    for d in fx.iter_mut() {
                        *d += gv;
                    }
                }
            }

            Op::Mean { x } => {
                if self.wants(*x) {
                    let gv = g[0] * T::from_usize(len_of(*x).max(1)).recip();
                    let fx = slot(flow, *x, len_of(*x));
                    for d in fx.iter_mut() {
                        *d += gv;
                    }
                }
            }

            Op::GatherRows { x, idx } => {
                if self.wants(*x) {
                    let span = len_of(i) / idx.len().max(1);
                    let fx = slot(flow, *x, len_of(*x));
                    for (e, &row) in idx.iter().enumerate() {
                        add_vec(
                            &mut fx[row as usize * span..(row as usize + 1) * span],
                            &g[e * span..(e + 1) * span],
                        );
                    }
                }
            }

            Op::SegmentSum { x, seg } => {
                if self.wants(*x) {
                    let span = len_of(*x) / seg.len().max(1);
                    let fx = slot(flow, *x, len_of(*x));
                    for (e, &sg) in seg.iter().enumerate() {
                        add_vec(
                            &mut fx[e * span..(e + 1) * span],
                            &g[sg as usize * span..(sg as usize + 1) * span],
                        );
                    }
                }
            }

            Op::SegmentSoftmax { x, seg, n_seg } => {
                if self.wants(*x) {
                    let s = &self.nodes[i.0].data;
                    let mut dots = vec![T::zero(); *n_seg];
                    for (e, &sg) in seg.iter().enumerate() {
                        dots[sg as usize] += g[e] * s[e];
                    }
                    let fx = slot(flow, *x, len_of(*x));
                    for (e, &sg) in seg.iter().enumerate() {
                        fx[e] += s[e] * (g[e] - dots[sg as usize]);
                    }
                }
            }

            Op::ScaleRows { x, v } => {
                let rows = self.shape(*x)[0];
                let span = len_of(*x) / rows.max(1);
                if self.wants(*x) {
                    let vd = self.data(*v);
                    let fx = slot(flow, *x, len_of(*x));
                    for e in 0..rows {
                        let c = vd[e];
                        for j in 0..span {
                            fx[e * span + j] += g[e * span + j] * c;
                        }
                    }
                }
                if self.wants(*v) {
                    let xd = self.data(*x);
                    let fv = slot(flow, *v, rows);
                    for e in 0..rows {
                        let mut acc = T::zero();
                        for j in 0..span {
                            acc += g[e * span + j] * xd[e * span + j];
                        }
                        fv[e] += acc;
                    }
                }
            }

            Op::AddRowBroadcast { x, b } => {
                if self.wants(*x) {
                    add_vec(slot(flow, *x, len_of(*x)), g);
                }
                if self.wants(*b) {
                    let f = self.shape(*b)[0];
                    let fb = slot(flow, *b, f);
                    for row in g.chunks(f) {
                        add_vec(fb, row);
                    }
                }
            }

            Op::Reshape { x } => {
                if self.wants(*x) {
                    add_vec(slot(flow, *x, len_of(*x)), g);
                }
            }

            Op::DiceLoss { p, ctx } => {
                if self.wants(*p) {
                    let g0 = g[0];
                    let sp = self.shape(*p);
                    let (n, c, hw) = (sp[0], sp[1], sp[2] * sp[3]);
                    let pd = self.data(*p);
                    let two = T::from_f64(2.0);
                    let inv_groups = T::from_usize(ctx.groups.len()).recip();
                    let mut member = vec![usize::MAX; c];
                    for (gi, grp) in ctx.groups.iter().enumerate() {
                        for &ch in grp {
                            member[ch] = gi;
                        }
                    }
                    let fx = slot(flow, *p, n * c * hw);
                    for b in 0..n {
                        for (gi, grp) in ctx.groups.iter().enumerate() {
                            let (spg, spp, sg) = ctx.sums[gi];
                            let den = spp + sg + ctx.eps;
                            let num = two * spg + ctx.eps;
                            let dd = den * den;
                            for pix in 0..hw {
                                let mut pg = T::zero();
                                for &ch in grp {
                                    pg += pd[(b * c + ch) * hw + pix];
                                }
                                let gt_in = member
                                    .get(ctx.gt[b * hw + pix] as usize)
                                    .map(|&mm| mm == gi)
                                    .unwrap_or(false);
                                let ind = if gt_in { two } else { T::zero() };
                                // d dice_g / d p_g at this voxel.
                                let ddice = (ind * den - num * two * pg) / dd;
                                let contrib = -g0 * inv_groups * ddice;
                                for &ch in grp {
                                    fx[(b * c + ch) * hw + pix] += contrib;
                                }
                            }
                        }
                    }
                }
            }

            Op::BceLoss { p, targets } => {
                if self.wants(*p) {
                    let g0 = g[0];
                    let sp = self.shape(*p);
                    let inv_n = T::from_usize(sp[0]).recip();
                    let lo = T::from_f64(1e-7);
                    let hi = T::one() - lo;
                    let pd = self.data(*p);
                    let fx = slot(flow, *p, pd.len());
                    for ((d, &pv), &y) in fx.iter_mut().zip(pd).zip(targets) {
                        // Clamped region has zero derivative.
                        if pv > lo && pv < hi {
                            *d += g0 * inv_n * (pv - y) / (pv * (T::one() - pv));
                        }
                    }
                }
            }
        }
    }
}
