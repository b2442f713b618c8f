//! Hot inner loops for the dense ops.
//!
//! Everything here is written so the innermost loop runs over a contiguous
//! row slice (a fused multiply-add over `&[T]`), which LLVM vectorises well;
//! the convolution is decomposed into one shifted row-SAXPY per kernel tap
//! rather than gathering patches.

use crate::scalar::Scalar;

/// `[m,k] x [k,n] -> [m,n]`, accumulating in row-major ikj order.
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// dA = G * B^T for the matmul backward: `dA[i,kk] = sum_j G[i,j] B[kk,j]`.
pub(crate) fn matmul_grad_a<T: Scalar>(g: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut da = vec![T::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            darow[kk] = acc;
        }
    }
    da
}

/// dB = A^T * G for the matmul backward: `dB[kk,j] = sum_i A[i,kk] G[i,j]`.
pub(crate) fn matmul_grad_b<T: Scalar>(g: &[T], a: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut db = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let dbrow = &mut db[kk * n..(kk + 1) * n];
            for (d, &gv) in dbrow.iter_mut().zip(grow) {
                *d += aik * gv;
            }
        }
    }
    db
}

/// Valid output/input column ranges for a kernel tap shifted by `d`
/// (`d = ktap - pad`): output columns `x0..x1` read input columns `x0+d..`.
#[inline]
fn tap_range(extent: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = ((extent as isize - d).min(extent as isize)).max(0) as usize;
    (lo, hi.max(lo))
}

/// Stride-1 same-padded convolution forward.
pub(crate) fn conv2d_fwd<T: Scalar>(
    x: &[T],
    k: &[T],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    ks: usize,
    pad: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * co * h * w];
    for b in 0..n {
        for o in 0..co {
            let obase = (b * co + o) * h * w;
            for c in 0..ci {
                let xbase = (b * ci + c) * h * w;
                for ky in 0..ks {
                    let dy = ky as isize - pad as isize;
                    let (y0, y1) = tap_range(h, dy);
                    for kx in 0..ks {
                        let wgt = k[((o * ci + c) * ks + ky) * ks + kx];
                        let dx = kx as isize - pad as isize;
                        let (x0, x1) = tap_range(w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let src_lo = (xbase + iy * w) as isize + dx;
                            let src =
                                &x[(src_lo + x0 as isize) as usize..(src_lo + x1 as isize) as usize];
                            let dst = &mut out[obase + y * w + x0..obase + y * w + x1];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += wgt * s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the convolution input: scatter each tap of the output
/// gradient back through the (flipped) kernel.
pub(crate) fn conv2d_grad_x<T: Scalar>(
    g: &[T],
    k: &[T],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    ks: usize,
    pad: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); n * ci * h * w];
    for b in 0..n {
        for o in 0..co {
            let gbase = (b * co + o) * h * w;
            for c in 0..ci {
                let xbase = (b * ci + c) * h * w;
                for ky in 0..ks {
                    let dy = ky as isize - pad as isize;
                    let (y0, y1) = tap_range(h, dy);
                    for kx in 0..ks {
                        let wgt = k[((o * ci + c) * ks + ky) * ks + kx];
                        let dxs = kx as isize - pad as isize;
                        let (x0, x1) = tap_range(w, dxs);
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let dst_lo = (xbase + iy * w) as isize + dxs;
                            let dst = &mut dx
                                [(dst_lo + x0 as isize) as usize..(dst_lo + x1 as isize) as usize];
                            let src = &g[gbase + y * w + x0..gbase + y * w + x1];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += wgt * s;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient w.r.t. the kernel: correlation of input with output gradient.
pub(crate) fn conv2d_grad_k<T: Scalar>(
    g: &[T],
    x: &[T],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    ks: usize,
    pad: usize,
) -> Vec<T> {
    let mut dk = vec![T::zero(); co * ci * ks * ks];
    for b in 0..n {
        for o in 0..co {
            let gbase = (b * co + o) * h * w;
            for c in 0..ci {
                let xbase = (b * ci + c) * h * w;
                for ky in 0..ks {
                    let dy = ky as isize - pad as isize;
                    let (y0, y1) = tap_range(h, dy);
                    for kx in 0..ks {
                        let dx = kx as isize - pad as isize;
                        let (x0, x1) = tap_range(w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let src_lo = (xbase + iy * w) as isize + dx;
                            let src =
                                &x[(src_lo + x0 as isize) as usize..(src_lo + x1 as isize) as usize];
                            let grow = &g[gbase + y * w + x0..gbase + y * w + x1];
                            for (&gv, &xv) in grow.iter().zip(src) {
                                acc += gv * xv;
                            }
                        }
                        dk[((o * ci + c) * ks + ky) * ks + kx] += acc;
                    }
                }
            }
        }
    }
    dk
}
