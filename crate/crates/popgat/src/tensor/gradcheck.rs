//! Finite-difference gradient checking.
//!
//! The independent oracle for the backward pass: central differences
//! `(f(x+h) - f(x-h)) / 2h` at 64-bit precision with `h = 1e-5`, compared
//! against the analytic gradient element by element.  The scalar objective
//! is a fixed random weighting of the op output rather than a plain sum, so
//! transposition or routing mistakes cannot cancel out.
//!
//! [`run_full_suite`] exercises every differentiable op with randomised
//! shapes and values; the library's own test- and acceptance suites assert
//! its reports stay under the tolerance.

use super::{Tape, TensorId};
use crate::error::Result;
use crate::rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Outcome of the randomized cases for one operation.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// Relative error with a unit floor so near-zero gradients compare on an
/// absolute scale.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Check one case: `build` must construct the same computation every call
/// from the given leaf inputs (declared as `(shape, data)`), returning the
/// op output (any shape).  Returns the maximum relative error over all
/// input elements.
pub fn finite_difference_check<F>(inputs: &[(Vec<usize>, Vec<f64>)], build: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    // Fix the objective weights from the first forward pass.
    let forward = |values: &[Vec<f64>]| -> Result<(Tape<f64>, Vec<TensorId>, TensorId)> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs
            .iter()
            .zip(values)
            .map(|((shape, _), vals)| tape.leaf(vals.clone(), shape, true))
            .collect::<Result<_>>()?;
        let out = build(&mut tape, &ids)?;
        Ok((tape, ids, out))
    };

    let base_values: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let (mut tape, ids, out) = forward(&base_values)?;
    let out_len = tape.data(out).len();
    let mut wrng = rng::stream(0xC0FFEE ^ out_len as u64, "gradcheck-objective");
    let weights: Vec<f64> = (0..out_len).map(|_| wrng.random::<f64>() * 2.0 - 1.0).collect();

    let objective = |tape: &mut Tape<f64>, out: TensorId| -> Result<TensorId> {
        let w = tape.constant(weights.clone(), &[out_len])?;
        let flat = tape.reshape(out, &[out_len])?;
        let prod = tape.mul(flat, w)?;
        Ok(tape.sum(prod))
    };

    let loss = objective(&mut tape, out)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.data(id).len()])
        })
        .collect();

    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let (mut tape, _, out) = forward(values)?;
        let loss = objective(&mut tape, out)?;
        Ok(tape.data(loss)[0])
    };

    let mut max_err = 0.0f64;
    for (ti, base) in base_values.iter().enumerate() {
        for ei in 0..base.len() {
            let mut plus = base_values.clone();
            plus[ti][ei] += STEP;
            let mut minus = base_values.clone();
            minus[ti][ei] -= STEP;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * STEP);
            max_err = max_err.max(rel_err(fd, analytic[ti][ei]));
        }
    }
    Ok(max_err)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn nonzero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.random::<f64>() * 2.0 - 1.0;
            v.signum() * (0.05 + v.abs())
        })
        .collect()
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Run `cases` randomized checks for every differentiable operation.
pub fn run_full_suite(seed: u64, cases: usize) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    let mut check = |op: &'static str,
                     gen: &mut dyn FnMut(
        &mut ChaCha8Rng,
    )
        -> (Vec<(Vec<usize>, Vec<f64>)>, BuildFn)|
     -> Result<()> {
        let mut max = 0.0f64;
        for case in 0..cases {
            let mut rng = rng::stream_indexed(seed, op, case as u64);
            let (inputs, build) = gen(&mut rng);
            max = max.max(finite_difference_check(&inputs, |t, ids| build(t, ids))?);
        }
        reports.push(GradCheckReport {
            op,
            cases,
            max_rel_err: max,
        });
        Ok(())
    };

    type BuildFn = Box<dyn Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>>;

    check("matmul", &mut |r| {
        let (m, k, n) = (dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4));
        let a = uniform(r, m * k, -1.0, 1.0);
        let b = uniform(r, k * n, -1.0, 1.0);
        (
            vec![(vec![m, k], a), (vec![k, n], b)],
            Box::new(|t, ids| t.matmul(ids[0], ids[1])),
        )
    })?;

    check("conv2d_3x3", &mut |r| {
        let (n, ci, co) = (dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 3));
        let (h, w) = (dims(r, 3, 6), dims(r, 3, 6));
        let x = uniform(r, n * ci * h * w, -1.0, 1.0);
        let k = uniform(r, co * ci * 9, -1.0, 1.0);
        let b = uniform(r, co, -0.5, 0.5);
        (
            vec![
                (vec![n, ci, h, w], x),
                (vec![co, ci, 3, 3], k),
                (vec![co], b),
            ],
            Box::new(|t, ids| t.conv2d(ids[0], ids[1], Some(ids[2]))),
        )
    })?;

    check("conv2d_1x1", &mut |r| {
        let (n, ci, co) = (dims(r, 1, 2), dims(r, 1, 4), dims(r, 1, 4));
        let (h, w) = (dims(r, 2, 5), dims(r, 2, 5));
        let x = uniform(r, n * ci * h * w, -1.0, 1.0);
        let k = uniform(r, co * ci, -1.0, 1.0);
        (
            vec![(vec![n, ci, h, w], x), (vec![co, ci, 1, 1], k)],
            Box::new(|t, ids| t.conv2d(ids[0], ids[1], None)),
        )
    })?;

    check("add", &mut |r| {
        let n = dims(r, 1, 24);
        (
            vec![
                (vec![n], uniform(r, n, -1.0, 1.0)),
                (vec![n], uniform(r, n, -1.0, 1.0)),
            ],
            Box::new(|t, ids| t.add(ids[0], ids[1])),
        )
    })?;

    check("sub", &mut |r| {
        let n = dims(r, 1, 24);
        (
            vec![
                (vec![n], uniform(r, n, -1.0, 1.0)),
                (vec![n], uniform(r, n, -1.0, 1.0)),
            ],
            Box::new(|t, ids| t.sub(ids[0], ids[1])),
        )
    })?;

    check("mul", &mut |r| {
        let n = dims(r, 1, 24);
        (
            vec![
                (vec![n], uniform(r, n, -1.0, 1.0)),
                (vec![n], uniform(r, n, -1.0, 1.0)),
            ],
            Box::new(|t, ids| t.mul(ids[0], ids[1])),
        )
    })?;

    check("scale", &mut |r| {
        let n = dims(r, 1, 24);
        let c = r.random::<f64>() * 4.0 - 2.0;
        (
            vec![(vec![n], uniform(r, n, -1.0, 1.0))],
            Box::new(move |t, ids| Ok(t.scale(ids[0], c))),
        )
    })?;

    check("leaky_relu", &mut |r| {
        let n = dims(r, 1, 24);
        let slope = 0.01 + r.random::<f64>() * 0.2;
        (
            vec![(vec![n], nonzero(r, n))],
            Box::new(move |t, ids| Ok(t.leaky_relu(ids[0], slope))),
        )
    })?;

    check("relu", &mut |r| {
        let n = dims(r, 1, 24);
        (
            vec![(vec![n], nonzero(r, n))],
            Box::new(|t, ids| Ok(t.relu(ids[0]))),
        )
    })?;

    check("sigmoid", &mut |r| {
        let n = dims(r, 1, 24);
        (
            vec![(vec![n], uniform(r, n, -4.0, 4.0))],
            Box::new(|t, ids| Ok(t.sigmoid(ids[0]))),
        )
    })?;

    check("softmax", &mut |r| {
        let (a, b, c) = (dims(r, 1, 3), dims(r, 2, 4), dims(r, 1, 3));
        let axis = dims(r, 0, 2);
        (
            vec![(vec![a, b, c], uniform(r, a * b * c, -2.0, 2.0))],
            Box::new(move |t, ids| t.softmax(ids[0], axis)),
        )
    })?;

    check("maxpool2d", &mut |r| {
        let (n, c) = (dims(r, 1, 2), dims(r, 1, 2));
        let (h, w) = (2 * dims(r, 1, 3), 2 * dims(r, 1, 3));
        (
            vec![(vec![n, c, h, w], uniform(r, n * c * h * w, -1.0, 1.0))],
            Box::new(|t, ids| t.maxpool2d(ids[0])),
        )
    })?;

    check("global_avg_pool", &mut |r| {
        let (n, c, h, w) = (dims(r, 1, 2), dims(r, 1, 3), dims(r, 2, 4), dims(r, 2, 4));
        (
            vec![(vec![n, c, h, w], uniform(r, n * c * h * w, -1.0, 1.0))],
            Box::new(|t, ids| t.global_avg_pool(ids[0])),
        )
    })?;

    check("upsample2x", &mut |r| {
        let (n, c, h, w) = (dims(r, 1, 2), dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 3));
        (
            vec![(vec![n, c, h, w], uniform(r, n * c * h * w, -1.0, 1.0))],
            Box::new(|t, ids| t.upsample2x(ids[0])),
        )
    })?;

    check("reduce_max", &mut |r| {
        let (a, b, c) = (dims(r, 2, 4), dims(r, 2, 4), dims(r, 1, 3));
        let axis = dims(r, 0, 2);
        (
            vec![(vec![a, b, c], uniform(r, a * b * c, -1.0, 1.0))],
            Box::new(move |t, ids| t.reduce_max(ids[0], axis)),
        )
    })?;

    check("concat", &mut |r| {
        let rows = dims(r, 1, 3);
        let (f1, f2) = (dims(r, 1, 3), dims(r, 1, 3));
        (
            vec![
                (vec![rows, f1], uniform(r, rows * f1, -1.0, 1.0)),
                (vec![rows, f2], uniform(r, rows * f2, -1.0, 1.0)),
            ],
            Box::new(|t, ids| t.concat(ids, 1)),
        )
    })?;

    check("batchnorm_train", &mut |r| {
        let (n, c, h, w) = (dims(r, 2, 3), dims(r, 1, 3), dims(r, 2, 3), dims(r, 2, 3));
        (
            vec![
                (vec![n, c, h, w], uniform(r, n * c * h * w, -1.0, 1.0)),
                (vec![c], uniform(r, c, 0.5, 1.5)),
                (vec![c], uniform(r, c, -0.5, 0.5)),
            ],
            Box::new(|t, ids| {
                t.batchnorm_train(ids[0], ids[1], ids[2], 1e-5).map(|(y, _, _)| y)
            }),
        )
    })?;

    check("batchnorm_eval", &mut |r| {
        let (n, f) = (dims(r, 1, 4), dims(r, 1, 4));
        let mean = uniform(r, f, -0.5, 0.5);
        let var = uniform(r, f, 0.2, 1.5);
        (
            vec![
                (vec![n, f], uniform(r, n * f, -1.0, 1.0)),
                (vec![f], uniform(r, f, 0.5, 1.5)),
                (vec![f], uniform(r, f, -0.5, 0.5)),
            ],
            Box::new(move |t, ids| {
                t.batchnorm_eval(ids[0], ids[1], ids[2], &mean, &var, 1e-5)
            }),
        )
    })?;

    check("dropout", &mut |r| {
        let n = dims(r, 4, 24);
        let mask_seed = r.random::<u64>();
        (
            vec![(vec![n], uniform(r, n, -1.0, 1.0))],
            Box::new(move |t, ids| {
                // Same stream every rebuild so the mask is identical across
                // the finite-difference evaluations.
                let mut mrng = rng::stream(mask_seed, "gradcheck-dropout-mask");
                t.dropout(ids[0], 0.3, &mut mrng)
            }),
        )
    })?;

    check("sum", &mut |r| {
        let n = dims(r, 1, 24);
        (
            vec![(vec![n], uniform(r, n, -1.0, 1.0))],
            Box::new(|t, ids| Ok(t.sum(ids[0]))),
        )
    })?;

    check("mean", &mut |r| {
        let n = dims(r, 1, 24);
        (
            vec![(vec![n], uniform(r, n, -1.0, 1.0))],
            Box::new(|t, ids| Ok(t.mean(ids[0]))),
        )
    })?;

    check("gather_rows", &mut |r| {
        let (rows, f) = (dims(r, 2, 5), dims(r, 1, 4));
        let picks = dims(r, 1, 6);
        let idx: Vec<usize> = (0..picks).map(|_| r.random_range(0..rows)).collect();
        (
            vec![(vec![rows, f], uniform(r, rows * f, -1.0, 1.0))],
            Box::new(move |t, ids| t.gather_rows(ids[0], &idx)),
        )
    })?;

    check("segment_sum", &mut |r| {
        let (rows, f) = (dims(r, 2, 6), dims(r, 1, 4));
        let n_seg = dims(r, 1, 4);
        let seg: Vec<usize> = (0..rows).map(|_| r.random_range(0..n_seg)).collect();
        (
            vec![(vec![rows, f], uniform(r, rows * f, -1.0, 1.0))],
            Box::new(move |t, ids| t.segment_sum(ids[0], &seg, n_seg)),
        )
    })?;

    check("segment_softmax", &mut |r| {
        let rows = dims(r, 2, 8);
        let n_seg = dims(r, 1, 3);
        let seg: Vec<usize> = (0..rows).map(|_| r.random_range(0..n_seg)).collect();
        (
            vec![(vec![rows], uniform(r, rows, -2.0, 2.0))],
            Box::new(move |t, ids| t.segment_softmax(ids[0], &seg, n_seg)),
        )
    })?;

    check("scale_rows", &mut |r| {
        let (rows, f) = (dims(r, 1, 5), dims(r, 1, 4));
        (
            vec![
                (vec![rows, f], uniform(r, rows * f, -1.0, 1.0)),
                (vec![rows], uniform(r, rows, -1.0, 1.0)),
            ],
            Box::new(|t, ids| t.scale_rows(ids[0], ids[1])),
        )
    })?;

    check("add_row_broadcast", &mut |r| {
        let (rows, f) = (dims(r, 1, 5), dims(r, 1, 4));
        (
            vec![
                (vec![rows, f], uniform(r, rows * f, -1.0, 1.0)),
                (vec![f], uniform(r, f, -1.0, 1.0)),
            ],
            Box::new(|t, ids| t.add_row_broadcast(ids[0], ids[1])),
        )
    })?;

    check("reshape", &mut |r| {
        let (a, b) = (dims(r, 1, 4), dims(r, 1, 4));
        (
            vec![(vec![a, b], uniform(r, a * b, -1.0, 1.0))],
            Box::new(move |t, ids| t.reshape(ids[0], &[a * b])),
        )
    })?;

    check("dice_loss", &mut |r| {
        let (n, c, h, w) = (dims(r, 1, 2), 4, dims(r, 2, 3), dims(r, 2, 3));
        let gt: Vec<u8> = (0..n * h * w).map(|_| r.random_range(0..c) as u8).collect();
        let lung_only = r.random::<bool>();
        let groups: Vec<Vec<usize>> = if lung_only {
            vec![vec![0], vec![1, 2, 3]]
        } else {
            (0..c).map(|ch| vec![ch]).collect()
        };
        (
            vec![(vec![n, c, h, w], uniform(r, n * c * h * w, 0.05, 0.95))],
            Box::new(move |t, ids| t.dice_loss(ids[0], &gt, &groups, 1e-6)),
        )
    })?;

    check("bce_loss", &mut |r| {
        let (n, l) = (dims(r, 1, 6), dims(r, 1, 3));
        let targets: Vec<f64> = (0..n * l).map(|_| f64::from(r.random::<bool>())).collect();
        (
            vec![(vec![n, l], uniform(r, n * l, 0.05, 0.95))],
            Box::new(move |t, ids| t.bce_loss(ids[0], &targets)),
        )
    })?;

    Ok(reports)
}
