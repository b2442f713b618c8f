//! Forward-only Chebyshev spectral graph convolution (f64 reference, not
//! part of the training pipeline).
//!
//! With the scaled Laplacian L̄ = (2/λ_max)·L̂ − I of the symmetrized
//! weighted graph (L̂ the normalized Laplacian), the filter evaluates
//! Σ_k T_k(L̄)·X·θ′_k through the recursion T_0 = X, T_1 = L̄X,
//! T_k = 2L̄T_{k−1} − T_{k−2}.  Each term T_k only mixes nodes within k
//! hops, so a filter of order K is exactly K-localized in graph distance.

use crate::error::{Error, Result};

/// Chebyshev polynomial of the first kind by the three-term recurrence.
pub fn chebyshev_t(k: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    match k {
        0 => 1.0,
        1 => x,
        _ => {
            for _ in 2..=k {
                let next = 2.0 * x * cur - prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

/// Dense symmetric weighted adjacency of a small graph.
#[derive(Debug, Clone)]
pub struct WeightedAdjacency {
    pub n: usize,
    /// Row-major n×n weights, symmetric, zero diagonal.
    pub w: Vec<f64>,
}

impl WeightedAdjacency {
    /// Build from a directed weighted edge list; each pair is symmetrized
    /// with the larger of the two directed weights (an edge in either
    /// direction connects the pair, keeping its kernel value).
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut w: Vec<f64> = vec![0.0; n * n];
        for &(i, j, v) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidArgument {
                    op: "WeightedAdjacency::from_edges",
                    reason: format!("edge ({i}, {j}) out of range ({n} nodes)"),
                });
            }
            if i == j {
                continue; // the Laplacian supplies the diagonal
            }
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument {
                    op: "WeightedAdjacency::from_edges",
                    reason: format!("edge weight {v} must be finite and non-negative"),
                });
            }
            w[i * n + j] = w[i * n + j].max(v);
            w[j * n + i] = w[j * n + i].max(v);
        }
        Ok(Self { n, w })
    }

    /// Normalized Laplacian L̂ = I − D^{−1/2} W D^{−1/2}; isolated nodes
    /// (zero degree) are guarded with D_ii = 1 so their row is just the
    /// identity row.
    pub fn normalized_laplacian(&self) -> Vec<f64> {
        let n = self.n;
        let deg: Vec<f64> = (0..n)
            .map(|i| {
                let d: f64 = self.w[i * n..(i + 1) * n].iter().sum();
                if d == 0.0 {
                    1.0
                } else {
                    d
                }
            })
            .collect();
        let mut lap = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let norm = self.w[i * n + j] / (deg[i].sqrt() * deg[j].sqrt());
                lap[i * n + j] = if i == j { 1.0 - norm } else { -norm };
            }
        }
        lap
    }

    /// Largest eigenvalue of L̂ by power iteration (symmetric PSD, so the
    /// Rayleigh quotient of the iterate converges from above 0).
    pub fn lambda_max(&self) -> f64 {
        let n = self.n;
        let lap = self.normalized_laplacian();
        // Deterministic non-uniform start so it is never orthogonal to the
        // leading eigenvector by symmetry.
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.01 * (i as f64 + 1.0)).collect();
        let mut lambda = 0.0;
        for _ in 0..500 {
            let mut next = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    next[i] += lap[i * n + j] * v[j];
                }
            }
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 1.0; // L̂ annihilates the iterate only if λ_max = 0
            }
            for x in &mut next {
                *x /= norm;
            }
            let mut ray = 0.0;
            for i in 0..n {
                for j in 0..n {
                    ray += next[i] * lap[i * n + j] * next[j];
                }
            }
            if (ray - lambda).abs() < 1e-13 {
                return ray;
            }
            lambda = ray;
            v = next;
        }
        lambda
    }

    /// Scaled Laplacian L̄ = (2/λ_max)·L̂ − I.
    pub fn scaled_laplacian(&self) -> Vec<f64> {
        let n = self.n;
        let mut lap = self.normalized_laplacian();
        let lmax = self.lambda_max();
        let scale = 2.0 / lmax;
        for i in 0..n {
            for j in 0..n {
                lap[i * n + j] *= scale;
                if i == j {
                    lap[i * n + j] -= 1.0;
                }
            }
        }
        lap
    }
}

/// Spectral filter with one coefficient matrix per polynomial order.
#[derive(Debug, Clone)]
pub struct ChebFilter {
    pub in_features: usize,
    pub out_features: usize,
    /// θ′_0 … θ′_K, each row-major [in_features × out_features].
    pub theta: Vec<Vec<f64>>,
}

impl ChebFilter {
    pub fn new(in_features: usize, out_features: usize, theta: Vec<Vec<f64>>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::InvalidArgument {
                op: "ChebFilter::new",
                reason: "need at least the order-0 coefficient".into(),
            });
        }
        for (k, t) in theta.iter().enumerate() {
            if t.len() != in_features * out_features {
                return Err(Error::InvalidArgument {
                    op: "ChebFilter::new",
                    reason: format!(
                        "θ′_{k} has {} entries, expected {}×{}",
                        t.len(),
                        in_features,
                        out_features
                    ),
                });
            }
        }
        Ok(Self {
            in_features,
            out_features,
            theta,
        })
    }

    /// Maximum polynomial order K (the filter is (K)-hop localized).
    pub fn order(&self) -> usize {
        self.theta.len() - 1
    }

    /// Apply the filter to node features `x` (row-major [n × in_features]).
    pub fn forward(&self, x: &[f64], graph: &WeightedAdjacency) -> Result<Vec<f64>> {
        let n = graph.n;
        let fi = self.in_features;
        let fo = self.out_features;
        if x.len() != n * fi {
            return Err(Error::InvalidArgument {
                op: "ChebFilter::forward",
                reason: format!("features have {} entries, expected {n}×{fi}", x.len()),
            });
        }
        let lbar = graph.scaled_laplacian();
        let matvec = |m: &[f64], v: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; n * fi];
            for i in 0..n {
                for j in 0..n {
                    let w = m[i * n + j];
                    if w == 0.0 {
                        continue;
                    }
                    for f in 0..fi {
                        out[i * fi + f] += w * v[j * fi + f];
                    }
                }
            }
            out
        };
        let mut out = vec![0.0; n * fo];
        let mut accumulate = |t: &[f64], theta: &[f64]| {
            for i in 0..n {
                for f in 0..fi {
                    let v = t[i * fi + f];
                    if v == 0.0 {
                        continue;
                    }
                    for o in 0..fo {
                        out[i * fo + o] += v * theta[f * fo + o];
                    }
                }
            }
        };
        let mut t_prev = x.to_vec();
        accumulate(&t_prev, &self.theta[0]);
        if self.theta.len() == 1 {
            return Ok(out);
        }
        let mut t_cur = matvec(&lbar, &t_prev);
        accumulate(&t_cur, &self.theta[1]);
        for theta in &self.theta[2..] {
            let mut t_next = matvec(&lbar, &t_cur);
            for (nx, pv) in t_next.iter_mut().zip(&t_prev) {
                *nx = 2.0 * *nx - pv;
            }
            accumulate(&t_next, theta);
            t_prev = t_cur;
            t_cur = t_next;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn identity(n: usize) -> Vec<f64> {
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] = 1.0;
        }
        m
    }

    fn random_graph(n: usize, extra: usize, seed: u64) -> WeightedAdjacency {
        let mut rng = stream(seed, "cheb-test-graph");
        let mut edges: Vec<(usize, usize, f64)> = (0..n)
            .map(|i| (i, (i + 1) % n, rng.random_range(0.2..1.0)))
            .collect();
        for _ in 0..extra {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i != j {
                edges.push((i, j, rng.random_range(0.2..1.0)));
            }
        }
        WeightedAdjacency::from_edges(n, &edges).unwrap()
    }

    #[test]
    fn scalar_recurrence_hand_values() {
        assert_eq!(chebyshev_t(0, 0.3), 1.0);
        assert_eq!(chebyshev_t(1, 0.3), 0.3);
        assert_eq!(chebyshev_t(2, 0.5), -0.5); // 2·0.25 − 1
        assert!((chebyshev_t(3, 0.5) - -1.0).abs() < 1e-15); // 4x³−3x at 0.5
        // cos identity on [−1, 1]: T_k(cos t) = cos(k t).
        for k in 0..6 {
            let t = 0.8f64;
            let want = (k as f64 * t).cos();
            assert!((chebyshev_t(k, t.cos()) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn order_zero_identity_coefficients_reproduce_the_input() {
        let g = random_graph(6, 4, 31);
        let filter = ChebFilter::new(2, 2, vec![vec![1.0, 0.0, 0.0, 1.0]]).unwrap();
        let mut rng = stream(32, "cheb-id");
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert_eq!(filter.forward(&x, &g).unwrap(), x);
    }

    #[test]
    fn laplacian_is_symmetric_with_unit_diagonal_and_bounded_spectrum() {
        let g = random_graph(8, 6, 33);
        let lap = g.normalized_laplacian();
        for i in 0..8 {
            assert!((lap[i * 8 + i] - 1.0).abs() < 1e-12);
            for j in 0..8 {
                assert!((lap[i * 8 + j] - lap[j * 8 + i]).abs() < 1e-12);
            }
        }
        let lmax = g.lambda_max();
        assert!(lmax > 0.0 && lmax <= 2.0 + 1e-9);
    }

    #[test]
    fn isolated_node_degree_guard_keeps_values_finite() {
        // Node 2 has no edges at all.
        let g = WeightedAdjacency::from_edges(3, &[(0, 1, 1.0)]).unwrap();
        let lap = g.normalized_laplacian();
        assert!(lap.iter().all(|v| v.is_finite()));
        assert_eq!(lap[2 * 3 + 2], 1.0);
        let filter = ChebFilter::new(1, 1, vec![vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        let out = filter.forward(&[1.0, 2.0, 3.0], &g).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn one_hot_coefficients_match_a_dense_polynomial_oracle() {
        // Independent oracle: build T_k(L̄) as a dense matrix by the same
        // three-term recurrence on matrices, then multiply once.
        let n = 10;
        let g = random_graph(n, 8, 34);
        let lbar = g.scaled_laplacian();
        let matmul = |a: &[f64], b: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for l in 0..n {
                    let v = a[i * n + l];
                    for j in 0..n {
                        out[i * n + j] += v * b[l * n + j];
                    }
                }
            }
            out
        };
        let mut rng = stream(35, "cheb-onehot");
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut p_prev = identity(n);
        let mut p_cur = lbar.clone();
        for k in 0..5 {
            let pk = match k {
                0 => p_prev.clone(),
                1 => p_cur.clone(),
                _ => {
                    let mut next = matmul(&lbar, &p_cur);
                    for (nx, pv) in next.iter_mut().zip(&p_prev) {
                        *nx = 2.0 * *nx - pv;
                    }
                    p_prev = std::mem::replace(&mut p_cur, next.clone());
                    next
                }
            };
            let mut theta = vec![vec![0.0]; k + 1];
            theta[k] = vec![1.0];
            let filter = ChebFilter::new(1, 1, theta).unwrap();
            let got = filter.forward(&x, &g).unwrap();
            for i in 0..n {
                let want: f64 = (0..n).map(|j| pk[i * n + j] * x[j]).sum();
                assert!(
                    (got[i] - want).abs() < 1e-8,
                    "k={k} node {i}: {} vs {}",
                    got[i],
                    want
                );
            }
        }
    }

    #[test]
    fn filters_are_exactly_k_localized() {
        // Dirac input at one node: a filter of maximum order K must leave
        // every node farther than K hops exactly zero, and zeroing the
        // node's input only changes outputs within K hops.
        for seed in 36..41 {
            let n = 10;
            let g = random_graph(n, 3, seed);
            // BFS hop distances over the symmetrized support.
            let src = (seed as usize) % n;
            let mut dist = vec![usize::MAX; n];
            dist[src] = 0;
            let mut queue = std::collections::VecDeque::from([src]);
            while let Some(u) = queue.pop_front() {
                for v in 0..n {
                    if g.w[u * n + v] != 0.0 && dist[v] == usize::MAX {
                        dist[v] = dist[u] + 1;
                        queue.push_back(v);
                    }
                }
            }
            for k_max in 1..4 {
                let theta: Vec<Vec<f64>> = (0..=k_max).map(|_| vec![1.0]).collect();
                let filter = ChebFilter::new(1, 1, theta).unwrap();
                let mut x = vec![0.0; n];
                x[src] = 1.0;
                let out = filter.forward(&x, &g).unwrap();
                for i in 0..n {
                    if dist[i] > k_max {
                        assert_eq!(out[i], 0.0, "seed {seed} K={k_max} node {i} leaked");
                    }
                }
                // Difference form: zeroing the source from a random input
                // changes nothing outside K hops.
                let mut rng = stream(seed, "cheb-local-x");
                let full: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mut zeroed = full.clone();
                zeroed[src] = 0.0;
                let a = filter.forward(&full, &g).unwrap();
                let b = filter.forward(&zeroed, &g).unwrap();
                for i in 0..n {
                    if dist[i] > k_max {
                        assert_eq!(a[i], b[i], "seed {seed} K={k_max} node {i} changed");
                    }
                }
            }
        }
    }
}
