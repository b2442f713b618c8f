//! Population-graph construction: feature weighting, weighted Minkowski
//! distances, directed k-nearest-neighbor graphs, RBF edge similarity and
//! test-node attachment for inductive evaluation.
//!
//! The graph is binary and directed: every node points at its k closest
//! neighbors under the weighted distance; ties are broken by ascending
//! node id so construction is deterministic.  Each edge also carries the
//! raw distance and an RBF similarity derived from the mean pairwise
//! training distance.

pub mod mi;

use crate::error::{Error, Result};
use crate::tabular::Outcomes;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// How per-feature distance weights are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMethod {
    Uniform,
    MutualInformation,
    PearsonAbs,
}

impl WeightMethod {
    pub fn name(&self) -> &'static str {
        match self {
            WeightMethod::Uniform => "uniform",
            WeightMethod::MutualInformation => "mutual-information",
            WeightMethod::PearsonAbs => "pearson-abs",
        }
    }
}

/// Nonnegative per-feature weights for the Minkowski distance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureWeights {
    pub weights: Vec<f64>,
    pub method: WeightMethod,
}

impl FeatureWeights {
    pub fn uniform(dim: usize) -> Self {
        Self {
            weights: vec![1.0; dim],
            method: WeightMethod::Uniform,
        }
    }
}

/// Ordinal severity: the number of adverse outcomes (0..=3).
pub fn severity_encode(outcomes: &Outcomes) -> u32 {
    outcomes.icu as u32 + outcomes.vent as u32 + outcomes.mort as u32
}

/// Fit per-feature weights on training rows only.  `columns` is row-major
/// n×d; `labels` are the discrete targets (severity for the multilabel
/// setting).  Falls back to uniform weights with a warning if every
/// estimated weight is zero.
pub fn fit_weights(
    rows: &[Vec<f64>],
    labels: &[u32],
    method: WeightMethod,
    mi_neighbors: usize,
    mi_reps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureWeights> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::Degenerate {
            what: "fit_weights",
            reason: "no training rows".into(),
        });
    }
    if n != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "fit_weights",
            lhs: vec![n],
            rhs: vec![labels.len()],
        });
    }
    let d = rows[0].len();
    if method == WeightMethod::Uniform {
        return Ok(FeatureWeights::uniform(d));
    }
    let mut weights = Vec::with_capacity(d);
    let mut column = vec![0.0; n];
    for j in 0..d {
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::ShapeMismatch {
                    op: "fit_weights",
                    lhs: vec![row.len()],
                    rhs: vec![d],
                });
            }
            column[i] = row[j];
        }
        let w = match method {
            WeightMethod::Uniform => unreachable!(),
            WeightMethod::MutualInformation => {
                mi::mutual_info(&column, labels, mi_neighbors, mi_reps, rng)?
            }
            WeightMethod::PearsonAbs => {
                let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
                mi::pearson(&column, &y)?.abs()
            }
        };
        weights.push(w);
    }
    if weights.iter().all(|&w| w == 0.0) {
        log::warn!("fit_weights: all {} weights are zero, falling back to uniform", method.name());
        return Ok(FeatureWeights::uniform(d));
    }
    Ok(FeatureWeights { weights, method })
}

/// Weighted Minkowski distance `(Σ_l |w_l (a_l - b_l)|^p)^(1/p)`.
pub fn weighted_minkowski(a: &[f64], b: &[f64], w: &[f64], p: f64) -> Result<f64> {
    if a.len() != b.len() || a.len() != w.len() {
        return Err(Error::ShapeMismatch {
            op: "weighted_minkowski",
            lhs: vec![a.len(), w.len()],
            rhs: vec![b.len(), w.len()],
        });
    }
    if !(p >= 1.0) {
        return Err(Error::InvalidArgument {
            op: "weighted_minkowski",
            reason: format!("order p must be >= 1, got {p}"),
        });
    }
    let mut acc = 0.0;
    if p == 2.0 {
        for ((&x, &y), &wl) in a.iter().zip(b).zip(w) {
            let t = wl * (x - y);
            acc += t * t;
        }
        Ok(acc.sqrt())
    } else {
        for ((&x, &y), &wl) in a.iter().zip(b).zip(w) {
            acc += (wl * (x - y)).abs().powf(p);
        }
        Ok(acc.powf(1.0 / p))
    }
}

/// RBF edge similarity.  The printed form uses the raw distance in the
/// exponent, `exp(-ω / 2μ²)`; `squared` switches to the Gaussian variant
/// `exp(-ω² / 2μ²)`.
pub fn rbf_similarity(omega: f64, mu: f64, squared: bool) -> Result<f64> {
    if !(mu > 0.0) {
        return Err(Error::InvalidArgument {
            op: "rbf_similarity",
            reason: format!("mean distance must be positive, got {mu}"),
        });
    }
    if omega < 0.0 {
        return Err(Error::InvalidArgument {
            op: "rbf_similarity",
            reason: format!("distance must be nonnegative, got {omega}"),
        });
    }
    let num = if squared { omega * omega } else { omega };
    Ok((-num / (2.0 * mu * mu)).exp())
}

/// One directed edge with its distance and similarity attributes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub distance: f64,
    pub similarity: f64,
}

/// Directed KNN graph over one cohort split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationGraph {
    pub n: usize,
    pub k: usize,
    /// Minkowski order used for the distances.
    pub p: f64,
    /// Whether similarities use the squared-distance kernel variant.
    pub squared_kernel: bool,
    /// Mean distance over all node pairs (the kernel bandwidth).
    pub mu: f64,
    /// Edges grouped by source: node i owns `edges[i*k..(i+1)*k]`,
    /// neighbors ordered by ascending (distance, id).
    pub edges: Vec<Edge>,
}

impl PopulationGraph {
    pub fn out_edges(&self, i: usize) -> &[Edge] {
        &self.edges[i * self.k..(i + 1) * self.k]
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.out_edges(i).iter().map(|e| e.dst)
    }
}

/// Build the directed KNN population graph.  μ is the mean distance over
/// all unordered node pairs of exactly the rows given here, so pass
/// training rows only.
pub fn knn_graph(
    rows: &[Vec<f64>],
    w: &FeatureWeights,
    k: usize,
    p: f64,
    squared_kernel: bool,
) -> Result<PopulationGraph> {
    let n = rows.len();
    if n <= k {
        return Err(Error::InvalidArgument {
            op: "knn_graph",
            reason: format!("need more than k={k} nodes, got {n}"),
        });
    }
    if k == 0 {
        return Err(Error::InvalidArgument {
            op: "knn_graph",
            reason: "k must be positive".into(),
        });
    }
    // All-pairs distances (symmetric, computed once per unordered pair).
    let mut dist = vec![0.0f64; n * n];
    let mut mu = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = weighted_minkowski(&rows[i], &rows[j], &w.weights, p)?;
            dist[i * n + j] = d;
            dist[j * n + i] = d;
            mu += d;
        }
    }
    mu /= (n * (n - 1) / 2) as f64;
    if !(mu > 0.0) {
        return Err(Error::Degenerate {
            what: "knn_graph",
            reason: "mean pairwise distance is zero (all feature rows identical)".into(),
        });
    }
    let mut edges = Vec::with_capacity(n * k);
    let mut order: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        // Ascending distance, ties by ascending node id (sort is stable and
        // `order` is already id-ascending).
        order.sort_by(|&a, &b| dist[i * n + a].partial_cmp(&dist[i * n + b]).unwrap());
        for &j in order.iter().take(k) {
            let d = dist[i * n + j];
            edges.push(Edge {
                src: i,
                dst: j,
                distance: d,
                similarity: rbf_similarity(d, mu, squared_kernel)?,
            });
        }
    }
    Ok(PopulationGraph {
        n,
        k,
        p,
        squared_kernel,
        mu,
        edges,
    })
}

/// A single evaluation batch: one test node plus its training context.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestAttachment {
    /// Original train indices of the context, nearest first.  In the batch
    /// the test patient is node 0 and `context[i]` becomes node `1 + i`.
    pub context: Vec<usize>,
    /// Batch-local edges: the test node's k nearest plus the train-train
    /// edges induced on the context.
    pub edges: Vec<Edge>,
}

/// Attach an unseen patient to a trained population graph.  The test row
/// uses predicted radiomics while `train_rows` carry ground-truth-derived
/// features; the context is the `context_size` nearest training nodes
/// (always a superset of the k linked neighbors).
pub fn attach_test_node(
    graph: &PopulationGraph,
    train_rows: &[Vec<f64>],
    test_row: &[f64],
    w: &FeatureWeights,
    context_size: usize,
) -> Result<TestAttachment> {
    let n = train_rows.len();
    if n != graph.n {
        return Err(Error::ShapeMismatch {
            op: "attach_test_node",
            lhs: vec![n],
            rhs: vec![graph.n],
        });
    }
    if context_size < graph.k {
        return Err(Error::InvalidArgument {
            op: "attach_test_node",
            reason: format!("context size {context_size} smaller than k={}", graph.k),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let dists: Vec<f64> = train_rows
        .iter()
        .map(|r| weighted_minkowski(test_row, r, &w.weights, graph.p))
        .collect::<Result<_>>()?;
    order.sort_by(|&a, &b| dists[a].partial_cmp(&dists[b]).unwrap());
    let context: Vec<usize> = order.iter().take(context_size.min(n)).copied().collect();
    let local: std::collections::HashMap<usize, usize> = context
        .iter()
        .enumerate()
        .map(|(local_i, &orig)| (orig, local_i + 1))
        .collect();
    let mut edges = Vec::new();
    // Test node (local 0) links to its k nearest training patients.
    for &orig in context.iter().take(graph.k.min(n)) {
        edges.push(Edge {
            src: 0,
            dst: local[&orig],
            distance: dists[orig],
            similarity: rbf_similarity(dists[orig], graph.mu, graph.squared_kernel)?,
        });
    }
    // Train-side edges restricted to the selected context.
    for &orig in &context {
        for e in graph.out_edges(orig) {
            if let Some(&dst_local) = local.get(&e.dst) {
                edges.push(Edge {
                    src: local[&orig],
                    dst: dst_local,
                    distance: e.distance,
                    similarity: e.similarity,
                });
            }
        }
    }
    Ok(TestAttachment { context, edges })
}

/// Export edges as `src,dst,distance,similarity` CSV; node ids map graph
/// indices to patient identifiers.
pub fn write_graph_csv(path: &Path, graph_edges: &[Edge], ids: &[String]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path.display().to_string(),
        source: e,
    })?;
    let io_err = |e: csv::Error| Error::Csv {
        path: path.display().to_string(),
        source: e,
    };
    writer.write_record(["src", "dst", "distance", "similarity"]).map_err(io_err)?;
    for e in graph_edges {
        writer
            .write_record([
                ids[e.src].as_str(),
                ids[e.dst].as_str(),
                &format!("{}", e.distance),
                &format!("{}", e.similarity),
            ])
            .map_err(io_err)?;
    }
    writer.flush().map_err(|e| Error::io("flushing graph csv", e))?;
    Ok(())
}

/// Export feature weights as `feature,weight,method` CSV.
pub fn write_weights_csv(path: &Path, names: &[String], weights: &FeatureWeights) -> Result<()> {
    if names.len() != weights.weights.len() {
        return Err(Error::ShapeMismatch {
            op: "write_weights_csv",
            lhs: vec![names.len()],
            rhs: vec![weights.weights.len()],
        });
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path.display().to_string(),
        source: e,
    })?;
    let io_err = |e: csv::Error| Error::Csv {
        path: path.display().to_string(),
        source: e,
    };
    writer.write_record(["feature", "weight", "method"]).map_err(io_err)?;
    for (name, w) in names.iter().zip(&weights.weights) {
        writer
            .write_record([name.as_str(), &format!("{w}"), weights.method.name()])
            .map_err(io_err)?;
    }
    writer.flush().map_err(|e| Error::io("flushing weights csv", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn minkowski_hand_cases() {
        let w = [1.0, 1.0];
        assert_eq!(weighted_minkowski(&[2.0, 3.0], &[2.0, 3.0], &w, 2.0).unwrap(), 0.0);
        // Uniform weights, p = 2: plain Euclidean distance.
        assert!((weighted_minkowski(&[0.0, 0.0], &[3.0, 4.0], &w, 2.0).unwrap() - 5.0).abs() < 1e-12);
        // Weight zero silences the second coordinate entirely.
        let d = weighted_minkowski(&[0.0, 5.0], &[3.0, 9.0], &[2.0, 0.0], 2.0).unwrap();
        assert!((d - 6.0).abs() < 1e-12);
        assert!(weighted_minkowski(&[0.0], &[1.0], &[1.0], 0.5).is_err());
        assert!(weighted_minkowski(&[0.0], &[1.0, 2.0], &[1.0], 2.0).is_err());
    }

    #[test]
    fn minkowski_is_a_metric_for_positive_weights() {
        let mut rng = crate::rng::stream(9, "metric-axioms");
        for _ in 0..200 {
            let d = rng.random_range(2..6);
            let w: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..3.0)).collect();
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
            let y: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
            let dxy = weighted_minkowski(&x, &y, &w, 2.0).unwrap();
            let dyx = weighted_minkowski(&y, &x, &w, 2.0).unwrap();
            let dxz = weighted_minkowski(&x, &z, &w, 2.0).unwrap();
            let dzy = weighted_minkowski(&z, &y, &w, 2.0).unwrap();
            assert!((dxy - dyx).abs() < 1e-12, "symmetry");
            assert_eq!(weighted_minkowski(&x, &x, &w, 2.0).unwrap(), 0.0, "identity");
            assert!(dxy <= dxz + dzy + 1e-9, "triangle: {dxy} > {dxz} + {dzy}");
        }
    }

    #[test]
    fn weight_scaling_preserves_topology() {
        let mut rng = crate::rng::stream(10, "weight-scaling");
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let w: Vec<f64> = (0..3).map(|_| rng.random_range(0.2..2.0)).collect();
        let g1 = knn_graph(&rows, &FeatureWeights { weights: w.clone(), method: WeightMethod::Uniform }, 4, 2.0, false).unwrap();
        let scaled: Vec<f64> = w.iter().map(|v| v * 3.7).collect();
        let g2 = knn_graph(&rows, &FeatureWeights { weights: scaled, method: WeightMethod::Uniform }, 4, 2.0, false).unwrap();
        for (e1, e2) in g1.edges.iter().zip(&g2.edges) {
            assert_eq!((e1.src, e1.dst), (e2.src, e2.dst));
            assert!((e2.distance - 3.7 * e1.distance).abs() < 1e-9);
        }
    }

    #[test]
    fn severity_counts_adverse_outcomes() {
        let s = |icu, vent, mort| severity_encode(&Outcomes { icu, vent, mort });
        assert_eq!(s(false, false, false), 0);
        assert_eq!(s(true, true, true), 3);
        assert_eq!(s(true, false, true), 2); // non-nested combination tolerated
    }

    #[test]
    fn eight_nodes_k7_is_complete_digraph() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let g = knn_graph(&rows, &FeatureWeights::uniform(2), 7, 2.0, false).unwrap();
        assert_eq!(g.edges.len(), 56);
        for i in 0..8 {
            let outs: Vec<usize> = g.neighbors(i).collect();
            assert_eq!(outs.len(), 7);
            assert!(!outs.contains(&i), "self-edge at {i}");
            let mut sorted = outs.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 7);
        }
    }

    #[test]
    fn collinear_hand_case() {
        let rows = vec![vec![0.0], vec![1.0], vec![3.0]];
        let g = knn_graph(&rows, &FeatureWeights::uniform(1), 1, 2.0, false).unwrap();
        let targets: Vec<(usize, usize)> = g.edges.iter().map(|e| (e.src, e.dst)).collect();
        assert_eq!(targets, vec![(0, 1), (1, 0), (2, 1)]);
    }

    #[test]
    fn distance_ties_break_by_ascending_id() {
        // Node 0 equidistant from 1 and 2; k = 1 must pick the lower id.
        let rows = vec![vec![0.0], vec![1.0], vec![-1.0], vec![10.0]];
        let g = knn_graph(&rows, &FeatureWeights::uniform(1), 1, 2.0, false).unwrap();
        assert_eq!((g.edges[0].src, g.edges[0].dst), (0, 1));
    }

    #[test]
    fn uniform_graph_matches_all_pairs_sort_oracle() {
        let mut rng = crate::rng::stream(12, "knn-oracle");
        for case in 0..50 {
            let n = rng.random_range(9..25);
            let d = rng.random_range(1..5);
            let k = rng.random_range(1..(n - 1).min(8));
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let g = knn_graph(&rows, &FeatureWeights::uniform(d), k, 2.0, false).unwrap();
            for i in 0..n {
                // Independent oracle: full sort of (distance, id) pairs.
                let mut all: Vec<(f64, usize)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| {
                        let d2: f64 = rows[i]
                            .iter()
                            .zip(&rows[j])
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        (d2.sqrt(), j)
                    })
                    .collect();
                all.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let want: Vec<usize> = all.iter().take(k).map(|&(_, j)| j).collect();
                let got: Vec<usize> = g.neighbors(i).collect();
                assert_eq!(got, want, "case {case}, node {i}");
            }
        }
    }

    #[test]
    fn rbf_kernel_properties() {
        let mu = 1.7;
        assert_eq!(rbf_similarity(0.0, mu, false).unwrap(), 1.0);
        let at_char = rbf_similarity(2.0 * mu * mu, mu, false).unwrap();
        assert!((at_char - (-1.0f64).exp()).abs() < 1e-12);
        // Strictly decreasing, always in (0, 1].
        let mut prev = 2.0;
        for i in 0..50 {
            let s = rbf_similarity(i as f64 * 0.3, mu, false).unwrap();
            assert!(s > 0.0 && s <= 1.0);
            assert!(s < prev || (i == 0 && s == 1.0));
            prev = s;
        }
        assert!(rbf_similarity(1.0, 0.0, false).is_err());
        // Squared variant: exp(-ω²/2μ²).
        let sq = rbf_similarity(3.0, mu, true).unwrap();
        assert!((sq - (-9.0 / (2.0 * mu * mu)) as f64).exp().abs() > 0.0);
        assert!((sq - (-(9.0) / (2.0 * mu * mu)).exp()).abs() < 1e-12);
    }

    #[test]
    fn edge_similarity_is_one_iff_distance_zero() {
        let mut rows: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64]).collect();
        rows[8] = rows[0].clone(); // duplicate features: distance 0 edge
        let g = knn_graph(&rows, &FeatureWeights::uniform(1), 2, 2.0, false).unwrap();
        for e in &g.edges {
            assert!(e.similarity > 0.0 && e.similarity <= 1.0);
            assert_eq!(e.similarity == 1.0, e.distance == 0.0);
        }
    }

    #[test]
    fn test_attachment_contract() {
        let mut rng = crate::rng::stream(13, "attach");
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let w = FeatureWeights::uniform(4);
        let g = knn_graph(&rows, &w, 7, 2.0, false).unwrap();
        let test_row: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let att = attach_test_node(&g, &rows, &test_row, &w, 18).unwrap();
        assert_eq!(att.context.len(), 18);
        // Test node out-degree k, all targets inside the context.
        let test_edges: Vec<&Edge> = att.edges.iter().filter(|e| e.src == 0).collect();
        assert_eq!(test_edges.len(), 7);
        for e in &test_edges {
            assert!(e.dst >= 1 && e.dst <= 18);
        }
        // Context is the 18 nearest, ascending.
        let mut dists: Vec<(f64, usize)> = rows
            .iter()
            .enumerate()
            .map(|(j, r)| (weighted_minkowski(&test_row, r, &w.weights, 2.0).unwrap(), j))
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want: Vec<usize> = dists.iter().take(18).map(|&(_, j)| j).collect();
        assert_eq!(att.context, want);
        // Induced train edges match the original graph exactly.
        for e in att.edges.iter().filter(|e| e.src != 0) {
            let orig_src = att.context[e.src - 1];
            let orig_dst = att.context[e.dst - 1];
            assert!(g
                .out_edges(orig_src)
                .iter()
                .any(|oe| oe.dst == orig_dst && oe.distance == e.distance));
        }
        // No edges duplicated.
        let mut pairs: Vec<(usize, usize)> = att.edges.iter().map(|e| (e.src, e.dst)).collect();
        pairs.sort_unstable();
        let len = pairs.len();
        pairs.dedup();
        assert_eq!(pairs.len(), len);
    }

    #[test]
    fn graph_rejects_too_few_nodes() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        assert!(knn_graph(&rows, &FeatureWeights::uniform(1), 7, 2.0, false).is_err());
    }
}
