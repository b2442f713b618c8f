//! Multi-head graph attention layer and attention-trace extraction.
//!
//! Per head p with projection Θ^p and attention vector a^p, the logit for
//! receiver i and sender j is ε_ij = leaky-ReLU₀.₂(a^pᵀ[Θ^p z_i ‖ Θ^p z_j]),
//! normalized by a softmax over j ∈ N(i) ∪ {i}; the update is
//! z′_i = σ(Σ_j α_ij Θ^p z_j).  Hidden layers concatenate head outputs,
//! output layers average them; σ is applied after head combination (it is
//! elementwise, so this is equivalent for concatenation and matches the
//! average-then-activate output convention).

use super::{Activation, EdgeList};
use crate::error::{Error, Result};
use crate::nn::uniform_init;
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tape, TensorId};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Slope of the leaky-ReLU applied to raw attention logits.
pub const ATTN_SLOPE: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct GatLayer {
    pub in_features: usize,
    pub out_features: usize,
    pub heads: usize,
    /// Concatenate head outputs (hidden layers) or average them (output
    /// layer).
    pub concat: bool,
    pub activation: Activation,
    theta: Vec<ParamId>,
    attn: Vec<ParamId>,
}

impl GatLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_features: usize,
        out_features: usize,
        heads: usize,
        concat: bool,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || in_features == 0 || out_features == 0 {
            return Err(Error::InvalidArgument {
                op: "GatLayer::register",
                reason: "in/out features and head count must be positive".into(),
            });
        }
        let mut theta = Vec::with_capacity(heads);
        let mut attn = Vec::with_capacity(heads);
        for p in 0..heads {
            theta.push(store.register(
                format!("{prefix}.head{p}.theta"),
                &[in_features, out_features],
                uniform_init(in_features * out_features, in_features, rng),
                true,
            )?);
            attn.push(store.register(
                format!("{prefix}.head{p}.attn"),
                &[2 * out_features, 1],
                uniform_init(2 * out_features, 2 * out_features, rng),
                true,
            )?);
        }
        Ok(Self {
            in_features,
            out_features,
            heads,
            concat,
            activation,
            theta,
            attn,
        })
    }

    /// Output width after head combination.
    pub fn out_width(&self) -> usize {
        if self.concat {
            self.heads * self.out_features
        } else {
            self.out_features
        }
    }

    /// One attention forward pass over `graph`, which must already contain
    /// a self-loop for every node.  When `trace` is given, the normalized
    /// coefficients of every head are appended as one layer record.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        z: TensorId,
        graph: &EdgeList,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<TensorId> {
        let zshape = tape.shape(z).to_vec();
        if zshape.len() != 2 || zshape[1] != self.in_features {
            return Err(Error::InvalidShape {
                op: "gat forward",
                shape: zshape,
                reason: format!("expected [n, {}] node features", self.in_features),
            });
        }
        if zshape[0] != graph.n_nodes {
            return Err(Error::InvalidArgument {
                op: "gat forward",
                reason: format!(
                    "feature rows ({}) and graph nodes ({}) differ",
                    zshape[0], graph.n_nodes
                ),
            });
        }
        if !graph.has_all_self_loops() {
            return Err(Error::InvalidArgument {
                op: "gat forward",
                reason: "graph must contain a self-loop for every node".into(),
            });
        }
        if let Some(t) = trace.as_deref() {
            if t.n_nodes != graph.n_nodes {
                return Err(Error::InvalidArgument {
                    op: "gat forward",
                    reason: format!(
                        "trace tracks {} nodes but graph has {}",
                        t.n_nodes, graph.n_nodes
                    ),
                });
            }
        }

        let n = graph.n_nodes;
        let mut head_outs = Vec::with_capacity(self.heads);
        let mut head_alphas = Vec::with_capacity(self.heads);
        for p in 0..self.heads {
            let theta = tape.param(store, self.theta[p]);
            let a = tape.param(store, self.attn[p]);
            let h = tape.matmul(z, theta)?; // [n, F]
            let h_recv = tape.gather_rows(h, &graph.receivers)?; // Θz_i
            let h_send = tape.gather_rows(h, &graph.senders)?; // Θz_j
            let cat = tape.concat(&[h_recv, h_send], 1)?; // [E, 2F]
            let logits = tape.matmul(cat, a)?; // [E, 1]
            let logits = tape.leaky_relu(logits, T::from_f64(ATTN_SLOPE));
            let logits = tape.reshape(logits, &[graph.n_edges()])?;
            let alpha = tape.segment_softmax(logits, &graph.receivers, n)?;
            let weighted = tape.scale_rows(h_send, alpha)?;
            head_outs.push(tape.segment_sum(weighted, &graph.receivers, n)?);
            if trace.is_some() {
                head_alphas.push(tape.data(alpha).iter().map(|&v| Scalar::to_f64(v)).collect());
            }
        }
        if let Some(t) = trace.as_deref_mut() {
            t.layers.push(LayerTrace {
                receivers: graph.receivers.clone(),
                senders: graph.senders.clone(),
                per_head: head_alphas,
            });
        }
        let combined = if self.concat {
            tape.concat(&head_outs, 1)?
        } else {
            let mut acc = head_outs[0];
            for &h in &head_outs[1..] {
                acc = tape.add(acc, h)?;
            }
            tape.scale(acc, T::from_usize(self.heads).recip())
        };
        Ok(self.activation.apply(tape, combined))
    }
}

/// Normalized attention coefficients recorded during one layer forward.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub receivers: Vec<usize>,
    pub senders: Vec<usize>,
    /// One coefficient vector per head, aligned with the edge list.
    pub per_head: Vec<Vec<f64>>,
}

/// Attention coefficients of a full head forward (all layers in order).
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub n_nodes: usize,
    pub layers: Vec<LayerTrace>,
}

impl AttentionTrace {
    pub fn new(n_nodes: usize) -> Self {
        Self {
            n_nodes,
            layers: Vec::new(),
        }
    }

    /// Dense row-major [n, n] matrix of one head's coefficients.
    pub fn head_matrix(&self, layer: usize, head: usize) -> Result<Vec<f64>> {
        let lt = self.layers.get(layer).ok_or(Error::InvalidArgument {
            op: "AttentionTrace::head_matrix",
            reason: format!("layer {layer} not recorded ({} layers)", self.layers.len()),
        })?;
        let alpha = lt.per_head.get(head).ok_or(Error::InvalidArgument {
            op: "AttentionTrace::head_matrix",
            reason: format!("head {head} not recorded ({} heads)", lt.per_head.len()),
        })?;
        let n = self.n_nodes;
        let mut m = vec![0.0; n * n];
        for (e, &a) in alpha.iter().enumerate() {
            m[lt.receivers[e] * n + lt.senders[e]] += a;
        }
        Ok(m)
    }

    /// Dense row-major [n, n] head-averaged coefficient matrix of a layer.
    pub fn head_averaged(&self, layer: usize) -> Result<Vec<f64>> {
        let heads = self
            .layers
            .get(layer)
            .ok_or(Error::InvalidArgument {
                op: "AttentionTrace::head_averaged",
                reason: format!("layer {layer} not recorded ({} layers)", self.layers.len()),
            })?
            .per_head
            .len();
        let n = self.n_nodes;
        let mut avg = vec![0.0; n * n];
        for h in 0..heads {
            let m = self.head_matrix(layer, h)?;
            for (a, v) in avg.iter_mut().zip(m) {
                *a += v;
            }
        }
        let inv = 1.0 / heads as f64;
        for a in &mut avg {
            *a *= inv;
        }
        Ok(avg)
    }

    /// Two-hop mixing matrix A₂·A₁ of a two-layer trace (layer-2 mixing
    /// applied after layer-1 mixing); row-stochastic.
    pub fn two_hop(&self) -> Result<Vec<f64>> {
        if self.layers.len() != 2 {
            return Err(Error::InvalidArgument {
                op: "AttentionTrace::two_hop",
                reason: format!("need exactly 2 recorded layers, have {}", self.layers.len()),
            });
        }
        let a1 = self.head_averaged(0)?;
        let a2 = self.head_averaged(1)?;
        let n = self.n_nodes;
        let mut prod = vec![0.0; n * n];
        for i in 0..n {
            for l in 0..n {
                let v = a2[i * n + l];
                if v == 0.0 {
                    continue;
                }
                for j in 0..n {
                    prod[i * n + j] += v * a1[l * n + j];
                }
            }
        }
        Ok(prod)
    }

    /// Serializable snapshot: every head matrix, the head-averaged matrices
    /// (layer numbering is 1-based in the export), and the two-hop product.
    pub fn export(&self) -> Result<AttentionExport> {
        let mut per_head = Vec::new();
        let mut head_averaged = Vec::new();
        for (l, lt) in self.layers.iter().enumerate() {
            for h in 0..lt.per_head.len() {
                per_head.push(AttentionMatrixJson {
                    layer: l + 1,
                    head: Some(h),
                    rows: dense_to_rows(&self.head_matrix(l, h)?, self.n_nodes),
                });
            }
            head_averaged.push(AttentionMatrixJson {
                layer: l + 1,
                head: None,
                rows: dense_to_rows(&self.head_averaged(l)?, self.n_nodes),
            });
        }
        let two_hop = dense_to_rows(&self.two_hop()?, self.n_nodes);
        Ok(AttentionExport {
            n_nodes: self.n_nodes,
            per_head,
            head_averaged,
            two_hop,
        })
    }
}

fn dense_to_rows(m: &[f64], n: usize) -> Vec<AttentionRowJson> {
    (0..n)
        .map(|i| AttentionRowJson {
            node: i,
            neighbors: (0..n)
                .filter(|&j| m[i * n + j] != 0.0)
                .map(|j| AttentionNeighborJson {
                    node: j,
                    alpha: m[i * n + j],
                })
                .collect(),
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionNeighborJson {
    pub node: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionRowJson {
    pub node: usize,
    pub neighbors: Vec<AttentionNeighborJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionMatrixJson {
    pub layer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
    pub rows: Vec<AttentionRowJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionExport {
    pub n_nodes: usize,
    pub per_head: Vec<AttentionMatrixJson>,
    pub head_averaged: Vec<AttentionMatrixJson>,
    pub two_hop: Vec<AttentionRowJson>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn random_graph(n: usize, k: usize, seed: u64) -> EdgeList {
        let mut rng = stream(seed, "gat-test-graph");
        let mut receivers = Vec::new();
        let mut senders = Vec::new();
        for i in 0..n {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.shuffle(&mut rng);
            for &j in others.iter().take(k) {
                receivers.push(i);
                senders.push(j);
            }
        }
        EdgeList::new(n, receivers, senders).unwrap().with_self_loops()
    }

    fn random_features(n: usize, f: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, "gat-test-feat");
        (0..n * f).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn forward_f64(
        layer: &GatLayer,
        store: &ParamStore<f64>,
        feats: &[f64],
        n: usize,
        graph: &EdgeList,
        trace: Option<&mut AttentionTrace>,
    ) -> Vec<f64> {
        let mut tape = Tape::new();
        let z = tape
            .leaf(feats.to_vec(), &[n, layer.in_features], false)
            .unwrap();
        let out = layer.forward(&mut tape, store, z, graph, trace).unwrap();
        tape.data(out).to_vec()
    }

    #[test]
    fn attention_rows_sum_to_one_on_the_declared_support() {
        let n = 10;
        let graph = random_graph(n, 3, 1);
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = stream(2, "gat-init");
        let layer =
            GatLayer::register(&mut store, "gat", 5, 4, 3, true, Activation::LeakyRelu, &mut rng)
                .unwrap();
        let mut trace = AttentionTrace::new(n);
        forward_f64(&layer, &store, &random_features(n, 5, 3), n, &graph, Some(&mut trace));
        let lt = &trace.layers[0];
        assert_eq!(lt.per_head.len(), 3);
        for alpha in &lt.per_head {
            let mut sums = vec![0.0; n];
            for (e, &a) in alpha.iter().enumerate() {
                assert!((0.0..=1.0).contains(&a));
                sums[lt.receivers[e]] += a;
            }
            for s in sums {
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        // Support stays on declared edges: the dense matrix is zero
        // wherever the graph has no edge.
        let m = trace.head_matrix(0, 0).unwrap();
        let mut allowed = vec![false; n * n];
        for (&r, &s) in graph.receivers.iter().zip(&graph.senders) {
            allowed[r * n + s] = true;
        }
        for (idx, &v) in m.iter().enumerate() {
            if !allowed[idx] {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn isolated_node_attends_only_to_itself() {
        let graph = EdgeList::new(1, vec![0], vec![0]).unwrap();
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = stream(4, "gat-lone");
        let layer =
            GatLayer::register(&mut store, "gat", 3, 2, 1, true, Activation::Identity, &mut rng)
                .unwrap();
        let feats = vec![0.7, -0.3, 1.1];
        let mut trace = AttentionTrace::new(1);
        let out = forward_f64(&layer, &store, &feats, 1, &graph, Some(&mut trace));
        assert_eq!(trace.layers[0].per_head[0], vec![1.0]);
        // z′ must equal Θz exactly (identity activation, α = 1).
        let theta = store.data(store.id_of("gat.head0.theta").unwrap());
        for o in 0..2 {
            let expect: f64 = (0..3).map(|i| feats[i] * theta[i * 2 + o]).sum();
            assert!((out[o] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_features_give_uniform_attention() {
        // Complete 3-node digraph plus self-loops; identical rows mean all
        // logits coincide, so every coefficient is 1/3.
        let graph = EdgeList::new(
            3,
            vec![0, 0, 1, 1, 2, 2],
            vec![1, 2, 0, 2, 0, 1],
        )
        .unwrap()
        .with_self_loops();
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = stream(5, "gat-uniform");
        let layer =
            GatLayer::register(&mut store, "gat", 2, 3, 2, true, Activation::LeakyRelu, &mut rng)
                .unwrap();
        let feats = vec![0.4, -1.2, 0.4, -1.2, 0.4, -1.2];
        let mut trace = AttentionTrace::new(3);
        forward_f64(&layer, &store, &feats, 3, &graph, Some(&mut trace));
        for alpha in &trace.layers[0].per_head {
            for &a in alpha {
                assert!((a - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn three_node_path_matches_scalar_hand_oracle() {
        // Path 0 – 1 – 2, fixed parameters, identity activation; every α
        // and output recomputed below with plain scalar arithmetic.
        let graph = EdgeList::new(3, vec![0, 1, 1, 2], vec![1, 0, 2, 1])
            .unwrap()
            .with_self_loops();
        let mut store: ParamStore<f64> = ParamStore::new();
        let theta_id = store
            .register("gat.head0.theta", &[2, 1], vec![0.3, -0.2], true)
            .unwrap();
        let attn_id = store
            .register("gat.head0.attn", &[2, 1], vec![0.5, -0.4], true)
            .unwrap();
        let layer = GatLayer {
            in_features: 2,
            out_features: 1,
            heads: 1,
            concat: true,
            activation: Activation::Identity,
            theta: vec![theta_id],
            attn: vec![attn_id],
        };
        let feats = vec![1.0, 2.0, 0.5, -1.0, -2.0, 0.0];
        let out = forward_f64(&layer, &store, &feats, 3, &graph, None);

        let leaky = |v: f64| if v >= 0.0 { v } else { 0.2 * v };
        let h = [
            0.3 * 1.0 - 0.2 * 2.0,   // -0.1
            0.3 * 0.5 - 0.2 * -1.0,  // 0.35
            0.3 * -2.0 - 0.2 * 0.0,  // -0.6
        ];
        let eps = |i: usize, j: usize| leaky(0.5 * h[i] - 0.4 * h[j]);
        let expect = |i: usize, nbrs: &[usize]| -> f64 {
            let w: Vec<f64> = nbrs.iter().map(|&j| eps(i, j).exp()).collect();
            let z: f64 = w.iter().sum();
            nbrs.iter().zip(&w).map(|(&j, e)| e / z * h[j]).sum()
        };
        assert!((out[0] - expect(0, &[1, 0])).abs() < 1e-10);
        assert!((out[1] - expect(1, &[0, 2, 1])).abs() < 1e-10);
        assert!((out[2] - expect(2, &[1, 2])).abs() < 1e-10);
    }

    #[test]
    fn permutation_equivariance() {
        let n = 8;
        let graph = random_graph(n, 3, 6);
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = stream(7, "gat-perm");
        let layer =
            GatLayer::register(&mut store, "gat", 4, 3, 2, true, Activation::LeakyRelu, &mut rng)
                .unwrap();
        let feats = random_features(n, 4, 8);
        let out = forward_f64(&layer, &store, &feats, n, &graph, None);

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut stream(9, "gat-perm-order"));
        let pgraph = graph.permuted(&perm).unwrap();
        let mut pfeats = vec![0.0; feats.len()];
        for i in 0..n {
            pfeats[perm[i] * 4..(perm[i] + 1) * 4].copy_from_slice(&feats[i * 4..(i + 1) * 4]);
        }
        let pout = forward_f64(&layer, &store, &pfeats, n, &pgraph, None);
        let width = layer.out_width();
        for i in 0..n {
            for f in 0..width {
                let a = out[i * width + f];
                let b = pout[perm[i] * width + f];
                assert!((a - b).abs() < 1e-9, "node {i} feature {f}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn averaged_heads_halve_the_width_and_average_the_outputs() {
        let n = 5;
        let graph = random_graph(n, 2, 10);
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = stream(11, "gat-avg");
        let cat =
            GatLayer::register(&mut store, "gat", 3, 2, 2, true, Activation::Identity, &mut rng)
                .unwrap();
        let avg = GatLayer {
            concat: false,
            ..cat.clone()
        };
        let feats = random_features(n, 3, 12);
        let out_cat = forward_f64(&cat, &store, &feats, n, &graph, None);
        let out_avg = forward_f64(&avg, &store, &feats, n, &graph, None);
        assert_eq!(out_cat.len(), n * 4);
        assert_eq!(out_avg.len(), n * 2);
        for i in 0..n {
            for f in 0..2 {
                let mean = 0.5 * (out_cat[i * 4 + f] + out_cat[i * 4 + 2 + f]);
                assert!((out_avg[i * 2 + f] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trace_products_are_row_stochastic_and_match_hand_matrices() {
        // Two-layer trace on a 2-node graph with hand-set coefficients.
        let mut trace = AttentionTrace::new(2);
        trace.layers.push(LayerTrace {
            receivers: vec![0, 0, 1],
            senders: vec![0, 1, 1],
            per_head: vec![vec![0.3, 0.7, 1.0]],
        });
        trace.layers.push(LayerTrace {
            receivers: vec![0, 1, 1],
            senders: vec![0, 0, 1],
            per_head: vec![vec![1.0, 0.4, 0.6]],
        });
        // A₁ = [[0.3, 0.7], [0, 1]], A₂ = [[1, 0], [0.4, 0.6]].
        // A₂·A₁ = [[0.3, 0.7], [0.12, 0.88]].
        let p = trace.two_hop().unwrap();
        for (got, want) in p.iter().zip([0.3, 0.7, 0.12, 0.88]) {
            assert!((got - want).abs() < 1e-12);
        }
        for i in 0..2 {
            let s: f64 = p[i * 2..(i + 1) * 2].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }

        // Identity × identity stays the identity.
        let mut id = AttentionTrace::new(2);
        for _ in 0..2 {
            id.layers.push(LayerTrace {
                receivers: vec![0, 1],
                senders: vec![0, 1],
                per_head: vec![vec![1.0, 1.0]],
            });
        }
        assert_eq!(id.two_hop().unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn two_hop_on_a_real_forward_is_row_stochastic_and_exports() {
        let n = 6;
        let graph = random_graph(n, 2, 13);
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = stream(14, "gat-export");
        let l1 =
            GatLayer::register(&mut store, "l1", 3, 4, 2, true, Activation::LeakyRelu, &mut rng)
                .unwrap();
        let l2 =
            GatLayer::register(&mut store, "l2", 8, 1, 2, false, Activation::Sigmoid, &mut rng)
                .unwrap();
        let mut trace = AttentionTrace::new(n);
        let mut tape: Tape<f64> = Tape::new();
        let z = tape.leaf(random_features(n, 3, 15), &[n, 3], false).unwrap();
        let h = l1.forward(&mut tape, &store, z, &graph, Some(&mut trace)).unwrap();
        let _ = l2.forward(&mut tape, &store, h, &graph, Some(&mut trace)).unwrap();
        let hop = trace.two_hop().unwrap();
        for i in 0..n {
            let s: f64 = hop[i * n..(i + 1) * n].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let export = trace.export().unwrap();
        assert_eq!(export.per_head.len(), 4);
        assert_eq!(export.head_averaged.len(), 2);
        assert_eq!(export.two_hop.len(), n);
        assert_eq!(export.head_averaged[0].layer, 1);
        assert_eq!(export.head_averaged[1].layer, 2);
        let json = serde_json::to_string(&export).unwrap();
        let back: AttentionExport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.per_head[0].rows.len(), n);
        for row in &back.head_averaged[0].rows {
            let s: f64 = row.neighbors.iter().map(|nb| nb.alpha).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn finite_difference_gradients_flow_through_attention() {
        let n = 5;
        let graph = random_graph(n, 2, 16);
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = stream(17, "gat-grad");
        let layer =
            GatLayer::register(&mut store, "gat", 3, 2, 2, true, Activation::LeakyRelu, &mut rng)
                .unwrap();
        let feats = random_features(n, 3, 18);

        let loss_of = |store: &ParamStore<f64>| -> f64 {
            let mut tape = Tape::new();
            let z = tape.leaf(feats.clone(), &[n, 3], false).unwrap();
            let out = layer.forward(&mut tape, store, z, &graph, None).unwrap();
            let loss = tape.mean(out);
            tape.data(loss)[0]
        };

        let mut tape = Tape::new();
        let z = tape.leaf(feats.clone(), &[n, 3], false).unwrap();
        let out = layer.forward(&mut tape, &store, z, &graph, None).unwrap();
        let loss = tape.mean(out);
        tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&mut store);

        let h = 1e-6;
        for (name, idx) in [
            ("gat.head0.theta", 1),
            ("gat.head0.attn", 0),
            ("gat.head1.theta", 4),
            ("gat.head1.attn", 3),
        ] {
            let pid = store.id_of(name).unwrap();
            let analytic = store.get(pid).grad[idx];
            let orig = store.data(pid)[idx];
            store.data_mut(pid)[idx] = orig + h;
            let up = loss_of(&store);
            store.data_mut(pid)[idx] = orig - h;
            let down = loss_of(&store);
            store.data_mut(pid)[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "{name}[{idx}]: analytic {analytic} vs numeric {numeric}");
        }
    }
}
