//! Multimodal fusion and classification heads.
//!
//! The three modality embeddings — image z_I, radiomics r, metadata x_M —
//! are each projected to a common width F_c and combined by an aggregation
//! Ψ (concatenation by default, so F_c = 32 gives a 96-wide fused vector).
//! On top of the fused vectors sit the graph-attention head (two GAT
//! layers over the population graph), an MLP ablation head, and the
//! parameter-free (w)KNN reference classifiers.

use crate::error::{Error, Result};
use crate::gnn::{Activation, AttentionTrace, EdgeList, GatLayer};
use crate::nn::{dropout_if_training, BatchNormLayer, Linear, LEAKY_SLOPE};
use crate::popgraph::{rbf_similarity, weighted_minkowski, FeatureWeights};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tape, TensorId};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Aggregation Ψ combining the three projected modality vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    #[default]
    Concat,
    Average,
    Maxpool,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Concat => "concat",
            FusionMode::Average => "average",
            FusionMode::Maxpool => "maxpool",
        }
    }
}

/// Projections Θ_I, Θ_R, Θ_M to the shared width F_c plus the Ψ mode.
#[derive(Debug, Clone)]
pub struct JointFusion {
    pub f_c: usize,
    pub mode: FusionMode,
    theta_i: Linear,
    theta_r: Linear,
    theta_m: Linear,
}

impl JointFusion {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        f_image: usize,
        f_radiomics: usize,
        f_metadata: usize,
        f_c: usize,
        mode: FusionMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            f_c,
            mode,
            theta_i: Linear::register(store, &format!("{prefix}.theta_i"), f_image, f_c, false, rng)?,
            theta_r: Linear::register(store, &format!("{prefix}.theta_r"), f_radiomics, f_c, false, rng)?,
            theta_m: Linear::register(store, &format!("{prefix}.theta_m"), f_metadata, f_c, false, rng)?,
        })
    }

    /// Fused width produced by [`Self::forward`].
    pub fn out_width(&self) -> usize {
        match self.mode {
            FusionMode::Concat => 3 * self.f_c,
            FusionMode::Average | FusionMode::Maxpool => self.f_c,
        }
    }

    /// z_c = Ψ(σ(Θ_I z_I), σ(Θ_R r), σ(Θ_M x_M)) with σ = leaky-ReLU.
    /// All inputs are [n, F_modality] over the same n patients.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        z_image: TensorId,
        radiomics: TensorId,
        metadata: TensorId,
    ) -> Result<TensorId> {
        let n = tape.shape(z_image)[0];
        for (name, t) in [("radiomics", radiomics), ("metadata", metadata)] {
            if tape.shape(t)[0] != n {
                return Err(Error::InvalidArgument {
                    op: "joint fusion",
                    reason: format!(
                        "{name} has {} rows but the image embedding has {n}",
                        tape.shape(t)[0]
                    ),
                });
            }
        }
        let slope = T::from_f64(LEAKY_SLOPE);
        let pi = self.theta_i.forward(tape, store, z_image)?;
        let pi = tape.leaky_relu(pi, slope);
        let pr = self.theta_r.forward(tape, store, radiomics)?;
        let pr = tape.leaky_relu(pr, slope);
        let pm = self.theta_m.forward(tape, store, metadata)?;
        let pm = tape.leaky_relu(pm, slope);
        match self.mode {
            FusionMode::Concat => tape.concat(&[pi, pr, pm], 1),
            FusionMode::Average => {
                let s = tape.add(pi, pr)?;
                let s = tape.add(s, pm)?;
                Ok(tape.scale(s, T::from_f64(1.0 / 3.0)))
            }
            FusionMode::Maxpool => {
                let a = tape.reshape(pi, &[n, 1, self.f_c])?;
                let b = tape.reshape(pr, &[n, 1, self.f_c])?;
                let c = tape.reshape(pm, &[n, 1, self.f_c])?;
                let stack = tape.concat(&[a, b, c], 1)?;
                tape.reduce_max(stack, 1)
            }
        }
    }
}

/// Two-layer graph-attention classification head configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GatHeadConfig {
    pub in_features: usize,
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    pub n_labels: usize,
}

impl Default for GatHeadConfig {
    fn default() -> Self {
        Self {
            in_features: 96,
            hidden: 64,
            heads: 5,
            dropout: 0.10,
            n_labels: 1,
        }
    }
}

/// Batchnorm + dropout on the fused vector, then GAT(in → hidden, heads
/// concatenated) → GAT(→ n_labels, heads averaged) → sigmoid.
#[derive(Debug, Clone)]
pub struct GatHead {
    pub cfg: GatHeadConfig,
    bn: BatchNormLayer,
    layer1: GatLayer,
    layer2: GatLayer,
}

impl GatHead {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &GatHeadConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config {
                path: format!("{prefix}.dropout"),
                reason: format!("dropout rate {} outside [0, 1)", cfg.dropout),
            });
        }
        let bn = BatchNormLayer::register(store, &format!("{prefix}.bn"), cfg.in_features)?;
        let layer1 = GatLayer::register(
            store,
            &format!("{prefix}.gat1"),
            cfg.in_features,
            cfg.hidden,
            cfg.heads,
            true,
            Activation::LeakyRelu,
            rng,
        )?;
        let layer2 = GatLayer::register(
            store,
            &format!("{prefix}.gat2"),
            cfg.hidden * cfg.heads,
            cfg.n_labels,
            cfg.heads,
            false,
            Activation::Sigmoid,
            rng,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            bn,
            layer1,
            layer2,
        })
    }

    /// Width between the two attention layers (heads concatenated).
    pub fn hidden_width(&self) -> usize {
        self.layer1.out_width()
    }

    /// Per-label probabilities [n, n_labels].  `graph` must carry
    /// self-loops; `rng` is consulted only for training-mode dropout.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        z_c: TensorId,
        graph: &EdgeList,
        training: bool,
        rng: Option<&mut ChaCha8Rng>,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<TensorId> {
        let x = self.bn.forward(tape, store, z_c, training)?;
        let x = match (training, rng) {
            (true, Some(rng)) => dropout_if_training(tape, x, self.cfg.dropout, true, rng)?,
            (true, None) => {
                return Err(Error::InvalidArgument {
                    op: "gat head forward",
                    reason: "training mode requires an rng for dropout".into(),
                })
            }
            (false, _) => x,
        };
        let h = self.layer1.forward(tape, store, x, graph, trace.as_deref_mut())?;
        self.layer2.forward(tape, store, h, graph, trace)
    }
}

/// MLP ablation head: linear(→ hidden) → leaky-ReLU → dropout →
/// linear(→ n_labels) → sigmoid.
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub hidden: usize,
    pub dropout: f64,
    pub n_labels: usize,
    l1: Linear,
    l2: Linear,
}

impl MlpHead {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_features: usize,
        hidden: usize,
        dropout: f64,
        n_labels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config {
                path: format!("{prefix}.dropout"),
                reason: format!("dropout rate {dropout} outside [0, 1)"),
            });
        }
        Ok(Self {
            hidden,
            dropout,
            n_labels,
            l1: Linear::register(store, &format!("{prefix}.fc1"), in_features, hidden, true, rng)?,
            l2: Linear::register(store, &format!("{prefix}.fc2"), hidden, n_labels, true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: TensorId,
        training: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TensorId> {
        let h = self.l1.forward(tape, store, x)?;
        let h = tape.leaky_relu(h, T::from_f64(LEAKY_SLOPE));
        let h = match (training, rng) {
            (true, Some(rng)) => dropout_if_training(tape, h, self.dropout, true, rng)?,
            (true, None) => {
                return Err(Error::InvalidArgument {
                    op: "mlp head forward",
                    reason: "training mode requires an rng for dropout".into(),
                })
            }
            (false, _) => h,
        };
        let logits = self.l2.forward(tape, store, h)?;
        Ok(tape.sigmoid(logits))
    }
}

/// Indices of the k nearest training rows under the weighted Minkowski
/// distance, ties broken by ascending id.
fn k_nearest(
    test: &[f64],
    train_rows: &[Vec<f64>],
    w: &[f64],
    p: f64,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    if train_rows.len() < k {
        return Err(Error::InvalidArgument {
            op: "knn classify",
            reason: format!("need at least k = {k} training rows, have {}", train_rows.len()),
        });
    }
    let mut dists: Vec<(usize, f64)> = train_rows
        .iter()
        .enumerate()
        .map(|(j, row)| Ok((j, weighted_minkowski(test, row, w, p)?)))
        .collect::<Result<_>>()?;
    dists.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    dists.truncate(k);
    Ok(dists)
}

/// Similarity-weighted KNN vote: p = Σ_{j∈kNN} Sim_j·y_j / Σ_j Sim_j with
/// the RBF similarity of the weighted Minkowski distance.  The kernel
/// bandwidth μ is the mean pairwise training distance (the same convention
/// the population graph uses).
#[allow(clippy::too_many_arguments)]
pub fn wknn_classify(
    test: &[f64],
    train_rows: &[Vec<f64>],
    labels: &[u8],
    w: &FeatureWeights,
    k: usize,
    p: f64,
    squared_kernel: bool,
) -> Result<f64> {
    if labels.len() != train_rows.len() {
        return Err(Error::InvalidArgument {
            op: "wknn classify",
            reason: format!("{} labels for {} rows", labels.len(), train_rows.len()),
        });
    }
    let n = train_rows.len();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            sum += weighted_minkowski(&train_rows[i], &train_rows[j], &w.weights, p)?;
            pairs += 1;
        }
    }
    if pairs == 0 || sum == 0.0 {
        return Err(Error::Degenerate {
            what: "wknn classify",
            reason: "mean pairwise training distance is zero".into(),
        });
    }
    let mu = sum / pairs as f64;
    let nearest = k_nearest(test, train_rows, &w.weights, p, k)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (j, d) in nearest {
        let sim = rbf_similarity(d, mu, squared_kernel)?;
        num += sim * labels[j] as f64;
        den += sim;
    }
    Ok(num / den)
}

/// Plain KNN with uniform feature weights and inverse-Euclidean-distance
/// neighbor weighting.  An exact feature match (zero distance) returns that
/// neighbor's label outright.
pub fn knn_classify(test: &[f64], train_rows: &[Vec<f64>], labels: &[u8], k: usize) -> Result<f64> {
    if labels.len() != train_rows.len() {
        return Err(Error::InvalidArgument {
            op: "knn classify",
            reason: format!("{} labels for {} rows", labels.len(), train_rows.len()),
        });
    }
    let dim = test.len();
    let uniform = vec![1.0; dim];
    let nearest = k_nearest(test, train_rows, &uniform, 2.0, k)?;
    if let Some(&(j, _)) = nearest.iter().find(|&&(_, d)| d == 0.0) {
        return Ok(labels[j] as f64);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (j, d) in nearest {
        let wgt = 1.0 / d;
        num += wgt * labels[j] as f64;
        den += wgt;
    }
    Ok(num / den)
}

/// One exported prediction: `decision` applies the validation-fitted
/// threshold with the strict `probability > threshold` rule, so a
/// probability exactly at the threshold maps to the negative class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub label: u8,
    pub probability: f64,
    pub threshold: f64,
    pub decision: u8,
}

impl PredictionRow {
    pub fn new(id: impl Into<String>, label: u8, probability: f64, threshold: f64) -> Self {
        Self {
            id: id.into(),
            label,
            probability,
            threshold,
            decision: u8::from(probability > threshold),
        }
    }
}

pub fn write_predictions_csv(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let wrap = |e: csv::Error| Error::Csv {
        path: path.display().to_string(),
        source: e,
    };
    let mut wtr = csv::Writer::from_path(path).map_err(wrap)?;
    for row in rows {
        wtr.serialize(row).map_err(wrap)?;
    }
    wtr.flush().map_err(|e| Error::Io {
        context: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<PredictionRow>> {
    let wrap = |e: csv::Error| Error::Csv {
        path: path.display().to_string(),
        source: e,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(wrap)?;
    let mut rows = Vec::new();
    for record in rdr.deserialize() {
        rows.push(record.map_err(wrap)?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::popgraph::WeightMethod;
    use crate::rng::stream;
    use rand::Rng;

    fn identity_fusion(f: usize, mode: FusionMode) -> (ParamStore<f64>, JointFusion) {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut eye = vec![0.0; f * f];
        for i in 0..f {
            eye[i * f + i] = 1.0;
        }
        let eye_linear = |store: &mut ParamStore<f64>, name: &str, eye: Vec<f64>| Linear {
            w: store.register(name, &[f, f], eye, true).unwrap(),
            b: None,
            in_features: f,
            out_features: f,
        };
        let fusion = JointFusion {
            f_c: f,
            mode,
            theta_i: eye_linear(&mut store, "f.theta_i.weight", eye.clone()),
            theta_r: eye_linear(&mut store, "f.theta_r.weight", eye.clone()),
            theta_m: eye_linear(&mut store, "f.theta_m.weight", eye),
        };
        (store, fusion)
    }

    fn fuse(
        fusion: &JointFusion,
        store: &ParamStore<f64>,
        zi: &[f64],
        r: &[f64],
        m: &[f64],
        n: usize,
        fi: usize,
        fr: usize,
        fm: usize,
    ) -> Vec<f64> {
        let mut tape = Tape::new();
        let zi = tape.leaf(zi.to_vec(), &[n, fi], false).unwrap();
        let r = tape.leaf(r.to_vec(), &[n, fr], false).unwrap();
        let m = tape.leaf(m.to_vec(), &[n, fm], false).unwrap();
        let out = fusion.forward(&mut tape, store, zi, r, m).unwrap();
        tape.data(out).to_vec()
    }

    #[test]
    fn concat_keeps_each_projected_block_recoverable() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = stream(41, "fusion-concat");
        let fusion =
            JointFusion::register(&mut store, "fusion", 32, 4, 14, 32, FusionMode::Concat, &mut rng)
                .unwrap();
        assert_eq!(fusion.out_width(), 96);
        let mut frng = stream(42, "fusion-concat-x");
        let zi: Vec<f64> = (0..2 * 32).map(|_| frng.random_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..2 * 4).map(|_| frng.random_range(-1.0..1.0)).collect();
        let m: Vec<f64> = (0..2 * 14).map(|_| frng.random_range(-1.0..1.0)).collect();
        let zc = fuse(&fusion, &store, &zi, &r, &m, 2, 32, 4, 14);
        assert_eq!(zc.len(), 2 * 96);

        // Recompute one modality projection on its own and compare blocks.
        let mut tape: Tape<f64> = Tape::new();
        let rt = tape.leaf(r.clone(), &[2, 4], false).unwrap();
        let w = tape.param(&store, store.id_of("fusion.theta_r.weight").unwrap());
        let proj = tape.matmul(rt, w).unwrap();
        let proj = tape.leaky_relu(proj, 0.01);
        let block = tape.data(proj);
        for n in 0..2 {
            for f in 0..32 {
                assert!((zc[n * 96 + 32 + f] - block[n * 32 + f]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_zero_inputs_fuse_to_zero() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = stream(43, "fusion-zero");
        let fusion =
            JointFusion::register(&mut store, "fusion", 6, 3, 5, 8, FusionMode::Concat, &mut rng)
                .unwrap();
        let zc = fuse(&fusion, &store, &[0.0; 6], &[0.0; 3], &[0.0; 5], 1, 6, 3, 5);
        assert!(zc.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn average_mode_with_identity_projections_averages() {
        let (store, fusion) = identity_fusion(2, FusionMode::Average);
        let zc = fuse(&fusion, &store, &[1.0, 1.0], &[3.0, 3.0], &[5.0, 5.0], 1, 2, 2, 2);
        assert_eq!(zc, vec![3.0, 3.0]);
    }

    #[test]
    fn maxpool_mode_takes_the_elementwise_max() {
        let (store, fusion) = identity_fusion(2, FusionMode::Maxpool);
        let zc = fuse(&fusion, &store, &[1.0, 5.0], &[4.0, 2.0], &[0.0, 3.0], 1, 2, 2, 2);
        assert_eq!(zc, vec![4.0, 5.0]);
    }

    fn complete_graph(n: usize) -> EdgeList {
        let mut receivers = Vec::new();
        let mut senders = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    receivers.push(i);
                    senders.push(j);
                }
            }
        }
        EdgeList::new(n, receivers, senders).unwrap().with_self_loops()
    }

    #[test]
    fn gat_head_probabilities_hidden_width_and_eval_determinism() {
        let cfg = GatHeadConfig {
            n_labels: 3,
            ..GatHeadConfig::default()
        };
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = stream(44, "head-init");
        let head = GatHead::register(&mut store, "head", &cfg, &mut rng).unwrap();
        assert_eq!(head.hidden_width(), 320);
        let n = 6;
        let graph = complete_graph(n);
        let mut frng = stream(45, "head-x");
        let x: Vec<f64> = (0..n * 96).map(|_| frng.random_range(-1.0..1.0)).collect();

        let mut run = |training: bool, salt: &str| -> Vec<f64> {
            let mut tape = Tape::new();
            let z = tape.leaf(x.clone(), &[n, 96], false).unwrap();
            let mut drop_rng = stream(46, salt);
            let mut trace = AttentionTrace::new(n);
            let out = head
                .forward(&mut tape, &mut store, z, &graph, training, Some(&mut drop_rng), Some(&mut trace))
                .unwrap();
            assert_eq!(tape.shape(out), &[n, 3]);
            assert_eq!(trace.layers.len(), 2);
            let hop = trace.two_hop().unwrap();
            for i in 0..n {
                let s: f64 = hop[i * n..(i + 1) * n].iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
            tape.data(out).to_vec()
        };

        let train_out = run(true, "drop-a");
        assert!(train_out.iter().all(|&p| p > 0.0 && p < 1.0));
        let eval_a = run(false, "drop-b");
        let eval_b = run(false, "drop-c");
        assert_eq!(eval_a, eval_b, "eval forward must ignore the rng");
        assert!(eval_a.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn gat_head_locality_under_disconnected_components() {
        // Nodes {0,1,2} form one component, {3,4} another.  At eval,
        // changing node 4 must not move node 0's prediction, while changing
        // direct neighbor 1 must.
        let graph = EdgeList::new(
            5,
            vec![0, 0, 1, 1, 2, 2, 3, 4],
            vec![1, 2, 0, 2, 0, 1, 4, 3],
        )
        .unwrap()
        .with_self_loops();
        let cfg = GatHeadConfig {
            in_features: 8,
            hidden: 4,
            heads: 2,
            dropout: 0.10,
            n_labels: 1,
        };
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = stream(47, "head-local");
        let head = GatHead::register(&mut store, "head", &cfg, &mut rng).unwrap();
        let mut frng = stream(48, "head-local-x");
        let base: Vec<f64> = (0..5 * 8).map(|_| frng.random_range(-1.0..1.0)).collect();

        let mut eval = |x: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let z = tape.leaf(x.to_vec(), &[5, 8], false).unwrap();
            let out = head
                .forward(&mut tape, &mut store, z, &graph, false, None, None)
                .unwrap();
            tape.data(out).to_vec()
        };
        let p0 = eval(&base)[0];

        let mut far = base.clone();
        for f in 0..8 {
            far[4 * 8 + f] += 1.5;
        }
        assert_eq!(eval(&far)[0], p0, "other component must not leak in");

        let mut near = base.clone();
        for f in 0..8 {
            near[8 + f] += 1.5;
        }
        assert_ne!(eval(&near)[0], p0, "direct neighbor must influence");
    }

    #[test]
    fn mlp_head_bounds_determinism_and_gradients() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = stream(49, "mlp-init");
        let head = MlpHead::register(&mut store, "mlp", 10, 64, 0.10, 2, &mut rng).unwrap();
        let mut frng = stream(50, "mlp-x");
        let x: Vec<f64> = (0..3 * 10).map(|_| frng.random_range(-1.0..1.0)).collect();

        let eval = |store: &ParamStore<f64>| -> Vec<f64> {
            let mut tape = Tape::new();
            let z = tape.leaf(x.clone(), &[3, 10], false).unwrap();
            let out = head.forward(&mut tape, store, z, false, None).unwrap();
            tape.data(out).to_vec()
        };
        let a = eval(&store);
        assert_eq!(a, eval(&store));
        assert!(a.iter().all(|&p| p > 0.0 && p < 1.0));

        // Finite differences through the sigmoid output.
        let loss_of = |store: &ParamStore<f64>| -> f64 {
            let mut tape = Tape::new();
            let z = tape.leaf(x.clone(), &[3, 10], false).unwrap();
            let out = head.forward(&mut tape, store, z, false, None).unwrap();
            let loss = tape.mean(out);
            tape.data(loss)[0]
        };
        let mut tape = Tape::new();
        let z = tape.leaf(x.clone(), &[3, 10], false).unwrap();
        let out = head.forward(&mut tape, &store, z, false, None).unwrap();
        let loss = tape.mean(out);
        tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&mut store);
        let h = 1e-6;
        for (name, idx) in [("mlp.fc1.weight", 17), ("mlp.fc1.bias", 3), ("mlp.fc2.weight", 40), ("mlp.fc2.bias", 1)] {
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
            assert!(rel < 1e-4, "{name}[{idx}]");
        }
    }

    #[test]
    fn wknn_follows_similarity_weighted_votes() {
        let w = FeatureWeights::uniform(1);
        // Single neighbor → its label.
        let p = wknn_classify(&[0.0], &[vec![1.0], vec![9.0]], &[1, 0], &w, 1, 2.0, false).unwrap();
        assert_eq!(p, 1.0);
        // Two equidistant neighbors with labels {0, 1} → exactly 0.5.
        let p = wknn_classify(&[0.0], &[vec![1.0], vec![-1.0]], &[0, 1], &w, 2, 2.0, false).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
        // Unequal distances: hand oracle with the RBF similarities.
        let rows = vec![vec![1.0], vec![3.0], vec![6.0]];
        let labels = [1, 0, 1];
        let p = wknn_classify(&[0.0], &rows, &labels, &w, 3, 2.0, false).unwrap();
        let mu = (2.0 + 5.0 + 3.0) / 3.0; // pairwise distances 1↔3, 1↔6, 3↔6
        let sim = |d: f64| (-d / (2.0 * mu * mu)).exp();
        let want = (sim(1.0) * 1.0 + sim(3.0) * 0.0 + sim(6.0) * 1.0) / (sim(1.0) + sim(3.0) + sim(6.0));
        assert!((p - want).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&p));
        // Too few rows for k errors.
        assert!(wknn_classify(&[0.0], &rows, &labels, &w, 4, 2.0, false).is_err());
    }

    #[test]
    fn wknn_equal_similarities_reduce_to_the_label_average() {
        // Test point equidistant from all four neighbors → plain mean.
        let w = FeatureWeights {
            weights: vec![1.0, 1.0],
            method: WeightMethod::Uniform,
        };
        let rows = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        let labels = [1, 0, 0, 0];
        let p = wknn_classify(&[0.0, 0.0], &rows, &labels, &w, 4, 2.0, false).unwrap();
        assert!((p - 0.25).abs() < 1e-12);
    }

    #[test]
    fn knn_inverse_distance_and_exact_match_conventions() {
        let rows = vec![vec![0.0, 0.0], vec![3.0, 0.0], vec![0.0, 6.0]];
        // Duplicate of a training point → that point's label.
        assert_eq!(knn_classify(&[0.0, 0.0], &rows, &[1, 0, 0], 3).unwrap(), 1.0);
        assert_eq!(knn_classify(&[3.0, 0.0], &rows, &[1, 0, 1], 2).unwrap(), 0.0);
        // Symmetric tie → 0.5.
        let p = knn_classify(&[1.5, 0.0], &rows[..2].to_vec(), &[0, 1], 2).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
        // Inverse-distance hand case: d = (2, 1) for rows (1, 2), labels (1, 0):
        // p = (1/2·1 + 1/1·0) / (1/2 + 1/1) = 1/3.
        let p = knn_classify(&[1.0, 0.0], &rows, &[0, 1, 0], 2).unwrap();
        let want = ((1.0 / 2.0) * 1.0 + (1.0 / 1.0) * 0.0) / (1.0 / 2.0 + 1.0 / 1.0);
        assert!((p - want).abs() < 1e-12);
    }

    #[test]
    fn prediction_rows_roundtrip_and_apply_the_strict_threshold() {
        let rows = vec![
            PredictionRow::new("p-000", 1, 0.81, 0.5),
            PredictionRow::new("p-001", 0, 0.5, 0.5), // exactly at threshold → negative
            PredictionRow::new("p-002", 0, 0.12345678901234567, 0.5),
        ];
        assert_eq!(rows[0].decision, 1);
        assert_eq!(rows[1].decision, 0);
        let dir = std::env::temp_dir().join(format!("popgat-fusion-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("predictions.csv");
        write_predictions_csv(&path, &rows).unwrap();
        let back = read_predictions_csv(&path).unwrap();
        assert_eq!(back, rows);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn knn_tie_breaks_by_ascending_id_for_determinism() {
        // Four rows at identical distance; k = 2 must take ids 0 and 1.
        let rows = vec![vec![1.0], vec![-1.0], vec![1.0], vec![-1.0]];
        let p = knn_classify(&[0.0], &rows, &[1, 1, 0, 0], 2).unwrap();
        assert_eq!(p, 1.0);
    }
}
