//! GraphSAGE layer: each node's neighborhood is mean-aggregated (optionally
//! over a fixed-size random sample) and concatenated with the node's own
//! representation before a shared linear map and nonlinearity:
//! z′_i = σ(Θ·[z_i ‖ mean of sampled N(i)]).

use super::{Activation, EdgeList};
use crate::error::{Error, Result};
use crate::nn::uniform_init;
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tape, TensorId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct SageLayer {
    pub in_features: usize,
    pub out_features: usize,
    /// Neighborhood sample size S_n; `None` aggregates every neighbor
    /// deterministically.  When |N(i)| < S_n neighbors are drawn with
    /// replacement (random repeats) to reach S_n; when |N(i)| ≥ S_n a
    /// uniform subset of S_n distinct neighbors is used.
    pub sample_size: Option<usize>,
    pub activation: Activation,
    theta: ParamId,
}

/// Forward result: outputs plus the nodes whose neighborhood was empty
/// (they aggregated a zero vector).
pub struct SageOutput {
    pub out: TensorId,
    pub empty_neighborhoods: Vec<usize>,
}

impl SageLayer {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_features: usize,
        out_features: usize,
        sample_size: Option<usize>,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(Error::InvalidArgument {
                op: "SageLayer::register",
                reason: "in/out features must be positive".into(),
            });
        }
        if sample_size == Some(0) {
            return Err(Error::InvalidArgument {
                op: "SageLayer::register",
                reason: "sample size must be at least 1".into(),
            });
        }
        let theta = store.register(
            format!("{prefix}.theta"),
            &[2 * in_features, out_features],
            uniform_init(2 * in_features * out_features, 2 * in_features, rng),
            true,
        )?;
        Ok(Self {
            in_features,
            out_features,
            sample_size,
            activation,
            theta,
        })
    }

    /// One layer forward.  `graph` lists plain neighborhoods (self-loops
    /// are not expected; the node's own features enter through the concat).
    /// `rng` drives neighborhood sampling and is only consulted when
    /// `sample_size` is set.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        z: TensorId,
        graph: &EdgeList,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<SageOutput> {
        let zshape = tape.shape(z).to_vec();
        if zshape.len() != 2 || zshape[1] != self.in_features {
            return Err(Error::InvalidShape {
                op: "sage forward",
                shape: zshape,
                reason: format!("expected [n, {}] node features", self.in_features),
            });
        }
        if zshape[0] != graph.n_nodes {
            return Err(Error::InvalidArgument {
                op: "sage forward",
                reason: format!(
                    "feature rows ({}) and graph nodes ({}) differ",
                    zshape[0], graph.n_nodes
                ),
            });
        }
        let n = graph.n_nodes;
        let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (&r, &s) in graph.receivers.iter().zip(&graph.senders) {
            adjacency[r].push(s);
        }
        let mut empty_neighborhoods: Vec<usize> = Vec::new();

        // Flatten the (possibly sampled) neighborhoods into one gather:
        // message e flows sender -> receiver, then a segment mean.
        let mut senders = Vec::new();
        let mut receivers = Vec::new();
        let mut counts = vec![0usize; n];
        for (i, nbrs) in adjacency.iter().enumerate() {
            if nbrs.is_empty() {
                empty_neighborhoods.push(i);
                continue;
            }
            let picks: Vec<usize> = match (self.sample_size, rng.as_deref_mut()) {
                (Some(s), Some(rng)) => {
                    if nbrs.len() < s {
                        (0..s).map(|_| nbrs[rng.random_range(0..nbrs.len())]).collect()
                    } else {
                        // Uniform distinct subset via partial Fisher–Yates.
                        let mut pool = nbrs.clone();
                        for t in 0..s {
                            let j = rng.random_range(t..pool.len());
                            pool.swap(t, j);
                        }
                        pool.truncate(s);
                        pool
                    }
                }
                (Some(_), None) => {
                    return Err(Error::InvalidArgument {
                        op: "sage forward",
                        reason: "sample_size set but no rng provided".into(),
                    })
                }
                (None, _) => nbrs.clone(),
            };
            counts[i] = picks.len();
            for j in picks {
                senders.push(j);
                receivers.push(i);
            }
        }
        if !empty_neighborhoods.is_empty() {
            log::warn!(
                "sage forward: {} node(s) with empty neighborhood use a zero aggregate",
                empty_neighborhoods.len()
            );
        }

        let aggregate = if senders.is_empty() {
            tape.leaf(vec![T::zero(); n * self.in_features], &[n, self.in_features], false)?
        } else {
            let msgs = tape.gather_rows(z, &senders)?;
            let sums = tape.segment_sum(msgs, &receivers, n)?;
            let inv: Vec<T> = counts
                .iter()
                .map(|&c| {
                    if c == 0 {
                        T::zero()
                    } else {
                        T::from_usize(c).recip()
                    }
                })
                .collect();
            let inv = tape.leaf(inv, &[n], false)?;
            tape.scale_rows(sums, inv)?
        };
        let cat = tape.concat(&[z, aggregate], 1)?;
        let theta = tape.param(store, self.theta);
        let out = tape.matmul(cat, theta)?;
        Ok(SageOutput {
            out: self.activation.apply(tape, out),
            empty_neighborhoods,
        })
    }
}
