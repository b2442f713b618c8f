//! Graph neural layers: multi-head graph attention, GraphSAGE, and a
//! forward-only Chebyshev spectral convolution, plus attention-trace
//! extraction for interpretability.

pub mod cheb;
pub mod gat;
pub mod sage;

pub use cheb::{chebyshev_t, ChebFilter, WeightedAdjacency};
pub use gat::{AttentionExport, AttentionMatrixJson, AttentionTrace, GatLayer, LayerTrace};
pub use sage::{SageLayer, SageOutput};

use crate::error::{Error, Result};
use crate::popgraph::{PopulationGraph, TestAttachment};

/// Nonlinearity applied by a graph layer after head combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    LeakyRelu,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: crate::scalar::Scalar>(
        self,
        tape: &mut crate::tensor::Tape<T>,
        x: crate::tensor::TensorId,
    ) -> crate::tensor::TensorId {
        match self {
            Activation::Identity => x,
            Activation::LeakyRelu => tape.leaky_relu(x, T::from_f64(crate::nn::LEAKY_SLOPE)),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// Directed message-passing structure: node `receivers[e]` aggregates a
/// message from node `senders[e]`.  Population-graph edges `(src, dst)`
/// mean "dst is one of src's nearest neighbors", so src receives from dst.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeList {
    pub n_nodes: usize,
    pub receivers: Vec<usize>,
    pub senders: Vec<usize>,
}

impl EdgeList {
    pub fn new(n_nodes: usize, receivers: Vec<usize>, senders: Vec<usize>) -> Result<Self> {
        if receivers.len() != senders.len() {
            return Err(Error::InvalidArgument {
                op: "EdgeList::new",
                reason: format!(
                    "receiver/sender length mismatch: {} vs {}",
                    receivers.len(),
                    senders.len()
                ),
            });
        }
        if let Some(&bad) = receivers.iter().chain(&senders).find(|&&v| v >= n_nodes) {
            return Err(Error::InvalidArgument {
                op: "EdgeList::new",
                reason: format!("node id {bad} out of range ({n_nodes} nodes)"),
            });
        }
        Ok(Self {
            n_nodes,
            receivers,
            senders,
        })
    }

    pub fn from_population(graph: &PopulationGraph) -> Self {
        let receivers = graph.edges.iter().map(|e| e.src).collect();
        let senders = graph.edges.iter().map(|e| e.dst).collect();
        Self {
            n_nodes: graph.n,
            receivers,
            senders,
        }
    }

    pub fn from_attachment(att: &TestAttachment) -> Self {
        let receivers = att.edges.iter().map(|e| e.src).collect();
        let senders = att.edges.iter().map(|e| e.dst).collect();
        Self {
            n_nodes: 1 + att.context.len(),
            receivers,
            senders,
        }
    }

    pub fn n_edges(&self) -> usize {
        self.receivers.len()
    }

    /// Nodes this node receives messages from (its neighborhood N(i)).
    pub fn neighbors(&self, node: usize) -> Vec<usize> {
        self.receivers
            .iter()
            .zip(&self.senders)
            .filter(|(&r, _)| r == node)
            .map(|(_, &s)| s)
            .collect()
    }

    pub fn has_all_self_loops(&self) -> bool {
        let mut seen = vec![false; self.n_nodes];
        for (&r, &s) in self.receivers.iter().zip(&self.senders) {
            if r == s {
                seen[r] = true;
            }
        }
        seen.into_iter().all(|b| b)
    }

    /// Copy of the graph with a self-loop appended for every node that does
    /// not have one yet.
    pub fn with_self_loops(&self) -> Self {
        let mut out = self.clone();
        let mut seen = vec![false; self.n_nodes];
        for (&r, &s) in self.receivers.iter().zip(&self.senders) {
            if r == s {
                seen[r] = true;
            }
        }
        for (i, had) in seen.into_iter().enumerate() {
            if !had {
                out.receivers.push(i);
                out.senders.push(i);
            }
        }
        out
    }

    /// Relabel nodes: node `i` becomes `perm[i]`.  Edge order is preserved.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n_nodes {
            return Err(Error::InvalidArgument {
                op: "EdgeList::permuted",
                reason: format!("permutation length {} != {} nodes", perm.len(), self.n_nodes),
            });
        }
        Ok(Self {
            n_nodes: self.n_nodes,
            receivers: self.receivers.iter().map(|&r| perm[r]).collect(),
            senders: self.senders.iter().map(|&s| perm[s]).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_loop_completion_is_idempotent_and_minimal() {
        let g = EdgeList::new(3, vec![0, 1, 1], vec![1, 0, 1]).unwrap();
        assert!(!g.has_all_self_loops());
        let with = g.with_self_loops();
        assert!(with.has_all_self_loops());
        // node 1 already had its self-loop; only 0 and 2 gain one.
        assert_eq!(with.n_edges(), 5);
        assert_eq!(with.with_self_loops(), with);
        assert_eq!(with.neighbors(0), vec![1, 0]);
        assert_eq!(with.neighbors(2), vec![2]);
    }

    #[test]
    fn rejects_out_of_range_nodes() {
        assert!(EdgeList::new(2, vec![0], vec![2]).is_err());
        assert!(EdgeList::new(2, vec![0, 1], vec![1]).is_err());
    }
}
