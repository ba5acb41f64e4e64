//! Packing variable-size molecular graphs into batches.
//!
//! Node features of every graph are stacked into one matrix. Each graph also
//! owns one dummy super node, whose state is kept in a separate `G × F`
//! matrix so that it never takes part in genuine-node convolution or
//! pooling.

use thiserror::Error;

use crate::chem::{MolGraph, MAX_DEGREE};
use crate::tensor::Matrix;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
}

/// Several molecular graphs packed into one disjoint union.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBatch {
    node_owner: Vec<usize>,
    neighbor_lists: Vec<Vec<usize>>,
    degree_buckets: Vec<Vec<usize>>,
    per_graph_nodes: Vec<Vec<usize>>,
}

impl GraphBatch {
    pub fn node_count(&self) -> usize {
        self.node_owner.len()
    }

    pub fn graph_count(&self) -> usize {
        self.per_graph_nodes.len()
    }

    /// Graph index of every node.
    pub fn node_owner(&self) -> &[usize] {
        &self.node_owner
    }

    /// Sorted neighbor indices per node; never crosses graphs.
    pub fn neighbor_lists(&self) -> &[Vec<usize>] {
        &self.neighbor_lists
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbor_lists[node]
    }

    /// `degree_buckets()[d]` lists the nodes with exactly `d` neighbors.
    pub fn degree_buckets(&self) -> &[Vec<usize>] {
        &self.degree_buckets
    }

    pub fn per_graph_nodes(&self) -> &[Vec<usize>] {
        &self.per_graph_nodes
    }
}

/// Packs `graphs` and their feature matrices into a batch.
///
/// Returns the batch and the stacked node-feature matrix; node order is the
/// concatenation of each graph's atom order.
pub fn build_batch(
    graphs: &[&MolGraph],
    features: &[&Matrix],
) -> Result<(GraphBatch, Matrix), GraphError> {
    if graphs.is_empty() {
        return Err(GraphError::EmptyBatch);
    }
    if graphs.len() != features.len() {
        return Err(GraphError::SizeMismatch(format!(
            "{} graphs but {} feature matrices",
            graphs.len(),
            features.len()
        )));
    }
    let width = features[0].cols();
    let total: usize = graphs.iter().map(|g| g.atom_count()).sum();

    let mut node_owner = Vec::with_capacity(total);
    let mut neighbor_lists = Vec::with_capacity(total);
    let mut degree_buckets = vec![Vec::new(); MAX_DEGREE + 1];
    let mut per_graph_nodes = Vec::with_capacity(graphs.len());
    let mut packed = Vec::with_capacity(total * width);

    for (g, (graph, feat)) in graphs.iter().zip(features).enumerate() {
        if feat.rows() != graph.atom_count() || feat.cols() != width {
            return Err(GraphError::SizeMismatch(format!(
                "graph {g}: {} atoms, feature matrix {}x{} (expected width {width})",
                graph.atom_count(),
                feat.rows(),
                feat.cols()
            )));
        }
        let offset = node_owner.len();
        let mut members = Vec::with_capacity(graph.atom_count());
        for atom in 0..graph.atom_count() {
            let node = offset + atom;
            let nb: Vec<usize> = graph.neighbors(atom).iter().map(|&j| offset + j).collect();
            // MolGraph guarantees degree <= MAX_DEGREE
            degree_buckets[nb.len()].push(node);
            neighbor_lists.push(nb);
            node_owner.push(g);
            members.push(node);
        }
        per_graph_nodes.push(members);
        packed.extend_from_slice(feat.data());
    }

    Ok((
        GraphBatch {
            node_owner,
            neighbor_lists,
            degree_buckets,
            per_graph_nodes,
        },
        Matrix::from_vec(total, width, packed),
    ))
}

/// Zero-initialized super-node state, one row per graph.
pub fn init_super_nodes(batch: &GraphBatch, width: usize) -> Matrix {
    Matrix::zeros(batch.graph_count(), width)
}
