//! Differentiable graph layers: degree-bucketed graph convolution, the
//! super-node convolution, closed-neighborhood max pooling, node-level batch
//! normalization and dense layers.

use rand::Rng;
use thiserror::Error;

use crate::chem::MAX_DEGREE;
use crate::diff::{DiffError, ParamId, ParamStore, Tape, Var};
use crate::graph::GraphBatch;
use crate::tensor::Matrix;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayerError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("node {node} has degree {degree}, above {MAX_DEGREE}")]
    DegreeOverflow { node: usize, degree: usize },
    #[error("{what}: expected {expected} rows, got {got}")]
    RowMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("batch normalization over an empty batch")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Glorot-uniform matrix in `[-s, s]`, `s = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_vec(
        fan_in,
        fan_out,
        (0..fan_in * fan_out).map(|_| rng.gen_range(-s..=s)).collect(),
    )
}

fn check_rows(what: &'static str, expected: usize, got: usize) -> Result<(), LayerError> {
    if expected != got {
        return Err(LayerError::RowMismatch { what, expected, got });
    }
    Ok(())
}

/// Weights of one graph convolution: a self transform, a neighbor transform
/// and a bias for every degree `0..=MAX_DEGREE`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphConvParams {
    pub w_self: Vec<ParamId>,
    pub w_nb: Vec<ParamId>,
    pub bias: Vec<ParamId>,
    pub in_width: usize,
    pub out_width: usize,
}

impl GraphConvParams {
    /// Registers `{prefix}/deg{d}/{W_self,W_nb,b}` for every degree.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        in_width: usize,
        out_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, DiffError> {
        let mut w_self = Vec::with_capacity(MAX_DEGREE + 1);
        let mut w_nb = Vec::with_capacity(MAX_DEGREE + 1);
        let mut bias = Vec::with_capacity(MAX_DEGREE + 1);
        for d in 0..=MAX_DEGREE {
            w_self.push(store.add(
                format!("{prefix}/deg{d}/W_self"),
                glorot(rng, in_width, out_width),
            )?);
            w_nb.push(store.add(
                format!("{prefix}/deg{d}/W_nb"),
                glorot(rng, in_width, out_width),
            )?);
            bias.push(store.add(format!("{prefix}/deg{d}/b"), Matrix::zeros(1, out_width))?);
        }
        Ok(Self {
            w_self,
            w_nb,
            bias,
            in_width,
            out_width,
        })
    }

    /// `out(v) = H(v)·W_self^d + Σ_i H(n_i)·W_nb^d + b_d` for a node `v` of
    /// degree `d` with neighbors `n_i`, summed in ascending neighbor order.
    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &ParamStore,
        batch: &'a GraphBatch,
        h: Var,
    ) -> Result<Var, LayerError> {
        let n = batch.node_count();
        check_rows("graph conv input", n, tape.value(h).rows())?;
        if let Some((node, nb)) = batch
            .neighbor_lists()
            .iter()
            .enumerate()
            .find(|(_, nb)| nb.len() > MAX_DEGREE)
        {
            return Err(LayerError::DegreeOverflow {
                node,
                degree: nb.len(),
            });
        }
        let aggregated = tape.neighbor_sum(h, batch.neighbor_lists())?;
        let mut out: Option<Var> = None;
        for (d, bucket) in batch.degree_buckets().iter().enumerate() {
            if bucket.is_empty() {
                continue;
            }
            let own = tape.gather_rows(h, bucket);
            let ws = tape.param(store, self.w_self[d]);
            let mut part = tape.matmul(own, ws)?;
            if d > 0 {
                let nb = tape.gather_rows(aggregated, bucket);
                let wn = tape.param(store, self.w_nb[d]);
                let nb_part = tape.matmul(nb, wn)?;
                part = tape.add(part, nb_part)?;
            }
            let b = tape.param(store, self.bias[d]);
            part = tape.add_row(part, b)?;
            let placed = tape.scatter_rows(part, bucket, n)?;
            out = Some(match out {
                Some(acc) => tape.add(acc, placed)?,
                None => placed,
            });
        }
        Ok(out.expect("a batch has at least one node"))
    }
}

/// Weights of the super-node update: one self transform, one transform
/// applied to every genuine node, and a bias.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperNodeConvParams {
    pub w_self: ParamId,
    pub w_nb: ParamId,
    pub bias: ParamId,
}

impl SuperNodeConvParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        super_in: usize,
        node_in: usize,
        out_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, DiffError> {
        Ok(Self {
            w_self: store.add(format!("{prefix}/W_self"), glorot(rng, super_in, out_width))?,
            w_nb: store.add(format!("{prefix}/W_nb"), glorot(rng, node_in, out_width))?,
            bias: store.add(format!("{prefix}/b"), Matrix::zeros(1, out_width))?,
        })
    }

    /// `S'(g) = S(g)·W_self + Σ_{i ∈ g} H(i)·W_nb + b`.
    ///
    /// Reads `h` only; genuine node features are never written.
    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &ParamStore,
        batch: &'a GraphBatch,
        h: Var,
        s: Var,
    ) -> Result<Var, LayerError> {
        check_rows("super-node input", batch.node_count(), tape.value(h).rows())?;
        check_rows("super-node state", batch.graph_count(), tape.value(s).rows())?;
        let pooled = tape.scatter_rows(h, batch.node_owner(), batch.graph_count())?;
        let ws = tape.param(store, self.w_self);
        let wn = tape.param(store, self.w_nb);
        let b = tape.param(store, self.bias);
        let own = tape.matmul(s, ws)?;
        let from_nodes = tape.matmul(pooled, wn)?;
        let sum = tape.add(own, from_nodes)?;
        Ok(tape.add_row(sum, b)?)
    }
}

/// Elementwise max over every node and its neighbors. The super node is not
/// part of the neighbor lists, so it never takes part.
pub fn graph_pool<'a>(
    tape: &mut Tape<'a>,
    batch: &'a GraphBatch,
    h: Var,
) -> Result<Var, LayerError> {
    check_rows("graph pool input", batch.node_count(), tape.value(h).rows())?;
    Ok(tape.neighbor_max(h, batch.neighbor_lists())?)
}

/// Per-channel batch statistics gathered in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch normalization treating every row (node) as one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeBatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl NodeBatchNorm {
    /// Registers `{prefix}/gamma` (ones) and `{prefix}/beta` (zeros).
    pub fn register(store: &mut ParamStore, prefix: &str, width: usize) -> Result<Self, DiffError> {
        Ok(Self {
            gamma: store.add(format!("{prefix}/gamma"), Matrix::filled(1, width, 1.0))?,
            beta: store.add(format!("{prefix}/beta"), Matrix::zeros(1, width))?,
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        })
    }

    pub fn width(&self) -> usize {
        self.running_mean.len()
    }

    /// Train mode normalizes with the batch's own statistics and returns
    /// them; running statistics are left alone until [`Self::update`].
    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &ParamStore,
        h: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>), LayerError> {
        let rows = tape.value(h).rows();
        let (normalized, stats) = match mode {
            Mode::Train => {
                if rows == 0 {
                    return Err(LayerError::EmptyBatch);
                }
                let mu = tape.column_mean(h);
                let neg_mu = tape.scale(mu, -1.0);
                let centered = tape.add_row(h, neg_mu)?;
                let sq = tape.mul(centered, centered)?;
                let var = tape.column_mean(sq);
                let shifted = tape.add_scalar(var, self.epsilon);
                let inv_std = tape.powf(shifted, -0.5);
                let stats = BatchStats {
                    mean: tape.value(mu).data().to_vec(),
                    var: tape.value(var).data().to_vec(),
                };
                (tape.mul_row(centered, inv_std)?, Some(stats))
            }
            Mode::Eval => {
                let shift = tape.leaf(Matrix::row_vector(
                    self.running_mean.iter().map(|m| -m).collect(),
                ));
                let inv_std = tape.leaf(Matrix::row_vector(
                    self.running_var
                        .iter()
                        .map(|v| 1.0 / (v + self.epsilon).sqrt())
                        .collect(),
                ));
                let centered = tape.add_row(h, shift)?;
                (tape.mul_row(centered, inv_std)?, None)
            }
        };
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        let scaled = tape.mul_row(normalized, gamma)?;
        Ok((tape.add_row(scaled, beta)?, stats))
    }

    /// `running ← momentum·running + (1 − momentum)·batch`.
    pub fn update(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

/// Affine layer `X·W + b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn register(
        store: &mut ParamStore,
        weight_name: &str,
        bias_name: &str,
        in_width: usize,
        out_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, DiffError> {
        Ok(Self {
            weight: store.add(weight_name, glorot(rng, in_width, out_width))?,
            bias: store.add(bias_name, Matrix::zeros(1, out_width))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, store: &ParamStore, x: Var) -> Result<Var, LayerError> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        Ok(dense(tape, x, w, b)?)
    }
}

/// `x·w + b` with `b` broadcast over rows.
pub fn dense(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}
