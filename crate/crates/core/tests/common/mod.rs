//! Helpers shared by the integration tests.
#![allow(dead_code)]

use molegraph::chem::MolGraph;
use molegraph::diff::{ParamStore, Tape};
use molegraph::graph::{build_batch, GraphBatch};
use molegraph::layers::GraphConvParams;
use molegraph::Matrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const WIDTH_IN: usize = 5;
pub const WIDTH_OUT: usize = 4;

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Graph conv weights with nonzero biases.
pub fn conv_params(rng: &mut ChaCha8Rng, din: usize, dout: usize, prefix: &str, store: &mut ParamStore) -> GraphConvParams {
    let p = GraphConvParams::register(store, prefix, din, dout, rng).unwrap();
    for &b in &p.bias {
        *store.value_mut(b) = random_matrix(rng, 1, dout);
    }
    p
}

pub fn batch_of(graphs: &[MolGraph], feats: &[Matrix]) -> GraphBatch {
    build_batch(&graphs.iter().collect::<Vec<_>>(), &feats.iter().collect::<Vec<_>>())
        .unwrap()
        .0
}

pub fn conv(store: &ParamStore, p: &GraphConvParams, batch: &GraphBatch, x: &Matrix) -> Matrix {
    let mut t = Tape::new();
    let h = t.leaf(x.clone());
    let out = p.forward(&mut t, store, batch, h).unwrap();
    t.value(out).clone()
}

/// Reference convolution from a dense adjacency matrix.
pub fn dense_conv(store: &ParamStore, p: &GraphConvParams, g: &MolGraph, x: &Matrix) -> Matrix {
    let n = g.atom_count();
    let mut adj = vec![vec![0.0; n]; n];
    for &(a, b) in g.bonds() {
        adj[a][b] = 1.0;
        adj[b][a] = 1.0;
    }
    let mut out = Matrix::zeros(n, p.out_width);
    for v in 0..n {
        let d: usize = adj[v].iter().filter(|&&a| a == 1.0).count();
        let ws = store.value(p.w_self[d]);
        let wn = store.value(p.w_nb[d]);
        let b = store.value(p.bias[d]);
        let mut agg = vec![0.0; x.cols()];
        for u in 0..n {
            for (k, a) in agg.iter_mut().enumerate() {
                *a += adj[v][u] * x.get(u, k);
            }
        }
        for o in 0..p.out_width {
            let mut acc = 0.0;
            for k in 0..x.cols() {
                acc += x.get(v, k) * ws.get(k, o);
            }
            if d > 0 {
                let mut nb = 0.0;
                for (k, a) in agg.iter().enumerate() {
                    nb += a * wn.get(k, o);
                }
                acc += nb;
            }
            out.set(v, o, acc + b.get(0, o));
        }
    }
    out
}

pub fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
    a.shape() == b.shape()
        && a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0))
}

pub fn permutation(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Moves row `i` of `x` to row `perm[i]`.
pub fn permute_rows(x: &Matrix, perm: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for (old, &new) in perm.iter().enumerate() {
        out.row_mut(new).copy_from_slice(x.row(old));
    }
    out
}

