use super::{DiffError, ParamId, ParamStore};
use crate::tensor::Matrix;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<'a> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    ColumnMean(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Powf(Var, f64),
    GatherRows(Var, &'a [usize]),
    ScatterRows(Var, &'a [usize]),
    NeighborSum(Var, &'a [Vec<usize>]),
    /// Flat source index (row * cols + col) of the winning element per output entry.
    NeighborMax(Var, Vec<usize>),
    Focal {
        logits: Var,
        targets: &'a Matrix,
        mask: &'a Matrix,
        gamma: f64,
        active: usize,
    },
    Mse {
        pred: Var,
        targets: &'a Matrix,
        mask: &'a Matrix,
        active: usize,
    },
}

impl Op<'_> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::AddScalar(..) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::ColumnMean(..) => "column_mean",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Powf(..) => "powf",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows(..) => "scatter_rows",
            Op::NeighborSum(..) => "neighbor_sum",
            Op::NeighborMax(..) => "neighbor_max",
            Op::Focal { .. } => "focal_loss",
            Op::Mse { .. } => "mse_loss",
        }
    }
}

#[derive(Debug)]
struct Node<'a> {
    value: Matrix,
    op: Op<'a>,
}

/// Record of one forward computation.
///
/// Index slices and label matrices are borrowed for `'a` rather than copied,
/// so a tape cannot outlive the batch it was recorded on.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    corrupt_backward: bool,
}

fn check_same(op: &'static str, a: &Matrix, b: &Matrix) -> Result<(), DiffError> {
    if a.shape() != b.shape() {
        return Err(DiffError::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

fn check_row(op: &'static str, a: &Matrix, row: &Matrix) -> Result<(), DiffError> {
    if row.rows() != 1 || row.cols() != a.cols() {
        return Err(DiffError::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: row.shape(),
        });
    }
    Ok(())
}

/// `log(1 + exp(x))` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function, stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Focal loss of one entry and its derivative with respect to the logit.
///
/// `log p = -softplus(-z)` and `log(1-p) = -softplus(z)`; the modulating
/// factors are `exp(gamma * log(..))`, which is exactly 1 at `gamma = 0`.
pub(crate) fn focal_entry(z: f64, y: f64, gamma: f64) -> (f64, f64) {
    let log_p = -softplus(-z);
    let log_q = -softplus(z);
    let p = sigmoid(z);
    let q = sigmoid(-z);
    // y is 0 or 1 for classification; the general form keeps soft labels well defined
    let pos = if y != 0.0 {
        let w = (gamma * log_q).exp();
        let loss = -w * log_p;
        let d = gamma * p * w * log_p - w * q;
        (loss * y, d * y)
    } else {
        (0.0, 0.0)
    };
    let neg = if y != 1.0 {
        let w = (gamma * log_p).exp();
        let loss = -w * log_q;
        let d = -gamma * q * w * log_q + w * p;
        (loss * (1.0 - y), d * (1.0 - y))
    } else {
        (0.0, 0.0)
    };
    (pos.0 + neg.0, pos.1 + neg.1)
}

fn active_entries(mask: &Matrix) -> usize {
    mask.data().iter().filter(|&&m| m != 0.0).count()
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Perturbs matmul gradients so gradient checks can be shown to fail.
    #[doc(hidden)]
    pub fn set_corrupt_backward(&mut self, on: bool) {
        self.corrupt_backward = on;
    }

    fn push(&mut self, value: Matrix, op: Op<'a>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; receives a gradient but belongs to no parameter.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Reads the current value of a parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let out = va.matmul(vb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        check_same("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        check_same("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        check_same("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a `1 × C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        check_row("add_row", self.value(a), self.value(row))?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Multiplies every row of `a` elementwise by a `1 × C` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        check_row("mul_row", self.value(a), self.value(row))?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o *= b;
            }
        }
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Matrix::scalar(v.sum() / v.len() as f64);
        self.push(out, Op::Mean(a))
    }

    /// Per-column mean over rows, as a `1 × C` row.
    pub fn column_mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.rows() as f64;
        let mut out = vec![0.0; v.cols()];
        for i in 0..v.rows() {
            for (o, x) in out.iter_mut().zip(v.row(i)) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= n;
        }
        self.push(Matrix::row_vector(out), Op::ColumnMean(a))
    }

    /// Per-column population variance over rows.
    pub fn column_variance(&mut self, a: Var) -> Result<Var, DiffError> {
        let mu = self.column_mean(a);
        let neg = self.scale(mu, -1.0);
        let centered = self.add_row(a, neg)?;
        let sq = self.mul(centered, centered)?;
        Ok(self.column_mean(sq))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let out = self.value(a).map(|x| x.powf(p));
        self.push(out, Op::Powf(a, p))
    }

    /// Selects rows `idx` of `a`, in order.
    pub fn gather_rows(&mut self, a: Var, idx: &'a [usize]) -> Var {
        let out = self.value(a).gather_rows(idx);
        self.push(out, Op::GatherRows(a, idx))
    }

    /// Sums row `i` of `a` into row `idx[i]` of an `out_rows`-row result.
    pub fn scatter_rows(&mut self, a: Var, idx: &'a [usize], out_rows: usize) -> Result<Var, DiffError> {
        let v = self.value(a);
        if idx.len() != v.rows() || idx.iter().any(|&i| i >= out_rows) {
            return Err(DiffError::ShapeMismatch {
                op: "scatter_rows",
                lhs: v.shape(),
                rhs: (idx.len(), out_rows),
            });
        }
        let out = v.scatter_add_rows(idx, out_rows);
        Ok(self.push(out, Op::ScatterRows(a, idx)))
    }

    /// `out[v] = Σ a[u]` over `u ∈ lists[v]`, summed in list order.
    pub fn neighbor_sum(&mut self, a: Var, lists: &'a [Vec<usize>]) -> Result<Var, DiffError> {
        let v = self.value(a);
        if lists.len() != v.rows() {
            return Err(DiffError::ShapeMismatch {
                op: "neighbor_sum",
                lhs: v.shape(),
                rhs: (lists.len(), v.cols()),
            });
        }
        let mut out = Matrix::zeros(v.rows(), v.cols());
        for (node, nb) in lists.iter().enumerate() {
            let row = out.row_mut(node);
            for &u in nb {
                for (o, x) in row.iter_mut().zip(v.row(u)) {
                    *o += x;
                }
            }
        }
        Ok(self.push(out, Op::NeighborSum(a, lists)))
    }

    /// Elementwise max over each node and its neighbors.
    ///
    /// Candidates are visited in ascending node index and only a strictly
    /// larger value replaces the current winner, so ties go to the lowest index.
    pub fn neighbor_max(&mut self, a: Var, lists: &[Vec<usize>]) -> Result<Var, DiffError> {
        let v = self.value(a);
        if lists.len() != v.rows() {
            return Err(DiffError::ShapeMismatch {
                op: "neighbor_max",
                lhs: v.shape(),
                rhs: (lists.len(), v.cols()),
            });
        }
        let cols = v.cols();
        let mut out = v.clone();
        let mut argmax = Vec::with_capacity(v.len());
        let mut candidates = Vec::new();
        for (node, nb) in lists.iter().enumerate() {
            candidates.clear();
            candidates.extend_from_slice(nb);
            candidates.push(node);
            candidates.sort_unstable();
            for c in 0..cols {
                let mut best = candidates[0];
                let mut best_val = v.get(best, c);
                for &u in &candidates[1..] {
                    let x = v.get(u, c);
                    if x > best_val {
                        best = u;
                        best_val = x;
                    }
                }
                out.set(node, c, best_val);
                argmax.push(best * cols + c);
            }
        }
        Ok(self.push(out, Op::NeighborMax(a, argmax)))
    }

    /// Mean focal loss over entries with `mask != 0`, from raw logits.
    pub fn focal_loss(
        &mut self,
        logits: Var,
        targets: &'a Matrix,
        mask: &'a Matrix,
        gamma: f64,
    ) -> Result<Var, DiffError> {
        if !(gamma >= 0.0) {
            return Err(DiffError::NegativeGamma(gamma));
        }
        let z = self.value(logits);
        check_same("focal_loss", z, targets)?;
        check_same("focal_loss", z, mask)?;
        let active = active_entries(mask);
        if active == 0 {
            return Err(DiffError::AllMasked);
        }
        let mut total = 0.0;
        for ((&zi, &yi), &mi) in z.data().iter().zip(targets.data()).zip(mask.data()) {
            if mi != 0.0 {
                total += focal_entry(zi, yi, gamma).0;
            }
        }
        let out = Matrix::scalar(total / active as f64);
        Ok(self.push(
            out,
            Op::Focal {
                logits,
                targets,
                mask,
                gamma,
                active,
            },
        ))
    }

    /// Mean squared error over entries with `mask != 0`.
    pub fn mse_loss(&mut self, pred: Var, targets: &'a Matrix, mask: &'a Matrix) -> Result<Var, DiffError> {
        let p = self.value(pred);
        check_same("mse_loss", p, targets)?;
        check_same("mse_loss", p, mask)?;
        let active = active_entries(mask);
        if active == 0 {
            return Err(DiffError::AllMasked);
        }
        let mut total = 0.0;
        for ((&pi, &yi), &mi) in p.data().iter().zip(targets.data()).zip(mask.data()) {
            if mi != 0.0 {
                total += (pi - yi) * (pi - yi);
            }
        }
        let out = Matrix::scalar(total / active as f64);
        Ok(self.push(
            out,
            Op::Mse {
                pred,
                targets,
                mask,
                active,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(DiffError::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        if !lv.item().is_finite() {
            return Err(DiffError::NonFiniteValue {
                op: self.nodes[loss.0].op.name(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !g.all_finite() {
                return Err(DiffError::NonFiniteValue { op: node.op.name() });
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => grads[i].as_ref().map(|g| (id, g.clone())),
                _ => None,
            })
            .collect();
        Ok(Gradients { nodes: grads, params })
    }

    fn propagate(&self, node: &Node<'a>, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let accumulate = |grads: &mut [Option<Matrix>], v: Var, delta: Matrix| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                accumulate(grads, *a, g.matmul_transposed(vb));
                let mut gb = va.transposed_matmul(g);
                if self.corrupt_backward {
                    gb = gb.scale(1.01);
                }
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |x, y| x * y);
                let gb = g.zip_map(self.value(*a), |x, y| x * y);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, column_sums(g));
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row);
                let va = self.value(*a);
                let mut ga = g.clone();
                let mut gr = vec![0.0; g.cols()];
                for i in 0..g.rows() {
                    let (g_row, a_row) = (g.row(i), va.row(i));
                    for j in 0..g.cols() {
                        gr[j] += g_row[j] * a_row[j];
                    }
                    for (x, s) in ga.row_mut(i).iter_mut().zip(r.data()) {
                        *x *= s;
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *row, Matrix::row_vector(gr));
            }
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Scale(a, k) => accumulate(grads, *a, g.scale(*k)),
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                accumulate(grads, *a, Matrix::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                accumulate(grads, *a, Matrix::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::ColumnMean(a) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                let n = r as f64;
                for i in 0..r {
                    for (x, gj) in ga.row_mut(i).iter_mut().zip(g.data()) {
                        *x = gj / n;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y));
                accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(&node.value, |gi, y| gi * y * (1.0 - y));
                accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let ga = g.zip_map(self.value(*a), |gi, x| gi / x);
                accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = g.zip_map(&node.value, |gi, y| gi * y);
                accumulate(grads, *a, ga);
            }
            Op::Powf(a, p) => {
                let p = *p;
                let ga = g.zip_map(self.value(*a), |gi, x| gi * p * x.powf(p - 1.0));
                accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let rows = self.value(*a).rows();
                accumulate(grads, *a, g.scatter_add_rows(idx, rows));
            }
            Op::ScatterRows(a, idx) => accumulate(grads, *a, g.gather_rows(idx)),
            Op::NeighborSum(a, lists) => {
                let mut ga = Matrix::zeros(g.rows(), g.cols());
                for (node_idx, nb) in lists.iter().enumerate() {
                    let src = g.row(node_idx);
                    for &u in nb {
                        for (x, s) in ga.row_mut(u).iter_mut().zip(src) {
                            *x += s;
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::NeighborMax(a, argmax) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                let data = ga.data_mut();
                for (&src, gi) in argmax.iter().zip(g.data()) {
                    data[src] += gi;
                }
                accumulate(grads, *a, ga);
            }
            Op::Focal {
                logits,
                targets,
                mask,
                gamma,
                active,
            } => {
                let z = self.value(*logits);
                let scale = g.item() / *active as f64;
                let mut gz = Matrix::zeros(z.rows(), z.cols());
                for (i, out) in gz.data_mut().iter_mut().enumerate() {
                    if mask.data()[i] != 0.0 {
                        *out = scale * focal_entry(z.data()[i], targets.data()[i], *gamma).1;
                    }
                }
                accumulate(grads, *logits, gz);
            }
            Op::Mse {
                pred,
                targets,
                mask,
                active,
            } => {
                let p = self.value(*pred);
                let scale = 2.0 * g.item() / *active as f64;
                let mut gp = Matrix::zeros(p.rows(), p.cols());
                for (i, out) in gp.data_mut().iter_mut().enumerate() {
                    if mask.data()[i] != 0.0 {
                        *out = scale * (p.data()[i] - targets.data()[i]);
                    }
                }
                accumulate(grads, *pred, gp);
            }
        }
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = vec![0.0; g.cols()];
    for i in 0..g.rows() {
        for (o, x) in out.iter_mut().zip(g.row(i)) {
            *o += x;
        }
    }
    Matrix::row_vector(out)
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: Vec<(ParamId, Matrix)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded value, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// One entry per parameter read onto the tape, in recording order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }

    /// Total gradient for `id`, summed over every read of it.
    pub fn param(&self, id: ParamId) -> Option<Matrix> {
        let mut total: Option<Matrix> = None;
        for (pid, g) in &self.params {
            if *pid == id {
                match &mut total {
                    Some(t) => t.add_assign(g),
                    None => total = Some(g.clone()),
                }
            }
        }
        total
    }
}
