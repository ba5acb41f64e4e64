//! Finite-difference checks of every layer, loss and the full model on
//! seeded random graphs.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chem::{featurize, MolGraph, ATOM_FEATURES};
use crate::data::TaskKind;
use crate::diff::{gradient_check, CoordinateSelection, DiffError, GradCheckReport, ParamStore, Tape, Var};
use crate::graph::{build_batch, GraphBatch};
use crate::layers::{graph_pool, Dense, GraphConvParams, LayerError, Mode, NodeBatchNorm, SuperNodeConvParams};
use crate::losses::{FocalLossConfig, LossKind, TaskLabels};
use crate::model::{build_model, ModelConfig, ModelError};
use crate::synth::random_graph;
use crate::tensor::Matrix;

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Molecules in the train-mode full-model check.
const TRAIN_MODE_GRAPHS: usize = 6;

/// Entries checked per parameter of the full model.
const MODEL_COORDS_PER_PARAM: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn max_error(&self) -> f64 {
        self.checks.iter().map(|c| c.report.max_error()).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < GRADCHECK_TOLERANCE
    }

    /// `(check, parameter, error)` for every parameter at or above the tolerance.
    pub fn failures(&self) -> Vec<(&str, &str, f64)> {
        let mut out = Vec::new();
        for c in &self.checks {
            for p in &c.report.params {
                if !(p.max_rel_error < GRADCHECK_TOLERANCE) {
                    out.push((c.name.as_str(), p.name.as_str(), p.max_rel_error));
                }
            }
        }
        out
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "gradient check: seed {}, h {:e}, tolerance {:e}",
            self.seed, GRADCHECK_STEP, GRADCHECK_TOLERANCE
        )?;
        writeln!(
            f,
            "{:<22} {:>7} {:>9} {:>13}  worst parameter",
            "check", "coords", "rounding", "max_rel_err"
        )?;
        for c in &self.checks {
            let coords: usize = c.report.params.iter().map(|p| p.coordinates).sum();
            let rounding: usize = c.report.params.iter().map(|p| p.rounding_limited).sum();
            let worst = c.report.worst().map_or("-", |p| p.name.as_str());
            writeln!(
                f,
                "{:<22} {:>7} {:>9} {:>13.3e}  {}",
                c.name,
                coords,
                rounding,
                c.report.max_error(),
                worst
            )?;
        }
        for (check, param, err) in self.failures() {
            writeln!(f, "FAIL {check}: {param} relative error {err:.3e}")?;
        }
        write!(
            f,
            "{} (max relative error {:.3e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_error()
        )
    }
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// `Σ x ⊙ w` for a fixed random `w`, a scalar whose gradient exercises
/// every output entry differently.
fn probe<'a>(tape: &mut Tape<'a>, x: Var, w: &Matrix) -> Result<Var, DiffError> {
    let wv = tape.leaf(w.clone());
    let prod = tape.mul(x, wv)?;
    Ok(tape.sum(prod))
}

fn model_batch(rng: &mut impl Rng, graphs: usize) -> (GraphBatch, Matrix, TaskLabels) {
    let (_, batch, x) = random_batch(rng, graphs);
    let y: Vec<f64> = (0..graphs * 2).map(|i| ((i / 2 + i) % 2) as f64).collect();
    let labels = TaskLabels::dense(Matrix::from_vec(graphs, 2, y));
    (batch, x, labels)
}

fn random_batch(rng: &mut impl Rng, graphs: usize) -> (Vec<MolGraph>, GraphBatch, Matrix) {
    let gs: Vec<MolGraph> = (0..graphs).map(|_| random_graph(rng, 2, 8)).collect();
    let feats: Vec<Matrix> = gs.iter().map(featurize).collect();
    let (batch, x) = build_batch(&gs.iter().collect::<Vec<_>>(), &feats.iter().collect::<Vec<_>>())
        .expect("random graphs batch cleanly");
    (gs, batch, x)
}

fn check<'a, F>(name: &str, store: &ParamStore, selection: CoordinateSelection, inject: bool, f: F) -> Result<CheckResult, ModelError>
where
    F: Fn(&ParamStore, &mut Tape<'a>) -> Result<Var, ModelError> + Sync,
{
    let report = gradient_check(store, GRADCHECK_STEP, selection, |s, t: &mut Tape<'a>| {
        t.set_corrupt_backward(inject);
        f(s, t)
    })?;
    Ok(CheckResult {
        name: name.to_string(),
        report,
    })
}

fn layer_err(e: LayerError) -> ModelError {
    ModelError::Layer(e)
}

/// Runs every check. `inject_fault` corrupts matrix-product gradients so
/// that the suite must fail.
pub fn gradcheck_suite(seed: u64, inject_fault: bool) -> Result<SuiteReport, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all = CoordinateSelection::All;
    let mut checks = Vec::new();

    let (_, batch, x) = random_batch(&mut rng, 3);
    let n = batch.node_count();
    let g = batch.graph_count();

    // graph convolution, including the gradient reaching its input
    {
        let mut store = ParamStore::new();
        let conv = GraphConvParams::register(&mut store, "gc", ATOM_FEATURES, 5, &mut rng)?;
        for id in conv.bias.clone() {
            *store.value_mut(id) = random_matrix(&mut rng, 1, 5);
        }
        let noise = random_matrix(&mut rng, n, ATOM_FEATURES);
        let input = store.add("input", x.zip_map(&noise, |a, b| a + 0.3 * b))?;
        let w = random_matrix(&mut rng, n, 5);
        checks.push(check("graph_conv", &store, all, inject_fault, |s, t| {
            let h = t.param(s, input);
            let out = conv.forward(t, s, &batch, h).map_err(layer_err)?;
            Ok(probe(t, out, &w)?)
        })?);
    }

    // super-node convolution
    {
        let mut store = ParamStore::new();
        let sc = SuperNodeConvParams::register(&mut store, "super", 4, ATOM_FEATURES, 6, &mut rng)?;
        let h = store.add("input_nodes", random_matrix(&mut rng, n, ATOM_FEATURES))?;
        let s0 = store.add("input_super", random_matrix(&mut rng, g, 4))?;
        let w = random_matrix(&mut rng, g, 6);
        checks.push(check("super_node_conv", &store, all, inject_fault, |s, t| {
            let hv = t.param(s, h);
            let sv = t.param(s, s0);
            let out = sc.forward(t, s, &batch, hv, sv).map_err(layer_err)?;
            Ok(probe(t, out, &w)?)
        })?);
    }

    // closed-neighborhood max pooling
    {
        let mut store = ParamStore::new();
        let h = store.add("input", random_matrix(&mut rng, n, 4))?;
        let w = random_matrix(&mut rng, n, 4);
        checks.push(check("graph_pool", &store, all, inject_fault, |s, t| {
            let hv = t.param(s, h);
            let out = graph_pool(t, &batch, hv).map_err(layer_err)?;
            Ok(probe(t, out, &w)?)
        })?);
    }

    // node batch normalization in both modes
    for mode in [Mode::Train, Mode::Eval] {
        let mut store = ParamStore::new();
        let mut bn = NodeBatchNorm::register(&mut store, "bn", 4)?;
        *store.value_mut(bn.gamma) = random_matrix(&mut rng, 1, 4).map(|v| v + 1.5);
        *store.value_mut(bn.beta) = random_matrix(&mut rng, 1, 4);
        bn.running_mean = (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect();
        bn.running_var = (0..4).map(|_| rng.gen_range(0.5..2.0)).collect();
        let h = store.add("input", random_matrix(&mut rng, n, 4))?;
        let w = random_matrix(&mut rng, n, 4);
        let name = match mode {
            Mode::Train => "batch_norm_train",
            Mode::Eval => "batch_norm_eval",
        };
        checks.push(check(name, &store, all, inject_fault, |s, t| {
            let hv = t.param(s, h);
            let (out, _) = bn.forward(t, s, hv, mode).map_err(layer_err)?;
            Ok(probe(t, out, &w)?)
        })?);
    }

    // classifier layers
    {
        let mut store = ParamStore::new();
        let d1 = Dense::register(&mut store, "W1", "b1", 6, 5, &mut rng)?;
        let d2 = Dense::register(&mut store, "W2", "b2", 5, 3, &mut rng)?;
        *store.value_mut(d1.bias) = random_matrix(&mut rng, 1, 5);
        let x = store.add("input", random_matrix(&mut rng, g, 6))?;
        let w = random_matrix(&mut rng, g, 3);
        checks.push(check("dense_tanh_dense", &store, all, inject_fault, |s, t| {
            let xv = t.param(s, x);
            let h = d1.forward(t, s, xv).map_err(layer_err)?;
            let h = t.tanh(h);
            let out = d2.forward(t, s, h).map_err(layer_err)?;
            Ok(probe(t, out, &w)?)
        })?);
    }

    // losses on raw outputs
    let y = Matrix::from_vec(2, 3, (0..6).map(|_| rng.gen_range(0..2) as f64).collect());
    let mask = Matrix::from_vec(2, 3, vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
    let labels = TaskLabels::new(y, mask).expect("binary mask");
    let real = TaskLabels::dense(random_matrix(&mut rng, 2, 3));
    for (name, kind, lab) in [
        ("cross_entropy", LossKind::CrossEntropy, &labels),
        ("focal_loss", LossKind::Focal(FocalLossConfig { gamma: 2.0 }), &labels),
        ("mse", LossKind::Mse, &real),
    ] {
        let mut store = ParamStore::new();
        let z = store.add("logits", random_matrix(&mut rng, 2, 3).scale(3.0))?;
        checks.push(check(name, &store, all, inject_fault, |s, t| {
            let zv = t.param(s, z);
            kind.record(t, zv, lab).map_err(|e| ModelError::InvalidConfig(e.to_string()))
        })?);
    }

    // eval mode on two molecules; train mode needs a wider batch because
    // batch norm over two super-node rows saturates every channel at +-1 and
    // leaves gradients below finite-difference resolution
    let eval_batch = model_batch(&mut rng, 2);
    let train_batch = model_batch(&mut rng, TRAIN_MODE_GRAPHS);
    let mut model = build_model(ModelConfig::new(2, TaskKind::Classification, seed))?;
    // nonzero biases and batch-norm shifts so that no ReLU sits exactly at its kink
    for p in model.params_mut().iter_mut() {
        if p.name.ends_with("/b") || p.name.ends_with("beta") {
            let (r, c) = p.value.shape();
            p.value = random_matrix(&mut rng, r, c).scale(0.1);
        }
    }
    {
        let mut tape = Tape::new();
        let xv = tape.leaf(train_batch.1.clone());
        let (_, stats) = model.record(&mut tape, model.params(), &train_batch.0, xv, Mode::Train)?;
        drop(tape);
        model.apply_batch_stats(&stats);
    }
    let sample = CoordinateSelection::Sample {
        per_param: MODEL_COORDS_PER_PARAM,
        seed,
    };
    let loss = LossKind::Focal(FocalLossConfig { gamma: 2.0 });
    for (name, mode, (b, xm, lab)) in [
        ("model_train", Mode::Train, &train_batch),
        ("model_eval", Mode::Eval, &eval_batch),
    ] {
        let m = &model;
        checks.push(check(name, model.params(), sample, inject_fault, |s, t| {
            let xv = t.leaf(xm.clone());
            let (out, _) = m.record(t, s, b, xv, mode)?;
            loss.record(t, out, lab).map_err(|e| ModelError::InvalidConfig(e.to_string()))
        })?);
    }

    Ok(SuiteReport { seed, checks })
}
