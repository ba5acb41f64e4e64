//! Adam, minibatch training with early stopping, and evaluation.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{DataError, Dataset, TargetStats, TaskKind};
use crate::diff::{ParamStore, Tape};
use crate::graph::build_batch;
use crate::layers::Mode;
use crate::losses::{LossError, LossKind};
use crate::metrics::EvalReport;
use crate::model::{Model, ModelError};
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient in parameter '{0}'")]
    NonFiniteGradient(String),
    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl TrainError {
    /// Training diverged numerically, as opposed to bad input.
    pub fn is_divergence(&self) -> bool {
        matches!(self, TrainError::NonFiniteGradient(_) | TrainError::NonFiniteLoss { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            loss: LossKind::CrossEntropy,
            seed: 0,
            early_stop_patience: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        // a zero learning rate is allowed: it freezes the weights
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be a finite non-negative number");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0 && self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0) {
            return bad("Adam betas must lie in (0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be positive");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1");
        }
        Ok(())
    }
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update from the gradients accumulated in `params`.
///
/// Every gradient is checked before anything is modified.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, cfg: &TrainConfig) -> Result<(), TrainError> {
    if let Some(p) = params.iter().find(|p| !p.grad.all_finite()) {
        return Err(TrainError::NonFiniteGradient(p.name.clone()));
    }
    state.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad.data();
        let theta = p.value.data_mut();
        for i in 0..g.len() {
            let mi = &mut m.data_mut()[i];
            *mi = b1 * *mi + (1.0 - b1) * g[i];
            let vi = &mut v.data_mut()[i];
            *vi = b2 * *vi + (1.0 - b2) * g[i] * g[i];
            let m_hat = m.data()[i] / c1;
            let v_hat = v.data()[i] / c2;
            theta[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct History {
    /// `auc` (higher is better) or `rmse` (lower is better).
    pub metric: &'static str,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept, if any epoch ran.
    pub best_epoch: Option<usize>,
}

impl History {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            metric: validation_metric(kind),
            epochs: Vec::new(),
            best_epoch: None,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,valid_metric\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.valid_metric));
        }
        out
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch
            .and_then(|b| self.epochs.iter().find(|e| e.epoch == b))
    }
}

fn validation_metric(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Classification => "auc",
        TaskKind::Regression => "rmse",
    }
}

fn improves(kind: TaskKind, new: f64, best: Option<f64>) -> bool {
    match best {
        None => true,
        Some(_) if new.is_nan() => false,
        Some(b) if b.is_nan() => true,
        Some(b) => match kind {
            TaskKind::Classification => new > b,
            TaskKind::Regression => new < b,
        },
    }
}

/// Trains a fresh copy of `model`, keeping the parameters of the best
/// validation epoch. Per-epoch records are appended to `history` as they
/// happen, so a caller still has them when training aborts.
///
/// Regression targets are standardized with statistics of `train`, which
/// are stored in the returned model.
pub fn fit_into(
    model: &Model,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
    history: &mut History,
) -> Result<Model, TrainError> {
    cfg.validate()?;
    let kind = train.task_kind();
    if train.tasks().len() != model.config().task_count || valid.tasks().len() != train.tasks().len() {
        return Err(TrainError::InvalidConfig(format!(
            "model has {} outputs but the data has {} tasks",
            model.config().task_count,
            train.tasks().len()
        )));
    }
    if kind != model.config().task_kind {
        return Err(TrainError::InvalidConfig("model and data disagree on the task kind".into()));
    }
    if cfg.loss.is_classification() != (kind == TaskKind::Classification) {
        return Err(TrainError::InvalidConfig(format!("loss {} does not fit {kind} tasks", cfg.loss)));
    }

    let mut model = model.clone();
    model.set_tasks(train.tasks().to_vec())?;
    let train_norm = match kind {
        TaskKind::Regression => {
            let stats = TargetStats::fit(train)?;
            let normalized = stats.apply(train);
            model.set_target_stats(Some(stats));
            normalized
        }
        TaskKind::Classification => train.clone(),
    };

    let mut state = AdamState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_norm.len()).collect();
    let mut best_model = model.clone();
    let mut best_metric: Option<f64> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for rows in order.chunks(cfg.batch_size) {
            let labels = train_norm.labels(rows);
            if labels.active_count() == 0 {
                warn!("epoch {epoch}: skipping a batch without labels");
                continue;
            }
            let graphs: Vec<_> = rows.iter().map(|&i| &train_norm.records()[i].graph).collect();
            let feats: Vec<_> = rows.iter().map(|&i| &train_norm.records()[i].features).collect();
            let (batch, x) = build_batch(&graphs, &feats).map_err(ModelError::from)?;

            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let (out, stats) = model.record(&mut tape, model.params(), &batch, xv, Mode::Train)?;
            let loss = cfg.loss.record(&mut tape, out, &labels)?;
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch });
            }
            let grads = tape.backward(loss).map_err(ModelError::from)?;
            drop(tape);

            let params = model.params_mut();
            params.zero_grads();
            params.accumulate(&grads);
            adam_step(params, &mut state, cfg)?;
            model.apply_batch_stats(&stats);
            loss_sum += loss_value;
            steps += 1;
        }
        let train_loss = if steps == 0 { f64::NAN } else { loss_sum / steps as f64 };
        let report = evaluate(&model, valid, "valid")?;
        let metric = report.mean(history.metric).unwrap_or(f64::NAN);
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            valid_metric: metric,
        });
        info!(
            "epoch {epoch:>3}  train_loss {train_loss:.5}  valid_{} {metric:.4}",
            history.metric
        );
        if improves(kind, metric, best_metric) {
            best_metric = Some(metric);
            best_model = model.clone();
            history.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                info!("early stop after epoch {epoch}; best epoch {:?}", history.best_epoch);
                break;
            }
        }
    }
    Ok(best_model)
}

pub fn fit(model: &Model, train: &Dataset, valid: &Dataset, cfg: &TrainConfig) -> Result<(Model, History), TrainError> {
    let mut history = History::new(train.task_kind());
    let trained = fit_into(model, train, valid, cfg, &mut history)?;
    Ok((trained, history))
}

/// Eval-mode metrics over `dataset`, whose labels are in original units.
pub fn evaluate(model: &Model, dataset: &Dataset, split_name: &str) -> Result<EvalReport, TrainError> {
    if dataset.is_empty() {
        return Ok(EvalReport {
            split: split_name.to_string(),
            tasks: Vec::new(),
        });
    }
    let graphs: Vec<_> = dataset.records().iter().map(|r| &r.graph).collect();
    let feats: Vec<_> = dataset.records().iter().map(|r| &r.features).collect();
    let raw = model.raw_outputs(&graphs, &feats)?;
    let scores = model.to_scores(&raw);
    let records = dataset.records();
    Ok(match dataset.task_kind() {
        TaskKind::Classification => EvalReport::classification(
            split_name,
            dataset
                .tasks()
                .iter()
                .enumerate()
                .map(|(t, name)| {
                    let (s, l): (Vec<f64>, Vec<bool>) = records
                        .iter()
                        .enumerate()
                        .filter_map(|(i, r)| r.labels[t].map(|y| (raw.get(i, t), y == 1.0)))
                        .unzip();
                    (name.clone(), s, l)
                })
                .collect(),
        ),
        TaskKind::Regression => EvalReport::regression(
            split_name,
            dataset
                .tasks()
                .iter()
                .enumerate()
                .map(|(t, name)| {
                    let (p, y): (Vec<f64>, Vec<f64>) = records
                        .iter()
                        .enumerate()
                        .filter_map(|(i, r)| r.labels[t].map(|y| (scores.get(i, t), y)))
                        .unzip();
                    (name.clone(), p, y)
                })
                .collect(),
        ),
    })
}
