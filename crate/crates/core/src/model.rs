//! The full network: two graph convolution blocks with pooling, a third
//! super-node-only block, and a two-layer classifier on the super node.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::chem::{featurize, MolGraph, ATOM_FEATURES};
use crate::data::{TargetStats, TaskKind};
use crate::diff::{DiffError, ParamStore, Tape, Var};
use crate::graph::{build_batch, init_super_nodes, GraphBatch, GraphError};
use crate::layers::{
    graph_pool, BatchStats, Dense, GraphConvParams, LayerError, Mode, NodeBatchNorm, SuperNodeConvParams,
};
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"MGV1";
pub const FORMAT_VERSION: u32 = 1;

/// Graphs per chunk when predicting over many molecules.
const PREDICT_CHUNK: usize = 128;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} input features, got {got}")]
    FeatureWidth { expected: usize, got: usize },
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format version {found} is not supported (expected {FORMAT_VERSION})")]
    VersionMismatch { found: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptPayload(String),
}

impl From<DiffError> for ModelError {
    fn from(e: DiffError) -> Self {
        ModelError::Layer(LayerError::Diff(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub node_width: usize,
    pub super_width: usize,
    pub classifier_hidden: usize,
    pub task_count: usize,
    pub task_kind: TaskKind,
    pub seed: u64,
}

impl ModelConfig {
    /// Default widths (64 / 128 / 128).
    pub fn new(task_count: usize, task_kind: TaskKind, seed: u64) -> Self {
        Self {
            node_width: 64,
            super_width: 128,
            classifier_hidden: 128,
            task_count,
            task_kind,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.node_width == 0 || self.super_width == 0 || self.classifier_hidden == 0 {
            return Err(ModelError::InvalidConfig("widths must be positive".into()));
        }
        if self.task_count == 0 {
            return Err(ModelError::InvalidConfig("task_count must be at least 1".into()));
        }
        if self.super_width <= self.node_width {
            return Err(ModelError::InvalidConfig(format!(
                "super_width ({}) must exceed node_width ({})",
                self.super_width, self.node_width
            )));
        }
        Ok(())
    }
}

/// Batch statistics from one train-mode forward pass, in
/// [`Model::batch_norms`] order.
pub type PendingStats = Vec<Option<BatchStats>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    tasks: Vec<String>,
    target_stats: Option<TargetStats>,
    params: ParamStore,
    gc1: GraphConvParams,
    gc2: GraphConvParams,
    super1: SuperNodeConvParams,
    super2: SuperNodeConvParams,
    super3: SuperNodeConvParams,
    // bn1/node, bn1/super, bn2/node, bn2/super, bn3/super
    norms: Vec<NodeBatchNorm>,
    clf1: Dense,
    clf2: Dense,
}

const NORM_NAMES: [&str; 5] = ["bn1/node", "bn1/super", "bn2/node", "bn2/super", "bn3/super"];

pub fn build_model(config: ModelConfig) -> Result<Model, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut p = ParamStore::new();
    let (f, n, s, h) = (
        ATOM_FEATURES,
        config.node_width,
        config.super_width,
        config.classifier_hidden,
    );
    let gc1 = GraphConvParams::register(&mut p, "gc1", f, n, &mut rng)?;
    let super1 = SuperNodeConvParams::register(&mut p, "super1", s, f, s, &mut rng)?;
    let gc2 = GraphConvParams::register(&mut p, "gc2", n, n, &mut rng)?;
    let super2 = SuperNodeConvParams::register(&mut p, "super2", s, n, s, &mut rng)?;
    let super3 = SuperNodeConvParams::register(&mut p, "super3", s, n, s, &mut rng)?;
    let mut norms = Vec::with_capacity(NORM_NAMES.len());
    for name in NORM_NAMES {
        let width = if name.ends_with("node") { n } else { s };
        norms.push(NodeBatchNorm::register(&mut p, name, width)?);
    }
    let clf1 = Dense::register(&mut p, "clf/W1", "clf/b1", s, h, &mut rng)?;
    let clf2 = Dense::register(&mut p, "clf/W2", "clf/b2", h, config.task_count, &mut rng)?;
    Ok(Model {
        config,
        tasks: (0..config.task_count).map(|i| format!("task{i}")).collect(),
        target_stats: None,
        params: p,
        gc1,
        gc2,
        super1,
        super2,
        super3,
        norms,
        clf1,
        clf2,
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    pub fn set_tasks(&mut self, tasks: Vec<String>) -> Result<(), ModelError> {
        if tasks.len() != self.config.task_count {
            return Err(ModelError::InvalidConfig(format!(
                "{} task names for {} outputs",
                tasks.len(),
                self.config.task_count
            )));
        }
        if tasks.iter().any(|t| t.contains(['\n', '\r'])) {
            return Err(ModelError::InvalidConfig("task names must be single-line".into()));
        }
        self.tasks = tasks;
        Ok(())
    }

    pub fn target_stats(&self) -> Option<&TargetStats> {
        self.target_stats.as_ref()
    }

    pub fn set_target_stats(&mut self, stats: Option<TargetStats>) {
        self.target_stats = stats;
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn batch_norms(&self) -> &[NodeBatchNorm] {
        &self.norms
    }

    /// Records a forward pass reading weights from `store`, which is
    /// normally [`Self::params`] but may be a perturbed copy.
    ///
    /// Returns the `G × T` output and, in train mode, the batch statistics
    /// of every normalization layer.
    pub fn record<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &ParamStore,
        batch: &'a GraphBatch,
        features: Var,
        mode: Mode,
    ) -> Result<(Var, PendingStats), ModelError> {
        let width = tape.value(features).cols();
        if width != ATOM_FEATURES {
            return Err(ModelError::FeatureWidth {
                expected: ATOM_FEATURES,
                got: width,
            });
        }
        let mut stats = Vec::with_capacity(self.norms.len());
        let mut block = |tape: &mut Tape<'a>, x: Var, k: usize| -> Result<Var, ModelError> {
            let r = tape.relu(x);
            let (y, s) = self.norms[k].forward(tape, store, r, mode)?;
            stats.push(s);
            Ok(y)
        };

        let s0 = tape.leaf(init_super_nodes(batch, self.config.super_width));
        let h1 = self.gc1.forward(tape, store, batch, features)?;
        let s1 = self.super1.forward(tape, store, batch, features, s0)?;
        let h1 = block(tape, h1, 0)?;
        let s1 = block(tape, s1, 1)?;
        let h1 = graph_pool(tape, batch, h1)?;

        let h2 = self.gc2.forward(tape, store, batch, h1)?;
        let s2 = self.super2.forward(tape, store, batch, h1, s1)?;
        let h2 = block(tape, h2, 2)?;
        let s2 = block(tape, s2, 3)?;
        let h2 = graph_pool(tape, batch, h2)?;

        let s3 = self.super3.forward(tape, store, batch, h2, s2)?;
        let s3 = block(tape, s3, 4)?;

        let hidden = self.clf1.forward(tape, store, s3)?;
        let hidden = tape.tanh(hidden);
        let out = self.clf2.forward(tape, store, hidden)?;
        Ok((out, stats))
    }

    /// Raw outputs (logits or normalized regression values) for a batch.
    pub fn forward(&self, batch: &GraphBatch, features: &Matrix, mode: Mode) -> Result<Matrix, ModelError> {
        let mut tape = Tape::new();
        let x = tape.leaf(features.clone());
        let (out, _) = self.record(&mut tape, &self.params, batch, x, mode)?;
        Ok(tape.value(out).clone())
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn apply_batch_stats(&mut self, stats: &PendingStats) {
        for (bn, s) in self.norms.iter_mut().zip(stats) {
            if let Some(s) = s {
                bn.update(s);
            }
        }
    }

    /// Eval-mode raw outputs for many molecules, in fixed-size chunks.
    pub fn raw_outputs(&self, graphs: &[&MolGraph], features: &[&Matrix]) -> Result<Matrix, ModelError> {
        let t = self.config.task_count;
        let mut out = Vec::with_capacity(graphs.len() * t);
        for (gs, fs) in graphs.chunks(PREDICT_CHUNK).zip(features.chunks(PREDICT_CHUNK)) {
            let (batch, x) = build_batch(gs, fs)?;
            out.extend_from_slice(self.forward(&batch, &x, Mode::Eval)?.data());
        }
        Ok(Matrix::from_vec(graphs.len(), t, out))
    }

    /// User-facing scores: probabilities for classification, targets in
    /// original units for regression.
    pub fn predict(&self, graphs: &[&MolGraph]) -> Result<Matrix, ModelError> {
        let features: Vec<Matrix> = graphs.iter().map(|g| featurize(g)).collect();
        let refs: Vec<&Matrix> = features.iter().collect();
        let raw = self.raw_outputs(graphs, &refs)?;
        Ok(self.to_scores(&raw))
    }

    pub fn to_scores(&self, raw: &Matrix) -> Matrix {
        match self.config.task_kind {
            TaskKind::Classification => raw.map(crate::diff::sigmoid),
            TaskKind::Regression => match &self.target_stats {
                Some(stats) => {
                    let mut out = raw.clone();
                    for r in 0..out.rows() {
                        for (t, v) in out.row_mut(r).iter_mut().enumerate() {
                            *v = stats.denormalize(t, *v);
                        }
                    }
                    out
                }
                None => raw.clone(),
            },
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn header(&self) -> String {
        let c = &self.config;
        let mut h = String::new();
        let _ = writeln!(h, "format_version={FORMAT_VERSION}");
        let _ = writeln!(h, "node_width={}", c.node_width);
        let _ = writeln!(h, "super_width={}", c.super_width);
        let _ = writeln!(h, "classifier_hidden={}", c.classifier_hidden);
        let _ = writeln!(h, "task_count={}", c.task_count);
        let _ = writeln!(h, "task_kind={}", c.task_kind);
        let _ = writeln!(h, "seed={}", c.seed);
        for t in &self.tasks {
            let _ = writeln!(h, "task={t}");
        }
        if let Some(s) = &self.target_stats {
            let _ = writeln!(h, "target_mean={}", hex_list(&s.mean));
            let _ = writeln!(h, "target_std={}", hex_list(&s.std));
        }
        for p in self.params.iter() {
            let _ = writeln!(h, "param={} {} {}", p.name, p.value.rows(), p.value.cols());
        }
        for (name, bn) in NORM_NAMES.iter().zip(&self.norms) {
            let _ = writeln!(h, "stat={name}/running_mean {}", bn.running_mean.len());
            let _ = writeln!(h, "stat={name}/running_var {}", bn.running_var.len());
        }
        h
    }

    /// Serialized checkpoint: magic, header length, header text, then every
    /// parameter and running statistic as little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header();
        let mut out = Vec::with_capacity(8 + header.len() + self.params.scalar_count() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        let mut put = |vals: &[f64]| {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for p in self.params.iter() {
            put(p.value.data());
        }
        for bn in &self.norms {
            put(&bn.running_mean);
            put(&bn.running_var);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let corrupt = |m: &str| ModelError::CorruptPayload(m.to_string());
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing MGV1 magic"));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header = bytes
            .get(8..8 + len)
            .ok_or_else(|| corrupt("header runs past end of file"))?;
        let header = std::str::from_utf8(header).map_err(|_| corrupt("header is not UTF-8"))?;
        let payload = &bytes[8 + len..];

        let mut fields: Vec<(&str, &str)> = Vec::new();
        for line in header.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| corrupt(&format!("malformed header line '{line}'")))?;
            fields.push((k, v));
        }
        let one = |key: &str| -> Result<&str, ModelError> {
            fields
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| ModelError::CorruptPayload(format!("header lacks {key}")))
        };
        let version = one("format_version")?;
        if version != FORMAT_VERSION.to_string() {
            return Err(ModelError::VersionMismatch {
                found: version.to_string(),
            });
        }
        let num = |key: &str| -> Result<u64, ModelError> {
            one(key)?
                .parse()
                .map_err(|_| ModelError::CorruptPayload(format!("bad {key}")))
        };
        let config = ModelConfig {
            node_width: num("node_width")? as usize,
            super_width: num("super_width")? as usize,
            classifier_hidden: num("classifier_hidden")? as usize,
            task_count: num("task_count")? as usize,
            task_kind: one("task_kind")?
                .parse()
                .map_err(|_| corrupt("bad task_kind"))?,
            seed: num("seed")?,
        };
        config
            .validate()
            .map_err(|e| ModelError::CorruptPayload(e.to_string()))?;
        let mut model = build_model(config)?;
        let tasks: Vec<String> = fields
            .iter()
            .filter(|(k, _)| *k == "task")
            .map(|(_, v)| v.to_string())
            .collect();
        model
            .set_tasks(tasks)
            .map_err(|e| ModelError::CorruptPayload(e.to_string()))?;
        let has_stats = fields.iter().any(|(k, _)| *k == "target_mean");
        if has_stats {
            let mean = parse_hex_list(one("target_mean")?).ok_or_else(|| corrupt("bad target_mean"))?;
            let std = parse_hex_list(one("target_std")?).ok_or_else(|| corrupt("bad target_std"))?;
            if mean.len() != config.task_count || std.len() != config.task_count {
                return Err(corrupt("target statistics do not match task_count"));
            }
            model.target_stats = Some(TargetStats { mean, std });
        }

        let params: Vec<&str> = fields
            .iter()
            .filter(|(k, _)| *k == "param")
            .map(|(_, v)| *v)
            .collect();
        let stats: Vec<&str> = fields
            .iter()
            .filter(|(k, _)| *k == "stat")
            .map(|(_, v)| *v)
            .collect();
        if params.len() != model.params.len() || stats.len() != 2 * model.norms.len() {
            return Err(corrupt("parameter list does not match the architecture"));
        }
        for (line, p) in params.iter().zip(model.params.iter()) {
            let expected = format!("{} {} {}", p.name, p.value.rows(), p.value.cols());
            if *line != expected {
                return Err(ModelError::CorruptPayload(format!(
                    "parameter '{line}' where '{expected}' was expected"
                )));
            }
        }
        for (i, line) in stats.iter().enumerate() {
            let bn = &model.norms[i / 2];
            let kind = if i % 2 == 0 { "running_mean" } else { "running_var" };
            let expected = format!("{}/{kind} {}", NORM_NAMES[i / 2], bn.width());
            if *line != expected {
                return Err(ModelError::CorruptPayload(format!(
                    "statistic '{line}' where '{expected}' was expected"
                )));
            }
        }
        let total = model.params.scalar_count() + model.norms.iter().map(|b| 2 * b.width()).sum::<usize>();
        if payload.len() != total * 8 {
            return Err(ModelError::CorruptPayload(format!(
                "payload holds {} bytes, expected {}",
                payload.len(),
                total * 8
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for p in model.params.iter_mut() {
            for v in p.value.data_mut() {
                *v = values.next().unwrap();
            }
        }
        for bn in &mut model.norms {
            for v in bn.running_mean.iter_mut().chain(bn.running_var.iter_mut()) {
                *v = values.next().unwrap();
            }
        }
        Ok(model)
    }
}

fn hex_list(vals: &[f64]) -> String {
    vals.iter()
        .map(|v| format!("{:016x}", v.to_bits()))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_hex_list(s: &str) -> Option<Vec<f64>> {
    s.split(',')
        .map(|h| u64::from_str_radix(h, 16).ok().map(f64::from_bits))
        .collect()
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), ModelError> {
    model.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Model, ModelError> {
    Model::load(path)
}
