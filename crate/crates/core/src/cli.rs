//! Command-line front end: featurize, split, train, evaluate, predict,
//! gradcheck, and rerun from a manifest.
//!
//! Exit codes: 0 success, 1 failed check, 2 bad input, 3 numeric divergence.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chem::{feature_names, parse_raw_smiles};
use crate::data::{load_csv, split, write_split_manifest, Dataset, LoadReport, Split, SplitMethod, SplitSpec, TaskKind};
use crate::losses::LossKind;
use crate::metrics::EvalReport;
use crate::model::{build_model, load_checkpoint, save_checkpoint, Model, ModelConfig, ModelError};
use crate::selfcheck::gradcheck_suite;
use crate::train::{evaluate, fit_into, History, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "MOLEGRAPH_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    CheckFailed(String),
    #[error("{0}")]
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::CheckFailed(_) => EXIT_CHECK_FAILED,
            CliError::Diverged(_) => EXIT_DIVERGED,
        }
    }
}

impl From<crate::data::DataError> for CliError {
    fn from(e: crate::data::DataError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_divergence() {
            CliError::Diverged(format!("training diverged: {e}"))
        } else {
            CliError::Input(e.to_string())
        }
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

#[derive(Debug, Parser)]
#[command(name = "molegraph", version, args_override_self = true, about = "Graph convolution with a dummy super node for molecular property prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write per-atom feature rows for every molecule of a CSV file
    Featurize(FeaturizeArgs),
    /// Split a dataset and write the subset of every row
    Split(SplitArgs),
    /// Train a model and write checkpoint, history, split and evaluation reports
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labelled CSV file
    Evaluate(EvaluateArgs),
    /// Score molecules with a checkpoint
    Predict(PredictArgs),
    /// Compare analytic gradients of every layer and the full model with finite differences
    Gradcheck(GradcheckArgs),
    /// Repeat a run recorded in a manifest
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct FeaturizeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "smiles")]
    pub smiles_col: String,
    /// Output CSV
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "smiles")]
    pub smiles_col: String,
    /// index, random or scaffold
    #[arg(long, default_value = "random")]
    pub method: SplitMethod,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV with columns row_index, smiles, subset
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "smiles")]
    pub smiles_col: String,
    /// Comma-separated label columns
    #[arg(long, value_delimiter = ',', required = true)]
    pub tasks: Vec<String>,
    /// classification or regression
    #[arg(long)]
    pub task_kind: TaskKind,
    /// index, random or scaffold
    #[arg(long, default_value = "random")]
    pub split: SplitMethod,
    /// ce, focal, focal:<gamma> or mse; defaults to ce or mse by task kind
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    /// Epochs without validation improvement before stopping
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    /// Seeds the split, the initial weights and the shuffling
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    All,
    Train,
    Valid,
    Test,
}

impl Subset {
    fn name(self) -> &'static str {
        match self {
            Subset::All => "all",
            Subset::Train => "train",
            Subset::Valid => "valid",
            Subset::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "smiles")]
    pub smiles_col: String,
    /// Rows to evaluate; anything but `all` re-derives the split from --split and --seed
    #[arg(long, value_enum, default_value = "all")]
    pub subset: Subset,
    #[arg(long, default_value = "random")]
    pub split: SplitMethod,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report CSV; printed only when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
#[command(group(ArgGroup::new("input").required(true).args(["smiles", "data"])))]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A molecule to score; repeatable
    #[arg(long)]
    pub smiles: Vec<String>,
    /// CSV file with a SMILES column
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "smiles")]
    pub smiles_col: String,
    /// Output CSV; standard output when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corrupts one backward rule so the check must fail
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Replaces the recorded output file or directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Everything needed to repeat a run. Written beside every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    /// Fully resolved command line, defaults included, without the program name.
    pub args: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetInfo>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitInfo>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub path: String,
    pub sha256: String,
    pub rows_kept: usize,
    pub rows_dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub method: String,
    pub fractions: [f64; 3],
    pub seed: u64,
    pub sizes: [usize; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scaffold_groups: Option<usize>,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainInfo {
    pub tasks: Vec<String>,
    pub task_kind: String,
    pub loss: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub early_stop_patience: usize,
    pub node_width: usize,
    pub super_width: usize,
    pub classifier_hidden: usize,
}

impl RunManifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest fields are plain values")
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Input(format!("invalid manifest: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| io_error(path, e))?)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn dataset_info(path: &Path, report: &LoadReport) -> Result<DatasetInfo, CliError> {
    Ok(DatasetInfo {
        path: path.display().to_string(),
        sha256: file_sha256(path)?,
        rows_kept: report.kept,
        rows_dropped: report.dropped,
    })
}

fn split_info(spec: &SplitSpec, s: &Split) -> SplitInfo {
    let (a, b, c) = s.sizes();
    SplitInfo {
        method: spec.method.to_string(),
        fractions: [spec.fractions.0, spec.fractions.1, spec.fractions.2],
        seed: spec.seed,
        sizes: [a, b, c],
        scaffold_groups: s.scaffold_groups,
        fallback: s.fallback,
    }
}

/// `<file>.manifest.toml` next to a single-file output.
pub fn manifest_path_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.toml");
    out.with_file_name(name)
}

fn path_arg(p: &Path) -> String {
    p.display().to_string()
}

fn load_dataset(data: &Path, smiles_col: &str, tasks: &[String], kind: TaskKind) -> Result<(Dataset, LoadReport), CliError> {
    let (ds, report) = load_csv(data, smiles_col, tasks, kind)?;
    if report.dropped > 0 {
        eprintln!("dropped {} of {} rows with unreadable SMILES", report.dropped, report.kept + report.dropped);
    }
    Ok((ds, report))
}

impl FeaturizeArgs {
    fn to_args(&self) -> Vec<String> {
        vec![
            "featurize".into(),
            "--data".into(),
            path_arg(&self.data),
            "--smiles-col".into(),
            self.smiles_col.clone(),
            "--out".into(),
            path_arg(&self.out),
        ]
    }
}

fn cmd_featurize(a: &FeaturizeArgs) -> Result<(), CliError> {
    let (ds, report) = load_dataset(&a.data, &a.smiles_col, &[], TaskKind::Classification)?;
    let mut w = csv::Writer::from_path(&a.out).map_err(|e| io_error(&a.out, e))?;
    let mut header = vec!["row_index".to_string(), "smiles".into(), "atom".into(), "element".into()];
    header.extend(feature_names());
    w.write_record(&header).map_err(|e| io_error(&a.out, e))?;
    for r in ds.records() {
        for (i, atom) in r.graph.atoms().iter().enumerate() {
            let mut row = vec![r.source_row.to_string(), r.smiles.clone(), i.to_string(), atom.element.to_string()];
            row.extend(r.features.row(i).iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(|e| io_error(&a.out, e))?;
        }
    }
    w.flush().map_err(|e| io_error(&a.out, e))?;
    println!("featurized {} molecules ({} dropped)", report.kept, report.dropped);
    let manifest = RunManifest {
        command: "featurize".into(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        seed: 0,
        args: a.to_args(),
        dataset: Some(dataset_info(&a.data, &report)?),
        split: None,
        train: None,
    };
    write_file(&manifest_path_for(&a.out), manifest.to_toml())
}

impl SplitArgs {
    fn to_args(&self) -> Vec<String> {
        vec![
            "split".into(),
            "--data".into(),
            path_arg(&self.data),
            "--smiles-col".into(),
            self.smiles_col.clone(),
            "--method".into(),
            self.method.to_string(),
            "--seed".into(),
            self.seed.to_string(),
            "--out".into(),
            path_arg(&self.out),
        ]
    }
}

fn print_split(s: &Split) {
    let (a, b, c) = s.sizes();
    println!("train {a}  valid {b}  test {c}");
    if let Some(g) = s.scaffold_groups {
        println!("scaffold groups {g}");
    }
    if s.fallback {
        println!("note: a scaffold group was divided to fill an empty subset");
    }
}

fn cmd_split(a: &SplitArgs) -> Result<(), CliError> {
    let (ds, report) = load_dataset(&a.data, &a.smiles_col, &[], TaskKind::Classification)?;
    let spec = SplitSpec::new(a.method, a.seed);
    let s = split(&ds, &spec)?;
    let file = fs::File::create(&a.out).map_err(|e| io_error(&a.out, e))?;
    write_split_manifest(io::BufWriter::new(file), &ds, &s)?;
    print_split(&s);
    let manifest = RunManifest {
        command: "split".into(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        seed: a.seed,
        args: a.to_args(),
        dataset: Some(dataset_info(&a.data, &report)?),
        split: Some(split_info(&spec, &s)),
        train: None,
    };
    write_file(&manifest_path_for(&a.out), manifest.to_toml())
}

impl TrainArgs {
    /// Loss with the task-kind default filled in.
    pub fn resolved_loss(&self) -> LossKind {
        self.loss.unwrap_or(match self.task_kind {
            TaskKind::Classification => LossKind::CrossEntropy,
            TaskKind::Regression => LossKind::Mse,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            loss: self.resolved_loss(),
            seed: self.seed,
            early_stop_patience: self.patience,
            ..TrainConfig::default()
        }
    }

    fn to_args(&self) -> Vec<String> {
        vec![
            "train".into(),
            "--data".into(),
            path_arg(&self.data),
            "--smiles-col".into(),
            self.smiles_col.clone(),
            "--tasks".into(),
            self.tasks.join(","),
            "--task-kind".into(),
            self.task_kind.to_string(),
            "--split".into(),
            self.split.to_string(),
            "--loss".into(),
            self.resolved_loss().to_string(),
            "--epochs".into(),
            self.epochs.to_string(),
            "--batch-size".into(),
            self.batch_size.to_string(),
            "--learning-rate".into(),
            self.learning_rate.to_string(),
            "--patience".into(),
            self.patience.to_string(),
            "--seed".into(),
            self.seed.to_string(),
            "--out-dir".into(),
            path_arg(&self.out_dir),
        ]
    }
}

/// Output of a completed training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: History,
    pub reports: Vec<EvalReport>,
    pub manifest: RunManifest,
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainOutcome, CliError> {
    let (ds, report) = load_dataset(&a.data, &a.smiles_col, &a.tasks, a.task_kind)?;
    let spec = SplitSpec::new(a.split, a.seed);
    let s = split(&ds, &spec)?;
    print_split(&s);
    let cfg = a.train_config();
    cfg.validate()?;
    let model_cfg = ModelConfig::new(a.tasks.len(), a.task_kind, a.seed);
    let init = build_model(model_cfg)?;

    fs::create_dir_all(&a.out_dir).map_err(|e| io_error(&a.out_dir, e))?;
    let out = |name: &str| a.out_dir.join(name);
    let manifest = RunManifest {
        command: "train".into(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        seed: a.seed,
        args: a.to_args(),
        dataset: Some(dataset_info(&a.data, &report)?),
        split: Some(split_info(&spec, &s)),
        train: Some(TrainInfo {
            tasks: a.tasks.clone(),
            task_kind: a.task_kind.to_string(),
            loss: cfg.loss.to_string(),
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            adam_beta1: cfg.adam_beta1,
            adam_beta2: cfg.adam_beta2,
            adam_epsilon: cfg.adam_epsilon,
            early_stop_patience: cfg.early_stop_patience,
            node_width: model_cfg.node_width,
            super_width: model_cfg.super_width,
            classifier_hidden: model_cfg.classifier_hidden,
        }),
    };
    write_file(&out("manifest.toml"), manifest.to_toml())?;
    let split_file = fs::File::create(out("split.csv")).map_err(|e| io_error(&out("split.csv"), e))?;
    write_split_manifest(io::BufWriter::new(split_file), &ds, &s)?;

    let (train, valid, test) = (ds.subset(&s.train), ds.subset(&s.valid), ds.subset(&s.test));
    let mut history = History::new(a.task_kind);
    let fitted = fit_into(&init, &train, &valid, &cfg, &mut history);
    // the history is kept even when training aborts
    write_file(&out("history.csv"), history.to_csv())?;
    let model = fitted?;
    save_checkpoint(&model, &out("model.ckpt"))?;
    if let Some(best) = history.best() {
        println!("best epoch {} (valid {} {:.4})", best.epoch, history.metric, best.valid_metric);
    }

    let mut reports = Vec::new();
    for (name, subset) in [("train", &train), ("valid", &valid), ("test", &test)] {
        let r = evaluate(&model, subset, name)?;
        write_file(&out(&format!("eval_{name}.csv")), r.to_csv())?;
        println!("{r}");
        reports.push(r);
    }
    Ok(TrainOutcome {
        model,
        history,
        reports,
        manifest,
    })
}

impl EvaluateArgs {
    fn to_args(&self) -> Vec<String> {
        let mut v = vec![
            "evaluate".into(),
            "--checkpoint".into(),
            path_arg(&self.checkpoint),
            "--data".into(),
            path_arg(&self.data),
            "--smiles-col".into(),
            self.smiles_col.clone(),
            "--subset".into(),
            self.subset.name().into(),
            "--split".into(),
            self.split.to_string(),
            "--seed".into(),
            self.seed.to_string(),
        ];
        if let Some(out) = &self.out {
            v.push("--out".into());
            v.push(path_arg(out));
        }
        v
    }
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<EvalReport, CliError> {
    let model = load_checkpoint(&a.checkpoint)?;
    let tasks = model.tasks().to_vec();
    let (ds, report) = load_dataset(&a.data, &a.smiles_col, &tasks, model.config().task_kind)?;
    let (rows, split_meta) = match a.subset {
        Subset::All => (ds, None),
        subset => {
            let spec = SplitSpec::new(a.split, a.seed);
            let s = split(&ds, &spec)?;
            let idx = match subset {
                Subset::Train => &s.train,
                Subset::Valid => &s.valid,
                _ => &s.test,
            };
            (ds.subset(idx), Some(split_info(&spec, &s)))
        }
    };
    let r = evaluate(&model, &rows, a.subset.name())?;
    println!("{r}");
    if let Some(out) = &a.out {
        write_file(out, r.to_csv())?;
        let manifest = RunManifest {
            command: "evaluate".into(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            seed: a.seed,
            args: a.to_args(),
            dataset: Some(dataset_info(&a.data, &report)?),
            split: split_meta,
            train: None,
        };
        write_file(&manifest_path_for(out), manifest.to_toml())?;
    }
    Ok(r)
}

impl PredictArgs {
    fn to_args(&self) -> Vec<String> {
        let mut v = vec!["predict".into(), "--checkpoint".into(), path_arg(&self.checkpoint)];
        for s in &self.smiles {
            v.push(format!("--smiles={s}"));
        }
        if let Some(d) = &self.data {
            v.push("--data".into());
            v.push(path_arg(d));
        }
        v.push("--smiles-col".into());
        v.push(self.smiles_col.clone());
        if let Some(out) = &self.out {
            v.push("--out".into());
            v.push(path_arg(out));
        }
        v
    }
}

fn read_smiles_column(path: &Path, column: &str) -> Result<Vec<String>, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| io_error(path, e))?;
    let header = rdr.headers().map_err(|e| io_error(path, e))?.clone();
    let col = header
        .iter()
        .position(|h| h.trim() == column)
        .ok_or_else(|| CliError::Input(format!("column '{column}' not found in header")))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| io_error(path, e))?;
        out.push(rec.get(col).unwrap_or("").to_string());
    }
    Ok(out)
}

/// Score CSV text: `smiles,<task...>,error`, one row per input.
pub fn predict_csv(model: &Model, inputs: &[String]) -> Result<(String, usize), CliError> {
    let parsed: Vec<_> = inputs.iter().map(|s| parse_raw_smiles(s)).collect();
    let graphs: Vec<_> = parsed.iter().filter_map(|p| p.as_ref().ok()).collect();
    let scores = if graphs.is_empty() {
        None
    } else {
        Some(model.predict(&graphs)?)
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["smiles".to_string()];
    header.extend(model.tasks().iter().cloned());
    header.push("error".into());
    let csv_err = |e: csv::Error| CliError::Input(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    let mut next = 0;
    for (smiles, p) in inputs.iter().zip(&parsed) {
        let mut row = vec![smiles.clone()];
        match p {
            Ok(_) => {
                let m = scores.as_ref().expect("scored when any input parsed");
                row.extend(m.row(next).iter().map(|v| v.to_string()));
                row.push(String::new());
                next += 1;
            }
            Err(e) => {
                row.extend(model.tasks().iter().map(|_| String::new()));
                row.push(e.to_string());
            }
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Input(e.to_string()))?;
    Ok((String::from_utf8(bytes).expect("csv of utf-8 fields"), next))
}

fn cmd_predict(a: &PredictArgs) -> Result<(), CliError> {
    let model = load_checkpoint(&a.checkpoint)?;
    let mut inputs = a.smiles.clone();
    let mut dataset = None;
    if let Some(path) = &a.data {
        inputs.extend(read_smiles_column(path, &a.smiles_col)?);
        dataset = Some(DatasetInfo {
            path: path_arg(path),
            sha256: file_sha256(path)?,
            rows_kept: inputs.len(),
            rows_dropped: 0,
        });
    }
    let (text, ok) = predict_csv(&model, &inputs)?;
    match &a.out {
        Some(out) => {
            write_file(out, &text)?;
            let manifest = RunManifest {
                command: "predict".into(),
                code_version: env!("CARGO_PKG_VERSION").into(),
                seed: model.config().seed,
                args: a.to_args(),
                dataset,
                split: None,
                train: None,
            };
            write_file(&manifest_path_for(out), manifest.to_toml())?;
        }
        None => {
            let mut stdout = io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(|e| CliError::Input(format!("stdout: {e}")))?;
        }
    }
    if ok == 0 {
        return Err(CliError::Input("no input molecule could be parsed".into()));
    }
    if ok < inputs.len() {
        eprintln!("{} of {} molecules could not be parsed", inputs.len() - ok, inputs.len());
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let report = gradcheck_suite(a.seed, a.inject_fault)?;
    println!("{report}");
    match report.failures().first() {
        None => Ok(()),
        Some((check, param, err)) => Err(CliError::CheckFailed(format!(
            "gradient check failed: {check} parameter '{param}' has relative error {err:.3e}"
        ))),
    }
}

fn cmd_rerun(a: &RerunArgs) -> Result<(), CliError> {
    let manifest = RunManifest::read(&a.manifest)?;
    if manifest.code_version != env!("CARGO_PKG_VERSION") {
        log::warn!(
            "manifest was written by version {}, running {}",
            manifest.code_version,
            env!("CARGO_PKG_VERSION")
        );
    }
    if let Some(d) = &manifest.dataset {
        let now = file_sha256(Path::new(&d.path))?;
        if now != d.sha256 {
            return Err(CliError::Input(format!(
                "dataset {} changed since the run (sha256 {} recorded, {} now)",
                d.path, d.sha256, now
            )));
        }
    }
    let mut args = manifest.args.clone();
    if let Some(out) = &a.out {
        let flag = if manifest.command == "train" { "--out-dir" } else { "--out" };
        match args.iter().position(|x| x == flag) {
            Some(i) if i + 1 < args.len() => args[i + 1] = path_arg(out),
            _ => {
                args.push(flag.into());
                args.push(path_arg(out));
            }
        }
    }
    if args.first().map(String::as_str) == Some("rerun") {
        return Err(CliError::Input("a manifest cannot record a rerun".into()));
    }
    let cli = Cli::try_parse_from(std::iter::once("molegraph".to_string()).chain(args))
        .map_err(|e| CliError::Input(format!("manifest arguments do not parse: {e}")))?;
    info!("rerunning {} from {}", manifest.command, a.manifest.display());
    dispatch(&cli.command)
}

/// Runs one parsed command.
pub fn dispatch(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Featurize(a) => cmd_featurize(a),
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a).map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(a).map(|_| ()),
        Command::Predict(a) => cmd_predict(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Rerun(a) => cmd_rerun(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Thread cap from [`THREADS_ENV`], if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    let raw = std::env::var(THREADS_ENV).ok()?;
    match raw.trim().parse::<usize>() {
        Ok(n) if n > 0 => Some(n),
        _ => {
            log::warn!("ignoring {THREADS_ENV}={raw:?}: expected a positive integer");
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_train_defaults() {
        let cli = Cli::try_parse_from([
            "molegraph", "train", "--data", "x.csv", "--tasks", "a,b", "--task-kind", "classification", "--out-dir", "o",
        ])
        .unwrap();
        let Command::Train(t) = cli.command else { panic!() };
        assert_eq!(t.tasks, ["a", "b"]);
        assert_eq!(t.resolved_loss(), LossKind::CrossEntropy);
        assert_eq!(t.split, SplitMethod::Random);
        let again = Cli::try_parse_from(std::iter::once("molegraph".to_string()).chain(t.to_args())).unwrap();
        let Command::Train(u) = again.command else { panic!() };
        assert_eq!(u.to_args(), t.to_args());
    }

    #[test]
    fn focal_flag_value() {
        let cli = Cli::try_parse_from([
            "molegraph", "train", "--data", "x.csv", "--tasks", "y", "--task-kind", "classification", "--loss",
            "focal:2", "--out-dir", "o",
        ])
        .unwrap();
        let Command::Train(t) = cli.command else { panic!() };
        assert!(matches!(t.resolved_loss(), LossKind::Focal(c) if c.gamma == 2.0));
    }

    #[test]
    fn regression_defaults_to_mse() {
        let cli = Cli::try_parse_from([
            "molegraph", "train", "--data", "x.csv", "--tasks", "y", "--task-kind", "regression", "--out-dir", "o",
        ])
        .unwrap();
        let Command::Train(t) = cli.command else { panic!() };
        assert_eq!(t.resolved_loss(), LossKind::Mse);
    }

    #[test]
    fn predict_needs_input() {
        assert!(Cli::try_parse_from(["molegraph", "predict", "--checkpoint", "m"]).is_err());
    }

    #[test]
    fn help_and_bad_flags() {
        assert_eq!(run(["molegraph", "--help"]), EXIT_OK);
        assert_eq!(run(["molegraph", "train", "--help"]), EXIT_OK);
        assert_eq!(run(["molegraph", "split", "--bogus"]), EXIT_INPUT);
    }

    #[test]
    fn manifest_round_trip() {
        let m = RunManifest {
            command: "split".into(),
            code_version: "0.1.0".into(),
            seed: 3,
            args: vec!["split".into(), "--seed".into(), "3".into()],
            dataset: Some(DatasetInfo {
                path: "d.csv".into(),
                sha256: "ab".into(),
                rows_kept: 10,
                rows_dropped: 1,
            }),
            split: Some(SplitInfo {
                method: "scaffold".into(),
                fractions: [0.8, 0.1, 0.1],
                seed: 3,
                sizes: [8, 1, 1],
                scaffold_groups: Some(4),
                fallback: false,
            }),
            train: None,
        };
        assert_eq!(RunManifest::from_toml(&m.to_toml()).unwrap(), m);
    }

    #[test]
    fn manifest_path() {
        assert_eq!(manifest_path_for(Path::new("a/b.csv")), Path::new("a/b.csv.manifest.toml"));
    }
}
