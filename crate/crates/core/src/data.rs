//! CSV ingestion, label masks, target normalization and dataset splits.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chem::{featurize, parse_raw_smiles, Atom, MolGraph};
use crate::losses::TaskLabels;
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("column '{0}' not found in header")]
    MissingColumn(String),
    #[error("no rows could be loaded")]
    EmptyDataset,
    #[error("row {row}, column '{column}': '{value}' is not a valid {kind} label")]
    InvalidLabel {
        row: usize,
        column: String,
        value: String,
        kind: TaskKind,
    },
    #[error("splitting needs at least 10 rows, got {0}")]
    TooFewRows(usize),
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    InvalidFractions((f64, f64, f64)),
    #[error("task '{0}' has zero variance in the training split")]
    ZeroVariance(String),
    #[error("task '{0}' has no labels in the training split")]
    NoTargets(String),
    #[error("target normalization applies to regression datasets only")]
    NotRegression,
    #[error("unknown {what} '{value}'")]
    UnknownOption { what: &'static str, value: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Classification,
    Regression,
}

impl FromStr for TaskKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "classification" => Ok(TaskKind::Classification),
            "regression" => Ok(TaskKind::Regression),
            _ => Err(DataError::UnknownOption {
                what: "task kind",
                value: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Classification => "classification",
            TaskKind::Regression => "regression",
        })
    }
}

/// One retained molecule.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    /// Zero-based data-row index in the source file (header excluded).
    pub source_row: usize,
    pub smiles: String,
    pub graph: MolGraph,
    pub features: Matrix,
    /// `None` marks a missing label.
    pub labels: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    tasks: Vec<String>,
    task_kind: TaskKind,
    records: Vec<Record>,
}

impl Dataset {
    pub fn new(tasks: Vec<String>, task_kind: TaskKind, records: Vec<Record>) -> Self {
        Self {
            tasks,
            task_kind,
            records,
        }
    }

    /// Builds a dataset from SMILES and labels, skipping unparseable molecules.
    pub fn from_smiles(
        tasks: Vec<String>,
        task_kind: TaskKind,
        rows: impl IntoIterator<Item = (String, Vec<Option<f64>>)>,
    ) -> Self {
        let records = rows
            .into_iter()
            .enumerate()
            .filter_map(|(i, (smiles, labels))| {
                let graph = parse_raw_smiles(&smiles).ok()?;
                Some(Record {
                    source_row: i,
                    features: featurize(&graph),
                    smiles,
                    graph,
                    labels,
                })
            })
            .collect();
        Self::new(tasks, task_kind, records)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    pub fn task_kind(&self) -> TaskKind {
        self.task_kind
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            tasks: self.tasks.clone(),
            task_kind: self.task_kind,
            records: rows.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Labels of `rows` as a `len × T` matrix pair; missing entries are 0 with mask 0.
    pub fn labels(&self, rows: &[usize]) -> TaskLabels {
        let t = self.tasks.len();
        let mut y = Matrix::zeros(rows.len(), t);
        let mut mask = Matrix::zeros(rows.len(), t);
        for (r, &i) in rows.iter().enumerate() {
            for (c, v) in self.records[i].labels.iter().enumerate() {
                if let Some(v) = v {
                    y.set(r, c, *v);
                    mask.set(r, c, 1.0);
                }
            }
        }
        TaskLabels::new(y, mask).expect("mask is binary by construction")
    }

    /// Number of present labels per task.
    pub fn label_counts(&self) -> Vec<usize> {
        (0..self.tasks.len())
            .map(|t| self.records.iter().filter(|r| r.labels[t].is_some()).count())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadReport {
    pub kept: usize,
    pub dropped: usize,
    /// `(data row, reason)` for every dropped row.
    pub rejected: Vec<(usize, String)>,
}

pub fn load_csv(
    path: &Path,
    smiles_column: &str,
    task_columns: &[String],
    task_kind: TaskKind,
) -> Result<(Dataset, LoadReport), DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file, smiles_column, task_columns, task_kind)
}

fn parse_label(cell: &str, kind: TaskKind) -> Result<Option<f64>, ()> {
    let cell = cell.trim();
    if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    match kind {
        TaskKind::Classification => match cell {
            "0" | "0.0" => Ok(Some(0.0)),
            "1" | "1.0" => Ok(Some(1.0)),
            _ => Err(()),
        },
        TaskKind::Regression => match cell.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Some(v)),
            Ok(_) => Ok(None),
            Err(_) => Err(()),
        },
    }
}

/// Like [`load_csv`] but from any reader.
pub fn read_csv(
    reader: impl Read,
    smiles_column: &str,
    task_columns: &[String],
    task_kind: TaskKind,
) -> Result<(Dataset, LoadReport), DataError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let header = rdr.headers()?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let smiles_idx = find(smiles_column)?;
    let task_idx: Vec<usize> = task_columns.iter().map(|c| find(c)).collect::<Result<_, _>>()?;

    let mut records = Vec::new();
    let mut rejected = Vec::new();
    for (row, result) in rdr.records().enumerate() {
        let rec = result?;
        let smiles = rec.get(smiles_idx).unwrap_or("").trim().to_string();
        let mut labels = Vec::with_capacity(task_idx.len());
        for (&c, name) in task_idx.iter().zip(task_columns) {
            let cell = rec.get(c).unwrap_or("");
            labels.push(parse_label(cell, task_kind).map_err(|_| DataError::InvalidLabel {
                row,
                column: name.clone(),
                value: cell.to_string(),
                kind: task_kind,
            })?);
        }
        match parse_raw_smiles(&smiles) {
            Ok(graph) => records.push(Record {
                source_row: row,
                features: featurize(&graph),
                smiles,
                graph,
                labels,
            }),
            Err(e) => {
                warn!("dropping row {row} ('{smiles}'): {e}");
                rejected.push((row, e.to_string()));
            }
        }
    }
    if records.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let report = LoadReport {
        kept: records.len(),
        dropped: rejected.len(),
        rejected,
    };
    info!("loaded {} rows, dropped {}", report.kept, report.dropped);
    Ok((Dataset::new(task_columns.to_vec(), task_kind, records), report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMethod {
    Index,
    Random,
    Scaffold,
}

impl FromStr for SplitMethod {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "index" => Ok(SplitMethod::Index),
            "random" => Ok(SplitMethod::Random),
            "scaffold" => Ok(SplitMethod::Scaffold),
            _ => Err(DataError::UnknownOption {
                what: "split method",
                value: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for SplitMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMethod::Index => "index",
            SplitMethod::Random => "random",
            SplitMethod::Scaffold => "scaffold",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub method: SplitMethod,
    pub fractions: (f64, f64, f64),
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(method: SplitMethod, seed: u64) -> Self {
        Self {
            method,
            fractions: (0.8, 0.1, 0.1),
            seed,
        }
    }
}

/// Row indices (into the dataset) of each subset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    /// Set when a scaffold group had to be broken up to fill an empty subset.
    pub fallback: bool,
    /// Number of distinct scaffold keys, for scaffold splits.
    pub scaffold_groups: Option<usize>,
}

impl Split {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.valid.len(), self.test.len())
    }

    /// Subset name of every dataset row.
    pub fn assignment(&self, len: usize) -> Vec<&'static str> {
        let mut out = vec![""; len];
        for (name, rows) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            for &r in rows {
                out[r] = name;
            }
        }
        out
    }
}

fn check_fractions(f: (f64, f64, f64)) -> Result<(), DataError> {
    let ok = f.0 > 0.0 && f.1 > 0.0 && f.2 > 0.0 && (f.0 + f.1 + f.2 - 1.0).abs() <= 1e-9;
    if ok {
        Ok(())
    } else {
        Err(DataError::InvalidFractions(f))
    }
}

/// `(train, valid, test)` sizes: valid and test are floored, train takes the rest.
fn slice_sizes(n: usize, f: (f64, f64, f64)) -> (usize, usize, usize) {
    let valid = (n as f64 * f.1).floor() as usize;
    let test = (n as f64 * f.2).floor() as usize;
    (n - valid - test, valid, test)
}

fn slices(order: Vec<usize>, f: (f64, f64, f64)) -> Split {
    let (tr, va, _) = slice_sizes(order.len(), f);
    Split {
        train: order[..tr].to_vec(),
        valid: order[tr..tr + va].to_vec(),
        test: order[tr + va..].to_vec(),
        fallback: false,
        scaffold_groups: None,
    }
}

pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<Split, DataError> {
    check_fractions(spec.fractions)?;
    let n = dataset.len();
    if n < 10 {
        return Err(DataError::TooFewRows(n));
    }
    match spec.method {
        SplitMethod::Index => Ok(slices((0..n).collect(), spec.fractions)),
        SplitMethod::Random => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
            Ok(slices(order, spec.fractions))
        }
        SplitMethod::Scaffold => Ok(scaffold_split(dataset, spec.fractions)),
    }
}

fn scaffold_split(dataset: &Dataset, f: (f64, f64, f64)) -> Split {
    let n = dataset.len();
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in dataset.records().iter().enumerate() {
        groups.entry(scaffold_key(&r.graph)).or_default().push(i);
    }
    let group_count = groups.len();
    // BTreeMap iteration is key-ordered, and the sort is stable
    let mut ordered: Vec<Vec<usize>> = groups.into_values().collect();
    ordered.sort_by_key(|g| std::cmp::Reverse(g.len()));

    let train_cut = f.0 * n as f64;
    let valid_cut = (f.0 + f.1) * n as f64;
    let mut subsets: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for group in &ordered {
        let (tr, va) = (subsets[0].len(), subsets[1].len());
        let target = if (tr + group.len()) as f64 > train_cut {
            if (tr + va + group.len()) as f64 > valid_cut {
                2
            } else {
                1
            }
        } else {
            0
        };
        subsets[target].extend_from_slice(group);
    }

    let mut fallback = false;
    let fractions = [f.0, f.1, f.2];
    for empty in 0..3 {
        if !subsets[empty].is_empty() {
            continue;
        }
        fallback = true;
        let want = ((fractions[empty] * n as f64).floor() as usize).max(1);
        // break up the largest group that still has two rows in one subset
        'groups: for group in &ordered {
            for donor in (0..3).filter(|&d| d != empty) {
                let members: Vec<usize> =
                    group.iter().copied().filter(|r| subsets[donor].contains(r)).collect();
                if members.len() < 2 || subsets[donor].len() < 2 {
                    continue;
                }
                let take = want.min(members.len() - 1).min(subsets[donor].len() - 1);
                let moved = &members[members.len() - take..];
                subsets[donor].retain(|r| !moved.contains(r));
                subsets[empty].extend_from_slice(moved);
                warn!(
                    "scaffold split left the {} subset empty; moved {take} rows of one scaffold group there",
                    ["train", "valid", "test"][empty]
                );
                break 'groups;
            }
        }
    }
    for s in &mut subsets {
        s.sort_unstable();
    }
    let [train, valid, test] = subsets;
    Split {
        train,
        valid,
        test,
        fallback,
        scaffold_groups: Some(group_count),
    }
}

/// Ring-and-linker core of a molecule as a relabeling-invariant key.
///
/// Atoms of degree at most one are removed until none remain; what is left
/// is hashed with three rounds of Weisfeiler-Leman refinement. Acyclic
/// molecules prune away completely and map to `"ACYCLIC"`.
pub fn scaffold_key(g: &MolGraph) -> String {
    let n = g.atom_count();
    let mut alive = vec![true; n];
    let mut degree: Vec<usize> = g.degrees();
    let mut stack: Vec<usize> = (0..n).filter(|&i| degree[i] <= 1).collect();
    while let Some(i) = stack.pop() {
        if !alive[i] {
            continue;
        }
        alive[i] = false;
        for &j in g.neighbors(i) {
            if alive[j] {
                degree[j] -= 1;
                if degree[j] <= 1 {
                    stack.push(j);
                }
            }
        }
    }
    let kept: Vec<usize> = (0..n).filter(|&i| alive[i]).collect();
    if kept.is_empty() {
        return "ACYCLIC".to_string();
    }
    let atoms: Vec<Atom> = kept.iter().map(|&i| g.atoms()[i]).collect();
    let neighbors: Vec<Vec<usize>> = kept
        .iter()
        .map(|&i| {
            g.neighbors(i)
                .iter()
                .filter_map(|j| kept.binary_search(j).ok())
                .collect()
        })
        .collect();
    wl_hash(&atoms, &neighbors, 3)
}

fn digest(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

/// Weisfeiler-Leman hash over (element, aromatic) initial colors.
pub fn wl_hash(atoms: &[Atom], neighbors: &[Vec<usize>], rounds: usize) -> String {
    let mut colors: Vec<[u8; 32]> = atoms
        .iter()
        .map(|a| digest(&[a.element.symbol().as_bytes(), &[a.aromatic as u8]]))
        .collect();
    for _ in 0..rounds {
        colors = neighbors
            .iter()
            .enumerate()
            .map(|(i, nb)| {
                let mut around: Vec<[u8; 32]> = nb.iter().map(|&j| colors[j]).collect();
                around.sort_unstable();
                let mut parts: Vec<&[u8]> = vec![&colors[i]];
                parts.extend(around.iter().map(|c| c.as_slice()));
                digest(&parts)
            })
            .collect();
    }
    colors.sort_unstable();
    let parts: Vec<&[u8]> = colors.iter().map(|c| c.as_slice()).collect();
    digest(&parts)[..16].iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-task mean and population standard deviation of the training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl TargetStats {
    pub fn fit(train: &Dataset) -> Result<Self, DataError> {
        if train.task_kind() != TaskKind::Regression {
            return Err(DataError::NotRegression);
        }
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for (t, name) in train.tasks().iter().enumerate() {
            let vals: Vec<f64> = train.records().iter().filter_map(|r| r.labels[t]).collect();
            if vals.is_empty() {
                return Err(DataError::NoTargets(name.clone()));
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            if !(var > 0.0) {
                return Err(DataError::ZeroVariance(name.clone()));
            }
            mean.push(m);
            std.push(var.sqrt());
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, task: usize, v: f64) -> f64 {
        (v - self.mean[task]) / self.std[task]
    }

    pub fn denormalize(&self, task: usize, v: f64) -> f64 {
        v * self.std[task] + self.mean[task]
    }

    pub fn apply(&self, dataset: &Dataset) -> Dataset {
        let mut out = dataset.clone();
        for r in &mut out.records {
            for (t, v) in r.labels.iter_mut().enumerate() {
                if let Some(v) = v {
                    *v = self.normalize(t, *v);
                }
            }
        }
        out
    }
}

/// Fits statistics on `train` and returns them with normalized copies of
/// `train` and each of `others`.
pub fn normalize_targets(
    train: &Dataset,
    others: &[&Dataset],
) -> Result<(TargetStats, Dataset, Vec<Dataset>), DataError> {
    let stats = TargetStats::fit(train)?;
    let train_n = stats.apply(train);
    let others_n = others.iter().map(|d| stats.apply(d)).collect();
    Ok((stats, train_n, others_n))
}

/// Writes `row_index,smiles,subset` for every row, in dataset order.
/// `row_index` is the data-row index in the source file.
pub fn write_split_manifest(out: impl Write, dataset: &Dataset, split: &Split) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row_index", "smiles", "subset"])?;
    let names = split.assignment(dataset.len());
    for (r, name) in dataset.records().iter().zip(names) {
        w.write_record([r.source_row.to_string().as_str(), r.smiles.as_str(), name])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
