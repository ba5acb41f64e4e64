//! ROC-AUC for classification, R²/RMSE/MAE for regression, and per-task
//! reports averaged over valid tasks.

use std::cmp::Ordering;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("labels need at least one positive and one negative")]
    DegenerateLabels,
    #[error("truth values are constant; R² is undefined")]
    ConstantTruth,
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite score or value")]
    NonFinite,
}

/// Mann–Whitney ROC-AUC; ties between a positive and a negative count half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let positives = labels.iter().filter(|&&l| l).count() as u128;
    let negatives = labels.len() as u128 - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::DegenerateLabels);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    // twice the Mann–Whitney count, kept integral so the result is exact
    let mut doubled: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        doubled += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(doubled as f64 / (2 * positives * negatives) as f64)
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<(), MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.len() < 2 {
        return Err(MetricError::TooFewPoints(pred.len()));
    }
    if pred.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

/// Squared Pearson correlation between predictions and truth.
pub fn pearson_r2(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check_pair(pred, truth)?;
    let n = pred.len() as f64;
    let mx = pred.iter().sum::<f64>() / n;
    let my = truth.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in pred.iter().zip(truth) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if syy == 0.0 {
        return Err(MetricError::ConstantTruth);
    }
    if sxx == 0.0 {
        return Ok(0.0);
    }
    Ok(((sxy * sxy) / (sxx * syy)).clamp(0.0, 1.0))
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check_pair(pred, truth)?;
    let sq: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sq / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check_pair(pred, truth)?;
    let abs: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(abs / pred.len() as f64)
}

/// Metrics for one task. `excluded` carries the reason when no metric could
/// be computed (for example a task with a single label class).
#[derive(Debug, Clone, PartialEq)]
pub struct TaskReport {
    pub task: String,
    pub n: usize,
    pub metrics: Vec<(&'static str, f64)>,
    pub excluded: Option<String>,
}

impl TaskReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(m, _)| *m == name).map(|&(_, v)| v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub split: String,
    pub tasks: Vec<TaskReport>,
}

impl EvalReport {
    /// Scores each task from its present (score, truth) pairs.
    ///
    /// Classification scores may be logits or probabilities; AUC only
    /// depends on their order.
    pub fn classification(split: &str, per_task: Vec<(String, Vec<f64>, Vec<bool>)>) -> Self {
        let tasks = per_task
            .into_iter()
            .map(|(task, scores, labels)| {
                let n = scores.len();
                match roc_auc(&scores, &labels) {
                    Ok(auc) => TaskReport {
                        task,
                        n,
                        metrics: vec![("auc", auc)],
                        excluded: None,
                    },
                    Err(e) => TaskReport {
                        task,
                        n,
                        metrics: Vec::new(),
                        excluded: Some(e.to_string()),
                    },
                }
            })
            .collect();
        Self {
            split: split.to_string(),
            tasks,
        }
    }

    pub fn regression(split: &str, per_task: Vec<(String, Vec<f64>, Vec<f64>)>) -> Self {
        let tasks = per_task
            .into_iter()
            .map(|(task, pred, truth)| {
                let n = pred.len();
                let mut metrics = Vec::new();
                let mut excluded = None;
                match (rmse(&pred, &truth), mae(&pred, &truth)) {
                    (Ok(r), Ok(m)) => {
                        metrics.push(("rmse", r));
                        metrics.push(("mae", m));
                        match pearson_r2(&pred, &truth) {
                            Ok(r2) => metrics.push(("r2", r2)),
                            Err(e) => excluded = Some(e.to_string()),
                        }
                    }
                    (Err(e), _) | (_, Err(e)) => excluded = Some(e.to_string()),
                }
                TaskReport {
                    task,
                    n,
                    metrics,
                    excluded,
                }
            })
            .collect();
        Self {
            split: split.to_string(),
            tasks,
        }
    }

    /// Unweighted mean of `metric` over tasks where it is defined.
    pub fn mean(&self, metric: &str) -> Option<f64> {
        let vals: Vec<f64> = self.tasks.iter().filter_map(|t| t.metric(metric)).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    fn metric_names(&self) -> Vec<&'static str> {
        let mut names: Vec<&'static str> = Vec::new();
        for t in &self.tasks {
            for (m, _) in &t.metrics {
                if !names.contains(m) {
                    names.push(m);
                }
            }
        }
        names
    }

    /// `task,metric,value,n` rows, including a `mean` pseudo-task per metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,metric,value,n\n");
        for t in &self.tasks {
            for (m, v) in &t.metrics {
                out.push_str(&format!("{},{},{},{}\n", t.task, m, v, t.n));
            }
            if t.metrics.is_empty() {
                out.push_str(&format!("{},excluded,,{}\n", t.task, t.n));
            }
        }
        for m in self.metric_names() {
            let valid = self.tasks.iter().filter(|t| t.metric(m).is_some()).count();
            if let Some(v) = self.mean(m) {
                out.push_str(&format!("mean,{m},{v},{valid}\n"));
            }
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = self.metric_names();
        let width = self.tasks.iter().map(|t| t.task.len()).max().unwrap_or(4).max(4);
        writeln!(f, "[{}]", self.split)?;
        write!(f, "{:<width$} {:>6}", "task", "n")?;
        for m in &names {
            write!(f, " {m:>8}")?;
        }
        writeln!(f)?;
        for t in &self.tasks {
            write!(f, "{:<width$} {:>6}", t.task, t.n)?;
            for m in &names {
                match t.metric(m) {
                    Some(v) => write!(f, " {v:>8.4}")?,
                    None => write!(f, " {:>8}", "-")?,
                }
            }
            if let Some(reason) = &t.excluded {
                write!(f, "  ({reason})")?;
            }
            writeln!(f)?;
        }
        write!(f, "{:<width$} {:>6}", "mean", "")?;
        for m in &names {
            match self.mean(m) {
                Some(v) => write!(f, " {v:>8.4}")?,
                None => write!(f, " {:>8}", "-")?,
            }
        }
        writeln!(f)
    }
}
