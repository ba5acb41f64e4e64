//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria that need the Tox21 CSV read it from `MOLEGRAPH_TOX21_CSV` or
//! `data/tox21.csv` at the workspace root. Without the file they are reported
//! as FAIL with the reason, and do not abort the run; every other failure does.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use molegraph::chem::MolGraph;
use molegraph::cli::{cmd_train, TrainArgs, TrainOutcome};
use molegraph::data::{load_csv, scaffold_key, split, Dataset, SplitMethod, SplitSpec, TaskKind};
use molegraph::diff::{ParamStore, Tape};
use molegraph::graph::{build_batch, init_super_nodes};
use molegraph::layers::{graph_pool, Mode, SuperNodeConvParams};
use molegraph::losses::{cross_entropy, focal_loss, FocalLossConfig, LossKind, TaskLabels};
use molegraph::metrics::{roc_auc, EvalReport};
use molegraph::model::{build_model, ModelConfig};
use molegraph::synth::{fixture_csv, imbalanced_fixture, random_graph};
use molegraph::{featurize, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

mod common;
use common::*;

const TOX21_TASKS: [&str; 12] = [
    "NR-AR",
    "NR-AR-LBD",
    "NR-AhR",
    "NR-Aromatase",
    "NR-ER",
    "NR-ER-LBD",
    "NR-PPAR-gamma",
    "SR-ARE",
    "SR-ATAD5",
    "SR-HSE",
    "SR-MMP",
    "SR-p53",
];

enum Verdict {
    Pass(String),
    Fail(String),
    /// Fails because a dataset is missing; reported but not fatal.
    Unavailable(String),
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Pass(d) => write!(f, "PASS  {d}"),
            Verdict::Fail(d) => write!(f, "FAIL  {d}"),
            Verdict::Unavailable(d) => write!(f, "FAIL  {d}"),
        }
    }
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

type Outcome = Result<Verdict, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn freesolv() -> PathBuf {
    workspace().join("data/freesolv.csv")
}

fn tox21() -> Option<PathBuf> {
    std::env::var_os("MOLEGRAPH_TOX21_CSV")
        .map(PathBuf::from)
        .or_else(|| Some(workspace().join("data/tox21.csv")))
        .filter(|p| p.is_file())
}

const TOX21_MISSING: &str = "Tox21 dataset unavailable (set MOLEGRAPH_TOX21_CSV or add data/tox21.csv)";

struct Run<'a> {
    data: &'a Path,
    tasks: Vec<String>,
    kind: TaskKind,
    split: SplitMethod,
    loss: Option<LossKind>,
    epochs: usize,
    patience: usize,
    batch_size: usize,
    seed: u64,
}

impl Run<'_> {
    fn freesolv(data: &Path, split: SplitMethod) -> Run<'_> {
        Run {
            data,
            tasks: vec!["expt".into()],
            kind: TaskKind::Regression,
            split,
            loss: None,
            epochs: 200,
            patience: 30,
            batch_size: 32,
            seed: 0,
        }
    }

    fn train(&self, out: &Path) -> Result<(TrainOutcome, Duration), String> {
        let args = TrainArgs {
            data: self.data.to_path_buf(),
            smiles_col: "smiles".into(),
            tasks: self.tasks.clone(),
            task_kind: self.kind,
            split: self.split,
            loss: self.loss,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: 1e-3,
            patience: self.patience,
            seed: self.seed,
            out_dir: out.to_path_buf(),
        };
        let start = Instant::now();
        let outcome = cmd_train(&args).map_err(|e| e.to_string())?;
        Ok((outcome, start.elapsed()))
    }
}

fn test_report(o: &TrainOutcome) -> &EvalReport {
    o.reports.iter().find(|r| r.split == "test").expect("test report")
}

fn metric(r: &EvalReport, name: &str) -> Result<f64, String> {
    r.mean(name).ok_or_else(|| format!("no {name} on {}", r.split))
}

// 1 -------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_molegraph"))
        .arg("gradcheck")
        .current_dir(dir.path())
        .output()
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let text = String::from_utf8_lossy(&out.stdout);
    let summary = text.lines().last().unwrap_or("").to_string();
    Ok(verdict(
        out.status.success() && elapsed < Duration::from_secs(60),
        format!("exit {:?}, {summary}, {:.1}s", out.status.code(), elapsed.as_secs_f64()),
    ))
}

// 2 -------------------------------------------------------------------------

fn mechanism_invariants() -> Outcome {
    let mut failures: Vec<String> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    for _ in 0..50 {
        // super-node updates never touch node features (bit-exact)
        let mut store = ParamStore::new();
        let gc = conv_params(&mut rng, WIDTH_IN, WIDTH_OUT, "gc", &mut store);
        let sup = SuperNodeConvParams::register(&mut store, "s", 3, WIDTH_IN, 3, &mut rng).map_err(|e| e.to_string())?;
        let graphs: Vec<MolGraph> = (0..3).map(|_| random_graph(&mut rng, 1, 9)).collect();
        let feats: Vec<Matrix> = graphs.iter().map(|g| random_matrix(&mut rng, g.atom_count(), WIDTH_IN)).collect();
        let (batch, x) = build_batch(&graphs.iter().collect::<Vec<_>>(), &feats.iter().collect::<Vec<_>>())
            .map_err(|e| e.to_string())?;
        let plain = conv(&store, &gc, &batch, &x);
        for s_init in [init_super_nodes(&batch, 3), random_matrix(&mut rng, 3, 3).scale(1e6)] {
            let mut t = Tape::new();
            let h = t.leaf(x.clone());
            let s = t.leaf(s_init);
            let _ = sup.forward(&mut t, &store, &batch, h, s).map_err(|e| e.to_string())?;
            let out = gc.forward(&mut t, &store, &batch, h).map_err(|e| e.to_string())?;
            if t.value(h) != &x || t.value(out) != &plain {
                failures.push("super node altered node features".into());
            }
        }

        // convolution is equivariant under atom relabelling
        let g = random_graph(&mut rng, 2, 10);
        let xg = random_matrix(&mut rng, g.atom_count(), WIDTH_IN);
        let perm = permutation(&mut rng, g.atom_count());
        let gp = g.permuted(&perm).map_err(|e| e.to_string())?;
        let xp = permute_rows(&xg, &perm);
        let base = conv(&store, &gc, &batch_of(std::slice::from_ref(&g), std::slice::from_ref(&xg)), &xg);
        let moved = conv(&store, &gc, &batch_of(std::slice::from_ref(&gp), std::slice::from_ref(&xp)), &xp);
        if !close(&permute_rows(&base, &perm), &moved, 1e-9) {
            failures.push("convolution not permutation-equivariant".into());
        }

        // pooling: size-preserving, extensive, and blind to super-node values
        let mut t = Tape::new();
        let h = t.leaf(x.clone());
        let p = graph_pool(&mut t, &batch, h).map_err(|e| e.to_string())?;
        let pooled = t.value(p).clone();
        let extensive = pooled.shape() == x.shape() && pooled.data().iter().zip(x.data()).all(|(a, b)| a >= b);
        let own_graph = (0..batch.node_count())
            .all(|v| batch.neighbors(v).iter().all(|&u| u < batch.node_count() && batch.node_owner()[u] == batch.node_owner()[v]));
        if !extensive || !own_graph {
            failures.push("graph pool is not extensive over genuine atoms".into());
        }
    }

    // the readout does not depend on atom order
    let model = build_model(ModelConfig::new(2, TaskKind::Classification, 5)).map_err(|e| e.to_string())?;
    for _ in 0..20 {
        let graphs: Vec<MolGraph> = (0..3).map(|_| random_graph(&mut rng, 2, 9)).collect();
        let shuffled: Vec<MolGraph> = graphs
            .iter()
            .map(|g| g.permuted(&permutation(&mut rng, g.atom_count())).expect("permutation"))
            .collect();
        for mode in [Mode::Train, Mode::Eval] {
            let run = |gs: &[MolGraph]| {
                let f: Vec<Matrix> = gs.iter().map(featurize).collect();
                let (b, x) = build_batch(&gs.iter().collect::<Vec<_>>(), &f.iter().collect::<Vec<_>>()).expect("batch");
                model.forward(&b, &x, mode).expect("forward")
            };
            if !close(&run(&graphs), &run(&shuffled), 1e-9) {
                failures.push(format!("readout depends on atom order ({mode:?})"));
            }
        }
    }

    // losses: focal(0) = CE, focal <= CE, masked entries carry no gradient
    let mut worst_ce = 0.0f64;
    for _ in 0..200 {
        let n = rng.gen_range(1..20);
        let z = random_matrix(&mut rng, 1, n).scale(15.0);
        let y = Matrix::from_vec(1, n, (0..n).map(|_| rng.gen_range(0..2) as f64).collect());
        let mut mask: Vec<f64> = (0..n).map(|_| rng.gen_range(0..2) as f64).collect();
        mask[0] = 1.0;
        let labels = TaskLabels::new(y, Matrix::from_vec(1, n, mask.clone())).map_err(|e| e.to_string())?;
        let eval = |gamma: Option<f64>| -> Result<(f64, Matrix), String> {
            let mut t = Tape::new();
            let v = t.leaf(z.clone());
            let l = match gamma {
                None => cross_entropy(&mut t, v, &labels),
                Some(g) => focal_loss(&mut t, v, &labels, FocalLossConfig { gamma: g }),
            }
            .map_err(|e| e.to_string())?;
            let g = t.backward(l).map_err(|e| e.to_string())?;
            Ok((t.value(l).item(), g.wrt(v).expect("grad").clone()))
        };
        let (ce, ce_grad) = eval(None)?;
        let (f0, _) = eval(Some(0.0))?;
        let (f2, f2_grad) = eval(Some(2.0))?;
        worst_ce = worst_ce.max((f0 - ce).abs());
        if (f0 - ce).abs() > 1e-12 {
            failures.push(format!("focal(0) differs from CE by {:e}", (f0 - ce).abs()));
        }
        if f2 > ce * (1.0 + 1e-12) {
            failures.push("focal loss above CE".into());
        }
        for (i, &m) in mask.iter().enumerate() {
            if m == 0.0 && (ce_grad.data()[i] != 0.0 || f2_grad.data()[i] != 0.0) {
                failures.push("masked label has a gradient".into());
            }
        }
    }

    failures.dedup();
    Ok(if failures.is_empty() {
        Verdict::Pass(format!(
            "non-interference bit-exact, equivariance and readout invariance <= 1e-9, pool extensive, |focal(0) - CE| max {worst_ce:.1e}, masked gradients 0"
        ))
    } else {
        Verdict::Fail(failures.join("; "))
    })
}

// 3 -------------------------------------------------------------------------

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut twice = 0u64;
    let (mut pos, mut neg) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            neg += 1;
            continue;
        }
        pos += 1;
        for (j, &lj) in labels.iter().enumerate() {
            if !lj {
                twice += match scores[i].partial_cmp(&scores[j]).expect("finite") {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    twice as f64 / (2 * pos * neg) as f64
}

fn oracle_equivalences() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let gc = conv_params(&mut rng, WIDTH_IN, WIDTH_OUT, "gc", &mut store);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let g = random_graph(&mut rng, 2, 12);
        let x = random_matrix(&mut rng, g.atom_count(), WIDTH_IN);
        let got = conv(&store, &gc, &batch_of(std::slice::from_ref(&g), std::slice::from_ref(&x)), &x);
        worst = worst.max(got.max_abs_diff(&dense_conv(&store, &gc, &g, &x)));
    }

    let mut auc_mismatch = 0;
    let mut cases = 0;
    for n in [2usize, 3, 10, 57, 250, 999, 1000] {
        for round in 0..4 {
            // coarse scores force ties in half of the rounds
            let levels = if round % 2 == 0 { 7 } else { 1_000_000 };
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
            labels[0] = true;
            labels[n - 1] = false;
            cases += 1;
            if roc_auc(&scores, &labels).map_err(|e| e.to_string())? != pairwise_auc(&scores, &labels) {
                auc_mismatch += 1;
            }
        }
    }
    Ok(verdict(
        worst <= 1e-12 && auc_mismatch == 0,
        format!("dense-adjacency max |diff| {worst:.1e} over 100 graphs; AUC exact in {}/{cases} cases up to n=1000", cases - auc_mismatch),
    ))
}

// 4 -------------------------------------------------------------------------

fn freesolv_reproduction() -> Outcome {
    let data = freesolv();
    let (ds, report) = load_csv(&data, "smiles", &["expt".to_string()], TaskKind::Regression).map_err(|e| e.to_string())?;
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let (run, took) = Run::freesolv(&data, SplitMethod::Index).train(dir.path())?;
    let test = test_report(&run);
    let (rmse, mae, r2) = (metric(test, "rmse")?, metric(test, "mae")?, metric(test, "r2")?);
    let ok = report.dropped == 0 && ds.len() == 642 && rmse <= 1.5 && r2 >= 0.85 && took <= Duration::from_secs(600);
    Ok(verdict(
        ok,
        format!(
            "{} compounds loaded, {} dropped; index split test RMSE {rmse:.3} MAE {mae:.3} R2 {r2:.3} in {:.0}s",
            ds.len(),
            report.dropped,
            took.as_secs_f64()
        ),
    ))
}

// 5 -------------------------------------------------------------------------

fn tox21_run(data: &Path, split: SplitMethod, tasks: Vec<String>, loss: Option<LossKind>, out: &Path) -> Result<(TrainOutcome, Duration), String> {
    Run {
        data,
        tasks,
        kind: TaskKind::Classification,
        split,
        loss,
        epochs: 40,
        patience: 8,
        batch_size: 64,
        seed: 0,
    }
    .train(out)
}

fn tox21_tasks() -> Vec<String> {
    TOX21_TASKS.iter().map(|s| s.to_string()).collect()
}

fn tox21_reproduction() -> Outcome {
    let Some(data) = tox21() else {
        return Ok(Verdict::Unavailable(TOX21_MISSING.into()));
    };
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let (run, took) = tox21_run(&data, SplitMethod::Random, tox21_tasks(), None, dir.path())?;
    let test = test_report(&run);
    let mean = metric(test, "auc")?;
    let weak: Vec<&str> = test
        .tasks
        .iter()
        .filter(|t| t.excluded.is_none() && t.metric("auc").is_none_or(|a| a <= 0.5))
        .map(|t| t.task.as_str())
        .collect();
    Ok(verdict(
        mean >= 0.75 && weak.is_empty() && took <= Duration::from_secs(1800),
        format!("random split mean test AUC {mean:.3}, tasks at or below 0.5: {weak:?}, {:.0}s", took.as_secs_f64()),
    ))
}

// 6 -------------------------------------------------------------------------

fn focal_vs_ce(data: &Path, tasks: Vec<String>, dir: &Path, tox: bool) -> Result<(f64, f64), String> {
    let mut aucs = Vec::new();
    for (name, loss) in [("ce", LossKind::CrossEntropy), ("focal", LossKind::Focal(FocalLossConfig { gamma: 2.0 }))] {
        let out = dir.join(name);
        let (run, _) = if tox {
            tox21_run(data, SplitMethod::Random, tasks.clone(), Some(loss), &out)?
        } else {
            Run {
                data,
                tasks: tasks.clone(),
                kind: TaskKind::Classification,
                split: SplitMethod::Random,
                loss: Some(loss),
                epochs: 60,
                patience: 15,
                batch_size: 32,
                seed: 0,
            }
            .train(&out)?
        };
        aucs.push(metric(test_report(&run), "auc")?);
    }
    Ok((aucs[0], aucs[1]))
}

fn focal_direction() -> Outcome {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let csv = dir.path().join("imbalanced.csv");
    let rows = imbalanced_fixture(2000, 0.05, 17);
    let positives = rows.iter().filter(|r| r.1 == 1.0).count();
    fs::write(&csv, fixture_csv(&rows, "active")).map_err(|e| e.to_string())?;
    let (ce, focal) = focal_vs_ce(&csv, vec!["active".into()], dir.path(), false)?;
    let synthetic_ok = focal >= ce - 0.02;
    let synthetic = format!(
        "synthetic ({positives}/2000 positive): focal {focal:.3} vs CE {ce:.3} [{}]",
        if synthetic_ok { "ok" } else { "worse" }
    );

    let Some(data) = tox21() else {
        return Ok(if synthetic_ok {
            Verdict::Unavailable(format!("{synthetic}; Tox21 half: {TOX21_MISSING}"))
        } else {
            Verdict::Fail(format!("{synthetic}; Tox21 half: {TOX21_MISSING}"))
        });
    };
    let (ds, _) = load_csv(&data, "smiles", &tox21_tasks(), TaskKind::Classification).map_err(|e| e.to_string())?;
    let task = rarest_task(&ds);
    let (tce, tfocal) = focal_vs_ce(&data, vec![task.clone()], &dir.path().join("tox"), true)?;
    let tox_ok = tfocal >= tce - 0.02;
    Ok(verdict(
        synthetic_ok && tox_ok,
        format!("{synthetic}; Tox21 {task}: focal {tfocal:.3} vs CE {tce:.3}"),
    ))
}

/// Task with the lowest positive rate among labelled entries.
fn rarest_task(ds: &Dataset) -> String {
    let mut best = (f64::INFINITY, String::new());
    for (t, name) in ds.tasks().iter().enumerate() {
        let labels: Vec<f64> = ds.records().iter().filter_map(|r| r.labels[t]).collect();
        let rate = labels.iter().sum::<f64>() / labels.len().max(1) as f64;
        if rate < best.0 {
            best = (rate, name.clone());
        }
    }
    best.1
}

// 7 -------------------------------------------------------------------------

/// Scaffold keys that occur in more than one subset.
fn leaking_scaffolds(ds: &Dataset, method: SplitMethod) -> Result<usize, String> {
    let s = split(ds, &SplitSpec::new(method, 0)).map_err(|e| e.to_string())?;
    let assignment = s.assignment(ds.len());
    let mut seen: HashMap<String, &str> = HashMap::new();
    let mut leaks = std::collections::HashSet::new();
    for (r, subset) in ds.records().iter().zip(assignment) {
        let key = scaffold_key(&r.graph);
        match seen.get(&key) {
            Some(&other) if other != subset => {
                leaks.insert(key);
            }
            Some(_) => {}
            None => {
                seen.insert(key, subset);
            }
        }
    }
    Ok(leaks.len())
}

fn scaffold_integrity() -> Outcome {
    let data = freesolv();
    let (ds, _) = load_csv(&data, "smiles", &["expt".to_string()], TaskKind::Regression).map_err(|e| e.to_string())?;
    let leaks = leaking_scaffolds(&ds, SplitMethod::Scaffold)?;
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let (random, _) = Run::freesolv(&data, SplitMethod::Random).train(&dir.path().join("random"))?;
    let (scaffold, _) = Run::freesolv(&data, SplitMethod::Scaffold).train(&dir.path().join("scaffold"))?;
    let (r_rmse, s_rmse) = (metric(test_report(&random), "rmse")?, metric(test_report(&scaffold), "rmse")?);
    let freesolv_ok = leaks == 0 && s_rmse > r_rmse;
    let freesolv_detail = format!("FreeSolv: {leaks} shared scaffolds, test RMSE scaffold {s_rmse:.3} vs random {r_rmse:.3}");

    let Some(tox) = tox21() else {
        return Ok(if freesolv_ok {
            Verdict::Unavailable(format!("{freesolv_detail}; Tox21 half: {TOX21_MISSING}"))
        } else {
            Verdict::Fail(format!("{freesolv_detail}; Tox21 half: {TOX21_MISSING}"))
        });
    };
    let (tds, _) = load_csv(&tox, "smiles", &tox21_tasks(), TaskKind::Classification).map_err(|e| e.to_string())?;
    let tleaks = leaking_scaffolds(&tds, SplitMethod::Scaffold)?;
    let (tr, _) = tox21_run(&tox, SplitMethod::Random, tox21_tasks(), None, &dir.path().join("tr"))?;
    let (ts, _) = tox21_run(&tox, SplitMethod::Scaffold, tox21_tasks(), None, &dir.path().join("ts"))?;
    let (r_auc, s_auc) = (metric(test_report(&tr), "auc")?, metric(test_report(&ts), "auc")?);
    Ok(verdict(
        freesolv_ok && tleaks == 0 && s_auc < r_auc,
        format!("{freesolv_detail}; Tox21: {tleaks} shared scaffolds, test AUC scaffold {s_auc:.3} vs random {r_auc:.3}"),
    ))
}

// 8 -------------------------------------------------------------------------

fn determinism() -> Outcome {
    let data = freesolv();
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let run = Run {
        epochs: 5,
        ..Run::freesolv(&data, SplitMethod::Random)
    };
    run.train(&dir.path().join("a"))?;
    run.train(&dir.path().join("b"))?;
    let same = |f: &str| -> Result<bool, String> {
        let a = fs::read(dir.path().join("a").join(f)).map_err(|e| e.to_string())?;
        let b = fs::read(dir.path().join("b").join(f)).map_err(|e| e.to_string())?;
        Ok(a == b)
    };
    let (ckpt, hist) = (same("model.ckpt")?, same("history.csv")?);
    Ok(verdict(ckpt && hist, format!("checkpoint identical: {ckpt}, history identical: {hist}")))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 8] = [
        ("gradient correctness", gradient_correctness),
        ("mechanism invariants", mechanism_invariants),
        ("oracle equivalences", oracle_equivalences),
        ("FreeSolv reproduction", freesolv_reproduction),
        ("Tox21 reproduction", tox21_reproduction),
        ("focal-loss direction", focal_direction),
        ("scaffold-split integrity", scaffold_integrity),
        ("determinism", determinism),
    ];
    let mut fatal = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check().unwrap_or_else(|e| Verdict::Fail(format!("error: {e}")));
        let line = format!("criterion {} {name:<26} {v}", i + 1);
        println!("{line}");
        if matches!(v, Verdict::Fail(_)) {
            fatal.push(line);
        }
    }
    assert!(fatal.is_empty(), "failed criteria:\n{}", fatal.join("\n"));
}
