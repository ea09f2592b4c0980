//! Experiment orchestration: pilot input ablation, DAL against the baseline,
//! single-aspect ablations and the α/β sensitivity grid.
//!
//! Training and hyperparameter selection only ever see a copy of the benchmark
//! whose test splits are empty. The test splits live in a [`TestVault`] that
//! opens once a selection has been committed, and every access is appended
//! to the audit log.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{config_hash, Benchmark, GeneratorConfig, NewsInstance, Setting, SplitName};
use crate::error::{DalError, Result};
use crate::metrics::{aggregate, Scores};
use crate::model::InputMode;
use crate::trainer::{evaluate, train, train_supervised, Alternation, Checkpoint, TrainConfig};

pub const DEFAULT_GRID: [f64; 4] = [0.001, 0.01, 0.1, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    DalNews,
    DalEnv,
    Dal,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::DalNews => "dal_news",
            Method::DalEnv => "dal_env",
            Method::Dal => "dal",
        }
    }

    /// Candidate (α, β) pairs in grid order. The baseline has none to tune.
    pub fn candidates(self, grid: &[f64]) -> Vec<Option<(f64, f64)>> {
        match self {
            Method::Baseline => vec![None],
            Method::DalNews => grid.iter().map(|&a| Some((a, 0.0))).collect(),
            Method::DalEnv => grid.iter().map(|&b| Some((0.0, b))).collect(),
            Method::Dal => grid.iter().flat_map(|&a| grid.iter().map(move |&b| Some((a, b)))).collect(),
        }
    }
}

/// Training protocol used by every experiment. Per-batch alternation with a
/// few discriminator steps keeps the adversaries ahead of the encoder.
pub fn protocol_config() -> TrainConfig {
    TrainConfig {
        lr: 5e-3,
        max_epochs: 30,
        patience: 10,
        alternation: Alternation::PerBatch,
        disc_steps: 3,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub generator: GeneratorConfig,
    pub setting: Setting,
    /// Base training config. α, β, seed and input mode are overwritten per run.
    pub train: TrainConfig,
    pub input_mode: InputMode,
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub out_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn new(name: impl Into<String>, setting: Setting, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            name: name.into(),
            generator: GeneratorConfig::default(),
            setting,
            train: protocol_config(),
            input_mode: InputMode::Both,
            grid: DEFAULT_GRID.to_vec(),
            seeds: (0..5).collect(),
            workers: 1,
            out_dir: out_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        if self.grid.is_empty() || self.grid.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(DalError::Config(format!("grid values must be positive and finite, got {:?}", self.grid)));
        }
        if self.seeds.is_empty() {
            return Err(DalError::Config("at least one seed is required".into()));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(DalError::Config(format!("seeds must be distinct, got {:?}", self.seeds)));
        }
        if self.workers < 1 {
            return Err(DalError::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn benchmark_hash(&self) -> String {
        config_hash(&self.generator, self.setting)
    }

    /// Hash of everything that determines the report besides the worker count.
    pub fn config_hash(&self) -> String {
        let mut s = self.clone();
        s.workers = 1;
        s.out_dir = PathBuf::new();
        let json = serde_json::to_string(&s).expect("spec serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub input_mode: InputMode,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub seed: u64,
    pub split: SplitName,
    pub f1_macro: f64,
    pub f1_micro: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub method: Method,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub mean_valid_f1_macro: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub input_mode: InputMode,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub split: SplitName,
    pub n: usize,
    pub mean_f1_macro: f64,
    pub std_f1_macro: f64,
    pub mean_f1_micro: f64,
    pub std_f1_micro: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Test-split F1-Macro over the α × β grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub split: SplitName,
    /// `per_seed[s][i][j]` for seed index `s`, alpha `i`, beta `j`.
    pub per_seed: Vec<Vec<Vec<f64>>>,
    pub mean: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub experiment: String,
    pub kind: String,
    pub setting: Setting,
    pub benchmark_hash: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub records: Vec<RunRecord>,
    pub selections: Vec<Selection>,
    pub aggregates: Vec<Aggregate>,
    pub checks: Vec<SoftCheck>,
    pub sensitivity: Option<SensitivityGrid>,
    pub audit: Vec<String>,
}

impl RunReport {
    pub fn aggregate(&self, method: Method, mode: InputMode, split: SplitName) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && a.input_mode == mode && a.split == split)
    }

    pub fn selection(&self, method: Method) -> Option<&Selection> {
        self.selections.iter().find(|s| s.method == method)
    }
}

/// Append-only record of what was trained, selected and tested, in order.
#[derive(Debug, Default)]
struct Audit {
    lines: Vec<String>,
}

impl Audit {
    fn push(&mut self, event: &str, detail: String) {
        let n = self.lines.len();
        self.lines.push(format!("{n:05} {event} {detail}"));
    }
}

/// Holds the test splits until a selection is committed.
struct TestVault {
    test_id: Vec<NewsInstance>,
    test_ood: Vec<NewsInstance>,
    committed: bool,
}

impl TestVault {
    fn split(bench: &Benchmark) -> (Benchmark, TestVault) {
        let dev = Benchmark {
            test_id: Vec::new(),
            test_ood: Vec::new(),
            ..bench.clone()
        };
        let vault = TestVault {
            test_id: bench.test_id.clone(),
            test_ood: bench.test_ood.clone(),
            committed: false,
        };
        (dev, vault)
    }

    fn commit(&mut self, audit: &mut Audit, what: &str) {
        audit.push("commit", what.to_string());
        self.committed = true;
    }

    fn evaluate(&self, audit: &mut Audit, run: &Trained, split: SplitName) -> Result<Scores> {
        if !self.committed {
            return Err(DalError::Contract("test split read before selection was committed".into()));
        }
        let data = match split {
            SplitName::TestId => &self.test_id,
            SplitName::TestOod => &self.test_ood,
            other => return Err(DalError::InvalidArgument(format!("{} is not a test split", other.as_str()))),
        };
        let s = evaluate(&run.checkpoint.params, data, run.job.mode)?;
        audit.push("test", format!("{} split={} f1_macro={}", run.job, split.as_str(), s.f1_macro));
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Job {
    method: Method,
    mode: InputMode,
    ab: Option<(f64, f64)>,
    seed: u64,
}

impl std::fmt::Display for Job {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "method={} mode={} ", self.method.as_str(), self.mode)?;
        match self.ab {
            Some((a, b)) => write!(f, "alpha={a} beta={b} ")?,
            None => f.write_str("alpha=na beta=na ")?,
        }
        write!(f, "seed={}", self.seed)
    }
}

struct Trained {
    job: Job,
    checkpoint: Checkpoint,
    epochs_run: usize,
}

fn run_job(dev: &Benchmark, base: &TrainConfig, job: Job) -> Result<Trained> {
    let (alpha, beta) = job.ab.unwrap_or((0.0, 0.0));
    let cfg = TrainConfig {
        alpha,
        beta,
        seed: job.seed,
        input_mode: job.mode,
        ..base.clone()
    };
    let out = match job.method {
        Method::Baseline => train_supervised(dev, &cfg)?,
        _ => train(dev, &cfg)?,
    };
    Ok(Trained {
        job,
        epochs_run: out.history.len(),
        checkpoint: out.checkpoint,
    })
}

/// Trains every job, in parallel when `workers > 1`. Results come back in
/// job order regardless of scheduling.
fn run_jobs(spec: &ExperimentSpec, dev: &Benchmark, jobs: &[Job], audit: &mut Audit) -> Result<Vec<Trained>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| DalError::Config(format!("worker pool: {e}")))?;
    let results: Vec<Result<Trained>> =
        pool.install(|| jobs.par_iter().map(|&job| run_job(dev, &spec.train, job)).collect());
    let trained = results.into_iter().collect::<Result<Vec<_>>>()?;
    for t in &trained {
        audit.push(
            "train",
            format!(
                "{} best_epoch={} epochs_run={} valid_f1_macro={}",
                t.job, t.checkpoint.epoch, t.epochs_run, t.checkpoint.valid_f1_macro
            ),
        );
    }
    Ok(trained)
}

fn check_bench(spec: &ExperimentSpec, bench: &Benchmark) -> Result<()> {
    spec.validate()?;
    if bench.config != spec.generator || bench.setting != spec.setting {
        return Err(DalError::Config(format!(
            "benchmark {} does not match the experiment's generator config {}",
            bench.config_hash(),
            spec.benchmark_hash()
        )));
    }
    Ok(())
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

type GroupKey = (Method, InputMode, Option<u64>, Option<u64>, SplitName);

fn group_key(method: Method, mode: InputMode, alpha: Option<f64>, beta: Option<f64>, split: SplitName) -> GroupKey {
    (method, mode, alpha.map(f64::to_bits), beta.map(f64::to_bits), split)
}

/// Per-group mean and std, groups in order of first appearance.
fn aggregates(records: &[RunRecord]) -> Result<Vec<Aggregate>> {
    let key = |r: &RunRecord| group_key(r.method, r.input_mode, r.alpha, r.beta, r.split);
    let mut out: Vec<Aggregate> = Vec::new();
    for r in records {
        if out.iter().any(|a| group_key(a.method, a.input_mode, a.alpha, a.beta, a.split) == key(r)) {
            continue;
        }
        let group: Vec<&RunRecord> = records.iter().filter(|x| key(x) == key(r)).collect();
        let (mean_f1_macro, std_f1_macro) = aggregate(&group.iter().map(|x| x.f1_macro).collect::<Vec<_>>())?;
        let (mean_f1_micro, std_f1_micro) = aggregate(&group.iter().map(|x| x.f1_micro).collect::<Vec<_>>())?;
        out.push(Aggregate {
            method: r.method,
            input_mode: r.input_mode,
            alpha: r.alpha,
            beta: r.beta,
            split: r.split,
            n: group.len(),
            mean_f1_macro,
            std_f1_macro,
            mean_f1_micro,
            std_f1_micro,
        });
    }
    Ok(out)
}

fn record(t: &Trained, split: SplitName, s: Scores) -> RunRecord {
    RunRecord {
        method: t.job.method,
        input_mode: t.job.mode,
        alpha: t.job.ab.map(|p| p.0),
        beta: t.job.ab.map(|p| p.1),
        seed: t.job.seed,
        split,
        f1_macro: s.f1_macro,
        f1_micro: s.f1_micro,
    }
}

fn empty_report(spec: &ExperimentSpec, kind: &str) -> RunReport {
    RunReport {
        experiment: spec.name.clone(),
        kind: kind.to_string(),
        setting: spec.setting,
        benchmark_hash: spec.benchmark_hash(),
        config_hash: spec.config_hash(),
        seeds: spec.seeds.clone(),
        records: Vec::new(),
        selections: Vec::new(),
        aggregates: Vec::new(),
        checks: Vec::new(),
        sensitivity: None,
        audit: Vec::new(),
    }
}

/// Baseline under each input mode, scored on both test splits.
pub fn run_pilot(spec: &ExperimentSpec, bench: &Benchmark) -> Result<RunReport> {
    check_bench(spec, bench)?;
    let mut audit = Audit::default();
    let (dev, mut vault) = TestVault::split(bench);
    let jobs: Vec<Job> = InputMode::ALL
        .iter()
        .flat_map(|&mode| {
            spec.seeds.iter().map(move |&seed| Job {
                method: Method::Baseline,
                mode,
                ab: None,
                seed,
            })
        })
        .collect();
    let trained = run_jobs(spec, &dev, &jobs, &mut audit)?;
    vault.commit(&mut audit, "pilot has no hyperparameters to select");
    let mut report = empty_report(spec, "pilot");
    for t in &trained {
        report.records.push(record(t, SplitName::Valid, score_valid(&dev, t)?));
        for split in [SplitName::TestId, SplitName::TestOod] {
            report.records.push(record(t, split, vault.evaluate(&mut audit, t, split)?));
        }
    }
    report.aggregates = aggregates(&report.records)?;
    let id = |m| report.aggregate(Method::Baseline, m, SplitName::TestId).map_or(f64::NAN, |a| a.mean_f1_macro);
    let (both, news) = (id(InputMode::Both), id(InputMode::NewsOnly));
    report.checks.push(SoftCheck {
        name: "both_ge_news_only_in_distribution".into(),
        pass: both >= news,
        detail: format!("both={both:.4} news_only={news:.4}"),
    });
    report.audit = audit.lines;
    Ok(report)
}

fn score_valid(dev: &Benchmark, t: &Trained) -> Result<Scores> {
    evaluate(&t.checkpoint.params, &dev.valid, t.job.mode)
}

/// Grid search on validation F1-Macro per method, then test evaluation of the
/// selected configuration across all seeds.
pub fn run_methods(spec: &ExperimentSpec, bench: &Benchmark, methods: &[Method], kind: &str) -> Result<RunReport> {
    check_bench(spec, bench)?;
    let mut audit = Audit::default();
    let (dev, mut vault) = TestVault::split(bench);
    let mut jobs = Vec::new();
    for &method in methods {
        for ab in method.candidates(&spec.grid) {
            for &seed in &spec.seeds {
                jobs.push(Job {
                    method,
                    mode: spec.input_mode,
                    ab,
                    seed,
                });
            }
        }
    }
    let trained = run_jobs(spec, &dev, &jobs, &mut audit)?;

    let mut report = empty_report(spec, kind);
    let mut chosen: Vec<&Trained> = Vec::new();
    for &method in methods {
        let mut best: Option<(Option<(f64, f64)>, f64)> = None;
        for ab in method.candidates(&spec.grid) {
            let m = mean(
                trained
                    .iter()
                    .filter(|t| t.job.method == method && t.job.ab == ab)
                    .map(|t| t.checkpoint.valid_f1_macro),
            );
            audit.push(
                "valid",
                format!("method={} candidate={ab:?} mean_valid_f1_macro={m}", method.as_str()),
            );
            // Strict improvement keeps the earliest grid entry on ties.
            if best.is_none_or(|(_, b)| m > b) {
                best = Some((ab, m));
            }
        }
        let (ab, m) = best.expect("at least one candidate");
        audit.push(
            "select",
            format!("method={} alpha_beta={ab:?} basis=valid mean_valid_f1_macro={m}", method.as_str()),
        );
        report.selections.push(Selection {
            method,
            alpha: ab.map(|p| p.0),
            beta: ab.map(|p| p.1),
            mean_valid_f1_macro: m,
        });
        chosen.extend(trained.iter().filter(|t| t.job.method == method && t.job.ab == ab));
    }
    vault.commit(&mut audit, "selections fixed on validation F1-Macro");

    for t in chosen {
        report.records.push(record(t, SplitName::Valid, score_valid(&dev, t)?));
        for split in [SplitName::TestId, SplitName::TestOod] {
            report.records.push(record(t, split, vault.evaluate(&mut audit, t, split)?));
        }
    }
    report.aggregates = aggregates(&report.records)?;
    report.checks = ablation_checks(&report, spec.input_mode);
    report.audit = audit.lines;
    Ok(report)
}

fn ablation_checks(report: &RunReport, mode: InputMode) -> Vec<SoftCheck> {
    let ood = |m| report.aggregate(m, mode, SplitName::TestOod).map(|a| a.mean_f1_macro);
    let mut checks = Vec::new();
    let Some(base) = ood(Method::Baseline) else {
        return checks;
    };
    for m in [Method::DalNews, Method::DalEnv, Method::Dal] {
        if let Some(v) = ood(m) {
            checks.push(SoftCheck {
                name: format!("{}_ge_baseline_ood", m.as_str()),
                pass: v >= base,
                detail: format!("{}={v:.4} baseline={base:.4}", m.as_str()),
            });
        }
    }
    if let (Some(d), Some(n), Some(e)) = (ood(Method::Dal), ood(Method::DalNews), ood(Method::DalEnv)) {
        checks.push(SoftCheck {
            name: "dal_ge_single_aspect_ood".into(),
            pass: d >= n.max(e),
            detail: format!("dal={d:.4} dal_news={n:.4} dal_env={e:.4}"),
        });
    }
    checks
}

pub fn run_main(spec: &ExperimentSpec, bench: &Benchmark) -> Result<RunReport> {
    run_methods(spec, bench, &[Method::Baseline, Method::Dal], "main")
}

pub fn run_ablation(spec: &ExperimentSpec, bench: &Benchmark) -> Result<RunReport> {
    run_methods(
        spec,
        bench,
        &[Method::Baseline, Method::DalNews, Method::DalEnv, Method::Dal],
        "ablation",
    )
}

/// Every grid cell scored on test_ood. Nothing is selected here, so the
/// vault opens straight after training.
pub fn run_sensitivity(spec: &ExperimentSpec, bench: &Benchmark) -> Result<RunReport> {
    check_bench(spec, bench)?;
    let mut audit = Audit::default();
    let (dev, mut vault) = TestVault::split(bench);
    let mut jobs = Vec::new();
    for &seed in &spec.seeds {
        for &a in &spec.grid {
            for &b in &spec.grid {
                jobs.push(Job {
                    method: Method::Dal,
                    mode: spec.input_mode,
                    ab: Some((a, b)),
                    seed,
                });
            }
        }
    }
    let trained = run_jobs(spec, &dev, &jobs, &mut audit)?;
    vault.commit(&mut audit, "sensitivity reports every cell, no selection");
    let n = spec.grid.len();
    let mut report = empty_report(spec, "sensitivity");
    let mut per_seed = vec![vec![vec![0.0; n]; n]; spec.seeds.len()];
    for (k, t) in trained.iter().enumerate() {
        let (s, i, j) = (k / (n * n), (k / n) % n, k % n);
        report.records.push(record(t, SplitName::Valid, score_valid(&dev, t)?));
        let sc = vault.evaluate(&mut audit, t, SplitName::TestOod)?;
        report.records.push(record(t, SplitName::TestOod, sc));
        per_seed[s][i][j] = sc.f1_macro;
    }
    let mean_grid = (0..n)
        .map(|i| (0..n).map(|j| mean(per_seed.iter().map(|g| g[i][j]))).collect())
        .collect();
    report.aggregates = aggregates(&report.records)?;
    report.sensitivity = Some(SensitivityGrid {
        alphas: spec.grid.clone(),
        betas: spec.grid.clone(),
        split: SplitName::TestOod,
        per_seed,
        mean: mean_grid,
    });
    report.audit = audit.lines;
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| x.to_string())
}

fn csv_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Writes `report.csv`, `runs.csv`, `report.md`, `audit.log`, `spec.json`
/// and, for sensitivity runs, `sensitivity.csv` plus `sensitivity_seeds.csv`.
pub fn write_report(report: &RunReport, spec: &ExperimentSpec, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let path = dir.join("runs.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["config_hash", "method", "input_mode", "alpha", "beta", "seed", "split", "f1_macro", "f1_micro"])?;
    for r in &report.records {
        w.write_record([
            report.config_hash.clone(),
            r.method.as_str().into(),
            r.input_mode.to_string(),
            csv_opt(r.alpha),
            csv_opt(r.beta),
            r.seed.to_string(),
            r.split.as_str().into(),
            r.f1_macro.to_string(),
            r.f1_micro.to_string(),
        ])?;
    }
    w.flush()?;
    written.push(path);

    let path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "config_hash", "benchmark_hash", "method", "input_mode", "alpha", "beta", "split", "n", "mean_f1_macro",
        "std_f1_macro", "mean_f1_micro", "std_f1_micro",
    ])?;
    for a in report.aggregates.iter().filter(|a| a.split != SplitName::Valid) {
        w.write_record([
            report.config_hash.clone(),
            report.benchmark_hash.clone(),
            a.method.as_str().into(),
            a.input_mode.to_string(),
            csv_opt(a.alpha),
            csv_opt(a.beta),
            a.split.as_str().into(),
            a.n.to_string(),
            a.mean_f1_macro.to_string(),
            a.std_f1_macro.to_string(),
            a.mean_f1_micro.to_string(),
            a.std_f1_micro.to_string(),
        ])?;
    }
    w.flush()?;
    written.push(path);

    if let Some(grid) = &report.sensitivity {
        let path = dir.join("sensitivity.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["alpha\\beta".to_string()];
        header.extend(grid.betas.iter().map(|b| b.to_string()));
        w.write_record(&header)?;
        for (i, a) in grid.alphas.iter().enumerate() {
            let mut row = vec![a.to_string()];
            row.extend(grid.mean[i].iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        written.push(path);

        let path = dir.join("sensitivity_seeds.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["config_hash", "seed", "alpha", "beta", "split", "f1_macro"])?;
        for (s, seed) in report.seeds.iter().enumerate() {
            for (i, a) in grid.alphas.iter().enumerate() {
                for (j, b) in grid.betas.iter().enumerate() {
                    w.write_record([
                        report.config_hash.clone(),
                        seed.to_string(),
                        a.to_string(),
                        b.to_string(),
                        grid.split.as_str().into(),
                        grid.per_seed[s][i][j].to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        written.push(path);
    }

    let path = dir.join("report.md");
    fs::write(&path, markdown(report))?;
    written.push(path);

    let path = dir.join("audit.log");
    let mut log = report.audit.join("\n");
    log.push('\n');
    fs::write(&path, log)?;
    written.push(path);

    let path = dir.join("spec.json");
    let mut json = serde_json::to_string_pretty(spec)?;
    json.push('\n');
    fs::write(&path, json)?;
    written.push(path);
    Ok(written)
}

pub fn markdown(report: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {} ({})\n", report.experiment, report.kind);
    let setting = serde_json::to_string(&report.setting).unwrap_or_default();
    let _ = writeln!(s, "- setting: {}", setting.trim_matches('"'));
    let _ = writeln!(s, "- benchmark hash: `{}`", report.benchmark_hash);
    let _ = writeln!(s, "- config hash: `{}`", report.config_hash);
    let seeds: Vec<String> = report.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(s, "- seeds: {}\n", seeds.join(", "));

    if !report.selections.is_empty() {
        let _ = writeln!(s, "## Selected hyperparameters (basis: validation F1-Macro)\n");
        let _ = writeln!(s, "| method | alpha | beta | mean valid F1-Macro |");
        let _ = writeln!(s, "|---|---|---|---|");
        for sel in &report.selections {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.4} |",
                sel.method.as_str(),
                opt(sel.alpha),
                opt(sel.beta),
                sel.mean_valid_f1_macro
            );
        }
        s.push('\n');
    }

    let _ = writeln!(s, "## Test results (mean ± std over seeds)\n");
    let _ = writeln!(s, "| method | input | alpha | beta | split | F1-Macro | F1-Micro |");
    let _ = writeln!(s, "|---|---|---|---|---|---|---|");
    for a in report.aggregates.iter().filter(|a| a.split != SplitName::Valid) {
        if report.sensitivity.is_some() {
            break;
        }
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {:.4} ± {:.4} | {:.4} ± {:.4} |",
            a.method.as_str(),
            a.input_mode,
            opt(a.alpha),
            opt(a.beta),
            a.split.as_str(),
            a.mean_f1_macro,
            a.std_f1_macro,
            a.mean_f1_micro,
            a.std_f1_micro
        );
    }

    if let Some(grid) = &report.sensitivity {
        let _ = writeln!(s, "Mean {} F1-Macro, rows alpha, columns beta.\n", grid.split.as_str());
        let betas: Vec<String> = grid.betas.iter().map(f64::to_string).collect();
        let _ = writeln!(s, "| alpha \\ beta | {} |", betas.join(" | "));
        let _ = writeln!(s, "|---|{}", "---|".repeat(grid.betas.len()));
        for (i, a) in grid.alphas.iter().enumerate() {
            let cells: Vec<String> = grid.mean[i].iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(s, "| {a} | {} |", cells.join(" | "));
        }
    }

    if !report.checks.is_empty() {
        let _ = writeln!(s, "\n## Soft checks (reported, not asserted)\n");
        for c in &report.checks {
            let _ = writeln!(s, "- [{}] {}: {}", if c.pass { "pass" } else { "fail" }, c.name, c.detail);
        }
    }
    s
}
