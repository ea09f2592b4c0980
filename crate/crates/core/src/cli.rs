//! Command-line front end: `gen`, `train`, `eval` and `experiment`.
//!
//! Every overridable setting is a `--flag` that can also appear as a
//! `flag=value` line in the file given by `--config`. Flags win over the
//! file, which wins over defaults. Each command writes its effective settings
//! to `<out>/config` in the same format, so `--config <out>/config` replays a
//! run.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::corpus::{
    generate_benchmark, meta_path, read_benchmark, write_benchmark, GeneratorConfig, Setting, SplitName,
};
use crate::error::{DalError, Result};
use crate::harness::{self, ExperimentSpec, DEFAULT_GRID};
use crate::model::InputMode;
use crate::trainer::{evaluate, read_history, train, write_history, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "dal", version, about = "Dual adversarial debiasing for evidence-aware fake news detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic benchmark.
    Gen(GenArgs),
    /// Train one detector and keep the best checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Run a multi-seed experiment and write CSV and Markdown reports.
    Experiment(ExperimentArgs),
}

macro_rules! flag_group {
    ($(#[$meta:meta])* $name:ident { $($field:ident => $key:literal),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Args, Debug, Clone, Default)]
        pub struct $name {
            $(
                #[arg(long = $key, value_name = "VALUE")]
                pub $field: Option<String>,
            )*
        }

        impl $name {
            fn pairs(&self) -> Vec<(&'static str, String)> {
                let mut v = Vec::new();
                $(
                    if let Some(x) = &self.$field {
                        v.push(($key, x.clone()));
                    }
                )*
                v
            }
        }
    };
}

flag_group!(Shared {
    seed => "seed",
    out => "out",
});

flag_group!(GeneratorFlags {
    setting => "setting",
    p_signal => "p-signal",
    q_news => "q-news",
    q_evid => "q-evid",
    shift => "shift",
    n_evidence => "n-evidence",
    len_news => "len-news",
    len_evid => "len-evid",
    n_topics => "n-topics",
    n_claim => "n-claim",
    n_filler => "n-filler",
    n_train => "n-train",
    n_valid => "n-valid",
    n_test_id => "n-test-id",
    n_test_ood => "n-test-ood",
});

flag_group!(ProtocolFlags {
    mode => "mode",
    lr => "lr",
    batch => "batch",
    patience => "patience",
    max_epochs => "max-epochs",
    alternation => "alternation",
    disc_steps => "disc-steps",
    d_w => "d-w",
    d_s => "d-s",
    attn_hidden => "attn-hidden",
    disc_hidden => "disc-hidden",
    cls_hidden => "cls-hidden",
});

flag_group!(TrainOnlyFlags {
    data => "data",
    alpha => "alpha",
    beta => "beta",
});

flag_group!(EvalFlags {
    checkpoint => "checkpoint",
    data => "data",
    split => "split",
});

flag_group!(ExperimentFlags {
    data => "data",
    seeds => "seeds",
    grid => "grid",
    workers => "workers",
});

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub shared: Shared,
    #[command(flatten)]
    pub generator: GeneratorFlags,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub shared: Shared,
    #[command(flatten)]
    pub train: TrainOnlyFlags,
    #[command(flatten)]
    pub protocol: ProtocolFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub shared: Shared,
    #[command(flatten)]
    pub eval: EvalFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExperimentKind {
    Pilot,
    Main,
    Ablate,
    Sensitivity,
}

impl ExperimentKind {
    fn name(self) -> &'static str {
        match self {
            ExperimentKind::Pilot => "pilot",
            ExperimentKind::Main => "main",
            ExperimentKind::Ablate => "ablate",
            ExperimentKind::Sensitivity => "sensitivity",
        }
    }
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    pub kind: ExperimentKind,
    #[arg(long)]
    pub config: Option<PathBuf>,
    // --seed is the benchmark seed; training seeds come from --seeds.
    #[command(flatten)]
    pub shared: Shared,
    #[command(flatten)]
    pub experiment: ExperimentFlags,
    #[command(flatten)]
    pub generator: GeneratorFlags,
    #[command(flatten)]
    pub protocol: ProtocolFlags,
}

fn bad(key: &str, val: &str, why: impl std::fmt::Display) -> DalError {
    DalError::Config(format!("invalid value {val:?} for --{key}: {why}"))
}

fn num<T: FromStr>(key: &str, val: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    val.trim().parse().map_err(|e| bad(key, val, e))
}

/// Enum values accept either `kebab-case` or `snake_case`.
fn choice<T: DeserializeOwned>(key: &str, val: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(val.trim().replace('-', "_"))).map_err(|e| bad(key, val, e))
}

fn choice_str<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn apply_generator(g: &mut GeneratorConfig, setting: &mut Setting, key: &str, val: &str) -> Result<bool> {
    match key {
        "setting" => *setting = choice(key, val)?,
        "p-signal" => g.p_signal = num(key, val)?,
        "q-news" => g.q_news = num(key, val)?,
        "q-evid" => g.q_evid = num(key, val)?,
        "shift" => g.shift_mode = choice(key, val)?,
        "n-evidence" => g.n_evidence = num(key, val)?,
        "len-news" => g.len_news = num(key, val)?,
        "len-evid" => g.len_evid = num(key, val)?,
        "n-topics" => g.n_topics = num(key, val)?,
        "n-claim" => g.n_claim = num(key, val)?,
        "n-filler" => g.n_filler = num(key, val)?,
        "n-train" => g.n_train = num(key, val)?,
        "n-valid" => g.n_valid = num(key, val)?,
        "n-test-id" => g.n_test_id = num(key, val)?,
        "n-test-ood" => g.n_test_ood = num(key, val)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn echo_generator(g: &GeneratorConfig, setting: Setting) -> Vec<(&'static str, String)> {
    vec![
        ("setting", choice_str(&setting)),
        ("p-signal", g.p_signal.to_string()),
        ("q-news", g.q_news.to_string()),
        ("q-evid", g.q_evid.to_string()),
        ("shift", choice_str(&g.shift_mode)),
        ("n-evidence", g.n_evidence.to_string()),
        ("len-news", g.len_news.to_string()),
        ("len-evid", g.len_evid.to_string()),
        ("n-topics", g.n_topics.to_string()),
        ("n-claim", g.n_claim.to_string()),
        ("n-filler", g.n_filler.to_string()),
        ("n-train", g.n_train.to_string()),
        ("n-valid", g.n_valid.to_string()),
        ("n-test-id", g.n_test_id.to_string()),
        ("n-test-ood", g.n_test_ood.to_string()),
    ]
}

fn apply_protocol(t: &mut TrainConfig, key: &str, val: &str) -> Result<bool> {
    match key {
        "mode" => t.input_mode = InputMode::from_str(val.trim()).map_err(|e| bad(key, val, e))?,
        "lr" => t.lr = num(key, val)?,
        "batch" => t.batch_size = num(key, val)?,
        "patience" => t.patience = num(key, val)?,
        "max-epochs" => t.max_epochs = num(key, val)?,
        "alternation" => t.alternation = choice(key, val)?,
        "disc-steps" => t.disc_steps = num(key, val)?,
        "d-w" => t.d_w = num(key, val)?,
        "d-s" => t.d_s = num(key, val)?,
        "attn-hidden" => t.attn_hidden = num(key, val)?,
        "disc-hidden" => t.disc_hidden = num(key, val)?,
        "cls-hidden" => t.cls_hidden = num(key, val)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn echo_protocol(t: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("mode", t.input_mode.to_string()),
        ("lr", t.lr.to_string()),
        ("batch", t.batch_size.to_string()),
        ("patience", t.patience.to_string()),
        ("max-epochs", t.max_epochs.to_string()),
        ("alternation", choice_str(&t.alternation)),
        ("disc-steps", t.disc_steps.to_string()),
        ("d-w", t.d_w.to_string()),
        ("d-s", t.d_s.to_string()),
        ("attn-hidden", t.attn_hidden.to_string()),
        ("disc-hidden", t.disc_hidden.to_string()),
        ("cls-hidden", t.cls_hidden.to_string()),
    ]
}

/// Settings resolved from defaults, an optional config file and flags.
trait Settings {
    fn apply(&mut self, key: &str, val: &str) -> Result<bool>;
    fn echo(&self) -> Vec<(&'static str, String)>;
    fn validate(&self) -> Result<()>;
    /// Keys whose names appear in validation messages.
    fn keys(&self) -> Vec<&'static str> {
        self.echo().into_iter().map(|(k, _)| k).collect()
    }
}

/// Reads `key=value` lines. Blank lines and `#` comments are skipped.
pub fn read_config_file(path: &Path) -> Result<Vec<(usize, String, String)>> {
    let text = fs::read_to_string(path)
        .map_err(|e| DalError::Config(format!("cannot read --config {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| DalError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: "expected key=value".into(),
        })?;
        out.push((i + 1, k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

fn resolve<S: Settings>(mut s: S, file: Option<&Path>, flags: Vec<(&'static str, String)>) -> Result<S> {
    if let Some(path) = file {
        for (line, k, v) in read_config_file(path)? {
            if !s.apply(&k, &v)? {
                return Err(DalError::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("unknown key {k:?}"),
                });
            }
        }
    }
    for (k, v) in flags {
        if !s.apply(k, &v)? {
            return Err(DalError::Config(format!("--{k} is not accepted by this command")));
        }
    }
    s.validate().map_err(|e| name_flag(e, &s.keys()))?;
    Ok(s)
}

/// Prefixes a validation message with the flag it is about, picking the
/// longest key whose field name appears in the message.
fn name_flag(e: DalError, keys: &[&'static str]) -> DalError {
    let DalError::Config(msg) = e else {
        return e;
    };
    let hit = keys
        .iter()
        .filter(|k| msg.contains(&k.replace('-', "_")) || msg.contains(*k))
        .max_by_key(|k| k.len());
    match hit {
        Some(k) => DalError::Config(format!("--{k}: {msg}")),
        None => DalError::Config(msg),
    }
}

fn write_echo<S: Settings>(s: &S, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut text = String::new();
    for (k, v) in s.echo() {
        text.push_str(&format!("{k}={v}\n"));
    }
    let path = dir.join("config");
    fs::write(&path, text)?;
    Ok(path)
}

/// Re-reads every artifact so a zero exit code means the files parse.
fn verify_artifacts(paths: &[PathBuf]) -> Result<()> {
    for p in paths {
        let bad = |m: String| DalError::Validation(format!("artifact {} failed to parse: {m}", p.display()));
        let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("");
        match ext {
            "csv" => {
                let mut r = csv::Reader::from_path(p)?;
                for row in r.records() {
                    row.map_err(|e| bad(e.to_string()))?;
                }
            }
            "json" => {
                serde_json::from_str::<serde_json::Value>(&fs::read_to_string(p)?).map_err(|e| bad(e.to_string()))?;
            }
            "jsonl" => {
                for line in fs::read_to_string(p)?.lines() {
                    serde_json::from_str::<serde_json::Value>(line).map_err(|e| bad(e.to_string()))?;
                }
            }
            "bin" => {
                load_checkpoint(p)?;
            }
            _ => {
                if fs::read_to_string(p)?.is_empty() {
                    return Err(bad("empty".into()));
                }
            }
        }
    }
    Ok(())
}

fn benchmark_files(dir: &Path) -> Vec<PathBuf> {
    SplitName::ALL
        .iter()
        .flat_map(|&n| [crate::corpus::split_path(dir, n), meta_path(dir, n)])
        .collect()
}

fn load_data(dir: &Path) -> Result<crate::corpus::Benchmark> {
    if !meta_path(dir, SplitName::Train).exists() {
        return Err(DalError::Config(format!("--data: no dataset found at {}", dir.display())));
    }
    read_benchmark(dir)
}

struct GenSettings {
    generator: GeneratorConfig,
    setting: Setting,
    out: PathBuf,
}

impl Settings for GenSettings {
    fn apply(&mut self, key: &str, val: &str) -> Result<bool> {
        match key {
            "seed" => self.generator.seed = num(key, val)?,
            "out" => self.out = PathBuf::from(val),
            _ => return apply_generator(&mut self.generator, &mut self.setting, key, val),
        }
        Ok(true)
    }

    fn echo(&self) -> Vec<(&'static str, String)> {
        let mut v = vec![("seed", self.generator.seed.to_string()), ("out", self.out.display().to_string())];
        v.extend(echo_generator(&self.generator, self.setting));
        v
    }

    fn validate(&self) -> Result<()> {
        self.generator.validate()
    }
}

pub fn cmd_gen(args: &GenArgs) -> Result<Vec<PathBuf>> {
    let defaults = GenSettings {
        generator: GeneratorConfig::default(),
        setting: Setting::CrossPlatform,
        out: PathBuf::from("data"),
    };
    let mut flags = args.shared.pairs();
    flags.extend(args.generator.pairs());
    let s = resolve(defaults, args.config.as_deref(), flags)?;
    let bench = generate_benchmark(&s.generator, s.setting)?;
    write_benchmark(&bench, &s.out)?;
    let mut files = benchmark_files(&s.out);
    files.push(write_echo(&s, &s.out)?);
    verify_artifacts(&files)?;
    println!(
        "wrote {} instances to {} (config hash {})",
        bench.train.len() + bench.valid.len() + bench.test_id.len() + bench.test_ood.len(),
        s.out.display(),
        bench.config_hash()
    );
    Ok(files)
}

struct TrainSettings {
    train: TrainConfig,
    data: PathBuf,
    out: PathBuf,
}

impl Settings for TrainSettings {
    fn apply(&mut self, key: &str, val: &str) -> Result<bool> {
        match key {
            "seed" => self.train.seed = num(key, val)?,
            "out" => self.out = PathBuf::from(val),
            "data" => self.data = PathBuf::from(val),
            "alpha" => self.train.alpha = num(key, val)?,
            "beta" => self.train.beta = num(key, val)?,
            _ => return apply_protocol(&mut self.train, key, val),
        }
        Ok(true)
    }

    fn echo(&self) -> Vec<(&'static str, String)> {
        let mut v = vec![
            ("seed", self.train.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("data", self.data.display().to_string()),
            ("alpha", self.train.alpha.to_string()),
            ("beta", self.train.beta.to_string()),
        ];
        v.extend(echo_protocol(&self.train));
        v
    }

    fn validate(&self) -> Result<()> {
        self.train.validate()
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<Vec<PathBuf>> {
    let defaults = TrainSettings {
        train: harness::protocol_config(),
        data: PathBuf::from("data"),
        out: PathBuf::from("runs/train"),
    };
    let mut flags = args.shared.pairs();
    flags.extend(args.train.pairs());
    flags.extend(args.protocol.pairs());
    let s = resolve(defaults, args.config.as_deref(), flags)?;
    let bench = load_data(&s.data)?;
    let out = train(&bench, &s.train)?;
    let ckpt_path = s.out.join("checkpoint.bin");
    save_checkpoint(&out.checkpoint, &ckpt_path)?;
    let hist_path = s.out.join("history.csv");
    write_history(&out.history, &hist_path)?;
    read_history(&hist_path)?;
    let valid = evaluate(&out.checkpoint.params, &bench.valid, s.train.input_mode)?;
    let report_path = s.out.join("report.csv");
    let mut w = csv::Writer::from_path(&report_path)?;
    w.write_record(["benchmark_hash", "best_epoch", "epochs_run", "split", "f1_macro", "f1_micro"])?;
    w.write_record([
        bench.config_hash(),
        out.checkpoint.epoch.to_string(),
        out.history.len().to_string(),
        "valid".into(),
        valid.f1_macro.to_string(),
        valid.f1_micro.to_string(),
    ])?;
    w.flush()?;
    let files = vec![write_echo(&s, &s.out)?, ckpt_path, hist_path, report_path];
    verify_artifacts(&files)?;
    println!(
        "best_epoch={} epochs_run={} valid_f1_macro={} valid_f1_micro={}",
        out.checkpoint.epoch,
        out.history.len(),
        valid.f1_macro,
        valid.f1_micro
    );
    Ok(files)
}

struct EvalSettings {
    checkpoint: PathBuf,
    data: PathBuf,
    split: SplitName,
    out: Option<PathBuf>,
}

impl Settings for EvalSettings {
    fn apply(&mut self, key: &str, val: &str) -> Result<bool> {
        match key {
            "checkpoint" => self.checkpoint = PathBuf::from(val),
            "data" => self.data = PathBuf::from(val),
            "out" => self.out = Some(PathBuf::from(val)),
            "split" => self.split = SplitName::parse(val.trim()).ok_or_else(|| bad(key, val, "unknown split"))?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn echo(&self) -> Vec<(&'static str, String)> {
        let mut v = vec![
            ("checkpoint", self.checkpoint.display().to_string()),
            ("data", self.data.display().to_string()),
            ("split", self.split.as_str().to_string()),
        ];
        if let Some(o) = &self.out {
            v.push(("out", o.display().to_string()));
        }
        v
    }

    fn validate(&self) -> Result<()> {
        Ok(())
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Vec<PathBuf>> {
    if args.shared.seed.is_some() {
        return Err(DalError::Config("--seed has no effect on eval".into()));
    }
    let defaults = EvalSettings {
        checkpoint: PathBuf::from("runs/train/checkpoint.bin"),
        data: PathBuf::from("data"),
        split: SplitName::TestOod,
        out: None,
    };
    let mut flags = args.shared.pairs();
    flags.extend(args.eval.pairs());
    let s = resolve(defaults, args.config.as_deref(), flags)?;
    if !s.checkpoint.exists() {
        return Err(DalError::Config(format!("--checkpoint: {} does not exist", s.checkpoint.display())));
    }
    let ckpt = load_checkpoint(&s.checkpoint)?;
    let bench = load_data(&s.data)?;
    let mode = ckpt.config.input_mode;
    let sc = evaluate(&ckpt.params, bench.split(s.split), mode)?;
    let dir = match &s.out {
        Some(d) => d.clone(),
        None => s.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("eval_{}.csv", s.split.as_str()));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["benchmark_hash", "split", "input_mode", "f1_macro", "f1_micro"])?;
    w.write_record([
        bench.config_hash(),
        s.split.as_str().into(),
        mode.to_string(),
        sc.f1_macro.to_string(),
        sc.f1_micro.to_string(),
    ])?;
    w.flush()?;
    verify_artifacts(std::slice::from_ref(&path))?;
    println!("split={} f1_macro={} f1_micro={}", s.split.as_str(), sc.f1_macro, sc.f1_micro);
    Ok(vec![path])
}

struct ExperimentSettings {
    spec: ExperimentSpec,
    data: Option<PathBuf>,
}

fn parse_seeds(key: &str, val: &str) -> Result<Vec<u64>> {
    let val = val.trim();
    if let Some((a, b)) = val.split_once("..") {
        let (a, b): (u64, u64) = (num(key, a)?, num(key, b)?);
        return Ok((a..b).collect());
    }
    if val.contains(',') {
        return val.split(',').map(|x| num(key, x)).collect();
    }
    let n: u64 = num(key, val)?;
    Ok((0..n).collect())
}

fn echo_seeds(seeds: &[u64]) -> String {
    match seeds {
        [s] => format!("{s}..{}", s + 1),
        _ => seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
    }
}

impl Settings for ExperimentSettings {
    fn apply(&mut self, key: &str, val: &str) -> Result<bool> {
        let spec = &mut self.spec;
        match key {
            "seed" => spec.generator.seed = num(key, val)?,
            "out" => spec.out_dir = PathBuf::from(val),
            "data" => self.data = Some(PathBuf::from(val)),
            "seeds" => spec.seeds = parse_seeds(key, val)?,
            "grid" => spec.grid = val.split(',').map(|x| num(key, x)).collect::<Result<_>>()?,
            "workers" => spec.workers = num(key, val)?,
            "mode" => {
                spec.input_mode = InputMode::from_str(val.trim()).map_err(|e| bad(key, val, e))?;
                spec.train.input_mode = spec.input_mode;
            }
            _ => {
                return Ok(apply_generator(&mut spec.generator, &mut spec.setting, key, val)?
                    || apply_protocol(&mut spec.train, key, val)?)
            }
        }
        Ok(true)
    }

    fn echo(&self) -> Vec<(&'static str, String)> {
        let s = &self.spec;
        let grid: Vec<String> = s.grid.iter().map(f64::to_string).collect();
        let mut v = vec![
            ("seed", s.generator.seed.to_string()),
            ("out", s.out_dir.display().to_string()),
            ("seeds", echo_seeds(&s.seeds)),
            ("grid", grid.join(",")),
            ("workers", s.workers.to_string()),
        ];
        if let Some(d) = &self.data {
            v.push(("data", d.display().to_string()));
        }
        v.extend(echo_generator(&s.generator, s.setting));
        v.extend(echo_protocol(&s.train));
        v
    }

    fn validate(&self) -> Result<()> {
        self.spec.validate()
    }
}

pub fn cmd_experiment(args: &ExperimentArgs) -> Result<Vec<PathBuf>> {
    let name = args.kind.name();
    let mut spec = ExperimentSpec::new(name, Setting::CrossPlatform, PathBuf::from("runs").join(name));
    spec.grid = DEFAULT_GRID.to_vec();
    let defaults = ExperimentSettings { spec, data: None };
    let mut flags = args.shared.pairs();
    flags.extend(args.experiment.pairs());
    flags.extend(args.generator.pairs());
    flags.extend(args.protocol.pairs());
    let s = resolve(defaults, args.config.as_deref(), flags)?;
    let spec = &s.spec;
    let data_dir = s.data.clone().unwrap_or_else(|| spec.out_dir.join("data"));
    let bench = if meta_path(&data_dir, SplitName::Train).exists() {
        read_benchmark(&data_dir)?
    } else {
        let b = generate_benchmark(&spec.generator, spec.setting)?;
        write_benchmark(&b, &data_dir)?;
        b
    };
    let report = match args.kind {
        ExperimentKind::Pilot => harness::run_pilot(spec, &bench)?,
        ExperimentKind::Main => harness::run_main(spec, &bench)?,
        ExperimentKind::Ablate => harness::run_ablation(spec, &bench)?,
        ExperimentKind::Sensitivity => harness::run_sensitivity(spec, &bench)?,
    };
    let mut files = harness::write_report(&report, spec, &spec.out_dir)?;
    files.push(write_echo(&s, &spec.out_dir)?);
    verify_artifacts(&files)?;
    print!("{}", harness::markdown(&report));
    Ok(files)
}

pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Experiment(a) => cmd_experiment(a),
    }
}

/// 2 for bad input (config, dataset, checkpoint format), 3 for a non-finite
/// loss, 1 for anything else.
pub fn exit_code(e: &DalError) -> u8 {
    match e {
        DalError::NonFiniteLoss { .. } => 3,
        DalError::Config(_)
        | DalError::Parse { .. }
        | DalError::Format(_)
        | DalError::Corruption(_)
        | DalError::InvalidArgument(_)
        | DalError::InvalidLabel(_)
        | DalError::Validation(_) => 2,
        _ => 1,
    }
}

pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::parse_from(args);
    match run(&cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn seeds_syntax() {
        assert_eq!(parse_seeds("seeds", "3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("seeds", "4,9").unwrap(), vec![4, 9]);
        assert_eq!(parse_seeds("seeds", "7..9").unwrap(), vec![7, 8]);
        for s in [vec![5], vec![0, 1, 2], vec![3, 1]] {
            assert_eq!(parse_seeds("seeds", &echo_seeds(&s)).unwrap(), s);
        }
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("cfg");
        fs::write(&f, "# comment\nalpha = 0.5\nbeta=0.25\n\nlr=0.01\n").unwrap();
        let defaults = TrainSettings {
            train: TrainConfig::default(),
            data: "d".into(),
            out: "o".into(),
        };
        let s = resolve(defaults, Some(&f), vec![("alpha", "0.75".into())]).unwrap();
        assert_eq!(s.train.alpha, 0.75);
        assert_eq!(s.train.beta, 0.25);
        assert_eq!(s.train.lr, 0.01);
        assert_eq!(s.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn unknown_key_in_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("cfg");
        fs::write(&f, "alpha=0.1\ngamma=2\n").unwrap();
        let defaults = TrainSettings {
            train: TrainConfig::default(),
            data: "d".into(),
            out: "o".into(),
        };
        let err = resolve(defaults, Some(&f), vec![]).err().unwrap();
        assert!(matches!(err, DalError::Parse { line: 2, .. }), "{err}");
        assert_eq!(exit_code(&err), 2);
    }

    #[test]
    fn echo_round_trips() {
        let mut spec = ExperimentSpec::new("x", Setting::CrossTopic, "runs/x");
        spec.seeds = vec![4];
        spec.grid = vec![0.3, 1e-5];
        spec.train.lr = 0.0123;
        let s = ExperimentSettings {
            spec,
            data: Some("dd".into()),
        };
        let mut fresh = ExperimentSettings {
            spec: ExperimentSpec::new("x", Setting::CrossPlatform, "elsewhere"),
            data: None,
        };
        for (k, v) in s.echo() {
            assert!(fresh.apply(k, &v).unwrap(), "{k}");
        }
        assert_eq!(fresh.spec, s.spec);
        assert_eq!(fresh.data, s.data);
    }

    #[test]
    fn validation_names_the_flag() {
        let defaults = GenSettings {
            generator: GeneratorConfig::default(),
            setting: Setting::CrossPlatform,
            out: "d".into(),
        };
        let err = resolve(defaults, None, vec![("n-evidence", "0".into())]).err().unwrap();
        assert!(err.to_string().contains("--n-evidence"), "{err}");
        let defaults = GenSettings {
            generator: GeneratorConfig::default(),
            setting: Setting::CrossPlatform,
            out: "d".into(),
        };
        let err = resolve(defaults, None, vec![("p-signal", "x".into())]).err().unwrap();
        assert!(err.to_string().contains("--p-signal"), "{err}");
    }

    #[test]
    fn nan_maps_to_three() {
        let e = DalError::NonFiniteLoss {
            phase: "main",
            epoch: 1,
            batch: 0,
        };
        assert_eq!(exit_code(&e), 3);
        assert_eq!(exit_code(&DalError::Format("x".into())), 2);
    }
}
