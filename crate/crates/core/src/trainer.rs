//! Dual adversarial training.
//!
//! Each outer iteration first fits the two discriminators with the main
//! detector frozen, then fits the detector on `l_m - alpha * l_n - beta * l_e`
//! with the discriminators frozen. The negative coefficients are what
//! reverse the discriminator gradients flowing into the shared encoder.
//! After every iteration the detector is scored on the validation split and
//! the best snapshot so far is kept.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::corpus::{Benchmark, NewsInstance};
use crate::error::{DalError, Result};
use crate::metrics::{argmax2, scores, Scores};
use crate::model::{predict, Bound, Group, Head, InputMode, ModelDims, ParamSet};
use crate::optim::AdamState;
use crate::rng::{Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Alternation {
    #[default]
    PerEpoch,
    PerBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub input_mode: InputMode,
    pub alternation: Alternation,
    /// Discriminator updates per detector update unit: full passes over the
    /// training batches under `PerEpoch`, steps on the same batch under
    /// `PerBatch`.
    pub disc_steps: usize,
    pub d_w: usize,
    pub d_s: usize,
    pub attn_hidden: usize,
    pub disc_hidden: usize,
    pub cls_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let d = ModelDims::new(1);
        Self {
            alpha: 0.0,
            beta: 0.0,
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            input_mode: InputMode::Both,
            alternation: Alternation::PerEpoch,
            disc_steps: 1,
            d_w: d.d_w,
            d_s: d.d_s,
            attn_hidden: d.attn_hidden,
            disc_hidden: d.disc_hidden,
            cls_hidden: d.cls_hidden,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(DalError::Config(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return err(format!("alpha and beta must be finite and >= 0, got {} and {}", self.alpha, self.beta));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size < 1 {
            return err("batch_size must be at least 1".into());
        }
        if self.max_epochs < 1 {
            return err("max_epochs must be at least 1".into());
        }
        if self.disc_steps < 1 {
            return err("disc_steps must be at least 1".into());
        }
        if self.patience < 1 {
            return err("patience must be at least 1".into());
        }
        let dims = [self.d_w, self.d_s, self.attn_hidden, self.disc_hidden, self.cls_hidden];
        if dims.iter().any(|&d| d == 0) {
            return err("model dimensions must be positive".into());
        }
        Ok(())
    }

    pub fn dims(&self, vocab: usize) -> ModelDims {
        ModelDims {
            vocab,
            d_w: self.d_w,
            d_s: self.d_s,
            attn_hidden: self.attn_hidden,
            disc_hidden: self.disc_hidden,
            cls_hidden: self.cls_hidden,
        }
    }
}

/// Best-epoch snapshot. `params` is an owned deep copy.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub epoch: usize,
    pub valid_f1_macro: f64,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_m: f64,
    pub l_n: f64,
    pub l_e: f64,
    pub l: f64,
    pub valid_f1_macro: f64,
    pub valid_f1_micro: f64,
    pub is_best: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Discriminators,
    Main,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Discriminators => "discriminator",
            Phase::Main => "main",
        }
    }
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub l_m: f64,
    pub l_n: f64,
    pub l_e: f64,
    pub l: f64,
}

/// Training hooks; all methods default to no-ops.
pub trait Observer {
    fn before_step(&mut self, _phase: Phase, _params: &ParamSet) {}
    fn after_step(&mut self, _phase: Phase, _params: &ParamSet, _losses: &StepLosses) {}
    fn after_epoch(&mut self, _record: &EpochRecord) {}
}

impl Observer for () {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainer {
    /// Alternating discriminator / detector phases.
    Dal,
    /// Detector only, on `l_m`; discriminators are never trained.
    Supervised,
}

fn mean_ce(
    g: &mut Graph,
    batch: &[NewsInstance],
    mut head: impl FnMut(&mut Graph, &NewsInstance) -> Result<NodeId>,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(DalError::InvalidArgument("empty batch".into()));
    }
    let mut terms = Vec::with_capacity(batch.len());
    for inst in batch {
        let p = head(g, inst)?;
        terms.push(g.cross_entropy(p, inst.label)?);
    }
    let stacked = g.concat(&terms)?;
    let total = g.sum(stacked);
    Ok(g.scale(total, 1.0 / batch.len() as f64))
}

/// Mean cross-entropy of the detector.
pub fn loss_main(g: &mut Graph, b: &Bound, batch: &[NewsInstance], mode: InputMode) -> Result<NodeId> {
    mean_ce(g, batch, |g, i| b.forward_main(g, i, mode))
}

/// Mean cross-entropy of the news discriminator.
pub fn loss_news(g: &mut Graph, b: &Bound, batch: &[NewsInstance]) -> Result<NodeId> {
    mean_ce(g, batch, |g, i| b.forward_news_disc(g, i))
}

/// Mean cross-entropy of the evidence discriminator.
pub fn loss_evid(g: &mut Graph, b: &Bound, batch: &[NewsInstance]) -> Result<NodeId> {
    mean_ce(g, batch, |g, i| b.forward_evid_disc(g, i))
}

/// Builds `l = l_m - alpha * l_n - beta * l_e`, leaving out terms whose
/// coefficient is zero so that they contribute nothing to the gradient.
pub fn overall_loss(
    g: &mut Graph,
    b: &Bound,
    batch: &[NewsInstance],
    mode: InputMode,
    alpha: f64,
    beta: f64,
) -> Result<(NodeId, StepLosses)> {
    let l_m = loss_main(g, b, batch, mode)?;
    let l_n = loss_news(g, b, batch)?;
    let l_e = loss_evid(g, b, batch)?;
    let mut l = l_m;
    if alpha != 0.0 {
        let t = g.scale(l_n, alpha);
        l = g.sub(l, t)?;
    }
    if beta != 0.0 {
        let t = g.scale(l_e, beta);
        l = g.sub(l, t)?;
    }
    let losses = StepLosses {
        l_m: g.value(l_m).item(),
        l_n: g.value(l_n).item(),
        l_e: g.value(l_e).item(),
        l: g.value(l).item(),
    };
    Ok((l, losses))
}

fn require_frozen(params: &ParamSet, frozen: &[Group], free: &[Group]) -> Result<()> {
    for &g in frozen {
        if !params.is_frozen(g) {
            return Err(DalError::Contract(format!("{} must be frozen for this step", g.name())));
        }
    }
    for &g in free {
        if params.is_frozen(g) {
            return Err(DalError::Contract(format!("{} must be trainable for this step", g.name())));
        }
    }
    Ok(())
}

/// One Adam update of the discriminators on `l_n + l_e`. The detector
/// groups must be frozen.
pub fn step_discriminators(batch: &[NewsInstance], params: &mut ParamSet, opt: &mut AdamState) -> Result<StepLosses> {
    require_frozen(params, &Group::MAIN, &Group::DISCRIMINATORS)?;
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let l_n = loss_news(&mut g, &b, batch)?;
    let l_e = loss_evid(&mut g, &b, batch)?;
    // theta_n only reaches l_n and theta_e only l_e, so one backward on the
    // sum yields both gradients.
    let total = g.add(l_n, l_e)?;
    let losses = StepLosses {
        l_m: f64::NAN,
        l_n: g.value(l_n).item(),
        l_e: g.value(l_e).item(),
        l: g.value(total).item(),
    };
    if !losses.l.is_finite() {
        return Ok(losses);
    }
    g.backward(total)?;
    opt.step(params, &g, &b);
    Ok(losses)
}

/// One Adam update of the detector on the overall loss. The discriminator
/// groups must be frozen.
pub fn step_main(batch: &[NewsInstance], params: &mut ParamSet, opt: &mut AdamState, cfg: &TrainConfig) -> Result<StepLosses> {
    require_frozen(params, &Group::DISCRIMINATORS, &Group::MAIN)?;
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let (l, losses) = overall_loss(&mut g, &b, batch, cfg.input_mode, cfg.alpha, cfg.beta)?;
    let recomposed = losses.l_m - cfg.alpha * losses.l_n - cfg.beta * losses.l_e;
    debug_assert!(!losses.l.is_finite() || (losses.l - recomposed).abs() <= 1e-12);
    if !losses.l.is_finite() {
        return Ok(losses);
    }
    g.backward(l)?;
    opt.step(params, &g, &b);
    Ok(losses)
}

pub fn evaluate(params: &ParamSet, split: &[NewsInstance], mode: InputMode) -> Result<Scores> {
    let probs = predict(params, split, Head::Main(mode))?;
    let preds: Vec<usize> = probs.iter().map(|p| argmax2(p)).collect();
    let labels: Vec<usize> = split.iter().map(|i| i.label).collect();
    scores(&labels, &preds)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Dual adversarial training with early stopping on validation F1-Macro.
pub fn train(bench: &Benchmark, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(bench, cfg, Trainer::Dal, &mut ())
}

/// Plain supervised training of the detector on `l_m`.
pub fn train_supervised(bench: &Benchmark, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(bench, cfg, Trainer::Supervised, &mut ())
}

#[derive(Default)]
struct Totals {
    l_m: f64,
    l_n: f64,
    l_e: f64,
    l: f64,
    n: usize,
}

impl Totals {
    fn add(&mut self, s: &StepLosses) {
        self.l_m += s.l_m;
        self.l_n += s.l_n;
        self.l_e += s.l_e;
        self.l += s.l;
        self.n += 1;
    }
}

fn checked(losses: StepLosses, phase: Phase, epoch: usize, batch: usize) -> Result<StepLosses> {
    if losses.l.is_finite() {
        Ok(losses)
    } else {
        Err(DalError::NonFiniteLoss {
            phase: phase.name(),
            epoch,
            batch,
        })
    }
}

pub fn train_with(bench: &Benchmark, cfg: &TrainConfig, trainer: Trainer, obs: &mut dyn Observer) -> Result<TrainOutcome> {
    cfg.validate()?;
    if bench.train.is_empty() || bench.valid.is_empty() {
        return Err(DalError::InvalidArgument("train and valid splits must be nonempty".into()));
    }
    let dims = cfg.dims(bench.vocab().size());
    let mut params = ParamSet::init(dims, &mut Rng::stream(cfg.seed, Stream::Init))?;
    let mut shuffle = Rng::stream(cfg.seed, Stream::Shuffle);
    let mut opt_disc = AdamState::new(&params, cfg.lr);
    let mut opt_main = AdamState::new(&params, cfg.lr);

    let mut order: Vec<usize> = (0..bench.train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut stall = 0;

    let disc_step = |batch: &[NewsInstance], params: &mut ParamSet, opt: &mut AdamState, obs: &mut dyn Observer, epoch, bi| {
        params.set_frozen(&Group::MAIN, true);
        params.set_frozen(&Group::DISCRIMINATORS, false);
        obs.before_step(Phase::Discriminators, params);
        let s = checked(step_discriminators(batch, params, opt)?, Phase::Discriminators, epoch, bi)?;
        obs.after_step(Phase::Discriminators, params, &s);
        Ok::<_, DalError>(s)
    };
    let main_step = |batch: &[NewsInstance], params: &mut ParamSet, opt: &mut AdamState, obs: &mut dyn Observer, epoch, bi| {
        params.set_frozen(&Group::DISCRIMINATORS, true);
        params.set_frozen(&Group::MAIN, false);
        obs.before_step(Phase::Main, params);
        let s = checked(step_main(batch, params, opt, cfg)?, Phase::Main, epoch, bi)?;
        obs.after_step(Phase::Main, params, &s);
        Ok::<_, DalError>(s)
    };

    for epoch in 1..=cfg.max_epochs {
        shuffle.shuffle(&mut order);
        let batches: Vec<Vec<NewsInstance>> = order
            .chunks(cfg.batch_size)
            .map(|c| c.iter().map(|&i| bench.train[i].clone()).collect())
            .collect();

        let mut totals = Totals::default();
        match (trainer, cfg.alternation) {
            (Trainer::Supervised, _) => {
                for (bi, batch) in batches.iter().enumerate() {
                    totals.add(&main_step(batch, &mut params, &mut opt_main, obs, epoch, bi)?);
                }
            }
            (Trainer::Dal, Alternation::PerEpoch) => {
                for _ in 0..cfg.disc_steps {
                    for (bi, batch) in batches.iter().enumerate() {
                        disc_step(batch, &mut params, &mut opt_disc, obs, epoch, bi)?;
                    }
                }
                for (bi, batch) in batches.iter().enumerate() {
                    totals.add(&main_step(batch, &mut params, &mut opt_main, obs, epoch, bi)?);
                }
            }
            (Trainer::Dal, Alternation::PerBatch) => {
                for (bi, batch) in batches.iter().enumerate() {
                    for _ in 0..cfg.disc_steps {
                        disc_step(batch, &mut params, &mut opt_disc, obs, epoch, bi)?;
                    }
                    totals.add(&main_step(batch, &mut params, &mut opt_main, obs, epoch, bi)?);
                }
            }
        }
        params.unfreeze_all();

        let valid = evaluate(&params, &bench.valid, cfg.input_mode)?;
        let n = totals.n as f64;
        let record = EpochRecord {
            epoch,
            l_m: totals.l_m / n,
            l_n: totals.l_n / n,
            l_e: totals.l_e / n,
            l: totals.l / n,
            valid_f1_macro: valid.f1_macro,
            valid_f1_micro: valid.f1_micro,
            is_best: false,
        };
        obs.after_epoch(&record);
        history.push(record);

        if best.as_ref().map_or(true, |b| valid.f1_macro > b.valid_f1_macro) {
            best = Some(Checkpoint {
                params: params.clone(),
                epoch,
                valid_f1_macro: valid.f1_macro,
                config: cfg.clone(),
            });
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.patience {
                break;
            }
        }
    }

    let checkpoint = best.expect("at least one epoch runs");
    history[checkpoint.epoch - 1].is_best = true;
    Ok(TrainOutcome { checkpoint, history })
}

pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(DalError::from)).collect()
}
