//! Synthetic news/evidence corpus with planted spurious correlations.
//!
//! Each instance has a latent veracity `y`. The news asserts a stance
//! (SUPPORT or REFUTE) about its topic's claim, and each evidence states
//! its own stance about the same claim. An evidence agrees with the news
//! when `y = 1` and disagrees when `y = 0`, except that each evidence
//! flips independently with probability `1 - p_signal`. Neither the news
//! stance nor any single evidence stance is informative about `y` on its
//! own; only the news/evidence agreement is, and that mechanism is
//! identical in every split.
//!
//! On top of that, every topic owns one news-bias token and one
//! evidence-bias token. In the training distribution a bias token is
//! present with probability `q` when `y = 1` and `1 - q` when `y = 0`,
//! drawn once for the news and once for the whole evidence set. The
//! out-of-distribution split either reverses that rule or removes it.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DalError, Result};
use crate::rng::{Rng, RNG_ALGORITHM};

pub const PAD: usize = 0;

/// Contiguous vocabulary partition. Id 0 is PAD, then claim tokens, the
/// two stance tokens, news-bias tokens, evidence-bias tokens and fillers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub n_claim: usize,
    pub n_bias_news: usize,
    pub n_bias_evid: usize,
    pub n_filler: usize,
}

/// First id of each partition plus the total size, for metadata sidecars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabBoundaries {
    pub pad: usize,
    pub claim_start: usize,
    pub support: usize,
    pub refute: usize,
    pub news_bias_start: usize,
    pub evid_bias_start: usize,
    pub filler_start: usize,
    pub size: usize,
}

impl VocabSpec {
    pub fn claim(&self, topic: usize) -> usize {
        1 + topic
    }

    pub fn support(&self) -> usize {
        1 + self.n_claim
    }

    pub fn refute(&self) -> usize {
        2 + self.n_claim
    }

    pub fn stance(&self, support: bool) -> usize {
        if support {
            self.support()
        } else {
            self.refute()
        }
    }

    pub fn news_bias(&self, topic: usize) -> usize {
        3 + self.n_claim + topic
    }

    pub fn evid_bias(&self, topic: usize) -> usize {
        3 + self.n_claim + self.n_bias_news + topic
    }

    pub fn filler(&self, i: usize) -> usize {
        3 + self.n_claim + self.n_bias_news + self.n_bias_evid + i
    }

    pub fn size(&self) -> usize {
        3 + self.n_claim + self.n_bias_news + self.n_bias_evid + self.n_filler
    }

    pub fn is_news_bias(&self, id: usize) -> bool {
        (self.news_bias(0)..self.evid_bias(0)).contains(&id)
    }

    pub fn is_evid_bias(&self, id: usize) -> bool {
        (self.evid_bias(0)..self.filler(0)).contains(&id)
    }

    pub fn boundaries(&self) -> VocabBoundaries {
        VocabBoundaries {
            pad: PAD,
            claim_start: self.claim(0),
            support: self.support(),
            refute: self.refute(),
            news_bias_start: self.news_bias(0),
            evid_bias_start: self.evid_bias(0),
            filler_start: self.filler(0),
            size: self.size(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    Reversed,
    Removed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    CrossPlatform,
    CrossTopic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distribution {
    Train,
    Ood,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Platform {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub p_signal: f64,
    pub q_news: f64,
    pub q_evid: f64,
    pub shift_mode: ShiftMode,
    pub n_evidence: usize,
    pub len_news: usize,
    pub len_evid: usize,
    pub n_topics: usize,
    pub n_claim: usize,
    pub n_filler: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test_id: usize,
    pub n_test_ood: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            p_signal: 0.9,
            q_news: 0.9,
            q_evid: 0.9,
            shift_mode: ShiftMode::Reversed,
            n_evidence: 10,
            len_news: 8,
            len_evid: 8,
            n_topics: 8,
            n_claim: 20,
            n_filler: 50,
            n_train: 2000,
            n_valid: 500,
            n_test_id: 1000,
            n_test_ood: 1000,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(DalError::Config(m));
        if !(self.p_signal > 0.5 && self.p_signal <= 1.0) {
            return err(format!("p_signal must lie in (0.5, 1], got {}", self.p_signal));
        }
        for (name, q) in [("q_news", self.q_news), ("q_evid", self.q_evid)] {
            if !(0.5..=1.0).contains(&q) {
                return err(format!("{name} must lie in [0.5, 1], got {q}"));
            }
        }
        if self.n_evidence < 1 {
            return err("n_evidence must be at least 1".into());
        }
        if self.len_news < 3 || self.len_evid < 3 {
            return err(format!(
                "len_news and len_evid must be at least 3, got {} and {}",
                self.len_news, self.len_evid
            ));
        }
        if self.n_topics < 1 {
            return err("n_topics must be at least 1".into());
        }
        if self.n_claim < self.n_topics {
            return err(format!(
                "n_claim ({}) must cover every topic ({})",
                self.n_claim, self.n_topics
            ));
        }
        if self.n_filler < 1 {
            return err("n_filler must be at least 1".into());
        }
        let sizes = [self.n_train, self.n_valid, self.n_test_id, self.n_test_ood];
        if sizes.iter().any(|&n| n < 1) {
            return err("every split needs at least one instance".into());
        }
        Ok(())
    }

    pub fn vocab(&self) -> VocabSpec {
        VocabSpec {
            n_claim: self.n_claim,
            n_bias_news: self.n_topics,
            n_bias_evid: self.n_topics,
            n_filler: self.n_filler,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewsInstance {
    pub id: String,
    pub news: Vec<usize>,
    pub evidences: Vec<Vec<usize>>,
    pub label: usize,
    pub topic: usize,
    pub platform: Platform,
}

impl NewsInstance {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.label > 1 {
            return Err(DalError::InvalidLabel(self.label));
        }
        if self.news.is_empty() {
            return Err(DalError::Validation(format!("{}: empty news", self.id)));
        }
        if self.evidences.is_empty() || self.evidences.iter().any(Vec::is_empty) {
            return Err(DalError::Validation(format!("{}: missing or empty evidence", self.id)));
        }
        let ids = self.news.iter().chain(self.evidences.iter().flatten());
        if let Some(bad) = ids.copied().find(|&t| t >= vocab_size) {
            return Err(DalError::Validation(format!(
                "{}: token id {bad} outside vocabulary of size {vocab_size}",
                self.id
            )));
        }
        Ok(())
    }
}

fn bias_present(rng: &mut Rng, q: f64, y: usize, dist: Distribution, shift: ShiftMode) -> bool {
    let p = match (dist, shift) {
        (Distribution::Ood, ShiftMode::Removed) => 0.5,
        (Distribution::Ood, ShiftMode::Reversed) => {
            if y == 1 {
                1.0 - q
            } else {
                q
            }
        }
        (Distribution::Train, _) => {
            if y == 1 {
                q
            } else {
                1.0 - q
            }
        }
    };
    rng.bernoulli(p)
}

// claim, stance and a bias-or-filler slot, padded with fillers to a
// uniformly drawn length, then shuffled.
fn sequence(rng: &mut Rng, vocab: &VocabSpec, core: [usize; 3], max_len: usize) -> Vec<usize> {
    let len = rng.int_inclusive(3, max_len);
    let mut toks = core.to_vec();
    while toks.len() < len {
        toks.push(vocab.filler(rng.below(vocab.n_filler)));
    }
    rng.shuffle(&mut toks);
    toks
}

/// Draws one instance; `topics` is the pool its topic is drawn from.
pub fn generate_instance(
    rng: &mut Rng,
    cfg: &GeneratorConfig,
    dist: Distribution,
    topics: &[usize],
    platform: Platform,
    id: String,
) -> NewsInstance {
    let vocab = cfg.vocab();
    let y = usize::from(rng.bernoulli(0.5));
    let topic = topics[rng.below(topics.len())];
    let news_support = rng.bernoulli(0.5);

    let filler = |rng: &mut Rng| vocab.filler(rng.below(vocab.n_filler));
    let slot = if bias_present(rng, cfg.q_news, y, dist, cfg.shift_mode) {
        vocab.news_bias(topic)
    } else {
        filler(rng)
    };
    let news = sequence(
        rng,
        &vocab,
        [vocab.claim(topic), vocab.stance(news_support), slot],
        cfg.len_news,
    );

    // The evidence set of one news item shares its source, so the
    // evidence-bias draw is made once and applies to every evidence.
    let evid_bias = bias_present(rng, cfg.q_evid, y, dist, cfg.shift_mode);
    let evidences = (0..cfg.n_evidence)
        .map(|_| {
            let faithful = rng.bernoulli(cfg.p_signal);
            let agrees = faithful == (y == 1);
            let stance = vocab.stance(news_support == agrees);
            let slot = if evid_bias {
                vocab.evid_bias(topic)
            } else {
                filler(rng)
            };
            sequence(rng, &vocab, [vocab.claim(topic), stance, slot], cfg.len_evid)
        })
        .collect();

    NewsInstance {
        id,
        news,
        evidences,
        label: y,
        topic,
        platform,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Valid,
    TestId,
    TestOod,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [Self::Train, Self::Valid, Self::TestId, Self::TestOod];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Valid => "valid",
            Self::TestId => "test_id",
            Self::TestOod => "test_ood",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|n| n.as_str() == s.replace('-', "_"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub setting: Setting,
    pub config: GeneratorConfig,
    pub train: Vec<NewsInstance>,
    pub valid: Vec<NewsInstance>,
    pub test_id: Vec<NewsInstance>,
    pub test_ood: Vec<NewsInstance>,
    pub train_topics: Vec<usize>,
    pub ood_topics: Vec<usize>,
}

impl Benchmark {
    pub fn split(&self, name: SplitName) -> &[NewsInstance] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::TestId => &self.test_id,
            SplitName::TestOod => &self.test_ood,
        }
    }

    pub fn vocab(&self) -> VocabSpec {
        self.config.vocab()
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.config, self.setting)
    }
}

/// SHA-256 over the canonical JSON of the generator config and setting.
pub fn config_hash(cfg: &GeneratorConfig, setting: Setting) -> String {
    let json = serde_json::to_string(&(cfg, setting)).expect("config serialises");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// Held-out topic count for the cross-topic setting: a quarter, at least one.
pub fn held_out_topics(n_topics: usize) -> usize {
    (n_topics / 4).max(1)
}

pub fn generate_benchmark(cfg: &GeneratorConfig, setting: Setting) -> Result<Benchmark> {
    cfg.validate()?;
    let all: Vec<usize> = (0..cfg.n_topics).collect();
    let (train_topics, ood_topics) = match setting {
        Setting::CrossPlatform => (all.clone(), all),
        Setting::CrossTopic => {
            if cfg.n_topics < 2 {
                return Err(DalError::Config("cross_topic needs at least 2 topics".into()));
            }
            let cut = cfg.n_topics - held_out_topics(cfg.n_topics);
            (all[..cut].to_vec(), all[cut..].to_vec())
        }
    };
    let ood_platform = match setting {
        Setting::CrossPlatform => Platform::B,
        Setting::CrossTopic => Platform::A,
    };

    let make = |name: SplitName, n: usize, dist, topics: &[usize], platform| -> Vec<NewsInstance> {
        (0..n)
            .map(|i| {
                let mut rng = Rng::keyed(cfg.seed, name as u64 + 1, i as u64);
                let id = format!("{}-{i:06}", name.as_str());
                generate_instance(&mut rng, cfg, dist, topics, platform, id)
            })
            .collect()
    };

    Ok(Benchmark {
        setting,
        config: cfg.clone(),
        train: make(SplitName::Train, cfg.n_train, Distribution::Train, &train_topics, Platform::A),
        valid: make(SplitName::Valid, cfg.n_valid, Distribution::Train, &train_topics, Platform::A),
        test_id: make(SplitName::TestId, cfg.n_test_id, Distribution::Train, &train_topics, Platform::A),
        test_ood: make(SplitName::TestOod, cfg.n_test_ood, Distribution::Ood, &ood_topics, ood_platform),
        train_topics,
        ood_topics,
    })
}

/// Probability that a majority vote over `n_evidence` independent
/// agreement signals, each correct with probability `p_signal`, recovers
/// the label. Ties earn half credit.
pub fn bayes_oracle_accuracy(p_signal: f64, n_evidence: usize) -> f64 {
    let n = n_evidence;
    let mut total = 0.0;
    let mut binom = 1.0f64;
    for k in 0..=n {
        if k > 0 {
            binom = binom * (n - k + 1) as f64 / k as f64;
        }
        let mass = binom * p_signal.powi(k as i32) * (1.0 - p_signal).powi((n - k) as i32);
        if 2 * k > n {
            total += mass;
        } else if 2 * k == n {
            total += 0.5 * mass;
        }
    }
    total
}

/// Majority vote of news/evidence stance agreement: `Some(label)`, or
/// `None` on a tie.
pub fn agreement_vote(inst: &NewsInstance, vocab: &VocabSpec) -> Option<usize> {
    let stance_of = |toks: &[usize]| toks.iter().copied().find(|&t| t == vocab.support() || t == vocab.refute());
    let news = stance_of(&inst.news)?;
    let agree = inst
        .evidences
        .iter()
        .filter(|e| stance_of(e) == Some(news))
        .count();
    let disagree = inst.evidences.len() - agree;
    match agree.cmp(&disagree) {
        std::cmp::Ordering::Greater => Some(1),
        std::cmp::Ordering::Less => Some(0),
        std::cmp::Ordering::Equal => None,
    }
}

// ---------------------------------------------------------------------------
// Files

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub split: SplitName,
    pub setting: Setting,
    pub generator: GeneratorConfig,
    pub vocab: VocabBoundaries,
    pub topics: Vec<usize>,
    pub rng: String,
    pub config_hash: String,
}

pub fn write_dataset(split: &[NewsInstance], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for inst in split {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a JSON Lines split. Token ids are checked against `vocab_size`
/// when given. Blank lines are skipped.
pub fn read_dataset(path: &Path, vocab_size: Option<usize>) -> Result<Vec<NewsInstance>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| DalError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let inst: NewsInstance = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if inst.label > 1 {
            return Err(parse_err(format!("label must be 0 or 1, got {}", inst.label)));
        }
        if let Some(v) = vocab_size {
            inst.validate(v)?;
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn split_path(dir: &Path, name: SplitName) -> PathBuf {
    dir.join(format!("{}.jsonl", name.as_str()))
}

pub fn meta_path(dir: &Path, name: SplitName) -> PathBuf {
    dir.join(format!("{}.meta.json", name.as_str()))
}

pub fn write_benchmark(bench: &Benchmark, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for name in SplitName::ALL {
        write_dataset(bench.split(name), &split_path(dir, name))?;
        let topics = match name {
            SplitName::TestOod => bench.ood_topics.clone(),
            _ => bench.train_topics.clone(),
        };
        let meta = SplitMeta {
            split: name,
            setting: bench.setting,
            generator: bench.config.clone(),
            vocab: bench.vocab().boundaries(),
            topics,
            rng: RNG_ALGORITHM.to_string(),
            config_hash: bench.config_hash(),
        };
        let mut json = serde_json::to_string_pretty(&meta)?;
        json.push('\n');
        fs::write(meta_path(dir, name), json)?;
    }
    Ok(())
}

pub fn read_benchmark(dir: &Path) -> Result<Benchmark> {
    let meta_file = meta_path(dir, SplitName::Train);
    let meta: SplitMeta = serde_json::from_str(&fs::read_to_string(&meta_file)?)?;
    let vocab = meta.generator.vocab().size();
    let load = |n| read_dataset(&split_path(dir, n), Some(vocab));
    let ood_meta: SplitMeta = serde_json::from_str(&fs::read_to_string(meta_path(dir, SplitName::TestOod))?)?;
    Ok(Benchmark {
        setting: meta.setting,
        config: meta.generator.clone(),
        train: load(SplitName::Train)?,
        valid: load(SplitName::Valid)?,
        test_id: load(SplitName::TestId)?,
        test_ood: load(SplitName::TestOod)?,
        train_topics: meta.topics,
        ood_topics: ood_meta.topics,
    })
}

/// Topic ids appearing in the given splits.
pub fn topics_of<'a>(splits: impl IntoIterator<Item = &'a [NewsInstance]>) -> BTreeSet<usize> {
    splits.into_iter().flatten().map(|i| i.topic).collect()
}
