//! Evidence-aware detector and the two debiasing discriminators.
//!
//! The detector follows the usual four-stage shape of evidence-aware
//! models: word encoder, news pooling, claim-aware word-level attention
//! over each evidence, and sentence-level attention of the news over its
//! evidences feeding a classifier. The discriminators read only mean-pooled
//! raw word embeddings of the news (or of each evidence), never any
//! interaction features.
//!
//! Parameters are split into five disjoint groups:
//!
//! | group      | contents                                              |
//! |------------|-------------------------------------------------------|
//! | `theta_f`  | word embedding table                                  |
//! | `theta_w`  | news pooling projection, claim-aware attention, evidence projection, evidence-only query |
//! | `theta_s`  | sentence attention bilinear map, classifier MLP       |
//! | `theta_n`  | news discriminator MLP                                |
//! | `theta_e`  | evidence discriminator MLP                            |

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, NodeId};
use crate::corpus::{NewsInstance, PAD};
use crate::error::{DalError, Result};
use crate::rng::Rng;
use crate::tensor::{Init, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Feature,
    Word,
    Sentence,
    NewsDisc,
    EvidDisc,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Feature,
        Group::Word,
        Group::Sentence,
        Group::NewsDisc,
        Group::EvidDisc,
    ];
    pub const MAIN: [Group; 3] = [Group::Feature, Group::Word, Group::Sentence];
    pub const DISCRIMINATORS: [Group; 2] = [Group::NewsDisc, Group::EvidDisc];

    pub fn name(self) -> &'static str {
        match self {
            Group::Feature => "theta_f",
            Group::Word => "theta_w",
            Group::Sentence => "theta_s",
            Group::NewsDisc => "theta_n",
            Group::EvidDisc => "theta_e",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    NewsOnly,
    EvidenceOnly,
    #[default]
    Both,
}

impl InputMode {
    pub const ALL: [InputMode; 3] = [InputMode::NewsOnly, InputMode::EvidenceOnly, InputMode::Both];

    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::NewsOnly => "news_only",
            InputMode::EvidenceOnly => "evidence_only",
            InputMode::Both => "both",
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InputMode {
    type Err = DalError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| DalError::Config(format!("unknown input mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub d_w: usize,
    pub d_s: usize,
    pub attn_hidden: usize,
    pub disc_hidden: usize,
    pub cls_hidden: usize,
}

impl ModelDims {
    pub fn new(vocab: usize) -> Self {
        Self {
            vocab,
            d_w: 32,
            d_s: 32,
            attn_hidden: 16,
            disc_hidden: 32,
            cls_hidden: 64,
        }
    }
}

// Slot order of the parameter list. Checkpoints store names, not slots.
#[derive(Debug, Clone, Copy)]
#[repr(usize)]
enum P {
    Embed,
    NewsProj,
    NewsProjB,
    AttNews,
    AttWord,
    AttB,
    AttV,
    EvidProj,
    EvidProjB,
    Query,
    SentQ,
    ClsW1,
    ClsB1,
    ClsW2,
    ClsB2,
    NDiscW1,
    NDiscB1,
    NDiscW2,
    NDiscB2,
    EDiscW1,
    EDiscB1,
    EDiscW2,
    EDiscB2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub group: Group,
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    dims: ModelDims,
    params: Vec<Param>,
    frozen: [bool; 5],
}

struct Layout {
    group: Group,
    name: &'static str,
    shape: Vec<usize>,
    init: Init,
}

fn layout(d: &ModelDims) -> Vec<Layout> {
    use Group::*;
    let l = |group, name, shape: &[usize], init| Layout {
        group,
        name,
        shape: shape.to_vec(),
        init,
    };
    let x = Init::Xavier;
    let z = Init::Zeros;
    vec![
        l(Feature, "embedding", &[d.vocab, d.d_w], Init::Uniform(0.1)),
        l(Word, "news_proj", &[d.d_w, d.d_s], x),
        l(Word, "news_proj_b", &[d.d_s], z),
        l(Word, "attn_news", &[d.d_s, d.attn_hidden], x),
        l(Word, "attn_word", &[d.d_w, d.attn_hidden], x),
        l(Word, "attn_b", &[d.attn_hidden], z),
        l(Word, "attn_v", &[d.attn_hidden, 1], x),
        l(Word, "evid_proj", &[d.d_w, d.d_s], x),
        l(Word, "evid_proj_b", &[d.d_s], z),
        l(Word, "query", &[d.d_s], Init::Uniform(0.1)),
        // Zero start means uniform sentence attention, so the classifier first
        // sees the evidence average; random starts tend to lock onto a single
        // evidence and stall near its per-evidence accuracy.
        l(Sentence, "sent_q", &[d.d_s, d.d_s], z),
        l(Sentence, "cls_w1", &[2 * d.d_s, d.cls_hidden], x),
        l(Sentence, "cls_b1", &[d.cls_hidden], z),
        l(Sentence, "cls_w2", &[d.cls_hidden, 2], x),
        l(Sentence, "cls_b2", &[2], z),
        l(NewsDisc, "ndisc_w1", &[d.d_w, d.disc_hidden], x),
        l(NewsDisc, "ndisc_b1", &[d.disc_hidden], z),
        l(NewsDisc, "ndisc_w2", &[d.disc_hidden, 2], x),
        l(NewsDisc, "ndisc_b2", &[2], z),
        l(EvidDisc, "edisc_w1", &[d.d_w, d.disc_hidden], x),
        l(EvidDisc, "edisc_b1", &[d.disc_hidden], z),
        l(EvidDisc, "edisc_w2", &[d.disc_hidden, 2], x),
        l(EvidDisc, "edisc_b2", &[2], z),
    ]
}

impl ParamSet {
    pub fn init(dims: ModelDims, rng: &mut Rng) -> Result<Self> {
        let params = layout(&dims)
            .into_iter()
            .map(|l| {
                Ok(Param {
                    group: l.group,
                    name: l.name.to_string(),
                    value: Tensor::init(&l.shape, l.init, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_params(dims, params)
    }

    /// Rebuilds a set from named tensors in any order; every expected tensor
    /// must be present exactly once, in its expected group, with its
    /// expected shape.
    pub fn from_params(dims: ModelDims, mut given: Vec<Param>) -> Result<Self> {
        let expected = layout(&dims);
        let mut seen = HashSet::new();
        for p in &given {
            if !seen.insert(p.name.clone()) {
                return Err(DalError::Validation(format!("parameter {} listed twice", p.name)));
            }
        }
        let mut params = Vec::with_capacity(expected.len());
        for l in &expected {
            let pos = given
                .iter()
                .position(|p| p.name == l.name)
                .ok_or_else(|| DalError::Validation(format!("missing parameter {}", l.name)))?;
            let p = given.swap_remove(pos);
            if p.group != l.group || p.value.shape() != l.shape.as_slice() {
                return Err(DalError::Validation(format!(
                    "parameter {} should be {:?} in {}, got {:?} in {}",
                    l.name,
                    l.shape,
                    l.group.name(),
                    p.value.shape(),
                    p.group.name()
                )));
            }
            params.push(p);
        }
        if let Some(extra) = given.first() {
            return Err(DalError::Validation(format!("unknown parameter {}", extra.name)));
        }
        Ok(Self {
            dims,
            params,
            frozen: [false; 5],
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn is_frozen(&self, g: Group) -> bool {
        self.frozen[g as usize]
    }

    pub fn set_frozen(&mut self, groups: &[Group], frozen: bool) {
        for &g in groups {
            self.frozen[g as usize] = frozen;
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen = [false; 5];
    }

    pub fn group_tensors(&self, g: Group) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(move |p| p.group == g)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    /// SHA-256 over the raw bytes of every tensor in `groups`.
    pub fn groups_hash(&self, groups: &[Group]) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| groups.contains(&p.group)) {
            h.update(p.name.as_bytes());
            for x in p.value.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Registers every tensor as a graph leaf; frozen groups do not require grad.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let ids = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), !self.is_frozen(p.group)))
            .collect();
        Bound::new(g, ids, self.dims)
    }

    /// Like [`bind`](Self::bind) but nothing requires grad.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        let ids = self.params.iter().map(|p| g.leaf(p.value.clone(), false)).collect();
        Bound::new(g, ids, self.dims)
    }
}

/// Parameters registered in one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    ids: Vec<NodeId>,
    dims: ModelDims,
    // embedding · attn_word for the whole vocabulary. Gathering rows of this
    // gives the same numbers as projecting gathered embeddings, at a fraction
    // of the cost when many evidences are processed in one graph.
    word_keys: NodeId,
}

/// Intermediate results of the main forward pass, exposed for inspection.
#[derive(Debug, Clone)]
pub struct MainOutput {
    pub probs: NodeId,
    pub news_embedding: NodeId,
    pub evidence_embeddings: Vec<NodeId>,
    pub word_attention: Vec<NodeId>,
    pub sentence_attention: Option<NodeId>,
}

impl Bound {
    fn new(g: &mut Graph, ids: Vec<NodeId>, dims: ModelDims) -> Self {
        let word_keys = g
            .matmul(ids[P::Embed as usize], ids[P::AttWord as usize])
            .expect("layout shapes agree");
        Self { ids, dims, word_keys }
    }

    /// Binds to leaves the caller already created, in [`ParamSet::params`]
    /// order. Gradient checks use this to perturb raw tensors.
    pub fn from_leaves(g: &mut Graph, ids: &[NodeId], dims: ModelDims) -> Result<Self> {
        let expected = layout(&dims);
        if ids.len() != expected.len() {
            return Err(DalError::InvalidArgument(format!(
                "expected {} parameter leaves, got {}",
                expected.len(),
                ids.len()
            )));
        }
        for (l, &id) in expected.iter().zip(ids) {
            if g.shape(id) != l.shape.as_slice() {
                return Err(DalError::ShapeMismatch(format!(
                    "{}: expected {:?}, got {:?}",
                    l.name,
                    l.shape,
                    g.shape(id)
                )));
            }
        }
        Ok(Self::new(g, ids.to_vec(), dims))
    }

    fn p(&self, slot: P) -> NodeId {
        self.ids[slot as usize]
    }

    /// Leaf id of every parameter, in [`ParamSet::params`] order.
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    fn linear_vec(&self, g: &mut Graph, x: NodeId, w: P, b: Option<P>) -> Result<NodeId> {
        match b {
            Some(b) => g.linear(x, self.p(w), self.p(b)),
            None => {
                let n_in = g.shape(x)[0];
                let row = g.reshape(x, &[1, n_in])?;
                let y = g.matmul(row, self.p(w))?;
                let n_out = g.shape(y)[1];
                g.reshape(y, &[n_out])
            }
        }
    }

    fn content(tokens: &[usize]) -> Result<Vec<usize>> {
        let ids: Vec<usize> = tokens.iter().copied().filter(|&t| t != PAD).collect();
        if ids.is_empty() {
            return Err(DalError::Validation("token sequence is empty or all PAD".into()));
        }
        Ok(ids)
    }

    /// Embedding lookup of the non-PAD tokens: `[len, d_w]`.
    pub fn encode(&self, g: &mut Graph, tokens: &[usize]) -> Result<NodeId> {
        g.gather_rows(self.p(P::Embed), &Self::content(tokens)?)
    }

    /// Mean over word rows, projected to `d_s` with tanh.
    pub fn pool_news(&self, g: &mut Graph, words: NodeId) -> Result<NodeId> {
        let mean = g.mean_rows(words)?;
        let y = self.linear_vec(g, mean, P::NewsProj, Some(P::NewsProjB))?;
        Ok(g.tanh(y))
    }

    /// Claim-aware attention of the news embedding over evidence words.
    /// Returns `(s_e, word weights)`.
    pub fn word_interact(&self, g: &mut Graph, s_n: NodeId, words: NodeId) -> Result<(NodeId, NodeId)> {
        let word_part = g.matmul(words, self.p(P::AttWord))?;
        let news_part = self.linear_vec(g, s_n, P::AttNews, Some(P::AttB))?;
        self.word_attend(g, news_part, words, word_part)
    }

    fn word_attend(&self, g: &mut Graph, news_part: NodeId, words: NodeId, word_part: NodeId) -> Result<(NodeId, NodeId)> {
        let len = g.shape(words)[0];
        let hidden = g.add_row(word_part, news_part)?;
        let hidden = g.tanh(hidden);
        let scores = g.matmul(hidden, self.p(P::AttV))?;
        let scores = g.reshape(scores, &[len])?;
        let weights = g.softmax(scores)?;
        let w_row = g.reshape(weights, &[1, len])?;
        let ctx = g.matmul(w_row, words)?;
        let ctx = g.reshape(ctx, &[self.dims.d_w])?;
        let s_e = self.linear_vec(g, ctx, P::EvidProj, Some(P::EvidProjB))?;
        Ok((g.tanh(s_e), weights))
    }

    /// Dot-product attention of the (transformed) news embedding over the
    /// evidence embeddings. Returns `(context, weights)`.
    pub fn sentence_attention(&self, g: &mut Graph, s_n: NodeId, evid: &[NodeId]) -> Result<(NodeId, NodeId)> {
        if evid.is_empty() {
            return Err(DalError::Validation("sentence interaction needs at least one evidence".into()));
        }
        let d = self.dims.d_s;
        let n = evid.len();
        let stacked = g.concat(evid)?;
        let stacked = g.reshape(stacked, &[n, d])?;
        let q = self.linear_vec(g, s_n, P::SentQ, None)?;
        let q = g.reshape(q, &[d, 1])?;
        let scores = g.matmul(stacked, q)?;
        let scores = g.reshape(scores, &[n])?;
        let weights = g.softmax(scores)?;
        let w_row = g.reshape(weights, &[1, n])?;
        let ctx = g.matmul(w_row, stacked)?;
        Ok((g.reshape(ctx, &[d])?, weights))
    }

    /// Classifier MLP on `concat(s_n, context)`; returns probabilities.
    pub fn classify(&self, g: &mut Graph, s_n: NodeId, ctx: NodeId) -> Result<NodeId> {
        let x = g.concat(&[s_n, ctx])?;
        let h = self.linear_vec(g, x, P::ClsW1, Some(P::ClsB1))?;
        let h = g.tanh(h);
        let logits = self.linear_vec(g, h, P::ClsW2, Some(P::ClsB2))?;
        g.softmax(logits)
    }

    pub fn sent_interact(&self, g: &mut Graph, s_n: NodeId, evid: &[NodeId]) -> Result<NodeId> {
        let (ctx, _) = self.sentence_attention(g, s_n, evid)?;
        self.classify(g, s_n, ctx)
    }

    pub fn forward_main(&self, g: &mut Graph, inst: &NewsInstance, mode: InputMode) -> Result<NodeId> {
        Ok(self.forward_main_detailed(g, inst, mode)?.probs)
    }

    pub fn forward_main_detailed(&self, g: &mut Graph, inst: &NewsInstance, mode: InputMode) -> Result<MainOutput> {
        let s_n = match mode {
            InputMode::EvidenceOnly => self.p(P::Query),
            _ => {
                let w_n = self.encode(g, &inst.news)?;
                self.pool_news(g, w_n)?
            }
        };
        if mode == InputMode::NewsOnly {
            let zeros = g.constant(Tensor::zeros(&[self.dims.d_s])?);
            let probs = self.classify(g, s_n, zeros)?;
            return Ok(MainOutput {
                probs,
                news_embedding: s_n,
                evidence_embeddings: Vec::new(),
                word_attention: Vec::new(),
                sentence_attention: None,
            });
        }
        if inst.evidences.is_empty() {
            return Err(DalError::Validation(format!("{}: no evidences", inst.id)));
        }
        let mut evid = Vec::with_capacity(inst.evidences.len());
        let mut word_attention = Vec::with_capacity(inst.evidences.len());
        let news_part = self.linear_vec(g, s_n, P::AttNews, Some(P::AttB))?;
        for e in &inst.evidences {
            let ids = Self::content(e)?;
            let w_e = g.gather_rows(self.p(P::Embed), &ids)?;
            let keys = g.gather_rows(self.word_keys, &ids)?;
            let (s_e, w) = self.word_attend(g, news_part, w_e, keys)?;
            evid.push(s_e);
            word_attention.push(w);
        }
        let (ctx, weights) = self.sentence_attention(g, s_n, &evid)?;
        let probs = self.classify(g, s_n, ctx)?;
        Ok(MainOutput {
            probs,
            news_embedding: s_n,
            evidence_embeddings: evid,
            word_attention,
            sentence_attention: Some(weights),
        })
    }

    fn disc_mlp(&self, g: &mut Graph, f: NodeId, slots: [P; 4]) -> Result<NodeId> {
        let h = self.linear_vec(g, f, slots[0], Some(slots[1]))?;
        let h = g.tanh(h);
        let logits = self.linear_vec(g, h, slots[2], Some(slots[3]))?;
        g.softmax(logits)
    }

    /// News-only prediction from mean-pooled raw news word embeddings.
    pub fn forward_news_disc(&self, g: &mut Graph, inst: &NewsInstance) -> Result<NodeId> {
        let w_n = self.encode(g, &inst.news)?;
        let f = g.mean_rows(w_n)?;
        self.disc_mlp(g, f, [P::NDiscW1, P::NDiscB1, P::NDiscW2, P::NDiscB2])
    }

    /// Mean of per-evidence probability vectors, each from mean-pooled raw
    /// evidence word embeddings.
    pub fn forward_evid_disc(&self, g: &mut Graph, inst: &NewsInstance) -> Result<NodeId> {
        if inst.evidences.is_empty() {
            return Err(DalError::Validation(format!("{}: no evidences", inst.id)));
        }
        // All evidences go through the MLP as one [n, d_w] matrix.
        let mut pooled = Vec::with_capacity(inst.evidences.len());
        for e in &inst.evidences {
            let w_e = self.encode(g, e)?;
            pooled.push(g.mean_rows(w_e)?);
        }
        let n = pooled.len();
        let f = g.concat(&pooled)?;
        let f = g.reshape(f, &[n, self.dims.d_w])?;
        let h = g.matmul(f, self.p(P::EDiscW1))?;
        let h = g.add_row(h, self.p(P::EDiscB1))?;
        let h = g.tanh(h);
        let logits = g.matmul(h, self.p(P::EDiscW2))?;
        let logits = g.add_row(logits, self.p(P::EDiscB2))?;
        let per = g.softmax_rows(logits)?;
        g.mean_rows(per)
    }
}

/// Which head a prediction comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Main(InputMode),
    NewsDisc,
    EvidDisc,
}

/// Probability vectors for each instance, with no gradient tracking.
pub fn predict(params: &ParamSet, insts: &[NewsInstance], head: Head) -> Result<Vec<[f64; 2]>> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let mark = g.len();
    let mut out = Vec::with_capacity(insts.len());
    for inst in insts {
        let probs = match head {
            Head::Main(mode) => bound.forward_main(&mut g, inst, mode)?,
            Head::NewsDisc => bound.forward_news_disc(&mut g, inst)?,
            Head::EvidDisc => bound.forward_evid_disc(&mut g, inst)?,
        };
        let v = g.value(probs).data();
        out.push([v[0], v[1]]);
        g.truncate(mark);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_benchmark, GeneratorConfig, Platform, Setting};

    fn dims() -> ModelDims {
        ModelDims {
            vocab: 30,
            d_w: 4,
            d_s: 3,
            attn_hidden: 3,
            disc_hidden: 3,
            cls_hidden: 5,
        }
    }

    fn inst(news: Vec<usize>, evidences: Vec<Vec<usize>>) -> NewsInstance {
        NewsInstance {
            id: "t".into(),
            news,
            evidences,
            label: 1,
            topic: 0,
            platform: Platform::A,
        }
    }

    fn params(seed: u64) -> ParamSet {
        ParamSet::init(dims(), &mut Rng::new(seed)).unwrap()
    }

    fn probs(p: &ParamSet, i: &NewsInstance, head: Head) -> [f64; 2] {
        predict(p, std::slice::from_ref(i), head).unwrap()[0]
    }

    #[test]
    fn groups_partition_all_tensors() {
        let p = params(0);
        let total: usize = Group::ALL.iter().map(|&g| p.group_tensors(g).count()).sum();
        assert_eq!(total, p.params().len());
        let names: HashSet<_> = p.params().iter().map(|q| q.name.clone()).collect();
        assert_eq!(names.len(), p.params().len());
        assert!(p.group_tensors(Group::Feature).all(|q| q.name == "embedding"));
    }

    #[test]
    fn from_params_rejects_missing_and_misplaced() {
        let p = params(0);
        let mut v = p.params().to_vec();
        v.pop();
        assert!(ParamSet::from_params(dims(), v).is_err());
        let mut v = p.params().to_vec();
        v[0].group = Group::Word;
        assert!(ParamSet::from_params(dims(), v).is_err());
        let mut v = p.params().to_vec();
        v.reverse();
        assert_eq!(ParamSet::from_params(dims(), v).unwrap(), p);
    }

    #[test]
    fn encode_is_a_lookup() {
        let p = params(1);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let w = b.encode(&mut g, &[3]).unwrap();
        assert_eq!(g.value(w).data(), p.get("embedding").unwrap().row(3));
        let w2 = b.encode(&mut g, &[3, 3]).unwrap();
        assert_eq!(g.value(w2).row(0), g.value(w2).row(1));
        assert!(matches!(b.encode(&mut g, &[0, 0]), Err(DalError::Validation(_))));
        assert!(matches!(b.encode(&mut g, &[30]), Err(DalError::Validation(_))));
        // PAD is dropped before lookup.
        let w3 = b.encode(&mut g, &[0, 3, 0]).unwrap();
        assert_eq!(g.shape(w3), &[1, 4]);
    }

    #[test]
    fn encode_gradient_counts_occurrences() {
        let p = params(1);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let w = b.encode(&mut g, &[3, 3]).unwrap();
        let l = g.sum(w);
        g.backward(l).unwrap();
        let grad = g.grad(b.ids()[0]);
        assert_eq!(grad.row(3), &[2.0; 4]);
        assert_eq!(grad.row(2), &[0.0; 4]);
    }

    #[test]
    fn pool_news_is_permutation_invariant() {
        let p = params(2);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let a = b.encode(&mut g, &[4, 5, 6]).unwrap();
        let c = b.encode(&mut g, &[6, 4, 5]).unwrap();
        let sa = b.pool_news(&mut g, a).unwrap();
        let sc = b.pool_news(&mut g, c).unwrap();
        let (va, vc) = (g.value(sa).data().to_vec(), g.value(sc).data().to_vec());
        for (x, y) in va.iter().zip(&vc) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn zeroed_attention_gives_projected_mean() {
        let mut p = params(3);
        p.get_mut("attn_v").unwrap().fill(0.0);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let wn = b.encode(&mut g, &[4, 5]).unwrap();
        let s_n = b.pool_news(&mut g, wn).unwrap();
        let we = b.encode(&mut g, &[7, 8, 9]).unwrap();
        let (s_e, weights) = b.word_interact(&mut g, s_n, we).unwrap();
        for &w in g.value(weights).data() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        // Reference: tanh(mean(rows) * P + b) computed by hand.
        let emb = p.get("embedding").unwrap();
        let proj = p.get("evid_proj").unwrap();
        let bias = p.get("evid_proj_b").unwrap();
        let mean: Vec<f64> = (0..4).map(|j| (emb.row(7)[j] + emb.row(8)[j] + emb.row(9)[j]) / 3.0).collect();
        for k in 0..3 {
            let z: f64 = (0..4).map(|j| mean[j] * proj.data()[j * 3 + k]).sum::<f64>() + bias.data()[k];
            assert!((g.value(s_e).data()[k] - z.tanh()).abs() < 1e-12);
        }

        let one = b.encode(&mut g, &[7]).unwrap();
        let (_, w1) = b.word_interact(&mut g, s_n, one).unwrap();
        assert_eq!(g.value(w1).data(), &[1.0]);
    }

    #[test]
    fn sentence_attention_edge_cases() {
        let p = params(4);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let s_n = g.constant(Tensor::vector(vec![0.3, -0.2, 0.5]).unwrap());
        let e = g.constant(Tensor::vector(vec![0.1, 0.7, -0.4]).unwrap());
        let (ctx, w) = b.sentence_attention(&mut g, s_n, &[e]).unwrap();
        assert_eq!(g.value(w).data(), &[1.0]);
        assert_eq!(g.value(ctx).data(), g.value(e).data());
        let (ctx3, w3) = b.sentence_attention(&mut g, s_n, &[e, e, e]).unwrap();
        assert!((g.value(w3).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in g.value(ctx3).data().iter().zip(g.value(e).data()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(b.sentence_attention(&mut g, s_n, &[]).is_err());
    }

    #[test]
    fn path_exclusion_by_mode() {
        let p = params(5);
        let base = inst(vec![1, 2, 3], vec![vec![4, 5], vec![6, 7, 8]]);
        let other_evid = inst(vec![1, 2, 3], vec![vec![9, 10, 11], vec![12]]);
        let other_news = inst(vec![13, 14], vec![vec![4, 5], vec![6, 7, 8]]);

        let no = Head::Main(InputMode::NewsOnly);
        assert_eq!(probs(&p, &base, no), probs(&p, &other_evid, no));
        let eo = Head::Main(InputMode::EvidenceOnly);
        assert_eq!(probs(&p, &base, eo), probs(&p, &other_news, eo));
        let both = Head::Main(InputMode::Both);
        assert_ne!(probs(&p, &base, both), probs(&p, &other_evid, both));

        assert_eq!(probs(&p, &base, Head::NewsDisc), probs(&p, &other_evid, Head::NewsDisc));
        assert_eq!(probs(&p, &base, Head::EvidDisc), probs(&p, &other_news, Head::EvidDisc));
    }

    #[test]
    fn news_disc_ignores_token_order() {
        let p = params(6);
        let a = inst(vec![1, 2, 3, 4], vec![vec![5]]);
        let b = inst(vec![4, 3, 1, 2], vec![vec![5]]);
        let (pa, pb) = (probs(&p, &a, Head::NewsDisc), probs(&p, &b, Head::NewsDisc));
        assert!((pa[0] - pb[0]).abs() < 1e-15);
    }

    #[test]
    fn evid_disc_averages_probabilities() {
        let p = params(7);
        let one = inst(vec![1], vec![vec![5, 6]]);
        let three = inst(vec![1], vec![vec![5, 6], vec![5, 6], vec![6, 5]]);
        let (a, b) = (probs(&p, &one, Head::EvidDisc), probs(&p, &three, Head::EvidDisc));
        assert!((a[0] - b[0]).abs() < 1e-15 && (a[1] - b[1]).abs() < 1e-15);

        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 2], vec![0.2, 0.8, 0.6, 0.4]).unwrap());
        let m = g.mean_rows(x).unwrap();
        let v = g.value(m).data();
        assert!((v[0] - 0.4).abs() < 1e-15 && (v[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn disc_gradients_stay_out_of_interaction_groups() {
        let p = params(8);
        let i = inst(vec![1, 2], vec![vec![3, 4], vec![5]]);
        for disc in [Head::NewsDisc, Head::EvidDisc] {
            let mut g = Graph::new();
            let b = p.bind(&mut g);
            let probs = match disc {
                Head::NewsDisc => b.forward_news_disc(&mut g, &i).unwrap(),
                _ => b.forward_evid_disc(&mut g, &i).unwrap(),
            };
            let l = g.cross_entropy(probs, 1).unwrap();
            g.backward(l).unwrap();
            for (param, &id) in p.params().iter().zip(b.ids()) {
                let nonzero = g.grad(id).data().iter().any(|&x| x != 0.0);
                let expected_group = if disc == Head::NewsDisc { Group::NewsDisc } else { Group::EvidDisc };
                if param.group == Group::Word || param.group == Group::Sentence {
                    assert!(!nonzero, "{} got gradient", param.name);
                }
                if param.group == expected_group && param.name.contains("w") {
                    assert!(nonzero, "{} got no gradient", param.name);
                }
            }
        }
    }

    #[test]
    fn frozen_groups_get_zero_grad() {
        let mut p = params(9);
        p.set_frozen(&Group::MAIN, true);
        let i = inst(vec![1, 2], vec![vec![3, 4]]);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let pr = b.forward_main(&mut g, &i, InputMode::Both).unwrap();
        let pn = b.forward_news_disc(&mut g, &i).unwrap();
        let l1 = g.cross_entropy(pr, 1).unwrap();
        let l2 = g.cross_entropy(pn, 0).unwrap();
        let l = g.add(l1, l2).unwrap();
        g.backward(l).unwrap();
        for (param, &id) in p.params().iter().zip(b.ids()) {
            if Group::MAIN.contains(&param.group) {
                assert!(g.grad(id).data().iter().all(|&x| x.to_bits() == 0));
            }
        }
    }

    #[test]
    fn probabilities_and_attention_are_normalised() {
        let cfg = GeneratorConfig {
            n_train: 20,
            n_valid: 1,
            n_test_id: 1,
            n_test_ood: 1,
            ..GeneratorConfig::default()
        };
        let bench = generate_benchmark(&cfg, Setting::CrossPlatform).unwrap();
        let p = ParamSet::init(ModelDims::new(cfg.vocab().size()), &mut Rng::new(1)).unwrap();
        let mut g = Graph::new();
        let b = p.bind_frozen(&mut g);
        for i in &bench.train {
            let out = b.forward_main_detailed(&mut g, i, InputMode::Both).unwrap();
            let s: f64 = g.value(out.probs).data().iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            let w: f64 = g.value(out.sentence_attention.unwrap()).data().iter().sum();
            assert!((w - 1.0).abs() < 1e-9);
            for head in [b.forward_news_disc(&mut g, i).unwrap(), b.forward_evid_disc(&mut g, i).unwrap()] {
                let v = g.value(head).data();
                assert!(v.iter().all(|&x| x >= 0.0));
                assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn input_mode_parsing() {
        assert_eq!("news-only".parse::<InputMode>().unwrap(), InputMode::NewsOnly);
        assert_eq!("both".parse::<InputMode>().unwrap(), InputMode::Both);
        assert!("nope".parse::<InputMode>().is_err());
    }
}
