//! Downstream heads and their metrics: BIO tagging with entity-level F1,
//! extractive QA with ANLS, and [CLS] classification with accuracy.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::attention::Linear;
use crate::doc::BBox;
use crate::embedder::{SequenceInputs, Vocab, CLS, SEP, TYPE_TEXT, TYPE_VISUAL, VISUAL_TOKENS};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Reduction, RngStream, Tape, Tensor, Var};

/// A typed span of words, `start..end` (end exclusive).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Entity {
    pub kind: String,
    pub start: usize,
    pub end: usize,
}

/// Ordered BIO label set with `O` at index 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BioLabels {
    tags: Vec<String>,
}

impl BioLabels {
    /// `O` followed by `B-T`, `I-T` for each entity type.
    pub fn from_types<S: AsRef<str>>(types: &[S]) -> Self {
        let mut tags = vec!["O".to_string()];
        for t in types {
            tags.push(format!("B-{}", t.as_ref()));
            tags.push(format!("I-{}", t.as_ref()));
        }
        BioLabels { tags }
    }

    /// Collects the entity types of tag sequences, sorted.
    pub fn from_tag_sequences<'a>(seqs: impl IntoIterator<Item = &'a [String]>) -> Self {
        let mut types: Vec<&str> = seqs
            .into_iter()
            .flatten()
            .filter_map(|t| t.strip_prefix("B-").or_else(|| t.strip_prefix("I-")))
            .collect();
        types.sort_unstable();
        types.dedup();
        Self::from_types(&types)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn index(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }

    pub fn tag(&self, i: usize) -> &str {
        &self.tags[i]
    }
}

/// Entities of a BIO tag sequence. An `I-` tag that does not continue an
/// entity of its own type starts a new one.
pub fn decode_tags<S: AsRef<str>>(tags: &[S]) -> Vec<Entity> {
    let mut out: Vec<Entity> = Vec::new();
    let mut open: Option<Entity> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        let (begin, kind) = match (tag.strip_prefix("B-"), tag.strip_prefix("I-")) {
            (Some(k), _) => (true, k),
            (None, Some(k)) => (false, k),
            _ => {
                out.extend(open.take());
                continue;
            }
        };
        match &mut open {
            Some(e) if !begin && e.kind == kind => e.end = i + 1,
            _ => {
                out.extend(open.take());
                open = Some(Entity {
                    kind: kind.to_string(),
                    start: i,
                    end: i + 1,
                });
            }
        }
    }
    out.extend(open);
    out
}

/// Word tags from the first-subword rows of `token_logits` (one row per
/// textual token). Words without a token are tagged `O`.
pub fn word_tags(token_logits: &Tensor, first_subwords: &[(usize, usize)], n_words: usize, labels: &BioLabels) -> Vec<String> {
    let mut tags = vec!["O".to_string(); n_words];
    for &(w, pos) in first_subwords {
        tags[w] = labels.tag(argmax(token_logits.row(pos))).to_string();
    }
    tags
}

/// Argmax tags per word, then entity decoding.
pub fn bio_decode(token_logits: &Tensor, first_subwords: &[(usize, usize)], n_words: usize, labels: &BioLabels) -> Vec<Entity> {
    decode_tags(&word_tags(token_logits, first_subwords, n_words, labels))
}

/// First index of the maximum; 0 for an empty slice.
pub fn argmax(xs: &[f64]) -> usize {
    (0..xs.len()).fold(0, |b, i| if xs[i] > xs[b] { i } else { b })
}

/// Exact-match counts, summed over documents for micro F1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl MatchCounts {
    /// Multiset intersection of predicted and gold entities.
    pub fn of(pred: &[Entity], gold: &[Entity]) -> Self {
        let mut pool: HashMap<&Entity, usize> = HashMap::new();
        for g in gold {
            *pool.entry(g).or_default() += 1;
        }
        let mut correct = 0;
        for p in pred {
            if let Some(c) = pool.get_mut(p).filter(|c| **c > 0) {
                *c -= 1;
                correct += 1;
            }
        }
        MatchCounts {
            correct,
            predicted: pred.len(),
            gold: gold.len(),
        }
    }

    pub fn merge(self, o: MatchCounts) -> Self {
        MatchCounts {
            correct: self.correct + o.correct,
            predicted: self.predicted + o.predicted,
            gold: self.gold + o.gold,
        }
    }

    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            0.0
        } else {
            self.correct as f64 / self.predicted as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.gold == 0 {
            0.0
        } else {
            self.correct as f64 / self.gold as f64
        }
    }

    /// `2·correct / (predicted + gold)`; 1 when both sides are empty.
    pub fn f1(&self) -> f64 {
        let denom = self.predicted + self.gold;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.correct as f64 / denom as f64
        }
    }
}

/// Micro F1 over exact `(type, start, end)` matches.
pub fn entity_f1(pred: &[Entity], gold: &[Entity]) -> f64 {
    MatchCounts::of(pred, gold).f1()
}

/// Best `(start, end)` with `start ≤ end < start + max_answer_len` by
/// `start_logits[s] + end_logits[e]`; the first such pair in `(s, e)` order
/// wins ties. `None` if no pair is valid.
pub fn qa_decode(start_logits: &[f64], end_logits: &[f64], max_answer_len: usize) -> Option<(usize, usize)> {
    let n = start_logits.len().min(end_logits.len());
    let mut best: Option<((usize, usize), f64)> = None;
    for s in 0..n {
        for e in s..n.min(s.saturating_add(max_answer_len)) {
            let v = start_logits[s] + end_logits[e];
            if best.is_none_or(|(_, b)| v > b) {
                best = Some(((s, e), v));
            }
        }
    }
    best.map(|(span, _)| span)
}

pub const ANLS_THRESHOLD: f64 = 0.5;

/// Normalized Levenshtein similarity over characters; two empty strings
/// are identical.
pub fn nl_similarity(a: &str, b: &str) -> f64 {
    let len = a.chars().count().max(b.chars().count());
    if len == 0 {
        return 1.0;
    }
    1.0 - strsim::levenshtein(a, b) as f64 / len as f64
}

/// Best thresholded similarity of `pred` to any gold answer.
pub fn anls(pred: &str, golds: &[&str]) -> f64 {
    golds
        .iter()
        .map(|g| nl_similarity(pred, g))
        .map(|s| if s >= ANLS_THRESHOLD { s } else { 0.0 })
        .fold(0.0, f64::max)
}

/// Mean of per-question ANLS; 0 for no questions.
pub fn anls_corpus(preds: &[String], golds: &[Vec<String>]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let total: f64 = preds
        .iter()
        .zip(golds)
        .map(|(p, g)| anls(p, &g.iter().map(String::as_str).collect::<Vec<_>>()))
        .sum();
    total / preds.len() as f64
}

/// Fraction of equal pairs; 0 for empty input.
pub fn accuracy(preds: &[usize], golds: &[usize]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().zip(golds).filter(|(p, g)| p == g).count() as f64 / preds.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Bio,
    Qa,
    Cls,
}

impl HeadKind {
    pub fn param_name(self) -> &'static str {
        match self {
            HeadKind::Bio => "head.bio",
            HeadKind::Qa => "head.qa",
            HeadKind::Cls => "head.cls",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bio" => Ok(HeadKind::Bio),
            "qa" => Ok(HeadKind::Qa),
            "cls" => Ok(HeadKind::Cls),
            other => Err(Error::Config(format!("unknown task {other:?}, expected bio, qa or cls"))),
        }
    }
}

/// A linear task head over encoder outputs. `labels` are BIO tags for
/// `bio`, `start`/`end` for `qa` and class names for `cls`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead {
    pub kind: HeadKind,
    pub labels: Vec<String>,
    pub linear: Linear,
}

impl TaskHead {
    pub fn init(store: &mut ParamStore, kind: HeadKind, labels: Vec<String>, d: usize, rng: &mut RngStream) -> Result<Self> {
        Self::check_labels(kind, &labels)?;
        let linear = Linear::init(store, kind.param_name(), d, labels.len(), true, rng)?;
        Ok(TaskHead { kind, labels, linear })
    }

    /// Looks up an existing head and checks its width against `labels`.
    pub fn from_store(store: &ParamStore, kind: HeadKind, labels: Vec<String>) -> Result<Self> {
        Self::check_labels(kind, &labels)?;
        let linear = Linear::lookup(store, kind.param_name(), true)?;
        let width = store.value(linear.weight).cols();
        if width != labels.len() {
            return Err(Error::Config(format!(
                "{} has {width} outputs but the task has {} labels",
                kind.param_name(),
                labels.len()
            )));
        }
        Ok(TaskHead { kind, labels, linear })
    }

    fn check_labels(kind: HeadKind, labels: &[String]) -> Result<()> {
        if labels.is_empty() {
            return Err(Error::Config("task head needs a non-empty label set".into()));
        }
        if kind == HeadKind::Qa && labels.len() != 2 {
            return Err(Error::Config("a QA head has exactly two outputs".into()));
        }
        Ok(())
    }

    pub fn bio_labels(&self) -> BioLabels {
        BioLabels { tags: self.labels.clone() }
    }

    /// Logits for rows `rows` of `hidden`.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = tape.gather_rows(hidden, rows)?;
        self.linear.forward(tape, store, h)
    }

    /// Mean cross-entropy over first subwords, with tags mapped through
    /// the label set.
    pub fn bio_loss(&self, tape: &mut Tape, store: &ParamStore, hidden: Var, inputs: &SequenceInputs, tags: &[String]) -> Result<Var> {
        let labels = self.bio_labels();
        let firsts = inputs.first_subwords();
        if firsts.is_empty() {
            return Ok(tape.constant(Tensor::scalar(0.0)));
        }
        let rows: Vec<usize> = firsts.iter().map(|f| f.1).collect();
        let logits = self.logits(tape, store, hidden, &rows)?;
        let mut target = Tensor::zeros(&[rows.len(), labels.len()]);
        for (r, &(w, _)) in firsts.iter().enumerate() {
            let tag = tags.get(w).ok_or_else(|| Error::InvalidArgument(format!("no tag for word {w}")))?;
            let c = labels
                .index(tag)
                .ok_or_else(|| Error::Config(format!("tag {tag:?} is not in the head's label set")))?;
            target.set(r, c, 1.0);
        }
        tape.cross_entropy(logits, &target, Reduction::Mean)
    }

    /// Word-level entities predicted for `inputs`.
    pub fn bio_predict(&self, tape: &mut Tape, store: &ParamStore, hidden: Var, inputs: &SequenceInputs, n_words: usize) -> Result<Vec<Entity>> {
        let rows: Vec<usize> = (0..inputs.n_text).collect();
        let logits = self.logits(tape, store, hidden, &rows)?;
        Ok(bio_decode(tape.value(logits), &inputs.first_subwords(), n_words, &self.bio_labels()))
    }

    /// Start and end logits over `candidates`, each `1 × m`.
    pub fn qa_logits(&self, tape: &mut Tape, store: &ParamStore, hidden: Var, candidates: &[usize]) -> Result<(Var, Var)> {
        let logits = self.logits(tape, store, hidden, candidates)?;
        let t = tape.transpose(logits)?;
        Ok((tape.slice(t, 0, 0, 1)?, tape.slice(t, 0, 1, 2)?))
    }

    /// Mean of the start and end cross-entropies; `span` indexes
    /// `candidates`.
    pub fn qa_loss(&self, tape: &mut Tape, store: &ParamStore, hidden: Var, candidates: &[usize], span: (usize, usize)) -> Result<Var> {
        let m = candidates.len();
        if span.0 >= m || span.1 >= m {
            return Err(Error::InvalidArgument(format!("answer span {span:?} outside {m} candidates")));
        }
        let (s, e) = self.qa_logits(tape, store, hidden, candidates)?;
        let mut ts = Tensor::zeros(&[1, m]);
        ts.set(0, span.0, 1.0);
        let mut te = Tensor::zeros(&[1, m]);
        te.set(0, span.1, 1.0);
        let ls = tape.cross_entropy(s, &ts, Reduction::Sum)?;
        let le = tape.cross_entropy(e, &te, Reduction::Sum)?;
        let sum = tape.add(ls, le)?;
        Ok(tape.scale(sum, 0.5))
    }

    /// Logits `1 × classes` from the [CLS] row.
    pub fn cls_logits(&self, tape: &mut Tape, store: &ParamStore, hidden: Var) -> Result<Var> {
        self.logits(tape, store, hidden, &[0])
    }

    pub fn cls_loss(&self, tape: &mut Tape, store: &ParamStore, hidden: Var, class: usize) -> Result<Var> {
        if class >= self.labels.len() {
            return Err(Error::Config(format!("class {class} outside the head's {} classes", self.labels.len())));
        }
        let logits = self.cls_logits(tape, store, hidden)?;
        let mut t = Tensor::zeros(&[1, self.labels.len()]);
        t.set(0, class, 1.0);
        tape.cross_entropy(logits, &t, Reduction::Mean)
    }
}

/// Argmax of a `1 × C` logit row.
pub fn classify(logits: &Tensor) -> usize {
    argmax(logits.row(0))
}

/// Extractive QA inputs: `[CLS] question [SEP] document [SEP]`. Question
/// tokens carry the zero box and no word index, so only document words are
/// answer candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct QaInputs {
    pub inputs: SequenceInputs,
    /// Sequence positions of document tokens.
    pub candidates: Vec<usize>,
}

impl QaInputs {
    pub fn build(question: &str, doc_inputs: &SequenceInputs, vocab: &Vocab, max_text_len: usize) -> Result<Self> {
        let q: Vec<usize> = question.split_whitespace().flat_map(|w| vocab.tokenize_word(w)).collect();
        let body = doc_inputs.n_text.saturating_sub(2);
        let room = max_text_len
            .checked_sub(q.len() + 3)
            .ok_or_else(|| Error::InvalidArgument("question does not fit the textual budget".into()))?;
        let keep = body.min(room);
        let mut ids = vec![CLS];
        ids.extend(&q);
        ids.push(SEP);
        let offset = ids.len();
        ids.extend(&doc_inputs.token_ids[1..1 + keep]);
        ids.push(SEP);
        let n = ids.len();
        let mut words = vec![None; offset];
        words.extend(&doc_inputs.word_of_token[1..1 + keep]);
        words.push(None);
        let mut boxes = vec![BBox::ZERO; offset];
        boxes.extend(&doc_inputs.boxes[1..1 + keep]);
        boxes.push(BBox::ZERO);
        boxes.extend(&doc_inputs.boxes[doc_inputs.n_text..]);
        let inputs = SequenceInputs {
            token_ids: ids,
            word_of_token: words,
            boxes,
            positions: (0..n).chain(0..VISUAL_TOKENS).collect(),
            type_ids: [vec![TYPE_TEXT; n], vec![TYPE_VISUAL; VISUAL_TOKENS]].concat(),
            mask: vec![true; n + VISUAL_TOKENS],
            patches: doc_inputs.patches.clone(),
            n_text: n,
        };
        let candidates = (offset..offset + keep).collect();
        Ok(QaInputs { inputs, candidates })
    }

    /// Candidate indices of the first token of `start_word` and the last
    /// token of `end_word`, if both are present.
    pub fn answer_span(&self, start_word: usize, end_word: usize) -> Option<(usize, usize)> {
        let word = |k: usize| self.inputs.word_of_token[self.candidates[k]];
        let m = self.candidates.len();
        let s = (0..m).find(|&k| word(k) == Some(start_word))?;
        let e = (0..m).rev().find(|&k| word(k) == Some(end_word))?;
        (s <= e).then_some((s, e))
    }

    /// Words covered by a candidate span, in sequence order without
    /// repeats.
    pub fn span_words(&self, span: (usize, usize)) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for k in span.0..=span.1 {
            if let Some(w) = self.inputs.word_of_token[self.candidates[k]] {
                if out.last() != Some(&w) {
                    out.push(w);
                }
            }
        }
        out
    }
}
