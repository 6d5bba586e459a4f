//! Pre-training and fine-tuning loops, evaluation and attention dumps.
//!
//! One example per page. Gradients are averaged over a batch and applied
//! with Adam under the linear warmup/decay schedule. Every random choice
//! comes from a stream keyed by `(seed, purpose, example id)`, so a run is
//! a function of its configuration and corpus.

use std::io::Write;

use serde::Serialize;

use super::checkpoint::{round_to_f32, Checkpoint};
use super::config::RunConfig;
use crate::attention::{Encoder, EncoderOutput};
use crate::doc::Document;
use crate::embedder::{build_inputs, patch_features, SequenceInputs, Vocab};
use crate::error::{Error, Result};
use crate::heads::{
    anls, argmax, qa_decode, BioLabels, Entity, HeadKind, MatchCounts, QaInputs, TaskHead,
};
use crate::numerics::{Adam, LinearWarmupDecay, ParamStore, RngStream, Tape, Tensor};
use crate::pretrain::{build_example, rop_hits, LossReport, PretrainExample, PretrainModel};
use crate::serializer::layout_order;

/// Example ids at or above this value belong to the fixed probe set used
/// to measure the loss before and after training.
const PROBE_ID_BASE: u64 = 1 << 40;
const PROBE_PAGES: usize = 64;
const DONORS_PER_PAGE: usize = 3;

fn write_json_line<T: Serialize>(log: &mut Option<&mut dyn Write>, value: &T) -> Result<()> {
    if let Some(w) = log.as_mut() {
        let line = serde_json::to_string(value)?;
        writeln!(w, "{line}").map_err(|e| Error::io("<log>", e))?;
    }
    Ok(())
}

/// Divides accumulated gradients by the batch size.
fn scale_grads(store: &mut ParamStore, c: f64) {
    for p in store.iter_mut() {
        for g in p.grad.data_mut() {
            *g *= c;
        }
    }
}

fn steps_for(cfg: &RunConfig, examples: usize) -> usize {
    cfg.epochs * examples.div_ceil(cfg.batch_size)
}

/// Clean patch features of a page under the model's fixed patch encoder.
pub fn page_patches(doc: &Document, store: &ParamStore, encoder: &Encoder) -> Result<Tensor> {
    patch_features(&doc.page_image(), store.value(encoder.emb.patch_encoder))
}

/// Pages prepared for pre-training: layout reading order and clean patch
/// features (used as replacement donors).
pub struct PretrainCorpus<'a> {
    pub docs: &'a [Document],
    pub orders: Vec<Vec<usize>>,
    pub patches: Vec<Tensor>,
}

impl<'a> PretrainCorpus<'a> {
    pub fn new(docs: &'a [Document], store: &ParamStore, encoder: &Encoder) -> Result<Self> {
        if docs.len() < 2 {
            return Err(Error::InvalidArgument("pre-training needs at least two pages".into()));
        }
        Ok(PretrainCorpus {
            docs,
            orders: docs.iter().map(|d| layout_order(d).permutation).collect(),
            patches: docs.iter().map(|d| page_patches(d, store, encoder)).collect::<Result<_>>()?,
        })
    }

    /// The corrupted example for page `i` under example id `id`.
    pub fn example(&self, cfg: &RunConfig, vocab: &Vocab, store: &ParamStore, encoder: &Encoder, i: usize, id: u64) -> Result<PretrainExample> {
        let n = self.docs.len();
        let mut rng = RngStream::new(cfg.seed, "donor", id);
        let donors: Vec<&Tensor> = (0..DONORS_PER_PAGE.min(n - 1))
            .map(|_| &self.patches[(i + 1 + rng.below(n - 1)) % n])
            .collect();
        build_example(
            &self.docs[i],
            &self.orders[i],
            vocab,
            cfg.max_text_len,
            store.value(encoder.emb.patch_encoder),
            &donors,
            &cfg.corruption(),
            cfg.seed,
            id,
        )
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

pub struct PretrainOutcome {
    pub store: ParamStore,
    pub model: PretrainModel,
    /// Mean losses on the probe pages before the first and after the last
    /// update.
    pub initial: LossReport,
    pub last: LossReport,
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
}

impl PretrainOutcome {
    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        Checkpoint::from_store(&self.store, self.steps as u64, cfg.to_text(), Vec::new())
    }
}

/// Mean losses over the probe pages, with fixed corruption.
pub fn probe_loss(cfg: &RunConfig, vocab: &Vocab, store: &ParamStore, model: &PretrainModel, corpus: &PretrainCorpus) -> Result<LossReport> {
    let n = corpus.docs.len().min(PROBE_PAGES);
    let mut sum = LossReport::default();
    for i in 0..n {
        let ex = corpus.example(cfg, vocab, store, &model.encoder, i, PROBE_ID_BASE + i as u64)?;
        let mut tape = Tape::new();
        let (l, _) = model.losses(&mut tape, store, &ex, None)?;
        sum = sum.add(&l.report(&tape));
    }
    Ok(sum.scaled(1.0 / n as f64))
}

/// Pre-trains a fresh model on `docs` serialized in layout order. Per-epoch
/// mean losses go to `log` as JSON lines. A non-finite loss aborts the run
/// after logging the offending step.
pub fn pretrain_run(cfg: &RunConfig, docs: &[Document], vocab: &Vocab, mut log: Option<&mut dyn Write>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if vocab.len() > cfg.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} entries but vocab_size is {}",
            vocab.len(),
            cfg.vocab_size
        )));
    }
    let mut store = ParamStore::new();
    let model = PretrainModel::init(&mut store, &cfg.encoder(), &mut RngStream::new(cfg.seed, "init", 0))?;
    let corpus = PretrainCorpus::new(docs, &store, &model.encoder)?;
    let initial = probe_loss(cfg, vocab, &store, &model, &corpus)?;
    log::info!("initial probe loss {:.4}", initial.total);

    let n = docs.len();
    let total_steps = steps_for(cfg, n);
    let schedule = LinearWarmupDecay::new(cfg.lr, total_steps.max(1), cfg.warmup_frac)?;
    let mut adam = Adam::new(cfg.adam(), &store)?;
    let mut step = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        RngStream::new(cfg.seed, "shuffle", epoch as u64).shuffle(&mut order);
        let mut sum = LossReport::default();
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            store.zero_grad();
            for &i in batch {
                let id = (epoch * n + i) as u64;
                let ex = corpus.example(cfg, vocab, &store, &model.encoder, i, id)?;
                let mut tape = Tape::new();
                let mut dropout = (cfg.dropout > 0.0).then(|| RngStream::new(cfg.seed, "dropout", id));
                let (l, _) = model.losses(&mut tape, &store, &ex, dropout.as_mut())?;
                let report = l.report(&tape);
                if !report.total.is_finite() {
                    let message = format!("page {i}, losses {report:?}");
                    write_json_line(&mut log, &serde_json::json!({"abort": "non-finite loss", "step": step, "page": i, "loss": report}))?;
                    return Err(Error::NonFinite { step, message });
                }
                sum = sum.add(&report);
                tape.backward_into(l.total, &mut store)?;
            }
            scale_grads(&mut store, 1.0 / batch.len() as f64);
            lr = schedule.lr_at(step);
            adam.step(&mut store, lr)?;
            step += 1;
        }
        let entry = EpochLog {
            epoch,
            steps: step,
            lr,
            loss: sum.scaled(1.0 / n as f64),
        };
        log::info!("epoch {epoch}: total {:.4}", entry.loss.total);
        write_json_line(&mut log, &entry)?;
        epochs.push(entry);
    }
    round_to_f32(&mut store);
    let last = probe_loss(cfg, vocab, &store, &model, &corpus)?;
    Ok(PretrainOutcome {
        store,
        model,
        initial,
        last,
        epochs,
        steps: step,
    })
}

/// ROP next-token accuracy on uncorrupted pages in layout order: the share
/// of word tokens whose head-averaged final-layer score peaks at their
/// successor. Also returns the uniform-chance accuracy `mean(1/m)`.
pub fn rop_accuracy(store: &ParamStore, encoder: &Encoder, docs: &[Document], vocab: &Vocab, max_text_len: usize) -> Result<(f64, f64)> {
    let (mut hits, mut rows, mut chance) = (0usize, 0usize, 0.0);
    for d in docs {
        let order = layout_order(d).permutation;
        let inputs = build_inputs(d, &order, vocab, max_text_len, page_patches(d, store, encoder)?)?;
        let positions = inputs.word_positions();
        let m = positions.len();
        let g = crate::pretrain::build_rop_targets(&(0..m).collect::<Vec<_>>(), m)?;
        let mut tape = Tape::new();
        let out = encoder.forward(&mut tape, store, &inputs, None)?;
        let (h, r, _) = rop_hits(&mut tape, &out, &positions, &g)?;
        hits += h;
        rows += r;
        chance += if m > 0 { 1.0 } else { 0.0 };
    }
    if rows == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((hits as f64 / rows as f64, chance / rows as f64))
}

/// Encoder plus one task head.
pub struct TaskModel {
    pub encoder: Encoder,
    pub head: TaskHead,
}

/// Labels a head needs for `docs`: BIO tags seen in the data, class ids
/// up to the largest one, or the QA start/end pair.
pub fn task_labels(kind: HeadKind, docs: &[Document]) -> Result<Vec<String>> {
    match kind {
        HeadKind::Bio => {
            let seqs: Vec<&[String]> = docs
                .iter()
                .map(|d| d.annotations.bio.as_deref().ok_or_else(|| Error::InvalidDocument("document has no BIO tags".into())))
                .collect::<Result<_>>()?;
            Ok(BioLabels::from_tag_sequences(seqs).tags().to_vec())
        }
        HeadKind::Cls => {
            let top = docs
                .iter()
                .map(|d| d.annotations.class_id.ok_or_else(|| Error::InvalidDocument("document has no class id".into())))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .max()
                .ok_or_else(|| Error::InvalidArgument("no documents".into()))?;
            Ok((0..=top).map(|c| c.to_string()).collect())
        }
        HeadKind::Qa => Ok(vec!["start".into(), "end".into()]),
    }
}

/// Builds the encoder and head, then loads `init` when given. Encoder
/// parameters must all come from the checkpoint; head parameters come
/// from it only when `init_head` is set.
pub fn build_task_model(cfg: &RunConfig, labels: Vec<String>, init: Option<&Checkpoint>, init_head: bool) -> Result<(ParamStore, TaskModel)> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let encoder = Encoder::init(&mut store, &cfg.encoder(), &mut RngStream::new(cfg.seed, "init", 0))?;
    let head = TaskHead::init(&mut store, cfg.task, labels, cfg.d, &mut RngStream::new(cfg.seed, "head", 0))?;
    if let Some(ck) = init {
        if init_head && ck.labels != head.labels {
            return Err(Error::Config(format!(
                "checkpoint head has labels {:?}, task needs {:?}",
                ck.labels, head.labels
            )));
        }
        ck.apply(&mut store, |name| init_head || !name.starts_with("head."))?;
    }
    Ok((store, TaskModel { encoder, head }))
}

/// Loads a fine-tuned checkpoint with its own configuration and labels.
pub fn load_task_model(ck: &Checkpoint) -> Result<(RunConfig, ParamStore, TaskModel)> {
    let cfg = RunConfig::parse(&ck.config)?;
    let (store, model) = build_task_model(&cfg, ck.labels.clone(), Some(ck), true)?;
    Ok((cfg, store, model))
}

/// Loads a pre-training checkpoint.
pub fn load_pretrained(ck: &Checkpoint) -> Result<(RunConfig, ParamStore, PretrainModel)> {
    let cfg = RunConfig::parse(&ck.config)?;
    let mut store = ParamStore::new();
    let model = PretrainModel::init(&mut store, &cfg.encoder(), &mut RngStream::new(cfg.seed, "init", 0))?;
    ck.apply(&mut store, |_| true)?;
    Ok((cfg, store, model))
}

/// One supervised example in dataset order.
enum TaskExample {
    Bio { inputs: SequenceInputs, tags: Vec<String> },
    Qa { qa: QaInputs, span: (usize, usize) },
    Cls { inputs: SequenceInputs, class: usize },
}

fn dataset_inputs(doc: &Document, cfg: &RunConfig, vocab: &Vocab, store: &ParamStore, encoder: &Encoder) -> Result<SequenceInputs> {
    let order: Vec<usize> = (0..doc.len()).collect();
    build_inputs(doc, &order, vocab, cfg.max_text_len, page_patches(doc, store, encoder)?)
}

fn task_examples(kind: HeadKind, docs: &[Document], cfg: &RunConfig, vocab: &Vocab, store: &ParamStore, encoder: &Encoder) -> Result<Vec<TaskExample>> {
    let mut out = Vec::new();
    for d in docs {
        let inputs = dataset_inputs(d, cfg, vocab, store, encoder)?;
        match kind {
            HeadKind::Bio => {
                let tags = d.annotations.bio.clone().ok_or_else(|| Error::InvalidDocument("document has no BIO tags".into()))?;
                out.push(TaskExample::Bio { inputs, tags });
            }
            HeadKind::Cls => {
                let class = d.annotations.class_id.ok_or_else(|| Error::InvalidDocument("document has no class id".into()))?;
                out.push(TaskExample::Cls { inputs, class });
            }
            HeadKind::Qa => {
                for q in &d.annotations.qa {
                    let qa = QaInputs::build(&q.question, &inputs, vocab, cfg.max_text_len)?;
                    if let Some(span) = qa.answer_span(q.answer[0], q.answer[1]) {
                        out.push(TaskExample::Qa { qa, span });
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub task: String,
    pub examples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anls: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

/// Task metrics on `docs` in dataset order. Runs forward passes only.
pub fn eval_run(cfg: &RunConfig, store: &ParamStore, model: &TaskModel, docs: &[Document], vocab: &Vocab) -> Result<EvalMetrics> {
    let kind = model.head.kind;
    let mut m = EvalMetrics {
        task: format!("{kind:?}").to_lowercase(),
        ..EvalMetrics::default()
    };
    match kind {
        HeadKind::Bio => {
            let mut counts = MatchCounts::default();
            for d in docs {
                let gold_tags = d.annotations.bio.as_ref().ok_or_else(|| Error::InvalidDocument("document has no BIO tags".into()))?;
                let inputs = dataset_inputs(d, cfg, vocab, store, &model.encoder)?;
                let mut tape = Tape::new();
                let out = model.encoder.forward(&mut tape, store, &inputs, None)?;
                let pred = model.head.bio_predict(&mut tape, store, out.last(), &inputs, d.len())?;
                counts = counts.merge(MatchCounts::of(&pred, &crate::heads::decode_tags(gold_tags)));
            }
            m.examples = docs.len();
            m.f1 = Some(counts.f1());
            m.precision = Some(counts.precision());
            m.recall = Some(counts.recall());
        }
        HeadKind::Cls => {
            let mut correct = 0;
            for d in docs {
                let gold = d.annotations.class_id.ok_or_else(|| Error::InvalidDocument("document has no class id".into()))?;
                let inputs = dataset_inputs(d, cfg, vocab, store, &model.encoder)?;
                let mut tape = Tape::new();
                let out = model.encoder.forward(&mut tape, store, &inputs, None)?;
                let logits = model.head.cls_logits(&mut tape, store, out.last())?;
                correct += usize::from(argmax(tape.value(logits).row(0)) == gold);
            }
            m.examples = docs.len();
            m.accuracy = Some(if docs.is_empty() { 0.0 } else { correct as f64 / docs.len() as f64 });
        }
        HeadKind::Qa => {
            let mut total = 0.0;
            let mut count = 0;
            for d in docs {
                let inputs = dataset_inputs(d, cfg, vocab, store, &model.encoder)?;
                for q in &d.annotations.qa {
                    let qa = QaInputs::build(&q.question, &inputs, vocab, cfg.max_text_len)?;
                    let mut tape = Tape::new();
                    let out = model.encoder.forward(&mut tape, store, &qa.inputs, None)?;
                    let (s, e) = model.head.qa_logits(&mut tape, store, out.last(), &qa.candidates)?;
                    let pred = qa_decode(tape.value(s).data(), tape.value(e).data(), cfg.max_answer_len)
                        .map(|span| words_text(d, &qa.span_words(span)))
                        .unwrap_or_default();
                    total += anls(&pred, &[&d.span_text(q.answer[0], q.answer[1])]);
                    count += 1;
                }
            }
            m.examples = count;
            m.anls = Some(if count == 0 { 0.0 } else { total / count as f64 });
        }
    }
    Ok(m)
}

pub struct FinetuneOutcome {
    pub store: ParamStore,
    pub model: TaskModel,
    pub metrics: EvalMetrics,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    pub steps: usize,
}

impl FinetuneOutcome {
    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        Checkpoint::from_store(&self.store, self.steps as u64, cfg.to_text(), self.model.head.labels.clone())
    }
}

/// Trains the configured task head on `train`, starting the encoder from
/// `init` or from random initialization, and evaluates on `eval`.
pub fn finetune_run(
    cfg: &RunConfig,
    init: Option<&Checkpoint>,
    train: &[Document],
    eval: &[Document],
    vocab: &Vocab,
    mut log: Option<&mut dyn Write>,
) -> Result<FinetuneOutcome> {
    let labels = task_labels(cfg.task, train)?;
    let (mut store, model) = build_task_model(cfg, labels, init, false)?;
    if cfg.freeze_encoder {
        for p in store.iter_mut() {
            if !p.name.starts_with("head.") {
                p.trainable = false;
            }
        }
    }
    let examples = task_examples(cfg.task, train, cfg, vocab, &store, &model.encoder)?;
    let n = examples.len();
    let total_steps = steps_for(cfg, n);
    let schedule = LinearWarmupDecay::new(cfg.lr, total_steps.max(1), cfg.warmup_frac)?;
    let mut adam = Adam::new(cfg.adam(), &store)?;
    let mut step = 0;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        RngStream::new(cfg.seed, "finetune-shuffle", epoch as u64).shuffle(&mut order);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            store.zero_grad();
            for &i in batch {
                let id = (epoch * n + i) as u64;
                let mut dropout = (cfg.dropout > 0.0).then(|| RngStream::new(cfg.seed, "finetune-dropout", id));
                let mut tape = Tape::new();
                let loss = match &examples[i] {
                    TaskExample::Bio { inputs, tags } => {
                        let out = model.encoder.forward(&mut tape, &store, inputs, dropout.as_mut())?;
                        model.head.bio_loss(&mut tape, &store, out.last(), inputs, tags)?
                    }
                    TaskExample::Cls { inputs, class } => {
                        let out = model.encoder.forward(&mut tape, &store, inputs, dropout.as_mut())?;
                        model.head.cls_loss(&mut tape, &store, out.last(), *class)?
                    }
                    TaskExample::Qa { qa, span } => {
                        let out = model.encoder.forward(&mut tape, &store, &qa.inputs, dropout.as_mut())?;
                        model.head.qa_loss(&mut tape, &store, out.last(), &qa.candidates, *span)?
                    }
                };
                let v = tape.value(loss).item();
                if !v.is_finite() {
                    write_json_line(&mut log, &serde_json::json!({"abort": "non-finite loss", "step": step, "example": i}))?;
                    return Err(Error::NonFinite {
                        step,
                        message: format!("example {i}, loss {v}"),
                    });
                }
                sum += v;
                tape.backward_into(loss, &mut store)?;
            }
            scale_grads(&mut store, 1.0 / batch.len() as f64);
            adam.step(&mut store, schedule.lr_at(step))?;
            step += 1;
        }
        let mean = if n == 0 { 0.0 } else { sum / n as f64 };
        write_json_line(&mut log, &serde_json::json!({"epoch": epoch, "steps": step, "loss": mean}))?;
        losses.push(mean);
    }
    round_to_f32(&mut store);
    let metrics = eval_run(cfg, &store, &model, eval, vocab)?;
    write_json_line(&mut log, &metrics)?;
    Ok(FinetuneOutcome {
        store,
        model,
        metrics,
        losses,
        steps: step,
    })
}

fn words_text(doc: &Document, words: &[usize]) -> String {
    words.iter().map(|&w| doc.words[w].text.as_str()).collect::<Vec<_>>().join(" ")
}

/// Output of a task head on one document.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    Entities(Vec<Entity>),
    Class { id: usize, label: String },
    /// Answer words in sequence order and their text; empty when no span
    /// fits the length limit.
    Answer { words: Vec<usize>, text: String },
}

/// Runs the head on `doc` in dataset order. QA heads need a question.
pub fn predict(cfg: &RunConfig, store: &ParamStore, model: &TaskModel, doc: &Document, vocab: &Vocab, question: Option<&str>) -> Result<Prediction> {
    let inputs = dataset_inputs(doc, cfg, vocab, store, &model.encoder)?;
    let mut tape = Tape::new();
    match model.head.kind {
        HeadKind::Bio => {
            let out = model.encoder.forward(&mut tape, store, &inputs, None)?;
            Ok(Prediction::Entities(model.head.bio_predict(&mut tape, store, out.last(), &inputs, doc.len())?))
        }
        HeadKind::Cls => {
            let out = model.encoder.forward(&mut tape, store, &inputs, None)?;
            let logits = model.head.cls_logits(&mut tape, store, out.last())?;
            let id = argmax(tape.value(logits).row(0));
            Ok(Prediction::Class {
                id,
                label: model.head.labels[id].clone(),
            })
        }
        HeadKind::Qa => {
            let question = question.ok_or_else(|| Error::InvalidArgument("a QA head needs a question".into()))?;
            let qa = QaInputs::build(question, &inputs, vocab, cfg.max_text_len)?;
            let out = model.encoder.forward(&mut tape, store, &qa.inputs, None)?;
            let (s, e) = model.head.qa_logits(&mut tape, store, out.last(), &qa.candidates)?;
            let words = qa_decode(tape.value(s).data(), tape.value(e).data(), cfg.max_answer_len)
                .map(|span| qa.span_words(span))
                .unwrap_or_default();
            let text = words_text(doc, &words);
            Ok(Prediction::Answer { words, text })
        }
    }
}

/// Raw scores `Â` of one layer and head for `doc` in `order`, as CSV with
/// a header row and a leading column of token labels.
#[allow(clippy::too_many_arguments)]
pub fn inspect_attention(
    store: &ParamStore,
    encoder: &Encoder,
    doc: &Document,
    order: &[usize],
    vocab: &Vocab,
    max_text_len: usize,
    layer: usize,
    head: usize,
) -> Result<String> {
    let inputs = build_inputs(doc, order, vocab, max_text_len, page_patches(doc, store, encoder)?)?;
    let mut tape = Tape::new();
    let out: EncoderOutput = encoder.forward(&mut tape, store, &inputs, None)?;
    let scores = out
        .scores
        .get(layer)
        .and_then(|l| l.get(head))
        .ok_or_else(|| Error::InvalidArgument(format!("no layer {layer} head {head}")))?;
    let a = tape.value(*scores);
    let label = |i: usize| {
        if i < inputs.n_text {
            vocab.token(inputs.token_ids[i]).unwrap_or("?").to_string()
        } else {
            format!("[V{}]", i - inputs.n_text)
        }
    };
    let labels: Vec<String> = (0..inputs.len()).map(label).collect();
    let mut csv = String::from("token");
    for l in &labels {
        csv.push(',');
        csv.push_str(l);
    }
    csv.push('\n');
    for (r, l) in labels.iter().enumerate() {
        csv.push_str(l);
        for v in a.row(r) {
            csv.push(',');
            csv.push_str(&format!("{v:.6}"));
        }
        csv.push('\n');
    }
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::{gen_synthetic_corpus, SyntheticSpec};

    fn tiny() -> RunConfig {
        RunConfig {
            layers: 1,
            d: 16,
            heads: 2,
            ffn: 32,
            patch_dim: 4,
            batch_size: 4,
            epochs: 1,
            ..RunConfig::default()
        }
    }

    fn data(n: usize, seed: u64) -> (Vec<Document>, Vocab) {
        let spec = SyntheticSpec::default();
        (gen_synthetic_corpus(&spec, n, seed).unwrap(), spec.vocab().unwrap())
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (docs, vocab) = data(4, 1);
        let cfg = RunConfig { lr: 0.0, ..tiny() };
        let out = pretrain_run(&cfg, &docs, &vocab, None).unwrap();
        let mut fresh = ParamStore::new();
        PretrainModel::init(&mut fresh, &cfg.encoder(), &mut RngStream::new(cfg.seed, "init", 0)).unwrap();
        round_to_f32(&mut fresh);
        for ((_, a), (_, b)) in out.store.iter().zip(fresh.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
        assert!(out.initial.total > 0.0);
        assert_eq!(out.steps, 1);
    }

    #[test]
    fn pretraining_is_deterministic_and_logged() {
        let (docs, vocab) = data(6, 2);
        let cfg = RunConfig { epochs: 2, ..tiny() };
        let mut log_a = Vec::new();
        let a = pretrain_run(&cfg, &docs, &vocab, Some(&mut log_a)).unwrap();
        let mut log_b = Vec::new();
        let b = pretrain_run(&cfg, &docs, &vocab, Some(&mut log_b)).unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(a.checkpoint(&cfg).to_bytes(), b.checkpoint(&cfg).to_bytes());
        let text = String::from_utf8(log_a).unwrap();
        assert_eq!(text.lines().count(), 2);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(first["total"].as_f64().unwrap() > 0.0);
    }

    #[test]
    fn zero_epoch_finetune_reports_untrained_metrics() {
        let (docs, vocab) = data(6, 3);
        for task in [HeadKind::Bio, HeadKind::Cls, HeadKind::Qa] {
            let cfg = RunConfig { epochs: 0, task, ..tiny() };
            let a = finetune_run(&cfg, None, &docs, &docs, &vocab, None).unwrap();
            let (store, model) = build_task_model(&cfg, task_labels(task, &docs).unwrap(), None, false).unwrap();
            let mut rounded = store;
            round_to_f32(&mut rounded);
            assert_eq!(a.metrics, eval_run(&cfg, &rounded, &model, &docs, &vocab).unwrap());
            assert_eq!(a.steps, 0);
        }
    }

    #[test]
    fn finetuned_checkpoint_reproduces_metrics() {
        let (docs, vocab) = data(6, 4);
        let cfg = RunConfig { task: HeadKind::Bio, ..tiny() };
        let out = finetune_run(&cfg, None, &docs, &docs, &vocab, None).unwrap();
        let again = finetune_run(&cfg, None, &docs, &docs, &vocab, None).unwrap();
        assert_eq!(out.metrics, again.metrics);
        let ck = Checkpoint::from_bytes(&out.checkpoint(&cfg).to_bytes()).unwrap();
        let (cfg2, store, model) = load_task_model(&ck).unwrap();
        assert_eq!(eval_run(&cfg2, &store, &model, &docs, &vocab).unwrap(), out.metrics);

        let wrong = Checkpoint {
            labels: vec!["O".into()],
            ..ck
        };
        assert!(load_task_model(&wrong).is_err());
    }

    #[test]
    fn attention_csv_has_one_row_per_position() {
        let (docs, vocab) = data(1, 5);
        let cfg = tiny();
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, &cfg.encoder(), &mut RngStream::new(0, "init", 0)).unwrap();
        let order: Vec<usize> = (0..docs[0].len()).collect();
        let csv = inspect_attention(&store, &enc, &docs[0], &order, &vocab, cfg.max_text_len, 0, 1).unwrap();
        let n = docs[0].len() + 2 + 49;
        assert_eq!(csv.lines().count(), n + 1);
        assert!(csv.lines().all(|l| l.split(',').count() == n + 1));
        assert!(inspect_attention(&store, &enc, &docs[0], &order, &vocab, cfg.max_text_len, 1, 0).is_err());
    }
}
