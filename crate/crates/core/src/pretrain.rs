//! Pre-training examples and objectives: reading order prediction over the
//! final-layer scores, replaced region prediction from [CLS], masked
//! visual-language modeling with tied output weights, and text-image
//! alignment per token.
//!
//! Corruption runs in a fixed order: line covering on the page image, patch
//! feature extraction, patch replacement on the extracted features, then
//! token masking.

use crate::attention::{Encoder, EncoderConfig, EncoderOutput, Linear};
use crate::doc::{union_bbox, Document, PageImage};
use crate::embedder::{build_inputs, patch_features, SequenceInputs, Vocab, MASK, SPECIAL_TOKENS, VISUAL_TOKENS};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Reduction, RngStream, Tape, Tensor, Var};
use crate::serializer::group_lines;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionConfig {
    /// Fraction of word tokens selected for MVLM.
    pub mvlm_ratio: f64,
    /// Of the selected tokens, the share replaced by [MASK] and the share
    /// replaced by a random token; the rest stay unchanged.
    pub mask_frac: f64,
    pub random_frac: f64,
    /// Fraction of text lines covered for TIA.
    pub tia_ratio: f64,
    /// Fraction of the 49 patches replaced for RRP.
    pub rrp_ratio: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            mvlm_ratio: 0.15,
            mask_frac: 0.8,
            random_frac: 0.1,
            tia_ratio: 0.15,
            rrp_ratio: 0.10,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.mvlm_ratio) && unit(self.mask_frac) && unit(self.random_frac) && unit(self.tia_ratio) && unit(self.rrp_ratio))
            || self.mask_frac + self.random_frac > 1.0
        {
            return Err(Error::Config(format!("corruption ratios out of range: {self:?}")));
        }
        Ok(())
    }
}

/// `round(ratio · n)`, raised to 1 when the ratio is positive and there is
/// anything to select.
pub fn selection_count(ratio: f64, n: usize) -> usize {
    let k = (ratio * n as f64).round() as usize;
    if ratio > 0.0 && n > 0 {
        k.clamp(1, n)
    } else {
        k.min(n)
    }
}

/// Successor matrix over `n_valid` tokens: `G[i][succ(i)] = 1` following
/// `order`, and the last token in `order` points to itself.
pub fn build_rop_targets(order: &[usize], n_valid: usize) -> Result<Tensor> {
    if !crate::doc::is_permutation(order, n_valid) {
        return Err(Error::InvalidArgument(format!("order is not a permutation of 0..{n_valid}")));
    }
    let mut g = Tensor::zeros(&[n_valid, n_valid]);
    for (k, &i) in order.iter().enumerate() {
        let next = order.get(k + 1).copied().unwrap_or(i);
        g.set(i, next, 1.0);
    }
    Ok(g)
}

/// Masked-token selection over the `maskable` positions of `tokens`.
/// Returns the corrupted tokens and `(position, gold id)` targets sorted by
/// position.
pub fn sample_mvlm(
    tokens: &[usize],
    maskable: &[usize],
    vocab_size: usize,
    cfg: &CorruptionConfig,
    rng: &mut RngStream,
) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut out = tokens.to_vec();
    let k = selection_count(cfg.mvlm_ratio, maskable.len());
    let mut picked: Vec<usize> = rng.choose_distinct(maskable.len(), k).into_iter().map(|i| maskable[i]).collect();
    picked.sort_unstable();
    let regular = vocab_size.saturating_sub(SPECIAL_TOKENS.len());
    let mut targets = Vec::with_capacity(k);
    for p in picked {
        targets.push((p, tokens[p]));
        let u = rng.uniform();
        if u < cfg.mask_frac {
            out[p] = MASK;
        } else if u < cfg.mask_frac + cfg.random_frac && regular > 0 {
            out[p] = SPECIAL_TOKENS.len() + rng.below(regular);
        }
    }
    (out, targets)
}

/// Covers `round(ratio · lines)` text lines by painting their boxes black.
/// Returns the covered image and a per-word covered flag.
pub fn sample_tia(
    doc: &Document,
    image: &PageImage,
    lines: &[Vec<usize>],
    ratio: f64,
    rng: &mut RngStream,
) -> (PageImage, Vec<bool>) {
    let mut img = image.clone();
    let mut covered = vec![false; doc.len()];
    let k = selection_count(ratio, lines.len());
    for l in rng.choose_distinct(lines.len(), k) {
        let boxes: Vec<_> = lines[l].iter().map(|&w| doc.words[w].bbox).collect();
        if let Ok(region) = union_bbox(&boxes) {
            img.fill_normalized(&region, 0);
        }
        for &w in &lines[l] {
            covered[w] = true;
        }
    }
    (img, covered)
}

/// Replaces `round(ratio · 49)` patch rows with the same-index rows of
/// donors drawn uniformly from `donors`. Returns the features and 0/1
/// labels.
pub fn sample_rrp(patches: &Tensor, donors: &[&Tensor], ratio: f64, rng: &mut RngStream) -> Result<(Tensor, Vec<f64>)> {
    let n = patches.rows();
    let k = selection_count(ratio, n);
    let mut labels = vec![0.0; n];
    if k == 0 {
        return Ok((patches.clone(), labels));
    }
    if donors.is_empty() {
        return Err(Error::InvalidArgument("patch replacement needs at least one donor page".into()));
    }
    if let Some(bad) = donors.iter().find(|d| d.shape() != patches.shape()) {
        return Err(Error::Shape(format!("donor patches {:?} vs {:?}", bad.shape(), patches.shape())));
    }
    let mut out = patches.clone();
    for p in rng.choose_distinct(n, k) {
        let donor = donors[rng.below(donors.len())];
        out.row_mut(p).copy_from_slice(donor.row(p));
        labels[p] = 1.0;
    }
    Ok((out, labels))
}

/// One corrupted page with its four sets of labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainExample {
    pub inputs: SequenceInputs,
    /// `(sequence position, gold token id)`.
    pub mvlm_targets: Vec<(usize, usize)>,
    pub rrp_labels: Vec<f64>,
    /// Sequence positions of word tokens: the rows and columns of the ROP
    /// problem and the tokens scored by TIA.
    pub text_positions: Vec<usize>,
    /// Covered flag per entry of `text_positions`.
    pub tia_labels: Vec<f64>,
    /// 0 for tokens excluded from TIA (MVLM-selected), 1 otherwise.
    pub tia_weights: Vec<f64>,
    /// Successor matrix over `text_positions`.
    pub rop_targets: Tensor,
}

/// Builds the example for `doc` read in `order` (the reading order the ROP
/// targets follow). `donors` are clean patch features of other pages.
#[allow(clippy::too_many_arguments)]
pub fn build_example(
    doc: &Document,
    order: &[usize],
    vocab: &Vocab,
    max_text_len: usize,
    patch_encoder: &Tensor,
    donors: &[&Tensor],
    cfg: &CorruptionConfig,
    seed: u64,
    example_id: u64,
) -> Result<PretrainExample> {
    let mut tia_rng = RngStream::new(seed, "tia", example_id);
    let mut rrp_rng = RngStream::new(seed, "rrp", example_id);
    let mut mvlm_rng = RngStream::new(seed, "mvlm", example_id);

    let boxes = doc.boxes();
    let all: Vec<usize> = (0..doc.len()).collect();
    let lines = group_lines(&boxes, &all, 0.5);
    let (covered_img, covered) = sample_tia(doc, &doc.page_image(), &lines, cfg.tia_ratio, &mut tia_rng);
    let clean = patch_features(&covered_img, patch_encoder)?;
    let (patches, rrp_labels) = sample_rrp(&clean, donors, cfg.rrp_ratio, &mut rrp_rng)?;

    let inputs = build_inputs(doc, order, vocab, max_text_len, patches)?;
    let text_positions = inputs.word_positions();
    let (tokens, mvlm_targets) = sample_mvlm(&inputs.token_ids, &text_positions, vocab.len(), cfg, &mut mvlm_rng);
    let inputs = inputs.with_tokens(tokens)?;

    let mut tia_weights = vec![1.0; text_positions.len()];
    let mut t = 0;
    for (k, &p) in text_positions.iter().enumerate() {
        while t < mvlm_targets.len() && mvlm_targets[t].0 < p {
            t += 1;
        }
        if t < mvlm_targets.len() && mvlm_targets[t].0 == p {
            tia_weights[k] = 0.0;
        }
    }
    let tia_labels = text_positions
        .iter()
        .map(|&p| f64::from(u8::from(covered[inputs.word_of_token[p].expect("word token")])))
        .collect();
    let n = text_positions.len();
    let rop_targets = build_rop_targets(&(0..n).collect::<Vec<_>>(), n)?;
    Ok(PretrainExample {
        inputs,
        mvlm_targets,
        rrp_labels,
        text_positions,
        tia_labels,
        tia_weights,
        rop_targets,
    })
}

/// Head-averaged final-layer scores restricted to `positions`, `m × m`.
pub fn rop_logits(tape: &mut Tape, scores: &[Var], positions: &[usize]) -> Result<Var> {
    let n = tape.value(*scores.first().ok_or_else(|| Error::InvalidArgument("no attention heads".into()))?).cols();
    let sum = tape.add_all(scores)?;
    let mean = tape.scale(sum, 1.0 / scores.len() as f64);
    let m = positions.len();
    let idx = positions
        .iter()
        .flat_map(|&i| positions.iter().map(move |&j| i * n + j))
        .collect();
    tape.gather_elems(mean, idx, &[m, m])
}

/// `−Σ G_ij log softmax_j(Â_ij)` over the valid textual rows.
pub fn rop_loss(tape: &mut Tape, scores: &[Var], positions: &[usize], g: &Tensor) -> Result<Var> {
    if positions.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let logits = rop_logits(tape, scores, positions)?;
    tape.cross_entropy(logits, g, Reduction::Sum)
}

/// Sum over patches of the BCE between `sigmoid(head(cls))` and the labels.
pub fn rrp_loss(tape: &mut Tape, store: &ParamStore, head: &Linear, cls: Var, labels: &[f64]) -> Result<Var> {
    let logits = head.forward(tape, store, cls)?;
    let p = tape.sigmoid(logits);
    let y = Tensor::new(&[1, labels.len()], labels.to_vec())?;
    tape.binary_cross_entropy(p, &y, None, Reduction::Sum)
}

/// Mean cross-entropy of the targets under logits `hidden · E_tkᵀ`.
pub fn mvlm_loss(
    tape: &mut Tape,
    store: &ParamStore,
    token_table: crate::numerics::ParamId,
    hidden: Var,
    targets: &[(usize, usize)],
) -> Result<Var> {
    if targets.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let h = tape.gather_rows(hidden, &rows)?;
    let table = tape.param(store, token_table);
    let table_t = tape.transpose(table)?;
    let logits = tape.matmul(h, table_t)?;
    let vocab = store.value(token_table).rows();
    let mut target = Tensor::zeros(&[targets.len(), vocab]);
    for (r, &(_, id)) in targets.iter().enumerate() {
        if id >= vocab {
            return Err(Error::OutOfVocabulary { id, rows: vocab });
        }
        target.set(r, id, 1.0);
    }
    tape.cross_entropy(logits, &target, Reduction::Mean)
}

/// Mean BCE of the covered flags over included textual tokens.
pub fn tia_loss(
    tape: &mut Tape,
    store: &ParamStore,
    head: &Linear,
    hidden: Var,
    positions: &[usize],
    labels: &[f64],
    weights: &[f64],
) -> Result<Var> {
    if positions.is_empty() || weights.iter().all(|&w| w == 0.0) {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let h = tape.gather_rows(hidden, positions)?;
    let logits = head.forward(tape, store, h)?;
    let p = tape.sigmoid(logits);
    let m = positions.len();
    let y = Tensor::new(&[m, 1], labels.to_vec())?;
    let w = Tensor::new(&[m, 1], weights.to_vec())?;
    tape.binary_cross_entropy(p, &y, Some(&w), Reduction::Mean)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub rop: f64,
    pub rrp: f64,
    pub mvlm: f64,
    pub tia: f64,
    pub total: f64,
}

/// Unweighted sum of the four objectives.
pub fn total_loss(rop: f64, rrp: f64, mvlm: f64, tia: f64) -> LossReport {
    LossReport {
        rop,
        rrp,
        mvlm,
        tia,
        total: rop + rrp + mvlm + tia,
    }
}

impl LossReport {
    pub fn scaled(&self, c: f64) -> LossReport {
        total_loss(self.rop * c, self.rrp * c, self.mvlm * c, self.tia * c)
    }

    pub fn add(&self, o: &LossReport) -> LossReport {
        total_loss(self.rop + o.rop, self.rrp + o.rrp, self.mvlm + o.mvlm, self.tia + o.tia)
    }
}

/// Loss nodes of one example.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub rop: Var,
    pub rrp: Var,
    pub mvlm: Var,
    pub tia: Var,
    pub total: Var,
}

impl LossVars {
    pub fn report(&self, tape: &Tape) -> LossReport {
        let v = |x: Var| tape.value(x).item();
        LossReport {
            rop: v(self.rop),
            rrp: v(self.rrp),
            mvlm: v(self.mvlm),
            tia: v(self.tia),
            total: v(self.total),
        }
    }
}

/// The encoder with the two pre-training heads. MVLM reuses the token
/// table.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainModel {
    pub encoder: Encoder,
    pub rrp_head: Linear,
    pub tia_head: Linear,
}

impl PretrainModel {
    pub fn init(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut RngStream) -> Result<Self> {
        let encoder = Encoder::init(store, cfg, rng)?;
        let d = cfg.embed.d;
        Ok(PretrainModel {
            encoder,
            rrp_head: Linear::init(store, "head.rrp", d, VISUAL_TOKENS, true, rng)?,
            tia_head: Linear::init(store, "head.tia", d, 1, true, rng)?,
        })
    }

    pub fn from_store(store: &ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        Ok(PretrainModel {
            encoder: Encoder::from_store(store, cfg)?,
            rrp_head: Linear::lookup(store, "head.rrp", true)?,
            tia_head: Linear::lookup(store, "head.tia", true)?,
        })
    }

    pub fn losses(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ex: &PretrainExample,
        dropout: Option<&mut RngStream>,
    ) -> Result<(LossVars, EncoderOutput)> {
        let out = self.encoder.forward(tape, store, &ex.inputs, dropout)?;
        let last = out.last();
        let final_scores = out
            .scores
            .last()
            .ok_or_else(|| Error::Config("reading order prediction needs at least one layer".into()))?;
        let rop = rop_loss(tape, final_scores, &ex.text_positions, &ex.rop_targets)?;
        let cls = tape.gather_rows(last, &[0])?;
        let rrp = rrp_loss(tape, store, &self.rrp_head, cls, &ex.rrp_labels)?;
        let mvlm = mvlm_loss(tape, store, self.encoder.emb.token, last, &ex.mvlm_targets)?;
        let tia = tia_loss(tape, store, &self.tia_head, last, &ex.text_positions, &ex.tia_labels, &ex.tia_weights)?;
        let total = tape.add_all(&[rop, rrp, mvlm, tia])?;
        Ok((
            LossVars {
                rop,
                rrp,
                mvlm,
                tia,
                total,
            },
            out,
        ))
    }
}

/// Rows of the ROP problem whose argmax over head-averaged final-layer
/// scores hits the successor, the number of rows, and the summed chance
/// rate `Σ 1/m`.
pub fn rop_hits(tape: &mut Tape, out: &EncoderOutput, positions: &[usize], g: &Tensor) -> Result<(usize, usize, f64)> {
    let m = positions.len();
    if m == 0 {
        return Ok((0, 0, 0.0));
    }
    let scores = out.scores.last().ok_or_else(|| Error::Config("no layers".into()))?;
    let logits = rop_logits(tape, scores, positions)?;
    let a = tape.value(logits);
    let mut hits = 0;
    for r in 0..m {
        let row = a.row(r);
        let best = (0..m).fold(0, |b, c| if row[c] > row[b] { c } else { b });
        if g.get(r, best) == 1.0 {
            hits += 1;
        }
    }
    Ok((hits, m, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rop_targets_follow_order() {
        let g = build_rop_targets(&[0, 1, 2], 3).unwrap();
        assert_eq!(g.data(), &[0., 1., 0., 0., 0., 1., 0., 0., 1.]);
        assert_eq!(build_rop_targets(&[0], 1).unwrap().data(), &[1.0]);
        let g = build_rop_targets(&[2, 0, 1], 3).unwrap();
        assert_eq!((g.get(2, 0), g.get(0, 1), g.get(1, 1)), (1.0, 1.0, 1.0));
        assert_eq!(g.sum(), 3.0);
        assert!(build_rop_targets(&[0, 0], 2).is_err());
    }

    #[test]
    fn rop_uniform_rows_give_n_ln_n() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::full(&[5, 5], 0.7));
        let g = build_rop_targets(&[0, 1, 2], 3).unwrap();
        let l = rop_loss(&mut tape, &[s, s], &[1, 2, 4], &g).unwrap();
        assert!((tape.value(l).item() - 3.0 * 3f64.ln()).abs() < 1e-12);
        let l = rop_loss(&mut tape, &[s], &[], &Tensor::zeros(&[0, 0])).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn rop_loss_is_invariant_to_relabeling() {
        let mut rng = RngStream::new(4, "scores", 0);
        let raw = crate::numerics::normal_tensor(&[4, 4], 1.0, &mut rng);
        let order = [2, 0, 3, 1];
        let perm = [1, 3, 0, 2];
        let mut permuted = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            for j in 0..4 {
                permuted.set(perm[i], perm[j], raw.get(i, j));
            }
        }
        let g = build_rop_targets(&order, 4).unwrap();
        let pg = build_rop_targets(&order.map(|i| perm[i]), 4).unwrap();
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(raw), tape.constant(permuted));
        let la = rop_loss(&mut tape, &[a], &[0, 1, 2, 3], &g).unwrap();
        let lb = rop_loss(&mut tape, &[b], &[0, 1, 2, 3], &pg).unwrap();
        assert!((tape.value(la).item() - tape.value(lb).item()).abs() < 1e-12);
    }

    #[test]
    fn rrp_selects_five_patches() {
        let mut rng = RngStream::new(1, "rrp", 0);
        let base = Tensor::zeros(&[49, 2]);
        let donor = Tensor::full(&[49, 2], 1.0);
        let (out, labels) = sample_rrp(&base, &[&donor], 0.10, &mut rng).unwrap();
        assert_eq!(labels.iter().sum::<f64>(), 5.0);
        for (r, &l) in labels.iter().enumerate() {
            assert_eq!(out.row(r)[0], l);
        }
        let (_, none) = sample_rrp(&base, &[], 0.0, &mut rng).unwrap();
        assert!(none.iter().all(|&l| l == 0.0));
        assert!(sample_rrp(&base, &[], 0.1, &mut rng).is_err());
        let (same, labels) = sample_rrp(&base, &[&base], 0.1, &mut rng).unwrap();
        assert_eq!(same, base);
        assert_eq!(labels.iter().sum::<f64>(), 5.0);
    }

    #[test]
    fn mvlm_selection_and_extremes() {
        let tokens: Vec<usize> = (0..40).map(|i| 5 + i % 20).collect();
        let maskable: Vec<usize> = (1..39).collect();
        let cfg = CorruptionConfig::default();
        let a = sample_mvlm(&tokens, &maskable, 30, &cfg, &mut RngStream::new(9, "mvlm", 2));
        let b = sample_mvlm(&tokens, &maskable, 30, &cfg, &mut RngStream::new(9, "mvlm", 2));
        assert_eq!(a, b);
        assert_eq!(a.1.len(), 6);
        assert!(a.1.iter().all(|&(p, id)| maskable.contains(&p) && tokens[p] == id));

        let none = CorruptionConfig { mvlm_ratio: 0.0, ..cfg };
        let (out, t) = sample_mvlm(&tokens, &maskable, 30, &none, &mut RngStream::new(9, "mvlm", 2));
        assert!(t.is_empty());
        assert_eq!(out, tokens);

        let all = CorruptionConfig {
            mvlm_ratio: 1.0,
            mask_frac: 1.0,
            random_frac: 0.0,
            ..cfg
        };
        let (out, t) = sample_mvlm(&tokens, &maskable, 30, &all, &mut RngStream::new(9, "mvlm", 2));
        assert_eq!(t.len(), maskable.len());
        assert!(t.iter().all(|&(p, _)| out[p] == MASK));
    }

    #[test]
    fn bce_heads_at_half_probability() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(2, "init", 0);
        let head = Linear::init(&mut store, "h", 3, 49, true, &mut rng).unwrap();
        store.get_mut(head.weight).value = Tensor::zeros(&[3, 49]);
        let mut tape = Tape::new();
        let cls = tape.constant(Tensor::full(&[1, 3], 0.4));
        let labels: Vec<f64> = (0..49).map(|i| f64::from(i % 3 == 0)).collect();
        let l = rrp_loss(&mut tape, &store, &head, cls, &labels).unwrap();
        assert!((tape.value(l).item() - 49.0 * 2f64.ln()).abs() < 1e-12);

        let tia = Linear::init(&mut store, "t", 3, 1, true, &mut rng).unwrap();
        store.get_mut(tia.weight).value = Tensor::zeros(&[3, 1]);
        let h = tape.constant(Tensor::full(&[6, 3], 1.0));
        let l = tia_loss(&mut tape, &store, &tia, h, &[1, 2, 3], &[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-12);
        let l = tia_loss(&mut tape, &store, &tia, h, &[1, 2], &[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn mvlm_uniform_logits_give_ln_k() {
        let mut store = ParamStore::new();
        let table = store.add("emb.token", Tensor::full(&[7, 3], 0.25), true).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::full(&[4, 3], 1.3));
        let l = mvlm_loss(&mut tape, &store, table, h, &[(1, 5), (3, 6)]).unwrap();
        assert!((tape.value(l).item() - 7f64.ln()).abs() < 1e-12);
        let l = mvlm_loss(&mut tape, &store, table, h, &[]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn total_is_unweighted_sum() {
        let r = total_loss(1.0, 2.0, 3.0, 4.0);
        assert_eq!((r.rop, r.rrp, r.mvlm, r.tia, r.total), (1.0, 2.0, 3.0, 4.0, 10.0));
        assert_eq!(total_loss(0.0, 2.0, 0.0, 4.0).total, 6.0);
    }

    #[test]
    fn selection_counts_round() {
        assert_eq!(selection_count(0.10, 49), 5);
        assert_eq!(selection_count(0.15, 40), 6);
        assert_eq!(selection_count(0.15, 3), 1);
        assert_eq!(selection_count(0.0, 3), 0);
        assert_eq!(selection_count(0.5, 0), 0);
    }

    fn small_doc() -> Document {
        use crate::doc::{BBox, Word};
        let words = [
            ("alpha", [50, 50, 200, 90]),
            ("beta", [250, 50, 400, 90]),
            ("gamma", [50, 200, 220, 240]),
            ("delta", [300, 200, 500, 240]),
            ("eps", [50, 400, 150, 440]),
        ];
        let words = words
            .iter()
            .map(|(t, b)| Word::new(*t, BBox::new(b[0], b[1], b[2], b[3]).unwrap()).unwrap())
            .collect();
        Document::new(words, (1000, 1000))
    }

    fn tiny_cfg() -> EncoderConfig {
        use crate::attention::RelPosConfig;
        use crate::embedder::EmbedConfig;
        EncoderConfig {
            embed: EmbedConfig {
                vocab_size: 10,
                d: 4,
                max_text_len: 16,
                patch_dim: 3,
                init_std: 0.3,
            },
            rel: RelPosConfig {
                k_1d: 4,
                k_2d: 3,
                bucket_width_2d: 16,
            },
            layers: 1,
            heads: 2,
            ffn: 8,
            dropout: 0.0,
            ln_eps: 1e-5,
        }
    }

    fn fixture() -> (ParamStore, PretrainModel, PretrainExample) {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let model = PretrainModel::init(&mut store, &cfg, &mut RngStream::new(3, "init", 0)).unwrap();
        let doc = small_doc();
        let vocab = Vocab::new(&["alpha", "beta", "gamma", "delta", "eps"]).unwrap();
        let enc = store.value(model.encoder.emb.patch_encoder).clone();
        let donor = crate::numerics::normal_tensor(&[49, 3], 1.0, &mut RngStream::new(3, "donor", 0));
        let corruption = CorruptionConfig {
            tia_ratio: 0.4,
            ..CorruptionConfig::default()
        };
        let ex = build_example(&doc, &[0, 1, 2, 3, 4], &vocab, 16, &enc, &[&donor], &corruption, 11, 0).unwrap();
        (store, model, ex)
    }

    #[test]
    fn example_labels_are_consistent() {
        let (store, model, ex) = fixture();
        assert_eq!(ex.text_positions, vec![1, 2, 3, 4, 5]);
        assert_eq!(ex.mvlm_targets.len(), 1);
        assert_eq!(ex.rrp_labels.iter().sum::<f64>(), 5.0);
        // Two of the three lines are covered, and each line is all or nothing.
        let covered: Vec<f64> = ex.tia_labels.clone();
        assert_eq!(covered[0], covered[1]);
        assert_eq!(covered[2], covered[3]);
        assert!(covered.iter().sum::<f64>() >= 2.0);
        let excluded: Vec<usize> = (0..5).filter(|&k| ex.tia_weights[k] == 0.0).collect();
        assert_eq!(excluded, vec![ex.mvlm_targets[0].0 - 1]);
        assert_eq!(ex.rop_targets.get(4, 4), 1.0);

        let (_, _, again) = fixture();
        assert_eq!(again, ex);
        let mut tape = Tape::new();
        let (l, _) = model.losses(&mut tape, &store, &ex, None).unwrap();
        let r = l.report(&tape);
        assert!(r.total.is_finite());
        assert!((r.total - (r.rop + r.rrp + r.mvlm + r.tia)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        use crate::numerics::gradcheck::{central_difference, relative_error};
        let (store, model, ex) = fixture();
        let f = |store: &ParamStore| {
            let mut tape = Tape::new();
            let (l, _) = model.losses(&mut tape, store, &ex, None).unwrap();
            let v = tape.value(l.total).item();
            (tape, l.total, v)
        };
        let (tape, total, _) = f(&store);
        let grads = tape.backward(total).unwrap();
        let mut checked = 0;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let g = g.clone();
            let name = store.get(id).name.clone();
            let step = if name.starts_with("emb.") { 97 } else { 5 };
            for k in (0..g.numel()).step_by(step) {
                let num = central_difference(1e-5, |eps| {
                    let mut s = store.clone();
                    s.get_mut(id).value.data_mut()[k] += eps;
                    f(&s).2
                });
                assert!(relative_error(g.data()[k], num) < 1e-4, "{name}[{k}]: {} vs {num}", g.data()[k]);
                checked += 1;
            }
        }
        assert!(checked > 80, "{checked}");
        assert!(grads.param(model.encoder.emb.patch_encoder).is_none());
    }
}
