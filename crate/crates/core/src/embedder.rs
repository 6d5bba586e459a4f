//! Multi-modal input sequence: token, 1D position and type embeddings for
//! text, pooled patch features for the page image, and box embeddings for
//! both, concatenated as `[text ; visual]`.
//!
//! The visual backbone is a fixed patch encoder: the page is resized to
//! 224×224, split into a 7×7 grid of 32×32 cells, each cell is mean-pooled
//! per channel and sent through a fixed random linear map.

use std::collections::HashMap;
use std::path::Path;

use crate::doc::{BBox, Document, PageImage, COORD_MAX};
use crate::error::{Error, Result};
use crate::numerics::{normal_tensor, ParamId, ParamStore, RngStream, Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

pub const TYPE_TEXT: usize = 0;
pub const TYPE_VISUAL: usize = 1;
pub const NUM_TYPES: usize = 2;

pub const IMAGE_SIDE: u32 = 224;
pub const VISUAL_GRID: usize = 7;
pub const VISUAL_TOKENS: usize = VISUAL_GRID * VISUAL_GRID;
const CELL_SIDE: u32 = IMAGE_SIDE / VISUAL_GRID as u32;

/// Token inventory. The five special tokens always hold ids 0..5.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from the non-special tokens; specials are
    /// prepended.
    pub fn new<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let tokens: Vec<String> = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words.iter().map(|w| w.as_ref().to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Takes the full token list, which must begin with the specials.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() || tokens[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS {
            return Err(Error::InvalidArgument(format!(
                "vocabulary must start with {SPECIAL_TOKENS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("empty or duplicate vocabulary entry {t:?} at {i}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// One token per line; the id is the line number.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIAL_TOKENS.len()
    }

    /// Lowercases the word and looks it up whole; otherwise falls back to
    /// one token per character, with `[UNK]` for unknown characters.
    pub fn tokenize_word(&self, word: &str) -> Vec<usize> {
        let lower = word.trim().to_lowercase();
        if let Some(id) = self.id(&lower) {
            return vec![id];
        }
        let mut buf = [0u8; 4];
        lower
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| self.id(c.encode_utf8(&mut buf)).unwrap_or(UNK))
            .collect()
    }
}

/// Box of visual token `v` (row-major over the grid) in normalized
/// coordinates.
pub fn visual_box(v: usize) -> BBox {
    let (r, c) = ((v / VISUAL_GRID) as i32, (v % VISUAL_GRID) as i32);
    let g = VISUAL_GRID as i32;
    let edge = |k: i32| COORD_MAX * k / g;
    BBox::new(edge(c), edge(r), edge(c + 1), edge(r + 1)).expect("grid cells lie on the page")
}

/// Per-cell channel means in `[0, 1]` of the page resized to 224×224,
/// `49 × 3`, rows in grid row-major order. Single-channel pages repeat the
/// mean across the three channels.
pub fn pooled_cells(img: &PageImage) -> Tensor {
    let img = img.resize_bilinear(IMAGE_SIDE, IMAGE_SIDE);
    let mut out = Tensor::zeros(&[VISUAL_TOKENS, 3]);
    let area = (CELL_SIDE * CELL_SIDE) as f64 * 255.0;
    for v in 0..VISUAL_TOKENS {
        let (r, c) = ((v / VISUAL_GRID) as u32, (v % VISUAL_GRID) as u32);
        let mut sums = [0.0f64; 3];
        for y in r * CELL_SIDE..(r + 1) * CELL_SIDE {
            for x in c * CELL_SIDE..(c + 1) * CELL_SIDE {
                for (ch, s) in sums.iter_mut().enumerate() {
                    let src = if img.channels() == 1 { 0 } else { ch as u8 };
                    *s += img.pixel(x, y, src) as f64;
                }
            }
        }
        for (ch, s) in sums.iter().enumerate() {
            out.set(v, ch, s / area);
        }
    }
    out
}

/// Raw patch features, `49 × f`: pooled cell means times the fixed
/// `3 × f` encoder map.
pub fn patch_features(img: &PageImage, encoder: &Tensor) -> Result<Tensor> {
    if encoder.shape().len() != 2 || encoder.rows() != 3 {
        return Err(Error::Shape(format!("patch encoder map {:?}, expected 3 × f", encoder.shape())));
    }
    pooled_cells(img).matmul(encoder)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbedConfig {
    pub vocab_size: usize,
    pub d: usize,
    /// Textual budget including [CLS] and [SEP]; also the number of rows of
    /// the 1D position table (at least 49 for the visual positions).
    pub max_text_len: usize,
    pub patch_dim: usize,
    pub init_std: f64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            vocab_size: 200,
            d: 64,
            max_text_len: 128,
            patch_dim: 16,
            init_std: 0.1,
        }
    }
}

/// Handles to the embedding parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbeddingTables {
    pub token: ParamId,
    pub pos1d: ParamId,
    pub token_type: ParamId,
    pub x: ParamId,
    pub y: ParamId,
    pub w: ParamId,
    pub h: ParamId,
    pub visual_proj: ParamId,
    pub visual_bias: ParamId,
    /// Fixed patch encoder map, not trained.
    pub patch_encoder: ParamId,
}

impl EmbeddingTables {
    pub fn init(store: &mut ParamStore, cfg: &EmbedConfig, rng: &mut RngStream) -> Result<Self> {
        if cfg.d == 0 || cfg.vocab_size <= SPECIAL_TOKENS.len() || cfg.patch_dim == 0 || cfg.max_text_len < 2 {
            return Err(Error::InvalidArgument(format!("bad embedding config {cfg:?}")));
        }
        let d = cfg.d;
        let s = cfg.init_std;
        let coord = COORD_MAX as usize + 1;
        let pos_rows = cfg.max_text_len.max(VISUAL_TOKENS);
        let mut table = |name: &str, rows: usize, std: f64, trainable: bool, rng: &mut RngStream| {
            store.add(name, normal_tensor(&[rows, d], std, rng), trainable)
        };
        let token = table("emb.token", cfg.vocab_size, s, true, rng)?;
        let pos1d = table("emb.pos1d", pos_rows, s, true, rng)?;
        let token_type = table("emb.type", NUM_TYPES, s, true, rng)?;
        let x = table("emb.x", coord, s, true, rng)?;
        let y = table("emb.y", coord, s, true, rng)?;
        let w = table("emb.w", coord, s, true, rng)?;
        let h = table("emb.h", coord, s, true, rng)?;
        let visual_proj = store.add(
            "emb.visual_proj.weight",
            normal_tensor(&[cfg.patch_dim, d], 1.0 / (cfg.patch_dim as f64).sqrt(), rng),
            true,
        )?;
        let visual_bias = store.add("emb.visual_proj.bias", Tensor::zeros(&[1, d]), true)?;
        let patch_encoder = store.add("emb.patch_encoder", normal_tensor(&[3, cfg.patch_dim], 1.0, rng), false)?;
        Ok(EmbeddingTables {
            token,
            pos1d,
            token_type,
            x,
            y,
            w,
            h,
            visual_proj,
            visual_bias,
            patch_encoder,
        })
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let get = |n: &str| store.id(n).ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")));
        Ok(EmbeddingTables {
            token: get("emb.token")?,
            pos1d: get("emb.pos1d")?,
            token_type: get("emb.type")?,
            x: get("emb.x")?,
            y: get("emb.y")?,
            w: get("emb.w")?,
            h: get("emb.h")?,
            visual_proj: get("emb.visual_proj.weight")?,
            visual_bias: get("emb.visual_proj.bias")?,
            patch_encoder: get("emb.patch_encoder")?,
        })
    }

    pub fn d(&self, store: &ParamStore) -> usize {
        store.value(self.token).cols()
    }

    /// `E_tk(token) + E_1p(position) + E_tp(type)` per row.
    pub fn text_embedding(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &[usize],
        positions: &[usize],
        types: &[usize],
    ) -> Result<Var> {
        if tokens.len() != positions.len() || tokens.len() != types.len() {
            return Err(Error::Shape("token, position and type ids differ in length".into()));
        }
        let max = store.value(self.pos1d).rows();
        if let Some(&p) = positions.iter().find(|&&p| p >= max) {
            return Err(Error::InvalidArgument(format!("position {p} beyond the {max}-position table")));
        }
        let t = tape.embedding_lookup(store, self.token, tokens)?;
        let p = tape.embedding_lookup(store, self.pos1d, positions)?;
        let y = tape.embedding_lookup(store, self.token_type, types)?;
        tape.add_all(&[t, p, y])
    }

    /// `F_vs(patch) + E_1p(0..49) + E_tp([V])`.
    pub fn visual_embedding(&self, tape: &mut Tape, store: &ParamStore, patches: &Tensor) -> Result<Var> {
        if patches.shape() != [VISUAL_TOKENS, store.value(self.visual_proj).rows()] {
            return Err(Error::Shape(format!("patch features {:?}", patches.shape())));
        }
        let x = tape.constant(patches.clone());
        let w = tape.param(store, self.visual_proj);
        let b = tape.param(store, self.visual_bias);
        let f = tape.linear(x, w, Some(b))?;
        let positions: Vec<usize> = (0..VISUAL_TOKENS).collect();
        let p = tape.embedding_lookup(store, self.pos1d, &positions)?;
        let y = tape.embedding_lookup(store, self.token_type, &[TYPE_VISUAL; VISUAL_TOKENS])?;
        tape.add_all(&[f, p, y])
    }

    /// `E_x(x0) + E_x(x1) + E_w(w) + E_y(y0) + E_y(y1) + E_h(h)` per box.
    pub fn layout_embedding(&self, tape: &mut Tape, store: &ParamStore, boxes: &[BBox]) -> Result<Var> {
        let col = |f: fn(&BBox) -> i32| boxes.iter().map(|b| f(b) as usize).collect::<Vec<_>>();
        let terms = [
            tape.embedding_lookup(store, self.x, &col(BBox::x0))?,
            tape.embedding_lookup(store, self.x, &col(BBox::x1))?,
            tape.embedding_lookup(store, self.w, &col(BBox::w))?,
            tape.embedding_lookup(store, self.y, &col(BBox::y0))?,
            tape.embedding_lookup(store, self.y, &col(BBox::y1))?,
            tape.embedding_lookup(store, self.h, &col(BBox::h))?,
        ];
        tape.add_all(&terms)
    }

    /// `H = [T + L_text ; V + L_visual]`, `(N + 49) × d`.
    pub fn combine(&self, tape: &mut Tape, store: &ParamStore, inputs: &SequenceInputs) -> Result<Var> {
        let n = inputs.n_text;
        let t = self.text_embedding(tape, store, &inputs.token_ids, &inputs.positions[..n], &inputs.type_ids[..n])?;
        let lt = self.layout_embedding(tape, store, &inputs.boxes[..n])?;
        let v = self.visual_embedding(tape, store, &inputs.patches)?;
        let lv = self.layout_embedding(tape, store, &inputs.boxes[n..])?;
        let text = tape.add(t, lt)?;
        let visual = tape.add(v, lv)?;
        tape.concat(&[text, visual], 0)
    }
}

/// Everything needed to embed one page, without parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceInputs {
    /// Textual token ids including [CLS] first and [SEP] last.
    pub token_ids: Vec<usize>,
    /// Word index of each textual token; `None` for [CLS] and [SEP].
    pub word_of_token: Vec<Option<usize>>,
    /// Boxes for all `N + 49` positions.
    pub boxes: Vec<BBox>,
    /// Absolute 1D ids: `0..N` for text, `0..49` for visual tokens.
    pub positions: Vec<usize>,
    pub type_ids: Vec<usize>,
    /// Key mask over all positions; `false` marks padding.
    pub mask: Vec<bool>,
    /// Patch features, `49 × f`.
    pub patches: Tensor,
    pub n_text: usize,
}

impl SequenceInputs {
    pub fn len(&self) -> usize {
        self.n_text + VISUAL_TOKENS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Indices of word tokens (not [CLS], [SEP] or padding).
    pub fn word_positions(&self) -> Vec<usize> {
        (0..self.n_text).filter(|&i| self.word_of_token[i].is_some() && self.mask[i]).collect()
    }

    /// Relative-distance indices over the concatenated sequence: text
    /// tokens first, visual tokens after them.
    pub fn global_positions(&self) -> Vec<i64> {
        (0..self.len()).map(|i| i as i64).collect()
    }

    /// Position of the first subword of each word present in the sequence.
    pub fn first_subwords(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut last = None;
        for (i, w) in self.word_of_token.iter().enumerate() {
            if let Some(w) = *w {
                if last != Some(w) {
                    out.push((w, i));
                    last = Some(w);
                }
            }
        }
        out
    }

    /// Replaces token ids without touching boxes (used by corruption).
    pub fn with_tokens(&self, token_ids: Vec<usize>) -> Result<Self> {
        if token_ids.len() != self.n_text {
            return Err(Error::Shape("token replacement changes length".into()));
        }
        Ok(SequenceInputs {
            token_ids,
            ..self.clone()
        })
    }
}

/// Token ids, source word per token and token boxes.
pub type Tokenized = (Vec<usize>, Vec<Option<usize>>, Vec<BBox>);

/// Tokenizes the words of `doc` in `order` into `[CLS] … [SEP]`. Subwords
/// inherit their word's box; [CLS] and [SEP] get the zero box. Words past
/// the budget are dropped with a warning.
pub fn tokenize_document(
    doc: &Document,
    order: &[usize],
    vocab: &Vocab,
    max_text_len: usize,
) -> Result<Tokenized> {
    if max_text_len < 2 {
        return Err(Error::InvalidArgument("textual budget must fit [CLS] and [SEP]".into()));
    }
    let mut ids = vec![CLS];
    let mut words = vec![None];
    let mut boxes = vec![BBox::ZERO];
    let budget = max_text_len - 1;
    for (k, &w) in order.iter().enumerate() {
        let word = doc
            .words
            .get(w)
            .ok_or_else(|| Error::InvalidArgument(format!("order refers to missing word {w}")))?;
        let pieces = vocab.tokenize_word(&word.text);
        if ids.len() + pieces.len() > budget {
            log::warn!(
                "document truncated to {max_text_len} textual tokens, dropping {} of {} words",
                order.len() - k,
                order.len()
            );
            break;
        }
        for p in pieces {
            ids.push(p);
            words.push(Some(w));
            boxes.push(word.bbox);
        }
    }
    ids.push(SEP);
    words.push(None);
    boxes.push(BBox::ZERO);
    Ok((ids, words, boxes))
}

/// Builds the model inputs for `doc` read in `order`, with `patches` as the
/// visual features.
pub fn build_inputs(
    doc: &Document,
    order: &[usize],
    vocab: &Vocab,
    max_text_len: usize,
    patches: Tensor,
) -> Result<SequenceInputs> {
    if patches.rows() != VISUAL_TOKENS {
        return Err(Error::Shape(format!("{} patch rows, expected {VISUAL_TOKENS}", patches.rows())));
    }
    let (token_ids, word_of_token, mut boxes) = tokenize_document(doc, order, vocab, max_text_len)?;
    let n = token_ids.len();
    boxes.extend((0..VISUAL_TOKENS).map(visual_box));
    let positions = (0..n).chain(0..VISUAL_TOKENS).collect();
    let type_ids = std::iter::repeat_n(TYPE_TEXT, n)
        .chain(std::iter::repeat_n(TYPE_VISUAL, VISUAL_TOKENS))
        .collect();
    Ok(SequenceInputs {
        token_ids,
        word_of_token,
        boxes,
        positions,
        type_ids,
        mask: vec![true; n + VISUAL_TOKENS],
        patches,
        n_text: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::doc::Word;

    fn setup(d: usize) -> (ParamStore, EmbeddingTables) {
        let mut store = ParamStore::new();
        let cfg = EmbedConfig {
            vocab_size: 12,
            d,
            max_text_len: 16,
            patch_dim: 4,
            init_std: 0.5,
        };
        let t = EmbeddingTables::init(&mut store, &cfg, &mut RngStream::new(1, "init", 0)).unwrap();
        (store, t)
    }

    fn vocab() -> Vocab {
        Vocab::new(&["total", "amount", "a", "b", "c", "1", "2"]).unwrap()
    }

    #[test]
    fn tokenizer_lowercases_and_falls_back_to_characters() {
        let v = vocab();
        assert_eq!(v.tokenize_word("TOTAL"), [5]);
        assert_eq!(v.tokenize_word("ab"), [7, 8]);
        assert_eq!(v.tokenize_word("a?1"), [7, UNK, 10]);
        assert_eq!(v.len(), 12);
        assert!(Vocab::from_tokens(vec!["x".into()]).is_err());
        assert!(Vocab::new(&["a", "a"]).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        vocab().save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), vocab());
    }

    #[test]
    fn grid_cell_boxes() {
        assert_eq!(visual_box(0), BBox::new(0, 0, 142, 142).unwrap());
        assert_eq!(visual_box(48), BBox::new(857, 857, 1000, 1000).unwrap());
        assert_eq!(visual_box(8), BBox::new(142, 142, 285, 285).unwrap());
    }

    #[test]
    fn patch_features_of_uniform_and_split_pages() {
        let enc = normal_tensor(&[3, 5], 1.0, &mut RngStream::new(3, "enc", 0));
        let gray = PageImage::new(50, 40, 1, vec![128; 2000]).unwrap();
        let f = patch_features(&gray, &enc).unwrap();
        assert_eq!(f.shape(), [49, 5]);
        for r in 1..49 {
            assert_eq!(f.row(r), f.row(0));
        }
        let mut split = PageImage::blank(70, 70, 3);
        split.fill_normalized(&BBox::new(0, 0, 500, 1000).unwrap(), 0);
        let cells = pooled_cells(&split);
        for r in 0..7 {
            for c in 0..3 {
                assert_eq!(cells.row(r * 7 + c), [0.0; 3]);
            }
            for c in 4..7 {
                assert_eq!(cells.row(r * 7 + c), [1.0; 3]);
            }
        }
    }

    #[test]
    fn text_embedding_is_sum_of_rows() {
        let (store, t) = setup(6);
        let mut tape = Tape::new();
        let out = t.text_embedding(&mut tape, &store, &[7, 7], &[0, 1], &[0, 0]).unwrap();
        let v = tape.value(out);
        let row = |id, r: usize| store.value(id).row(r).to_vec();
        for c in 0..6 {
            let expect = row(t.token, 7)[c] + row(t.pos1d, 0)[c] + row(t.token_type, 0)[c];
            assert!((v.get(0, c) - expect).abs() < 1e-15);
            let diff = v.get(0, c) - v.get(1, c);
            assert!((diff - (row(t.pos1d, 0)[c] - row(t.pos1d, 1)[c])).abs() < 1e-12);
        }
        assert!(t.text_embedding(&mut tape, &store, &[7], &[49], &[0]).is_err());
    }

    #[test]
    fn layout_embedding_of_full_page_box() {
        let (store, t) = setup(3);
        let mut tape = Tape::new();
        let full = BBox::new(0, 0, 1000, 1000).unwrap();
        let out = t.layout_embedding(&mut tape, &store, &[full]).unwrap();
        let r = |id, i: usize, c: usize| store.value(id).get(i, c);
        for c in 0..3 {
            let expect = r(t.x, 0, c) + r(t.x, 1000, c) + r(t.w, 1000, c) + r(t.y, 0, c) + r(t.y, 1000, c) + r(t.h, 1000, c);
            assert!((tape.value(out).get(0, c) - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_document_gives_51_positions() {
        let (store, t) = setup(4);
        let doc = Document::new(vec![], (100, 100));
        let patches = Tensor::zeros(&[49, 4]);
        let inputs = build_inputs(&doc, &[], &vocab(), 16, patches).unwrap();
        assert_eq!(inputs.len(), 51);
        assert_eq!(inputs.token_ids, [CLS, SEP]);
        assert_eq!(inputs.boxes[0], BBox::ZERO);
        let mut tape = Tape::new();
        let h = t.combine(&mut tape, &store, &inputs).unwrap();
        assert_eq!(tape.value(h).shape(), [51, 4]);
    }

    #[test]
    fn full_budget_and_truncation() {
        let words: Vec<Word> = (0..600)
            .map(|i| Word::new("a", BBox::new(i % 1000, 0, i % 1000, 5).unwrap()).unwrap())
            .collect();
        let doc = Document::new(words, (1000, 1000));
        let order: Vec<usize> = (0..600).collect();
        let inputs = build_inputs(&doc, &order, &vocab(), 512, Tensor::zeros(&[49, 2])).unwrap();
        assert_eq!(inputs.n_text, 512);
        assert_eq!(inputs.len(), 561);
        assert_eq!(*inputs.token_ids.last().unwrap(), SEP);
    }

    #[test]
    fn swapping_words_swaps_rows() {
        let (store, t) = setup(4);
        let words = vec![
            Word::new("a", BBox::new(0, 0, 10, 10).unwrap()).unwrap(),
            Word::new("b", BBox::new(20, 0, 40, 10).unwrap()).unwrap(),
            Word::new("c", BBox::new(50, 0, 60, 10).unwrap()).unwrap(),
        ];
        let doc = Document::new(words, (100, 100));
        let p = Tensor::zeros(&[49, 4]);
        let a = build_inputs(&doc, &[0, 1, 2], &vocab(), 16, p.clone()).unwrap();
        let b = build_inputs(&doc, &[0, 2, 1], &vocab(), 16, p).unwrap();
        let mut tape = Tape::new();
        let ta = t.text_embedding(&mut tape, &store, &a.token_ids, &[0; 5], &a.type_ids[..5]).unwrap();
        let la = t.layout_embedding(&mut tape, &store, &a.boxes[..5]).unwrap();
        let tb = t.text_embedding(&mut tape, &store, &b.token_ids, &[0; 5], &b.type_ids[..5]).unwrap();
        let lb = t.layout_embedding(&mut tape, &store, &b.boxes[..5]).unwrap();
        for (x, y) in [(ta, tb), (la, lb)] {
            let (x, y) = (tape.value(x), tape.value(y));
            assert_eq!(x.row(2), y.row(3));
            assert_eq!(x.row(3), y.row(2));
            assert_eq!(x.row(1), y.row(1));
        }
    }

    #[test]
    fn visual_part_ignores_text_and_text_part_ignores_pixels() {
        let (store, t) = setup(4);
        let words = vec![Word::new("a", BBox::new(0, 0, 10, 10).unwrap()).unwrap()];
        let mut doc = Document::new(words, (100, 100));
        let enc = store.value(t.patch_encoder).clone();
        let p1 = patch_features(&doc.synthesize_image(), &enc).unwrap();
        let p2 = patch_features(&PageImage::blank(30, 30, 1), &enc).unwrap();
        let a = build_inputs(&doc, &[0], &vocab(), 16, p1.clone()).unwrap();
        doc.words[0].text = "b".into();
        let b = build_inputs(&doc, &[0], &vocab(), 16, p1).unwrap();
        let c = build_inputs(&doc, &[0], &vocab(), 16, p2).unwrap();
        let mut tape = Tape::new();
        let (ha, hb, hc) = (
            t.combine(&mut tape, &store, &a).unwrap(),
            t.combine(&mut tape, &store, &b).unwrap(),
            t.combine(&mut tape, &store, &c).unwrap(),
        );
        let (ha, hb, hc) = (tape.value(ha), tape.value(hb), tape.value(hc));
        assert_eq!(ha.slice(0, 3, 52).unwrap(), hb.slice(0, 3, 52).unwrap());
        assert_ne!(ha.row(1), hb.row(1));
        assert_eq!(hb.slice(0, 0, 3).unwrap(), hc.slice(0, 0, 3).unwrap());
    }

    #[test]
    fn embedding_is_linear_in_each_table() {
        let (mut store, t) = setup(4);
        let doc = Document::new(vec![Word::new("a", BBox::new(0, 0, 10, 10).unwrap()).unwrap()], (10, 10));
        let inputs = build_inputs(&doc, &[0], &vocab(), 16, Tensor::full(&[49, 4], 0.3)).unwrap();
        let embed = |store: &ParamStore| {
            let mut tape = Tape::new();
            let h = t.combine(&mut tape, store, &inputs).unwrap();
            tape.value(h).clone()
        };
        let base = embed(&store);
        for id in [t.token, t.pos1d, t.token_type, t.x, t.y, t.w, t.h, t.visual_proj, t.visual_bias] {
            let saved = store.value(id).clone();
            store.get_mut(id).value = saved.scale(0.0);
            let without = embed(&store);
            store.get_mut(id).value = saved.scale(3.0);
            let tripled = embed(&store);
            store.get_mut(id).value = saved;
            let contrib = base.sub(&without).unwrap();
            let expect = without.add(&contrib.scale(3.0)).unwrap();
            assert!(tripled.max_abs_diff(&expect) < 1e-12);
        }
    }
}
