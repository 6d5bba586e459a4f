//! Synthetic pages with exact ground truth. Every page lives on a
//! 1000 × 1000 normalized canvas with 14-unit word boxes on a 24-unit line
//! pitch. Words within a line are 10 units apart, so only block, column and
//! cell boundaries leave gaps wider than the 12-unit cut threshold.
//!
//! Key-value fields are the labeled entities: a key word (`KEY`) followed
//! by one to three values from the key's value group (`VALUE`), kept on one
//! line. Value words also appear unlabeled as distractors in running text.
//! Words are stored in raster order, as an OCR engine would emit them.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::doc::{BBox, Document, QaPair, Segment, SegmentKind, Word};
use crate::embedder::{Vocab, SPECIAL_TOKENS};
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::serializer::raster_scan_order;

pub const KEYS: [&str; 8] = ["date", "total", "name", "invoice", "phone", "address", "amount", "account"];
pub const VALUE_GROUPS: usize = 4;
pub const VALUES_PER_GROUP: usize = 20;
pub const ENTITY_TYPES: [&str; 2] = ["KEY", "VALUE"];

const LEFT: i32 = 60;
const RIGHT: i32 = 940;
const TOP: i32 = 40;
const BOTTOM: i32 = 960;
const WORD_H: i32 = 14;
const PITCH: i32 = 24;
const WORD_GAP: i32 = 10;
const COLUMN_GAP: i32 = 60;
const CELL_GAP: i32 = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    SingleColumn,
    TwoColumn,
    Table,
    Mixed,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::SingleColumn, Family::TwoColumn, Family::Table, Family::Mixed];

    /// Class label of the family.
    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::SingleColumn => "single_column",
            Family::TwoColumn => "two_column",
            Family::Table => "table",
            Family::Mixed => "mixed",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown layout family {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    /// Each page draws its family uniformly from this list.
    pub families: Vec<Family>,
    pub vocab_size: usize,
    /// Inclusive range of words per page.
    pub min_words: usize,
    pub max_words: usize,
    /// Chance that a running-text slot holds a key-value field.
    pub field_rate: f64,
    /// Chance that a running-text word is an unlabeled value word.
    pub distractor_rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            families: Family::ALL.to_vec(),
            vocab_size: 200,
            min_words: 40,
            max_words: 90,
            field_rate: 0.12,
            distractor_rate: 0.1,
        }
    }
}

impl SyntheticSpec {
    pub fn family(f: Family) -> Self {
        SyntheticSpec {
            families: vec![f],
            ..Self::default()
        }
    }

    fn fillers(&self) -> usize {
        self.vocab_size - SPECIAL_TOKENS.len() - KEYS.len() - VALUE_GROUPS * VALUES_PER_GROUP
    }

    pub fn validate(&self) -> Result<()> {
        let fixed = SPECIAL_TOKENS.len() + KEYS.len() + VALUE_GROUPS * VALUES_PER_GROUP;
        if self.vocab_size <= fixed {
            return Err(Error::Config(format!("synthetic vocabulary needs more than {fixed} entries")));
        }
        if self.families.is_empty() || self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::Config("need a family and a non-empty word range".into()));
        }
        if !(0.0..=1.0).contains(&self.field_rate) || !(0.0..=1.0).contains(&self.distractor_rate) {
            return Err(Error::Config("rates must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        self.validate()?;
        Vocab::new(&self.words())
    }

    fn words(&self) -> Vec<String> {
        let mut w: Vec<String> = KEYS.iter().map(|k| k.to_string()).collect();
        for g in 0..VALUE_GROUPS {
            for v in 0..VALUES_PER_GROUP {
                w.push(value_word(g, v));
            }
        }
        w.extend((0..self.fillers()).map(|i| format!("f{i:03}")));
        w
    }
}

fn value_word(group: usize, v: usize) -> String {
    format!("v{}{v:02}", (b'a' + group as u8) as char)
}

fn word_width(text: &str) -> i32 {
    9 * text.chars().count() as i32 + 12
}

/// Words of one line: `(text, tag, field id)`.
type Line = Vec<(String, String, Option<usize>)>;

/// A run of text items: single words or whole fields that must share a
/// line.
struct Content<'a> {
    spec: &'a SyntheticSpec,
    rng: RngStream,
    remaining: usize,
    keys_left: Vec<usize>,
    fields: usize,
}

type Item = Vec<(String, String, Option<usize>)>;

impl Content<'_> {
    fn width(item: &Item) -> i32 {
        item.iter().map(|w| word_width(&w.0)).sum::<i32>() + WORD_GAP * (item.len() as i32 - 1)
    }

    fn filler(&mut self) -> String {
        if self.rng.bernoulli(self.spec.distractor_rate) {
            value_word(self.rng.below(VALUE_GROUPS), self.rng.below(VALUES_PER_GROUP))
        } else {
            format!("f{:03}", self.rng.below(self.spec.fillers()))
        }
    }

    /// Next item no wider than `max_w`, or `None` once the budget is spent.
    fn next(&mut self, max_w: i32) -> Option<Item> {
        if self.remaining == 0 {
            return None;
        }
        if self.remaining >= 2 && !self.keys_left.is_empty() && self.rng.bernoulli(self.spec.field_rate) {
            let k = self.keys_left.swap_remove(self.rng.below(self.keys_left.len()));
            let n_values = self.rng.range(1, 3).min(self.remaining - 1);
            let id = self.fields;
            let mut item: Item = vec![(KEYS[k].to_string(), "B-KEY".into(), Some(id))];
            for v in 0..n_values {
                let tag = if v == 0 { "B-VALUE" } else { "I-VALUE" };
                item.push((value_word(k / 2, self.rng.below(VALUES_PER_GROUP)), tag.into(), Some(id)));
            }
            while item.len() > 2 && Self::width(&item) > max_w {
                item.pop();
            }
            if Self::width(&item) <= max_w {
                self.fields += 1;
                self.remaining -= item.len();
                return Some(item);
            }
            self.keys_left.push(k);
        }
        self.remaining -= 1;
        Some(vec![(self.filler(), "O".into(), None)])
    }

    /// Packs items into a line until it reaches a random target between
    /// `min_fill` and all of `width`. Items that would overflow `width` wait
    /// in `pending` for a later line, ahead of fresh items.
    fn line(&mut self, width: i32, pending: &mut VecDeque<Item>, min_fill: f64) -> Option<Line> {
        let min_w = (width as f64 * min_fill).ceil() as i32;
        let target = (width as f64 * (min_fill + (1.0 - min_fill) * self.rng.uniform())) as i32;
        let mut line: Line = Vec::new();
        let mut used = 0;
        let mut deferred = Vec::new();
        let mut queue = std::mem::take(pending);
        loop {
            let item = match queue.pop_front() {
                Some(i) => i,
                None => match self.next(width) {
                    Some(i) => i,
                    None => break,
                },
            };
            let w = Self::width(&item);
            let extra = if line.is_empty() { w } else { w + WORD_GAP };
            if used + extra > width && !line.is_empty() {
                deferred.push(item);
                if used >= min_w {
                    break;
                }
                continue;
            }
            used += extra;
            line.extend(item);
            if used >= target {
                break;
            }
        }
        pending.extend(deferred);
        pending.extend(queue);
        (!line.is_empty()).then_some(line)
    }

    fn lines(&mut self, width: i32, count: usize, pending: &mut VecDeque<Item>) -> Vec<Line> {
        (0..count).map_while(|_| self.line(width, pending, 0.6)).collect()
    }
}

/// Words placed on the canvas, in gold reading order, grouped into gold
/// segments.
#[derive(Default)]
struct Page {
    words: Vec<(String, String, Option<usize>, BBox)>,
    segments: Vec<(SegmentKind, Vec<usize>)>,
}

impl Page {
    fn place_line(&mut self, line: &Line, x0: i32, y: i32) -> Result<Vec<usize>> {
        if y + WORD_H > BOTTOM {
            return Err(Error::Generation("too many words for the page".into()));
        }
        let mut x = x0;
        let mut ids = Vec::with_capacity(line.len());
        for (text, tag, field) in line {
            let w = word_width(text);
            let b = BBox::new(x, y, x + w, y + WORD_H)?;
            ids.push(self.words.len());
            self.words.push((text.clone(), tag.clone(), *field, b));
            x += w + WORD_GAP;
        }
        Ok(ids)
    }

    fn block(&mut self, kind: SegmentKind, lines: &[Line], x0: i32, y: i32) -> Result<i32> {
        let mut ids = Vec::new();
        for (k, line) in lines.iter().enumerate() {
            ids.extend(self.place_line(line, x0, y + PITCH * k as i32)?);
        }
        if !ids.is_empty() {
            self.segments.push((kind, ids));
        }
        Ok(y + PITCH * lines.len() as i32)
    }
}

/// Splits `n` lines into paragraphs of 2-5 lines.
fn paragraph_sizes(n: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut out = Vec::new();
    let mut left = n;
    while left > 0 {
        let k = rng.range(2, 5).min(left);
        out.push(k);
        left -= k;
    }
    out
}

/// Slot index of every line in a column where paragraphs are separated by
/// one blank slot.
fn column_slots(sizes: &[usize]) -> Vec<usize> {
    let mut slots = Vec::new();
    let mut s = 0;
    for &k in sizes {
        slots.extend(s..s + k);
        s += k + 1;
    }
    slots
}

/// One line filling at least 80% of the page width. It crosses every column
/// gap of the section below, so no vertical cut separates it from that
/// section before the section gap does.
fn title(page: &mut Page, content: &mut Content, y: i32) -> Result<i32> {
    let mut pending = VecDeque::new();
    let lines: Vec<Line> = content.line(RIGHT - LEFT, &mut pending, 0.8).into_iter().collect();
    content.remaining += pending.iter().map(Vec::len).sum::<usize>();
    page.block(SegmentKind::Title, &lines, LEFT, y)
}

fn single_column(page: &mut Page, content: &mut Content, y: i32, max_words: usize) -> Result<i32> {
    let budget = content.remaining;
    content.remaining = max_words.min(budget);
    let rest = budget - content.remaining;
    let mut pending = VecDeque::new();
    let mut y = y;
    let mut first = true;
    loop {
        let n = content.rng.range(2, 5);
        let lines = content.lines(RIGHT - LEFT, n, &mut pending);
        if lines.is_empty() {
            break;
        }
        if !first {
            y += PITCH;
        }
        first = false;
        y = page.block(SegmentKind::Paragraph, &lines, LEFT, y)?;
    }
    content.remaining = rest;
    Ok(y)
}

fn two_column(page: &mut Page, content: &mut Content, y: i32, max_words: usize) -> Result<i32> {
    let budget = content.remaining;
    content.remaining = max_words.min(budget);
    let rest = budget - content.remaining;
    let width = (RIGHT - LEFT - COLUMN_GAP) / 2;
    let mut pending = VecDeque::new();
    let lines = content.lines(width, usize::MAX, &mut pending);
    content.remaining = rest;
    let left_n = lines.len().div_ceil(2);
    let (left, right) = lines.split_at(left_n);

    // Paragraph breaks may not line up across the columns, or the page
    // would have a full-width horizontal gap.
    let mut chosen = None;
    for _ in 0..64 {
        let ls = paragraph_sizes(left.len(), &mut content.rng);
        let rs = paragraph_sizes(right.len(), &mut content.rng);
        let (a, b) = (column_slots(&ls), column_slots(&rs));
        let end = a.last().max(b.last()).map_or(0, |e| e + 1);
        if (0..end).all(|s| a.contains(&s) || b.contains(&s)) {
            chosen = Some((ls, rs));
            break;
        }
    }
    let (ls, rs) = chosen.unwrap_or_else(|| (vec![left.len()], vec![right.len()]));
    let mut bottom = y;
    for (lines, sizes, x0) in [(left, ls, LEFT), (right, rs, LEFT + width + COLUMN_GAP)] {
        let mut at = 0;
        let mut yy = y;
        for k in sizes {
            yy = page.block(SegmentKind::Paragraph, &lines[at..at + k], x0, yy)? + PITCH;
            at += k;
        }
        bottom = bottom.max(yy - PITCH);
    }
    Ok(bottom)
}

fn line_width(line: &Line) -> i32 {
    line.iter().map(|w| word_width(&w.0)).sum::<i32>() + WORD_GAP * (line.len() as i32 - 1)
}

/// A grid of cells whose first lines fill 60-100% of the column width. The
/// row count follows from the word budget, with at least two rows; the
/// last row may overrun the budget.
fn table(page: &mut Page, content: &mut Content, y: i32, max_words: usize) -> Result<i32> {
    let budget = content.remaining.min(max_words);
    let rest = content.remaining - budget;
    let cols = content.rng.range(2, 4) as i32;
    let col_w = (RIGHT - LEFT - CELL_GAP * (cols - 1)) / cols;
    let per_row = (0.8 * (RIGHT - LEFT) as f64 / 58.0 * 1.35).round() as usize;
    let rows = (budget as f64 / per_row as f64).round().max(2.0) as usize;
    content.remaining = usize::MAX;
    let mut pending = VecDeque::new();
    let mut y = y;
    for r in 0..rows {
        if r > 0 {
            y += content.rng.range(20, 30) as i32 - (PITCH - WORD_H);
        }
        let mut bottom = y;
        for c in 0..cols {
            let first = content.line(col_w, &mut pending, 0.6).expect("unbounded budget");
            debug_assert!(line_width(&first) * 5 >= col_w * 3);
            let mut cell = vec![first];
            if content.rng.bernoulli(0.35) {
                cell.extend(content.line(col_w, &mut pending, 0.3));
            }
            let x0 = LEFT + c * (col_w + CELL_GAP);
            bottom = bottom.max(page.block(SegmentKind::TableCell, &cell, x0, y)?);
        }
        y = bottom;
    }
    let used = usize::MAX - content.remaining - pending.iter().map(Vec::len).sum::<usize>();
    content.remaining = budget.saturating_sub(used) + rest;
    Ok(y)
}

/// Builds one page of `family` from its random stream.
pub fn gen_document(spec: &SyntheticSpec, family: Family, rng: RngStream) -> Result<Document> {
    spec.validate()?;
    let mut content = Content {
        spec,
        rng,
        remaining: 0,
        keys_left: (0..KEYS.len()).collect(),
        fields: 0,
    };
    content.remaining = content.rng.range(spec.min_words, spec.max_words);
    let mut page = Page::default();
    let section_gap = |c: &mut Content| c.rng.range(50, 70) as i32 - (PITCH - WORD_H);
    match family {
        Family::SingleColumn => {
            single_column(&mut page, &mut content, TOP, usize::MAX)?;
        }
        Family::TwoColumn => {
            two_column(&mut page, &mut content, TOP, usize::MAX)?;
        }
        Family::Table => {
            let y = title(&mut page, &mut content, TOP)?;
            let gap = section_gap(&mut content);
            table(&mut page, &mut content, y + gap, usize::MAX)?;
        }
        Family::Mixed => {
            let y = title(&mut page, &mut content, TOP)?;
            let half = content.remaining / 2;
            let gap = section_gap(&mut content);
            let y = two_column(&mut page, &mut content, y + gap, half.max(8))?;
            let gap = section_gap(&mut content);
            let y = title(&mut page, &mut content, y + gap)?;
            let gap = section_gap(&mut content);
            table(&mut page, &mut content, y + gap, usize::MAX)?;
        }
    }
    finish(page, family)
}

/// Reorders the words into raster order and attaches the annotations.
fn finish(page: Page, family: Family) -> Result<Document> {
    let words = page
        .words
        .iter()
        .map(|(t, _, _, b)| Word::new(t.clone(), *b))
        .collect::<Result<Vec<_>>>()?;
    let staged = Document::new(words, (1000, 1000));
    let raster = raster_scan_order(&staged).permutation;
    let mut new_id = vec![0; raster.len()];
    for (new, &old) in raster.iter().enumerate() {
        new_id[old] = new;
    }
    let mut words: Vec<Word> = raster.iter().map(|&o| staged.words[o].clone()).collect();
    let tags: Vec<String> = raster.iter().map(|&o| page.words[o].1.clone()).collect();
    let mut doc = Document::new(Vec::new(), (1000, 1000));
    let mut segments = Vec::with_capacity(page.segments.len());
    for (s, (kind, ids)) in page.segments.iter().enumerate() {
        let ids: Vec<usize> = ids.iter().map(|&o| new_id[o]).collect();
        for &w in &ids {
            words[w].segment_id = Some(s);
        }
        segments.push(Segment::from_words(*kind, ids, &words)?);
    }
    let mut qa = Vec::new();
    let mut field_words: Vec<(usize, Vec<usize>)> = Vec::new();
    for (old, w) in page.words.iter().enumerate() {
        if let Some(f) = w.2 {
            match field_words.iter_mut().find(|e| e.0 == f) {
                Some(e) => e.1.push(new_id[old]),
                None => field_words.push((f, vec![new_id[old]])),
            }
        }
    }
    for (_, ids) in field_words {
        if ids.windows(2).any(|p| p[1] != p[0] + 1) {
            return Err(Error::Generation("field words are not contiguous in raster order".into()));
        }
        if ids.len() >= 2 {
            qa.push(QaPair {
                question: words[ids[0]].text.clone(),
                answer: [ids[1], *ids.last().expect("non-empty")],
            });
        }
    }
    doc.words = words;
    doc.segments = segments;
    doc.gold_order = Some((0..page.words.len()).map(|o| new_id[o]).collect());
    doc.annotations.bio = Some(tags);
    doc.annotations.qa = qa;
    doc.annotations.class_id = Some(family.id());
    doc.validate()?;
    Ok(doc)
}

/// `n_docs` pages; page `i` depends only on `(seed, i)`.
pub fn gen_synthetic_corpus(spec: &SyntheticSpec, n_docs: usize, seed: u64) -> Result<Vec<Document>> {
    spec.validate()?;
    (0..n_docs)
        .map(|i| {
            let mut rng = RngStream::new(seed, "synth", i as u64);
            let family = spec.families[rng.below(spec.families.len())];
            gen_document(spec, family, rng)
        })
        .collect()
}
