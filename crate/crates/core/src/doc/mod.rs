//! Documents: OCR words with normalized boxes, the page image, layout
//! segments, an optional gold reading order and task annotations.

mod image;
mod json;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

pub use self::image::PageImage;
pub use self::json::{load_ocr_json, parse_ocr_json, save_ocr_json, to_ocr_json};
use crate::error::{Error, Result};

/// Upper bound of normalized coordinates.
pub const COORD_MAX: i32 = 1000;

/// Axis-aligned box in normalized `[0, 1000]` page coordinates. Width and
/// height are derived from the corners.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct BBox {
    x0: i32,
    y0: i32,
    x1: i32,
    y1: i32,
}

impl BBox {
    pub const ZERO: BBox = BBox {
        x0: 0,
        y0: 0,
        x1: 0,
        y1: 0,
    };

    pub fn new(x0: i32, y0: i32, x1: i32, y1: i32) -> Result<Self> {
        let in_range = |v: i32| (0..=COORD_MAX).contains(&v);
        if !(in_range(x0) && in_range(y0) && in_range(x1) && in_range(y1)) {
            return Err(Error::InvalidArgument(format!(
                "box ({x0},{y0},{x1},{y1}) outside [0, {COORD_MAX}]"
            )));
        }
        if x1 < x0 || y1 < y0 {
            return Err(Error::InvalidArgument(format!("inverted box ({x0},{y0},{x1},{y1})")));
        }
        Ok(BBox { x0, y0, x1, y1 })
    }

    pub fn x0(&self) -> i32 {
        self.x0
    }
    pub fn y0(&self) -> i32 {
        self.y0
    }
    pub fn x1(&self) -> i32 {
        self.x1
    }
    pub fn y1(&self) -> i32 {
        self.y1
    }
    pub fn w(&self) -> i32 {
        self.x1 - self.x0
    }
    pub fn h(&self) -> i32 {
        self.y1 - self.y0
    }

    pub fn corners(&self) -> [i32; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    /// Doubled center coordinates, exact in integers.
    pub fn center2_x(&self) -> i32 {
        self.x0 + self.x1
    }
    pub fn center2_y(&self) -> i32 {
        self.y0 + self.y1
    }

    pub fn translate(&self, dx: i32, dy: i32) -> Result<BBox> {
        BBox::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }

    /// Length of the overlap of the vertical extents.
    pub fn vertical_overlap(&self, other: &BBox) -> i32 {
        (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0)
    }
}

/// Maps a pixel-space rectangle `[x0, y0, x1, y1]` on a `page` of
/// `(width, height)` pixels to normalized coordinates:
/// `floor(coord · 1000 / extent)`, clamped to `[0, 1000]`.
pub fn normalize_coords(pixel: [f64; 4], page: (f64, f64)) -> Result<BBox> {
    let (w, h) = page;
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::InvalidArgument(format!("page extent {w}x{h} must be positive")));
    }
    let scale = |v: f64, extent: f64| {
        let n = (v * COORD_MAX as f64 / extent).floor();
        n.clamp(0.0, COORD_MAX as f64) as i32
    };
    BBox::new(
        scale(pixel[0], w),
        scale(pixel[1], h),
        scale(pixel[2], w),
        scale(pixel[3], h),
    )
}

/// Smallest box containing all `boxes`.
pub fn union_bbox(boxes: &[BBox]) -> Result<BBox> {
    let first = boxes
        .first()
        .ok_or_else(|| Error::InvalidArgument("union of zero boxes".into()))?;
    Ok(boxes.iter().fold(*first, |acc, b| BBox {
        x0: acc.x0.min(b.x0),
        y0: acc.y0.min(b.y0),
        x1: acc.x1.max(b.x1),
        y1: acc.y1.max(b.y1),
    }))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Word {
    pub text: String,
    pub bbox: BBox,
    pub segment_id: Option<usize>,
}

impl Word {
    pub fn new(text: impl Into<String>, bbox: BBox) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidArgument("word text is empty".into()));
        }
        Ok(Word {
            text,
            bbox,
            segment_id: None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Paragraph,
    TableCell,
    ListItem,
    Title,
    Figure,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub word_ids: Vec<usize>,
    pub bbox: BBox,
}

impl Segment {
    /// Builds a segment whose box is the union of its words' boxes.
    pub fn from_words(kind: SegmentKind, word_ids: Vec<usize>, words: &[Word]) -> Result<Self> {
        let boxes = word_ids
            .iter()
            .map(|&i| {
                words
                    .get(i)
                    .map(|w| w.bbox)
                    .ok_or_else(|| Error::InvalidDocument(format!("segment refers to missing word {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let bbox = union_bbox(&boxes).map_err(|_| Error::InvalidDocument("empty segment".into()))?;
        Ok(Segment { kind, word_ids, bbox })
    }
}

/// An extractive question whose answer is the inclusive word span
/// `[start, end]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: [usize; 2],
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Annotations {
    /// One BIO tag per word (`O`, `B-TYPE`, `I-TYPE`).
    pub bio: Option<Vec<String>>,
    pub qa: Vec<QaPair>,
    pub class_id: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub words: Vec<Word>,
    pub image: Option<PageImage>,
    pub segments: Vec<Segment>,
    pub gold_order: Option<Vec<usize>>,
    pub annotations: Annotations,
    /// Original page size in pixels, `(width, height)`.
    pub raw_size: (u32, u32),
}

/// Longer side, in pixels, of page images synthesized from word boxes.
pub const SYNTHETIC_PAGE_LONG_SIDE: u32 = 448;

impl Document {
    pub fn new(words: Vec<Word>, raw_size: (u32, u32)) -> Self {
        Document {
            words,
            image: None,
            segments: Vec::new(),
            gold_order: None,
            annotations: Annotations::default(),
            raw_size,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.words.iter().map(|w| w.bbox).collect()
    }

    /// The page image, or a white page with black word boxes when the
    /// document carries none.
    pub fn page_image(&self) -> std::borrow::Cow<'_, PageImage> {
        match &self.image {
            Some(img) => std::borrow::Cow::Borrowed(img),
            None => std::borrow::Cow::Owned(self.synthesize_image()),
        }
    }

    pub fn synthesize_image(&self) -> PageImage {
        let (w, h) = (self.raw_size.0.max(1), self.raw_size.1.max(1));
        let long = w.max(h) as f64;
        let s = SYNTHETIC_PAGE_LONG_SIDE as f64 / long;
        let (pw, ph) = (((w as f64 * s).round() as u32).max(1), ((h as f64 * s).round() as u32).max(1));
        let mut img = PageImage::blank(pw, ph, 1);
        for word in &self.words {
            img.fill_normalized(&word.bbox, 0);
        }
        img
    }

    /// Checks the cross-field invariants: gold order is a permutation,
    /// segments reference existing words and are disjoint, BIO tags are
    /// well formed, QA spans are in range.
    pub fn validate(&self) -> Result<()> {
        let n = self.words.len();
        for (i, w) in self.words.iter().enumerate() {
            if w.text.trim().is_empty() {
                return Err(Error::InvalidWord {
                    index: i,
                    message: "empty text".into(),
                });
            }
        }
        if let Some(order) = &self.gold_order {
            if !is_permutation(order, n) {
                return Err(Error::InvalidDocument(format!(
                    "gold order is not a permutation of 0..{n}"
                )));
            }
        }
        let mut seen = HashSet::new();
        for (s, seg) in self.segments.iter().enumerate() {
            if seg.word_ids.is_empty() {
                return Err(Error::InvalidDocument(format!("segment {s} is empty")));
            }
            for &w in &seg.word_ids {
                if w >= n {
                    return Err(Error::InvalidDocument(format!("segment {s} refers to missing word {w}")));
                }
                if !seen.insert(w) {
                    return Err(Error::InvalidDocument(format!("word {w} is in more than one segment")));
                }
            }
        }
        if let Some(tags) = &self.annotations.bio {
            if tags.len() != n {
                return Err(Error::InvalidDocument(format!("{} BIO tags for {n} words", tags.len())));
            }
            check_bio(tags)?;
        }
        for qa in &self.annotations.qa {
            let [s, e] = qa.answer;
            if s > e || e >= n {
                return Err(Error::InvalidDocument(format!("answer span [{s}, {e}] for {n} words")));
            }
        }
        Ok(())
    }

    /// Words of the inclusive span joined by spaces.
    pub fn span_text(&self, start: usize, end: usize) -> String {
        self.words[start..=end]
            .iter()
            .map(|w| w.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn is_permutation(order: &[usize], n: usize) -> bool {
    if order.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    for &i in order {
        if i >= n || seen[i] {
            return false;
        }
        seen[i] = true;
    }
    true
}

/// Rejects `I-X` unless it follows `B-X` or `I-X`, and unknown prefixes.
pub fn check_bio(tags: &[String]) -> Result<()> {
    let mut prev: Option<&str> = None;
    for (i, tag) in tags.iter().enumerate() {
        if tag == "O" {
            prev = None;
        } else if let Some(t) = tag.strip_prefix("B-") {
            prev = Some(t);
        } else if let Some(t) = tag.strip_prefix("I-") {
            if prev != Some(t) {
                return Err(Error::InvalidWord {
                    index: i,
                    message: format!("tag {tag} does not continue an entity of the same type"),
                });
            }
        } else {
            return Err(Error::InvalidWord {
                index: i,
                message: format!("unknown BIO tag {tag}"),
            });
        }
    }
    Ok(())
}
