//! OCR-JSON ingestion. Two word layouts are accepted:
//!
//! * FUNSD: `"form"` is a list of entities, each with `"label"`
//!   (`question`, `answer`, `header`, `other`) and nested `"words"`. Entity
//!   labels become BIO tags over the entity's words, `other` maps to `O`.
//!   An entity without nested words is treated as a single word.
//! * Flat: `"words"` is a list of `{"text", "box", "label"?}` where `label`
//!   is already a BIO tag.
//!
//! Boxes are `[x0, y0, x1, y1]` in pixels unless `ext.normalized` is true.
//! The optional `"ext"` block carries what FUNSD lacks:
//!
//! ```json
//! "ext": {
//!   "page_size": [w, h], "normalized": false, "raw_size": [w, h],
//!   "image": "page.png", "gold_order": [..],
//!   "segments": [{"kind": "paragraph", "word_ids": [..]}],
//!   "qa": [{"question": "..", "answer": [s, e]}], "class_id": 3
//! }
//! ```
//!
//! Page size is taken from `ext.page_size`, then the image, then the largest
//! box extent.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{BBox, Document, PageImage, QaPair, Segment, SegmentKind, Word, COORD_MAX};
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct RawWord {
    text: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    #[serde(default)]
    label: Option<String>,
}

#[derive(Deserialize)]
struct RawEntity {
    text: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    words: Option<Vec<RawWord>>,
}

#[derive(Deserialize, Serialize)]
struct RawSegment {
    kind: SegmentKind,
    word_ids: Vec<usize>,
}

#[derive(Deserialize, Default)]
struct Ext {
    page_size: Option<[f64; 2]>,
    #[serde(default)]
    normalized: bool,
    raw_size: Option<[u32; 2]>,
    image: Option<String>,
    gold_order: Option<Vec<usize>>,
    #[serde(default)]
    segments: Vec<RawSegment>,
    #[serde(default)]
    qa: Vec<QaPair>,
    class_id: Option<usize>,
}

#[derive(Deserialize)]
struct RawFile {
    form: Option<Vec<RawEntity>>,
    words: Option<Vec<RawWord>>,
    #[serde(default)]
    ext: Ext,
}

/// Reads a document. A relative `ext.image` path resolves against the
/// file's directory.
pub fn load_ocr_json(path: &Path) -> Result<Document> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ocr_json(&text, path.parent())
}

pub fn parse_ocr_json(text: &str, base_dir: Option<&Path>) -> Result<Document> {
    let raw: RawFile = serde_json::from_str(text)?;
    let (words, tags) = match (raw.form, raw.words) {
        (Some(_), Some(_)) => {
            return Err(Error::InvalidDocument("file has both \"form\" and \"words\"".into()))
        }
        (Some(form), None) => flatten_form(form),
        (None, Some(words)) => {
            let tags = words.iter().map(|w| w.label.clone()).collect();
            (words, tags)
        }
        (None, None) => (Vec::new(), Vec::new()),
    };
    let ext = raw.ext;

    let image = match &ext.image {
        Some(p) => {
            let p = base_dir.map_or_else(|| Path::new(p).to_path_buf(), |d| d.join(p));
            Some(PageImage::load(&p)?)
        }
        None => None,
    };

    let page = if ext.normalized {
        (COORD_MAX as f64, COORD_MAX as f64)
    } else if let Some([w, h]) = ext.page_size {
        (w, h)
    } else if let Some(img) = &image {
        (img.width() as f64, img.height() as f64)
    } else {
        let w = words.iter().fold(0.0f64, |m, w| m.max(w.bbox[2]));
        let h = words.iter().fold(0.0f64, |m, w| m.max(w.bbox[3]));
        (w.max(1.0), h.max(1.0))
    };
    if !(page.0 > 0.0 && page.1 > 0.0) {
        return Err(Error::InvalidDocument(format!("page size {}x{} must be positive", page.0, page.1)));
    }

    let mut out = Vec::with_capacity(words.len());
    for (i, w) in words.into_iter().enumerate() {
        let [x0, y0, x1, y1] = w.bbox;
        let bad = |message: String| Error::InvalidWord { index: i, message };
        if !w.bbox.iter().all(|v| v.is_finite()) {
            return Err(bad("non-finite coordinate".into()));
        }
        if x1 < x0 || y1 < y0 {
            return Err(bad(format!("inverted box [{x0}, {y0}, {x1}, {y1}]")));
        }
        if x0 < 0.0 || y0 < 0.0 || x1 > page.0 || y1 > page.1 {
            return Err(bad(format!(
                "box [{x0}, {y0}, {x1}, {y1}] outside the {}x{} page",
                page.0, page.1
            )));
        }
        let bbox = if ext.normalized {
            if w.bbox.iter().any(|v| v.fract() != 0.0) {
                return Err(bad("normalized coordinates must be integers".into()));
            }
            BBox::new(x0 as i32, y0 as i32, x1 as i32, y1 as i32)
        } else {
            super::normalize_coords(w.bbox, page)
        }
        .map_err(|e| bad(e.to_string()))?;
        out.push(Word::new(w.text, bbox).map_err(|e| bad(e.to_string()))?);
    }

    let bio = if tags.iter().any(Option::is_some) {
        Some(tags.into_iter().map(|t| t.unwrap_or_else(|| "O".into())).collect())
    } else {
        None
    };

    let raw_size = match ext.raw_size {
        Some([w, h]) => (w, h),
        None => (page.0.round() as u32, page.1.round() as u32),
    };
    let mut doc = Document::new(out, raw_size);
    doc.image = image;
    for seg in ext.segments {
        let s = doc.segments.len();
        for &w in &seg.word_ids {
            if let Some(word) = doc.words.get_mut(w) {
                word.segment_id = Some(s);
            }
        }
        doc.segments.push(Segment::from_words(seg.kind, seg.word_ids, &doc.words)?);
    }
    doc.gold_order = ext.gold_order;
    doc.annotations.bio = bio;
    doc.annotations.qa = ext.qa;
    doc.annotations.class_id = ext.class_id;
    doc.validate()?;
    Ok(doc)
}

/// Expands FUNSD entities into words with BIO tags. Words with blank text,
/// which occur in the released FUNSD files, are dropped.
fn flatten_form(form: Vec<RawEntity>) -> (Vec<RawWord>, Vec<Option<String>>) {
    let mut words = Vec::new();
    let mut tags = Vec::new();
    for entity in form {
        let kind = entity
            .label
            .as_deref()
            .map(str::to_ascii_uppercase)
            .filter(|l| l != "OTHER");
        let members = match entity.words {
            Some(ws) => ws,
            None => vec![RawWord {
                text: entity.text,
                bbox: entity.bbox,
                label: None,
            }],
        };
        let mut first = true;
        for w in members {
            if w.text.trim().is_empty() {
                log::debug!("skipping blank FUNSD word");
                continue;
            }
            tags.push(Some(match &kind {
                Some(k) if first => format!("B-{k}"),
                Some(k) => format!("I-{k}"),
                None => "O".to_string(),
            }));
            first = false;
            words.push(w);
        }
    }
    (words, tags)
}

/// Flat-layout JSON with normalized boxes. The image is not embedded.
pub fn to_ocr_json(doc: &Document) -> Value {
    let words: Vec<Value> = doc
        .words
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let mut m = Map::new();
            m.insert("text".into(), json!(w.text));
            m.insert("box".into(), json!(w.bbox.corners()));
            if let Some(tags) = &doc.annotations.bio {
                m.insert("label".into(), json!(tags[i]));
            }
            Value::Object(m)
        })
        .collect();
    let mut ext = Map::new();
    ext.insert("normalized".into(), json!(true));
    ext.insert("raw_size".into(), json!([doc.raw_size.0, doc.raw_size.1]));
    if let Some(order) = &doc.gold_order {
        ext.insert("gold_order".into(), json!(order));
    }
    if !doc.segments.is_empty() {
        let segs: Vec<RawSegment> = doc
            .segments
            .iter()
            .map(|s| RawSegment {
                kind: s.kind,
                word_ids: s.word_ids.clone(),
            })
            .collect();
        ext.insert("segments".into(), json!(segs));
    }
    if !doc.annotations.qa.is_empty() {
        ext.insert("qa".into(), json!(doc.annotations.qa));
    }
    if let Some(c) = doc.annotations.class_id {
        ext.insert("class_id".into(), json!(c));
    }
    json!({ "words": words, "ext": ext })
}

/// Writes the document as JSON. A page image, when present, is written as a
/// PNG next to it and referenced from `ext.image`.
pub fn save_ocr_json(doc: &Document, path: &Path) -> Result<()> {
    let mut value = to_ocr_json(doc);
    if let Some(img) = &doc.image {
        let png = path.with_extension("png");
        img.save_png(&png)?;
        let name = png
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::InvalidArgument(format!("bad output path {}", path.display())))?;
        value["ext"]["image"] = json!(name);
    }
    let text = serde_json::to_string_pretty(&value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_word_on_page() {
        let d = parse_ocr_json(
            r#"{"words":[{"text":"TOTAL","box":[10,20,60,30]}],"ext":{"page_size":[100,100]}}"#,
            None,
        )
        .unwrap();
        assert_eq!(d.words[0].bbox, BBox::new(100, 200, 600, 300).unwrap());
        assert_eq!(d.words[0].text, "TOTAL");
        assert_eq!(d.annotations.bio, None);
    }

    #[test]
    fn empty_word_list() {
        let d = parse_ocr_json(r#"{"words":[]}"#, None).unwrap();
        assert!(d.is_empty());
        assert!(parse_ocr_json("{}", None).unwrap().is_empty());
    }

    #[test]
    fn inverted_box_names_word() {
        let e = parse_ocr_json(
            r#"{"words":[{"text":"a","box":[0,0,5,5]},{"text":"b","box":[9,0,3,5]}],"ext":{"page_size":[10,10]}}"#,
            None,
        )
        .unwrap_err();
        assert!(matches!(e, Error::InvalidWord { index: 1, .. }), "{e}");
    }

    #[test]
    fn out_of_page_box_is_rejected() {
        let e = parse_ocr_json(
            r#"{"words":[{"text":"a","box":[0,0,50,5]}],"ext":{"page_size":[10,10]}}"#,
            None,
        )
        .unwrap_err();
        assert!(matches!(e, Error::InvalidWord { index: 0, .. }));
    }

    #[test]
    fn malformed_json_reports_line() {
        let e = parse_ocr_json("{\n\"words\": [\n  {\"text\": }\n]}", None).unwrap_err();
        match e {
            Error::Json { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn funsd_entities_become_bio() {
        let src = r#"{"form":[
            {"id":0,"text":"Date:","box":[0,0,40,10],"label":"question","linking":[[0,1]],
             "words":[{"text":"Date:","box":[0,0,40,10]}]},
            {"id":1,"text":"May 5","box":[50,0,100,10],"label":"answer","linking":[],
             "words":[{"text":"May","box":[50,0,70,10]},{"text":"","box":[70,0,72,10]},{"text":"5","box":[75,0,100,10]}]},
            {"id":2,"text":"x","box":[0,20,10,30],"label":"other","words":[{"text":"x","box":[0,20,10,30]}]}
        ]}"#;
        let d = parse_ocr_json(src, None).unwrap();
        let tags = d.annotations.bio.clone().unwrap();
        assert_eq!(tags, ["B-QUESTION", "B-ANSWER", "I-ANSWER", "O"]);
        assert_eq!(d.raw_size, (100, 30));
    }

    #[test]
    fn round_trip_preserves_content() {
        let words = vec![
            Word::new("alpha", BBox::new(10, 10, 50, 30).unwrap()).unwrap(),
            Word::new("beta", BBox::new(60, 10, 90, 30).unwrap()).unwrap(),
            Word::new("gamma", BBox::new(10, 40, 70, 60).unwrap()).unwrap(),
        ];
        let mut d = Document::new(words, (800, 600));
        d.segments = vec![
            Segment::from_words(SegmentKind::Title, vec![0, 1], &d.words).unwrap(),
            Segment::from_words(SegmentKind::Paragraph, vec![2], &d.words).unwrap(),
        ];
        d.words[0].segment_id = Some(0);
        d.words[1].segment_id = Some(0);
        d.words[2].segment_id = Some(1);
        d.gold_order = Some(vec![2, 0, 1]);
        d.annotations.bio = Some(vec!["B-X".into(), "I-X".into(), "O".into()]);
        d.annotations.qa = vec![QaPair {
            question: "what".into(),
            answer: [1, 2],
        }];
        d.annotations.class_id = Some(2);
        d.image = Some(d.synthesize_image());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("doc.json");
        save_ocr_json(&d, &path).unwrap();
        let back = load_ocr_json(&path).unwrap();
        assert_eq!(back, d);
    }
}
