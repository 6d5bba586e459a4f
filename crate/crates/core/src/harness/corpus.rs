//! Corpus directories: one OCR-JSON file per page (with an optional PNG
//! beside it) plus `vocab.txt`.

use std::path::{Path, PathBuf};

use crate::doc::{load_ocr_json, save_ocr_json, Document};
use crate::embedder::Vocab;
use crate::error::{Error, Result};

pub const VOCAB_FILE: &str = "vocab.txt";

/// Writes `docs` as `doc_00000.json`, ... and the vocabulary. With
/// `images`, each page is rendered and stored as a PNG.
pub fn save_corpus(dir: &Path, docs: &[Document], vocab: &Vocab, images: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, d) in docs.iter().enumerate() {
        let path = dir.join(format!("doc_{i:05}.json"));
        if images && d.image.is_none() {
            let mut with_image = d.clone();
            with_image.image = Some(d.synthesize_image());
            save_ocr_json(&with_image, &path)?;
        } else {
            save_ocr_json(d, &path)?;
        }
    }
    vocab.save(&dir.join(VOCAB_FILE))
}

/// JSON files of `dir` in name order.
pub fn corpus_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_corpus(dir: &Path) -> Result<Vec<Document>> {
    corpus_files(dir)?.iter().map(|p| load_ocr_json(p)).collect()
}

/// The vocabulary at `explicit`, or `vocab.txt` inside `dir`.
pub fn load_vocab(explicit: Option<&Path>, dir: &Path) -> Result<Vocab> {
    match explicit {
        Some(p) => Vocab::load(p),
        None => Vocab::load(&dir.join(VOCAB_FILE)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::{gen_synthetic_corpus, SyntheticSpec};

    #[test]
    fn corpus_round_trips_through_a_directory() {
        let spec = SyntheticSpec::default();
        let docs = gen_synthetic_corpus(&spec, 3, 9).unwrap();
        let vocab = spec.vocab().unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(dir.path(), &docs, &vocab, true).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in docs.iter().zip(&back) {
            assert_eq!(a.words, b.words);
            assert_eq!(a.gold_order, b.gold_order);
            assert_eq!(a.annotations, b.annotations);
            assert_eq!(b.image.as_ref(), Some(&a.synthesize_image()));
        }
        assert_eq!(load_vocab(None, dir.path()).unwrap(), vocab);
    }
}
