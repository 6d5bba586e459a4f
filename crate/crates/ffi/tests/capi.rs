use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use docweave::harness::corpus::load_corpus;
use docweave::harness::{finetune_run, RunConfig};
use docweave::heads::HeadKind;
use docweave_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn c_path(p: &Path) -> CString {
    c(p.to_str().unwrap())
}

fn last_error() -> String {
    let p = dw_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn generated_document_orders_through_the_c_api() {
    let dir = tempfile::tempdir().unwrap();
    let d = c_path(dir.path());
    assert_eq!(unsafe { dw_generate_corpus(d.as_ptr(), 2, 5) }, DwStatus::Ok);
    assert!(dw_last_error().is_null());

    let mut doc = ptr::null_mut();
    let path = c_path(&dir.path().join("doc_00001.json"));
    assert_eq!(unsafe { dw_document_load(path.as_ptr(), &mut doc) }, DwStatus::Ok);
    let n = unsafe { dw_document_word_count(doc) };
    assert!(n > 0);

    let mut len = 0usize;
    let mut small = vec![0usize; 1];
    let status = unsafe { dw_reading_order(doc, DwOrderMethod::Layout, small.as_mut_ptr(), 1, &mut len) };
    assert_eq!(status, DwStatus::BufferTooSmall);
    assert_eq!(len, n);

    let mut order = vec![0usize; n];
    assert_eq!(unsafe { dw_reading_order(doc, DwOrderMethod::Layout, order.as_mut_ptr(), n, &mut len) }, DwStatus::Ok);
    let gold = load_corpus(dir.path()).unwrap()[1].gold_order.clone().unwrap();
    assert_eq!(order, gold);
    let mut sorted = order.clone();
    let mut raster = vec![0usize; n];
    assert_eq!(unsafe { dw_reading_order(doc, DwOrderMethod::Raster, raster.as_mut_ptr(), n, &mut len) }, DwStatus::Ok);
    sorted.sort_unstable();
    assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    unsafe { dw_document_free(doc) };
}

#[test]
fn errors_carry_status_and_message() {
    let mut doc = ptr::null_mut();
    assert_eq!(unsafe { dw_document_load(ptr::null(), &mut doc) }, DwStatus::NullPointer);
    assert!(last_error().contains("null"));

    let missing = c("/nonexistent/doc.json");
    assert_eq!(unsafe { dw_document_load(missing.as_ptr(), &mut doc) }, DwStatus::Io);
    assert!(doc.is_null());

    let bad = c("{\"words\": [");
    assert_eq!(unsafe { dw_document_parse(bad.as_ptr(), &mut doc) }, DwStatus::Parse);
    assert!(last_error().contains("line"));

    let inverted = c(r#"{"words": [{"text": "a", "box": [10, 0, 5, 5]}], "ext": {"normalized": true}}"#);
    assert_eq!(unsafe { dw_document_parse(inverted.as_ptr(), &mut doc) }, DwStatus::InvalidDocument);
    assert!(last_error().contains("word 0"));

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ck");
    std::fs::write(&junk, b"ELCK\x02\0\0\0").unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { dw_model_load(c_path(&junk).as_ptr(), &mut model) }, DwStatus::Checkpoint);
    assert!(last_error().contains("version"));
    assert!(model.is_null());

    let mut len = 0;
    assert_eq!(unsafe { dw_reading_order(ptr::null(), DwOrderMethod::Raster, ptr::null_mut(), 0, &mut len) }, DwStatus::NullPointer);
    assert_eq!(unsafe { dw_document_word_count(ptr::null()) }, 0);
    unsafe {
        dw_document_free(ptr::null_mut());
        dw_model_free(ptr::null_mut());
        dw_vocab_free(ptr::null_mut());
        dw_string_free(ptr::null_mut());
    }
    assert!(!unsafe { CStr::from_ptr(dw_version()) }.to_bytes().is_empty());
}

#[test]
fn fine_tuned_model_predicts_json() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(unsafe { dw_generate_corpus(c_path(dir.path()).as_ptr(), 4, 6) }, DwStatus::Ok);
    let docs = load_corpus(dir.path()).unwrap();
    let vocab = docweave::harness::corpus::load_vocab(None, dir.path()).unwrap();
    let cfg = RunConfig {
        layers: 1,
        d: 16,
        heads: 2,
        ffn: 32,
        patch_dim: 4,
        epochs: 1,
        task: HeadKind::Bio,
        ..RunConfig::default()
    };
    let tuned = finetune_run(&cfg, None, &docs, &docs, &vocab, None).unwrap();
    let ck = dir.path().join("bio.ck");
    tuned.checkpoint(&cfg).save(&ck).unwrap();

    let (mut model, mut v, mut doc) = (ptr::null_mut(), ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(dw_model_load(c_path(&ck).as_ptr(), &mut model), DwStatus::Ok);
        assert_eq!(dw_vocab_load(c_path(&dir.path().join("vocab.txt")).as_ptr(), &mut v), DwStatus::Ok);
        assert_eq!(dw_document_load(c_path(&dir.path().join("doc_00000.json")).as_ptr(), &mut doc), DwStatus::Ok);
        let mut out = ptr::null_mut();
        assert_eq!(dw_model_predict_json(model, v, doc, ptr::null(), &mut out), DwStatus::Ok);
        let json: serde_json::Value = serde_json::from_str(CStr::from_ptr(out).to_str().unwrap()).unwrap();
        assert!(json["entities"].is_array());
        dw_string_free(out);
        dw_document_free(doc);
        dw_vocab_free(v);
        dw_model_free(model);
    }
}
