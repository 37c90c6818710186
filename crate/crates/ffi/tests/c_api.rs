use fewshot_persona_ffi::*;
use std::ffi::{c_char, CStr, CString};
use std::ptr;

const SMALL: &str = r#"{
  "data": {"num_train": 20, "num_test": 4, "num_valid": 2, "samples_per_train": 8,
           "samples_per_heldout": 8, "vocab_size": 40, "num_function_words": 4,
           "num_topics": 3, "topic_size": 4, "k": 3, "query_len": [2, 4],
           "response_len": [2, 5], "max_len": 10},
  "meta": {"k": 3, "meta_batch": 2},
  "steps": 2,
  "eval": {"decode": {"top_k": 3, "max_len": 5}}
}"#;

fn take(s: *mut c_char) -> String {
    assert!(!s.is_null());
    let out = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_string();
    unsafe { fsp_string_free(s) };
    out
}

fn last_error() -> String {
    let p = fsp_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

fn corpus() -> *mut FspCorpus {
    let cfg = CString::new(SMALL).unwrap();
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { fsp_corpus_generate(cfg.as_ptr(), &mut c) }, FspStatus::Ok);
    c
}

#[test]
fn train_save_load_evaluate() {
    let cfg = CString::new(SMALL).unwrap();
    let c = corpus();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { fsp_train(c, cfg.as_ptr(), &mut m) }, FspStatus::Ok);
    assert!(fsp_last_error().is_null());

    let mut sum = ptr::null_mut();
    assert_eq!(unsafe { fsp_model_checksum(m, &mut sum) }, FspStatus::Ok);
    let sum = take(sum);
    assert_eq!(sum.len(), 64);

    let mut js = ptr::null_mut();
    assert_eq!(unsafe { fsp_evaluate(m, c, FspSplit::Test, &mut js) }, FspStatus::Ok);
    let ev: serde_json::Value = serde_json::from_str(&take(js)).unwrap();
    assert_eq!(ev["speakers"].as_array().unwrap().len(), 4);
    assert_eq!(ev["checksum_before"], ev["checksum_after"]);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { fsp_model_save(m, path.as_ptr()) }, FspStatus::Ok);
    let mut m2 = ptr::null_mut();
    assert_eq!(unsafe { fsp_model_load(path.as_ptr(), &mut m2) }, FspStatus::Ok);
    let mut sum2 = ptr::null_mut();
    assert_eq!(unsafe { fsp_model_checksum(m2, &mut sum2) }, FspStatus::Ok);
    assert_eq!(take(sum2), sum);

    let cdir = CString::new(dir.path().join("corpus").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { fsp_corpus_save(c, cdir.as_ptr()) }, FspStatus::Ok);
    let mut c2 = ptr::null_mut();
    assert_eq!(unsafe { fsp_corpus_load(cdir.as_ptr(), &mut c2) }, FspStatus::Ok);
    let (mut h1, mut h2) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(fsp_corpus_hash(c, &mut h1), FspStatus::Ok);
        assert_eq!(fsp_corpus_hash(c2, &mut h2), FspStatus::Ok);
    }
    assert_eq!(take(h1), take(h2));

    unsafe {
        fsp_model_free(m);
        fsp_model_free(m2);
        fsp_corpus_free(c);
        fsp_corpus_free(c2);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut c = ptr::null_mut();
    let bad = CString::new(r#"{"steps": "many"}"#).unwrap();
    assert_eq!(unsafe { fsp_corpus_generate(bad.as_ptr(), &mut c) }, FspStatus::Format);
    assert!(c.is_null());
    assert!(last_error().contains("invalid type"), "{}", last_error());

    let bad = CString::new(r#"{"meta": {"alpha": -1.0}}"#).unwrap();
    assert_eq!(unsafe { fsp_corpus_generate(bad.as_ptr(), &mut c) }, FspStatus::Config);

    assert_eq!(unsafe { fsp_corpus_generate(ptr::null(), ptr::null_mut()) }, FspStatus::NullPointer);
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { fsp_corpus_hash(ptr::null(), &mut s) }, FspStatus::NullPointer);
    assert!(last_error().contains("corpus"));

    let missing = CString::new("/nonexistent/ck.json").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { fsp_model_load(missing.as_ptr(), &mut m) }, FspStatus::Io);

    let invalid = [0xffu8, 0];
    assert_eq!(
        unsafe { fsp_corpus_load(invalid.as_ptr().cast(), &mut c) },
        FspStatus::InvalidUtf8
    );

    unsafe {
        fsp_corpus_free(ptr::null_mut());
        fsp_model_free(ptr::null_mut());
        fsp_string_free(ptr::null_mut());
    }
}

#[test]
fn evaluation_refuses_foreign_corpus() {
    let cfg = CString::new(SMALL).unwrap();
    let c = corpus();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { fsp_train(c, cfg.as_ptr(), &mut m) }, FspStatus::Ok);
    let other_cfg = SMALL.replace("\"steps\": 2", "\"steps\": 2, \"data_seed\": 5");
    let other_cfg = CString::new(other_cfg).unwrap();
    let mut other = ptr::null_mut();
    assert_eq!(unsafe { fsp_corpus_generate(other_cfg.as_ptr(), &mut other) }, FspStatus::Ok);
    let mut js = ptr::null_mut();
    assert_eq!(unsafe { fsp_evaluate(m, other, FspSplit::Test, &mut js) }, FspStatus::Incompatible);
    assert!(js.is_null());
    assert!(last_error().contains("dataset hash"));
    unsafe {
        fsp_model_free(m);
        fsp_corpus_free(c);
        fsp_corpus_free(other);
    }
}

#[test]
fn version_and_header() {
    let v = unsafe { CStr::from_ptr(fsp_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/fewshot_persona.h")).unwrap();
    for f in [
        "fsp_corpus_generate",
        "fsp_train",
        "fsp_evaluate",
        "fsp_model_load",
        "fsp_last_error",
        "typedef struct FspModel FspModel",
        "FSP_STATUS_INCOMPATIBLE = 6",
    ] {
        assert!(header.contains(f), "{f}");
    }
}
