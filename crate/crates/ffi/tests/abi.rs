//! Exercises the exported C ABI end to end: loading, decoding, error
//! reporting, and the header contract.

use std::ffi::{CStr, CString};
use std::fs;
use std::path::PathBuf;
use std::ptr;

use remrg_core::checkpoint::save_checkpoint;
use remrg_core::corpus::{save_features, tokenize, FeatureSet, Vocabulary};
use remrg_core::model::{init_model, ModelConfig};
use remrg_core::RngState;

use remrg_ffi::*;

struct Fixture {
    dir: PathBuf,
    ckpt: CString,
    vocab: CString,
    features: CString,
    n_regions: usize,
    dim: usize,
    values: Vec<f64>,
}

fn fixture(name: &str) -> Fixture {
    let dir = std::env::temp_dir().join("remrg_ffi_test").join(name);
    fs::create_dir_all(&dir).unwrap();

    let text = "there is a nodule in the top left region .";
    let lists: Vec<Vec<String>> = vec![tokenize(text)];
    let refs: Vec<&[String]> = lists.iter().map(|l| l.as_slice()).collect();
    let vocab = Vocabulary::build(refs, 1);

    let config = ModelConfig {
        d_model: 8,
        stack_levels: 1,
        vocab_size: vocab.size(),
        max_len: 16,
        feature_dim_in: 6,
        n_regions: 4,
    };
    let model = init_model(&config, 9).unwrap();

    let ckpt_path = dir.join("model.ckpt");
    save_checkpoint(&ckpt_path, &model).unwrap();
    let vocab_path = dir.join("vocab.txt");
    vocab.save(&vocab_path).unwrap();

    let mut rng = RngState::new(5);
    let values: Vec<f64> = (0..config.n_regions * config.feature_dim_in)
        .map(|_| rng.uniform(-1.0, 1.0))
        .collect();
    let feat_path = dir.join("img0000.feat");
    save_features(
        &feat_path,
        &FeatureSet::new("img0000", config.n_regions, config.feature_dim_in, values.clone()),
    )
    .unwrap();

    Fixture {
        ckpt: CString::new(ckpt_path.to_str().unwrap()).unwrap(),
        vocab: CString::new(vocab_path.to_str().unwrap()).unwrap(),
        features: CString::new(feat_path.to_str().unwrap()).unwrap(),
        n_regions: config.n_regions,
        dim: config.feature_dim_in,
        values,
        dir,
    }
}

fn load(fx: &Fixture) -> *mut RemrgModel {
    let mut model: *mut RemrgModel = ptr::null_mut();
    let code = unsafe { remrg_model_load(fx.ckpt.as_ptr(), fx.vocab.as_ptr(), &mut model) };
    assert_eq!(code, REMRG_OK, "load failed: {}", last_error());
    assert!(!model.is_null());
    model
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(remrg_last_error()).to_string_lossy().into_owned() }
}

fn take_string(ptr: *mut std::ffi::c_char) -> String {
    assert!(!ptr.is_null());
    let s = unsafe { CStr::from_ptr(ptr).to_string_lossy().into_owned() };
    unsafe { remrg_string_free(ptr) };
    s
}

#[test]
fn load_generate_free_roundtrip() {
    let fx = fixture("roundtrip");
    let model = load(&fx);
    unsafe {
        assert!(remrg_model_vocab_size(model) > 4);
        assert!(remrg_model_param_count(model) > 0);

        let mut out: *mut std::ffi::c_char = ptr::null_mut();
        let code = remrg_generate_file(
            model,
            fx.features.as_ptr(),
            REMRG_MODE_GREEDY,
            1,
            2.0,
            0,
            0,
            &mut out,
        );
        assert_eq!(code, REMRG_OK, "{}", last_error());
        let text_a = take_string(out);

        // same inputs give the same text; the buffer path agrees with the
        // file path on identical values
        let mut out_b: *mut std::ffi::c_char = ptr::null_mut();
        assert_eq!(
            remrg_generate_buffer(
                model,
                fx.values.as_ptr(),
                fx.n_regions,
                fx.dim,
                REMRG_MODE_GREEDY,
                1,
                2.0,
                0,
                0,
                &mut out_b,
            ),
            REMRG_OK
        );
        assert_eq!(take_string(out_b), text_a);

        remrg_model_free(model);
        remrg_model_free(ptr::null_mut()); // null is a no-op
    }
    let _ = fs::remove_dir_all(&fx.dir);
}

#[test]
fn beam_and_sample_modes_work() {
    let fx = fixture("modes");
    let model = load(&fx);
    unsafe {
        for mode in [REMRG_MODE_BEAM, REMRG_MODE_SAMPLE] {
            let mut out: *mut std::ffi::c_char = ptr::null_mut();
            let code = remrg_generate_file(
                model,
                fx.features.as_ptr(),
                mode,
                2,
                2.0,
                8,
                7,
                &mut out,
            );
            assert_eq!(code, REMRG_OK, "{}", last_error());
            take_string(out);
        }
        remrg_model_free(model);
    }
}

#[test]
fn errors_come_back_as_codes_and_messages() {
    let fx = fixture("errors");
    unsafe {
        // missing checkpoint file
        let missing = CString::new("/nonexistent/model.ckpt").unwrap();
        let mut model: *mut RemrgModel = ptr::null_mut();
        assert_eq!(
            remrg_model_load(missing.as_ptr(), fx.vocab.as_ptr(), &mut model),
            REMRG_ERR_DATA
        );
        assert!(model.is_null());
        assert!(!last_error().is_empty());

        // null arguments
        assert_eq!(
            remrg_model_load(ptr::null(), fx.vocab.as_ptr(), &mut model),
            REMRG_ERR_USAGE
        );

        let model = load(&fx);
        let mut out: *mut std::ffi::c_char = ptr::null_mut();
        // unknown mode
        assert_eq!(
            remrg_generate_file(model, fx.features.as_ptr(), 42, 1, 2.0, 0, 0, &mut out),
            REMRG_ERR_USAGE
        );
        // non-finite buffer values
        let bad = vec![f64::NAN; fx.n_regions * fx.dim];
        assert_eq!(
            remrg_generate_buffer(
                model,
                bad.as_ptr(),
                fx.n_regions,
                fx.dim,
                REMRG_MODE_GREEDY,
                1,
                2.0,
                0,
                0,
                &mut out,
            ),
            REMRG_ERR_DATA
        );
        // wrong feature dimension
        let wrong = vec![0.0; 3 * (fx.dim + 1)];
        assert_eq!(
            remrg_generate_buffer(
                model,
                wrong.as_ptr(),
                3,
                fx.dim + 1,
                REMRG_MODE_GREEDY,
                1,
                2.0,
                0,
                0,
                &mut out,
            ),
            REMRG_ERR_DATA
        );
        remrg_model_free(model);
    }
}

#[test]
fn gradcheck_passes_over_the_abi() {
    assert_eq!(remrg_gradcheck(3), REMRG_OK);
}

#[test]
fn version_is_a_static_string() {
    let v = unsafe { CStr::from_ptr(remrg_version()) };
    assert!(!v.to_string_lossy().is_empty());
}

#[test]
fn header_covers_every_exported_symbol() {
    let header = fs::read_to_string(
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/remrg.h"),
    )
    .unwrap();
    for symbol in [
        "remrg_version",
        "remrg_last_error",
        "remrg_model_load",
        "remrg_model_free",
        "remrg_model_vocab_size",
        "remrg_model_param_count",
        "remrg_generate_file",
        "remrg_generate_buffer",
        "remrg_string_free",
        "remrg_gradcheck",
    ] {
        assert!(header.contains(symbol), "header is missing {symbol}");
    }
    for constant in [
        "REMRG_OK",
        "REMRG_ERR_USAGE",
        "REMRG_ERR_DATA",
        "REMRG_ERR_VERIFY",
        "REMRG_MODE_GREEDY",
        "REMRG_MODE_BEAM",
        "REMRG_MODE_SAMPLE",
    ] {
        assert!(header.contains(constant), "header is missing {constant}");
    }
}
