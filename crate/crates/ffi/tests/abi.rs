use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::ptr;

use mixerforge::hybrid::{forward, HybridConfig, HybridModel, Ratio};
use mixerforge::mixers::{scan, Dimensions, MixerKind, MixerParams};
use mixerforge::numerics::Tensor;
use mixerforge_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn last_error() -> String {
    let p = mf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_mixer(kind: &str, heads: usize, d: usize, seed: u64) -> (MfStatus, *mut MfMixer) {
    let name = CString::new(kind).unwrap();
    let mut m = ptr::null_mut();
    let s = unsafe { mf_mixer_new(name.as_ptr(), heads, d, seed, &mut m) };
    (s, m)
}

#[test]
fn mixer_scan_matches_library_and_oracle() {
    for kind in MixerKind::ALL {
        let heads = if kind.single_head() { 1 } else { 2 };
        let (s, m) = new_mixer(kind.name(), heads, 3, 7);
        assert_eq!(s, MfStatus::Ok, "{kind}");
        let width = unsafe { mf_mixer_d_model(m) };
        assert_eq!(width, heads * 3);
        let len = 9;
        let x: Vec<f64> = (0..len * width).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let mut fast = vec![0.0; x.len()];
        let mut slow = vec![0.0; x.len()];
        unsafe {
            assert_eq!(mf_mixer_scan(m, x.as_ptr(), len, fast.as_mut_ptr()), MfStatus::Ok);
            assert_eq!(mf_mixer_oracle(m, x.as_ptr(), len, slow.as_mut_ptr()), MfStatus::Ok);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = MixerParams::init(kind, Dimensions::new(1, heads, 3), &mut rng).unwrap();
        let expect = scan(&params, &Tensor::new(&[len, width], x.clone()).unwrap()).unwrap();
        assert_eq!(fast, expect.data(), "{kind}");
        let scale = slow.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let diff = fast.iter().zip(&slow).fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
        assert!(diff <= 1e-10 * scale.max(1.0), "{kind}");
        unsafe { mf_mixer_free(m) };
    }
}

#[test]
fn mixer_errors_are_reported() {
    let (s, _) = new_mixer("lstm", 1, 3, 0);
    assert_eq!(s, MfStatus::InvalidArgument);
    assert!(last_error().contains("lstm"));
    let (s, _) = new_mixer("hgrn", 2, 3, 0);
    assert_eq!(s, MfStatus::InvalidArgument);
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { mf_mixer_new(ptr::null(), 1, 3, 0, &mut m) }, MfStatus::NullPointer);
    let name = CString::new("gla").unwrap();
    assert_eq!(unsafe { mf_mixer_new(name.as_ptr(), 1, 3, 0, ptr::null_mut()) }, MfStatus::NullPointer);

    let (_, m) = new_mixer("gla", 1, 3, 0);
    let mut out = [0.0; 3];
    unsafe {
        assert_eq!(mf_mixer_scan(m, [0.0; 3].as_ptr(), 0, out.as_mut_ptr()), MfStatus::Shape);
        assert_eq!(mf_mixer_scan(ptr::null(), [0.0; 3].as_ptr(), 1, out.as_mut_ptr()), MfStatus::NullPointer);
        assert_eq!(mf_mixer_scan(m, ptr::null(), 1, out.as_mut_ptr()), MfStatus::NullPointer);
        assert_eq!(mf_mixer_d_model(ptr::null()), 0);
        mf_mixer_free(m);
        mf_mixer_free(ptr::null_mut());
    }
}

#[test]
fn flop_queries_are_exact() {
    let mut n = 0u64;
    let mut d = 0u64;
    let kind = CString::new("deltanet").unwrap();
    assert_eq!(unsafe { mf_per_token_flops(kind.as_ptr(), 1024, 8, &mut n, &mut d) }, MfStatus::Ok);
    assert_eq!((n, d), (8 * 1024 * 1024 / 8, 1));
    let kind = CString::new("hgrn").unwrap();
    assert_eq!(unsafe { mf_per_token_flops(kind.as_ptr(), 2048, 4, &mut n, &mut d) }, MfStatus::Ok);
    assert_eq!((n, d), (5 * 2048, 1));
    let kind = CString::new("gla").unwrap();
    assert_eq!(unsafe { mf_per_token_flops(kind.as_ptr(), 10, 3, &mut n, &mut d) }, MfStatus::Ok);
    assert_eq!((n, d), (700, 3));

    let json = CString::new(r#"{"kind":"gla","ratio":3,"blocks":6,"d_model":64,"heads":4,"seq_len":128,"vocab":10}"#).unwrap();
    let mut r = MfCostReport::default();
    assert_eq!(unsafe { mf_model_cost(json.as_ptr(), 128, 2, &mut r) }, MfStatus::Ok);
    assert_eq!((r.linear_layers, r.full_layers), (18, 6));
    assert_eq!(r.kv_cache_bytes, 6 * 2 * 128 * 64 * 2);
    assert_eq!(r.per_token_flops, 18 * 7 * 64 * 64 / 4 + 6 * 2 * 128 * 64);
    assert_eq!(r.exact, 1);
    let bad = CString::new(r#"{"kind":"gla","typo":1}"#).unwrap();
    assert_eq!(unsafe { mf_model_cost(bad.as_ptr(), 128, 2, &mut r) }, MfStatus::Config);
}

fn tiny_config() -> HybridConfig {
    HybridConfig {
        kind: MixerKind::GatedDeltaNet,
        ratio: Ratio::Mixed(1),
        blocks: 1,
        reference_ratio: 3,
        d_model: 8,
        heads: 2,
        seq_len: 6,
        vocab: 5,
        mlp_mult: 2,
    }
}

#[test]
fn model_forward_save_and_load() {
    let config = tiny_config();
    let json = CString::new(serde_json::to_string(&config).unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { mf_model_new(json.as_ptr(), 3, &mut m) }, MfStatus::Ok);
    let reference = HybridModel::init(&config, 3).unwrap();
    assert_eq!(unsafe { mf_model_param_count(m) }, reference.param_count());
    assert_eq!(unsafe { mf_model_vocab(m) }, 5);

    let tokens = [1u32, 4, 0, 2];
    let mut required = 0usize;
    let mut small = [0.0; 3];
    let s = unsafe { mf_model_forward(m, tokens.as_ptr(), 4, small.as_mut_ptr(), 3, &mut required) };
    assert_eq!(s, MfStatus::BufferTooSmall);
    assert_eq!(required, 20);
    let mut logits = vec![0.0; required];
    let s = unsafe { mf_model_forward(m, tokens.as_ptr(), 4, logits.as_mut_ptr(), logits.len(), ptr::null_mut()) };
    assert_eq!(s, MfStatus::Ok);
    assert_eq!(logits, forward(&reference, &[1, 4, 0, 2]).unwrap().data());

    let out_of_range = [9u32];
    let s = unsafe { mf_model_forward(m, out_of_range.as_ptr(), 1, logits.as_mut_ptr(), logits.len(), ptr::null_mut()) };
    assert_eq!(s, MfStatus::InvalidArgument);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { mf_model_save(m, path.as_ptr()) }, MfStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { mf_model_load(path.as_ptr(), &mut loaded) }, MfStatus::Ok);
    let mut again = vec![0.0; 20];
    let s = unsafe { mf_model_forward(loaded, tokens.as_ptr(), 4, again.as_mut_ptr(), 20, ptr::null_mut()) };
    assert_eq!(s, MfStatus::Ok);
    assert_eq!(again, logits);

    let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
    let mut none = ptr::null_mut();
    assert_eq!(unsafe { mf_model_load(missing.as_ptr(), &mut none) }, MfStatus::Io);
    assert!(none.is_null());
    unsafe {
        mf_model_free(m);
        mf_model_free(loaded);
    }
}

#[test]
fn version_is_the_package_version() {
    let v = unsafe { CStr::from_ptr(mf_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn header() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/mixerforge.h")
}

#[test]
fn header_declares_every_export() {
    let text = std::fs::read_to_string(header()).unwrap();
    for f in [
        "mf_last_error", "mf_version", "mf_mixer_new", "mf_mixer_free", "mf_mixer_d_model", "mf_mixer_scan",
        "mf_mixer_oracle", "mf_per_token_flops", "mf_model_cost", "mf_model_new", "mf_model_load", "mf_model_save",
        "mf_model_free", "mf_model_vocab", "mf_model_param_count", "mf_model_forward",
    ] {
        assert!(text.contains(&format!("{f}(")), "{f}");
    }
    assert!(text.contains("typedef struct MfMixer MfMixer;"));
    assert!(text.contains("MF_STATUS_BUFFER_TOO_SMALL = 7"));
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "mixerforge.h"

int main(void) {
    MfMixer *m = NULL;
    if (mf_mixer_new("gated_deltanet", 2, 4, 1, &m) != MF_STATUS_OK) return 10;
    size_t d = mf_mixer_d_model(m);
    double x[5 * 8], a[5 * 8], b[5 * 8];
    for (size_t i = 0; i < 5 * d; i++) x[i] = (double)(i % 7) / 7.0 - 0.4;
    if (mf_mixer_scan(m, x, 5, a) != MF_STATUS_OK) return 11;
    if (mf_mixer_oracle(m, x, 5, b) != MF_STATUS_OK) return 12;
    for (size_t i = 0; i < 5 * d; i++) {
        double e = a[i] - b[i];
        if (e > 1e-10 || e < -1e-10) return 13;
    }
    mf_mixer_free(m);
    if (mf_mixer_new("nope", 1, 4, 1, &m) != MF_STATUS_INVALID_ARGUMENT) return 14;
    if (mf_last_error() == NULL) return 15;
    uint64_t n = 0, q = 0;
    if (mf_per_token_flops("hgrn", 64, 1, &n, &q) != MF_STATUS_OK || n != 320 || q != 1) return 16;
    printf("ok %s\n", mf_version());
    return 0;
}
"#;

#[test]
fn c_program_links_against_the_static_library() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(|p| p.parent()).unwrap();
    let lib = profile_dir.join("libmixerforge_ffi.a");
    if !lib.exists() || std::process::Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let bin = dir.path().join("main");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let status = std::process::Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = std::process::Command::new(&bin).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
