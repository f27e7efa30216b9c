//! C ABI over `mixerforge`: opaque mixer and model handles, exact FLOP
//! queries and checkpoint I/O. Every fallible call returns an [`MfStatus`];
//! the message for the last failure on the calling thread is available
//! from [`mf_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::io::{BufReader, BufWriter};
use std::panic::{catch_unwind, AssertUnwindSafe};

use mixerforge::costmodel::{model_flops, per_token_flops};
use mixerforge::hybrid::{forward, read_checkpoint, write_checkpoint, Checkpoint, HybridConfig, HybridError, HybridModel};
use mixerforge::mixers::{oracle_unrolled, scan, Dimensions, MixerError, MixerKind, MixerParams};
use mixerforge::numerics::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Numeric = 5,
    Io = 6,
    BufferTooSmall = 7,
    Overflow = 8,
    Panic = 9,
}

/// A mixer layer with its weights.
pub struct MfMixer {
    params: MixerParams,
}

/// A hybrid network with its weights.
pub struct MfModel {
    model: HybridModel,
}

/// Whole-model forward cost at one sequence length.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MfCostReport {
    pub per_token_flops: u64,
    pub per_sequence_flops: u64,
    pub kv_cache_bytes: u64,
    pub linear_layers: u64,
    pub full_layers: u64,
    /// 1 when every count is an exact integer.
    pub exact: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn fail(status: MfStatus, msg: impl Into<String>) -> MfStatus {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
    status
}

fn guard(f: impl FnOnce() -> MfStatus) -> MfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(MfStatus::Panic, "internal panic"),
    }
}

fn mixer_status(e: &MixerError) -> MfStatus {
    match e {
        MixerError::Shape(_) | MixerError::EmptySequence => MfStatus::Shape,
        MixerError::NonFinite | MixerError::Numerics(_) => MfStatus::Numeric,
        _ => MfStatus::InvalidArgument,
    }
}

fn hybrid_status(e: &HybridError) -> MfStatus {
    match e {
        HybridError::Config(_) => MfStatus::Config,
        HybridError::TokenOutOfRange { .. } => MfStatus::InvalidArgument,
        HybridError::Checkpoint(_) => MfStatus::Io,
        HybridError::Mixer(m) => mixer_status(m),
        HybridError::Attention(_) => MfStatus::Shape,
        HybridError::Numerics(_) => MfStatus::Numeric,
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, MfStatus> {
    if p.is_null() {
        return Err(fail(MfStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(MfStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn to_u64(v: u128, what: &str) -> Result<u64, MfStatus> {
    u64::try_from(v).map_err(|_| fail(MfStatus::Overflow, format!("{what} exceeds 64 bits")))
}

fn parse_config(json: &str) -> Result<HybridConfig, MfStatus> {
    let config: HybridConfig =
        serde_json::from_str(json).map_err(|e| fail(MfStatus::Config, e.to_string()))?;
    config.validate().map_err(|e| fail(MfStatus::Config, e.to_string()))?;
    Ok(config)
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a randomly initialized mixer. Single-head kinds require
/// `heads == 1`. `d_model = heads * head_dim`.
///
/// # Safety
/// `kind` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mf_mixer_new(
    kind: *const c_char,
    heads: usize,
    head_dim: usize,
    seed: u64,
    out: *mut *mut MfMixer,
) -> MfStatus {
    guard(|| {
        if out.is_null() {
            return fail(MfStatus::NullPointer, "out is null");
        }
        let name = tri!(read_str(kind, "kind"));
        let kind: MixerKind = tri!(name.parse().map_err(|e: MixerError| fail(MfStatus::InvalidArgument, e.to_string())));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = tri!(MixerParams::init(kind, Dimensions::new(1, heads, head_dim), &mut rng)
            .map_err(|e| fail(mixer_status(&e), e.to_string())));
        *out = Box::into_raw(Box::new(MfMixer { params }));
        MfStatus::Ok
    })
}

/// # Safety
/// `mixer` must come from [`mf_mixer_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mf_mixer_free(mixer: *mut MfMixer) {
    if !mixer.is_null() {
        drop(Box::from_raw(mixer));
    }
}

/// Width of the mixer's input and output rows, or 0 for a null handle.
///
/// # Safety
/// `mixer` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mf_mixer_d_model(mixer: *const MfMixer) -> usize {
    mixer.as_ref().map_or(0, |m| m.params.dims.d_model)
}

unsafe fn run_mixer(
    mixer: *const MfMixer,
    tokens: *const f64,
    len: usize,
    out: *mut f64,
    f: fn(&MixerParams, &Tensor) -> Result<Tensor, MixerError>,
) -> MfStatus {
    guard(|| {
        let Some(m) = mixer.as_ref() else {
            return fail(MfStatus::NullPointer, "mixer is null");
        };
        if tokens.is_null() || out.is_null() {
            return fail(MfStatus::NullPointer, "tokens or out is null");
        }
        if len == 0 {
            return fail(MfStatus::Shape, "empty sequence");
        }
        let width = m.params.dims.d_model;
        let input = std::slice::from_raw_parts(tokens, len * width);
        let x = tri!(Tensor::new(&[len, width], input.to_vec()).map_err(|e| fail(MfStatus::Shape, e.to_string())));
        let y = tri!(f(&m.params, &x).map_err(|e| fail(mixer_status(&e), e.to_string())));
        std::slice::from_raw_parts_mut(out, len * width).copy_from_slice(y.data());
        MfStatus::Ok
    })
}

/// Sequential scan over `tokens` (`len` rows of `d_model`, row-major)
/// into `out` of the same size.
///
/// # Safety
/// `tokens` and `out` must each hold `len * d_model` doubles.
#[no_mangle]
pub unsafe extern "C" fn mf_mixer_scan(mixer: *const MfMixer, tokens: *const f64, len: usize, out: *mut f64) -> MfStatus {
    run_mixer(mixer, tokens, len, out, scan)
}

/// Same contract as [`mf_mixer_scan`] through the quadratic unrolled form.
///
/// # Safety
/// `tokens` and `out` must each hold `len * d_model` doubles.
#[no_mangle]
pub unsafe extern "C" fn mf_mixer_oracle(mixer: *const MfMixer, tokens: *const f64, len: usize, out: *mut f64) -> MfStatus {
    run_mixer(mixer, tokens, len, out, oracle_unrolled)
}

/// Exact per-token FLOPs of one mixer layer as `numer / denom`.
///
/// # Safety
/// `kind` must be a NUL-terminated string; `numer` and `denom` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mf_per_token_flops(
    kind: *const c_char,
    d_model: usize,
    heads: usize,
    numer: *mut u64,
    denom: *mut u64,
) -> MfStatus {
    guard(|| {
        if numer.is_null() || denom.is_null() {
            return fail(MfStatus::NullPointer, "numer or denom is null");
        }
        let name = tri!(read_str(kind, "kind"));
        let kind: MixerKind = tri!(name.parse().map_err(|e: MixerError| fail(MfStatus::InvalidArgument, e.to_string())));
        let f = tri!(per_token_flops(kind, d_model, heads).map_err(|e| fail(mixer_status(&e), e.to_string())));
        *numer = tri!(to_u64(f.numer, "numerator"));
        *denom = tri!(to_u64(f.denom, "denominator"));
        MfStatus::Ok
    })
}

/// Whole-model cost for a JSON model config at length `len`.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mf_model_cost(
    config_json: *const c_char,
    len: usize,
    element_size: usize,
    out: *mut MfCostReport,
) -> MfStatus {
    guard(|| {
        if out.is_null() {
            return fail(MfStatus::NullPointer, "out is null");
        }
        let config = tri!(parse_config(tri!(read_str(config_json, "config_json"))));
        let r = tri!(model_flops(&config, len, element_size).map_err(|e| fail(hybrid_status(&e), e.to_string())));
        *out = MfCostReport {
            per_token_flops: tri!(to_u64(r.per_token_flops, "per_token_flops")),
            per_sequence_flops: tri!(to_u64(r.per_sequence_flops, "per_sequence_flops")),
            kv_cache_bytes: tri!(to_u64(r.kv_cache_bytes, "kv_cache_bytes")),
            linear_layers: r.linear_layers as u64,
            full_layers: r.full_layers as u64,
            exact: r.exact as u8,
        };
        MfStatus::Ok
    })
}

/// Builds a model from a JSON config with seeded random weights.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mf_model_new(config_json: *const c_char, seed: u64, out: *mut *mut MfModel) -> MfStatus {
    guard(|| {
        if out.is_null() {
            return fail(MfStatus::NullPointer, "out is null");
        }
        let config = tri!(parse_config(tri!(read_str(config_json, "config_json"))));
        let model = tri!(HybridModel::init(&config, seed).map_err(|e| fail(hybrid_status(&e), e.to_string())));
        *out = Box::into_raw(Box::new(MfModel { model }));
        MfStatus::Ok
    })
}

/// Loads a model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mf_model_load(path: *const c_char, out: *mut *mut MfModel) -> MfStatus {
    guard(|| {
        if out.is_null() {
            return fail(MfStatus::NullPointer, "out is null");
        }
        let path = tri!(read_str(path, "path"));
        let file = tri!(std::fs::File::open(path).map_err(|e| fail(MfStatus::Io, format!("{path}: {e}"))));
        let ckpt = tri!(read_checkpoint(BufReader::new(file)).map_err(|e| fail(hybrid_status(&e), e.to_string())));
        let model = tri!(ckpt.to_model().map_err(|e| fail(hybrid_status(&e), e.to_string())));
        *out = Box::into_raw(Box::new(MfModel { model }));
        MfStatus::Ok
    })
}

/// Writes the model to a checkpoint file, replacing it.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mf_model_save(model: *const MfModel, path: *const c_char) -> MfStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(MfStatus::NullPointer, "model is null");
        };
        let path = tri!(read_str(path, "path"));
        let file = tri!(std::fs::File::create(path).map_err(|e| fail(MfStatus::Io, format!("{path}: {e}"))));
        let mut w = BufWriter::new(file);
        tri!(write_checkpoint(&mut w, &Checkpoint::from_model(&m.model)).map_err(|e| fail(MfStatus::Io, e.to_string())));
        tri!(std::io::Write::flush(&mut w).map_err(|e| fail(MfStatus::Io, e.to_string())));
        MfStatus::Ok
    })
}

/// # Safety
/// `model` must come from [`mf_model_new`] or [`mf_model_load`] and not be
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mf_model_free(model: *mut MfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mf_model_vocab(model: *const MfModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.vocab)
}

/// Parameter count, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mf_model_param_count(model: *const MfModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.param_count())
}

/// Next-token logits for `len` tokens into `logits` (`len * vocab`
/// doubles, row-major). Fails with `BufferTooSmall` when `capacity` is
/// short; `required` (if non-null) always receives the needed count.
///
/// # Safety
/// `tokens` must hold `len` values and `logits` `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn mf_model_forward(
    model: *const MfModel,
    tokens: *const u32,
    len: usize,
    logits: *mut f64,
    capacity: usize,
    required: *mut usize,
) -> MfStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(MfStatus::NullPointer, "model is null");
        };
        let need = len * m.model.config.vocab;
        if !required.is_null() {
            *required = need;
        }
        if tokens.is_null() || logits.is_null() {
            return fail(MfStatus::NullPointer, "tokens or logits is null");
        }
        if capacity < need {
            return fail(MfStatus::BufferTooSmall, format!("need {need} doubles, got {capacity}"));
        }
        let ids: Vec<usize> = std::slice::from_raw_parts(tokens, len).iter().map(|&t| t as usize).collect();
        let y = tri!(forward(&m.model, &ids).map_err(|e| fail(hybrid_status(&e), e.to_string())));
        std::slice::from_raw_parts_mut(logits, need).copy_from_slice(y.data());
        MfStatus::Ok
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panics_become_a_status_with_message() {
        let s = guard(|| panic!("boom"));
        assert_eq!(s, MfStatus::Panic);
        let msg = unsafe { CStr::from_ptr(mf_last_error()) };
        assert_eq!(msg.to_str().unwrap(), "internal panic");
    }

    #[test]
    fn messages_with_nul_bytes_survive() {
        fail(MfStatus::Io, "a\0b");
        let msg = unsafe { CStr::from_ptr(mf_last_error()) };
        assert_eq!(msg.to_str().unwrap(), "a b");
    }
}
