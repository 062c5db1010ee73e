//! C ABI over the `ndd` library.
//!
//! Every fallible function returns an [`NddStatus`]; on failure the message
//! is available from [`ndd_last_error`] on the same thread. Strings handed
//! out by the library must be released with [`ndd_string_free`], backends
//! with [`ndd_backend_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use ndd::backend::{MlmBackend, ReferenceBackend, RemoteBackend};
use ndd::distortion::{distort_span, seeded_rng, DistortionConfig, PhraseBank};
use ndd::eval::lcs_overlap_ratio;
use ndd::metrics::{ndd, ndd_between, perplexity, Divergence, NddConfig, Weighting};
use ndd::text::{Span, SpanEdit};
use ndd::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NddStatus {
    Ok = 0,
    InvalidArgument = 1,
    NullPointer = 2,
    Utf8 = 3,
    Backend = 4,
    Unsupported = 5,
    NoNeighbors = 6,
    EmptyBank = 7,
    Io = 8,
    Data = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NddDivergence {
    Hellinger = 0,
    Kl = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NddWeighting {
    Mean = 0,
    Exponential = 1,
}

/// Scoring options. Start from [`ndd_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NddOptions {
    pub divergence: NddDivergence,
    pub weighting: NddWeighting,
    /// Decay for exponential weighting, in (0, 1].
    pub mu: f64,
    pub epsilon: f64,
    pub ensemble_ratio: f64,
}

impl From<NddOptions> for NddConfig {
    fn from(o: NddOptions) -> Self {
        NddConfig {
            divergence: match o.divergence {
                NddDivergence::Hellinger => Divergence::Hellinger,
                NddDivergence::Kl => Divergence::Kl,
            },
            weighting: match o.weighting {
                NddWeighting::Mean => Weighting::Mean,
                NddWeighting::Exponential => Weighting::Exponential { mu: o.mu },
            },
            epsilon: o.epsilon,
            ensemble_ratio: o.ensemble_ratio,
        }
    }
}

/// Opaque model handle.
pub struct NddBackend {
    inner: Box<dyn MlmBackend>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(NddStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidArgument(_) | Error::InvalidSpan { .. } => NddStatus::InvalidArgument,
            Error::Backend(_) => NddStatus::Backend,
            Error::Unsupported(_) => NddStatus::Unsupported,
            Error::NoNeighbors => NddStatus::NoNeighbors,
            Error::EmptyBank { .. } => NddStatus::EmptyBank,
            Error::Io(_) => NddStatus::Io,
            _ => NddStatus::Data,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NddStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            NddStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            NddStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(NddStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(NddStatus::Utf8, format!("{what} is not UTF-8: {e}")))
}

unsafe fn backend_ref<'a>(p: *const NddBackend) -> Result<&'a NddBackend, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(NddStatus::NullPointer, "backend is null".into()))
}

fn out_ptr<T>(p: *mut T) -> Result<(), Failure> {
    if p.is_null() {
        return Err(Failure(NddStatus::NullPointer, "output pointer is null".into()));
    }
    Ok(())
}

unsafe fn options(p: *const NddOptions) -> NddConfig {
    p.as_ref().map(|o| NddConfig::from(*o)).unwrap_or_default()
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(NddStatus::Data, "output contains a NUL byte".into()))
}

/// Default scoring options: Hellinger, mean weighting.
#[no_mangle]
pub extern "C" fn ndd_options_default() -> NddOptions {
    NddOptions {
        divergence: NddDivergence::Hellinger,
        weighting: NddWeighting::Mean,
        mu: 1.0,
        epsilon: ndd::dist::DEFAULT_FLOOR,
        ensemble_ratio: ndd::metrics::DEFAULT_ENSEMBLE_RATIO,
    }
}

/// Message of the last failed call on this thread, or "". Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn ndd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds the in-process count model from a corpus, one sentence per line.
///
/// # Safety
/// `corpus` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ndd_backend_new_reference(
    corpus: *const c_char,
    alpha: f64,
    top_k: usize,
    out: *mut *mut NddBackend,
) -> NddStatus {
    guard(|| {
        out_ptr(out)?;
        let corpus = text(corpus, "corpus")?;
        let inner = Box::new(ReferenceBackend::from_text(corpus, alpha, top_k)?);
        *out = Box::into_raw(Box::new(NddBackend { inner }));
        Ok(())
    })
}

/// Spawns `command` through the shell and talks the line protocol with it.
///
/// # Safety
/// `command` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ndd_backend_spawn(
    command: *const c_char,
    top_k: usize,
    out: *mut *mut NddBackend,
) -> NddStatus {
    guard(|| {
        out_ptr(out)?;
        let command = text(command, "command")?;
        let inner = Box::new(RemoteBackend::spawn(command, top_k)?);
        *out = Box::into_raw(Box::new(NddBackend { inner }));
        Ok(())
    })
}

/// # Safety
/// `backend` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ndd_backend_free(backend: *mut NddBackend) {
    if !backend.is_null() {
        drop(Box::from_raw(backend));
    }
}

/// NDD of replacing whitespace tokens `[start, end)` of `sentence` with the
/// tokens of `replacement`. `opts` may be null for defaults.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ndd_score_edit(
    backend: *const NddBackend,
    sentence: *const c_char,
    start: usize,
    end: usize,
    replacement: *const c_char,
    opts: *const NddOptions,
    out: *mut f64,
) -> NddStatus {
    guard(|| {
        out_ptr(out)?;
        let be = &backend_ref(backend)?.inner;
        let sentence = be.tokenize(text(sentence, "sentence")?)?;
        let replacement = be.tokenize(text(replacement, "replacement")?)?;
        let edit = SpanEdit::new(Span::new(start, end)?, replacement.tokens().to_vec())?;
        *out = ndd(&sentence, &edit, be, &options(opts))?.total;
        Ok(())
    })
}

/// NDD between two sentences, aligned on their longest common subsequence.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ndd_score_pair(
    backend: *const NddBackend,
    original: *const c_char,
    edited: *const c_char,
    opts: *const NddOptions,
    out: *mut f64,
) -> NddStatus {
    guard(|| {
        out_ptr(out)?;
        let be = &backend_ref(backend)?.inner;
        let a = be.tokenize(text(original, "original")?)?;
        let b = be.tokenize(text(edited, "edited")?)?;
        *out = ndd_between(&a, &b, be, &options(opts))?.total;
        Ok(())
    })
}

/// Pseudo-perplexity of a sentence, floored at `epsilon`.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ndd_perplexity(
    backend: *const NddBackend,
    sentence: *const c_char,
    epsilon: f64,
    out: *mut f64,
) -> NddStatus {
    guard(|| {
        out_ptr(out)?;
        let be = &backend_ref(backend)?.inner;
        let s = be.tokenize(text(sentence, "sentence")?)?;
        *out = perplexity(&s, be, epsilon)?;
        Ok(())
    })
}

/// Longest-common-subsequence length over the shorter token count.
///
/// # Safety
/// Strings must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ndd_overlap_ratio(a: *const c_char, b: *const c_char, out: *mut f64) -> NddStatus {
    guard(|| {
        out_ptr(out)?;
        let a = ndd::TokenSequence::from_whitespace(text(a, "a")?)?;
        let b = ndd::TokenSequence::from_whitespace(text(b, "b")?)?;
        *out = lcs_overlap_ratio(&a, &b);
        Ok(())
    })
}

/// Generatively rewrites tokens `[start, end)` of `sentence`. `config_json`
/// is a JSON distortion config or null for defaults. On success `*out_json`
/// holds the span outcome as JSON, to be freed with [`ndd_string_free`].
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated; `label` may be null.
#[no_mangle]
pub unsafe extern "C" fn ndd_distort_span(
    backend: *const NddBackend,
    sentence: *const c_char,
    start: usize,
    end: usize,
    label: *const c_char,
    config_json: *const c_char,
    out_json: *mut *mut c_char,
) -> NddStatus {
    guard(|| {
        out_ptr(out_json)?;
        let be = &backend_ref(backend)?.inner;
        let sentence = be.tokenize(text(sentence, "sentence")?)?;
        let label = if label.is_null() { None } else { Some(text(label, "label")?) };
        let cfg: DistortionConfig = if config_json.is_null() {
            DistortionConfig::default()
        } else {
            serde_json::from_str(text(config_json, "config")?).map_err(|e| Failure::from(Error::from(e)))?
        };
        cfg.validate()?;
        let mut rng = seeded_rng(cfg.seed, 0);
        let outcome = distort_span(&sentence, Span::new(start, end)?, label, None::<&PhraseBank>, be, &cfg, &mut rng)?;
        let json = serde_json::to_string(&outcome).map_err(|e| Failure::from(Error::from(e)))?;
        *out_json = into_c_string(json)?;
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ndd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
