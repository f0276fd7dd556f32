//! C ABI over the acton library.
//!
//! Every fallible function returns an [`ActonStatus`]; on failure the message
//! is kept per thread and read with [`acton_last_error_message`]. Models and
//! lexicons are opaque handles released with their `_free` functions.
//! Matrices are row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use acton::lexicon::{assign, FeatureSpace, Featurizer, Lexicon};
use acton::motion::SkeletonSequence;
use acton::tan::TanWeights;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActonStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Compute = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Feature space selector.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActonSpace {
    Projection = 0,
    Hidden = 1,
    Raw = 2,
}

impl From<ActonSpace> for FeatureSpace {
    fn from(s: ActonSpace) -> Self {
        match s {
            ActonSpace::Projection => FeatureSpace::Projection,
            ActonSpace::Hidden => FeatureSpace::Hidden,
            ActonSpace::Raw => FeatureSpace::RawSkeleton,
        }
    }
}

/// Trained embedding network.
pub struct ActonModel {
    weights: TanWeights,
}

/// Acton lexicon (cluster centroids).
pub struct ActonLexicon {
    lexicon: Lexicon,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(ActonStatus, String);

fn fail<T>(status: ActonStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ActonStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ActonStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ActonStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return fail(ActonStatus::NullArgument, "path is null");
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => fail(ActonStatus::InvalidArgument, "path is not valid UTF-8"),
    }
}

unsafe fn sequence_arg(data: *const f64, frames: usize, joints: usize, fps: f64) -> Result<SkeletonSequence, Failure> {
    if data.is_null() {
        return fail(ActonStatus::NullArgument, "frame data is null");
    }
    let n = frames
        .checked_mul(joints)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| Failure(ActonStatus::InvalidArgument, "frame count overflows".into()))?;
    let values = std::slice::from_raw_parts(data, n).to_vec();
    SkeletonSequence::new(frames, joints, fps, values).map_err(|e| Failure(ActonStatus::InvalidArgument, e.to_string()))
}

fn featurizer(model: Option<&ActonModel>, space: ActonSpace) -> Result<Featurizer<'_>, Failure> {
    match (space, model) {
        (ActonSpace::Raw, _) => Ok(Featurizer::RawSkeleton),
        (_, Some(m)) => Ok(Featurizer::Tan(&m.weights, space.into())),
        (_, None) => fail(ActonStatus::NullArgument, "model is null"),
    }
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn acton_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn acton_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn acton_model_load(path: *const c_char, out: *mut *mut ActonModel) -> ActonStatus {
    guard(|| {
        if out.is_null() {
            return fail(ActonStatus::NullArgument, "out is null");
        }
        let path = path_arg(path)?;
        let (weights, _) = TanWeights::load(&path).map_err(|e| {
            let status = match e {
                acton::tan::TanError::Io { .. } => ActonStatus::Io,
                _ => ActonStatus::Format,
            };
            Failure(status, e.to_string())
        })?;
        *out = Box::into_raw(Box::new(ActonModel { weights }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`acton_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn acton_model_free(model: *mut ActonModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Width of the per-frame features of `space`, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn acton_model_feature_dim(model: *const ActonModel, space: ActonSpace) -> usize {
    let Some(m) = model.as_ref() else { return 0 };
    let c = m.weights.config();
    match space {
        ActonSpace::Projection => c.projection_dim,
        ActonSpace::Hidden => c.hidden_dim,
        ActonSpace::Raw => 3 * c.joints,
    }
}

/// Per-frame features of a `frames x joints x 3` sequence written to `out`
/// (`frames x dim`, see [`acton_model_feature_dim`]). `model` may be null for
/// [`ActonSpace::Raw`], whose features are the center-normalized joints.
///
/// # Safety
/// `data` must hold `frames * joints * 3` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn acton_embed(
    model: *const ActonModel,
    space: ActonSpace,
    data: *const f64,
    frames: usize,
    joints: usize,
    fps: f64,
    out: *mut f64,
    out_len: usize,
) -> ActonStatus {
    guard(|| {
        let f = featurizer(model.as_ref(), space)?;
        let seq = sequence_arg(data, frames, joints, fps)?;
        let feats = f.features(&seq).map_err(|e| Failure(ActonStatus::Compute, e.to_string()))?;
        if out.is_null() {
            return fail(ActonStatus::NullArgument, "out is null");
        }
        if out_len < feats.numel() {
            return fail(
                ActonStatus::BufferTooSmall,
                format!("need {} values, buffer holds {out_len}", feats.numel()),
            );
        }
        std::slice::from_raw_parts_mut(out, feats.numel()).copy_from_slice(feats.data());
        Ok(())
    })
}

/// Loads a lexicon into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn acton_lexicon_load(path: *const c_char, out: *mut *mut ActonLexicon) -> ActonStatus {
    guard(|| {
        if out.is_null() {
            return fail(ActonStatus::NullArgument, "out is null");
        }
        let path = path_arg(path)?;
        let lexicon = Lexicon::load(&path).map_err(|e| {
            let status = match e {
                acton::lexicon::LexiconError::Io { .. } => ActonStatus::Io,
                _ => ActonStatus::Format,
            };
            Failure(status, e.to_string())
        })?;
        *out = Box::into_raw(Box::new(ActonLexicon { lexicon }));
        Ok(())
    })
}

/// Releases a lexicon; null is ignored.
///
/// # Safety
/// `lexicon` must come from [`acton_lexicon_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn acton_lexicon_free(lexicon: *mut ActonLexicon) {
    if !lexicon.is_null() {
        drop(Box::from_raw(lexicon));
    }
}

/// Number of actons, or 0 for a null lexicon.
///
/// # Safety
/// `lexicon` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn acton_lexicon_size(lexicon: *const ActonLexicon) -> usize {
    lexicon.as_ref().map_or(0, |l| l.lexicon.k())
}

/// Acton id of every frame (`frames` entries) using the lexicon's own
/// feature space. `model` may be null for raw-space lexicons.
///
/// # Safety
/// `data` must hold `frames * joints * 3` values and `labels_out` `frames`.
#[no_mangle]
pub unsafe extern "C" fn acton_tokenize(
    model: *const ActonModel,
    lexicon: *const ActonLexicon,
    data: *const f64,
    frames: usize,
    joints: usize,
    fps: f64,
    labels_out: *mut u32,
) -> ActonStatus {
    guard(|| {
        let Some(lex) = lexicon.as_ref() else {
            return fail(ActonStatus::NullArgument, "lexicon is null");
        };
        let space = match lex.lexicon.meta.space {
            FeatureSpace::Projection => ActonSpace::Projection,
            FeatureSpace::Hidden => ActonSpace::Hidden,
            FeatureSpace::RawSkeleton => ActonSpace::Raw,
        };
        let f = featurizer(model.as_ref(), space)?;
        let seq = sequence_arg(data, frames, joints, fps)?;
        if labels_out.is_null() {
            return fail(ActonStatus::NullArgument, "labels_out is null");
        }
        let labels = f
            .features(&seq)
            .and_then(|x| assign(&x, &lex.lexicon))
            .map_err(|e| Failure(ActonStatus::Compute, e.to_string()))?;
        let out = std::slice::from_raw_parts_mut(labels_out, frames);
        for (o, l) in out.iter_mut().zip(labels) {
            *o = l as u32;
        }
        Ok(())
    })
}

/// Kendall's Tau of nearest-neighbour retrieval from `a` (`rows_a x dim`)
/// into `b` (`rows_b x dim`).
///
/// # Safety
/// `a`, `b` must hold `rows * dim` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn acton_kendalls_tau(
    a: *const f64,
    rows_a: usize,
    b: *const f64,
    rows_b: usize,
    dim: usize,
    out: *mut f64,
) -> ActonStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return fail(ActonStatus::NullArgument, "null buffer");
        }
        let mat = |p: *const f64, rows: usize| {
            acton::autodiff::Tensor::new(vec![rows, dim], std::slice::from_raw_parts(p, rows * dim).to_vec())
                .map_err(|e| Failure(ActonStatus::InvalidArgument, e.to_string()))
        };
        let tau = acton::metrics::kendalls_tau(&mat(a, rows_a)?, &mat(b, rows_b)?)
            .map_err(|e| Failure(ActonStatus::InvalidArgument, e.to_string()))?;
        *out = tau;
        Ok(())
    })
}

/// Normalized mutual information (bits) between two labelings of `n` frames.
///
/// # Safety
/// `truth` and `clusters` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn acton_nmi(truth: *const u32, clusters: *const u32, n: usize, out: *mut f64) -> ActonStatus {
    guard(|| {
        if truth.is_null() || clusters.is_null() || out.is_null() {
            return fail(ActonStatus::NullArgument, "null buffer");
        }
        let t: Vec<usize> = std::slice::from_raw_parts(truth, n).iter().map(|&v| v as usize).collect();
        let c: Vec<usize> = std::slice::from_raw_parts(clusters, n).iter().map(|&v| v as usize).collect();
        *out = acton::metrics::nmi(&t, &c).map_err(|e| Failure(ActonStatus::InvalidArgument, e.to_string()))?;
        Ok(())
    })
}
