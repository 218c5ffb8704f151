//! C ABI over the `dsrh` core: load a trained model and encode feature
//! vectors, build or load a code database and search it, and compute the
//! ranking metrics.
//!
//! Every fallible function returns a [`DsrhStatus`]. On failure a message is
//! kept per thread and can be read with [`dsrh_last_error_message`]. Handles
//! are opaque and must be released with their `_free` function. Codes cross
//! the boundary as `ceil(K/8)` bytes per code, bit `k` of the code in bit
//! `k % 8` of byte `k / 8`, with a set bit meaning +1.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use dsrh::metrics;
use dsrh::model::{load_model, HashModel};
use dsrh::retrieval::{hamming_distance, load_codes, CodeDatabase, PackedCode};
use dsrh::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DsrhStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DimensionMismatch = 5,
    BitsMismatch = 6,
    BufferTooSmall = 7,
    /// The metric is undefined for this input (no relevant item).
    Excluded = 8,
    Internal = 9,
}

/// A trained hash model.
pub struct DsrhModel {
    inner: HashModel,
}

/// A database of packed binary codes keyed by 64-bit ids.
pub struct DsrhCodeDb {
    inner: CodeDatabase,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(DsrhStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => DsrhStatus::Io,
            Error::Parse { .. } | Error::Format(_) | Error::EmptyLabelSet { .. } | Error::DuplicateId { .. } => {
                DsrhStatus::Format
            }
            Error::DimensionMismatch { .. } | Error::DimensionMismatchAt { .. } => DsrhStatus::DimensionMismatch,
            Error::BitsMismatch { .. } => DsrhStatus::BitsMismatch,
            Error::AllExcluded => DsrhStatus::Excluded,
            _ => DsrhStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn fail<T>(status: DsrhStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DsrhStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            DsrhStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal error (panic)");
            DsrhStatus::Internal
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        fail(DsrhStatus::NullPointer, format!("{what} is null"))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` is null or points to `len` readable elements.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` is null or a NUL-terminated string.
unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    non_null(p, "path")?;
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => fail(DsrhStatus::InvalidArgument, "path is not valid UTF-8"),
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn dsrh_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn dsrh_status_string(status: DsrhStatus) -> *const c_char {
    let s: &'static CStr = match status {
        DsrhStatus::Ok => c"ok",
        DsrhStatus::NullPointer => c"null pointer",
        DsrhStatus::InvalidArgument => c"invalid argument",
        DsrhStatus::Io => c"I/O error",
        DsrhStatus::Format => c"malformed input",
        DsrhStatus::DimensionMismatch => c"dimension mismatch",
        DsrhStatus::BitsMismatch => c"code length mismatch",
        DsrhStatus::BufferTooSmall => c"buffer too small",
        DsrhStatus::Excluded => c"undefined: no relevant item",
        DsrhStatus::Internal => c"internal error",
    };
    s.as_ptr()
}

// ------------------------------------------------------------------ models

/// Loads a checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dsrh_model_load(path: *const c_char, out: *mut *mut DsrhModel) -> DsrhStatus {
    guard(|| {
        non_null(out, "out")?;
        let model = load_model(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(DsrhModel { inner: model }));
        Ok(())
    })
}

/// # Safety
/// `model` is null or a handle from [`dsrh_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dsrh_model_free(model: *mut DsrhModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Code length K, or 0 for a null handle.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dsrh_model_bits(model: *const DsrhModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.bits())
}

/// Feature dimension D, or 0 for a null handle.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dsrh_model_input_dim(model: *const DsrhModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.input_dim())
}

/// Bytes per packed code for a K-bit model.
#[no_mangle]
pub extern "C" fn dsrh_code_bytes(bits: usize) -> usize {
    bits.div_ceil(8)
}

/// Encodes `count` row-major feature vectors of length `dim` into packed
/// binary codes, `dsrh_code_bytes(K)` bytes each, written to `out`.
///
/// # Safety
/// `features` holds `count * dim` doubles; `out` has `out_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dsrh_model_encode(
    model: *const DsrhModel,
    features: *const f64,
    count: usize,
    dim: usize,
    out: *mut u8,
    out_len: usize,
) -> DsrhStatus {
    guard(|| {
        non_null(model, "model")?;
        let model = &(*model).inner;
        if dim != model.input_dim() {
            return fail(
                DsrhStatus::DimensionMismatch,
                format!("features have dimension {dim}, the model expects {}", model.input_dim()),
            );
        }
        let stride = dsrh_code_bytes(model.bits());
        let needed = count
            .checked_mul(stride)
            .ok_or_else(|| Failure(DsrhStatus::InvalidArgument, "count overflows".into()))?;
        if out_len < needed {
            return fail(DsrhStatus::BufferTooSmall, format!("need {needed} bytes, got {out_len}"));
        }
        if count == 0 {
            return Ok(());
        }
        let total = count
            .checked_mul(dim)
            .ok_or_else(|| Failure(DsrhStatus::InvalidArgument, "count overflows".into()))?;
        let feats = slice(features, total, "features")?;
        non_null(out, "out")?;
        let rows: Vec<&[f64]> = feats.chunks(dim).collect();
        let codes = model.forward_binary(&rows)?;
        let out = std::slice::from_raw_parts_mut(out, needed);
        for (dst, code) in out.chunks_mut(stride).zip(codes) {
            dst.copy_from_slice(&PackedCode::pack(&code)?.to_bytes());
        }
        Ok(())
    })
}

// ---------------------------------------------------------- code databases

/// Creates an empty database of `bits`-bit codes.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dsrh_codes_new(bits: usize, out: *mut *mut DsrhCodeDb) -> DsrhStatus {
    guard(|| {
        non_null(out, "out")?;
        let db = CodeDatabase::new(bits)?;
        *out = Box::into_raw(Box::new(DsrhCodeDb { inner: db }));
        Ok(())
    })
}

/// Loads a code file written by `dsrh encode`.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dsrh_codes_load(path: *const c_char, out: *mut *mut DsrhCodeDb) -> DsrhStatus {
    guard(|| {
        non_null(out, "out")?;
        let db = load_codes(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(DsrhCodeDb { inner: db }));
        Ok(())
    })
}

/// # Safety
/// `db` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dsrh_codes_free(db: *mut DsrhCodeDb) {
    if !db.is_null() {
        drop(Box::from_raw(db));
    }
}

/// Number of codes, or 0 for a null handle.
///
/// # Safety
/// `db` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dsrh_codes_len(db: *const DsrhCodeDb) -> usize {
    db.as_ref().map_or(0, |d| d.inner.len())
}

/// Code length K, or 0 for a null handle.
///
/// # Safety
/// `db` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dsrh_codes_bits(db: *const DsrhCodeDb) -> usize {
    db.as_ref().map_or(0, |d| d.inner.bits())
}

/// Appends one packed code. Ids must be unique.
///
/// # Safety
/// `db` is a live handle; `code` holds `code_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn dsrh_codes_push(db: *mut DsrhCodeDb, id: u64, code: *const u8, code_len: usize) -> DsrhStatus {
    guard(|| {
        non_null(db, "db")?;
        let db = &mut (*db).inner;
        let packed = packed_arg(code, code_len, db.bits())?;
        db.push(id, &packed)?;
        Ok(())
    })
}

unsafe fn packed_arg(code: *const u8, code_len: usize, bits: usize) -> Result<PackedCode, Failure> {
    if code_len != dsrh_code_bytes(bits) {
        return fail(
            DsrhStatus::BitsMismatch,
            format!("{code_len} code bytes given, {bits}-bit codes take {}", dsrh_code_bytes(bits)),
        );
    }
    Ok(PackedCode::from_bytes(slice(code, code_len, "code")?, bits)?)
}

/// The `k` nearest codes by Hamming distance, ties in insertion order.
/// Writes `min(k, len, capacity)` results to `out_ids`/`out_distances` and
/// the count to `*out_count`. `out_distances` may be null.
///
/// # Safety
/// `db` is a live handle; `query` holds `query_len` bytes; `out_ids` (and
/// `out_distances` if not null) have room for `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn dsrh_codes_search(
    db: *const DsrhCodeDb,
    query: *const u8,
    query_len: usize,
    k: usize,
    out_ids: *mut u64,
    out_distances: *mut u32,
    capacity: usize,
    out_count: *mut usize,
) -> DsrhStatus {
    guard(|| {
        non_null(db, "db")?;
        non_null(out_count, "out_count")?;
        let db = &(*db).inner;
        let q = packed_arg(query, query_len, db.bits())?;
        let hits = db.search_topk(&q, k.min(capacity))?;
        if !hits.is_empty() {
            non_null(out_ids, "out_ids")?;
        }
        for (i, n) in hits.iter().enumerate() {
            *out_ids.add(i) = n.id;
            if !out_distances.is_null() {
                *out_distances.add(i) = n.distance;
            }
        }
        *out_count = hits.len();
        Ok(())
    })
}

/// Hamming distance between two packed `bits`-bit codes.
///
/// # Safety
/// `a` and `b` hold `dsrh_code_bytes(bits)` bytes each; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dsrh_hamming_distance(a: *const u8, b: *const u8, bits: usize, out: *mut u32) -> DsrhStatus {
    guard(|| {
        non_null(out, "out")?;
        if bits == 0 {
            return fail(DsrhStatus::InvalidArgument, "bit count must be positive");
        }
        let n = dsrh_code_bytes(bits);
        let (a, b) = (packed_arg(a, n, bits)?, packed_arg(b, n, bits)?);
        *out = hamming_distance(&a, &b)?;
        Ok(())
    })
}

// ----------------------------------------------------------------- metrics

unsafe fn levels_arg<'a>(levels: *const u32, len: usize) -> Result<&'a [u32], Failure> {
    let l = slice(levels, len, "levels")?;
    if l.iter().any(|&r| r > 62) {
        return fail(DsrhStatus::InvalidArgument, "similarity levels above 62 are not supported");
    }
    Ok(l)
}

/// NDCG@p of a ranked list of similarity levels. `DSRH_STATUS_EXCLUDED`
/// when no item is relevant.
///
/// # Safety
/// `levels` holds `len` values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dsrh_ndcg_at(levels: *const u32, len: usize, p: usize, out: *mut f64) -> DsrhStatus {
    guard(|| {
        non_null(out, "out")?;
        match metrics::ndcg_at(levels_arg(levels, len)?, p) {
            Some(v) => {
                *out = v;
                Ok(())
            }
            None => fail(DsrhStatus::Excluded, "no relevant item in the list"),
        }
    })
}

/// ACG@p, the mean level of the top `p` items (clamped to `len`).
///
/// # Safety
/// `levels` holds `len` values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dsrh_acg_at(levels: *const u32, len: usize, p: usize, out: *mut f64) -> DsrhStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = metrics::acg_at(levels_arg(levels, len)?, p);
        Ok(())
    })
}

/// ACG-weighted average precision over the whole list, or over the first
/// `truncation` positions when it is non-zero.
///
/// # Safety
/// `levels` holds `len` values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dsrh_average_precision_w(
    levels: *const u32,
    len: usize,
    truncation: usize,
    out: *mut f64,
) -> DsrhStatus {
    guard(|| {
        non_null(out, "out")?;
        let t = (truncation > 0).then_some(truncation);
        match metrics::average_precision_w(levels_arg(levels, len)?, t) {
            Some(v) => {
                *out = v;
                Ok(())
            }
            None => fail(DsrhStatus::Excluded, "no relevant item in the evaluated prefix"),
        }
    })
}
