//! C interface: load a checkpoint, encode frames to packed hash codes, and
//! rank or evaluate codes against a Hamming index.
//!
//! Every function returns an [`ShStatus`]. On failure the message is kept
//! per thread and can be read with [`sh_last_error`]. Handles are opaque and
//! must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use spikinghash::model::{batch_samples, Checkpoint, HashCode, Model};
use spikinghash::retrieval::{evaluate, hamming_rank, CodeIndex, RelevanceSpec};
use spikinghash::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    Runtime = 6,
    Panic = 7,
}

/// Loaded model. Opaque to C.
pub struct ShModel {
    model: Model,
}

/// Database of packed codes with labels. Opaque to C.
pub struct ShIndex {
    index: CodeIndex,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ShModelInfo {
    pub time_steps: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub hash_bits: usize,
    pub classes: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ShMetrics {
    pub map: f64,
    pub acg: f64,
    pub dcg: f64,
    pub ndcg: f64,
    pub queries: usize,
    pub skipped_queries: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn status_of(e: &Error) -> ShStatus {
    match e {
        Error::Shape { .. } => ShStatus::Shape,
        Error::Io(_) => ShStatus::Io,
        Error::Format(_) | Error::Json(_) => ShStatus::Format,
        Error::Config(_) | Error::Domain { .. } => ShStatus::InvalidArgument,
        _ => ShStatus::Runtime,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (ShStatus, String)>) -> ShStatus {
    let (status, message) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (ShStatus::Ok, String::new()),
        Ok(Err(e)) => e,
        Err(_) => (ShStatus::Panic, "internal panic".to_string()),
    };
    LAST_ERROR.with(|m| *m.borrow_mut() = message);
    status
}

fn lib<T>(r: spikinghash::Result<T>) -> Result<T, (ShStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (ShStatus, String) {
    (ShStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: String) -> (ShStatus, String) {
    (ShStatus::InvalidArgument, msg)
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (ShStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn as_slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (ShStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn as_slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], (ShStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

fn unpack(bytes: &[u8], count: usize, bits: usize) -> Result<Vec<HashCode>, (ShStatus, String)> {
    let per = bits.div_ceil(8);
    (0..count).map(|i| lib(HashCode::from_bytes(&bytes[i * per..(i + 1) * per], bits))).collect()
}

/// Static, NUL-terminated version string.
#[no_mangle]
pub extern "C" fn sh_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn sh_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|m| {
        let m = m.borrow();
        if !buf.is_null() && len > 0 {
            let n = m.len().min(len - 1);
            ptr::copy_nonoverlapping(m.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        m.len()
    })
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sh_model_load(path: *const c_char, out: *mut *mut ShModel) -> ShStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8".into()))?;
        let model = lib(Checkpoint::load(Path::new(path)).and_then(|c| c.to_model()))?;
        *out = Box::into_raw(Box::new(ShModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`sh_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sh_model_free(model: *mut ShModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sh_model_info(model: *const ShModel, out: *mut ShModelInfo) -> ShStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.model.config;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ShModelInfo {
            time_steps: m.time_steps,
            in_channels: m.in_channels,
            height: m.height,
            width: m.width,
            hash_bits: m.hash_bits,
            classes: m.classes,
        };
        Ok(())
    })
}

/// Encodes `count` samples laid out as `[count, T, C, H, W]` into packed
/// codes, `ceil(L / 8)` bytes each, little-endian within bytes.
///
/// # Safety
/// `frames` must hold `count·T·C·H·W` floats and `codes` `codes_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn sh_model_encode(
    model: *const ShModel,
    frames: *const f32,
    count: usize,
    codes: *mut u8,
    codes_len: usize,
) -> ShStatus {
    guard(|| {
        let model = &as_ref(model, "model")?.model;
        let c = &model.config;
        let per_sample = c.time_steps * c.in_channels * c.height * c.width;
        let per_code = c.hash_bits.div_ceil(8);
        if codes_len != count * per_code {
            return Err(invalid(format!("codes buffer of {codes_len} bytes for {count} codes of {per_code}")));
        }
        let frames = as_slice(frames, count * per_sample, "frames")?;
        let codes = as_slice_mut(codes, codes_len, "codes")?;
        let shape = vec![c.time_steps, c.in_channels, c.height, c.width];
        for (chunk, out) in frames.chunks(per_sample * 16).zip(codes.chunks_mut(per_code * 16)) {
            let samples: Vec<Tensor> = chunk.chunks(per_sample).map(|s| lib(Tensor::new(shape.clone(), s.to_vec()))).collect::<Result<_, _>>()?;
            let encoded = lib(batch_samples(&samples).and_then(|x| model.encode(&x)))?;
            for (code, dst) in encoded.iter().zip(out.chunks_mut(per_code)) {
                dst.copy_from_slice(&code.to_bytes());
            }
        }
        Ok(())
    })
}

/// Builds an index from `count` packed `bits`-bit codes and their labels.
///
/// # Safety
/// `codes` must hold `count·ceil(bits / 8)` bytes and `labels` `count`
/// values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sh_index_new(
    codes: *const u8,
    labels: *const u32,
    count: usize,
    bits: usize,
    out: *mut *mut ShIndex,
) -> ShStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if bits == 0 {
            return Err(invalid("codes need at least one bit".into()));
        }
        let bytes = as_slice(codes, count * bits.div_ceil(8), "codes")?;
        let labels = as_slice(labels, count, "labels")?;
        let codes = unpack(bytes, count, bits)?;
        let index = lib(CodeIndex::new(codes, labels.iter().map(|&l| l as usize).collect()))?;
        *out = Box::into_raw(Box::new(ShIndex { index }));
        Ok(())
    })
}

/// # Safety
/// `index` must be null or a handle from [`sh_index_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sh_index_free(index: *mut ShIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// # Safety
/// `index` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sh_index_len(index: *const ShIndex, out: *mut usize) -> ShStatus {
    guard(|| {
        let index = &as_ref(index, "index")?.index;
        *out.as_mut().ok_or_else(|| null("out"))? = index.len();
        Ok(())
    })
}

/// The `n` nearest items to a packed query, ties broken by item id.
///
/// # Safety
/// `query` must hold `ceil(bits / 8)` bytes; `ids` and `distances` `n`
/// values each.
#[no_mangle]
pub unsafe extern "C" fn sh_hamming_rank(
    index: *const ShIndex,
    query: *const u8,
    n: usize,
    ids: *mut u32,
    distances: *mut u32,
) -> ShStatus {
    guard(|| {
        let index = &as_ref(index, "index")?.index;
        let bits = index.bits();
        let q = unpack(as_slice(query, bits.div_ceil(8), "query")?, 1, bits)?;
        let ranked = lib(hamming_rank(&q[0], index, n))?;
        let ids = as_slice_mut(ids, n, "ids")?;
        let distances = as_slice_mut(distances, n, "distances")?;
        for (k, (i, d)) in ranked.into_iter().enumerate() {
            ids[k] = i as u32;
            distances[k] = d;
        }
        Ok(())
    })
}

/// mAP, ACG, DCG and NDCG at `top_n` for packed queries. `similar` holds
/// `similar_count` class pairs (two values each) with relevance 0.5.
///
/// # Safety
/// `queries` must hold `count·ceil(bits / 8)` bytes, `labels` `count`
/// values, `similar` `2·similar_count` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sh_evaluate(
    index: *const ShIndex,
    queries: *const u8,
    labels: *const u32,
    count: usize,
    similar: *const u32,
    similar_count: usize,
    top_n: usize,
    out: *mut ShMetrics,
) -> ShStatus {
    guard(|| {
        let index = &as_ref(index, "index")?.index;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let bits = index.bits();
        let q = unpack(as_slice(queries, count * bits.div_ceil(8), "queries")?, count, bits)?;
        let labels: Vec<usize> = as_slice(labels, count, "labels")?.iter().map(|&l| l as usize).collect();
        let pairs: Vec<(usize, usize)> =
            as_slice(similar, 2 * similar_count, "similar")?.chunks(2).map(|p| (p[0] as usize, p[1] as usize)).collect();
        let r = lib(evaluate(&q, &labels, index, &RelevanceSpec::new(&pairs), top_n))?;
        *out = ShMetrics { map: r.map, acg: r.acg, dcg: r.dcg, ndcg: r.ndcg, queries: r.queries, skipped_queries: r.skipped_queries };
        Ok(())
    })
}
