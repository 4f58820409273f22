//! C interface to `clear-core`.
//!
//! Handles are opaque. Every fallible call returns a [`ClearStatus`]; on
//! failure the message is kept per thread and read with
//! [`clear_last_error`]. Output buffers are caller-owned except strings,
//! which are released with [`clear_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use clear_core::backbone::Backbone;
use clear_core::par::{load_backbone, predict_probs};
use clear_core::query::{build_pseudo_description, EmbeddingProvider};
use clear_core::retrieval::{encode_person, encode_query, load_heads, person_search_embedding, QueryMode, RetrievalHeads};
use clear_core::schema::{AttributeSchema, AttributeVector};
use clear_core::ClearError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClearStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Shape = 5,
    Numeric = 6,
    Internal = 7,
}

/// A parsed attribute schema.
pub struct ClearSchema {
    inner: AttributeSchema,
}

/// A trained backbone, optionally with retrieval heads.
pub struct ClearModel {
    schema: AttributeSchema,
    backbone: Backbone,
    retrieval: Option<Retrieval>,
}

struct Retrieval {
    heads: RetrievalHeads,
    provider: Box<dyn EmbeddingProvider>,
    n_words: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(ClearStatus, String);

impl From<ClearError> for Failure {
    fn from(e: ClearError) -> Self {
        let status = match &e {
            ClearError::Io { .. } => ClearStatus::Io,
            ClearError::Parse { .. } | ClearError::Json(_) | ClearError::InvalidSchema(_) | ClearError::Checkpoint(_) => {
                ClearStatus::Parse
            }
            ClearError::DimMismatch(_) => ClearStatus::Shape,
            ClearError::Numeric(_) | ClearError::DegenerateEmbedding(_) => ClearStatus::Numeric,
            ClearError::Tensor(_) | ClearError::Image(_) => ClearStatus::Internal,
            _ => ClearStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<candle_core::Error> for Failure {
    fn from(e: candle_core::Error) -> Self {
        ClearError::from(e).into()
    }
}

fn fail<T>(status: ClearStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

/// Runs `f`, turning errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ClearStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ClearStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ClearStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(ClearStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(ClearStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().map_or_else(|| fail(ClearStatus::NullPointer, format!("{what} is null")), Ok)
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return fail(ClearStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, need: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return fail(ClearStatus::NullPointer, format!("{what} is null"));
    }
    if len < need {
        return fail(ClearStatus::Shape, format!("{what} holds {len} values, {need} needed"));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn attributes(bits: *const u8, n: usize, schema: &AttributeSchema) -> Result<AttributeVector, Failure> {
    let v = AttributeVector::new(slice_arg(bits, n, "attribute bits")?.to_vec())?;
    v.check(schema)?;
    Ok(v)
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn clear_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Parses a schema from JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn clear_schema_from_json(json: *const c_char, out: *mut *mut ClearSchema) -> ClearStatus {
    guard(|| {
        if out.is_null() {
            return fail(ClearStatus::NullPointer, "out is null");
        }
        let inner = AttributeSchema::from_json(str_arg(json, "json")?)?;
        *out = Box::into_raw(Box::new(ClearSchema { inner }));
        Ok(())
    })
}

/// The built-in eight-attribute schema used by the synthetic data.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn clear_schema_default(out: *mut *mut ClearSchema) -> ClearStatus {
    guard(|| {
        if out.is_null() {
            return fail(ClearStatus::NullPointer, "out is null");
        }
        *out = Box::into_raw(Box::new(ClearSchema { inner: AttributeSchema::synthetic_default() }));
        Ok(())
    })
}

/// Number of attributes, or 0 for a null handle.
///
/// # Safety
/// `schema` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn clear_schema_n_attr(schema: *const ClearSchema) -> usize {
    schema.as_ref().map_or(0, |s| s.inner.n_attr())
}

/// # Safety
/// `schema` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn clear_schema_free(schema: *mut ClearSchema) {
    if !schema.is_null() {
        drop(Box::from_raw(schema));
    }
}

/// Renders the pseudo-description of an attribute vector. The string is
/// released with `clear_string_free`.
///
/// # Safety
/// `bits` must point to `n_bits` bytes, each 0 or 1; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn clear_pseudo_description(
    schema: *const ClearSchema,
    bits: *const u8,
    n_bits: usize,
    n_words: usize,
    out: *mut *mut c_char,
) -> ClearStatus {
    guard(|| {
        let schema = &ref_arg(schema, "schema")?.inner;
        if out.is_null() {
            return fail(ClearStatus::NullPointer, "out is null");
        }
        let q = attributes(bits, n_bits, schema)?;
        let d = build_pseudo_description(schema, &q, n_words)?;
        *out = CString::new(d.text).or_else(|_| fail(ClearStatus::Internal, "NUL in description"))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn clear_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a recognition checkpoint and, when `heads_path` is not null, the
/// retrieval heads trained on it. Both must match `schema`.
///
/// # Safety
/// Paths must be NUL-terminated or (for `heads_path`) null; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn clear_model_load(
    schema: *const ClearSchema,
    par_path: *const c_char,
    heads_path: *const c_char,
    out: *mut *mut ClearModel,
) -> ClearStatus {
    guard(|| {
        let schema = ref_arg(schema, "schema")?.inner.clone();
        if out.is_null() {
            return fail(ClearStatus::NullPointer, "out is null");
        }
        let hash = schema.hash();
        let backbone = load_backbone(PathBuf::from(str_arg(par_path, "par_path")?), &hash, DType::F32)?;
        let retrieval = if heads_path.is_null() {
            None
        } else {
            let (heads, cfg) = load_heads(PathBuf::from(str_arg(heads_path, "heads_path")?), &backbone, &hash)?;
            Some(Retrieval { heads, provider: cfg.train.provider.build()?, n_words: cfg.train.n_words })
        };
        *out = Box::into_raw(Box::new(ClearModel { schema, backbone, retrieval }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn clear_model_free(model: *mut ClearModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input image height and width. Images are float32, channel-first RGB.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn clear_model_input_size(
    model: *const ClearModel,
    height: *mut usize,
    width: *mut usize,
) -> ClearStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        if height.is_null() || width.is_null() {
            return fail(ClearStatus::NullPointer, "height or width is null");
        }
        let [h, w] = m.backbone.config().image_hw;
        *height = h;
        *width = w;
        Ok(())
    })
}

/// Length of person and query embeddings, or 0 without retrieval heads.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn clear_model_embed_dim(model: *const ClearModel) -> usize {
    model.as_ref().and_then(|m| m.retrieval.as_ref()).map_or(0, |r| r.heads.dim_vis())
}

fn image_tensor(m: &ClearModel, data: &[f32], batch: usize) -> Result<Tensor, Failure> {
    let [h, w] = m.backbone.config().image_hw;
    if batch == 0 {
        return fail(ClearStatus::InvalidArgument, "batch is 0");
    }
    Ok(Tensor::from_slice(data, (batch, 3, h, w), &Device::Cpu)?)
}

unsafe fn image_arg<'a>(m: &ClearModel, p: *const f32, batch: usize) -> Result<&'a [f32], Failure> {
    let [h, w] = m.backbone.config().image_hw;
    slice_arg(p, batch * 3 * h * w, "images")
}

/// Attribute probabilities, `batch × n_attr` row-major.
///
/// # Safety
/// `images` must hold `batch × 3 × height × width` floats and `probs`
/// `probs_len` floats.
#[no_mangle]
pub unsafe extern "C" fn clear_model_predict(
    model: *const ClearModel,
    images: *const f32,
    batch: usize,
    probs: *mut f32,
    probs_len: usize,
) -> ClearStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let x = image_tensor(m, image_arg(m, images, batch)?, batch)?;
        let n_attr = m.schema.n_attr();
        let out = out_slice(probs, probs_len, batch * n_attr, "probs")?;
        for (dst, row) in out.chunks_mut(n_attr).zip(predict_probs(&m.backbone, &x, 64)?) {
            dst.copy_from_slice(&row);
        }
        Ok(())
    })
}

fn retrieval(m: &ClearModel) -> Result<&Retrieval, Failure> {
    m.retrieval.as_ref().map_or_else(|| fail(ClearStatus::InvalidArgument, "model was loaded without heads"), Ok)
}

/// Unit-norm person embeddings, `batch × embed_dim` row-major.
///
/// # Safety
/// As for `clear_model_predict`.
#[no_mangle]
pub unsafe extern "C" fn clear_model_encode_person(
    model: *const ClearModel,
    images: *const f32,
    batch: usize,
    out: *mut f32,
    out_len: usize,
) -> ClearStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let r = retrieval(m)?;
        let x = image_tensor(m, image_arg(m, images, batch)?, batch)?;
        let e = person_search_embedding(&encode_person(&m.backbone, &r.heads, &x)?)?;
        let flat = e.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        out_slice(out, out_len, flat.len(), "out")?.copy_from_slice(&flat);
        Ok(())
    })
}

/// Search vector of an attribute query, comparable by dot product with
/// person embeddings. `mode` is "hard", "soft", "word" or "hard+soft".
///
/// # Safety
/// `bits` must point to `n_bits` bytes; `mode` must be NUL-terminated;
/// `out` must hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn clear_model_encode_query(
    model: *const ClearModel,
    bits: *const u8,
    n_bits: usize,
    mode: *const c_char,
    out: *mut f32,
    out_len: usize,
) -> ClearStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let r = retrieval(m)?;
        let mode: QueryMode = str_arg(mode, "mode")?.parse()?;
        let q = attributes(bits, n_bits, &m.schema)?;
        let v = encode_query(&m.schema, r.provider.as_ref(), &r.heads, &q, r.n_words)?.search_vector(mode)?;
        for (d, s) in out_slice(out, out_len, v.len(), "out")?.iter_mut().zip(&v) {
            *d = *s as f32;
        }
        Ok(())
    })
}
