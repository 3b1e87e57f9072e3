//! C interface to the `bcnn` engine.
//!
//! Models are opaque [`BcnnModel`] handles created by one of the
//! `bcnn_model_*` constructors and released with [`bcnn_model_free`]. Every
//! fallible call returns a [`BcnnStatus`]; on failure a description is kept
//! per thread and can be read with [`bcnn_last_error_message`]. Panics never
//! cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use bcnn::model::ReferenceConfig;
use bcnn::{oracle, Engine, Error, Image, InputMode, ModelDescriptor};

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BcnnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    ShapeMismatch = 5,
    BufferTooSmall = 6,
    Divergence = 7,
    Internal = 8,
}

/// A loaded, validated network.
pub struct BcnnModel {
    model: ModelDescriptor,
    engine: Engine,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn fail(status: BcnnStatus, msg: impl Into<String>) -> BcnnStatus {
    set_error(msg);
    status
}

fn status_of(e: &Error) -> BcnnStatus {
    match e {
        Error::Io { .. } => BcnnStatus::Io,
        Error::ShapeMismatch { .. } => BcnnStatus::ShapeMismatch,
        Error::BadMagic { .. }
        | Error::UnsupportedVersion(_)
        | Error::Truncated { .. }
        | Error::Validation { .. }
        | Error::Model(_)
        | Error::Corrupt(_)
        | Error::UnsupportedKernel(_)
        | Error::Image(_) => BcnnStatus::Format,
        Error::Parameter(_) | Error::Config(_) => BcnnStatus::InvalidArgument,
    }
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (BcnnStatus, String)>) -> BcnnStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BcnnStatus::Ok,
        Ok(Err((status, msg))) => fail(status, msg),
        Err(_) => fail(BcnnStatus::Internal, "internal panic"),
    }
}

fn lib_err(e: Error) -> (BcnnStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (BcnnStatus, String) {
    (BcnnStatus::NullPointer, format!("{what} is null"))
}

unsafe fn model_ref<'a>(model: *const BcnnModel) -> Result<&'a BcnnModel, (BcnnStatus, String)> {
    // SAFETY: caller passes a handle from a bcnn_model_* constructor or null.
    unsafe { model.as_ref() }.ok_or_else(|| null("model"))
}

fn boxed(model: ModelDescriptor, out: *mut *mut BcnnModel) {
    let handle = Box::new(BcnnModel {
        model,
        engine: Engine::default(),
    });
    // SAFETY: `out` was checked non-null by the caller.
    unsafe { *out = Box::into_raw(handle) };
}

/// Loads a `BCNN` model file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bcnn_model_load(path: *const c_char, out: *mut *mut BcnnModel) -> BcnnStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: checked non-null; the caller guarantees NUL termination.
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| (BcnnStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let model = ModelDescriptor::load(path).map_err(lib_err)?;
        boxed(model, out);
        Ok(())
    })
}

/// Decodes a model from `len` bytes in the `BCNN` format.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bcnn_model_from_bytes(
    data: *const u8,
    len: usize,
    out: *mut *mut BcnnModel,
) -> BcnnStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: the caller guarantees `len` readable bytes.
        let bytes = unsafe { std::slice::from_raw_parts(data, len) };
        boxed(ModelDescriptor::from_bytes(bytes).map_err(lib_err)?, out);
        Ok(())
    })
}

/// Builds the reference architecture (96×96 input, two 32-channel 5×5
/// convolutions with pooling, 100-unit binary FC, 4-class head) with
/// random weights. `input_mode` uses the model-file codes 0..=3.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bcnn_model_reference(
    input_mode: u32,
    seed: u64,
    out: *mut *mut BcnnModel,
) -> BcnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mode = InputMode::from_code(input_mode).ok_or_else(|| {
            (
                BcnnStatus::InvalidArgument,
                format!("unknown input mode {input_mode}"),
            )
        })?;
        let model = ReferenceConfig::with_mode(mode)
            .random_model(seed)
            .map_err(lib_err)?;
        boxed(model, out);
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bcnn_model_free(model: *mut BcnnModel) {
    if !model.is_null() {
        // SAFETY: the handle came from Box::into_raw and is freed once.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Expected input image height, width and channel count.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bcnn_model_input_shape(
    model: *const BcnnModel,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> BcnnStatus {
    guard(|| {
        // SAFETY: forwarded from the caller.
        let m = unsafe { model_ref(model) }?;
        if height.is_null() || width.is_null() || channels.is_null() {
            return Err(null("output pointer"));
        }
        let s = m.model.input_shape();
        // SAFETY: checked non-null above.
        unsafe {
            *height = s.height;
            *width = s.width;
            *channels = s.channels;
        }
        Ok(())
    })
}

/// Number of head outputs; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bcnn_model_num_classes(model: *const BcnnModel) -> usize {
    // SAFETY: forwarded from the caller.
    unsafe { model.as_ref() }.map_or(0, |m| m.model.num_classes())
}

/// Model-file code of the input mode, or `u32::MAX` for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bcnn_model_input_mode(model: *const BcnnModel) -> u32 {
    // SAFETY: forwarded from the caller.
    unsafe { model.as_ref() }.map_or(u32::MAX, |m| m.model.input_mode().code())
}

/// Writes the `BCNN` encoding into `buf`. `*len` receives the encoded size
/// even when `capacity` is too small, so a first call with `buf = NULL`
/// and `capacity = 0` queries the size.
///
/// # Safety
/// `buf` must have `capacity` writable bytes (or be null with capacity 0);
/// `len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bcnn_model_serialize(
    model: *const BcnnModel,
    buf: *mut u8,
    capacity: usize,
    len: *mut usize,
) -> BcnnStatus {
    guard(|| {
        // SAFETY: forwarded from the caller.
        let m = unsafe { model_ref(model) }?;
        if len.is_null() {
            return Err(null("len"));
        }
        let bytes = m.model.to_bytes();
        // SAFETY: checked non-null.
        unsafe { *len = bytes.len() };
        if capacity < bytes.len() {
            return Err((
                BcnnStatus::BufferTooSmall,
                format!("need {} bytes, have {capacity}", bytes.len()),
            ));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        // SAFETY: `buf` has at least `bytes.len()` writable bytes.
        unsafe { ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len()) };
        Ok(())
    })
}

fn forward(
    m: &BcnnModel,
    pixels: Vec<f32>,
    scores: *mut f32,
    scores_len: usize,
    class: *mut usize,
) -> Result<(), (BcnnStatus, String)> {
    let shape = m.model.input_shape();
    if pixels.len() != shape.len() {
        return Err((
            BcnnStatus::ShapeMismatch,
            format!(
                "expected {} values for a {shape} image, got {}",
                shape.len(),
                pixels.len()
            ),
        ));
    }
    let n = m.model.num_classes();
    if scores.is_null() && scores_len > 0 {
        return Err(null("scores"));
    }
    if scores_len < n && !scores.is_null() {
        return Err((
            BcnnStatus::BufferTooSmall,
            format!("need {n} score slots, have {scores_len}"),
        ));
    }
    let image = Image::new(shape, pixels).map_err(lib_err)?;
    let out = m.engine.forward(&m.model, &image).map_err(lib_err)?;
    if !scores.is_null() {
        // SAFETY: `scores` has at least `n` writable slots.
        unsafe { ptr::copy_nonoverlapping(out.scores.as_ptr(), scores, n) };
    }
    if !class.is_null() {
        // SAFETY: checked non-null.
        unsafe { *class = out.class };
    }
    Ok(())
}

/// Classifies an interleaved (HWC) image of bytes. `scores` (may be null)
/// receives the head outputs, `class` (may be null) the argmax.
///
/// # Safety
/// `pixels` must hold `len` bytes, `scores` must have `scores_len` slots.
#[no_mangle]
pub unsafe extern "C" fn bcnn_forward_u8(
    model: *const BcnnModel,
    pixels: *const u8,
    len: usize,
    scores: *mut f32,
    scores_len: usize,
    class: *mut usize,
) -> BcnnStatus {
    guard(|| {
        // SAFETY: forwarded from the caller.
        let m = unsafe { model_ref(model) }?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        // SAFETY: the caller guarantees `len` readable bytes.
        let px = unsafe { std::slice::from_raw_parts(pixels, len) };
        forward(m, px.iter().map(|&b| b as f32).collect(), scores, scores_len, class)
    })
}

/// Like [`bcnn_forward_u8`] with float pixels in `[0, 255]`.
///
/// # Safety
/// `pixels` must hold `len` floats, `scores` must have `scores_len` slots.
#[no_mangle]
pub unsafe extern "C" fn bcnn_forward_f32(
    model: *const BcnnModel,
    pixels: *const f32,
    len: usize,
    scores: *mut f32,
    scores_len: usize,
    class: *mut usize,
) -> BcnnStatus {
    guard(|| {
        // SAFETY: forwarded from the caller.
        let m = unsafe { model_ref(model) }?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        // SAFETY: the caller guarantees `len` readable floats.
        let px = unsafe { std::slice::from_raw_parts(pixels, len) };
        if px.iter().any(|v| !v.is_finite()) {
            return Err((BcnnStatus::InvalidArgument, "non-finite pixel".into()));
        }
        forward(m, px.to_vec(), scores, scores_len, class)
    })
}

/// Checks the packed engine against the reference evaluation on `samples`
/// seeded random images. `*divergent` receives the number of samples with
/// any mismatch; the status is `Divergence` when it is nonzero.
///
/// # Safety
/// `divergent` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn bcnn_validate(
    model: *const BcnnModel,
    samples: usize,
    seed: u64,
    divergent: *mut usize,
) -> BcnnStatus {
    guard(|| {
        // SAFETY: forwarded from the caller.
        let m = unsafe { model_ref(model) }?;
        let report = oracle::check_equivalence_between(&m.engine, &m.model, &m.model, samples, seed)
            .map_err(lib_err)?;
        if !divergent.is_null() {
            // SAFETY: checked non-null.
            unsafe { *divergent = report.divergent_samples };
        }
        if report.is_equivalent() {
            Ok(())
        } else {
            Err((BcnnStatus::Divergence, report.to_string()))
        }
    })
}

/// ±1 dot product of two packed words with `valid` meaningful bits
/// (`1..=32`, MSB-first).
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bcnn_xnor_dot(a: u32, b: u32, valid: u32, out: *mut i32) -> BcnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if !(1..=32).contains(&valid) {
            return Err((BcnnStatus::InvalidArgument, format!("valid bit count {valid}")));
        }
        let mask = bcnn::bitops::valid_mask(valid, valid);
        if (a | b) & !mask != 0 {
            return Err((
                BcnnStatus::InvalidArgument,
                format!("bits set above position {}", valid - 1),
            ));
        }
        // SAFETY: checked non-null.
        unsafe { *out = bcnn::xnor_dot(a, b, valid) };
        Ok(())
    })
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call on the same thread.
#[no_mangle]
pub extern "C" fn bcnn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bcnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
