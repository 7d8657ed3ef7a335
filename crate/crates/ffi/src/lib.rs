//! C ABI for the heat-conduction backbone.
//!
//! Conventions: every fallible call returns a status code (`VHEAT_OK` on
//! success) and records a message retrievable with [`vheat_last_error`] on
//! failure; models travel as opaque handles that must be released with
//! [`vheat_model_free`]; buffers are caller-allocated row-major `float`
//! arrays. No call unwinds across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use vheat::dct::build_plan;
use vheat::hco::{hco_forward, FrequencyGrid, ThermalField};
use vheat::model::{build_model, load_checkpoint, peek_config, save_checkpoint, Model};
use vheat::tensor::{DType, Tensor};

/// Success.
pub const VHEAT_OK: i32 = 0;
/// A pointer argument was null or a length was inconsistent.
pub const VHEAT_ERR_ARGUMENT: i32 = 1;
/// A string was not valid UTF-8 or a config failed to parse/validate.
pub const VHEAT_ERR_CONFIG: i32 = 2;
/// File input/output failed.
pub const VHEAT_ERR_IO: i32 = 3;
/// The numerical core rejected the operation.
pub const VHEAT_ERR_RUNTIME: i32 = 4;
/// A panic was caught at the boundary; state may be stale but memory is safe.
pub const VHEAT_ERR_PANIC: i32 = 5;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(code: i32, msg: impl Into<String>) -> i32 {
    let mut bytes = msg.into().into_bytes();
    bytes.retain(|&b| b != 0);
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(bytes).unwrap_or_default();
    });
    code
}

fn classify(e: &vheat::error::Error) -> i32 {
    use vheat::error::Error;
    match e {
        Error::Io(_) => VHEAT_ERR_IO,
        Error::Json(_) | Error::Format(_) => VHEAT_ERR_CONFIG,
        Error::InvalidArgument(_) | Error::ShapeMismatch(_) => VHEAT_ERR_ARGUMENT,
        _ => VHEAT_ERR_RUNTIME,
    }
}

fn fail(e: vheat::error::Error) -> i32 {
    set_error(classify(&e), e.to_string())
}

/// Run `f` with panics converted to `VHEAT_ERR_PANIC`.
fn guarded(f: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic crossed the C boundary".into());
            set_error(VHEAT_ERR_PANIC, msg)
        }
    }
}

/// Opaque trained-or-initialized model. The precision it computes in was
/// fixed by its configuration (`dtype`); the C surface always exchanges
/// `float` buffers and converts at the edge.
pub struct VheatModel {
    inner: ModelInner,
}

enum ModelInner {
    F32(Model<f32>),
    F64(Model<f64>),
}

impl VheatModel {
    fn num_params(&self) -> usize {
        match &self.inner {
            ModelInner::F32(m) => m.num_params(),
            ModelInner::F64(m) => m.num_params(),
        }
    }

    fn input_extent(&self) -> usize {
        match &self.inner {
            ModelInner::F32(m) => m.config.input_extent,
            ModelInner::F64(m) => m.config.input_extent,
        }
    }

    fn num_classes(&self) -> usize {
        match &self.inner {
            ModelInner::F32(m) => m.config.num_classes,
            ModelInner::F64(m) => m.config.num_classes,
        }
    }

    fn forward(&self, images: &[f32], batch: usize) -> vheat::error::Result<Vec<f32>> {
        let e = self.input_extent();
        let dims = vec![batch, 3, e, e];
        match &self.inner {
            ModelInner::F32(m) => {
                let x = Tensor::new(dims, images.to_vec())?;
                Ok(m.forward(&x)?.to_vec())
            }
            ModelInner::F64(m) => {
                let x =
                    Tensor::new(dims, images.iter().map(|&v| f64::from(v)).collect::<Vec<_>>())?;
                Ok(m.forward(&x)?.as_slice().iter().map(|&v| v as f32).collect())
            }
        }
    }
}

unsafe fn cstr<'a>(p: *const c_char) -> Result<&'a str, i32> {
    if p.is_null() {
        return Err(set_error(VHEAT_ERR_ARGUMENT, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| set_error(VHEAT_ERR_CONFIG, "string argument is not valid UTF-8"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vheat_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread. Never null.
#[no_mangle]
pub extern "C" fn vheat_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Build a freshly initialized model from a JSON configuration (the same
/// schema the CLI accepts) and a seed. On success `*out` owns the model.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vheat_model_build(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut VheatModel,
) -> i32 {
    guarded(|| {
        if out.is_null() {
            return set_error(VHEAT_ERR_ARGUMENT, "null output handle");
        }
        let json = match cstr(config_json) {
            Ok(s) => s,
            Err(code) => return code,
        };
        let config: vheat::model::ModelConfig = match serde_json::from_str(json) {
            Ok(c) => c,
            Err(e) => return set_error(VHEAT_ERR_CONFIG, format!("config parse: {e}")),
        };
        if let Err(e) = config.validate() {
            return fail(e);
        }
        let inner = match config.dtype {
            DType::F32 => build_model::<f32>(&config, seed).map(ModelInner::F32),
            DType::F64 => build_model::<f64>(&config, seed).map(ModelInner::F64),
        };
        match inner {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(VheatModel { inner }));
                VHEAT_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Load a model from a checkpoint file. On success `*out` owns the model.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vheat_model_load(path: *const c_char, out: *mut *mut VheatModel) -> i32 {
    guarded(|| {
        if out.is_null() {
            return set_error(VHEAT_ERR_ARGUMENT, "null output handle");
        }
        let path = match cstr(path) {
            Ok(s) => s,
            Err(code) => return code,
        };
        let config = match peek_config(Path::new(path)) {
            Ok(c) => c,
            Err(e) => return fail(e),
        };
        let inner = match config.dtype {
            DType::F32 => load_checkpoint::<f32>(Path::new(path)).map(ModelInner::F32),
            DType::F64 => load_checkpoint::<f64>(Path::new(path)).map(ModelInner::F64),
        };
        match inner {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(VheatModel { inner }));
                VHEAT_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Write a model to a checkpoint file (bitwise round-trippable).
///
/// # Safety
/// `model` must come from a build/load call; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vheat_model_save(model: *const VheatModel, path: *const c_char) -> i32 {
    guarded(|| {
        let model = match model.as_ref() {
            Some(m) => m,
            None => return set_error(VHEAT_ERR_ARGUMENT, "null model handle"),
        };
        let path = match cstr(path) {
            Ok(s) => s,
            Err(code) => return code,
        };
        let saved = match &model.inner {
            ModelInner::F32(m) => save_checkpoint(m, Path::new(path)),
            ModelInner::F64(m) => save_checkpoint(m, Path::new(path)),
        };
        match saved {
            Ok(()) => VHEAT_OK,
            Err(e) => fail(e),
        }
    })
}

/// Number of scalar parameters in the model.
///
/// # Safety
/// `model` must come from a build/load call; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vheat_model_num_params(
    model: *const VheatModel,
    out: *mut usize,
) -> i32 {
    guarded(|| {
        let model = match model.as_ref() {
            Some(m) => m,
            None => return set_error(VHEAT_ERR_ARGUMENT, "null model handle"),
        };
        if out.is_null() {
            return set_error(VHEAT_ERR_ARGUMENT, "null output pointer");
        }
        *out = model.num_params();
        VHEAT_OK
    })
}

/// Side of the square input the model expects (images are `[batch, 3, e, e]`).
///
/// # Safety
/// `model` must come from a build/load call; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vheat_model_input_extent(
    model: *const VheatModel,
    out: *mut usize,
) -> i32 {
    guarded(|| {
        let model = match model.as_ref() {
            Some(m) => m,
            None => return set_error(VHEAT_ERR_ARGUMENT, "null model handle"),
        };
        if out.is_null() {
            return set_error(VHEAT_ERR_ARGUMENT, "null output pointer");
        }
        *out = model.input_extent();
        VHEAT_OK
    })
}

/// Classify a batch. `images` holds `batch * 3 * e * e` floats (`e` from
/// [`vheat_model_input_extent`]); `logits` receives `batch * num_classes`
/// floats and `logits_len` must say exactly that.
///
/// # Safety
/// `model` must come from a build/load call; both buffers must be valid for
/// the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn vheat_model_forward(
    model: *const VheatModel,
    images: *const f32,
    images_len: usize,
    batch: usize,
    logits: *mut f32,
    logits_len: usize,
) -> i32 {
    guarded(|| {
        let model = match model.as_ref() {
            Some(m) => m,
            None => return set_error(VHEAT_ERR_ARGUMENT, "null model handle"),
        };
        if images.is_null() || logits.is_null() {
            return set_error(VHEAT_ERR_ARGUMENT, "null buffer");
        }
        let e = model.input_extent();
        if batch == 0 || images_len != batch * 3 * e * e {
            return set_error(
                VHEAT_ERR_ARGUMENT,
                format!("images_len {images_len} != batch {batch} * 3 * {e} * {e}"),
            );
        }
        let want = batch * model.num_classes();
        if logits_len != want {
            return set_error(
                VHEAT_ERR_ARGUMENT,
                format!("logits_len {logits_len} != batch * classes = {want}"),
            );
        }
        let input = std::slice::from_raw_parts(images, images_len);
        match model.forward(input, batch) {
            Ok(values) => {
                ptr::copy_nonoverlapping(values.as_ptr(), logits, want);
                VHEAT_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Release a model handle. Null is a no-op; a handle must not be used after.
///
/// # Safety
/// `model` must come from a build/load call and not have been freed before.
#[no_mangle]
pub unsafe extern "C" fn vheat_model_free(model: *mut VheatModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Evolve `field` (`channels * m * n` floats, row-major `[C, M, N]`) by
/// heat conduction with uniform diffusivity `k` for time `t`, writing the
/// result to `out` (same length). `field` and `out` may alias exactly.
///
/// # Safety
/// Both buffers must be valid for `channels * m * n` floats.
#[no_mangle]
pub unsafe extern "C" fn vheat_hco_apply(
    field: *const f32,
    channels: usize,
    m: usize,
    n: usize,
    k: f32,
    t: f32,
    out: *mut f32,
) -> i32 {
    guarded(|| {
        if field.is_null() || out.is_null() {
            return set_error(VHEAT_ERR_ARGUMENT, "null buffer");
        }
        if channels == 0 || m == 0 || n == 0 {
            return set_error(VHEAT_ERR_ARGUMENT, "extents must be positive");
        }
        let len = channels * m * n;
        let input = std::slice::from_raw_parts(field, len);
        let result = (|| -> vheat::error::Result<Vec<f32>> {
            let grid = FrequencyGrid::<f32>::new(m, n)?;
            let thermal = ThermalField::uniform(channels, &grid, k, t)?;
            let plan = build_plan::<f32>(m, n)?;
            let u0 = Tensor::new(vec![1, channels, m, n], input.to_vec())?;
            Ok(hco_forward(&plan, &thermal.coeff, &u0)?.to_vec())
        })();
        match result {
            Ok(values) => {
                ptr::copy_nonoverlapping(values.as_ptr(), out, len);
                VHEAT_OK
            }
            Err(e) => fail(e),
        }
    })
}
