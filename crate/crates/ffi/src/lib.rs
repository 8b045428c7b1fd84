//! C ABI for embedding the drought forecaster in other languages.
//!
//! The surface is deliberately small: load a trained checkpoint into an
//! opaque handle, run single-window predictions, map forecasts to category
//! labels, and free the handle. All functions return an [`SqmStatus`];
//! details of the most recent failure on the calling thread are available
//! via [`sqm_last_error_message`].
//!
//! A generated C header lands in `include/square_mamba.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use square_mamba::error::Error;
use square_mamba::model::{layout, load_checkpoint, predict, SquareMambaParams};
use square_mamba::tensor::Tensor;
use square_mamba::train::categorize;

/// Result of every FFI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqmStatus {
    /// Success.
    SqmOk = 0,
    /// A pointer or length argument was invalid.
    SqmInvalidArgument = 1,
    /// The input (file, schema, value range) was rejected.
    SqmInputError = 2,
    /// An internal or I/O failure.
    SqmRuntimeError = 3,
}

/// Flattened window length expected by [`sqm_model_predict`].
pub const SQM_WINDOW_LEN: usize = 105;
/// Augmented window length (105 channels x 3 x 3 neighborhood), row-major.
pub const SQM_AUGMENTED_LEN: usize = 945;

/// Opaque handle around a loaded parameter set.
pub struct SqmModel {
    params: SquareMambaParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> SqmStatus {
    match err.exit_code() {
        2 => SqmStatus::SqmInputError,
        _ => SqmStatus::SqmRuntimeError,
    }
}

/// Version string of the library; static storage, do not free.
#[no_mangle]
pub extern "C" fn sqm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copy the calling thread's most recent error message into `buf`
/// (NUL-terminated, truncated to `buf_len`). Returns the full message
/// length, excluding the terminator.
///
/// # Safety
/// `buf` must point to `buf_len` writable bytes, or be NULL (then only the
/// length is returned).
#[no_mangle]
pub unsafe extern "C" fn sqm_last_error_message(buf: *mut c_char, buf_len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && buf_len > 0 {
            let n = bytes.len().min(buf_len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Load a trained checkpoint from `path` into a new handle stored in `out`.
/// On failure `*out` is NULL and the error message is retrievable.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sqm_model_load(
    path: *const c_char,
    out: *mut *mut SqmModel,
) -> SqmStatus {
    if out.is_null() {
        set_error("out handle pointer is NULL");
        return SqmStatus::SqmInvalidArgument;
    }
    *out = std::ptr::null_mut();
    if path.is_null() {
        set_error("path is NULL");
        return SqmStatus::SqmInvalidArgument;
    }
    let Ok(path) = CStr::from_ptr(path).to_str() else {
        set_error("path is not valid UTF-8");
        return SqmStatus::SqmInvalidArgument;
    };
    match load_checkpoint(Path::new(path)) {
        Ok((params, _meta)) => {
            *out = Box::into_raw(Box::new(SqmModel { params }));
            SqmStatus::SqmOk
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }
}

/// Release a handle returned by [`sqm_model_load`]. NULL is a no-op.
///
/// # Safety
/// `model` must be a pointer returned by [`sqm_model_load`] that has not
/// been freed yet.
#[no_mangle]
pub unsafe extern "C" fn sqm_model_free(model: *mut SqmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable parameters in the loaded model.
///
/// # Safety
/// `model` must be a live handle from [`sqm_model_load`].
#[no_mangle]
pub unsafe extern "C" fn sqm_model_param_count(model: *const SqmModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).params.trainable_count()
}

/// Predict the next-month drought condition for one standardized window.
/// `z` is the flattened 15x7 history (length 105, month-major), `tz` the
/// 105x3x3 spatial augmentation (row-major, center column equal to `z`).
/// The forecast lands in `out_d`, strictly inside (-3, 3).
///
/// The handle is not thread-safe: callers must serialize access per handle.
///
/// # Safety
/// `model` must be a live handle; `z` and `tz` must point to `z_len` and
/// `tz_len` readable doubles; `out_d` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sqm_model_predict(
    model: *mut SqmModel,
    z: *const f64,
    z_len: usize,
    tz: *const f64,
    tz_len: usize,
    out_d: *mut f64,
) -> SqmStatus {
    if model.is_null() || z.is_null() || tz.is_null() || out_d.is_null() {
        set_error("NULL argument");
        return SqmStatus::SqmInvalidArgument;
    }
    if z_len != SQM_WINDOW_LEN || tz_len != SQM_AUGMENTED_LEN {
        set_error("z must have length 105 and tz length 945");
        return SqmStatus::SqmInvalidArgument;
    }
    let z = std::slice::from_raw_parts(z, z_len).to_vec();
    let tz = std::slice::from_raw_parts(tz, tz_len).to_vec();
    let model = &mut *model;
    let result = catch_unwind(AssertUnwindSafe(|| -> Result<f64, Error> {
        let z = Tensor::from_vec(&[layout::FLAT], z)?;
        let tz = Tensor::from_vec(&[layout::FLAT, layout::WINDOW, layout::WINDOW], tz)?;
        predict(&mut model.params, &z, &tz)
    }));
    match result {
        Ok(Ok(d)) => {
            *out_d = d;
            SqmStatus::SqmOk
        }
        Ok(Err(e)) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic during prediction");
            SqmStatus::SqmRuntimeError
        }
    }
}

/// Map a drought index in [-3, 3] to its category label, copied into `buf`
/// as a NUL-terminated string.
///
/// # Safety
/// `buf` must point to `buf_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sqm_categorize(d: f64, buf: *mut c_char, buf_len: usize) -> SqmStatus {
    if buf.is_null() || buf_len == 0 {
        set_error("category buffer is NULL or empty");
        return SqmStatus::SqmInvalidArgument;
    }
    match categorize(d) {
        Ok(cat) => {
            let label = cat.label().as_bytes();
            let n = label.len().min(buf_len - 1);
            std::ptr::copy_nonoverlapping(label.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
            if n < label.len() {
                set_error("category buffer too small");
                return SqmStatus::SqmInvalidArgument;
            }
            SqmStatus::SqmOk
        }
        Err(e) => {
            set_error(&e.to_string());
            SqmStatus::SqmInputError
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use square_mamba::model::{save_checkpoint, AblationFlags};

    fn fixture_checkpoint(dir: &Path) -> std::path::PathBuf {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let params = SquareMambaParams::init(AblationFlags::default(), &mut rng);
        let path = dir.join("fixture.sqm");
        save_checkpoint(&params, 99, 0, &path).unwrap();
        path
    }

    fn sample() -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        use rand::Rng;
        let z: Vec<f64> = (0..SQM_WINDOW_LEN).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tz = vec![0.0; SQM_AUGMENTED_LEN];
        for c in 0..SQM_WINDOW_LEN {
            for p in 0..9 {
                tz[c * 9 + p] = if p == 4 { z[c] } else { z[c] + rng.gen_range(-0.3..0.3) };
            }
        }
        (z, tz)
    }

    #[test]
    fn load_predict_categorize_free() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = fixture_checkpoint(dir.path());
        let cpath = CString::new(ckpt.to_str().unwrap()).unwrap();
        let mut handle: *mut SqmModel = std::ptr::null_mut();
        let st = unsafe { sqm_model_load(cpath.as_ptr(), &mut handle) };
        assert_eq!(st, SqmStatus::SqmOk);
        assert!(!handle.is_null());
        assert_eq!(unsafe { sqm_model_param_count(handle) }, 11382);

        let (z, tz) = sample();
        let mut d = f64::NAN;
        let st = unsafe {
            sqm_model_predict(handle, z.as_ptr(), z.len(), tz.as_ptr(), tz.len(), &mut d)
        };
        assert_eq!(st, SqmStatus::SqmOk);
        assert!(d > -3.0 && d < 3.0);

        // agrees with the direct library path
        let (mut params, _) = load_checkpoint(&ckpt).unwrap();
        let zt = Tensor::from_vec(&[layout::FLAT], z.clone()).unwrap();
        let tzt =
            Tensor::from_vec(&[layout::FLAT, layout::WINDOW, layout::WINDOW], tz.clone()).unwrap();
        let want = predict(&mut params, &zt, &tzt).unwrap();
        assert_eq!(d.to_bits(), want.to_bits());

        let mut buf = [0 as c_char; 32];
        let st = unsafe { sqm_categorize(d, buf.as_mut_ptr(), buf.len()) };
        assert_eq!(st, SqmStatus::SqmOk);
        let label = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
        assert_eq!(label, categorize(d).unwrap().label());

        unsafe { sqm_model_free(handle) };
    }

    #[test]
    fn bad_arguments_are_reported() {
        let mut handle: *mut SqmModel = std::ptr::null_mut();
        let missing = CString::new("/nonexistent/checkpoint.sqm").unwrap();
        let st = unsafe { sqm_model_load(missing.as_ptr(), &mut handle) };
        assert_eq!(st, SqmStatus::SqmRuntimeError);
        assert!(handle.is_null());
        let mut buf = vec![0 as c_char; 256];
        let n = unsafe { sqm_last_error_message(buf.as_mut_ptr(), buf.len()) };
        assert!(n > 0);

        let st = unsafe { sqm_model_load(std::ptr::null(), &mut handle) };
        assert_eq!(st, SqmStatus::SqmInvalidArgument);

        // wrong lengths
        let dir = tempfile::tempdir().unwrap();
        let ckpt = fixture_checkpoint(dir.path());
        let cpath = CString::new(ckpt.to_str().unwrap()).unwrap();
        unsafe { sqm_model_load(cpath.as_ptr(), &mut handle) };
        let z = vec![0.0; 10];
        let tz = vec![0.0; 10];
        let mut d = 0.0;
        let st = unsafe {
            sqm_model_predict(handle, z.as_ptr(), z.len(), tz.as_ptr(), tz.len(), &mut d)
        };
        assert_eq!(st, SqmStatus::SqmInvalidArgument);
        unsafe { sqm_model_free(handle) };
        unsafe { sqm_model_free(std::ptr::null_mut()) }; // NULL is a no-op
    }

    #[test]
    fn categorize_rejects_out_of_range() {
        let mut buf = [0 as c_char; 32];
        let st = unsafe { sqm_categorize(3.5, buf.as_mut_ptr(), buf.len()) };
        assert_eq!(st, SqmStatus::SqmInputError);
    }

    #[test]
    fn version_is_a_static_string() {
        let v = unsafe { CStr::from_ptr(sqm_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}
