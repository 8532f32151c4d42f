//! C ABI for the streaming scorer.
//!
//! Every function returns a [`PsStatus`]; on anything but `PS_STATUS_OK`
//! the reason is available from [`ps_last_error_message`] on the same
//! thread. Strings handed out by the library are freed with
//! [`ps_string_free`], bundles with [`ps_bundle_free`]. A bundle handle is
//! immutable and may be shared between threads.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use pricesentry::bundle::{BundleStore, ModelBundle};
use pricesentry::record::parse_json_record;
use pricesentry::serving::stream_score;
use pricesentry::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    NotFound = 4,
    Io = 5,
    BundleError = 6,
    Panic = 7,
    Internal = 8,
}

/// Opaque handle to a loaded model bundle.
pub struct PsBundle {
    bundle: ModelBundle,
    version: CString,
}

/// The numeric part of a score response.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PsScore {
    pub is_anomaly: bool,
    pub blocked: bool,
    pub priority_tier: u8,
    pub score: f64,
    pub business_impact: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PsStatus {
    match e {
        Error::NotFound(_) => PsStatus::NotFound,
        Error::Io { .. } => PsStatus::Io,
        Error::Bundle(_) | Error::Bincode(_) => PsStatus::BundleError,
        Error::Record(_) | Error::Json(_) | Error::InvalidArgument(_) => PsStatus::InvalidInput,
        _ => PsStatus::Internal,
    }
}

/// Runs `f`, turning errors and panics into a status plus the thread's
/// last error message.
fn guard(f: impl FnOnce() -> Result<(), (PsStatus, String)>) -> PsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PsStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside pricesentry".into());
            PsStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (PsStatus, String) {
    (status_of(&e), e.to_string())
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (PsStatus, String)> {
    if p.is_null() {
        return Err((PsStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (PsStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn handle(bundle: ModelBundle) -> *mut PsBundle {
    let version = CString::new(bundle.version.clone()).unwrap_or_default();
    Box::into_raw(Box::new(PsBundle { bundle, version }))
}

/// Loads a bundle file (`bundle.bin`).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_bundle_load(path: *const c_char, out: *mut *mut PsBundle) -> PsStatus {
    guard(|| {
        if out.is_null() {
            return Err((PsStatus::NullPointer, "out is null".into()));
        }
        let path = read_str(path, "path")?;
        let bundle = ModelBundle::load(Path::new(path)).map_err(lib_err)?;
        *out = handle(bundle);
        Ok(())
    })
}

/// Loads the latest bundle published under a bundle directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_bundle_load_latest(dir: *const c_char, out: *mut *mut PsBundle) -> PsStatus {
    guard(|| {
        if out.is_null() {
            return Err((PsStatus::NullPointer, "out is null".into()));
        }
        let dir = read_str(dir, "dir")?;
        let bundle = BundleStore::new(dir).load_latest().map_err(lib_err)?;
        *out = handle(bundle);
        Ok(())
    })
}

/// # Safety
/// `bundle` must come from a load function and not be freed twice. Null
/// is ignored.
#[no_mangle]
pub unsafe extern "C" fn ps_bundle_free(bundle: *mut PsBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// The bundle's version string, owned by the handle.
///
/// # Safety
/// `bundle` must be a live handle. The result is valid until it is freed.
#[no_mangle]
pub unsafe extern "C" fn ps_bundle_version(bundle: *const PsBundle) -> *const c_char {
    match bundle.as_ref() {
        Some(b) => b.version.as_ptr(),
        None => ptr::null(),
    }
}

/// Scores a JSON item record and writes the JSON score response to `out`,
/// to be released with [`ps_string_free`].
///
/// # Safety
/// `bundle` must be a live handle, `record_json` NUL-terminated and `out`
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_score_json(
    bundle: *const PsBundle,
    record_json: *const c_char,
    out: *mut *mut c_char,
) -> PsStatus {
    guard(|| {
        let b = bundle
            .as_ref()
            .ok_or((PsStatus::NullPointer, "bundle is null".into()))?;
        if out.is_null() {
            return Err((PsStatus::NullPointer, "out is null".into()));
        }
        let record = parse_json_record(read_str(record_json, "record_json")?).map_err(lib_err)?;
        let resp = stream_score(&b.bundle, &record);
        let text = serde_json::to_string(&resp).map_err(|e| (PsStatus::Internal, e.to_string()))?;
        *out = CString::new(text)
            .map_err(|e| (PsStatus::Internal, e.to_string()))?
            .into_raw();
        Ok(())
    })
}

/// Like [`ps_score_json`] but fills a plain struct, for callers that only
/// need the decision.
///
/// # Safety
/// `bundle` must be a live handle, `record_json` NUL-terminated and `out`
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_score_fields(
    bundle: *const PsBundle,
    record_json: *const c_char,
    out: *mut PsScore,
) -> PsStatus {
    guard(|| {
        let b = bundle
            .as_ref()
            .ok_or((PsStatus::NullPointer, "bundle is null".into()))?;
        let out = out.as_mut().ok_or((PsStatus::NullPointer, "out is null".into()))?;
        let record = parse_json_record(read_str(record_json, "record_json")?).map_err(lib_err)?;
        let resp = stream_score(&b.bundle, &record);
        *out = PsScore {
            is_anomaly: resp.is_anomaly,
            blocked: resp.blocked,
            priority_tier: resp.priority_tier,
            score: resp.score,
            business_impact: resp.business_impact,
        };
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ps_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// The message of the last failed call on this thread, or null. Valid
/// until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn ps_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_arguments_are_reported() {
        let mut out = ptr::null_mut();
        let st = unsafe { ps_bundle_load(ptr::null(), &mut out) };
        assert_eq!(st, PsStatus::NullPointer);
        let msg = unsafe { CStr::from_ptr(ps_last_error_message()) };
        assert_eq!(msg.to_str().unwrap(), "path is null");
        assert!(out.is_null());
    }

    #[test]
    fn missing_bundle_is_not_found_or_io() {
        let dir = tempfile::tempdir().unwrap();
        let c = CString::new(dir.path().to_str().unwrap()).unwrap();
        let mut out = ptr::null_mut();
        let st = unsafe { ps_bundle_load_latest(c.as_ptr(), &mut out) };
        assert!(matches!(st, PsStatus::NotFound | PsStatus::Io), "{st:?}");
        assert!(!ps_last_error_message().is_null());
    }

    #[test]
    fn freeing_null_is_harmless() {
        unsafe {
            ps_bundle_free(ptr::null_mut());
            ps_string_free(ptr::null_mut());
            assert!(ps_bundle_version(ptr::null()).is_null());
        }
    }
}
