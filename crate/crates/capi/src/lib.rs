//! C interface to the certification pipeline: opaque handles, integer
//! status codes, JSON strings for structured data.
//!
//! Conventions: every fallible function returns [`StepcertStatus`];
//! negative codes are errors, `0` is success, `2` is a completed run with
//! a negative determination. On any non-zero return,
//! [`stepcert_last_error`] describes what happened (per thread, valid
//! until the next failing call on that thread). Handles are created and
//! released by this library only; strings returned through `char**` are
//! released with [`stepcert_string_free`]. Every entry point catches
//! panics at the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use nalgebra::DVector;

use stepcert::certify::{certify_ges, CertifyOptions, CertifyOutcome};
use stepcert::lmi::LmiData;
use stepcert::lyapunov::LyapunovEvaluator;
use stepcert::model::{SystemConfig, SystemData};
use stepcert::sdp::{verify, Certificate};
use stepcert::sim::{simulate, SelectionPolicy};

/// Result of every fallible call.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepcertStatus {
    /// The call succeeded; for decision procedures, the positive outcome.
    Ok = 0,
    /// The run completed and the answer is negative: not certified, or a
    /// verification that failed.
    NotCertified = 2,
    /// A required pointer argument was null.
    NullArgument = -1,
    /// A scalar, buffer, or handle argument is malformed or out of range.
    InvalidArgument = -2,
    /// A JSON document failed to parse or validate.
    ParseError = -3,
    /// The solver or evaluator failed internally.
    InternalError = -4,
    /// A panic was caught at the boundary; state may be inconsistent.
    Panic = -5,
}

/// A validated system plus the solve options its config carried.
pub struct StepcertSystem {
    sys: SystemData,
    opts: CertifyOptions,
}

/// A stability certificate.
pub struct StepcertCertificate {
    cert: Certificate,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl std::fmt::Display) {
    let text = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(text).unwrap_or_default();
    });
}

fn status_of(e: &stepcert::Error) -> StepcertStatus {
    use stepcert::Error::*;
    match e {
        Config(_) | Json(_) | SdpaFormat(_) => StepcertStatus::ParseError,
        SolverTimeout(_) | SolverFailure(_) | Io(_) => StepcertStatus::InternalError,
        _ => StepcertStatus::InvalidArgument,
    }
}

fn fail(e: &stepcert::Error) -> StepcertStatus {
    set_error(e);
    status_of(e)
}

fn guarded<F: FnOnce() -> StepcertStatus>(f: F) -> StepcertStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("panic caught at the C boundary");
            StepcertStatus::Panic
        }
    }
}

/// Borrows a handle, counting null as [`StepcertStatus::NullArgument`].
macro_rules! deref {
    ($ptr:ident) => {
        match unsafe { $ptr.as_ref() } {
            Some(r) => r,
            None => {
                set_error(concat!(stringify!($ptr), " is null"));
                return StepcertStatus::NullArgument;
            }
        }
    };
}

/// Library version as a static null-terminated string.
#[no_mangle]
pub extern "C" fn stepcert_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn stepcert_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Frees a string returned through a `char**` out parameter.
///
/// # Safety
/// `s` must have come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn stepcert_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Parses and validates a system from its JSON description. On success
/// writes a new handle to `out`; free it with [`stepcert_system_free`].
///
/// # Safety
/// `json` must be a valid null-terminated string and `out` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn stepcert_system_from_json(
    json: *const c_char,
    out: *mut *mut StepcertSystem,
) -> StepcertStatus {
    guarded(|| {
        if json.is_null() || out.is_null() {
            set_error("json and out must be non-null");
            return StepcertStatus::NullArgument;
        }
        let text = match unsafe { CStr::from_ptr(json) }.to_str() {
            Ok(t) => t,
            Err(e) => {
                set_error(format!("json is not UTF-8: {e}"));
                return StepcertStatus::ParseError;
            }
        };
        let cfg = match SystemConfig::from_json(text) {
            Ok(c) => c,
            Err(e) => return fail(&e),
        };
        let sys = match cfg.to_system() {
            Ok(s) => s,
            Err(e) => return fail(&e),
        };
        let mut opts = CertifyOptions::default();
        if let Some(solver) = &cfg.solver {
            opts = opts.with_config(solver);
        }
        unsafe { *out = Box::into_raw(Box::new(StepcertSystem { sys, opts })) };
        StepcertStatus::Ok
    })
}

/// Releases a system handle. Null is a no-op.
///
/// # Safety
/// `sys` must have come from [`stepcert_system_from_json`] and not have
/// been freed already.
#[no_mangle]
pub unsafe extern "C" fn stepcert_system_free(sys: *mut StepcertSystem) {
    if !sys.is_null() {
        drop(unsafe { Box::from_raw(sys) });
    }
}

/// Writes the state and input dimensions of the system.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn stepcert_system_dims(
    sys: *const StepcertSystem,
    n_p: *mut usize,
    n_u: *mut usize,
) -> StepcertStatus {
    guarded(|| {
        let handle = deref!(sys);
        if n_p.is_null() || n_u.is_null() {
            set_error("n_p and n_u must be non-null");
            return StepcertStatus::NullArgument;
        }
        unsafe {
            *n_p = handle.sys.n_p();
            *n_u = handle.sys.n_u();
        }
        StepcertStatus::Ok
    })
}

/// Runs the certification pipeline. `eps` and `time_limit_s` override the
/// config when positive; pass `0` to keep the configured values. On
/// [`StepcertStatus::Ok`] writes a verified certificate handle to `out`;
/// on [`StepcertStatus::NotCertified`] the diagnostic is available via
/// [`stepcert_last_error`] and `out` is untouched.
///
/// # Safety
/// `sys` must be a live system handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stepcert_certify(
    sys: *const StepcertSystem,
    eps: f64,
    time_limit_s: f64,
    out: *mut *mut StepcertCertificate,
) -> StepcertStatus {
    guarded(|| {
        let handle = deref!(sys);
        if out.is_null() {
            set_error("out must be non-null");
            return StepcertStatus::NullArgument;
        }
        if !eps.is_finite() || !time_limit_s.is_finite() || eps < 0.0 || time_limit_s < 0.0 {
            set_error("eps and time_limit_s must be finite and nonnegative");
            return StepcertStatus::InvalidArgument;
        }
        let mut opts = handle.opts.clone();
        if eps > 0.0 {
            opts.eps = eps;
        }
        if time_limit_s > 0.0 {
            opts.time_limit_s = time_limit_s;
        }
        match certify_ges(&handle.sys, &opts) {
            Ok(CertifyOutcome::Certified(cert)) => {
                unsafe { *out = Box::into_raw(Box::new(StepcertCertificate { cert: *cert })) };
                StepcertStatus::Ok
            }
            Ok(CertifyOutcome::NotCertified { diagnostic }) => {
                set_error(diagnostic);
                StepcertStatus::NotCertified
            }
            Err(e) => fail(&e),
        }
    })
}

/// Parses a certificate from JSON. Free the handle with
/// [`stepcert_certificate_free`].
///
/// # Safety
/// `json` must be a valid null-terminated string and `out` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn stepcert_certificate_from_json(
    json: *const c_char,
    out: *mut *mut StepcertCertificate,
) -> StepcertStatus {
    guarded(|| {
        if json.is_null() || out.is_null() {
            set_error("json and out must be non-null");
            return StepcertStatus::NullArgument;
        }
        let text = match unsafe { CStr::from_ptr(json) }.to_str() {
            Ok(t) => t,
            Err(e) => {
                set_error(format!("json is not UTF-8: {e}"));
                return StepcertStatus::ParseError;
            }
        };
        match Certificate::from_json_str(text) {
            Ok(cert) => {
                unsafe { *out = Box::into_raw(Box::new(StepcertCertificate { cert })) };
                StepcertStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Serializes a certificate to a newly allocated JSON string; release it
/// with [`stepcert_string_free`].
///
/// # Safety
/// `cert` must be a live certificate handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stepcert_certificate_to_json(
    cert: *const StepcertCertificate,
    out: *mut *mut c_char,
) -> StepcertStatus {
    guarded(|| {
        let handle = deref!(cert);
        if out.is_null() {
            set_error("out must be non-null");
            return StepcertStatus::NullArgument;
        }
        let text = match handle.cert.to_json_string() {
            Ok(t) => t,
            Err(e) => return fail(&e),
        };
        match CString::new(text) {
            Ok(s) => {
                unsafe { *out = s.into_raw() };
                StepcertStatus::Ok
            }
            Err(e) => {
                set_error(format!("certificate JSON contains a null byte: {e}"));
                StepcertStatus::InternalError
            }
        }
    })
}

/// Releases a certificate handle. Null is a no-op.
///
/// # Safety
/// `cert` must have come from this library and not have been freed
/// already.
#[no_mangle]
pub unsafe extern "C" fn stepcert_certificate_free(cert: *mut StepcertCertificate) {
    if !cert.is_null() {
        drop(unsafe { Box::from_raw(cert) });
    }
}

/// Recomputes every certified inequality from scratch. Returns
/// [`StepcertStatus::Ok`] when the certificate passes at tolerance `tol`
/// (pass `0` for the default `1e-7`), [`StepcertStatus::NotCertified`]
/// when it fails.
///
/// # Safety
/// `sys` and `cert` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn stepcert_verify(
    sys: *const StepcertSystem,
    cert: *const StepcertCertificate,
    tol: f64,
) -> StepcertStatus {
    guarded(|| {
        let sys = deref!(sys);
        let cert = deref!(cert);
        if !tol.is_finite() || tol < 0.0 {
            set_error("tol must be finite and nonnegative");
            return StepcertStatus::InvalidArgument;
        }
        let tol = if tol == 0.0 { 1e-7 } else { tol };
        let lmi = match LmiData::build(&sys.sys) {
            Ok(l) => l,
            Err(e) => return fail(&e),
        };
        match verify(&cert.cert, &sys.sys, &lmi, tol) {
            Ok(report) if report.pass => StepcertStatus::Ok,
            Ok(report) => {
                set_error(format!(
                    "verification failed: max eigenvalues {:?}, multiplier minima {:?}, \
                     rate margins {:?}",
                    report.lmi_max_eig, report.m_min_entry, report.c_margins
                ));
                StepcertStatus::NotCertified
            }
            Err(e) => fail(&e),
        }
    })
}

/// Evaluates the certified function `W(x) = sup V(x)` at a state.
///
/// # Safety
/// `x` must point to `x_len` doubles; `out_value` must be valid.
#[no_mangle]
pub unsafe extern "C" fn stepcert_sup_v(
    sys: *const StepcertSystem,
    cert: *const StepcertCertificate,
    x: *const f64,
    x_len: usize,
    out_value: *mut f64,
) -> StepcertStatus {
    guarded(|| {
        let sys = deref!(sys);
        let cert = deref!(cert);
        if x.is_null() || out_value.is_null() {
            set_error("x and out_value must be non-null");
            return StepcertStatus::NullArgument;
        }
        if x_len != sys.sys.n_p() {
            set_error(format!(
                "x has {x_len} entries, the system state has {}",
                sys.sys.n_p()
            ));
            return StepcertStatus::InvalidArgument;
        }
        let state = DVector::from_row_slice(unsafe { std::slice::from_raw_parts(x, x_len) });
        let p = match cert.cert.p_matrix() {
            Ok(p) => p,
            Err(e) => return fail(&e),
        };
        let ev = match LyapunovEvaluator::new(&sys.sys, &p) {
            Ok(ev) => ev,
            Err(e) => return fail(&e),
        };
        match ev.sup_v(&state) {
            Ok(sup) => {
                unsafe { *out_value = sup.value };
                StepcertStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Simulates the closed loop for `steps` steps and writes the states
/// row-major into the caller's buffer of `out_len >= (steps + 1) * n_p`
/// doubles. `policy` is `0` for the strict step, `1` for uniform random
/// selections on the switching surfaces (seeded by `seed`), `2` for the
/// norm-maximizing extreme selection.
///
/// # Safety
/// `x0` must point to `x0_len` doubles and `out_states` to `out_len`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn stepcert_simulate(
    sys: *const StepcertSystem,
    x0: *const f64,
    x0_len: usize,
    steps: usize,
    policy: i32,
    seed: u64,
    out_states: *mut f64,
    out_len: usize,
) -> StepcertStatus {
    guarded(|| {
        let handle = deref!(sys);
        if x0.is_null() || out_states.is_null() {
            set_error("x0 and out_states must be non-null");
            return StepcertStatus::NullArgument;
        }
        let n_p = handle.sys.n_p();
        if x0_len != n_p {
            set_error(format!("x0 has {x0_len} entries, the state has {n_p}"));
            return StepcertStatus::InvalidArgument;
        }
        let needed = match (steps.checked_add(1)).and_then(|rows| rows.checked_mul(n_p)) {
            Some(n) => n,
            None => {
                set_error("steps is too large");
                return StepcertStatus::InvalidArgument;
            }
        };
        if out_len < needed {
            set_error(format!("out_states holds {out_len} doubles, need {needed}"));
            return StepcertStatus::InvalidArgument;
        }
        let policy = match policy {
            0 => SelectionPolicy::Deterministic,
            1 => SelectionPolicy::UniformRandom { seed },
            2 => SelectionPolicy::WorstCase,
            other => {
                set_error(format!("policy must be 0, 1, or 2, got {other}"));
                return StepcertStatus::InvalidArgument;
            }
        };
        let start = DVector::from_row_slice(unsafe { std::slice::from_raw_parts(x0, x0_len) });
        match simulate(&handle.sys, &start, steps, &policy) {
            Ok(traj) => {
                let out = unsafe { std::slice::from_raw_parts_mut(out_states, needed) };
                for (j, state) in traj.states.iter().enumerate() {
                    out[j * n_p..(j + 1) * n_p].copy_from_slice(state.as_slice());
                }
                StepcertStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    const TERNARY: &str = r#"{
        "A": [[0.9464, 0.0957], [-0.9568, 0.9033]],
        "B": [[0.0049, -0.0049], [0.0959, -0.0959]],
        "K": [[9.9, 0.495], [-9.9, -0.495]],
        "Delta_diag": [1.0, 1.0],
        "d": [-1.0, -1.0]
    }"#;

    fn system(json: &str) -> *mut StepcertSystem {
        let text = CString::new(json).unwrap();
        let mut sys = ptr::null_mut();
        let status = unsafe { stepcert_system_from_json(text.as_ptr(), &mut sys) };
        assert_eq!(status, StepcertStatus::Ok);
        assert!(!sys.is_null());
        sys
    }

    #[test]
    fn version_is_a_c_string() {
        let v = unsafe { CStr::from_ptr(stepcert_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn null_arguments_are_reported_not_crashed() {
        let mut out = ptr::null_mut();
        let status = unsafe { stepcert_system_from_json(ptr::null(), &mut out) };
        assert_eq!(status, StepcertStatus::NullArgument);
        let msg = unsafe { CStr::from_ptr(stepcert_last_error()) };
        assert!(!msg.to_bytes().is_empty());

        let status = unsafe { stepcert_system_dims(ptr::null(), &mut 0, &mut 0) };
        assert_eq!(status, StepcertStatus::NullArgument);
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        let text = CString::new("{\"A\": [[1,").unwrap();
        let mut sys = ptr::null_mut();
        let status = unsafe { stepcert_system_from_json(text.as_ptr(), &mut sys) };
        assert_eq!(status, StepcertStatus::ParseError);
        assert!(sys.is_null());
    }

    #[test]
    fn full_round_trip_through_the_boundary() {
        let sys = system(TERNARY);

        let (mut n_p, mut n_u) = (0usize, 0usize);
        assert_eq!(
            unsafe { stepcert_system_dims(sys, &mut n_p, &mut n_u) },
            StepcertStatus::Ok
        );
        assert_eq!((n_p, n_u), (2, 2));

        let mut cert = ptr::null_mut();
        assert_eq!(
            unsafe { stepcert_certify(sys, 0.0, 0.0, &mut cert) },
            StepcertStatus::Ok
        );
        assert_eq!(unsafe { stepcert_verify(sys, cert, 0.0) }, StepcertStatus::Ok);

        let mut json = ptr::null_mut();
        assert_eq!(
            unsafe { stepcert_certificate_to_json(cert, &mut json) },
            StepcertStatus::Ok
        );
        let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
        let mut back = ptr::null_mut();
        let c_text = CString::new(text).unwrap();
        assert_eq!(
            unsafe { stepcert_certificate_from_json(c_text.as_ptr(), &mut back) },
            StepcertStatus::Ok
        );
        assert_eq!(unsafe { stepcert_verify(sys, back, 0.0) }, StepcertStatus::Ok);

        let x = [1.5, -0.5];
        let mut value = f64::NAN;
        assert_eq!(
            unsafe { stepcert_sup_v(sys, cert, x.as_ptr(), 2, &mut value) },
            StepcertStatus::Ok
        );
        assert!(value.is_finite() && value > 0.0);

        unsafe {
            stepcert_string_free(json);
            stepcert_certificate_free(back);
            stepcert_certificate_free(cert);
            stepcert_system_free(sys);
        }
    }

    #[test]
    fn simulate_fills_the_caller_buffer() {
        let sys = system(TERNARY);
        let x0 = [5.0, 5.0];
        let steps = 10usize;
        let mut buf = vec![f64::NAN; (steps + 1) * 2];
        let status = unsafe {
            stepcert_simulate(sys, x0.as_ptr(), 2, steps, 0, 0, buf.as_mut_ptr(), buf.len())
        };
        assert_eq!(status, StepcertStatus::Ok);
        assert_eq!(&buf[0..2], &x0);
        assert!(buf.iter().all(|v| v.is_finite()));

        // Too small a buffer is refused before anything is written.
        let status = unsafe {
            stepcert_simulate(sys, x0.as_ptr(), 2, steps, 0, 0, buf.as_mut_ptr(), 3)
        };
        assert_eq!(status, StepcertStatus::InvalidArgument);

        let status = unsafe {
            stepcert_simulate(sys, x0.as_ptr(), 2, steps, 9, 0, buf.as_mut_ptr(), buf.len())
        };
        assert_eq!(status, StepcertStatus::InvalidArgument);

        unsafe { stepcert_system_free(sys) };
    }

    #[test]
    fn not_certified_comes_back_as_a_determination() {
        let unstable = r#"{
            "A": [[2.0, 0.0], [0.0, 2.0]],
            "B": [[0.0], [0.0]],
            "K": [[1.0, 0.0]],
            "Delta_diag": [1.0],
            "d": [-1.0]
        }"#;
        let sys = system(unstable);
        let mut cert = ptr::null_mut();
        let status = unsafe { stepcert_certify(sys, 0.0, 0.0, &mut cert) };
        assert_eq!(status, StepcertStatus::NotCertified);
        assert!(cert.is_null());
        let msg = unsafe { CStr::from_ptr(stepcert_last_error()) };
        assert!(!msg.to_bytes().is_empty());
        unsafe { stepcert_system_free(sys) };
    }

    #[test]
    fn generated_header_declares_the_surface() {
        let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/stepcert.h");
        let text = std::fs::read_to_string(header).expect("header generated at build time");
        for needle in [
            "stepcert_system_from_json",
            "stepcert_certify",
            "stepcert_verify",
            "stepcert_simulate",
            "stepcert_sup_v",
            "stepcert_last_error",
            "StepcertStatus",
        ] {
            assert!(text.contains(needle), "header is missing {needle}");
        }
    }
}
