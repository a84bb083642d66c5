//! C ABI over `ngso-beamform`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! and released by the matching `*_free`. Every fallible function returns an
//! `NGSO_*` status code; on failure `ngso_last_error` describes the most
//! recent error on the calling thread. Complex vectors are exchanged as
//! interleaved `(re, im)` pairs of `double`.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ngso_beamform::beamform::{BeamWeights, Method};
use ngso_beamform::model::MambaBf;
use ngso_beamform::nalgebra::{DMatrix, DVector};
use ngso_beamform::scenario::ScenarioConfig;
use ngso_beamform::signals::SnapshotMatrix;
use ngso_beamform::training::{baseline_weights, build_sample, CsiMode, DatasetSample};
use ngso_beamform::{Complex64, Error};

pub const NGSO_OK: c_int = 0;
/// Invalid configuration or argument.
pub const NGSO_ERR_CONFIG: c_int = 1;
/// Singular covariance, degenerate geometry, non-finite values.
pub const NGSO_ERR_NUMERICAL: c_int = 2;
/// File or format error.
pub const NGSO_ERR_IO: c_int = 3;
pub const NGSO_ERR_NULL: c_int = 4;
/// Output buffer shorter than required.
pub const NGSO_ERR_BUFFER: c_int = 5;
pub const NGSO_ERR_PANIC: c_int = 6;

pub const NGSO_METHOD_INITIAL: c_int = 0;
pub const NGSO_METHOD_MRC: c_int = 1;
pub const NGSO_METHOD_ZF: c_int = 2;
pub const NGSO_METHOD_SMI: c_int = 3;
pub const NGSO_METHOD_MVDR: c_int = 4;

/// One sampled scenario with its snapshots and channel estimates.
pub struct NgsoScenario {
    sample: DatasetSample,
}

/// A trained network loaded from a checkpoint.
pub struct NgsoModel {
    model: MambaBf,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Core(Error),
    Code(c_int, String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> c_int {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NGSO_OK,
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            match e.exit_code() {
                1 => NGSO_ERR_CONFIG,
                2 => NGSO_ERR_NUMERICAL,
                _ => NGSO_ERR_IO,
            }
        }
        Ok(Err(Failure::Code(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            NGSO_ERR_PANIC
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::Code(NGSO_ERR_NULL, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Code(NGSO_ERR_CONFIG, format!("{what} is not UTF-8")))
}

unsafe fn write_weights(w: &BeamWeights, out: *mut f64, len: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    let need = 2 * w.weights.len();
    if len < need {
        return Err(Failure::Code(NGSO_ERR_BUFFER, format!("buffer holds {len} doubles, need {need}")));
    }
    let dst = std::slice::from_raw_parts_mut(out, need);
    for (i, z) in w.weights.iter().enumerate() {
        dst[2 * i] = z.re;
        dst[2 * i + 1] = z.im;
    }
    Ok(())
}

/// Message for the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ngso_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ngso_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Samples a scenario and `snapshots` snapshots from `seed`.
///
/// `config_toml` may be NULL for the built-in defaults. A non-zero
/// `imperfect_csi` draws a perturbed desired channel with the configured
/// error variance for the baselines.
///
/// # Safety
/// `config_toml` must be NULL or a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ngso_scenario_new(
    config_toml: *const c_char,
    seed: u64,
    snapshots: usize,
    imperfect_csi: c_int,
    out: *mut *mut NgsoScenario,
) -> c_int {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config = if config_toml.is_null() {
            ScenarioConfig::default()
        } else {
            ScenarioConfig::from_toml_str(str_arg(config_toml, "config")?)?
        };
        let csi = if imperfect_csi != 0 {
            CsiMode::Imperfect { error_variance: config.csi.error_variance }
        } else {
            CsiMode::Perfect
        };
        let sample = build_sample(&config, 0, seed, snapshots, csi)?;
        *out = Box::into_raw(Box::new(NgsoScenario { sample }));
        Ok(())
    })
}

/// # Safety
/// `scenario` must be NULL or a handle from `ngso_scenario_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ngso_scenario_free(scenario: *mut NgsoScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Number of array elements `M`, or 0 for NULL.
///
/// # Safety
/// `scenario` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ngso_scenario_num_elements(scenario: *const NgsoScenario) -> usize {
    scenario.as_ref().map_or(0, |s| s.sample.true_h_d.len())
}

/// Number of snapshots `L`, or 0 for NULL.
///
/// # Safety
/// `scenario` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ngso_scenario_num_snapshots(scenario: *const NgsoScenario) -> usize {
    scenario.as_ref().map_or(0, |s| s.sample.snapshots.num_snapshots())
}

/// Noise power in watts, or NaN for NULL.
///
/// # Safety
/// `scenario` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ngso_scenario_noise_power(scenario: *const NgsoScenario) -> f64 {
    scenario.as_ref().map_or(f64::NAN, |s| s.sample.noise_w)
}

/// Copies the `M × L` snapshot matrix, element-major, into `out`
/// (`2·M·L` doubles).
///
/// # Safety
/// `scenario` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ngso_scenario_snapshots(scenario: *const NgsoScenario, out: *mut f64, len: usize) -> c_int {
    guard(|| {
        let s = scenario.as_ref().ok_or_else(|| null("scenario"))?;
        if out.is_null() {
            return Err(null("output buffer"));
        }
        let y = &s.sample.snapshots.data;
        let need = 2 * y.len();
        if len < need {
            return Err(Failure::Code(NGSO_ERR_BUFFER, format!("buffer holds {len} doubles, need {need}")));
        }
        let dst = std::slice::from_raw_parts_mut(out, need);
        let (m, l) = y.shape();
        for r in 0..m {
            for c in 0..l {
                let z = y[(r, c)];
                dst[2 * (r * l + c)] = z.re;
                dst[2 * (r * l + c) + 1] = z.im;
            }
        }
        Ok(())
    })
}

/// Writes the weights of a closed-form beamformer (`NGSO_METHOD_*`) into
/// `out` (`2·M` doubles).
///
/// # Safety
/// `scenario` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ngso_scenario_weights(scenario: *const NgsoScenario, method: c_int, out: *mut f64, len: usize) -> c_int {
    guard(|| {
        let s = scenario.as_ref().ok_or_else(|| null("scenario"))?;
        let m = match method {
            NGSO_METHOD_INITIAL => Method::Initial,
            NGSO_METHOD_MRC => Method::Mrc,
            NGSO_METHOD_ZF => Method::Zf,
            NGSO_METHOD_SMI => Method::Smi,
            NGSO_METHOD_MVDR => Method::Mvdr,
            other => return Err(Failure::Code(NGSO_ERR_CONFIG, format!("unknown method {other}"))),
        };
        write_weights(&baseline_weights(&s.sample, m)?, out, len)
    })
}

/// Output SINR (linear) of interleaved weights `w` (`2·M` doubles) against
/// the true channels.
///
/// # Safety
/// `scenario` must be a live handle; `w` must hold `len` doubles; `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn ngso_scenario_sinr(scenario: *const NgsoScenario, w: *const f64, len: usize, out: *mut f64) -> c_int {
    guard(|| {
        let s = scenario.as_ref().ok_or_else(|| null("scenario"))?;
        if w.is_null() || out.is_null() {
            return Err(null("weights or output"));
        }
        let m = s.sample.true_h_d.len();
        if len != 2 * m {
            return Err(Failure::Code(NGSO_ERR_BUFFER, format!("got {len} doubles, expected {}", 2 * m)));
        }
        let src = std::slice::from_raw_parts(w, len);
        let wv = DVector::from_fn(m, |i, _| Complex64::new(src[2 * i], src[2 * i + 1]));
        *out = s.sample.sinr(&wv);
        Ok(())
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ngso_model_load(path: *const c_char, out: *mut *mut NgsoModel) -> c_int {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = MambaBf::load(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(NgsoModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from `ngso_model_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ngso_model_free(model: *mut NgsoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Array size `M` the model was trained for, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ngso_model_num_elements(model: *const NgsoModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.hyper.m)
}

/// Snapshot count `L` the model expects, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ngso_model_num_snapshots(model: *const NgsoModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.hyper.l)
}

/// Unit-norm network weights for an `m × l` snapshot matrix given
/// element-major and interleaved (`2·m·l` doubles). Writes `2·m` doubles.
///
/// # Safety
/// `model` must be a live handle; `snapshots` must hold `2·m·l` doubles and
/// `out` `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ngso_model_infer(
    model: *const NgsoModel,
    snapshots: *const f64,
    m: usize,
    l: usize,
    out: *mut f64,
    len: usize,
) -> c_int {
    guard(|| {
        let net = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if snapshots.is_null() {
            return Err(null("snapshots"));
        }
        if m != net.hyper.m || l != net.hyper.l {
            return Err(Failure::Code(
                NGSO_ERR_CONFIG,
                format!("snapshots are {m}×{l}, model expects {}×{}", net.hyper.m, net.hyper.l),
            ));
        }
        let src = std::slice::from_raw_parts(snapshots, 2 * m * l);
        let data = DMatrix::from_fn(m, l, |r, c| Complex64::new(src[2 * (r * l + c)], src[2 * (r * l + c) + 1]));
        let y = SnapshotMatrix::new(data, 1.0)?;
        write_weights(&net.infer(&y)?, out, len)
    })
}
