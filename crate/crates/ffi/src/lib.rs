//! C ABI over the identification toolkit.
//!
//! Every fallible function returns an [`EsindyStatus`]. On failure a message
//! is stored per thread and can be read with [`esindy_last_error`]. Models
//! are passed around as opaque [`EsindyModel`] handles that the caller
//! releases with [`esindy_model_free`].
//!
//! Arrays are sample-major: entry `(t, channel)` of a record with `c`
//! channels lives at index `t * c + channel`. All values are in the original
//! (uncentered) units of the training data.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use esindy::cli::run_pipeline;
use esindy::config::RunConfig;
use esindy::model_file::{ModelFile, Provenance};
use esindy::simulate::{predict_multi_step, r_squared};
use esindy::{Error, SindyModel};
use nalgebra::DMatrix;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EsindyStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Schema = 5,
    Config = 6,
    Dimension = 7,
    InsufficientData = 8,
    Numerical = 9,
    UndefinedR2 = 10,
    NoModel = 11,
    UnknownPlant = 12,
    UnsupportedDegree = 13,
    Panic = 14,
}

impl From<&Error> for EsindyStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Schema(_) => EsindyStatus::Schema,
            Error::Parse { .. } | Error::Csv(_) | Error::Json(_) => EsindyStatus::Parse,
            Error::InsufficientData { .. } => EsindyStatus::InsufficientData,
            Error::Dimension(_) => EsindyStatus::Dimension,
            Error::UnsupportedDegree(_) => EsindyStatus::UnsupportedDegree,
            Error::Config(_) => EsindyStatus::Config,
            Error::Numerical(_) => EsindyStatus::Numerical,
            Error::UndefinedR2 => EsindyStatus::UndefinedR2,
            Error::NoModel { .. } => EsindyStatus::NoModel,
            Error::UnknownPlant { .. } => EsindyStatus::UnknownPlant,
            Error::Io { .. } => EsindyStatus::Io,
        }
    }
}

/// Opaque identified model.
pub struct EsindyModel {
    file: ModelFile,
    model: SindyModel,
}

/// Shape of a model.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EsindyDims {
    pub states: usize,
    pub controls: usize,
    pub exogenous: usize,
    /// Number of past samples beyond the newest one the model reads.
    pub state_delays: usize,
    pub features: usize,
    pub nonzero_terms: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

struct Failure(EsindyStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(EsindyStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(EsindyStatus::NullArgument, format!("{what} is null"))
}

/// Runs `body`, converting errors and panics into status codes.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> EsindyStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => EsindyStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            EsindyStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(EsindyStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn emit(out: *mut *mut EsindyModel, file: ModelFile) -> Result<(), Failure> {
    let model = file.to_model()?;
    *out = Box::into_raw(Box::new(EsindyModel { file, model }));
    Ok(())
}

/// Sample-major buffer to a `channels x samples` matrix with `offsets`
/// subtracted per channel.
fn centered(values: &[f64], channels: usize, samples: usize, offsets: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(channels, samples, |c, t| values[t * channels + c] - offsets[c])
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn esindy_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn esindy_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model file from `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn esindy_model_load(path: *const c_char, out: *mut *mut EsindyModel) -> EsindyStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        emit(out, ModelFile::load(Path::new(path))?)
    })
}

/// Parses a model from the JSON text of a model file.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn esindy_model_from_json(json: *const c_char, out: *mut *mut EsindyModel) -> EsindyStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = str_arg(json, "json")?;
        emit(out, ModelFile::from_json(text)?)
    })
}

/// Writes the model file to `path`.
///
/// # Safety
/// `model` must come from this library and `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn esindy_model_save(model: *const EsindyModel, path: *const c_char) -> EsindyStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let path = str_arg(path, "path")?;
        Ok(model.file.save(Path::new(path))?)
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn esindy_model_free(model: *mut EsindyModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn esindy_model_dims(model: *const EsindyModel, out: *mut EsindyDims) -> EsindyStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = EsindyDims {
            states: m.raw_state_dim(),
            controls: m.control_dim(),
            exogenous: m.exogenous_dim(),
            state_delays: m.sigma_x(),
            features: m.spec().len(),
            nonzero_terms: m.coefficients().support_count(),
        };
        Ok(())
    })
}

/// Closed-loop simulation.
///
/// `window` holds the `state_delays + 1` most recent measured states, oldest
/// first (`(state_delays + 1) * states` values). `controls` and `exogenous`
/// hold `horizon` samples each; step `k` uses sample `k` and predicts the
/// state one sample later into row `k` of `predicted` (`horizon * states`
/// values). `steps_done` receives the number of rows written; a rollout that
/// leaves the divergence bound stops early and the remaining rows are NaN.
///
/// # Safety
/// All pointers must reference buffers of the stated lengths. Input buffers
/// of length zero may be null.
#[no_mangle]
pub unsafe extern "C" fn esindy_model_simulate(
    model: *const EsindyModel,
    window: *const f64,
    controls: *const f64,
    exogenous: *const f64,
    horizon: usize,
    predicted: *mut f64,
    steps_done: *mut usize,
) -> EsindyStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let (n, l, q, w) = (m.raw_state_dim(), m.control_dim(), m.exogenous_dim(), m.sigma_x() + 1);
        let window = slice_arg(window, n * w, "window")?;
        let controls = slice_arg(controls, l * horizon, "controls")?;
        let exogenous = slice_arg(exogenous, q * horizon, "exogenous")?;
        if predicted.is_null() && horizon > 0 {
            return Err(null("predicted"));
        }
        let offsets = m.offsets();
        let report = predict_multi_step(
            m,
            &centered(window, n, w, &offsets.state_means),
            &centered(controls, l, horizon, &offsets.control_means),
            &centered(exogenous, q, horizon, &offsets.exogenous_means),
        )?;
        let traj = report.in_original_units(offsets);
        let out = if horizon > 0 {
            std::slice::from_raw_parts_mut(predicted, n * horizon)
        } else {
            &mut []
        };
        for t in 0..horizon {
            for c in 0..n {
                out[t * n + c] = if t < traj.ncols() { traj[(c, t)] } else { f64::NAN };
            }
        }
        if let Some(s) = steps_done.as_mut() {
            *s = traj.ncols();
        }
        Ok(())
    })
}

/// Coefficient of determination of `prediction` against `truth`.
///
/// # Safety
/// `truth` and `prediction` must hold `len` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn esindy_r_squared(
    truth: *const f64,
    prediction: *const f64,
    len: usize,
    out: *mut f64,
) -> EsindyStatus {
    guard(|| {
        let truth = slice_arg(truth, len, "truth")?;
        let prediction = slice_arg(prediction, len, "prediction")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = r_squared(truth, prediction)?;
        Ok(())
    })
}

/// Runs identification as configured by the TOML file at `config_path`
/// and returns the selected model. Nothing is written to disk.
///
/// # Safety
/// `config_path` must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn esindy_identify(config_path: *const c_char, out: *mut *mut EsindyModel) -> EsindyStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(config_path, "config_path")?;
        let cfg = RunConfig::load(Path::new(path))?;
        let outcome = run_pipeline(&cfg, 0)?;
        let provenance = Provenance::new(cfg.hash(), cfg.seed, cfg.method.as_str());
        let file = ModelFile::from_model(&outcome.model, outcome.training.names(), provenance)?;
        *out = Box::into_raw(Box::new(EsindyModel {
            file,
            model: outcome.model,
        }));
        Ok(())
    })
}
