//! C ABI over the `metaug` library.
//!
//! Every function returns a [`MetaugStatus`]; on failure the message is
//! available from [`metaug_last_error_message`] on the same thread. Handles
//! are opaque and must be released with their `*_free` function. Strings
//! returned through out-parameters are owned by the caller and released with
//! [`metaug_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use metaug::cli::RunConfig;
use metaug::diff::{Graph, Mat};
use metaug::eval::{linear_probe, FeatureSource};
use metaug::model::{load_checkpoint, save_checkpoint, Checkpoint, Trainable};
use metaug::trainer::train;
use metaug::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaugStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    MissingArtifact = 4,
    Divergence = 5,
    Io = 6,
    Panic = 7,
}

/// Feature source for probing.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaugSource {
    H = 0,
    Z = 1,
    ZPlusAug = 2,
}

/// A run configuration.
pub struct MetaugConfig {
    inner: RunConfig,
}

/// Trained or loaded model parameters.
pub struct MetaugModel {
    ckpt: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MetaugStatus {
    match e {
        Error::Config { .. } | Error::Json(_) => MetaugStatus::Config,
        Error::MissingArtifact(_) => MetaugStatus::MissingArtifact,
        Error::Divergence { .. } => MetaugStatus::Divergence,
        Error::Io { .. } => MetaugStatus::Io,
        _ => MetaugStatus::InvalidArgument,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MetaugStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MetaugStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            MetaugStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            MetaugStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            MetaugStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

fn into_c_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Fail::Arg("string contains a nul byte".into()))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call on this thread.
#[no_mangle]
pub extern "C" fn metaug_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn metaug_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be NULL or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn metaug_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Default configuration.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn metaug_config_new(out: *mut *mut MetaugConfig) -> MetaugStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(MetaugConfig {
            inner: RunConfig::default(),
        }));
        Ok(())
    })
}

/// Configuration from a JSON document; missing keys take their defaults.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn metaug_config_from_json(json: *const c_char, out: *mut *mut MetaugConfig) -> MetaugStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        let out = out_arg(out, "out")?;
        let value = serde_json::from_str(text).map_err(Error::from)?;
        *out = Box::into_raw(Box::new(MetaugConfig {
            inner: RunConfig::from_value(value)?,
        }));
        Ok(())
    })
}

/// Set the dotted `key` to `value` (JSON, or a bare string).
///
/// # Safety
/// `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn metaug_config_set(cfg: *mut MetaugConfig, key: *const c_char, value: *const c_char) -> MetaugStatus {
    guard(|| {
        let cfg = out_arg(cfg, "cfg")?;
        let key = str_arg(key, "key")?;
        let raw = str_arg(value, "value")?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        cfg.inner = cfg.inner.with_override(key, value)?;
        Ok(())
    })
}

/// The fully resolved configuration as JSON.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn metaug_config_to_json(cfg: *const MetaugConfig, out: *mut *mut c_char) -> MetaugStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let out = out_arg(out, "out")?;
        let text = serde_json::to_string_pretty(&cfg.inner.to_value()?).map_err(Error::from)?;
        *out = into_c_string(text)?;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be NULL or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn metaug_config_free(cfg: *mut MetaugConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Train with `cfg`. When `run_dir` is not NULL the metric log, config and
/// checkpoints are written there.
///
/// # Safety
/// `cfg` must be a live handle, `run_dir` NULL or a NUL-terminated string,
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn metaug_train(cfg: *const MetaugConfig, run_dir: *const c_char, out: *mut *mut MetaugModel) -> MetaugStatus {
    guard(|| {
        let cfg = &ref_arg(cfg, "cfg")?.inner;
        let dir = if run_dir.is_null() {
            None
        } else {
            Some(PathBuf::from(str_arg(run_dir, "run_dir")?))
        };
        let out = out_arg(out, "out")?;
        let source = cfg.train.dataset.load()?;
        let result = train(&cfg.train, source.as_ref(), dir.as_deref())?;
        let steps = result.records.last().map_or(0, |r| r.step + 1);
        let ckpt = Checkpoint::new(result.spec, result.params, cfg.train.seed, steps, cfg.train.epochs)?;
        *out = Box::into_raw(Box::new(MetaugModel { ckpt }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn metaug_model_load(path: *const c_char, out: *mut *mut MetaugModel) -> MetaugStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let ckpt = load_checkpoint(path.as_ref())?;
        *out = Box::into_raw(Box::new(MetaugModel { ckpt }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn metaug_model_save(model: *const MetaugModel, path: *const c_char) -> MetaugStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let path = str_arg(path, "path")?;
        save_checkpoint(path.as_ref(), &model.ckpt)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn metaug_model_free(model: *mut MetaugModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn metaug_model_num_views(model: *const MetaugModel, out: *mut usize) -> MetaugStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(model, "model")?.ckpt.header.model.num_views();
        Ok(())
    })
}

#[derive(Clone, Copy)]
enum Dim {
    Input,
    Representation,
    Feature,
}

unsafe fn view_dim(model: *const MetaugModel, view: usize, out: *mut usize, which: Dim) -> MetaugStatus {
    guard(|| {
        let spec = &ref_arg(model, "model")?.ckpt.header.model;
        let out = out_arg(out, "out")?;
        if view >= spec.num_views() {
            return Err(Fail::Arg(format!("view {view} out of range for {} views", spec.num_views())));
        }
        *out = match which {
            Dim::Input => spec.encoders[view].in_dim(),
            Dim::Representation => spec.encoders[view].out_dim(),
            Dim::Feature => spec.heads[view].out_dim(),
        };
        Ok(())
    })
}

/// Input width of `view`.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn metaug_model_input_dim(model: *const MetaugModel, view: usize, out: *mut usize) -> MetaugStatus {
    view_dim(model, view, out, Dim::Input)
}

/// Width of the representation `h` of `view`.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn metaug_model_representation_dim(model: *const MetaugModel, view: usize, out: *mut usize) -> MetaugStatus {
    view_dim(model, view, out, Dim::Representation)
}

/// Width of the projected feature `z` of `view`.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn metaug_model_feature_dim(model: *const MetaugModel, view: usize, out: *mut usize) -> MetaugStatus {
    view_dim(model, view, out, Dim::Feature)
}

unsafe fn run_view(
    model: *const MetaugModel,
    view: usize,
    input: *const f64,
    rows: usize,
    output: *mut f64,
    output_len: usize,
    project: bool,
) -> MetaugStatus {
    guard(|| {
        let ckpt = &ref_arg(model, "model")?.ckpt;
        let spec = &ckpt.header.model;
        if view >= spec.num_views() {
            return Err(Fail::Arg(format!("view {view} out of range for {} views", spec.num_views())));
        }
        if input.is_null() {
            return Err(Fail::Null("input"));
        }
        if output.is_null() {
            return Err(Fail::Null("output"));
        }
        let cols = spec.encoders[view].in_dim();
        let x = Mat::from_shape_vec((rows, cols), std::slice::from_raw_parts(input, rows * cols).to_vec())
            .map_err(|e| Fail::Arg(e.to_string()))?;
        let g = Graph::new();
        let bound = ckpt.params.bind(&g, Trainable::NONE);
        let mut y = spec.encode(view, &bound.theta[view], g.constant(x))?;
        if project {
            y = spec.project(view, &bound.vartheta[view], y)?;
        }
        let y = y.value();
        if output_len < y.len() {
            return Err(Fail::Arg(format!("output holds {output_len} values, {} needed", y.len())));
        }
        let dst = std::slice::from_raw_parts_mut(output, y.len());
        for (d, s) in dst.iter_mut().zip(y.iter()) {
            *d = *s;
        }
        Ok(())
    })
}

/// Representations `h` of `rows` row-major inputs of `view`.
///
/// # Safety
/// `input` must hold `rows * input_dim` values and `output` `output_len` values.
#[no_mangle]
pub unsafe extern "C" fn metaug_model_encode(
    model: *const MetaugModel,
    view: usize,
    input: *const f64,
    rows: usize,
    output: *mut f64,
    output_len: usize,
) -> MetaugStatus {
    run_view(model, view, input, rows, output, output_len, false)
}

/// Unit projected features `z` of `rows` row-major inputs of `view`.
///
/// # Safety
/// `input` must hold `rows * input_dim` values and `output` `output_len` values.
#[no_mangle]
pub unsafe extern "C" fn metaug_model_project(
    model: *const MetaugModel,
    view: usize,
    input: *const f64,
    rows: usize,
    output: *mut f64,
    output_len: usize,
) -> MetaugStatus {
    run_view(model, view, input, rows, output, output_len, true)
}

/// Linear-probe test accuracy of `model` on the dataset named by `cfg`.
///
/// # Safety
/// `model` and `cfg` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn metaug_model_probe(
    model: *const MetaugModel,
    cfg: *const MetaugConfig,
    source: MetaugSource,
    out: *mut f64,
) -> MetaugStatus {
    guard(|| {
        let ckpt = &ref_arg(model, "model")?.ckpt;
        let cfg = &ref_arg(cfg, "cfg")?.inner;
        let out = out_arg(out, "out")?;
        let feature = match source {
            MetaugSource::H => FeatureSource::RepresentationH,
            MetaugSource::Z => FeatureSource::ProjectedZ,
            MetaugSource::ZPlusAug => FeatureSource::ProjectedPlusAugmented,
        };
        let data = cfg.train.dataset.load()?;
        *out = linear_probe(&ckpt.header.model, &ckpt.params, data.as_ref(), feature, &cfg.eval.probe)?.accuracy;
        Ok(())
    })
}
