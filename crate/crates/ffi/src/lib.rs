//! C ABI over `flowforget`.
//!
//! Objects cross the boundary as opaque handles (`FfConfig`, `FfWorld`,
//! `FfStack`) created by `ff_*_new`-style calls and released with the
//! matching `ff_*_free`. Every fallible call returns an [`FfStatus`]; on
//! failure the message is kept per thread and read with
//! [`ff_last_error_message`]. Panics are caught at the boundary and reported
//! as [`FfStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use flowforget::config::RunConfig;
use flowforget::experiments::{run_once, source_latents};
use flowforget::metrics::{evaluate, MetricReport};
use flowforget::numkit::Rng;
use flowforget::toygen::{build_world, generate, sample_identity, AdapterStack, ToyWorld};
use flowforget::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Numeric = 4,
    Io = 5,
    Format = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Resolved run configuration.
pub struct FfConfig(RunConfig);

/// A built toy world.
pub struct FfWorld(ToyWorld);

/// A stack of stage adapters.
pub struct FfStack(AdapterStack);

/// One evaluation row; field order matches `metrics.csv`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FfMetrics {
    pub seed: u64,
    pub id_score: f64,
    pub id_avg: f64,
    pub mmd_retain: f64,
    pub retention_accuracy: f64,
    pub forget_rate: f64,
    pub leakage: f64,
}

impl From<&MetricReport> for FfMetrics {
    fn from(r: &MetricReport) -> Self {
        FfMetrics {
            seed: r.seed,
            id_score: r.id_score,
            id_avg: r.id_avg,
            mmd_retain: r.mmd_retain,
            retention_accuracy: r.retention_accuracy,
            forget_rate: r.forget_rate,
            leakage: r.leakage,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(FfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidArgument(_) | Error::DegenerateSource | Error::Degenerate(_) => FfStatus::InvalidArgument,
            Error::Config(_) => FfStatus::Config,
            Error::Format(_) => FfStatus::Format,
            Error::Io { .. } => FfStatus::Io,
            Error::Divergence { .. } | Error::TrainingDivergence { .. } | Error::MissingTrajectory => FfStatus::Numeric,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(FfStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, records any error or panic, and returns its status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FfStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            FfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(FfStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ff_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len - 1` bytes) and returns the full message
/// length without the terminator. Returns 0 when there is no error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ff_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            if !buf.is_null() && len > 0 {
                *buf = 0;
            }
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Default configuration.
///
/// # Safety
/// `out` must be a valid pointer to writable handle storage.
#[no_mangle]
pub unsafe extern "C" fn ff_config_new(out: *mut *mut FfConfig) -> FfStatus {
    guard(|| put(out, FfConfig(RunConfig::default())))
}

/// Defaults overlaid with a `key=value` file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` as in [`ff_config_new`].
#[no_mangle]
pub unsafe extern "C" fn ff_config_load(path: *const c_char, out: *mut *mut FfConfig) -> FfStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        put(out, FfConfig(RunConfig::resolve(Some(Path::new(path)), &[])?))
    })
}

/// Sets one key; the configuration is left unchanged on error.
///
/// # Safety
/// `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn ff_config_set(cfg: *mut FfConfig, key: *const c_char, value: *const c_char) -> FfStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("config"))?;
        let (key, value) = (str_arg(key, "key")?, str_arg(value, "value")?);
        let mut next = cfg.0.clone();
        next.set(key, value)?;
        next.validate()?;
        cfg.0 = next;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ff_config_free(cfg: *mut FfConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Builds the world described by `cfg`.
///
/// # Safety
/// `cfg` must be a live handle; `out` valid handle storage.
#[no_mangle]
pub unsafe extern "C" fn ff_world_new(cfg: *const FfConfig, out: *mut *mut FfWorld) -> FfStatus {
    guard(|| {
        let cfg = handle(cfg, "config")?;
        put(out, FfWorld(build_world(&cfg.0.world)?))
    })
}

/// Writes the latent dimension, observation dimension and identity count.
///
/// # Safety
/// `world` must be a live handle; each output pointer must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn ff_world_dims(
    world: *const FfWorld,
    latent_dim: *mut usize,
    obs_dim: *mut usize,
    identities: *mut usize,
) -> FfStatus {
    guard(|| {
        let w = &handle(world, "world")?.0;
        for (p, v) in [(latent_dim, w.latent_dim()), (obs_dim, w.obs_dim()), (identities, w.k())] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `world` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ff_world_free(world: *mut FfWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Draws one latent of identity `id` from a generator seeded with `seed`.
///
/// # Safety
/// `world` must be a live handle; `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ff_sample_identity(world: *const FfWorld, id: usize, seed: u64, out: *mut f64, len: usize) -> FfStatus {
    guard(|| {
        let w = &handle(world, "world")?.0;
        let out = slice_mut(out, len, "out")?;
        if len != w.latent_dim() {
            return Err(Failure(FfStatus::BufferTooSmall, format!("latent buffer has {len} slots, need {}", w.latent_dim())));
        }
        out.copy_from_slice(&sample_identity(w, &mut Rng::new(seed), id)?);
        Ok(())
    })
}

/// Freshly initialized adapters for `cfg`; they reproduce the frozen
/// generator exactly.
///
/// # Safety
/// `world` and `cfg` must be live handles; `out` valid handle storage.
#[no_mangle]
pub unsafe extern "C" fn ff_stack_new(world: *const FfWorld, cfg: *const FfConfig, seed: u64, out: *mut *mut FfStack) -> FfStatus {
    guard(|| {
        let (w, c) = (&handle(world, "world")?.0, &handle(cfg, "config")?.0);
        put(out, FfStack(c.unlearn.init_stack(w, &mut Rng::new(seed))?))
    })
}

/// Unlearns the configured identities with run seed `seed`. On success
/// `out` receives the trained stack and `metrics`, if not null, its
/// evaluation.
///
/// # Safety
/// `world` and `cfg` must be live handles; `out` valid handle storage;
/// `metrics` null or writable.
#[no_mangle]
pub unsafe extern "C" fn ff_unlearn(
    world: *const FfWorld,
    cfg: *const FfConfig,
    seed: u64,
    out: *mut *mut FfStack,
    metrics: *mut FfMetrics,
) -> FfStatus {
    guard(|| {
        let (w, c) = (&handle(world, "world")?.0, &handle(cfg, "config")?.0);
        if out.is_null() {
            return Err(null("output handle"));
        }
        let run = run_once(w, c, seed, "ffi")?;
        if let Some(m) = metrics.as_mut() {
            *m = FfMetrics::from(&run.report);
        }
        put(out, FfStack(run.stack))
    })
}

/// Evaluates `stack` against the configured forgotten identities.
///
/// # Safety
/// Handles must be live; `metrics` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ff_evaluate(
    world: *const FfWorld,
    stack: *const FfStack,
    cfg: *const FfConfig,
    seed: u64,
    metrics: *mut FfMetrics,
) -> FfStatus {
    guard(|| {
        let (w, s, c) = (&handle(world, "world")?.0, &handle(stack, "stack")?.0, &handle(cfg, "config")?.0);
        let m = metrics.as_mut().ok_or_else(|| null("metrics"))?;
        let sources = source_latents(w, &c.forget_ids, seed)?;
        *m = FfMetrics::from(&evaluate(w, s, &c.eval_spec(sources), "ffi", seed)?);
        Ok(())
    })
}

/// Generates one observation. A null `stack` means the frozen generator.
///
/// # Safety
/// `world` must be a live handle, `stack` null or live; `latent` must point
/// to `latent_len` doubles and `out` to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ff_generate(
    world: *const FfWorld,
    stack: *const FfStack,
    latent: *const f64,
    latent_len: usize,
    out: *mut f64,
    out_len: usize,
) -> FfStatus {
    guard(|| {
        let w = &handle(world, "world")?.0;
        let stack = stack.as_ref().map(|s| &s.0);
        let latent = slice(latent, latent_len, "latent")?;
        if latent_len != w.latent_dim() {
            return Err(Failure(FfStatus::InvalidArgument, format!("latent has {latent_len} values, need {}", w.latent_dim())));
        }
        let out = slice_mut(out, out_len, "out")?;
        if out_len < w.obs_dim() {
            return Err(Failure(FfStatus::BufferTooSmall, format!("output buffer has {out_len} slots, need {}", w.obs_dim())));
        }
        let x = generate(w, stack, latent)?;
        out[..x.len()].copy_from_slice(&x);
        Ok(())
    })
}

/// Number of trainable parameters in the stack.
///
/// # Safety
/// `stack` must be a live handle and `count` writable.
#[no_mangle]
pub unsafe extern "C" fn ff_stack_param_count(stack: *const FfStack, count: *mut usize) -> FfStatus {
    guard(|| {
        let s = &handle(stack, "stack")?.0;
        *count.as_mut().ok_or_else(|| null("count"))? = s.param_count();
        Ok(())
    })
}

/// Writes `adapter_<stage>.params` files into the directory `dir`.
///
/// # Safety
/// `stack` must be a live handle; `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn ff_stack_save(stack: *const FfStack, dir: *const c_char) -> FfStatus {
    guard(|| {
        let s = &handle(stack, "stack")?.0;
        Ok(s.save(Path::new(str_arg(dir, "dir")?))?)
    })
}

/// Loads checkpoints written by [`ff_stack_save`] or the CLI. Flow adapters
/// use the solver from `cfg`.
///
/// # Safety
/// Handles must be live; `dir` a NUL-terminated path; `out` valid handle
/// storage.
#[no_mangle]
pub unsafe extern "C" fn ff_stack_load(
    world: *const FfWorld,
    cfg: *const FfConfig,
    dir: *const c_char,
    out: *mut *mut FfStack,
) -> FfStatus {
    guard(|| {
        let (w, c) = (&handle(world, "world")?.0, &handle(cfg, "config")?.0);
        let dir = str_arg(dir, "dir")?;
        put(out, FfStack(AdapterStack::load(Path::new(dir), w, c.unlearn.solver)?))
    })
}

/// # Safety
/// `stack` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ff_stack_free(stack: *mut FfStack) {
    if !stack.is_null() {
        drop(Box::from_raw(stack));
    }
}
