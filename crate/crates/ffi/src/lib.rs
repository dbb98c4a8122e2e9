//! C ABI over `eoslab`.
//!
//! Every fallible function returns an [`EoslabStatus`]; on failure the
//! message is available from [`eoslab_last_error`] on the same thread.
//! Objects are opaque handles released with their `_free` function. Strings
//! handed out by the library are released with [`eoslab_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use eoslab::cohort::{generate_cohort, load_cohort, save_cohort, Cohort, CohortSpec};
use eoslab::metrics::{fid, precision_recall, GaussianStats};
use eoslab::runner::{self, ModelKind, RunConfig, RunDir};
use eoslab::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EoslabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Corrupt = 5,
    IncompleteRun = 6,
    Numeric = 7,
    Internal = 8,
}

/// A generated or loaded cohort.
pub struct EoslabCohort(Cohort);

/// An opened run directory.
pub struct EoslabRun(RunDir);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(err: &Error) -> EoslabStatus {
    match err {
        Error::Config(_) => EoslabStatus::Config,
        Error::Io(_) | Error::Image(_) => EoslabStatus::Io,
        Error::Corrupt(_) | Error::Version { .. } => EoslabStatus::Corrupt,
        Error::IncompleteRun(_) => EoslabStatus::IncompleteRun,
        Error::NonFinite(_) | Error::NonFiniteLoss { .. } | Error::Kink(_) => EoslabStatus::Numeric,
        Error::InvalidArgument(_) | Error::Shape { .. } | Error::LabelsLocked(_) => {
            EoslabStatus::InvalidArgument
        }
        _ => EoslabStatus::Internal,
    }
}

struct Fail(EoslabStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(EoslabStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(EoslabStatus::InvalidArgument, msg.into())
}

/// Runs `f`, records any failure or panic, and clears the last error on success.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EoslabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            EoslabStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            EoslabStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn eoslab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the most recent call on this thread if it failed, otherwise
/// NULL. Valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn eoslab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn eoslab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates a cohort; parameters not listed keep their defaults.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn eoslab_cohort_generate(
    n_patients: usize,
    total_patches: usize,
    patch_size: usize,
    domain_shift: f64,
    seed: u64,
    out: *mut *mut EoslabCohort,
) -> EoslabStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let spec = CohortSpec {
            n_patients,
            total_patches,
            patch_size,
            domain_shift,
            seed,
            ..CohortSpec::default()
        };
        *out = Box::into_raw(Box::new(EoslabCohort(generate_cohort(&spec)?)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn eoslab_cohort_load(
    path: *const c_char,
    out: *mut *mut EoslabCohort,
) -> EoslabStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(EoslabCohort(load_cohort(path.as_ref())?)));
        Ok(())
    })
}

/// # Safety
/// `cohort` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn eoslab_cohort_save(
    cohort: *const EoslabCohort,
    path: *const c_char,
) -> EoslabStatus {
    guard(|| {
        let c = cohort.as_ref().ok_or_else(|| null("cohort"))?;
        save_cohort(&c.0, str_arg(path, "path")?.as_ref())?;
        Ok(())
    })
}

/// # Safety
/// `cohort` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn eoslab_cohort_patient_count(
    cohort: *const EoslabCohort,
    out: *mut usize,
) -> EoslabStatus {
    guard(|| {
        let c = cohort.as_ref().ok_or_else(|| null("cohort"))?;
        *out_arg(out, "out")? = c.0.patients.len();
        Ok(())
    })
}

/// Patches of one patient (by cohort index).
///
/// # Safety
/// `cohort` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn eoslab_cohort_patch_count(
    cohort: *const EoslabCohort,
    patient: usize,
    out: *mut usize,
) -> EoslabStatus {
    guard(|| {
        let c = cohort.as_ref().ok_or_else(|| null("cohort"))?;
        let p =
            c.0.patients
                .get(patient)
                .ok_or_else(|| invalid(format!("patient index {patient} out of range")))?;
        *out_arg(out, "out")? = p.patches.len();
        Ok(())
    })
}

/// Copies one patch: `image` receives `3·size·size` interleaved RGB values
/// in `[0, 1]`, `mask` receives `size·size` bytes. Either buffer may be NULL
/// to skip it. `size` receives the patch side length.
///
/// # Safety
/// Non-NULL buffers must hold `image_len` / `mask_len` elements.
#[no_mangle]
pub unsafe extern "C" fn eoslab_cohort_patch(
    cohort: *const EoslabCohort,
    patient: usize,
    patch: usize,
    image: *mut f64,
    image_len: usize,
    mask: *mut u8,
    mask_len: usize,
    size: *mut usize,
) -> EoslabStatus {
    guard(|| {
        let c = cohort.as_ref().ok_or_else(|| null("cohort"))?;
        let p =
            c.0.patients
                .get(patient)
                .and_then(|p| p.patches.get(patch))
                .ok_or_else(|| invalid(format!("patch ({patient}, {patch}) out of range")))?;
        if !size.is_null() {
            *size = p.size;
        }
        if !image.is_null() {
            if image_len != p.image.len() {
                return Err(invalid(format!(
                    "image buffer holds {image_len}, need {}",
                    p.image.len()
                )));
            }
            std::slice::from_raw_parts_mut(image, image_len).copy_from_slice(&p.image);
        }
        if !mask.is_null() {
            if mask_len != p.mask.len() {
                return Err(invalid(format!(
                    "mask buffer holds {mask_len}, need {}",
                    p.mask.len()
                )));
            }
            std::slice::from_raw_parts_mut(mask, mask_len).copy_from_slice(&p.mask);
        }
        Ok(())
    })
}

/// # Safety
/// `cohort` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn eoslab_cohort_free(cohort: *mut EoslabCohort) {
    if !cohort.is_null() {
        drop(Box::from_raw(cohort));
    }
}

/// Opens (or creates) a run directory. `config_path` may be NULL to reuse
/// the directory's own config echo, or the defaults for a new directory.
///
/// # Safety
/// `root` must be NUL-terminated; `config_path` NULL or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn eoslab_run_open(
    root: *const c_char,
    config_path: *const c_char,
    out: *mut *mut EoslabRun,
) -> EoslabStatus {
    guard(|| {
        let root = PathBuf::from(str_arg(root, "root")?);
        let config = if config_path.is_null() {
            None
        } else {
            Some(RunConfig::load(
                str_arg(config_path, "config_path")?.as_ref(),
            )?)
        };
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(EoslabRun(RunDir::open(&root, config)?)));
        Ok(())
    })
}

/// Runs one stage by its command-line name: `gen-data`, `uncertainty`,
/// `graph`, `partition`, `train-baseline`, `train-mdan`, `train-ddpm`,
/// `evaluate` or `run-all`.
///
/// # Safety
/// `run` must be a live handle; `stage` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn eoslab_run_stage(
    run: *const EoslabRun,
    stage: *const c_char,
) -> EoslabStatus {
    guard(|| {
        let dir = &run.as_ref().ok_or_else(|| null("run"))?.0;
        match str_arg(stage, "stage")? {
            "gen-data" => runner::gen_data(dir)?,
            "uncertainty" => drop(runner::uncertainty(dir)?),
            "graph" => runner::graph(dir)?,
            "partition" => drop(runner::partition(dir)?),
            "train-baseline" => drop(runner::train(dir, ModelKind::Baseline)?),
            "train-mdan" => drop(runner::train(dir, ModelKind::Mdan)?),
            "train-ddpm" => drop(runner::train(dir, ModelKind::Ddpm)?),
            "evaluate" => drop(runner::evaluate(dir)?),
            "run-all" => drop(runner::run_all(dir)?),
            other => return Err(invalid(format!("unknown stage `{other}`"))),
        }
        Ok(())
    })
}

/// The run's results report; free it with [`eoslab_string_free`].
///
/// # Safety
/// `run` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn eoslab_run_report(
    run: *const EoslabRun,
    out: *mut *mut c_char,
) -> EoslabStatus {
    guard(|| {
        let dir = &run.as_ref().ok_or_else(|| null("run"))?.0;
        let out = out_arg(out, "out")?;
        let text = runner::report(dir.root())?;
        *out = CString::new(text)
            .map_err(|_| invalid("report contains a NUL byte"))?
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `run` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn eoslab_run_free(run: *mut EoslabRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Fréchet distance between two Gaussians of dimension `d`; covariances
/// are row-major `d·d` arrays.
///
/// # Safety
/// `mu_*` must hold `d` values, `sigma_*` `d·d` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn eoslab_fid(
    mu_a: *const f64,
    sigma_a: *const f64,
    mu_b: *const f64,
    sigma_b: *const f64,
    d: usize,
    out: *mut f64,
) -> EoslabStatus {
    guard(|| {
        if d == 0 {
            return Err(invalid("dimension must be positive"));
        }
        let a = GaussianStats {
            mu: slice_arg(mu_a, d, "mu_a")?.to_vec(),
            sigma: slice_arg(sigma_a, d * d, "sigma_a")?.to_vec(),
        };
        let b = GaussianStats {
            mu: slice_arg(mu_b, d, "mu_b")?.to_vec(),
            sigma: slice_arg(sigma_b, d * d, "sigma_b")?.to_vec(),
        };
        *out_arg(out, "out")? = fid(&a, &b)?;
        Ok(())
    })
}

/// Pixel precision and recall of binary masks of length `n`.
///
/// # Safety
/// `pred` and `truth` must hold `n` bytes; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn eoslab_precision_recall(
    pred: *const u8,
    truth: *const u8,
    n: usize,
    precision: *mut f64,
    recall: *mut f64,
) -> EoslabStatus {
    guard(|| {
        let (p, r) = precision_recall(slice_arg(pred, n, "pred")?, slice_arg(truth, n, "truth")?)?;
        *out_arg(precision, "precision")? = p;
        *out_arg(recall, "recall")? = r;
        Ok(())
    })
}
