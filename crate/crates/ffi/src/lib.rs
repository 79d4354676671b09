//! C interface to the xlearner core.
//!
//! Every function returns an `XlStatus`; on failure the message is kept per
//! thread and read back with `xl_last_error`. Handles are opaque and must be
//! released with their `_free` function. The matching declarations live in
//! `include/xlearner.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use xlearner::backbone::scale_channels;
use xlearner::checkpoint::{load_checkpoint, Checkpoint};
use xlearner::config::{validate_registry, ExperimentConfig};
use xlearner::pipeline::{parameter_summary, run_pipeline, Command, RunOptions};
use xlearner::schedule::lr_at;
use xlearner::Error;

pub type XlStatus = i32;

pub const XL_OK: XlStatus = 0;
pub const XL_ERR_VALIDATION: XlStatus = 1;
pub const XL_ERR_TRAINING: XlStatus = 2;
pub const XL_ERR_IO: XlStatus = 3;
pub const XL_ERR_NULL_ARGUMENT: XlStatus = 4;
pub const XL_ERR_BUFFER_TOO_SMALL: XlStatus = 5;
pub const XL_ERR_PANIC: XlStatus = 6;

pub const XL_CMD_PRETRAIN: i32 = 0;
pub const XL_CMD_SQUEEZE: i32 = 1;
pub const XL_CMD_EVALUATE: i32 = 2;
pub const XL_CMD_COMPARE: i32 = 3;
pub const XL_CMD_REPORT: i32 = 4;

/// Opaque experiment configuration.
pub struct XlConfig {
    inner: ExperimentConfig,
}

/// Opaque loaded checkpoint.
pub struct XlCheckpoint {
    inner: Checkpoint,
    stage: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let msg = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn fail(err: Error) -> XlStatus {
    set_error(err.to_string());
    err.exit_code()
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), XlStatus>) -> XlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            XL_OK
        }
        Ok(Err(code)) => code,
        Err(_) => {
            set_error("internal panic");
            XL_ERR_PANIC
        }
    }
}

fn null_arg(name: &str) -> XlStatus {
    set_error(format!("{name} is null"));
    XL_ERR_NULL_ARGUMENT
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, XlStatus> {
    if p.is_null() {
        return Err(null_arg(name));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{name} is not valid UTF-8"));
        XL_ERR_VALIDATION
    })?;
    Ok(PathBuf::from(s))
}

unsafe fn write_str(s: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> Result<(), XlStatus> {
    if !needed.is_null() {
        *needed = s.len() + 1;
    }
    if buf.is_null() || len < s.len() + 1 {
        set_error(format!("buffer needs {} bytes", s.len() + 1));
        return Err(XL_ERR_BUFFER_TOO_SMALL);
    }
    ptr::copy_nonoverlapping(s.as_ptr() as *const c_char, buf, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn xl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Reads and resolves a config without validating it.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn xl_config_load(path: *const c_char, out: *mut *mut XlConfig) -> XlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null_arg("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let text = std::fs::read_to_string(&path).map_err(|e| fail(Error::io(&path, e)))?;
        let cfg = ExperimentConfig::parse(&text, &path).map_err(fail)?;
        *out = Box::into_raw(Box::new(XlConfig { inner: cfg }));
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from `xl_config_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn xl_config_free(cfg: *mut XlConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Number of registry issues in `*issues`; returns `XL_ERR_VALIDATION` when
/// there are any, with the joined messages as the last error.
///
/// # Safety
/// Pointers must be valid; `issues` may be null.
#[no_mangle]
pub unsafe extern "C" fn xl_config_validate(cfg: *const XlConfig, issues: *mut usize) -> XlStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null_arg("cfg"))?;
        let report = validate_registry(&cfg.inner);
        if !issues.is_null() {
            *issues = report.issues.len();
        }
        if report.is_ok() {
            Ok(())
        } else {
            Err(fail(Error::Validation(report.issues)))
        }
    })
}

/// Writes the hex config hash (64 chars plus NUL). `needed` may be null.
///
/// # Safety
/// `buf` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn xl_config_hash(cfg: *const XlConfig, buf: *mut c_char, len: usize, needed: *mut usize) -> XlStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null_arg("cfg"))?;
        write_str(&cfg.inner.config_hash(), buf, len, needed)
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn xl_config_num_tasks(cfg: *const XlConfig, out: *mut usize) -> XlStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null_arg("cfg"))?;
        let out = out.as_mut().ok_or_else(|| null_arg("out"))?;
        *out = cfg.inner.num_tasks();
        Ok(())
    })
}

/// Learning rate of the expansion schedule at `step`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn xl_lr_at(cfg: *const XlConfig, step: usize, out: *mut f64) -> XlStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null_arg("cfg"))?;
        let out = out.as_mut().ok_or_else(|| null_arg("out"))?;
        *out = lr_at(step, &cfg.inner.expansion_schedule);
        Ok(())
    })
}

/// Parameter counts of the pre-training backbone (all sub-backbones and
/// links, or the shared backbone), one sub-backbone, and the student.
/// Any output pointer may be null.
///
/// # Safety
/// Non-null pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn xl_config_parameter_counts(
    cfg: *const XlConfig,
    backbone: *mut usize,
    sub_backbone: *mut usize,
    student: *mut usize,
) -> XlStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null_arg("cfg"))?;
        let summary = parameter_summary(&cfg.inner).map_err(fail)?;
        let find = |p: &str| summary.iter().find(|(l, _)| l.starts_with(p)).map_or(0, |(_, n)| *n);
        if let Some(b) = backbone.as_mut() {
            *b = find("pretrain backbone");
        }
        if let Some(s) = sub_backbone.as_mut() {
            *s = find("sub-backbone");
        }
        if let Some(s) = student.as_mut() {
            *s = find("student");
        }
        Ok(())
    })
}

/// Applies the channel-width rule to `n` widths, writing into `out`.
///
/// # Safety
/// `widths` and `out` must each hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn xl_scale_channels(widths: *const usize, n: usize, factor: f64, multiple: usize, out: *mut usize) -> XlStatus {
    guard(|| {
        if widths.is_null() {
            return Err(null_arg("widths"));
        }
        if out.is_null() {
            return Err(null_arg("out"));
        }
        let input = std::slice::from_raw_parts(widths, n);
        let scaled = scale_channels(input, factor, multiple).map_err(fail)?;
        ptr::copy_nonoverlapping(scaled.as_ptr(), out, n);
        Ok(())
    })
}

/// Loads and verifies a checkpoint file.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn xl_checkpoint_load(path: *const c_char, out: *mut *mut XlCheckpoint) -> XlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null_arg("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let ckpt = load_checkpoint(&path).map_err(fail)?;
        let stage = CString::new(ckpt.header.stage.name()).expect("stage names have no NUL");
        *out = Box::into_raw(Box::new(XlCheckpoint { inner: ckpt, stage }));
        Ok(())
    })
}

/// # Safety
/// `ckpt` must come from `xl_checkpoint_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn xl_checkpoint_free(ckpt: *mut XlCheckpoint) {
    if !ckpt.is_null() {
        drop(Box::from_raw(ckpt));
    }
}

/// Stage tag name; owned by the handle.
///
/// # Safety
/// `ckpt` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn xl_checkpoint_stage(ckpt: *const XlCheckpoint) -> *const c_char {
    match ckpt.as_ref() {
        Some(c) => c.stage.as_ptr(),
        None => ptr::null(),
    }
}

/// Completed steps and stored tensor count. Either output may be null.
///
/// # Safety
/// Non-null pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn xl_checkpoint_info(ckpt: *const XlCheckpoint, step: *mut usize, tensors: *mut usize) -> XlStatus {
    guard(|| {
        let c = ckpt.as_ref().ok_or_else(|| null_arg("ckpt"))?;
        if let Some(s) = step.as_mut() {
            *s = c.inner.header.step;
        }
        if let Some(t) = tensors.as_mut() {
            *t = c.inner.tensors.len();
        }
        Ok(())
    })
}

/// Whether the checkpoint was written under `cfg`: 1 if so, 0 otherwise.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn xl_checkpoint_matches(ckpt: *const XlCheckpoint, cfg: *const XlConfig, out: *mut i32) -> XlStatus {
    guard(|| {
        let c = ckpt.as_ref().ok_or_else(|| null_arg("ckpt"))?;
        let cfg = cfg.as_ref().ok_or_else(|| null_arg("cfg"))?;
        let out = out.as_mut().ok_or_else(|| null_arg("out"))?;
        *out = i32::from(c.inner.check_config(&cfg.inner.config_hash(), false).is_ok());
        Ok(())
    })
}

/// Runs one pipeline command (`XL_CMD_*`) on a config file.
/// `output_dir` may be null to use the config's directory.
///
/// # Safety
/// String arguments must be NUL-terminated or null where allowed.
#[no_mangle]
pub unsafe extern "C" fn xl_run_pipeline(config_path: *const c_char, command: i32, output_dir: *const c_char) -> XlStatus {
    guard(|| {
        let config = path_arg(config_path, "config_path")?;
        let command = match command {
            XL_CMD_PRETRAIN => Command::Pretrain,
            XL_CMD_SQUEEZE => Command::Squeeze,
            XL_CMD_EVALUATE => Command::Evaluate,
            XL_CMD_COMPARE => Command::Compare,
            XL_CMD_REPORT => Command::Report,
            other => {
                set_error(format!("unknown command {other}"));
                return Err(XL_ERR_VALIDATION);
            }
        };
        let output_dir = if output_dir.is_null() { None } else { Some(path_arg(output_dir, "output_dir")?) };
        let opts = RunOptions { output_dir, ..RunOptions::default() };
        run_pipeline(Path::new(&config), command, &opts).map_err(fail)
    })
}
