//! C ABI over gaia-core.
//!
//! Every function returns a [`GaiaStatus`]; on failure the message is
//! available from [`gaia_last_error_message`] on the same thread. Handles are
//! opaque and owned by the caller, who releases them with the matching
//! `_free` function. No entry point unwinds across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use gaia_core::field::{normalize, read_fld, write_fld};
use gaia_core::gapfill::{gapfill, rmse_masked, ssim};
use gaia_core::metrics::{binary_metrics, iou, BBox};
use gaia_core::model::Model;
use gaia_core::patch::{sample_mask, MaskFamily, MaskSpec};
use gaia_core::preprocess::{downscale, local_gap_fill};
use gaia_core::train::{cosine_lr, lambda_schedule};
use gaia_core::{rng, Field, GaiaError, NormalizationSpec};
use ndarray::Array2;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GaiaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Degenerate = 4,
    NonFinite = 5,
    Config = 6,
    Format = 7,
    Io = 8,
    Panic = 9,
}

/// A 2-D brightness-temperature grid with its missing mask.
pub struct GaiaField(Field);

/// Pretrained encoder/decoder weights.
pub struct GaiaModel(Model);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaiaBBox {
    pub y0: f64,
    pub x0: f64,
    pub y1: f64,
    pub x1: f64,
}

/// Confusion counts and derived scores; undefined ratios are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaiaBinaryReport {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub accuracy: f64,
    pub far: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Null(&'static str),
    Arg(String),
    Core(GaiaError),
}

impl From<GaiaError> for Failure {
    fn from(e: GaiaError) -> Self {
        Failure::Core(e)
    }
}

type FfiResult<T> = Result<T, Failure>;

fn status_of(e: &GaiaError) -> GaiaStatus {
    match e {
        GaiaError::InvalidInput(_) => GaiaStatus::InvalidArgument,
        GaiaError::Shape(_) => GaiaStatus::Shape,
        GaiaError::Degenerate(_) => GaiaStatus::Degenerate,
        GaiaError::NonFinite(_) => GaiaStatus::NonFinite,
        GaiaError::Config(_) => GaiaStatus::Config,
        GaiaError::Format(_) | GaiaError::Json(_) => GaiaStatus::Format,
        GaiaError::Io(_) => GaiaStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> GaiaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            GaiaStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            GaiaStatus::NullPointer
        }
        Ok(Err(Failure::Arg(msg))) => {
            set_error(msg);
            GaiaStatus::InvalidArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            GaiaStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> FfiResult<&'a T> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> FfiResult<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path(p: *const c_char) -> FfiResult<PathBuf> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Arg("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn emit<T>(slot: &mut *mut T, value: T) {
    *slot = Box::into_raw(Box::new(value));
}

fn checked_len(h: usize, w: usize) -> FfiResult<usize> {
    h.checked_mul(w).filter(|&n| n > 0).ok_or_else(|| Failure::Arg(format!("invalid dimensions {h}x{w}")))
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn gaia_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gaia_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a field from `h*w` row-major values. `missing` may be NULL (fully
/// observed); otherwise non-zero bytes mark missing pixels.
///
/// # Safety
/// `values` must hold `h*w` doubles and `missing`, if not NULL, `h*w` bytes.
#[no_mangle]
pub unsafe extern "C" fn gaia_field_new(
    values: *const f64,
    missing: *const u8,
    height: usize,
    width: usize,
    timestamp: i64,
    out_field: *mut *mut GaiaField,
) -> GaiaStatus {
    guard(|| {
        let slot = out(out_field, "out_field")?;
        let n = checked_len(height, width)?;
        let v = slice(values, n, "values")?;
        let values = Array2::from_shape_vec((height, width), v.to_vec()).map_err(|e| Failure::Arg(e.to_string()))?;
        let field = if missing.is_null() {
            Field::observed(values)
        } else {
            let m = slice(missing, n, "missing")?;
            let mask = Array2::from_shape_fn((height, width), |(r, c)| m[r * width + c] != 0);
            Field::with_missing(values, mask)?
        };
        let field = field.with_meta(timestamp, "");
        field.validate()?;
        emit(slot, GaiaField(field));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out_field` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gaia_field_load(path_: *const c_char, out_field: *mut *mut GaiaField) -> GaiaStatus {
    guard(|| {
        let slot = out(out_field, "out_field")?;
        let f = read_fld(&path(path_)?)?;
        emit(slot, GaiaField(f));
        Ok(())
    })
}

/// # Safety
/// `field` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gaia_field_save(field: *const GaiaField, path_: *const c_char) -> GaiaStatus {
    guard(|| {
        let f = deref(field, "field")?;
        write_fld(&path(path_)?, &f.0)?;
        Ok(())
    })
}

/// Releases a field; NULL is ignored.
///
/// # Safety
/// `field` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gaia_field_free(field: *mut GaiaField) {
    if !field.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(field))));
    }
}

/// # Safety
/// `field` must be a live handle; `height`, `width` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn gaia_field_dims(field: *const GaiaField, height: *mut usize, width: *mut usize) -> GaiaStatus {
    guard(|| {
        let f = deref(field, "field")?;
        let (h, w) = f.0.dim();
        *out(height, "height")? = h;
        *out(width, "width")? = w;
        Ok(())
    })
}

/// # Safety
/// `field` must be a live handle; `timestamp` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gaia_field_timestamp(field: *const GaiaField, timestamp: *mut i64) -> GaiaStatus {
    guard(|| {
        *out(timestamp, "timestamp")? = deref(field, "field")?.0.timestamp;
        Ok(())
    })
}

/// Copies row-major values into `buffer`, which must hold exactly `len = h*w` doubles.
///
/// # Safety
/// `buffer` must be writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gaia_field_copy_values(field: *const GaiaField, buffer: *mut f64, len: usize) -> GaiaStatus {
    guard(|| {
        let f = deref(field, "field")?;
        if len != f.0.values.len() {
            return Err(Failure::Core(GaiaError::Shape(format!("buffer of {len} for {} values", f.0.values.len()))));
        }
        let dst = slice_mut(buffer, len, "buffer")?;
        for (d, s) in dst.iter_mut().zip(f.0.values.iter()) {
            *d = *s;
        }
        Ok(())
    })
}

/// Copies the missing mask (1 = missing) into `buffer` of exactly `len = h*w` bytes.
///
/// # Safety
/// `buffer` must be writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn gaia_field_copy_missing(field: *const GaiaField, buffer: *mut u8, len: usize) -> GaiaStatus {
    guard(|| {
        let f = deref(field, "field")?;
        if len != f.0.missing.len() {
            return Err(Failure::Core(GaiaError::Shape(format!("buffer of {len} for {} pixels", f.0.missing.len()))));
        }
        let dst = slice_mut(buffer, len, "buffer")?;
        for (d, s) in dst.iter_mut().zip(f.0.missing.iter()) {
            *d = u8::from(*s);
        }
        Ok(())
    })
}

/// Maps Kelvin to [0, 1] over `[t_min, t_max]`.
///
/// # Safety
/// `field` must be a live handle; `out_field` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gaia_normalize(
    field: *const GaiaField,
    t_min: f64,
    t_max: f64,
    out_field: *mut *mut GaiaField,
) -> GaiaStatus {
    guard(|| {
        let f = deref(field, "field")?;
        let slot = out(out_field, "out_field")?;
        let spec = NormalizationSpec::new(t_min, t_max)?;
        emit(slot, GaiaField(normalize(&f.0, &spec)?));
        Ok(())
    })
}

/// Fills missing pixels from observed neighbours within `radius`.
///
/// # Safety
/// `field` must be a live handle; `out_field` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gaia_local_gap_fill(
    field: *const GaiaField,
    radius: usize,
    out_field: *mut *mut GaiaField,
) -> GaiaStatus {
    guard(|| {
        let f = deref(field, "field")?;
        let slot = out(out_field, "out_field")?;
        emit(slot, GaiaField(local_gap_fill(&f.0, radius)?));
        Ok(())
    })
}

/// Block-mean downscaling by integer factors.
///
/// # Safety
/// `field` must be a live handle; `out_field` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gaia_downscale(
    field: *const GaiaField,
    out_height: usize,
    out_width: usize,
    out_field: *mut *mut GaiaField,
) -> GaiaStatus {
    guard(|| {
        let f = deref(field, "field")?;
        let slot = out(out_field, "out_field")?;
        emit(slot, GaiaField(downscale(&f.0, out_height, out_width)?));
        Ok(())
    })
}

/// Mean structural similarity over the full image.
///
/// # Safety
/// `a`, `b` must be live handles; `result` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gaia_ssim(a: *const GaiaField, b: *const GaiaField, result: *mut f64) -> GaiaStatus {
    guard(|| {
        let v = ssim(&deref(a, "a")?.0, &deref(b, "b")?.0)?;
        *out(result, "result")? = v;
        Ok(())
    })
}

/// RMSE over pixels where `region` is non-zero (`len = h*w` bytes).
///
/// # Safety
/// `region` must be readable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn gaia_rmse_masked(
    truth: *const GaiaField,
    pred: *const GaiaField,
    region: *const u8,
    len: usize,
    result: *mut f64,
) -> GaiaStatus {
    guard(|| {
        let t = deref(truth, "truth")?;
        let p = deref(pred, "pred")?;
        let (h, w) = t.0.dim();
        if len != h * w {
            return Err(Failure::Core(GaiaError::Shape(format!("region of {len} for a {h}x{w} field"))));
        }
        let r = slice(region, len, "region")?;
        let mask = Array2::from_shape_fn((h, w), |(i, j)| r[i * w + j] != 0);
        *out(result, "result")? = rmse_masked(&t.0, &p.0, &mask)?;
        Ok(())
    })
}

/// Pixelwise scores of `pred >= threshold` against `truth > 0.5`.
///
/// # Safety
/// Handles must be live; `report` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gaia_binary_metrics(
    pred: *const GaiaField,
    truth: *const GaiaField,
    threshold: f64,
    report: *mut GaiaBinaryReport,
) -> GaiaStatus {
    guard(|| {
        let r = binary_metrics(&deref(pred, "pred")?.0, &deref(truth, "truth")?.0, threshold)?;
        let nan = |v: Option<f64>| v.unwrap_or(f64::NAN);
        *out(report, "report")? = GaiaBinaryReport {
            tp: r.counts.tp,
            fp: r.counts.fp,
            tn: r.counts.tn,
            fn_: r.counts.fn_,
            accuracy: nan(r.accuracy),
            far: nan(r.far),
            precision: nan(r.precision),
            recall: nan(r.recall),
            f1: nan(r.f1),
        };
        Ok(())
    })
}

/// Intersection over union of two boxes.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn gaia_iou(a: *const GaiaBBox, b: *const GaiaBBox, result: *mut f64) -> GaiaStatus {
    guard(|| {
        let conv = |b: &GaiaBBox| BBox { y0: b.y0, x0: b.x0, y1: b.y1, x1: b.x1 };
        *out(result, "result")? = iou(&conv(deref(a, "a")?), &conv(deref(b, "b")?))?;
        Ok(())
    })
}

/// Loss-mixing weight for `epoch`.
///
/// # Safety
/// `result` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gaia_lambda_schedule(
    epoch: u32,
    warmup_epochs: u32,
    transition_epochs: u32,
    lambda_star: f64,
    result: *mut f64,
) -> GaiaStatus {
    guard(|| {
        *out(result, "result")? = lambda_schedule(epoch, warmup_epochs, transition_epochs, lambda_star)?;
        Ok(())
    })
}

/// Cosine learning rate with linear warm-up.
///
/// # Safety
/// `result` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gaia_cosine_lr(
    step: u64,
    total_steps: u64,
    base_lr: f64,
    warmup_steps: u64,
    result: *mut f64,
) -> GaiaStatus {
    guard(|| {
        if step > total_steps {
            return Err(Failure::Arg(format!("step {step} beyond total {total_steps}")));
        }
        *out(result, "result")? = cosine_lr(step, total_steps, base_lr, warmup_steps);
        Ok(())
    })
}

/// Hides exactly `round(ratio*n_patches)` patches chosen by `seed`; writes
/// 1 for hidden into `hidden` (`n_patches` bytes).
///
/// # Safety
/// `hidden` must be writable for `n_patches` bytes.
#[no_mangle]
pub unsafe extern "C" fn gaia_sample_mask(n_patches: usize, ratio: f64, seed: u64, hidden: *mut u8) -> GaiaStatus {
    guard(|| {
        let dst = slice_mut(hidden, n_patches, "hidden")?;
        let mut r = rng::stream(seed, &[]);
        let m = sample_mask(n_patches, ratio, &mut r, None)?;
        for (d, h) in dst.iter_mut().zip(&m.hidden) {
            *d = u8::from(*h);
        }
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out_model` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gaia_model_load(path_: *const c_char, out_model: *mut *mut GaiaModel) -> GaiaStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        emit(slot, GaiaModel(Model::load(&path(path_)?)?));
        Ok(())
    })
}

/// Releases a model; NULL is ignored.
///
/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gaia_model_free(model: *mut GaiaModel) {
    if !model.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(model))));
    }
}

/// Square patch edge in pixels.
///
/// # Safety
/// `model` must be a live handle; `patch` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gaia_model_patch_size(model: *const GaiaModel, patch: *mut usize) -> GaiaStatus {
    guard(|| {
        *out(patch, "patch")? = deref(model, "model")?.0.cfg.patch_h;
        Ok(())
    })
}

/// Reconstructs hidden and missing patches. `hidden` holds one byte per
/// patch in row-major patch order (`n_patches` entries) or is NULL for no
/// extra masking. The composite keeps every observed visible pixel.
///
/// # Safety
/// Handles must be live; `hidden`, if not NULL, readable for `n_patches` bytes.
#[no_mangle]
pub unsafe extern "C" fn gaia_model_gapfill(
    model: *const GaiaModel,
    field: *const GaiaField,
    hidden: *const u8,
    n_patches: usize,
    out_field: *mut *mut GaiaField,
) -> GaiaStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let f = deref(field, "field")?;
        let slot = out(out_field, "out_field")?;
        let p = m.0.cfg.patch_h;
        let (h, w) = f.0.dim();
        if h % p != 0 || w % p != 0 {
            return Err(Failure::Core(GaiaError::Shape(format!("{h}x{w} is not divisible by patch {p}"))));
        }
        let n = (h / p) * (w / p);
        let mask = if hidden.is_null() {
            MaskSpec::none(n)
        } else {
            if n_patches != n {
                return Err(Failure::Core(GaiaError::Shape(format!("{n_patches} mask entries for {n} patches"))));
            }
            let flags = slice(hidden, n, "hidden")?;
            MaskSpec::from_hidden(flags.iter().map(|&b| b != 0).collect(), MaskFamily::Random)
        };
        emit(slot, GaiaField(gapfill(&f.0, &mask, &m.0)?.composite));
        Ok(())
    })
}
