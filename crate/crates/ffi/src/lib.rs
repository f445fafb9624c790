//! C ABI over the mask, detector and pipeline parts of `ebkit`.
//!
//! Every fallible function returns an [`EbkStatus`]; on anything but
//! `EBK_STATUS_OK` a message is available from [`ebk_last_error`] on the same
//! thread. Handles are opaque and owned by the caller until passed to the
//! matching `_free` function. Strings returned by the library are freed with
//! [`ebk_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use ebkit::config::ExperimentConfig;
use ebkit::earlybird::{self, DetectorConfig, DetectorState};
use ebkit::pruning::{self, MaskEntry, PruneMask, PruneScope};
use ebkit::trainer;
use ebkit::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EbkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Mask = 4,
    Sequencing = 5,
    Config = 6,
    Io = 7,
    Format = 8,
    Diverged = 9,
    Panic = 10,
}

pub struct EbkMask {
    mask: PruneMask,
}

pub struct EbkDetector {
    state: DetectorState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> EbkStatus {
    match e {
        Error::Shape { .. } | Error::Index { .. } => EbkStatus::Shape,
        Error::Mask(_) => EbkStatus::Mask,
        Error::Sequencing { .. } => EbkStatus::Sequencing,
        Error::Config(_) => EbkStatus::Config,
        Error::Domain(_) | Error::Contract(_) => EbkStatus::InvalidArgument,
        Error::Io(_) => EbkStatus::Io,
        Error::Format { .. } | Error::Json(_) => EbkStatus::Format,
        Error::Diverged { .. } | Error::NonFinite { .. } => EbkStatus::Diverged,
    }
}

struct Fail(EbkStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(EbkStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status plus last-error message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EbkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            EbkStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            EbkStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Fail(EbkStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out<T>(p: *mut T, what: &str) -> Result<&'static mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

fn scope_of(global: bool) -> PruneScope {
    if global {
        PruneScope::Global
    } else {
        PruneScope::PerLayer
    }
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn ebk_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ebk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ebk_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Number of elements pruned from `n` at ratio `p`.
#[no_mangle]
pub extern "C" fn ebk_pruned_count(p: f64, n: usize) -> usize {
    pruning::pruned_count(p, n)
}

/// `(pruned - dense) / dense * 100`.
#[no_mangle]
pub extern "C" fn ebk_memory_percent_change(dense_bytes: f64, pruned_bytes: f64) -> f64 {
    trainer::percent_change(dense_bytes, pruned_bytes)
}

/// Writes keep-bits for one weight buffer: the `floor(p·len)` smallest
/// magnitudes get 0, ties broken by position.
///
/// # Safety
/// `values` and `keep_out` must each point to `len` elements.
#[no_mangle]
pub unsafe extern "C" fn ebk_magnitude_keep_f32(
    p: f64,
    values: *const f32,
    len: usize,
    keep_out: *mut u8,
) -> EbkStatus {
    guard(|| {
        if !(0.0..=1.0).contains(&p) {
            return Err(Fail(
                EbkStatus::InvalidArgument,
                format!("pruning ratio {p} outside [0, 1]"),
            ));
        }
        let values = slice_arg(values, len, "values")?;
        if len > 0 && keep_out.is_null() {
            return Err(null("keep_out"));
        }
        let keep = pruning::magnitude_keep(values, pruning::pruned_count(p, len));
        if len > 0 {
            slice::from_raw_parts_mut(keep_out, len).copy_from_slice(&keep);
        }
        Ok(())
    })
}

/// Creates an empty mask at ratio `p` recorded at `epoch`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ebk_mask_new(
    p: f64,
    epoch: usize,
    global: bool,
    out: *mut *mut EbkMask,
) -> EbkStatus {
    guard(|| {
        let out = self::out(out, "out")?;
        let mask = PruneMask::new(p, epoch, scope_of(global), Vec::new())?;
        *out = Box::into_raw(Box::new(EbkMask { mask }));
        Ok(())
    })
}

/// Appends a named tensor's keep-bits (0 or 1, row-major, `numel(shape)` bytes).
///
/// # Safety
/// `shape` must hold `rank` extents and `keep` the product of them.
#[no_mangle]
pub unsafe extern "C" fn ebk_mask_add_entry(
    mask: *mut EbkMask,
    name: *const c_char,
    shape: *const usize,
    rank: usize,
    keep: *const u8,
) -> EbkStatus {
    guard(|| {
        let m = self::out(mask, "mask")?;
        let name = str_arg(name, "name")?;
        let shape = slice_arg(shape, rank, "shape")?.to_vec();
        let n = shape.iter().product();
        let keep = slice_arg(keep, n, "keep")?.to_vec();
        let mut entries = m.mask.entries().to_vec();
        entries.push(MaskEntry {
            name: name.to_string(),
            shape,
            keep,
        });
        m.mask = PruneMask::new(m.mask.ratio(), m.mask.epoch(), m.mask.scope(), entries)?;
        Ok(())
    })
}

/// Loads a mask saved as `<stem>.ebkt` plus `<stem>.json`.
///
/// # Safety
/// `stem` must be a NUL-terminated path and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ebk_mask_load(stem: *const c_char, out: *mut *mut EbkMask) -> EbkStatus {
    guard(|| {
        let stem = str_arg(stem, "stem")?;
        let out = self::out(out, "out")?;
        let mask = pruning::load_mask(Path::new(stem))?;
        *out = Box::into_raw(Box::new(EbkMask { mask }));
        Ok(())
    })
}

/// Saves `mask` as `<stem>.ebkt` plus `<stem>.json`.
///
/// # Safety
/// `mask` must be a live handle and `stem` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn ebk_mask_save(mask: *const EbkMask, stem: *const c_char) -> EbkStatus {
    guard(|| {
        let m = mask.as_ref().ok_or_else(|| null("mask"))?;
        let stem = str_arg(stem, "stem")?;
        pruning::save_mask(&m.mask, Path::new(stem))?;
        Ok(())
    })
}

/// Total and pruned element counts.
///
/// # Safety
/// `mask` must be a live handle; the out pointers valid.
#[no_mangle]
pub unsafe extern "C" fn ebk_mask_counts(
    mask: *const EbkMask,
    total: *mut usize,
    pruned: *mut usize,
) -> EbkStatus {
    guard(|| {
        let m = mask.as_ref().ok_or_else(|| null("mask"))?;
        *self::out(total, "total")? = m.mask.total_elements();
        *self::out(pruned, "pruned")? = m.mask.entries().iter().map(MaskEntry::pruned).sum();
        Ok(())
    })
}

/// Normalized Hamming distance between two masks of equal layout and ratio.
///
/// # Safety
/// Both handles must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ebk_mask_distance(
    a: *const EbkMask,
    b: *const EbkMask,
    out: *mut f64,
) -> EbkStatus {
    guard(|| {
        let a = a.as_ref().ok_or_else(|| null("a"))?;
        let b = b.as_ref().ok_or_else(|| null("b"))?;
        let out = self::out(out, "out")?;
        *out = pruning::mask_distance(&a.mask, &b.mask)?.value();
        Ok(())
    })
}

/// # Safety
/// `mask` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ebk_mask_free(mask: *mut EbkMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Creates a streaming detector.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ebk_detector_new(
    epsilon: f64,
    window: usize,
    max_epochs: usize,
    out: *mut *mut EbkDetector,
) -> EbkStatus {
    guard(|| {
        let out = self::out(out, "out")?;
        let state = DetectorState::new(DetectorConfig::new(epsilon, window, max_epochs)?)?;
        *out = Box::into_raw(Box::new(EbkDetector { state }));
        Ok(())
    })
}

/// Feeds the mask for `epoch` (1, 2, ... in order). The mask is copied.
/// `found` is set once the detector has fired.
///
/// # Safety
/// Handles must be live; `found` may be null.
#[no_mangle]
pub unsafe extern "C" fn ebk_detector_observe(
    detector: *mut EbkDetector,
    epoch: usize,
    mask: *const EbkMask,
    found: *mut bool,
) -> EbkStatus {
    guard(|| {
        let d = self::out(detector, "detector")?;
        let m = mask.as_ref().ok_or_else(|| null("mask"))?;
        let fired = d
            .state
            .observe(epoch, m.mask.clone())?
            .ticket_epoch()
            .is_some();
        if let Some(f) = found.as_mut() {
            *f = fired;
        }
        Ok(())
    })
}

/// Ticket epoch, or 0 while still searching.
///
/// # Safety
/// `detector` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ebk_detector_ticket_epoch(detector: *const EbkDetector) -> usize {
    detector
        .as_ref()
        .and_then(|d| d.state.outcome().ticket_epoch())
        .unwrap_or(0)
}

/// Copies up to `cap` recorded distances (index `i` is epoch `i + 2`) and
/// stores the total count in `len`.
///
/// # Safety
/// `buf` must hold `cap` doubles (may be null when `cap` is 0).
#[no_mangle]
pub unsafe extern "C" fn ebk_detector_distances(
    detector: *const EbkDetector,
    buf: *mut f64,
    cap: usize,
    len: *mut usize,
) -> EbkStatus {
    guard(|| {
        let d = detector.as_ref().ok_or_else(|| null("detector"))?;
        let all = d.state.distances();
        *self::out(len, "len")? = all.len();
        let n = cap.min(all.len());
        if n > 0 {
            if buf.is_null() {
                return Err(null("buf"));
            }
            slice::from_raw_parts_mut(buf, n).copy_from_slice(&all[..n]);
        }
        Ok(())
    })
}

/// # Safety
/// `detector` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ebk_detector_free(detector: *mut EbkDetector) {
    if !detector.is_null() {
        drop(Box::from_raw(detector));
    }
}

/// Offline detection over a distance series (`distances[i]` is epoch `i + 2`).
/// Writes the ticket epoch, or 0 if the rule never fires.
///
/// # Safety
/// `distances` must hold `len` doubles; `ticket_epoch` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ebk_detect_offline(
    distances: *const f64,
    len: usize,
    epsilon: f64,
    window: usize,
    max_epochs: usize,
    ticket_epoch: *mut usize,
) -> EbkStatus {
    guard(|| {
        let cfg = DetectorConfig::new(epsilon, window, max_epochs)?;
        let series = slice_arg(distances, len, "distances")?;
        *self::out(ticket_epoch, "ticket_epoch")? =
            earlybird::detect_offline(series, &cfg).unwrap_or(0);
        Ok(())
    })
}

/// Runs search, retrain and baseline for a TOML experiment config and
/// returns the report as JSON. A diverged run still yields a report (its
/// `status` says so) together with `EBK_DIVERGED`.
///
/// # Safety
/// `config_toml` must be NUL-terminated; `report_json` valid. Free the
/// returned string with [`ebk_string_free`].
#[no_mangle]
pub unsafe extern "C" fn ebk_run_pipeline(
    config_toml: *const c_char,
    report_json: *mut *mut c_char,
) -> EbkStatus {
    guard(|| {
        let text = str_arg(config_toml, "config_toml")?;
        let out = self::out(report_json, "report_json")?;
        *out = ptr::null_mut();
        let cfg = ExperimentConfig::from_toml_str(text)?;
        let run = trainer::run_pipeline(&cfg)?;
        let json = serde_json::to_string_pretty(&run.report).map_err(Error::from)?;
        *out = CString::new(json).expect("JSON has no NUL").into_raw();
        match &run.report.failure {
            Some(f) => Err(Fail(
                EbkStatus::Diverged,
                format!(
                    "run diverged in {} at epoch {}: {}",
                    f.stage, f.epoch, f.detail
                ),
            )),
            None => Ok(()),
        }
    })
}
