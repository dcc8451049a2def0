//! C interface: load a trained checkpoint and a feature file, then query
//! proposals and captions.
//!
//! Every fallible function returns a [`DcStatus`]. On failure a message is
//! kept per thread and can be read with [`dc_last_error`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use densecap::data::checkpoint::Checkpoint;
use densecap::data::config::Config;
use densecap::data::features::load_features;
use densecap::data::VideoFeatures;
use densecap::inference::select_for_video;
use densecap::metrics::{tiou, Segment};
use densecap::model::Model;
use densecap::vocab::Vocabulary;
use densecap::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Validation = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

/// A trained model with its vocabulary and inference settings.
pub struct DcModel {
    model: Model,
    vocab: Vocabulary,
    config: Config,
}

/// Features and annotations of one video.
pub struct DcVideo {
    video: VideoFeatures,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DcProposal {
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> DcStatus {
    match e {
        Error::Io(_) => DcStatus::Io,
        Error::Parse { .. } => DcStatus::Parse,
        Error::Validation(_) | Error::Shape { .. } => DcStatus::Validation,
        Error::Numeric(_) => DcStatus::Numeric,
        Error::Config(_) | Error::Contract(_) | Error::Generation(_) => DcStatus::InvalidArgument,
    }
}

/// Runs `f`, recording its error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (DcStatus, String)>) -> DcStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DcStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DcStatus::Internal
        }
    }
}

fn lib_err(e: Error) -> (DcStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DcStatus, String) {
    (DcStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (DcStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (DcStatus::InvalidArgument, "path is not valid UTF-8".to_string()))?;
    Ok(PathBuf::from(s))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn dc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Temporal IoU of `[a_start, a_end]` and `[b_start, b_end]`.
#[no_mangle]
pub extern "C" fn dc_tiou(a_start: f64, a_end: f64, b_start: f64, b_end: f64) -> f64 {
    tiou(Segment::new(a_start, a_end), Segment::new(b_start, b_end))
}

/// Loads a checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dc_model_load(path: *const c_char, out: *mut *mut DcModel) -> DcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = Checkpoint::load(&path_arg(path)?).map_err(lib_err)?;
        let model = ckpt.model().map_err(lib_err)?;
        let handle = DcModel {
            model,
            vocab: ckpt.vocab,
            config: ckpt.config,
        };
        *out = Box::into_raw(Box::new(handle));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`dc_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dc_model_free(model: *mut DcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Loads a feature file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dc_video_load(path: *const c_char, out: *mut *mut DcVideo) -> DcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let video = load_features(&path_arg(path)?).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(DcVideo { video }));
        Ok(())
    })
}

/// Releases a video. Null is ignored.
///
/// # Safety
/// `video` must come from [`dc_video_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dc_video_free(video: *mut DcVideo) {
    if !video.is_null() {
        drop(Box::from_raw(video));
    }
}

/// Number of frames of a video, 0 for null.
///
/// # Safety
/// `video` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dc_video_frames(video: *const DcVideo) -> usize {
    video.as_ref().map_or(0, |v| v.video.len())
}

/// Writes the selected proposals of `video`, best first, into
/// `out[0..capacity]` and their total count into `*count`. Returns
/// `BUFFER_TOO_SMALL` when `capacity < *count`; the first `capacity` are
/// still written.
///
/// # Safety
/// Handles must be live, `count` valid, and `out` valid for `capacity`
/// elements (it may be null when `capacity` is 0).
#[no_mangle]
pub unsafe extern "C" fn dc_propose(
    model: *const DcModel,
    video: *const DcVideo,
    out: *mut DcProposal,
    capacity: usize,
    count: *mut usize,
) -> DcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let v = video.as_ref().ok_or_else(|| null("video"))?;
        if count.is_null() || (out.is_null() && capacity > 0) {
            return Err(null("output buffer"));
        }
        let kept = select_for_video(&m.model, &v.video.frames, &m.config.inference).map_err(lib_err)?;
        *count = kept.len();
        for (i, p) in kept.iter().take(capacity).enumerate() {
            *out.add(i) = DcProposal {
                start: p.start,
                end: p.end,
                score: p.score,
            };
        }
        if capacity < kept.len() {
            return Err((
                DcStatus::BufferTooSmall,
                format!("{} proposals do not fit in {capacity}", kept.len()),
            ));
        }
        Ok(())
    })
}

/// Greedy caption of the segment `[start, end]` as space-separated words.
/// `*needed` receives the byte length including the terminating NUL; the
/// text is written only when it fits in `capacity` bytes.
///
/// # Safety
/// Handles must be live, `needed` valid, and `buf` valid for `capacity`
/// bytes (it may be null when `capacity` is 0).
#[no_mangle]
pub unsafe extern "C" fn dc_caption_segment(
    model: *const DcModel,
    video: *const DcVideo,
    start: f64,
    end: f64,
    buf: *mut c_char,
    capacity: usize,
    needed: *mut usize,
) -> DcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let v = video.as_ref().ok_or_else(|| null("video"))?;
        if needed.is_null() || (buf.is_null() && capacity > 0) {
            return Err(null("output buffer"));
        }
        if !(start.is_finite() && end.is_finite() && start < end) {
            return Err((
                DcStatus::InvalidArgument,
                format!("invalid segment [{start}, {end}]"),
            ));
        }
        let seq = m
            .model
            .caption_segment(&v.video.frames, start, end)
            .map_err(lib_err)?;
        let text = CString::new(m.vocab.decode(&seq).join(" "))
            .map_err(|_| (DcStatus::Internal, "caption contains NUL".to_string()))?;
        let bytes = text.as_bytes_with_nul();
        *needed = bytes.len();
        if bytes.len() > capacity {
            return Err((
                DcStatus::BufferTooSmall,
                format!("caption needs {} bytes, buffer has {capacity}", bytes.len()),
            ));
        }
        std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, bytes.len());
        Ok(())
    })
}
