use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use densecap::inference::select_for_video;
use densecap_ffi::*;

mod common;
use common::{fixture, Fixture};

fn last_error() -> String {
    let p = dc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

struct Handles(*mut DcModel, *mut DcVideo);

impl Drop for Handles {
    fn drop(&mut self) {
        unsafe {
            dc_model_free(self.0);
            dc_video_free(self.1);
        }
    }
}

fn open(f: &Fixture) -> Handles {
    let mut m = ptr::null_mut();
    let mut v = ptr::null_mut();
    unsafe {
        assert_eq!(dc_model_load(f.ckpt.as_ptr(), &mut m), DcStatus::Ok);
        assert_eq!(dc_video_load(f.video.as_ptr(), &mut v), DcStatus::Ok);
    }
    assert!(dc_last_error().is_null());
    Handles(m, v)
}

#[test]
fn proposals_match_the_library() {
    let f = fixture();
    let h = open(&f);
    assert_eq!(unsafe { dc_video_frames(h.1) }, 16);

    let mut count = 0usize;
    let status = unsafe { dc_propose(h.0, h.1, ptr::null_mut(), 0, &mut count) };
    assert_eq!(status, DcStatus::BufferTooSmall);
    assert!(count > 0);
    assert!(last_error().contains("do not fit"));

    let mut buf = vec![DcProposal::default(); count];
    let status = unsafe { dc_propose(h.0, h.1, buf.as_mut_ptr(), buf.len(), &mut count) };
    assert_eq!(status, DcStatus::Ok);

    let model = f.data.model().unwrap();
    let video = densecap::data::features::load_features(Path::new(f.video.to_str().unwrap())).unwrap();
    let want = select_for_video(&model, &video.frames, &f.data.config.inference).unwrap();
    assert_eq!(want.len(), count);
    for (got, w) in buf.iter().zip(&want) {
        assert_eq!((got.start, got.end, got.score), (w.start, w.end, w.score));
    }
}

#[test]
fn caption_reports_needed_size_then_fills() {
    let f = fixture();
    let h = open(&f);
    let mut needed = 0usize;
    let status = unsafe { dc_caption_segment(h.0, h.1, 2.0, 9.0, ptr::null_mut(), 0, &mut needed) };
    assert_eq!(status, DcStatus::BufferTooSmall);
    assert!(needed >= 1);

    let mut buf = vec![1 as c_char; needed];
    let status = unsafe { dc_caption_segment(h.0, h.1, 2.0, 9.0, buf.as_mut_ptr(), buf.len(), &mut needed) };
    assert_eq!(status, DcStatus::Ok);
    let text = unsafe { CStr::from_ptr(buf.as_ptr()) }
        .to_str()
        .unwrap()
        .to_string();

    let model = f.data.model().unwrap();
    let video = densecap::data::features::load_features(Path::new(f.video.to_str().unwrap())).unwrap();
    let seq = model.caption_segment(&video.frames, 2.0, 9.0).unwrap();
    assert_eq!(text, f.data.vocab.decode(&seq).join(" "));
    assert_eq!(needed, text.len() + 1);

    let status = unsafe { dc_caption_segment(h.0, h.1, 9.0, 2.0, buf.as_mut_ptr(), buf.len(), &mut needed) };
    assert_eq!(status, DcStatus::InvalidArgument);
}

#[test]
fn failures_map_to_status_codes_with_messages() {
    let f = fixture();
    let mut m = ptr::null_mut();
    let mut v = ptr::null_mut();
    let missing = CString::new("/nonexistent/m.ckpt").unwrap();
    unsafe {
        assert_eq!(dc_model_load(missing.as_ptr(), &mut m), DcStatus::Io);
        assert!(m.is_null());
        assert!(!last_error().is_empty());

        assert_eq!(dc_model_load(f.video.as_ptr(), &mut m), DcStatus::Parse);
        assert!(last_error().contains("byte"));
        assert_eq!(dc_video_load(f.ckpt.as_ptr(), &mut v), DcStatus::Parse);

        assert_eq!(dc_model_load(ptr::null(), &mut m), DcStatus::NullPointer);
        assert_eq!(
            dc_model_load(f.ckpt.as_ptr(), ptr::null_mut()),
            DcStatus::NullPointer
        );
        let mut count = 0;
        assert_eq!(
            dc_propose(ptr::null(), ptr::null(), ptr::null_mut(), 0, &mut count),
            DcStatus::NullPointer
        );
        assert_eq!(dc_video_frames(ptr::null()), 0);
        dc_model_free(ptr::null_mut());
        dc_video_free(ptr::null_mut());
    }
}

#[test]
fn error_state_is_per_thread() {
    let missing = CString::new("/nonexistent/v.mevc").unwrap();
    let mut v = ptr::null_mut();
    assert_eq!(unsafe { dc_video_load(missing.as_ptr(), &mut v) }, DcStatus::Io);
    assert!(!dc_last_error().is_null());
    std::thread::spawn(|| assert!(dc_last_error().is_null()))
        .join()
        .unwrap();
}

#[test]
fn tiou_and_version() {
    assert!((dc_tiou(0.0, 10.0, 5.0, 15.0) - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(dc_tiou(0.0, 1.0, 2.0, 3.0), 0.0);
    let v = unsafe { CStr::from_ptr(dc_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
