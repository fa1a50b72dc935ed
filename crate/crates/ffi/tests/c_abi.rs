//! The C interface, driven through raw pointers as a C caller would, plus a
//! C program compiled against the generated header.

use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use ageformer_ffi::*;

fn last_error() -> String {
    let p = ag_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn desk(seed: u64) -> *mut AgModel {
    let mut m = ptr::null_mut();
    assert_eq!(ag_model_new(AgPreset::Desk, seed, &mut m), AgStatus::Ok);
    assert!(!m.is_null());
    m
}

fn shape(m: *const AgModel) -> AgClipShape {
    let mut s = AgClipShape::default();
    assert_eq!(unsafe { ag_model_clip_shape(m, &mut s) }, AgStatus::Ok);
    s
}

fn predict(m: *const AgModel, frames: &[f32], s: &AgClipShape, face: Option<&[f32]>) -> (AgStatus, AgPrediction) {
    let mut out = AgPrediction::default();
    let fp = face.map_or(ptr::null(), |f| f.as_ptr());
    let st = unsafe { ag_model_predict(m, frames.as_ptr(), s.frames, s.height, s.width, fp, s.face_size, &mut out) };
    (st, out)
}

fn ramp(n: usize) -> Vec<f32> {
    (0..n).map(|i| ((i * 7919) % 1000) as f32 / 1000.0).collect()
}

#[test]
fn predict_save_load_round_trip() {
    let m = desk(3);
    let s = shape(m);
    assert_eq!((s.frames, s.height, s.width, s.face_size), (8, 64, 64, 288));
    let frames = ramp(s.frames * s.height * s.width * 3);
    let face = ramp(s.face_size * s.face_size * 3);
    let (st, with_face) = predict(m, &frames, &s, Some(&face));
    assert_eq!(st, AgStatus::Ok);
    assert!((with_face.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(with_face.class_index < AG_NUM_CLASSES as u32);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ag_model_save(m, path.as_ptr()) }, AgStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { ag_model_load(path.as_ptr(), &mut loaded) }, AgStatus::Ok);
    let (_, again) = predict(loaded, &frames, &s, Some(&face));
    assert_eq!(again.probs, with_face.probs);
    unsafe {
        ag_model_free(loaded);
        ag_model_free(m);
    }
}

#[test]
fn absent_face_matches_after_zeroing() {
    let m = desk(5);
    let s = shape(m);
    let frames = ramp(s.frames * s.height * s.width * 3);
    let mut zeroed = 0usize;
    assert_eq!(unsafe { ag_model_zero_support_biases(m, &mut zeroed) }, AgStatus::Ok);
    assert!(zeroed > 0);
    let (st, a) = predict(m, &frames, &s, None);
    assert_eq!(st, AgStatus::Ok);
    let zeros = vec![0.0f32; s.face_size * s.face_size * 3];
    let (_, b) = predict(m, &frames, &s, Some(&zeros));
    assert_eq!(a.probs, b.probs);
    unsafe { ag_model_free(m) };
}

#[test]
fn errors_carry_status_and_message() {
    let m = desk(1);
    let s = shape(m);
    let small = AgClipShape { height: 32, ..s };
    let frames = ramp(small.frames * small.height * small.width * 3);
    let (st, _) = predict(m, &frames, &small, None);
    assert_eq!(st, AgStatus::InvalidArgument);
    assert!(last_error().contains("config error"), "{}", last_error());

    let mut out = AgPrediction::default();
    let st = unsafe { ag_model_predict(ptr::null(), frames.as_ptr(), 1, 1, 1, ptr::null(), 0, &mut out) };
    assert_eq!(st, AgStatus::NullPointer);
    assert_eq!(last_error(), "model is null");

    let missing = CString::new("/nonexistent/dir/m.ckpt").unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { ag_model_load(missing.as_ptr(), &mut h) }, AgStatus::Io);
    assert!(last_error().contains("/nonexistent/dir/m.ckpt"));
    assert!(h.is_null());
    unsafe {
        ag_model_free(ptr::null_mut());
        ag_model_free(m);
    }
}

#[test]
fn metrics_through_the_abi() {
    let preds = [0u32, 1, 2, 3, 3, 2];
    let labels = [0u32, 1, 2, 3, 2, 2];
    let mut out = AgMetrics::default();
    assert_eq!(unsafe { ag_metrics(preds.as_ptr(), labels.as_ptr(), 6, &mut out) }, AgStatus::Ok);
    assert!((out.accuracy - 5.0 / 6.0).abs() < 1e-12);
    assert_eq!(out.confusion[2], [0, 0, 2, 1]);
    assert_eq!(out.confusion.iter().flatten().sum::<u64>(), 6);

    let bad = [9u32];
    assert_eq!(unsafe { ag_metrics(bad.as_ptr(), bad.as_ptr(), 1, &mut out) }, AgStatus::InvalidArgument);
    assert!(last_error().contains("out of range"));
    assert_eq!(unsafe { ag_metrics(preds.as_ptr(), labels.as_ptr(), 0, &mut out) }, AgStatus::InvalidArgument);
}

/// Compiles `tests/smoke.c` against the header and the static library and
/// runs it. Skipped when no C compiler is installed.
#[test]
fn c_program_links_and_runs() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let crate_dir = env!("CARGO_MANIFEST_DIR");
    let target_dir = std::path::Path::new(crate_dir).join("../../target");
    let lib = ["debug", "release"]
        .iter()
        .map(|p| target_dir.join(p).join("libageformer_ffi.a"))
        .filter(|p| p.exists())
        .max_by_key(|p| p.metadata().and_then(|m| m.modified()).ok());
    let Some(lib) = lib else {
        eprintln!("static library not built; skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(format!("{crate_dir}/include"))
        .arg(format!("{crate_dir}/tests/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}

fn which_cc() -> Result<String, ()> {
    ["cc", "gcc", "clang"]
        .iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .map(|c| c.to_string())
        .ok_or(())
}
