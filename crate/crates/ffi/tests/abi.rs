use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use pvtformer::checkpoint::Checkpoint;
use pvtformer::model::{PvtFormer, PvtFormerConfig};
use pvtformer_ffi::*;

fn last_error() -> String {
    let p = pvt_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny() -> *mut PvtModel {
    let preset = CString::new("tiny").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { pvt_model_new(preset.as_ptr(), 3, &mut m) }, PvtStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn model_lifecycle_and_queries() {
    let m = tiny();
    let (mut side, mut params) = (0usize, 0u64);
    unsafe {
        assert_eq!(pvt_model_input_size(m, &mut side), PvtStatus::Ok);
        assert_eq!(pvt_model_param_count(m, &mut params), PvtStatus::Ok);
        pvt_model_free(m);
        pvt_model_free(ptr::null_mut());
    }
    assert_eq!(side, 64);
    let tiny = PvtFormerConfig::tiny();
    assert_eq!(params, pvtformer::analysis::closed_form_params(&tiny).unwrap());
}

#[test]
fn predict_matches_library_and_resizes() {
    let m = tiny();
    let side = 64;
    let img: Vec<f32> = (0..side * side).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
    let mut probs = vec![0f32; side * side];
    let mut mask = vec![7u8; side * side];
    let st = unsafe { pvt_model_predict(m, img.as_ptr(), side, 0.5, probs.as_mut_ptr(), mask.as_mut_ptr()) };
    assert_eq!(st, PvtStatus::Ok);
    assert!(mask.iter().all(|&v| v <= 1));
    for (p, &b) in probs.iter().zip(&mask) {
        assert!((0.0..=1.0).contains(p));
        assert_eq!(b, (*p >= 0.5) as u8);
    }

    let reference = PvtFormer::<f32>::new(&PvtFormerConfig::tiny(), 3).unwrap();
    let x = pvtformer::Tensor4::from_vec(
        pvtformer::Shape4::new(1, 3, side, side),
        img.iter().cycle().take(3 * side * side).copied().collect(),
    )
    .unwrap();
    let want = reference.forward(&x).unwrap();
    assert_eq!(want.data(), &probs[..]);

    let big = 128;
    let img2 = vec![0.25f32; big * big];
    let mut mask2 = vec![0u8; big * big];
    let st = unsafe { pvt_model_predict(m, img2.as_ptr(), big, 0.5, ptr::null_mut(), mask2.as_mut_ptr()) };
    assert_eq!(st, PvtStatus::Ok);
    unsafe { pvt_model_free(m) };
}

#[test]
fn errors_are_reported() {
    let bad = CString::new("b9").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { pvt_model_new(bad.as_ptr(), 0, &mut m) }, PvtStatus::InvalidArgument);
    assert!(m.is_null());
    assert!(last_error().contains("b9"));

    assert_eq!(unsafe { pvt_model_new(ptr::null(), 0, &mut m) }, PvtStatus::NullPointer);
    assert!(last_error().contains("preset"));

    let missing = CString::new("/nonexistent/x.ckpt").unwrap();
    assert_eq!(unsafe { pvt_model_load(missing.as_ptr(), &mut m) }, PvtStatus::Io);

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk_c = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { pvt_model_load(junk_c.as_ptr(), &mut m) }, PvtStatus::Checkpoint);

    let t = tiny();
    let img = vec![2.0f32; 16];
    let mut mask = vec![0u8; 16];
    let st = unsafe { pvt_model_predict(t, img.as_ptr(), 4, 0.5, ptr::null_mut(), mask.as_mut_ptr()) };
    assert_eq!(st, PvtStatus::InvalidArgument);
    let st = unsafe { pvt_model_predict(t, img.as_ptr(), 4, 0.5, ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(st, PvtStatus::NullPointer);
    unsafe { pvt_model_free(t) };
}

#[test]
fn load_round_trips_checkpoint() {
    let model = PvtFormer::<f32>::new(&PvtFormerConfig::tiny(), 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::capture(&model, 0, None, None).save(&path).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { pvt_model_load(c.as_ptr(), &mut m) }, PvtStatus::Ok);
    let mut side = 0;
    assert_eq!(unsafe { pvt_model_input_size(m, &mut side) }, PvtStatus::Ok);
    assert_eq!(side, 64);
    unsafe { pvt_model_free(m) };
}

#[test]
fn count_and_metrics() {
    let preset = CString::new("default").unwrap();
    let (mut p, mut macs) = (0u64, 0u64);
    assert_eq!(unsafe { pvt_count(preset.as_ptr(), 256, &mut p, &mut macs) }, PvtStatus::Ok);
    assert_eq!(p, 45_420_289);
    assert!(macs > 30_000_000_000);

    // 4x4: prediction covers the left half, truth the top-left quadrant.
    let pred: Vec<u8> = (0..16).map(|i| (i % 4 < 2) as u8).collect();
    let gt: Vec<u8> = (0..16).map(|i| (i % 4 < 2 && i / 4 < 2) as u8).collect();
    let mut out = PvtSliceMetrics::default();
    assert_eq!(
        unsafe { pvt_slice_metrics(pred.as_ptr(), gt.as_ptr(), 4, 4, 0, &mut out) },
        PvtStatus::Ok
    );
    assert!((out.dice - 8.0 / 12.0).abs() < 1e-12);
    assert!((out.miou - 0.5).abs() < 1e-12);
    assert!((out.recall - 1.0).abs() < 1e-12);
    assert!((out.precision - 0.5).abs() < 1e-12);
    assert_eq!(out.hd_defined, 1);
    assert!((out.hd - 2.0).abs() < 1e-12);

    let empty = vec![0u8; 16];
    assert_eq!(
        unsafe { pvt_slice_metrics(empty.as_ptr(), gt.as_ptr(), 4, 4, 1, &mut out) },
        PvtStatus::Ok
    );
    assert_eq!(out.hd_defined, 0);
    let nonbinary = vec![3u8; 16];
    assert_eq!(
        unsafe { pvt_slice_metrics(nonbinary.as_ptr(), gt.as_ptr(), 4, 4, 0, &mut out) },
        PvtStatus::InvalidArgument
    );
}

#[test]
fn version_is_nul_terminated() {
    let v = unsafe { CStr::from_ptr(pvt_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

/// Compiles a C program against the generated header and the static
/// library, then runs it.
#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header_dir = crate_dir.join("include");
    assert!(header_dir.join("pvtformer.h").exists());
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libpvtformer_ffi.a");
    assert!(lib.exists(), "static library not found at {}", lib.display());

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "pvtformer.h"
int main(void) {
    PvtModel *m = NULL;
    if (pvt_model_new("tiny", 0, &m) != PVT_STATUS_OK) return 1;
    size_t side = 0;
    uint64_t params = 0;
    if (pvt_model_input_size(m, &side) != PVT_STATUS_OK || side != 64) return 2;
    if (pvt_model_param_count(m, &params) != PVT_STATUS_OK || params == 0) return 3;
    static float img[64 * 64];
    static unsigned char mask[64 * 64];
    for (int i = 0; i < 64 * 64; i++) img[i] = (float)(i % 64) / 63.0f;
    if (pvt_model_predict(m, img, 64, 0.5f, NULL, mask) != PVT_STATUS_OK) return 4;
    pvt_model_free(m);
    if (pvt_model_new("nope", 0, &m) != PVT_STATUS_INVALID_ARGUMENT) return 5;
    if (pvt_last_error() == NULL) return 6;
    PvtSliceMetrics s;
    if (pvt_slice_metrics(mask, mask, 64, 64, 0, &s) != PVT_STATUS_OK || s.dice != 1.0) return 7;
    printf("ok %s\n", pvt_version());
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&header_dir)
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&bin)
        .status()
        .expect("C compiler available");
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "C smoke program exited with {:?}", out.status);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
