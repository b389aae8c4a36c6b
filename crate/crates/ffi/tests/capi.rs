use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use gaia_core::model::ModelConfig;
use gaia_core::train::{TrainSchedule, TrainState};
use gaia_ffi::*;

fn last_error() -> String {
    let p = gaia_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn field(values: &[f64], missing: Option<&[u8]>, h: usize, w: usize) -> *mut GaiaField {
    let mut f = ptr::null_mut();
    let m = missing.map_or(ptr::null(), |m| m.as_ptr());
    let st = unsafe { gaia_field_new(values.as_ptr(), m, h, w, 60, &mut f) };
    assert_eq!(st, GaiaStatus::Ok);
    f
}

fn values_of(f: *const GaiaField, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    assert_eq!(unsafe { gaia_field_copy_values(f, v.as_mut_ptr(), n) }, GaiaStatus::Ok);
    v
}

#[test]
fn field_round_trip_through_file() {
    let vals: Vec<f64> = (0..24).map(|i| i as f64 / 24.0).collect();
    let mut miss = vec![0u8; 24];
    miss[5] = 1;
    let f = field(&vals, Some(&miss), 4, 6);
    let (mut h, mut w, mut t) = (0, 0, 0);
    unsafe {
        assert_eq!(gaia_field_dims(f, &mut h, &mut w), GaiaStatus::Ok);
        assert_eq!(gaia_field_timestamp(f, &mut t), GaiaStatus::Ok);
    }
    assert_eq!((h, w, t), (4, 6, 60));

    let dir = tempfile::tempdir().unwrap();
    let p = CString::new(dir.path().join("f.fld").to_str().unwrap()).unwrap();
    let mut g = ptr::null_mut();
    unsafe {
        assert_eq!(gaia_field_save(f, p.as_ptr()), GaiaStatus::Ok);
        assert_eq!(gaia_field_load(p.as_ptr(), &mut g), GaiaStatus::Ok);
    }
    let stored: Vec<f64> = values_of(f, 24).iter().map(|&v| v as f32 as f64).collect();
    assert_eq!(values_of(g, 24), stored);
    let mut m = vec![0u8; 24];
    assert_eq!(unsafe { gaia_field_copy_missing(g, m.as_mut_ptr(), 24) }, GaiaStatus::Ok);
    assert_eq!(m, miss);
    unsafe {
        gaia_field_free(f);
        gaia_field_free(g);
        gaia_field_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_status_codes() {
    let vals = vec![0.5; 16];
    let f = field(&vals, None, 4, 4);
    let mut small = vec![0.0; 3];
    unsafe {
        assert_eq!(gaia_field_copy_values(f, small.as_mut_ptr(), 3), GaiaStatus::Shape);
        assert!(last_error().contains("buffer"));
        assert_eq!(gaia_field_dims(ptr::null(), &mut 0, &mut 0), GaiaStatus::NullPointer);
        assert!(last_error().contains("null"));
        let mut out = ptr::null_mut();
        assert_eq!(gaia_field_new(ptr::null(), ptr::null(), 2, 2, 0, &mut out), GaiaStatus::NullPointer);
        assert_eq!(gaia_field_new(vals.as_ptr(), ptr::null(), 0, 4, 0, &mut out), GaiaStatus::InvalidArgument);
        assert_eq!(gaia_normalize(f, 300.0, 200.0, &mut out), GaiaStatus::InvalidArgument);
        assert_eq!(gaia_downscale(f, 3, 3, &mut out), GaiaStatus::InvalidArgument);
        let missing = CString::new("/nonexistent/none.fld").unwrap();
        assert_eq!(gaia_field_load(missing.as_ptr(), &mut out), GaiaStatus::Io);
        let mut lr = 0.0;
        assert_eq!(gaia_cosine_lr(5, 4, 1.0, 0, &mut lr), GaiaStatus::InvalidArgument);
        assert_eq!(gaia_field_dims(f, &mut 0, &mut 0), GaiaStatus::Ok);
        assert!(gaia_last_error_message().is_null());
        gaia_field_free(f);
    }
}

#[test]
fn scalar_functions() {
    let mut v = 0.0;
    unsafe {
        assert_eq!(gaia_lambda_schedule(15, 5, 20, 0.5, &mut v), GaiaStatus::Ok);
        assert_eq!(v, 0.75);
        assert_eq!(gaia_lambda_schedule(3, 5, 20, 0.5, &mut v), GaiaStatus::Ok);
        assert_eq!(v, 1.0);
        assert_eq!(gaia_lambda_schedule(1, 0, 1, 1.5, &mut v), GaiaStatus::InvalidArgument);
        assert_eq!(gaia_cosine_lr(10, 10, 0.1, 2, &mut v), GaiaStatus::Ok);
        assert_eq!(v, 0.0);
        assert_eq!(gaia_cosine_lr(2, 10, 0.1, 2, &mut v), GaiaStatus::Ok);
        assert_eq!(v, 0.1);
        let (a, b) = (GaiaBBox { y0: 0.0, x0: 0.0, y1: 1.0, x1: 1.0 }, GaiaBBox { y0: 0.0, x0: 0.5, y1: 1.0, x1: 1.5 });
        assert_eq!(gaia_iou(&a, &b, &mut v), GaiaStatus::Ok);
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        let bad = GaiaBBox { y0: 1.0, x0: 0.0, y1: 0.0, x1: 1.0 };
        assert_eq!(gaia_iou(&a, &bad, &mut v), GaiaStatus::InvalidArgument);
    }
    let mut hidden = vec![0u8; 37];
    assert_eq!(unsafe { gaia_sample_mask(37, 0.75, 4, hidden.as_mut_ptr()) }, GaiaStatus::Ok);
    assert_eq!(hidden.iter().filter(|&&h| h == 1).count(), 28);
    let mut again = vec![0u8; 37];
    unsafe { gaia_sample_mask(37, 0.75, 4, again.as_mut_ptr()) };
    assert_eq!(hidden, again);
    assert_eq!(unsafe { gaia_sample_mask(4, 1.0, 0, hidden.as_mut_ptr()) }, GaiaStatus::InvalidArgument);
}

#[test]
fn metrics_on_handles() {
    let truth: Vec<f64> = (0..16).map(|i| f64::from(i % 3 == 0)).collect();
    let t = field(&truth, None, 4, 4);
    let mut r = GaiaBinaryReport { tp: 0, fp: 0, tn: 0, fn_: 0, accuracy: 0.0, far: 0.0, precision: 0.0, recall: 0.0, f1: 0.0 };
    unsafe {
        assert_eq!(gaia_binary_metrics(t, t, 0.5, &mut r), GaiaStatus::Ok);
    }
    assert_eq!((r.tp, r.fp, r.tn, r.fn_), (6, 0, 10, 0));
    assert_eq!((r.accuracy, r.far, r.f1), (1.0, 0.0, 1.0));
    let zeros = field(&[0.0; 16], None, 4, 4);
    unsafe { gaia_binary_metrics(zeros, zeros, 0.5, &mut r) };
    assert!(r.far.is_nan() && r.f1.is_nan());
    assert_eq!(r.accuracy, 1.0);

    let mut s = 0.0;
    let region = vec![1u8; 16];
    unsafe {
        assert_eq!(gaia_ssim(t, t, &mut s), GaiaStatus::Ok);
        assert!((s - 1.0).abs() < 1e-9);
        assert_eq!(gaia_rmse_masked(t, zeros, region.as_ptr(), 16, &mut s), GaiaStatus::Ok);
        assert!((s - (6.0f64 / 16.0).sqrt()).abs() < 1e-12);
        assert_eq!(gaia_rmse_masked(t, zeros, region.as_ptr(), 15, &mut s), GaiaStatus::Shape);
        gaia_field_free(t);
        gaia_field_free(zeros);
    }
}

fn write_model(dir: &Path) -> PathBuf {
    let cfg = ModelConfig::tiny();
    let sched = TrainSchedule::default();
    let state = TrainState::init(&cfg, &sched).unwrap();
    let p = dir.join("m.ckpt");
    state.to_checkpoint(&cfg, &sched).save(&p).unwrap();
    p
}

#[test]
fn model_gapfill_keeps_observed_visible_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let cpath = CString::new(write_model(dir.path()).to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    let mut patch = 0;
    unsafe {
        assert_eq!(gaia_model_load(cpath.as_ptr(), &mut model), GaiaStatus::Ok);
        assert_eq!(gaia_model_patch_size(model, &mut patch), GaiaStatus::Ok);
    }
    assert_eq!(patch, 8);
    let (h, w) = (16, 24);
    let vals: Vec<f64> = (0..h * w).map(|i| ((i * 7) % 13) as f64 / 13.0).collect();
    let f = field(&vals, None, h, w);
    let mut hidden = vec![0u8; 6];
    hidden[1] = 1;
    hidden[4] = 1;
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(gaia_model_gapfill(model, f, hidden.as_ptr(), 6, &mut out), GaiaStatus::Ok);
    }
    let got = values_of(out, h * w);
    unsafe { gaia_field_free(out) };
    let mut changed = 0;
    for r in 0..h {
        for c in 0..w {
            let k = (r / 8) * 3 + c / 8;
            if hidden[k] == 0 {
                assert_eq!(got[r * w + c].to_bits(), vals[r * w + c].to_bits());
            } else if got[r * w + c] != vals[r * w + c] {
                changed += 1;
            }
        }
    }
    assert!(changed > 0);
    unsafe {
        assert_eq!(gaia_model_gapfill(model, f, hidden.as_ptr(), 5, &mut out), GaiaStatus::Shape);
        let odd = field(&vec![0.5; 100], None, 10, 10);
        assert_eq!(gaia_model_gapfill(model, odd, ptr::null(), 0, &mut out), GaiaStatus::Shape);
        gaia_field_free(odd);
        gaia_field_free(f);
        gaia_model_free(model);
    }
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn header_declares_every_exported_function() {
    let header = std::fs::read_to_string(crate_dir().join("include/gaia.h")).unwrap();
    let src = std::fs::read_to_string(crate_dir().join("src/lib.rs")).unwrap();
    let names: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(names.len() >= 20, "{names:?}");
    for n in names {
        assert!(header.contains(&format!("{n}(")), "{n} missing from header");
    }
    for t in ["typedef struct GaiaField GaiaField;", "typedef struct GaiaModel GaiaModel;", "GAIA_STATUS_OK = 0"] {
        assert!(header.contains(t), "{t}");
    }
}

fn cc() -> Option<String> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .map(str::to_string)
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let Some(cc) = cc() else {
        eprintln!("no C compiler found; header syntax check not run");
        return;
    };
    let include = crate_dir().join("include");
    let src = crate_dir().join("tests/c/smoke.c");
    for lang in ["c", "c++"] {
        let status = Command::new(&cc)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang])
            .arg("-I")
            .arg(&include)
            .arg(&src)
            .status()
            .unwrap();
        assert!(status.success(), "header failed to compile as {lang}");
    }
}

#[test]
fn c_program_links_against_static_library() {
    let Some(cc) = cc() else {
        eprintln!("no C compiler found; link check not run");
        return;
    };
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libgaia_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new(&cc)
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(crate_dir().join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl"])
        .arg("-o")
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "link failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
