use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use qfconv::model::{mhz_2pi, CycleName, CycleSpec, KappaPolicy};
use qfconv::pulses::{Layout, ProtocolSchedule, ScheduleTemplate, Shape};
use qfconv_ffi::*;

fn last_error() -> String {
    let p = qfc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cycle_a() -> *mut QfcCycle {
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { qfc_cycle_new(QfcCycleName::A, QfcKappa::TwoGO, 0.0, &mut c) }, QfcStatus::Ok);
    c
}

fn schedule_text() -> String {
    let cycle = CycleSpec::build(CycleName::A, KappaPolicy::TwoGO);
    let t = ScheduleTemplate::protocol(&cycle, 120.0, Layout::TwoSegmentPinned(0.6), Shape::Gaussian, false).unwrap();
    t.from_vector(&[1.0, 0.7, -1.0, 1.0, 0.4, -1.0, 1.0, 0.6, -1.0, 1.0, 0.3, -1.0]).unwrap().to_toml().unwrap()
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(qfc_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn channel_functions() {
    let mut x = f64::NAN;
    unsafe {
        assert_eq!(qfc_capacity(0.0, &mut x), QfcStatus::Ok);
        assert!((x - 1.0).abs() < 1e-6);
        assert_eq!(qfc_capacity(0.6, &mut x), QfcStatus::Ok);
        assert!(x.abs() < 1e-6);
        assert_eq!(qfc_capacity(1.5, &mut x), QfcStatus::InvalidInput);
        assert!(last_error().contains("invalid input"));
        assert_eq!(qfc_coherent_information(0.5, 0.0, 0.0, 0.0, &mut x), QfcStatus::Ok);
        assert!((x - 1.0).abs() < 1e-12);
        assert_eq!(qfc_comm_rate(0.0, 0.0, 100.0, &mut x), QfcStatus::Ok);
        assert!((x - 10.0).abs() < 1e-9);
    }
}

#[test]
fn null_pointers_are_reported() {
    unsafe {
        assert_eq!(qfc_capacity(0.1, ptr::null_mut()), QfcStatus::NullPointer);
        assert!(last_error().contains("out_capacity"));
        let mut k = 0.0;
        assert_eq!(qfc_cycle_kappa(ptr::null(), &mut k), QfcStatus::NullPointer);
        qfc_cycle_free(ptr::null_mut());
        qfc_schedule_free(ptr::null_mut());
    }
}

#[test]
fn cycle_kappa_policies() {
    unsafe {
        let c = cycle_a();
        let mut k = 0.0;
        assert_eq!(qfc_cycle_kappa(c, &mut k), QfcStatus::Ok);
        assert!((k - 2.0 * mhz_2pi(200.0)).abs() < 1e-12);
        qfc_cycle_free(c);
        let mut c = ptr::null_mut();
        assert_eq!(qfc_cycle_new(QfcCycleName::B, QfcKappa::Explicit, -1.0, &mut c), QfcStatus::InvalidInput);
        assert!(c.is_null());
        assert_eq!(qfc_cycle_new(QfcCycleName::B, QfcKappa::Explicit, 0.5, &mut c), QfcStatus::Ok);
        qfc_cycle_kappa(c, &mut k);
        assert_eq!(k, 0.5);
        qfc_cycle_free(c);
    }
}

#[test]
fn schedule_roundtrip_and_simulation() {
    unsafe {
        let c = cycle_a();
        let doc = CString::new(schedule_text()).unwrap();
        let mut s = ptr::null_mut();
        assert_eq!(qfc_schedule_from_toml(c, doc.as_ptr(), &mut s), QfcStatus::Ok);
        let mut d = 0.0;
        qfc_schedule_duration(s, &mut d);
        assert_eq!(d, 120.0);

        let mut needed = 0usize;
        assert_eq!(qfc_schedule_to_toml(s, ptr::null_mut(), 0, &mut needed), QfcStatus::BufferTooSmall);
        let mut buf = vec![0 as std::ffi::c_char; needed];
        assert_eq!(qfc_schedule_to_toml(s, buf.as_mut_ptr(), buf.len(), &mut needed), QfcStatus::Ok);
        let back = ProtocolSchedule::from_toml(CStr::from_ptr(buf.as_ptr()).to_str().unwrap()).unwrap();
        let orig = ProtocolSchedule::from_toml(&schedule_text()).unwrap();
        assert_eq!(back.split, orig.split);
        for (a, b) in back.drives.iter().zip(&orig.drives) {
            assert_eq!(a.pair, b.pair);
            assert!((a.peak() - b.peak()).abs() < 1e-12);
        }

        let mut p = f64::NAN;
        assert_eq!(qfc_simulate(c, s, 1e-6, &mut p), QfcStatus::Ok);
        assert!(p > 0.0 && p < 1.0, "{p}");
        assert_eq!(qfc_simulate(c, s, 0.0, &mut p), QfcStatus::InvalidInput);
        qfc_schedule_free(s);

        let bad = CString::new("format = \"nope\"\n").unwrap();
        let mut s = ptr::null_mut();
        assert_eq!(qfc_schedule_from_toml(c, bad.as_ptr(), &mut s), QfcStatus::Config);
        assert!(s.is_null());
        qfc_cycle_free(c);
    }
}

#[test]
fn optimize_short_protocol() {
    let config = CString::new(
        "split_fractions = [0.5]\nsplit_refinements = 0\npolish_passes = 0\n[simplex]\nrestarts = 1\nmax_evaluations = 100\n",
    )
    .unwrap();
    let kind = CString::new("piecewise:1").unwrap();
    unsafe {
        let c = cycle_a();
        let mut s = ptr::null_mut();
        let mut r = QfcOptimizeReport::default();
        assert_eq!(qfc_optimize(c, 30.0, kind.as_ptr(), config.as_ptr(), 3, &mut s, &mut r), QfcStatus::Ok);
        assert!(!s.is_null());
        assert!((r.success + r.loss - 1.0).abs() < 1e-12);
        assert!(r.evaluations > 0);
        qfc_schedule_free(s);

        let typo = CString::new("restartz = 1\n").unwrap();
        let mut s = ptr::null_mut();
        assert_eq!(qfc_optimize(c, 30.0, kind.as_ptr(), typo.as_ptr(), 0, &mut s, &mut r), QfcStatus::Config);
        let gibberish = CString::new("sawtooth").unwrap();
        assert_eq!(qfc_optimize(c, 30.0, gibberish.as_ptr(), ptr::null(), 0, &mut s, &mut r), QfcStatus::InvalidInput);
        qfc_cycle_free(c);
    }
}

fn target_dir() -> PathBuf {
    // .../target/<profile>/deps/c_api-<hash>
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_static_library() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let lib = target_dir().join("libqfconv_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: static library or C compiler not available");
        return;
    }
    let dir = tempfile_dir();
    let exe = dir.join("smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests").join("smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    let line = String::from_utf8(out.stdout).unwrap();
    assert!(line.starts_with(env!("CARGO_PKG_VERSION")), "{line}");
}

fn tempfile_dir() -> PathBuf {
    let d = std::env::temp_dir().join(format!("qfconv-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}
