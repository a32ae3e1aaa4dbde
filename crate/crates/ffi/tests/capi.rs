use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use fed3cr_ffi::*;

fn last_error() -> String {
    let p = fed3cr_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn rbo_anchors() {
    let a = [0usize, 1, 2];
    let b = [0usize, 2, 1];
    let mut v = 0.0;
    unsafe {
        assert_eq!(fed3cr_rbo(a.as_ptr(), a.as_ptr(), 3, 0.5, &mut v), Fed3crStatus::Ok);
        assert!((v - 1.0).abs() < 1e-12);
        assert_eq!(fed3cr_rbo(a.as_ptr(), b.as_ptr(), 3, 0.5, &mut v), Fed3crStatus::Ok);
        assert!((v - 6.0 / 7.0).abs() < 1e-4);
        let dup = [0usize, 0, 1];
        assert_eq!(fed3cr_rbo(dup.as_ptr(), b.as_ptr(), 3, 0.5, &mut v), Fed3crStatus::RuntimeError);
        assert!(last_error().contains("duplicate"), "{}", last_error());
        assert_eq!(fed3cr_rbo(ptr::null(), b.as_ptr(), 3, 0.5, &mut v), Fed3crStatus::NullArgument);
    }
}

#[test]
fn hr_ndcg_and_bound() {
    let ranked = [7usize, 3, 9];
    let (mut hr, mut ndcg) = (0.0, 0.0);
    unsafe {
        assert_eq!(fed3cr_hr_ndcg(ranked.as_ptr(), 3, 3, 10, &mut hr, &mut ndcg), Fed3crStatus::Ok);
    }
    assert_eq!(hr, 1.0);
    assert!((ndcg - 1.0 / 3f64.log2()).abs() < 1e-12);

    let optima = [1.0, 0.0, 0.0, 1.0, -1.0, 0.0];
    let mut dist = [0.0; 3];
    let mut bound = [0.0; 3];
    let mut violations = 99usize;
    unsafe {
        let s = fed3cr_verify_bound(optima.as_ptr(), 3, 2, dist.as_mut_ptr(), bound.as_mut_ptr(), &mut violations);
        assert_eq!(s, Fed3crStatus::Ok);
    }
    assert_eq!(violations, 0);
    assert!((dist[0] - 1.0541).abs() < 1e-3 && (bound[0] - 1.1381).abs() < 1e-3);
}

#[test]
fn dataset_handles() {
    let mut ds: *mut Fed3crDataset = ptr::null_mut();
    let mut stats = Fed3crStats::default();
    unsafe {
        assert_eq!(fed3cr_dataset_toy(20, 80, 4, 12, 1, 0, &mut ds), Fed3crStatus::Ok);
        assert_eq!(fed3cr_dataset_stats(ds, &mut stats), Fed3crStatus::Ok);
        fed3cr_dataset_free(ds);
    }
    assert_eq!(stats.clients, 20);
    assert_eq!(stats.interactions, 260);

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("three.csv");
    std::fs::write(&file, "user,item,rating,timestamp\nu1,a,1,1\nu1,b,1,2\nu2,a,1,3\n").unwrap();
    let path = CString::new(file.to_str().unwrap()).unwrap();
    let csv = CString::new("csv").unwrap();
    let mut ds: *mut Fed3crDataset = ptr::null_mut();
    unsafe {
        assert_eq!(fed3cr_dataset_load(path.as_ptr(), csv.as_ptr(), 1, &mut ds), Fed3crStatus::Ok);
        assert_eq!(fed3cr_dataset_stats(ds, &mut stats), Fed3crStatus::Ok);
        fed3cr_dataset_free(ds);
    }
    assert_eq!((stats.clients, stats.items, stats.interactions), (2, 2, 3));

    let missing = CString::new("/nonexistent/ratings.dat").unwrap();
    let dat = CString::new("movielens-dat").unwrap();
    unsafe {
        assert_eq!(fed3cr_dataset_load(missing.as_ptr(), dat.as_ptr(), 1, &mut ds), Fed3crStatus::DataError);
        let bogus = CString::new("parquet").unwrap();
        assert_eq!(fed3cr_dataset_load(path.as_ptr(), bogus.as_ptr(), 1, &mut ds), Fed3crStatus::ConfigError);
        fed3cr_dataset_free(ptr::null_mut());
    }
}

fn small_config(out: &std::path::Path) -> *mut Fed3crConfig {
    let mut cfg: *mut Fed3crConfig = ptr::null_mut();
    let sets = [
        ("training.rounds", "2".to_string()),
        ("training.local_iters", "2".to_string()),
        ("training.dim", "4".to_string()),
        ("eval.negatives", "19".to_string()),
        ("dataset.toy.positives", "6".to_string()),
        ("dataset.toy.clients", "8".to_string()),
        ("dataset.toy.items", "40".to_string()),
        ("output_dir", format!("\"{}\"", out.display())),
    ];
    unsafe {
        assert_eq!(fed3cr_config_new(&mut cfg), Fed3crStatus::Ok);
        for (k, v) in sets {
            let (k, v) = (CString::new(k).unwrap(), CString::new(v).unwrap());
            assert_eq!(fed3cr_config_set(cfg, k.as_ptr(), v.as_ptr()), Fed3crStatus::Ok, "{}", last_error());
        }
    }
    cfg
}

#[test]
fn config_and_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = small_config(&out);
    unsafe {
        let bad = CString::new("training.beta_x").unwrap();
        let one = CString::new("1").unwrap();
        assert_eq!(fed3cr_config_set(cfg, bad.as_ptr(), one.as_ptr()), Fed3crStatus::ConfigError);
        assert!(last_error().contains("training.beta_x"));

        let mut summary = std::mem::MaybeUninit::<Fed3crSummary>::uninit();
        assert_eq!(fed3cr_run(cfg, 2, false, summary.as_mut_ptr()), Fed3crStatus::Ok, "{}", last_error());
        let summary = summary.assume_init();
        assert_eq!(summary.rounds, 2);
        assert!(summary.final_hr >= 0.0 && summary.best_hr >= summary.final_hr);
        assert!(out.join("metrics.csv").exists());
        assert_eq!(fed3cr_run(cfg, 2, false, ptr::null_mut()), Fed3crStatus::ConfigError);

        let (mut a, mut b): (*mut std::ffi::c_char, *mut std::ffi::c_char) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(fed3cr_train_metrics(cfg, 1, &mut a), Fed3crStatus::Ok);
        assert_eq!(fed3cr_train_metrics(cfg, 3, &mut b), Fed3crStatus::Ok);
        let (sa, sb) = (CStr::from_ptr(a).to_owned(), CStr::from_ptr(b).to_owned());
        assert_eq!(sa, sb);
        assert_eq!(sa.to_bytes(), std::fs::read(out.join("metrics.csv")).unwrap().as_slice());
        fed3cr_string_free(a);
        fed3cr_string_free(b);

        let manifest = CString::new(out.join("manifest.json").to_str().unwrap()).unwrap();
        let mut again: *mut Fed3crConfig = ptr::null_mut();
        assert_eq!(fed3cr_config_load(manifest.as_ptr(), &mut again), Fed3crStatus::Ok);
        let mut c = ptr::null_mut();
        assert_eq!(fed3cr_train_metrics(again, 0, &mut c), Fed3crStatus::Ok);
        assert_eq!(CStr::from_ptr(c).to_owned(), sa);
        fed3cr_string_free(c);
        fed3cr_config_free(again);
        fed3cr_config_free(cfg);
    }
}

#[test]
fn header_is_generated() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/fed3cr.h")).unwrap();
    for sym in [
        "fed3cr_last_error",
        "fed3cr_rbo",
        "fed3cr_hr_ndcg",
        "fed3cr_verify_bound",
        "fed3cr_dataset_load",
        "fed3cr_config_set",
        "fed3cr_run",
        "typedef struct Fed3crDataset Fed3crDataset",
        "FED3CR_STATUS_CONFIG_ERROR = 2",
    ] {
        assert!(h.contains(sym), "{sym}");
    }
}

/// Compiles and runs a small C program against the header and static library
/// when a C compiler is available.
#[test]
fn c_program_links() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let exe = std::env::current_exe().unwrap();
    let profile_dir: PathBuf = exe.parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libfed3cr_ffi.a");
    if !lib.exists() {
        eprintln!("static library not built at {}; skipping", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "fed3cr.h"
int main(void) {
    size_t a[3] = {0, 1, 2}, b[3] = {0, 2, 1};
    double v = 0.0;
    if (fed3cr_rbo(a, b, 3, 0.5, &v) != FED3CR_STATUS_OK) return 1;
    printf("%.4f\n", v);
    if (fed3cr_rbo(a, b, 2, 1.5, &v) == FED3CR_STATUS_OK) return 2;
    if (fed3cr_last_error() == NULL) return 3;
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("main");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "0.8571");
}
