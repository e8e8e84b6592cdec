use std::ffi::{CStr, CString};
use std::ptr;

use peel_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(peel_last_error()) }.to_string_lossy().into_owned()
}

const TINY: &str = r#"
[data]
n = 60
[data.synthetic]
seed = 2
[train]
epochs = 2
batch_size = 8
depth = 2
hidden = 6
embed_dim = 5
"#;

#[test]
fn dataset_handles_report_length_and_labels() {
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { peel_dataset_generate(30, 1, &mut ds) }, PeelStatus::Ok);
    assert_eq!(unsafe { peel_dataset_len(ds) }, 30);
    let mut y = vec![0.0; 30];
    assert_eq!(unsafe { peel_dataset_labels(ds, y.as_mut_ptr(), 30) }, PeelStatus::Ok);
    assert!(y.iter().any(|v| *v != 0.0));
    assert_eq!(unsafe { peel_dataset_labels(ds, y.as_mut_ptr(), 29) }, PeelStatus::InvalidArgument);
    unsafe { peel_dataset_free(ds) };
    assert_eq!(unsafe { peel_dataset_len(ptr::null()) }, 0);
    unsafe { peel_dataset_free(ptr::null_mut()) };
}

#[test]
fn null_and_bad_inputs_map_to_status_codes() {
    assert_eq!(unsafe { peel_dataset_load(ptr::null(), ptr::null_mut()) }, PeelStatus::NullPointer);
    assert!(last_error().contains("path"));
    let missing = CString::new("/nonexistent/d.jsonl").unwrap();
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { peel_dataset_load(missing.as_ptr(), &mut ds) }, PeelStatus::Io);
    assert!(ds.is_null());
    assert_eq!(unsafe { peel_dataset_generate(1, 0, &mut ds) }, PeelStatus::InvalidData);

    let bad = CString::new("[train]\nbogus = 1\n").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { peel_train(bad.as_ptr(), ptr::null(), &mut m) }, PeelStatus::InvalidConfig);
    assert!(last_error().contains("bogus"), "{}", last_error());
}

#[test]
fn train_save_load_predict_round_trip() {
    let cfg = CString::new(TINY).unwrap();
    let mut model = ptr::null_mut();
    let st = unsafe { peel_train(cfg.as_ptr(), ptr::null(), &mut model) };
    assert_eq!(st, PeelStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { peel_model_depth(model) }, 2);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { peel_model_save(model, path.as_ptr()) }, PeelStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { peel_model_load(path.as_ptr(), &mut back) }, PeelStatus::Ok);

    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { peel_dataset_generate(20, 9, &mut ds) }, PeelStatus::Ok);
    let ctx = PeelContext {
        strength: 1.0,
        gain_lo: 0.0,
        gain_hi: 1.0,
        noise_sd: 0.5,
    };
    let (mut a, mut b) = (vec![0.0; 20], vec![0.0; 20]);
    unsafe {
        assert_eq!(peel_model_predict(model, ds, 8, 4, &ctx, a.as_mut_ptr(), 20), PeelStatus::Ok);
        assert_eq!(peel_model_predict(back, ds, 8, 4, &ctx, b.as_mut_ptr(), 20), PeelStatus::Ok);
    }
    assert_eq!(a, b);
    let mut m = PeelMetrics::default();
    assert_eq!(unsafe { peel_model_evaluate(back, ds, 8, 0, ptr::null(), &mut m) }, PeelStatus::Ok);
    assert!(m.mse.is_finite() && m.mae >= 0.0);
    unsafe {
        peel_model_free(model);
        peel_model_free(back);
        peel_dataset_free(ds);
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(peel_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/peel_ffi.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .filter_map(|rest| rest.split('(').next())
        .collect();
    assert!(exports.len() >= 12);
    for f in exports {
        assert!(header.contains(&format!("{f}(")), "header lacks {f}");
    }
}

/// Compiles and runs a small C program against the static library.
#[test]
fn c_program_links_against_the_static_library() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    // target/<profile>/deps/abi-xxxx -> target/<profile>
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libpeel_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let manifest = env!("CARGO_MANIFEST_DIR");
    let status = std::process::Command::new(cc)
        .args([&format!("{manifest}/tests/smoke.c"), "-I", &format!("{manifest}/include"), "-o"])
        .arg(&bin)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .unwrap();
    assert!(status.success());
    let out = std::process::Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if std::process::Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc);
        }
    }
    Err(())
}
