use std::ffi::{c_char, CString};
use std::ptr;

use dcls_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { dcls_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn new_model(preset: &str, conv: &str, classes: u32) -> *mut DclsModel {
    let preset = CString::new(preset).unwrap();
    let conv = CString::new(conv).unwrap();
    let mut m = ptr::null_mut();
    let status = unsafe { dcls_model_new(preset.as_ptr(), conv.as_ptr(), classes, 7, &mut m) };
    assert_eq!(status, DclsStatus::Ok, "{}", last_error());
    m
}

#[test]
fn model_round_trip_and_predict() {
    let m = new_model("mini", "dcls", 3);
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(dcls_model_save(m, path.as_ptr(), 7), DclsStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(dcls_model_load(path.as_ptr(), &mut loaded), DclsStatus::Ok);
        let (mut a, mut b) = (0u64, 0u64);
        assert_eq!(dcls_model_param_count(m, &mut a), DclsStatus::Ok);
        assert_eq!(dcls_model_param_count(loaded, &mut b), DclsStatus::Ok);
        assert_eq!(a, b);
        let mut classes = 0u32;
        assert_eq!(dcls_model_num_classes(loaded, &mut classes), DclsStatus::Ok);
        assert_eq!(classes, 3);
        let input: Vec<f32> = (0..2 * 128 * 101).map(|i| ((i % 17) as f32 - 8.0) / 8.0).collect();
        let (mut y1, mut y2) = (vec![0f32; 6], vec![0f32; 6]);
        assert_eq!(dcls_model_predict(m, input.as_ptr(), 2, 128, 101, y1.as_mut_ptr(), 6), DclsStatus::Ok);
        assert_eq!(dcls_model_predict(loaded, input.as_ptr(), 2, 128, 101, y2.as_mut_ptr(), 6), DclsStatus::Ok);
        assert_eq!(y1, y2);
        assert!(y1.iter().all(|v| v.is_finite()));
        assert_eq!(dcls_model_predict(m, input.as_ptr(), 2, 128, 101, y1.as_mut_ptr(), 5), DclsStatus::Shape);
        dcls_model_free(loaded);
        dcls_model_free(m);
    }
}

#[test]
fn surgery_on_convnext_t_counts() {
    let m = new_model("convnext-t", "dsc7", 0);
    unsafe {
        let mut out = ptr::null_mut();
        let mut replaced = 0u32;
        assert_eq!(dcls_model_surgery(m, 23, 26, 0, 1, &mut out, &mut replaced), DclsStatus::Ok);
        assert_eq!(replaced, 18);
        let (mut before, mut after) = (0u64, 0u64);
        assert_eq!(dcls_model_depthwise_weight_count(m, &mut before), DclsStatus::Ok);
        assert_eq!(dcls_model_depthwise_weight_count(out, &mut after), DclsStatus::Ok);
        assert_eq!((before, after), (324_576, 321_984));
        let mut bad = ptr::null_mut();
        assert_eq!(dcls_model_surgery(m, 22, 26, 0, 1, &mut bad, ptr::null_mut()), DclsStatus::InvalidArgument);
        assert!(last_error().contains("dilated kernel size must be odd"));
        assert!(bad.is_null());
        dcls_model_free(out);
        dcls_model_free(m);
    }
}

#[test]
fn spectrogram_shape_and_errors() {
    let samples = vec![0.01f32; 320_000];
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(dcls_spectrogram_new(samples.as_ptr(), samples.len(), 32_000, false, &mut s), DclsStatus::Ok);
        let (mut mels, mut frames) = (0usize, 0usize);
        assert_eq!(dcls_spectrogram_dims(s, &mut mels, &mut frames), DclsStatus::Ok);
        assert_eq!((mels, frames), (128, 1001));
        let mut buf = vec![0f32; mels * frames];
        assert_eq!(dcls_spectrogram_copy(s, buf.as_mut_ptr(), buf.len()), DclsStatus::Ok);
        assert!(buf.iter().all(|v| v.is_finite()));
        dcls_spectrogram_free(s);

        let mut t = ptr::null_mut();
        assert_eq!(dcls_spectrogram_new(samples.as_ptr(), 44_100, 44_100, false, &mut t), DclsStatus::InvalidArgument);
        assert!(last_error().contains("sample-rate mismatch"));
        assert_eq!(dcls_spectrogram_new(samples.as_ptr(), 44_100, 44_100, true, &mut t), DclsStatus::Ok);
        dcls_spectrogram_free(t);
    }
}

#[test]
fn null_and_invalid_arguments() {
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(dcls_model_new(ptr::null(), ptr::null(), 0, 0, &mut m), DclsStatus::NullPointer);
        let preset = CString::new("huge").unwrap();
        let conv = CString::new("dsc7").unwrap();
        assert_eq!(dcls_model_new(preset.as_ptr(), conv.as_ptr(), 0, 0, &mut m), DclsStatus::InvalidArgument);
        assert!(last_error().contains("unknown preset"));
        let missing = CString::new("/nonexistent/model.ckpt").unwrap();
        assert_eq!(dcls_model_load(missing.as_ptr(), &mut m), DclsStatus::Io);
        let mut n = 0u64;
        assert_eq!(dcls_model_param_count(ptr::null(), &mut n), DclsStatus::NullPointer);
        dcls_model_free(ptr::null_mut());
        dcls_spectrogram_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_every_export() {
    let dir = env!("CARGO_MANIFEST_DIR");
    let header = std::fs::read_to_string(format!("{dir}/include/dcls.h")).unwrap();
    let source = std::fs::read_to_string(format!("{dir}/src/lib.rs")).unwrap();
    let exports: Vec<&str> = source
        .lines()
        .filter_map(|l| l.strip_prefix("pub unsafe extern \"C\" fn "))
        .map(|l| l.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 10);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    for item in ["typedef struct DclsModel DclsModel;", "typedef struct DclsSpectrogram DclsSpectrogram;", "DCLS_STATUS_PANIC = 6"] {
        assert!(header.contains(item), "{item}");
    }
}

/// Builds the static library into a private target directory (the test
/// binary's own build does not produce it), then compiles and runs a C
/// program against the generated header.
#[test]
fn c_program_links_against_static_library() {
    let manifest = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let target = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("ffi-staticlib");
    let status = std::process::Command::new(env!("CARGO"))
        .args(["build", "--quiet", "--release", "--lib", "--manifest-path"])
        .arg(manifest.join("Cargo.toml"))
        .arg("--target-dir")
        .arg(&target)
        .status()
        .expect("run cargo");
    assert!(status.success());
    let lib = target.join("release").join("libdcls_ffi.a");
    let exe = tempfile::tempdir().unwrap();
    let bin = exe.path().join("smoke");
    let status = std::process::Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("run cc");
    assert!(status.success());
    let out = std::process::Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("params "));
}
