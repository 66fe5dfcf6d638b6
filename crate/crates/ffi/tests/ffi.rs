use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use cl2s_ffi::*;

fn last_error() -> String {
    let p = cl2s_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn gradient(h: usize, w: usize) -> Vec<f32> {
    (0..h * w * 3)
        .map(|i| 0.2 + 0.6 * ((i * 37 % 101) as f32 / 100.0))
        .collect()
}

fn new_model(variant: &str, seed: u64) -> *mut Cl2sModel {
    let name = CString::new(variant).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { cl2s_model_new(name.as_ptr(), seed, &mut m) }, Cl2sStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn dehaze_writes_image_and_convex_attention() {
    let m = new_model("CL2S", 3);
    let n = unsafe { cl2s_model_head_count(m) };
    assert_eq!(n, 5);
    let (h, w) = (24, 20);
    let input = gradient(h, w);
    let mut out = vec![-1.0f32; h * w * 3];
    let mut attn = vec![-1.0f32; n * h * w];
    let st = unsafe { cl2s_model_dehaze(m, input.as_ptr(), h, w, out.as_mut_ptr(), attn.as_mut_ptr()) };
    assert_eq!(st, Cl2sStatus::Ok);
    assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    for p in 0..h * w {
        let s: f32 = (0..n).map(|k| attn[k * h * w + p]).sum();
        assert!((s - 1.0).abs() < 1e-5, "{s}");
    }
    unsafe { cl2s_model_free(m) };
}

#[test]
fn save_and_load_reproduce_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    let m = new_model("DM2F", 8);
    assert_eq!(unsafe { cl2s_model_save(m, path.as_ptr()) }, Cl2sStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { cl2s_model_load(path.as_ptr(), &mut loaded) }, Cl2sStatus::Ok);

    let (h, w) = (16, 16);
    let input = gradient(h, w);
    let mut a = vec![0.0f32; h * w * 3];
    let mut b = vec![0.0f32; h * w * 3];
    unsafe {
        assert_eq!(cl2s_model_dehaze(m, input.as_ptr(), h, w, a.as_mut_ptr(), ptr::null_mut()), Cl2sStatus::Ok);
        assert_eq!(cl2s_model_dehaze(loaded, input.as_ptr(), h, w, b.as_mut_ptr(), ptr::null_mut()), Cl2sStatus::Ok);
        cl2s_model_free(m);
        cl2s_model_free(loaded);
    }
    assert_eq!(a, b);
}

#[test]
fn errors_carry_codes_and_messages() {
    let bad = CString::new("NOPE").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { cl2s_model_new(bad.as_ptr(), 0, &mut m) }, Cl2sStatus::UnknownVariant);
    assert!(m.is_null());
    assert!(last_error().contains("unknown variant"), "{}", last_error());

    assert_eq!(unsafe { cl2s_model_new(ptr::null(), 0, &mut m) }, Cl2sStatus::NullPointer);

    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(unsafe { cl2s_model_load(missing.as_ptr(), &mut m) }, Cl2sStatus::Io);

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { cl2s_model_load(junk.as_ptr(), &mut m) }, Cl2sStatus::CheckpointParse);

    let model = new_model("FDNet", 0);
    let nan = vec![f32::NAN; 16 * 16 * 3];
    let mut out = vec![0.0f32; 16 * 16 * 3];
    let st = unsafe { cl2s_model_dehaze(model, nan.as_ptr(), 16, 16, out.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, Cl2sStatus::InvalidInput);
    assert!(last_error().contains("non-finite"));
    unsafe { cl2s_model_free(model) };
    unsafe { cl2s_model_free(ptr::null_mut()) };
}

#[test]
fn metrics_through_the_abi() {
    let (h, w) = (16, 16);
    let a = vec![0.5f32; h * w * 3];
    let b = vec![0.6f32; h * w * 3];
    let mut v = 0.0;
    assert_eq!(unsafe { cl2s_psnr(a.as_ptr(), b.as_ptr(), h, w, &mut v) }, Cl2sStatus::Ok);
    // f32 inputs: 0.6f32 - 0.5f32 is not exactly 0.1.
    assert!((v - 20.0).abs() < 1e-5, "{v}");
    assert_eq!(unsafe { cl2s_ssim(a.as_ptr(), a.as_ptr(), h, w, &mut v) }, Cl2sStatus::Ok);
    assert_eq!(v, 1.0);
    assert_eq!(unsafe { cl2s_ciede2000_mean(a.as_ptr(), a.as_ptr(), h, w, &mut v) }, Cl2sStatus::Ok);
    assert_eq!(v, 0.0);
    let small = vec![0.5f32; 4 * 4 * 3];
    assert_eq!(unsafe { cl2s_ssim(small.as_ptr(), small.as_ptr(), 4, 4, &mut v) }, Cl2sStatus::InvalidInput);

    let p = [50.0, 2.6772, -79.7751];
    let q = [50.0, 0.0, -82.7485];
    assert_eq!(unsafe { cl2s_ciede2000(p.as_ptr(), q.as_ptr(), &mut v) }, Cl2sStatus::Ok);
    assert!((v - 2.0425).abs() < 1e-4, "{v}");
}

#[test]
fn haze_synthesis_through_the_abi() {
    let (h, w) = (2, 2);
    let clear = vec![0.25f32; h * w * 3];
    let depth = vec![0.0f32, 1.0, 2.0, 3.0];
    let airlight = [0.9f32, 0.9, 0.9];
    let mut hazy = vec![0.0f32; h * w * 3];
    let st = unsafe { cl2s_synthesize_haze(clear.as_ptr(), depth.as_ptr(), h, w, airlight.as_ptr(), 0.5, hazy.as_mut_ptr()) };
    assert_eq!(st, Cl2sStatus::Ok);
    for (p, d) in depth.iter().enumerate() {
        let t = (-0.5 * *d as f64).exp();
        let expected = 0.25 * t + 0.9 * (1.0 - t);
        for c in 0..3 {
            assert!((hazy[p * 3 + c] as f64 - expected).abs() < 1e-6);
        }
    }
    let bad_a = [0.5f32, 0.9, 0.9];
    let st = unsafe { cl2s_synthesize_haze(clear.as_ptr(), depth.as_ptr(), h, w, bad_a.as_ptr(), 0.5, hazy.as_mut_ptr()) };
    assert_eq!(st, Cl2sStatus::InvalidInput);
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(cl2s_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api_and_parses_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("cl2s.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "cl2s_model_new",
        "cl2s_model_load",
        "cl2s_model_save",
        "cl2s_model_free",
        "cl2s_model_dehaze",
        "cl2s_model_head_count",
        "cl2s_psnr",
        "cl2s_ssim",
        "cl2s_ciede2000",
        "cl2s_ciede2000_mean",
        "cl2s_synthesize_haze",
        "cl2s_last_error_message",
        "typedef struct Cl2sModel Cl2sModel",
        "CL2S_STATUS_OK = 0",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let Ok(status) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c"])
        .arg(&header)
        .status()
    else {
        eprintln!("no C compiler on PATH; syntax check skipped");
        return;
    };
    assert!(status.success(), "cl2s.h does not compile as C99");
}
