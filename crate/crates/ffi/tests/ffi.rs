use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use autocompress_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(ac_last_error()) }.to_string_lossy().into_owned()
}

fn build(classes: u32, seed: u64) -> *mut AcNetwork {
    let arch = CString::new("convnet-s").unwrap();
    let mut net = ptr::null_mut();
    let st = unsafe { ac_network_build(arch.as_ptr(), 1, 12, 12, classes, seed, &mut net) };
    assert_eq!(st, AcStatus::Ok, "{}", last_error());
    net
}

fn forward(net: *const AcNetwork, input: &[f64], batch: usize, classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * classes];
    let st = unsafe { ac_network_forward(net, input.as_ptr(), batch, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, AcStatus::Ok, "{}", last_error());
    out
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(ac_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn build_count_forward() {
    let net = build(3, 1);
    let mut counts = AcCounts::default();
    assert_eq!(unsafe { ac_network_counts(net, &mut counts) }, AcStatus::Ok);
    assert_eq!(counts.conv_params, 13_968);
    assert!(counts.total_params > counts.conv_params);
    let mut shape = [0u32; 3];
    let mut classes = 0;
    assert_eq!(unsafe { ac_network_shape(net, shape.as_mut_ptr(), &mut classes) }, AcStatus::Ok);
    assert_eq!((shape, classes), ([1, 12, 12], 3));
    let x: Vec<f64> = (0..2 * 144).map(|i| (i % 7) as f64 / 7.0).collect();
    let y = forward(net, &x, 2, 3);
    assert!(y.iter().all(|v| v.is_finite()));
    unsafe { ac_network_free(net) };
}

#[test]
fn null_and_bad_arguments() {
    let mut net = ptr::null_mut();
    let st = unsafe { ac_network_build(ptr::null(), 1, 12, 12, 3, 0, &mut net) };
    assert_eq!(st, AcStatus::NullArgument);
    assert!(last_error().contains("null"));
    let arch = CString::new("resnet-1000").unwrap();
    let st = unsafe { ac_network_build(arch.as_ptr(), 1, 12, 12, 3, 0, &mut net) };
    assert_eq!(st, AcStatus::Config);
    assert!(last_error().contains("resnet-1000"));
    assert!(net.is_null());
    let mut acc = 0.0;
    assert_eq!(unsafe { ac_evaluate(ptr::null(), ptr::null(), &mut acc) }, AcStatus::NullArgument);
    assert_eq!(unsafe { ac_dataset_len(ptr::null()) }, 0);
}

#[test]
fn save_load_roundtrip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.acmp");
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let net = build(4, 9);
    assert_eq!(unsafe { ac_network_save(net, cpath.as_ptr()) }, AcStatus::Ok, "{}", last_error());
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { ac_network_load(cpath.as_ptr(), &mut loaded) }, AcStatus::Ok, "{}", last_error());
    let x: Vec<f64> = (0..144).map(|i| (i as f64).sin().abs()).collect();
    assert_eq!(forward(net, &x, 1, 4), forward(loaded, &x, 1, 4));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[5] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    let mut broken = ptr::null_mut();
    assert_eq!(unsafe { ac_network_load(cpath.as_ptr(), &mut broken) }, AcStatus::Format);
    assert!(last_error().contains("version"), "{}", last_error());
    assert!(broken.is_null());
    unsafe {
        ac_network_free(net);
        ac_network_free(loaded);
    }
}

#[test]
fn train_and_evaluate() {
    let mut data = ptr::null_mut();
    assert_eq!(unsafe { ac_dataset_synth(3, 300, 3, 12, &mut data) }, AcStatus::Ok);
    assert_eq!(unsafe { ac_dataset_len(data) }, 300);
    let net = build(3, 2);
    assert_eq!(unsafe { ac_train(net, data, 2, 1e-3, 32, 5) }, AcStatus::Ok, "{}", last_error());
    let mut acc = 0.0;
    assert_eq!(unsafe { ac_evaluate(net, data, &mut acc) }, AcStatus::Ok);
    assert!(acc > 0.9, "accuracy {acc}");
    unsafe {
        ac_network_free(net);
        ac_dataset_free(data);
    }
}

#[test]
fn compress_through_c_abi() {
    let cfg = CString::new(
        "classes = 3\nsynth_train = 240\nsynth_test = 90\nbaseline_epochs = 2\nrounds = 1\n\
         admm_iterations = 2\nretrain_epochs = 1\nsa_iters = 2\nsa_stop_ratio = 0.5\n\
         purify = false\nacc_floor = 0\n",
    )
    .unwrap();
    let mut out = ptr::null_mut();
    let (mut rate, mut acc) = (0.0, 0.0);
    let st = unsafe { ac_compress(cfg.as_ptr(), ptr::null(), ptr::null(), &mut out, &mut rate, &mut acc) };
    assert_eq!(st, AcStatus::Ok, "{}", last_error());
    assert!((1.8..=2.3).contains(&rate), "rate {rate}");
    assert!((0.0..=1.0).contains(&acc));
    let mut counts = AcCounts::default();
    assert_eq!(unsafe { ac_network_counts(out, &mut counts) }, AcStatus::Ok);
    assert!(((13_968.0 / counts.conv_params as f64) - rate).abs() < 1e-9);
    unsafe { ac_network_free(out) };

    let bad = CString::new("no_such_key = 1\n").unwrap();
    let st = unsafe { ac_compress(bad.as_ptr(), ptr::null(), ptr::null(), &mut out, ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(st, AcStatus::Config);
}

fn header() -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/autocompress.h");
    std::fs::read_to_string(path).expect("build script writes the header")
}

#[test]
fn header_declares_the_api() {
    let h = header();
    for name in [
        "ac_last_error",
        "ac_version",
        "ac_network_build",
        "ac_network_free",
        "ac_network_load",
        "ac_network_save",
        "ac_network_shape",
        "ac_network_forward",
        "ac_network_counts",
        "ac_dataset_synth",
        "ac_dataset_load_idx",
        "ac_dataset_len",
        "ac_dataset_free",
        "ac_train",
        "ac_evaluate",
        "ac_compress",
    ] {
        assert!(h.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(h.contains("typedef struct AcNetwork AcNetwork;"));
    assert!(h.contains("AC_STATUS_PANIC = 11"));
}

/// Compiles and runs a C program against the header and the static library.
#[test]
fn c_program_links_and_runs() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(|p| p.parent()).unwrap().to_path_buf();
    let lib = profile_dir.join("libautocompress_ffi.a");
    if !lib.exists() {
        // `cargo test` only builds the rlib; produce the static library too.
        let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
        let mut cmd = Command::new(cargo);
        cmd.args(["build", "-p", "autocompress-ffi", "--lib"]);
        if profile_dir.file_name().is_some_and(|n| n == "release") {
            cmd.arg("--release");
        }
        assert!(cmd.status().unwrap().success(), "building the static library failed");
    }
    assert!(lib.exists(), "static library not found at {}", lib.display());
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("C compiler available");
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
