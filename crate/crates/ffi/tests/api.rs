use std::ffi::CString;
use std::path::Path;
use std::process::Command;
use std::ptr;

use otfm::config::RunConfig;
use otfm::imagery::synth_scene;
use otfm::networks::{MappingNetConfig, PotentialNetConfig};
use otfm::sampler::FusionModel;
use otfm::trainer::Trainer;
use otfm_ffi::*;

fn save_checkpoint(dir: &Path) -> std::path::PathBuf {
    let mut cfg = RunConfig::desk();
    cfg.model = MappingNetConfig::new(4, 8, 2);
    cfg.potential = PotentialNetConfig::new(4, 4);
    let mut ck = Trainer::new(cfg).unwrap().checkpoint();
    for i in 0..ck.state.theta_ema.len() {
        for (k, v) in ck.state.theta_ema.get_mut(i).data_mut().iter_mut().enumerate() {
            *v += 0.02 * ((k % 5) as f32 - 2.0);
        }
    }
    let path = dir.join("model.otfm");
    ck.save(&path).unwrap();
    path
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn fuse_through_the_c_api_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = save_checkpoint(dir.path());
    let mut model: *mut OtfmModel = ptr::null_mut();
    assert_eq!(unsafe { otfm_model_load(cpath(&path).as_ptr(), true, &mut model) }, OtfmStatus::Ok);
    let (mut bands, mut ratio) = (0, 0);
    assert_eq!(unsafe { otfm_model_info(model, &mut bands, &mut ratio) }, OtfmStatus::Ok);
    assert_eq!((bands, ratio), (4, 4));

    let scene = synth_scene(11, 4, 16, 4).unwrap();
    let mut out = vec![0f32; 4 * 16 * 16];
    let status = unsafe {
        otfm_fuse(model, scene.pan.data().as_ptr(), scene.lrms.data().as_ptr(), 4, 4, 4, 1, out.as_mut_ptr(), out.len())
    };
    assert_eq!(status, OtfmStatus::Ok);
    let direct = FusionModel::load(&path, true).unwrap().fuse(&scene.pan, &scene.lrms, 1).unwrap();
    assert_eq!(out, direct.data());

    let short = unsafe {
        otfm_fuse(model, scene.pan.data().as_ptr(), scene.lrms.data().as_ptr(), 4, 4, 4, 1, out.as_mut_ptr(), 10)
    };
    assert_eq!(short, OtfmStatus::Argument);
    let zero_steps = unsafe {
        otfm_fuse(model, scene.pan.data().as_ptr(), scene.lrms.data().as_ptr(), 4, 4, 4, 0, out.as_mut_ptr(), out.len())
    };
    assert_eq!(zero_steps, OtfmStatus::Argument);
    let wrong_bands = unsafe {
        otfm_fuse(model, scene.pan.data().as_ptr(), scene.lrms.data().as_ptr(), 3, 4, 4, 1, out.as_mut_ptr(), out.len())
    };
    assert_eq!(wrong_bands, OtfmStatus::Argument);
    unsafe { otfm_model_free(model) };
}

#[test]
fn load_errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut model: *mut OtfmModel = ptr::null_mut();
    let missing = cpath(&dir.path().join("none.otfm"));
    assert_eq!(unsafe { otfm_model_load(missing.as_ptr(), true, &mut model) }, OtfmStatus::Io);
    assert!(model.is_null());

    let path = save_checkpoint(dir.path());
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert_eq!(unsafe { otfm_model_load(cpath(&path).as_ptr(), true, &mut model) }, OtfmStatus::Corruption);

    std::fs::write(&path, b"not a checkpoint at all, just some bytes padding it out").unwrap();
    assert_eq!(unsafe { otfm_model_load(cpath(&path).as_ptr(), true, &mut model) }, OtfmStatus::Format);
    assert_eq!(unsafe { otfm_model_load(ptr::null(), true, &mut model) }, OtfmStatus::NullPointer);
    unsafe { otfm_model_free(ptr::null_mut()) };
}

#[test]
fn metrics_through_the_c_api() {
    let a = synth_scene(1, 4, 16, 4).unwrap().hrms_ref.unwrap();
    let b = synth_scene(2, 4, 16, 4).unwrap().hrms_ref.unwrap();
    let (mut sam, mut ergas) = (0.0, 0.0);
    assert_eq!(unsafe { otfm_sam(a.data().as_ptr(), b.data().as_ptr(), 4, 16, 16, &mut sam) }, OtfmStatus::Ok);
    assert_eq!(sam, otfm::metrics::sam(&a, &b).unwrap());
    assert_eq!(
        unsafe { otfm_ergas(a.data().as_ptr(), b.data().as_ptr(), 4, 16, 16, 4, &mut ergas) },
        OtfmStatus::Ok
    );
    assert_eq!(ergas, otfm::metrics::ergas(&a, &b, 4).unwrap());
    assert_eq!(unsafe { otfm_sam(ptr::null(), b.data().as_ptr(), 4, 16, 16, &mut sam) }, OtfmStatus::NullPointer);
}

/// Compile a small C program against the generated header and static library.
#[test]
fn c_program_links_against_the_header() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = manifest.join("include/otfm.h");
    assert!(header.exists(), "build script writes the header");
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let lib = deps.parent().unwrap().join("libotfm_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no static library or C compiler");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "hqnr=0.954 err=1 null=7");
}
