use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use otfm::degradation::{degrade_spatial, MtfSpec};
use otfm::imagery::load_raster;

fn otfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otfm")).args(args).output().expect("run otfm binary")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn fails_with(out: &Output, code: i32, kind: &str) {
    assert_eq!(out.status.code(), Some(code), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1, "one error line expected: {err}");
    assert!(err.starts_with(&format!("error kind={kind} code={code} ")), "{err}");
}

fn synth(dir: &Path, seed: &str) {
    ok(&otfm(&["synth", "--seed", seed, "--count", "2", "--hr-size", "32", "--out-dir", s(dir)]));
}

#[test]
fn synth_is_deterministic_and_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    synth(&a, "5");
    synth(&b, "5");
    synth(&c, "6");
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 7, "{names:?}");
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.contains("scene0001"));
    for name in names.iter().filter(|n| n.to_str().unwrap().ends_with(".otfm")) {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
    assert_ne!(fs::read(a.join("scene0000_lrms.otfm")).unwrap(), fs::read(c.join("scene0000_lrms.otfm")).unwrap());

    let again = otfm(&["synth", "--seed", "5", "--count", "2", "--hr-size", "32", "--out-dir", s(&a)]);
    fails_with(&again, 2, "argument");
    ok(&otfm(&["synth", "--seed", "5", "--count", "2", "--hr-size", "32", "--out-dir", s(&a), "--force"]));
}

#[test]
fn train_fuse_eval_bench_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    synth(&data, "1");
    let manifest = data.join("manifest.txt");
    let text = ok(&otfm(&[
        "train",
        "--desk",
        "--manifest",
        s(&manifest),
        "--run-dir",
        s(&run),
        "--max-steps",
        "2",
        "--set",
        "model.base_channels=8",
        "--set",
        "potential.channels=4",
        "--set",
        "train.log_every=1",
        "--set",
        "train.batch_size=2",
    ]));
    assert!(text.contains("final.otfm"), "{text}");
    let log = fs::read_to_string(run.join("log.txt")).unwrap();
    assert_eq!(log.lines().count(), 2, "{log}");
    assert!(log.starts_with("step=1 flow="));
    assert!(fs::read_to_string(run.join("run.txt")).unwrap().contains("base_channels = 8"));
    let ck = run.join("final.otfm");

    let fused = tmp.path().join("fused.otfm");
    let pan = data.join("scene0000_pan.otfm");
    let lrms = data.join("scene0000_lrms.otfm");
    let text = ok(&otfm(&["fuse", "--checkpoint", s(&ck), "--pan", s(&pan), "--lrms", s(&lrms), "--out", s(&fused)]));
    assert!(text.contains("4x32x32"), "{text}");
    assert!(fused.exists());

    let report_dir = tmp.path().join("eval");
    let text = ok(&otfm(&["eval", "--manifest", s(&manifest), "--checkpoint", s(&ck), "--out-dir", s(&report_dir)]));
    for name in ["sam", "ergas", "q2n", "scc"] {
        assert!(text.contains(&format!("metric={name} mean=")), "{text}");
    }
    assert!(report_dir.join("report.txt").exists());
    let oracle = ok(&otfm(&["eval", "--manifest", s(&manifest), "--method", "oracle"]));
    assert!(oracle.contains("metric=sam mean=0 "), "{oracle}");
    let full = ok(&otfm(&["eval", "--manifest", s(&manifest), "--protocol", "full"]));
    assert!(full.contains("metric=hqnr"), "{full}");

    let bench = ok(&otfm(&["bench", "--checkpoint", s(&ck), "--hr-size", "32", "--steps", "1,8", "--repeats", "3"]));
    assert_eq!(bench.lines().count(), 3, "{bench}");

    fails_with(
        &otfm(&["fuse", "--checkpoint", s(&ck), "--pan", s(&pan), "--lrms", s(&lrms), "--out", s(&fused), "--steps", "0"]),
        2,
        "argument",
    );
    let broken = tmp.path().join("broken.otfm");
    let mut bytes = fs::read(&ck).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    fs::write(&broken, bytes).unwrap();
    fails_with(
        &otfm(&["fuse", "--checkpoint", s(&broken), "--pan", s(&pan), "--lrms", s(&lrms), "--out", s(&fused)]),
        3,
        "corruption",
    );
}

#[test]
fn degrade_applies_the_wald_protocol() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "2");
    fs::copy(data.join("scene0000_pan.otfm"), tmp.path().join("obs_pan.otfm")).unwrap();
    fs::copy(data.join("scene0000_lrms.otfm"), tmp.path().join("obs_ms.otfm")).unwrap();
    let text = ok(&otfm(&["degrade", "--in", s(&tmp.path().join("obs")), "--out", s(&tmp.path().join("low"))]));
    assert!(text.contains("lrms 4x2x2"), "{text}");
    let observed = load_raster(tmp.path().join("obs_ms.otfm")).unwrap();
    let reference = load_raster(tmp.path().join("low_hrms.otfm")).unwrap();
    assert_eq!(reference.data(), observed.data());
    let low = load_raster(tmp.path().join("low_lrms.otfm")).unwrap();
    assert_eq!(low, degrade_spatial(&observed, &MtfSpec::uniform(4, 4)).unwrap());
    assert_eq!(load_raster(tmp.path().join("low_pan.otfm")).unwrap().shape(), (1, 8, 8));
    fails_with(&otfm(&["degrade", "--in", s(&tmp.path().join("absent")), "--out", s(&tmp.path().join("x"))]), 3, "io");
}

#[test]
fn usage_and_missing_inputs() {
    let help = ok(&otfm(&["--help"]));
    for cmd in ["synth", "degrade", "train", "fuse", "eval", "bench"] {
        assert!(help.contains(cmd), "{help}");
    }
    assert_eq!(otfm(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(otfm(&["synth"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.txt");
    fails_with(&otfm(&["eval", "--manifest", s(&missing)]), 3, "io");
    fails_with(
        &otfm(&["train", "--desk", "--run-dir", s(tmp.path()), "--set", "train.nonsense=1"]),
        2,
        "argument",
    );
}
