use std::path::Path;
use std::process::Command;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxflow::flow::{checkpoint, Flow, FlowConfig};
use voxflow::phantom::{gen_subject, PhantomSpec};
use voxflow::temporal::{self, FinalActivation, TemporalConfig, TemporalParams};

fn voxflow(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_voxflow")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_model(dir: &Path) {
    let cfg = FlowConfig::new(8, 2, 1, 4).unwrap();
    let flow = Flow::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    checkpoint::save(&flow, &dir.join("flow.vflw")).unwrap();
    let tp = TemporalParams::<f32>::zeros(TemporalConfig::for_flow(&cfg, FinalActivation::Linear));
    temporal::save(&tp, &dir.join("temporal.vftp")).unwrap();
    let s = gen_subject(&PhantomSpec::desk(8), "x", 1, 1).unwrap();
    s.scans[0].volume.write(&dir.join("scan.vvol")).unwrap();
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(voxflow(&[]).0, 1);
    assert_eq!(voxflow(&["no-such-command"]).0, 1);
    assert_eq!(voxflow(&["--help"]).0, 0);
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = voxflow(&["phantom-gen", "--subjects", "2", "--years", "2", "--test-subjects", "3",
        "--out", p(dir.path())]);
    assert_eq!(code, 1, "{err}");
}

#[test]
fn unreadable_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    tiny_model(dir.path());
    let d = dir.path();
    let (code, _) = voxflow(&["forecast", "--input", p(&d.join("scan.vvol")), "--steps", "1",
        "--flow", p(&d.join("missing.vflw")), "--temporal", p(&d.join("temporal.vftp")), "--out", p(&d.join("o"))]);
    assert_eq!(code, 2);
    let bytes = std::fs::read(d.join("flow.vflw")).unwrap();
    std::fs::write(d.join("cut.vflw"), &bytes[..bytes.len() / 2]).unwrap();
    let (code, _) = voxflow(&["forecast", "--input", p(&d.join("scan.vvol")), "--steps", "1",
        "--flow", p(&d.join("cut.vflw")), "--temporal", p(&d.join("temporal.vftp")), "--out", p(&d.join("o"))]);
    assert_eq!(code, 2);
}

#[test]
fn zero_step_forecast_writes_only_the_reconstruction() {
    let dir = tempfile::tempdir().unwrap();
    tiny_model(dir.path());
    let d = dir.path();
    let out = d.join("fc");
    let (code, err) = voxflow(&["forecast", "--input", p(&d.join("scan.vvol")), "--steps", "0",
        "--flow", p(&d.join("flow.vflw")), "--temporal", p(&d.join("temporal.vftp")), "--out", p(&out)]);
    assert_eq!(code, 0, "{err}");
    assert!(out.join("step_00.vvol").exists());
    assert!(!out.join("step_01.vvol").exists());
    let rows = std::fs::read_to_string(out.join("forecast.csv")).unwrap();
    assert_eq!(rows.lines().count(), 2);
    assert!(out.join("run.json").exists());
}

#[test]
fn verify_passes_and_records_checks() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = voxflow(&["--precision", "f64", "verify", "--volumes", "4", "--width", "4",
        "--out", p(dir.path())]);
    assert_eq!(code, 0, "{err}");
    let csv = std::fs::read_to_string(dir.path().join("checks.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn quantify_reads_a_generated_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let (data, q) = (dir.path().join("data"), dir.path().join("q"));
    let (code, err) = voxflow(&["phantom-gen", "--subjects", "2", "--years", "3", "--res", "24", "--seed", "4",
        "--out", p(&data)]);
    assert_eq!(code, 0, "{err}");
    let (code, err) = voxflow(&["quantify", "--input", p(&data), "--out", p(&q), "--slices"]);
    assert_eq!(code, 0, "{err}");
    let curves = std::fs::read_to_string(q.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 2 * 3);
    assert!(std::fs::read_dir(&q).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().ends_with(".pgm")));
}
