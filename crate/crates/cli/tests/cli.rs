use std::path::Path;
use std::process::{Command, Output};

fn meshfit(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meshfit"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("meshfit runs")
}

fn write_band(dir: &Path) {
    let out = meshfit(&["fixtures", "--name", "band-on-torus-arm", "--dir", "."], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn band_fit<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "fit",
        "--base",
        "band-on-torus-arm.base.obj",
        "--object",
        "band-on-torus-arm.object.obj",
        "--region",
        "band-on-torus-arm.region.txt",
        "--config",
        "band-on-torus-arm.toml",
        "--out",
        out,
    ];
    args.extend_from_slice(extra);
    args
}

fn report(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn fixtures_writes_every_scene() {
    let dir = tempfile::tempdir().unwrap();
    let out = meshfit(&["fixtures", "--dir", "."], dir.path());
    assert!(out.status.success());
    for name in ["cap-on-sphere", "ring-on-cylinder", "band-on-torus-arm", "plate-on-plane", "glasses-bar-on-bust-proxy"] {
        for suffix in ["base.obj", "object.obj", "region.txt", "toml"] {
            assert!(dir.path().join(format!("{name}.{suffix}")).is_file(), "{name}.{suffix}");
        }
    }
}

#[test]
fn full_fit_is_certified_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    write_band(dir.path());
    let out = meshfit(&band_fit("fit.obj", &["--trace", "--dump-jacobians", "--verbose"]), dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&dir.path().join("fit.obj.report.json"));
    assert_eq!(r["certified"], true);
    assert_eq!(r["final_metrics"]["intersecting_face_count"], 0);
    assert_eq!(r["final_metrics"]["max_penetration"], 0.0);
    assert!(r["timings_ms"].is_object());
    let steps: Vec<&str> = r["steps"].as_array().unwrap().iter().map(|s| s["step"].as_str().unwrap()).collect();
    assert_eq!(steps, ["init", "step1", "step2", "step3", "step4"]);
    let trace = std::fs::read_to_string(dir.path().join("fit.obj.trace.csv")).unwrap();
    assert!(trace.starts_with("step,iteration,loss\n"));
    let jac = std::fs::read_to_string(dir.path().join("fit.obj.jacobians.txt")).unwrap();
    let object = std::fs::read_to_string(dir.path().join("band-on-torus-arm.object.obj")).unwrap();
    let faces = object.lines().filter(|l| l.starts_with("f ")).count();
    assert_eq!(jac.lines().count(), faces);
    assert!(dir.path().join("fit.obj").is_file());
}

#[test]
fn skipping_step_two_needs_force_ablation() {
    let dir = tempfile::tempdir().unwrap();
    write_band(dir.path());
    let out = meshfit(&band_fit("a.obj", &["--skip-step", "2"]), dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("force_ablation"));
    // The partial report is still written.
    assert!(dir.path().join("a.obj.report.json").is_file());
    assert!(!dir.path().join("a.obj").exists());

    let out = meshfit(&band_fit("b.obj", &["--skip-step", "2", "--force-ablation"]), dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&dir.path().join("b.obj.report.json"));
    assert_eq!(r["certified"], false);
    assert!(!r["warnings"].as_array().unwrap().is_empty());
}

#[test]
fn explicit_moduli_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_band(dir.path());
    let out = meshfit(
        &band_fit("m.obj", &["--youngs", "500", "--poisson", "0.3", "--skip-step", "4"]),
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&dir.path().join("m.obj.report.json"));
    assert_eq!(r["material_name"], "explicit");
    assert_eq!(r["material"]["clamped"], true);
    assert_eq!(r["material"]["youngs_modulus"], 1000.0);
}

#[test]
fn usage_and_input_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    write_band(dir.path());
    let conflicting = meshfit(&band_fit("c.obj", &["--material", "leather", "--youngs", "1e5", "--poisson", "0.3"]), dir.path());
    assert_eq!(conflicting.status.code(), Some(1));
    let bad_step = meshfit(&band_fit("c.obj", &["--skip-step", "5"]), dir.path());
    assert_eq!(bad_step.status.code(), Some(1));
    let missing = meshfit(
        &["fit", "--base", "nope.obj", "--object", "nope.obj", "--region", "nope.txt", "--out", "c.obj"],
        dir.path(),
    );
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.obj"));
    let unknown = meshfit(&band_fit("c.obj", &["--material", "velvet"]), dir.path());
    assert_eq!(unknown.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = meshfit(&["fit", "--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("--skip-step"));
}
