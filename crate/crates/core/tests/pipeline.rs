use meshfit::error::Error;
use meshfit::fixtures::fixture;
use meshfit::mesh::{RegionMask, TriangleMesh};
use meshfit::pipeline::{fixture_config, run_files, run_pipeline, write_fixture, FitReport, RunConfig, RunPaths};

fn band_files(dir: &std::path::Path) -> (RunPaths, RunConfig) {
    let files = write_fixture(&fixture("band-on-torus-arm").unwrap(), dir).unwrap();
    let config = RunConfig::load(&files.config).unwrap();
    let paths = RunPaths {
        base: files.base,
        object: files.object,
        region: files.region,
        output: dir.join("fit.obj"),
        trace: true,
        dump_jacobians: true,
    };
    (paths, config)
}

#[test]
fn written_fixture_reloads_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixture("ring-on-cylinder").unwrap();
    let files = write_fixture(&f, dir.path()).unwrap();
    let base = TriangleMesh::load(&files.base).unwrap();
    let object = TriangleMesh::load(&files.object).unwrap();
    assert_eq!(base.faces(), f.base.faces());
    assert_eq!(base.vertices(), f.base.vertices());
    assert_eq!(object.vertices(), f.object.vertices());
    let region = RegionMask::load(&files.region, &base).unwrap();
    assert_eq!(region.face_indices(), f.region.face_indices());
    assert_eq!(RunConfig::load(&files.config).unwrap(), fixture_config(&f));
}

#[test]
fn file_run_writes_mesh_report_and_extras() {
    let dir = tempfile::tempdir().unwrap();
    let (paths, config) = band_files(dir.path());
    let base_before = std::fs::read(&paths.base).unwrap();
    let (report, code) = run_files(&paths, &config).unwrap();
    assert_eq!(code, 0);
    assert!(report.certified);
    assert_eq!(std::fs::read(&paths.base).unwrap(), base_before);

    let out = TriangleMesh::load(&paths.output).unwrap();
    let object = TriangleMesh::load(&paths.object).unwrap();
    assert_eq!(out.faces(), object.faces());
    let on_disk: FitReport = serde_json::from_str(&std::fs::read_to_string(paths.report_path()).unwrap()).unwrap();
    assert_eq!(on_disk.certified, report.certified);
    assert_eq!(on_disk.final_metrics, report.final_metrics);
    assert_eq!(on_disk.config, config);

    let trace = std::fs::read_to_string(paths.trace_path()).unwrap();
    let rows = trace.lines().count() - 1;
    let iterations: usize = report.steps.iter().filter(|s| s.step != "init" && s.step != "step2").map(|s| s.iterations).sum();
    assert_eq!(rows, iterations);
    let jacobians = std::fs::read_to_string(paths.jacobians_path()).unwrap();
    assert_eq!(jacobians.lines().count(), object.num_faces());
}

#[test]
fn output_stays_in_input_units() {
    let f = fixture("band-on-torus-arm").unwrap();
    let mut config = fixture_config(&f);
    config.steps.step4 = false;
    let out = run_pipeline(&f.base, &f.object, &f.region, &config).unwrap();
    // Rigid steps only: edge lengths scale by the final pose scale alone.
    let pose_scale = out.report.steps.last().unwrap().transform.unwrap().scale;
    let edge = |m: &TriangleMesh| (m.vertices()[m.faces()[0][0]] - m.vertices()[m.faces()[0][1]]).norm();
    assert!((edge(&out.object) / edge(&f.object) - pose_scale).abs() < 1e-9);
    assert!((out.report.normalization_scale * f.base.bbox_diagonal() - 1.0).abs() < 1e-12);
}

#[test]
fn missing_trajectory_step_is_a_hard_error_with_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    let (paths, mut config) = band_files(dir.path());
    config.steps.step2 = false;
    let err = run_files(&paths, &config).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(!paths.output.exists());
    let partial: FitReport = serde_json::from_str(&std::fs::read_to_string(paths.report_path()).unwrap()).unwrap();
    assert!(!partial.certified);
    assert!(partial.steps.iter().any(|s| s.step == "step1"));
}

#[test]
fn bad_region_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let (paths, config) = band_files(dir.path());
    std::fs::write(&paths.region, "0\n999999\n").unwrap();
    let err = run_files(&paths, &config).unwrap_err();
    assert!(!paths.report_path().exists());
    assert!(format!("{err}").contains("region.txt"), "{err}");
}
