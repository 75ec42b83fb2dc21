//! End-to-end fitting: initial pose, tight fit, intersection resolution,
//! contact-aware refinement and deformation, with a structured report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::aabb::Vec3;
use crate::deform::{deformed_penetration, jacobians_to_text, step4_deform, DeformationConfig};
use crate::energy::{MaterialParams, MaterialTable, RIGID_MASK_THRESHOLD};
use crate::error::{Error, Result};
use crate::geometry::PenetrationStats;
use crate::init::{heuristic_init, InitConfig};
use crate::mesh::{Normalization, RegionFrame, RegionMask, TriangleMesh};
use crate::optim::OptimizerConfig;
use crate::rigid::{step1_tight_fit, step3_finetune, LossBreakdown, RigidOptions, ScaleBounds, StepResult};
use crate::scene::Scene;
use crate::trajectory::{solve, SamplingConfig, TrajectoryResult};
use crate::transform::{ScaledRigidTransform, TransformRecord};

pub const DEFAULT_MATERIAL: &str = "leather";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepsEnabled {
    pub init: bool,
    pub step1: bool,
    pub step2: bool,
    pub step3: bool,
    pub step4: bool,
}

impl Default for StepsEnabled {
    fn default() -> Self {
        StepsEnabled {
            init: true,
            step1: true,
            step2: true,
            step3: true,
            step4: true,
        }
    }
}

impl StepsEnabled {
    /// Disables step `n` (0 = init, 1..=4 = the optimization steps).
    pub fn disable(&mut self, n: usize) -> Result<()> {
        match n {
            0 => self.init = false,
            1 => self.step1 = false,
            2 => self.step2 = false,
            3 => self.step3 = false,
            4 => self.step4 = false,
            _ => return Err(Error::Config(format!("no step {n}; steps are numbered 0 to 4"))),
        }
        Ok(())
    }
}

macro_rules! rigid_step_config {
    ($name:ident, $label:literal, $lo:expr, $hi:expr) => {
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct $name {
            pub mask_threshold: f64,
            /// Scale bounds as factors of the tight-fit scale.
            pub scale_range: [f64; 2],
        }

        impl Default for $name {
            fn default() -> Self {
                $name {
                    mask_threshold: RIGID_MASK_THRESHOLD,
                    scale_range: [$lo, $hi],
                }
            }
        }

        impl $name {
            pub fn validate(&self) -> Result<()> {
                let [lo, hi] = self.scale_range;
                if !(self.mask_threshold > 0.0) || !(lo > 0.0 && lo <= 1.0 && hi >= 1.0 && hi.is_finite()) {
                    return Err(Error::Config(format!(
                        "{}: mask_threshold must be positive and scale_range must bracket 1",
                        $label
                    )));
                }
                Ok(())
            }
        }
    };
}

rigid_step_config!(Step1Config, "step1", 0.5, 2.0);
rigid_step_config!(Step3Config, "step3", 0.8, 1.25);

/// Run settings. Everything is optional in the TOML form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the trajectory sampler and the initializer jitter.
    pub seed: u64,
    pub leaf_size: usize,
    pub barrier_width: f64,
    /// Named material; mutually exclusive with the explicit moduli.
    pub material: Option<String>,
    pub youngs_modulus: Option<f64>,
    pub poisson_ratio: Option<f64>,
    /// Extra or overriding named materials, `name = [E, nu]`.
    pub materials: MaterialTable,
    /// Attachment direction, overriding the region's mean normal.
    pub region_normal: Option<[f64; 3]>,
    /// Starting pose in input units, `x = s R (v - pivot) + pivot + t`.
    /// When present the initializer is skipped.
    pub initial_transform: Option<TransformRecord>,
    pub steps: StepsEnabled,
    /// Allow Step 3 to start from an intersecting pose, uncertified.
    pub force_ablation: bool,
    pub report_timings: bool,
    pub optimizer: OptimizerConfig,
    pub init: InitConfig,
    pub step1: Step1Config,
    pub trajectory: SamplingConfig,
    pub step3: Step3Config,
    pub deformation: DeformationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            leaf_size: crate::bvh::DEFAULT_LEAF_SIZE,
            barrier_width: crate::energy::DEFAULT_BARRIER_WIDTH,
            material: None,
            youngs_modulus: None,
            poisson_ratio: None,
            materials: MaterialTable(BTreeMap::new()),
            region_normal: None,
            initial_transform: None,
            steps: StepsEnabled::default(),
            force_ablation: false,
            report_timings: false,
            optimizer: OptimizerConfig::default(),
            init: InitConfig::default(),
            step1: Step1Config::default(),
            trajectory: SamplingConfig::default(),
            step3: Step3Config::default(),
            deformation: DeformationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.leaf_size == 0 {
            return Err(Error::Config("leaf_size must be at least 1".into()));
        }
        if !(self.barrier_width > 0.0) {
            return Err(Error::Config("barrier_width must be positive".into()));
        }
        self.optimizer.validate()?;
        self.init.validate()?;
        self.trajectory.validate()?;
        self.deformation.validate()?;
        self.step1.validate()?;
        self.step3.validate()?;
        self.resolve_material()?;
        Ok(())
    }

    /// Material name for the report and its parameters.
    pub fn resolve_material(&self) -> Result<(String, MaterialParams)> {
        let table = MaterialTable::default().merged(&self.materials);
        match (&self.material, self.youngs_modulus, self.poisson_ratio) {
            (Some(_), Some(_), _) | (Some(_), _, Some(_)) => Err(Error::Config(
                "give either a material name or explicit moduli, not both".into(),
            )),
            (None, Some(e), Some(nu)) => Ok(("explicit".into(), crate::energy::lame_from_material(e, nu)?)),
            (None, Some(_), None) | (None, None, Some(_)) => Err(Error::Config(
                "explicit moduli need both youngs_modulus and poisson_ratio".into(),
            )),
            (Some(name), None, None) => Ok((name.clone(), table.lookup(name)?)),
            (None, None, None) => Ok((DEFAULT_MATERIAL.into(), table.lookup(DEFAULT_MATERIAL)?)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub intersecting_face_count: usize,
    pub max_penetration: f64,
}

impl From<PenetrationStats> for Metrics {
    fn from(s: PenetrationStats) -> Self {
        Metrics {
            intersecting_face_count: s.intersecting_face_count,
            max_penetration: s.max_penetration,
        }
    }
}

impl Metrics {
    pub fn is_clear(&self) -> bool {
        self.intersecting_face_count == 0 && self.max_penetration == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitDetails {
    pub scores: Vec<f64>,
    pub chosen: usize,
    pub degenerate_axes: bool,
    pub user_supplied: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDetails {
    pub candidates_tried: usize,
    pub candidates_accepted: usize,
    pub rounds: usize,
    pub accepted_timesteps: usize,
    pub best_candidate: Option<usize>,
    pub best_u: Option<f64>,
    pub partial: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformDetails {
    pub max_displacement: f64,
    pub tree_generation: u64,
    pub barrier_overflow: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: String,
    /// Pose in normalized units. Absent after deformation.
    pub transform: Option<TransformRecord>,
    pub losses: LossBreakdown,
    pub metrics: Metrics,
    pub iterations: usize,
    pub converged: bool,
    pub frozen: bool,
    pub certified: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<InitDetails>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<TrajectoryDetails>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deformation: Option<DeformDetails>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Input units times this scale give the normalized units used by
    /// every threshold and every number below.
    pub normalization_scale: f64,
    pub material_name: String,
    pub material: MaterialParams,
    pub steps: Vec<StepReport>,
    pub final_metrics: Metrics,
    /// Proximity loss of the output at the rigid mask threshold.
    pub final_proximity: f64,
    pub certified: bool,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings_ms: Option<BTreeMap<String, f64>>,
    pub config: RunConfig,
}

impl FitReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: String,
    pub iteration: usize,
    pub loss: f64,
}

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("step,iteration,loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, r.iteration, r.loss));
    }
    out
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    /// Fitted object in input units, OBJ records of the input preserved.
    pub object: TriangleMesh,
    pub report: FitReport,
    pub trace: Vec<TraceRow>,
    /// Final per-face Jacobians when deformation ran.
    pub jacobians: Option<Vec<nalgebra::Matrix3<f64>>>,
    /// The normalized scene the steps ran on.
    pub scene: Scene,
    pub trajectory: Option<TrajectoryResult>,
    /// Rigid pose handed to the deformation step.
    pub rigid_pose: ScaledRigidTransform,
    /// Final object positions in normalized units.
    pub positions: Vec<Vec3>,
}

impl PipelineOutput {
    pub fn exit_code(&self) -> i32 {
        if self.report.certified {
            0
        } else {
            2
        }
    }
}

/// A hard error plus the report as far as the run got.
#[derive(Debug)]
pub struct PipelineFailure {
    pub error: Error,
    pub report: FitReport,
}

struct Run<'a> {
    config: &'a RunConfig,
    scene: Scene,
    report: FitReport,
    trace: Vec<TraceRow>,
    timings: BTreeMap<String, f64>,
    trajectory: Option<TrajectoryResult>,
    rigid_pose: ScaledRigidTransform,
    positions: Vec<Vec3>,
}

impl Run<'_> {
    fn metrics(&self, t: &ScaledRigidTransform) -> Metrics {
        self.scene.penetration(&self.scene.pose(t)).into()
    }

    fn record(&self, t: &ScaledRigidTransform) -> TransformRecord {
        t.to_record(&self.scene.pivot)
    }

    fn rigid_row(&mut self, step: &str, r: &StepResult, certified: bool) {
        let metrics = self.metrics(&r.transform);
        for (i, loss) in r.loss_trace.iter().enumerate() {
            self.trace.push(TraceRow {
                step: step.into(),
                iteration: i + 1,
                loss: *loss,
            });
        }
        self.report.steps.push(StepReport {
            step: step.into(),
            transform: Some(self.record(&r.transform)),
            losses: r.losses,
            metrics,
            iterations: r.iterations_used,
            converged: r.converged,
            frozen: r.frozen,
            certified,
            note: None,
            init: None,
            trajectory: None,
            deformation: None,
        });
    }

    fn timed<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self);
        self.timings
            .insert(name.into(), start.elapsed().as_secs_f64() * 1000.0);
        out
    }
}

/// Converts a user pose (input units, any pivot) to normalized units about
/// the object's rest centroid.
fn user_transform(record: &TransformRecord, scale: f64, centroid: &Vec3) -> Result<ScaledRigidTransform> {
    let t = record.to_transform()?;
    let pivot = Vec3::from(record.pivot) * scale;
    let rot = t.rotation();
    let translation = rot * (centroid - pivot) * t.scale + pivot + t.translation * scale - centroid;
    Ok(ScaledRigidTransform {
        translation,
        ..t
    })
}

/// Fits `object` onto the `region` of `base`. The base is only read.
pub fn run_pipeline(
    base: &TriangleMesh,
    object: &TriangleMesh,
    region: &RegionMask,
    config: &RunConfig,
) -> std::result::Result<PipelineOutput, Box<PipelineFailure>> {
    let (material_name, material) = match config.validate().and_then(|_| config.resolve_material()) {
        Ok(m) => m,
        Err(error) => {
            return Err(Box::new(PipelineFailure {
                error,
                report: empty_report(config, 1.0, String::new(), None),
            }))
        }
    };
    let norm = Normalization::for_base(base);
    let report = empty_report(config, norm.scale, material_name, Some(material));
    let setup = || -> Result<Scene> {
        let base_n = norm.apply(base)?;
        let object_n = norm.apply(object)?;
        let frame = match config.region_normal {
            Some(n) => RegionFrame::with_normal(&base_n, region, Vec3::from(n))?,
            None => RegionFrame::compute(&base_n, region)?,
        };
        Ok(Scene::new(&base_n, region, frame, &object_n, config.leaf_size, config.barrier_width))
    };
    let scene = match setup() {
        Ok(s) => s,
        Err(error) => return Err(Box::new(PipelineFailure { error, report })),
    };
    let mut run = Run {
        config,
        scene,
        report,
        trace: Vec::new(),
        timings: BTreeMap::new(),
        trajectory: None,
        rigid_pose: ScaledRigidTransform::identity(),
        positions: Vec::new(),
    };
    match drive(&mut run, object, &material, &norm) {
        Ok((object, jacobians)) => {
            finish(&mut run);
            Ok(PipelineOutput {
                object,
                report: run.report,
                trace: run.trace,
                jacobians,
                scene: run.scene,
                trajectory: run.trajectory,
                rigid_pose: run.rigid_pose,
                positions: run.positions,
            })
        }
        Err(error) => {
            finish(&mut run);
            run.report.certified = false;
            Err(Box::new(PipelineFailure {
                error,
                report: run.report,
            }))
        }
    }
}

fn empty_report(config: &RunConfig, scale: f64, material_name: String, material: Option<MaterialParams>) -> FitReport {
    FitReport {
        normalization_scale: scale,
        material_name,
        material: material.unwrap_or(MaterialParams {
            youngs_modulus: f64::NAN,
            poisson_ratio: f64::NAN,
            mu: f64::NAN,
            lambda: f64::NAN,
            clamped: false,
        }),
        steps: Vec::new(),
        final_metrics: Metrics {
            intersecting_face_count: 0,
            max_penetration: 0.0,
        },
        final_proximity: 0.0,
        certified: false,
        warnings: Vec::new(),
        timings_ms: None,
        config: config.clone(),
    }
}

fn finish(run: &mut Run) {
    if run.config.report_timings {
        run.report.timings_ms = Some(run.timings.clone());
    }
}

type Drive = (TriangleMesh, Option<Vec<nalgebra::Matrix3<f64>>>);

fn drive(run: &mut Run, object: &TriangleMesh, material: &MaterialParams, norm: &Normalization) -> Result<Drive> {
    let config = run.config;
    let steps = config.steps;
    let optimizer = OptimizerConfig {
        seed: config.seed,
        ..config.optimizer.clone()
    };

    // Initial pose.
    let r0 = run.timed("init", |run| {
        let scene = &run.scene;
        let (t, details) = if let Some(rec) = &config.initial_transform {
            let t = user_transform(rec, norm.scale, &scene.pivot)?;
            (
                t,
                InitDetails {
                    scores: Vec::new(),
                    chosen: 0,
                    degenerate_axes: false,
                    user_supplied: true,
                },
            )
        } else if steps.init {
            let r = heuristic_init(
                scene,
                &config.init,
                &optimizer,
                config.step1.mask_threshold,
                (config.step1.scale_range[0], config.step1.scale_range[1]),
                config.seed,
            )?;
            (
                r.transform,
                InitDetails {
                    scores: r.scores,
                    chosen: r.chosen,
                    degenerate_axes: r.degenerate_axes,
                    user_supplied: false,
                },
            )
        } else {
            (
                ScaledRigidTransform::identity(),
                InitDetails {
                    scores: Vec::new(),
                    chosen: 0,
                    degenerate_axes: false,
                    user_supplied: false,
                },
            )
        };
        let posed = scene.pose(&t);
        let proximity = scene.proximity(&posed, config.step1.mask_threshold).value;
        let metrics = run.metrics(&t);
        run.report.steps.push(StepReport {
            step: "init".into(),
            transform: Some(run.record(&t)),
            losses: LossBreakdown {
                proximity,
                total: proximity,
                ..Default::default()
            },
            metrics,
            iterations: 0,
            converged: true,
            frozen: false,
            certified: false,
            note: None,
            init: Some(details),
            trajectory: None,
            deformation: None,
        });
        Ok(t)
    })?;

    let mut current = r0;
    if steps.step1 {
        current = run.timed("step1", |run| {
            let options = RigidOptions {
                mask_threshold: config.step1.mask_threshold,
                scale_bounds: ScaleBounds::around(current.scale, config.step1.scale_range[0], config.step1.scale_range[1]),
                freeze_rotation: false,
                certify: false,
            };
            let r = step1_tight_fit(&current, &run.scene, &optimizer, &options)?;
            run.rigid_row("step1", &r, false);
            if r.fallback_applied {
                if let Some(row) = run.report.steps.last_mut() {
                    row.note = Some("started out of reach; moved next to the region first".into());
                }
            }
            Ok(r.transform)
        })?;
    }
    let s1 = current.scale;

    if steps.step2 {
        current = run.timed("step2", |run| {
            let sampling = SamplingConfig {
                seed: config.seed,
                ..config.trajectory.clone()
            };
            let frame = run.scene.frame;
            let r = solve(&current, &frame, &sampling, &run.scene, config.step1.mask_threshold)?;
            if r.partial {
                run.report.warnings.push(format!(
                    "step2: only {} of {} candidates found after {} rounds",
                    r.candidates_accepted, sampling.n_candidates, r.rounds
                ));
            }
            let metrics = run.metrics(&r.r2);
            run.report.steps.push(StepReport {
                step: "step2".into(),
                transform: Some(run.record(&r.r2)),
                losses: LossBreakdown {
                    proximity: r.best_loss,
                    total: r.best_loss,
                    ..Default::default()
                },
                metrics,
                iterations: r.accepted_timesteps,
                converged: true,
                frozen: false,
                certified: metrics.is_clear(),
                note: None,
                init: None,
                trajectory: Some(TrajectoryDetails {
                    candidates_tried: r.candidates_tried,
                    candidates_accepted: r.candidates_accepted,
                    rounds: r.rounds,
                    accepted_timesteps: r.accepted_timesteps,
                    best_candidate: r.best.map(|b| b.candidate),
                    best_u: r.best.map(|b| b.u),
                    partial: r.partial,
                }),
                deformation: None,
            });
            let r2 = r.r2;
            run.trajectory = Some(r);
            Ok(r2)
        })?;
    }

    let intersecting = run.scene.intersects(&run.scene.pose(&current));
    if intersecting && steps.step3 && !steps.step2 && !config.force_ablation {
        return Err(Error::Config(
            "step 3 needs a non-intersecting start; enable step 2 or set force_ablation".into(),
        ));
    }
    let mut certify = !intersecting;
    if steps.step3 {
        current = run.timed("step3", |run| {
            let options = RigidOptions {
                mask_threshold: config.step3.mask_threshold,
                scale_bounds: ScaleBounds::around(s1, config.step3.scale_range[0], config.step3.scale_range[1]),
                freeze_rotation: false,
                certify,
            };
            if !certify {
                run.report
                    .warnings
                    .push("step3: started intersecting and ran without certification".into());
            }
            let r = step3_finetune(&current, &run.scene, &optimizer, &options)?;
            run.rigid_row("step3", &r, certify);
            Ok(r.transform)
        })?;
        certify = !run.scene.intersects(&run.scene.pose(&current));
    }

    run.rigid_pose = current;
    let posed = run.scene.pose(&current);
    let rigid_mesh = object.with_vertices(posed.positions.clone())?;
    let (final_positions, jacobians) = if steps.step4 {
        run.timed("step4", |run| {
            if !certify {
                run.report
                    .warnings
                    .push("step4: started intersecting and ran without certification".into());
            }
            let r = step4_deform(&rigid_mesh, &run.scene, material, &config.deformation, &optimizer, certify, None)?;
            if r.frozen && r.iterations_used <= 1 {
                run.report
                    .warnings
                    .push("step4: no deformation step could be taken".into());
            }
            for (i, loss) in r.loss_trace.iter().enumerate() {
                run.trace.push(TraceRow {
                    step: "step4".into(),
                    iteration: i + 1,
                    loss: *loss,
                });
            }
            let metrics: Metrics = deformed_penetration(&r.positions, &rigid_mesh, &run.scene).into();
            run.report.steps.push(StepReport {
                step: "step4".into(),
                transform: None,
                losses: r.losses,
                metrics,
                iterations: r.iterations_used,
                converged: r.converged,
                frozen: r.frozen,
                certified: certify,
                note: None,
                init: None,
                trajectory: None,
                deformation: Some(DeformDetails {
                    max_displacement: r.max_displacement,
                    tree_generation: r.tree_generation,
                    barrier_overflow: r.barrier_overflow,
                }),
            });
            Ok((r.positions, Some(r.jacobians)))
        })?
    } else {
        (posed.positions, None)
    };

    let final_mesh = rigid_mesh.with_vertices(final_positions)?;
    run.positions = final_mesh.vertices().to_vec();
    let final_metrics: Metrics = deformed_penetration(final_mesh.vertices(), &final_mesh, &run.scene).into();
    let final_tree = crate::bvh::Bvh::build(final_mesh.vertices(), final_mesh.faces(), config.leaf_size);
    let target = crate::energy::Target::new(final_mesh.vertices(), final_mesh.faces(), &final_tree);
    run.report.final_proximity = crate::energy::proximity_loss(
        &target,
        &run.scene.region_target(),
        &run.scene.region_vertices,
        config.step1.mask_threshold,
    )
    .value;
    run.report.final_metrics = final_metrics;
    if !final_metrics.is_clear() {
        run.report
            .warnings
            .push("output intersects the base".into());
    }
    run.report.certified = run.report.warnings.is_empty() && final_metrics.is_clear();
    Ok((norm.revert(&final_mesh)?, jacobians))
}

/// Settings the bundled fixtures are run with: a small BVH leaf size for
/// meshes of a few thousand faces, plus the fixture's own overrides.
pub fn fixture_config(fixture: &crate::fixtures::Fixture) -> RunConfig {
    RunConfig {
        leaf_size: FIXTURE_LEAF_SIZE,
        region_normal: fixture.region_normal.map(|n| [n.x, n.y, n.z]),
        initial_transform: fixture.initial_transform,
        ..RunConfig::default()
    }
}

pub const FIXTURE_LEAF_SIZE: usize = 32;

/// Input files for a fixture written by [`write_fixture`].
#[derive(Clone, Debug, PartialEq)]
pub struct FixtureFiles {
    pub base: PathBuf,
    pub object: PathBuf,
    pub region: PathBuf,
    pub config: PathBuf,
}

/// Writes `<name>.base.obj`, `<name>.object.obj`, `<name>.region.txt` and
/// `<name>.toml` into `dir`.
pub fn write_fixture(fixture: &crate::fixtures::Fixture, dir: &Path) -> Result<FixtureFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let at = |suffix: &str| dir.join(format!("{}.{suffix}", fixture.name));
    let files = FixtureFiles {
        base: at("base.obj"),
        object: at("object.obj"),
        region: at("region.txt"),
        config: at("toml"),
    };
    fixture.base.save(&files.base)?;
    fixture.object.save(&files.object)?;
    write(&files.region, &fixture.region.to_text())?;
    write(&files.config, &fixture_config(fixture).to_toml_string()?)?;
    Ok(files)
}

/// File locations for a run.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub base: PathBuf,
    pub object: PathBuf,
    pub region: PathBuf,
    pub output: PathBuf,
    pub trace: bool,
    pub dump_jacobians: bool,
}

impl RunPaths {
    pub fn report_path(&self) -> PathBuf {
        sibling(&self.output, "report.json")
    }

    pub fn trace_path(&self) -> PathBuf {
        sibling(&self.output, "trace.csv")
    }

    pub fn jacobians_path(&self) -> PathBuf {
        sibling(&self.output, "jacobians.txt")
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads inputs, runs, and writes the mesh, report and optional extras.
/// Returns the report and the exit code (0 certified, 2 warned). On a hard
/// error the partial report is still written.
pub fn run_files(paths: &RunPaths, config: &RunConfig) -> Result<(FitReport, i32)> {
    let base = TriangleMesh::load(&paths.base)?;
    let object = TriangleMesh::load(&paths.object)?;
    let region = RegionMask::load(&paths.region, &base)?;
    match run_pipeline(&base, &object, &region, config) {
        Ok(out) => {
            out.object.save(&paths.output)?;
            write(&paths.report_path(), &out.report.to_json())?;
            if paths.trace {
                write(&paths.trace_path(), &trace_to_csv(&out.trace))?;
            }
            if paths.dump_jacobians {
                if let Some(j) = &out.jacobians {
                    write(&paths.jacobians_path(), &jacobians_to_text(j))?;
                }
            }
            let code = out.exit_code();
            Ok((out.report, code))
        }
        Err(failure) => {
            write(&paths.report_path(), &failure.report.to_json())?;
            Err(failure.error)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let text = r#"
            seed = 7
            leaf_size = 32
            material = "rigid"
            [steps]
            step4 = false
            [trajectory]
            n_candidates = 10
            [deformation]
            lambda_e = 0.001
        "#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert!(!cfg.steps.step4 && cfg.steps.step3);
        assert_eq!(cfg.trajectory.n_candidates, 10);
        assert_eq!(cfg.trajectory.m_timesteps, 25);
        assert_eq!(cfg.step3.scale_range, [0.8, 1.25]);
        let back = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_rejects_unknown_keys_and_conflicting_materials() {
        assert!(RunConfig::from_toml_str("sed = 3").is_err());
        assert!(RunConfig::from_toml_str("material = \"rigid\"\nyoungs_modulus = 5.0").is_err());
        assert!(RunConfig::from_toml_str("youngs_modulus = 5000.0").is_err());
        assert!(RunConfig::from_toml_str("material = \"velvet\"").is_err());
        let cfg = RunConfig::from_toml_str("material = \"velvet\"\n[materials]\nvelvet = [2000.0, 0.2]").unwrap();
        assert_eq!(cfg.resolve_material().unwrap().1.youngs_modulus, 2000.0);
        let (name, m) = RunConfig::default().resolve_material().unwrap();
        assert_eq!((name.as_str(), m.youngs_modulus), (DEFAULT_MATERIAL, 1e5));
    }

    #[test]
    fn user_transform_is_rebased_on_the_centroid() {
        let rec = TransformRecord {
            rotation: [0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
            translation: [1.0, 2.0, 3.0],
            scale: 1.5,
            pivot: [0.0; 3],
        };
        let centroid = Vec3::new(0.4, -0.2, 0.1);
        let k = 0.5;
        let t = user_transform(&rec, k, &centroid).unwrap();
        let r = nalgebra::Matrix3::from_row_slice(&rec.rotation);
        for v in [Vec3::new(1.0, 2.0, 3.0), Vec3::new(-0.3, 0.0, 0.7)] {
            let expected = (r * v * rec.scale + Vec3::from(rec.translation)) * k;
            assert!((t.apply(&(v * k), &centroid) - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn trace_csv_layout() {
        let rows = vec![TraceRow {
            step: "step1".into(),
            iteration: 1,
            loss: 0.5,
        }];
        assert_eq!(trace_to_csv(&rows), "step,iteration,loss\nstep1,1,0.5\n");
    }

    #[test]
    fn disabling_steps_by_number() {
        let mut s = StepsEnabled::default();
        s.disable(2).unwrap();
        s.disable(0).unwrap();
        assert!(!s.step2 && !s.init && s.step1);
        assert!(s.disable(5).is_err());
    }
}
