//! Scaled-rigid fitting: the tight fit (proximity only, intersections
//! allowed) and the contact-aware refinement that never leaves the
//! non-intersecting set.

use serde::{Deserialize, Serialize};

use crate::aabb::Vec3;
use crate::energy::MIN_CERTIFIED_CLEARANCE;
use crate::error::{Error, Result};
use crate::optim::{descend, Evaluation, OptimizerConfig};
use crate::scene::{Posed, Scene};
use crate::transform::{ScaledRigidTransform, PARAM_COUNT};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub proximity: f64,
    pub barrier: f64,
    pub elastic: f64,
    pub total: f64,
}

/// Absolute bounds on the uniform scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleBounds {
    pub min: f64,
    pub max: f64,
}

impl ScaleBounds {
    pub fn around(scale: f64, lower_factor: f64, upper_factor: f64) -> Self {
        ScaleBounds {
            min: scale * lower_factor,
            max: scale * upper_factor,
        }
    }

    pub fn fixed(scale: f64) -> Self {
        ScaleBounds {
            min: scale,
            max: scale,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RigidOptions {
    pub mask_threshold: f64,
    pub scale_bounds: ScaleBounds,
    /// Optimize translation (and scale) only.
    pub freeze_rotation: bool,
    /// Reject any step that makes the object intersect the base.
    pub certify: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub transform: ScaledRigidTransform,
    pub losses: LossBreakdown,
    pub iterations_used: usize,
    pub loss_trace: Vec<f64>,
    pub converged: bool,
    pub frozen: bool,
    /// The object started out of reach of the region and was moved next to it.
    pub fallback_applied: bool,
    /// Barrier evaluations that had to clamp a zero distance.
    pub barrier_overflow: usize,
}

struct RigidEval {
    posed: Posed,
    losses: LossBreakdown,
    overflow: usize,
    min_distance: f64,
}

fn params_of(t: &ScaledRigidTransform) -> Vec<f64> {
    t.normalized().to_params().to_vec()
}

fn transform_of(p: &[f64]) -> ScaledRigidTransform {
    let mut a = [0.0; PARAM_COUNT];
    a.copy_from_slice(p);
    ScaledRigidTransform::from_params(&a)
}

fn evaluate(
    scene: &Scene,
    params: &[f64],
    options: &RigidOptions,
    with_barrier: bool,
) -> Result<Evaluation<RigidEval>> {
    let t = transform_of(params);
    t.validate()?;
    let posed = scene.pose(&t);
    let prox = scene.proximity(&posed, options.mask_threshold);
    let mut losses = LossBreakdown {
        proximity: prox.value,
        ..Default::default()
    };
    let mut grads = prox.gradients;
    let mut overflow = 0;
    let mut min_distance = f64::INFINITY;
    if with_barrier {
        let bar = scene.barrier(&posed);
        overflow = bar.overflow;
        min_distance = bar.min_distance;
        losses.barrier = bar.value;
        for (g, b) in grads.iter_mut().zip(&bar.gradients) {
            *g += b;
        }
    }
    losses.total = losses.proximity + losses.barrier;
    let mut gradient = t.backprop_points(&scene.object_rest, &scene.pivot, &grads).to_vec();
    if options.freeze_rotation {
        gradient[..6].iter_mut().for_each(|g| *g = 0.0);
    }
    if options.scale_bounds.min == options.scale_bounds.max {
        gradient[9] = 0.0;
    }
    Ok(Evaluation {
        loss: losses.total,
        trial_loss: None,
        gradient,
        extra: RigidEval {
            posed,
            losses,
            overflow,
            min_distance,
        },
    })
}

fn project(params: &mut [f64], bounds: &ScaleBounds) {
    params[9] = params[9].clamp(bounds.min.ln(), bounds.max.ln());
    let t = transform_of(params);
    if t.try_rotation().is_ok() {
        params.copy_from_slice(&t.normalized().to_params());
    }
}

fn run(
    start: &ScaledRigidTransform,
    scene: &Scene,
    config: &OptimizerConfig,
    options: &RigidOptions,
    with_barrier: bool,
) -> Result<StepResult> {
    let bounds = options.scale_bounds;
    if !(bounds.min > 0.0 && bounds.min <= bounds.max) {
        return Err(Error::Config(format!("invalid scale bounds [{}, {}]", bounds.min, bounds.max)));
    }
    let mut start_params = params_of(start);
    project(&mut start_params, &bounds);
    let mut overflow = 0;
    let descent = descend(
        start_params,
        config,
        |p, _| {
            let e = evaluate(scene, p, options, with_barrier)?;
            overflow += e.extra.overflow;
            Ok(e)
        },
        |_, e| {
            !options.certify
                || (e.extra.overflow == 0
                    && e.extra.min_distance >= MIN_CERTIFIED_CLEARANCE
                    && !scene.intersects(&e.extra.posed))
        },
        |p| project(p, &bounds),
    )?;
    Ok(StepResult {
        transform: transform_of(&descent.params),
        losses: descent.last.extra.losses,
        iterations_used: descent.iterations,
        loss_trace: descent.trace,
        converged: descent.converged,
        frozen: descent.frozen,
        fallback_applied: false,
        barrier_overflow: overflow,
    })
}

/// Minimizes the proximity loss over rotation, translation and log-scale.
/// If nothing of the object is within the mask threshold of the region, the
/// object is first centred over the region and lowered (or raised) along the
/// region normal until its lowest point is a quarter threshold above the
/// region's highest.
pub fn step1_tight_fit(
    initial: &ScaledRigidTransform,
    scene: &Scene,
    config: &OptimizerConfig,
    options: &RigidOptions,
) -> Result<StepResult> {
    let options = RigidOptions {
        certify: false,
        ..*options
    };
    let mut start = initial.normalized();
    let posed = scene.pose(&start);
    let prox = scene.proximity(&posed, options.mask_threshold);
    let mut fallback = false;
    if prox.active == (0, 0) {
        let n = scene.frame.average_normal;
        let c = scene.frame.centroid;
        let centroid = posed.positions.iter().sum::<Vec3>() / posed.positions.len() as f64;
        let top = scene.region_vertices.iter().map(|v| (v - c).dot(&n)).fold(f64::NEG_INFINITY, f64::max);
        let bottom = posed.positions.iter().map(|p| (p - c).dot(&n)).fold(f64::INFINITY, f64::min);
        // Centre over the region, lowest point a quarter threshold above its highest.
        let lateral = (c - centroid) - n * (c - centroid).dot(&n);
        let lift = top + 0.25 * options.mask_threshold - bottom;
        start.translation += lateral + n * lift;
        fallback = true;
    }
    let mut result = run(&start, scene, config, &options, false)?;
    result.fallback_applied = fallback;
    Ok(result)
}

/// Minimizes proximity plus barrier from a non-intersecting start. With
/// `options.certify` every accepted pose is non-intersecting; without it the
/// step only enforces descent.
pub fn step3_finetune(
    r2: &ScaledRigidTransform,
    scene: &Scene,
    config: &OptimizerConfig,
    options: &RigidOptions,
) -> Result<StepResult> {
    if options.certify && scene.intersects(&scene.pose(r2)) {
        return Err(Error::Contract(
            "refinement must start from a non-intersecting pose".into(),
        ));
    }
    run(r2, scene, config, options, true)
}
