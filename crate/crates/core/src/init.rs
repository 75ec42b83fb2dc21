//! Deterministic starting pose: size the object to the region, lay its
//! flattest axis along the region normal, and keep the azimuth that a short
//! tight-fit run likes best.

use nalgebra::{Matrix3, Rotation3, SymmetricEigen, Unit};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::aabb::Vec3;
use crate::error::{Error, Result};
use crate::optim::OptimizerConfig;
use crate::rigid::{step1_tight_fit, RigidOptions, ScaleBounds};
use crate::scene::Scene;
use crate::transform::ScaledRigidTransform;

pub const SCALE_EPSILON: f64 = 1e-9;
/// Relative eigenvalue gap below which the flattest axis is ambiguous.
const AXIS_GAP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub k_azimuth: usize,
    /// Object diagonal relative to the region diagonal after sizing.
    pub scale_constant: f64,
    pub score_iterations: usize,
    /// Also try the flattest axis pointing against the region normal.
    pub try_flipped_axis: bool,
    /// Standard deviation of a Gaussian jitter on the initial translation.
    pub jitter: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            k_azimuth: 8,
            scale_constant: 2.0,
            score_iterations: 30,
            try_flipped_axis: true,
            jitter: 0.0,
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_azimuth == 0 {
            return Err(Error::Config("init: k_azimuth must be at least 1".into()));
        }
        if !(self.scale_constant > 0.0) || !(self.jitter >= 0.0) {
            return Err(Error::Config("init: scale_constant must be positive and jitter non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitResult {
    pub transform: ScaledRigidTransform,
    /// Proximity loss after the truncated fit, per candidate index.
    pub scores: Vec<f64>,
    pub chosen: usize,
    pub degenerate_axes: bool,
}

pub fn initial_scale(region_diagonal: f64, object_diagonal: f64, constant: f64) -> f64 {
    constant * region_diagonal / (object_diagonal + SCALE_EPSILON)
}

/// Unit eigenvector of the smallest covariance eigenvalue of `points`, or
/// `None` when the two smallest eigenvalues are too close to tell apart.
pub fn flattest_axis(points: &[Vec3]) -> Option<Vec3> {
    let mean = points.iter().sum::<Vec3>() / points.len() as f64;
    let cov = points
        .iter()
        .map(|p| (p - mean) * (p - mean).transpose())
        .sum::<Matrix3<f64>>()
        / points.len() as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (lo, mid, hi) = (
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    if mid - lo <= AXIS_GAP * hi.max(f64::MIN_POSITIVE) {
        return None;
    }
    let mut axis: Vec3 = eig.eigenvectors.column(order[0]).into();
    // Fix the sign so the result does not depend on the eigensolver.
    let lead = axis.iamax();
    if axis[lead] < 0.0 {
        axis = -axis;
    }
    Some(axis.normalize())
}

/// Rotation taking unit `from` onto unit `to`, including the antiparallel case.
fn align(from: &Vec3, to: &Vec3) -> Matrix3<f64> {
    if let Some(r) = Rotation3::rotation_between(from, to) {
        return r.into_inner();
    }
    let helper = if from.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let perp = Unit::new_normalize(from.cross(&helper));
    Rotation3::from_axis_angle(&perp, std::f64::consts::PI).into_inner()
}

/// Candidate poses in index order: azimuths with the axis along the region
/// normal, then (optionally) the same azimuths with it flipped.
pub fn candidate_rotations(axis: Option<Vec3>, normal: &Vec3, cfg: &InitConfig) -> Vec<Matrix3<f64>> {
    let n = Unit::new_normalize(*normal);
    let Some(axis) = axis else {
        return vec![Matrix3::identity()];
    };
    let mut bases = vec![align(&axis, &n)];
    if cfg.try_flipped_axis {
        bases.push(align(&-axis, &n));
    }
    let mut out = Vec::new();
    for base in bases {
        for k in 0..cfg.k_azimuth {
            let angle = std::f64::consts::TAU * k as f64 / cfg.k_azimuth as f64;
            out.push(Rotation3::from_axis_angle(&n, angle).into_inner() * base);
        }
    }
    out
}

/// Builds the initial pose. Each candidate is scored by the proximity loss
/// after a truncated tight fit; the lowest score wins, ties to the lowest
/// index. The returned pose is the unscored candidate itself.
pub fn heuristic_init(
    scene: &Scene,
    cfg: &InitConfig,
    optimizer: &OptimizerConfig,
    mask_threshold: f64,
    scale_range: (f64, f64),
    seed: u64,
) -> Result<InitResult> {
    cfg.validate()?;
    let frame = &scene.frame;
    let object_diag = scene.object_diagonal();
    let scale = initial_scale(frame.bbox_diag, object_diag, cfg.scale_constant);
    let mut target = frame.centroid;
    if cfg.jitter > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, cfg.jitter).map_err(|e| Error::Config(format!("init jitter: {e}")))?;
        target += Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
    }
    target += frame.average_normal * (0.5 * scale * object_diag);
    let translation = target - scene.pivot;
    let axis = flattest_axis(&scene.object_rest);
    let rotations = candidate_rotations(axis, &frame.average_normal, cfg);
    let poses: Vec<ScaledRigidTransform> = rotations
        .iter()
        .map(|r| ScaledRigidTransform::from_rotation(r, translation, scale))
        .collect();
    if poses.len() == 1 {
        return Ok(InitResult {
            transform: poses[0],
            scores: Vec::new(),
            chosen: 0,
            degenerate_axes: axis.is_none(),
        });
    }
    let short = OptimizerConfig {
        max_iterations: cfg.score_iterations,
        ..optimizer.clone()
    };
    let options = RigidOptions {
        mask_threshold,
        scale_bounds: ScaleBounds::around(scale, scale_range.0, scale_range.1),
        freeze_rotation: false,
        certify: false,
    };
    let mut scores = Vec::with_capacity(poses.len());
    for pose in &poses {
        scores.push(step1_tight_fit(pose, scene, &short, &options)?.losses.proximity);
    }
    let mut chosen = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[chosen] {
            chosen = i;
        }
    }
    Ok(InitResult {
        transform: poses[chosen],
        scores,
        chosen,
        degenerate_axes: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::fixture;
    use crate::mesh::{Normalization, RegionFrame, RegionMask};
    use crate::energy::RIGID_MASK_THRESHOLD;
    use approx::assert_relative_eq;

    #[test]
    fn scale_formula() {
        assert_relative_eq!(initial_scale(0.2, 0.4, 2.0), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn flattest_axis_of_a_slab() {
        let pts: Vec<Vec3> = (0..50)
            .map(|i| {
                let t = i as f64;
                Vec3::new((t * 0.7).sin(), (t * 1.3).cos(), 0.01 * (t * 2.1).sin())
            })
            .collect();
        let a = flattest_axis(&pts).unwrap();
        assert!(a.z.abs() > 0.999);
        assert!(a.z > 0.0);
    }

    #[test]
    fn sphere_has_no_flattest_axis_and_falls_back() {
        let base = crate::fixtures::subdivided_plane(4, 1.0);
        let region = RegionMask::all(&base);
        let frame = RegionFrame::compute(&base, &region).unwrap();
        // A cube's vertices have isotropic covariance.
        let cube = crate::fixtures::axis_box(Vec3::repeat(-0.1), Vec3::repeat(0.1), 1);
        assert!(flattest_axis(cube.vertices()).is_none());
        let scene = Scene::new(&base, &region, frame, &cube, 8, 0.01);
        let r = heuristic_init(&scene, &InitConfig::default(), &OptimizerConfig::default(), 0.5, (0.5, 2.0), 0).unwrap();
        assert!(r.degenerate_axes);
        assert_eq!(r.chosen, 0);
        assert!(r.scores.is_empty());
    }

    #[test]
    fn candidates_put_the_axis_on_the_normal() {
        let normal = Vec3::new(0.3, -0.2, 0.9).normalize();
        let axis = Vec3::new(0.0, 1.0, 0.0);
        let rots = candidate_rotations(Some(axis), &normal, &InitConfig::default());
        assert_eq!(rots.len(), 16);
        for r in &rots[..8] {
            assert!((r * axis - normal).norm() < 1e-12);
        }
        for r in &rots[8..] {
            assert!((r * axis + normal).norm() < 1e-12);
        }
    }

    #[test]
    fn cap_azimuths_score_alike_and_tie_breaks_low() {
        let f = fixture("cap-on-sphere").unwrap();
        let norm = Normalization::for_base(&f.base);
        let base = norm.apply(&f.base).unwrap();
        let object = norm.apply(&f.object).unwrap();
        let frame = RegionFrame::compute(&base, &f.region).unwrap();
        let scene = Scene::new(&base, &f.region, frame, &object, 16, 0.01);
        let r = heuristic_init(
            &scene,
            &InitConfig::default(),
            &OptimizerConfig::default(),
            RIGID_MASK_THRESHOLD,
            (0.5, 2.0),
            0,
        )
        .unwrap();
        for group in r.scores.chunks(8) {
            let lo = group.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = group.iter().cloned().fold(0.0, f64::max);
            assert!(hi <= 1.05 * lo, "scores {:?}", r.scores);
        }
        let best = r.scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let first = r.scores.iter().position(|s| *s == best).unwrap();
        assert_eq!(r.chosen, first);
        let again = heuristic_init(
            &scene,
            &InitConfig::default(),
            &OptimizerConfig::default(),
            RIGID_MASK_THRESHOLD,
            (0.5, 2.0),
            0,
        )
        .unwrap();
        assert_eq!(again, r);
    }
}
