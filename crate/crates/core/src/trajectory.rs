//! Collision-free starting pose: sample non-intersecting perturbations of
//! the tight fit, walk each back toward it along an interpolated path, and
//! keep the non-intersecting timestep with the lowest proximity loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aabb::Vec3;
use crate::energy::RIGID_MASK_THRESHOLD;
use crate::error::{Error, Result};
use crate::mesh::RegionFrame;
use crate::scene::Scene;
use crate::transform::{rotation_from_6d, slerp_transform, ScaledRigidTransform};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Initial standard deviation of the 6D rotation perturbation.
    pub sigma_rot: f64,
    /// Defaults to 0.05 x the region bounding-box diagonal.
    pub sigma_perp: Option<f64>,
    /// Mean offset along the region normal; defaults to the object's
    /// bounding-box diagonal at the tight-fit scale, capped by `mu_par_cap`.
    pub mu_par: Option<f64>,
    /// Cap on the default `mu_par`. Half the rigid mask threshold keeps fresh
    /// candidates within reach of the proximity loss.
    pub mu_par_cap: f64,
    /// Defaults to 0.25 x `mu_par`.
    pub sigma_par: Option<f64>,
    /// Scale is drawn from `[min, max] x` the tight-fit scale.
    pub scale_min_factor: f64,
    pub scale_max_factor: f64,
    /// Reject draws with no proximity correspondence inside the mask.
    pub require_reach: bool,
    pub n_candidates: usize,
    pub m_timesteps: usize,
    pub escalation_factor: f64,
    pub max_rounds: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            sigma_rot: 0.1,
            sigma_perp: None,
            mu_par: None,
            mu_par_cap: 0.5 * RIGID_MASK_THRESHOLD,
            sigma_par: None,
            scale_min_factor: 0.8,
            scale_max_factor: 1.25,
            require_reach: true,
            n_candidates: 100,
            m_timesteps: 25,
            escalation_factor: 1.5,
            max_rounds: 8,
            seed: 0,
        }
    }
}

/// Sampling parameters with geometry-dependent defaults filled in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedSampling {
    pub sigma_rot: f64,
    pub sigma_perp: f64,
    pub mu_par: f64,
    pub sigma_par: f64,
    pub s_min: f64,
    pub s_max: f64,
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("trajectory: {m}")));
        if self.n_candidates == 0 || self.m_timesteps == 0 || self.max_rounds == 0 {
            return bad("n_candidates, m_timesteps and max_rounds must be at least 1");
        }
        if !(self.escalation_factor > 1.0) {
            return bad("escalation_factor must exceed 1");
        }
        if !(self.scale_min_factor > 0.0 && self.scale_min_factor <= self.scale_max_factor) {
            return bad("need 0 < scale_min_factor <= scale_max_factor");
        }
        if !(self.sigma_rot >= 0.0) {
            return bad("sigma_rot must be non-negative");
        }
        Ok(())
    }

    pub fn resolve(&self, r1: &ScaledRigidTransform, frame: &RegionFrame, scene: &Scene) -> ResolvedSampling {
        let mu_par = self
            .mu_par
            .unwrap_or_else(|| (scene.object_diagonal() * r1.scale).min(self.mu_par_cap));
        ResolvedSampling {
            sigma_rot: self.sigma_rot,
            sigma_perp: self.sigma_perp.unwrap_or(0.05 * frame.bbox_diag),
            mu_par,
            sigma_par: self.sigma_par.unwrap_or(0.25 * mu_par),
            s_min: self.scale_min_factor * r1.scale,
            s_max: self.scale_max_factor * r1.scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub transform: ScaledRigidTransform,
    /// Offset from the tight fit orthogonal to the region normal.
    pub t_perp: Vec3,
    /// Offset from the tight fit along the region normal.
    pub t_par: Vec3,
    pub round: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    pub rounds: usize,
    pub tried: usize,
    /// Rotation spread used in each round.
    pub sigma_rot_by_round: Vec<f64>,
    pub accepted_by_round: Vec<usize>,
    pub resolved: ResolvedSampling,
}

impl CandidateSet {
    pub fn is_partial(&self, config: &SamplingConfig) -> bool {
        self.candidates.len() < config.n_candidates
    }
}

fn draw(
    rng: &mut ChaCha8Rng,
    r1: &ScaledRigidTransform,
    r1_rot: &nalgebra::Matrix3<f64>,
    normal: &Vec3,
    p: &ResolvedSampling,
    sigma_rot: f64,
    sigma_par: f64,
    round: usize,
) -> Option<Candidate> {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut gauss3 = |sigma: f64| {
        Vec3::new(
            unit.sample(rng) * sigma,
            unit.sample(rng) * sigma,
            unit.sample(rng) * sigma,
        )
    };
    let e1 = Vec3::x() + gauss3(sigma_rot);
    let e2 = Vec3::y() + gauss3(sigma_rot);
    let perp_raw = gauss3(p.sigma_perp);
    let t_perp = perp_raw - normal * perp_raw.dot(normal);
    let t_par = normal * (p.mu_par + unit.sample(rng) * sigma_par);
    let scale = if p.s_max > p.s_min {
        rng.random_range(p.s_min..p.s_max)
    } else {
        p.s_min
    };
    let perturb = rotation_from_6d(&e1, &e2).ok()?;
    Some(Candidate {
        transform: ScaledRigidTransform::from_rotation(
            &(r1_rot * perturb),
            r1.translation + t_perp + t_par,
            scale,
        ),
        t_perp,
        t_par,
        round,
    })
}

/// Draws perturbations of `r1` until `n_candidates` usable ones are found,
/// widening the rotation and normal-offset spreads each round. A draw is
/// usable when it does not intersect the base and, with `require_reach`,
/// has at least one proximity correspondence inside `mask_threshold`: a
/// pose out of reach scores zero without touching anything.
pub fn sample_candidates(
    r1: &ScaledRigidTransform,
    frame: &RegionFrame,
    config: &SamplingConfig,
    scene: &Scene,
    mask_threshold: f64,
) -> Result<CandidateSet> {
    config.validate()?;
    let resolved = config.resolve(r1, frame, scene);
    let r1_rot = r1.rotation();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut candidates = Vec::with_capacity(config.n_candidates);
    let mut tried = 0;
    let mut sigma_rot_by_round = Vec::new();
    let mut accepted_by_round = Vec::new();
    for round in 0..config.max_rounds {
        let grow = config.escalation_factor.powi(round as i32);
        let sigma_rot = resolved.sigma_rot * grow;
        let sigma_par = resolved.sigma_par * grow;
        sigma_rot_by_round.push(sigma_rot);
        let wanted = config.n_candidates - candidates.len();
        let draws: Vec<Option<Candidate>> = (0..wanted)
            .map(|_| {
                draw(
                    &mut rng,
                    r1,
                    &r1_rot,
                    &frame.average_normal,
                    &resolved,
                    sigma_rot,
                    sigma_par,
                    round,
                )
            })
            .collect();
        tried += wanted;
        let keep: Vec<bool> = draws
            .par_iter()
            .map(|c| match c {
                Some(c) => {
                    let posed = scene.pose(&c.transform);
                    !scene.intersects(&posed)
                        && (!config.require_reach || scene.proximity(&posed, mask_threshold).active != (0, 0))
                }
                None => false,
            })
            .collect();
        let before = candidates.len();
        candidates.extend(
            draws
                .into_iter()
                .zip(keep)
                .filter_map(|(c, k)| if k { c } else { None }),
        );
        accepted_by_round.push(candidates.len() - before);
        if candidates.len() == config.n_candidates {
            break;
        }
    }
    if candidates.is_empty() {
        return Err(Error::NoCandidates {
            rounds: sigma_rot_by_round.len(),
            tried,
        });
    }
    Ok(CandidateSet {
        candidates,
        rounds: sigma_rot_by_round.len(),
        tried,
        sigma_rot_by_round,
        accepted_by_round,
        resolved,
    })
}

/// One non-intersecting pose on a candidate's path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepRecord {
    pub candidate: usize,
    pub step: usize,
    pub u: f64,
    pub proximity: f64,
    /// At least one proximity correspondence is inside the mask.
    pub engaged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryResult {
    /// The tight-fit pose every path ends at.
    pub r1: ScaledRigidTransform,
    pub r2: ScaledRigidTransform,
    pub candidates_tried: usize,
    pub candidates_accepted: usize,
    pub rounds: usize,
    pub accepted_timesteps: usize,
    pub best_loss: f64,
    /// `None` when the tight fit was already non-intersecting.
    pub best: Option<TimestepRecord>,
    /// Every non-intersecting timestep evaluated, in candidate then step order.
    pub evaluated: Vec<TimestepRecord>,
    pub candidates: Vec<Candidate>,
    pub accepted_by_round: Vec<usize>,
    pub partial: bool,
}

fn timestep_u(step: usize, m: usize) -> f64 {
    if m == 1 {
        0.0
    } else {
        step as f64 / (m - 1) as f64
    }
}

/// `(loss, candidate, -u)` ordering used to pick the best timestep.
fn better(a: &TimestepRecord, b: &TimestepRecord) -> bool {
    a.proximity
        .total_cmp(&b.proximity)
        .then(a.candidate.cmp(&b.candidate))
        .then(b.u.total_cmp(&a.u))
        .is_lt()
}

/// Lowest-proximity record with the deterministic tie-break.
pub fn best_timestep(records: &[TimestepRecord]) -> Option<TimestepRecord> {
    records.iter().fold(None, |best, r| match best {
        Some(b) if !better(r, &b) => Some(b),
        _ => Some(*r),
    })
}

pub fn solve(
    r1: &ScaledRigidTransform,
    frame: &RegionFrame,
    config: &SamplingConfig,
    scene: &Scene,
    mask_threshold: f64,
) -> Result<TrajectoryResult> {
    config.validate()?;
    let posed_r1 = scene.pose(r1);
    if !scene.intersects(&posed_r1) {
        return Ok(TrajectoryResult {
            r1: *r1,
            r2: *r1,
            candidates_tried: 0,
            candidates_accepted: 0,
            rounds: 0,
            accepted_timesteps: 0,
            best_loss: scene.proximity(&posed_r1, mask_threshold).value,
            best: None,
            evaluated: Vec::new(),
            candidates: Vec::new(),
            accepted_by_round: Vec::new(),
            partial: false,
        });
    }
    let set = sample_candidates(r1, frame, config, scene, mask_threshold)?;
    let m = config.m_timesteps;
    let per_candidate: Vec<Vec<TimestepRecord>> = set
        .candidates
        .par_iter()
        .enumerate()
        .map(|(ci, c)| {
            (0..m)
                .filter_map(|k| {
                    let u = timestep_u(k, m);
                    let t = slerp_transform(&c.transform, r1, u);
                    let posed = scene.pose(&t);
                    // The candidate itself was certified by the sampler.
                    if k > 0 && scene.intersects(&posed) {
                        return None;
                    }
                    let prox = scene.proximity(&posed, mask_threshold);
                    Some(TimestepRecord {
                        candidate: ci,
                        step: k,
                        u,
                        proximity: prox.value,
                        engaged: prox.active != (0, 0),
                    })
                })
                .collect()
        })
        .collect();
    let evaluated: Vec<TimestepRecord> = per_candidate.into_iter().flatten().collect();
    let best = best_timestep(&evaluated).expect("every candidate contributes its own pose");
    let r2 = slerp_transform(&set.candidates[best.candidate].transform, r1, best.u);
    Ok(TrajectoryResult {
        r1: *r1,
        r2,
        candidates_tried: set.tried,
        candidates_accepted: set.candidates.len(),
        rounds: set.rounds,
        accepted_timesteps: evaluated.len(),
        best_loss: best.proximity,
        best: Some(best),
        evaluated,
        partial: set.is_partial(config),
        accepted_by_round: set.accepted_by_round,
        candidates: set.candidates,
    })
}
