//! Loss terms and their gradients: masked distance, two-sided proximity,
//! contact barrier, Neo-Hookean elasticity.

use std::collections::BTreeMap;

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aabb::Vec3;
use crate::bvh::{Bvh, Hit, QueryStats};
use crate::error::{Error, Result};

pub const RIGID_MASK_THRESHOLD: f64 = 0.5;
pub const DEFORM_MASK_THRESHOLD: f64 = 0.01;
pub const DEFAULT_BARRIER_WIDTH: f64 = 0.01;
pub const MIN_YOUNGS_MODULUS: f64 = 1000.0;
/// Barrier arguments are clamped to this before evaluation.
pub const MIN_BARRIER_DISTANCE: f64 = 1e-9;
/// Certified steps keep every object vertex at least this far from the base,
/// so no vertex can slip through within the contact tolerance.
pub const MIN_CERTIFIED_CLEARANCE: f64 = 1e-6;
/// Distances below this produce no direction.
const ZERO_DISTANCE: f64 = 1e-12;

/// Triangles plus a tree valid for their current positions.
#[derive(Clone, Copy)]
pub struct Target<'a> {
    pub positions: &'a [Vec3],
    pub faces: &'a [[usize; 3]],
    pub tree: &'a Bvh,
}

impl<'a> Target<'a> {
    pub fn new(positions: &'a [Vec3], faces: &'a [[usize; 3]], tree: &'a Bvh) -> Self {
        Target {
            positions,
            faces,
            tree,
        }
    }

    fn batch(&self, queries: &[Vec3], cutoff: f64) -> (Vec<Hit>, QueryStats) {
        self.tree
            .batch_closest(self.positions, self.faces, queries, cutoff)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskedDistance {
    pub value: f64,
    pub gradient: Vec3,
    pub hit: Hit,
}

fn unit_from(hit: &Hit, query: &Vec3) -> Vec3 {
    if hit.distance < ZERO_DISTANCE {
        Vec3::zeros()
    } else {
        (query - hit.point) / hit.distance
    }
}

fn masked_from_hit(hit: Hit, query: &Vec3, threshold: f64) -> MaskedDistance {
    if hit.is_hit() && hit.distance < threshold && hit.distance >= ZERO_DISTANCE {
        MaskedDistance {
            value: hit.distance,
            gradient: unit_from(&hit, query),
            hit,
        }
    } else {
        MaskedDistance {
            value: 0.0,
            gradient: Vec3::zeros(),
            hit,
        }
    }
}

/// Distance to the target if below `threshold`, else zero; the gradient is
/// the unit direction from the closest point to the query.
pub fn masked_distance(query: &Vec3, target: &Target, threshold: f64) -> MaskedDistance {
    let mut stats = QueryStats::default();
    let hit = target
        .tree
        .closest(target.positions, target.faces, query, threshold, &mut stats);
    masked_from_hit(hit, query, threshold)
}

/// Value and per-object-vertex gradient of the two-sided proximity loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ProximityTerms {
    pub value: f64,
    pub object_to_region: f64,
    pub region_to_object: f64,
    pub gradients: Vec<Vec3>,
    /// Correspondences closer than the threshold in each direction,
    /// including exact contacts.
    pub active: (usize, usize),
    /// Which correspondences contributed to `value`.
    pub pairing: Pairing,
    pub stats: QueryStats,
}

/// Object vertices (`forward`) and region vertices (`backward`) whose
/// correspondence lay inside the mask.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pairing {
    pub forward: Vec<bool>,
    pub backward: Vec<bool>,
}

/// `Σ d̂(p_i, region)² + Σ d̂(q_j, object)²` over object vertices `p_i` and
/// region vertices `q_j`. The second sum moves the object triangle: its
/// gradient reaches the triangle corners through the (frozen) barycentric
/// weights of the closest point.
pub fn proximity_loss(
    object: &Target,
    region: &Target,
    region_vertices: &[Vec3],
    threshold: f64,
) -> ProximityTerms {
    let (to_region, s1) = region.batch(object.positions, threshold);
    let (to_object, s2) = object.batch(region_vertices, threshold);
    let mut gradients = vec![Vec3::zeros(); object.positions.len()];
    let mut forward = 0.0;
    let mut active = (0, 0);
    let mut pairing = Pairing {
        forward: vec![false; object.positions.len()],
        backward: vec![false; region_vertices.len()],
    };
    for (((p, hit), g), paired) in object
        .positions
        .iter()
        .zip(to_region)
        .zip(gradients.iter_mut())
        .zip(pairing.forward.iter_mut())
    {
        if hit.is_hit() && hit.distance < threshold {
            active.0 += 1;
        }
        let m = masked_from_hit(hit, p, threshold);
        if m.value > 0.0 {
            *paired = true;
            forward += m.value * m.value;
            *g += (p - hit.point) * 2.0;
        }
    }
    let mut backward = 0.0;
    for ((q, hit), paired) in region_vertices.iter().zip(to_object).zip(pairing.backward.iter_mut()) {
        if hit.is_hit() && hit.distance < threshold {
            active.1 += 1;
        }
        let m = masked_from_hit(hit, q, threshold);
        if m.value > 0.0 {
            *paired = true;
            backward += m.value * m.value;
            let face = object.faces[hit.face.expect("hit has a face")];
            let pull = (q - hit.point) * 2.0;
            for (k, &v) in face.iter().enumerate() {
                gradients[v] -= pull * hit.barycentric[k];
            }
        }
    }
    let mut stats = s1;
    stats += s2;
    ProximityTerms {
        value: forward + backward,
        object_to_region: forward,
        region_to_object: backward,
        gradients,
        active,
        pairing,
        stats,
    }
}

/// Unmasked squared distances summed over the correspondences in `pairing`
/// only. Agrees with [`proximity_loss`] at the configuration that produced
/// `pairing` and, unlike it, is continuous as vertices cross the threshold.
pub fn paired_proximity(object: &Target, region: &Target, region_vertices: &[Vec3], pairing: &Pairing) -> f64 {
    let pick = |points: &[Vec3], mask: &[bool]| -> Vec<Vec3> {
        points.iter().zip(mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect()
    };
    let squared = |hits: Vec<Hit>| -> f64 {
        hits.iter().filter(|h| h.is_hit()).map(|h| h.distance * h.distance).sum()
    };
    let (to_region, _) = region.batch(&pick(object.positions, &pairing.forward), f64::INFINITY);
    let (to_object, _) = object.batch(&pick(region_vertices, &pairing.backward), f64::INFINITY);
    squared(to_region) + squared(to_object)
}

/// `b_h(x) = −(x − h)² ln(x / h)` below `h`, zero from `h` on. Returns the
/// value and derivative.
pub fn barrier(x: f64, h: f64) -> (f64, f64) {
    if x >= h {
        return (0.0, 0.0);
    }
    let d = x - h;
    let log = (x / h).ln();
    (-d * d * log, -2.0 * d * log - d * d / x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BarrierTerms {
    pub value: f64,
    pub gradients: Vec<Vec3>,
    /// Vertices within `h` of the base.
    pub active: usize,
    /// Vertices whose distance had to be clamped to [`MIN_BARRIER_DISTANCE`].
    pub overflow: usize,
    /// Smallest vertex-to-surface distance found, infinite when none is
    /// within `h`.
    pub min_distance: f64,
    pub stats: QueryStats,
}

/// Sum of barriers over object vertices within `h` of the whole base.
pub fn ipc_loss(points: &[Vec3], base: &Target, h: f64) -> BarrierTerms {
    let (hits, stats) = base.batch(points, h);
    let mut gradients = vec![Vec3::zeros(); points.len()];
    let mut value = 0.0;
    let mut active = 0;
    let mut overflow = 0;
    let mut min_distance = f64::INFINITY;
    for ((p, hit), g) in points.iter().zip(hits).zip(gradients.iter_mut()) {
        if !hit.is_hit() || hit.distance >= h {
            continue;
        }
        active += 1;
        min_distance = min_distance.min(hit.distance);
        let mut x = hit.distance;
        if x < MIN_BARRIER_DISTANCE {
            x = MIN_BARRIER_DISTANCE;
            overflow += 1;
        }
        let (b, db) = barrier(x, h);
        value += b;
        *g = unit_from(&hit, p) * db;
    }
    BarrierTerms {
        value,
        gradients,
        active,
        overflow,
        min_distance,
        stats,
    }
}

/// Barrier on base vertices near the object surface, `Σ b_h(d(q_j, object))`.
/// Each term moves the closest object triangle: its gradient reaches the
/// corners through the frozen barycentric weights of the closest point.
pub fn reverse_barrier(object: &Target, base_points: &[Vec3], h: f64) -> BarrierTerms {
    let near = object.tree.root_bounds().inflated(h);
    let points: Vec<Vec3> = base_points.iter().filter(|p| near.contains(p)).copied().collect();
    let (hits, stats) = object.batch(&points, h);
    let mut gradients = vec![Vec3::zeros(); object.positions.len()];
    let mut value = 0.0;
    let mut active = 0;
    let mut overflow = 0;
    let mut min_distance = f64::INFINITY;
    for (q, hit) in points.iter().zip(hits) {
        if !hit.is_hit() || hit.distance >= h {
            continue;
        }
        active += 1;
        min_distance = min_distance.min(hit.distance);
        let mut x = hit.distance;
        if x < MIN_BARRIER_DISTANCE {
            x = MIN_BARRIER_DISTANCE;
            overflow += 1;
        }
        let (b, db) = barrier(x, h);
        value += b;
        let push = unit_from(&hit, q) * db;
        let face = object.faces[hit.face.expect("hit has a face")];
        for (k, &v) in face.iter().enumerate() {
            gradients[v] -= push * hit.barycentric[k];
        }
    }
    BarrierTerms {
        value,
        gradients,
        active,
        overflow,
        min_distance,
        stats,
    }
}

/// [`ipc_loss`] on the object vertices plus [`reverse_barrier`] on the base
/// vertices, so neither mesh's vertices can close in on the other's faces.
pub fn two_sided_barrier(object: &Target, base: &Target, h: f64) -> BarrierTerms {
    let mut forward = ipc_loss(object.positions, base, h);
    let reverse = reverse_barrier(object, base.positions, h);
    forward.value += reverse.value;
    for (g, r) in forward.gradients.iter_mut().zip(&reverse.gradients) {
        *g += r;
    }
    forward.active += reverse.active;
    forward.overflow += reverse.overflow;
    forward.min_distance = forward.min_distance.min(reverse.min_distance);
    forward.stats += reverse.stats;
    forward
}

/// Young's modulus and Poisson ratio with the derived Lamé constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
    pub mu: f64,
    pub lambda: f64,
    /// Whether the requested modulus was raised to [`MIN_YOUNGS_MODULUS`].
    pub clamped: bool,
}

pub fn lame_from_material(youngs_modulus: f64, poisson_ratio: f64) -> Result<MaterialParams> {
    if !(0.0..0.5).contains(&poisson_ratio) {
        return Err(Error::InvalidMaterial(format!(
            "Poisson ratio must lie in [0, 0.5), got {poisson_ratio}"
        )));
    }
    if !(youngs_modulus > 0.0) || !youngs_modulus.is_finite() {
        return Err(Error::InvalidMaterial(format!(
            "Young's modulus must be positive and finite, got {youngs_modulus}"
        )));
    }
    let clamped = youngs_modulus < MIN_YOUNGS_MODULUS;
    let e = youngs_modulus.max(MIN_YOUNGS_MODULUS);
    let nu = poisson_ratio;
    Ok(MaterialParams {
        youngs_modulus: e,
        poisson_ratio: nu,
        mu: e / (2.0 * (1.0 + nu)),
        lambda: e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)),
        clamped,
    })
}

/// Named materials as `(E, ν)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaterialTable(pub BTreeMap<String, (f64, f64)>);

impl Default for MaterialTable {
    fn default() -> Self {
        MaterialTable(BTreeMap::from([
            ("rigid".to_string(), (1e7, 0.30)),
            ("leather".to_string(), (1e5, 0.35)),
            ("soft-cloth".to_string(), (1000.0, 0.40)),
        ]))
    }
}

impl MaterialTable {
    pub fn lookup(&self, name: &str) -> Result<MaterialParams> {
        let (e, nu) = self.0.get(name).ok_or_else(|| {
            let known: Vec<&str> = self.0.keys().map(String::as_str).collect();
            Error::InvalidMaterial(format!("unknown material `{name}`; known: {}", known.join(", ")))
        })?;
        lame_from_material(*e, *nu)
    }

    /// Entries of `other` replace or extend this table.
    pub fn merged(mut self, other: &MaterialTable) -> Self {
        for (k, v) in &other.0 {
            self.0.insert(k.clone(), *v);
        }
        self
    }
}

/// `Σ μ/2 (tr(JᵀJ) − 3) − μ ln det J + λ/2 ln² det J` and its per-matrix
/// gradient `μ (J − J⁻ᵀ) + λ ln(det J) J⁻ᵀ`.
pub fn neo_hookean(jacobians: &[Matrix3<f64>], material: &MaterialParams) -> Result<(f64, Vec<Matrix3<f64>>)> {
    let (mu, lambda) = (material.mu, material.lambda);
    let per_face: Vec<Result<(f64, Matrix3<f64>)>> = jacobians
        .par_iter()
        .enumerate()
        .map(|(face, j)| {
            let det = j.determinant();
            if !(det > 1e-9) {
                return Err(Error::InvertedElement { face, det });
            }
            let inv_t = j
                .try_inverse()
                .ok_or(Error::InvertedElement { face, det })?
                .transpose();
            let log_det = det.ln();
            let value = 0.5 * mu * (j.norm_squared() - 3.0) - mu * log_det
                + 0.5 * lambda * log_det * log_det;
            let stress = (j - inv_t) * mu + inv_t * (lambda * log_det);
            Ok((value, stress))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(jacobians.len());
    for r in per_face {
        let (v, g) = r?;
        total += v;
        grads.push(g);
    }
    Ok((total, grads))
}
