//! Jacobian-field deformation: per-face 3x3 targets, vertex positions from
//! an area-weighted least-squares (Poisson) solve, and descent on the field
//! through the adjoint of that solve.

use std::cell::RefCell;
use std::collections::BTreeMap;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Llt;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::aabb::{Aabb, Vec3};
use crate::bvh::{Bvh, DEFAULT_REBUILD_CYCLE};
use crate::energy::{
    neo_hookean, paired_proximity, proximity_loss, two_sided_barrier, MaterialParams, Pairing, Target, DEFORM_MASK_THRESHOLD,
    MIN_CERTIFIED_CLEARANCE,
};
use crate::error::{Error, Result};
use crate::geometry::{mesh_intersects, penetration_stats, PenetrationStats, Surface, Topology};
use crate::mesh::TriangleMesh;
use crate::optim::{descend, Evaluation, OptimizerConfig};
use crate::rigid::LossBreakdown;
use crate::scene::Scene;

/// One 3x3 matrix per face.
pub type JacobianField = Vec<Matrix3<f64>>;

pub fn identity_field(faces: usize) -> JacobianField {
    vec![Matrix3::identity(); faces]
}

/// Rest-pose gradient operator with a factored normal-equation system.
pub struct GradientOperator {
    faces: Vec<[usize; 3]>,
    areas: Vec<f64>,
    normals: Vec<Vec3>,
    /// Gradients of the three hat functions of each face, in its plane.
    hat_gradients: Vec<[Vec3; 3]>,
    /// Vertex to row of the reduced system, `None` for grounded vertices.
    reduced_index: Vec<Option<usize>>,
    component: Vec<usize>,
    component_size: Vec<usize>,
    rest_means: Vec<Vec3>,
    rest: Vec<Vec3>,
    laplacian: SparseColMat<usize, f64>,
    factor: Option<Llt<usize, f64>>,
}

impl std::fmt::Debug for GradientOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GradientOperator")
            .field("faces", &self.faces.len())
            .field("vertices", &self.rest.len())
            .field("components", &self.component_size.len())
            .finish()
    }
}

impl GradientOperator {
    pub fn new(rest: &TriangleMesh) -> Result<Self> {
        let faces = rest.faces().to_vec();
        let positions = rest.vertices();
        let mut hat_gradients = Vec::with_capacity(faces.len());
        for (fi, f) in faces.iter().enumerate() {
            let [a, b, c] = f.map(|v| positions[v]);
            let n = rest.face_normals()[fi];
            let twice_area = 2.0 * rest.face_areas()[fi];
            // Gradient of the hat at a corner: the opposite edge rotated a
            // quarter turn in the face plane, over twice the area.
            hat_gradients.push([
                n.cross(&(c - b)) / twice_area,
                n.cross(&(a - c)) / twice_area,
                n.cross(&(b - a)) / twice_area,
            ]);
        }
        let (component, count) = rest.vertex_components();
        let mut component_size = vec![0usize; count];
        let mut rest_means = vec![Vec3::zeros(); count];
        for (v, &c) in component.iter().enumerate() {
            component_size[c] += 1;
            rest_means[c] += positions[v];
        }
        for (m, &n) in rest_means.iter_mut().zip(&component_size) {
            *m /= n as f64;
        }
        // Ground the first vertex of every component.
        let mut grounded = vec![false; count];
        let mut reduced_index = vec![None; positions.len()];
        let mut next = 0;
        for (v, &c) in component.iter().enumerate() {
            if grounded[c] {
                reduced_index[v] = Some(next);
                next += 1;
            } else {
                grounded[c] = true;
            }
        }
        let mut entries: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (fi, f) in faces.iter().enumerate() {
            let a = rest.face_areas()[fi];
            let g = &hat_gradients[fi];
            for k in 0..3 {
                for l in 0..3 {
                    if let (Some(r), Some(c)) = (reduced_index[f[k]], reduced_index[f[l]]) {
                        *entries.entry((c, r)).or_insert(0.0) += a * g[k].dot(&g[l]);
                    }
                }
            }
        }
        let triplets: Vec<Triplet<usize, usize, f64>> = entries
            .into_iter()
            .map(|((c, r), v)| Triplet::new(r, c, v))
            .collect();
        let laplacian = SparseColMat::try_new_from_triplets(next, next, &triplets)
            .map_err(|e| Error::Solve(format!("assembling the normal equations: {e:?}")))?;
        let factor = if next > 0 {
            Some(
                laplacian
                    .sp_cholesky(Side::Lower)
                    .map_err(|e| Error::Solve(format!("factoring the normal equations: {e:?}")))?,
            )
        } else {
            None
        };
        Ok(GradientOperator {
            faces,
            areas: rest.face_areas().to_vec(),
            normals: rest.face_normals().to_vec(),
            hat_gradients,
            reduced_index,
            component,
            component_size,
            rest_means,
            rest: positions.to_vec(),
            laplacian,
            factor,
        })
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn num_components(&self) -> usize {
        self.component_size.len()
    }

    /// Per-face gradient of a vertex field, completed with the face normal
    /// so that rest positions map to the identity.
    pub fn apply(&self, positions: &[Vec3]) -> JacobianField {
        self.faces
            .iter()
            .zip(&self.hat_gradients)
            .zip(&self.normals)
            .map(|((f, g), n)| {
                let mut m = n * n.transpose();
                for k in 0..3 {
                    m += positions[f[k]] * g[k].transpose();
                }
                m
            })
            .collect()
    }

    /// Right-hand side of the normal equations, one column per coordinate.
    fn rhs(&self, field: &[Matrix3<f64>]) -> Mat<f64> {
        let n = self.laplacian.nrows();
        let mut b = Mat::<f64>::zeros(n, 3);
        for (fi, f) in self.faces.iter().enumerate() {
            for k in 0..3 {
                if let Some(r) = self.reduced_index[f[k]] {
                    let v = field[fi] * self.hat_gradients[fi][k] * self.areas[fi];
                    for c in 0..3 {
                        b[(r, c)] += v[c];
                    }
                }
            }
        }
        b
    }

    fn solve_reduced(&self, b: &Mat<f64>) -> Mat<f64> {
        match &self.factor {
            Some(llt) => llt.solve(b),
            None => Mat::zeros(0, 3),
        }
    }

    fn expand(&self, x: &Mat<f64>) -> Vec<Vec3> {
        self.reduced_index
            .iter()
            .map(|r| match r {
                Some(r) => Vec3::new(x[(*r, 0)], x[(*r, 1)], x[(*r, 2)]),
                None => Vec3::zeros(),
            })
            .collect()
    }

    /// Least-squares vertex positions for a field, each connected component
    /// shifted so its vertex mean matches the rest pose.
    pub fn solve(&self, field: &[Matrix3<f64>]) -> Vec<Vec3> {
        let x = self.solve_reduced(&self.rhs(field));
        let mut positions = self.expand(&x);
        let mut means = vec![Vec3::zeros(); self.component_size.len()];
        for (p, &c) in positions.iter().zip(&self.component) {
            means[c] += p;
        }
        for (c, m) in means.iter_mut().enumerate() {
            *m = self.rest_means[c] - *m / self.component_size[c] as f64;
        }
        for (p, &c) in positions.iter_mut().zip(&self.component) {
            *p += means[c];
        }
        positions
    }

    /// Pulls per-vertex gradients back through [`GradientOperator::solve`]
    /// to per-face 3x3 gradients.
    pub fn adjoint(&self, vertex_gradients: &[Vec3]) -> JacobianField {
        let mut sums = vec![Vec3::zeros(); self.component_size.len()];
        for (g, &c) in vertex_gradients.iter().zip(&self.component) {
            sums[c] += g;
        }
        let n = self.laplacian.nrows();
        let mut rhs = Mat::<f64>::zeros(n, 3);
        for (v, r) in self.reduced_index.iter().enumerate() {
            if let Some(r) = r {
                let c = self.component[v];
                let centered = vertex_gradients[v] - sums[c] / self.component_size[c] as f64;
                for k in 0..3 {
                    rhs[(*r, k)] = centered[k];
                }
            }
        }
        let y = self.expand(&self.solve_reduced(&rhs));
        self.faces
            .iter()
            .enumerate()
            .map(|(fi, f)| {
                let mut m = Matrix3::zeros();
                for k in 0..3 {
                    m += y[f[k]] * self.hat_gradients[fi][k].transpose();
                }
                m * self.areas[fi]
            })
            .collect()
    }

    /// `‖L x − b‖ / ‖b‖` of the reduced system for a field, as a solve check.
    pub fn relative_residual(&self, field: &[Matrix3<f64>]) -> f64 {
        let b = self.rhs(field);
        let x = self.solve_reduced(&b);
        let r = &self.laplacian * &x - &b;
        r.norm_l2() / b.norm_l2().max(f64::MIN_POSITIVE)
    }

    /// Reduced normal-equation matrix, dense, for inspection in tests.
    pub fn dense_normal_matrix(&self) -> nalgebra::DMatrix<f64> {
        let n = self.laplacian.nrows();
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for c in 0..n {
            let col = self.laplacian.row_idx_of_col_raw(c);
            let vals = self.laplacian.val_of_col(c);
            for (r, v) in col.iter().zip(vals) {
                m[(*r, c)] += *v;
            }
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformationConfig {
    pub lambda_e: f64,
    pub max_iterations: usize,
    pub step_size: f64,
    pub rebuild_cycle: usize,
    pub mask_threshold: f64,
}

impl Default for DeformationConfig {
    fn default() -> Self {
        DeformationConfig {
            lambda_e: 1e-6,
            max_iterations: 500,
            step_size: 0.01,
            rebuild_cycle: DEFAULT_REBUILD_CYCLE,
            mask_threshold: DEFORM_MASK_THRESHOLD,
        }
    }
}

impl DeformationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rebuild_cycle == 0 {
            return Err(Error::Config("deformation: rebuild_cycle must be at least 1".into()));
        }
        if !(self.lambda_e >= 0.0) || !(self.mask_threshold > 0.0) || !(self.step_size > 0.0) {
            return Err(Error::Config(
                "deformation: lambda_e must be non-negative, mask_threshold and step_size positive".into(),
            ));
        }
        Ok(())
    }
}

/// Extra vertex-space loss supplied from outside, e.g. an image-guided term.
/// Returns its value and per-vertex gradients.
pub type VertexHook<'a> = dyn Fn(&[Vec3]) -> (f64, Vec<Vec3>) + Sync + 'a;

#[derive(Clone, Debug)]
pub struct DeformResult {
    pub positions: Vec<Vec3>,
    pub jacobians: JacobianField,
    pub losses: LossBreakdown,
    pub iterations_used: usize,
    pub loss_trace: Vec<f64>,
    pub converged: bool,
    pub frozen: bool,
    pub max_displacement: f64,
    pub barrier_overflow: usize,
    pub tree_generation: u64,
}

struct DeformEval {
    positions: Vec<Vec3>,
    tree: Bvh,
    losses: LossBreakdown,
    clear: bool,
    pairing: Pairing,
}

fn flatten(field: &[Matrix3<f64>]) -> Vec<f64> {
    field.iter().flat_map(|m| m.iter().copied().collect::<Vec<_>>()).collect()
}

fn unflatten(params: &[f64]) -> JacobianField {
    params.chunks_exact(9).map(Matrix3::from_column_slice).collect()
}

/// Step-4 loss on a fixed rest mesh as a function of the Jacobian field.
pub struct DeformObjective<'a> {
    pub operator: GradientOperator,
    faces: Vec<[usize; 3]>,
    scene: &'a Scene,
    material: &'a MaterialParams,
    config: &'a DeformationConfig,
    hook: Option<&'a VertexHook<'a>>,
}

/// Loss terms and the field gradient at one field.
#[derive(Clone, Debug)]
pub struct FieldEvaluation {
    pub losses: LossBreakdown,
    pub gradient: JacobianField,
    pub barrier_overflow: usize,
    pub min_distance: f64,
    pub pairing: Pairing,
}

impl<'a> DeformObjective<'a> {
    pub fn new(
        rest: &TriangleMesh,
        scene: &'a Scene,
        material: &'a MaterialParams,
        config: &'a DeformationConfig,
        hook: Option<&'a VertexHook<'a>>,
    ) -> Result<Self> {
        config.validate()?;
        Ok(DeformObjective {
            operator: GradientOperator::new(rest)?,
            faces: rest.faces().to_vec(),
            scene,
            material,
            config,
            hook,
        })
    }

    pub fn positions(&self, field: &[Matrix3<f64>]) -> Vec<Vec3> {
        self.operator.solve(field)
    }

    /// `positions` must come from [`Self::positions`] of the same field and
    /// `tree` must bound them.
    pub fn evaluate(&self, field: &[Matrix3<f64>], positions: &[Vec3], tree: &Bvh) -> Result<FieldEvaluation> {
        let scene = self.scene;
        let (elastic, stress) = neo_hookean(field, self.material)?;
        let object = Target::new(positions, &self.faces, tree);
        let prox = proximity_loss(&object, &scene.region_target(), &scene.region_vertices, self.config.mask_threshold);
        let bar = two_sided_barrier(&object, &scene.base_target(), scene.barrier_width);
        let mut grads: Vec<Vec3> = prox.gradients.iter().zip(&bar.gradients).map(|(a, b)| a + b).collect();
        let mut extra_loss = 0.0;
        if let Some(h) = self.hook {
            let (v, g) = h(positions);
            extra_loss = v;
            for (a, b) in grads.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let lambda_e = self.config.lambda_e;
        let gradient = self
            .operator
            .adjoint(&grads)
            .iter()
            .zip(&stress)
            .map(|(g, s)| g + s * lambda_e)
            .collect();
        Ok(FieldEvaluation {
            losses: LossBreakdown {
                proximity: prox.value,
                barrier: bar.value,
                elastic: elastic * lambda_e,
                total: prox.value + bar.value + elastic * lambda_e + extra_loss,
            },
            gradient,
            barrier_overflow: bar.overflow,
            min_distance: bar.min_distance,
            pairing: prox.pairing,
        })
    }

    /// Proximity over a fixed set of correspondences, see [`paired_proximity`].
    pub fn paired_proximity(&self, positions: &[Vec3], tree: &Bvh, pairing: &Pairing) -> f64 {
        let object = Target::new(positions, &self.faces, tree);
        paired_proximity(&object, &self.scene.region_target(), &self.scene.region_vertices, pairing)
    }
}

/// Field-space descent on proximity (small mask), barrier and elasticity,
/// starting from the identity field on `rest`. With `certify`, every accepted
/// state is non-intersecting with the base.
pub fn step4_deform(
    rest: &TriangleMesh,
    scene: &Scene,
    material: &MaterialParams,
    config: &DeformationConfig,
    optimizer: &OptimizerConfig,
    certify: bool,
    hook: Option<&VertexHook>,
) -> Result<DeformResult> {
    let objective = DeformObjective::new(rest, scene, material, config, hook)?;
    let faces = rest.faces().to_vec();
    let topology = Topology::of(rest);
    let base = scene.base.view();
    let rest_tree = Bvh::build(rest.vertices(), &faces, scene.leaf_size);
    if certify {
        let surface = Surface {
            positions: rest.vertices(),
            faces: &faces,
            tree: &rest_tree,
            topology: &topology,
        };
        if mesh_intersects(&surface, &base).intersecting {
            return Err(Error::Contract("deformation must start from a non-intersecting state".into()));
        }
    }
    let built = RefCell::new(rest_tree);
    let overflow = RefCell::new(0usize);
    // Correspondences inside the mask at the current iterate. Candidates are
    // compared on these alone so a vertex crossing the small mask cannot
    // make every step length look uphill; re-pairing happens on acceptance.
    let pairing: RefCell<Option<Pairing>> = RefCell::new(None);
    let opt = OptimizerConfig {
        step_size: config.step_size,
        max_iterations: config.max_iterations,
        ..optimizer.clone()
    };
    let start = flatten(&identity_field(faces.len()));
    let evaluate = |params: &[f64], iteration: usize| -> Result<Evaluation<DeformEval>> {
        let field = unflatten(params);
        let positions = objective.positions(&field);
        let tree = built
            .borrow()
            .maybe_rebuild(&positions, &faces, iteration, config.rebuild_cycle);
        let e = objective.evaluate(&field, &positions, &tree)?;
        *overflow.borrow_mut() += e.barrier_overflow;
        let trial_loss = match &*pairing.borrow() {
            Some(current) => {
                let paired = objective.paired_proximity(&positions, &tree, current);
                Some(e.losses.total - e.losses.proximity + paired)
            }
            None => None,
        };
        if trial_loss.is_none() {
            *pairing.borrow_mut() = Some(e.pairing.clone());
        }
        Ok(Evaluation {
            loss: e.losses.total,
            trial_loss,
            gradient: flatten(&e.gradient),
            extra: DeformEval {
                clear: e.barrier_overflow == 0 && e.min_distance >= MIN_CERTIFIED_CLEARANCE,
                positions,
                tree,
                losses: e.losses,
                pairing: e.pairing,
            },
        })
    };
    let admissible = |_: &[f64], e: &Evaluation<DeformEval>| {
        let ok = !certify || e.extra.clear && {
            let surface = Surface {
                positions: &e.extra.positions,
                faces: &faces,
                tree: &e.extra.tree,
                topology: &topology,
            };
            !mesh_intersects(&surface, &base).intersecting
        };
        if ok {
            if e.extra.tree.generation() != built.borrow().generation() {
                *built.borrow_mut() = e.extra.tree.clone();
            }
            *pairing.borrow_mut() = Some(e.extra.pairing.clone());
        }
        ok
    };
    let descent = descend(start.clone(), &opt, evaluate, admissible, |_| {})?;
    let generation = built.borrow().generation();
    let unchanged = descent.params == start;
    let positions = if unchanged {
        rest.vertices().to_vec()
    } else {
        descent.last.extra.positions.clone()
    };
    let max_displacement = positions
        .iter()
        .zip(rest.vertices())
        .map(|(p, q)| (p - q).norm())
        .fold(0.0, f64::max);
    Ok(DeformResult {
        jacobians: unflatten(&descent.params),
        positions,
        losses: descent.last.extra.losses,
        iterations_used: descent.iterations,
        loss_trace: descent.trace,
        converged: descent.converged,
        frozen: descent.frozen,
        max_displacement,
        barrier_overflow: overflow.into_inner(),
        tree_generation: generation,
    })
}

/// Penetration statistics of deformed object positions against the base.
pub fn deformed_penetration(positions: &[Vec3], object: &TriangleMesh, scene: &Scene) -> PenetrationStats {
    let tree = Bvh::build(positions, object.faces(), scene.leaf_size);
    let topology = Topology::of(object);
    let surface = Surface {
        positions,
        faces: object.faces(),
        tree: &tree,
        topology: &topology,
    };
    penetration_stats(&surface, &scene.base.view())
}

/// One line of nine numbers (row-major) per face.
pub fn jacobians_to_text(field: &[Matrix3<f64>]) -> String {
    let mut out = String::new();
    for m in field {
        let row: Vec<String> = m.transpose().iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Largest vertex displacement relative to the bounding-box diagonal of `rest`.
pub fn relative_displacement(positions: &[Vec3], rest: &[Vec3]) -> f64 {
    let diag = Aabb::from_points(rest).diagonal();
    positions
        .iter()
        .zip(rest)
        .map(|(p, q)| (p - q).norm())
        .fold(0.0, f64::max)
        / diag
}
