//! Axis-aligned bounding-volume hierarchy with batch leaves.
//!
//! The tree stops splitting once a node holds at most `leaf_size` triangles;
//! a leaf is then evaluated as one flat loop over its contiguous triangle
//! span. Closest-point queries walk the tree best-first by box lower bound
//! and are exact: they return the same face and distance as a brute-force
//! scan, with ties broken by the lowest face index.
//!
//! The tree does not own geometry. Every query receives the vertex positions
//! and the face list the tree was built over, so one tree can serve a mesh
//! under a rigid motion ([`Bvh::refit_rigid`]) or a deforming mesh between
//! rebuilds ([`Bvh::maybe_rebuild`]).

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::aabb::{Aabb, Vec3};
use crate::geometry::{closest_point_on_triangle, ray_triangle, triangles_intersect, PointRegion};
use crate::transform::ScaledRigidTransform;

pub const DEFAULT_LEAF_SIZE: usize = 1000;
pub const DEFAULT_REBUILD_CYCLE: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct BvhNode {
    pub bounds: Aabb,
    /// Span `[start, end)` into the tree's permutation.
    pub start: usize,
    pub end: usize,
    pub children: Option<[usize; 2]>,
}

impl BvhNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Clone, Debug)]
pub struct Bvh {
    nodes: Vec<BvhNode>,
    perm: Vec<usize>,
    leaf_size: usize,
    generation: u64,
    /// Node bounds at the last build, and the positions they were built from.
    built_bounds: Arc<Vec<Aabb>>,
    snapshot: Arc<Vec<Vec3>>,
    inflation: f64,
}

/// Counters for benchmarking and pruning checks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct QueryStats {
    pub nodes_visited: u64,
    pub face_evaluations: u64,
}

impl std::ops::AddAssign for QueryStats {
    fn add_assign(&mut self, o: Self) {
        self.nodes_visited += o.nodes_visited;
        self.face_evaluations += o.face_evaluations;
    }
}

/// Result of a closest-point query. `face` is `None` (and `distance` is
/// infinite) when nothing lies within the cutoff.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub point: Vec3,
    pub face: Option<usize>,
    pub barycentric: [f64; 3],
    pub region: PointRegion,
}

impl Hit {
    pub fn miss() -> Self {
        Hit {
            distance: f64::INFINITY,
            point: Vec3::repeat(f64::NAN),
            face: None,
            barycentric: [0.0; 3],
            region: PointRegion::Face,
        }
    }

    pub fn is_hit(&self) -> bool {
        self.face.is_some()
    }
}

#[inline]
fn tri(positions: &[Vec3], f: &[usize; 3]) -> [Vec3; 3] {
    [positions[f[0]], positions[f[1]], positions[f[2]]]
}

#[derive(PartialEq)]
struct Pending {
    bound: f64,
    node: usize,
}

impl Eq for Pending {}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on the bound, then on node index for a fixed visiting order.
        other
            .bound
            .total_cmp(&self.bound)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Bvh {
    /// Top-down median split on the longest axis of each node's box.
    pub fn build(positions: &[Vec3], faces: &[[usize; 3]], leaf_size: usize) -> Self {
        assert!(leaf_size >= 1, "leaf_size must be positive");
        let tri_bounds: Vec<Aabb> = faces
            .iter()
            .map(|f| Aabb::of_triangle(&tri(positions, f)))
            .collect();
        let centers: Vec<Vec3> = tri_bounds.iter().map(Aabb::center).collect();
        let mut perm: Vec<usize> = (0..faces.len()).collect();
        let mut nodes = Vec::with_capacity(2 * faces.len() / leaf_size.max(1) + 1);
        nodes.push(BvhNode {
            bounds: Aabb::empty(),
            start: 0,
            end: faces.len(),
            children: None,
        });
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let (start, end) = (nodes[ni].start, nodes[ni].end);
            let bounds = perm[start..end]
                .iter()
                .fold(Aabb::empty(), |b, &f| b.union(&tri_bounds[f]));
            nodes[ni].bounds = bounds;
            if end - start <= leaf_size {
                continue;
            }
            let axis = bounds.longest_axis();
            let span = &mut perm[start..end];
            span.sort_by(|&a, &b| {
                centers[a][axis]
                    .total_cmp(&centers[b][axis])
                    .then(a.cmp(&b))
            });
            // When every center coincides the sort order is just face order,
            // so splitting at the midpoint still makes progress.
            let mid = start + (end - start) / 2;
            let left = nodes.len();
            nodes.push(BvhNode {
                bounds: Aabb::empty(),
                start,
                end: mid,
                children: None,
            });
            nodes.push(BvhNode {
                bounds: Aabb::empty(),
                start: mid,
                end,
                children: None,
            });
            nodes[ni].children = Some([left, left + 1]);
            stack.push(left + 1);
            stack.push(left);
        }
        let built_bounds = Arc::new(nodes.iter().map(|n| n.bounds).collect());
        Bvh {
            nodes,
            perm,
            leaf_size,
            generation: 0,
            built_bounds,
            snapshot: Arc::new(positions.to_vec()),
            inflation: 0.0,
        }
    }

    pub fn nodes(&self) -> &[BvhNode] {
        &self.nodes
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Current conservative slack added since the last rebuild.
    pub fn inflation(&self) -> f64 {
        self.inflation
    }

    pub fn root_bounds(&self) -> Aabb {
        self.nodes[0].bounds
    }

    /// Moves every node box with a scaled rigid motion. Box centers are
    /// transformed exactly; half-extents become the isotropic bound
    /// `s * sqrt(3) * max_half_extent`, which contains the box under any
    /// rotation. Always derived from the bounds of the last build.
    pub fn refit_rigid(&self, transform: &ScaledRigidTransform, pivot: &Vec3) -> Bvh {
        let rot = transform.rotation();
        let s = transform.scale;
        let nodes = self
            .nodes
            .iter()
            .zip(self.built_bounds.iter())
            .map(|(n, b)| {
                let c = transform.apply_with(&rot, &b.center(), pivot);
                let h = s * 3f64.sqrt() * b.half_extents().max() + self.inflation * s;
                let mut node = n.clone();
                node.bounds = Aabb {
                    min: c.add_scalar(-h),
                    max: c.add_scalar(h),
                };
                node
            })
            .collect();
        Bvh {
            nodes,
            ..self.clone()
        }
    }

    /// Rebuilds from `positions` when `iteration % cycle == 0`; otherwise
    /// inflates the last-built boxes by the largest vertex displacement since
    /// that build so every triangle stays inside its leaf box.
    pub fn maybe_rebuild(
        &self,
        positions: &[Vec3],
        faces: &[[usize; 3]],
        iteration: usize,
        cycle: usize,
    ) -> Bvh {
        assert!(cycle >= 1, "rebuild cycle must be positive");
        if iteration.is_multiple_of(cycle) {
            let mut t = Bvh::build(positions, faces, self.leaf_size);
            t.generation = self.generation + 1;
            return t;
        }
        let delta = positions
            .iter()
            .zip(self.snapshot.iter())
            .map(|(p, q)| (p - q).norm())
            .fold(0.0, f64::max);
        let nodes = self
            .nodes
            .iter()
            .zip(self.built_bounds.iter())
            .map(|(n, b)| BvhNode {
                bounds: if delta > 0.0 { b.inflated(delta) } else { *b },
                ..n.clone()
            })
            .collect();
        Bvh {
            nodes,
            inflation: delta,
            ..self.clone()
        }
    }

    /// Exact closest point among the tree's faces for a single query.
    pub fn closest(
        &self,
        positions: &[Vec3],
        faces: &[[usize; 3]],
        query: &Vec3,
        cutoff: f64,
        stats: &mut QueryStats,
    ) -> Hit {
        let mut best = Hit::miss();
        let mut heap = BinaryHeap::new();
        heap.push(Pending {
            bound: self.nodes[0].bounds.distance_squared(query).sqrt(),
            node: 0,
        });
        while let Some(Pending { bound, node }) = heap.pop() {
            if bound >= cutoff || bound > best.distance + 1e-12 * (1.0 + best.distance) {
                break;
            }
            stats.nodes_visited += 1;
            let n = &self.nodes[node];
            match n.children {
                Some(children) => {
                    for c in children {
                        let b = self.nodes[c].bounds.distance_squared(query).sqrt();
                        heap.push(Pending { bound: b, node: c });
                    }
                }
                None => {
                    stats.face_evaluations += n.len() as u64;
                    for &f in &self.perm[n.start..n.end] {
                        let t = tri(positions, &faces[f]);
                        let c = closest_point_on_triangle(query, &t);
                        let better = c.distance < best.distance
                            || (c.distance == best.distance && Some(f) < best.face);
                        if better && c.distance < cutoff {
                            best = Hit {
                                distance: c.distance,
                                point: c.point,
                                face: Some(f),
                                barycentric: c.barycentric,
                                region: c.region,
                            };
                        }
                    }
                }
            }
        }
        best
    }

    /// Closest-point queries for a batch of points. Results are in query
    /// order; points with nothing closer than `cutoff` get [`Hit::miss`].
    pub fn batch_closest(
        &self,
        positions: &[Vec3],
        faces: &[[usize; 3]],
        queries: &[Vec3],
        cutoff: f64,
    ) -> (Vec<Hit>, QueryStats) {
        let results: Vec<(Hit, QueryStats)> = queries
            .par_iter()
            .map(|q| {
                let mut s = QueryStats::default();
                let h = self.closest(positions, faces, q, cutoff, &mut s);
                (h, s)
            })
            .collect();
        let mut stats = QueryStats::default();
        let hits = results
            .into_iter()
            .map(|(h, s)| {
                stats += s;
                h
            })
            .collect();
        (hits, stats)
    }

    /// Faces (as indices into `faces`) whose boxes overlap `query`.
    pub fn faces_overlapping(
        &self,
        positions: &[Vec3],
        faces: &[[usize; 3]],
        query: &Aabb,
        out: &mut Vec<usize>,
    ) {
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let n = &self.nodes[ni];
            if !n.bounds.overlaps(query) {
                continue;
            }
            match n.children {
                Some([a, b]) => {
                    stack.push(b);
                    stack.push(a);
                }
                None => {
                    for &f in &self.perm[n.start..n.end] {
                        if Aabb::of_triangle(&tri(positions, &faces[f])).overlaps(query) {
                            out.push(f);
                        }
                    }
                }
            }
        }
    }

    /// Number of faces crossed by the ray `origin + t * dir`, `t > 0`.
    pub fn count_ray_hits(
        &self,
        positions: &[Vec3],
        faces: &[[usize; 3]],
        origin: &Vec3,
        dir: &Vec3,
    ) -> usize {
        let inv = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut count = 0;
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let n = &self.nodes[ni];
            if n.bounds.ray_hit(origin, &inv, f64::INFINITY).is_none() {
                continue;
            }
            match n.children {
                Some([a, b]) => {
                    stack.push(b);
                    stack.push(a);
                }
                None => {
                    for &f in &self.perm[n.start..n.end] {
                        if ray_triangle(origin, dir, &tri(positions, &faces[f])).is_some() {
                            count += 1;
                        }
                    }
                }
            }
        }
        count
    }

    /// All pairs `(face of self, face of other)` that properly intersect,
    /// found by a simultaneous descent of both trees. Sorted.
    pub fn intersecting_pairs(
        &self,
        positions: &[Vec3],
        faces: &[[usize; 3]],
        other: &Bvh,
        other_positions: &[Vec3],
        other_faces: &[[usize; 3]],
    ) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        let mut stack = vec![(0usize, 0usize)];
        let mut left = Vec::new();
        let mut right = Vec::new();
        while let Some((a, b)) = stack.pop() {
            let na = &self.nodes[a];
            let nb = &other.nodes[b];
            if !na.bounds.overlaps(&nb.bounds) {
                continue;
            }
            match (na.children, nb.children) {
                (None, None) => {
                    // Cull each side against the other leaf's box, then test
                    // the survivors pairwise.
                    left.clear();
                    right.clear();
                    for &f in &self.perm[na.start..na.end] {
                        let t = tri(positions, &faces[f]);
                        let bb = Aabb::of_triangle(&t);
                        if bb.overlaps(&nb.bounds) {
                            left.push((f, t, bb));
                        }
                    }
                    if left.is_empty() {
                        continue;
                    }
                    for &g in &other.perm[nb.start..nb.end] {
                        let t = tri(other_positions, &other_faces[g]);
                        let bb = Aabb::of_triangle(&t);
                        if bb.overlaps(&na.bounds) {
                            right.push((g, t, bb));
                        }
                    }
                    for (f, tf, bf) in &left {
                        for (g, tg, bg) in &right {
                            if bf.overlaps(bg) && triangles_intersect(tf, tg) {
                                pairs.push((*f, *g));
                            }
                        }
                    }
                }
                (Some([a0, a1]), None) => {
                    stack.push((a1, b));
                    stack.push((a0, b));
                }
                (None, Some([b0, b1])) => {
                    stack.push((a, b1));
                    stack.push((a, b0));
                }
                (Some([a0, a1]), Some([b0, b1])) => {
                    if na.len() >= nb.len() {
                        stack.push((a1, b));
                        stack.push((a0, b));
                    } else {
                        stack.push((a, b1));
                        stack.push((a, b0));
                    }
                }
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        pairs
    }
}

/// Brute-force closest point over all faces, with the same tie rule as the
/// tree query. Used as a reference and for tiny inputs.
pub fn brute_force_closest(positions: &[Vec3], faces: &[[usize; 3]], query: &Vec3) -> Hit {
    let mut best = Hit::miss();
    for (f, face) in faces.iter().enumerate() {
        let c = closest_point_on_triangle(query, &tri(positions, face));
        if c.distance < best.distance {
            best = Hit {
                distance: c.distance,
                point: c.point,
                face: Some(f),
                barycentric: c.barycentric,
                region: c.region,
            };
        }
    }
    best
}
