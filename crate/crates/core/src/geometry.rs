//! Exact local queries: point-triangle closest point, triangle-triangle
//! overlap, ray casting, and the mesh-level intersection verdict and
//! penetration statistics built on them.

use crate::aabb::{Aabb, Vec3};
use crate::bvh::{Bvh, DEFAULT_LEAF_SIZE};
use crate::error::{Error, Result};

/// Touching contacts closer than this (in normalized units) do not count as
/// intersections.
pub const CONTACT_TOLERANCE: f64 = 1e-9;

/// Which feature of the triangle the closest point lies on. Edge `k` joins
/// vertex `k` and vertex `(k + 1) % 3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointRegion {
    Face,
    Edge(u8),
    Vertex(u8),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosestPointResult {
    pub distance: f64,
    pub point: Vec3,
    pub region: PointRegion,
    pub barycentric: [f64; 3],
}

/// Closest point on a triangle by Voronoi-region classification.
pub fn point_triangle(query: &Vec3, tri: &[Vec3; 3]) -> Result<ClosestPointResult> {
    let n = (tri[1] - tri[0]).cross(&(tri[2] - tri[0]));
    let scale = (tri[1] - tri[0]).norm_squared().max((tri[2] - tri[0]).norm_squared());
    if !(n.norm() > 1e-12 * scale) {
        return Err(Error::InvalidMesh(format!("degenerate triangle {tri:?}")));
    }
    Ok(closest_point_on_triangle(query, tri))
}

/// [`point_triangle`] without the degeneracy check.
#[inline]
pub fn closest_point_on_triangle(p: &Vec3, tri: &[Vec3; 3]) -> ClosestPointResult {
    let [a, b, c] = *tri;
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    let finish = |point: Vec3, region, barycentric| ClosestPointResult {
        distance: (p - point).norm(),
        point,
        region,
        barycentric,
    };
    if d1 <= 0.0 && d2 <= 0.0 {
        return finish(a, PointRegion::Vertex(0), [1.0, 0.0, 0.0]);
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return finish(b, PointRegion::Vertex(1), [0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return finish(a + ab * v, PointRegion::Edge(0), [1.0 - v, v, 0.0]);
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return finish(c, PointRegion::Vertex(2), [0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return finish(a + ac * w, PointRegion::Edge(2), [1.0 - w, 0.0, w]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return finish(b + (c - b) * w, PointRegion::Edge(1), [0.0, 1.0 - w, w]);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    finish(a + ab * v + ac * w, PointRegion::Face, [1.0 - v - w, v, w])
}

/// Interval of the line `plane_a ∩ plane_b` covered by `t`, given signed
/// distances of its vertices to the other plane. Snapped zeros count as on
/// the plane.
fn crossing_interval(t: &[Vec3; 3], d: &[f64; 3], dir: &Vec3) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut push = |p: Vec3| {
        let s = p.dot(dir);
        lo = lo.min(s);
        hi = hi.max(s);
    };
    for k in 0..3 {
        if d[k] == 0.0 {
            push(t[k]);
        }
        let j = (k + 1) % 3;
        if (d[k] > 0.0 && d[j] < 0.0) || (d[k] < 0.0 && d[j] > 0.0) {
            let s = d[k] / (d[k] - d[j]);
            push(t[k] + (t[j] - t[k]) * s);
        }
    }
    (lo, hi)
}

fn plane_distances(t: &[Vec3; 3], plane: &[Vec3; 3]) -> Option<[f64; 3]> {
    let n = (plane[1] - plane[0]).cross(&(plane[2] - plane[0]));
    let len = n.norm();
    if len == 0.0 {
        return None;
    }
    let n = n / len;
    let mut d = [0.0; 3];
    for k in 0..3 {
        let v = n.dot(&(t[k] - plane[0]));
        d[k] = if v.abs() <= CONTACT_TOLERANCE { 0.0 } else { v };
    }
    Some(d)
}

fn strictly_crosses(d: &[f64; 3]) -> bool {
    d.iter().any(|&x| x > 0.0) && d.iter().any(|&x| x < 0.0)
}

/// Proper triangle-triangle intersection (interval-overlap test). Each
/// triangle must strictly cross the other's plane and the two crossing
/// segments must overlap by more than [`CONTACT_TOLERANCE`]. Touching and
/// coplanar contacts are not intersections.
pub fn triangles_intersect(a: &[Vec3; 3], b: &[Vec3; 3]) -> bool {
    let Some(da) = plane_distances(a, b) else {
        return false;
    };
    if !strictly_crosses(&da) {
        return false;
    }
    let Some(db) = plane_distances(b, a) else {
        return false;
    };
    if !strictly_crosses(&db) {
        return false;
    }
    let na = (a[1] - a[0]).cross(&(a[2] - a[0]));
    let nb = (b[1] - b[0]).cross(&(b[2] - b[0]));
    let dir = na.cross(&nb);
    let len = dir.norm();
    if len == 0.0 {
        return false;
    }
    let dir = dir / len;
    let (a0, a1) = crossing_interval(a, &da, &dir);
    let (b0, b1) = crossing_interval(b, &db, &dir);
    a1.min(b1) - a0.max(b0) > CONTACT_TOLERANCE
}

/// Ray-triangle hit parameter `t > 0` (Möller–Trumbore).
pub fn ray_triangle(origin: &Vec3, dir: &Vec3, tri: &[Vec3; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-300 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 0.0).then_some(t)
}

/// Fixed, irrational-looking directions so rays rarely graze edges.
pub const PARITY_RAYS: [[f64; 3]; 3] = [
    [0.5773502691896258, 0.5812381937190965, 0.5734623443601549],
    [-0.7071067811865476, 0.1045284632676535, 0.6994138792685738],
    [0.2164396139381029, -0.9510565162951535, 0.2203812185587396],
];

/// Parity of ray crossings for each of the three fixed directions.
pub fn parity_votes(point: &Vec3, positions: &[Vec3], faces: &[[usize; 3]], tree: &Bvh) -> [bool; 3] {
    PARITY_RAYS.map(|d| {
        let dir = Vec3::new(d[0], d[1], d[2]);
        tree.count_ray_hits(positions, faces, point, &dir) % 2 == 1
    })
}

/// Majority vote over three parity rays. Only meaningful for closed surfaces.
pub fn point_inside(point: &Vec3, positions: &[Vec3], faces: &[[usize; 3]], tree: &Bvh) -> bool {
    let v = parity_votes(point, positions, faces, tree);
    v.iter().filter(|&&b| b).count() >= 2
}

/// Per-mesh facts the containment checks need, computed once.
#[derive(Clone, Debug)]
pub struct Topology {
    pub closed: bool,
    /// One vertex per connected component.
    pub component_representatives: Vec<usize>,
}

impl Topology {
    pub fn of(mesh: &crate::mesh::TriangleMesh) -> Self {
        let (labels, count) = mesh.vertex_components();
        let mut reps = vec![usize::MAX; count];
        let mut used = vec![false; mesh.num_vertices()];
        for f in mesh.faces() {
            for &v in f {
                used[v] = true;
            }
        }
        for (v, &c) in labels.iter().enumerate() {
            if used[v] && reps[c] == usize::MAX {
                reps[c] = v;
            }
        }
        reps.retain(|&r| r != usize::MAX);
        Topology {
            closed: mesh.is_closed(),
            component_representatives: reps,
        }
    }
}

/// A positioned surface: current vertex positions, faces, and a tree that is
/// valid (exact or conservative) for those positions.
#[derive(Clone, Copy)]
pub struct Surface<'a> {
    pub positions: &'a [Vec3],
    pub faces: &'a [[usize; 3]],
    pub tree: &'a Bvh,
    pub topology: &'a Topology,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntersectionVerdict {
    pub intersecting: bool,
    /// `(object_face, base_face)`, sorted.
    pub intersecting_face_pairs: Vec<(usize, usize)>,
    pub contained: bool,
}

fn any_contained(inner: &Surface, outer: &Surface) -> bool {
    outer.topology.closed
        && inner.topology.component_representatives.iter().any(|&v| {
            let p = inner.positions[v];
            outer.tree.root_bounds().contains(&p)
                && point_inside(&p, outer.positions, outer.faces, outer.tree)
        })
}

/// Exact intersection test between two positioned surfaces: proper face
/// crossings first, then, if none, whether a component of either surface
/// lies inside the other (checked against closed surfaces only).
pub fn mesh_intersects(object: &Surface, base: &Surface) -> IntersectionVerdict {
    let pairs = object.tree.intersecting_pairs(
        object.positions,
        object.faces,
        base.tree,
        base.positions,
        base.faces,
    );
    let contained = pairs.is_empty() && (any_contained(object, base) || any_contained(base, object));
    IntersectionVerdict {
        intersecting: !pairs.is_empty() || contained,
        intersecting_face_pairs: pairs,
        contained,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PenetrationStats {
    pub intersecting_face_count: usize,
    pub max_penetration: f64,
}

/// Intersecting object-face count and the largest distance from an
/// inside-classified vertex to the other surface. Object vertices inside the
/// base are measured first; if there are none and the object is closed, base
/// vertices inside the object are measured instead so that a base swallowed by
/// the object still reports a positive depth.
pub fn penetration_stats(object: &Surface, base: &Surface) -> PenetrationStats {
    let pairs = object.tree.intersecting_pairs(
        object.positions,
        object.faces,
        base.tree,
        base.positions,
        base.faces,
    );
    let mut faces: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    faces.dedup();
    let mut depth = max_inside_depth(object, base);
    if depth == 0.0 {
        depth = max_inside_depth(base, object);
    }
    PenetrationStats {
        intersecting_face_count: faces.len(),
        max_penetration: depth,
    }
}

fn max_inside_depth(inner: &Surface, outer: &Surface) -> f64 {
    if !outer.topology.closed {
        return 0.0;
    }
    let bounds = outer.tree.root_bounds();
    let mut used = vec![false; inner.positions.len()];
    for f in inner.faces {
        for &v in f {
            used[v] = true;
        }
    }
    let mut depth = 0.0f64;
    let mut stats = Default::default();
    for (v, p) in inner.positions.iter().enumerate() {
        if !used[v] || !bounds.contains(p) {
            continue;
        }
        if point_inside(p, outer.positions, outer.faces, outer.tree) {
            let h = outer
                .tree
                .closest(outer.positions, outer.faces, p, f64::INFINITY, &mut stats);
            depth = depth.max(h.distance);
        }
    }
    depth
}

/// Convenience owner for a static surface (the base mesh, fixtures in tests).
#[derive(Clone, Debug)]
pub struct OwnedSurface {
    pub positions: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub tree: Bvh,
    pub topology: Topology,
}

impl OwnedSurface {
    pub fn new(mesh: &crate::mesh::TriangleMesh) -> Self {
        Self::with_leaf_size(mesh, DEFAULT_LEAF_SIZE)
    }

    pub fn with_leaf_size(mesh: &crate::mesh::TriangleMesh, leaf_size: usize) -> Self {
        OwnedSurface {
            positions: mesh.vertices().to_vec(),
            faces: mesh.faces().to_vec(),
            tree: Bvh::build(mesh.vertices(), mesh.faces(), leaf_size),
            topology: Topology::of(mesh),
        }
    }

    pub fn view(&self) -> Surface<'_> {
        Surface {
            positions: &self.positions,
            faces: &self.faces,
            tree: &self.tree,
            topology: &self.topology,
        }
    }

    pub fn bounds(&self) -> Aabb {
        self.tree.root_bounds()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{axis_box, icosphere, subdivided_plane};
    use crate::mesh::TriangleMesh;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit_tri() -> [Vec3; 3] {
        [Vec3::zeros(), Vec3::x(), Vec3::y()]
    }

    #[test]
    fn interior_vertex_and_edge_regions() {
        let t = unit_tri();
        let r = point_triangle(&Vec3::new(0.2, 0.2, 1.0), &t).unwrap();
        assert_relative_eq!(r.distance, 1.0);
        assert_eq!(r.region, PointRegion::Face);

        let r = point_triangle(&Vec3::x(), &t).unwrap();
        assert_eq!(r.distance, 0.0);
        assert_eq!(r.region, PointRegion::Vertex(1));

        let r = point_triangle(&Vec3::new(0.5, -1.0, 0.0), &t).unwrap();
        assert_eq!(r.region, PointRegion::Edge(0));
        assert_relative_eq!(r.distance, 1.0);
    }

    #[test]
    fn outside_corner_matches_sampling_oracle() {
        // Dense barycentric sampling as an independent minimizer.
        let t = unit_tri();
        let q = Vec3::new(2.0, -1.0, 0.0);
        let n = 1000;
        let mut best = (f64::INFINITY, Vec3::zeros());
        for i in 0..=n {
            for j in 0..=(n - i) {
                let (u, v) = (i as f64 / n as f64, j as f64 / n as f64);
                let p = t[0] * (1.0 - u - v) + t[1] * u + t[2] * v;
                let d = (q - p).norm();
                if d < best.0 {
                    best = (d, p);
                }
            }
        }
        let r = point_triangle(&q, &t).unwrap();
        assert!((r.distance - best.0).abs() < 1e-3);
        assert_relative_eq!(r.point, Vec3::x(), epsilon = 1e-15);
        assert_relative_eq!(r.distance, 2f64.sqrt(), epsilon = 1e-15);
        assert_eq!(r.region, PointRegion::Vertex(1));
    }

    #[test]
    fn degenerate_triangle_is_rejected() {
        let t = [Vec3::zeros(), Vec3::x(), Vec3::x() * 2.0];
        assert!(point_triangle(&Vec3::y(), &t).is_err());
    }

    fn arb_vec() -> impl Strategy<Value = Vec3> {
        (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn closest_point_bounded_by_vertices(q in arb_vec(), a in arb_vec(), b in arb_vec(), c in arb_vec()) {
            let t = [a, b, c];
            prop_assume!((b - a).cross(&(c - a)).norm() > 1e-3);
            let r = point_triangle(&q, &t).unwrap();
            prop_assert!((r.distance - (q - r.point).norm()).abs() < 1e-12);
            let bc = r.barycentric;
            prop_assert!(bc.iter().all(|&w| w >= -1e-12) && (bc.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let p = a * bc[0] + b * bc[1] + c * bc[2];
            prop_assert!((p - r.point).norm() < 1e-9);
            for (k, v) in t.iter().enumerate() {
                let dv = (q - v).norm();
                prop_assert!(r.distance <= dv + 1e-12);
                if r.region == PointRegion::Vertex(k as u8) {
                    prop_assert!((r.distance - dv).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn tri_tri_symmetric_and_matches_edge_oracle(
            a in arb_vec(), b in arb_vec(), c in arb_vec(),
            d in arb_vec(), e in arb_vec(), f in arb_vec(),
        ) {
            let t1 = [a, b, c];
            let t2 = [d, e, f];
            prop_assume!((b - a).cross(&(c - a)).norm() > 1e-2 && (e - d).cross(&(f - d)).norm() > 1e-2);
            let x = triangles_intersect(&t1, &t2);
            prop_assert_eq!(x, triangles_intersect(&t2, &t1));
            prop_assert_eq!(x, edge_crossing_oracle(&t1, &t2));
        }
    }

    /// Independent oracle: in general position two triangles intersect iff an
    /// edge of one pierces the other.
    fn edge_crossing_oracle(t1: &[Vec3; 3], t2: &[Vec3; 3]) -> bool {
        fn segment_pierces(p: &Vec3, q: &Vec3, t: &[Vec3; 3]) -> bool {
            let n = (t[1] - t[0]).cross(&(t[2] - t[0]));
            let dp = n.dot(&(p - t[0]));
            let dq = n.dot(&(q - t[0]));
            if dp * dq >= 0.0 {
                return false;
            }
            let x = p + (q - p) * (dp / (dp - dq));
            (0..3).all(|k| {
                let e = t[(k + 1) % 3] - t[k];
                n.dot(&e.cross(&(x - t[k]))) > 0.0
            })
        }
        (0..3).any(|k| segment_pierces(&t1[k], &t1[(k + 1) % 3], t2))
            || (0..3).any(|k| segment_pierces(&t2[k], &t2[(k + 1) % 3], t1))
    }

    #[test]
    fn touching_and_coplanar_are_not_intersections() {
        let t = unit_tri();
        // Vertex resting on the face.
        let s = [Vec3::new(0.2, 0.2, 0.0), Vec3::new(0.2, 0.2, 1.0), Vec3::new(0.5, 0.2, 1.0)];
        assert!(!triangles_intersect(&t, &s));
        // Coplanar overlap.
        let c = [Vec3::new(0.1, 0.1, 0.0), Vec3::new(1.0, 0.1, 0.0), Vec3::new(0.1, 1.0, 0.0)];
        assert!(!triangles_intersect(&t, &c));
        // Proper piercing.
        let p = [Vec3::new(0.2, 0.2, -1.0), Vec3::new(0.2, 0.2, 1.0), Vec3::new(0.5, 0.2, 1.0)];
        assert!(triangles_intersect(&t, &p));
    }

    fn surface(mesh: &TriangleMesh) -> OwnedSurface {
        OwnedSurface::with_leaf_size(mesh, 16)
    }

    #[test]
    fn separated_spheres() {
        let a = icosphere(2, 1.0);
        let b = icosphere(2, 1.0)
            .with_vertices(icosphere(2, 1.0).vertices().iter().map(|v| v + Vec3::new(3.0, 0.0, 0.0)).collect())
            .unwrap();
        let (sa, sb) = (surface(&a), surface(&b));
        let v = mesh_intersects(&sa.view(), &sb.view());
        assert!(!v.intersecting && !v.contained);
        let s = penetration_stats(&sa.view(), &sb.view());
        assert_eq!((s.intersecting_face_count, s.max_penetration), (0, 0.0));
    }

    #[test]
    fn nested_spheres_are_contained() {
        let big = surface(&icosphere(2, 1.0));
        let small = surface(&icosphere(2, 0.3));
        let v = mesh_intersects(&small.view(), &big.view());
        assert!(v.intersecting && v.contained && v.intersecting_face_pairs.is_empty());
        let w = mesh_intersects(&big.view(), &small.view());
        assert!(w.intersecting && w.contained);
        let s = penetration_stats(&small.view(), &big.view());
        assert_eq!(s.intersecting_face_count, 0);
        assert!(s.max_penetration > 0.6);
        // Swallowed base still reports depth.
        let s = penetration_stats(&big.view(), &small.view());
        assert!(s.max_penetration > 0.6);
    }

    #[test]
    fn parity_rays_agree_on_watertight_mesh() {
        let m = icosphere(3, 1.0);
        let s = surface(&m);
        for p in [Vec3::zeros(), Vec3::new(0.5, -0.3, 0.2), Vec3::new(1.5, 0.0, 0.0), Vec3::new(-0.1, 0.9, 0.1)] {
            let v = parity_votes(&p, &s.positions, &s.faces, &s.tree);
            assert!(v[0] == v[1] && v[1] == v[2], "{p:?} {v:?}");
        }
    }

    #[test]
    fn offset_cubes_match_all_pairs_oracle() {
        // Three cells per side keeps the two grids from sharing planes, so
        // every crossing is proper rather than edge-on-edge.
        let a = axis_box(Vec3::zeros(), Vec3::repeat(1.0), 3);
        let b = axis_box(Vec3::repeat(0.5), Vec3::repeat(1.5), 3);
        let (sa, sb) = (surface(&a), surface(&b));
        let v = mesh_intersects(&sa.view(), &sb.view());
        let mut oracle = Vec::new();
        for i in 0..a.num_faces() {
            for j in 0..b.num_faces() {
                if triangles_intersect(&a.triangle(i), &b.triangle(j)) {
                    oracle.push((i, j));
                }
            }
        }
        assert!(!oracle.is_empty());
        assert_eq!(v.intersecting_face_pairs, oracle);
        let back = mesh_intersects(&sb.view(), &sa.view());
        assert_eq!(back.intersecting, v.intersecting);
        assert_eq!(back.intersecting_face_pairs.len(), oracle.len());
    }

    #[test]
    fn vertex_pushed_into_wall() {
        // Closed slab whose top face is z = 0; one object vertex 0.05 below.
        let wall = axis_box(Vec3::new(-1.0, -1.0, -0.5), Vec3::new(1.0, 1.0, 0.0), 2);
        let spike = TriangleMesh::new(
            vec![Vec3::new(0.1, 0.1, -0.05), Vec3::new(0.1, 0.1, 0.4), Vec3::new(0.3, 0.2, 0.4), Vec3::new(-0.1, 0.3, 0.4)],
            vec![[0, 2, 1], [0, 3, 2], [0, 1, 3], [1, 2, 3]],
        )
        .unwrap();
        let (sw, ss) = (surface(&wall), surface(&spike));
        let s = penetration_stats(&ss.view(), &sw.view());
        assert!(s.intersecting_face_count > 0);
        assert!((s.max_penetration - 0.05).abs() < 1e-6, "{}", s.max_penetration);
    }

    #[test]
    fn open_plane_never_contains() {
        let plane = surface(&subdivided_plane(3, 1.0));
        let ball = surface(&icosphere(1, 0.1));
        assert!(!mesh_intersects(&ball.view(), &plane.view()).contained);
    }
}
