//! The static inputs every step reads: base surface, fit region and the
//! object at rest, all in normalized units.

use crate::aabb::Vec3;
use crate::bvh::Bvh;
use crate::energy::{proximity_loss, two_sided_barrier, BarrierTerms, ProximityTerms, Target};
use crate::geometry::{mesh_intersects, penetration_stats, OwnedSurface, PenetrationStats, Surface, Topology};
use crate::mesh::{RegionFrame, RegionMask, TriangleMesh};
use crate::transform::ScaledRigidTransform;

#[derive(Clone, Debug)]
pub struct Scene {
    pub base: OwnedSurface,
    pub region_faces: Vec<[usize; 3]>,
    pub region_tree: Bvh,
    /// Positions of the vertices touched by region faces.
    pub region_vertices: Vec<Vec3>,
    pub frame: RegionFrame,
    pub object_rest: Vec<Vec3>,
    pub object_faces: Vec<[usize; 3]>,
    /// Built over `object_rest`; rigid poses refit it.
    pub object_tree: Bvh,
    pub object_topology: Topology,
    /// Rotation and scale center: the rest object's vertex centroid.
    pub pivot: Vec3,
    pub barrier_width: f64,
    pub leaf_size: usize,
}

/// Object vertex positions with a tree valid for them.
#[derive(Clone, Debug)]
pub struct Posed {
    pub positions: Vec<Vec3>,
    pub tree: Bvh,
}

impl Scene {
    pub fn new(
        base: &TriangleMesh,
        region: &RegionMask,
        frame: RegionFrame,
        object: &TriangleMesh,
        leaf_size: usize,
        barrier_width: f64,
    ) -> Self {
        let region_faces = region.region_faces(base);
        let region_tree = Bvh::build(base.vertices(), &region_faces, leaf_size);
        let region_vertices = region
            .region_vertices(base)
            .into_iter()
            .map(|v| base.vertices()[v])
            .collect();
        Scene {
            base: OwnedSurface::with_leaf_size(base, leaf_size),
            region_faces,
            region_tree,
            region_vertices,
            frame,
            object_rest: object.vertices().to_vec(),
            object_faces: object.faces().to_vec(),
            object_tree: Bvh::build(object.vertices(), object.faces(), leaf_size),
            object_topology: Topology::of(object),
            pivot: object.vertex_centroid(),
            barrier_width,
            leaf_size,
        }
    }

    pub fn region_target(&self) -> Target<'_> {
        Target::new(&self.base.positions, &self.region_faces, &self.region_tree)
    }

    pub fn base_target(&self) -> Target<'_> {
        Target::new(&self.base.positions, &self.base.faces, &self.base.tree)
    }

    pub fn pose(&self, t: &ScaledRigidTransform) -> Posed {
        Posed {
            positions: t.apply_all(&self.object_rest, &self.pivot),
            tree: self.object_tree.refit_rigid(t, &self.pivot),
        }
    }

    /// Bounding-box diagonal of the rest object.
    pub fn object_diagonal(&self) -> f64 {
        crate::aabb::Aabb::from_points(&self.object_rest).diagonal()
    }

    pub fn proximity(&self, posed: &Posed, threshold: f64) -> ProximityTerms {
        let object = Target::new(&posed.positions, &self.object_faces, &posed.tree);
        proximity_loss(&object, &self.region_target(), &self.region_vertices, threshold)
    }

    /// Two-sided: object vertices near the base and base vertices near the
    /// object.
    pub fn barrier(&self, posed: &Posed) -> BarrierTerms {
        let object = Target::new(&posed.positions, &self.object_faces, &posed.tree);
        two_sided_barrier(&object, &self.base_target(), self.barrier_width)
    }

    fn object_surface<'a>(&'a self, posed: &'a Posed) -> Surface<'a> {
        Surface {
            positions: &posed.positions,
            faces: &self.object_faces,
            tree: &posed.tree,
            topology: &self.object_topology,
        }
    }

    /// Exact test: any proper face crossing or containment either way.
    pub fn intersects(&self, posed: &Posed) -> bool {
        mesh_intersects(&self.object_surface(posed), &self.base.view()).intersecting
    }

    pub fn penetration(&self, posed: &Posed) -> PenetrationStats {
        penetration_stats(&self.object_surface(posed), &self.base.view())
    }
}
