//! Fitting accessory meshes onto a region of a base mesh: rigid placement,
//! collision-free trajectory selection, contact-aware refinement and a
//! Jacobian-field deformation, with an exact intersection certificate.

pub mod aabb;
pub mod bvh;
pub mod deform;
pub mod energy;
pub mod error;
pub mod fixtures;
pub mod geometry;
pub mod init;
pub mod mesh;
pub mod optim;
pub mod pipeline;
pub mod rigid;
pub mod scene;
pub mod trajectory;
pub mod transform;

pub use aabb::{Aabb, Vec3};
pub use error::{Error, Result};
pub use mesh::{Normalization, RegionFrame, RegionMask, TriangleMesh};
pub use transform::ScaledRigidTransform;
