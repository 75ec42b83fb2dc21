//! Procedural meshes: primitives for tests and the bundled fitting scenes.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::aabb::Vec3;
use crate::error::{Error, Result};
use crate::mesh::{RegionMask, TriangleMesh};
use crate::transform::TransformRecord;

fn build(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> TriangleMesh {
    TriangleMesh::new(vertices, faces).expect("procedural mesh is valid")
}

/// Flips every face whose normal points against `outward(centroid)`.
fn orient(vertices: &[Vec3], faces: &mut [[usize; 3]], outward: impl Fn(&Vec3) -> Vec3) {
    for f in faces.iter_mut() {
        let (a, b, c) = (vertices[f[0]], vertices[f[1]], vertices[f[2]]);
        let n = (b - a).cross(&(c - a));
        if n.dot(&outward(&((a + b + c) / 3.0))) < 0.0 {
            f.swap(1, 2);
        }
    }
}

/// Recursively subdivided icosahedron centered at the origin, outward winding.
pub fn icosphere(subdivisions: u32, radius: f64) -> TriangleMesh {
    let g = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, g, 0.0),
        (1.0, g, 0.0),
        (-1.0, -g, 0.0),
        (1.0, -g, 0.0),
        (0.0, -1.0, g),
        (0.0, 1.0, g),
        (0.0, -1.0, -g),
        (0.0, 1.0, -g),
        (g, 0.0, -1.0),
        (g, 0.0, 1.0),
        (-g, 0.0, -1.0),
        (-g, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
            *cache.entry((a.min(b), a.max(b))).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let verts: Vec<Vec3> = verts.into_iter().map(|v| v * radius).collect();
    orient(&verts, &mut faces, |c| *c);
    build(verts, faces)
}

/// Grid of `2 n²` triangles covering `[-half, half]²` in the `z = 0` plane,
/// normals along `+z`.
pub fn subdivided_plane(n: usize, half_size: f64) -> TriangleMesh {
    let mut verts = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            let x = -half_size + 2.0 * half_size * i as f64 / n as f64;
            let y = -half_size + 2.0 * half_size * j as f64 / n as f64;
            verts.push(Vec3::new(x, y, 0.0));
        }
    }
    let faces = grid_faces(n, n, false, false);
    build(verts, faces)
}

/// Quad grid over `(cols + 1) x (rows + 1)` vertices laid out row by row,
/// optionally wrapping the column or row index. Wrapped axes reuse the first
/// column/row, so a grid with `wrap_u` has only `cols` distinct columns.
fn grid_faces(cols: usize, rows: usize, wrap_u: bool, wrap_v: bool) -> Vec<[usize; 3]> {
    let width = if wrap_u { cols } else { cols + 1 };
    let height = if wrap_v { rows } else { rows + 1 };
    let id = |i: usize, j: usize| (j % height) * width + (i % width);
    let mut faces = Vec::with_capacity(2 * cols * rows);
    for j in 0..rows {
        for i in 0..cols {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    faces
}

/// Closed box with every side split into an `n x n` grid, outward winding.
pub fn axis_box(min: Vec3, max: Vec3, subdivisions: usize) -> TriangleMesh {
    let n = subdivisions.max(1);
    let mut index: HashMap<[usize; 3], usize> = HashMap::new();
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    let mut vid = |l: [usize; 3], verts: &mut Vec<Vec3>| -> usize {
        *index.entry(l).or_insert_with(|| {
            let t = |k: usize| min[k] + (max[k] - min[k]) * l[k] as f64 / n as f64;
            verts.push(Vec3::new(t(0), t(1), t(2)));
            verts.len() - 1
        })
    };
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in [0, n] {
            for j in 0..n {
                for i in 0..n {
                    let corner = |di: usize, dj: usize| {
                        let mut l = [0; 3];
                        l[axis] = side;
                        l[u] = i + di;
                        l[v] = j + dj;
                        l
                    };
                    let a = vid(corner(0, 0), &mut verts);
                    let b = vid(corner(1, 0), &mut verts);
                    let c = vid(corner(1, 1), &mut verts);
                    let d = vid(corner(0, 1), &mut verts);
                    faces.push([a, b, c]);
                    faces.push([a, c, d]);
                }
            }
        }
    }
    let center = (min + max) * 0.5;
    let half = (max - min) * 0.5;
    // Outward direction of a box face: the axis where the centroid sits on
    // the boundary.
    orient(&verts, &mut faces, |c| {
        let rel = c - center;
        let k = (0..3)
            .max_by(|&a, &b| (rel[a].abs() / half[a]).total_cmp(&(rel[b].abs() / half[b])))
            .unwrap();
        let mut d = Vec3::zeros();
        d[k] = rel[k].signum();
        d
    });
    build(verts, faces)
}

/// Closed cylinder along `z`, lateral surface split into `segments x rings`,
/// caps fanned around a center vertex.
pub fn capped_cylinder(radius: f64, half_height: f64, segments: usize, rings: usize) -> TriangleMesh {
    let mut verts = Vec::new();
    for j in 0..=rings {
        let z = -half_height + 2.0 * half_height * j as f64 / rings as f64;
        for i in 0..segments {
            let a = 2.0 * PI * i as f64 / segments as f64;
            verts.push(Vec3::new(radius * a.cos(), radius * a.sin(), z));
        }
    }
    let mut faces = grid_faces(segments, rings, true, false);
    let bottom = verts.len();
    verts.push(Vec3::new(0.0, 0.0, -half_height));
    let top = verts.len();
    verts.push(Vec3::new(0.0, 0.0, half_height));
    for i in 0..segments {
        let n = (i + 1) % segments;
        faces.push([bottom, i, n]);
        faces.push([top, rings * segments + i, rings * segments + n]);
    }
    orient(&verts, &mut faces, |c| {
        if c.z.abs() > half_height * (1.0 - 1e-9) {
            Vec3::new(0.0, 0.0, c.z.signum())
        } else {
            Vec3::new(c.x, c.y, 0.0)
        }
    });
    build(verts, faces)
}

/// Torus around the `z` axis.
pub fn torus(major: f64, minor: f64, major_segments: usize, minor_segments: usize) -> TriangleMesh {
    let mut verts = Vec::with_capacity(major_segments * minor_segments);
    for j in 0..minor_segments {
        let b = 2.0 * PI * j as f64 / minor_segments as f64;
        for i in 0..major_segments {
            let a = 2.0 * PI * i as f64 / major_segments as f64;
            let r = major + minor * b.cos();
            verts.push(Vec3::new(r * a.cos(), r * a.sin(), minor * b.sin()));
        }
    }
    let mut faces = grid_faces(major_segments, minor_segments, true, true);
    orient(&verts, &mut faces, |c| {
        let radial = Vec3::new(c.x, c.y, 0.0).normalize() * major;
        c - radial
    });
    build(verts, faces)
}

/// Keeps the faces for which `keep(centroid, normal)` holds and drops
/// unreferenced vertices, preserving relative order.
pub fn filter_faces(mesh: &TriangleMesh, keep: impl Fn(&Vec3, &Vec3) -> bool) -> TriangleMesh {
    let mut remap = vec![usize::MAX; mesh.num_vertices()];
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for (fi, f) in mesh.faces().iter().enumerate() {
        let t = mesh.triangle(fi);
        if !keep(&((t[0] + t[1] + t[2]) / 3.0), &mesh.face_normals()[fi]) {
            continue;
        }
        let mut nf = [0; 3];
        for (k, &v) in f.iter().enumerate() {
            if remap[v] == usize::MAX {
                remap[v] = verts.len();
                verts.push(mesh.vertices()[v]);
            }
            nf[k] = remap[v];
        }
        faces.push(nf);
    }
    build(verts, faces)
}

/// Faces selected by a centroid/normal predicate, as a region mask.
pub fn region_where(mesh: &TriangleMesh, pick: impl Fn(&Vec3, &Vec3) -> bool) -> Result<RegionMask> {
    let faces = (0..mesh.num_faces())
        .filter(|&fi| {
            let t = mesh.triangle(fi);
            pick(&((t[0] + t[1] + t[2]) / 3.0), &mesh.face_normals()[fi])
        })
        .collect();
    RegionMask::new(faces, mesh)
}

/// Maps every vertex through `f`, keeping connectivity.
pub fn warp(mesh: &TriangleMesh, f: impl Fn(&Vec3) -> Vec3) -> TriangleMesh {
    mesh.with_vertices(mesh.vertices().iter().map(f).collect())
        .expect("warped procedural mesh is valid")
}

/// Open piece of a cylinder of `radius` along `x`, spanning `arc` radians
/// centered on `+z`.
pub fn cylinder_strip(radius: f64, half_length: f64, arc: f64, around: usize, along: usize) -> TriangleMesh {
    let mut verts = Vec::new();
    for j in 0..=along {
        let x = -half_length + 2.0 * half_length * j as f64 / along as f64;
        for i in 0..=around {
            let a = -arc / 2.0 + arc * i as f64 / around as f64;
            verts.push(Vec3::new(x, radius * a.sin(), radius * a.cos()));
        }
    }
    let mut faces = grid_faces(around, along, false, false);
    orient(&verts, &mut faces, |c| Vec3::new(0.0, c.y, c.z));
    build(verts, faces)
}

/// A bundled fitting scene.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub name: &'static str,
    pub base: TriangleMesh,
    pub object: TriangleMesh,
    pub region: RegionMask,
    /// Explicit attachment direction for regions whose mean normal vanishes.
    pub region_normal: Option<Vec3>,
    /// Starting pose for objects the axis heuristic orients wrongly.
    pub initial_transform: Option<TransformRecord>,
}

pub const FIXTURE_NAMES: [&str; 5] = [
    "cap-on-sphere",
    "ring-on-cylinder",
    "band-on-torus-arm",
    "plate-on-plane",
    "glasses-bar-on-bust-proxy",
];

pub fn fixture(name: &str) -> Result<Fixture> {
    match name {
        "cap-on-sphere" => cap_on_sphere(),
        "ring-on-cylinder" => ring_on_cylinder(),
        "band-on-torus-arm" => band_on_torus_arm(),
        "plate-on-plane" => plate_on_plane(),
        "glasses-bar-on-bust-proxy" => glasses_bar_on_bust_proxy(),
        other => Err(Error::Config(format!(
            "unknown fixture `{other}`; expected one of {}",
            FIXTURE_NAMES.join(", ")
        ))),
    }
}

pub fn cap_on_sphere() -> Result<Fixture> {
    let base = icosphere(3, 1.0);
    let region = region_where(&base, |c, _| c.z > 0.5)?;
    let object = filter_faces(&icosphere(3, 0.6), |c, _| c.z > 0.2);
    Ok(Fixture {
        name: "cap-on-sphere",
        base,
        object,
        region,
        region_normal: None,
        initial_transform: None,
    })
}

pub fn ring_on_cylinder() -> Result<Fixture> {
    let base = capped_cylinder(0.5, 0.6, 48, 12);
    let region = region_where(&base, |c, n| n.z.abs() < 0.5 && c.z.abs() < 0.2)?;
    let object = torus(0.8, 0.08, 48, 12);
    Ok(Fixture {
        name: "ring-on-cylinder",
        base,
        object,
        region,
        region_normal: Some(Vec3::z()),
        initial_transform: None,
    })
}

pub fn band_on_torus_arm() -> Result<Fixture> {
    let base = torus(1.0, 0.3, 64, 24);
    let region = region_where(&base, |c, n| c.x > 0.9 && c.y.abs() < 0.3 && n.z > 0.5)?;
    let object = cylinder_strip(0.25, 0.2, 150f64.to_radians(), 20, 10);
    Ok(Fixture {
        name: "band-on-torus-arm",
        base,
        object,
        region,
        region_normal: None,
        initial_transform: None,
    })
}

pub fn plate_on_plane() -> Result<Fixture> {
    let base = axis_box(Vec3::new(-1.0, -1.0, -0.1), Vec3::new(1.0, 1.0, 0.0), 16);
    let region = region_where(&base, |c, n| n.z > 0.5 && c.x.abs() < 0.6 && c.y.abs() < 0.6)?;
    let object = warp(&subdivided_plane(16, 0.4), |p| {
        Vec3::new(p.x, p.y, 0.15 * (p.x * p.x + p.y * p.y))
    });
    Ok(Fixture {
        name: "plate-on-plane",
        base,
        object,
        region,
        region_normal: None,
        initial_transform: None,
    })
}

pub fn glasses_bar_on_bust_proxy() -> Result<Fixture> {
    let base = warp(&icosphere(3, 1.0), |p| Vec3::new(0.8 * p.x, p.y, 1.1 * p.z));
    let region = region_where(&base, |c, _| c.y > 0.5 && c.z.abs() < 0.3)?;
    let bend = 0.9;
    let object = warp(
        &axis_box(Vec3::new(-0.6, -0.03, -0.04), Vec3::new(0.6, 0.03, 0.04), 10),
        |p| {
            let a = p.x / bend;
            let r = bend + p.y;
            Vec3::new(r * a.sin(), r * a.cos() - bend, p.z)
        },
    );
    Ok(Fixture {
        name: "glasses-bar-on-bust-proxy",
        base,
        object,
        region,
        region_normal: None,
        // The bar's thinnest axis is vertical, so laying it along the face
        // normal would stand it on end. Start it upright, just in front.
        initial_transform: Some(TransformRecord {
            rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            translation: [0.0, 1.1, 0.0],
            scale: 1.0,
            pivot: [0.0; 3],
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_are_closed_where_expected() {
        assert!(icosphere(2, 1.0).is_closed());
        assert!(axis_box(Vec3::zeros(), Vec3::repeat(1.0), 3).is_closed());
        assert!(capped_cylinder(0.5, 1.0, 16, 4).is_closed());
        assert!(torus(1.0, 0.25, 16, 8).is_closed());
        assert!(!subdivided_plane(3, 1.0).is_closed());
        assert!(!cylinder_strip(0.3, 0.2, 2.0, 6, 3).is_closed());
    }

    #[test]
    fn outward_winding_gives_positive_volume() {
        let volume = |m: &TriangleMesh| -> f64 {
            m.faces()
                .iter()
                .map(|f| {
                    let [a, b, c] = f.map(|i| m.vertices()[i]);
                    a.dot(&b.cross(&c)) / 6.0
                })
                .sum()
        };
        let s = icosphere(3, 1.0);
        assert!((volume(&s) - 4.0 / 3.0 * PI).abs() < 0.1);
        assert!((volume(&axis_box(Vec3::zeros(), Vec3::new(1.0, 2.0, 3.0), 2)) - 6.0).abs() < 1e-12);
        assert!(volume(&capped_cylinder(0.5, 1.0, 32, 4)) > 0.0);
        assert!(volume(&torus(1.0, 0.25, 32, 16)) > 0.0);
    }

    #[test]
    fn fixtures_are_small_and_valid() {
        for name in FIXTURE_NAMES {
            let f = fixture(name).unwrap();
            assert!(f.base.num_faces() <= 5000, "{name} base");
            assert!(f.object.num_faces() <= 5000, "{name} object");
            assert!(!f.region.is_empty());
        }
        assert!(fixture("nope").is_err());
    }
}
