//! Triangle meshes, Wavefront OBJ I/O, region masks and region frames.
//!
//! Meshes are immutable once built: every constructor validates indices and
//! rejects degenerate faces, and per-face areas and unit normals are computed
//! eagerly. Meshes loaded from OBJ keep their source records so that saving
//! rewrites only the vertex coordinates and leaves every other record
//! (texture coordinates, normals, materials, groups, polygon faces) untouched.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::aabb::{Aabb, Vec3};
use crate::error::{Error, Result};

/// Faces whose area relative to the squared bounding-box diagonal falls below
/// this value are rejected.
pub const MIN_RELATIVE_FACE_AREA: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    face_areas: Vec<f64>,
    face_normals: Vec<Vec3>,
    source: Option<Arc<ObjSource>>,
}

/// Raw OBJ records kept for lossless re-export.
#[derive(Clone, Debug)]
struct ObjSource {
    lines: Vec<String>,
    /// Line index of each `v` record, in vertex order.
    vertex_lines: Vec<usize>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        Self::build(vertices, faces, None)
    }

    fn build(
        vertices: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
        source: Option<Arc<ObjSource>>,
    ) -> Result<Self> {
        if faces.is_empty() {
            return Err(Error::InvalidMesh("mesh has no faces".into()));
        }
        if let Some(p) = vertices.iter().find(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh(format!("non-finite vertex {p:?}")));
        }
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            if let Some(&bad) = f.iter().find(|&&i| i >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} references vertex {bad} but the mesh has {n} vertices"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} has repeated vertex indices {f:?}"
                )));
            }
        }
        let diag = Aabb::from_points(&vertices).diagonal();
        let min_area = MIN_RELATIVE_FACE_AREA * diag * diag;
        let mut face_areas = Vec::with_capacity(faces.len());
        let mut face_normals = Vec::with_capacity(faces.len());
        for (fi, f) in faces.iter().enumerate() {
            let cross = (vertices[f[1]] - vertices[f[0]]).cross(&(vertices[f[2]] - vertices[f[0]]));
            let norm = cross.norm();
            let area = 0.5 * norm;
            if !(area > min_area) {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} {f:?} has zero area ({area:e})"
                )));
            }
            face_areas.push(area);
            face_normals.push(cross / norm);
        }
        Ok(TriangleMesh {
            vertices,
            faces,
            face_areas,
            face_normals,
            source,
        })
    }

    /// Same topology (and OBJ passthrough records) with new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::InvalidMesh(format!(
                "expected {} vertices, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        Self::build(vertices, self.faces.clone(), self.source.clone())
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn face_areas(&self) -> &[f64] {
        &self.face_areas
    }

    pub fn face_normals(&self) -> &[Vec3] {
        &self.face_normals
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    #[inline]
    pub fn triangle(&self, face: usize) -> [Vec3; 3] {
        let f = self.faces[face];
        [self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]]
    }

    /// Area recomputed from the current vertex positions.
    pub fn face_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.triangle(face);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn bbox(&self) -> Aabb {
        Aabb::from_points(&self.vertices)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        self.bbox().diagonal()
    }

    /// Arithmetic mean of the vertex positions.
    pub fn vertex_centroid(&self) -> Vec3 {
        let sum: Vec3 = self.vertices.iter().sum();
        sum / self.vertices.len() as f64
    }

    /// Every undirected edge is shared by exactly two faces.
    pub fn is_closed(&self) -> bool {
        let mut counts: HashMap<(usize, usize), u32> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        counts.values().all(|&c| c == 2)
    }

    /// Connected components over face adjacency (shared vertices), as a
    /// per-vertex component label and the component count. Vertices not
    /// referenced by any face get their own singleton components.
    pub fn vertex_components(&self) -> (Vec<usize>, usize) {
        let n = self.vertices.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for f in &self.faces {
            for k in 1..3 {
                let a = find(&mut parent, f[0]);
                let b = find(&mut parent, f[k]);
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        let mut label = vec![usize::MAX; n];
        let mut next = 0;
        let mut out = vec![0; n];
        for v in 0..n {
            let r = find(&mut parent, v);
            if label[r] == usize::MAX {
                label[r] = next;
                next += 1;
            }
            out[v] = label[r];
        }
        (out, next)
    }

    /// Uniformly scales all coordinates about the origin.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        self.with_vertices(self.vertices.iter().map(|v| v * factor).collect())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_obj(&text, path)
    }

    pub fn from_obj_str(text: &str) -> Result<Self> {
        Self::parse_obj(text, Path::new("<string>"))
    }

    fn parse_obj(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        let mut lines = Vec::new();
        let mut vertex_lines = Vec::new();
        for (li, raw) in text.lines().enumerate() {
            let lineno = li + 1;
            lines.push(raw.to_string());
            let content = raw.split('#').next().unwrap_or("");
            let mut tokens = content.split_whitespace();
            match tokens.next() {
                Some("v") => {
                    let mut xyz = [0.0; 3];
                    for c in &mut xyz {
                        let tok = tokens
                            .next()
                            .ok_or_else(|| parse_err(lineno, "vertex needs 3 coordinates".into()))?;
                        *c = tok
                            .parse()
                            .map_err(|_| parse_err(lineno, format!("bad coordinate {tok:?}")))?;
                    }
                    vertex_lines.push(li);
                    vertices.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
                }
                Some("f") => {
                    let mut poly = Vec::new();
                    for tok in tokens {
                        let idx_tok = tok.split('/').next().unwrap_or("");
                        let idx: i64 = idx_tok
                            .parse()
                            .map_err(|_| parse_err(lineno, format!("bad face index {tok:?}")))?;
                        let resolved = if idx > 0 {
                            idx - 1
                        } else if idx < 0 {
                            vertices.len() as i64 + idx
                        } else {
                            -1
                        };
                        if resolved < 0 {
                            return Err(parse_err(lineno, format!("face index {idx} out of range")));
                        }
                        poly.push(resolved as usize);
                    }
                    if poly.len() < 3 {
                        return Err(parse_err(lineno, "face needs at least 3 vertices".into()));
                    }
                    for k in 1..poly.len() - 1 {
                        faces.push([poly[0], poly[k], poly[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        let source = Arc::new(ObjSource {
            lines,
            vertex_lines,
        });
        Self::build(vertices, faces, Some(source))
    }

    /// OBJ text. Meshes loaded from OBJ re-emit their source with only the
    /// vertex coordinates replaced; anything after the three coordinates on a
    /// `v` record (weights, colors) is kept.
    pub fn to_obj_string(&self) -> String {
        let mut out = String::new();
        match &self.source {
            Some(src) if src.vertex_lines.len() == self.vertices.len() => {
                let mut next_vertex = 0;
                for (li, line) in src.lines.iter().enumerate() {
                    if next_vertex < src.vertex_lines.len() && src.vertex_lines[next_vertex] == li {
                        let v = self.vertices[next_vertex];
                        let rest: Vec<&str> = line.split_whitespace().skip(4).collect();
                        out.push_str(&format!("v {} {} {}", v.x, v.y, v.z));
                        for r in rest {
                            out.push(' ');
                            out.push_str(r);
                        }
                        next_vertex += 1;
                    } else {
                        out.push_str(line);
                    }
                    out.push('\n');
                }
            }
            _ => {
                for v in &self.vertices {
                    out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
                }
                for f in &self.faces {
                    out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
                }
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_obj_string()).map_err(|e| Error::io(path, e))
    }
}

/// Subset of base-mesh faces marking where the accessory goes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMask {
    face_indices: Vec<usize>,
}

impl RegionMask {
    pub fn new(mut indices: Vec<usize>, mesh: &TriangleMesh) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidRegion("region is empty".into()));
        }
        indices.sort_unstable();
        indices.dedup();
        if let Some(&bad) = indices.iter().find(|&&i| i >= mesh.num_faces()) {
            return Err(Error::InvalidRegion(format!(
                "face index {bad} out of range (mesh has {} faces)",
                mesh.num_faces()
            )));
        }
        Ok(RegionMask {
            face_indices: indices,
        })
    }

    pub fn all(mesh: &TriangleMesh) -> Self {
        RegionMask {
            face_indices: (0..mesh.num_faces()).collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>, mesh: &TriangleMesh) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut indices = Vec::new();
        for (li, raw) in text.lines().enumerate() {
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let idx = content.parse::<usize>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: li + 1,
                message: format!("expected a non-negative face index, got {content:?}"),
            })?;
            indices.push(idx);
        }
        Self::new(indices, mesh).map_err(|e| match e {
            Error::InvalidRegion(m) => Error::InvalidRegion(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        self.face_indices.iter().map(|i| format!("{i}\n")).collect()
    }

    pub fn face_indices(&self) -> &[usize] {
        &self.face_indices
    }

    pub fn len(&self) -> usize {
        self.face_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.face_indices.is_empty()
    }

    /// Sorted union of the vertices of the masked faces.
    pub fn region_vertices(&self, mesh: &TriangleMesh) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .face_indices
            .iter()
            .flat_map(|&f| mesh.faces()[f])
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn region_faces(&self, mesh: &TriangleMesh) -> Vec<[usize; 3]> {
        self.face_indices.iter().map(|&f| mesh.faces()[f]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionFrame {
    pub centroid: Vec3,
    pub average_normal: Vec3,
    pub bbox_diag: f64,
}

impl RegionFrame {
    /// Area-weighted centroid and mean normal of the masked faces.
    pub fn compute(mesh: &TriangleMesh, mask: &RegionMask) -> Result<Self> {
        let mut area_sum = 0.0;
        let mut weighted_centroid = Vec3::zeros();
        let mut weighted_normal = Vec3::zeros();
        let mut bbox = Aabb::empty();
        for &f in mask.face_indices() {
            let a = mesh.face_areas()[f];
            let tri = mesh.triangle(f);
            weighted_centroid += (tri[0] + tri[1] + tri[2]) * (a / 3.0);
            weighted_normal += mesh.face_normals()[f] * a;
            area_sum += a;
            for p in &tri {
                bbox.grow(p);
            }
        }
        let norm = weighted_normal.norm() / area_sum;
        if !(norm >= 1e-9) {
            return Err(Error::DegenerateFrame { norm });
        }
        Ok(RegionFrame {
            centroid: weighted_centroid / area_sum,
            average_normal: weighted_normal.normalize(),
            bbox_diag: bbox.diagonal(),
        })
    }

    /// Frame with a caller-supplied normal; the centroid and extent still come
    /// from the region.
    pub fn with_normal(mesh: &TriangleMesh, mask: &RegionMask, normal: Vec3) -> Result<Self> {
        let n = normal.norm();
        if !(n > 1e-12) {
            return Err(Error::DegenerateFrame { norm: n });
        }
        let mut area_sum = 0.0;
        let mut weighted_centroid = Vec3::zeros();
        let mut bbox = Aabb::empty();
        for &f in mask.face_indices() {
            let a = mesh.face_areas()[f];
            let tri = mesh.triangle(f);
            weighted_centroid += (tri[0] + tri[1] + tri[2]) * (a / 3.0);
            area_sum += a;
            for p in &tri {
                bbox.grow(p);
            }
        }
        Ok(RegionFrame {
            centroid: weighted_centroid / area_sum,
            average_normal: normal / n,
            bbox_diag: bbox.diagonal(),
        })
    }
}

/// Uniform scale that maps the base mesh's bounding-box diagonal to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub scale: f64,
}

impl Normalization {
    pub fn for_base(base: &TriangleMesh) -> Self {
        Normalization {
            scale: 1.0 / base.bbox_diagonal(),
        }
    }

    pub fn apply(&self, mesh: &TriangleMesh) -> Result<TriangleMesh> {
        mesh.scaled(self.scale)
    }

    pub fn revert(&self, mesh: &TriangleMesh) -> Result<TriangleMesh> {
        mesh.with_vertices(mesh.vertices().iter().map(|v| v / self.scale).collect())
    }
}
