//! Triangle meshes, point clouds and the geometric queries used across the
//! pipeline: edge/dihedral extraction, winding-number insideness, graph
//! Laplacian energy and midpoint subdivision.
//!
//! Meshes are immutable after construction; all operations are pure.

pub mod obj;

use nalgebra::Vector3;

use crate::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Triangle mesh with optional per-vertex uv coordinates.
///
/// Garment meshes carry exactly one uv coordinate per vertex (texture
/// coordinates referencing the same vertex are averaged at load time);
/// body meshes may omit uv entirely. Vertex positions are in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    uv: Option<Vec<[f64; 2]>>,
}

impl TriMesh {
    /// Builds a mesh, validating face indices and rejecting degenerate faces.
    pub fn new(
        vertices: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
        uv: Option<Vec<[f64; 2]>>,
    ) -> Result<Self> {
        for (fi, f) in faces.iter().enumerate() {
            for &i in f {
                if i >= vertices.len() {
                    return Err(Error::FaceIndexOutOfRange {
                        index: i,
                        vertex_count: vertices.len(),
                    });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::DegenerateFace { face: fi });
            }
        }
        if let Some(uv) = &uv {
            if uv.len() != vertices.len() {
                return Err(Error::TopologyMismatch {
                    what: "uv coordinates",
                    expected: vertices.len(),
                    actual: uv.len(),
                });
            }
        }
        Ok(Self {
            vertices,
            faces,
            uv,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn uv(&self) -> Option<&[[f64; 2]]> {
        self.uv.as_deref()
    }

    /// Per-vertex uv, or an error for meshes that were loaded without one.
    pub fn require_uv(&self) -> Result<&[[f64; 2]]> {
        self.uv.as_deref().ok_or(Error::MissingUv)
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Same-topology check (vertex and face counts).
    pub fn check_same_topology(&self, other: &TriMesh) -> Result<()> {
        if self.vertices.len() != other.vertices.len() {
            return Err(Error::TopologyMismatch {
                what: "vertices",
                expected: self.vertices.len(),
                actual: other.vertices.len(),
            });
        }
        if self.faces.len() != other.faces.len() {
            return Err(Error::TopologyMismatch {
                what: "faces",
                expected: self.faces.len(),
                actual: other.faces.len(),
            });
        }
        Ok(())
    }

    /// Returns a copy with vertex positions replaced (topology and uv shared).
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::TopologyMismatch {
                what: "vertices",
                expected: self.vertices.len(),
                actual: vertices.len(),
            });
        }
        Ok(Self {
            vertices,
            faces: self.faces.clone(),
            uv: self.uv.clone(),
        })
    }

    /// Outward (CCW) normal of face `fi`, not normalized.
    pub fn face_normal_raw(&self, fi: usize) -> Vec3 {
        let [a, b, c] = self.faces[fi];
        let (pa, pb, pc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        (pb - pa).cross(&(pc - pa))
    }

    pub fn face_area(&self, fi: usize) -> f64 {
        0.5 * self.face_normal_raw(fi).norm()
    }

    /// Barycentric mass lumping: one third of each incident face area.
    pub fn vertex_areas(&self) -> Vec<f64> {
        let mut areas = vec![0.0; self.vertices.len()];
        for fi in 0..self.faces.len() {
            let a = self.face_area(fi) / 3.0;
            for &v in &self.faces[fi] {
                areas[v] += a;
            }
        }
        areas
    }

    /// Unique undirected graph edges derived from the face list.
    pub fn graph_edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|f| {
                [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])]
                    .into_iter()
                    .map(|(a, b)| (a.min(b), a.max(b)))
            })
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// Axis-aligned bounding box as (min, max) corners.
    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        bounding_box(&self.vertices)
    }

    /// Mean edge length over unique graph edges.
    pub fn mean_edge_length(&self) -> f64 {
        let edges = self.graph_edges();
        if edges.is_empty() {
            return 0.0;
        }
        edges
            .iter()
            .map(|&(a, b)| (self.vertices[a] - self.vertices[b]).norm())
            .sum::<f64>()
            / edges.len() as f64
    }
}

/// Unstructured 3D point set (meters).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn bounding_box(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

/// One undirected mesh edge with the quantities needed for curvature sums.
#[derive(Debug, Clone, Copy)]
pub struct Edge {
    pub vertices: (usize, usize),
    /// Edge length in meters, always > 0.
    pub length: f64,
    /// Deviation from flatness between the two incident faces, in [0, π].
    /// Boundary edges carry 0.
    pub dihedral: f64,
    pub faces: (usize, Option<usize>),
}

/// All undirected edges of a manifold-edge mesh.
#[derive(Debug, Clone)]
pub struct EdgeSet {
    pub edges: Vec<Edge>,
}

impl EdgeSet {
    /// Edge-length-weighted dihedral sum Σ θ_e · ℓ_e.
    pub fn curvature_integral(&self) -> f64 {
        self.edges.iter().map(|e| e.dihedral * e.length).sum()
    }
}

/// Extracts every undirected edge with its length and dihedral angle.
///
/// The dihedral is reported as the deviation from flatness: 0 for coplanar
/// adjacent faces, π/2 for faces meeting at a right angle. Errors on edges
/// with more than two incident faces.
pub fn edge_set(mesh: &TriMesh) -> Result<EdgeSet> {
    use std::collections::HashMap;

    let mut incident: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (fi, f) in mesh.faces().iter().enumerate() {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            incident.entry((a.min(b), a.max(b))).or_default().push(fi);
        }
    }

    let mut keys: Vec<(usize, usize)> = incident.keys().copied().collect();
    keys.sort_unstable();

    let mut edges = Vec::with_capacity(keys.len());
    for key in keys {
        let faces = &incident[&key];
        if faces.len() > 2 {
            return Err(Error::NonManifoldEdge {
                a: key.0,
                b: key.1,
                count: faces.len(),
            });
        }
        let length = (mesh.vertices()[key.0] - mesh.vertices()[key.1]).norm();
        if length <= 0.0 {
            return Err(Error::DegenerateFace { face: faces[0] });
        }
        let dihedral = if faces.len() == 2 {
            let n0 = mesh.face_normal_raw(faces[0]);
            let n1 = mesh.face_normal_raw(faces[1]);
            let denom = n0.norm() * n1.norm();
            if denom <= 0.0 {
                0.0
            } else {
                (n0.dot(&n1) / denom).clamp(-1.0, 1.0).acos()
            }
        } else {
            0.0
        };
        edges.push(Edge {
            vertices: key,
            length,
            dihedral,
            faces: (faces[0], faces.get(1).copied()),
        });
    }
    Ok(EdgeSet { edges })
}

/// Generalized winding number of `point` with respect to `mesh`.
///
/// Sums the signed solid angles of all faces; a closed outward-oriented
/// surface yields ≈1 inside and ≈0 outside (≈k inside k overlapping
/// closed components).
pub fn winding_number(point: &Vec3, mesh: &TriMesh) -> f64 {
    let mut total = 0.0;
    for f in mesh.faces() {
        let va = mesh.vertices()[f[0]] - point;
        let vb = mesh.vertices()[f[1]] - point;
        let vc = mesh.vertices()[f[2]] - point;
        let (la, lb, lc) = (va.norm(), vb.norm(), vc.norm());
        let num = va.dot(&vb.cross(&vc));
        let den = la * lb * lc + va.dot(&vb) * lc + vb.dot(&vc) * la + vc.dot(&va) * lb;
        total += 2.0 * num.atan2(den);
    }
    total / (4.0 * std::f64::consts::PI)
}

/// True iff `point` is strictly inside the closed mesh `body`.
///
/// Uses the generalized winding number with threshold 0.5. If the winding
/// number is far from every integer the geometry is open or inverted and an
/// [`Error::UnreliableWinding`] is reported instead of a guess.
pub fn point_in_mesh(point: &Vec3, body: &TriMesh) -> Result<bool> {
    let w = winding_number(point, body);
    if (w - w.round()).abs() > 0.15 {
        return Err(Error::UnreliableWinding { winding: w });
    }
    Ok(w > 0.5)
}

/// Unnormalized graph-Laplacian quadratic energy of a displacement field.
///
/// With L the uniform (combinatorial) graph Laplacian of the mesh, this is
/// δᵀLδ = Σ_{(u,v) ∈ edges} |δ_u − δ_v|², summed over unique undirected
/// edges and the three coordinates. It is zero for constant fields and
/// invariant under adding a constant vector to all displacements; a single
/// vertex displaced by d among k resting neighbors contributes k·|d|².
pub fn laplacian_energy(displacements: &[Vec3], mesh: &TriMesh) -> Result<f64> {
    if displacements.len() != mesh.vertex_count() {
        return Err(Error::TopologyMismatch {
            what: "displacements",
            expected: mesh.vertex_count(),
            actual: displacements.len(),
        });
    }
    Ok(mesh
        .graph_edges()
        .iter()
        .map(|&(a, b)| (displacements[a] - displacements[b]).norm_squared())
        .sum())
}

/// Gradient of [`laplacian_energy`] with respect to the displacements:
/// ∂E/∂δ_v = 2 Σ_{u ∈ N(v)} (δ_v − δ_u).
pub fn laplacian_energy_gradient(displacements: &[Vec3], mesh: &TriMesh) -> Result<Vec<Vec3>> {
    if displacements.len() != mesh.vertex_count() {
        return Err(Error::TopologyMismatch {
            what: "displacements",
            expected: mesh.vertex_count(),
            actual: displacements.len(),
        });
    }
    let mut grad = vec![Vec3::zeros(); displacements.len()];
    for (a, b) in mesh.graph_edges() {
        let d = displacements[a] - displacements[b];
        grad[a] += 2.0 * d;
        grad[b] -= 2.0 * d;
    }
    Ok(grad)
}

/// Midpoint (1 → 4) subdivision with linear interpolation of positions and
/// uv. Original vertices keep their index; each edge contributes one new
/// midpoint vertex shared by both incident faces.
pub fn subdivide(mesh: &TriMesh) -> Result<TriMesh> {
    use std::collections::HashMap;

    let uv = mesh.require_uv()?;
    let mut vertices = mesh.vertices().to_vec();
    let mut new_uv = uv.to_vec();
    let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();

    let mut mid = |a: usize, b: usize, vertices: &mut Vec<Vec3>, new_uv: &mut Vec<[f64; 2]>| {
        let key = (a.min(b), a.max(b));
        *midpoint.entry(key).or_insert_with(|| {
            let idx = vertices.len();
            vertices.push(0.5 * (vertices[a] + vertices[b]));
            new_uv.push([
                0.5 * (new_uv[a][0] + new_uv[b][0]),
                0.5 * (new_uv[a][1] + new_uv[b][1]),
            ]);
            idx
        })
    };

    let mut faces = Vec::with_capacity(mesh.face_count() * 4);
    for f in mesh.faces() {
        let [a, b, c] = *f;
        let ab = mid(a, b, &mut vertices, &mut new_uv);
        let bc = mid(b, c, &mut vertices, &mut new_uv);
        let ca = mid(c, a, &mut vertices, &mut new_uv);
        faces.push([a, ab, ca]);
        faces.push([ab, b, bc]);
        faces.push([ca, bc, c]);
        faces.push([ab, bc, ca]);
    }

    TriMesh::new(vertices, faces, Some(new_uv))
}

/// How the planar grid generator assigns uv coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GridUv {
    /// uv spans the full [0,1]² square.
    Span,
    /// Every vertex sits exactly on a texel center of an atlas whose
    /// resolution equals the grid's vertex counts (rows, cols).
    TexelCenters,
}

/// Rectangular grid in the xy-plane, centered at the origin.
///
/// `nx` × `ny` cells, each split into two CCW triangles; `width`/`height`
/// in meters.
pub fn grid_mesh(nx: usize, ny: usize, width: f64, height: f64, uv_mode: GridUv) -> TriMesh {
    let (cols, rows) = (nx + 1, ny + 1);
    let mut vertices = Vec::with_capacity(rows * cols);
    let mut uv = Vec::with_capacity(rows * cols);
    for iy in 0..rows {
        for jx in 0..cols {
            let fx = jx as f64 / nx as f64;
            let fy = iy as f64 / ny as f64;
            vertices.push(Vec3::new((fx - 0.5) * width, (fy - 0.5) * height, 0.0));
            uv.push(match uv_mode {
                GridUv::Span => [fx, fy],
                GridUv::TexelCenters => {
                    [(jx as f64 + 0.5) / cols as f64, (iy as f64 + 0.5) / rows as f64]
                }
            });
        }
    }
    let mut faces = Vec::with_capacity(nx * ny * 2);
    for iy in 0..ny {
        for jx in 0..nx {
            let i = iy * cols + jx;
            faces.push([i, i + 1, i + cols]);
            faces.push([i + 1, i + cols + 1, i + cols]);
        }
    }
    TriMesh::new(vertices, faces, Some(uv)).expect("grid construction is always valid")
}

/// Icosphere of the given radius centered at the origin (closed, outward
/// oriented). `subdivisions` = 0 yields the icosahedron's 20 faces.
pub fn icosphere(radius: f64, subdivisions: usize) -> TriMesh {
    use std::collections::HashMap;

    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .into_iter()
    .map(|(x, y, z)| Vec3::new(x, y, z).normalize())
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
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, vertices: &mut Vec<Vec3>| {
            let key = (a.min(b), a.max(b));
            *midpoint.entry(key).or_insert_with(|| {
                let idx = vertices.len();
                vertices.push((0.5 * (vertices[a] + vertices[b])).normalize());
                idx
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            next.push([a, ab, ca]);
            next.push([ab, b, bc]);
            next.push([ca, bc, c]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }

    for v in &mut vertices {
        *v *= radius;
    }
    TriMesh::new(vertices, faces, None).expect("icosphere construction is always valid")
}
