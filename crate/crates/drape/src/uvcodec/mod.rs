//! Bidirectional codec between mesh deformations and 2D displacement maps.
//!
//! The forward direction rasterizes per-vertex displacements into a texel
//! grid through the template's uv parametrization; the inverse direction
//! lifts map values back to vertices by bilinear interpolation at each
//! vertex's uv coordinate.
//!
//! Texel (i, j) of an n×m atlas has its center at uv
//! ((j + 0.5)/m, (i + 0.5)/n): rows index v, columns index u.

pub mod dgdm;

use ndarray::Array3;

use crate::mesh::{TriMesh, Vec3};
use crate::{Error, Result};

/// A texel's owner: a template face and barycentric weights inside it.
#[derive(Debug, Clone, Copy)]
pub struct TexelAssign {
    pub face: u32,
    pub bary: [f64; 3],
}

/// Precomputed uv parametrization of a template: per-texel face/barycentric
/// assignments (the forward map) and per-vertex bilinear lift weights (the
/// inverse map).
#[derive(Debug, Clone)]
pub struct UvAtlas {
    rows: usize,
    cols: usize,
    texel_map: Vec<Option<TexelAssign>>,
    dilation_mask: Vec<bool>,
    vertex_uv: Vec<[f64; 2]>,
    /// Per vertex: (flat texel index, weight), coverage-renormalized.
    lift: Vec<Vec<(u32, f64)>>,
}

/// Seam dilation width in texels; guarantees every vertex's bilinear
/// footprint is covered for charts at least 3 texels wide.
pub const DILATION_TEXELS: usize = 2;

impl UvAtlas {
    pub fn resolution(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn vertex_uv(&self) -> &[[f64; 2]] {
        &self.vertex_uv
    }

    pub fn texel(&self, row: usize, col: usize) -> Option<&TexelAssign> {
        self.texel_map[row * self.cols + col].as_ref()
    }

    pub fn is_dilated(&self, row: usize, col: usize) -> bool {
        self.dilation_mask[row * self.cols + col]
    }

    pub fn covered_count(&self) -> usize {
        self.texel_map.iter().filter(|t| t.is_some()).count()
    }

    /// Bilinear lift weights for vertex `k` (flat texel index = row·m + col).
    pub fn lift_weights(&self, k: usize) -> &[(u32, f64)] {
        &self.lift[k]
    }
}

/// n×m grid of 3D displacement vectors (meters), matching its atlas.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementMap {
    pub data: Array3<f64>,
}

impl DisplacementMap {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            data: Array3::zeros((rows, cols, 3)),
        }
    }

    pub fn resolution(&self) -> (usize, usize) {
        let d = self.data.dim();
        (d.0, d.1)
    }

    pub fn get(&self, row: usize, col: usize) -> Vec3 {
        Vec3::new(
            self.data[(row, col, 0)],
            self.data[(row, col, 1)],
            self.data[(row, col, 2)],
        )
    }

    pub fn set(&mut self, row: usize, col: usize, v: Vec3) {
        self.data[(row, col, 0)] = v.x;
        self.data[(row, col, 1)] = v.y;
        self.data[(row, col, 2)] = v.z;
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn barycentric_uv(tri: [[f64; 2]; 3], p: [f64; 2]) -> Option<[f64; 3]> {
    let signed = |a: [f64; 2], b: [f64; 2], c: [f64; 2]| -> f64 {
        (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    };
    let total = signed(tri[0], tri[1], tri[2]);
    if total.abs() < 1e-16 {
        return None;
    }
    let w0 = signed(p, tri[1], tri[2]) / total;
    let w1 = signed(tri[0], p, tri[2]) / total;
    let w2 = signed(tri[0], tri[1], p) / total;
    Some([w0, w1, w2])
}

/// Rasterizes the template's uv triangles into a texel→(face, barycentric)
/// map with seam dilation, and precomputes per-vertex bilinear lift weights.
///
/// A texel is covered iff its center lies inside some uv triangle. Dilation
/// extends coverage [`DILATION_TEXELS`] texels outward, copying the nearest
/// covered texel's assignment. Errors on uv-overlapping faces and on
/// vertices whose bilinear footprint stays entirely uncovered.
pub fn build_atlas(template: &TriMesh, resolution: (usize, usize)) -> Result<UvAtlas> {
    let (rows, cols) = resolution;
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidParam("atlas resolution must be nonzero".into()));
    }
    let uv = template.require_uv()?;
    for (k, t) in uv.iter().enumerate() {
        if !(0.0..=1.0).contains(&t[0]) || !(0.0..=1.0).contains(&t[1]) {
            return Err(Error::InvalidParam(format!(
                "vertex {k} uv ({}, {}) outside [0,1]²",
                t[0], t[1]
            )));
        }
    }

    let mut texel_map: Vec<Option<TexelAssign>> = vec![None; rows * cols];
    let mut dilation_mask = vec![false; rows * cols];

    // Inclusive point-in-triangle tolerance; weights this close to zero mean
    // the center sits on a shared edge, which is not an overlap.
    const EDGE_EPS: f64 = 1e-9;

    for (fi, face) in template.faces().iter().enumerate() {
        let tri = [uv[face[0]], uv[face[1]], uv[face[2]]];
        let umin = tri.iter().map(|t| t[0]).fold(f64::INFINITY, f64::min);
        let umax = tri.iter().map(|t| t[0]).fold(f64::NEG_INFINITY, f64::max);
        let vmin = tri.iter().map(|t| t[1]).fold(f64::INFINITY, f64::min);
        let vmax = tri.iter().map(|t| t[1]).fold(f64::NEG_INFINITY, f64::max);

        let j0 = ((umin * cols as f64 - 0.5).floor().max(0.0)) as usize;
        let j1 = ((umax * cols as f64 - 0.5).ceil().min(cols as f64 - 1.0)).max(0.0) as usize;
        let i0 = ((vmin * rows as f64 - 0.5).floor().max(0.0)) as usize;
        let i1 = ((vmax * rows as f64 - 0.5).ceil().min(rows as f64 - 1.0)).max(0.0) as usize;

        for i in i0..=i1 {
            for j in j0..=j1 {
                let center = [(j as f64 + 0.5) / cols as f64, (i as f64 + 0.5) / rows as f64];
                let Some(w) = barycentric_uv(tri, center) else {
                    continue;
                };
                if w.iter().any(|&x| x < -EDGE_EPS) {
                    continue;
                }
                let slot = &mut texel_map[i * cols + j];
                match slot {
                    None => {
                        *slot = Some(TexelAssign {
                            face: fi as u32,
                            bary: w,
                        })
                    }
                    Some(prev) => {
                        let prev_on_edge = prev.bary.iter().any(|&x| x.abs() <= 1e-7);
                        let new_on_edge = w.iter().any(|&x| x.abs() <= 1e-7);
                        if prev_on_edge && new_on_edge {
                            // Shared edge or vertex: keep the lower face index.
                            continue;
                        }
                        return Err(Error::UvOverlap {
                            row: i,
                            col: j,
                            a: prev.face as usize,
                            b: fi,
                        });
                    }
                }
            }
        }
    }

    // Seam dilation: copy the nearest covered texel's assignment outward.
    for _pass in 0..DILATION_TEXELS {
        let snapshot = texel_map.clone();
        for i in 0..rows {
            for j in 0..cols {
                if snapshot[i * cols + j].is_some() {
                    continue;
                }
                let mut best: Option<(f64, usize)> = None;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        if di == 0 && dj == 0 {
                            continue;
                        }
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        if ni < 0 || nj < 0 || ni >= rows as i64 || nj >= cols as i64 {
                            continue;
                        }
                        let nidx = ni as usize * cols + nj as usize;
                        if snapshot[nidx].is_some() {
                            let d = ((di * di + dj * dj) as f64).sqrt();
                            let better = match best {
                                None => true,
                                Some((bd, bidx)) => d < bd || (d == bd && nidx < bidx),
                            };
                            if better {
                                best = Some((d, nidx));
                            }
                        }
                    }
                }
                if let Some((_, src)) = best {
                    texel_map[i * cols + j] = snapshot[src];
                    dilation_mask[i * cols + j] = true;
                }
            }
        }
    }

    // Per-vertex bilinear lift weights over covered texels, renormalized by
    // the covered weight mass.
    let mut lift = Vec::with_capacity(uv.len());
    for (k, t) in uv.iter().enumerate() {
        let weights = bilinear_footprint(t, rows, cols);
        let mut covered: Vec<(u32, f64)> = Vec::with_capacity(4);
        let mut mass = 0.0;
        for (flat, w) in weights {
            if texel_map[flat].is_some() && w > 0.0 {
                covered.push((flat as u32, w));
                mass += w;
            }
        }
        if covered.is_empty() || mass <= 0.0 {
            return Err(Error::UncoveredFootprint { vertex: k });
        }
        for c in &mut covered {
            c.1 /= mass;
        }
        lift.push(covered);
    }

    Ok(UvAtlas {
        rows,
        cols,
        texel_map,
        dilation_mask,
        vertex_uv: uv.to_vec(),
        lift,
    })
}

/// The (up to 4) texels and weights of a bilinear sample at `uv`, with
/// indices clamped at the borders (clamped duplicates merge their weight).
fn bilinear_footprint(uv: &[f64; 2], rows: usize, cols: usize) -> Vec<(usize, f64)> {
    let x = uv[0] * cols as f64 - 0.5;
    let y = uv[1] * rows as f64 - 0.5;
    let j0 = x.floor();
    let i0 = y.floor();
    let fx = x - j0;
    let fy = y - i0;

    let clamp_i = |i: f64| -> usize { (i.max(0.0) as usize).min(rows - 1) };
    let clamp_j = |j: f64| -> usize { (j.max(0.0) as usize).min(cols - 1) };

    let cells = [
        (clamp_i(i0), clamp_j(j0), (1.0 - fx) * (1.0 - fy)),
        (clamp_i(i0), clamp_j(j0 + 1.0), fx * (1.0 - fy)),
        (clamp_i(i0 + 1.0), clamp_j(j0), (1.0 - fx) * fy),
        (clamp_i(i0 + 1.0), clamp_j(j0 + 1.0), fx * fy),
    ];
    let mut merged: Vec<(usize, f64)> = Vec::with_capacity(4);
    for (i, j, w) in cells {
        if w == 0.0 {
            continue;
        }
        let flat = i * cols + j;
        if let Some(e) = merged.iter_mut().find(|e| e.0 == flat) {
            e.1 += w;
        } else {
            merged.push((flat, w));
        }
    }
    merged
}

/// Rasterizes the per-vertex displacement field (deformed − template) into
/// a displacement map: each assigned texel gets the barycentric
/// interpolation of its owning face's corner displacements; unassigned
/// texels hold exactly zero.
pub fn encode(deformed: &TriMesh, template: &TriMesh, atlas: &UvAtlas) -> Result<DisplacementMap> {
    template.check_same_topology(deformed)?;
    if atlas.vertex_uv.len() != template.vertex_count() {
        return Err(Error::TopologyMismatch {
            what: "atlas vertices",
            expected: atlas.vertex_uv.len(),
            actual: template.vertex_count(),
        });
    }
    let (rows, cols) = atlas.resolution();
    let mut map = DisplacementMap::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            if let Some(assign) = atlas.texel(i, j) {
                let face = template.faces()[assign.face as usize];
                let mut d = Vec3::zeros();
                for (w, &v) in assign.bary.iter().zip(face.iter()) {
                    d += *w * (deformed.vertices()[v] - template.vertices()[v]);
                }
                map.set(i, j, d);
            }
        }
    }
    Ok(map)
}

/// Lifts a displacement map back to a mesh: vertex k gets the template
/// position plus the bilinear sample of the map at its uv coordinate.
pub fn decode(map: &DisplacementMap, template: &TriMesh, atlas: &UvAtlas) -> Result<TriMesh> {
    if map.resolution() != atlas.resolution() {
        return Err(Error::ResolutionMismatch {
            expected: atlas.resolution(),
            actual: map.resolution(),
        });
    }
    if atlas.vertex_uv.len() != template.vertex_count() {
        return Err(Error::TopologyMismatch {
            what: "atlas vertices",
            expected: atlas.vertex_uv.len(),
            actual: template.vertex_count(),
        });
    }
    let (_, cols) = atlas.resolution();
    let vertices = template
        .vertices()
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let mut d = Vec3::zeros();
            for &(flat, w) in atlas.lift_weights(k) {
                let (i, j) = (flat as usize / cols, flat as usize % cols);
                d += w * map.get(i, j);
            }
            p + d
        })
        .collect();
    template.with_vertices(vertices)
}

/// Transpose of [`decode`]'s linear lift: scatters per-vertex gradients
/// back onto the map texels. Used to backpropagate mesh-level losses.
pub fn lift_transpose(
    vertex_grads: &[Vec3],
    template: &TriMesh,
    atlas: &UvAtlas,
) -> Result<DisplacementMap> {
    if vertex_grads.len() != template.vertex_count() {
        return Err(Error::TopologyMismatch {
            what: "vertex gradients",
            expected: template.vertex_count(),
            actual: vertex_grads.len(),
        });
    }
    let (rows, cols) = atlas.resolution();
    let mut out = DisplacementMap::zeros(rows, cols);
    for (k, g) in vertex_grads.iter().enumerate() {
        for &(flat, w) in atlas.lift_weights(k) {
            let (i, j) = (flat as usize / cols, flat as usize % cols);
            let cur = out.get(i, j);
            out.set(i, j, cur + w * g);
        }
    }
    Ok(out)
}
