//! Mesh and point-cloud file I/O.
//!
//! OBJ subset: `v x y z`, `vt u v`, `f i/ti ...` with 1-based indices,
//! triangles or quads (quads are fan-triangulated). Texture coordinates
//! referencing the same vertex are averaged into a single per-vertex uv.
//! Point clouds load from ascii PLY or whitespace-separated XYZ lines.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{PointCloud, TriMesh, Vec3};
use crate::{Error, Result};

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Loads a triangle mesh from the OBJ subset described in the module docs.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriMesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;

    let mut positions: Vec<Vec3> = Vec::new();
    let mut texcoords: Vec<[f64; 2]> = Vec::new();
    // (vertex index, optional uv index) per face corner, already triangulated.
    let mut corners: Vec<[(usize, Option<usize>); 3]> = Vec::new();

    for (lno, raw) in text.lines().enumerate() {
        let lno = lno + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let tag = tokens.next().unwrap();
        match tag {
            "v" => {
                let mut coord = [0.0; 3];
                for c in &mut coord {
                    *c = tokens
                        .next()
                        .and_then(|t| t.parse::<f64>().ok())
                        .ok_or_else(|| parse_err(path, lno, "malformed `v` line"))?;
                }
                positions.push(Vec3::new(coord[0], coord[1], coord[2]));
            }
            "vt" => {
                let mut coord = [0.0; 2];
                for c in &mut coord {
                    *c = tokens
                        .next()
                        .and_then(|t| t.parse::<f64>().ok())
                        .ok_or_else(|| parse_err(path, lno, "malformed `vt` line"))?;
                }
                texcoords.push(coord);
            }
            "f" => {
                let mut face: Vec<(usize, Option<usize>)> = Vec::with_capacity(4);
                for entry in tokens {
                    let mut parts = entry.split('/');
                    let vi: i64 = parts
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| parse_err(path, lno, "malformed face entry"))?;
                    if vi < 1 {
                        return Err(parse_err(
                            path,
                            lno,
                            format!("face index {vi} is not 1-based positive"),
                        ));
                    }
                    let ti = match parts.next() {
                        None | Some("") => None,
                        Some(t) => {
                            let ti: i64 = t
                                .parse()
                                .map_err(|_| parse_err(path, lno, "malformed face entry"))?;
                            if ti < 1 {
                                return Err(parse_err(
                                    path,
                                    lno,
                                    format!("uv index {ti} is not 1-based positive"),
                                ));
                            }
                            Some(ti as usize - 1)
                        }
                    };
                    face.push((vi as usize - 1, ti));
                }
                match face.len() {
                    3 => corners.push([face[0], face[1], face[2]]),
                    4 => {
                        corners.push([face[0], face[1], face[2]]);
                        corners.push([face[0], face[2], face[3]]);
                    }
                    n => {
                        return Err(parse_err(
                            path,
                            lno,
                            format!("face with {n} corners (only triangles and quads)"),
                        ))
                    }
                }
            }
            // vn / o / g / s / usemtl / mtllib are accepted and ignored.
            _ => {}
        }
    }

    let mut faces = Vec::with_capacity(corners.len());
    let any_uv = corners.iter().flatten().any(|(_, t)| t.is_some());
    let mut uv_sum = vec![[0.0; 2]; positions.len()];
    let mut uv_count = vec![0usize; positions.len()];

    for corner in &corners {
        let mut face = [0usize; 3];
        for (k, &(vi, ti)) in corner.iter().enumerate() {
            if vi >= positions.len() {
                return Err(Error::FaceIndexOutOfRange {
                    index: vi,
                    vertex_count: positions.len(),
                });
            }
            face[k] = vi;
            if let Some(ti) = ti {
                let t = texcoords.get(ti).ok_or(Error::FaceIndexOutOfRange {
                    index: ti,
                    vertex_count: texcoords.len(),
                })?;
                uv_sum[vi][0] += t[0];
                uv_sum[vi][1] += t[1];
                uv_count[vi] += 1;
            } else if any_uv {
                return Err(parse_err(
                    path,
                    0,
                    format!("vertex {} referenced without uv in a textured mesh", vi + 1),
                ));
            }
        }
        faces.push(face);
    }

    let uv = if any_uv {
        // Seam texture coordinates averaged into one uv per vertex.
        Some(
            uv_sum
                .iter()
                .zip(&uv_count)
                .map(|(s, &c)| {
                    if c == 0 {
                        [0.0, 0.0]
                    } else {
                        [s[0] / c as f64, s[1] / c as f64]
                    }
                })
                .collect(),
        )
    } else {
        None
    };

    TriMesh::new(positions, faces, uv)
}

/// Writes a mesh in the same OBJ subset, with deterministic formatting.
pub fn save_mesh(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for v in mesh.vertices() {
        writeln!(out, "v {:.9} {:.9} {:.9}", v.x, v.y, v.z).expect("string write");
    }
    if let Some(uv) = mesh.uv() {
        for t in uv {
            writeln!(out, "vt {:.9} {:.9}", t[0], t[1]).expect("string write");
        }
        for f in mesh.faces() {
            writeln!(
                out,
                "f {}/{} {}/{} {}/{}",
                f[0] + 1,
                f[0] + 1,
                f[1] + 1,
                f[1] + 1,
                f[2] + 1,
                f[2] + 1
            )
            .expect("string write");
        }
    } else {
        for f in mesh.faces() {
            writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).expect("string write");
        }
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Loads a point cloud from ascii PLY (`element vertex` with leading x y z
/// properties) or from bare whitespace-separated XYZ lines.
pub fn load_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().enumerate();

    let first = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((n, l)) => break Some((n, l)),
            None => break None,
        }
    };
    let Some((first_no, first_line)) = first else {
        return Err(Error::EmptyInput("point cloud file"));
    };

    let mut points = Vec::new();
    if first_line.trim() == "ply" {
        let mut count: Option<usize> = None;
        for (lno, line) in lines.by_ref() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("element vertex") {
                count = Some(
                    rest.trim()
                        .parse()
                        .map_err(|_| parse_err(path, lno + 1, "bad vertex count"))?,
                );
            } else if line.starts_with("format") && !line.starts_with("format ascii") {
                return Err(parse_err(path, lno + 1, "only ascii PLY is supported"));
            } else if line == "end_header" {
                break;
            }
        }
        let count = count.ok_or_else(|| parse_err(path, first_no + 1, "missing element vertex"))?;
        for _ in 0..count {
            let (lno, line) = lines
                .next()
                .ok_or_else(|| parse_err(path, 0, "truncated PLY vertex list"))?;
            points.push(parse_xyz(path, lno + 1, line)?);
        }
    } else {
        points.push(parse_xyz(path, first_no + 1, first_line)?);
        for (lno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            points.push(parse_xyz(path, lno + 1, line)?);
        }
    }

    if points.is_empty() {
        return Err(Error::EmptyInput("point cloud file"));
    }
    Ok(PointCloud::new(points))
}

fn parse_xyz(path: &Path, lno: usize, line: &str) -> Result<Vec3> {
    let mut it = line.split_whitespace();
    let mut coord = [0.0; 3];
    for c in &mut coord {
        *c = it
            .next()
            .and_then(|t| t.parse::<f64>().ok())
            .ok_or_else(|| parse_err(path, lno, "expected `x y z`"))?;
    }
    Ok(Vec3::new(coord[0], coord[1], coord[2]))
}

/// Writes a point cloud as whitespace XYZ lines.
pub fn save_point_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for p in &cloud.points {
        writeln!(out, "{:.9} {:.9} {:.9}", p.x, p.y, p.z).expect("string write");
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}
