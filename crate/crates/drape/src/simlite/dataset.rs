//! Dataset generation: simulate the garment over the Cartesian product of
//! (motion, body shape, material), normalize every frame into the body's
//! root-local coordinates, and emit meshes, displacement maps (DGDM) and a
//! JSON-lines manifest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::CondVector;
use crate::mesh::{obj, TriMesh, Vec3};
use crate::uvcodec::{build_atlas, dgdm, encode};
use crate::{Error, Result};

use super::body::{
    self, normalize_frame, pose_rotation, pose_translation, BodyProxy, RigidTransform, PELVIS,
};
use super::motion::{procedural_motion, MotionSpec};
use super::{
    drape_and_stabilize, pd_step, skirt_mesh, ClothState, ClothSystem, DrapeProtocol,
    MaterialParams, PinRule, SimParams,
};

/// Skirt-like garment proportions; the defaults clear the zero-pose body.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GarmentConfig {
    pub segments: usize,
    pub rows: usize,
    pub top_radius: f64,
    pub bottom_radius: f64,
    pub length: f64,
    /// Waist height offset above the pelvis joint.
    pub waist_offset: f64,
}

impl Default for GarmentConfig {
    fn default() -> Self {
        Self {
            segments: 16,
            rows: 10,
            top_radius: 0.14,
            bottom_radius: 0.35,
            length: 0.55,
            waist_offset: 0.04,
        }
    }
}

impl GarmentConfig {
    /// Rest garment around the zero-pose body, its sewing pairs and the
    /// pinned waist-ring vertices.
    pub fn build(&self) -> (TriMesh, Vec<(usize, usize)>, Vec<usize>) {
        let pelvis = Vec3::new(0.0, 0.0, 1.0);
        skirt_mesh(
            self.segments,
            self.rows,
            self.top_radius,
            self.bottom_radius,
            self.length,
            pelvis + Vec3::new(0.0, 0.0, self.waist_offset),
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub motions: Vec<MotionSpec>,
    pub shape_count: usize,
    pub material_count: usize,
    pub fps: f64,
    pub map_resolution: (usize, usize),
    pub garment: GarmentConfig,
    pub sim: SimParams,
    pub drape: DrapeProtocol,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            motions: Vec::new(),
            shape_count: 2,
            material_count: 2,
            fps: 50.0,
            map_resolution: (64, 64),
            garment: GarmentConfig::default(),
            sim: SimParams::default(),
            drape: DrapeProtocol::default(),
            seed: 0,
        }
    }
}

/// One frame of the dataset manifest (JSON-lines).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRecord {
    pub sequence: String,
    pub frame: usize,
    pub mesh_file: String,
    pub map_file: String,
    pub cond: CondVector,
    pub normalization: RigidTransform,
    pub displacement_scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceInfo {
    pub id: String,
    pub motion: MotionSpec,
    pub shape: Vec<f64>,
    pub material: MaterialParams,
    pub frames: usize,
}

/// Dataset header written next to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub template_file: String,
    pub rest_file: String,
    pub displacement_scale: f64,
    pub map_resolution: (usize, usize),
    pub fps: f64,
    pub garment: GarmentConfig,
    pub sequences: Vec<SequenceInfo>,
    pub skipped: Vec<String>,
}

pub struct DatasetSummary {
    pub manifest_path: PathBuf,
    pub header: DatasetHeader,
    pub frame_count: usize,
}

struct SimulatedSequence {
    info: SequenceInfo,
    poses: Vec<Vec<f64>>,
    positions: Vec<Vec<Vec3>>,
}

fn sample_shapes(count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5841_5045);
    (0..count)
        .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn sample_materials(count: usize, seed: u64) -> Vec<MaterialParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4D41_5431);
    (0..count).map(|_| MaterialParams::sample(&mut rng)).collect()
}

/// Re-expresses a past pose in the current frame's root-local coordinates.
fn normalize_pose_relative(pose: &[f64], transform: &RigidTransform) -> Result<Vec<f64>> {
    let rot = transform.rotation()?;
    let t = transform.translation_vec();
    let inv = rot.transpose();
    let mut out = pose.to_vec();
    let root = pose_rotation(pose, PELVIS)?;
    body::set_pose_rotation(&mut out, PELVIS, &(inv * root));
    body::set_pose_translation(&mut out, &(inv * (pose_translation(pose) - t)));
    Ok(out)
}

fn simulate_sequence(
    info: &SequenceInfo,
    config: &DatasetConfig,
    rest: &TriMesh,
    sewing: &[(usize, usize)],
    pins: &[usize],
    pin_locals: &[Vec3],
) -> Result<SimulatedSequence> {
    let system = ClothSystem::build(rest, &info.material, &config.sim, pins, sewing)?;
    let poses = procedural_motion(
        info.motion.kind,
        info.motion.duration,
        config.fps,
        info.motion.seed,
    );
    if poses.is_empty() {
        return Err(Error::EmptyInput("motion poses"));
    }
    let pin_rule = PinRule::JointFrame {
        joint: PELVIS,
        locals: pin_locals.to_vec(),
    };
    let zero_pose = body::identity_pose_vector();
    let state0 = ClothState::at_rest(rest);
    let mut state = drape_and_stabilize(
        &system,
        &state0,
        Some(&info.shape),
        Some(&zero_pose),
        Some(&poses[0]),
        &pin_rule,
        &config.drape,
    )?;

    let mut positions = Vec::with_capacity(poses.len());
    for pose in &poses {
        let body = BodyProxy::from_pose(pose, &info.shape)?;
        let targets = pin_rule.targets(Some(&body))?;
        state = pd_step(&system, &state, &targets, Some(&body))?;
        positions.push(state.positions.clone());
    }
    Ok(SimulatedSequence {
        info: info.clone(),
        poses,
        positions,
    })
}

/// Simulates the full (motion × shape × material) product and writes the
/// dataset. Sequences that fail to stabilize or diverge are skipped and
/// listed in the header.
pub fn generate_dataset(config: &DatasetConfig, out_dir: impl AsRef<Path>) -> Result<DatasetSummary> {
    let out_dir = out_dir.as_ref();
    if config.motions.is_empty() {
        return Err(Error::Config("dataset needs at least one motion".into()));
    }
    fs::create_dir_all(out_dir.join("frames")).map_err(|e| Error::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;

    let shapes = sample_shapes(config.shape_count, config.seed);
    let materials = sample_materials(config.material_count, config.seed);
    let (rest, sewing, pins) = config.garment.build();

    // Pin anchors in the pelvis frame of the zero-pose body.
    let zero_body = BodyProxy::from_pose(&body::identity_pose_vector(), &[0.0; 8])?;
    let pelvis_pos = zero_body.joint_position(PELVIS);
    let pin_locals: Vec<Vec3> = pins.iter().map(|&v| rest.vertices()[v] - pelvis_pos).collect();

    let mut specs: Vec<SequenceInfo> = Vec::new();
    for (mi, motion) in config.motions.iter().enumerate() {
        for (si, shape) in shapes.iter().enumerate() {
            for (gi, material) in materials.iter().enumerate() {
                specs.push(SequenceInfo {
                    id: format!("m{mi}_s{si}_g{gi}"),
                    motion: motion.clone(),
                    shape: shape.clone(),
                    material: *material,
                    frames: 0,
                });
            }
        }
    }

    // Sequences are independent; simulate them in parallel and collect in
    // order so output is deterministic regardless of worker count.
    use rayon::prelude::*;
    let results: Vec<(SequenceInfo, Result<SimulatedSequence>)> = specs
        .par_iter()
        .map(|info| {
            (
                info.clone(),
                simulate_sequence(info, config, &rest, &sewing, &pins, &pin_locals),
            )
        })
        .collect();

    let mut sequences = Vec::new();
    let mut skipped = Vec::new();
    for (info, result) in results {
        match result {
            Ok(sim) => sequences.push(sim),
            Err(e) => {
                eprintln!("skipping sequence {}: {e}", info.id);
                skipped.push(info.id);
            }
        }
    }
    if sequences.is_empty() {
        return Err(Error::EmptyInput("all sequences failed simulation"));
    }

    // Normalize every frame into its root-local coordinates.
    struct NormFrame {
        seq: usize,
        frame: usize,
        vertices: Vec<Vec3>,
        pose_triplet: [Vec<f64>; 3],
        transform: RigidTransform,
    }
    let mut frames: Vec<NormFrame> = Vec::new();
    for (qi, seq) in sequences.iter().enumerate() {
        for (fi, positions) in seq.positions.iter().enumerate() {
            let frame_mesh = rest.with_vertices(positions.clone())?;
            let (norm_mesh, norm_pose, transform) = normalize_frame(&frame_mesh, &seq.poses[fi])?;
            let past = |k: usize| -> Result<Vec<f64>> {
                let idx = fi.saturating_sub(k);
                normalize_pose_relative(&seq.poses[idx], &transform)
            };
            frames.push(NormFrame {
                seq: qi,
                frame: fi,
                vertices: norm_mesh.vertices().to_vec(),
                pose_triplet: [past(2)?, past(1)?, norm_pose],
                transform,
            });
        }
    }

    // Mean geometry of the normalized dataset becomes the template.
    let template_vertices = mean_vertices(frames.iter().map(|f| f.vertices.as_slice()))?;
    let template = rest.with_vertices(template_vertices)?;

    // 99th-percentile displacement magnitude normalizes maps to ~[-1, 1].
    let mut magnitudes: Vec<f64> = frames
        .iter()
        .flat_map(|f| {
            f.vertices
                .iter()
                .zip(template.vertices())
                .map(|(v, t)| (v - t).norm())
        })
        .collect();
    magnitudes.sort_by(|a, b| a.total_cmp(b));
    let p99 = magnitudes[((magnitudes.len() as f64 * 0.99) as usize).min(magnitudes.len() - 1)];
    let displacement_scale = p99.max(1e-6);

    let atlas = build_atlas(&template, config.map_resolution)?;

    obj::save_mesh(&template, out_dir.join("template.obj"))?;
    obj::save_mesh(&rest, out_dir.join("rest.obj"))?;

    let manifest_path = out_dir.join("manifest.jsonl");
    let mut manifest = fs::File::create(&manifest_path).map_err(|e| Error::Io {
        path: manifest_path.display().to_string(),
        source: e,
    })?;

    let mut frame_counts = vec![0usize; sequences.len()];
    let mut frame_count = 0usize;
    for f in &frames {
        let seq = &sequences[f.seq];
        let mesh_file = format!("frames/{}_{:04}.obj", seq.info.id, f.frame);
        let map_file = format!("frames/{}_{:04}.dgdm", seq.info.id, f.frame);
        let norm_mesh = template.with_vertices(f.vertices.clone())?;
        obj::save_mesh(&norm_mesh, out_dir.join(&mesh_file))?;
        let map = encode(&norm_mesh, &template, &atlas)?;
        dgdm::write_grid(&map.data, out_dir.join(&map_file))?;

        let record = FrameRecord {
            sequence: seq.info.id.clone(),
            frame: f.frame,
            mesh_file,
            map_file,
            cond: CondVector::new(
                f.pose_triplet.clone(),
                seq.info.shape.clone(),
                seq.info.material,
            )?,
            normalization: f.transform.clone(),
            displacement_scale,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
        writeln!(manifest, "{line}").map_err(|e| Error::Io {
            path: manifest_path.display().to_string(),
            source: e,
        })?;
        frame_counts[f.seq] += 1;
        frame_count += 1;
    }

    let header = DatasetHeader {
        version: 1,
        template_file: "template.obj".into(),
        rest_file: "rest.obj".into(),
        displacement_scale,
        map_resolution: config.map_resolution,
        fps: config.fps,
        garment: config.garment.clone(),
        sequences: sequences
            .iter()
            .zip(&frame_counts)
            .map(|(s, &fc)| SequenceInfo {
                frames: fc,
                ..s.info.clone()
            })
            .collect(),
        skipped,
    };
    let header_path = out_dir.join("dataset.json");
    fs::write(
        &header_path,
        serde_json::to_string_pretty(&header)
            .map_err(|e| Error::Format(format!("header serialization: {e}")))?,
    )
    .map_err(|e| Error::Io {
        path: header_path.display().to_string(),
        source: e,
    })?;

    Ok(DatasetSummary {
        manifest_path,
        header,
        frame_count,
    })
}

/// Per-vertex arithmetic mean over same-topology vertex lists.
pub fn mean_vertices<'a>(frames: impl Iterator<Item = &'a [Vec3]>) -> Result<Vec<Vec3>> {
    let mut sum: Vec<Vec3> = Vec::new();
    let mut count = 0usize;
    for frame in frames {
        if sum.is_empty() {
            sum = frame.to_vec();
        } else {
            if frame.len() != sum.len() {
                return Err(Error::TopologyMismatch {
                    what: "vertices",
                    expected: sum.len(),
                    actual: frame.len(),
                });
            }
            for (s, v) in sum.iter_mut().zip(frame) {
                *s += v;
            }
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyInput("mean over zero meshes"));
    }
    for s in &mut sum {
        *s /= count as f64;
    }
    Ok(sum)
}

/// The per-vertex mean geometry of all meshes referenced by a manifest.
pub fn mean_template(dataset_dir: impl AsRef<Path>) -> Result<TriMesh> {
    let dataset_dir = dataset_dir.as_ref();
    let records = read_manifest(&dataset_dir.join("manifest.jsonl"))?;
    if records.is_empty() {
        return Err(Error::EmptyInput("manifest"));
    }
    let mut meshes = Vec::with_capacity(records.len());
    for r in &records {
        meshes.push(obj::load_mesh(dataset_dir.join(&r.mesh_file))?);
    }
    let first = meshes[0].clone();
    for m in &meshes[1..] {
        first.check_same_topology(m)?;
    }
    let mean = mean_vertices(meshes.iter().map(|m| m.vertices()))?;
    first.with_vertices(mean)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<FrameRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut records = Vec::new();
    for (lno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: lno + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(records)
}

pub fn read_header(dataset_dir: impl AsRef<Path>) -> Result<DatasetHeader> {
    let path = dataset_dir.as_ref().join("dataset.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simlite::motion::MotionKind;
    use tempfile::tempdir;

    fn tiny_config(seed: u64) -> DatasetConfig {
        DatasetConfig {
            motions: vec![
                MotionSpec {
                    kind: MotionKind::Swing,
                    duration: 0.3,
                    seed: 1,
                },
                MotionSpec {
                    kind: MotionKind::Turn,
                    duration: 0.3,
                    seed: 2,
                },
            ],
            shape_count: 1,
            material_count: 1,
            map_resolution: (32, 32),
            garment: GarmentConfig {
                segments: 10,
                rows: 6,
                ..Default::default()
            },
            drape: DrapeProtocol {
                interpolation_frames: 40,
                hold_frames: 80,
                kinetic_threshold: 1e-3,
            },
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn generates_product_of_sequences() {
        let dir = tempdir().unwrap();
        let summary = generate_dataset(&tiny_config(7), dir.path()).unwrap();
        assert_eq!(summary.header.sequences.len(), 2); // 2 motions × 1 × 1
        assert_eq!(summary.frame_count, 15 + 15); // 0.3 s at 50 fps each
        let records = read_manifest(&summary.manifest_path).unwrap();
        assert_eq!(records.len(), summary.frame_count);

        // Frames and maps exist, template loads, manifest conds are valid.
        let template = obj::load_mesh(dir.path().join("template.obj")).unwrap();
        assert!(template.uv().is_some());
        let first = &records[0];
        assert!(dir.path().join(&first.mesh_file).exists());
        let grid = dgdm::read_grid(dir.path().join(&first.map_file)).unwrap();
        assert_eq!(grid.dim(), (32, 32, 3));
        assert!(first.displacement_scale > 0.0);
    }

    #[test]
    fn dataset_is_bit_deterministic() {
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        generate_dataset(&tiny_config(3), dir_a.path()).unwrap();
        generate_dataset(&tiny_config(3), dir_b.path()).unwrap();
        let manifest_a = fs::read(dir_a.path().join("manifest.jsonl")).unwrap();
        let manifest_b = fs::read(dir_b.path().join("manifest.jsonl")).unwrap();
        assert_eq!(manifest_a, manifest_b);
        let map_a = fs::read(dir_a.path().join("frames/m0_s0_g0_0005.dgdm")).unwrap();
        let map_b = fs::read(dir_b.path().join("frames/m0_s0_g0_0005.dgdm")).unwrap();
        assert_eq!(map_a, map_b);
    }

    #[test]
    fn mean_template_matches_generator_output() {
        let dir = tempdir().unwrap();
        generate_dataset(&tiny_config(11), dir.path()).unwrap();
        let recomputed = mean_template(dir.path()).unwrap();
        let stored = obj::load_mesh(dir.path().join("template.obj")).unwrap();
        for (a, b) in recomputed.vertices().iter().zip(stored.vertices()) {
            // Meshes round-trip through 9-decimal OBJ text.
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn mean_vertices_basics() {
        let a = vec![Vec3::new(1.0, 0.0, 0.0)];
        let b = vec![Vec3::new(3.0, 0.0, 0.0)];
        let mean = mean_vertices([a.as_slice(), b.as_slice()].into_iter()).unwrap();
        assert_eq!(mean[0], Vec3::new(2.0, 0.0, 0.0));

        // Mean of {T+δ, T−δ} is T.
        let t = Vec3::new(0.5, 0.5, 0.5);
        let d = Vec3::new(0.1, -0.2, 0.3);
        let plus = vec![t + d];
        let minus = vec![t - d];
        let mean = mean_vertices([plus.as_slice(), minus.as_slice()].into_iter()).unwrap();
        assert!((mean[0] - t).norm() < 1e-15);

        // k identical meshes with one outlier shifted by c → shift c/k.
        let base = vec![Vec3::zeros()];
        let outlier = vec![Vec3::new(0.4, 0.0, 0.0)];
        let mean = mean_vertices(
            [base.as_slice(), base.as_slice(), base.as_slice(), outlier.as_slice()].into_iter(),
        )
        .unwrap();
        assert!((mean[0] - Vec3::new(0.1, 0.0, 0.0)).norm() < 1e-15);
    }
}
