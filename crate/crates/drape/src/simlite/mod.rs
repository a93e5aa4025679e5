//! Desk-scale projective-dynamics cloth simulator and dataset generator.
//!
//! Cloth is a triangle mesh with edge-stretch constraints (stiffness from
//! the material's stretch coefficient), hinge-bending constraints on
//! interior edges (stiffness from the bending coefficient), gravity, and
//! collision projection against an articulated capsule body. Each step
//! alternates local constraint projections with a global solve against a
//! prefactored system matrix.

pub mod body;
pub mod dataset;
pub mod motion;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mesh::{edge_set, TriMesh, Vec3};
use crate::{Error, Result};

use body::BodyProxy;

pub const JOINT_COUNT: usize = 18;

pub const STRETCH_RANGE: (f64, f64) = (40.0, 200.0);
pub const DENSITY_RANGE: (f64, f64) = (0.01, 0.7);
pub const BENDING_RANGE: (f64, f64) = (1e-8, 1e-4);

/// Cloth material γ = [s, d, b]: stretch (N/m), area density (kg/m²),
/// bending (N·m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    pub stretch: f64,
    pub density: f64,
    pub bending: f64,
}

impl MaterialParams {
    pub fn validate(&self) -> Result<()> {
        if self.stretch <= 0.0 || self.density <= 0.0 || self.bending <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "material parameters must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn is_in_distribution(&self) -> bool {
        (STRETCH_RANGE.0..=STRETCH_RANGE.1).contains(&self.stretch)
            && (DENSITY_RANGE.0..=DENSITY_RANGE.1).contains(&self.density)
            && (BENDING_RANGE.0..=BENDING_RANGE.1).contains(&self.bending)
    }

    /// Uniform sample over the training ranges (bending uniform in linear
    /// scale, matching the dataset protocol).
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            stretch: rng.random_range(STRETCH_RANGE.0..=STRETCH_RANGE.1),
            density: rng.random_range(DENSITY_RANGE.0..=DENSITY_RANGE.1),
            bending: rng.random_range(BENDING_RANGE.0..=BENDING_RANGE.1),
        }
    }

    /// Conditioning features: stretch/density min-max scaled, bending
    /// log-scaled (it spans four decades) then min-max scaled.
    pub fn normalized_features(&self) -> [f64; 3] {
        let s = (self.stretch - STRETCH_RANGE.0) / (STRETCH_RANGE.1 - STRETCH_RANGE.0);
        let d = (self.density - DENSITY_RANGE.0) / (DENSITY_RANGE.1 - DENSITY_RANGE.0);
        let b = (self.bending.log10() - BENDING_RANGE.0.log10())
            / (BENDING_RANGE.1.log10() - BENDING_RANGE.0.log10());
        [s, d, b]
    }
}

/// Stretch-to-Lamé conversion: E = s·1.5e-3, ν = 0.31.
pub fn lame_from_stretch(stretch: f64) -> (f64, f64) {
    const NU: f64 = 0.31;
    let e = stretch * 1.5e-3;
    let lambda = e * NU / ((1.0 + NU) * (1.0 - 2.0 * NU));
    let mu = e / (2.0 * (1.0 + NU));
    (lambda, mu)
}

/// Simulation parameters that are not cloth-material dependent; fixed
/// across all dataset sequences.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimParams {
    /// Time step in seconds (50 FPS).
    pub dt: f64,
    /// Local/global iterations per step.
    pub iterations: usize,
    /// Constant velocity-damping factor per step, in [0, 1).
    pub damping: f64,
    /// Tangential velocity retention factor on contact is (1 − friction).
    pub friction: f64,
    /// Collision tolerance: vertices are kept this far off the capsules.
    pub collision_margin: f64,
    pub gravity: [f64; 3],
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            dt: 1.0 / 50.0,
            iterations: 10,
            damping: 0.05,
            friction: 0.3,
            collision_margin: 0.002,
            gravity: [0.0, 0.0, -9.81],
        }
    }
}

impl SimParams {
    pub fn gravity_vec(&self) -> Vec3 {
        Vec3::new(self.gravity[0], self.gravity[1], self.gravity[2])
    }
}

/// Positions and velocities of the simulated cloth.
#[derive(Debug, Clone)]
pub struct ClothState {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
}

impl ClothState {
    pub fn at_rest(mesh: &TriMesh) -> Self {
        Self {
            positions: mesh.vertices().to_vec(),
            velocities: vec![Vec3::zeros(); mesh.vertex_count()],
        }
    }

    pub fn kinetic_energy(&self, masses: &[f64]) -> f64 {
        self.velocities
            .iter()
            .zip(masses)
            .map(|(v, m)| 0.5 * m * v.norm_squared())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().all(|p| p.iter().all(|c| c.is_finite()))
            && self.velocities.iter().all(|v| v.iter().all(|c| c.is_finite()))
    }
}

struct StretchEdge {
    i: usize,
    j: usize,
    rest: f64,
    weight: f64,
}

struct Hinge {
    v0: usize,
    v1: usize,
    wing_a: usize,
    wing_b: usize,
    rest_angle: f64,
    weight: f64,
}

/// Bending stiffness enters the hinge weights through this fixed factor;
/// the mapping is validated through the material monotonicity properties.
const BEND_WEIGHT_SCALE: f64 = 1e4;
/// Sewing edges (rest length zero) are this much stiffer than stretch.
const SEWING_FACTOR: f64 = 10.0;
const PIN_WEIGHT: f64 = 1e5;

/// Prefactored cloth system for one (topology, material, dt) combination.
pub struct ClothSystem {
    rest: TriMesh,
    pub masses: Vec<f64>,
    stretch: Vec<StretchEdge>,
    hinges: Vec<Hinge>,
    pins: Vec<usize>,
    params: SimParams,
    factor: Cholesky<f64, Dyn>,
}

/// Angle between the projections of the two wings onto the plane normal to
/// the hinge edge; π for a flat configuration.
fn hinge_angle(p0: Vec3, p1: Vec3, wa: Vec3, wb: Vec3) -> f64 {
    let edge = p1 - p0;
    let len = edge.norm();
    if len < 1e-12 {
        return std::f64::consts::PI;
    }
    let dir = edge / len;
    let project = |p: Vec3| -> Option<Vec3> {
        let to = p - p0;
        let perp = to - dir * to.dot(&dir);
        let n = perp.norm();
        (n >= 1e-12).then(|| perp / n)
    };
    match (project(wa), project(wb)) {
        (Some(a), Some(b)) => a.dot(&b).clamp(-1.0, 1.0).acos(),
        _ => std::f64::consts::PI,
    }
}

fn rotate_about_axis(p: Vec3, center: Vec3, axis: Vec3, angle: f64) -> Vec3 {
    let v = p - center;
    let (sin, cos) = angle.sin_cos();
    center + v * cos + axis.cross(&v) * sin + axis * (axis.dot(&v)) * (1.0 - cos)
}

impl ClothSystem {
    /// Builds constraints from the rest mesh and prefactors the global
    /// matrix. `sewing` pairs are zero-rest-length stretch constraints
    /// keeping duplicated seam vertices together; `pins` are vertices
    /// driven kinematically through per-step targets.
    pub fn build(
        rest: &TriMesh,
        material: &MaterialParams,
        params: &SimParams,
        pins: &[usize],
        sewing: &[(usize, usize)],
    ) -> Result<Self> {
        material.validate()?;
        if params.dt <= 0.0 {
            return Err(Error::InvalidParam("dt must be positive".into()));
        }
        let n = rest.vertex_count();

        let areas = rest.vertex_areas();
        let masses: Vec<f64> = areas
            .iter()
            .map(|a| (material.density * a).max(1e-9))
            .collect();

        let mut stretch: Vec<StretchEdge> = rest
            .graph_edges()
            .iter()
            .map(|&(i, j)| StretchEdge {
                i,
                j,
                rest: (rest.vertices()[i] - rest.vertices()[j]).norm(),
                weight: material.stretch,
            })
            .collect();
        for &(i, j) in sewing {
            stretch.push(StretchEdge {
                i,
                j,
                rest: 0.0,
                weight: material.stretch * SEWING_FACTOR,
            });
        }

        let edges = edge_set(rest)?;
        let mut hinges = Vec::new();
        for e in &edges.edges {
            let Some(f1) = e.faces.1 else { continue };
            let f0 = e.faces.0;
            let (a, b) = e.vertices;
            let wing = |f: usize| {
                rest.faces()[f]
                    .iter()
                    .copied()
                    .find(|&v| v != a && v != b)
                    .expect("triangle has a wing vertex")
            };
            let (wa, wb) = (wing(f0), wing(f1));
            hinges.push(Hinge {
                v0: a,
                v1: b,
                wing_a: wa,
                wing_b: wb,
                rest_angle: hinge_angle(
                    rest.vertices()[a],
                    rest.vertices()[b],
                    rest.vertices()[wa],
                    rest.vertices()[wb],
                ),
                weight: BEND_WEIGHT_SCALE * material.bending * e.length,
            });
        }

        let dt2 = params.dt * params.dt;
        let mut y = DMatrix::<f64>::zeros(n, n);
        for (v, m) in masses.iter().enumerate() {
            y[(v, v)] += m / dt2;
        }
        for e in &stretch {
            y[(e.i, e.i)] += e.weight;
            y[(e.j, e.j)] += e.weight;
            y[(e.i, e.j)] -= e.weight;
            y[(e.j, e.i)] -= e.weight;
        }
        for h in &hinges {
            for v in [h.v0, h.v1, h.wing_a, h.wing_b] {
                y[(v, v)] += h.weight;
            }
        }
        for &p in pins {
            if p >= n {
                return Err(Error::FaceIndexOutOfRange {
                    index: p,
                    vertex_count: n,
                });
            }
            y[(p, p)] += PIN_WEIGHT;
        }

        let factor = Cholesky::new(y).ok_or(Error::NonFinite("projective dynamics system matrix"))?;
        Ok(Self {
            rest: rest.clone(),
            masses,
            stretch,
            hinges,
            pins: pins.to_vec(),
            params: *params,
            factor,
        })
    }

    pub fn rest(&self) -> &TriMesh {
        &self.rest
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn pins(&self) -> &[usize] {
        &self.pins
    }

    fn vertex_count(&self) -> usize {
        self.rest.vertex_count()
    }

    /// Hinge projection: rotate the wings about the hinge edge so the
    /// dihedral returns toward its rest value (shared edge kept in place).
    fn project_hinge(&self, h: &Hinge, q: &[Vec3]) -> [Vec3; 4] {
        let (p0, p1, pa, pb) = (q[h.v0], q[h.v1], q[h.wing_a], q[h.wing_b]);
        let current = hinge_angle(p0, p1, pa, pb);
        let diff = current - h.rest_angle;
        if diff.abs() < 1e-9 {
            return [p0, p1, pa, pb];
        }
        let edge = p1 - p0;
        let len = edge.norm();
        if len < 1e-12 {
            return [p0, p1, pa, pb];
        }
        let axis = edge / len;
        let mid = (p0 + p1) * 0.5;
        let half = 0.5 * diff;
        // The rotation sign depends on the wings' orientation around the
        // edge; evaluate both and keep whichever restores the rest angle.
        let candidate = |sign: f64| {
            let na = rotate_about_axis(pa, mid, axis, sign * half);
            let nb = rotate_about_axis(pb, mid, axis, -sign * half);
            (na, nb)
        };
        let (a_pos, b_pos) = candidate(1.0);
        let (a_neg, b_neg) = candidate(-1.0);
        let err_pos = (hinge_angle(p0, p1, a_pos, b_pos) - h.rest_angle).abs();
        let err_neg = (hinge_angle(p0, p1, a_neg, b_neg) - h.rest_angle).abs();
        if err_pos <= err_neg {
            [p0, p1, a_pos, b_pos]
        } else {
            [p0, p1, a_neg, b_neg]
        }
    }
}

/// Result of one traced step: the new state and the projective-dynamics
/// objective value after each global solve (non-increasing).
pub struct StepTrace {
    pub state: ClothState,
    pub objective: Vec<f64>,
}

/// One implicit-Euler projective-dynamics step.
///
/// `pin_targets` must match the system's pin list; pinned vertices are
/// driven to their targets. Collision projection against `body` keeps
/// every vertex at least the collision margin off the capsules.
pub fn pd_step(
    system: &ClothSystem,
    state: &ClothState,
    pin_targets: &[Vec3],
    body: Option<&BodyProxy>,
) -> Result<ClothState> {
    pd_step_traced(system, state, pin_targets, body).map(|t| t.state)
}

pub fn pd_step_traced(
    system: &ClothSystem,
    state: &ClothState,
    pin_targets: &[Vec3],
    body: Option<&BodyProxy>,
) -> Result<StepTrace> {
    let n = system.vertex_count();
    if state.positions.len() != n {
        return Err(Error::TopologyMismatch {
            what: "cloth state vertices",
            expected: n,
            actual: state.positions.len(),
        });
    }
    if pin_targets.len() != system.pins.len() {
        return Err(Error::TopologyMismatch {
            what: "pin targets",
            expected: system.pins.len(),
            actual: pin_targets.len(),
        });
    }

    let params = &system.params;
    let dt = params.dt;
    let dt2 = dt * dt;
    let g = params.gravity_vec();

    // Velocity-Verlet-style inertia target: q + h v + ½h²g reproduces
    // ballistic trajectories exactly (paired with the ½hg velocity kick).
    let predicted: Vec<Vec3> = state
        .positions
        .iter()
        .zip(&state.velocities)
        .map(|(p, v)| p + dt * v + 0.5 * dt2 * g)
        .collect();

    let mut q = predicted.clone();
    let mut objective = Vec::with_capacity(params.iterations);

    // Projections are recomputed each iteration; the rhs inertia part is
    // constant.
    let mut rhs = [
        DVector::<f64>::zeros(n),
        DVector::<f64>::zeros(n),
        DVector::<f64>::zeros(n),
    ];

    for _iter in 0..params.iterations {
        for axis in 0..3 {
            for v in 0..n {
                rhs[axis][v] = system.masses[v] / dt2 * predicted[v][axis];
            }
        }

        // Local step: project every constraint at the current iterate.
        let mut stretch_targets = Vec::with_capacity(system.stretch.len());
        for e in &system.stretch {
            let d = q[e.i] - q[e.j];
            let norm = d.norm();
            let target = if e.rest == 0.0 || norm < 1e-12 {
                d * 0.0
            } else {
                d * (e.rest / norm)
            };
            stretch_targets.push(target);
            // w/2 |(q_i − q_j) − t|² contributes ±w·t to the rhs.
            for axis in 0..3 {
                rhs[axis][e.i] += e.weight * target[axis];
                rhs[axis][e.j] -= e.weight * target[axis];
            }
        }
        let mut hinge_targets = Vec::with_capacity(system.hinges.len());
        for h in &system.hinges {
            let t = system.project_hinge(h, &q);
            for (k, v) in [h.v0, h.v1, h.wing_a, h.wing_b].into_iter().enumerate() {
                for axis in 0..3 {
                    rhs[axis][v] += h.weight * t[k][axis];
                }
            }
            hinge_targets.push(t);
        }
        for (&p, target) in system.pins.iter().zip(pin_targets) {
            for axis in 0..3 {
                rhs[axis][p] += PIN_WEIGHT * target[axis];
            }
        }

        // Global step: one prefactored solve per coordinate.
        let sol = [
            system.factor.solve(&rhs[0]),
            system.factor.solve(&rhs[1]),
            system.factor.solve(&rhs[2]),
        ];
        for v in 0..n {
            q[v] = Vec3::new(sol[0][v], sol[1][v], sol[2][v]);
        }

        // Objective with the projections of this iteration.
        let mut obj = 0.0;
        for v in 0..n {
            obj += 0.5 * system.masses[v] / dt2 * (q[v] - predicted[v]).norm_squared();
        }
        for (e, t) in system.stretch.iter().zip(&stretch_targets) {
            obj += 0.5 * e.weight * ((q[e.i] - q[e.j]) - t).norm_squared();
        }
        for (h, t) in system.hinges.iter().zip(&hinge_targets) {
            for (k, v) in [h.v0, h.v1, h.wing_a, h.wing_b].into_iter().enumerate() {
                obj += 0.5 * h.weight * (q[v] - t[k]).norm_squared();
            }
        }
        for (&p, target) in system.pins.iter().zip(pin_targets) {
            obj += 0.5 * PIN_WEIGHT * (q[p] - target).norm_squared();
        }
        objective.push(obj);
    }

    // Velocity update with the matching ½hg kick, then damping.
    let damping = (1.0 - params.damping).max(0.0);
    let mut velocities: Vec<Vec3> = state
        .positions
        .iter()
        .zip(&q)
        .map(|(old, new)| ((new - old) / dt + 0.5 * dt * g) * damping)
        .collect();

    // Pins are driven exactly.
    for (&p, target) in system.pins.iter().zip(pin_targets) {
        velocities[p] = (target - state.positions[p]) / dt;
        q[p] = *target;
    }

    // Collision projection: push vertices to the margin surface and
    // remove inward normal velocity; friction damps the tangential part.
    // A push out of one capsule can land inside an overlapping one, so
    // project until clear.
    if let Some(body) = body {
        for v in 0..n {
            let mut contact = false;
            let mut last_normal = Vec3::z();
            for _ in 0..8 {
                if body.signed_distance(&q[v]) >= params.collision_margin {
                    break;
                }
                contact = true;
                let capsule = body.nearest_capsule(&q[v]);
                let axis_point = capsule.closest_axis_point(&q[v]);
                let offset = q[v] - axis_point;
                let dist = offset.norm();
                last_normal = if dist > 1e-12 { offset / dist } else { Vec3::z() };
                q[v] = axis_point + last_normal * (capsule.radius + params.collision_margin);
            }
            if contact {
                let vn = velocities[v].dot(&last_normal);
                let mut vel = velocities[v] - last_normal * vn.min(0.0);
                let tangential = vel - last_normal * vel.dot(&last_normal);
                vel -= tangential * params.friction;
                velocities[v] = vel;
            }
        }
    }

    let new_state = ClothState {
        positions: q,
        velocities,
    };
    if !new_state.is_finite() {
        return Err(Error::NonFinite("projective dynamics step"));
    }
    Ok(StepTrace {
        state: new_state,
        objective,
    })
}

/// How pinned vertices follow the body.
#[derive(Debug, Clone)]
pub enum PinRule {
    /// No pins.
    None,
    /// Pins hold fixed world positions.
    Fixed(Vec<Vec3>),
    /// Pins ride a body joint's frame: target = joint_pos + R_joint·local.
    JointFrame { joint: usize, locals: Vec<Vec3> },
}

impl PinRule {
    pub fn targets(&self, body: Option<&BodyProxy>) -> Result<Vec<Vec3>> {
        match self {
            PinRule::None => Ok(Vec::new()),
            PinRule::Fixed(targets) => Ok(targets.clone()),
            PinRule::JointFrame { joint, locals } => {
                let body = body.ok_or_else(|| {
                    Error::InvalidParam("joint-frame pins require a body".into())
                })?;
                let rot = *body.joint_rotation(*joint);
                let pos = body.joint_position(*joint);
                Ok(locals.iter().map(|l| pos + rot * l).collect())
            }
        }
    }
}

/// Drape/stabilize protocol settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DrapeProtocol {
    pub interpolation_frames: usize,
    pub hold_frames: usize,
    /// Mean kinetic energy over the last 10 hold frames must fall below
    /// this threshold (joules).
    pub kinetic_threshold: f64,
}

impl Default for DrapeProtocol {
    fn default() -> Self {
        Self {
            interpolation_frames: 100,
            hold_frames: 100,
            kinetic_threshold: 1e-5,
        }
    }
}

/// Elementwise pose interpolation (6D blocks re-orthonormalized on decode).
pub fn lerp_pose(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + (y - x) * t).collect()
}

/// Drives the body from the zero pose to `pose_first` over the
/// interpolation frames, then holds until the cloth settles.
///
/// Errors if the initial cloth placement intersects the zero-pose body or
/// if the mean kinetic energy over the last 10 hold frames stays above the
/// protocol threshold.
pub fn drape_and_stabilize(
    system: &ClothSystem,
    initial: &ClothState,
    shape: Option<&[f64]>,
    pose_zero: Option<&[f64]>,
    pose_first: Option<&[f64]>,
    pin_rule: &PinRule,
    protocol: &DrapeProtocol,
) -> Result<ClothState> {
    let make_body = |pose: &[f64]| -> Result<BodyProxy> {
        BodyProxy::from_pose(pose, shape.unwrap_or(&[0.0; 8]))
    };
    let body_zero = match pose_zero {
        Some(p) => Some(make_body(p)?),
        None => None,
    };

    if let Some(body) = &body_zero {
        let inside = initial
            .positions
            .iter()
            .filter(|p| body.signed_distance(p) < 0.0)
            .count();
        if inside > 0 {
            return Err(Error::InitialIntersection { count: inside });
        }
    }

    let mut state = initial.clone();
    for k in 0..protocol.interpolation_frames {
        let body = match (pose_zero, pose_first) {
            (Some(z), Some(f)) => {
                let t = (k + 1) as f64 / protocol.interpolation_frames as f64;
                Some(make_body(&lerp_pose(z, f, t))?)
            }
            _ => body_zero.clone(),
        };
        let targets = pin_rule.targets(body.as_ref())?;
        state = pd_step(system, &state, &targets, body.as_ref())?;
    }

    let body_hold = match pose_first {
        Some(p) => Some(make_body(p)?),
        None => body_zero,
    };
    let targets = pin_rule.targets(body_hold.as_ref())?;
    let mut tail_energy = std::collections::VecDeque::with_capacity(10);
    for _ in 0..protocol.hold_frames {
        state = pd_step(system, &state, &targets, body_hold.as_ref())?;
        if tail_energy.len() == 10 {
            tail_energy.pop_front();
        }
        tail_energy.push_back(state.kinetic_energy(&system.masses));
    }
    let mean_energy = tail_energy.iter().sum::<f64>() / tail_energy.len().max(1) as f64;
    if mean_energy > protocol.kinetic_threshold {
        return Err(Error::StabilizationFailed {
            energy: mean_energy,
            threshold: protocol.kinetic_threshold,
        });
    }
    Ok(state)
}

/// Skirt template: an open tube with a duplicated seam column, returned
/// with its sewing pairs and top-ring vertex indices.
///
/// uv unwraps the tube onto [0,1]²: u follows the angle (seam duplicates
/// get u = 0 and u = 1), v follows the height from hem (0) to waist (1).
pub fn skirt_mesh(
    segments: usize,
    rows: usize,
    top_radius: f64,
    bottom_radius: f64,
    length: f64,
    top_center: Vec3,
) -> (TriMesh, Vec<(usize, usize)>, Vec<usize>) {
    assert!(segments >= 3 && rows >= 1);
    let cols = segments + 1; // seam column duplicated
    let mut vertices = Vec::with_capacity((rows + 1) * cols);
    let mut uv = Vec::with_capacity((rows + 1) * cols);
    for row in 0..=rows {
        let t = row as f64 / rows as f64; // 0 at waist, 1 at hem
        let radius = top_radius + (bottom_radius - top_radius) * t;
        let z = top_center.z - t * length;
        for col in 0..cols {
            let angle = 2.0 * std::f64::consts::PI * (col % segments) as f64 / segments as f64;
            vertices.push(Vec3::new(
                top_center.x + radius * angle.cos(),
                top_center.y + radius * angle.sin(),
                z,
            ));
            uv.push([col as f64 / segments as f64, 1.0 - t]);
        }
    }
    let mut faces = Vec::with_capacity(rows * segments * 2);
    for row in 0..rows {
        for col in 0..segments {
            let i = row * cols + col;
            faces.push([i, i + cols, i + 1]);
            faces.push([i + 1, i + cols, i + cols + 1]);
        }
    }
    let sewing: Vec<(usize, usize)> = (0..=rows)
        .map(|row| (row * cols, row * cols + segments))
        .collect();
    let top_ring: Vec<usize> = (0..cols).collect();
    let mesh = TriMesh::new(vertices, faces, Some(uv)).expect("skirt construction is valid");
    (mesh, sewing, top_ring)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{grid_mesh, GridUv};
    use approx::assert_relative_eq;

    fn no_gravity() -> SimParams {
        SimParams {
            gravity: [0.0; 3],
            damping: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn lame_conversion_values() {
        let (lambda, mu) = lame_from_stretch(100.0);
        assert_relative_eq!(mu, 0.15 / 2.62, max_relative = 1e-9);
        assert_relative_eq!(lambda, 0.15 * 0.31 / (1.31 * 0.38), max_relative = 1e-9);

        // λ/μ is independent of s.
        let (l1, m1) = lame_from_stretch(40.0);
        let (l2, m2) = lame_from_stretch(200.0);
        assert_relative_eq!(l1 / m1, l2 / m2, max_relative = 1e-12);

        // Both vanish with s.
        let (l0, m0) = lame_from_stretch(1e-9);
        assert!(l0 < 1e-11 && m0 < 1e-11);
    }

    #[test]
    fn material_feature_scaling() {
        let m = MaterialParams {
            stretch: 40.0,
            density: 0.7,
            bending: 1e-4,
        };
        let f = m.normalized_features();
        assert_relative_eq!(f[0], 0.0);
        assert_relative_eq!(f[1], 1.0);
        assert_relative_eq!(f[2], 1.0);
        assert!(m.is_in_distribution());
    }

    #[test]
    fn rest_configuration_is_equilibrium() {
        let cloth = grid_mesh(6, 4, 0.6, 0.4, GridUv::Span);
        let material = MaterialParams {
            stretch: 100.0,
            density: 0.2,
            bending: 1e-5,
        };
        let system = ClothSystem::build(&cloth, &material, &no_gravity(), &[], &[]).unwrap();
        let state = ClothState::at_rest(&cloth);
        let next = pd_step(&system, &state, &[], None).unwrap();
        for (a, b) in next.positions.iter().zip(&state.positions) {
            assert!((a - b).norm() < 1e-9);
        }
        assert!(next.kinetic_energy(&system.masses) < 1e-18);
    }

    #[test]
    fn free_fall_matches_ballistics() {
        let cloth = grid_mesh(5, 5, 0.5, 0.5, GridUv::Span);
        let material = MaterialParams {
            stretch: 100.0,
            density: 0.1,
            bending: 1e-8,
        };
        let params = SimParams {
            damping: 0.0,
            ..Default::default()
        };
        let system = ClothSystem::build(&cloth, &material, &params, &[], &[]).unwrap();
        let mut state = ClothState::at_rest(&cloth);
        let masses = &system.masses;
        let total: f64 = masses.iter().sum();
        let com0: Vec3 = state
            .positions
            .iter()
            .zip(masses)
            .map(|(p, m)| p * *m)
            .sum::<Vec3>()
            / total;

        for _ in 0..50 {
            state = pd_step(&system, &state, &[], None).unwrap();
        }
        let com: Vec3 = state
            .positions
            .iter()
            .zip(masses)
            .map(|(p, m)| p * *m)
            .sum::<Vec3>()
            / total;
        let expected_z = com0.z - 0.5 * 9.81;
        assert!(
            (com.z - expected_z).abs() < 1e-3,
            "com.z {} vs {}",
            com.z,
            expected_z
        );
        assert!((com.x - com0.x).abs() < 1e-6 && (com.y - com0.y).abs() < 1e-6);
    }

    #[test]
    fn pd_objective_non_increasing_within_step() {
        let cloth = grid_mesh(6, 6, 0.5, 0.5, GridUv::Span);
        let material = MaterialParams {
            stretch: 150.0,
            density: 0.3,
            bending: 5e-5,
        };
        let params = SimParams {
            iterations: 12,
            ..Default::default()
        };
        // Pin two corners so the drape develops internal stress.
        let pins = vec![0, 6];
        let system = ClothSystem::build(&cloth, &material, &params, &pins, &[]).unwrap();
        let targets = vec![cloth.vertices()[0], cloth.vertices()[6]];
        let mut state = ClothState::at_rest(&cloth);
        for _ in 0..5 {
            let trace = pd_step_traced(&system, &state, &targets, None).unwrap();
            for w in trace.objective.windows(2) {
                assert!(
                    w[1] <= w[0] * (1.0 + 1e-10) + 1e-12,
                    "objective increased: {w:?}"
                );
            }
            state = trace.state;
        }
    }

    #[test]
    fn stiffer_cloth_stretches_less() {
        // Hanging cloth pinned along the top edge: mean edge elongation at
        // s = 200 must be below that at s = 40.
        let elongation = |stretch: f64| -> f64 {
            let nx = 6;
            let cloth = grid_mesh(nx, 8, 0.3, 0.5, GridUv::Span);
            let material = MaterialParams {
                stretch,
                density: 0.3,
                bending: 1e-6,
            };
            let params = SimParams {
                damping: 0.05,
                ..Default::default()
            };
            // Top row: the grid generator puts the last row at the top (max y);
            // rotate the cloth into the xz-plane so gravity stretches it.
            let rotated = cloth
                .with_vertices(
                    cloth
                        .vertices()
                        .iter()
                        .map(|v| Vec3::new(v.x, 0.0, v.y))
                        .collect(),
                )
                .unwrap();
            let top: Vec<usize> = (0..=nx)
                .map(|j| rotated.vertex_count() - 1 - j)
                .collect();
            let system = ClothSystem::build(&rotated, &material, &params, &top, &[]).unwrap();
            let targets: Vec<Vec3> = top.iter().map(|&i| rotated.vertices()[i]).collect();
            let mut state = ClothState::at_rest(&rotated);
            for _ in 0..250 {
                state = pd_step(&system, &state, &targets, None).unwrap();
            }
            let mut total = 0.0;
            let mut count = 0;
            for &(i, j) in rotated.graph_edges().iter() {
                let rest = (rotated.vertices()[i] - rotated.vertices()[j]).norm();
                let now = (state.positions[i] - state.positions[j]).norm();
                total += (now - rest).max(0.0) / rest;
                count += 1;
            }
            total / count as f64
        };
        let soft = elongation(40.0);
        let stiff = elongation(200.0);
        assert!(stiff < soft, "stiff {stiff} vs soft {soft}");
    }

    #[test]
    fn collision_projection_keeps_vertices_outside() {
        let cloth = grid_mesh(8, 8, 0.5, 0.5, GridUv::Span);
        // Drop the cloth onto a horizontal capsule below it.
        let lifted = cloth
            .with_vertices(cloth.vertices().iter().map(|v| v + Vec3::new(0.0, 0.0, 0.3)).collect())
            .unwrap();
        let material = MaterialParams {
            stretch: 120.0,
            density: 0.2,
            bending: 1e-6,
        };
        let params = SimParams::default();
        let system = ClothSystem::build(&lifted, &material, &params, &[], &[]).unwrap();

        let mut pose = body::identity_pose_vector();
        body::set_pose_translation(&mut pose, &Vec3::new(0.0, 0.0, -1.5));
        let body = BodyProxy::from_pose(&pose, &[0.0; 8]).unwrap();

        let mut state = ClothState::at_rest(&lifted);
        for _ in 0..100 {
            state = pd_step(&system, &state, &[], Some(&body)).unwrap();
            for p in &state.positions {
                assert!(
                    body.signed_distance(p) > -1e-9,
                    "vertex inside body: sd {}",
                    body.signed_distance(p)
                );
            }
        }
    }

    #[test]
    fn drape_stabilizes_hanging_cloth() {
        let nx = 5;
        let cloth = grid_mesh(nx, 6, 0.3, 0.4, GridUv::Span);
        let rotated = cloth
            .with_vertices(
                cloth
                    .vertices()
                    .iter()
                    .map(|v| Vec3::new(v.x, 0.0, v.y))
                    .collect(),
            )
            .unwrap();
        let top: Vec<usize> = (0..=nx).map(|j| rotated.vertex_count() - 1 - j).collect();
        let material = MaterialParams {
            stretch: 100.0,
            density: 0.15,
            bending: 1e-6,
        };
        let params = SimParams {
            damping: 0.1,
            ..Default::default()
        };
        let system = ClothSystem::build(&rotated, &material, &params, &top, &[]).unwrap();
        let targets: Vec<Vec3> = top.iter().map(|&i| rotated.vertices()[i]).collect();
        let state = ClothState::at_rest(&rotated);
        let settled = drape_and_stabilize(
            &system,
            &state,
            None,
            None,
            None,
            &PinRule::Fixed(targets),
            &DrapeProtocol {
                interpolation_frames: 50,
                hold_frames: 250,
                kinetic_threshold: 1e-6,
            },
        )
        .unwrap();
        assert!(settled.kinetic_energy(&system.masses) < 1e-6);
    }

    #[test]
    fn initial_intersection_rejected() {
        let cloth = grid_mesh(4, 4, 0.4, 0.4, GridUv::Span);
        // Place the cloth through the body's torso.
        let placed = cloth
            .with_vertices(cloth.vertices().iter().map(|v| v + Vec3::new(0.0, 0.0, 1.1)).collect())
            .unwrap();
        let material = MaterialParams {
            stretch: 100.0,
            density: 0.2,
            bending: 1e-6,
        };
        let system = ClothSystem::build(&placed, &material, &SimParams::default(), &[], &[]).unwrap();
        let pose = body::identity_pose_vector();
        let err = drape_and_stabilize(
            &system,
            &ClothState::at_rest(&placed),
            Some(&[0.0; 8]),
            Some(&pose),
            Some(&pose),
            &PinRule::None,
            &DrapeProtocol::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InitialIntersection { .. }));
    }

    #[test]
    fn skirt_mesh_seam_and_uv() {
        let (mesh, sewing, top_ring) = skirt_mesh(12, 6, 0.2, 0.3, 0.5, Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(mesh.face_count(), 12 * 6 * 2);
        for &(a, b) in &sewing {
            assert!((mesh.vertices()[a] - mesh.vertices()[b]).norm() < 1e-12);
            let uv = mesh.uv().unwrap();
            assert_relative_eq!(uv[a][0], 0.0);
            assert_relative_eq!(uv[b][0], 1.0);
        }
        assert_eq!(top_ring.len(), 13);
        for t in mesh.uv().unwrap() {
            assert!((0.0..=1.0).contains(&t[0]) && (0.0..=1.0).contains(&t[1]));
        }
    }
}
