//! Procedural joint-angle trajectories driving the capsule body.
//!
//! All trajectories are sums of sinusoids, so they are C¹ (in fact smooth)
//! with bounded angular velocity, and deterministic given kind and seed.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::body::{self, identity_pose_vector, set_pose_rotation, set_pose_translation};
use crate::mesh::Vec3;

/// Upper bound on per-joint angular velocity by construction (rad/s).
pub const MAX_JOINT_SPEED: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionKind {
    /// Leg/arm swing with forward travel and root bob.
    WalkLike,
    /// Stationary arm/torso swing, exactly periodic with period 1 s.
    Swing,
    /// Root yaw oscillation with counter-swinging limbs.
    Turn,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotionSpec {
    pub kind: MotionKind,
    /// Seconds.
    pub duration: f64,
    /// Mixed into the generator seed so motion variants differ.
    pub seed: u64,
}

/// The swing motion repeats exactly with this period (seconds).
pub const SWING_PERIOD: f64 = 1.0;

fn rot_x(angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::x()), angle).into_inner()
}

fn rot_y(angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::y()), angle).into_inner()
}

fn rot_z(angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::z()), angle).into_inner()
}

struct Gains {
    hip: f64,
    knee: f64,
    arm: f64,
    twist: f64,
    yaw: f64,
    bob: f64,
    speed: f64,
    phase: f64,
    frequency: f64,
}

impl Gains {
    fn jittered(kind: MotionKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FF_EE00);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let mut j = move |base: f64| base * rng.random_range(0.9..1.1);
        match kind {
            MotionKind::WalkLike => Gains {
                hip: j(0.55),
                knee: j(0.5),
                arm: j(0.4),
                twist: j(0.08),
                yaw: 0.0,
                bob: j(0.03),
                speed: j(0.8),
                phase,
                frequency: j(1.0),
            },
            MotionKind::Swing => Gains {
                hip: j(0.12),
                knee: 0.0,
                arm: j(0.8),
                twist: j(0.25),
                yaw: 0.0,
                bob: 0.0,
                speed: 0.0,
                // Exact periodicity: fixed frequency, jitter only amplitudes.
                phase,
                frequency: 1.0 / SWING_PERIOD,
            },
            MotionKind::Turn => Gains {
                hip: j(0.15),
                knee: j(0.1),
                arm: j(0.25),
                twist: j(0.1),
                yaw: j(0.9),
                bob: j(0.02),
                speed: 0.0,
                phase,
                frequency: j(0.5),
            },
        }
    }
}

/// Generates `round(duration·fps)` poses at the given frame rate.
pub fn procedural_motion(kind: MotionKind, duration: f64, fps: f64, seed: u64) -> Vec<Vec<f64>> {
    assert!(duration > 0.0 && fps > 0.0);
    let g = Gains::jittered(kind, seed);
    let frames = (duration * fps).round() as usize;
    (0..frames)
        .map(|i| pose_at(kind, &g, i as f64 / fps))
        .collect()
}

fn pose_at(kind: MotionKind, g: &Gains, t: f64) -> Vec<f64> {
    use std::f64::consts::TAU;
    let mut pose = identity_pose_vector();
    let phi = TAU * g.frequency * t + g.phase;

    // Joint indices mirror the skeleton in `body`.
    const SPINE_HI: usize = 2;
    const L_HIP: usize = 6;
    const L_KNEE: usize = 7;
    const R_HIP: usize = 9;
    const R_KNEE: usize = 10;
    const L_SHOULDER: usize = 12;
    const R_SHOULDER: usize = 15;

    let hip = g.hip * phi.sin();
    set_pose_rotation(&mut pose, L_HIP, &rot_x(hip));
    set_pose_rotation(&mut pose, R_HIP, &rot_x(-hip));
    // Knees bend when the leg swings back, staying smooth.
    let knee_l = g.knee * 0.5 * (1.0 - (phi - 0.6).cos());
    let knee_r = g.knee * 0.5 * (1.0 - (phi + std::f64::consts::PI - 0.6).cos());
    set_pose_rotation(&mut pose, L_KNEE, &rot_x(-knee_l * 0.5));
    set_pose_rotation(&mut pose, R_KNEE, &rot_x(-knee_r * 0.5));

    let arm = g.arm * phi.sin();
    set_pose_rotation(&mut pose, L_SHOULDER, &rot_x(-arm));
    set_pose_rotation(&mut pose, R_SHOULDER, &rot_x(arm));

    set_pose_rotation(&mut pose, SPINE_HI, &rot_z(g.twist * phi.sin()));

    match kind {
        MotionKind::WalkLike => {
            let bob = g.bob * 0.5 * (1.0 - (2.0 * phi).cos());
            set_pose_translation(&mut pose, &Vec3::new(0.0, g.speed * t, bob));
            set_pose_rotation(&mut pose, body::PELVIS, &rot_y(0.05 * phi.sin()));
        }
        MotionKind::Swing => {
            set_pose_translation(&mut pose, &Vec3::zeros());
        }
        MotionKind::Turn => {
            set_pose_rotation(&mut pose, body::PELVIS, &rot_z(g.yaw * phi.sin()));
            set_pose_translation(&mut pose, &Vec3::new(0.0, 0.0, g.bob * 0.5 * (1.0 - (2.0 * phi).cos())));
        }
    }
    pose
}

/// Largest per-joint geodesic rotation step between consecutive poses,
/// divided by dt (rad/s).
pub fn max_angular_velocity(poses: &[Vec<f64>], fps: f64) -> f64 {
    let mut max_speed: f64 = 0.0;
    for w in poses.windows(2) {
        for j in 0..super::JOINT_COUNT {
            let a = body::pose_rotation(&w[0], j).expect("valid pose");
            let b = body::pose_rotation(&w[1], j).expect("valid pose");
            let rel = a.transpose() * b;
            let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
            max_speed = max_speed.max(cos.acos() * fps);
        }
    }
    max_speed
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_matches_duration() {
        let poses = procedural_motion(MotionKind::Swing, 2.0, 50.0, 1);
        assert_eq!(poses.len(), 100);
    }

    #[test]
    fn angular_velocity_bounded() {
        for (kind, seed) in [
            (MotionKind::WalkLike, 1u64),
            (MotionKind::Swing, 2),
            (MotionKind::Turn, 3),
            (MotionKind::WalkLike, 99),
        ] {
            let poses = procedural_motion(kind, 2.0, 50.0, seed);
            let speed = max_angular_velocity(&poses, 50.0);
            assert!(speed <= MAX_JOINT_SPEED, "{kind:?}: {speed} rad/s");
        }
    }

    #[test]
    fn swing_is_periodic() {
        let fps = 50.0;
        let poses = procedural_motion(MotionKind::Swing, 3.0, fps, 7);
        let period_frames = (SWING_PERIOD * fps) as usize;
        for i in 0..poses.len() - period_frames {
            for (a, b) in poses[i].iter().zip(&poses[i + period_frames]) {
                assert!((a - b).abs() < 1e-6, "pose not periodic at frame {i}");
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = procedural_motion(MotionKind::Turn, 1.0, 50.0, 42);
        let b = procedural_motion(MotionKind::Turn, 1.0, 50.0, 42);
        assert_eq!(a, b);
        let c = procedural_motion(MotionKind::Turn, 1.0, 50.0, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn poses_decode_to_valid_bodies() {
        let poses = procedural_motion(MotionKind::WalkLike, 1.0, 50.0, 5);
        for p in &poses {
            let body = body::BodyProxy::from_pose(p, &[0.0; 8]).unwrap();
            assert!(body.capsules().iter().all(|c| c.radius > 0.0));
        }
    }
}
