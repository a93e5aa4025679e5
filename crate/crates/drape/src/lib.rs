//! Dynamic garment generation over a fixed template mesh.
//!
//! Garment deformations are stored as uv-space displacement maps over a
//! template triangle mesh, generated by a conditional latent diffusion
//! sampler with mesh-level guidance, trained on data from a built-in
//! projective-dynamics cloth simulator, and fitted to 3D point clouds by
//! optimizing the initial latent.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`mesh`] — triangle meshes, point clouds and geometric queries
//! - [`uvcodec`] — mesh deformation ⇄ displacement map codec
//! - [`diffusion`] — noise schedules and reverse samplers (DDIM, DPM++ 2M)
//! - [`denoiser`] — the conditional noise predictor and the latent codec
//! - [`simlite`] — projective-dynamics cloth simulator and dataset generator
//! - [`guidance`] — temporal/penetration guidance and collision removal
//! - [`fitting`] — latent optimization against observed point clouds
//! - [`metrics`] — Chamfer distance, penetration %, curvature error
//!
//! All randomness is seeded explicitly; every pipeline stage is
//! deterministic given its configuration.

pub mod cli;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod fitting;
pub mod guidance;
pub mod mesh;
pub mod metrics;
pub mod simlite;
pub mod spatial;
pub mod uvcodec;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("face index {index} out of range for {vertex_count} vertices")]
    FaceIndexOutOfRange { index: usize, vertex_count: usize },
    #[error("degenerate face {face}: repeated vertex index")]
    DegenerateFace { face: usize },
    #[error("mesh has no uv coordinates but an atlas-ready mesh is required")]
    MissingUv,
    #[error("non-manifold edge ({a}, {b}): {count} incident faces")]
    NonManifoldEdge { a: usize, b: usize, count: usize },
    #[error(
        "unreliable insideness query: winding number {winding:.3} is far from both 0 and 1 \
         (open or inverted body mesh?)"
    )]
    UnreliableWinding { winding: f64 },
    #[error("topology mismatch: {expected} vs {actual} {what}")]
    TopologyMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("overlapping uv triangles: texel ({row}, {col}) claimed by faces {a} and {b}")]
    UvOverlap {
        row: usize,
        col: usize,
        a: usize,
        b: usize,
    },
    #[error("vertex {vertex} has no covered texel in its bilinear footprint")]
    UncoveredFootprint { vertex: usize },
    #[error("resolution mismatch: {expected:?} vs {actual:?}")]
    ResolutionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("bad file format: {0}")]
    Format(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite values encountered in {0}")]
    NonFinite(&'static str),
    #[error("cloth failed to stabilize: kinetic energy {energy:.3e} J above {threshold:.3e} J")]
    StabilizationFailed { energy: f64, threshold: f64 },
    #[error("initial cloth placement intersects the body ({count} vertices inside)")]
    InitialIntersection { count: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("configuration error: {0}")]
    Config(String),
}

/// Coarse failure class, used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            Config(_) | InvalidParam(_) => ErrorClass::Config,
            NonFinite(_) | StabilizationFailed { .. } => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
