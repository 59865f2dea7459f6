//! Elliptic data assimilation by unique continuation.
//!
//! Reconstructs a field `u` on a rectangle `Ω` from scattered noisy point
//! samples of `u` taken in an interior observation window `ω`, together with
//! the PDE constraint `-Δu = f` and no boundary data. Two discrete Gaussian
//! posteriors are provided:
//!
//! * a stabilized Lagrange finite element method whose prior penalizes
//!   gradient jumps, the element-wise PDE residual, and a dual-norm residual
//!   realized through a mixed saddle-point system ([`solve`]);
//! * a conforming spectral method on a harmonic polynomial basis with a
//!   diagonal prior ([`spectral`]).
//!
//! The [`bench`] module drives sample-size/mesh-size coupling sweeps with
//! seeded Monte-Carlo replicates and writes machine-readable rate reports.

pub mod bench;
pub mod forms;
pub mod linalg;
pub mod mesh;
pub mod observe;
pub mod solve;
pub mod space;
pub mod spectral;
pub mod truth;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("mesh error: {0}")]
    Mesh(String),
    #[error("space error: {0}")]
    Space(String),
    #[error("point ({0}, {1}) lies outside the domain")]
    PointOutsideDomain(f64, f64),
    #[error("assembly error: {0}")]
    Assembly(String),
    #[error("observation error: {0}")]
    Observation(String),
    #[error("solver error: {0}")]
    Solver(String),
    #[error("spectral error: {0}")]
    Spectral(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown ground truth id: {0}")]
    UnknownTruth(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
