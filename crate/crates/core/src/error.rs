use std::path::PathBuf;

use thiserror::Error;

use crate::group::GroupElement;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("group order mismatch: D_{left} vs D_{right}")]
    OrderMismatch { left: u32, right: u32 },

    #[error("invalid group element token `{0}`")]
    BadToken(String),

    #[error("structure error: {0}")]
    Structure(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(
        "policy evaluation did not converge after {iterations} iterations (residual {residual:e})"
    )]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("symmetry violation under {g}: state {s}, joint action {a}, next state {s_next}")]
    SymmetryViolation {
        g: GroupElement,
        s: usize,
        a: usize,
        s_next: usize,
    },

    #[error("policy symmetry violation under {g}: agent {agent}, state {s}, action {a}")]
    PolicySymmetryViolation {
        g: GroupElement,
        agent: usize,
        s: usize,
        a: usize,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("the airl discriminator needs the generator log-density of the action")]
    MissingLogDensity,

    #[error("empty demonstration store")]
    EmptyStore,

    #[error("spec fingerprint mismatch: expected {expected:016x}, found {found:016x}")]
    FingerprintMismatch { expected: u64, found: u64 },

    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("bad file header in {path}: {reason}")]
    Header { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metrics file: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
