//! Differentiable simulation and training for neural quantum-control agents.
//!
//! The crate simulates driven quantum systems through a fixed-step Heun
//! integration of the Schrödinger equation, rewritten over a real isomorphism,
//! and trains a feed-forward control agent by reverse-mode differentiation
//! through the entire unrolled trajectory. A REINFORCE policy-gradient
//! baseline is included for comparison on the same tasks.
//!
//! Module map:
//! - [`realspace`]: states and Hermitian operators as split real/imaginary
//!   pairs, fidelity, and the Schrödinger generator.
//! - [`autodiff`]: the reverse-mode tape used by everything trainable.
//! - [`integrator`]: Heun stepping with piecewise-constant controls.
//! - [`agent`]: the state-aware / action-aware / combination-aware network.
//! - [`losses`]: elementary loss terms and their weighted combination.
//! - [`systems`]: the qubit, spin-chain and parametric-oscillator tasks.
//! - [`trainer`]: rollouts, Adam, the epoch loop, and evaluation.
//! - [`reinforce`]: the Gaussian policy-gradient baseline.

pub mod agent;
pub mod autodiff;
mod eigen;
pub mod integrator;
mod kernels;
pub mod losses;
pub mod realspace;
pub mod systems;
pub mod trainer;

pub use agent::{AgentArch, AgentParams};
pub use integrator::StepSpec;
pub use losses::LossWeights;
pub use realspace::{ControlSystem, ControlVector, RealHamiltonian, RealState};
pub use systems::{TaskKind, TaskSpec};
pub use trainer::{TrainConfig, Trajectory};

use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("operator is not Hermitian: {0}")]
    NotHermitian(String),
    #[error("non-finite value in {context} (epoch {epoch}, trajectory {trajectory}, step {step})")]
    NonFinite {
        context: &'static str,
        epoch: usize,
        trajectory: usize,
        step: usize,
    },
    #[error("{0} aborted trajectories out of {1} in one epoch exceeds the 1% failure budget")]
    FailureBudget(usize, usize),
    #[error("trajectory norm drift {drift:.3e} exceeds the 1e-4 budget")]
    NormDrift { drift: f64 },
    #[error("autodiff usage error: {0}")]
    Autodiff(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
