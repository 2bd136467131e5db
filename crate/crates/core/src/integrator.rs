//! Fixed-step Heun integration of the realified Schrödinger equation with
//! piecewise-constant controls.
//!
//! `dt` is the substep size: one control interval spans `n_sub * dt` and the
//! total horizon is `n_steps * n_sub * dt`. The assembled operator is computed
//! once per interval and reused for all substeps, since the control amplitudes
//! are constant over the interval. States are never renormalized during a
//! trajectory; norm drift is monitored by the trainer instead, so integrator
//! misuse cannot hide behind silent corrections.

use std::sync::Arc;

use crate::autodiff::{NodeId, Tape, TapeSystem};
use crate::realspace::{assemble, ControlSystem, ControlVector, RealState};
use crate::{Error, Result};

/// Discretization of one control problem: `n_steps` control intervals of
/// `n_sub` substeps each, with substep size `dt` (units of inverse energy).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSpec {
    pub n_steps: usize,
    pub n_sub: usize,
    pub dt: f64,
}

impl StepSpec {
    pub fn new(n_steps: usize, n_sub: usize, dt: f64) -> Result<Self> {
        if n_steps == 0 || n_sub == 0 {
            return Err(Error::Config("n_steps and n_sub must be at least 1".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {dt}")));
        }
        Ok(Self { n_steps, n_sub, dt })
    }

    /// Duration of one control interval.
    pub fn interval_len(&self) -> f64 {
        self.n_sub as f64 * self.dt
    }

    /// Total horizon `T = n_steps * n_sub * dt`.
    pub fn total_time(&self) -> f64 {
        self.n_steps as f64 * self.interval_len()
    }
}

/// One explicit Heun step `s + dt/2 (k1 + k2)` with `k1 = f(s)` and
/// `k2 = f(s + dt k1)`, for an arbitrary vector field `f`.
pub fn heun_step(deriv: impl Fn(&[f64]) -> Vec<f64>, s: &[f64], dt: f64) -> Vec<f64> {
    let k1 = deriv(s);
    let mut stage = vec![0.0; s.len()];
    for i in 0..s.len() {
        stage[i] = k1[i].mul_add(dt, s[i]);
    }
    let k2 = deriv(&stage);
    let half_dt = 0.5 * dt;
    let mut out = vec![0.0; s.len()];
    for i in 0..s.len() {
        out[i] = (k1[i] + k2[i]).mul_add(half_dt, s[i]);
    }
    out
}

/// Evolves a stacked `[re; im]` state in place through `n_sub` Heun substeps
/// under a fixed assembled operator. Scratch buffers are caller-provided so
/// the hot path allocates nothing. Arithmetic matches the taped path exactly.
pub(crate) fn heun_evolve_stacked(
    h: &crate::realspace::RealHamiltonian,
    x: &mut [f64],
    n_sub: usize,
    dt: f64,
    k1: &mut [f64],
    stage: &mut [f64],
    k2: &mut [f64],
) {
    let half_dt = 0.5 * dt;
    for _ in 0..n_sub {
        h.apply_stacked(x, k1);
        for i in 0..x.len() {
            stage[i] = k1[i].mul_add(dt, x[i]);
        }
        h.apply_stacked(stage, k2);
        for i in 0..x.len() {
            x[i] = (k1[i] + k2[i]).mul_add(half_dt, x[i]);
        }
    }
}

/// Evolves a state through one control interval with amplitudes held fixed.
///
/// Returns the un-renormalized evolved state; aborts with a diagnostic if a
/// non-finite value appears.
pub fn evolve_interval(
    system: &ControlSystem,
    s: &RealState,
    u: &ControlVector,
    n_sub: usize,
    dt: f64,
) -> Result<RealState> {
    let h = assemble(system, u);
    let mut x = s.stacked();
    let n = x.len();
    let (mut k1, mut stage, mut k2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    heun_evolve_stacked(&h, &mut x, n_sub, dt, &mut k1, &mut stage, &mut k2);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "evolve_interval",
            epoch: 0,
            trajectory: 0,
            step: 0,
        });
    }
    Ok(RealState::from_stacked_unnormalized(&x))
}

/// Taped counterpart of [`evolve_interval`] for a chunk of trajectories:
/// assembles `H(u_j)` once per column, then records `n_sub` Heun substeps.
/// Differentiable with respect to the amplitudes, the incoming state, and —
/// through the agent — the network parameters.
pub fn evolve_interval_tape(
    tape: &mut Tape,
    sys: &Arc<TapeSystem>,
    state: NodeId,
    u: NodeId,
    n_sub: usize,
    dt: f64,
) -> NodeId {
    let gen0 = tape.assemble_columns(sys, u);
    let half_dt = 0.5 * dt;
    let mut x = state;
    for _ in 0..n_sub {
        let k1 = tape.apply_generator(sys, gen0, u, x);
        let stage = tape.add_scaled(x, k1, dt);
        let k2 = tape.apply_generator(sys, gen0, u, stage);
        x = tape.heun_combine(x, k1, k2, half_dt);
    }
    x
}
