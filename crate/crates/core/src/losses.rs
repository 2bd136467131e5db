//! Elementary loss terms and their weighted combination.
//!
//! Four elementary losses are combined linearly: the discounted cumulative
//! infidelity, the final-step infidelity, and the plain/squared control
//! amplitude penalties. `|u(t_i)|` is read as the Euclidean norm of the
//! per-step amplitude vector, so the squared variant is the usual intensity
//! sum.

use crate::autodiff::{NodeId, Tape};
use crate::realspace::ControlVector;
use crate::{Error, Result};

/// Upper slack on fidelities entering the losses. Heun's one-step norm
/// amplification pushes fidelities slightly above one on long trajectories;
/// the slack is sized to twice the allowed per-trajectory norm drift (1e-4)
/// with margin, so genuine integrator failures still trip the guard.
const FIDELITY_UPPER_SLACK: f64 = 2.5e-4;
const FIDELITY_LOWER_SLACK: f64 = 1e-9;

/// Coefficients of the composite loss `L = Σ_μ c_μ L_μ` plus the discount.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub c_f: f64,
    pub c_fn: f64,
    pub c_amp: f64,
    pub c_amp_sq: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let cs = [self.c_f, self.c_fn, self.c_amp, self.c_amp_sq];
        if cs.iter().any(|c| *c < 0.0) {
            return Err(Error::Config("loss coefficients must be non-negative".into()));
        }
        if cs.iter().all(|c| *c == 0.0) {
            return Err(Error::Config("at least one loss coefficient must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "discount gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

fn check_fidelity(f: f64) -> Result<()> {
    if !(-FIDELITY_LOWER_SLACK..=1.0 + FIDELITY_UPPER_SLACK).contains(&f) {
        return Err(Error::Config(format!(
            "fidelity {f} outside [{:-e}, 1 + {:e}]: integrator drift",
            FIDELITY_LOWER_SLACK, FIDELITY_UPPER_SLACK
        )));
    }
    Ok(())
}

/// Discounted cumulative infidelity `Σ_{i=1}^{N} γ^i (1 - F_i)`, where `F_i`
/// is the fidelity after the i-th control interval.
pub fn loss_f(fidelities: &[f64], gamma: f64) -> Result<f64> {
    let mut acc = 0.0;
    let mut g = 1.0;
    for &f in fidelities {
        check_fidelity(f)?;
        g *= gamma;
        acc += g * (1.0 - f);
    }
    Ok(acc)
}

/// Final-step infidelity `1 - F_N`.
pub fn loss_fn_final(final_fidelity: f64) -> Result<f64> {
    check_fidelity(final_fidelity)?;
    Ok(1.0 - final_fidelity)
}

/// Amplitude penalty: `Σ_i ‖u(t_i)‖₂` plain, `Σ_i ‖u(t_i)‖₂²` squared.
pub fn loss_amp(actions: &[ControlVector], squared: bool) -> f64 {
    actions
        .iter()
        .map(|u| {
            let n2: f64 = u.as_slice().iter().map(|v| v * v).sum();
            if squared {
                n2
            } else {
                n2.sqrt()
            }
        })
        .sum()
}

/// The four elementary loss values of one trajectory (or a batch mean).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub loss_f: f64,
    pub loss_fn: f64,
    pub loss_amp: f64,
    pub loss_amp_sq: f64,
}

/// `c_F L_F + c_FN L_FN + c_amp L_amp + c'_amp L'_amp`.
pub fn total_loss(weights: &LossWeights, parts: &LossParts) -> f64 {
    weights.c_f * parts.loss_f
        + weights.c_fn * parts.loss_fn
        + weights.c_amp * parts.loss_amp
        + weights.c_amp_sq * parts.loss_amp_sq
}

/// Taped per-trajectory loss rows, each of shape `(1, c)`.
pub struct TapeLosses {
    pub loss_f: NodeId,
    pub loss_fn: NodeId,
    pub loss_amp: NodeId,
    pub loss_amp_sq: NodeId,
    /// Weighted combination, still per-column.
    pub total: NodeId,
}

/// Records the composite loss on the tape from the per-step fidelity rows
/// `(1, c)` and the per-step action nodes `(K, c)` of a rollout.
pub fn build_losses_tape(
    tape: &mut Tape,
    fidelity_rows: &[NodeId],
    actions: &[NodeId],
    weights: &LossWeights,
) -> TapeLosses {
    assert!(!fidelity_rows.is_empty(), "no fidelities recorded");
    assert_eq!(fidelity_rows.len(), actions.len());

    // loss_F: sum of gamma^i (1 - F_i), discount starting at gamma^1
    let mut acc: Option<NodeId> = None;
    let mut g = 1.0;
    for &f in fidelity_rows {
        g *= weights.gamma;
        let term = tape.scale_shift(f, -g, g);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    let loss_f = acc.expect("at least one step");

    let loss_fn = tape.scale_shift(*fidelity_rows.last().unwrap(), -1.0, 1.0);

    let mut amp_acc: Option<NodeId> = None;
    let mut amp_sq_acc: Option<NodeId> = None;
    for &u in actions {
        let n = tape.norm2_cols(u);
        amp_acc = Some(match amp_acc {
            Some(a) => tape.add(a, n),
            None => n,
        });
        let n2 = tape.dot_cols(u, u);
        amp_sq_acc = Some(match amp_sq_acc {
            Some(a) => tape.add(a, n2),
            None => n2,
        });
    }
    let loss_amp = amp_acc.unwrap();
    let loss_amp_sq = amp_sq_acc.unwrap();

    // weighted total, skipping zero-coefficient terms so they stay off the
    // gradient path
    let mut total: Option<NodeId> = None;
    for (c, part) in [
        (weights.c_f, loss_f),
        (weights.c_fn, loss_fn),
        (weights.c_amp, loss_amp),
        (weights.c_amp_sq, loss_amp_sq),
    ] {
        if c != 0.0 {
            let scaled = tape.scale_shift(part, c, 0.0);
            total = Some(match total {
                Some(t) => tape.add(t, scaled),
                None => scaled,
            });
        }
    }
    let total = total.expect("validated weights have a positive coefficient");

    TapeLosses {
        loss_f,
        loss_fn,
        loss_amp,
        loss_amp_sq,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use std::sync::Arc;

    #[test]
    fn loss_f_examples() {
        assert_eq!(loss_f(&[1.0, 1.0, 1.0], 0.9).unwrap(), 0.0);
        assert_eq!(loss_f(&[0.0, 0.0], 1.0).unwrap(), 2.0);
        let v = loss_f(&[0.5, 0.75], 0.999).unwrap();
        assert!((v - 0.74900025).abs() < 1e-12);
    }

    #[test]
    fn fidelity_guard_trips_on_integrator_drift() {
        assert!(loss_f(&[1.1], 1.0).is_err());
        assert!(loss_f(&[-0.01], 1.0).is_err());
        // small drift above one is within the slack
        assert!(loss_f(&[1.0 + 5e-5], 1.0).is_ok());
        assert!(loss_f(&[1.0 + 5e-4], 1.0).is_err());
        assert!(loss_fn_final(2.0).is_err());
    }

    #[test]
    fn loss_fn_examples() {
        assert_eq!(loss_fn_final(1.0).unwrap(), 0.0);
        assert_eq!(loss_fn_final(0.0).unwrap(), 1.0);
        assert!((loss_fn_final(0.93).unwrap() - 0.07).abs() < 1e-15);
    }

    #[test]
    fn loss_amp_examples() {
        let one_step = [ControlVector(vec![3.0, 4.0])];
        assert!((loss_amp(&one_step, false) - 5.0).abs() < 1e-15);
        assert!((loss_amp(&one_step, true) - 25.0).abs() < 1e-15);
        let zeros = [ControlVector::zeros(4)];
        assert_eq!(loss_amp(&zeros, false), 0.0);
        let two = [ControlVector(vec![1.0]), ControlVector(vec![-2.0])];
        assert!((loss_amp(&two, true) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn loss_amp_is_sign_invariant() {
        let a = [ControlVector(vec![1.0, -2.0, 0.5])];
        let b = [ControlVector(vec![-1.0, -2.0, -0.5])];
        assert_eq!(loss_amp(&a, false), loss_amp(&b, false));
        assert_eq!(loss_amp(&a, true), loss_amp(&b, true));
    }

    #[test]
    fn total_loss_is_the_weighted_sum() {
        let w = LossWeights { c_f: 1.0, c_fn: 1.0, c_amp: 1.0, c_amp_sq: 1.0, gamma: 1.0 };
        let parts = LossParts { loss_f: 0.1, loss_fn: 0.2, loss_amp: 0.3, loss_amp_sq: 0.4 };
        assert!((total_loss(&w, &parts) - 1.0).abs() < 1e-15);
        let only_fn = LossWeights { c_f: 0.0, c_fn: 1.0, c_amp: 0.0, c_amp_sq: 0.0, gamma: 1.0 };
        let perfect = LossParts { loss_fn: 0.0, ..Default::default() };
        assert_eq!(total_loss(&only_fn, &perfect), 0.0);
    }

    #[test]
    fn weights_validation() {
        let zero = LossWeights { c_f: 0.0, c_fn: 0.0, c_amp: 0.0, c_amp_sq: 0.0, gamma: 1.0 };
        assert!(zero.validate().is_err());
        let neg = LossWeights { c_f: -1.0, c_fn: 0.0, c_amp: 0.0, c_amp_sq: 0.0, gamma: 1.0 };
        assert!(neg.validate().is_err());
        let bad_gamma = LossWeights { c_f: 1.0, c_fn: 0.0, c_amp: 0.0, c_amp_sq: 0.0, gamma: 0.0 };
        assert!(bad_gamma.validate().is_err());
    }

    #[test]
    fn monotonicity_in_each_fidelity() {
        let base = loss_f(&[0.4, 0.6, 0.8], 0.99).unwrap();
        for i in 0..3 {
            let mut f = [0.4, 0.6, 0.8];
            f[i] += 0.05;
            assert!(loss_f(&f, 0.99).unwrap() < base);
        }
    }

    #[test]
    fn taped_losses_match_plain_and_finite_differences() {
        // two steps, K = 2, batch of 1; inputs via a single flat leaf
        let w = LossWeights { c_f: 0.7, c_fn: 0.3, c_amp: 0.2, c_amp_sq: 0.1, gamma: 0.9 };
        // layout: [f1, f2, u1(2), u2(2)] -- fidelities away from bounds,
        // amplitudes away from zero so the norm is differentiable
        let x0 = [0.3, 0.8, 0.5, -0.4, 1.2, 0.7];
        let build = |t: &mut Tape, leaf: NodeId| {
            // split the leaf into pieces via matvec with constant selectors
            let sel = |t: &mut Tape, rows: &[usize]| {
                let mut m = vec![0.0; rows.len() * 6];
                for (r, &c) in rows.iter().enumerate() {
                    m[r * 6 + c] = 1.0;
                }
                let mnode = t.leaf(rows.len(), 6, &m);
                t.matvec(mnode, leaf)
            };
            let f1 = sel(t, &[0]);
            let f2 = sel(t, &[1]);
            let u1 = sel(t, &[2, 3]);
            let u2 = sel(t, &[4, 5]);
            let losses = build_losses_tape(t, &[f1, f2], &[u1, u2], &w);
            let mask = Arc::new(vec![1.0]);
            t.masked_sum(losses.total, mask, 1.0)
        };
        let mut t = Tape::new();
        let leaf = t.param(6, 1, &x0);
        let loss = build(&mut t, leaf);
        // plain reference
        let parts = LossParts {
            loss_f: loss_f(&[0.3, 0.8], 0.9).unwrap(),
            loss_fn: loss_fn_final(0.8).unwrap(),
            loss_amp: loss_amp(&[ControlVector(vec![0.5, -0.4]), ControlVector(vec![1.2, 0.7])], false),
            loss_amp_sq: loss_amp(&[ControlVector(vec![0.5, -0.4]), ControlVector(vec![1.2, 0.7])], true),
        };
        assert!((t.val_scalar(loss) - total_loss(&w, &parts)).abs() < 1e-14);

        t.backward(loss).unwrap();
        let analytic = t.grad(leaf).to_vec();
        let eval = |x: &[f64]| {
            let mut t = Tape::new();
            let leaf = t.leaf(6, 1, x);
            let loss = build(&mut t, leaf);
            t.val_scalar(loss)
        };
        let err = grad_check(eval, &x0, &analytic, 1e-5, 64, 0);
        assert!(err < 1e-7, "loss gradient mismatch: {err:.3e}");
    }
}
