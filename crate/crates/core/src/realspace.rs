//! States and Hermitian operators over the real isomorphism.
//!
//! A complex state vector is stored as separate real and imaginary coefficient
//! vectors, and a Hermitian operator `H = H_re + i H_im` as the pair of real
//! matrices `(H_re, H_im)`. The Schrödinger equation `i ∂_t ψ = H ψ` then
//! becomes a real linear ODE on the stacked vector `[ψ_re; ψ_im]`:
//!
//! ```text
//! ∂_t [ψ_re; ψ_im] = [[H_im, H_re], [-H_re, H_im]] [ψ_re; ψ_im]
//! ```
//!
//! The block generator is antisymmetric for Hermitian `H`, so the exact flow
//! preserves the norm.

use crate::kernels;
use crate::{Error, Result};

/// Tolerance below which a state's norm deviation is left untouched.
const NORM_SNAP: f64 = 1e-12;
/// Hermiticity tolerance checked at system build time.
const HERMITICITY_TOL: f64 = 1e-12;

/// A pure quantum state as split real/imaginary coefficient vectors.
///
/// Unit norm is an invariant: construction renormalizes whenever the input
/// norm deviates from one by more than `1e-12` (noisy initial-state samplers
/// produce unnormalized coefficient lists by design).
#[derive(Debug, Clone, PartialEq)]
pub struct RealState {
    re: Vec<f64>,
    im: Vec<f64>,
}

impl RealState {
    /// Builds a state from coefficient vectors, normalizing if necessary.
    pub fn new(re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        if re.len() != im.len() {
            return Err(Error::DimensionMismatch {
                context: "RealState::new",
                expected: re.len(),
                actual: im.len(),
            });
        }
        if re.is_empty() {
            return Err(Error::Config("state dimension must be positive".into()));
        }
        let mut s = Self { re, im };
        let norm = (kernels::norm_sq(&s.re) + kernels::norm_sq(&s.im)).sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Config(format!(
                "cannot normalize state with norm {norm}"
            )));
        }
        if (norm - 1.0).abs() > NORM_SNAP {
            for v in s.re.iter_mut().chain(s.im.iter_mut()) {
                *v /= norm;
            }
        }
        Ok(s)
    }

    /// The `k`-th computational basis state of dimension `dim`.
    pub fn basis(dim: usize, k: usize) -> Self {
        assert!(k < dim, "basis index {k} out of range for dimension {dim}");
        let mut re = vec![0.0; dim];
        re[k] = 1.0;
        Self {
            re,
            im: vec![0.0; dim],
        }
    }

    /// Rebuilds a state from a stacked `[re; im]` vector, normalizing.
    pub fn from_stacked(x: &[f64]) -> Result<Self> {
        assert!(x.len() % 2 == 0, "stacked vector length must be even");
        let d = x.len() / 2;
        Self::new(x[..d].to_vec(), x[d..].to_vec())
    }

    /// Rebuilds a state from a stacked vector without renormalizing.
    ///
    /// Reserved for integrator output: renormalizing mid-trajectory would
    /// silently mask integrator drift and perturb gradients, so evolved
    /// states keep their raw norm and the trainer monitors the drift.
    pub(crate) fn from_stacked_unnormalized(x: &[f64]) -> Self {
        assert!(x.len() % 2 == 0, "stacked vector length must be even");
        let d = x.len() / 2;
        Self {
            re: x[..d].to_vec(),
            im: x[d..].to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.re.len()
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    /// The stacked `[re; im]` vector of length `2 dim` consumed by the
    /// integrator and by the agent's state-aware input.
    pub fn stacked(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(2 * self.re.len());
        x.extend_from_slice(&self.re);
        x.extend_from_slice(&self.im);
        x
    }

    /// Squared norm; equals one up to floating-point roundoff.
    pub fn norm_sq(&self) -> f64 {
        kernels::norm_sq(&self.re) + kernels::norm_sq(&self.im)
    }

    /// Rotates the state by a global phase `e^{iθ}`.
    pub fn with_global_phase(&self, theta: f64) -> Self {
        let (sin, cos) = theta.sin_cos();
        let re = self
            .re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r * cos - i * sin)
            .collect();
        let im = self
            .re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r * sin + i * cos)
            .collect();
        Self { re, im }
    }
}

/// A Hermitian operator as the real pair `(Re H, Im H)`, row-major `D x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct RealHamiltonian {
    dim: usize,
    h_re: Vec<f64>,
    h_im: Vec<f64>,
}

impl RealHamiltonian {
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            h_re: vec![0.0; dim * dim],
            h_im: vec![0.0; dim * dim],
        }
    }

    pub fn from_parts(dim: usize, h_re: Vec<f64>, h_im: Vec<f64>) -> Self {
        assert_eq!(h_re.len(), dim * dim);
        assert_eq!(h_im.len(), dim * dim);
        Self { dim, h_re, h_im }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn re(&self) -> &[f64] {
        &self.h_re
    }

    pub fn im(&self) -> &[f64] {
        &self.h_im
    }

    pub fn re_mut(&mut self) -> &mut [f64] {
        &mut self.h_re
    }

    pub fn im_mut(&mut self) -> &mut [f64] {
        &mut self.h_im
    }

    /// Checks `H_re` symmetric and `H_im` antisymmetric to `1e-12`.
    ///
    /// Called when a [`ControlSystem`] is built. Controls enter linearly with
    /// real amplitudes, so Hermiticity is preserved by [`assemble`] and does
    /// not need rechecking per step.
    pub fn validate_hermitian(&self, label: &str) -> Result<()> {
        let d = self.dim;
        for i in 0..d {
            for j in 0..d {
                let sym = (self.h_re[i * d + j] - self.h_re[j * d + i]).abs();
                let asym = (self.h_im[i * d + j] + self.h_im[j * d + i]).abs();
                if sym > HERMITICITY_TOL || asym > HERMITICITY_TOL {
                    return Err(Error::NotHermitian(format!(
                        "{label}: entry ({i},{j}) violates symmetry by {:.2e}",
                        sym.max(asym)
                    )));
                }
            }
        }
        Ok(())
    }

    /// Applies the block generator to a stacked `[re; im]` vector:
    /// `y_re = H_im re + H_re im`, `y_im = -H_re re + H_im im`.
    ///
    /// This is the realification of `-i H ψ`.
    pub fn apply_stacked(&self, x: &[f64], y: &mut [f64]) {
        let d = self.dim;
        assert_eq!(x.len(), 2 * d, "state dimension mismatch in apply_stacked");
        assert_eq!(y.len(), 2 * d);
        let (xre, xim) = x.split_at(d);
        let (yre, yim) = y.split_at_mut(d);
        for i in 0..d {
            let row_re = &self.h_re[i * d..(i + 1) * d];
            let row_im = &self.h_im[i * d..(i + 1) * d];
            yre[i] = kernels::dot(row_im, xre) + kernels::dot(row_re, xim);
            yim[i] = kernels::dot(row_im, xim) - kernels::dot(row_re, xre);
        }
    }

    /// Applies the transpose of the block generator (adjoint of
    /// [`apply_stacked`]), accumulating into `y`.
    pub fn apply_stacked_transpose_add(&self, x: &[f64], y: &mut [f64]) {
        let d = self.dim;
        assert_eq!(x.len(), 2 * d);
        assert_eq!(y.len(), 2 * d);
        let (xre, xim) = x.split_at(d);
        let (yre, yim) = y.split_at_mut(d);
        // (Mᵀ)_re-out = H_imᵀ x_re - H_reᵀ x_im ; (Mᵀ)_im-out = H_reᵀ x_re + H_imᵀ x_im
        for i in 0..d {
            let row_re = &self.h_re[i * d..(i + 1) * d];
            let row_im = &self.h_im[i * d..(i + 1) * d];
            kernels::axpy(yre, xre[i], row_im);
            kernels::axpy(yre, -xim[i], row_re);
            kernels::axpy(yim, xre[i], row_re);
            kernels::axpy(yim, xim[i], row_im);
        }
    }
}

/// Drift operator plus `K` control operators of a controlled system.
#[derive(Debug, Clone)]
pub struct ControlSystem {
    dim: usize,
    drift: RealHamiltonian,
    controls: Vec<RealHamiltonian>,
}

impl ControlSystem {
    /// Builds a system, validating Hermiticity of every operator.
    pub fn new(drift: RealHamiltonian, controls: Vec<RealHamiltonian>) -> Result<Self> {
        if controls.is_empty() {
            return Err(Error::Config("a system needs at least one control".into()));
        }
        let dim = drift.dim();
        drift.validate_hermitian("drift")?;
        for (k, c) in controls.iter().enumerate() {
            if c.dim() != dim {
                return Err(Error::DimensionMismatch {
                    context: "ControlSystem::new",
                    expected: dim,
                    actual: c.dim(),
                });
            }
            c.validate_hermitian(&format!("control {k}"))?;
        }
        Ok(Self {
            dim,
            drift,
            controls,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_controls(&self) -> usize {
        self.controls.len()
    }

    pub fn drift(&self) -> &RealHamiltonian {
        &self.drift
    }

    pub fn controls(&self) -> &[RealHamiltonian] {
        &self.controls
    }
}

/// Control amplitudes for one interval, length `K` (energy units, ħ = 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVector(pub Vec<f64>);

impl ControlVector {
    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Euclidean norm of the amplitude vector.
    pub fn norm(&self) -> f64 {
        kernels::norm_sq(&self.0).sqrt()
    }
}

/// `H(u) = H_0 + Σ_k u_k H_k`, componentwise on both matrix parts.
pub fn assemble(system: &ControlSystem, u: &ControlVector) -> RealHamiltonian {
    assert_eq!(
        u.len(),
        system.num_controls(),
        "control vector length does not match the system"
    );
    let mut h = system.drift.clone();
    for (uk, hk) in u.0.iter().zip(&system.controls) {
        kernels::axpy(&mut h.h_re, *uk, &hk.h_re);
        kernels::axpy(&mut h.h_im, *uk, &hk.h_im);
    }
    h
}

/// The realified derivative `-i H ψ` as a `(re, im)` pair.
pub fn generator_apply(h: &RealHamiltonian, s: &RealState) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(h.dim(), s.dim(), "operator/state dimension mismatch");
    let x = s.stacked();
    let mut y = vec![0.0; x.len()];
    h.apply_stacked(&x, &mut y);
    let im = y.split_off(s.dim());
    (y, im)
}

/// `|⟨s|target⟩|²`, in `[0, 1]` for unit-norm inputs.
pub fn fidelity(s: &RealState, target: &RealState) -> f64 {
    assert_eq!(s.dim(), target.dim(), "state dimension mismatch in fidelity");
    let re_part = kernels::dot(&s.re, &target.re) + kernels::dot(&s.im, &target.im);
    let im_part = kernels::dot(&s.re, &target.im) - kernels::dot(&s.im, &target.re);
    re_part * re_part + im_part * im_part
}

/// The two constant vectors against which a stacked state is dotted to get
/// the real and imaginary parts of `⟨s|target⟩`. Shared by the plain and
/// taped fidelity computations.
pub(crate) fn fidelity_probes(target: &RealState) -> (Vec<f64>, Vec<f64>) {
    let d = target.dim();
    let mut p_re = Vec::with_capacity(2 * d);
    p_re.extend_from_slice(&target.re);
    p_re.extend_from_slice(&target.im);
    let mut p_im = Vec::with_capacity(2 * d);
    p_im.extend_from_slice(&target.im);
    p_im.extend(target.re.iter().map(|v| -v));
    (p_re, p_im)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sigma_z(scale: f64) -> RealHamiltonian {
        RealHamiltonian::from_parts(2, vec![scale, 0.0, 0.0, -scale], vec![0.0; 4])
    }

    fn sigma_x() -> RealHamiltonian {
        RealHamiltonian::from_parts(2, vec![0.0, 1.0, 1.0, 0.0], vec![0.0; 4])
    }

    fn qubit_like() -> ControlSystem {
        ControlSystem::new(sigma_z(0.5), vec![sigma_x()]).unwrap()
    }

    fn random_state(rng: &mut ChaCha8Rng, dim: usize) -> RealState {
        let re: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let im: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        RealState::new(re, im).unwrap()
    }

    fn random_hermitian(rng: &mut ChaCha8Rng, dim: usize) -> RealHamiltonian {
        let mut h = RealHamiltonian::zero(dim);
        for i in 0..dim {
            for j in i..dim {
                let re = rng.random_range(-1.0..1.0);
                h.re_mut()[i * dim + j] = re;
                h.re_mut()[j * dim + i] = re;
                if j > i {
                    let im = rng.random_range(-1.0..1.0);
                    h.im_mut()[i * dim + j] = im;
                    h.im_mut()[j * dim + i] = -im;
                }
            }
        }
        h
    }

    #[test]
    fn construction_normalizes_noisy_input() {
        let s = RealState::new(vec![3.0, 0.0], vec![0.0, 4.0]).unwrap();
        assert!((s.norm_sq() - 1.0).abs() < 1e-15);
        assert!((s.re()[0] - 0.6).abs() < 1e-15);
        assert!((s.im()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(RealState::new(vec![1.0, 0.0], vec![0.0]).is_err());
    }

    #[test]
    fn assemble_zero_controls_returns_drift() {
        let sys = qubit_like();
        let h = assemble(&sys, &ControlVector::zeros(1));
        assert_eq!(h, *sys.drift());
    }

    #[test]
    fn assemble_qubit_direct_evaluation() {
        // omega = 1, u_x = 0.5: H = 1/2 sigma_z + 1/2 sigma_x
        let sys = qubit_like();
        let h = assemble(&sys, &ControlVector(vec![0.5]));
        assert_eq!(h.re(), &[0.5, 0.5, 0.5, -0.5]);
        assert!(h.im().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn assemble_is_linear_in_u() {
        // two identical controls with amplitudes (a, b) equal one with a + b
        let drift = sigma_z(0.5);
        let two = ControlSystem::new(drift.clone(), vec![sigma_x(), sigma_x()]).unwrap();
        let one = ControlSystem::new(drift, vec![sigma_x()]).unwrap();
        let ha = assemble(&two, &ControlVector(vec![0.3, 1.1]));
        let hb = assemble(&one, &ControlVector(vec![1.4]));
        for (a, b) in ha.re().iter().zip(hb.re()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn generator_apply_matches_complex_arithmetic() {
        // H = 1/2 sigma_z, s = |up>: -iHs = -i/2 |up>
        let h = sigma_z(0.5);
        let s = RealState::basis(2, 0);
        let (dre, dim) = generator_apply(&h, &s);
        assert_eq!(dre, vec![0.0, 0.0]);
        assert!((dim[0] + 0.5).abs() < 1e-15);
        assert_eq!(dim[1], 0.0);
    }

    #[test]
    fn zero_hamiltonian_gives_zero_derivative() {
        let h = RealHamiltonian::zero(3);
        let s = RealState::basis(3, 1);
        let (dre, dim) = generator_apply(&h, &s);
        assert!(dre.iter().chain(&dim).all(|&v| v == 0.0));
    }

    #[test]
    fn generator_is_antisymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let h = random_hermitian(&mut rng, 5);
            let s = random_state(&mut rng, 5);
            let x = s.stacked();
            let mut y = vec![0.0; x.len()];
            h.apply_stacked(&x, &mut y);
            assert!(kernels::dot(&x, &y).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_apply_is_exact_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let h = random_hermitian(&mut rng, 4);
            let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut y = vec![0.0; 8];
            h.apply_stacked(&x, &mut y);
            let lhs = kernels::dot(&w, &y);
            let mut z = vec![0.0; 8];
            h.apply_stacked_transpose_add(&w, &mut z);
            let rhs = kernels::dot(&z, &x);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn fidelity_examples() {
        let up = RealState::basis(2, 0);
        let down = RealState::basis(2, 1);
        let plus_x = RealState::new(vec![0.5f64.sqrt(), 0.5f64.sqrt()], vec![0.0, 0.0]).unwrap();
        assert!((fidelity(&up, &up) - 1.0).abs() < 1e-15);
        assert_eq!(fidelity(&up, &down), 0.0);
        assert!((fidelity(&plus_x, &up) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fidelity_is_symmetric_and_phase_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let s = random_state(&mut rng, 6);
            let t = random_state(&mut rng, 6);
            let f = fidelity(&s, &t);
            assert!((f - fidelity(&t, &s)).abs() < 1e-14);
            assert!((0.0..=1.0 + 1e-12).contains(&f));
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            assert!((fidelity(&s.with_global_phase(theta), &t) - f).abs() < 1e-12);
        }
    }

    #[test]
    fn hermiticity_validation_rejects_asymmetric_matrices() {
        let mut h = RealHamiltonian::zero(2);
        h.re_mut()[1] = 1.0; // (0,1) set, (1,0) not
        assert!(ControlSystem::new(h, vec![RealHamiltonian::zero(2)]).is_err());
    }
}
