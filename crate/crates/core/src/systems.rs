//! Builders for the physical systems, their target states, and the noisy
//! initial-state samplers.
//!
//! Three tasks are supported: a single qubit steered to its excited drift
//! eigenstate, an open antiferromagnetic spin chain steered to the GHZ state,
//! and a Kerr parametric oscillator steered to an even cat state that
//! coincides with the first excited drift eigenstate.
//!
//! Spin-chain basis convention: site 0 is the leftmost spin and maps to the
//! most significant bit, with bit value 0 meaning spin-up; index 0 is the
//! all-up state and index `2^M - 1` the all-down state. The chain is open
//! (bonds `i = 0..M-2`): a periodic ring would frustrate the
//! antiferromagnet for odd `M` and the Néel states would no longer span the
//! ground manifold.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::eigen::symmetric_eigen;
use crate::integrator::StepSpec;
use crate::realspace::{ControlSystem, RealHamiltonian, RealState};
use crate::{Error, Result};

/// How initial-state noise is applied to the Néel state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeelNoiseMode {
    /// Every site flips independently with probability `p`.
    PerSite,
    /// With probability `p`, exactly one uniformly chosen site flips.
    SingleFlip,
}

/// Which physical task to run, with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskKind {
    Qubit {
        omega: f64,
    },
    SpinChain {
        sites: usize,
        coupling: f64,
        flip_probability: f64,
        noise_mode: NeelNoiseMode,
    },
    Parametron {
        kerr: f64,
        two_photon: f64,
        fock_dim: usize,
        noise_half_width: f64,
        cat_alpha: f64,
        two_quadratures: bool,
    },
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Qubit { .. } => "qubit",
            TaskKind::SpinChain { .. } => "spin_chain",
            TaskKind::Parametron { .. } => "parametron",
        }
    }

    /// Builds and validates the control system.
    pub fn build_system(&self) -> Result<ControlSystem> {
        match *self {
            TaskKind::Qubit { omega } => build_qubit(omega),
            TaskKind::SpinChain { sites, coupling, .. } => build_spin_chain(sites, coupling),
            TaskKind::Parametron { kerr, two_photon, fock_dim, two_quadratures, .. } => {
                build_parametron(kerr, two_photon, fock_dim, two_quadratures)
            }
        }
    }

    /// The preparation target of the task.
    pub fn target(&self) -> Result<RealState> {
        match *self {
            TaskKind::Qubit { .. } => Ok(RealState::basis(2, 0)),
            TaskKind::SpinChain { sites, .. } => ghz_state(sites),
            TaskKind::Parametron { fock_dim, cat_alpha, .. } => cat_state(cat_alpha, fock_dim),
        }
    }

    /// Draws one initial state from the task's noise model.
    pub fn sample_initial(&self, rng: &mut ChaCha8Rng) -> RealState {
        match *self {
            TaskKind::Qubit { .. } => sample_bloch_uniform(rng),
            TaskKind::SpinChain { sites, flip_probability, noise_mode, .. } => {
                sample_neel_noisy(sites, flip_probability, noise_mode, rng)
            }
            TaskKind::Parametron { fock_dim, noise_half_width, .. } => {
                sample_noisy_vacuum(fock_dim, noise_half_width, rng)
            }
        }
    }
}

/// A task plus its discretization: everything the trainer needs to know
/// about the physics.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub horizon: StepSpec,
    target: RealState,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, horizon: StepSpec) -> Result<Self> {
        let target = kind.target()?;
        Ok(Self { kind, horizon, target })
    }

    pub fn target(&self) -> &RealState {
        &self.target
    }
}

/// `H = ω/2 σ_z + u_x σ_x` on the basis (|↑⟩, |↓⟩).
pub fn build_qubit(omega: f64) -> Result<ControlSystem> {
    if !(omega > 0.0) {
        return Err(Error::Config(format!("qubit frequency must be positive, got {omega}")));
    }
    let drift = RealHamiltonian::from_parts(
        2,
        vec![omega / 2.0, 0.0, 0.0, -omega / 2.0],
        vec![0.0; 4],
    );
    let sx = RealHamiltonian::from_parts(2, vec![0.0, 1.0, 1.0, 0.0], vec![0.0; 4]);
    ControlSystem::new(drift, vec![sx])
}

fn spin_sign(basis: usize, site: usize, sites: usize) -> f64 {
    // bit 0 = up = +1
    if basis & (1 << (sites - 1 - site)) == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Open chain `J Σ_{i} σ_z⁽ⁱ⁾ σ_z⁽ⁱ⁺¹⁾` with per-site `σ_x` and `σ_y`
/// controls; `K = 2M`, controls ordered `[x(0), y(0), x(1), y(1), ...]`.
pub fn build_spin_chain(sites: usize, coupling: f64) -> Result<ControlSystem> {
    if !(2..=6).contains(&sites) {
        return Err(Error::Config(format!(
            "spin chain supports 2 to 6 sites, got {sites}"
        )));
    }
    if !(coupling > 0.0) {
        return Err(Error::Config("coupling J must be positive".into()));
    }
    let d = 1usize << sites;
    let mut drift = RealHamiltonian::zero(d);
    for b in 0..d {
        let mut e = 0.0;
        for i in 0..sites - 1 {
            e += coupling * spin_sign(b, i, sites) * spin_sign(b, i + 1, sites);
        }
        drift.re_mut()[b * d + b] = e;
    }
    let mut controls = Vec::with_capacity(2 * sites);
    for i in 0..sites {
        let mask = 1 << (sites - 1 - i);
        let mut sx = RealHamiltonian::zero(d);
        let mut sy = RealHamiltonian::zero(d);
        for b in 0..d {
            let flipped = b ^ mask;
            sx.re_mut()[flipped * d + b] = 1.0;
            // sigma_y: |up> -> i |down>, |down> -> -i |up>
            sy.im_mut()[flipped * d + b] = if b & mask == 0 { 1.0 } else { -1.0 };
        }
        controls.push(sx);
        controls.push(sy);
    }
    ControlSystem::new(drift, controls)
}

/// `H = U a†a†aa + G (a†a† + aa) + u (a + a†)` on the truncated Fock basis
/// |0⟩..|D-1⟩. With `two_quadratures`, a second control `i(a - a†)` is added.
pub fn build_parametron(
    kerr: f64,
    two_photon: f64,
    fock_dim: usize,
    two_quadratures: bool,
) -> Result<ControlSystem> {
    if fock_dim < 8 {
        return Err(Error::Config(format!(
            "Fock truncation must be at least 8, got {fock_dim}"
        )));
    }
    let d = fock_dim;
    let mut drift = RealHamiltonian::zero(d);
    for n in 0..d {
        drift.re_mut()[n * d + n] = kerr * (n as f64) * (n as f64 - 1.0);
    }
    for n in 2..d {
        // aa |n> = sqrt(n (n-1)) |n-2>
        let v = two_photon * ((n as f64) * (n as f64 - 1.0)).sqrt();
        drift.re_mut()[(n - 2) * d + n] += v;
        drift.re_mut()[n * d + (n - 2)] += v;
    }
    let mut drive = RealHamiltonian::zero(d);
    for n in 1..d {
        // a |n> = sqrt(n) |n-1>
        let v = (n as f64).sqrt();
        drive.re_mut()[(n - 1) * d + n] = v;
        drive.re_mut()[n * d + (n - 1)] = v;
    }
    let mut controls = vec![drive];
    if two_quadratures {
        let mut quad = RealHamiltonian::zero(d);
        for n in 1..d {
            let v = (n as f64).sqrt();
            // i a has +sqrt(n) at (n-1, n); -i a† has -sqrt(n) at (n, n-1)
            quad.im_mut()[(n - 1) * d + n] = v;
            quad.im_mut()[n * d + (n - 1)] = -v;
        }
        controls.push(quad);
    }
    ControlSystem::new(drift, controls)
}

/// Uniform Bloch-sphere sample `cos(θ/2)|↑⟩ + sin(θ/2) e^{iφ}|↓⟩` with
/// `cos θ ~ U[-1, 1]`, `φ ~ U[0, 2π)`.
pub fn sample_bloch_uniform(rng: &mut ChaCha8Rng) -> RealState {
    let cos_theta: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let half = cos_theta.clamp(-1.0, 1.0).acos() / 2.0;
    let (s, c) = (half.sin(), half.cos());
    RealState::new(vec![c, s * phi.cos()], vec![0.0, s * phi.sin()])
        .expect("bloch sample is unit norm")
}

/// One of the two Néel states (picked with probability 1/2 each) with flip
/// noise applied according to `mode`. The result is always a basis state.
pub fn sample_neel_noisy(
    sites: usize,
    p: f64,
    mode: NeelNoiseMode,
    rng: &mut ChaCha8Rng,
) -> RealState {
    assert!((0.0..1.0).contains(&p), "flip probability must lie in [0, 1)");
    let offset: usize = if rng.random_range(0.0..1.0) < 0.5 { 0 } else { 1 };
    let mut bits: Vec<usize> = (0..sites).map(|i| (i + offset) % 2).collect();
    match mode {
        NeelNoiseMode::PerSite => {
            for b in &mut bits {
                if rng.random_range(0.0..1.0) < p {
                    *b ^= 1;
                }
            }
        }
        NeelNoiseMode::SingleFlip => {
            if rng.random_range(0.0..1.0) < p {
                let site = rng.random_range(0..sites);
                bits[site] ^= 1;
            }
        }
    }
    let idx = bits.iter().fold(0usize, |acc, b| (acc << 1) | b);
    RealState::basis(1 << sites, idx)
}

/// Noisy vacuum `|0⟩ + Σ_n e^{-n/3} ξ_n |n⟩` with real `ξ_n ~ U[-ξ, ξ]`,
/// normalized after construction.
pub fn sample_noisy_vacuum(fock_dim: usize, xi: f64, rng: &mut ChaCha8Rng) -> RealState {
    assert!(xi >= 0.0, "noise half-width must be non-negative");
    let mut re = vec![0.0; fock_dim];
    re[0] = 1.0;
    for (n, v) in re.iter_mut().enumerate() {
        let noise = if xi > 0.0 { rng.random_range(-xi..=xi) } else { 0.0 };
        *v += (-(n as f64) / 3.0).exp() * noise;
    }
    RealState::new(re, vec![0.0; fock_dim]).expect("noisy vacuum is normalizable")
}

/// `(|↑…↑⟩ + |↓…↓⟩)/√2`.
pub fn ghz_state(sites: usize) -> Result<RealState> {
    if sites < 2 {
        return Err(Error::Config("GHZ needs at least two sites".into()));
    }
    let d = 1usize << sites;
    let mut re = vec![0.0; d];
    let amp = 0.5f64.sqrt();
    re[0] = amp;
    re[d - 1] = amp;
    RealState::new(re, vec![0.0; d])
}

/// Even cat state `(|α⟩ + |-α⟩)/√2` on the truncated Fock basis,
/// renormalized after truncation. Logs a warning when the truncated tail
/// probability of the underlying coherent state exceeds 1e-6.
pub fn cat_state(alpha: f64, fock_dim: usize) -> Result<RealState> {
    if fock_dim < 2 {
        return Err(Error::Config("cat state needs at least two Fock levels".into()));
    }
    // coherent amplitudes c_n = e^{-α²/2} αⁿ/√(n!) via the stable recursion
    let mut coh = vec![0.0; fock_dim];
    coh[0] = (-alpha * alpha / 2.0).exp();
    for n in 1..fock_dim {
        coh[n] = coh[n - 1] * alpha / (n as f64).sqrt();
    }
    let kept: f64 = coh.iter().map(|c| c * c).sum();
    let tail = (1.0 - kept).max(0.0);
    if tail > 1e-6 {
        log::warn!(
            "cat_state(alpha = {alpha}, D = {fock_dim}): truncated coherent tail probability {tail:.2e}"
        );
    }
    // |α⟩ + |-α⟩ doubles even n and cancels odd n exactly
    let re: Vec<f64> = coh
        .iter()
        .enumerate()
        .map(|(n, c)| if n % 2 == 0 { 2.0 * c } else { 0.0 })
        .collect();
    RealState::new(re, vec![0.0; fock_dim])
}

fn realified_symmetric(h: &RealHamiltonian) -> Vec<f64> {
    // [[h_re, -h_im], [h_im, h_re]] is symmetric for Hermitian H
    let d = h.dim();
    let n = 2 * d;
    let mut s = vec![0.0; n * n];
    for i in 0..d {
        for j in 0..d {
            s[i * n + j] = h.re()[i * d + j];
            s[i * n + (d + j)] = -h.im()[i * d + j];
            s[(d + i) * n + j] = h.im()[i * d + j];
            s[(d + i) * n + (d + j)] = h.re()[i * d + j];
        }
    }
    s
}

/// Eigenvalues of the drift operator in ascending order (each quantum level
/// appears once; the realified doubling is removed).
pub fn drift_eigenvalues(system: &ControlSystem) -> Vec<f64> {
    let d = system.dim();
    let (w, _) = symmetric_eigen(2 * d, &realified_symmetric(system.drift()));
    (0..d).map(|k| w[2 * k]).collect()
}

/// The `k`-th eigenvector of the drift operator in ascending eigenvalue
/// order, via a dense symmetric eigensolve of the realified operator.
pub fn drift_eigenstate(system: &ControlSystem, k: usize) -> Result<RealState> {
    let d = system.dim();
    if k >= d {
        return Err(Error::Config(format!(
            "eigenstate index {k} out of range for dimension {d}"
        )));
    }
    let n = 2 * d;
    let (_, v) = symmetric_eigen(n, &realified_symmetric(system.drift()));
    let col = 2 * k;
    let re: Vec<f64> = (0..d).map(|i| v[i * n + col]).collect();
    let im: Vec<f64> = (0..d).map(|i| v[(d + i) * n + col]).collect();
    RealState::new(re, im)
}

/// `⟨n⟩ = Σ_n n (re_n² + im_n²)` for a state in the Fock basis.
pub fn mean_photon_number(s: &RealState) -> f64 {
    s.re()
        .iter()
        .zip(s.im())
        .enumerate()
        .map(|(n, (r, i))| n as f64 * (r * r + i * i))
        .sum()
}

fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Counter-based per-trajectory random stream: fully determined by
/// `(seed, epoch, trajectory)`, so parallel sampling stays reproducible.
pub fn stream_rng(seed: u64, epoch: u64, trajectory: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut x = seed;
    let mut key = [0u8; 32];
    let s0 = splitmix64(&mut x);
    x ^= epoch.wrapping_add(0xA0761D6478BD642F);
    let s1 = splitmix64(&mut x);
    x ^= trajectory.wrapping_add(0xE7037ED1A0B428DB);
    let s2 = splitmix64(&mut x);
    let s3 = splitmix64(&mut x);
    key[..8].copy_from_slice(&s0.to_le_bytes());
    key[8..16].copy_from_slice(&s1.to_le_bytes());
    key[16..24].copy_from_slice(&s2.to_le_bytes());
    key[24..32].copy_from_slice(&s3.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
