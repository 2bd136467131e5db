//! The predictive control agent: a state-aware network `f_s`, an action-aware
//! network `f_a`, and a combination-aware network `f_c` that maps their sum to
//! the next control amplitudes.
//!
//! The state-aware input is the stacked `[ψ_re; ψ_im]` vector (width `2D`),
//! the action-aware input is the previous step's amplitudes (width `K`), and
//! every affine layer is followed by a ReLU except the final layer of `f_c`,
//! whose raw linear output is used directly as the action. The first step
//! feeds a zero action vector.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::kernels;
use crate::realspace::{ControlVector, RealState};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Linear,
}

/// One affine layer of a subnetwork.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_features: usize,
    pub out_features: usize,
    pub activation: Activation,
}

/// Layer sizes of the three subnetworks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentArch {
    pub fs: Vec<LayerSpec>,
    pub fa: Vec<LayerSpec>,
    pub fc: Vec<LayerSpec>,
}

impl AgentArch {
    /// Builds an architecture from `(in, out)` size pairs. Every layer gets a
    /// ReLU except the last layer of `f_c`, which stays linear so actions are
    /// unbounded.
    pub fn from_sizes(
        fs: &[(usize, usize)],
        fa: &[(usize, usize)],
        fc: &[(usize, usize)],
    ) -> Result<Self> {
        let mk = |sizes: &[(usize, usize)], linear_last: bool| -> Result<Vec<LayerSpec>> {
            if sizes.is_empty() {
                return Err(Error::Config("a subnetwork needs at least one layer".into()));
            }
            sizes
                .iter()
                .enumerate()
                .map(|(i, &(a, b))| {
                    if a == 0 || b == 0 {
                        return Err(Error::Config("layer sizes must be positive".into()));
                    }
                    if i > 0 && sizes[i - 1].1 != a {
                        return Err(Error::Config(format!(
                            "layer chaining broken: layer {i} expects input {a} but the previous layer outputs {}",
                            sizes[i - 1].1
                        )));
                    }
                    Ok(LayerSpec {
                        in_features: a,
                        out_features: b,
                        activation: if linear_last && i == sizes.len() - 1 {
                            Activation::Linear
                        } else {
                            Activation::Relu
                        },
                    })
                })
                .collect()
        };
        let arch = Self {
            fs: mk(fs, false)?,
            fa: mk(fa, false)?,
            fc: mk(fc, true)?,
        };
        // the two feature maps must agree so they can be added
        if arch.feature_width() != arch.fa.last().unwrap().out_features {
            return Err(Error::Config(format!(
                "state-aware output {} and action-aware output {} must match",
                arch.feature_width(),
                arch.fa.last().unwrap().out_features
            )));
        }
        if arch.fc[0].in_features != arch.feature_width() {
            return Err(Error::Config(format!(
                "combination-aware input {} must match the feature width {}",
                arch.fc[0].in_features,
                arch.feature_width()
            )));
        }
        Ok(arch)
    }

    /// Width of the stacked state input (`2D`).
    pub fn state_input(&self) -> usize {
        self.fs[0].in_features
    }

    /// Width of the action input and output (`K`).
    pub fn action_width(&self) -> usize {
        self.fc.last().unwrap().out_features
    }

    /// Shared feature width `B`.
    pub fn feature_width(&self) -> usize {
        self.fs.last().unwrap().out_features
    }

    /// Checks the architecture against a task's dimensions.
    pub fn validate_for(&self, dim: usize, num_controls: usize) -> Result<()> {
        if self.state_input() != 2 * dim {
            return Err(Error::Config(format!(
                "state-aware input width {} does not match 2D = {}",
                self.state_input(),
                2 * dim
            )));
        }
        if self.fa[0].in_features != num_controls {
            return Err(Error::Config(format!(
                "action-aware input width {} does not match K = {num_controls}",
                self.fa[0].in_features
            )));
        }
        if self.action_width() != num_controls {
            return Err(Error::Config(format!(
                "combination-aware output width {} does not match K = {num_controls}",
                self.action_width()
            )));
        }
        Ok(())
    }

    fn subnets(&self) -> [(&'static str, &[LayerSpec]); 3] {
        [("fs", &self.fs), ("fa", &self.fa), ("fc", &self.fc)]
    }

    fn size_pairs(layers: &[LayerSpec]) -> Vec<(usize, usize)> {
        layers.iter().map(|l| (l.in_features, l.out_features)).collect()
    }
}

/// Location of one named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    /// `[out, in]` for weights (row-major), `[out]` for biases.
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// All weights and biases of the three subnetworks, stored flat so the
/// optimizer and the checkpoint writer see one contiguous vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentParams {
    arch: AgentArch,
    layout: Vec<TensorSpec>,
    data: Vec<f64>,
}

fn build_layout(arch: &AgentArch) -> (Vec<TensorSpec>, usize) {
    let mut layout = Vec::new();
    let mut offset = 0;
    for (prefix, layers) in arch.subnets() {
        for (i, l) in layers.iter().enumerate() {
            let wlen = l.out_features * l.in_features;
            layout.push(TensorSpec {
                name: format!("{prefix}.{i}.weight"),
                shape: vec![l.out_features, l.in_features],
                offset,
                len: wlen,
            });
            offset += wlen;
            layout.push(TensorSpec {
                name: format!("{prefix}.{i}.bias"),
                shape: vec![l.out_features],
                offset,
                len: l.out_features,
            });
            offset += l.out_features;
        }
    }
    (layout, offset)
}

impl AgentParams {
    /// Uniform initialization in `[-1/√fan_in, +1/√fan_in]` for both weights
    /// and biases, deterministic in the seed.
    pub fn init(arch: AgentArch, seed: u64) -> Self {
        let (layout, total) = build_layout(&arch);
        let mut data = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (prefix, layers) in arch.subnets() {
            for (i, l) in layers.iter().enumerate() {
                let bound = 1.0 / (l.in_features as f64).sqrt();
                for suffix in ["weight", "bias"] {
                    let name = format!("{prefix}.{i}.{suffix}");
                    let spec = layout.iter().find(|t| t.name == name).unwrap();
                    for v in &mut data[spec.offset..spec.offset + spec.len] {
                        *v = rng.random_range(-bound..=bound);
                    }
                }
            }
        }
        Self { arch, layout, data }
    }

    /// All-zero parameters; the forward pass then returns the zero action for
    /// any input. Test mode only.
    pub fn zeros(arch: AgentArch) -> Self {
        let (layout, total) = build_layout(&arch);
        Self {
            arch,
            layout,
            data: vec![0.0; total],
        }
    }

    pub fn arch(&self) -> &AgentArch {
        &self.arch
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.data[t.offset..t.offset + t.len])
    }
}

/// The zero action vector fed to the agent at step `i = 0`.
pub fn first_step_action(num_controls: usize) -> ControlVector {
    ControlVector::zeros(num_controls)
}

fn subnet_forward_plain(
    layers: &[LayerSpec],
    params: &AgentParams,
    prefix: &str,
    input: &[f64],
) -> Vec<f64> {
    let mut x = input.to_vec();
    for (i, l) in layers.iter().enumerate() {
        let w = params.tensor(&format!("{prefix}.{i}.weight")).unwrap();
        let b = params.tensor(&format!("{prefix}.{i}.bias")).unwrap();
        let mut y = vec![0.0; l.out_features];
        for (r, yr) in y.iter_mut().enumerate() {
            *yr = kernels::dot(&w[r * l.in_features..(r + 1) * l.in_features], &x) + b[r];
        }
        if l.activation == Activation::Relu {
            // same branch form as the taped ReLU so -0.0 inputs match bitwise
            for v in &mut y {
                if !(*v > 0.0) {
                    *v = 0.0;
                }
            }
        }
        x = y;
    }
    x
}

/// Plain (untaped) forward pass: `f_c(f_s([ψ_re; ψ_im]) + f_a(u_prev))`.
pub fn forward(params: &AgentParams, state: &RealState, u_prev: &ControlVector) -> ControlVector {
    let stacked = state.stacked();
    assert_eq!(
        stacked.len(),
        params.arch.state_input(),
        "state width does not match the architecture"
    );
    assert_eq!(
        u_prev.len(),
        params.arch.fa[0].in_features,
        "previous-action width does not match the architecture"
    );
    let hs = subnet_forward_plain(&params.arch.fs, params, "fs", &stacked);
    let ha = subnet_forward_plain(&params.arch.fa, params, "fa", u_prev.as_slice());
    let mut h = vec![0.0; hs.len()];
    for i in 0..h.len() {
        h[i] = hs[i] + ha[i];
    }
    ControlVector(subnet_forward_plain(&params.arch.fc, params, "fc", &h))
}

/// Node ids of the agent's parameter tensors on a tape, in layout order.
pub struct TapeBindings {
    tensors: Vec<NodeId>,
}

impl TapeBindings {
    /// Registers every parameter tensor on the tape (weights as `(out, in)`
    /// matrices, biases as vectors) in layout order.
    pub fn bind(tape: &mut Tape, params: &AgentParams) -> Self {
        let tensors = params
            .layout
            .iter()
            .map(|t| {
                let data = &params.data[t.offset..t.offset + t.len];
                match t.shape.len() {
                    2 => tape.param(t.shape[0], t.shape[1], data),
                    _ => tape.param(t.shape[0], 1, data),
                }
            })
            .collect();
        Self { tensors }
    }

    fn layer(&self, arch: &AgentArch, subnet: usize, layer: usize) -> (NodeId, NodeId) {
        let mut idx = 0;
        let lens = [arch.fs.len(), arch.fa.len(), arch.fc.len()];
        for s in 0..subnet {
            idx += 2 * lens[s];
        }
        idx += 2 * layer;
        (self.tensors[idx], self.tensors[idx + 1])
    }

    /// Collects the flat gradient vector matching [`AgentParams::data`]
    /// after a backward pass.
    pub fn collect_grads(&self, tape: &Tape, out: &mut Vec<f64>) {
        out.clear();
        for &id in &self.tensors {
            out.extend_from_slice(tape.grad(id));
        }
    }
}

fn subnet_forward_tape(
    tape: &mut Tape,
    arch: &AgentArch,
    bindings: &TapeBindings,
    subnet: usize,
    layers: &[LayerSpec],
    mut x: NodeId,
) -> NodeId {
    for (i, l) in layers.iter().enumerate() {
        let (w, b) = bindings.layer(arch, subnet, i);
        x = tape.affine(w, b, x);
        if l.activation == Activation::Relu {
            x = tape.relu(x);
        }
    }
    x
}

/// Taped forward pass on a chunk of trajectories: `state` is the stacked
/// `(2D, c)` node, `u_prev` the `(K, c)` node of previous actions.
pub fn forward_tape(
    tape: &mut Tape,
    arch: &AgentArch,
    bindings: &TapeBindings,
    state: NodeId,
    u_prev: NodeId,
) -> NodeId {
    let hs = subnet_forward_tape(tape, arch, bindings, 0, &arch.fs, state);
    let ha = subnet_forward_tape(tape, arch, bindings, 1, &arch.fa, u_prev);
    let h = tape.add(hs, ha);
    subnet_forward_tape(tape, arch, bindings, 2, &arch.fc, h)
}

// --- checkpoint io ---------------------------------------------------------

/// Magic bytes at the start of a checkpoint file.
const CHECKPOINT_MAGIC: &[u8; 8] = b"QOCAGT1\0";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config_hash: String,
    seed: u64,
    architecture: ManifestArch,
    tensors: Vec<ManifestTensor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestArch {
    fs: Vec<(usize, usize)>,
    fa: Vec<(usize, usize)>,
    fc: Vec<(usize, usize)>,
}

/// Provenance recorded next to the tensors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub seed: u64,
}

/// Writes a checkpoint: 8 magic bytes, a little-endian u64 JSON-manifest
/// length, the JSON manifest, then every tensor's row-major f64 data in
/// little-endian byte order, concatenated in manifest order.
pub fn save_checkpoint(path: &Path, params: &AgentParams, meta: &CheckpointMeta) -> Result<()> {
    let manifest = Manifest {
        format_version: 1,
        config_hash: meta.config_hash.clone(),
        seed: meta.seed,
        architecture: ManifestArch {
            fs: AgentArch::size_pairs(&params.arch.fs),
            fa: AgentArch::size_pairs(&params.arch.fa),
            fc: AgentArch::size_pairs(&params.arch.fc),
        },
        tensors: params
            .layout
            .iter()
            .map(|t| ManifestTensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset: t.offset,
                len: t.len,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest serialization failed: {e}")))?;
    let mut file = fs::File::create(path)?;
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&(json.len() as u64).to_le_bytes())?;
    file.write_all(&json)?;
    let mut bytes = Vec::with_capacity(params.data.len() * 8);
    for v in &params.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&bytes)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(AgentParams, CheckpointMeta)> {
    let mut file = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let json_len = u64::from_le_bytes(len_bytes) as usize;
    let mut json = vec![0u8; json_len];
    file.read_exact(&mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json)
        .map_err(|e| Error::Checkpoint(format!("manifest parse failed: {e}")))?;
    if manifest.format_version != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let arch = AgentArch::from_sizes(
        &manifest.architecture.fs,
        &manifest.architecture.fa,
        &manifest.architecture.fc,
    )?;
    let (layout, total) = build_layout(&arch);
    for (a, b) in layout.iter().zip(&manifest.tensors) {
        if a.name != b.name || a.shape != b.shape || a.offset != b.offset || a.len != b.len {
            return Err(Error::Checkpoint(format!(
                "tensor table mismatch at {} / {}",
                a.name, b.name
            )));
        }
    }
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() != total * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {} data bytes, found {}",
            total * 8,
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((
        AgentParams { arch, layout, data },
        CheckpointMeta {
            config_hash: manifest.config_hash,
            seed: manifest.seed,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use std::sync::Arc;

    fn qubit_arch() -> AgentArch {
        AgentArch::from_sizes(
            &[(4, 256), (256, 256), (256, 128)],
            &[(1, 128), (128, 128)],
            &[(128, 64), (64, 32), (32, 1)],
        )
        .unwrap()
    }

    fn tiny_arch() -> AgentArch {
        AgentArch::from_sizes(&[(4, 8), (8, 6)], &[(2, 6)], &[(6, 5), (5, 2)]).unwrap()
    }

    #[test]
    fn published_architectures_are_consistent() {
        let qubit = qubit_arch();
        qubit.validate_for(2, 1).unwrap();
        assert_eq!(qubit.feature_width(), 128);

        // spin chain M = 3: action-aware input is 2M = 6 controls
        let m3 = AgentArch::from_sizes(
            &[(16, 512), (512, 32)],
            &[(6, 16), (16, 32)],
            &[(32, 32), (32, 6)],
        )
        .unwrap();
        m3.validate_for(8, 6).unwrap();

        // parametric oscillator: state input is 2 * 16 = 32
        let para = AgentArch::from_sizes(
            &[(32, 512), (512, 256), (256, 256), (256, 64)],
            &[(1, 128), (128, 64)],
            &[(64, 64), (64, 32), (32, 1)],
        )
        .unwrap();
        para.validate_for(16, 1).unwrap();
        assert_eq!(para.state_input(), 32);
    }

    #[test]
    fn broken_chaining_is_rejected() {
        assert!(AgentArch::from_sizes(&[(4, 8), (9, 6)], &[(2, 6)], &[(6, 2)]).is_err());
        // mismatched feature widths
        assert!(AgentArch::from_sizes(&[(4, 8)], &[(2, 6)], &[(8, 2)]).is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = AgentParams::init(tiny_arch(), 99);
        let b = AgentParams::init(tiny_arch(), 99);
        assert_eq!(a.data(), b.data());
        let c = AgentParams::init(tiny_arch(), 100);
        assert_ne!(a.data(), c.data());
        let w = a.tensor("fs.0.weight").unwrap();
        let bound = 1.0 / 2.0; // fan_in 4
        assert!(w.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn zero_params_give_zero_action() {
        let p = AgentParams::zeros(tiny_arch());
        let s = RealState::new(vec![0.5, 0.5], vec![0.5, 0.5]).unwrap();
        let u = forward(&p, &s, &ControlVector(vec![1.0, -2.0]));
        assert_eq!(u.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn first_step_action_is_zero() {
        assert_eq!(first_step_action(1).as_slice(), &[0.0]);
        assert_eq!(first_step_action(12).as_slice(), &[0.0; 12]);
    }

    #[test]
    fn plain_and_taped_forward_agree_bitwise() {
        let arch = tiny_arch();
        let p = AgentParams::init(arch.clone(), 5);
        let s = RealState::new(vec![0.1, -0.4], vec![0.7, 0.2]).unwrap();
        let u_prev = ControlVector(vec![0.3, -0.8]);
        let plain = forward(&p, &s, &u_prev);

        let mut tape = Tape::new();
        let bindings = TapeBindings::bind(&mut tape, &p);
        let state = tape.leaf(4, 1, &s.stacked());
        let uprev = tape.leaf(2, 1, u_prev.as_slice());
        let out = forward_tape(&mut tape, &arch, &bindings, state, uprev);
        for (a, b) in plain.as_slice().iter().zip(tape.val(out)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn forward_gradient_matches_finite_differences() {
        let arch = tiny_arch();
        let p = AgentParams::init(arch.clone(), 21);
        let s = RealState::new(vec![0.3, -0.2], vec![0.5, 0.4]).unwrap();
        let u_prev = ControlVector(vec![0.6, -0.1]);
        let probe = Arc::new(vec![0.7, -1.3]);

        let eval = |data: &[f64]| {
            let mut q = p.clone();
            q.data_mut().copy_from_slice(data);
            let mut tape = Tape::new();
            let bindings = TapeBindings::bind(&mut tape, &q);
            let state = tape.leaf(4, 1, &s.stacked());
            let uprev = tape.leaf(2, 1, u_prev.as_slice());
            let out = forward_tape(&mut tape, &arch, &bindings, state, uprev);
            let row = tape.dot_const_cols(out, Arc::clone(&probe));
            let loss = tape.masked_sum(row, Arc::new(vec![1.0]), 1.0);
            tape.val_scalar(loss)
        };

        let mut tape = Tape::new();
        let bindings = TapeBindings::bind(&mut tape, &p);
        let state = tape.leaf(4, 1, &s.stacked());
        let uprev = tape.leaf(2, 1, u_prev.as_slice());
        let out = forward_tape(&mut tape, &arch, &bindings, state, uprev);
        let row = tape.dot_const_cols(out, Arc::clone(&probe));
        let loss = tape.masked_sum(row, Arc::new(vec![1.0]), 1.0);
        tape.backward(loss).unwrap();
        let mut analytic = Vec::new();
        bindings.collect_grads(&tape, &mut analytic);

        let err = grad_check(eval, p.data(), &analytic, 1e-5, p.num_params(), 3);
        assert!(err < 1e-6, "agent gradient mismatch: {err:.3e}");
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.ckpt");
        let p = AgentParams::init(tiny_arch(), 123);
        let meta = CheckpointMeta {
            config_hash: "deadbeef01234567".into(),
            seed: 123,
        };
        save_checkpoint(&path, &p, &meta).unwrap();
        let (q, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(p.layout(), q.layout());
        for (a, b) in p.data().iter().zip(q.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
