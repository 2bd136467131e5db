//! Reverse-mode automatic differentiation over the tensor operations used by
//! the integrator, the agent, and the losses.
//!
//! The tape is eager: every operation computes its value when recorded, and
//! [`Tape::backward`] replays the records in reverse. Nodes are dense f64
//! buffers of shape `(rows, cols)`. Batch nodes hold one trajectory per
//! column (column-major storage), so a single tape differentiates a whole
//! chunk of trajectories at once; weight matrices are row-major parameter
//! nodes. All columns are computed independently, which makes results
//! bitwise-independent of the chunk width.
//!
//! A tape is rebuilt every rollout. Gradient accumulation order is fixed, so
//! two backward passes over the same tape are bitwise identical.

use std::sync::Arc;

use crate::kernels;
use crate::realspace::{ControlSystem, RealHamiltonian};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// A control system prepared for taped evolution: dense operators for the
/// forward/adjoint applications plus sparse control entries for the
/// amplitude gradients.
#[derive(Debug)]
pub struct TapeSystem {
    dim: usize,
    drift: RealHamiltonian,
    controls: Vec<RealHamiltonian>,
    sparse: Vec<SparseControl>,
}

#[derive(Debug)]
struct SparseControl {
    re: Vec<(u32, u32, f64)>,
    im: Vec<(u32, u32, f64)>,
}

impl TapeSystem {
    pub fn new(system: &ControlSystem) -> Self {
        let d = system.dim();
        let sparse = system
            .controls()
            .iter()
            .map(|h| {
                let mut re = Vec::new();
                let mut im = Vec::new();
                for i in 0..d {
                    for j in 0..d {
                        let vr = h.re()[i * d + j];
                        if vr != 0.0 {
                            re.push((i as u32, j as u32, vr));
                        }
                        let vi = h.im()[i * d + j];
                        if vi != 0.0 {
                            im.push((i as u32, j as u32, vi));
                        }
                    }
                }
                SparseControl { re, im }
            })
            .collect();
        Self {
            dim: d,
            drift: system.drift().clone(),
            controls: system.controls().to_vec(),
            sparse,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_controls(&self) -> usize {
        self.controls.len()
    }

    /// `H(u) = H_0 + Σ_k u_k H_k` for one column's amplitudes.
    pub fn assemble(&self, u: &[f64]) -> RealHamiltonian {
        assert_eq!(u.len(), self.controls.len());
        let mut h = self.drift.clone();
        for (uk, hk) in u.iter().zip(&self.controls) {
            kernels::axpy(h.re_mut(), *uk, hk.re());
            kernels::axpy(h.im_mut(), *uk, hk.im());
        }
        h
    }

    /// `wᵀ M_k x` for control `k`, where `M_k` is the block generator of the
    /// k-th control operator; used for the amplitude gradient.
    fn control_bilinear(&self, k: usize, w: &[f64], x: &[f64]) -> f64 {
        let d = self.dim;
        let (wre, wim) = w.split_at(d);
        let (xre, xim) = x.split_at(d);
        let mut acc = 0.0;
        for &(i, j, v) in &self.sparse[k].re {
            let (i, j) = (i as usize, j as usize);
            acc += v * (wre[i] * xim[j] - wim[i] * xre[j]);
        }
        for &(i, j, v) in &self.sparse[k].im {
            let (i, j) = (i as usize, j as usize);
            acc += v * (wre[i] * xre[j] + wim[i] * xim[j]);
        }
        acc
    }
}

/// Build a [`TapeSystem`] from a validated system.
impl From<&ControlSystem> for TapeSystem {
    fn from(system: &ControlSystem) -> Self {
        Self::new(system)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `y = W x + b`, columnwise; `W` row-major `(m, n)`, `b` length `m`.
    Affine { w: u32, b: u32, x: u32 },
    /// `y = W x`, columnwise.
    MatVec { m: u32, x: u32 },
    Relu { x: u32 },
    Add { a: u32, b: u32 },
    Sub { a: u32, b: u32 },
    /// Elementwise product.
    Mul { a: u32, b: u32 },
    /// `a + k b`, elementwise with constant `k`.
    AddScaled { a: u32, b: u32, k: f64 },
    /// `s + half_dt (k1 + k2)`: the trapezoidal combination of a Heun step.
    HeunCombine { s: u32, k1: u32, k2: u32, half_dt: f64 },
    /// `a x + b`, elementwise with constants.
    ScaleShift { x: u32, a: f64 },
    Square { x: u32 },
    Abs { x: u32 },
    Sqrt { x: u32 },
    /// Column sums: `(n, c) -> (1, c)`.
    SumCols { x: u32 },
    /// Column Euclidean norms: `(n, c) -> (1, c)`.
    Norm2Cols { x: u32 },
    /// Columnwise dot products: `(n, c)² -> (1, c)`.
    DotCols { a: u32, b: u32 },
    /// Columnwise dot with a constant vector.
    DotConstCols { x: u32, w: Arc<Vec<f64>> },
    /// `scale · Σ_j mask_j x_j`: collapses a `(1, c)` row to a scalar.
    MaskedSum { x: u32, mask: Arc<Vec<f64>>, scale: f64 },
    /// Per-column generator application `y_j = M(u_j) x_j` with the
    /// assembled operators stored on the tape at `gen0 + j`.
    ApplyGen { sys: Arc<TapeSystem>, gen0: u32, u: u32, x: u32 },
}

/// Gradients of the registered parameter tensors, in registration order.
/// Shapes match the parameter tensors exactly; parameters that do not reach
/// the loss have zero gradients.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub tensors: Vec<Vec<f64>>,
}

impl GradientSet {
    /// Concatenation of all tensors, in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.tensors.iter().map(Vec::len).sum());
        for t in &self.tensors {
            out.extend_from_slice(t);
        }
        out
    }
}

/// The recording tape.
#[derive(Debug, Default)]
pub struct Tape {
    rows: Vec<u32>,
    cols: Vec<u32>,
    offs: Vec<usize>,
    ops: Vec<Op>,
    vals: Vec<f64>,
    grads: Vec<f64>,
    gens: Vec<RealHamiltonian>,
    params: Vec<u32>,
    grads_ready: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all nodes but keeps allocated capacity for reuse.
    pub fn clear(&mut self) {
        self.rows.clear();
        self.cols.clear();
        self.offs.clear();
        self.ops.clear();
        self.vals.clear();
        self.grads.clear();
        self.gens.clear();
        self.params.clear();
        self.grads_ready = false;
    }

    pub fn num_nodes(&self) -> usize {
        self.ops.len()
    }

    pub fn rows(&self, id: NodeId) -> usize {
        self.rows[id.idx()] as usize
    }

    pub fn cols(&self, id: NodeId) -> usize {
        self.cols[id.idx()] as usize
    }

    fn len_of(&self, id: NodeId) -> usize {
        self.rows(id) * self.cols(id)
    }

    pub fn val(&self, id: NodeId) -> &[f64] {
        let off = self.offs[id.idx()];
        &self.vals[off..off + self.len_of(id)]
    }

    pub fn val_scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.len_of(id), 1);
        self.vals[self.offs[id.idx()]]
    }

    /// Gradient of a node; valid after [`Tape::backward`].
    pub fn grad(&self, id: NodeId) -> &[f64] {
        assert!(self.grads_ready, "backward() has not been run on this tape");
        let off = self.offs[id.idx()];
        &self.grads[off..off + self.len_of(id)]
    }

    fn push_node(&mut self, rows: usize, cols: usize, op: Op) -> (NodeId, usize) {
        let id = NodeId(self.ops.len() as u32);
        let off = self.vals.len();
        self.rows.push(rows as u32);
        self.cols.push(cols as u32);
        self.offs.push(off);
        self.ops.push(op);
        self.vals.resize(off + rows * cols, 0.0);
        self.grads_ready = false;
        (id, off)
    }

    /// A constant leaf node.
    pub fn leaf(&mut self, rows: usize, cols: usize, data: &[f64]) -> NodeId {
        assert_eq!(data.len(), rows * cols, "leaf data does not match shape");
        let (id, off) = self.push_node(rows, cols, Op::Leaf);
        self.vals[off..off + data.len()].copy_from_slice(data);
        id
    }

    pub fn leaf_scalar(&mut self, v: f64) -> NodeId {
        self.leaf(1, 1, &[v])
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> NodeId {
        let (id, _) = self.push_node(rows, cols, Op::Leaf);
        id
    }

    /// A leaf registered as a trainable parameter tensor. Parameter gradients
    /// are collected by [`Tape::gradient_set`] in registration order.
    pub fn param(&mut self, rows: usize, cols: usize, data: &[f64]) -> NodeId {
        let id = self.leaf(rows, cols, data);
        self.params.push(id.0);
        id
    }

    /// Gradients of all registered parameters.
    pub fn gradient_set(&self) -> GradientSet {
        GradientSet {
            tensors: self.params.iter().map(|&p| self.grad(NodeId(p)).to_vec()).collect(),
        }
    }

    fn assert_same_shape(&self, a: NodeId, b: NodeId, ctx: &str) {
        assert!(
            self.rows(a) == self.rows(b) && self.cols(a) == self.cols(b),
            "shape mismatch in {ctx}: ({}, {}) vs ({}, {})",
            self.rows(a),
            self.cols(a),
            self.rows(b),
            self.cols(b)
        );
    }

    /// `W x + b` columnwise; `relu(W x + b)` is one `affine` + one `relu`.
    pub fn affine(&mut self, w: NodeId, b: NodeId, x: NodeId) -> NodeId {
        let (m, n) = (self.rows(w), self.cols(w));
        let c = self.cols(x);
        assert_eq!(self.rows(x), n, "affine: input rows must equal weight cols");
        assert_eq!(self.rows(b), m, "affine: bias length must equal weight rows");
        assert_eq!(self.cols(b), 1, "affine: bias must be a vector");
        let (wo, bo, xo) = (self.offs[w.idx()], self.offs[b.idx()], self.offs[x.idx()]);
        let (id, off) = self.push_node(m, c, Op::Affine { w: w.0, b: b.0, x: x.0 });
        let (head, tail) = self.vals.split_at_mut(off);
        let wv = &head[wo..wo + m * n];
        let bv = &head[bo..bo + m];
        let xv = &head[xo..xo + n * c];
        for j in 0..c {
            let xcol = &xv[j * n..(j + 1) * n];
            let ycol = &mut tail[j * m..(j + 1) * m];
            for i in 0..m {
                ycol[i] = kernels::dot(&wv[i * n..(i + 1) * n], xcol) + bv[i];
            }
        }
        id
    }

    /// `W x` columnwise.
    pub fn matvec(&mut self, mat: NodeId, x: NodeId) -> NodeId {
        let (m, n) = (self.rows(mat), self.cols(mat));
        let c = self.cols(x);
        assert_eq!(self.rows(x), n, "matvec: input rows must equal matrix cols");
        let (mo, xo) = (self.offs[mat.idx()], self.offs[x.idx()]);
        let (id, off) = self.push_node(m, c, Op::MatVec { m: mat.0, x: x.0 });
        let (head, tail) = self.vals.split_at_mut(off);
        let mv = &head[mo..mo + m * n];
        let xv = &head[xo..xo + n * c];
        for j in 0..c {
            let xcol = &xv[j * n..(j + 1) * n];
            let ycol = &mut tail[j * m..(j + 1) * m];
            for i in 0..m {
                ycol[i] = kernels::dot(&mv[i * n..(i + 1) * n], xcol);
            }
        }
        id
    }

    fn unary_elementwise(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let (r, c) = (self.rows(x), self.cols(x));
        let xo = self.offs[x.idx()];
        let (id, off) = self.push_node(r, c, op);
        let (head, tail) = self.vals.split_at_mut(off);
        for (out, &xi) in tail.iter_mut().zip(&head[xo..xo + r * c]) {
            *out = f(xi);
        }
        id
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary_elementwise(x, Op::Relu { x: x.0 }, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary_elementwise(x, Op::Square { x: x.0 }, |v| v * v)
    }

    /// Elementwise absolute value; the gradient at exactly zero is zero.
    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary_elementwise(x, Op::Abs { x: x.0 }, f64::abs)
    }

    /// Elementwise square root; the gradient at exactly zero is zero.
    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary_elementwise(x, Op::Sqrt { x: x.0 }, f64::sqrt)
    }

    /// `a x + b` elementwise with constants.
    pub fn scale_shift(&mut self, x: NodeId, a: f64, b: f64) -> NodeId {
        self.unary_elementwise(x, Op::ScaleShift { x: x.0, a }, |v| a * v + b)
    }

    fn binary_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
        ctx: &str,
    ) -> NodeId {
        self.assert_same_shape(a, b, ctx);
        let (r, c) = (self.rows(a), self.cols(a));
        let (ao, bo) = (self.offs[a.idx()], self.offs[b.idx()]);
        let (id, off) = self.push_node(r, c, op);
        let (head, tail) = self.vals.split_at_mut(off);
        let av = &head[ao..ao + r * c];
        let bv = &head[bo..bo + r * c];
        for (i, out) in tail.iter_mut().enumerate() {
            *out = f(av[i], bv[i]);
        }
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, Op::Add { a: a.0, b: b.0 }, |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, Op::Sub { a: a.0, b: b.0 }, |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, Op::Mul { a: a.0, b: b.0 }, |x, y| x * y, "mul")
    }

    /// `a + k b` elementwise.
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, k: f64) -> NodeId {
        self.binary_elementwise(
            a,
            b,
            Op::AddScaled { a: a.0, b: b.0, k },
            |x, y| y.mul_add(k, x),
            "add_scaled",
        )
    }

    /// `s + half_dt (k1 + k2)`: the trapezoidal Heun combination.
    pub fn heun_combine(&mut self, s: NodeId, k1: NodeId, k2: NodeId, half_dt: f64) -> NodeId {
        self.assert_same_shape(s, k1, "heun_combine");
        self.assert_same_shape(s, k2, "heun_combine");
        let (r, c) = (self.rows(s), self.cols(s));
        let (so, k1o, k2o) = (self.offs[s.idx()], self.offs[k1.idx()], self.offs[k2.idx()]);
        let (id, off) = self.push_node(
            r,
            c,
            Op::HeunCombine { s: s.0, k1: k1.0, k2: k2.0, half_dt },
        );
        let (head, tail) = self.vals.split_at_mut(off);
        let sv = &head[so..so + r * c];
        let k1v = &head[k1o..k1o + r * c];
        let k2v = &head[k2o..k2o + r * c];
        for (i, out) in tail.iter_mut().enumerate() {
            *out = (k1v[i] + k2v[i]).mul_add(half_dt, sv[i]);
        }
        id
    }

    fn columnwise_reduce(&mut self, x: NodeId, op: Op, f: impl Fn(&[f64]) -> f64) -> NodeId {
        let (r, c) = (self.rows(x), self.cols(x));
        let xo = self.offs[x.idx()];
        let (id, off) = self.push_node(1, c, op);
        let (head, tail) = self.vals.split_at_mut(off);
        let xv = &head[xo..xo + r * c];
        for j in 0..c {
            tail[j] = f(&xv[j * r..(j + 1) * r]);
        }
        id
    }

    /// Column sums: `(n, c) -> (1, c)`.
    pub fn sum_cols(&mut self, x: NodeId) -> NodeId {
        self.columnwise_reduce(x, Op::SumCols { x: x.0 }, |col| {
            let mut s = 0.0;
            for v in col {
                s += v;
            }
            s
        })
    }

    /// Column Euclidean norms; the gradient of a zero column is zero.
    pub fn norm2_cols(&mut self, x: NodeId) -> NodeId {
        self.columnwise_reduce(x, Op::Norm2Cols { x: x.0 }, |col| kernels::norm_sq(col).sqrt())
    }

    /// Columnwise dot products of two equally shaped batch nodes.
    pub fn dot_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape(a, b, "dot_cols");
        let (r, c) = (self.rows(a), self.cols(a));
        let (ao, bo) = (self.offs[a.idx()], self.offs[b.idx()]);
        let (id, off) = self.push_node(1, c, Op::DotCols { a: a.0, b: b.0 });
        let (head, tail) = self.vals.split_at_mut(off);
        let av = &head[ao..ao + r * c];
        let bv = &head[bo..bo + r * c];
        for j in 0..c {
            tail[j] = kernels::dot(&av[j * r..(j + 1) * r], &bv[j * r..(j + 1) * r]);
        }
        id
    }

    /// Columnwise dot with a constant vector.
    pub fn dot_const_cols(&mut self, x: NodeId, w: Arc<Vec<f64>>) -> NodeId {
        let (r, c) = (self.rows(x), self.cols(x));
        assert_eq!(w.len(), r, "dot_const_cols: constant length mismatch");
        let xo = self.offs[x.idx()];
        let (id, off) = self.push_node(1, c, Op::DotConstCols { x: x.0, w: Arc::clone(&w) });
        let (head, tail) = self.vals.split_at_mut(off);
        let xv = &head[xo..xo + r * c];
        for j in 0..c {
            tail[j] = kernels::dot(&xv[j * r..(j + 1) * r], &w);
        }
        id
    }

    /// `scale · Σ_j mask_j x_j` over a `(1, c)` row, producing the scalar that
    /// seeds backpropagation. Masking excludes aborted trajectories.
    pub fn masked_sum(&mut self, x: NodeId, mask: Arc<Vec<f64>>, scale: f64) -> NodeId {
        let c = self.cols(x);
        assert_eq!(self.rows(x), 1, "masked_sum expects a (1, c) row");
        assert_eq!(mask.len(), c, "masked_sum: mask length mismatch");
        let xo = self.offs[x.idx()];
        let (id, off) = self.push_node(1, 1, Op::MaskedSum { x: x.0, mask: Arc::clone(&mask), scale });
        let (head, tail) = self.vals.split_at_mut(off);
        let xv = &head[xo..xo + c];
        let mut s = 0.0;
        for j in 0..c {
            s += mask[j] * xv[j];
        }
        tail[0] = scale * s;
        id
    }

    /// Stores an assembled interval operator, returning its generator index.
    pub fn push_assembled(&mut self, h: RealHamiltonian) -> usize {
        self.gens.push(h);
        self.gens.len() - 1
    }

    /// Assembles `H(u_j)` for every column of `u` and stores them
    /// consecutively; returns the base generator index.
    pub fn assemble_columns(&mut self, sys: &Arc<TapeSystem>, u: NodeId) -> usize {
        let k = self.rows(u);
        let c = self.cols(u);
        assert_eq!(k, sys.num_controls(), "control count mismatch");
        let base = self.gens.len();
        let uo = self.offs[u.idx()];
        for j in 0..c {
            let ucol = &self.vals[uo + j * k..uo + (j + 1) * k];
            let h = sys.assemble(ucol);
            self.gens.push(h);
        }
        base
    }

    /// Per-column application of the assembled generators: column `j` of the
    /// output is `M(gens[gen0 + j]) x_j`. Gradients flow to both the state
    /// and, through the sparse control entries, the amplitudes `u`.
    pub fn apply_generator(
        &mut self,
        sys: &Arc<TapeSystem>,
        gen0: usize,
        u: NodeId,
        x: NodeId,
    ) -> NodeId {
        let d2 = 2 * sys.dim();
        let c = self.cols(x);
        assert_eq!(self.rows(x), d2, "apply_generator: stacked state rows must be 2D");
        assert_eq!(self.cols(u), c, "apply_generator: u and x batch widths differ");
        assert!(gen0 + c <= self.gens.len(), "apply_generator: generators missing");
        let xo = self.offs[x.idx()];
        let (id, off) = self.push_node(
            d2,
            c,
            Op::ApplyGen { sys: Arc::clone(sys), gen0: gen0 as u32, u: u.0, x: x.0 },
        );
        let (head, tail) = self.vals.split_at_mut(off);
        let xv = &head[xo..xo + d2 * c];
        for j in 0..c {
            self.gens[gen0 + j].apply_stacked(&xv[j * d2..(j + 1) * d2], &mut tail[j * d2..(j + 1) * d2]);
        }
        id
    }

    /// Quarantines an aborted trajectory: every non-finite entry anywhere on
    /// the tape (values and assembled generators) is overwritten with zero.
    /// Columns never mix before the final masked reduction, so non-finite
    /// values can only live in the aborted trajectory's own column; zeroing
    /// them keeps the remaining columns' backward pass exact (their adjoints
    /// never multiply a NaN).
    pub fn sanitize_non_finite(&mut self) {
        for v in &mut self.vals {
            if !v.is_finite() {
                *v = 0.0;
            }
        }
        for g in &mut self.gens {
            for v in g.re_mut() {
                if !v.is_finite() {
                    *v = 0.0;
                }
            }
            for v in g.im_mut() {
                if !v.is_finite() {
                    *v = 0.0;
                }
            }
        }
    }

    /// Backpropagates from a scalar loss node with seed adjoint 1.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.backward_scaled(loss, 1.0)
    }

    /// Backpropagates from a scalar loss node with the given seed adjoint.
    pub fn backward_scaled(&mut self, loss: NodeId, seed: f64) -> Result<()> {
        if self.len_of(loss) != 1 {
            return Err(Error::Autodiff(format!(
                "backward requires a scalar loss, got shape ({}, {})",
                self.rows(loss),
                self.cols(loss)
            )));
        }
        self.grads.clear();
        self.grads.resize(self.vals.len(), 0.0);
        self.grads[self.offs[loss.idx()]] = seed;

        let shape = |rows: &[u32], cols: &[u32], id: u32| {
            (rows[id as usize] as usize, cols[id as usize] as usize)
        };

        for n in (0..self.ops.len()).rev() {
            let op = self.ops[n].clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let off_n = self.offs[n];
            let len_n = (self.rows[n] as usize) * (self.cols[n] as usize);
            // The node's adjoint lives at [off_n, off_n + len_n); all parent
            // buffers precede it in the arena.
            let (ghead, gtail) = self.grads.split_at_mut(off_n);
            let gout = &gtail[..len_n];
            let vals = &self.vals;
            match op {
                Op::Leaf => unreachable!(),
                Op::Affine { w, b, x } => {
                    let (m, ncols) = shape(&self.rows, &self.cols, w);
                    let (_, c) = shape(&self.rows, &self.cols, x);
                    let wo = self.offs[w as usize];
                    let bo = self.offs[b as usize];
                    let xo = self.offs[x as usize];
                    let wv = &vals[wo..wo + m * ncols];
                    let xv = &vals[xo..xo + ncols * c];
                    // dW += G Xᵀ
                    {
                        let gw = &mut ghead[wo..wo + m * ncols];
                        for j in 0..c {
                            let gcol = &gout[j * m..(j + 1) * m];
                            let xcol = &xv[j * ncols..(j + 1) * ncols];
                            for i in 0..m {
                                if gcol[i] != 0.0 {
                                    kernels::axpy(&mut gw[i * ncols..(i + 1) * ncols], gcol[i], xcol);
                                }
                            }
                        }
                    }
                    // db += column sums of G
                    {
                        let gb = &mut ghead[bo..bo + m];
                        for j in 0..c {
                            kernels::axpy(gb, 1.0, &gout[j * m..(j + 1) * m]);
                        }
                    }
                    // dX += Wᵀ G
                    {
                        let gx = &mut ghead[xo..xo + ncols * c];
                        for j in 0..c {
                            let gcol = &gout[j * m..(j + 1) * m];
                            let gxcol = &mut gx[j * ncols..(j + 1) * ncols];
                            for i in 0..m {
                                if gcol[i] != 0.0 {
                                    kernels::axpy(gxcol, gcol[i], &wv[i * ncols..(i + 1) * ncols]);
                                }
                            }
                        }
                    }
                }
                Op::MatVec { m: w, x } => {
                    let (m, ncols) = shape(&self.rows, &self.cols, w);
                    let (_, c) = shape(&self.rows, &self.cols, x);
                    let wo = self.offs[w as usize];
                    let xo = self.offs[x as usize];
                    let wv = &vals[wo..wo + m * ncols];
                    let xv = &vals[xo..xo + ncols * c];
                    {
                        let gw = &mut ghead[wo..wo + m * ncols];
                        for j in 0..c {
                            let gcol = &gout[j * m..(j + 1) * m];
                            let xcol = &xv[j * ncols..(j + 1) * ncols];
                            for i in 0..m {
                                if gcol[i] != 0.0 {
                                    kernels::axpy(&mut gw[i * ncols..(i + 1) * ncols], gcol[i], xcol);
                                }
                            }
                        }
                    }
                    {
                        let gx = &mut ghead[xo..xo + ncols * c];
                        for j in 0..c {
                            let gcol = &gout[j * m..(j + 1) * m];
                            let gxcol = &mut gx[j * ncols..(j + 1) * ncols];
                            for i in 0..m {
                                if gcol[i] != 0.0 {
                                    kernels::axpy(gxcol, gcol[i], &wv[i * ncols..(i + 1) * ncols]);
                                }
                            }
                        }
                    }
                }
                Op::Relu { x } => {
                    let xo = self.offs[x as usize];
                    let xv = &vals[xo..xo + len_n];
                    let gx = &mut ghead[xo..xo + len_n];
                    for i in 0..len_n {
                        if xv[i] > 0.0 {
                            gx[i] += gout[i];
                        }
                    }
                }
                Op::Add { a, b } => {
                    let ao = self.offs[a as usize];
                    kernels::axpy(&mut ghead[ao..ao + len_n], 1.0, gout);
                    let bo = self.offs[b as usize];
                    kernels::axpy(&mut ghead[bo..bo + len_n], 1.0, gout);
                }
                Op::Sub { a, b } => {
                    let ao = self.offs[a as usize];
                    kernels::axpy(&mut ghead[ao..ao + len_n], 1.0, gout);
                    let bo = self.offs[b as usize];
                    kernels::axpy(&mut ghead[bo..bo + len_n], -1.0, gout);
                }
                Op::Mul { a, b } => {
                    let ao = self.offs[a as usize];
                    let bo = self.offs[b as usize];
                    {
                        let bv = &vals[bo..bo + len_n];
                        let ga = &mut ghead[ao..ao + len_n];
                        for i in 0..len_n {
                            ga[i] = gout[i].mul_add(bv[i], ga[i]);
                        }
                    }
                    {
                        let av = &vals[ao..ao + len_n];
                        let gb = &mut ghead[bo..bo + len_n];
                        for i in 0..len_n {
                            gb[i] = gout[i].mul_add(av[i], gb[i]);
                        }
                    }
                }
                Op::AddScaled { a, b, k } => {
                    let ao = self.offs[a as usize];
                    kernels::axpy(&mut ghead[ao..ao + len_n], 1.0, gout);
                    let bo = self.offs[b as usize];
                    kernels::axpy(&mut ghead[bo..bo + len_n], k, gout);
                }
                Op::HeunCombine { s, k1, k2, half_dt } => {
                    let so = self.offs[s as usize];
                    kernels::axpy(&mut ghead[so..so + len_n], 1.0, gout);
                    let k1o = self.offs[k1 as usize];
                    kernels::axpy(&mut ghead[k1o..k1o + len_n], half_dt, gout);
                    let k2o = self.offs[k2 as usize];
                    kernels::axpy(&mut ghead[k2o..k2o + len_n], half_dt, gout);
                }
                Op::ScaleShift { x, a } => {
                    let xo = self.offs[x as usize];
                    kernels::axpy(&mut ghead[xo..xo + len_n], a, gout);
                }
                Op::Square { x } => {
                    let xo = self.offs[x as usize];
                    let xv = &vals[xo..xo + len_n];
                    let gx = &mut ghead[xo..xo + len_n];
                    for i in 0..len_n {
                        gx[i] = (2.0 * xv[i]).mul_add(gout[i], gx[i]);
                    }
                }
                Op::Abs { x } => {
                    let xo = self.offs[x as usize];
                    let xv = &vals[xo..xo + len_n];
                    let gx = &mut ghead[xo..xo + len_n];
                    for i in 0..len_n {
                        // Subgradient at zero is zero, matching ReLU.
                        let s: f64 = if xv[i] > 0.0 {
                            1.0
                        } else if xv[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        gx[i] = s.mul_add(gout[i], gx[i]);
                    }
                }
                Op::Sqrt { x } => {
                    let xo = self.offs[x as usize];
                    let outv = &vals[off_n..off_n + len_n];
                    let gx = &mut ghead[xo..xo + len_n];
                    for i in 0..len_n {
                        if outv[i] > 0.0 {
                            gx[i] += gout[i] / (2.0 * outv[i]);
                        }
                    }
                }
                Op::SumCols { x } => {
                    let (r, c) = shape(&self.rows, &self.cols, x);
                    let xo = self.offs[x as usize];
                    let gx = &mut ghead[xo..xo + r * c];
                    for j in 0..c {
                        let g = gout[j];
                        if g != 0.0 {
                            for v in &mut gx[j * r..(j + 1) * r] {
                                *v += g;
                            }
                        }
                    }
                }
                Op::Norm2Cols { x } => {
                    let (r, c) = shape(&self.rows, &self.cols, x);
                    let xo = self.offs[x as usize];
                    let outv = &vals[off_n..off_n + c];
                    let xv = &vals[xo..xo + r * c];
                    let gx = &mut ghead[xo..xo + r * c];
                    for j in 0..c {
                        if outv[j] > 0.0 {
                            kernels::axpy(
                                &mut gx[j * r..(j + 1) * r],
                                gout[j] / outv[j],
                                &xv[j * r..(j + 1) * r],
                            );
                        }
                    }
                }
                Op::DotCols { a, b } => {
                    let (r, c) = shape(&self.rows, &self.cols, a);
                    let ao = self.offs[a as usize];
                    let bo = self.offs[b as usize];
                    {
                        let bv = &vals[bo..bo + r * c];
                        let ga = &mut ghead[ao..ao + r * c];
                        for j in 0..c {
                            kernels::axpy(&mut ga[j * r..(j + 1) * r], gout[j], &bv[j * r..(j + 1) * r]);
                        }
                    }
                    {
                        let av = &vals[ao..ao + r * c];
                        let gb = &mut ghead[bo..bo + r * c];
                        for j in 0..c {
                            kernels::axpy(&mut gb[j * r..(j + 1) * r], gout[j], &av[j * r..(j + 1) * r]);
                        }
                    }
                }
                Op::DotConstCols { x, w } => {
                    let (r, c) = shape(&self.rows, &self.cols, x);
                    let xo = self.offs[x as usize];
                    let gx = &mut ghead[xo..xo + r * c];
                    for j in 0..c {
                        if gout[j] != 0.0 {
                            kernels::axpy(&mut gx[j * r..(j + 1) * r], gout[j], &w);
                        }
                    }
                }
                Op::MaskedSum { x, mask, scale } => {
                    let (_, c) = shape(&self.rows, &self.cols, x);
                    let xo = self.offs[x as usize];
                    let g = gout[0] * scale;
                    let gx = &mut ghead[xo..xo + c];
                    for j in 0..c {
                        gx[j] = mask[j].mul_add(g, gx[j]);
                    }
                }
                Op::ApplyGen { sys, gen0, u, x } => {
                    let d2 = 2 * sys.dim();
                    let k = sys.num_controls();
                    let (_, c) = shape(&self.rows, &self.cols, x);
                    let xo = self.offs[x as usize];
                    let uo = self.offs[u as usize];
                    // dX += M(u_j)ᵀ g_j
                    {
                        let gx = &mut ghead[xo..xo + d2 * c];
                        for j in 0..c {
                            self.gens[gen0 as usize + j].apply_stacked_transpose_add(
                                &gout[j * d2..(j + 1) * d2],
                                &mut gx[j * d2..(j + 1) * d2],
                            );
                        }
                    }
                    // du_k += gᵀ M_k x, via the sparse control entries
                    {
                        let xv = &vals[xo..xo + d2 * c];
                        let gu = &mut ghead[uo..uo + k * c];
                        for j in 0..c {
                            let gcol = &gout[j * d2..(j + 1) * d2];
                            let xcol = &xv[j * d2..(j + 1) * d2];
                            for kk in 0..k {
                                gu[j * k + kk] += sys.control_bilinear(kk, gcol, xcol);
                            }
                        }
                    }
                }
            }
        }
        self.grads_ready = true;
        Ok(())
    }
}

/// Maximum relative error between an analytic gradient and central finite
/// differences of `f` over a random coordinate subset.
///
/// For every checked coordinate `i`, compares `analytic[i]` against
/// `(f(θ + ε eᵢ) - f(θ - ε eᵢ)) / 2ε` with relative denominator
/// `max(|analytic|, |numeric|, 1e-12)`. `subset` coordinates are sampled
/// without replacement when the parameter vector is larger than the subset;
/// a subset below 50 falls back to 50.
pub fn grad_check(
    f: impl Fn(&[f64]) -> f64,
    theta: &[f64],
    analytic: &[f64],
    eps: f64,
    subset: usize,
    seed: u64,
) -> f64 {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    assert_eq!(theta.len(), analytic.len());
    assert!((1e-7..=1e-3).contains(&eps), "eps must lie in [1e-7, 1e-3]");
    let n = theta.len();
    let take = subset.max(50).min(n);
    let coords: Vec<usize> = if take == n {
        (0..n).collect()
    } else {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx.truncate(take);
        idx
    };

    let mut work = theta.to_vec();
    let mut max_rel = 0.0f64;
    for &i in &coords {
        let orig = work[i];
        work[i] = orig + eps;
        let fp = f(&work);
        work[i] = orig - eps;
        let fm = f(&work);
        work[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-12);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::realspace::RealHamiltonian;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Finite-difference check of a scalar-valued tape computation with a
    /// single flat input leaf of shape (rows, cols).
    fn fd_check(
        build: impl Fn(&mut Tape, NodeId) -> NodeId,
        rows: usize,
        cols: usize,
        x0: &[f64],
        tol: f64,
    ) {
        let eval = |x: &[f64]| {
            let mut t = Tape::new();
            let leaf = t.leaf(rows, cols, x);
            let loss = build(&mut t, leaf);
            t.val_scalar(loss)
        };
        let mut t = Tape::new();
        let leaf = t.param(rows, cols, x0);
        let loss = build(&mut t, leaf);
        t.backward(loss).unwrap();
        let analytic = t.grad(leaf).to_vec();
        let err = grad_check(eval, x0, &analytic, 1e-5, x0.len(), 0);
        assert!(err < tol, "finite-difference mismatch: {err:.3e}");
    }

    fn collapse(t: &mut Tape, x: NodeId) -> NodeId {
        // Reduce an arbitrary (r, c) node to a scalar with nontrivial
        // weights so every entry influences the loss.
        let (r, c) = (t.rows(x), t.cols(x));
        let w: Vec<f64> = (0..r).map(|i| 0.3 + 0.1 * i as f64).collect();
        let row = t.dot_const_cols(x, Arc::new(w));
        let mask: Vec<f64> = (0..c).map(|j| 1.0 - 0.05 * j as f64).collect();
        t.masked_sum(row, Arc::new(mask), 0.7)
    }

    #[test]
    fn identity_loss_has_unit_gradient() {
        let mut t = Tape::new();
        let x = t.param(1, 1, &[3.25]);
        t.backward(x).unwrap();
        assert_eq!(t.grad(x), &[1.0]);
    }

    #[test]
    fn quadratic_gradient_is_two_theta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = rand_vec(&mut rng, 17);
        let mut t = Tape::new();
        let x = t.param(17, 1, &x0);
        let sq = t.square(x);
        let s = t.sum_cols(sq);
        let ones = Arc::new(vec![1.0]);
        let loss = t.masked_sum(s, ones, 1.0);
        t.backward(loss).unwrap();
        for (g, v) in t.grad(x).iter().zip(&x0) {
            assert!((g - 2.0 * v).abs() < 1e-14);
        }
        // analytic oracle through grad_check: exact for quadratics
        let eval = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let analytic: Vec<f64> = x0.iter().map(|v| 2.0 * v).collect();
        assert!(grad_check(eval, &x0, &analytic, 1e-5, 64, 7) < 1e-9);
    }

    #[test]
    fn constant_function_reports_zero_error() {
        let theta = [0.4, -0.2, 1.1];
        let analytic = [0.0; 3];
        assert_eq!(grad_check(|_| 2.5, &theta, &analytic, 1e-5, 50, 0), 0.0);
    }

    #[test]
    fn non_scalar_loss_is_a_usage_error() {
        let mut t = Tape::new();
        let x = t.param(3, 1, &[1.0, 2.0, 3.0]);
        let y = t.relu(x);
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut t = Tape::new();
        let used = t.param(1, 1, &[2.0]);
        let unused = t.param(4, 1, &[1.0, 1.0, 1.0, 1.0]);
        let loss = t.square(used);
        t.backward(loss).unwrap();
        assert!(t.grad(unused).iter().all(|&g| g == 0.0));
        let gs = t.gradient_set();
        assert_eq!(gs.tensors.len(), 2);
        assert_eq!(gs.tensors[1], vec![0.0; 4]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_pinned_to_zero() {
        let mut t = Tape::new();
        let x = t.param(3, 1, &[-1.0, 0.0, 2.0]);
        let y = t.relu(x);
        let loss = collapse(&mut t, y);
        t.backward(loss).unwrap();
        let g = t.grad(x);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0, "ReLU gradient at exactly 0 must be 0");
        assert!(g[2] != 0.0);
    }

    #[test]
    fn abs_subgradient_at_zero_is_pinned_to_zero() {
        let mut t = Tape::new();
        let x = t.param(3, 1, &[-0.5, 0.0, 0.5]);
        let y = t.abs(x);
        let loss = collapse(&mut t, y);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x)[1], 0.0, "|u| gradient at u = 0 must be 0");
    }

    #[test]
    fn norm2_gradient_of_zero_column_is_zero() {
        let mut t = Tape::new();
        let x = t.param(2, 2, &[0.0, 0.0, 3.0, 4.0]);
        let n = t.norm2_cols(x);
        assert_eq!(t.val(n), &[0.0, 5.0]);
        let ones = Arc::new(vec![1.0, 1.0]);
        let loss = t.masked_sum(n, ones, 1.0);
        t.backward(loss).unwrap();
        let g = t.grad(x);
        assert_eq!(&g[..2], &[0.0, 0.0]);
        assert!((g[2] - 0.6).abs() < 1e-15 && (g[3] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = rand_vec(&mut rng, 12);
        fd_check(
            |t, x| {
                let y = t.relu(x);
                collapse(t, y)
            },
            4,
            3,
            &x0,
            1e-8,
        );
        fd_check(
            |t, x| {
                let y = t.square(x);
                collapse(t, y)
            },
            4,
            3,
            &x0,
            1e-8,
        );
        fd_check(
            |t, x| {
                let y = t.scale_shift(x, -1.7, 0.4);
                collapse(t, y)
            },
            4,
            3,
            &x0,
            1e-8,
        );
        let positive: Vec<f64> = x0.iter().map(|v| v.abs() + 0.5).collect();
        fd_check(
            |t, x| {
                let y = t.sqrt(x);
                collapse(t, y)
            },
            4,
            3,
            &positive,
            1e-8,
        );
        let away_from_zero: Vec<f64> = x0.iter().map(|v| v + 2.0 * v.signum()).collect();
        fd_check(
            |t, x| {
                let y = t.abs(x);
                collapse(t, y)
            },
            4,
            3,
            &away_from_zero,
            1e-8,
        );
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_vec(&mut rng, 6);
        fd_check(
            |t, x| {
                let y = t.mul(x, x);
                collapse(t, y)
            },
            3,
            2,
            &x0,
            1e-8,
        );
        fd_check(
            |t, x| {
                let y = t.relu(x);
                let z = t.add_scaled(x, y, -0.3);
                collapse(t, z)
            },
            3,
            2,
            &x0,
            1e-8,
        );
        fd_check(
            |t, x| {
                let sq = t.square(x);
                let z = t.sub(x, sq);
                let w = t.add(z, x);
                collapse(t, w)
            },
            3,
            2,
            &x0,
            1e-8,
        );
        fd_check(
            |t, x| {
                let d = t.dot_cols(x, x);
                let mask: Vec<f64> = vec![0.9, 1.1];
                t.masked_sum(d, Arc::new(mask), 0.5)
            },
            3,
            2,
            &x0,
            1e-8,
        );
        fd_check(
            |t, x| {
                let n = t.norm2_cols(x);
                let mask: Vec<f64> = vec![1.0, 0.7];
                t.masked_sum(n, Arc::new(mask), 1.0)
            },
            3,
            2,
            &x0,
            1e-8,
        );
        fd_check(
            |t, x| {
                let s = t.sum_cols(x);
                let mask: Vec<f64> = vec![1.0, -0.4];
                t.masked_sum(s, Arc::new(mask), 1.3)
            },
            3,
            2,
            &x0,
            1e-8,
        );
    }

    #[test]
    fn affine_and_matvec_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (m, n, c) = (4, 3, 2);
        // all of W, b, x in one flat leaf so a single fd_check covers them
        let total = m * n + m + n * c;
        let x0 = rand_vec(&mut rng, total);
        let eval = |flat: &[f64]| {
            let mut t = Tape::new();
            let w = t.leaf(m, n, &flat[..m * n]);
            let b = t.leaf(m, 1, &flat[m * n..m * n + m]);
            let x = t.leaf(n, c, &flat[m * n + m..]);
            let y = t.affine(w, b, x);
            let r = t.relu(y);
            let row = t.sum_cols(r);
            let mask = Arc::new(vec![1.0, 0.8]);
            let loss = t.masked_sum(row, mask, 1.0);
            t.val_scalar(loss)
        };
        let mut t = Tape::new();
        let w = t.param(m, n, &x0[..m * n]);
        let b = t.param(m, 1, &x0[m * n..m * n + m]);
        let x = t.param(n, c, &x0[m * n + m..]);
        let y = t.affine(w, b, x);
        let r = t.relu(y);
        let row = t.sum_cols(r);
        let mask = Arc::new(vec![1.0, 0.8]);
        let loss = t.masked_sum(row, mask, 1.0);
        t.backward(loss).unwrap();
        let mut analytic = t.grad(w).to_vec();
        analytic.extend_from_slice(t.grad(b));
        analytic.extend_from_slice(t.grad(x));
        let err = grad_check(eval, &x0, &analytic, 1e-5, total, 0);
        assert!(err < 1e-8, "affine gradient mismatch: {err:.3e}");

        // matvec without bias
        let eval_mv = |flat: &[f64]| {
            let mut t = Tape::new();
            let w = t.leaf(m, n, &flat[..m * n]);
            let x = t.leaf(n, c, &flat[m * n..m * n + n * c]);
            let y = t.matvec(w, x);
            let row = t.sum_cols(y);
            let mask = Arc::new(vec![0.6, 1.0]);
            let loss = t.masked_sum(row, mask, 1.0);
            t.val_scalar(loss)
        };
        let flat_mv = &x0[..m * n + n * c];
        let mut t = Tape::new();
        let w = t.param(m, n, &flat_mv[..m * n]);
        let x = t.param(n, c, &flat_mv[m * n..]);
        let y = t.matvec(w, x);
        let row = t.sum_cols(y);
        let mask = Arc::new(vec![0.6, 1.0]);
        let loss = t.masked_sum(row, mask, 1.0);
        t.backward(loss).unwrap();
        let mut analytic = t.grad(w).to_vec();
        analytic.extend_from_slice(t.grad(x));
        let err = grad_check(eval_mv, flat_mv, &analytic, 1e-5, flat_mv.len(), 0);
        assert!(err < 1e-8, "matvec gradient mismatch: {err:.3e}");
    }

    #[test]
    fn apply_generator_matches_finite_differences() {
        // one qubit-like system with two controls, batch of 3 columns
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 3;
        let mut drift = RealHamiltonian::zero(d);
        for i in 0..d {
            drift.re_mut()[i * d + i] = i as f64 - 1.0;
        }
        let mut cx = RealHamiltonian::zero(d);
        cx.re_mut()[1] = 1.0;
        cx.re_mut()[d] = 1.0;
        let mut cy = RealHamiltonian::zero(d);
        cy.im_mut()[2] = -1.0;
        cy.im_mut()[2 * d] = 1.0;
        let system = ControlSystem::new(drift, vec![cx, cy]).unwrap();
        let sys = Arc::new(TapeSystem::new(&system));
        let c = 3;
        let k = 2;
        let d2 = 2 * d;
        let total = k * c + d2 * c;
        let flat0: Vec<f64> = {
            let mut v = rand_vec(&mut rng, total);
            // normalize each state column
            for j in 0..c {
                let col = &mut v[k * c + j * d2..k * c + (j + 1) * d2];
                let nrm = kernels::norm_sq(col).sqrt();
                for e in col {
                    *e /= nrm;
                }
            }
            v
        };
        let build = |t: &mut Tape, u: NodeId, x: NodeId, sys: &Arc<TapeSystem>| {
            let gen0 = t.assemble_columns(sys, u);
            let y = t.apply_generator(sys, gen0, u, x);
            let stage = t.add_scaled(x, y, 0.05);
            let y2 = t.apply_generator(sys, gen0, u, stage);
            let out = t.heun_combine(x, y, y2, 0.025);
            let w: Vec<f64> = (0..d2).map(|i| 0.2 + 0.15 * i as f64).collect();
            let row = t.dot_const_cols(out, Arc::new(w));
            let mask = Arc::new(vec![1.0, 0.5, 0.25]);
            t.masked_sum(row, mask, 1.0)
        };
        let eval = |flat: &[f64]| {
            let mut t = Tape::new();
            let u = t.leaf(k, c, &flat[..k * c]);
            let x = t.leaf(d2, c, &flat[k * c..]);
            let loss = build(&mut t, u, x, &sys);
            t.val_scalar(loss)
        };
        let mut t = Tape::new();
        let u = t.param(k, c, &flat0[..k * c]);
        let x = t.param(d2, c, &flat0[k * c..]);
        let loss = build(&mut t, u, x, &sys);
        t.backward(loss).unwrap();
        let mut analytic = t.grad(u).to_vec();
        analytic.extend_from_slice(t.grad(x));
        let err = grad_check(eval, &flat0, &analytic, 1e-5, total, 0);
        assert!(err < 1e-8, "apply_generator gradient mismatch: {err:.3e}");
    }

    #[test]
    fn two_backward_passes_are_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = rand_vec(&mut rng, 8);
        let mut t = Tape::new();
        let x = t.param(4, 2, &x0);
        let y = t.relu(x);
        let z = t.mul(y, x);
        let row = t.sum_cols(z);
        let mask = Arc::new(vec![1.0, 1.0]);
        let loss = t.masked_sum(row, mask, 0.5);
        t.backward(loss).unwrap();
        let first: Vec<u64> = t.grad(x).iter().map(|g| g.to_bits()).collect();
        t.backward(loss).unwrap();
        let second: Vec<u64> = t.grad(x).iter().map(|g| g.to_bits()).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn batch_columns_are_independent_of_chunk_width() {
        // the same trajectory computed in a batch of 1 and as column 1 of a
        // batch of 3 must give bitwise-identical values and gradients
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w0 = rand_vec(&mut rng, 6);
        let b0 = rand_vec(&mut rng, 2);
        let cols: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, 3)).collect();

        let run = |xcols: &[&[f64]], pick: usize| -> (f64, Vec<f64>) {
            let c = xcols.len();
            let mut flat = Vec::new();
            for col in xcols {
                flat.extend_from_slice(col);
            }
            let mut t = Tape::new();
            let w = t.param(2, 3, &w0);
            let b = t.param(2, 1, &b0);
            let x = t.leaf(3, c, &flat);
            let y = t.affine(w, b, x);
            let r = t.relu(y);
            let row = t.sum_cols(r);
            let mut mask = vec![0.0; c];
            mask[pick] = 1.0;
            let loss = t.masked_sum(row, Arc::new(mask), 1.0);
            t.backward(loss).unwrap();
            (t.val_scalar(loss), t.grad(w).to_vec())
        };

        let (v_single, g_single) = run(&[&cols[1]], 0);
        let (v_batch, g_batch) = run(&[&cols[0], &cols[1], &cols[2]], 1);
        assert_eq!(v_single.to_bits(), v_batch.to_bits());
        for (a, b) in g_single.iter().zip(&g_batch) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
