//! Tape of forward primitives with hand-written reverse passes.
//!
//! A [`Graph`] borrows a [`ParamStore`] immutably for the duration of one
//! forward/backward pass. Parameters enter the tape by reference, every other
//! value is owned by its node. Batch-norm running statistics computed in train
//! mode are queued on the graph and applied afterwards with
//! [`Graph::apply_stat_updates`].

use crate::error::{DiffError, Result};
use crate::params::{BufferId, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Running-statistics buffers for one batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub struct BnBuffers {
    pub mean: BufferId,
    pub var: BufferId,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

enum Op {
    Const,
    Param(ParamId),
    Affine { x: NodeId, w: NodeId, b: Option<NodeId> },
    MatmulConst { x: NodeId, m: Tensor },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Relu(NodeId),
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, train: bool, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax(NodeId),
    Attention { q: NodeId, k: NodeId, v: NodeId, group: usize, heads: usize, probs: Vec<f64> },
    GruGate { gx: NodeId, gh: NodeId, h: NodeId, r: Vec<f64>, z: Vec<f64>, n: Vec<f64> },
    CausalConv { x: NodeId, w: NodeId, b: NodeId, seq_len: usize, kernel: usize, dilation: usize },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize },
    GatherRows { x: NodeId, index: Vec<usize> },
    SumOverSet { x: NodeId, set_size: usize },
    Reshape(NodeId),
    Huber { x: NodeId, target: Tensor },
    Mean(NodeId),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar output with respect to every parameter of the store.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|t| (ParamId(i), t)))
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Mutable access used by tests that need to corrupt a gradient.
    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.as_mut())
    }

    pub(crate) fn empty(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    mode: Mode,
    nodes: Vec<Node>,
    stat_updates: Vec<(BufferId, Tensor)>,
}

fn shape_err(op: &'static str, detail: String) -> DiffError {
    DiffError::Shape { op, detail }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Self { store, mode, nodes: Vec::with_capacity(256), stat_updates: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.store.value(*p),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Const, false)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node { value: None, op: Op::Param(id), requires_grad: true });
        NodeId(self.nodes.len() - 1)
    }

    /// Queued running-statistics updates from train-mode batch norms.
    pub fn stat_updates(&self) -> &[(BufferId, Tensor)] {
        &self.stat_updates
    }

    pub fn take_stat_updates(&mut self) -> Vec<(BufferId, Tensor)> {
        std::mem::take(&mut self.stat_updates)
    }

    pub fn apply_stat_updates(updates: Vec<(BufferId, Tensor)>, store: &mut ParamStore) {
        for (id, value) in updates {
            *store.buffer_mut(id) = value;
        }
    }

    /// `x · w + b` for `x: N x in`, `w: in x out`, `b: out`.
    pub fn dense_affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xv = self.value(x);
        let wv = self.value(w);
        if wv.shape().len() != 2 || xv.cols() != wv.shape()[0] {
            return Err(shape_err("dense_affine", format!("input {:?} vs weight {:?}", xv.shape(), wv.shape())));
        }
        let (n, k, m) = (xv.rows(), xv.cols(), wv.cols());
        let mut out = vec![0.0; n * m];
        gemm(xv.data(), n, k, false, wv.data(), k, m, false, &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != m {
                return Err(shape_err("dense_affine", format!("bias {:?} for {} outputs", bv.shape(), m)));
            }
            for row in out.chunks_exact_mut(m) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::matrix(n, m, out)?;
        Ok(self.push(value, Op::Affine { x, w, b }, rg))
    }

    /// `x · m` with a constant matrix `m`.
    pub fn matmul_const(&mut self, x: NodeId, m: Tensor) -> Result<NodeId> {
        let xv = self.value(x);
        if m.shape().len() != 2 || xv.cols() != m.shape()[0] {
            return Err(shape_err("matmul_const", format!("input {:?} vs matrix {:?}", xv.shape(), m.shape())));
        }
        let (n, k, c) = (xv.rows(), xv.cols(), m.cols());
        let mut out = vec![0.0; n * c];
        gemm(xv.data(), n, k, false, m.data(), k, c, false, &mut out, false);
        let rg = self.rg(x);
        let value = Tensor::matrix(n, c, out)?;
        Ok(self.push(value, Op::MatmulConst { x, m }, rg))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).len() != self.value(b).len() || self.value(a).cols() != self.value(b).cols() {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let v = self.value(x).map(|a| a * factor);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, factor), rg)
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(&mut self, x: NodeId, c: &Tensor) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.len() != c.len() {
            return Err(shape_err("add_const", format!("{:?} vs {:?}", xv.shape(), c.shape())));
        }
        let data = xv.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::AddConst(x), rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.max(0.0));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    /// Per-column normalization over the rows of `x`.
    ///
    /// Train mode normalizes with the (biased) batch statistics and queues an
    /// exponential-moving-average update of `buffers` (unbiased variance);
    /// eval mode is the fixed affine map given by the running statistics.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, buffers: BnBuffers) -> Result<NodeId> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        let gv = self.value(gamma);
        let bv = self.value(beta);
        if gv.len() != c || bv.len() != c {
            return Err(shape_err(
                "batch_norm",
                format!("input {:?} with gamma {:?} / beta {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let train = self.mode == Mode::Train;
        let (mean, var) = if train {
            if n < 2 {
                return Err(DiffError::BatchTooSmall { rows: n });
            }
            let mut mean = vec![0.0; c];
            for row in xv.data().chunks_exact(c) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; c];
            for row in xv.data().chunks_exact(c) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= n as f64);
            (mean, var)
        } else {
            let m = self.store.buffer(buffers.mean);
            let v = self.store.buffer(buffers.var);
            if m.len() != c || v.len() != c {
                return Err(shape_err("batch_norm", format!("running stats sized {} for {} columns", m.len(), c)));
            }
            (m.data().to_vec(), v.data().to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        for (r, row) in xv.data().chunks_exact(c).enumerate() {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = h;
                out[r * c + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        if train {
            let rm = self.store.buffer(buffers.mean);
            let rv = self.store.buffer(buffers.var);
            let unbias = n as f64 / (n as f64 - 1.0);
            let new_mean: Vec<f64> =
                rm.data().iter().zip(&mean).map(|(r, m)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * m).collect();
            let new_var: Vec<f64> =
                rv.data().iter().zip(&var).map(|(r, v)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * v * unbias).collect();
            let mean_t = Tensor::new(rm.shape().to_vec(), new_mean)?;
            let var_t = Tensor::new(rv.shape().to_vec(), new_var)?;
            self.stat_updates.push((buffers.mean, mean_t));
            self.stat_updates.push((buffers.var, var_t));
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(value, Op::BatchNorm { x, gamma, beta, train, xhat, inv_std }, rg))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let v = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(v, Op::Softmax(x), rg)
    }

    /// Multi-head scaled dot-product attention within consecutive groups of
    /// `group` rows. `q`, `k`, `v` are `(G*group) x D` with `D` divisible by
    /// `heads`; each head attends over its `D/heads` column slice and the head
    /// outputs are concatenated back into `D` columns.
    pub fn scaled_dot_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        group: usize,
        heads: usize,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let rows = qv.rows();
        if kv.shape() != qv.shape()
            || vv.shape() != qv.shape()
            || heads == 0
            || d % heads != 0
            || group == 0
            || rows % group != 0
        {
            return Err(shape_err(
                "scaled_dot_attention",
                format!("q {:?}, k {:?}, v {:?}, group {}, heads {}", qv.shape(), kv.shape(), vv.shape(), group, heads),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let groups = rows / group;
        let mut probs = vec![0.0; groups * heads * group * group];
        let mut out = vec![0.0; rows * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for g in 0..groups {
            let base = g * group;
            for h in 0..heads {
                let off = h * dh;
                let p = &mut probs[(g * heads + h) * group * group..(g * heads + h + 1) * group * group];
                for i in 0..group {
                    let qi = &qd[(base + i) * d + off..(base + i) * d + off + dh];
                    let prow = &mut p[i * group..(i + 1) * group];
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &kd[(base + j) * d + off..(base + j) * d + off + dh];
                        *pj = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(base + i) * d + off..(base + i) * d + off + dh];
                    for (j, pj) in prow.iter().enumerate() {
                        let vj = &vd[(base + j) * d + off..(base + j) * d + off + dh];
                        for (o, vv) in orow.iter_mut().zip(vj) {
                            *o += pj * vv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let value = Tensor::matrix(rows, d, out)?;
        Ok(self.push(value, Op::Attention { q, k, v, group, heads, probs }, rg))
    }

    /// Gated-recurrent-unit state update from precomputed input and hidden
    /// projections (`gx = x·Wx + bx`, `gh = h·Wh + bh`, both `N x 3H`, gate
    /// order reset, update, candidate):
    ///
    /// ```text
    /// r  = σ(gx_r + gh_r)
    /// z  = σ(gx_z + gh_z)
    /// n  = tanh(gx_n + r ⊙ gh_n)
    /// h' = (1 - z) ⊙ n + z ⊙ h
    /// ```
    pub fn gru_gate(&mut self, gx: NodeId, gh: NodeId, h: NodeId) -> Result<NodeId> {
        let (gxv, ghv, hv) = (self.value(gx), self.value(gh), self.value(h));
        let hidden = hv.cols();
        let rows = hv.rows();
        if gxv.cols() != 3 * hidden || ghv.cols() != 3 * hidden || gxv.rows() != rows || ghv.rows() != rows {
            return Err(shape_err(
                "gru_cell",
                format!("gx {:?}, gh {:?}, h {:?}", gxv.shape(), ghv.shape(), hv.shape()),
            ));
        }
        let mut r = vec![0.0; rows * hidden];
        let mut z = vec![0.0; rows * hidden];
        let mut n = vec![0.0; rows * hidden];
        let mut out = vec![0.0; rows * hidden];
        for i in 0..rows {
            let gxr = gxv.row(i);
            let ghr = ghv.row(i);
            for j in 0..hidden {
                let idx = i * hidden + j;
                let rr = sigmoid(gxr[j] + ghr[j]);
                let zz = sigmoid(gxr[hidden + j] + ghr[hidden + j]);
                let nn = (gxr[2 * hidden + j] + rr * ghr[2 * hidden + j]).tanh();
                r[idx] = rr;
                z[idx] = zz;
                n[idx] = nn;
                out[idx] = (1.0 - zz) * nn + zz * hv.data()[idx];
            }
        }
        let rg = self.rg(gx) || self.rg(gh) || self.rg(h);
        let value = Tensor::matrix(rows, hidden, out)?;
        Ok(self.push(value, Op::GruGate { gx, gh, h, r, z, n }, rg))
    }

    /// Full GRU cell: projections plus gating.
    #[allow(clippy::too_many_arguments)]
    pub fn gru_cell(
        &mut self,
        x: NodeId,
        h: NodeId,
        w_input: NodeId,
        w_hidden: NodeId,
        b_input: NodeId,
        b_hidden: NodeId,
    ) -> Result<NodeId> {
        let gx = self.dense_affine(x, w_input, Some(b_input))?;
        let gh = self.dense_affine(h, w_hidden, Some(b_hidden))?;
        self.gru_gate(gx, gh, h)
    }

    /// Dilated causal 1-D convolution. `x` is `(B*seq_len) x C_in` with each
    /// sequence stored as consecutive rows; `w` is `(kernel*C_in) x C_out`
    /// with tap `k` applied to the input `(kernel-1-k)*dilation` steps back.
    pub fn causal_conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        seq_len: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let cin = xv.cols();
        let rows = xv.rows();
        let cout = wv.cols();
        if seq_len == 0 || rows % seq_len != 0 || wv.rows() != kernel * cin || bv.len() != cout || kernel == 0 {
            return Err(shape_err(
                "causal_conv1d",
                format!(
                    "x {:?} (seq_len {}), w {:?}, b {:?}, kernel {}",
                    xv.shape(),
                    seq_len,
                    wv.shape(),
                    bv.shape(),
                    kernel
                ),
            ));
        }
        let mut out = vec![0.0; rows * cout];
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(bv.data());
        }
        let mut shifted = vec![0.0; rows * cin];
        for k in 0..kernel {
            let lag = (kernel - 1 - k) * dilation;
            shift_rows(xv.data(), &mut shifted, seq_len, cin, lag);
            let wk = &wv.data()[k * cin * cout..(k + 1) * cin * cout];
            gemm(&shifted, rows, cin, false, wk, cin, cout, false, &mut out, true);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::matrix(rows, cout, out)?;
        Ok(self.push(value, Op::CausalConv { x, w, b, seq_len, kernel, dilation }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            let shapes: Vec<_> = parts.iter().map(|p| self.shape(*p).to_vec()).collect();
            return Err(shape_err("concat", format!("row counts differ: {:?}", shapes)));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        let value = Tensor::matrix(rows, total, out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|p| self.value(*p).cols() != cols) {
            let shapes: Vec<_> = parts.iter().map(|p| self.shape(*p).to_vec()).collect();
            return Err(shape_err("concat", format!("column counts differ: {:?}", shapes)));
        }
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
        }
        let rows = out.len() / cols.max(1);
        let rg = parts.iter().any(|p| self.rg(*p));
        let value = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + len > c {
            return Err(shape_err("slice_cols", format!("[{}, {}) of {:?}", start, start + len, xv.shape())));
        }
        let mut out = Vec::with_capacity(xv.rows() * len);
        for row in xv.data().chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rows = xv.rows();
        let rg = self.rg(x);
        let value = Tensor::matrix(rows, len, out)?;
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn gather_rows(&mut self, x: NodeId, index: Vec<usize>) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.cols();
        if let Some(bad) = index.iter().find(|&&i| i >= xv.rows()) {
            return Err(shape_err("gather_rows", format!("row {} of {:?}", bad, xv.shape())));
        }
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in &index {
            out.extend_from_slice(xv.row(i));
        }
        let rg = self.rg(x);
        let value = Tensor::matrix(index.len(), c, out)?;
        Ok(self.push(value, Op::GatherRows { x, index }, rg))
    }

    /// Sums each run of `set_size` consecutive rows.
    pub fn sum_over_set(&mut self, x: NodeId, set_size: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        if set_size == 0 || rows % set_size != 0 {
            return Err(shape_err("sum_over_set", format!("{} rows in sets of {}", rows, set_size)));
        }
        let groups = rows / set_size;
        let mut out = vec![0.0; groups * c];
        for (r, row) in xv.data().chunks_exact(c).enumerate() {
            let o = &mut out[(r / set_size) * c..(r / set_size + 1) * c];
            for (a, b) in o.iter_mut().zip(row) {
                *a += b;
            }
        }
        let rg = self.rg(x);
        let value = Tensor::matrix(groups, c, out)?;
        Ok(self.push(value, Op::SumOverSet { x, set_size }, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Elementwise Huber penalty (threshold 1) of `x - target`.
    pub fn huber_elementwise(&mut self, x: NodeId, target: &Tensor) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.len() != target.len() {
            return Err(shape_err("huber_elementwise", format!("{:?} vs target {:?}", xv.shape(), target.shape())));
        }
        let data = xv.data().iter().zip(target.data()).map(|(a, b)| huber(a - b)).collect();
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Huber { x, target: target.clone() }, rg))
    }

    pub fn mean_reduce(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let m = xv.sum() / xv.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let ov = self.value(output);
        if ov.len() != 1 {
            return Err(DiffError::NotScalar(ov.shape().to_vec()));
        }
        self.backward_with(output, Tensor::full(ov.shape(), 1.0))
    }

    /// Reverse pass seeded with an explicit output gradient.
    pub fn backward_with(&self, output: NodeId, seed: Tensor) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(seed);
        let mut result = Gradients::empty(self.store.params().len());

        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Const => {}
                Op::Param(p) => match &mut result.grads[p.0] {
                    Some(g) => g.add_assign(&dy),
                    slot @ None => *slot = Some(dy),
                },
                Op::Affine { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, k, m) = (xv.rows(), xv.cols(), wv.cols());
                    if self.rg(*x) {
                        let mut dx = vec![0.0; n * k];
                        gemm(dy.data(), n, m, false, wv.data(), k, m, true, &mut dx, false);
                        accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                    }
                    if self.rg(*w) {
                        let mut dw = vec![0.0; k * m];
                        gemm(xv.data(), n, k, true, dy.data(), n, m, false, &mut dw, false);
                        accumulate(&mut grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                    }
                    if let Some(b) = b {
                        if self.rg(*b) {
                            let bshape = self.shape(*b).to_vec();
                            accumulate(&mut grads, *b, Tensor::new(bshape, dy.col_sums())?);
                        }
                    }
                }
                Op::MatmulConst { x, m } => {
                    if self.rg(*x) {
                        let xv = self.value(*x);
                        let (n, k, c) = (xv.rows(), xv.cols(), m.cols());
                        let mut dx = vec![0.0; n * k];
                        gemm(dy.data(), n, c, false, m.data(), k, c, true, &mut dx, false);
                        accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, dy.clone().reshaped(self.shape(*b).to_vec())?);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, dy.reshaped(self.shape(*a).to_vec())?);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, dy.map(|v| -v).reshaped(self.shape(*b).to_vec())?);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, dy.reshaped(self.shape(*a).to_vec())?);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let d = dy.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                        accumulate(&mut grads, *a, Tensor::new(av.shape().to_vec(), d)?);
                    }
                    if self.rg(*b) {
                        let d = dy.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                        accumulate(&mut grads, *b, Tensor::new(bv.shape().to_vec(), d)?);
                    }
                }
                Op::Scale(x, f) => {
                    let f = *f;
                    accumulate(&mut grads, *x, dy.map(|v| v * f));
                }
                Op::AddConst(x) => accumulate(&mut grads, *x, dy),
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let d = dy.data().iter().zip(xv.data()).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
                }
                Op::BatchNorm { x, gamma, beta, train, xhat, inv_std } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gamma);
                    let (n, c) = (xv.rows(), xv.cols());
                    let dyd = dy.data();
                    if self.rg(*gamma) {
                        let mut dg = vec![0.0; c];
                        for r in 0..n {
                            for j in 0..c {
                                dg[j] += dyd[r * c + j] * xhat[r * c + j];
                            }
                        }
                        accumulate(&mut grads, *gamma, Tensor::new(gv.shape().to_vec(), dg)?);
                    }
                    if self.rg(*beta) {
                        let bshape = self.shape(*beta).to_vec();
                        accumulate(&mut grads, *beta, Tensor::new(bshape, dy.col_sums())?);
                    }
                    if self.rg(*x) {
                        let mut dx = vec![0.0; n * c];
                        if *train {
                            let mut sum_d = vec![0.0; c];
                            let mut sum_dx = vec![0.0; c];
                            for r in 0..n {
                                for j in 0..c {
                                    let dh = dyd[r * c + j] * gv.data()[j];
                                    sum_d[j] += dh;
                                    sum_dx[j] += dh * xhat[r * c + j];
                                }
                            }
                            let nf = n as f64;
                            for r in 0..n {
                                for j in 0..c {
                                    let dh = dyd[r * c + j] * gv.data()[j];
                                    dx[r * c + j] =
                                        inv_std[j] / nf * (nf * dh - sum_d[j] - xhat[r * c + j] * sum_dx[j]);
                                }
                            }
                        } else {
                            for r in 0..n {
                                for j in 0..c {
                                    dx[r * c + j] = dyd[r * c + j] * gv.data()[j] * inv_std[j];
                                }
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                    }
                }
                Op::Softmax(x) => {
                    let y = node.value.as_ref().expect("owned");
                    let c = y.cols();
                    let mut dx = vec![0.0; y.len()];
                    for ((yr, gr), dr) in
                        y.data().chunks_exact(c).zip(dy.data().chunks_exact(c)).zip(dx.chunks_exact_mut(c))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yy), gg) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yy * (gg - dot);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
                }
                Op::Attention { q, k, v, group, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (group, heads) = (*group, *heads);
                    let d = qv.cols();
                    let rows = qv.rows();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = vec![0.0; rows * d];
                    let mut dk = vec![0.0; rows * d];
                    let mut dv = vec![0.0; rows * d];
                    let (qd, kd, vd, dyd) = (qv.data(), kv.data(), vv.data(), dy.data());
                    let mut dp = vec![0.0; group];
                    for g in 0..rows / group {
                        let base = g * group;
                        for h in 0..heads {
                            let off = h * dh;
                            let p = &probs[(g * heads + h) * group * group..(g * heads + h + 1) * group * group];
                            for i in 0..group {
                                let dyi = &dyd[(base + i) * d + off..(base + i) * d + off + dh];
                                let prow = &p[i * group..(i + 1) * group];
                                for j in 0..group {
                                    let vj = &vd[(base + j) * d + off..(base + j) * d + off + dh];
                                    dp[j] = dyi.iter().zip(vj).map(|(a, b)| a * b).sum();
                                    let dvj = &mut dv[(base + j) * d + off..(base + j) * d + off + dh];
                                    for (o, gy) in dvj.iter_mut().zip(dyi) {
                                        *o += prow[j] * gy;
                                    }
                                }
                                let dot: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                                for j in 0..group {
                                    let ds = prow[j] * (dp[j] - dot) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    for t in 0..dh {
                                        dq[(base + i) * d + off + t] += ds * kd[(base + j) * d + off + t];
                                        dk[(base + j) * d + off + t] += ds * qd[(base + i) * d + off + t];
                                    }
                                }
                            }
                        }
                    }
                    let shape = qv.shape().to_vec();
                    if self.rg(*q) {
                        accumulate(&mut grads, *q, Tensor::new(shape.clone(), dq)?);
                    }
                    if self.rg(*k) {
                        accumulate(&mut grads, *k, Tensor::new(shape.clone(), dk)?);
                    }
                    if self.rg(*v) {
                        accumulate(&mut grads, *v, Tensor::new(shape, dv)?);
                    }
                }
                Op::GruGate { gx, gh, h, r, z, n } => {
                    let hv = self.value(*h);
                    let ghv = self.value(*gh);
                    let hidden = hv.cols();
                    let rows = hv.rows();
                    let mut dgx = vec![0.0; rows * 3 * hidden];
                    let mut dgh = vec![0.0; rows * 3 * hidden];
                    let mut dh = vec![0.0; rows * hidden];
                    for i in 0..rows {
                        for j in 0..hidden {
                            let idx = i * hidden + j;
                            let g = dy.data()[idx];
                            let (rr, zz, nn) = (r[idx], z[idx], n[idx]);
                            let gh_n = ghv.data()[i * 3 * hidden + 2 * hidden + j];
                            let dz = g * (hv.data()[idx] - nn);
                            let dn = g * (1.0 - zz);
                            dh[idx] = g * zz;
                            let dpre_n = dn * (1.0 - nn * nn);
                            let dr = dpre_n * gh_n;
                            let dpre_r = dr * rr * (1.0 - rr);
                            let dpre_z = dz * zz * (1.0 - zz);
                            let base = i * 3 * hidden;
                            dgx[base + j] = dpre_r;
                            dgx[base + hidden + j] = dpre_z;
                            dgx[base + 2 * hidden + j] = dpre_n;
                            dgh[base + j] = dpre_r;
                            dgh[base + hidden + j] = dpre_z;
                            dgh[base + 2 * hidden + j] = dpre_n * rr;
                        }
                    }
                    if self.rg(*gx) {
                        let s = self.shape(*gx).to_vec();
                        accumulate(&mut grads, *gx, Tensor::new(s, dgx)?);
                    }
                    if self.rg(*gh) {
                        let s = self.shape(*gh).to_vec();
                        accumulate(&mut grads, *gh, Tensor::new(s, dgh)?);
                    }
                    if self.rg(*h) {
                        accumulate(&mut grads, *h, Tensor::new(hv.shape().to_vec(), dh)?);
                    }
                }
                Op::CausalConv { x, w, b, seq_len, kernel, dilation } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let cin = xv.cols();
                    let rows = xv.rows();
                    let cout = wv.cols();
                    if self.rg(*b) {
                        let bshape = self.shape(*b).to_vec();
                        accumulate(&mut grads, *b, Tensor::new(bshape, dy.col_sums())?);
                    }
                    let mut dw = vec![0.0; wv.len()];
                    let mut dx = vec![0.0; rows * cin];
                    let mut shifted = vec![0.0; rows * cin];
                    let mut dshift = vec![0.0; rows * cin];
                    for k in 0..*kernel {
                        let lag = (kernel - 1 - k) * dilation;
                        let wk = &wv.data()[k * cin * cout..(k + 1) * cin * cout];
                        if self.rg(*w) {
                            shift_rows(xv.data(), &mut shifted, *seq_len, cin, lag);
                            gemm(
                                &shifted,
                                rows,
                                cin,
                                true,
                                dy.data(),
                                rows,
                                cout,
                                false,
                                &mut dw[k * cin * cout..(k + 1) * cin * cout],
                                false,
                            );
                        }
                        if self.rg(*x) {
                            gemm(dy.data(), rows, cout, false, wk, cin, cout, true, &mut dshift, false);
                            unshift_add(&dshift, &mut dx, *seq_len, cin, lag);
                        }
                    }
                    if self.rg(*w) {
                        accumulate(&mut grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = dy.cols();
                    let rows = dy.rows();
                    let mut start = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let c = pv.cols();
                        if self.rg(*p) {
                            let mut d = Vec::with_capacity(rows * c);
                            for row in dy.data().chunks_exact(total) {
                                d.extend_from_slice(&row[start..start + c]);
                            }
                            accumulate(&mut grads, *p, Tensor::new(pv.shape().to_vec(), d)?);
                        }
                        start += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let len = pv.len();
                        if self.rg(*p) {
                            let d = dy.data()[start..start + len].to_vec();
                            accumulate(&mut grads, *p, Tensor::new(pv.shape().to_vec(), d)?);
                        }
                        start += len;
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let len = dy.cols();
                    let mut d = vec![0.0; xv.len()];
                    for (drow, grow) in d.chunks_exact_mut(c).zip(dy.data().chunks_exact(len)) {
                        drow[*start..*start + len].copy_from_slice(grow);
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
                }
                Op::GatherRows { x, index } => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut d = vec![0.0; xv.len()];
                    for (grow, &i) in dy.data().chunks_exact(c).zip(index) {
                        for (o, g) in d[i * c..(i + 1) * c].iter_mut().zip(grow) {
                            *o += g;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
                }
                Op::SumOverSet { x, set_size } => {
                    let xv = self.value(*x);
                    let mut d = Vec::with_capacity(xv.len());
                    for r in 0..xv.rows() {
                        d.extend_from_slice(dy.row(r / set_size));
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
                }
                Op::Reshape(x) => {
                    let s = self.shape(*x).to_vec();
                    accumulate(&mut grads, *x, dy.reshaped(s)?);
                }
                Op::Huber { x, target } => {
                    let xv = self.value(*x);
                    let d = dy
                        .data()
                        .iter()
                        .zip(xv.data())
                        .zip(target.data())
                        .map(|((g, a), b)| g * huber_grad(a - b))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let g = dy.item() / xv.len().max(1) as f64;
                    accumulate(&mut grads, *x, Tensor::full(xv.shape(), g));
                }
            }
        }
        Ok(result)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn shift_rows(src: &[f64], dst: &mut [f64], seq_len: usize, cols: usize, lag: usize) {
    for (s_chunk, d_chunk) in src.chunks_exact(seq_len * cols).zip(dst.chunks_exact_mut(seq_len * cols)) {
        for t in 0..seq_len {
            let d = &mut d_chunk[t * cols..(t + 1) * cols];
            if t >= lag {
                d.copy_from_slice(&s_chunk[(t - lag) * cols..(t - lag + 1) * cols]);
            } else {
                d.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

fn unshift_add(dshift: &[f64], dx: &mut [f64], seq_len: usize, cols: usize, lag: usize) {
    for (s_chunk, d_chunk) in dshift.chunks_exact(seq_len * cols).zip(dx.chunks_exact_mut(seq_len * cols)) {
        for t in lag..seq_len {
            let src = &s_chunk[t * cols..(t + 1) * cols];
            for (o, g) in d_chunk[(t - lag) * cols..(t - lag + 1) * cols].iter_mut().zip(src) {
                *o += g;
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Huber penalty with threshold 1.
pub fn huber(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn huber_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}
