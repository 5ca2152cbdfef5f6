//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A [`Session`] records every forward operation as a node in creation
//! order; [`Session::backward`] then replays the tape once in reverse,
//! accumulating vector-Jacobian products into per-node gradient buffers.
//! There is no graph pruning or reuse across steps — a training step builds
//! a fresh session, which keeps lifetimes trivial and makes the engine easy
//! to reason about at the cost of some allocator traffic.
//!
//! Trainable tensors live outside the tape as [`Param`] handles. Registering
//! the same handle twice in one session yields the same node, which is what
//! makes weight sharing work: both translation directions can register one
//! embedding table and its gradient arrives summed over every use site.

use std::collections::HashMap;

use crate::param::Param;
use crate::tensor::{self, Tensor};
use crate::{Error, Result};

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    /// Constant input; never receives a gradient.
    Input,
    /// Trainable leaf; the owning handle lives in `Session::params`.
    Param,
    /// Row gather: `out[i] = table[ids[i]]`.
    Embed { table: NodeId, ids: Vec<usize> },
    /// `a [m,k] @ b [k,n]`.
    MatMul { a: NodeId, b: NodeId },
    /// `a [m,k] @ b^T` with `b` given as `[n,k]`.
    MatMulTransB { a: NodeId, b: NodeId },
    /// Elementwise sum of same-shape tensors.
    Add { a: NodeId, b: NodeId },
    /// Adds a `[n]` row vector to every row of `a [m,n]`.
    AddRow { a: NodeId, row: NodeId },
    /// Elementwise product of same-shape tensors.
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    Relu { a: NodeId },
    /// Row-wise softmax of a `[m,n]` tensor.
    SoftmaxRows { a: NodeId },
    /// Row-wise layer norm with learned gain/bias vectors.
    LayerNorm {
        a: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    /// Per-row `log softmax(a[i])[targets[i]]`, producing a `[m]` vector.
    LogSoftmaxPick { a: NodeId, targets: Vec<usize> },
    /// Sum of all entries, producing a scalar.
    Sum { a: NodeId },
    /// Concatenation of scalars/vectors into one `[total]` vector.
    Stack { parts: Vec<NodeId> },
    /// Column slice `a[:, start..start+len]`.
    SliceCols { a: NodeId, start: usize, len: usize },
    /// Column-wise concatenation of same-height matrices.
    ConcatCols { parts: Vec<NodeId> },
}

struct Node {
    op: Op,
    value: Tensor,
    /// Cached forward intermediates a VJP needs (softmax probabilities,
    /// layer-norm row statistics).
    aux: Vec<f64>,
    /// Set when any ancestor is a trainable parameter; gradient buffers are
    /// only allocated for such nodes.
    needs_grad: bool,
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// A single forward/backward recording.
pub struct Session {
    nodes: Vec<Node>,
    params: Vec<Param>,
    param_nodes: HashMap<usize, NodeId>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Session {
    fn default() -> Self {
        Self::new()
    }
}

impl Session {
    pub fn new() -> Session {
        Session {
            nodes: Vec::new(),
            params: Vec::new(),
            param_nodes: HashMap::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, aux: Vec<f64>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            aux,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value.data[0]
    }

    /// Records a constant input.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value, Vec::new(), false)
    }

    /// Registers a trainable parameter, deduplicating by handle identity so
    /// shared weights receive one summed gradient.
    pub fn param(&mut self, p: &Param) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&p.ptr_id()) {
            return id;
        }
        let value = p.value().clone();
        let trainable = p.is_trainable();
        self.params.push(p.clone());
        let id = self.push(Op::Param, value, Vec::new(), trainable);
        self.param_nodes.insert(p.ptr_id(), id);
        id
    }

    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = &self.nodes[table].value;
        let d = t.cols();
        let rows = t.rows();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < rows, "embed id {i} out of table with {rows} rows");
            out.extend_from_slice(t.row(i));
        }
        let needs = self.needs(table);
        self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            Tensor::matrix(ids.len(), d, out),
            Vec::new(),
            needs,
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = tensor::matmul(&self.nodes[a].value, &self.nodes[b].value);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatMul { a, b }, v, Vec::new(), needs)
    }

    pub fn matmul_transb(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = tensor::matmul_transb(&self.nodes[a].value, &self.nodes[b].value);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatMulTransB { a, b }, v, Vec::new(), needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape, vb.shape, "add shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let v = Tensor::new(va.shape.clone(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add { a, b }, v, Vec::new(), needs)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (va, vr) = (&self.nodes[a].value, &self.nodes[row].value);
        let n = va.cols();
        assert_eq!(vr.len(), n, "add_row length mismatch");
        let mut data = va.data.clone();
        for r in 0..va.rows() {
            for j in 0..n {
                data[r * n + j] += vr.data[j];
            }
        }
        let v = Tensor::new(va.shape.clone(), data);
        let needs = self.needs(a) || self.needs(row);
        self.push(Op::AddRow { a, row }, v, Vec::new(), needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape, vb.shape, "mul shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let v = Tensor::new(va.shape.clone(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Mul { a, b }, v, Vec::new(), needs)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = &self.nodes[a].value;
        let v = Tensor::new(va.shape.clone(), va.data.iter().map(|x| x * c).collect());
        let needs = self.needs(a);
        self.push(Op::Scale { a, c }, v, Vec::new(), needs)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let v = Tensor::new(va.shape.clone(), va.data.iter().map(|x| x.max(0.0)).collect());
        let needs = self.needs(a);
        self.push(Op::Relu { a }, v, Vec::new(), needs)
    }

    /// Row-wise softmax. `-inf` entries are treated as masked-out logits.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let (m, n) = (va.rows(), va.cols());
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let p = tensor::softmax(va.row(i)).expect("softmax_rows on invalid logits");
            data.extend_from_slice(&p);
        }
        let v = Tensor::new(va.shape.clone(), data);
        let needs = self.needs(a);
        // The probabilities themselves are the backward cache.
        let aux = v.data.clone();
        self.push(Op::SoftmaxRows { a }, v, aux, needs)
    }

    /// Row-wise layer norm: `(x - mean) / sqrt(var + eps) * gain + bias`.
    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let (m, n) = (va.rows(), va.cols());
        assert_eq!(self.nodes[gain].value.len(), n, "layer_norm gain length");
        assert_eq!(self.nodes[bias].value.len(), n, "layer_norm bias length");
        let g = &self.nodes[gain].value.data;
        let b = &self.nodes[bias].value.data;
        let mut data = Vec::with_capacity(m * n);
        // aux stores per-row (mean, inv_std) pairs followed by x-hat.
        let mut aux = Vec::with_capacity(2 * m + m * n);
        aux.resize(2 * m, 0.0);
        for i in 0..m {
            let row = va.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            aux[2 * i] = mean;
            aux[2 * i + 1] = inv_std;
            for j in 0..n {
                let xhat = (row[j] - mean) * inv_std;
                aux.push(xhat);
                data.push(xhat * g[j] + b[j]);
            }
        }
        let v = Tensor::new(va.shape.clone(), data);
        let needs = self.needs(a) || self.needs(gain) || self.needs(bias);
        self.push(Op::LayerNorm { a, gain, bias }, v, aux, needs)
    }

    /// Per-row log-probability of a chosen class: `out[i] = log softmax(a[i])[t_i]`.
    pub fn log_softmax_pick(&mut self, a: NodeId, targets: &[usize]) -> NodeId {
        let va = &self.nodes[a].value;
        let (m, n) = (va.rows(), va.cols());
        assert_eq!(targets.len(), m, "log_softmax_pick needs one target per row");
        let mut out = Vec::with_capacity(m);
        let mut aux = Vec::with_capacity(m * n);
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < n, "target {t} out of range for {n} classes");
            let row = va.row(i);
            let p = tensor::softmax(row).expect("log_softmax_pick on invalid logits");
            let lp = tensor::log_softmax(row).expect("log_softmax_pick on invalid logits");
            out.push(lp[t]);
            aux.extend_from_slice(&p);
        }
        let needs = self.needs(a);
        self.push(
            Op::LogSoftmaxPick {
                a,
                targets: targets.to_vec(),
            },
            Tensor::vector(out),
            aux,
            needs,
        )
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].value.data.iter().sum();
        let needs = self.needs(a);
        self.push(Op::Sum { a }, Tensor::scalar(s), Vec::new(), needs)
    }

    /// Concatenates scalar/vector nodes into one vector.
    pub fn stack(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "stack of nothing");
        let mut data = Vec::new();
        let mut needs = false;
        for &p in parts {
            data.extend_from_slice(&self.nodes[p].value.data);
            needs |= self.needs(p);
        }
        self.push(
            Op::Stack {
                parts: parts.to_vec(),
            },
            Tensor::vector(data),
            Vec::new(),
            needs,
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = &self.nodes[a].value;
        let (m, n) = (va.rows(), va.cols());
        assert!(start + len <= n, "slice_cols out of range");
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&va.row(i)[start..start + len]);
        }
        let needs = self.needs(a);
        self.push(
            Op::SliceCols { a, start, len },
            Tensor::matrix(m, len, data),
            Vec::new(),
            needs,
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let m = self.nodes[parts[0]].value.rows();
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        let mut needs = false;
        for i in 0..m {
            for &p in parts {
                let v = &self.nodes[p].value;
                assert_eq!(v.rows(), m, "concat_cols height mismatch");
                data.extend_from_slice(v.row(i));
                needs |= self.needs(p);
            }
        }
        self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            Tensor::matrix(m, total, data),
            Vec::new(),
            needs,
        )
    }

    fn accumulate(&mut self, id: NodeId, delta: &[f64]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let slot = &mut self.grads[id];
        match slot {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Runs reverse accumulation from a scalar root. Each tape node is
    /// visited exactly once, in reverse creation order.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[root].value.shape
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[root].needs_grad {
            return Ok(()); // constant graph: all gradients are zero
        }
        self.grads[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let g = match self.grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g)?;
            self.grads[id] = Some(g);
        }

        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::numeric(format!(
                        "gradient of node {i} contains NaN/Inf"
                    )));
                }
            }
        }
        Ok(())
    }

    fn propagate(&mut self, id: NodeId, g: &[f64]) -> Result<()> {
        // Ops are matched by moving cheap copies of operand ids out first so
        // the borrow of self.nodes[id] ends before accumulation starts.
        enum Plan {
            None,
            One(NodeId, Vec<f64>),
            Two(NodeId, Vec<f64>, NodeId, Vec<f64>),
            Three(NodeId, Vec<f64>, NodeId, Vec<f64>, NodeId, Vec<f64>),
            Many(Vec<(NodeId, Vec<f64>)>),
        }

        let plan = match &self.nodes[id].op {
            Op::Input | Op::Param => Plan::None,
            Op::Embed { table, ids } => {
                let t = &self.nodes[*table].value;
                let d = t.cols();
                let mut dt = vec![0.0; t.len()];
                for (r, &row_id) in ids.iter().enumerate() {
                    let src = &g[r * d..(r + 1) * d];
                    let dst = &mut dt[row_id * d..(row_id + 1) * d];
                    for (o, x) in dst.iter_mut().zip(src) {
                        *o += x;
                    }
                }
                Plan::One(*table, dt)
            }
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let va = &self.nodes[a].value;
                let vb = &self.nodes[b].value;
                let gt = Tensor::matrix(va.rows(), vb.cols(), g.to_vec());
                let da = tensor::matmul_transb(&gt, vb);
                let db = tensor::matmul_transa(va, &gt);
                Plan::Two(a, da.data, b, db.data)
            }
            Op::MatMulTransB { a, b } => {
                let (a, b) = (*a, *b);
                let va = &self.nodes[a].value;
                let vb = &self.nodes[b].value;
                let gt = Tensor::matrix(va.rows(), vb.rows(), g.to_vec());
                let da = tensor::matmul(&gt, vb);
                let db = tensor::matmul_transa(&gt, va);
                Plan::Two(a, da.data, b, db.data)
            }
            Op::Add { a, b } => Plan::Two(*a, g.to_vec(), *b, g.to_vec()),
            Op::AddRow { a, row } => {
                let n = self.nodes[*row].value.len();
                let mut drow = vec![0.0; n];
                for chunk in g.chunks_exact(n) {
                    for (o, x) in drow.iter_mut().zip(chunk) {
                        *o += x;
                    }
                }
                Plan::Two(*a, g.to_vec(), *row, drow)
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[b].value.data)
                    .map(|(x, y)| x * y)
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a].value.data)
                    .map(|(x, y)| x * y)
                    .collect();
                Plan::Two(a, da, b, db)
            }
            Op::Scale { a, c } => Plan::One(*a, g.iter().map(|x| x * c).collect()),
            Op::Relu { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[*a].value.data)
                    .map(|(x, v)| if *v > 0.0 { *x } else { 0.0 })
                    .collect();
                Plan::One(*a, da)
            }
            Op::SoftmaxRows { a } => {
                let node = &self.nodes[id];
                let n = node.value.cols();
                let mut da = Vec::with_capacity(g.len());
                for (grow, prow) in g.chunks_exact(n).zip(node.aux.chunks_exact(n)) {
                    let dotp: f64 = grow.iter().zip(prow).map(|(x, p)| x * p).sum();
                    for (x, p) in grow.iter().zip(prow) {
                        da.push(p * (x - dotp));
                    }
                }
                Plan::One(*a, da)
            }
            Op::LayerNorm { a, gain, bias } => {
                let (a, gain, bias) = (*a, *gain, *bias);
                let node = &self.nodes[id];
                let n = node.value.cols();
                let m = node.value.rows();
                let gvec = &self.nodes[gain].value.data;
                let xhat = &node.aux[2 * m..];
                let mut da = Vec::with_capacity(m * n);
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for i in 0..m {
                    let inv_std = node.aux[2 * i + 1];
                    let grow = &g[i * n..(i + 1) * n];
                    let xrow = &xhat[i * n..(i + 1) * n];
                    let mut sum_gy = 0.0;
                    let mut sum_gyx = 0.0;
                    for j in 0..n {
                        let gy = grow[j] * gvec[j];
                        sum_gy += gy;
                        sum_gyx += gy * xrow[j];
                        dgain[j] += grow[j] * xrow[j];
                        dbias[j] += grow[j];
                    }
                    let mean_gy = sum_gy / n as f64;
                    let mean_gyx = sum_gyx / n as f64;
                    for j in 0..n {
                        let gy = grow[j] * gvec[j];
                        da.push((gy - mean_gy - xrow[j] * mean_gyx) * inv_std);
                    }
                }
                Plan::Three(a, da, gain, dgain, bias, dbias)
            }
            Op::LogSoftmaxPick { a, targets } => {
                let node = &self.nodes[id];
                let n = node.aux.len() / targets.len();
                let mut da = Vec::with_capacity(node.aux.len());
                for (i, &t) in targets.iter().enumerate() {
                    let gi = g[i];
                    let prow = &node.aux[i * n..(i + 1) * n];
                    for (j, p) in prow.iter().enumerate() {
                        let indicator = if j == t { 1.0 } else { 0.0 };
                        da.push(gi * (indicator - p));
                    }
                }
                Plan::One(*a, da)
            }
            Op::Sum { a } => {
                let len = self.nodes[*a].value.len();
                Plan::One(*a, vec![g[0]; len])
            }
            Op::Stack { parts } => {
                let mut out = Vec::with_capacity(parts.len());
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    out.push((p, g[off..off + len].to_vec()));
                    off += len;
                }
                Plan::Many(out)
            }
            Op::SliceCols { a, start, len } => {
                let va = &self.nodes[*a].value;
                let (m, n) = (va.rows(), va.cols());
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let src = &g[i * len..(i + 1) * len];
                    let dst = &mut da[i * n + start..i * n + start + len];
                    dst.copy_from_slice(src);
                }
                Plan::One(*a, da)
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let m = self.nodes[id].value.rows();
                let total = self.nodes[id].value.cols();
                let mut out: Vec<(NodeId, Vec<f64>)> = parts
                    .iter()
                    .map(|&p| (p, vec![0.0; self.nodes[p].value.len()]))
                    .collect();
                let widths: Vec<usize> = parts.iter().map(|&p| self.nodes[p].value.cols()).collect();
                for i in 0..m {
                    let mut off = i * total;
                    for (slot, w) in out.iter_mut().zip(&widths) {
                        slot.1[i * w..(i + 1) * w].copy_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                Plan::Many(out)
            }
        };

        match plan {
            Plan::None => {}
            Plan::One(a, da) => self.accumulate(a, &da),
            Plan::Two(a, da, b, db) => {
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Plan::Three(a, da, b, db, c, dc) => {
                self.accumulate(a, &da);
                self.accumulate(b, &db);
                self.accumulate(c, &dc);
            }
            Plan::Many(list) => {
                for (p, dp) in list {
                    self.accumulate(p, &dp);
                }
            }
        }
        Ok(())
    }

    /// Gradient of the last `backward` root with respect to a parameter,
    /// or `None` if the parameter did not influence the root.
    pub fn param_grad(&self, p: &Param) -> Option<&[f64]> {
        let &id = self.param_nodes.get(&p.ptr_id())?;
        self.grads.get(id)?.as_deref()
    }

    /// Parameters registered in this session together with their gradients
    /// (zero vector when untouched by the root). Order is registration order.
    pub fn param_grads(&self) -> Vec<(Param, Vec<f64>)> {
        self.params
            .iter()
            .map(|p| {
                let g = self
                    .param_grad(p)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; p.value().len()]);
                (p.clone(), g)
            })
            .collect()
    }
}

/// Central-difference gradient check.
///
/// `build` must construct the full forward graph from current parameter
/// values and return `(session, scalar_root)`. Every coordinate of every
/// parameter in `params` is perturbed by `±h`; the relative disagreement
/// between the finite difference and the recorded gradient is
/// `|fd - grad| / max(|fd|, |grad|, 0.001)`, and the maximum over all
/// coordinates is returned.
pub fn grad_check<F>(build: F, params: &[Param], h: f64) -> Result<f64>
where
    F: Fn() -> Result<(Session, NodeId)>,
{
    let (mut sess, root) = build()?;
    sess.backward(root)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            sess.param_grad(p)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; p.value().len()])
        })
        .collect();

    let eval = |build: &F| -> Result<f64> {
        let (sess, root) = build()?;
        Ok(sess.scalar(root))
    };

    let mut worst = 0.0f64;
    for (p, grads) in params.iter().zip(&analytic) {
        let len = p.value().len();
        for i in 0..len {
            let orig = p.value().data[i];
            p.value_mut().data[i] = orig + h;
            let up = eval(&build)?;
            p.value_mut().data[i] = orig - h;
            let down = eval(&build)?;
            p.value_mut().data[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
