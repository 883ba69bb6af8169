//! Operation recording and the backward pass.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sentinel row index for [`Tape::gather_rows`]: the output row is zero and
/// no gradient is scattered back.
pub const GATHER_ZERO_ROW: usize = usize::MAX;

/// Minimum multiply count before a matmul is split across threads.
const PAR_MATMUL_THRESHOLD: usize = 32_768;

#[derive(Debug)]
enum Rule {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    MatMulNt { a: NodeId, b: NodeId },
    BiasAdd { x: NodeId, bias: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: f64 },
    Relu { x: NodeId },
    MaxAxis { x: NodeId, axis: usize, argmax: Vec<usize> },
    SumAxis { x: NodeId, axis: usize },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    L2NormalizeRows { x: NodeId },
    Concat { parts: Vec<NodeId>, axis: usize },
    LogSumExpRows { x: NodeId },
    GatherRows { x: NodeId, indices: Vec<usize> },
    Reshape { x: NodeId },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    needs_grad: bool,
    rule: Rule,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for a node, or `None` when no gradient flowed to it.
    pub fn get(&self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0].as_ref().map(|g| {
            Tensor::new(self.shapes[id.0].clone(), g.clone()).expect("gradient shape agrees")
        })
    }

    /// Gradient values for a node, zeros when unreachable from the loss.
    pub fn get_or_zero(&self, id: NodeId) -> Tensor {
        match self.grads[id.0].as_ref() {
            Some(g) => Tensor::new(self.shapes[id.0].clone(), g.clone()).expect("shape agrees"),
            None => Tensor::zeros(self.shapes[id.0].clone()),
        }
    }
}

/// Records forward operations and replays them in reverse.
///
/// Node ids are handed out in insertion order, so the recorded list is
/// topologically sorted by construction: an operation's inputs always
/// precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Splits `shape` around `axis` into (outer, axis_len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let body = |(i, row): (usize, &mut [f64])| {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..kk * n + n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    };
    if m * k * n >= PAR_MATMUL_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
}

/// `out[i, j] = sum_k a[i, k] * b[j, k]` — matmul with the right side transposed.
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let body = |(i, row): (usize, &mut [f64])| {
        let arow = &a[i * k..i * k + k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..j * k + k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    };
    if m * k * n >= PAR_MATMUL_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
}

/// `out[k, j] += sum_i a[i, k] * c[i, j]` — a-transposed times c, used in backward.
fn matmul_tn_raw(a: &[f64], c: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let crow = &c[i * n..i * n + n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..kk * n + n];
            for (o, &cv) in orow.iter_mut().zip(crow) {
                *o += aik * cv;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf; it participates in gradients iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> NodeId {
        self.push(
            tensor.shape().to_vec(),
            tensor.values().to_vec(),
            tensor.requires_grad(),
            Rule::Leaf,
        )
    }

    /// Insert a detached constant leaf.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<NodeId> {
        let t = Tensor::new(shape, values)?;
        Ok(self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            false,
            Rule::Leaf,
        ))
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].values.clone())
            .expect("node shape agrees")
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, needs_grad: bool, rule: Rule) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            values,
            needs_grad,
            rule,
        });
        id
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    /// Finish an op: verify finiteness, record the rule only when some input
    /// carries gradient.
    fn emit(
        &mut self,
        op: &str,
        shape: Vec<usize>,
        values: Vec<f64>,
        needs_grad: bool,
        rule: Rule,
    ) -> Result<NodeId> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{op} produced NaN/Inf")));
        }
        let rule = if needs_grad { rule } else { Rule::Leaf };
        Ok(self.push(shape, values, needs_grad, rule))
    }

    // ── forward operations ──────────────────────────────────────────

    /// `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Precondition(format!(
                "matmul shapes {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_raw(self.values(a), self.values(b), m, k, n, &mut out);
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        self.emit("matmul", vec![m, n], out, needs, Rule::MatMul { a, b })
    }

    /// `[m,k] @ [n,k]^T -> [m,n]` — batched row dot products.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Precondition(format!(
                "matmul_nt shapes {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        matmul_nt_raw(self.values(a), self.values(b), m, k, n, &mut out);
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        self.emit("matmul_nt", vec![m, n], out, needs, Rule::MatMulNt { a, b })
    }

    /// Adds a `[n]` bias to every row of `[m,n]` — the only broadcast.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::Precondition(format!(
                "bias_add shapes {sx:?} + {sb:?}"
            )));
        }
        let (m, n) = (sx[0], sx[1]);
        let bv = self.values(bias);
        let out: Vec<f64> = self
            .values(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(v, b)| v + b).collect::<Vec<_>>())
            .collect();
        let needs = self.node(x).needs_grad || self.node(bias).needs_grad;
        self.emit("bias_add", vec![m, n], out, needs, Rule::BiasAdd { x, bias })
    }

    fn elementwise(
        &mut self,
        op_name: &str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        rule: Rule,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Precondition(format!(
                "{op_name} shapes {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        self.emit(op_name, shape, out, needs, rule)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("add", a, b, |x, y| x + y, Rule::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("sub", a, b, |x, y| x - y, Rule::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("mul", a, b, |x, y| x * y, Rule::Mul { a, b })
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.values(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.node(x).needs_grad;
        self.emit("scale", shape, out, needs, Rule::Scale { x, factor })
    }

    /// Elementwise `max(v, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.values(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.node(x).needs_grad;
        self.emit("relu", shape, out, needs, Rule::Relu { x })
    }

    /// Max-reduction along `axis`; gradient routes to the first maximal
    /// index along the axis (ties broken by lowest index).
    pub fn max_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::Precondition(format!(
                "max_axis axis {axis} of shape {sx:?}"
            )));
        }
        let (outer, len, inner) = axis_extents(&sx, axis);
        if len == 0 {
            return Err(Error::Precondition("max_axis over empty axis".into()));
        }
        let xv = self.values(x);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    let v = xv[base + i];
                    let slot = o * inner + i;
                    if v > out[slot] {
                        out[slot] = v;
                        argmax[slot] = j;
                    }
                }
            }
        }
        let mut shape = sx.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let needs = self.node(x).needs_grad;
        self.emit("max_axis", shape, out, needs, Rule::MaxAxis { x, axis, argmax })
    }

    /// Sum-reduction along `axis`.
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::Precondition(format!(
                "sum_axis axis {axis} of shape {sx:?}"
            )));
        }
        let (outer, len, inner) = axis_extents(&sx, axis);
        let xv = self.values(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xv[base + i];
                }
            }
        }
        let mut shape = sx.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let needs = self.node(x).needs_grad;
        self.emit("sum_axis", shape, out, needs, Rule::SumAxis { x, axis })
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f64 = self.values(x).iter().sum();
        let needs = self.node(x).needs_grad;
        self.emit("sum_all", vec![1], vec![total], needs, Rule::SumAll { x })
    }

    /// Mean of all elements, as a `[1]` scalar.
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.node(x).values.len();
        if n == 0 {
            return Err(Error::Precondition("mean_all of empty tensor".into()));
        }
        let mean: f64 = self.values(x).iter().sum::<f64>() / n as f64;
        let needs = self.node(x).needs_grad;
        self.emit("mean_all", vec![1], vec![mean], needs, Rule::MeanAll { x })
    }

    /// Scales every row of `[m,n]` to unit L2 norm. Zero-norm rows are a
    /// degenerate-input error.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::Precondition(format!(
                "l2_normalize_rows on shape {sx:?}"
            )));
        }
        let n = sx[1];
        let mut out = Vec::with_capacity(self.node(x).values.len());
        for row in self.values(x).chunks(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::DegenerateInput(
                    "l2_normalize_rows: zero-norm row".into(),
                ));
            }
            out.extend(row.iter().map(|v| v / norm));
        }
        let needs = self.node(x).needs_grad;
        self.emit("l2_normalize_rows", sx, out, needs, Rule::L2NormalizeRows { x })
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Precondition("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Precondition(format!(
                "concat axis {axis} of shape {first:?}"
            )));
        }
        let mut axis_total = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != first.len()
                || sp
                    .iter()
                    .enumerate()
                    .any(|(d, &e)| d != axis && e != first[d])
            {
                return Err(Error::Precondition(format!(
                    "concat shapes {:?} vs {:?} along axis {axis}",
                    first, sp
                )));
            }
            axis_total += sp[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut out = vec![0.0; shape.iter().product()];
        let out_stride = axis_total * inner;
        let mut offset = 0;
        for &p in parts {
            let len_p = self.shape(p)[axis];
            let block = len_p * inner;
            let pv = self.values(p);
            for o in 0..outer {
                let dst = o * out_stride + offset * inner;
                out[dst..dst + block].copy_from_slice(&pv[o * block..(o + 1) * block]);
            }
            offset += len_p;
        }
        let needs = parts.iter().any(|&p| self.node(p).needs_grad);
        self.emit(
            "concat",
            shape,
            out,
            needs,
            Rule::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Row-wise `log(sum(exp(x)))` of `[m,n]`, computed via the max-shift
    /// for stability. Output shape `[m]`.
    pub fn logsumexp_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[1] == 0 {
            return Err(Error::Precondition(format!(
                "logsumexp_rows on shape {sx:?}"
            )));
        }
        let n = sx[1];
        let out: Vec<f64> = self
            .values(x)
            .chunks(n)
            .map(|row| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let needs = self.node(x).needs_grad;
        self.emit(
            "logsumexp_rows",
            vec![sx[0]],
            out,
            needs,
            Rule::LogSumExpRows { x },
        )
    }

    /// Gather rows of a `[n, c]` matrix by index. An index of
    /// [`GATHER_ZERO_ROW`] yields an all-zero row (used for padding).
    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::Precondition(format!("gather_rows on shape {sx:?}")));
        }
        let (rows, cols) = (sx[0], sx[1]);
        if let Some(&bad) = indices
            .iter()
            .find(|&&i| i != GATHER_ZERO_ROW && i >= rows)
        {
            return Err(Error::Precondition(format!(
                "gather_rows index {bad} out of {rows}"
            )));
        }
        let xv = self.values(x);
        let mut out = vec![0.0; indices.len() * cols];
        for (r, &idx) in indices.iter().enumerate() {
            if idx != GATHER_ZERO_ROW {
                out[r * cols..(r + 1) * cols].copy_from_slice(&xv[idx * cols..(idx + 1) * cols]);
            }
        }
        let needs = self.node(x).needs_grad;
        self.emit(
            "gather_rows",
            vec![indices.len(), cols],
            out,
            needs,
            Rule::GatherRows {
                x,
                indices: indices.to_vec(),
            },
        )
    }

    /// Reinterpret the row-major buffer under a new shape of equal size.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.node(x).values.len() {
            return Err(Error::Precondition(format!(
                "reshape {:?} -> {:?}",
                self.shape(x),
                shape
            )));
        }
        let values = self.values(x).to_vec();
        let needs = self.node(x).needs_grad;
        self.emit("reshape", shape, values, needs, Rule::Reshape { x })
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns gradients for every node;
    /// `requires_grad` leaves not reachable from the loss get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.node(loss).values.len() != 1 {
            return Err(Error::Precondition(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(out_grad) = grads[id].take() else {
                continue;
            };
            self.propagate(&self.nodes[id].rule, &out_grad, &mut grads);
            grads[id] = Some(out_grad);
        }

        // Zero-fill gradient-bearing leaves the loss never reached.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.needs_grad && matches!(node.rule, Rule::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.values.len()]);
            }
        }

        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, delta: &[f64]) {
        if !self.node(id).needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (gv, dv) in g.iter_mut().zip(delta) {
                    *gv += dv;
                }
            }
            None => grads[id.0] = Some(delta.to_vec()),
        }
    }

    fn propagate(&self, rule: &Rule, out_grad: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match rule {
            Rule::Leaf => {}
            Rule::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.node(*a).needs_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_raw(out_grad, self.values(*b), m, n, k, &mut da);
                    self.accumulate(grads, *a, &da);
                }
                if self.node(*b).needs_grad {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_raw(self.values(*a), out_grad, m, k, n, &mut db);
                    self.accumulate(grads, *b, &db);
                }
            }
            Rule::MatMulNt { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.node(*a).needs_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_raw(out_grad, self.values(*b), m, n, k, &mut da);
                    self.accumulate(grads, *a, &da);
                }
                if self.node(*b).needs_grad {
                    let mut db = vec![0.0; n * k];
                    matmul_tn_raw(out_grad, self.values(*a), m, n, k, &mut db);
                    self.accumulate(grads, *b, &db);
                }
            }
            Rule::BiasAdd { x, bias } => {
                let n = self.shape(*bias)[0];
                self.accumulate(grads, *x, out_grad);
                if self.node(*bias).needs_grad {
                    let mut db = vec![0.0; n];
                    for row in out_grad.chunks(n) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.accumulate(grads, *bias, &db);
                }
            }
            Rule::Add { a, b } => {
                self.accumulate(grads, *a, out_grad);
                self.accumulate(grads, *b, out_grad);
            }
            Rule::Sub { a, b } => {
                self.accumulate(grads, *a, out_grad);
                if self.node(*b).needs_grad {
                    let neg: Vec<f64> = out_grad.iter().map(|g| -g).collect();
                    self.accumulate(grads, *b, &neg);
                }
            }
            Rule::Mul { a, b } => {
                if self.node(*a).needs_grad {
                    let da: Vec<f64> = out_grad
                        .iter()
                        .zip(self.values(*b))
                        .map(|(&g, &v)| g * v)
                        .collect();
                    self.accumulate(grads, *a, &da);
                }
                if self.node(*b).needs_grad {
                    let db: Vec<f64> = out_grad
                        .iter()
                        .zip(self.values(*a))
                        .map(|(&g, &v)| g * v)
                        .collect();
                    self.accumulate(grads, *b, &db);
                }
            }
            Rule::Scale { x, factor } => {
                let dx: Vec<f64> = out_grad.iter().map(|g| g * factor).collect();
                self.accumulate(grads, *x, &dx);
            }
            Rule::Relu { x } => {
                let dx: Vec<f64> = out_grad
                    .iter()
                    .zip(self.values(*x))
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, &dx);
            }
            Rule::MaxAxis { x, axis, argmax } => {
                let sx = self.shape(*x);
                let (outer, len, inner) = axis_extents(sx, *axis);
                let mut dx = vec![0.0; self.node(*x).values.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let slot = o * inner + i;
                        dx[(o * len + argmax[slot]) * inner + i] += out_grad[slot];
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Rule::SumAxis { x, axis } => {
                let sx = self.shape(*x);
                let (outer, len, inner) = axis_extents(sx, *axis);
                let mut dx = vec![0.0; self.node(*x).values.len()];
                for o in 0..outer {
                    for j in 0..len {
                        let base = (o * len + j) * inner;
                        for i in 0..inner {
                            dx[base + i] += out_grad[o * inner + i];
                        }
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Rule::SumAll { x } => {
                let g = out_grad[0];
                let dx = vec![g; self.node(*x).values.len()];
                self.accumulate(grads, *x, &dx);
            }
            Rule::MeanAll { x } => {
                let n = self.node(*x).values.len();
                let g = out_grad[0] / n as f64;
                let dx = vec![g; n];
                self.accumulate(grads, *x, &dx);
            }
            Rule::L2NormalizeRows { x } => {
                let n = self.shape(*x)[1];
                let xv = self.values(*x);
                let mut dx = vec![0.0; xv.len()];
                for (r, row) in xv.chunks(n).enumerate() {
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let y: Vec<f64> = row.iter().map(|v| v / norm).collect();
                    let gout = &out_grad[r * n..(r + 1) * n];
                    let dot: f64 = gout.iter().zip(&y).map(|(&g, &u)| g * u).sum();
                    for i in 0..n {
                        dx[r * n + i] = (gout[i] - y[i] * dot) / norm;
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Rule::Concat { parts, axis } => {
                let shape = {
                    let mut s = self.shape(parts[0]).to_vec();
                    s[*axis] = parts.iter().map(|&p| self.shape(p)[*axis]).sum();
                    s
                };
                let (outer, total_len, inner) = axis_extents(&shape, *axis);
                let out_stride = total_len * inner;
                let mut offset = 0;
                for &p in parts {
                    let len_p = self.shape(p)[*axis];
                    if self.node(p).needs_grad {
                        let block = len_p * inner;
                        let mut dp = vec![0.0; self.node(p).values.len()];
                        for o in 0..outer {
                            let src = o * out_stride + offset * inner;
                            dp[o * block..(o + 1) * block]
                                .copy_from_slice(&out_grad[src..src + block]);
                        }
                        self.accumulate(grads, p, &dp);
                    }
                    offset += len_p;
                }
            }
            Rule::LogSumExpRows { x } => {
                let n = self.shape(*x)[1];
                let xv = self.values(*x);
                let mut dx = vec![0.0; xv.len()];
                for (r, row) in xv.chunks(n).enumerate() {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    let g = out_grad[r];
                    for i in 0..n {
                        dx[r * n + i] = g * (row[i] - m).exp() / denom;
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Rule::GatherRows { x, indices } => {
                let cols = self.shape(*x)[1];
                let mut dx = vec![0.0; self.node(*x).values.len()];
                for (r, &idx) in indices.iter().enumerate() {
                    if idx != GATHER_ZERO_ROW {
                        let src = &out_grad[r * cols..(r + 1) * cols];
                        for (d, &g) in dx[idx * cols..(idx + 1) * cols].iter_mut().zip(src) {
                            *d += g;
                        }
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Rule::Reshape { x } => {
                self.accumulate(grads, *x, out_grad);
            }
        }
    }
}
