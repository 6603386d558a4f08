use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    /// rhs is a row vector broadcast over every row of lhs
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
        /// per-row weight already divided by the weight total
        weights: Vec<f64>,
    },
    Mse {
        pred: Var,
        /// d loss / d pred
        dpred: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
///
/// Every node's inputs have smaller indices than the node itself, so a single
/// reverse sweep over the node list visits the graph in reverse topological
/// order, touching each node once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient buffer of `v`, present after a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Elementwise sum. `b` may also be a rank-1 tensor matching the last
    /// dimension of `a`, in which case it is added to every row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
            let value = Tensor::new(sa.to_vec(), data)?;
            let rg = self.rg(&[a, b]);
            return Ok(self.push(value, Op::Add(a, b), rg));
        }
        if sb.len() == 1 && sb[0] == *sa.last().unwrap() {
            let n = sb[0];
            let bias = self.value(b).data().to_vec();
            let mut data = self.value(a).data().to_vec();
            for row in data.chunks_mut(n) {
                for (x, y) in row.iter_mut().zip(&bias) {
                    *x += y;
                }
            }
            let value = Tensor::new(sa.to_vec(), data)?;
            let rg = self.rg(&[a, b]);
            return Ok(self.push(value, Op::AddRow(a, b), rg));
        }
        Err(Error::shape("add", sa, sb))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|x| x * k).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let data = kernels::transpose(self.value(a).data(), r, c);
        let value = Tensor::new(vec![c, r], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape.to_vec(), self.value(a).data().to_vec())
            .map_err(|_| Error::shape("reshape", self.shape(a), shape))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Concatenate rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() != 2 || axis > 1 {
            return Err(Error::shape("concat", &s0, &[axis]));
        }
        let other = 1 - axis;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[other] != s0[other] {
                return Err(Error::shape("concat", &s0, s));
            }
            total += s[axis];
        }
        let value = if axis == 0 {
            let data = parts
                .iter()
                .flat_map(|&p| self.value(p).data().iter().copied())
                .collect();
            Tensor::new(vec![total, s0[1]], data)?
        } else {
            let rows = s0[0];
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(r));
                }
            }
            Tensor::new(vec![rows, total], data)?
        };
        let rg = self.rg(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` consecutive rows (axis 0) or columns (axis 1) of a rank-2 tensor.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || axis > 1 || len == 0 || start + len > s[axis] {
            return Err(Error::shape("slice", &s, &[axis, start, len]));
        }
        let src = self.value(a);
        let value = if axis == 0 {
            Tensor::new(
                vec![len, s[1]],
                src.data()[start * s[1]..(start + len) * s[1]].to_vec(),
            )?
        } else {
            let mut data = Vec::with_capacity(s[0] * len);
            for r in 0..s[0] {
                data.extend_from_slice(&src.row(r)[start..start + len]);
            }
            Tensor::new(vec![s[0], len], data)?
        };
        let rg = self.rg(&[a]);
        Ok(self.push(
            value,
            Op::Slice {
                src: a,
                axis,
                start,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::gelu, Op::Gelu(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    /// Softmax over the last axis, stabilised by subtracting the row maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if !src.all_finite() {
            return Err(Error::Numeric("softmax input".into()));
        }
        let n = src.last_dim();
        let mut data = src.data().to_vec();
        kernels::softmax_rows(&mut data, n);
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// Row-wise standardisation over the last axis (eps = 1e-5) followed by
    /// the affine map `gamma * xhat + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let src = self.value(x);
        let d = src.last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layernorm", src.shape(), self.shape(gamma)));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / d;
        let mut xhat = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        for row in src.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + EPS).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gather rows of `table` ([V, d]) for each id, giving [ids.len(), d].
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = t.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean of `-log softmax(logits)[target]` over rows whose target is not
    /// `ignore_index`. Exactly zero when every row is ignored.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: Option<usize>,
    ) -> Result<Var> {
        let weights: Vec<f64> = targets
            .iter()
            .map(|&t| if Some(t) == ignore_index { 0.0 } else { 1.0 })
            .collect();
        self.weighted_cross_entropy(logits, targets, &weights)
    }

    /// `Σ wᵢ·(-log pᵢ[tᵢ]) / Σ wᵢ`. Rows with zero weight may carry any target.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let src = self.value(logits);
        let (m, c) = src.dims2()?;
        if targets.len() != m || weights.len() != m {
            return Err(Error::shape("cross_entropy", &[m, c], &[targets.len()]));
        }
        if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::Contract("cross-entropy weights must be finite and >= 0".into()));
        }
        for (&t, &w) in targets.iter().zip(weights) {
            if w > 0.0 && t >= c {
                return Err(Error::Index {
                    what: "class logits",
                    index: t,
                    bound: c,
                });
            }
        }
        if !src.all_finite() {
            return Err(Error::Numeric("cross-entropy logits".into()));
        }
        let total: f64 = weights.iter().sum();
        let norm: Vec<f64> = if total > 0.0 {
            weights.iter().map(|w| w / total).collect()
        } else {
            vec![0.0; m]
        };
        let mut probs = src.data().to_vec();
        let mut loss = 0.0;
        for i in 0..m {
            if norm[i] > 0.0 {
                let row = src.row(i);
                loss += norm[i] * (kernels::logsumexp(row) - row[targets[i]]);
            }
        }
        kernels::softmax_rows(&mut probs, c);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                weights: norm,
            },
            rg,
        ))
    }

    /// Mean squared error against a constant target, restricted to the rows
    /// flagged in `row_mask` (all rows when `None`). Zero when no row is
    /// selected.
    pub fn mse(&mut self, pred: Var, target: &Tensor, row_mask: Option<&[bool]>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape("mse", p.shape(), target.shape()));
        }
        let (rows, cols) = p.dims2()?;
        if let Some(mask) = row_mask {
            if mask.len() != rows {
                return Err(Error::shape("mse", &[rows, cols], &[mask.len()]));
            }
        }
        let selected = |r: usize| row_mask.map_or(true, |m| m[r]);
        let count = (0..rows).filter(|&r| selected(r)).count() * cols;
        let mut dpred = vec![0.0; p.len()];
        let mut loss = 0.0;
        if count > 0 {
            let inv = 1.0 / count as f64;
            for r in (0..rows).filter(|&r| selected(r)) {
                for c in 0..cols {
                    let i = r * cols + c;
                    let diff = p.data()[i] - target.data()[i];
                    loss += diff * diff * inv;
                    dpred[i] = 2.0 * diff * inv;
                }
            }
        }
        let rg = self.rg(&[pred]);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, dpred }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Signs of every relu input on the tape, in recording order. Used by the
    /// gradient checker to detect perturbations that cross a kink.
    pub(crate) fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.value(a).data().iter().map(|&x| x > 0.0))
            .collect()
    }

    /// Reverse-mode sweep from a scalar root. Gradients are added into the
    /// tape's gradient buffers, so repeated calls accumulate until
    /// [`Tape::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut work: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            work[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = work[i].take() else { continue };
            self.propagate(i, &g, &mut work);
            work[i] = Some(g);
        }
        if self.grads.len() < work.len() {
            self.grads.resize(work.len(), None);
        }
        for (slot, w) in self.grads.iter_mut().zip(work) {
            if let Some(w) = w {
                match slot {
                    Some(acc) => acc.iter_mut().zip(&w).for_each(|(a, b)| *a += b),
                    None => *slot = Some(w),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], work: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        // Accumulate into the buffer of `v` (allocated on first touch).
        let mut with = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let buf = work[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with(*a, &mut |d| add_into(d, g));
                with(*b, &mut |d| add_into(d, g));
            }
            Op::AddRow(a, b) => {
                with(*a, &mut |d| add_into(d, g));
                with(*b, &mut |d| {
                    let n = d.len();
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Sub(a, b) => {
                with(*a, &mut |d| add_into(d, g));
                with(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                with(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vb[k];
                    }
                });
                with(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * va[k];
                    }
                });
            }
            Op::Scale(a, s) => with(*a, &mut |d| kernels::axpy(*s, g, d)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                with(*a, &mut |d| kernels::matmul_grad_lhs(g, tb.data(), d, m, k, n));
                with(*b, &mut |d| kernels::matmul_grad_rhs(ta.data(), g, d, m, k, n));
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                with(*a, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => with(*a, &mut |d| add_into(d, g)),
            Op::Concat { parts, axis } => {
                let out_cols = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let s = self.shape(p);
                    let (pr, pc) = (s[0], s[1]);
                    if *axis == 0 {
                        let lo = offset * out_cols;
                        with(p, &mut |d| add_into(d, &g[lo..lo + pr * pc]));
                        offset += pr;
                    } else {
                        with(p, &mut |d| {
                            for r in 0..pr {
                                let src = &g[r * out_cols + offset..r * out_cols + offset + pc];
                                add_into(&mut d[r * pc..(r + 1) * pc], src);
                            }
                        });
                        offset += pc;
                    }
                }
            }
            Op::Slice { src, axis, start } => {
                let s = self.shape(*src);
                let cols = s[1];
                let out = node.value.shape();
                with(*src, &mut |d| {
                    if *axis == 0 {
                        add_into(&mut d[start * cols..(start + out[0]) * cols], g);
                    } else {
                        let len = out[1];
                        for r in 0..s[0] {
                            add_into(
                                &mut d[r * cols + start..r * cols + start + len],
                                &g[r * len..(r + 1) * len],
                            );
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                with(*a, &mut |d| {
                    for k in 0..d.len() {
                        if x[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                with(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * kernels::gelu_grad(x[k]);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                with(*a, &mut |d| {
                    for ((drow, yrow), grow) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let s = kernels::dot(grow, yrow);
                        for k in 0..n {
                            drow[k] += yrow[k] * (grow[k] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = self.value(*gamma).data();
                let dim = gm.len();
                with(*gamma, &mut |d| {
                    for (grow, hrow) in g.chunks(dim).zip(xhat.chunks(dim)) {
                        for k in 0..dim {
                            d[k] += grow[k] * hrow[k];
                        }
                    }
                });
                with(*beta, &mut |d| {
                    for grow in g.chunks(dim) {
                        add_into(d, grow);
                    }
                });
                with(*x, &mut |d| {
                    let inv_d = 1.0 / dim as f64;
                    let mut dh = vec![0.0; dim];
                    for (r, (drow, grow)) in d.chunks_mut(dim).zip(g.chunks(dim)).enumerate() {
                        let hrow = &xhat[r * dim..(r + 1) * dim];
                        for k in 0..dim {
                            dh[k] = grow[k] * gm[k];
                        }
                        let mean_dh = dh.iter().sum::<f64>() * inv_d;
                        let mean_dh_h = kernels::dot(&dh, hrow) * inv_d;
                        for k in 0..dim {
                            drow[k] += rstd[r] * (dh[k] - mean_dh - hrow[k] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let dim = node.value.shape()[1];
                with(*table, &mut |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                weights,
            } => {
                let c = self.value(*logits).last_dim();
                with(*logits, &mut |d| {
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let scale = g[0] * w;
                        for k in 0..c {
                            d[r * c + k] += scale * probs[r * c + k];
                        }
                        d[r * c + targets[r]] -= scale;
                    }
                });
            }
            Op::Mse { pred, dpred } => with(*pred, &mut |d| kernels::axpy(g[0], dpred, d)),
            Op::Sum(a) => with(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => with(*a, &mut |d| {
                let s = g[0] / d.len() as f64;
                d.iter_mut().for_each(|x| *x += s)
            }),
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

#[inline]
fn add_into(d: &mut [f64], g: &[f64]) {
    for (x, y) in d.iter_mut().zip(g) {
        *x += y;
    }
}
