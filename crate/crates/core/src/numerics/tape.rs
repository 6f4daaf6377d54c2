//! Eager reverse-mode tape.
//!
//! Every op computes its value immediately and appends a node; node order is
//! therefore already a topological order and `backward` simply walks it in
//! reverse. A fresh tape is built per training step.

use super::tensor::{matmul_raw, transpose_raw, Tensor};
use crate::error::{Result, StepError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    Relu(Var),
    Tanh(Var),
    Ln(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax(Var),
    LogSoftmax(Var),
    Normalize { x: Var, eps: f64, norms: Vec<f64> },
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    SumLast(Var),
    MaxLast { x: Var, indices: Vec<usize> },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    Select { x: Var, idx: Vec<usize> },
    Reshape(Var),
    GroupMean { x: Var, groups: Vec<Vec<usize>> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn leading_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
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

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the value of `x` into a fresh constant, cutting the gradient.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if `v` was reachable.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(StepError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(StepError::shape("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let value = Tensor::new(vec![c, r], transpose_raw(self.value(a).data(), r, c))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(StepError::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("map preserves shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.map(a, |x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.map(a, |x| x + c);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    /// Adds a row vector (shape `[C]` or `[1, C]`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.numel() != ta.cols() {
            return Err(StepError::shape("add_row", ta.shape(), tb.shape()));
        }
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data()[i % c])
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(value, Op::AddRow(a, bias), rg))
    }

    /// ReLU with subgradient 0 at the origin.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.map(a, f64::tanh);
        let rg = self.rg(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(StepError::Numerical("ln of a non-positive value".into()));
        }
        let value = self.map(a, f64::ln);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Ln(a), rg))
    }

    /// Clamp into `[lo, hi]`; gradient is zero where clamping was active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.map(a, |x| x.clamp(lo, hi));
        let rg = self.rg(&[a]);
        self.push(value, Op::Clamp { x: a, lo, hi }, rg)
    }

    /// Row-wise softmax over the last axis, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data().iter().any(|x| x.is_nan()) {
            return Err(StepError::Numerical("softmax input contains NaN".into()));
        }
        let c = t.cols();
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(c) {
            out.extend(softmax_slice(row)?);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data().iter().any(|x| x.is_nan()) {
            return Err(StepError::Numerical("log_softmax input contains NaN".into()));
        }
        let c = t.cols();
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(c) {
            let m = row_max(row)?;
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|&x| x - lse));
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::LogSoftmax(a), rg))
    }

    /// Unit-normalizes every slice along the last axis, dividing by
    /// `max(norm, eps)`.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(c) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let d = n.max(eps);
            norms.push(n);
            out.extend(row.iter().map(|x| x / d));
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::Normalize { x: a, eps, norms }, rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    /// Mean over all rows: `[.., C]` to `[1, C]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; c];
        for row in t.data().chunks(c) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let value = Tensor::new(vec![1, c], out).expect("row shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::MeanRows(a), rg)
    }

    /// Sum over the last axis: `[.., C]` to `[..]`.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t.data().chunks(t.cols()).map(|r| r.iter().sum()).collect();
        let value = Tensor::new(leading_shape(t.shape()), out).expect("leading shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::SumLast(a), rg)
    }

    /// Maximum over the last axis. Ties resolve to the first index and the
    /// gradient flows only to that element.
    pub fn max_last(&mut self, a: Var) -> Result<(Var, Vec<usize>)> {
        let t = self.value(a);
        let (values, indices) = max_last_axis(t)?;
        let rg = self.rg(&[a]);
        let v = self.push(
            values,
            Op::MaxLast {
                x: a,
                indices: indices.clone(),
            },
            rg,
        );
        Ok((v, indices))
    }

    /// Stacks inputs along the row axis. Inputs may be `[C]` or `[R, C]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| StepError::invalid("concat_rows of nothing"))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(StepError::shape("concat_rows", self.value(*first).shape(), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row gather; repeated indices accumulate gradient.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if idx.is_empty() {
            return Err(StepError::invalid("gather_rows with no indices"));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(StepError::invalid(format!("row index {i} out of range for {r} rows")));
            }
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![idx.len(), c], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(
            value,
            Op::GatherRows {
                x: a,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Picks individual elements by flat index into a `[n]` vector.
    pub fn select(&mut self, a: Var, flat_idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if flat_idx.is_empty() {
            return Err(StepError::invalid("select with no indices"));
        }
        let mut data = Vec::with_capacity(flat_idx.len());
        for &i in flat_idx {
            if i >= t.numel() {
                return Err(StepError::invalid(format!("flat index {i} out of range")));
            }
            data.push(t.data()[i]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::vector(data),
            Op::Select {
                x: a,
                idx: flat_idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// `out[n]` is the mean of the rows of `x` listed in `groups[n]`, or zero
    /// when the group is empty. This is a normalized sparse adjacency product
    /// expressed over index lists.
    pub fn group_mean(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; groups.len() * c];
        for (n, group) in groups.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            if let Some(&j) = group.iter().find(|&&j| j >= r) {
                return Err(StepError::invalid(format!("group index {j} out of range for {r} rows")));
            }
            // Addends are summed in sorted order so the result depends only
            // on the multiset of rows, not on how the group is listed.
            let inv = 1.0 / group.len() as f64;
            let mut column = Vec::with_capacity(group.len());
            for col in 0..c {
                column.clear();
                column.extend(group.iter().map(|&j| t.data()[j * c + col]));
                column.sort_by(f64::total_cmp);
                data[n * c + col] = column.iter().sum::<f64>() * inv;
            }
        }
        if groups.is_empty() {
            return Err(StepError::invalid("group_mean with no groups"));
        }
        let value = Tensor::new(vec![groups.len(), c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::GroupMean {
                x,
                groups: groups.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Every reachable node that requires
    /// a gradient ends up with one (zeros if no path carried signal).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(StepError::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut reachable = vec![false; n];
        reachable[loss.0] = true;
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !reachable[i] || !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => vec![0.0; self.nodes[i].value.numel()],
            };
            self.propagate(i, &g, &mut grads, &mut reachable);
            grads[i] = Some(g);
        }

        self.grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                if !reachable[i] || !node.requires_grad {
                    return None;
                }
                let data = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                Some(Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"))
            })
            .collect();
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], reach: &mut [bool]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            reach[v.0] = true;
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let bt = transpose_raw(tb.data(), k, n);
                    acc(*a, matmul_raw(g, &bt, m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    let at = transpose_raw(ta.data(), m, k);
                    acc(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let s = val(*a).shape();
                acc(*a, transpose_raw(g, s[1], s[0]));
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                acc(*a, g.iter().zip(tb).map(|(g, b)| g * b).collect());
                acc(*b, g.iter().zip(ta).map(|(g, a)| g * a).collect());
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|x| x * c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::AddRow(a, b) => {
                let c = val(*a).cols();
                let mut gb = vec![0.0; c];
                for row in g.chunks(c) {
                    for (o, x) in gb.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                acc(*a, g.to_vec());
                acc(*b, gb);
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                acc(*a, g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Tanh(a) => {
                acc(*a, g.iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect());
            }
            Op::Ln(a) => {
                let x = val(*a).data();
                acc(*a, g.iter().zip(x).map(|(g, x)| g / x).collect());
            }
            Op::Clamp { x, lo, hi } => {
                let xs = val(*x).data();
                acc(
                    *x,
                    g.iter()
                        .zip(xs)
                        .map(|(g, &v)| if v < *lo || v > *hi { 0.0 } else { *g })
                        .collect(),
                );
            }
            Op::Softmax(a) => {
                let c = y.cols();
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(y.data().chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    dx.extend(gr.iter().zip(yr).map(|(g, y)| y * (g - dot)));
                }
                acc(*a, dx);
            }
            Op::LogSoftmax(a) => {
                let c = y.cols();
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(y.data().chunks(c)) {
                    let gsum: f64 = gr.iter().sum();
                    dx.extend(gr.iter().zip(yr).map(|(g, y)| g - y.exp() * gsum));
                }
                acc(*a, dx);
            }
            Op::Normalize { x, eps, norms } => {
                let c = y.cols();
                let mut dx = Vec::with_capacity(g.len());
                for ((gr, yr), &n) in g.chunks(c).zip(y.data().chunks(c)).zip(norms) {
                    if n > *eps {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        dx.extend(gr.iter().zip(yr).map(|(g, y)| (g - y * dot) / n));
                    } else {
                        dx.extend(gr.iter().map(|g| g / eps));
                    }
                }
                acc(*x, dx);
            }
            Op::SumAll(a) => acc(*a, vec![g[0]; val(*a).numel()]),
            Op::MeanAll(a) => {
                let n = val(*a).numel();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::MeanRows(a) => {
                let t = val(*a);
                let r = t.rows() as f64;
                let dx = (0..t.numel()).map(|k| g[k % t.cols()] / r).collect();
                acc(*a, dx);
            }
            Op::SumLast(a) => {
                let t = val(*a);
                let dx = (0..t.numel()).map(|k| g[k / t.cols()]).collect();
                acc(*a, dx);
            }
            Op::MaxLast { x, indices } => {
                let t = val(*x);
                let c = t.cols();
                let mut dx = vec![0.0; t.numel()];
                for (r, (&j, gv)) in indices.iter().zip(g).enumerate() {
                    dx[r * c + j] += gv;
                }
                acc(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).numel();
                    acc(*p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let t = val(*x);
                let c = t.cols();
                let mut dx = vec![0.0; t.numel()];
                for (k, &i) in idx.iter().enumerate() {
                    for (d, gv) in dx[i * c..(i + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]) {
                        *d += gv;
                    }
                }
                acc(*x, dx);
            }
            Op::Select { x, idx } => {
                let mut dx = vec![0.0; val(*x).numel()];
                for (&i, gv) in idx.iter().zip(g) {
                    dx[i] += gv;
                }
                acc(*x, dx);
            }
            Op::GroupMean { x, groups } => {
                let t = val(*x);
                let c = t.cols();
                let mut dx = vec![0.0; t.numel()];
                for (n, group) in groups.iter().enumerate() {
                    if group.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / group.len() as f64;
                    for &j in group {
                        for (d, gv) in dx[j * c..(j + 1) * c].iter_mut().zip(&g[n * c..(n + 1) * c]) {
                            *d += gv * inv;
                        }
                    }
                }
                acc(*x, dx);
            }
        }
    }
}

fn row_max(row: &[f64]) -> Result<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(StepError::Numerical("softmax row has no finite entry".into()));
    }
    Ok(m)
}

fn softmax_slice(row: &[f64]) -> Result<Vec<f64>> {
    let m = row_max(row)?;
    let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Values and first-occurrence argmax indices along the last axis.
pub fn max_last_axis(t: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let c = t.cols();
    let mut values = Vec::with_capacity(t.rows());
    let mut indices = Vec::with_capacity(t.rows());
    for row in t.data().chunks(c) {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v.is_nan() {
                return Err(StepError::Numerical("max over NaN".into()));
            }
            if v > row[best] {
                best = j;
            }
        }
        values.push(row[best]);
        indices.push(best);
    }
    Ok((Tensor::new(leading_shape(t.shape()), values)?, indices))
}
