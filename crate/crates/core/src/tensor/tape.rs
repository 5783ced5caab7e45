use std::collections::HashMap;

use rand::Rng;

use super::{matmul_into, sigmoid, transpose, ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Reduction used by [`Tape::segment_reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduce {
    Mean,
    Sum,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, Var),
    MulConst(Var, f64),
    AddConst(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    Sum { input: Var, axis: usize },
    Mean { input: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    LogSumExp { input: Var, axis: usize },
    SqNorm(Var),
    Dropout { input: Var, mask: Vec<f64> },
    Gather { input: Var, index: Vec<usize> },
    Segment { input: Var, seg: Vec<usize>, reduce: Reduce, argmax: Vec<usize>, counts: Vec<usize> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    param: Option<ParamId>,
}

/// Gradients of the leaves created with [`Tape::leaf_grad`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_var: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(&v)
    }
}

/// Append-only record of operations; reverse iteration is a valid
/// topological order for backward.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Decomposes `shape` around `axis` into `(outer, dim, inner)`.
fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn mismatch(op: &'static str, shapes: &[&[usize]]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
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

    /// Constant input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            op: Op::Leaf,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Free input whose gradient is returned by [`Tape::backward`].
    pub fn leaf_grad(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: true,
            op: Op::Leaf,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Places a stored parameter on the tape (once per tape). It requires
    /// gradients iff the store says so.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            requires_grad: store.requires_grad(id),
            op: Op::Leaf,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", &[sa, sb]));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, &[sa, sb]));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(sa.to_vec(), data)
    }

    /// Matrix transpose of a 2-d value.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(mismatch("transpose", &[&shape]));
        }
        let data = transpose(self.value(x).data(), shape[0], shape[1]);
        let t = Tensor::new(vec![shape[1], shape[0]], data)?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// `x[n, m] + b[m]`, broadcasting `b` over the leading dimension.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(mismatch("add_row", &[sx, sb]));
        }
        let m = sx[1];
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % m])
            .collect();
        let t = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(x, b), &[x, b]))
    }

    /// `x[n, m] * s[n, 1]`, scaling each row by its own factor.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if sx.len() != 2 || ss.len() != 2 || ss[1] != 1 || ss[0] != sx[0] {
            return Err(mismatch("mul_col", &[sx, ss]));
        }
        let m = sx[1];
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / m.max(1)])
            .collect();
        let t = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(t, Op::MulCol(x, s), &[x, s]))
    }

    /// `x * s` where `s` holds a single value.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(mismatch("scale", &[self.shape(x), self.shape(s)]));
        }
        let k = self.value(s).item();
        let data = self.value(x).data().iter().map(|v| v * k).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::Scale(x, s), &[x, s]))
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        self.push(t, Op::MulConst(x, c), &[x])
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v + c).collect();
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        self.push(t, Op::AddConst(x), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.mul_const(x, -1.0)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| mismatch("concat", &[]))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = split_axis("concat", &base, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(mismatch("concat", &[&base, s]));
            }
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let d = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * d..(o + 1) * d]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, dim, inner) = split_axis("slice", &shape, axis)?;
        if start + len > dim {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                bound: dim,
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, Op::Slice { input: x, axis, start }, &[x]))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        self.push(t, op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, f64::abs, Op::Abs(x))
    }

    fn reduce_axis(&mut self, op: &'static str, x: Var, axis: usize) -> Result<(Vec<usize>, Vec<f64>, usize, usize, usize)> {
        let shape = self.shape(x).to_vec();
        let (outer, dim, inner) = split_axis(op, &shape, axis)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let row = &src[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (i, &v) in row.iter().enumerate() {
                    out[o * inner + i] += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok((out_shape, out, outer, dim, inner))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, data, ..) = self.reduce_axis("sum", x, axis)?;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Sum { input: x, axis }, &[x]))
    }

    /// Mean over `axis`, removing it. An empty axis yields zeros.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, mut data, _, dim, _) = self.reduce_axis("mean", x, axis)?;
        if dim > 0 {
            data.iter_mut().for_each(|v| *v /= dim as f64);
        }
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Mean { input: x, axis }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Mean of all values (zero for an empty tensor).
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s: f64 = self.value(x).data().iter().sum();
        let m = if n == 0 { 0.0 } else { s / n as f64 };
        self.push(Tensor::scalar(m), Op::MeanAll(x), &[x])
    }

    /// Numerically stable `log Σ exp` over `axis`.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, dim, inner) = split_axis("logsumexp", &shape, axis)?;
        let src = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| src[(o * dim + d) * inner + i];
                let m = (0..dim).map(at).fold(f64::NEG_INFINITY, f64::max);
                if m.is_finite() {
                    let s: f64 = (0..dim).map(|d| (at(d) - m).exp()).sum();
                    out[o * inner + i] = m + s.ln();
                } else {
                    out[o * inner + i] = m;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::LogSumExp { input: x, axis }, &[x]))
    }

    /// `Σ x²` as a scalar.
    pub fn sq_norm(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SqNorm(x), &[x])
    }

    /// Inverted dropout; the identity when `train` is false or `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Var {
        if !train || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        self.push(t, Op::Dropout { input: x, mask }, &[x])
    }

    /// Row gather: `out[i] = x[index[i]]`. Also serves as embedding lookup.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(mismatch("gather", &[&shape]));
        }
        let n = shape[0];
        let c = self.value(x).cols();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: i,
                    bound: n,
                });
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(
            t,
            Op::Gather {
                input: x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    pub fn embedding(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        self.gather(table, index)
    }

    /// Reduces rows of `x[e, m]` into `n` segments; row `i` goes to
    /// `seg[i]`. Empty segments produce zero rows.
    pub fn segment_reduce(&mut self, x: Var, seg: &[usize], n: usize, reduce: Reduce) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != seg.len() {
            return Err(mismatch("segment_reduce", &[&shape, &[seg.len()]]));
        }
        let m = shape[1];
        let src = self.value(x).data();
        let mut counts = vec![0usize; n];
        let mut out = vec![0.0; n * m];
        let mut argmax = Vec::new();
        match reduce {
            Reduce::Sum | Reduce::Mean => {
                for (i, &s) in seg.iter().enumerate() {
                    if s >= n {
                        return Err(TensorError::IndexOutOfRange {
                            op: "segment_reduce",
                            index: s,
                            bound: n,
                        });
                    }
                    counts[s] += 1;
                    let row = &src[i * m..(i + 1) * m];
                    for (o, v) in out[s * m..(s + 1) * m].iter_mut().zip(row) {
                        *o += v;
                    }
                }
                if reduce == Reduce::Mean {
                    for s in 0..n {
                        if counts[s] > 1 {
                            let c = counts[s] as f64;
                            out[s * m..(s + 1) * m].iter_mut().for_each(|v| *v /= c);
                        }
                    }
                }
            }
            Reduce::Max => {
                argmax = vec![usize::MAX; n * m];
                for (i, &s) in seg.iter().enumerate() {
                    if s >= n {
                        return Err(TensorError::IndexOutOfRange {
                            op: "segment_reduce",
                            index: s,
                            bound: n,
                        });
                    }
                    counts[s] += 1;
                    for j in 0..m {
                        let v = src[i * m + j];
                        let slot = s * m + j;
                        if argmax[slot] == usize::MAX || v > out[slot] {
                            out[slot] = v;
                            argmax[slot] = i;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push(
            t,
            Op::Segment {
                input: x,
                seg: seg.to_vec(),
                reduce,
                argmax,
                counts,
            },
            &[x],
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != targets.len() {
            return Err(mismatch("bce_with_logits", &[self.shape(logits), &[targets.len()]]));
        }
        let n = z.len().max(1) as f64;
        let total: f64 = z
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let t = Tensor::scalar(total / n);
        Ok(self.push(
            t,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients are added into
    /// `store`; gradients of [`Tape::leaf_grad`] inputs are returned. The
    /// tape is cleared afterwards.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if !node.requires_grad || !matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = grads[idx]
                .take()
                .unwrap_or_else(|| vec![0.0; node.value.len()]);
            match node.param {
                Some(id) => store.accumulate_grad(id, &g),
                None => {
                    out.by_var
                        .insert(Var(idx), Tensor::new(node.value.shape().to_vec(), g)?);
                }
            }
        }
        self.nodes.clear();
        self.param_vars.clear();
        Ok(out)
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        let val = |v: &Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                if rg(a) {
                    let bt = transpose(val(b), k, m);
                    let mut ga = vec![0.0; n * k];
                    matmul_into(g, &bt, &mut ga, n, m, k);
                    add_into(&mut grads[a.0], &ga);
                }
                if rg(b) {
                    let at = transpose(val(a), n, k);
                    let mut gb = vec![0.0; k * m];
                    matmul_into(&at, g, &mut gb, k, n, m);
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                add_into(&mut grads[x.0], &transpose(g, s[1], s[0]));
            }
            Op::Add(a, b) => {
                if rg(a) {
                    add_into(&mut grads[a.0], g);
                }
                if rg(b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if rg(a) {
                    add_into(&mut grads[a.0], g);
                }
                if rg(b) {
                    let ng: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_into(&mut grads[b.0], &ng);
                }
            }
            Op::Mul(a, b) => {
                if rg(a) {
                    let ga: Vec<f64> = g.iter().zip(val(b)).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[a.0], &ga);
                }
                if rg(b) {
                    let gb: Vec<f64> = g.iter().zip(val(a)).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::AddRow(x, b) => {
                if rg(x) {
                    add_into(&mut grads[x.0], g);
                }
                if rg(b) {
                    let m = self.shape(*b)[0];
                    let mut gb = vec![0.0; m];
                    for (i, v) in g.iter().enumerate() {
                        gb[i % m] += v;
                    }
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::MulCol(x, s) => {
                let m = self.shape(*x)[1].max(1);
                if rg(x) {
                    let sv = val(s);
                    let gx: Vec<f64> = g.iter().enumerate().map(|(i, v)| v * sv[i / m]).collect();
                    add_into(&mut grads[x.0], &gx);
                }
                if rg(s) {
                    let n = self.shape(*s)[0];
                    let xv = val(x);
                    let mut gs = vec![0.0; n];
                    for (i, v) in g.iter().enumerate() {
                        gs[i / m] += v * xv[i];
                    }
                    add_into(&mut grads[s.0], &gs);
                }
            }
            Op::Scale(x, s) => {
                let k = val(s)[0];
                if rg(x) {
                    let gx: Vec<f64> = g.iter().map(|v| v * k).collect();
                    add_into(&mut grads[x.0], &gx);
                }
                if rg(s) {
                    let gs: f64 = g.iter().zip(val(x)).map(|(a, b)| a * b).sum();
                    add_into(&mut grads[s.0], &[gs]);
                }
            }
            Op::MulConst(x, c) => {
                let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                add_into(&mut grads[x.0], &gx);
            }
            Op::AddConst(x) => add_into(&mut grads[x.0], g),
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let d = self.shape(*v)[*axis] * inner;
                    if rg(v) {
                        let mut gv = Vec::with_capacity(outer * d);
                        for o in 0..outer {
                            gv.extend_from_slice(&g[o * total + offset..o * total + offset + d]);
                        }
                        add_into(&mut grads[v.0], &gv);
                    }
                    offset += d;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.shape(*input);
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let dim = in_shape[*axis];
                let len = node.value.shape()[*axis];
                let mut gi = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    let dst = o * dim * inner + start * inner;
                    let src = o * len * inner;
                    gi[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                add_into(&mut grads[input.0], &gi);
            }
            Op::Sigmoid(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(v, s)| v * s * (1.0 - s))
                    .collect();
                add_into(&mut grads[x.0], &gx);
            }
            Op::Relu(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(val(x))
                    .map(|(v, xv)| if *xv > 0.0 { *v } else { 0.0 })
                    .collect();
                add_into(&mut grads[x.0], &gx);
            }
            Op::Tanh(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(v, t)| v * (1.0 - t * t))
                    .collect();
                add_into(&mut grads[x.0], &gx);
            }
            Op::Abs(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(val(x))
                    .map(|(v, xv)| v * if *xv > 0.0 { 1.0 } else if *xv < 0.0 { -1.0 } else { 0.0 })
                    .collect();
                add_into(&mut grads[x.0], &gx);
            }
            Op::Sum { input, axis } | Op::Mean { input, axis } => {
                let in_shape = self.shape(*input);
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let dim = in_shape[*axis];
                let scale = if matches!(node.op, Op::Mean { .. }) && dim > 0 {
                    1.0 / dim as f64
                } else {
                    1.0
                };
                let mut gi = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    for d in 0..dim {
                        for i in 0..inner {
                            gi[(o * dim + d) * inner + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                add_into(&mut grads[input.0], &gi);
            }
            Op::SumAll(x) => {
                let gx = vec![g[0]; self.value(*x).len()];
                add_into(&mut grads[x.0], &gx);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                let gx = vec![g[0] / n.max(1) as f64; n];
                add_into(&mut grads[x.0], &gx);
            }
            Op::LogSumExp { input, axis } => {
                let in_shape = self.shape(*input);
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let dim = in_shape[*axis];
                let xv = val(input);
                let out = node.value.data();
                let mut gi = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let lse = out[o * inner + i];
                        for d in 0..dim {
                            let at = (o * dim + d) * inner + i;
                            let w = if lse.is_finite() { (xv[at] - lse).exp() } else { 0.0 };
                            gi[at] = g[o * inner + i] * w;
                        }
                    }
                }
                add_into(&mut grads[input.0], &gi);
            }
            Op::SqNorm(x) => {
                let gx: Vec<f64> = val(x).iter().map(|v| 2.0 * v * g[0]).collect();
                add_into(&mut grads[x.0], &gx);
            }
            Op::Dropout { input, mask } => {
                let gx: Vec<f64> = g.iter().zip(mask).map(|(v, m)| v * m).collect();
                add_into(&mut grads[input.0], &gx);
            }
            Op::Gather { input, index } => {
                let c = self.value(*input).cols();
                let mut gi = vec![0.0; self.value(*input).len()];
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        gi[i * c + j] += g[r * c + j];
                    }
                }
                add_into(&mut grads[input.0], &gi);
            }
            Op::Segment {
                input,
                seg,
                reduce,
                argmax,
                counts,
            } => {
                let m = node.value.shape()[1];
                let mut gi = vec![0.0; self.value(*input).len()];
                match reduce {
                    Reduce::Sum | Reduce::Mean => {
                        for (i, &s) in seg.iter().enumerate() {
                            let w = if *reduce == Reduce::Mean {
                                1.0 / counts[s] as f64
                            } else {
                                1.0
                            };
                            for j in 0..m {
                                gi[i * m + j] += g[s * m + j] * w;
                            }
                        }
                    }
                    Reduce::Max => {
                        for (slot, &i) in argmax.iter().enumerate() {
                            if i != usize::MAX {
                                gi[i * m + slot % m] += g[slot];
                            }
                        }
                    }
                }
                add_into(&mut grads[input.0], &gi);
            }
            Op::BceWithLogits { logits, targets } => {
                let n = targets.len().max(1) as f64;
                let gx: Vec<f64> = val(logits)
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| g[0] * (sigmoid(z) - y) / n)
                    .collect();
                add_into(&mut grads[logits.0], &gx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), 0.5);
    }

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let i = tape.leaf(Tensor::identity(3));
        let av = tape.leaf(t(&[3, 3], &a));
        let p = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(p).data(), &a[..]);
    }

    #[test]
    fn logsumexp_of_two_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.logsumexp(x, 0).unwrap();
        assert!((tape.value(y).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let sq = tape.mul(wv, wv).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad.as_ref().unwrap().data(), &[2.0, 4.0]);
        assert!(tape.is_empty());
    }

    #[test]
    fn disconnected_param_gets_zero() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![1.0]));
        let b = store.add("b", Tensor::vector(vec![5.0]));
        let mut tape = Tape::new();
        let av = tape.param(&store, a);
        let _bv = tape.param(&store, b);
        let loss = tape.sq_norm(av);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(b).grad.as_ref().unwrap().data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.leaf_grad(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x, &mut store),
            Err(TensorError::NotScalar(_))
        ));
    }

    #[test]
    fn shape_errors_name_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn shared_subexpression_sums_gradients() {
        // f = (x*y) + (x*y)*x → df/dx = 2y + ... checked against scalar calculus
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.leaf_grad(Tensor::scalar(1.5));
        let y = tape.leaf_grad(Tensor::scalar(-2.0));
        let xy = tape.mul(x, y).unwrap();
        let xyx = tape.mul(xy, x).unwrap();
        let f = tape.add(xy, xyx).unwrap();
        let g = tape.backward(f, &mut store).unwrap();
        let (xv, yv) = (1.5, -2.0);
        assert!((g.get(x).unwrap().item() - (yv + 2.0 * xv * yv)).abs() < 1e-12);
        assert!((g.get(y).unwrap().item() - (xv + xv * xv)).abs() < 1e-12);
    }

    #[test]
    fn segment_mean_handles_empty_segments() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let y = tape.segment_reduce(x, &[0, 0, 2], 3, Reduce::Mean).unwrap();
        assert_eq!(tape.value(y).data(), &[2., 3., 0., 0., 5., 6.]);
        let z = tape.segment_reduce(x, &[0, 0, 2], 3, Reduce::Max).unwrap();
        assert_eq!(tape.value(z).data(), &[3., 4., 0., 0., 5., 6.]);
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[4, 4], 1.0));
        assert_eq!(tape.dropout(x, 0.5, false, &mut rng), x);
        let y = tape.dropout(x, 0.5, true, &mut rng);
        assert!(tape
            .value(y)
            .data()
            .iter()
            .all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn concat_and_slice_invert() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.leaf(t(&[2, 1], &[9., 8.]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 9., 3., 4., 8.]);
        let s = tape.slice(c, 1, 2, 1).unwrap();
        assert_eq!(tape.value(s).data(), &[9., 8.]);
    }
}
