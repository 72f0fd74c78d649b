use super::kernels::{self, ConvGeom, PoolGeom};
use super::{Scalar, Tensor};
use crate::error::{shape_err, DanError, Result};

pub const BN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Option<Vec<T>>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    Gather {
        x: Var,
        src: Vec<Option<usize>>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    MulConst {
        x: Var,
        c: Vec<T>,
    },
    Softmax {
        x: Var,
        axis: usize,
        mask: Vec<bool>,
    },
    Maximum {
        a: Var,
        b: Var,
    },
    WeightedNll {
        x: Var,
        w: Vec<T>,
    },
    AbsDiffSum {
        a: Var,
        b: Var,
        mask: Vec<bool>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Sum {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance (the one used for normalization).
    pub var: Vec<f64>,
    /// Number of values per channel.
    pub count: usize,
}

/// Recording tape. Values are immutable once pushed; `backward` walks the
/// tape in reverse and accumulates gradients additively.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last `backward`, if the value took part.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding)?;
        if self.value(b).len() != geom.out_c {
            return shape_err(format!(
                "bias has {} values for {} filters",
                self.value(b).len(),
                geom.out_c
            ));
        }
        let track = self.nodes[w.0].requires_grad || self.nodes[x.0].requires_grad;
        let (out, cols) = kernels::conv2d(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            track,
        );
        let value = Tensor::new(&geom.out_shape(), out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, &[x, w, b]))
    }

    /// Per-channel normalization of `x[B,C,H,W]`. With `running = None` the
    /// batch statistics are used and returned; otherwise the given
    /// `(mean, var)` pair is applied as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return shape_err(format!("batch_norm expects x[B,C,H,W], got {shape:?}"));
        }
        let (bsz, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return shape_err(format!("batch_norm affine parameters must have {c} values"));
        }
        let count = bsz * plane;
        let xs = self.value(x).data();
        let eps = T::from_f64(BN_EPS);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let stats = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return shape_err("running statistics length mismatch");
                }
                mean.copy_from_slice(m);
                var.copy_from_slice(v);
                None
            }
            None => {
                if count == 0 {
                    return shape_err("batch_norm over an empty batch");
                }
                let n = T::from_f64(count as f64);
                for b in 0..bsz {
                    for ch in 0..c {
                        let s = &xs[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                        mean[ch] = s.iter().fold(mean[ch], |a, &v| a + v);
                    }
                }
                for m in mean.iter_mut() {
                    *m = *m / n;
                }
                for b in 0..bsz {
                    for ch in 0..c {
                        let s = &xs[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                        var[ch] = s.iter().fold(var[ch], |a, &v| a + (v - mean[ch]) * (v - mean[ch]));
                    }
                }
                for v in var.iter_mut() {
                    *v = *v / n;
                }
                Some(BatchStats {
                    mean: mean.iter().map(|v| v.as_f64()).collect(),
                    var: var.iter().map(|v| v.as_f64()).collect(),
                    count,
                })
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..bsz {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    let h = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + be[ch];
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        let var_out = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: running.is_none(),
            },
            &[x, gamma, beta],
        );
        Ok((var_out, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let geom = PoolGeom::new(self.shape(x), k, stride, padding)?;
        let s = self.shape(x);
        let out_shape = [s[0], s[1], geom.out_h, geom.out_w];
        let (out, arg) = kernels::maxpool2d(&geom, self.value(x).data());
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::MaxPool { x, arg }, &[x]))
    }

    /// Builds a tensor of `shape` whose element `e` is `x[src[e]]`, or zero
    /// where `src[e]` is `None`. Repeated sources accumulate gradient.
    pub fn gather(&mut self, x: Var, shape: &[usize], src: Vec<Option<usize>>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if src.len() != n {
            return shape_err(format!("gather map has {} entries for shape {shape:?}", src.len()));
        }
        let xs = self.value(x).data();
        if let Some(bad) = src.iter().flatten().find(|&&i| i >= xs.len()) {
            return shape_err(format!("gather index {bad} out of range {}", xs.len()));
        }
        let data = src.iter().map(|s| s.map_or(T::zero(), |i| xs[i])).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Gather { x, src }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != n {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape(x)));
        }
        self.gather(x, shape, (0..n).map(Some).collect())
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat of nothing");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return shape_err(format!("concat shapes {base:?} and {s:?} disagree"));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn mul_const(&mut self, x: Var, c: Vec<T>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return shape_err("mul_const operand length mismatch");
        }
        let data = self.value(x).data().iter().zip(&c).map(|(&a, &b)| a * b).collect();
        let value = Tensor::new(self.shape(x), data)?;
        Ok(self.push(value, Op::MulConst { x, c }, &[x]))
    }

    /// Appends a constant slice to the last (`axis = 2`) or middle
    /// (`axis = 1`) extent of a rank-3 tensor.
    pub fn append_const(&mut self, x: Var, axis: usize, value: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || !(axis == 1 || axis == 2) {
            return shape_err(format!("append_const expects rank 3 and axis 1 or 2, got {s:?}/{axis}"));
        }
        let (b, r, c) = (s[0], s[1], s[2]);
        // Constant entries come from a one-element side input.
        let konst = self.input(Tensor::new(&[1], vec![value])?);
        let src_len = self.value(x).len();
        let mut src = Vec::new();
        let out_shape;
        if axis == 2 {
            out_shape = vec![b, r, c + 1];
            for bi in 0..b {
                for i in 0..r {
                    for j in 0..=c {
                        src.push(if j < c { Some((bi * r + i) * c + j) } else { Some(src_len) });
                    }
                }
            }
        } else {
            out_shape = vec![b, r + 1, c];
            for bi in 0..b {
                for i in 0..=r {
                    for j in 0..c {
                        src.push(if i < r { Some((bi * r + i) * c + j) } else { Some(src_len) });
                    }
                }
            }
        }
        let joined = self.concat_flat(x, konst)?;
        self.gather(joined, &out_shape, src)
    }

    fn concat_flat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        let fa = self.reshape(a, &[na])?;
        let fb = self.reshape(b, &[nb])?;
        self.concat(&[fa, fb], 0)
    }

    /// Drops the last slice along `axis` of a rank-3 tensor.
    pub fn drop_last(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || !(axis == 1 || axis == 2) || s[axis] == 0 {
            return shape_err(format!("drop_last expects rank 3 and axis 1 or 2, got {s:?}/{axis}"));
        }
        let (b, r, c) = (s[0], s[1], s[2]);
        let (ro, co) = if axis == 1 { (r - 1, c) } else { (r, c - 1) };
        let mut src = Vec::with_capacity(b * ro * co);
        for bi in 0..b {
            for i in 0..ro {
                for j in 0..co {
                    src.push(Some((bi * r + i) * c + j));
                }
            }
        }
        self.gather(x, &[b, ro, co], src)
    }

    /// Softmax of a rank-3 tensor along `axis` (1 = down columns, 2 = along
    /// rows), restricted to `mask`; masked entries become zero.
    pub fn softmax(&mut self, x: Var, axis: usize, mask: Option<Vec<bool>>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || !(axis == 1 || axis == 2) {
            return shape_err(format!("softmax expects rank 3 and axis 1 or 2, got {s:?}/{axis}"));
        }
        let n = self.value(x).len();
        let mask = mask.unwrap_or_else(|| vec![true; n]);
        if mask.len() != n {
            return shape_err("softmax mask length mismatch");
        }
        let (b, r, c) = (s[0], s[1], s[2]);
        let mut out = self.value(x).data().to_vec();
        for bi in 0..b {
            let base = bi * r * c;
            if axis == 2 {
                for i in 0..r {
                    let start = base + i * c;
                    kernels::softmax_masked(&mut out, start, 1, c, |j| mask[start + j]);
                }
            } else {
                for j in 0..c {
                    let start = base + j;
                    kernels::softmax_masked(&mut out, start, c, r, |i| mask[start + i * c]);
                }
            }
        }
        let value = Tensor::new(&s, out)?;
        Ok(self.push(value, Op::Softmax { x, axis, mask }, &[x]))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("maximum of {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| if q > p { q } else { p })
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Maximum { a, b }, &[a, b]))
    }

    /// Per-batch `Σ w ⊙ (−ln x)` over a tensor whose first extent is the
    /// batch. Entries with zero weight are skipped so `0·ln 0` never occurs;
    /// `x` is floored at the smallest normal value to keep underflowed
    /// probabilities finite.
    pub fn weighted_nll(&mut self, x: Var, w: Vec<T>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let xs = self.value(x).data();
        if w.len() != xs.len() || s.is_empty() {
            return shape_err("weighted_nll operand mismatch");
        }
        let per = xs.len() / s[0].max(1);
        let mut out = vec![T::zero(); s[0]];
        for (bi, o) in out.iter_mut().enumerate() {
            for i in bi * per..(bi + 1) * per {
                if w[i] != T::zero() {
                    *o = *o - w[i] * xs[i].max(T::min_positive_value()).ln();
                }
            }
        }
        let value = Tensor::new(&[s[0]], out)?;
        Ok(self.push(value, Op::WeightedNll { x, w }, &[x]))
    }

    /// Per-batch entrywise ℓ1 distance restricted to `mask`.
    pub fn abs_diff_sum(&mut self, a: Var, b: Var, mask: Vec<bool>) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s != self.shape(b) || s.is_empty() || mask.len() != self.value(a).len() {
            return shape_err("abs_diff_sum operand mismatch");
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let per = xa.len() / s[0].max(1);
        let mut out = vec![T::zero(); s[0]];
        for (bi, o) in out.iter_mut().enumerate() {
            for i in bi * per..(bi + 1) * per {
                if mask[i] {
                    *o = *o + (xa[i] - xb[i]).abs();
                }
            }
        }
        let value = Tensor::new(&[s[0]], out)?;
        Ok(self.push(value, Op::AbsDiffSum { a, b, mask }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("add of {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("mul of {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p * q)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x, c }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    /// Fingerprint of every piecewise decision taken in the forward pass
    /// (ReLU signs, pooling argmaxes, `maximum` choices, `abs` signs). Two
    /// evaluations with equal fingerprints lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for v in self.value(*x).data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { arg, .. } => arg.hash(&mut h),
                Op::Maximum { a, b } => {
                    for (p, q) in self.value(*a).data().iter().zip(self.value(*b).data()) {
                        (q > p).hash(&mut h);
                    }
                }
                Op::AbsDiffSum { a, b, mask } => {
                    for ((p, q), m) in self.value(*a).data().iter().zip(self.value(*b).data()).zip(mask) {
                        (*m && p > q).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse pass from a scalar. Gradients from earlier passes are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(DanError::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(idx, &g);
            self.nodes[idx].grad = Some(g);
            for (var, d) in contributions {
                self.accumulate(var, d);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, d: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(d) {
                    *a = *a + b;
                }
            }
            None => node.grad = Some(d),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, idx: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    cols.as_deref(),
                    self.value(*w).data(),
                    g,
                );
                out.push((*x, dx));
                out.push((*w, dw));
                out.push((*b, db));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = self.shape(*x);
                let (bsz, c, plane) = (s[0], s[1], s[2] * s[3]);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..bsz {
                    for ch in 0..c {
                        let off = (bi * c + ch) * plane;
                        for i in off..off + plane {
                            dbeta[ch] = dbeta[ch] + g[i];
                            dgamma[ch] = dgamma[ch] + g[i] * xhat[i];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let n = T::from_f64((bsz * plane) as f64);
                    for bi in 0..bsz {
                        for ch in 0..c {
                            let off = (bi * c + ch) * plane;
                            let k = gam[ch] * inv_std[ch];
                            for i in off..off + plane {
                                dx[i] = if *batch_stats {
                                    k * (g[i] - dbeta[ch] / n - xhat[i] * dgamma[ch] / n)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Relu { x } => {
                let xs = self.value(*x).data();
                let dx = xs
                    .iter()
                    .zip(g)
                    .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                out.push((*x, dx));
            }
            Op::MaxPool { x, arg } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&i, &d) in arg.iter().zip(g) {
                    dx[i] = dx[i] + d;
                }
                out.push((*x, dx));
            }
            Op::Gather { x, src } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (s, &d) in src.iter().zip(g) {
                    if let Some(i) = s {
                        dx[*i] = dx[*i] + d;
                    }
                }
                out.push((*x, dx));
            }
            Op::Concat { parts, axis } => {
                let s = &node.value.shape;
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    let mut d = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        d.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                    }
                    offset += len;
                    out.push((p, d));
                }
            }
            Op::MulConst { x, c } => {
                out.push((*x, g.iter().zip(c).map(|(&a, &b)| a * b).collect()));
            }
            Op::Softmax { x, axis, mask } => {
                let y = node.value.data();
                let s = &node.value.shape;
                let (b, r, c) = (s[0], s[1], s[2]);
                let mut dx = vec![T::zero(); y.len()];
                let (lines, count, stride, step): (usize, usize, usize, usize) =
                    if *axis == 2 { (r, c, 1, c) } else { (c, r, c, 1) };
                for bi in 0..b {
                    for l in 0..lines {
                        let start = bi * r * c + l * step;
                        let mut dot = T::zero();
                        for k in 0..count {
                            let i = start + k * stride;
                            if mask[i] {
                                dot = dot + y[i] * g[i];
                            }
                        }
                        for k in 0..count {
                            let i = start + k * stride;
                            if mask[i] {
                                dx[i] = y[i] * (g[i] - dot);
                            }
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Maximum { a, b } => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![T::zero(); g.len()];
                let mut db = vec![T::zero(); g.len()];
                for i in 0..g.len() {
                    if xb[i] > xa[i] {
                        db[i] = g[i];
                    } else {
                        da[i] = g[i];
                    }
                }
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::WeightedNll { x, w } => {
                let xs = self.value(*x).data();
                let per = xs.len() / g.len().max(1);
                let dx = (0..xs.len())
                    .map(|i| {
                        if w[i] == T::zero() {
                            T::zero()
                        } else {
                            -g[i / per] * w[i] / xs[i].max(T::min_positive_value())
                        }
                    })
                    .collect();
                out.push((*x, dx));
            }
            Op::AbsDiffSum { a, b, mask } => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let per = xa.len() / g.len().max(1);
                let mut da = vec![T::zero(); xa.len()];
                for i in 0..xa.len() {
                    if mask[i] {
                        let d = xa[i] - xb[i];
                        let sign = if d > T::zero() {
                            T::one()
                        } else if d < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        da[i] = sign * g[i / per];
                    }
                }
                let db = da.iter().map(|&v| -v).collect();
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul { a, b } => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, g.iter().zip(xb).map(|(&d, &v)| d * v).collect()));
                out.push((*b, g.iter().zip(xa).map(|(&d, &v)| d * v).collect()));
            }
            Op::Scale { x, c } => {
                out.push((*x, g.iter().map(|&v| v * *c).collect()));
            }
            Op::Sum { x } => {
                out.push((*x, vec![g[0]; self.value(*x).len()]));
            }
        }
        out
    }
}
