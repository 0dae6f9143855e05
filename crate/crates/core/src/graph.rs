//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse creation order, which is a
//! fixed topological order, so gradients are bit-reproducible. Nodes that
//! do not depend on a trainable leaf are never visited by the backward pass.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Validity mask for attention logits; `true` marks an entry that may be
/// attended to.
#[derive(Debug, Clone, PartialEq)]
pub enum AttnMask {
    None,
    /// One flag per key, `[groups, lk]`, shared by all queries of a group.
    Keys(Vec<bool>),
    /// One flag per (query, key), `[groups, lq, lk]`.
    Full(Vec<bool>),
}

impl AttnMask {
    #[inline]
    fn allows(&self, group: usize, lq: usize, lk: usize, i: usize, j: usize) -> bool {
        match self {
            AttnMask::None => true,
            AttnMask::Keys(m) => m[group * lk + j],
            AttnMask::Full(m) => m[(group * lq + i) * lk + j],
        }
    }

    fn check(&self, groups: usize, lq: usize, lk: usize) -> Result<()> {
        let expected = match self {
            AttnMask::None => return Ok(()),
            AttnMask::Keys(m) => (m.len(), groups * lk),
            AttnMask::Full(m) => (m.len(), groups * lq * lk),
        };
        if expected.0 != expected.1 {
            return Err(shape_err!(
                "attention mask has {} entries, expected {}",
                expected.0,
                expected.1
            ));
        }
        Ok(())
    }
}

/// Sparse row-mixing operator: output row `r` is `sum_t weight[r,t] * src[index[r,t]]`.
///
/// Used for bicubic gathers (16 taps) and plain row selection (1 tap).
#[derive(Debug, Clone, PartialEq)]
pub struct GatherPlan<T> {
    taps: usize,
    index: Vec<u32>,
    weight: Vec<T>,
}

impl<T: Scalar> GatherPlan<T> {
    pub fn new(taps: usize) -> Self {
        Self {
            taps,
            index: Vec::new(),
            weight: Vec::new(),
        }
    }

    pub fn with_capacity(taps: usize, rows: usize) -> Self {
        Self {
            taps,
            index: Vec::with_capacity(rows * taps),
            weight: Vec::with_capacity(rows * taps),
        }
    }

    /// Plan selecting `rows` of the source unchanged.
    pub fn select(rows: &[usize]) -> Self {
        Self {
            taps: 1,
            index: rows.iter().map(|&r| r as u32).collect(),
            weight: vec![T::one(); rows.len()],
        }
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    pub fn rows(&self) -> usize {
        if self.taps == 0 {
            0
        } else {
            self.index.len() / self.taps
        }
    }

    /// Appends one output row; `taps` must have exactly `self.taps()` entries.
    pub fn push_row(&mut self, taps: &[(usize, T)]) {
        debug_assert_eq!(taps.len(), self.taps);
        for &(i, w) in taps {
            self.index.push(i as u32);
            self.weight.push(w);
        }
    }

    /// Appends an all-zero output row.
    pub fn push_zero_row(&mut self) {
        for _ in 0..self.taps {
            self.index.push(0);
            self.weight.push(T::zero());
        }
    }

    fn max_index(&self) -> Option<usize> {
        self.index.iter().map(|&i| i as usize).max()
    }

    /// Applies the plan to a plain `[n, cols]` buffer.
    pub fn apply(&self, src: &[T], cols: usize) -> Vec<T> {
        let rows = self.rows();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let dst = &mut out[r * cols..(r + 1) * cols];
            for t in 0..self.taps {
                let w = self.weight[r * self.taps + t];
                if w == T::zero() {
                    continue;
                }
                let s = self.index[r * self.taps + t] as usize;
                for (d, &v) in dst.iter_mut().zip(&src[s * cols..(s + 1) * cols]) {
                    *d += w * v;
                }
            }
        }
        out
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias {
        x: Var,
        bias: Var,
    },
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        dim: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        lq: usize,
        lk: usize,
        heads: usize,
        weights: Vec<T>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        h: usize,
        w: usize,
        cin: usize,
        cout: usize,
        kh: usize,
        kw: usize,
    },
    Gather {
        src: Var,
        plan: GatherPlan<T>,
    },
    L1 {
        a: Var,
        target: Vec<T>,
    },
    Concat {
        a: Var,
        b: Var,
        rows: usize,
        ca: usize,
        cb: usize,
    },
    Stack(Vec<Var>),
    RepeatRows {
        x: Var,
        times: usize,
        cols: usize,
    },
    RowScale {
        x: Var,
        factors: Vec<T>,
        cols: usize,
    },
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape over scalars of type `T`.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the trainable leaves of a graph.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a trainable leaf. `None` for constants and interior nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input node. Gradients are reported only for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, deps: &[Var], name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = deps.iter().any(|d| self.nodes[d.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(shape_err!("{what} must be rank 2, got {:?}", s)),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(shape_err!("matmul inner extents {k} and {k2} differ"));
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b], "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a), data)?;
        self.push(value, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let value = Tensor::new(self.shape(a), data)?;
        self.push(value, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.shape(a), data)?;
        self.push(value, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x], "scale")
    }

    /// Adds `bias` (rank 1) along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().ok_or_else(|| shape_err!("add_bias on a scalar"))?;
        if self.shape(bias) != [c] {
            return Err(shape_err!(
                "bias shape {:?} does not match last axis {c}",
                self.shape(bias)
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        if c > 0 {
            for row in data.chunks_mut(c) {
                for (v, &bv) in row.iter_mut().zip(b) {
                    *v += bv;
                }
            }
        }
        let value = Tensor::new(self.shape(x), data)?;
        self.push(value, Op::AddBias { x, bias }, &[x, bias], "add_bias")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x), &[x], "relu")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(shape_err!("mean of an empty tensor"));
        }
        let value = Tensor::scalar(self.value(x).sum() / T::of(n as f64));
        self.push(value, Op::Mean(x), &[x], "mean")
    }

    /// Softmax along `axis`. Masked entries (`false`) receive weight exactly
    /// zero; a slice with every entry masked yields all zeros.
    pub fn softmax(&mut self, x: Var, axis: usize, mask: Option<&Tensor<bool>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        let keep = match mask {
            None => None,
            Some(m) => Some(broadcast_mask(m, &shape)?),
        };
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let allowed = |j: usize| keep.as_ref().is_none_or(|k| k[idx(j)]);
                let mut max = T::neg_infinity();
                for j in 0..len {
                    if allowed(j) && src[idx(j)] > max {
                        max = src[idx(j)];
                    }
                }
                if max == T::neg_infinity() {
                    continue;
                }
                let mut total = T::zero();
                for j in 0..len {
                    if allowed(j) {
                        let e = (src[idx(j)] - max).exp();
                        out[idx(j)] = e;
                        total += e;
                    }
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::Softmax { x, outer, len, inner }, &[x], "softmax")
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let dim = *self
            .shape(x)
            .last()
            .ok_or_else(|| shape_err!("layer_norm on a scalar"))?;
        if self.shape(gamma) != [dim] || self.shape(beta) != [dim] {
            return Err(shape_err!(
                "layer_norm affine shapes {:?}/{:?} do not match last axis {dim}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = if dim == 0 { 0 } else { src.len() / dim };
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        let n = T::of(dim as f64);
        for r in 0..rows {
            let row = &src[r * dim..(r + 1) * dim];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..dim {
                let h = (row[c] - mean) * inv;
                xhat[r * dim + c] = h;
                out[r * dim + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            dim,
            xhat,
            inv_std,
        };
        self.push(value, op, &[x, gamma, beta], "layer_norm")
    }

    /// Grouped multi-head scaled dot-product attention on already projected
    /// inputs. `q` is `[groups*lq, d]`, `k` and `v` are `[groups*lk, d]`;
    /// each group attends only within itself. Heads split `d` into
    /// contiguous slices of `d/heads` and use the `1/sqrt(d/heads)` scale.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: usize, heads: usize, mask: &AttnMask) -> Result<Var> {
        let (qr, d) = self.dims2(q, "attention query")?;
        let (kr, dk) = self.dims2(k, "attention key")?;
        self.same_shape(k, v, "attention key/value")?;
        if dk != d {
            return Err(shape_err!("query width {d} differs from key width {dk}"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(alloc::format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        if groups == 0 || qr % groups != 0 || kr % groups != 0 {
            return Err(shape_err!(
                "{qr} query rows and {kr} key rows do not split into {groups} groups"
            ));
        }
        let (lq, lk) = (qr / groups, kr / groups);
        mask.check(groups, lq, lk)?;
        let (out, weights) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            [groups, lq, lk, d, heads],
            mask,
        );
        let value = Tensor::new(&[qr, d], out)?;
        let op = Op::Attention {
            q,
            k,
            v,
            groups,
            lq,
            lk,
            heads,
            weights,
        };
        self.push(value, op, &[q, k, v], "attention")
    }

    /// Attention weights `[groups, heads, lq, lk]` saved by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Same-size zero-padded convolution of `[h,w,cin]` by `[kh,kw,cin,cout]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (h, w, cin) = match *self.shape(x) {
            [h, w, c] => (h, w, c),
            ref s => return Err(shape_err!("conv2d input must be [h,w,c], got {:?}", s)),
        };
        let (kh, kw, kc, cout) = match *self.shape(kernel) {
            [a, b, c, d] => (a, b, c, d),
            ref s => return Err(shape_err!("conv2d kernel must be rank 4, got {:?}", s)),
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(alloc::format!(
                "conv2d kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        if kc != cin {
            return Err(shape_err!("conv2d kernel expects {kc} channels, input has {cin}"));
        }
        let dims = ConvDims {
            h,
            w,
            cin,
            cout,
            kh,
            kw,
        };
        let out = conv2d_forward(self.value(x).data(), self.value(kernel).data(), dims);
        let value = Tensor::new(&[h, w, cout], out)?;
        let op = Op::Conv2d {
            x,
            kernel,
            h,
            w,
            cin,
            cout,
            kh,
            kw,
        };
        self.push(value, op, &[x, kernel], "conv2d")
    }

    /// Row gather over `src` viewed as `[n, c]` where `c` is its last axis.
    /// Differentiable in `src`; the plan's weights are constants.
    pub fn gather(&mut self, src: Var, plan: GatherPlan<T>) -> Result<Var> {
        let shape = self.shape(src);
        let c = *shape.last().ok_or_else(|| shape_err!("gather from a scalar"))?;
        let n = if c == 0 { 0 } else { self.value(src).len() / c };
        if let Some(mx) = plan.max_index() {
            if mx >= n {
                return Err(shape_err!("gather index {mx} out of range for {n} rows"));
            }
        }
        let out = plan.apply(self.value(src).data(), c);
        let value = Tensor::new(&[plan.rows(), c], out)?;
        self.push(value, Op::Gather { src, plan }, &[src], "gather")
    }

    /// Mean absolute error against a constant target. Subgradient uses
    /// `sign(0) = 0`.
    pub fn l1_loss(&mut self, a: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(a) != target.shape() {
            return Err(shape_err!("l1_loss: {:?} vs {:?}", self.shape(a), target.shape()));
        }
        let n = target.len();
        if n == 0 {
            return Err(shape_err!("l1_loss of empty tensors"));
        }
        let total: T = self
            .value(a)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        let value = Tensor::scalar(total / T::of(n as f64));
        let op = Op::L1 {
            a,
            target: target.data().to_vec(),
        };
        self.push(value, op, &[a], "l1_loss")
    }

    /// `[rows, ca] ++ [rows, cb] -> [rows, ca+cb]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, ca) = self.dims2(a, "concat lhs")?;
        let (rb, cb) = self.dims2(b, "concat rhs")?;
        if rows != rb {
            return Err(shape_err!("concat row counts {rows} and {rb} differ"));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::new(&[rows, ca + cb], out)?;
        self.push(value, Op::Concat { a, b, rows, ca, cb }, &[a, b], "concat_cols")
    }

    /// Concatenates along the first axis.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err!("stack of zero tensors"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err!("stack: trailing shape {:?} vs {:?}", s, tail));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::Stack(parts.to_vec()), parts, "stack_rows")
    }

    /// Repeats each row of `[n, c]` `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (n, cols) = self.dims2(x, "repeat_rows input")?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * times * cols);
        for r in 0..n {
            for _ in 0..times {
                out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
            }
        }
        let value = Tensor::new(&[n * times, cols], out)?;
        self.push(value, Op::RepeatRows { x, times, cols }, &[x], "repeat_rows")
    }

    /// Multiplies row `r` of `[n, c]` by the constant `factors[r]`.
    pub fn row_scale(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let (n, cols) = self.dims2(x, "row_scale input")?;
        if factors.len() != n {
            return Err(shape_err!("row_scale: {} factors for {n} rows", factors.len()));
        }
        let mut out = self.value(x).data().to_vec();
        for (r, &f) in factors.iter().enumerate() {
            for v in &mut out[r * cols..(r + 1) * cols] {
                *v *= f;
            }
        }
        let value = Tensor::new(&[n, cols], out)?;
        self.push(value, Op::RowScale { x, factors, cols }, &[x], "row_scale")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), &[x], "reshape")
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if self.value(loss).len() != 1 || ls.iter().any(|&e| e != 1) {
            return Err(Error::NotScalar(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop(&node.op, &node.value, &g, &mut grads);
        }
        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            let t = match node.op {
                Op::Leaf if node.requires_grad => {
                    let shape = node.value.shape();
                    Some(match g {
                        Some(g) => Tensor::new(shape, g)?,
                        None => Tensor::zeros(shape),
                    })
                }
                _ => None,
            };
            out.push(t);
        }
        if out.iter().flatten().any(|t| !t.all_finite()) {
            return Err(Error::NonFinite("backward"));
        }
        Ok(Gradients { grads: out })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
    }

    fn backprop(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.slot(grads, *a) {
                    // ga[i,kk] += sum_j g[i,j] * b[kk,j]
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            ga[i * k + kk] += dot(grow, &bv[kk * n..(kk + 1) * n]);
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            axpy(av[i * k + kk], grow, &mut gb[kk * n..(kk + 1) * n]);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (d, &v) in gb.iter_mut().zip(g) {
                        *d -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &gv), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, &gv), &x) in gb.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.slot(grads, *x) {
                    axpy(*c, g, gx);
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
                let c = self.value(*bias).len();
                if let Some(gb) = self.slot(grads, *bias) {
                    if c > 0 {
                        for row in g.chunks(c) {
                            add_into(gb, row);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                let n = T::of(self.value(*x).len() as f64);
                if let Some(gx) = self.slot(grads, *x) {
                    for d in gx.iter_mut() {
                        *d += g[0] / n;
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = out.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let s: T = (0..*len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..*len {
                                gx[idx(j)] += y[idx(j)] * (g[idx(j)] - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                dim,
                xhat,
                inv_std,
            } => {
                let dim = *dim;
                let rows = inv_std.len();
                if let Some(gb) = self.slot(grads, *beta) {
                    for r in 0..rows {
                        add_into(gb, &g[r * dim..(r + 1) * dim]);
                    }
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    for r in 0..rows {
                        for c in 0..dim {
                            gg[c] += g[r * dim + c] * xhat[r * dim + c];
                        }
                    }
                }
                let gam = self.value(*gamma).data();
                if let Some(gx) = self.slot(grads, *x) {
                    let n = T::of(dim as f64);
                    let mut gh = vec![T::zero(); dim];
                    for r in 0..rows {
                        let xh = &xhat[r * dim..(r + 1) * dim];
                        for c in 0..dim {
                            gh[c] = g[r * dim + c] * gam[c];
                        }
                        let s1: T = gh.iter().copied().sum();
                        let s2: T = gh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                        let scale = inv_std[r] / n;
                        for c in 0..dim {
                            gx[r * dim + c] += scale * (n * gh[c] - s1 - xh[c] * s2);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                lq,
                lk,
                heads,
                weights,
            } => {
                let dims = [*groups, *lq, *lk, self.value(*q).shape()[1], *heads];
                let (gq, gk, gv) = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    weights,
                    g,
                    dims,
                );
                if let Some(s) = self.slot(grads, *q) {
                    add_into(s, &gq);
                }
                if let Some(s) = self.slot(grads, *k) {
                    add_into(s, &gk);
                }
                if let Some(s) = self.slot(grads, *v) {
                    add_into(s, &gv);
                }
            }
            Op::Conv2d {
                x,
                kernel,
                h,
                w,
                cin,
                cout,
                kh,
                kw,
            } => {
                let dims = ConvDims {
                    h: *h,
                    w: *w,
                    cin: *cin,
                    cout: *cout,
                    kh: *kh,
                    kw: *kw,
                };
                let xv = self.value(*x).data();
                let kv = self.value(*kernel).data();
                if let Some(gx) = self.slot(grads, *x) {
                    conv2d_backward_input(g, kv, gx, dims);
                }
                if let Some(gk) = self.slot(grads, *kernel) {
                    conv2d_backward_kernel(g, xv, gk, dims);
                }
            }
            Op::Gather { src, plan } => {
                let c = out.shape()[1];
                if let Some(gs) = self.slot(grads, *src) {
                    for r in 0..plan.rows() {
                        let grow = &g[r * c..(r + 1) * c];
                        for t in 0..plan.taps {
                            let w = plan.weight[r * plan.taps + t];
                            if w == T::zero() {
                                continue;
                            }
                            let s = plan.index[r * plan.taps + t] as usize;
                            axpy(w, grow, &mut gs[s * c..(s + 1) * c]);
                        }
                    }
                }
            }
            Op::L1 { a, target } => {
                let av = self.value(*a).data();
                let n = T::of(target.len() as f64);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &x), &y) in ga.iter_mut().zip(av).zip(target) {
                        let s = if x > y {
                            T::one()
                        } else if x < y {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *d += g[0] * s / n;
                    }
                }
            }
            Op::Concat { a, b, rows, ca, cb } => {
                let (rows, ca, cb) = (*rows, *ca, *cb);
                let w = ca + cb;
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..rows {
                        add_into(&mut ga[r * ca..(r + 1) * ca], &g[r * w..r * w + ca]);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for r in 0..rows {
                        add_into(&mut gb[r * cb..(r + 1) * cb], &g[r * w + ca..(r + 1) * w]);
                    }
                }
            }
            Op::Stack(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.slot(grads, p) {
                        add_into(gp, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::RepeatRows { x, times, cols } => {
                let (times, cols) = (*times, *cols);
                if let Some(gx) = self.slot(grads, *x) {
                    let n = if cols == 0 { 0 } else { gx.len() / cols };
                    for r in 0..n {
                        for t in 0..times {
                            let o = (r * times + t) * cols;
                            add_into(&mut gx[r * cols..(r + 1) * cols], &g[o..o + cols]);
                        }
                    }
                }
            }
            Op::RowScale { x, factors, cols } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &f) in factors.iter().enumerate() {
                        axpy(f, &g[r * cols..(r + 1) * cols], &mut gx[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
            }
        }
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (d, &v) in y.iter_mut().zip(x) {
        *d += alpha * v;
    }
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d += v;
    }
}

/// Plain row-major product, `[m,k] x [k,n]`.
pub(crate) fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            axpy(a[i * k + kk], &b[kk * n..(kk + 1) * n], crow);
        }
    }
    c
}

fn broadcast_mask(mask: &Tensor<bool>, shape: &[usize]) -> Result<Vec<bool>> {
    let ms = mask.shape();
    if ms.len() > shape.len() {
        return Err(shape_err!("mask {:?} does not broadcast to {:?}", ms, shape));
    }
    let lead = shape.len() - ms.len();
    for (i, &e) in ms.iter().enumerate() {
        if e != 1 && e != shape[lead + i] {
            return Err(shape_err!("mask {:?} does not broadcast to {:?}", ms, shape));
        }
    }
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let mut off = 0;
        for (i, &e) in ms.iter().enumerate() {
            let j = if e == 1 { 0 } else { idx[lead + i] };
            off = off * e + j;
        }
        out.push(mask.data()[off]);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(out)
}

fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    [groups, lq, lk, d, heads]: [usize; 5],
    mask: &AttnMask,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); groups * lq * d];
    let mut weights = vec![T::zero(); groups * heads * lq * lk];
    for grp in 0..groups {
        for h in 0..heads {
            for i in 0..lq {
                let qrow = &q[(grp * lq + i) * d + h * dh..][..dh];
                let wrow = &mut weights[((grp * heads + h) * lq + i) * lk..][..lk];
                let mut max = T::neg_infinity();
                for (j, w) in wrow.iter_mut().enumerate() {
                    if mask.allows(grp, lq, lk, i, j) {
                        let s = dot(qrow, &k[(grp * lk + j) * d + h * dh..][..dh]) * scale;
                        *w = s;
                        if s > max {
                            max = s;
                        }
                    }
                }
                if max == T::neg_infinity() {
                    wrow.fill(T::zero());
                    continue;
                }
                let mut total = T::zero();
                for (j, w) in wrow.iter_mut().enumerate() {
                    if mask.allows(grp, lq, lk, i, j) {
                        *w = (*w - max).exp();
                        total += *w;
                    } else {
                        *w = T::zero();
                    }
                }
                let orow = &mut out[(grp * lq + i) * d + h * dh..][..dh];
                for (j, w) in wrow.iter_mut().enumerate() {
                    *w /= total;
                    if *w != T::zero() {
                        axpy(*w, &v[(grp * lk + j) * d + h * dh..][..dh], orow);
                    }
                }
            }
        }
    }
    (out, weights)
}

type AttnGrads<T> = (Vec<T>, Vec<T>, Vec<T>);

fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    weights: &[T],
    g: &[T],
    [groups, lq, lk, d, heads]: [usize; 5],
) -> AttnGrads<T> {
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut gq = vec![T::zero(); q.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gv = vec![T::zero(); v.len()];
    let mut dw = vec![T::zero(); lk];
    for grp in 0..groups {
        for h in 0..heads {
            for i in 0..lq {
                let wrow = &weights[((grp * heads + h) * lq + i) * lk..][..lk];
                let go = &g[(grp * lq + i) * d + h * dh..][..dh];
                let mut s = T::zero();
                for j in 0..lk {
                    if wrow[j] == T::zero() {
                        dw[j] = T::zero();
                        continue;
                    }
                    let vo = (grp * lk + j) * d + h * dh;
                    dw[j] = dot(go, &v[vo..vo + dh]);
                    axpy(wrow[j], go, &mut gv[vo..vo + dh]);
                    s += wrow[j] * dw[j];
                }
                let qo = (grp * lq + i) * d + h * dh;
                for j in 0..lk {
                    if wrow[j] == T::zero() {
                        continue;
                    }
                    let ds = wrow[j] * (dw[j] - s) * scale;
                    let ko = (grp * lk + j) * d + h * dh;
                    axpy(ds, &k[ko..ko + dh], &mut gq[qo..qo + dh]);
                    axpy(ds, &q[qo..qo + dh], &mut gk[ko..ko + dh]);
                }
            }
        }
    }
    (gq, gk, gv)
}

#[derive(Clone, Copy)]
struct ConvDims {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
}

impl ConvDims {
    /// Valid kernel taps for output coordinate (`y`, `x`): yields
    /// `(dy, dx, sy, sx)` with source pixel (`sy`, `sx`).
    #[inline]
    fn taps(&self, y: usize, x: usize) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        (0..self.kh).flat_map(move |dy| {
            (0..self.kw).filter_map(move |dx| {
                let sy = (y + dy).checked_sub(ph)?;
                let sx = (x + dx).checked_sub(pw)?;
                (sy < self.h && sx < self.w).then_some((dy, dx, sy, sx))
            })
        })
    }
}

fn conv2d_forward<T: Scalar>(x: &[T], kernel: &[T], d: ConvDims) -> Vec<T> {
    let mut out = vec![T::zero(); d.h * d.w * d.cout];
    for y in 0..d.h {
        for xx in 0..d.w {
            let orow = &mut out[(y * d.w + xx) * d.cout..][..d.cout];
            for (dy, dx, sy, sx) in d.taps(y, xx) {
                let src = &x[(sy * d.w + sx) * d.cin..][..d.cin];
                let kbase = (dy * d.kw + dx) * d.cin * d.cout;
                for (ci, &a) in src.iter().enumerate() {
                    axpy(a, &kernel[kbase + ci * d.cout..][..d.cout], orow);
                }
            }
        }
    }
    out
}

fn conv2d_backward_input<T: Scalar>(g: &[T], kernel: &[T], gx: &mut [T], d: ConvDims) {
    for y in 0..d.h {
        for xx in 0..d.w {
            let grow = &g[(y * d.w + xx) * d.cout..][..d.cout];
            for (dy, dx, sy, sx) in d.taps(y, xx) {
                let dst = &mut gx[(sy * d.w + sx) * d.cin..][..d.cin];
                let kbase = (dy * d.kw + dx) * d.cin * d.cout;
                for (ci, dv) in dst.iter_mut().enumerate() {
                    *dv += dot(grow, &kernel[kbase + ci * d.cout..][..d.cout]);
                }
            }
        }
    }
}

fn conv2d_backward_kernel<T: Scalar>(g: &[T], x: &[T], gk: &mut [T], d: ConvDims) {
    for y in 0..d.h {
        for xx in 0..d.w {
            let grow = &g[(y * d.w + xx) * d.cout..][..d.cout];
            for (dy, dx, sy, sx) in d.taps(y, xx) {
                let src = &x[(sy * d.w + sx) * d.cin..][..d.cin];
                let kbase = (dy * d.kw + dx) * d.cin * d.cout;
                for (ci, &a) in src.iter().enumerate() {
                    axpy(a, grow, &mut gk[kbase + ci * d.cout..][..d.cout]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_extent() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_uniform_masked_and_degenerate() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0, None).unwrap();
        for &v in g.value(y).data() {
            assert_relative_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }

        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let m = Tensor::new(&[3], alloc::vec![true, true, false]).unwrap();
        let y = g.softmax(x, 0, Some(&m)).unwrap();
        let e = core::f64::consts::E;
        let got = g.value(y).data();
        assert_relative_eq!(got[0], 1.0 / (1.0 + e), epsilon = 1e-15);
        assert_relative_eq!(got[1], e / (1.0 + e), epsilon = 1e-15);
        assert_eq!(got[2], 0.0);

        let none = Tensor::new(&[3], alloc::vec![false, false, false]).unwrap();
        let y = g.softmax(x, 0, Some(&none)).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 2]));
        assert_eq!(g.softmax(x, 2, None), Err(Error::Axis { axis: 2, rank: 2 }));
    }

    #[test]
    fn softmax_mask_broadcasts_over_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 3.0, 2.0, 1.0]));
        let m = Tensor::new(&[3], alloc::vec![true, false, true]).unwrap();
        let y = g.softmax(x, 1, Some(&m)).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[1], 0.0);
        assert_eq!(v[4], 0.0);
        assert_relative_eq!(v[0] + v[2], 1.0, epsilon = 1e-15);
        assert_relative_eq!(v[0], v[5], epsilon = 1e-15);
    }

    #[test]
    fn layer_norm_constant_and_two_point() {
        let mut g = Graph::<f64>::new();
        let one = g.constant(Tensor::full(&[4], 1.0));
        let zero = g.constant(Tensor::zeros(&[4]));
        let x = g.constant(Tensor::full(&[2, 4], 7.0));
        let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let one = g.constant(Tensor::full(&[2], 1.0));
        let zero = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[2], &[1.0, 3.0]));
        let y = g.layer_norm(x, one, zero, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn conv2d_identity_and_box_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[3, 4, 2], |i| i as f64 * 0.5));
        let mut k = Tensor::zeros(&[1, 1, 2, 2]);
        k.set(&[0, 0, 0, 0], 1.0);
        k.set(&[0, 0, 1, 1], 1.0);
        let k = g.constant(k);
        let y = g.conv2d(x, k).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let x = g.constant(Tensor::full(&[3, 3, 1], 1.0));
        let k = g.constant(Tensor::full(&[3, 3, 1, 1], 1.0));
        let y = g.conv2d(x, k).unwrap();
        assert_eq!(g.value(y).at(&[1, 1, 0]), 9.0);
        assert_eq!(g.value(y).at(&[0, 0, 0]), 4.0);
    }

    #[test]
    fn conv2d_rejects_even_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3, 3, 1]));
        let k = g.constant(Tensor::zeros(&[2, 2, 1, 1]));
        assert!(matches!(g.conv2d(x, k), Err(Error::Config(_))));
    }

    #[test]
    fn l1_values_and_subgradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let l = g.l1_loss(a, &t(&[2], &[1.0, 2.0])).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 0.0]);

        let l = g.l1_loss(a, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(g.value(l).data(), &[1.5]);

        let b = g.leaf(t(&[1], &[2.0]), true);
        let l = g.l1_loss(b, &Tensor::zeros(&[1])).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[1.0]);
    }

    #[test]
    fn backward_sum_and_square() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64), true);
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));

        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert_eq!(g.backward(x).err(), Some(Error::NotScalar(alloc::vec![2])));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[f64::MAX]));
        assert_eq!(g.scale(x, 10.0), Err(Error::NonFinite("scale")));
    }

    #[test]
    fn attention_single_key_and_identical_keys() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_fn(&[2, 4], |i| i as f64 * 0.3 - 1.0));
        let k = g.constant(t(&[1, 4], &[0.5, -0.2, 0.1, 0.9]));
        let v = g.constant(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let out = g.attention(q, k, v, 1, 2, &AttnMask::None).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        assert!(g.attention_weights(out).unwrap().iter().all(|&w| w == 1.0));

        let k = g.constant(Tensor::from_fn(&[3, 4], |i| (i % 4) as f64));
        let v = g.constant(Tensor::from_fn(&[3, 4], |i| i as f64));
        let out = g.attention(q, k, v, 1, 2, &AttnMask::None).unwrap();
        for &w in g.attention_weights(out).unwrap() {
            assert_relative_eq!(w, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::zeros(&[1, 6]));
        assert!(matches!(
            g.attention(q, q, q, 1, 4, &AttnMask::None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fully_masked_attention_group_is_zero() {
        let mut g = Graph::<f64>::new();
        let q = g.leaf(Tensor::from_fn(&[2, 2], |i| i as f64), true);
        let kv = g.leaf(Tensor::from_fn(&[4, 2], |i| i as f64 * 0.1), true);
        let mask = AttnMask::Keys(alloc::vec![false, false, true, false]);
        let out = g.attention(q, kv, kv, 2, 1, &mask).unwrap();
        assert_eq!(&g.value(out).data()[..2], &[0.0, 0.0]);
        assert_eq!(&g.value(out).data()[2..], &[0.4, 0.5]);
        let s = g.sum(out).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(&grads.get(q).unwrap().data()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn gather_plan_select_and_backward() {
        let mut g = Graph::<f64>::new();
        let src = g.leaf(Tensor::from_fn(&[3, 2], |i| i as f64), true);
        let out = g.gather(src, GatherPlan::select(&[2, 0, 2])).unwrap();
        assert_eq!(g.value(out).data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        let s = g.sum(out).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(src).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
