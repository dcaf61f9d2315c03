//! Tape of recorded tensor operations.
//!
//! Every op evaluates eagerly and appends a node, so node order is a valid
//! topological order. [`Graph::backward`] walks the tape in reverse once,
//! accumulating gradients additively across fan-out.

use crate::counter::{Counts, OpCounter};
use crate::error::{Result, TensorError};
use crate::op::Op;
use crate::shape::{broadcast_shape, row_major_strides, IndexMap};
use crate::tensor::{numel, pairwise_sum, split_axis, Tensor};
use std::collections::BTreeMap;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Storage precision. `F32` rounds every produced value to single precision
/// and accounts 4 bytes per element.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn bytes(self) -> u64 {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) grads: Vec<Option<Tensor>>,
    pub(crate) precision: Precision,
    pub(crate) forward: Counts,
    pub(crate) backward_counts: Counts,
    scopes: BTreeMap<String, Counts>,
    scope: Option<String>,
    decisions: Vec<u64>,
    pub(crate) root: Option<Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
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

    /// Gradient of the last `backward` root with respect to `v`, if `v` was
    /// on a differentiable path to it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Attributes subsequent forward op counts to `name` (or to no scope).
    /// Returns the previously active scope.
    pub fn set_scope(&mut self, name: Option<&str>) -> Option<String> {
        std::mem::replace(&mut self.scope, name.map(str::to_owned))
    }

    /// Records a data-dependent branch outcome. Finite-difference checks
    /// compare these to detect discontinuity crossings.
    pub fn record_decision(&mut self, token: u64) {
        self.decisions.push(token);
    }

    pub fn decisions(&self) -> &[u64] {
        &self.decisions
    }

    pub fn counter(&self) -> OpCounter {
        OpCounter {
            forward: self.forward,
            backward: self.backward_counts,
            scopes: self.scopes.clone(),
            peak_live_bytes: self.peak_live_bytes(),
            peak_activation_bytes: self.peak_activation_bytes(),
        }
    }

    pub(crate) fn count(&mut self, c: Counts) {
        self.forward += c;
        if let Some(s) = &self.scope {
            *self.scopes.entry(s.clone()).or_default() += c;
        }
    }

    fn push(&mut self, mut value: Tensor, op: Op, counts: Counts) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        if self.precision == Precision::F32 {
            for x in value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.count(counts);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        if self.precision == Precision::F32 {
            for x in value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    // ---- elementwise -------------------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or(TensorError::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let n = numel(&out_shape);
        let ma = IndexMap::new(&out_shape, &sa);
        let mb = IndexMap::new(&out_shape, &sb);
        let da = self.value(a).data();
        let db = self.value(b).data();
        let data: Vec<f64> = (0..n).map(|o| f(da[ma.at(o)], db[mb.at(o)])).collect();
        Tensor::new(out_shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let n = t.numel() as u64;
        self.push(t, Op::Add(a, b), Counts::new(0, n, 0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let n = t.numel() as u64;
        self.push(t, Op::Sub(a, b), Counts::new(0, n, 0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let n = t.numel() as u64;
        self.push(t, Op::Mul(a, b), Counts::new(n, 0, 0))
    }

    /// Elementwise quotient. A zero anywhere in the denominator is an error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&x| x == 0.0) {
            return Err(TensorError::DivisionByZero { op: "div" });
        }
        let t = self.binary(a, b, "div", |x, y| x / y)?;
        let n = t.numel() as u64;
        self.push(t, Op::Div(a, b), Counts::new(n, 0, 0))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| -v);
        self.push(t, Op::Neg(x), Counts::default())
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        let n = t.numel() as u64;
        self.push(t, Op::Scale(x, c), Counts::new(n, 0, 0))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v + c);
        let n = t.numel() as u64;
        self.push(t, Op::AddScalar(x), Counts::new(0, n, 0))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::exp);
        let n = t.numel() as u64;
        self.push(t, Op::Exp(x), Counts::new(0, 0, n))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "log",
                msg: "non-positive input".into(),
            });
        }
        let t = self.value(x).map(f64::ln);
        let n = t.numel() as u64;
        self.push(t, Op::Log(x), Counts::new(0, 0, n))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "sqrt",
                msg: "negative input".into(),
            });
        }
        let t = self.value(x).map(f64::sqrt);
        let n = t.numel() as u64;
        self.push(t, Op::Sqrt(x), Counts::new(0, 0, n))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::tanh);
        let n = t.numel() as u64;
        self.push(t, Op::Tanh(x), Counts::new(0, 0, n))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(gelu);
        let n = t.numel() as u64;
        self.push(t, Op::Gelu(x), Counts::new(6 * n, 2 * n, n))
    }

    // ---- products ----------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let c = matmul_counts(m, k, n);
        self.push(t, Op::MatMul(a, b), c)
    }

    /// `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(batch * m * n);
        for bi in 0..batch {
            out.extend(matmul_raw(
                &da[bi * m * k..(bi + 1) * m * k],
                &db[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let t = Tensor::new(vec![batch, m, n], out)?;
        let mut c = matmul_counts(m, k, n);
        c.mults *= batch as u64;
        c.adds *= batch as u64;
        self.push(t, Op::BatchMatMul(a, b), c)
    }

    // ---- layout ------------------------------------------------------

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {}", shape.len()),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_raw(self.value(x).data(), &shape, perm);
        let t = Tensor::new(out_shape, data)?;
        self.push(t, Op::Permute(x, perm.to_vec()), Counts::default())
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(x), Counts::default())
    }

    // ---- reductions ----------------------------------------------------

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { op, axis, rank });
        }
        Ok(())
    }

    fn reduced_shape(&self, x: Var, axis: usize, keepdim: bool) -> Vec<usize> {
        let mut s = self.shape(x).to_vec();
        if keepdim {
            s[axis] = 1;
        } else {
            s.remove(axis);
        }
        s
    }

    fn reduce_axis(&self, x: Var, axis: usize, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let (outer, len, inner) = split_axis(self.shape(x), axis);
        let d = self.value(x).data();
        let mut buf = vec![0.0; len];
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                for (j, slot) in buf.iter_mut().enumerate() {
                    *slot = d[(o * len + j) * inner + i];
                }
                out.push(f(&buf));
            }
        }
        out
    }

    /// Sum along `axis` using pairwise summation.
    pub fn sum(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.check_axis(x, axis, "sum")?;
        let data = self.reduce_axis(x, axis, pairwise_sum);
        let len = self.shape(x)[axis] as u64;
        let t = Tensor::new(self.reduced_shape(x, axis, keepdim), data)?;
        let n = t.numel() as u64;
        self.push(t, Op::Sum { x, axis }, Counts::new(0, n * (len - 1), 0))
    }

    pub fn mean(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.check_axis(x, axis, "mean")?;
        let len = self.shape(x)[axis];
        let data = self.reduce_axis(x, axis, |s| pairwise_sum(s) / len as f64);
        let t = Tensor::new(self.reduced_shape(x, axis, keepdim), data)?;
        let n = t.numel() as u64;
        self.push(
            t,
            Op::Mean { x, axis },
            Counts::new(n, n * (len as u64 - 1), 0),
        )
    }

    /// Sum of all elements to a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = pairwise_sum(self.value(x).data());
        let n = self.value(x).numel() as u64;
        self.push(Tensor::scalar(s), Op::SumAll(x), Counts::new(0, n - 1, 0))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    fn extremum(
        &mut self,
        x: Var,
        axis: usize,
        keepdim: bool,
        take_max: bool,
    ) -> Result<(Var, Vec<usize>)> {
        self.check_axis(x, axis, if take_max { "max" } else { "min" })?;
        let (outer, len, inner) = split_axis(self.shape(x), axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = d[o * len * inner + i];
                for j in 1..len {
                    let v = d[(o * len + j) * inner + i];
                    // strict comparison keeps the lowest attaining index
                    if (take_max && v > best_v) || (!take_max && v < best_v) {
                        best = j;
                        best_v = v;
                    }
                }
                out.push(best_v);
                arg.push(best);
            }
        }
        let t = Tensor::new(self.reduced_shape(x, axis, keepdim), out)?;
        for &a in &arg {
            self.decisions.push(a as u64);
        }
        let v = self.push(
            t,
            Op::Extremum {
                x,
                axis,
                arg: arg.clone(),
            },
            Counts::default(),
        )?;
        Ok((v, arg))
    }

    /// Maximum along `axis`; gradient flows to the first attaining index.
    pub fn max(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        Ok(self.extremum(x, axis, keepdim, true)?.0)
    }

    /// Minimum along `axis`; gradient flows to the first attaining index.
    pub fn min(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        Ok(self.extremum(x, axis, keepdim, false)?.0)
    }

    pub fn max_with_indices(
        &mut self,
        x: Var,
        axis: usize,
        keepdim: bool,
    ) -> Result<(Var, Vec<usize>)> {
        self.extremum(x, axis, keepdim, true)
    }

    // ---- normalizations ---------------------------------------------------

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        if !self.value(x).is_finite() {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let (outer, len, inner) = split_axis(self.shape(x), axis);
        let mut out = self.value(x).data().to_vec();
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let m = (0..len)
                    .map(|j| out[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                for j in 0..len {
                    buf[j] = (out[idx(j)] - m).exp();
                }
                let z = pairwise_sum(&buf);
                for j in 0..len {
                    out[idx(j)] = buf[j] / z;
                }
            }
        }
        let n = out.len() as u64;
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(t, Op::Softmax { x, axis }, Counts::new(n, 2 * n, n))
    }

    /// Log-softmax along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "log_softmax")?;
        if !self.value(x).is_finite() {
            return Err(TensorError::NonFinite { op: "log_softmax" });
        }
        let (outer, len, inner) = split_axis(self.shape(x), axis);
        let mut out = self.value(x).data().to_vec();
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let m = (0..len)
                    .map(|j| out[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                for j in 0..len {
                    buf[j] = (out[idx(j)] - m).exp();
                }
                let lse = m + pairwise_sum(&buf).ln();
                for j in 0..len {
                    out[idx(j)] -= lse;
                }
            }
        }
        let n = out.len() as u64;
        let rows = (outer * inner) as u64;
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            t,
            Op::LogSoftmax { x, axis },
            Counts::new(0, 3 * n, n + rows),
        )
    }

    /// `x / max(||x||, eps)` along `axis`; zero slices stay zero.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check_axis(x, axis, "l2_normalize")?;
        let (outer, len, inner) = split_axis(self.shape(x), axis);
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        let mut norms = Vec::with_capacity(outer * inner);
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                for (j, slot) in buf.iter_mut().enumerate() {
                    *slot = d[idx(j)] * d[idx(j)];
                }
                let norm = pairwise_sum(&buf).sqrt();
                let denom = norm.max(eps);
                for j in 0..len {
                    out[idx(j)] = d[idx(j)] / denom;
                }
                norms.push(norm);
            }
        }
        for &nrm in &norms {
            self.decisions.push(u64::from(nrm > eps));
        }
        let n = out.len() as u64;
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rows = norms.len() as u64;
        self.push(
            t,
            Op::L2Normalize {
                x,
                axis,
                eps,
                norms,
            },
            Counts::new(2 * n, n, rows),
        )
    }

    /// Layer normalization over the last axis without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or(TensorError::InvalidAxis {
            op: "layer_norm",
            axis: 0,
            rank: 0,
        })?;
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        let mut inv_std = Vec::with_capacity(d.len() / width);
        let mut centered = vec![0.0; width];
        for (r, row) in d.chunks(width).enumerate() {
            let mu = pairwise_sum(row) / width as f64;
            for (c, &v) in centered.iter_mut().zip(row) {
                *c = (v - mu) * (v - mu);
            }
            let var = pairwise_sum(&centered) / width as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                out[r * width + j] = (v - mu) * inv;
            }
            inv_std.push(inv);
        }
        let n = out.len() as u64;
        let rows = inv_std.len() as u64;
        let t = Tensor::new(shape, out)?;
        self.push(
            t,
            Op::LayerNorm { x, inv_std },
            Counts::new(3 * n, 4 * n, rows),
        )
    }

    // ---- selection ---------------------------------------------------

    /// `mask ? a : b` elementwise; `a`, `b` and `mask` share one shape.
    /// Gradient flows only into the selected branch.
    pub fn where_(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb || mask.len() != numel(&sa) {
            return Err(TensorError::ShapeMismatch {
                op: "where",
                lhs: sa,
                rhs: sb,
            });
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = mask
            .iter()
            .zip(da.iter().zip(db))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        let t = Tensor::new(sa, data)?;
        self.push(
            t,
            Op::Where {
                mask: mask.to_vec(),
                a,
                b,
            },
            Counts::default(),
        )
    }

    /// Keeps entries `>= threshold`, zeroing the rest.
    pub fn threshold(&mut self, x: Var, threshold: f64) -> Result<Var> {
        let mask: Vec<bool> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v >= threshold)
            .collect();
        for &m in &mask {
            self.decisions.push(u64::from(m));
        }
        let zeros = self.constant(Tensor::zeros(self.shape(x).to_vec()));
        self.where_(&mask, x, zeros)
    }

    /// Row lookup: `table[V,w]`, ids -> `[ids.len(), w]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "embedding",
                msg: "table must be a matrix".into(),
            });
        }
        let (vocab, w) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::IndexOutOfBounds {
                op: "embedding",
                index: bad,
                limit: vocab,
            });
        }
        let d = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            out.extend_from_slice(&d[i * w..(i + 1) * w]);
        }
        let t = Tensor::new(vec![ids.len(), w], out)?;
        self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            Counts::default(),
        )
    }

    /// Drops `axis`, keeping position `index`.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        self.check_axis(x, axis, "select")?;
        let shape = self.shape(x).to_vec();
        if index >= shape[axis] {
            return Err(TensorError::IndexOutOfBounds {
                op: "select",
                index,
                limit: shape[axis],
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * len + index) * inner;
            out.extend_from_slice(&d[base..base + inner]);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let t = Tensor::new(out_shape, out)?;
        self.push(t, Op::Select { x, axis, index }, Counts::default())
    }

    /// Positions `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis, "slice")?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice",
                index: start + len,
                limit: shape[axis],
            });
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, out)?;
        self.push(t, Op::Slice { x, axis, start }, Counts::default())
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        self.check_axis(*first, axis, "concat")?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(k, (a, b))| k == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let t = Tensor::new(out_shape, out)?;
        self.push(
            t,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            Counts::default(),
        )
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let mut expanded = Vec::with_capacity(xs.len());
        for &x in xs {
            let mut s = vec![1];
            s.extend_from_slice(self.shape(x));
            expanded.push(self.reshape(x, &s)?);
        }
        self.concat(&expanded, 0)
    }

    /// Diagonal of a square matrix.
    pub fn diagonal(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != s[1] {
            return Err(TensorError::InvalidArgument {
                op: "diagonal",
                msg: format!("expected square matrix, got {s:?}"),
            });
        }
        let n = s[0];
        let d = self.value(x).data();
        let data = (0..n).map(|i| d[i * n + i]).collect();
        self.push(
            Tensor::new(vec![n], data)?,
            Op::Diagonal(x),
            Counts::default(),
        )
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let th = (c * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn matmul_counts(m: usize, k: usize, n: usize) -> Counts {
    Counts::new((m * k * n) as u64, (m * (k - 1) * n) as u64, 0)
}

/// Plain row-major matrix product.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

pub(crate) fn permute_raw(d: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = row_major_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = d.len();
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        out.push(d[flat]);
        for k in (0..rank).rev() {
            idx[k] += 1;
            flat += strides[k];
            if idx[k] < out_shape[k] {
                break;
            }
            flat -= strides[k] * idx[k];
            idx[k] = 0;
        }
    }
    out
}
