use crate::counter::Counts;
use crate::error::{Result, TensorError};
use crate::graph::{gelu_grad, matmul_counts, matmul_raw, permute_raw, Graph, Var};
use crate::op::Op;
use crate::shape::IndexMap;
use crate::tensor::{pairwise_sum, split_axis, Tensor};

impl Graph {
    /// Reverse-mode pass from a one-element `root`. Gradients from any earlier
    /// call are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "backward",
                msg: format!("root must be scalar, got shape {:?}", self.shape(root)),
            });
        }
        self.grads = vec![None; self.nodes.len()];
        self.backward_counts = Counts::default();
        self.root = Some(root);
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(Tensor::full(self.shape(root).to_vec(), 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
        self.root = None;
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let f32_mode = self.precision == crate::graph::Precision::F32;
        match &mut self.grads[v.0] {
            Some(g) => {
                for (x, d) in g.data_mut().iter_mut().zip(delta) {
                    *x += d;
                    if f32_mode {
                        *x = *x as f32 as f64;
                    }
                }
                self.backward_counts.adds += self.nodes[v.0].value.numel() as u64;
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                let mut t = Tensor::new(shape, delta).expect("gradient shape");
                if f32_mode {
                    for x in t.data_mut() {
                        *x = *x as f32 as f64;
                    }
                }
                *slot = Some(t);
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Sums a broadcast gradient back to the shape of `input`.
    fn unbroadcast(&self, input: Var, out_shape: &[usize], g: impl Fn(usize) -> f64) -> Vec<f64> {
        let in_shape = self.shape(input);
        let map = IndexMap::new(out_shape, in_shape);
        let mut acc = vec![0.0; self.value(input).numel()];
        let n: usize = out_shape.iter().product();
        for o in 0..n {
            acc[map.at(o)] += g(o);
        }
        acc
    }

    fn propagate(&mut self, i: usize, op: &Op, g: &Tensor) {
        let gd = g.data();
        let out_shape = self.nodes[i].value.shape().to_vec();
        let n = gd.len() as u64;
        match op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    let d = self.unbroadcast(*a, &out_shape, |o| gd[o]);
                    self.accumulate(*a, d);
                }
                if self.wants(*b) {
                    let d = self.unbroadcast(*b, &out_shape, |o| sign * gd[o]);
                    self.accumulate(*b, d);
                }
            }
            Op::Mul(a, b) => {
                let ma = IndexMap::new(&out_shape, self.shape(*a));
                let mb = IndexMap::new(&out_shape, self.shape(*b));
                if self.wants(*a) {
                    let db = self.value(*b).data();
                    let d = self.unbroadcast(*a, &out_shape, |o| gd[o] * db[mb.at(o)]);
                    self.backward_counts.mults += n;
                    self.accumulate(*a, d);
                }
                if self.wants(*b) {
                    let da = self.value(*a).data();
                    let d = self.unbroadcast(*b, &out_shape, |o| gd[o] * da[ma.at(o)]);
                    self.backward_counts.mults += n;
                    self.accumulate(*b, d);
                }
            }
            Op::Div(a, b) => {
                let ma = IndexMap::new(&out_shape, self.shape(*a));
                let mb = IndexMap::new(&out_shape, self.shape(*b));
                let da = self.value(*a).data().to_vec();
                let db = self.value(*b).data().to_vec();
                if self.wants(*a) {
                    let d = self.unbroadcast(*a, &out_shape, |o| gd[o] / db[mb.at(o)]);
                    self.backward_counts.mults += n;
                    self.accumulate(*a, d);
                }
                if self.wants(*b) {
                    let d = self.unbroadcast(*b, &out_shape, |o| {
                        let y = db[mb.at(o)];
                        -gd[o] * da[ma.at(o)] / (y * y)
                    });
                    self.backward_counts.mults += 3 * n;
                    self.accumulate(*b, d);
                }
            }
            Op::Neg(x) => self.accumulate(*x, gd.iter().map(|v| -v).collect()),
            Op::Scale(x, c) => {
                self.backward_counts.mults += n;
                self.accumulate(*x, gd.iter().map(|v| v * c).collect())
            }
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(*x, gd.to_vec()),
            Op::Exp(x) => {
                let y = self.nodes[i].value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * y).collect();
                self.backward_counts.mults += n;
                self.accumulate(*x, d);
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                let d = gd.iter().zip(xv).map(|(g, x)| g / x).collect();
                self.backward_counts.mults += n;
                self.accumulate(*x, d);
            }
            Op::Sqrt(x) => {
                let y = self.nodes[i].value.data();
                let d = gd.iter().zip(y).map(|(g, y)| 0.5 * g / y).collect();
                self.backward_counts.mults += 2 * n;
                self.accumulate(*x, d);
            }
            Op::Tanh(x) => {
                let y = self.nodes[i].value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.backward_counts.mults += 2 * n;
                self.accumulate(*x, d);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let d = gd.iter().zip(xv).map(|(g, &x)| g * gelu_grad(x)).collect();
                self.backward_counts.mults += 10 * n;
                self.backward_counts.exps += n;
                self.accumulate(*x, d);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k, nn) = (sa[0], sa[1], sb[1]);
                self.matmul_backward(*a, *b, gd, m, k, nn, 1);
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (batch, m, k, nn) = (sa[0], sa[1], sa[2], sb[2]);
                self.matmul_backward(*a, *b, gd, m, k, nn, batch);
            }
            Op::Permute(x, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (k, &p) in perm.iter().enumerate() {
                    inverse[p] = k;
                }
                let d = permute_raw(gd, &out_shape, &inverse);
                self.accumulate(*x, d);
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let scale = if matches!(op, Op::Mean { .. }) {
                    self.backward_counts.mults += (outer * len * inner) as u64;
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for k in 0..inner {
                            d[(o * len + j) * inner + k] = gd[o * inner + k] * scale;
                        }
                    }
                }
                self.accumulate(*x, d);
            }
            Op::SumAll(x) => {
                let m = self.value(*x).numel();
                self.accumulate(*x, vec![gd[0]; m]);
            }
            Op::Extremum { x, axis, arg } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..inner {
                        let r = o * inner + k;
                        d[(o * len + arg[r]) * inner + k] = gd[r];
                    }
                }
                self.accumulate(*x, d);
            }
            Op::Softmax { x, axis } => {
                let y = self.nodes[i].value.data().to_vec();
                let d = along_axis(&out_shape, *axis, |idx| {
                    let dot: f64 =
                        pairwise_sum(&idx.iter().map(|&j| gd[j] * y[j]).collect::<Vec<_>>());
                    idx.iter().map(|&j| y[j] * (gd[j] - dot)).collect()
                });
                self.backward_counts.mults += 2 * n;
                self.backward_counts.adds += 2 * n;
                self.accumulate(*x, d);
            }
            Op::LogSoftmax { x, axis } => {
                let y = self.nodes[i].value.data().to_vec();
                let d = along_axis(&out_shape, *axis, |idx| {
                    let total = pairwise_sum(&idx.iter().map(|&j| gd[j]).collect::<Vec<_>>());
                    idx.iter().map(|&j| gd[j] - y[j].exp() * total).collect()
                });
                self.backward_counts.mults += n;
                self.backward_counts.adds += 2 * n;
                self.backward_counts.exps += n;
                self.accumulate(*x, d);
            }
            Op::L2Normalize {
                x,
                axis,
                eps,
                norms,
            } => {
                let y = self.nodes[i].value.data().to_vec();
                let (outer, len, inner) = split_axis(&out_shape, *axis);
                let mut d = vec![0.0; y.len()];
                let mut buf = vec![0.0; len];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + k;
                        let norm = norms[o * inner + k];
                        if norm > *eps {
                            for (j, slot) in buf.iter_mut().enumerate() {
                                *slot = gd[idx(j)] * y[idx(j)];
                            }
                            let dot = pairwise_sum(&buf);
                            for j in 0..len {
                                d[idx(j)] = (gd[idx(j)] - y[idx(j)] * dot) / norm;
                            }
                        } else {
                            for j in 0..len {
                                d[idx(j)] = gd[idx(j)] / eps;
                            }
                        }
                    }
                }
                self.backward_counts.mults += 3 * n;
                self.backward_counts.adds += 2 * n;
                self.accumulate(*x, d);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = self.nodes[i].value.data();
                let width = *out_shape.last().unwrap();
                let mut d = vec![0.0; y.len()];
                let mut buf = vec![0.0; width];
                for (r, inv) in inv_std.iter().enumerate() {
                    let rg = &gd[r * width..(r + 1) * width];
                    let ry = &y[r * width..(r + 1) * width];
                    let mean_g = pairwise_sum(rg) / width as f64;
                    for (slot, (g, y)) in buf.iter_mut().zip(rg.iter().zip(ry)) {
                        *slot = g * y;
                    }
                    let mean_gy = pairwise_sum(&buf) / width as f64;
                    for j in 0..width {
                        d[r * width + j] = inv * (rg[j] - mean_g - ry[j] * mean_gy);
                    }
                }
                self.backward_counts.mults += 3 * n;
                self.backward_counts.adds += 4 * n;
                self.accumulate(*x, d);
            }
            Op::Where { mask, a, b } => {
                if self.wants(*a) {
                    let d = gd
                        .iter()
                        .zip(mask)
                        .map(|(&g, &m)| if m { g } else { 0.0 })
                        .collect();
                    self.accumulate(*a, d);
                }
                if self.wants(*b) {
                    let d = gd
                        .iter()
                        .zip(mask)
                        .map(|(&g, &m)| if m { 0.0 } else { g })
                        .collect();
                    self.accumulate(*b, d);
                }
            }
            Op::Embedding { table, ids } => {
                let w = self.shape(*table)[1];
                let mut d = vec![0.0; self.value(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..w {
                        d[id * w + j] += gd[r * w + j];
                    }
                }
                self.backward_counts.adds += n;
                self.accumulate(*table, d);
            }
            Op::Select { x, axis, index } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let base = (o * len + index) * inner;
                    d[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
                self.accumulate(*x, d);
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = split_axis(self.shape(*x), *axis);
                let len = out_shape[*axis];
                let mut d = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(*x, d);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(&out_shape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if self.wants(x) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        self.accumulate(x, d);
                    }
                    offset += len;
                }
            }
            Op::Diagonal(x) => {
                let m = out_shape[0];
                let mut d = vec![0.0; m * m];
                for j in 0..m {
                    d[j * m + j] = gd[j];
                }
                self.accumulate(*x, d);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_backward(
        &mut self,
        a: Var,
        b: Var,
        gd: &[f64],
        m: usize,
        k: usize,
        n: usize,
        batch: usize,
    ) {
        let want_a = self.wants(a);
        let want_b = self.wants(b);
        let da = self.value(a).data().to_vec();
        let db = self.value(b).data().to_vec();
        let mut ga = Vec::new();
        let mut gb = Vec::new();
        for bi in 0..batch {
            let ab = &da[bi * m * k..(bi + 1) * m * k];
            let bb = &db[bi * k * n..(bi + 1) * k * n];
            let gbi = &gd[bi * m * n..(bi + 1) * m * n];
            if want_a {
                // g [m,n] x b^T [n,k]
                let bt = transpose2(bb, k, n);
                ga.extend(matmul_raw(gbi, &bt, m, n, k));
            }
            if want_b {
                // a^T [k,m] x g [m,n]
                let at = transpose2(ab, m, k);
                gb.extend(matmul_raw(&at, gbi, k, m, n));
            }
        }
        let per = matmul_counts(m, k, n);
        if want_a {
            self.backward_counts.mults += per.mults * batch as u64;
            self.backward_counts.adds += per.adds * batch as u64;
            self.accumulate(a, ga);
        }
        if want_b {
            self.backward_counts.mults += per.mults * batch as u64;
            self.backward_counts.adds += per.adds * batch as u64;
            self.accumulate(b, gb);
        }
    }

    /// Peak live bytes for the recorded pass.
    ///
    /// Forward intermediates are released after their last consumer unless a
    /// backward rule saved them, in which case they live until that rule has
    /// run. Gradient buffers live from first accumulation until their node's
    /// backward step; leaf values and parameter gradients are never released.
    /// Layout ops (reshape, permute, select, slice, diagonal) allocate
    /// nothing and extend the life of the buffer they view.
    pub fn peak_live_bytes(&self) -> u64 {
        self.simulate_peak(true)
    }

    /// Like [`peak_live_bytes`](Self::peak_live_bytes) but without leaf
    /// values and leaf gradients: intermediate activations, their saved
    /// copies and intermediate gradient buffers only.
    pub fn peak_activation_bytes(&self) -> u64 {
        self.simulate_peak(false)
    }

    fn simulate_peak(&self, include_leaves: bool) -> u64 {
        self.live_timeline(include_leaves).into_iter().max().unwrap_or(0)
    }

    /// Live activation bytes after each forward node and each backward step
    /// (same accounting as [`peak_activation_bytes`](Self::peak_activation_bytes)).
    /// The first `len()` entries cover the forward pass.
    pub fn activation_timeline(&self) -> Vec<u64> {
        self.live_timeline(false)
    }

    fn live_timeline(&self, include_leaves: bool) -> Vec<u64> {
        let n = self.nodes.len();
        if n == 0 {
            return Vec::new();
        }
        let bytes = self.precision.bytes();
        let root = self.root.map(|r| r.0);
        let slots = n + root.map_or(0, |r| r + 1) + 1;
        let bwd_slot = |node: usize| n + root.unwrap() - node;
        let mut delta = vec![0i64; slots + 1];

        let mut last_use = vec![None::<usize>; n];
        let mut saved_until = vec![None::<usize>; n];
        let mut first_grad_from = vec![None::<usize>; n];
        for (c, node) in self.nodes.iter().enumerate() {
            let on_path =
                root.is_some_and(|r| c <= r) && self.grads.get(c).is_some_and(Option::is_some);
            for v in node.op.inputs() {
                last_use[v.0] = Some(last_use[v.0].map_or(c, |u: usize| u.max(c)));
                if on_path && self.nodes[v.0].requires_grad {
                    first_grad_from[v.0] =
                        Some(first_grad_from[v.0].map_or(c, |u: usize| u.max(c)));
                }
            }
            if on_path {
                for v in node.op.saved_inputs() {
                    let end = bwd_slot(c) + 1;
                    saved_until[v.0] = Some(saved_until[v.0].map_or(end, |u: usize| u.max(end)));
                }
                if node.op.saves_output() {
                    let end = bwd_slot(c) + 1;
                    saved_until[c] = Some(saved_until[c].map_or(end, |u: usize| u.max(end)));
                }
            }
        }

        let mut value_end: Vec<usize> = (0..n)
            .map(|i| {
                let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
                if is_leaf || Some(i) == root || (root.is_none() && last_use[i].is_none()) {
                    slots
                } else {
                    let fwd_end = last_use[i].map_or(i + 1, |u| u + 1);
                    saved_until[i].map_or(fwd_end, |s| s.max(fwd_end))
                }
            })
            .collect();
        // a view keeps its base buffer alive; descending order handles chains
        for i in (0..n).rev() {
            if self.nodes[i].op.is_view() {
                let base = self.nodes[i].op.inputs()[0].0;
                value_end[base] = value_end[base].max(value_end[i]);
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            let is_leaf = matches!(node.op, Op::Leaf);
            if is_leaf && !include_leaves {
                continue;
            }
            let size = (node.value.numel() as u64 * bytes) as i64;
            if !node.op.is_view() {
                delta[i] += size;
                delta[value_end[i]] -= size;
            }

            if self.grads.get(i).is_some_and(Option::is_some) {
                let start = if Some(i) == root {
                    n
                } else {
                    first_grad_from[i].map_or(n, bwd_slot)
                };
                delta[start] += size;
                let grad_end = if is_leaf { slots } else { bwd_slot(i) + 1 };
                delta[grad_end] -= size;
            }
        }

        let mut live = 0i64;
        delta[..slots]
            .iter()
            .map(|d| {
                live += d;
                live as u64
            })
            .collect()
    }
}

fn transpose2(d: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = d[r * cols + c];
        }
    }
    out
}

/// Applies `f` to the flat indices of every 1-D slice along `axis`,
/// scattering its outputs back into a buffer of the full shape.
fn along_axis(shape: &[usize], axis: usize, f: impl Fn(&[usize]) -> Vec<f64>) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; outer * len * inner];
    let mut idx = vec![0usize; len];
    for o in 0..outer {
        for k in 0..inner {
            for (j, slot) in idx.iter_mut().enumerate() {
                *slot = (o * len + j) * inner + k;
            }
            for (j, v) in f(&idx).into_iter().enumerate() {
                out[idx[j]] = v;
            }
        }
    }
    out
}
