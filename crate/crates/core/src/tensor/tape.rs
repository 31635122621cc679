//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its value; `backward` walks the tape in
//! reverse and accumulates gradients for nodes that depend on a tracked leaf.

use std::sync::Arc;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse row mixing: output row `r` is `Σ weight · input[src]` over the
/// entries listed for `r`. Covers gathers, neighborhood sums and pooling.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowMix {
    offsets: Vec<usize>,
    sources: Vec<usize>,
    weights: Vec<f32>,
}

impl RowMix {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            sources: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Appends one output row built from `(source_row, weight)` pairs.
    pub fn push_row<I: IntoIterator<Item = (usize, f32)>>(&mut self, entries: I) {
        for (src, w) in entries {
            self.sources.push(src);
            self.weights.push(w);
        }
        self.offsets.push(self.sources.len());
    }

    /// Plan that copies the listed rows in order.
    pub fn gather(rows: &[usize]) -> Self {
        let mut mix = Self::new();
        for &r in rows {
            mix.push_row([(r, 1.0)]);
        }
        mix
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn max_source(&self) -> Option<usize> {
        self.sources.iter().copied().max()
    }

    fn entries(&self, r: usize) -> impl Iterator<Item = (usize, f32)> + '_ {
        let span = self.offsets[r]..self.offsets[r + 1];
        self.sources[span.clone()]
            .iter()
            .copied()
            .zip(self.weights[span].iter().copied())
    }

    /// Applies the plan to a `[rows, width]` buffer.
    pub fn apply(&self, input: &[f32], width: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; self.out_rows() * width];
        let mut acc = vec![0.0f64; width];
        for (r, out_row) in out.chunks_exact_mut(width).enumerate() {
            acc.fill(0.0);
            for (src, w) in self.entries(r) {
                let w = w as f64;
                for (a, &v) in acc.iter_mut().zip(&input[src * width..(src + 1) * width]) {
                    *a += w * v as f64;
                }
            }
            for (o, &a) in out_row.iter_mut().zip(&acc) {
                *o = a as f32;
            }
        }
        out
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    Softmax(Var),
    Log(Var),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    RowMix(Var, Arc<RowMix>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records a leaf; it is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let tracked = tensor.requires_grad();
        self.push(tensor, Op::Leaf, tracked)
    }

    /// Records a leaf copied from a parameter, keeping its tracked flag.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let mut copy = Tensor::from_parts(tensor.dims().to_vec(), tensor.data().to_vec());
        copy.set_requires_grad(tensor.requires_grad());
        self.leaf(copy)
    }

    /// Records an untracked leaf.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn finish(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        Ok(self.push(value, op, tracked))
    }

    /// `a[.., k] · b[k, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let k = av.last_dim();
        if bv.rank() != 2 || bv.dims()[0] != k {
            return Err(Error::shape("matmul", av.dims(), bv.dims()));
        }
        let (m, n) = (av.rows(), bv.dims()[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(av.data(), bv.data(), m, k, n, &mut out);
        let mut dims = av.dims().to_vec();
        *dims.last_mut().unwrap() = n;
        self.finish("matmul", Tensor::from_parts(dims, out), Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise `a + b`; `b` may omit leading axes of `a` and is then
    /// broadcast over them.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcastable(av.dims(), bv.dims()) {
            return Err(Error::shape("add", av.dims(), bv.dims()));
        }
        let mut out = av.data().to_vec();
        kernels::add_rows(&mut out, bv.data());
        let dims = av.dims().to_vec();
        self.finish("add", Tensor::from_parts(dims, out), Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        let av = self.value(a);
        let out = av.data().iter().map(|v| v * factor).collect();
        let dims = av.dims().to_vec();
        self.finish("scale", Tensor::from_parts(dims, out), Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = av.data().iter().map(|&v| v.max(0.0)).collect();
        let dims = av.dims().to_vec();
        self.finish("relu", Tensor::from_parts(dims, out), Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = av.data().iter().map(|&v| kernels::gelu(v)).collect();
        let dims = av.dims().to_vec();
        self.finish("gelu", Tensor::from_parts(dims, out), Op::Gelu(a), &[a])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let w = xv.last_dim();
        if gv.dims() != [w] || bv.dims() != [w] {
            return Err(Error::shape("layer_norm", xv.dims(), gv.dims()));
        }
        let mut out = xv.data().to_vec();
        let mut mean = Vec::with_capacity(xv.rows());
        let mut rstd = Vec::with_capacity(xv.rows());
        for row in out.chunks_exact_mut(w) {
            let (m, r) = kernels::layer_norm_row(row, gv.data(), bv.data());
            mean.push(m);
            rstd.push(r);
        }
        let dims = xv.dims().to_vec();
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        };
        self.finish("layer_norm", Tensor::from_parts(dims, out), op, &[x, gamma, beta])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut out = av.data().to_vec();
        for row in out.chunks_exact_mut(av.last_dim()) {
            kernels::softmax_row(row);
        }
        let dims = av.dims().to_vec();
        self.finish("softmax", Tensor::from_parts(dims, out), Op::Softmax(a), &[a])
    }

    /// Natural log; rejects non-positive inputs (clamp first).
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if let Some((index, &value)) = av.data().iter().enumerate().find(|(_, v)| **v <= 0.0) {
            return Err(Error::NonPositiveLog { index, value });
        }
        let out = av.data().iter().map(|v| v.ln()).collect();
        let dims = av.dims().to_vec();
        self.finish("log", Tensor::from_parts(dims, out), Op::Log(a), &[a])
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dims() != bv.dims() {
            return Err(Error::shape("mse", av.dims(), bv.dims()));
        }
        let total: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum();
        let value = Tensor::scalar((total / av.numel() as f64) as f32);
        self.finish("mse", value, Op::Mse(a, b), &[a, b])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let k = lv.last_dim();
        if lv.rows() != labels.len() {
            return Err(Error::shape("cross_entropy", lv.dims(), &[labels.len()]));
        }
        if let Some(&class) = labels.iter().find(|&&c| c >= k) {
            return Err(Error::UnknownClass { class, classes: k });
        }
        let mut logp = vec![0.0f32; lv.numel()];
        let mut total = 0.0f64;
        for (r, (row, out)) in lv.data().chunks_exact(k).zip(logp.chunks_exact_mut(k)).enumerate() {
            kernels::log_softmax_row(row, out);
            total -= out[labels[r]] as f64;
        }
        let probs = logp.iter().map(|v| v.exp()).collect();
        let value = Tensor::scalar((total / labels.len() as f64) as f32);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.finish("cross_entropy", value, op, &[logits])
    }

    /// Applies a [`RowMix`] to the `[rows, last_dim]` view of `a`.
    pub fn row_mix(&mut self, a: Var, mix: Arc<RowMix>) -> Result<Var> {
        let av = self.value(a);
        if mix.max_source().is_some_and(|s| s >= av.rows()) {
            return Err(Error::shape("row_mix", av.dims(), &[mix.max_source().unwrap() + 1]));
        }
        let w = av.last_dim();
        let out = mix.apply(av.data(), w);
        let value = Tensor::from_parts(vec![mix.out_rows(), w], out);
        self.finish("row_mix", value, Op::RowMix(a, mix), &[a])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape("backward", lv.dims(), &[1]));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.last_dim(), bv.dims()[1]);
                if self.is_tracked(*a) {
                    kernels::matmul_bt_acc(g, bv.data(), m, k, n, slot(grads, *a, av.numel()));
                }
                if self.is_tracked(*b) {
                    kernels::matmul_at_acc(av.data(), g, m, k, n, slot(grads, *b, bv.numel()));
                }
            }
            Op::Add(a, b) => {
                if self.is_tracked(*a) {
                    accumulate(slot(grads, *a, g.len()), g);
                }
                if self.is_tracked(*b) {
                    let bn = self.value(*b).numel();
                    let gb = slot(grads, *b, bn);
                    for chunk in g.chunks_exact(bn) {
                        accumulate(gb, chunk);
                    }
                }
            }
            Op::Scale(a, factor) => {
                if self.is_tracked(*a) {
                    let ga = slot(grads, *a, g.len());
                    for (d, &gv) in ga.iter_mut().zip(g) {
                        *d += gv * factor;
                    }
                }
            }
            Op::Relu(a) => {
                if self.is_tracked(*a) {
                    let x = self.value(*a).data();
                    let ga = slot(grads, *a, g.len());
                    for ((d, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if self.is_tracked(*a) {
                    let x = self.value(*a).data();
                    let ga = slot(grads, *a, g.len());
                    for ((d, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                        *d += gv * kernels::gelu_grad(xv);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma).data();
                let w = xv.last_dim();
                let xhat_row = |r: usize, i: usize| (xv.data()[r * w + i] - mean[r]) * rstd[r];
                if self.is_tracked(*gamma) {
                    let gg = slot(grads, *gamma, w);
                    for (r, grow) in g.chunks_exact(w).enumerate() {
                        for i in 0..w {
                            gg[i] += grow[i] * xhat_row(r, i);
                        }
                    }
                }
                if self.is_tracked(*beta) {
                    let gb = slot(grads, *beta, w);
                    for grow in g.chunks_exact(w) {
                        accumulate(gb, grow);
                    }
                }
                if self.is_tracked(*x) {
                    let gx = slot(grads, *x, xv.numel());
                    let mut dxhat = vec![0.0f64; w];
                    for (r, grow) in g.chunks_exact(w).enumerate() {
                        let mut sum_d = 0.0f64;
                        let mut sum_dx = 0.0f64;
                        for i in 0..w {
                            let d = (grow[i] * gam[i]) as f64;
                            dxhat[i] = d;
                            sum_d += d;
                            sum_dx += d * xhat_row(r, i) as f64;
                        }
                        let nw = w as f64;
                        let rs = rstd[r] as f64;
                        for i in 0..w {
                            let xh = xhat_row(r, i) as f64;
                            gx[r * w + i] += (rs * (dxhat[i] - sum_d / nw - xh * sum_dx / nw)) as f32;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if self.is_tracked(*a) {
                    let w = out.last_dim();
                    let ga = slot(grads, *a, g.len());
                    for ((yrow, grow), darow) in out
                        .data()
                        .chunks_exact(w)
                        .zip(g.chunks_exact(w))
                        .zip(ga.chunks_exact_mut(w))
                    {
                        let s: f64 = yrow.iter().zip(grow).map(|(&y, &gv)| (y * gv) as f64).sum();
                        for ((d, &y), &gv) in darow.iter_mut().zip(yrow).zip(grow) {
                            *d += y * (gv - s as f32);
                        }
                    }
                }
            }
            Op::Log(a) => {
                if self.is_tracked(*a) {
                    let x = self.value(*a).data();
                    let ga = slot(grads, *a, g.len());
                    for ((d, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                        *d += gv / xv;
                    }
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let coef = 2.0 * g[0] / av.numel() as f32;
                if self.is_tracked(*a) {
                    let ga = slot(grads, *a, av.numel());
                    for ((d, &x), &y) in ga.iter_mut().zip(av.data()).zip(bv.data()) {
                        *d += coef * (x - y);
                    }
                }
                if self.is_tracked(*b) {
                    let gb = slot(grads, *b, bv.numel());
                    for ((d, &x), &y) in gb.iter_mut().zip(av.data()).zip(bv.data()) {
                        *d -= coef * (x - y);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.is_tracked(*logits) {
                    let lv = self.value(*logits);
                    let k = lv.last_dim();
                    let coef = g[0] / labels.len() as f32;
                    let gl = slot(grads, *logits, lv.numel());
                    for (r, (drow, prow)) in gl.chunks_exact_mut(k).zip(probs.chunks_exact(k)).enumerate() {
                        for (c, (d, &p)) in drow.iter_mut().zip(prow).enumerate() {
                            let target = if c == labels[r] { 1.0 } else { 0.0 };
                            *d += coef * (p - target);
                        }
                    }
                }
            }
            Op::RowMix(a, mix) => {
                if self.is_tracked(*a) {
                    let av = self.value(*a);
                    let w = av.last_dim();
                    let ga = slot(grads, *a, av.numel());
                    for (r, grow) in g.chunks_exact(w).enumerate() {
                        for (src, wt) in mix.entries(r) {
                            for (d, &gv) in ga[src * w..(src + 1) * w].iter_mut().zip(grow) {
                                *d += wt * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn slot(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(dst: &mut [f32], src: &[f32]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Stores the gradient of `v` on `param` (zeros if `v` received none).
    pub fn write_into(&self, v: Var, param: &mut Tensor) -> Result<()> {
        let g = self
            .get(v)
            .map(<[f32]>::to_vec)
            .unwrap_or_else(|| vec![0.0; param.numel()]);
        param.set_grad(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn mse_of_identical_inputs_is_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[1.0, -2.0, 0.5]));
        let b = tape.constant(t(&[3], &[1.0, -2.0, 0.5]));
        let l = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn mse_gradient_matches_quadratic_derivative() {
        // d/dx (x - 3)^2 at x = 5 is 4; central difference gives the same.
        let f = |x: f32| (x - 3.0) * (x - 3.0);
        let fd = (f(5.0 + 1e-3) - f(5.0 - 1e-3)) / 2e-3;
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[5.0]).into_param());
        let target = tape.constant(t(&[1], &[3.0]));
        let l = tape.mse(x, target).unwrap();
        let g = tape.backward(l).unwrap();
        let analytic = g.get(x).unwrap()[0];
        assert_eq!(analytic, 4.0);
        assert!((analytic - fd).abs() < 1e-2);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn add_broadcasts_only_over_leading_axes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let ok = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let bad = tape.constant(Tensor::zeros(&[2]));
        let y = tape.add(a, ok).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(a), Err(Error::NonPositiveLog { index: 1, .. })));
    }

    #[test]
    fn untracked_graph_yields_no_gradients() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1], &[2.0]));
        let b = tape.constant(t(&[1], &[1.0]));
        let l = tape.mse(a, b).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(a).is_none());
    }

    #[test]
    fn row_mix_gathers_and_sums() {
        let mut mix = RowMix::new();
        mix.push_row([(0, 1.0), (2, 1.0)]);
        mix.push_row([(1, 0.5)]);
        let out = mix.apply(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2);
        assert_eq!(out, vec![6.0, 8.0, 1.5, 2.0]);
    }
}
