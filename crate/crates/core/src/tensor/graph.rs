//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every primitive in creation order, which is already a
//! topological order, so the backward pass is a single reverse sweep. Leaves
//! bound with `requires_grad` receive gradients; everything else is treated
//! as a constant. One graph is built per forward evaluation and dropped after
//! the backward pass.

use super::{gemm, MatMut, MatRef, ParamSet, Tensor};
use crate::error::{shape_err, Error, Result};

/// Floor applied to the argument of [`Graph::log`].
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Conv1d {
        input: Var,
        kernel: Var,
        dilation: usize,
    },
    Depthwise {
        input: Var,
        kernel: Var,
        dilation: usize,
    },
    AddBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of the primitives applied during one forward evaluation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for a list of bound parameters, zero-filled where the
    /// parameter did not influence the output.
    pub fn collect(&self, graph: &Graph, vars: &[Var]) -> Vec<Tensor> {
        vars.iter()
            .map(|&v| {
                self.get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
            })
            .collect()
    }
}

fn same_shape_or_scalar(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        shape_err(op, a.shape(), b.shape())
    }
}

fn zip_broadcast(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match (a.len(), b.len()) {
        (n, m) if n == m => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        (_, 1) => a.iter().map(|&x| f(x, b[0])).collect(),
        _ => b.iter().map(|&y| f(a[0], y)).collect(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Frame range `[t0, t1)` for which tap offset `o` reads inside `[0, len)`.
fn tap_range(len: usize, o: isize) -> Option<(usize, usize)> {
    let t0 = (-o).max(0) as usize;
    let t1 = (len as isize - o).min(len as isize);
    if t1 <= t0 as isize {
        None
    } else {
        Some((t0, t1 as usize))
    }
}

fn tap_offset(k: usize, kernel_len: usize, dilation: usize) -> isize {
    (k as isize - ((kernel_len - 1) / 2) as isize) * dilation as isize
}

fn check_kernel_len(kernel_len: usize, dilation: usize) -> Result<()> {
    if kernel_len.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "kernel length must be odd for same padding, got {kernel_len}"
        )));
    }
    if dilation == 0 {
        return Err(Error::Config("dilation must be positive".into()));
    }
    Ok(())
}

impl Graph {
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: &Tensor) -> Var {
        self.leaf(value.clone(), true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds every tensor of a parameter set as a leaf, in set order.
    pub fn bind(&mut self, params: &ParamSet, requires_grad: bool) -> Vec<Var> {
        params
            .tensors()
            .iter()
            .map(|t| self.leaf(t.clone(), requires_grad))
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return shape_err("matmul", av.shape(), bv.shape());
        }
        let out = av.matmul(bv)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    /// Dilated 1-D cross-correlation with zero "same" padding.
    ///
    /// `input` is `Cin×T`, `kernel` is `Cout×Cin×L` with `L` odd; output is
    /// `Cout×T`. Tap `k` reads frame `t + (k − (L−1)/2)·dilation`.
    pub fn conv1d_dilated(&mut self, input: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(kernel));
        if x.shape().len() != 2 || w.shape().len() != 3 || w.shape()[1] != x.shape()[0] {
            return shape_err("conv1d_dilated", x.shape(), w.shape());
        }
        let (cin, t) = (x.shape()[0], x.shape()[1]);
        let (cout, l) = (w.shape()[0], w.shape()[2]);
        check_kernel_len(l, dilation)?;
        let mut out = vec![0.0; cout * t];
        for k in 0..l {
            let o = tap_offset(k, l, dilation);
            let Some((t0, t1)) = tap_range(t, o) else {
                continue;
            };
            let n = t1 - t0;
            gemm(
                MatRef::strided(w.data(), k, cout, cin, cin * l, l),
                MatRef::strided(x.data(), (t0 as isize + o) as usize, cin, n, t, 1),
                MatMut::strided(&mut out, t0, cout, n, t, 1),
                true,
            );
        }
        let value = Tensor::new(vec![cout, t], out)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(
            value,
            Op::Conv1d {
                input,
                kernel,
                dilation,
            },
            rg,
        ))
    }

    /// Per-channel dilated convolution: `input` is `C×T`, `kernel` is `C×L`.
    pub fn depthwise_conv1d(&mut self, input: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(kernel));
        if x.shape().len() != 2 || w.shape().len() != 2 || w.shape()[0] != x.shape()[0] {
            return shape_err("depthwise_conv1d", x.shape(), w.shape());
        }
        let (c, t) = (x.shape()[0], x.shape()[1]);
        let l = w.shape()[1];
        check_kernel_len(l, dilation)?;
        let (xd, wd) = (x.data(), w.data());
        let mut out = vec![0.0; c * t];
        for k in 0..l {
            let o = tap_offset(k, l, dilation);
            let Some((t0, t1)) = tap_range(t, o) else {
                continue;
            };
            for ch in 0..c {
                let wk = wd[ch * l + k];
                let src = &xd[ch * t..(ch + 1) * t];
                let dst = &mut out[ch * t..(ch + 1) * t];
                for tt in t0..t1 {
                    dst[tt] += wk * src[(tt as isize + o) as usize];
                }
            }
        }
        let value = Tensor::new(vec![c, t], out)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(
            value,
            Op::Depthwise {
                input,
                kernel,
                dilation,
            },
            rg,
        ))
    }

    /// Adds a per-row bias vector of length `C` to a `C×T` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.shape().len() != 2 || bv.numel() != xv.rows() {
            return shape_err("add_bias", xv.shape(), bv.shape());
        }
        let cols = xv.cols();
        let mut out = xv.data().to_vec();
        for (r, row) in out.chunks_mut(cols.max(1)).enumerate() {
            let b = bv.data()[r];
            row.iter_mut().for_each(|v| *v += b);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    /// Rectifier; the backward pass uses subgradient 0 at exactly 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// Natural log with the argument floored at [`LOG_FLOOR`]; no error is
    /// raised for non-positive inputs.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| x.max(LOG_FLOOR).ln())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn offset(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + s)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = same_shape_or_scalar(name, av, bv)?;
        let value = Tensor::new(shape, zip_broadcast(av.data(), bv.data(), f))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Tensor::scalar(v.sum() / v.numel().max(1) as f64);
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = loss.0 + 1;
        if self.value(loss).numel() != 1 {
            return shape_err("backward", self.shape(loss), &[]);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.map(|g| Tensor::new(node.value.shape().to_vec(), g))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { grads })
    }

    fn accumulate<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let numel = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; numel]))
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, p) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = self.accumulate(grads, a) {
                    gemm(
                        MatRef::row_major(g, m, p),
                        MatRef::row_major(bv.data(), k, p).t(),
                        MatMut::row_major(ga, m, k),
                        true,
                    );
                }
                if let Some(gb) = self.accumulate(grads, b) {
                    gemm(
                        MatRef::row_major(av.data(), m, k).t(),
                        MatRef::row_major(g, m, p),
                        MatMut::row_major(gb, k, p),
                        true,
                    );
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                if let Some(ga) = self.accumulate(grads, a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Conv1d {
                input,
                kernel,
                dilation,
            } => self.conv1d_backward(g, input, kernel, dilation, grads),
            Op::Depthwise {
                input,
                kernel,
                dilation,
            } => self.depthwise_backward(g, input, kernel, dilation, grads),
            Op::AddBias(x, bias) => {
                let cols = out.cols().max(1);
                if let Some(gx) = self.accumulate(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = self.accumulate(grads, bias) {
                    for (r, row) in g.chunks(cols).enumerate() {
                        gb[r] += row.iter().sum::<f64>();
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.value(a).data();
                if let Some(ga) = self.accumulate(grads, a) {
                    for ((d, &s), &xv) in ga.iter_mut().zip(g).zip(x) {
                        if xv > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                if let Some(ga) = self.accumulate(grads, a) {
                    for ((d, &s), &yv) in ga.iter_mut().zip(g).zip(y) {
                        *d += s * yv * (1.0 - yv);
                    }
                }
            }
            Op::Log(a) => {
                let x = self.value(a).data();
                if let Some(ga) = self.accumulate(grads, a) {
                    for ((d, &s), &xv) in ga.iter_mut().zip(g).zip(x) {
                        if xv > LOG_FLOOR {
                            *d += s / xv;
                        }
                    }
                }
            }
            Op::Abs(a) => {
                let x = self.value(a).data();
                if let Some(ga) = self.accumulate(grads, a) {
                    for ((d, &s), &xv) in ga.iter_mut().zip(g).zip(x) {
                        *d += s * if xv > 0.0 {
                            1.0
                        } else if xv < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(a).data();
                if let Some(ga) = self.accumulate(grads, a) {
                    for ((d, &s), &xv) in ga.iter_mut().zip(g).zip(x) {
                        if xv >= lo && xv <= hi {
                            *d += s;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.accumulate(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * s);
                }
            }
            Op::Offset(a) => {
                if let Some(ga) = self.accumulate(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
            }
            Op::Add(a, b) => {
                self.reduce_into(grads, a, g, |_| 1.0);
                self.reduce_into(grads, b, g, |_| 1.0);
            }
            Op::Sub(a, b) => {
                self.reduce_into(grads, a, g, |_| 1.0);
                self.reduce_into(grads, b, g, |_| -1.0);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                self.reduce_into(grads, a, g, |j| bv[if bv.len() == 1 { 0 } else { j }]);
                self.reduce_into(grads, b, g, |j| av[if av.len() == 1 { 0 } else { j }]);
            }
            Op::Sum(a) => {
                if let Some(ga) = self.accumulate(grads, a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.accumulate(grads, a) {
                    let s = g[0] / ga.len().max(1) as f64;
                    ga.iter_mut().for_each(|d| *d += s);
                }
            }
        }
    }

    /// Accumulates `g[j] * local(j)` into operand `v`, summing when `v` was
    /// broadcast from a scalar.
    fn reduce_into(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        g: &[f64],
        local: impl Fn(usize) -> f64,
    ) {
        if let Some(gv) = self.accumulate(grads, v) {
            if gv.len() == g.len() {
                for (j, d) in gv.iter_mut().enumerate() {
                    *d += g[j] * local(j);
                }
            } else {
                gv[0] += g.iter().enumerate().map(|(j, s)| s * local(j)).sum::<f64>();
            }
        }
    }

    fn conv1d_backward(
        &self,
        g: &[f64],
        input: Var,
        kernel: Var,
        dilation: usize,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (x, w) = (self.value(input), self.value(kernel));
        let (cin, t) = (x.shape()[0], x.shape()[1]);
        let (cout, l) = (w.shape()[0], w.shape()[2]);
        for k in 0..l {
            let o = tap_offset(k, l, dilation);
            let Some((t0, t1)) = tap_range(t, o) else {
                continue;
            };
            let n = t1 - t0;
            let src = (t0 as isize + o) as usize;
            let g_slice = MatRef::strided(g, t0, cout, n, t, 1);
            if let Some(gx) = self.accumulate(grads, input) {
                gemm(
                    MatRef::strided(w.data(), k, cout, cin, cin * l, l).t(),
                    g_slice,
                    MatMut::strided(gx, src, cin, n, t, 1),
                    true,
                );
            }
            if let Some(gw) = self.accumulate(grads, kernel) {
                gemm(
                    g_slice,
                    MatRef::strided(x.data(), src, cin, n, t, 1).t(),
                    MatMut::strided(gw, k, cout, cin, cin * l, l),
                    true,
                );
            }
        }
    }

    fn depthwise_backward(
        &self,
        g: &[f64],
        input: Var,
        kernel: Var,
        dilation: usize,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (x, w) = (self.value(input), self.value(kernel));
        let (c, t) = (x.shape()[0], x.shape()[1]);
        let l = w.shape()[1];
        for k in 0..l {
            let o = tap_offset(k, l, dilation);
            let Some((t0, t1)) = tap_range(t, o) else {
                continue;
            };
            if let Some(gx) = self.accumulate(grads, input) {
                for ch in 0..c {
                    let wk = w.data()[ch * l + k];
                    for tt in t0..t1 {
                        gx[ch * t + (tt as isize + o) as usize] += wk * g[ch * t + tt];
                    }
                }
            }
            if let Some(gw) = self.accumulate(grads, kernel) {
                for ch in 0..c {
                    let xs = &x.data()[ch * t..(ch + 1) * t];
                    let gs = &g[ch * t..(ch + 1) * t];
                    let mut acc = 0.0;
                    for tt in t0..t1 {
                        acc += gs[tt] * xs[(tt as isize + o) as usize];
                    }
                    gw[ch * l + k] += acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward_and_zero_subgradient() {
        let mut g = Graph::new();
        let x = g.param(&t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.param(&t(&[1], &[0.0]));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).data(), &[0.5]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn loss_gradient_wrt_itself_is_one() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2], &[1.0, 2.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(s).unwrap().data(), &[1.0]);
    }

    #[test]
    fn log_is_floored_without_error() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2], &[0.0, -3.0]));
        let y = g.log(x);
        let floor = LOG_FLOOR.ln();
        assert_eq!(g.value(y).data(), &[floor, floor]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        for dilation in [1, 2, 5] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_fn(2, 7, |r, c| (r * 7 + c) as f64 - 3.0));
            let mut k = vec![0.0; 2 * 2 * 3];
            k[1] = 1.0; // out 0, in 0, middle tap
            k[2 * 3 + 3 + 1] = 1.0; // out 1, in 1, middle tap
            let kv = g.constant(t(&[2, 2, 3], &k));
            let y = g.conv1d_dilated(x, kv, dilation).unwrap();
            assert_eq!(g.value(y), g.value(x));
        }
    }

    #[test]
    fn conv_zero_input_gives_zero_output() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 9]));
        let k = g.constant(Tensor::from_fn(2, 9, |r, c| (r + c) as f64).reshape(vec![2, 3, 3]).unwrap());
        let y = g.conv1d_dilated(x, k, 2).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.shape(y), &[2, 9]);
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 4]));
        let k = g.constant(Tensor::zeros(&[1, 1, 2]));
        assert!(matches!(g.conv1d_dilated(x, k, 1), Err(Error::Config(_))));
    }

    #[test]
    fn conv_out_of_range_taps_read_zero() {
        // kernel [1, 0, 0] with dilation 2 reads t-2
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 5], &[1.0, 2.0, 3.0, 4.0, 5.0]));
        let k = g.constant(t(&[1, 1, 3], &[1.0, 0.0, 0.0]));
        let y = g.conv1d_dilated(x, k, 2).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn scalar_broadcast_mul() {
        let mut g = Graph::new();
        let x = g.param(&t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.param(&t(&[1], &[2.0]));
        let y = g.mul(x, s).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 4.0, 6.0]);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(s).unwrap().data(), &[6.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.param(&t(&[2], &[3.0, 4.0]));
        let y = g.mul(a, b).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    }
}
