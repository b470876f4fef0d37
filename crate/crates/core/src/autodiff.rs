//! Reverse-mode differentiation over a recorded tape of tensor primitives.
//!
//! A [`Tape`] records every primitive applied to its nodes in execution order,
//! which is already a topological order. [`Tape::grad`] walks the record
//! backwards once. Nodes that do not depend on any parameter carry no
//! gradient and are skipped.
//!
//! The primitive set is deliberately closed: matmul, add, mul, scale,
//! reshape, permute, softmax over the last axis, layer normalization over the
//! last axis, GELU, row gather, and sum/mean reductions. `add` and `mul`
//! broadcast an operand whose shape is a suffix of the other's.

use std::collections::BTreeMap;

use crate::error::{bail, Result};
use crate::params::{Gradients, ParamSet};
use crate::tensor::{gemm, numel_of, MatmulPlan, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    Gelu(Var),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
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
    params: Vec<(String, Var)>,
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Which operand is broadcast, if any.
fn broadcast_plan(a: &[usize], b: &[usize]) -> Result<(bool, usize)> {
    if a == b {
        return Ok((false, 1));
    }
    if b.len() < a.len() && a.ends_with(b) {
        return Ok((false, numel_of(&a[..a.len() - b.len()])));
    }
    if a.len() < b.len() && b.ends_with(a) {
        return Ok((true, numel_of(&b[..b.len() - a.len()])));
    }
    bail!(Dimension, "cannot broadcast {:?} against {:?}", a, b)
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

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant: never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Loads a named parameter. Loading the same name twice returns the same
    /// node so its gradient is accumulated in one place.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some((_, v)) = self.params.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let value = params.require(name)?.clone();
        let v = self.push(value, Op::Param, true);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMul(a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_zip(a, b, |x, y| x + y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_zip(a, b, |x, y| x * y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Mul(a, b), tracked))
    }

    /// `a - b`, recorded as `a + (-1)·b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        let tracked = self.tracked(a);
        self.push(value, Op::Scale(a, k), tracked)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Reshape(a), tracked))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(axes)?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Permute(a, axes.to_vec()), tracked))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            bail!(Dimension, "transpose of rank-{r} tensor");
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let Some(&n) = x.shape().last() else {
            bail!(Dimension, "softmax of a scalar");
        };
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Softmax(a), tracked))
    }

    /// Normalizes each row over the last axis to zero mean and unit variance
    /// (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let Some(&n) = x.shape().last() else {
            bail!(Dimension, "layer_norm of a scalar");
        };
        if n == 0 {
            bail!(Dimension, "layer_norm over an empty axis");
        }
        let mut out = x.data().to_vec();
        let mut rstds = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::LayerNorm(a, rstds), tracked))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let tracked = self.tracked(a);
        self.push(value, Op::Gelu(a), tracked)
    }

    /// Selects rows of a `[rows, width]` table.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            bail!(Dimension, "gather needs a rank-2 table, got {:?}", t.shape());
        }
        let (rows, width) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                bail!(Contract, "gather index {i} out of range for {rows} rows");
            }
            out.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let value = Tensor::new([indices.len(), width], out)?;
        let tracked = self.tracked(table);
        Ok(self.push(value, Op::Gather(table, indices.to_vec()), tracked))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let tracked = self.tracked(a);
        self.push(value, Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let tracked = self.tracked(a);
        self.push(value, Op::Mean(a), tracked)
    }

    fn broadcast_zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (swapped, _) = broadcast_plan(ta.shape(), tb.shape())?;
        let (big, small) = if swapped { (tb, ta) } else { (ta, tb) };
        let k = small.numel().max(1);
        let data = big
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = small.data()[i % k];
                if swapped {
                    f(y, x)
                } else {
                    f(x, y)
                }
            })
            .collect();
        Tensor::new(big.shape().to_vec(), data)
    }

    /// Gradient of a scalar `loss` with respect to every tensor in `params`.
    /// Parameters the loss does not reach get zero gradients.
    pub fn grad(&self, loss: Var, params: &ParamSet) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if numel_of(shape) != 1 {
            bail!(Contract, "grad needs a scalar loss, got shape {:?}", shape);
        }
        self.vjp(loss, &Tensor::new(shape.to_vec(), vec![1.0])?, params)
    }

    /// Vector-Jacobian product: pulls `seed` (shaped like `output`) back to
    /// the parameters.
    pub fn vjp(&self, output: Var, seed: &Tensor, params: &ParamSet) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            bail!(
                Dimension,
                "seed shape {:?} does not match output {:?}",
                seed.shape(),
                self.value(output).shape()
            );
        }
        let grads = self.backward(output, seed)?;
        let mut out = BTreeMap::new();
        for (name, p) in params.iter() {
            let g = self
                .params
                .iter()
                .find(|(n, _)| n == name)
                .and_then(|(_, v)| grads[v.0].clone())
                .map(|data| Tensor::new(p.shape().to_vec(), data))
                .transpose()?
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()));
            out.insert(name.clone(), g);
        }
        Ok(Gradients::from_map(out))
    }

    fn backward(&self, output: Var, seed: &Tensor) -> Result<Vec<Option<Vec<f64>>>> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.tracked(output) {
            return Ok(grads);
        }
        grads[output.0] = Some(seed.data().to_vec());
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param => {
                    grads[id] = Some(g);
                }
                Op::MatMul(a, b) => self.back_matmul(*a, *b, &g, &mut grads),
                Op::Add(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (swapped, _) = broadcast_plan(ta.shape(), tb.shape())?;
                    let (big, small) = if swapped { (*b, *a) } else { (*a, *b) };
                    if self.tracked(small) {
                        let k = self.value(small).numel().max(1);
                        let mut red = vec![0.0; k];
                        for (i, v) in g.iter().enumerate() {
                            red[i % k] += v;
                        }
                        accumulate(&mut grads, small, red);
                    }
                    if self.tracked(big) {
                        accumulate(&mut grads, big, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (swapped, _) = broadcast_plan(ta.shape(), tb.shape())?;
                    let (big, small) = if swapped { (*b, *a) } else { (*a, *b) };
                    let (vbig, vsmall) = (self.value(big).data(), self.value(small).data());
                    let k = vsmall.len().max(1);
                    if self.tracked(small) {
                        let mut red = vec![0.0; k];
                        for (i, v) in g.iter().enumerate() {
                            red[i % k] += v * vbig[i];
                        }
                        accumulate(&mut grads, small, red);
                    }
                    if self.tracked(big) {
                        let d = g.iter().enumerate().map(|(i, v)| v * vsmall[i % k]).collect();
                        accumulate(&mut grads, big, d);
                    }
                }
                Op::Scale(a, k) => {
                    let d = g.iter().map(|v| v * k).collect();
                    accumulate(&mut grads, *a, d);
                }
                Op::Reshape(a) => accumulate(&mut grads, *a, g),
                Op::Permute(a, axes) => {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let gt = Tensor::new(node.value.shape().to_vec(), g)?.permute(&inverse)?;
                    accumulate(&mut grads, *a, gt.into_data());
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let n = *node.value.shape().last().unwrap_or(&1);
                    let mut d = vec![0.0; g.len()];
                    for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::LayerNorm(a, rstds) => {
                    let y = node.value.data();
                    let n = *node.value.shape().last().unwrap_or(&1);
                    let nf = n as f64;
                    let mut d = vec![0.0; g.len()];
                    for (row, ((dr, gr), yr)) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)).enumerate() {
                        let mg = gr.iter().sum::<f64>() / nf;
                        let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / nf;
                        let r = rstds[row];
                        for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv = r * (gv - mg - yv * mgy);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a).data();
                    let d = g.iter().zip(x).map(|(gv, xv)| gv * gelu_grad(*xv)).collect();
                    accumulate(&mut grads, *a, d);
                }
                Op::Gather(table, indices) => {
                    let t = self.value(*table);
                    let width = t.shape()[1];
                    let mut d = vec![0.0; t.numel()];
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..width {
                            d[i * width + c] += g[r * width + c];
                        }
                    }
                    accumulate(&mut grads, *table, d);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).numel();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).numel();
                    accumulate(&mut grads, *a, vec![g[0] / n as f64; n]);
                }
            }
        }
        Ok(grads)
    }

    fn back_matmul(&self, a: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (ta, tb) = (self.value(a), self.value(b));
        let plan = MatmulPlan::new(ta.shape(), tb.shape()).expect("validated in forward");
        let (m, k, n) = (plan.m, plan.k, plan.n);
        if self.tracked(a) {
            let mut da = vec![0.0; ta.numel()];
            if plan.shared_rhs {
                let rows = plan.batch * m;
                gemm(rows, n, k, g, (n, 1), tb.data(), (1, n), &mut da, false);
            } else {
                for bi in 0..plan.batch {
                    gemm(
                        m,
                        n,
                        k,
                        &g[bi * m * n..(bi + 1) * m * n],
                        (n, 1),
                        &tb.data()[bi * k * n..(bi + 1) * k * n],
                        (1, n),
                        &mut da[bi * m * k..(bi + 1) * m * k],
                        false,
                    );
                }
            }
            accumulate(grads, a, da);
        }
        if self.tracked(b) {
            let mut db = vec![0.0; tb.numel()];
            if plan.shared_rhs {
                let rows = plan.batch * m;
                gemm(k, rows, n, ta.data(), (1, k), g, (n, 1), &mut db, false);
            } else {
                for bi in 0..plan.batch {
                    gemm(
                        k,
                        m,
                        n,
                        &ta.data()[bi * m * k..(bi + 1) * m * k],
                        (1, k),
                        &g[bi * m * n..(bi + 1) * m * n],
                        (n, 1),
                        &mut db[bi * k * n..(bi + 1) * k * n],
                        false,
                    );
                }
            }
            accumulate(grads, b, db);
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(d).for_each(|(x, y)| *x += y),
        slot @ None => *slot = Some(d),
    }
}
