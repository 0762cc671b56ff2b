//! Reverse-mode gradient tape.
//!
//! Every forward op appends a node holding its output value and whatever it
//! needs for the backward rule. Node ids increase monotonically, so the node
//! vector is already a topological order and [`Tape::backward`] is a single
//! reverse sweep.

use crate::conv::col2im;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    AddChannel(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Reshape(Var),
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Concat0(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Gaussian {
        coords: Var,
        sigma: T,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v`'s value cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
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

    /// Gradient accumulated by the last [`Tape::backward`]; `None` when the
    /// node was not reached or does not require a gradient.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Accumulates d(loss)/d(node) for every node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let seed = Tensor::ones(self.shape(loss));
        self.grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.node_backward(i, &g)?;
            self.grads[i] = Some(g);
            for (input, gi) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut self.grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if needs(*a) {
                    // ga = g * b^T
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gd,
                        n as isize,
                        1,
                        bv.data(),
                        1,
                        n as isize,
                        T::zero(),
                        &mut ga,
                        k as isize,
                        1,
                    );
                    out.push((*a, Tensor::new(&[m, k], ga)?));
                }
                if needs(*b) {
                    // gb = a^T * g
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        av.data(),
                        1,
                        k as isize,
                        gd,
                        n as isize,
                        1,
                        T::zero(),
                        &mut gb,
                        n as isize,
                        1,
                    );
                    out.push((*b, Tensor::new(&[k, n], gb)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                if needs(*b) {
                    out.push((*b, g.map(|x| -x)));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    out.push((*a, g.zip_map(val(*b), |x, y| x * y)?));
                }
                if needs(*b) {
                    out.push((*b, g.zip_map(val(*a), |x, y| x * y)?));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                out.push((*a, g.map(|x| x * s)));
            }
            Op::AddRow(x, b) => {
                out.push((*x, g.clone()));
                if needs(*b) {
                    let n = val(*b).len();
                    let mut gb = vec![T::zero(); n];
                    for row in gd.chunks(n) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    out.push((*b, Tensor::new(val(*b).shape(), gb)?));
                }
            }
            Op::AddChannel(x, b) => {
                out.push((*x, g.clone()));
                if needs(*b) {
                    let c = val(*b).len();
                    let plane = gd.len() / c;
                    let gb: Vec<T> = gd.chunks(plane).map(|p| p.iter().copied().sum()).collect();
                    out.push((*b, Tensor::new(val(*b).shape(), gb)?));
                }
            }
            Op::Relu(x) => {
                let y = node.value.data();
                let gx: Vec<T> = gd
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| if yv > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*x, Tensor::new(g.shape(), gx)?));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let gx: Vec<T> = gd.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect();
                out.push((*x, Tensor::new(g.shape(), gx)?));
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let yd = y.data();
                let mut gx = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for inn in 0..inner {
                        let base = o * len * inner + inn;
                        let mut dot = T::zero();
                        for l in 0..len {
                            let idx = base + l * inner;
                            dot += gd[idx] * yd[idx];
                        }
                        for l in 0..len {
                            let idx = base + l * inner;
                            gx[idx] = yd[idx] * (gd[idx] - dot);
                        }
                    }
                }
                out.push((*x, Tensor::new(y.shape(), gx)?));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = val(*gamma).data();
                let c = gam.len();
                let nrows = xhat.len() / c;
                let cf = T::lit(c as f64);
                if needs(*x) {
                    let mut gx = vec![T::zero(); xhat.len()];
                    for r in 0..nrows {
                        let row = r * c..(r + 1) * c;
                        let gr = &gd[row.clone()];
                        let xh = &xhat[row.clone()];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..c {
                            let gh = gr[j] * gam[j];
                            s1 += gh;
                            s2 += gh * xh[j];
                        }
                        for j in 0..c {
                            let gh = gr[j] * gam[j];
                            gx[r * c + j] = inv_std[r] / cf * (cf * gh - s1 - xh[j] * s2);
                        }
                    }
                    out.push((*x, Tensor::new(val(*x).shape(), gx)?));
                }
                if needs(*gamma) {
                    let mut gg = vec![T::zero(); c];
                    for (gr, xh) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * xh[j];
                        }
                    }
                    out.push((*gamma, Tensor::new(&[c], gg)?));
                }
                if needs(*beta) {
                    let mut gb = vec![T::zero(); c];
                    for gr in gd.chunks(c) {
                        for j in 0..c {
                            gb[j] += gr[j];
                        }
                    }
                    out.push((*beta, Tensor::new(&[c], gb)?));
                }
            }
            Op::Dropout { x, mask } => {
                let gx: Vec<T> = gd.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                out.push((*x, Tensor::new(g.shape(), gx)?));
            }
            Op::Conv2d {
                x,
                kernel,
                stride,
                pad,
                cols,
            } => {
                let xs = val(*x).shape();
                let ks = val(*kernel).shape();
                let (c_out, q) = (ks[0], ks[1] * ks[2] * ks[3]);
                let p = node.value.shape()[1] * node.value.shape()[2];
                if needs(*kernel) {
                    // gK = g * cols^T
                    let mut gk = vec![T::zero(); c_out * q];
                    T::gemm(
                        c_out,
                        p,
                        q,
                        T::one(),
                        gd,
                        p as isize,
                        1,
                        cols,
                        1,
                        p as isize,
                        T::zero(),
                        &mut gk,
                        q as isize,
                        1,
                    );
                    out.push((*kernel, Tensor::new(ks, gk)?));
                }
                if needs(*x) {
                    // gcols = K^T * g
                    let mut gcols = vec![T::zero(); q * p];
                    T::gemm(
                        q,
                        c_out,
                        p,
                        T::one(),
                        val(*kernel).data(),
                        1,
                        q as isize,
                        gd,
                        p as isize,
                        1,
                        T::zero(),
                        &mut gcols,
                        p as isize,
                        1,
                    );
                    let gx = col2im(
                        &gcols,
                        (xs[0], xs[1], xs[2]),
                        (ks[2], ks[3]),
                        *stride,
                        *pad,
                        (node.value.shape()[1], node.value.shape()[2]),
                    );
                    out.push((*x, Tensor::new(xs, gx)?));
                }
            }
            Op::Upsample { x, factor } => {
                let xs = val(*x).shape();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let f = *factor;
                let wo = w * f;
                let mut gx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for yo in 0..h * f {
                        let src_row = ch * h * w + (yo / f) * w;
                        let dst_row = (ch * h * f + yo) * wo;
                        for xo in 0..wo {
                            gx[src_row + xo / f] += gd[dst_row + xo];
                        }
                    }
                }
                out.push((*x, Tensor::new(xs, gx)?));
            }
            Op::Reshape(x) => {
                out.push((*x, g.clone().reshape(val(*x).shape())?));
            }
            Op::Transpose(x) => {
                out.push((*x, g.transpose2()?));
            }
            Op::SliceCols { x, start } => {
                let xs = val(*x).shape();
                let (m, n) = (xs[0], xs[1]);
                let w = g.shape()[1];
                let mut gx = vec![T::zero(); m * n];
                for r in 0..m {
                    gx[r * n + start..r * n + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                out.push((*x, Tensor::new(xs, gx)?));
            }
            Op::ConcatCols(parts) => {
                let m = g.shape()[0];
                let total = g.shape()[1];
                let mut offset = 0;
                for part in parts {
                    let w = val(*part).shape()[1];
                    if needs(*part) {
                        let mut gp = vec![T::zero(); m * w];
                        for r in 0..m {
                            gp[r * w..(r + 1) * w].copy_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        out.push((*part, Tensor::new(&[m, w], gp)?));
                    }
                    offset += w;
                }
            }
            Op::Concat0(parts) => {
                let mut offset = 0;
                for part in parts {
                    let n = val(*part).len();
                    if needs(*part) {
                        out.push((*part, Tensor::new(val(*part).shape(), gd[offset..offset + n].to_vec())?));
                    }
                    offset += n;
                }
            }
            Op::Sum(x) => {
                out.push((*x, Tensor::full(val(*x).shape(), gd[0])));
            }
            Op::Mean(x) => {
                let n = T::lit(val(*x).len() as f64);
                out.push((*x, Tensor::full(val(*x).shape(), gd[0] / n)));
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let scale = T::lit(2.0) * gd[0] / T::lit(av.len() as f64);
                let ga = av.zip_map(bv, |x, y| (x - y) * scale)?;
                if needs(*b) {
                    out.push((*b, ga.map(|x| -x)));
                }
                out.push((*a, ga));
            }
            Op::Gaussian { coords, sigma } => {
                let ys = node.value.shape();
                let (k, h, w) = (ys[0], ys[1], ys[2]);
                let cv = val(*coords).data();
                let s2 = *sigma * *sigma;
                let y = node.value.data();
                let mut gc = vec![T::zero(); k * 2];
                for j in 0..k {
                    let (cx, cy) = (cv[2 * j], cv[2 * j + 1]);
                    let mut sx = T::zero();
                    let mut sy = T::zero();
                    for r in 0..h {
                        let dy = T::lit(r as f64) - cy;
                        for col in 0..w {
                            let idx = (j * h + r) * w + col;
                            let gv = gd[idx] * y[idx];
                            sx += gv * (T::lit(col as f64) - cx);
                            sy += gv * dy;
                        }
                    }
                    gc[2 * j] = sx / s2;
                    gc[2 * j + 1] = sy / s2;
                }
                out.push((*coords, Tensor::new(&[k, 2], gc)?));
            }
        }
        Ok(out)
    }
}

fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => {
            vec![*a, *b]
        }
        Op::AddRow(x, b) | Op::AddChannel(x, b) => vec![*x, *b],
        Op::Scale(x, _)
        | Op::Relu(x)
        | Op::Sigmoid(x)
        | Op::Reshape(x)
        | Op::Transpose(x)
        | Op::Sum(x)
        | Op::Mean(x) => vec![*x],
        Op::Softmax { x, .. } | Op::Dropout { x, .. } | Op::Upsample { x, .. } | Op::SliceCols { x, .. } => vec![*x],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Conv2d { x, kernel, .. } => vec![*x, *kernel],
        Op::ConcatCols(parts) | Op::Concat0(parts) => parts.clone(),
        Op::Gaussian { coords, .. } => vec![*coords],
    }
}

/// `(outer, axis_len, inner)` for iterating a row-major tensor along `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
