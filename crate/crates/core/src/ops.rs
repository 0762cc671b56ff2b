//! Differentiable forward ops. Each records itself on the tape.

use rand::Rng;

use crate::conv::{conv_out_size, im2col};
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tape::{axis_split, Op, Tape, Var};
use crate::tensor::Tensor;

impl<T: Scalar> Tape<T> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(bv)?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), "scale")
    }

    /// `x[m, n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        let n = *xv.shape().last().unwrap_or(&0);
        if bv.len() != n || bv.ndim() != 1 {
            return Err(dim_err!("add_row: bias {:?} vs {:?}", bv.shape(), xv.shape()));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        self.push(out, Op::AddRow(x, b), "add_row")
    }

    /// `x[c, h, w] + b[c]` broadcast over each plane.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        if xv.ndim() != 3 || bv.len() != xv.shape()[0] {
            return Err(dim_err!("add_channel: bias {:?} vs {:?}", bv.shape(), xv.shape()));
        }
        let plane = xv.shape()[1] * xv.shape()[2];
        let mut out = xv.clone();
        for (p, &bb) in out.data_mut().chunks_mut(plane).zip(bv.data()) {
            for o in p {
                *o += bb;
            }
        }
        self.push(out, Op::AddChannel(x, b), "add_channel")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid(x), "sigmoid")
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(Error::Argument(format!(
                "softmax axis {axis} for shape {:?}",
                xv.shape()
            )));
        }
        let out = softmax_values(xv, axis);
        self.push(out, Op::Softmax { x, axis }, "softmax")
    }

    /// Normalizes each row over the last dimension, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv.shape().last().ok_or_else(|| dim_err!("layer_norm on a scalar"))?;
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != c || bv.len() != c {
            return Err(dim_err!(
                "layer_norm: affine {:?}/{:?} vs last dim {c}",
                gv.shape(),
                bv.shape()
            ));
        }
        let cf = T::lit(c as f64);
        let nrows = xv.len() / c;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); nrows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..nrows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Inverted dropout. Inference mode returns `x` itself.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Argument(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let out: Vec<T> = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(xv.shape(), out)?;
        self.push(out, Op::Dropout { x, mask }, "dropout")
    }

    /// Cross-correlation of `x[c_in, h, w]` with `kernel[c_out, c_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let xv = self.value(x);
        let kv = self.value(kernel);
        let (xs, ks) = (xv.shape(), kv.shape());
        if xs.len() != 3 || ks.len() != 4 || xs[0] != ks[1] {
            return Err(dim_err!("conv2d: input {:?} kernel {:?}", xs, ks));
        }
        let (kh, kw) = (ks[2], ks[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(dim_err!("conv2d: kernel extent must be odd, got {kh}x{kw}"));
        }
        let oh =
            conv_out_size(xs[1], kh, stride, pad).ok_or_else(|| dim_err!("conv2d: window does not fit {:?}", xs))?;
        let ow =
            conv_out_size(xs[2], kw, stride, pad).ok_or_else(|| dim_err!("conv2d: window does not fit {:?}", xs))?;
        let cols = im2col(xv.data(), (xs[0], xs[1], xs[2]), (kh, kw), stride, pad, (oh, ow));
        let (c_out, q, p) = (ks[0], ks[1] * kh * kw, oh * ow);
        let mut out = vec![T::zero(); c_out * p];
        T::gemm(
            c_out,
            q,
            p,
            T::one(),
            kv.data(),
            q as isize,
            1,
            &cols,
            p as isize,
            1,
            T::zero(),
            &mut out,
            p as isize,
            1,
        );
        let out = Tensor::new(&[c_out, oh, ow], out)?;
        self.push(
            out,
            Op::Conv2d {
                x,
                kernel,
                stride,
                pad,
                cols,
            },
            "conv2d",
        )
    }

    /// Nearest-neighbour upsampling of `x[c, h, w]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::Argument("upsample factor must be >= 1".into()));
        }
        let xv = self.value(x);
        let (c, h, w) = crate::tensor::dims3(xv)?;
        if factor == 1 {
            return Ok(x);
        }
        let (ho, wo) = (h * factor, w * factor);
        let src = xv.data();
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            for yo in 0..ho {
                let s = ch * h * w + (yo / factor) * w;
                let d = (ch * ho + yo) * wo;
                for xo in 0..wo {
                    out[d + xo] = src[s + xo / factor];
                }
            }
        }
        let out = Tensor::new(&[c, ho, wo], out)?;
        self.push(out, Op::Upsample { x, factor }, "upsample_nearest")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose2()?;
        self.push(out, Op::Transpose(x), "transpose")
    }

    /// Columns `start..start+width` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = crate::tensor::dims2(xv)?;
        if start + width > n {
            return Err(dim_err!("slice_cols {start}+{width} of {n}"));
        }
        let mut out = Vec::with_capacity(m * width);
        for r in 0..m {
            out.extend_from_slice(&xv.data()[r * n + start..r * n + start + width]);
        }
        let out = Tensor::new(&[m, width], out)?;
        self.push(out, Op::SliceCols { x, start }, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pw) = crate::tensor::dims2(self.value(p))?;
            if pm != m {
                return Err(dim_err!("concat_cols: row counts {pm} vs {m}"));
            }
            widths.push(pw);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let d = self.value(p).data();
            for r in 0..m {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let out = Tensor::new(&[m, total], out)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Concatenation along the leading axis; trailing dims must agree.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(dim_err!("concat0: {:?} vs trailing {:?}", s, tail));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(&shape, data)?;
        self.push(out, Op::Concat0(parts.to_vec()), "concat0")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.sum() / T::lit(xv.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    /// Mean of squared differences.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err!("mse_loss: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let s: T = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let out = Tensor::scalar(s / T::lit(av.len() as f64));
        self.push(out, Op::Mse(a, b), "mse_loss")
    }

    /// Renders `coords[k, 2]` (x, y) as isotropic unit-peak Gaussians on a
    /// `k x h x w` grid whose pixel (r, c) sits at coordinate (c, r).
    pub fn gaussian_maps(&mut self, coords: Var, sigma: T, h: usize, w: usize) -> Result<Var> {
        if !(sigma > T::zero()) {
            return Err(Error::Argument("gaussian sigma must be > 0".into()));
        }
        let cv = self.value(coords);
        let (k, two) = crate::tensor::dims2(cv)?;
        if two != 2 {
            return Err(dim_err!("gaussian_maps: coords {:?}", cv.shape()));
        }
        let out = gaussian_values(cv.data(), k, sigma, h, w);
        self.push(out, Op::Gaussian { coords, sigma }, "gaussian_maps")
    }

    /// Sum of a list of scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut acc = *terms
            .first()
            .ok_or_else(|| Error::Argument("add_all of nothing".into()))?;
        for &t in &terms[1..] {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }
}

pub(crate) fn softmax_values<T: Scalar>(xv: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(xv.shape(), axis);
    let xd = xv.data();
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for inn in 0..inner {
            let base = o * len * inner + inn;
            let mut mx = T::neg_infinity();
            for l in 0..len {
                mx = mx.max(xd[base + l * inner]);
            }
            let mut z = T::zero();
            for l in 0..len {
                let e = (xd[base + l * inner] - mx).exp();
                out[base + l * inner] = e;
                z += e;
            }
            for l in 0..len {
                out[base + l * inner] /= z;
            }
        }
    }
    Tensor::new(xv.shape(), out).expect("same shape")
}

pub(crate) fn gaussian_values<T: Scalar>(coords: &[T], k: usize, sigma: T, h: usize, w: usize) -> Tensor<T> {
    let inv = T::one() / (T::lit(2.0) * sigma * sigma);
    let mut out = vec![T::zero(); k * h * w];
    for j in 0..k {
        let (cx, cy) = (coords[2 * j], coords[2 * j + 1]);
        for r in 0..h {
            let dy = T::lit(r as f64) - cy;
            for c in 0..w {
                let dx = T::lit(c as f64) - cx;
                out[(j * h + r) * w + c] = (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    Tensor::new(&[k, h, w], out).expect("sized")
}
