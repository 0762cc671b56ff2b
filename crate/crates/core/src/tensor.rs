//! Dense row-major n-dimensional array.
//!
//! `Tensor` is plain data. Participation in differentiation happens by
//! placing a tensor on a [`Tape`](crate::tape::Tape), which hands back a
//! [`Var`](crate::tape::Var) node handle.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err!("shape {:?} needs {} elements, got {}", shape, n, data.len()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.gen_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    /// Element at a multi-index; panics when out of range.
    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: T) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        let mut o = 0;
        for (&i, &d) in idx.iter().zip(&self.shape) {
            assert!(i < d, "index {idx:?} out of range for {:?}", self.shape);
            o = o * d + i;
        }
        o
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(dim_err!("shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// In-place `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, b| if b > a { b } else { a })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::lit(x.to_f64_lossy())).collect(),
        }
    }

    /// Plain 2-D product, no tape involvement.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = dims2(self)?;
        let (k2, n) = dims2(other)?;
        if k != k2 {
            return Err(dim_err!("matmul inner dims {:?} x {:?}", self.shape, other.shape));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            k as isize,
            1,
            &other.data,
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        Tensor::new(&[m, n], out)
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (m, n) = dims2(self)?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(&[n, m], out)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().to_f64_lossy())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn dims2<T>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape[..] {
        [m, n] => Ok((m, n)),
        _ => Err(dim_err!("expected a 2-D tensor, got {:?}", t.shape)),
    }
}

pub(crate) fn dims3<T>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape[..] {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(dim_err!("expected a 3-D tensor, got {:?}", t.shape)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(t.at(&[0, 1, 0]), 4.0);
    }

    #[test]
    fn transpose_twice_is_identity() {
        let t = Tensor::<f64>::from_fn(&[3, 5], |i| i as f64 * 0.5);
        assert_eq!(t.transpose2().unwrap().transpose2().unwrap(), t);
    }
}
