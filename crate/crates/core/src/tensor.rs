//! Dense row-major tensors.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Contiguous row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// NumPy-style broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}")));
        };
    }
    Ok(out)
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn try_new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Self { shape: shape.to_vec(), data: (0..numel(shape)).map(&mut f).collect() }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Self {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::lit(v)).collect())
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let v: f64 = StandardNormal.sample(rng);
            T::lit(v * std)
        })
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.random_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected rank-4 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected rank-2 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut o = 0;
        for (i, (&ix, &d)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {idx:?} out of bounds for axis {i} of {:?}", self.shape);
            o = o * d + ix;
        }
        o
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), self.data.len(), "reshape {:?} -> {shape:?}", self.shape);
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize_lossy(self.data.len().max(1))
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn norm(&self) -> T {
        self.sq_norm().sqrt()
    }

    pub fn dot(&self, other: &Self) -> T {
        assert_eq!(self.numel(), other.numel(), "dot length mismatch");
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    /// Sub-tensor `[start, start+len)` along axis 0.
    pub fn slice_outer(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.shape[0], "slice_outer out of range");
        let inner = numel(&self.shape[1..]);
        let mut shape = self.shape.clone();
        shape[0] = len;
        Self { shape, data: self.data[start * inner..(start + len) * inner].to_vec() }
    }

    /// Concatenate along axis 0.
    pub fn stack_outer(parts: &[Self]) -> Self {
        assert!(!parts.is_empty(), "stack_outer of nothing");
        let inner = &parts[0].shape[1..];
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            assert_eq!(&p.shape[1..], inner, "stack_outer inner shape mismatch");
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = parts[0].shape.clone();
        shape[0] = n;
        Self { shape, data }
    }

    /// Sum-reduce a broadcast result back to `target` shape.
    pub fn reduce_to(&self, target: &[usize]) -> Self {
        if self.shape == target {
            return self.clone();
        }
        let n = self.shape.len();
        let pad = n - target.len();
        let full_target: Vec<usize> =
            (0..n).map(|i| if i < pad { 1 } else { target[i - pad] }).collect();
        let tstr = strides(&full_target);
        let mut out = vec![T::zero(); numel(target)];
        let mut idx = vec![0usize; n];
        for &v in &self.data {
            let mut o = 0;
            for d in 0..n {
                if full_target[d] != 1 {
                    o += idx[d] * tstr[d];
                }
            }
            out[o] += v;
            for d in (0..n).rev() {
                idx[d] += 1;
                if idx[d] < self.shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Self { shape: target.to_vec(), data: out }
    }

    /// Materialize a broadcast of `self` to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Self {
        if self.shape == shape {
            return self.clone();
        }
        let n = shape.len();
        let pad = n - self.shape.len();
        let src_shape: Vec<usize> =
            (0..n).map(|i| if i < pad { 1 } else { self.shape[i - pad] }).collect();
        let sstr = strides(&src_shape);
        let mut data = Vec::with_capacity(numel(shape));
        let mut idx = vec![0usize; n];
        for _ in 0..numel(shape) {
            let mut o = 0;
            for d in 0..n {
                if src_shape[d] != 1 {
                    o += idx[d] * sstr[d];
                }
            }
            data.push(self.data[o]);
            for d in (0..n).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Self { shape: shape.to_vec(), data }
    }

    /// Bitwise equality of contents and shape.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(&other.data).all(|(a, b)| {
                let (mut ba, mut bb) = (Vec::new(), Vec::new());
                a.to_le_bytes_vec(&mut ba);
                b.to_le_bytes_vec(&mut bb);
                ba == bb
            })
    }
}

/// Elementwise binary op with broadcasting.
pub fn broadcast_zip<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        return Ok(a.zip_map(b, f));
    }
    if b.numel() == 1 {
        let s = b.data[0];
        let shape = broadcast_shapes(&a.shape, &b.shape)?;
        return Ok(Tensor { shape, data: a.data.iter().map(|&x| f(x, s)).collect() });
    }
    if a.numel() == 1 {
        let s = a.data[0];
        let shape = broadcast_shapes(&a.shape, &b.shape)?;
        return Ok(Tensor { shape, data: b.data.iter().map(|&y| f(s, y)).collect() });
    }
    let shape = broadcast_shapes(&a.shape, &b.shape)?;
    let n = shape.len();
    let pa: Vec<usize> =
        (0..n).map(|i| if i < n - a.shape.len() { 1 } else { a.shape[i - (n - a.shape.len())] }).collect();
    let pb: Vec<usize> =
        (0..n).map(|i| if i < n - b.shape.len() { 1 } else { b.shape[i - (n - b.shape.len())] }).collect();
    let sa = strides(&pa);
    let sb = strides(&pb);
    let total = numel(&shape);
    let inner = shape[n - 1];
    let ia = if pa[n - 1] == 1 { 0 } else { 1 };
    let ib = if pb[n - 1] == 1 { 0 } else { 1 };
    let mut data = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut done = 0;
    while done < total {
        let mut oa = 0;
        let mut ob = 0;
        for d in 0..n - 1 {
            if pa[d] != 1 {
                oa += idx[d] * sa[d];
            }
            if pb[d] != 1 {
                ob += idx[d] * sb[d];
            }
        }
        for j in 0..inner {
            data.push(f(a.data[oa + j * ia], b.data[ob + j * ib]));
        }
        done += inner;
        for d in (0..n - 1).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(Tensor { shape, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_and_reduce_are_adjoint_in_shape() {
        let a = Tensor::<f64>::from_f64(&[2, 1, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = Tensor::<f64>::from_f64(&[4, 1], &[10., 20., 30., 40.]);
        let c = broadcast_zip(&a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.shape(), &[2, 4, 3]);
        assert_eq!(c.at(&[1, 2, 0]), 34.0);
        let r = c.reduce_to(&[4, 1]);
        // each b entry appears 6 times; a sum = 21
        assert_eq!(r.at(&[0, 0]), 6.0 * 10.0 + 21.0);
    }

    #[test]
    fn incompatible_shapes_error() {
        assert!(broadcast_shapes(&[3, 2], &[4, 2]).is_err());
    }

    #[test]
    fn broadcast_to_repeats_rows() {
        let a = Tensor::<f32>::from_f64(&[1, 2], &[1., 2.]);
        let b = a.broadcast_to(&[3, 2]);
        assert_eq!(b.data(), &[1., 2., 1., 2., 1., 2.]);
    }
}
