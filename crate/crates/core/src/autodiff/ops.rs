//! Elementwise, reduction, shape and matrix operations.

use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use super::{Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{broadcast_zip, numel, strides, Tensor};

// ---------------------------------------------------------------------------
// dense matrix kernels

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
pub(crate) fn gemm_tn<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

pub fn matmul_tensors<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    assert_eq!(k, k2, "matmul inner dimension mismatch");
    let mut c = vec![T::zero(); m * n];
    gemm_nn(m, n, k, a.data(), b.data(), &mut c);
    Tensor::new(vec![m, n], c)
}

// ---------------------------------------------------------------------------

impl<'t, T: Scalar> Var<'t, T> {
    fn unary(
        self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'t, T> {
        let x = self.value();
        let y = x.map(f);
        let yv = Rc::new(y.clone());
        self.tape.op(y, &[self], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(yv.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data))]
        })
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        self.unary(move |x| x + s, |_, _| T::one())
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.unary(|x| x.sqrt(), |_, y| T::lit(0.5) / y)
    }

    pub fn rsqrt(self) -> Var<'t, T> {
        self.unary(|x| x.sqrt().recip(), |x, y| T::lit(-0.5) * y / x)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'t, T> {
        self.unary(|x| x.ln(), |x, _| x.recip())
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(|x| T::one() / (T::one() + (-x).exp()), |_, y| y * (T::one() - y))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(self) -> Var<'t, T> {
        self.unary(softplus, |x, _| T::one() / (T::one() + (-x).exp()))
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(|x| x.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    /// Leaky ReLU followed by a constant gain.
    pub fn leaky_relu(self, slope: T, gain: T) -> Var<'t, T> {
        self.unary(
            move |x| if x >= T::zero() { x * gain } else { x * slope * gain },
            move |x, _| if x >= T::zero() { gain } else { slope * gain },
        )
    }

    fn binary(
        self,
        other: Var<'t, T>,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T, T) -> T + 'static,
        db: impl Fn(T, T, T) -> T + 'static,
    ) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let y = broadcast_zip(&a, &b, f)?;
        let out_shape = y.shape().to_vec();
        Ok(self.tape.op(y, &[self, other], move |g, needs| {
            let ab = a.broadcast_to(&out_shape);
            let bb = b.broadcast_to(&out_shape);
            let ga = needs[0].then(|| {
                let full = Tensor::new(
                    out_shape.clone(),
                    g.data()
                        .iter()
                        .zip(ab.data().iter().zip(bb.data()))
                        .map(|(&g, (&x, &y))| da(g, x, y))
                        .collect(),
                );
                full.reduce_to(a.shape())
            });
            let gb = needs[1].then(|| {
                let full = Tensor::new(
                    out_shape.clone(),
                    g.data()
                        .iter()
                        .zip(ab.data().iter().zip(bb.data()))
                        .map(|(&g, (&x, &y))| db(g, x, y))
                        .collect(),
                );
                full.reduce_to(b.shape())
            });
            vec![ga, gb]
        }))
    }

    pub fn try_add(self, o: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(o, |a, b| a + b, |g, _, _| g, |g, _, _| g)
    }

    pub fn try_sub(self, o: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(o, |a, b| a - b, |g, _, _| g, |g, _, _| -g)
    }

    pub fn try_mul(self, o: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(o, |a, b| a * b, |g, _, b| g * b, |g, a, _| g * a)
    }

    pub fn try_div(self, o: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(o, |a, b| a / b, |g, _, b| g / b, |g, a, b| -g * a / (b * b))
    }

    /// Maximum with another tensor (subgradient goes to the larger operand).
    pub fn maximum(self, o: Var<'t, T>) -> Var<'t, T> {
        self.binary(
            o,
            |a, b| a.max(b),
            |g, a, b| if a >= b { g } else { T::zero() },
            |g, a, b| if a >= b { T::zero() } else { g },
        )
        .expect("maximum: incompatible shapes")
    }

    // ------------------------------------------------------------------ reductions

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let s = x.sum();
        self.tape.op(Tensor::scalar(s), &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = T::from_usize_lossy(numel(&self.shape()).max(1));
        self.sum().scale(T::one() / n)
    }

    /// Sum over one axis.
    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(axis < shape.len(), "sum_axis axis {axis} for shape {shape:?}");
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        let xd = x.data();
        for o in 0..outer {
            for a in 0..len {
                let src = &xd[(o * len + a) * inner..(o * len + a + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut oshape = shape.clone();
        if keepdim {
            oshape[axis] = 1;
        } else {
            oshape.remove(axis);
        }
        self.tape.op(Tensor::new(oshape, out), &[self], move |g, _| {
            let gd = g.data();
            let mut gx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for a in 0..len {
                    gx[(o * len + a) * inner..(o * len + a + 1) * inner]
                        .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::new(shape.clone(), gx))]
        })
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Var<'t, T> {
        let n = self.shape()[axis];
        self.sum_axis(axis, keepdim).scale(T::one() / T::from_usize_lossy(n))
    }

    /// Mean over every axis except the first; returns shape `[n]`.
    pub fn mean_per_sample(self) -> Var<'t, T> {
        let shape = self.shape();
        let n = shape[0];
        let rest = numel(&shape[1..]);
        self.reshape(&[n, rest]).mean_axis(1, false)
    }

    // ------------------------------------------------------------------ shapes

    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = (*x).clone().reshape(shape);
        self.tape.op(y, &[self], move |g, _| vec![Some(g.clone().reshape(&old))])
    }

    pub fn permute(self, perm: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let y = permute_tensor(&x, perm);
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.tape.op(y, &[self], move |g, _| vec![Some(permute_tensor(g, &inv))])
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let full = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        self.tape.op(Tensor::new(oshape, out), &[self], move |g, _| {
            let mut gx = vec![T::zero(); numel(&shape)];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx[base..base + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(shape.clone(), gx))]
        })
    }

    /// Rows `indices` of axis 0 (repeats allowed).
    pub fn gather_rows(self, indices: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let inner: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            assert!(i < shape[0], "gather_rows index {i} out of range {}", shape[0]);
            out.extend_from_slice(&x.data()[i * inner..(i + 1) * inner]);
        }
        let mut oshape = shape.clone();
        oshape[0] = indices.len();
        let idx = indices.to_vec();
        self.tape.op(Tensor::new(oshape, out), &[self], move |g, _| {
            let mut gx = vec![T::zero(); numel(&shape)];
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..inner {
                    gx[i * inner + j] += g.data()[r * inner + j];
                }
            }
            vec![Some(Tensor::new(shape.clone(), gx))]
        })
    }

    // ------------------------------------------------------------------ matrices

    /// `[m,k] x [k,n]`
    pub fn matmul(self, other: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        let (m, k) = a.dims2();
        let (k2, n) = b.dims2();
        assert_eq!(k, k2, "matmul {:?} x {:?}", a.shape(), b.shape());
        let mut c = vec![T::zero(); m * n];
        gemm_nn(m, n, k, a.data(), b.data(), &mut c);
        self.tape.op(Tensor::new(vec![m, n], c), &[self, other], move |g, needs| {
            let ga = needs[0].then(|| {
                let mut d = vec![T::zero(); m * k];
                gemm_nt(m, k, n, g.data(), b.data(), &mut d);
                Tensor::new(vec![m, k], d)
            });
            let gb = needs[1].then(|| {
                let mut d = vec![T::zero(); k * n];
                gemm_tn(k, n, m, a.data(), g.data(), &mut d);
                Tensor::new(vec![k, n], d)
            });
            vec![ga, gb]
        })
    }

    /// Batched `[b,m,k] x [b,k,n]`
    pub fn bmm(self, other: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (bs2, k2, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
        assert!(bs == bs2 && k == k2, "bmm {:?} x {:?}", a.shape(), b.shape());
        let mut c = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            gemm_nn(
                m,
                n,
                k,
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                &mut c[i * m * n..(i + 1) * m * n],
            );
        }
        self.tape.op(Tensor::new(vec![bs, m, n], c), &[self, other], move |g, needs| {
            let gd = g.data();
            let ga = needs[0].then(|| {
                let mut d = vec![T::zero(); bs * m * k];
                for i in 0..bs {
                    gemm_nt(
                        m,
                        k,
                        n,
                        &gd[i * m * n..(i + 1) * m * n],
                        &b.data()[i * k * n..(i + 1) * k * n],
                        &mut d[i * m * k..(i + 1) * m * k],
                    );
                }
                Tensor::new(vec![bs, m, k], d)
            });
            let gb = needs[1].then(|| {
                let mut d = vec![T::zero(); bs * k * n];
                for i in 0..bs {
                    gemm_tn(
                        k,
                        n,
                        m,
                        &a.data()[i * m * k..(i + 1) * m * k],
                        &gd[i * m * n..(i + 1) * m * n],
                        &mut d[i * k * n..(i + 1) * k * n],
                    );
                }
                Tensor::new(vec![bs, k, n], d)
            });
            vec![ga, gb]
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let c = *shape.last().expect("log_softmax of scalar");
        let rows = x.numel() / c;
        let mut y = vec![T::zero(); x.numel()];
        for r in 0..rows {
            let xs = &x.data()[r * c..(r + 1) * c];
            let m = xs.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + xs.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for j in 0..c {
                y[r * c + j] = xs[j] - lse;
            }
        }
        let yt = Tensor::new(shape.clone(), y);
        let yv = Rc::new(yt.clone());
        self.tape.op(yt, &[self], move |g, _| {
            let mut gx = vec![T::zero(); g.numel()];
            for r in 0..rows {
                let gs = &g.data()[r * c..(r + 1) * c];
                let total: T = gs.iter().copied().sum();
                for j in 0..c {
                    gx[r * c + j] = gs[j] - yv.data()[r * c + j].exp() * total;
                }
            }
            vec![Some(Tensor::new(shape.clone(), gx))]
        })
    }

    pub fn softmax(self) -> Var<'t, T> {
        self.log_softmax().exp()
    }
}

/// Concatenate along `axis`.
pub fn concat<'t, T: Scalar>(vars: &[Var<'t, T>], axis: usize) -> Var<'t, T> {
    assert!(!vars.is_empty(), "concat of nothing");
    let tape: &'t Tape<T> = vars[0].tape;
    let values: Vec<_> = vars.iter().map(|v| v.value()).collect();
    let base = values[0].shape().to_vec();
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let lens: Vec<usize> = values
        .iter()
        .map(|v| {
            let s = v.shape();
            assert!(
                s.len() == base.len()
                    && s[..axis] == base[..axis]
                    && s[axis + 1..] == base[axis + 1..],
                "concat shape mismatch {s:?} vs {base:?}"
            );
            s[axis]
        })
        .collect();
    let total: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &l) in values.iter().zip(&lens) {
            out.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
        }
    }
    let mut oshape = base.clone();
    oshape[axis] = total;
    tape.op(Tensor::new(oshape, out), vars, move |g, needs| {
        let mut grads: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
        let mut off = 0;
        for _ in 0..outer {
            for (k, &l) in lens.iter().enumerate() {
                grads[k].extend_from_slice(&g.data()[off..off + l * inner]);
                off += l * inner;
            }
        }
        grads
            .into_iter()
            .zip(&lens)
            .zip(needs)
            .map(|((d, &l), &need)| {
                need.then(|| {
                    let mut s = base.clone();
                    s[axis] = l;
                    Tensor::new(s, d)
                })
            })
            .collect()
    })
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn permute_tensor<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    assert_eq!(perm.len(), shape.len(), "permute rank mismatch");
    let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let istr = strides(shape);
    let n = oshape.len();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; n];
    for _ in 0..x.numel() {
        let mut o = 0;
        for d in 0..n {
            o += idx[d] * istr[perm[d]];
        }
        out.push(x.data()[o]);
        for d in (0..n).rev() {
            idx[d] += 1;
            if idx[d] < oshape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(oshape, out)
}

impl<'t, T: Scalar> Add for Var<'t, T> {
    type Output = Var<'t, T>;
    fn add(self, o: Self) -> Self {
        self.try_add(o).expect("add: incompatible shapes")
    }
}

impl<'t, T: Scalar> Sub for Var<'t, T> {
    type Output = Var<'t, T>;
    fn sub(self, o: Self) -> Self {
        self.try_sub(o).expect("sub: incompatible shapes")
    }
}

impl<'t, T: Scalar> Mul for Var<'t, T> {
    type Output = Var<'t, T>;
    fn mul(self, o: Self) -> Self {
        self.try_mul(o).expect("mul: incompatible shapes")
    }
}

impl<'t, T: Scalar> Div for Var<'t, T> {
    type Output = Var<'t, T>;
    fn div(self, o: Self) -> Self {
        self.try_div(o).expect("div: incompatible shapes")
    }
}

impl<'t, T: Scalar> Neg for Var<'t, T> {
    type Output = Var<'t, T>;
    fn neg(self) -> Self {
        self.scale(-T::one())
    }
}

