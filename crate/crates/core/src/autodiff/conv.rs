//! 2-D convolution (cross-correlation) with zero padding.

use super::ops::{gemm_nn, gemm_nt, gemm_tn};
use super::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeometry {
    pub fn same(kernel: usize) -> Self {
        Self { stride: 1, pad: kernel / 2 }
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.pad - kernel) / self.stride + 1
    }
}

struct Dims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    s: usize,
    p: usize,
}

impl Dims {
    fn new(x: &[usize], w: &[usize], g: Conv2dGeometry) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be NCHW, got {x:?}");
        assert_eq!(w.len(), 4, "conv2d weight must be OCKK, got {w:?}");
        assert_eq!(x[1], w[1], "conv2d channel mismatch: input {x:?}, weight {w:?}");
        assert!(x[2] + 2 * g.pad >= w[2] && x[3] + 2 * g.pad >= w[3], "conv2d kernel larger than input");
        Self {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: w[0],
            kh: w[2],
            kw: w[3],
            oh: g.out_size(x[2], w[2]),
            ow: g.out_size(x[3], w[3]),
            s: g.stride,
            p: g.pad,
        }
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.s == 1 && self.p == 0
    }

    /// Valid output column range for kernel column `kx`.
    fn x_range(&self, kx: usize) -> (usize, usize) {
        // ix = x*s + kx - p in [0, w)
        let lo = if kx >= self.p { 0 } else { (self.p - kx).div_ceil(self.s) };
        let hi_num = self.w + self.p;
        let hi = if hi_num > kx { ((hi_num - kx - 1) / self.s + 1).min(self.ow) } else { 0 };
        (lo.min(hi), hi)
    }

    fn iy(&self, y: usize, ky: usize) -> Option<usize> {
        let v = (y * self.s + ky) as isize - self.p as isize;
        (v >= 0 && (v as usize) < self.h).then_some(v as usize)
    }
}

pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: Conv2dGeometry) -> Tensor<T> {
    let d = Dims::new(x.shape(), w.shape(), g);
    let mut out = vec![T::zero(); d.n * d.o * d.oh * d.ow];
    let (xd, wd) = (x.data(), w.data());
    if d.pointwise() {
        let hw = d.h * d.w;
        for n in 0..d.n {
            gemm_nn(d.o, hw, d.c, wd, &xd[n * d.c * hw..(n + 1) * d.c * hw], &mut out[n * d.o * hw..(n + 1) * d.o * hw]);
        }
        return Tensor::new(vec![d.n, d.o, d.oh, d.ow], out);
    }
    let ranges: Vec<(usize, usize)> = (0..d.kw).map(|kx| d.x_range(kx)).collect();
    for n in 0..d.n {
        for o in 0..d.o {
            let oplane = &mut out[(n * d.o + o) * d.oh * d.ow..(n * d.o + o + 1) * d.oh * d.ow];
            for c in 0..d.c {
                let iplane = &xd[(n * d.c + c) * d.h * d.w..(n * d.c + c + 1) * d.h * d.w];
                let wk = &wd[(o * d.c + c) * d.kh * d.kw..(o * d.c + c + 1) * d.kh * d.kw];
                for y in 0..d.oh {
                    let orow = &mut oplane[y * d.ow..(y + 1) * d.ow];
                    for ky in 0..d.kh {
                        let Some(iy) = d.iy(y, ky) else { continue };
                        let irow = &iplane[iy * d.w..(iy + 1) * d.w];
                        for kx in 0..d.kw {
                            let wv = wk[ky * d.kw + kx];
                            let (x0, x1) = ranges[kx];
                            if d.s == 1 {
                                let off = x0 + kx - d.p;
                                for (ov, &iv) in orow[x0..x1].iter_mut().zip(&irow[off..off + (x1 - x0)]) {
                                    *ov += wv * iv;
                                }
                            } else {
                                for x in x0..x1 {
                                    orow[x] += wv * irow[x * d.s + kx - d.p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![d.n, d.o, d.oh, d.ow], out)
}

fn conv2d_grad_input<T: Scalar>(gout: &Tensor<T>, w: &Tensor<T>, xshape: &[usize], g: Conv2dGeometry) -> Tensor<T> {
    let d = Dims::new(xshape, w.shape(), g);
    let mut gx = vec![T::zero(); d.n * d.c * d.h * d.w];
    let (gd, wd) = (gout.data(), w.data());
    if d.pointwise() {
        let hw = d.h * d.w;
        for n in 0..d.n {
            gemm_tn(d.c, hw, d.o, wd, &gd[n * d.o * hw..(n + 1) * d.o * hw], &mut gx[n * d.c * hw..(n + 1) * d.c * hw]);
        }
        return Tensor::new(xshape.to_vec(), gx);
    }
    let ranges: Vec<(usize, usize)> = (0..d.kw).map(|kx| d.x_range(kx)).collect();
    for n in 0..d.n {
        for o in 0..d.o {
            let gplane = &gd[(n * d.o + o) * d.oh * d.ow..(n * d.o + o + 1) * d.oh * d.ow];
            for c in 0..d.c {
                let iplane = &mut gx[(n * d.c + c) * d.h * d.w..(n * d.c + c + 1) * d.h * d.w];
                let wk = &wd[(o * d.c + c) * d.kh * d.kw..(o * d.c + c + 1) * d.kh * d.kw];
                for y in 0..d.oh {
                    let grow = &gplane[y * d.ow..(y + 1) * d.ow];
                    for ky in 0..d.kh {
                        let Some(iy) = d.iy(y, ky) else { continue };
                        let irow = &mut iplane[iy * d.w..(iy + 1) * d.w];
                        for kx in 0..d.kw {
                            let wv = wk[ky * d.kw + kx];
                            let (x0, x1) = ranges[kx];
                            if d.s == 1 {
                                let off = x0 + kx - d.p;
                                for (iv, &gv) in irow[off..off + (x1 - x0)].iter_mut().zip(&grow[x0..x1]) {
                                    *iv += wv * gv;
                                }
                            } else {
                                for x in x0..x1 {
                                    irow[x * d.s + kx - d.p] += wv * grow[x];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(xshape.to_vec(), gx)
}

fn conv2d_grad_weight<T: Scalar>(gout: &Tensor<T>, x: &Tensor<T>, wshape: &[usize], g: Conv2dGeometry) -> Tensor<T> {
    let d = Dims::new(x.shape(), wshape, g);
    let mut gw = vec![T::zero(); d.o * d.c * d.kh * d.kw];
    let (gd, xd) = (gout.data(), x.data());
    if d.pointwise() {
        let hw = d.h * d.w;
        for n in 0..d.n {
            gemm_nt(d.o, d.c, hw, &gd[n * d.o * hw..(n + 1) * d.o * hw], &xd[n * d.c * hw..(n + 1) * d.c * hw], &mut gw);
        }
        return Tensor::new(wshape.to_vec(), gw);
    }
    let ranges: Vec<(usize, usize)> = (0..d.kw).map(|kx| d.x_range(kx)).collect();
    for n in 0..d.n {
        for o in 0..d.o {
            let gplane = &gd[(n * d.o + o) * d.oh * d.ow..(n * d.o + o + 1) * d.oh * d.ow];
            for c in 0..d.c {
                let iplane = &xd[(n * d.c + c) * d.h * d.w..(n * d.c + c + 1) * d.h * d.w];
                let wk = &mut gw[(o * d.c + c) * d.kh * d.kw..(o * d.c + c + 1) * d.kh * d.kw];
                for y in 0..d.oh {
                    let grow = &gplane[y * d.ow..(y + 1) * d.ow];
                    for ky in 0..d.kh {
                        let Some(iy) = d.iy(y, ky) else { continue };
                        let irow = &iplane[iy * d.w..(iy + 1) * d.w];
                        for kx in 0..d.kw {
                            let (x0, x1) = ranges[kx];
                            let mut s = T::zero();
                            if d.s == 1 {
                                let off = x0 + kx - d.p;
                                for (&iv, &gv) in irow[off..off + (x1 - x0)].iter().zip(&grow[x0..x1]) {
                                    s += iv * gv;
                                }
                            } else {
                                for x in x0..x1 {
                                    s += irow[x * d.s + kx - d.p] * grow[x];
                                }
                            }
                            wk[ky * d.kw + kx] += s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(wshape.to_vec(), gw)
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Cross-correlation of an NCHW input with an OCKK kernel.
    pub fn conv2d(self, weight: Var<'t, T>, g: Conv2dGeometry) -> Var<'t, T> {
        let x = self.value();
        let w = weight.value();
        let y = conv2d_forward(&x, &w, g);
        self.tape.op(y, &[self, weight], move |gout, needs| {
            let gx = needs[0].then(|| conv2d_grad_input(gout, &w, x.shape(), g));
            let gw = needs[1].then(|| conv2d_grad_weight(gout, &x, w.shape(), g));
            vec![gx, gw]
        })
    }
}
