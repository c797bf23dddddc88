//! Differentiable spatial linear maps.

use std::rc::Rc;

use super::Var;
use crate::resample::{apply_separable, apply_separable_t, SeparableMap};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<'t, T: Scalar> Var<'t, T> {
    /// `Mh · x · Mwᵀ` on every NCHW plane.
    pub fn separable(
        self,
        mh: Option<Rc<SeparableMap<T>>>,
        mw: Option<Rc<SeparableMap<T>>>,
    ) -> Var<'t, T> {
        let x = self.value();
        let y = apply_separable(&x, mh.as_deref(), mw.as_deref());
        let in_shape = x.shape().to_vec();
        self.tape.op(y, &[self], move |g, _| {
            vec![Some(apply_separable_t(g, &in_shape, mh.as_deref(), mw.as_deref()))]
        })
    }

    /// Integer translation per sample with zero fill:
    /// `out[n, :, y, x] = in[n, :, y - dy_n, x - dx_n]`.
    pub fn shift_per_sample(self, shifts: &[(isize, isize)]) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(shifts.len(), x.shape()[0], "one shift per sample");
        let y = shift_tensor(&x, shifts, 1);
        let shifts = shifts.to_vec();
        self.tape.op(y, &[self], move |g, _| vec![Some(shift_tensor(g, &shifts, -1))])
    }
}

fn shift_tensor<T: Scalar>(x: &Tensor<T>, shifts: &[(isize, isize)], sign: isize) -> Tensor<T> {
    let (_, c, h, w) = x.dims4();
    let mut out = vec![T::zero(); x.numel()];
    for (b, &(dy, dx)) in shifts.iter().enumerate() {
        let (dy, dx) = (dy * sign, dx * sign);
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for yy in 0..h as isize {
                let sy = yy - dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for xx in 0..w as isize {
                    let sx = xx - dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    out[base + yy as usize * w + xx as usize] = x.data()[base + sy as usize * w + sx as usize];
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
