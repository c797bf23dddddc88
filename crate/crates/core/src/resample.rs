//! Banded linear maps applied separably along the two spatial axes.
//!
//! Every spatial linear operation in the crate (anti-aliased up/down
//! sampling, bilinear resizing, Gaussian blur, translation) is a
//! [`SeparableMap`] per axis: row `i` of the map reads a contiguous window
//! of input samples starting at `start[i]`.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SeparableMap<T> {
    in_len: usize,
    starts: Vec<usize>,
    weights: Vec<Vec<T>>,
}

/// Physical sampling lattice along one axis: `len` samples at `rate` samples
/// per unit, sample `j` centred at `origin + j / rate`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lattice {
    pub rate: f64,
    pub origin: f64,
    pub len: usize,
}

impl Lattice {
    /// Lattice covering `[-extent/2 - margin/rate, extent/2 + margin/rate]`
    /// with `rate * extent + 2 * margin` samples.
    pub fn centered(rate: f64, extent: f64, margin: usize) -> Self {
        let core = (rate * extent).round() as usize;
        let len = core + 2 * margin;
        let origin = -(len as f64) / (2.0 * rate) + 0.5 / rate;
        Self { rate, origin, len }
    }

    pub fn position(&self, j: usize) -> f64 {
        self.origin + j as f64 / self.rate
    }
}

impl<T: Scalar> SeparableMap<T> {
    pub fn from_rows(in_len: usize, rows: Vec<(usize, Vec<T>)>) -> Self {
        let mut starts = Vec::with_capacity(rows.len());
        let mut weights = Vec::with_capacity(rows.len());
        for (s, w) in rows {
            assert!(s + w.len() <= in_len, "separable map row exceeds input length");
            starts.push(s);
            weights.push(w);
        }
        Self { in_len, starts, weights }
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let in_len = rows.first().map_or(0, |r| r.len());
        let mut out = Vec::new();
        for r in rows {
            let first = r.iter().position(|&v| v != 0.0).unwrap_or(0);
            let last = r.iter().rposition(|&v| v != 0.0).map_or(first, |l| l + 1);
            out.push((first, r[first..last.max(first)].iter().map(|&v| T::lit(v)).collect()));
        }
        Self::from_rows(in_len, out)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_rows(n, (0..n).map(|i| (i, vec![T::one()])).collect())
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.starts.len()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.out_len())
            .map(|i| {
                let mut r = vec![0.0; self.in_len];
                for (k, w) in self.weights[i].iter().enumerate() {
                    r[self.starts[i] + k] = w.f64();
                }
                r
            })
            .collect()
    }

    pub fn row(&self, i: usize) -> (usize, &[T]) {
        (self.starts[i], &self.weights[i])
    }

    /// Bilinear resize with half-pixel centres (`align_corners = false`).
    pub fn bilinear(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let rows = (0..out_len)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                let f = src - i0 as f64;
                if i1 == i0 {
                    (i0, vec![T::one()])
                } else {
                    (i0, vec![T::lit(1.0 - f), T::lit(f)])
                }
            })
            .collect();
        Self::from_rows(in_len, rows)
    }

    /// Gaussian blur, weights renormalized over in-range taps so constants
    /// are preserved exactly at the borders.
    pub fn gaussian(len: usize, sigma: f64) -> Self {
        if sigma <= 0.0 {
            return Self::identity(len);
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let rows = (0..len as isize)
            .map(|i| {
                let lo = (i - radius).max(0);
                let hi = (i + radius).min(len as isize - 1);
                let w: Vec<f64> =
                    (lo..=hi).map(|j| (-((j - i) as f64).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
                let s: f64 = w.iter().sum();
                (lo as usize, w.iter().map(|&v| T::lit(v / s)).collect())
            })
            .collect();
        Self::from_rows(len, rows)
    }

    /// Integer shift with zero fill: `out[i] = in[i - shift]`.
    pub fn shift(len: usize, shift: isize) -> Self {
        let rows = (0..len as isize)
            .map(|i| {
                let j = i - shift;
                if j >= 0 && j < len as isize {
                    (j as usize, vec![T::one()])
                } else {
                    (0, vec![])
                }
            })
            .collect();
        Self::from_rows(len, rows)
    }

    /// Resample between two lattices with a continuous kernel `h(t)` of
    /// support radius `radius` (physical units). Each row is normalized by
    /// the kernel sum over the unbounded source lattice, so taps that fall
    /// outside the source act as zero padding.
    pub fn from_kernel(src: &Lattice, dst: &Lattice, radius: f64, h: impl Fn(f64) -> f64) -> Self {
        let rows = (0..dst.len)
            .map(|i| {
                let y = dst.position(i);
                let jlo = ((y - radius - src.origin) * src.rate).ceil() as isize;
                let jhi = ((y + radius - src.origin) * src.rate).floor() as isize;
                let mut total = 0.0;
                let mut taps = Vec::new();
                for j in jlo..=jhi {
                    let x = src.origin + j as f64 / src.rate;
                    let v = h(y - x);
                    total += v;
                    taps.push((j, v));
                }
                let lo = taps.iter().map(|t| t.0).filter(|&j| j >= 0).min().unwrap_or(0).max(0) as usize;
                let hi = taps
                    .iter()
                    .map(|t| t.0)
                    .filter(|&j| j < src.len as isize)
                    .max()
                    .map_or(lo, |m| m as usize + 1)
                    .max(lo);
                let mut w = vec![T::zero(); hi - lo];
                if total.abs() > 1e-300 {
                    for (j, v) in taps {
                        if j >= lo as isize && (j as usize) < hi {
                            w[j as usize - lo] = T::lit(v / total);
                        }
                    }
                }
                (lo, w)
            })
            .collect();
        Self::from_rows(src.len, rows)
    }

    /// Nearest-neighbour resampling (aliasing, no low-pass).
    pub fn nearest(src: &Lattice, dst: &Lattice) -> Self {
        let rows = (0..dst.len)
            .map(|i| {
                let y = dst.position(i);
                let j = ((y - src.origin) * src.rate).round();
                if j >= 0.0 && (j as usize) < src.len {
                    (j as usize, vec![T::one()])
                } else {
                    (0, vec![])
                }
            })
            .collect();
        Self::from_rows(src.len, rows)
    }

    /// Apply along the last axis of a tensor viewed as `[rows, in_len]`.
    pub fn apply_last(&self, x: &[T], rows: usize, out: &mut [T]) {
        let (n_in, n_out) = (self.in_len, self.out_len());
        for r in 0..rows {
            let xr = &x[r * n_in..(r + 1) * n_in];
            let orow = &mut out[r * n_out..(r + 1) * n_out];
            for (i, o) in orow.iter_mut().enumerate() {
                let s = self.starts[i];
                let mut acc = T::zero();
                for (&w, &v) in self.weights[i].iter().zip(&xr[s..]) {
                    acc += w * v;
                }
                *o = acc;
            }
        }
    }

    /// Transpose of [`apply_last`](Self::apply_last).
    pub fn apply_last_t(&self, g: &[T], rows: usize, out: &mut [T]) {
        let (n_in, n_out) = (self.in_len, self.out_len());
        for r in 0..rows {
            let gr = &g[r * n_out..(r + 1) * n_out];
            let orow = &mut out[r * n_in..(r + 1) * n_in];
            for (i, &gv) in gr.iter().enumerate() {
                let s = self.starts[i];
                for (o, &w) in orow[s..].iter_mut().zip(&self.weights[i]) {
                    *o += w * gv;
                }
            }
        }
    }

    /// Apply along the middle axis of `[planes, in_len, cols]`.
    pub fn apply_mid(&self, x: &[T], planes: usize, cols: usize, out: &mut [T]) {
        let (n_in, n_out) = (self.in_len, self.out_len());
        for p in 0..planes {
            let xp = &x[p * n_in * cols..(p + 1) * n_in * cols];
            let op = &mut out[p * n_out * cols..(p + 1) * n_out * cols];
            for i in 0..n_out {
                let orow = &mut op[i * cols..(i + 1) * cols];
                let s = self.starts[i];
                for (k, &w) in self.weights[i].iter().enumerate() {
                    let xr = &xp[(s + k) * cols..(s + k + 1) * cols];
                    for (o, &v) in orow.iter_mut().zip(xr) {
                        *o += w * v;
                    }
                }
            }
        }
    }

    /// Transpose of [`apply_mid`](Self::apply_mid).
    pub fn apply_mid_t(&self, g: &[T], planes: usize, cols: usize, out: &mut [T]) {
        let (n_in, n_out) = (self.in_len, self.out_len());
        for p in 0..planes {
            let gp = &g[p * n_out * cols..(p + 1) * n_out * cols];
            let op = &mut out[p * n_in * cols..(p + 1) * n_in * cols];
            for i in 0..n_out {
                let grow = &gp[i * cols..(i + 1) * cols];
                let s = self.starts[i];
                for (k, &w) in self.weights[i].iter().enumerate() {
                    let orow = &mut op[(s + k) * cols..(s + k + 1) * cols];
                    for (o, &v) in orow.iter_mut().zip(grow) {
                        *o += w * v;
                    }
                }
            }
        }
    }
}

/// `y = Mh · x · Mwᵀ` for every plane of an NCHW tensor. `None` leaves that
/// axis untouched.
pub fn apply_separable<T: Scalar>(
    x: &Tensor<T>,
    mh: Option<&SeparableMap<T>>,
    mw: Option<&SeparableMap<T>>,
) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let planes = n * c;
    let mut cur = x.data().to_vec();
    let mut cw = w;
    if let Some(m) = mw {
        assert_eq!(m.in_len(), w, "width map expects {} columns, got {w}", m.in_len());
        let mut out = vec![T::zero(); planes * h * m.out_len()];
        m.apply_last(&cur, planes * h, &mut out);
        cur = out;
        cw = m.out_len();
    }
    let mut ch = h;
    if let Some(m) = mh {
        assert_eq!(m.in_len(), h, "height map expects {} rows, got {h}", m.in_len());
        let mut out = vec![T::zero(); planes * m.out_len() * cw];
        m.apply_mid(&cur, planes, cw, &mut out);
        cur = out;
        ch = m.out_len();
    }
    Tensor::new(vec![n, c, ch, cw], cur)
}

/// Adjoint of [`apply_separable`].
pub fn apply_separable_t<T: Scalar>(
    g: &Tensor<T>,
    in_shape: &[usize],
    mh: Option<&SeparableMap<T>>,
    mw: Option<&SeparableMap<T>>,
) -> Tensor<T> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let planes = n * c;
    let (_, _, gh, gw) = g.dims4();
    let mut cur = g.data().to_vec();
    if let Some(m) = mh {
        let mut out = vec![T::zero(); planes * h * gw];
        m.apply_mid_t(&cur, planes, gw, &mut out);
        cur = out;
    } else {
        debug_assert_eq!(gh, h);
    }
    if let Some(m) = mw {
        let mut out = vec![T::zero(); planes * h * w];
        m.apply_last_t(&cur, planes * h, &mut out);
        cur = out;
    }
    Tensor::new(in_shape.to_vec(), cur)
}

/// Modified Bessel function of the first kind, order zero.
pub fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Kaiser window shape parameter for a filter with `numtaps` taps and a
/// transition width given as a fraction of the Nyquist frequency.
pub fn kaiser_beta(numtaps: usize, width_over_nyquist: f64) -> f64 {
    let atten = 2.285 * (numtaps.saturating_sub(1)) as f64 * std::f64::consts::PI * width_over_nyquist + 7.95;
    if atten > 50.0 {
        0.1102 * (atten - 8.7)
    } else if atten > 21.0 {
        0.5842 * (atten - 21.0).powf(0.4) + 0.07886 * (atten - 21.0)
    } else {
        0.0
    }
}

pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Kaiser-windowed sinc low-pass kernel in continuous coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowedSinc {
    pub cutoff: f64,
    pub radius: f64,
    pub beta: f64,
}

impl WindowedSinc {
    /// Filter designed at sampling rate `fs` with `numtaps` taps, cutoff
    /// `cutoff` and transition half-width `half_width` (all in cycles/unit).
    pub fn design(fs: f64, numtaps: usize, cutoff: f64, half_width: f64) -> Self {
        let beta = kaiser_beta(numtaps, (2.0 * half_width) / (fs / 2.0));
        Self { cutoff, radius: numtaps as f64 / (2.0 * fs), beta }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let r = t / self.radius;
        if r.abs() >= 1.0 {
            return 0.0;
        }
        let window = bessel_i0(self.beta * (1.0 - r * r).sqrt()) / bessel_i0(self.beta);
        2.0 * self.cutoff * sinc(2.0 * self.cutoff * t) * window
    }
}
