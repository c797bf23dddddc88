//! Evaluation metrics: Fréchet distance, inception score, k-NN
//! precision/recall, translation equivariance and PSNR.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{translate_input_grid, Generator};
use crate::linalg::{matmul_square, psd_sqrt, symmetric_eigen};
use crate::resample::{Lattice, SeparableMap, WindowedSinc};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Mean and biased (1/n) covariance of a feature set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct FeatureStatistics<T: Scalar> {
    pub mean: Vec<T>,
    /// Row-major `d × d`.
    pub covariance: Vec<T>,
    pub count: usize,
}

impl<T: Scalar> FeatureStatistics<T> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Statistics of the rows of `features` (`[n, d]`).
pub fn compute_feature_stats<T: Scalar>(features: &Tensor<T>) -> Result<FeatureStatistics<T>> {
    if features.ndim() != 2 {
        return Err(Error::Shape(format!("features must be [n, d], got {:?}", features.shape())));
    }
    let (n, d) = features.dims2();
    if n == 0 {
        return Err(Error::InvalidArgument("feature statistics need at least one sample".into()));
    }
    let x = features.data();
    let mut mean = vec![0.0f64; d];
    for row in x.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.f64();
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; d * d];
    let mut centered = vec![0.0f64; d];
    for row in x.chunks(d) {
        for ((c, v), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = v.f64() - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[i * d + j] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / n as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok(FeatureStatistics {
        mean: mean.into_iter().map(T::lit).collect(),
        covariance: cov.into_iter().map(T::lit).collect(),
        count: n,
    })
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa^{1/2} Σb Σa^{1/2})^{1/2})`.
pub fn frechet_distance<T: Scalar>(a: &FeatureStatistics<T>, b: &FeatureStatistics<T>) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d || a.covariance.len() != d * d || b.covariance.len() != d * d {
        return Err(Error::Shape(format!("statistics dimensions differ: {} vs {}", d, b.dim())));
    }
    let mean_term: T = a.mean.iter().zip(&b.mean).map(|(x, y)| (*x - *y) * (*x - *y)).sum();
    let tr_a: T = (0..d).map(|i| a.covariance[i * d + i]).sum();
    let tr_b: T = (0..d).map(|i| b.covariance[i * d + i]).sum();
    let sa = psd_sqrt(&a.covariance, d)?;
    let m = matmul_square(&matmul_square(&sa, &b.covariance, d), &sa, d);
    let e = symmetric_eigen(&m, d)?;
    let tr_sqrt: T = e.values.iter().map(|v| v.max(T::zero()).sqrt()).sum();
    let fd = (mean_term + tr_a + tr_b - T::lit(2.0) * tr_sqrt).f64();
    if !fd.is_finite() {
        return Err(Error::NonFinite("Fréchet distance".into()));
    }
    Ok(fd.max(0.0))
}

/// `exp(mean_x KL(p(y|x) ‖ p(y)))` over rows of `[n, C]` probabilities.
pub fn inception_score<T: Scalar>(probs: &Tensor<T>) -> Result<f64> {
    if probs.ndim() != 2 || probs.shape()[0] == 0 {
        return Err(Error::Shape(format!("probabilities must be non-empty [n, C], got {:?}", probs.shape())));
    }
    let (n, c) = probs.dims2();
    let p = probs.data();
    for (i, row) in p.chunks(c).enumerate() {
        let s: f64 = row.iter().map(|v| v.f64()).sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|v| v.f64() < 0.0) {
            return Err(Error::InvalidArgument(format!("row {i} is not a probability vector (sum {s})")));
        }
    }
    let mut marginal = vec![T::zero(); c];
    for row in p.chunks(c) {
        for (m, v) in marginal.iter_mut().zip(row) {
            *m += *v;
        }
    }
    let nn = T::from_usize_lossy(n);
    for m in &mut marginal {
        *m /= nn;
    }
    let mut kl_sum = T::zero();
    for row in p.chunks(c) {
        for (v, m) in row.iter().zip(&marginal) {
            if *v > T::zero() {
                kl_sum += *v * (*v / *m).ln();
            }
        }
    }
    Ok((kl_sum / nn).exp().f64())
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| (*x - *y) * (*x - *y)).sum()
}

/// Squared distance from every row to its k-th nearest other row.
pub fn knn_radii_sq<T: Scalar>(x: &Tensor<T>, k: usize) -> Vec<T> {
    let (n, d) = x.dims2();
    let rows: Vec<&[T]> = x.data().chunks(d).collect();
    (0..n)
        .map(|i| {
            let mut ds: Vec<T> = (0..n).filter(|&j| j != i).map(|j| sq_dist(rows[i], rows[j])).collect();
            let kth = k - 1;
            ds.select_nth_unstable_by(kth, |a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            ds[kth]
        })
        .collect()
}

/// Fraction of `queries` rows inside the manifold of `support` (union of
/// balls with k-NN radii).
fn manifold_coverage<T: Scalar>(support: &Tensor<T>, radii: &[T], queries: &Tensor<T>) -> f64 {
    let d = support.shape()[1];
    let srows: Vec<&[T]> = support.data().chunks(d).collect();
    let inside = queries
        .data()
        .chunks(d)
        .filter(|q| srows.iter().zip(radii).any(|(s, r)| sq_dist(q, s) <= *r))
        .count();
    inside as f64 / queries.shape()[0] as f64
}

/// k-NN manifold precision and recall of `fake` against `real`.
pub fn precision_recall<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>, k: usize) -> Result<(f64, f64)> {
    if real.ndim() != 2 || fake.ndim() != 2 || real.shape()[1] != fake.shape()[1] {
        return Err(Error::Shape(format!("feature sets {:?} and {:?} differ", real.shape(), fake.shape())));
    }
    let (n, m) = (real.shape()[0], fake.shape()[0]);
    if k == 0 || k >= n.min(m) {
        return Err(Error::InvalidArgument(format!("k = {k} must be in 1..{}", n.min(m))));
    }
    let real_r = knn_radii_sq(real, k);
    let fake_r = knn_radii_sq(fake, k);
    Ok((manifold_coverage(real, &real_r, fake), manifold_coverage(fake, &fake_r, real)))
}

/// `10 log10(range² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, range: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("psnr of {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum::<f64>() / a.numel().max(1) as f64;
    Ok(psnr_from_mse(mse, range))
}

pub fn psnr_from_mse(mse: f64, range: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (range * range / mse).log10()).min(PSNR_CAP_DB)
}

/// How EQ-T draws translations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EqtOffsets {
    /// Whole output pixels; the reference is shifted exactly.
    #[default]
    Integer,
    /// Continuous offsets; the reference is shifted by windowed-sinc
    /// interpolation at the output rate.
    Subpixel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqtOptions {
    pub max_offset: f64,
    pub offsets: EqtOffsets,
    /// Pixels ignored on every side beyond the translation itself.
    pub border: usize,
}

impl Default for EqtOptions {
    fn default() -> Self {
        Self { max_offset: 4.0, offsets: EqtOffsets::Integer, border: 2 }
    }
}

/// Translation equivariance in dB: PSNR between synthesis from a translated
/// input grid and the translated synthesis, on the mutually valid region.
/// `ws` holds one style per row.
pub fn eq_t<T: Scalar, R: Rng + ?Sized>(gen: &Generator<T>, ws: &Tensor<T>, opts: &EqtOptions, rng: &mut R) -> Result<f64> {
    let n = ws.shape()[0];
    let grid = gen.input_grid();
    let reference = gen.synthesize(std::slice::from_ref(ws), &grid)?;
    let res = gen.resolution;
    let mut sq = 0.0;
    let mut count = 0usize;
    for s in 0..n {
        let (dx, dy) = match opts.offsets {
            EqtOffsets::Integer => {
                let m = opts.max_offset.floor() as i64;
                (rng.random_range(-m..=m) as f64, rng.random_range(-m..=m) as f64)
            }
            EqtOffsets::Subpixel => (
                rng.random_range(-opts.max_offset..=opts.max_offset),
                rng.random_range(-opts.max_offset..=opts.max_offset),
            ),
        };
        let w = ws.slice_outer(s, 1);
        let moved = gen.synthesize(std::slice::from_ref(&w), &translate_input_grid(&grid, [dx, dy], 1.0)?)?;
        let refs = reference.slice_outer(s, 1);
        let shifted = shift_image(&refs, dx, dy, res);
        let pad_x = dx.abs().ceil() as usize + opts.border;
        let pad_y = dy.abs().ceil() as usize + opts.border;
        if 2 * pad_x >= res || 2 * pad_y >= res {
            return Err(Error::InvalidArgument("translation leaves no valid region".into()));
        }
        for c in 0..3 {
            for y in pad_y..res - pad_y {
                for x in pad_x..res - pad_x {
                    let a = moved.at(&[0, c, y, x]).f64();
                    let b = shifted.at(&[0, c, y, x]).f64();
                    sq += (a - b) * (a - b);
                    count += 1;
                }
            }
        }
    }
    Ok(psnr_from_mse(sq / count.max(1) as f64, 2.0))
}

/// `out(x) = img(x - (dx, dy))` in pixels; integer shifts are exact.
fn shift_image<T: Scalar>(img: &Tensor<T>, dx: f64, dy: f64, res: usize) -> Tensor<T> {
    let map = |d: f64| -> SeparableMap<T> {
        if d.fract() == 0.0 {
            SeparableMap::shift(res, d as isize)
        } else {
            let src = Lattice { rate: 1.0, origin: 0.0, len: res };
            let dst = Lattice { rate: 1.0, origin: -d, len: res };
            let f = WindowedSinc::design(1.0, 12, 0.5, 0.1);
            SeparableMap::from_kernel(&src, &dst, f.radius, |t| f.eval(t))
        }
    };
    crate::resample::apply_separable(img, Some(&map(dy)), Some(&map(dx)))
}

/// Average-pool a `[n, c, h, w]` map to at most `max_side` per side, keep the
/// first `channels` channels and flatten to `[n, features]`.
pub fn spatial_features<T: Scalar>(map: &Tensor<T>, channels: usize, max_side: usize) -> Tensor<T> {
    let (n, c, h, w) = map.dims4();
    let c_keep = channels.min(c);
    let fh = h.div_ceil(max_side.max(1)).max(1);
    let fw = w.div_ceil(max_side.max(1)).max(1);
    let (oh, ow) = (h / fh, w / fw);
    let mut out = Vec::with_capacity(n * c_keep * oh * ow);
    let inv = T::lit(1.0 / (fh * fw) as f64);
    for b in 0..n {
        for ch in 0..c_keep {
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = T::zero();
                    for yy in 0..fh {
                        for xx in 0..fw {
                            s += map.at(&[b, ch, y * fh + yy, x * fw + xx]);
                        }
                    }
                    out.push(s * inv);
                }
            }
        }
    }
    Tensor::new(vec![n, c_keep * oh * ow], out)
}

/// Global average pool `[n, c, h, w] -> [n, c]`.
pub fn global_pool<T: Scalar>(map: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = map.dims4();
    let inv = T::lit(1.0 / (h * w) as f64);
    Tensor::from_fn(&[n, c], |i| map.data()[i * h * w..(i + 1) * h * w].iter().copied().sum::<T>() * inv)
}
