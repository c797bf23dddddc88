//! Per-scale discriminator heads with spectral normalisation and projection
//! class conditioning, plus warm-up blurring of discriminator inputs.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dGeometry, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Dense, DenseInit, ParamId, ParamStore};
use crate::projector::{FeatureShape, NUM_TAPS};
use crate::resample::SeparableMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower bound on the estimated spectral norm.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// Power-iteration estimate of the largest singular value of the row-major
/// `rows × cols` matrix `w`. `u` (length `rows`) is updated in place.
/// Returns `(w / σ̂, σ̂)`.
pub fn spectral_normalize<T: Scalar>(w: &[T], rows: usize, cols: usize, u: &mut [T], n_iter: usize) -> Result<(Vec<T>, T)> {
    if n_iter == 0 {
        return Err(Error::InvalidArgument("spectral normalisation needs at least one power iteration".into()));
    }
    if w.len() != rows * cols || u.len() != rows {
        return Err(Error::Shape(format!("matrix {rows}x{cols} with {} entries and u of {}", w.len(), u.len())));
    }
    let v = power_iteration(w, rows, cols, u, n_iter);
    let sigma = bilinear(w, rows, cols, u, &v).max(T::lit(SIGMA_FLOOR));
    Ok((w.iter().map(|&x| x / sigma).collect(), sigma))
}

fn normalize_vec<T: Scalar>(x: &mut [T]) {
    let n = x.iter().map(|v| *v * *v).sum::<T>().sqrt().max(T::lit(1e-12));
    x.iter_mut().for_each(|v| *v /= n);
}

/// Updates `u`, returns the matching right vector `v`.
fn power_iteration<T: Scalar>(w: &[T], rows: usize, cols: usize, u: &mut [T], n_iter: usize) -> Vec<T> {
    let mut v = vec![T::zero(); cols];
    for _ in 0..n_iter {
        v.iter_mut().for_each(|x| *x = T::zero());
        for r in 0..rows {
            let ur = u[r];
            for (vc, &wv) in v.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *vc += wv * ur;
            }
        }
        normalize_vec(&mut v);
        for r in 0..rows {
            u[r] = w[r * cols..(r + 1) * cols].iter().zip(&v).map(|(a, b)| *a * *b).sum();
        }
        normalize_vec(u);
    }
    v
}

fn bilinear<T: Scalar>(w: &[T], rows: usize, cols: usize, u: &[T], v: &[T]) -> T {
    (0..rows).map(|r| u[r] * w[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| *a * *b).sum::<T>()).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlurSchedule {
    /// Constant σ until the cutoff, then off.
    #[default]
    Step,
    /// σ decays linearly to zero at the cutoff.
    Ramp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlurConfig {
    pub sigma: f64,
    pub cutoff_images: u64,
    pub schedule: BlurSchedule,
}

impl Default for BlurConfig {
    fn default() -> Self {
        Self { sigma: 2.0, cutoff_images: 200_000, schedule: BlurSchedule::Step }
    }
}

impl BlurConfig {
    pub fn sigma_at(&self, images_seen: u64) -> f64 {
        if images_seen >= self.cutoff_images {
            return 0.0;
        }
        match self.schedule {
            BlurSchedule::Step => self.sigma,
            BlurSchedule::Ramp => self.sigma * (1.0 - images_seen as f64 / self.cutoff_images as f64),
        }
    }
}

/// Gaussian blur of `[N, C, H, W]` images while `images_seen < cutoff`.
pub fn blur_for_warmup<'t, T: Scalar>(image: Var<'t, T>, images_seen: u64, cfg: &BlurConfig) -> Result<Var<'t, T>> {
    if !(cfg.sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("blur sigma must be >= 0, got {}", cfg.sigma)));
    }
    let sigma = cfg.sigma_at(images_seen);
    if sigma <= 0.0 {
        return Ok(image);
    }
    let s = image.shape();
    let mh = Rc::new(SeparableMap::gaussian(s[2], sigma));
    let mw = if s[2] == s[3] { mh.clone() } else { Rc::new(SeparableMap::gaussian(s[3], sigma)) };
    Ok(image.separable(Some(mh), Some(mw)))
}

/// Plain-tensor wrapper around [`blur_for_warmup`].
pub fn blur_image<T: Scalar>(image: &Tensor<T>, images_seen: u64, cfg: &BlurConfig) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let out = blur_for_warmup(tape.constant(image.clone()), images_seen, cfg)?;
    Ok((*out.value()).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub width: usize,
    pub c_dim: usize,
    pub power_iterations: usize,
    pub lrelu_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { width: 64, c_dim: 64, power_iterations: 1, lrelu_slope: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct SnConv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    kernel: usize,
    /// Index into the power-iteration state.
    state: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorHead {
    hidden: Vec<SnConv>,
    out: SnConv,
    cmap: Dense,
    pub depth: usize,
    pub input: FeatureShape,
}

/// Four heads for one feature network.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Scalar> {
    pub config: DiscriminatorConfig,
    pub params: ParamStore<T>,
    pub heads: Vec<DiscriminatorHead>,
    /// Left singular vector estimates, one per convolution.
    pub sn_state: Vec<Tensor<T>>,
}

/// Head depth for tap `level` (0 = largest map): 7 down to 4.
pub fn head_depth(level: usize) -> usize {
    3 + NUM_TAPS - level
}

impl<T: Scalar> Discriminator<T> {
    /// `shapes` lists the pyramid maps, largest first. `prefix` namespaces the
    /// parameters when several discriminators share a checkpoint.
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, shapes: &[FeatureShape], prefix: &str, rng: &mut R) -> Result<Self> {
        if shapes.len() != NUM_TAPS {
            return Err(Error::Shape(format!("expected {NUM_TAPS} feature shapes, got {}", shapes.len())));
        }
        let mut params = ParamStore::new();
        let mut sn_state = Vec::new();
        let mut heads = Vec::new();
        let mut add_conv = |params: &mut ParamStore<T>, name: String, o: usize, i: usize, k: usize, stride: usize, rng: &mut R| {
            let weight = params.add(format!("{name}.weight"), Tensor::randn(&[o, i, k, k], (1.0 / (i * k * k) as f64).sqrt(), rng));
            let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[o]));
            let mut u = Tensor::<T>::randn(&[o], 1.0, rng);
            let n = u.norm();
            u = u.scale(T::one() / n.max(T::lit(1e-12)));
            sn_state.push(u);
            SnConv { weight, bias, stride, kernel: k, state: sn_state.len() - 1 }
        };
        for (level, s) in shapes.iter().enumerate() {
            let depth = head_depth(level);
            let mut size = s.size;
            let mut cin = s.channels;
            let mut hidden = Vec::new();
            for j in 0..depth - 1 {
                let stride = if size >= 8 { 2 } else { 1 };
                hidden.push(add_conv(&mut params, format!("{prefix}head{level}.conv{j}"), config.width, cin, 3, stride, rng));
                size = if stride == 2 { size / 2 } else { size };
                cin = config.width;
            }
            let out = add_conv(&mut params, format!("{prefix}head{level}.out"), 1, cin, 1, 1, rng);
            let cmap = Dense::new(
                &mut params,
                &format!("{prefix}head{level}.cmap"),
                config.c_dim,
                cin,
                DenseInit::default(),
                rng,
            );
            heads.push(DiscriminatorHead { hidden, out, cmap, depth, input: *s });
        }
        Ok(Self { config, params, heads, sn_state })
    }

    /// Advance every power iteration by `config.power_iterations` steps.
    pub fn update_spectral_state(&mut self) {
        let convs: Vec<SnConv> = self.heads.iter().flat_map(|h| h.hidden.iter().chain(std::iter::once(&h.out)).cloned()).collect();
        for c in convs {
            let w = self.params.get(c.weight);
            let rows = w.shape()[0];
            let cols = w.numel() / rows;
            let u = &mut self.sn_state[c.state];
            power_iteration(w.data(), rows, cols, u.data_mut(), self.config.power_iterations);
        }
    }

    fn sn_weight<'t>(&self, b: &Bound<'t, T>, c: &SnConv) -> Var<'t, T> {
        let w = b.var(c.weight);
        let wt = self.params.get(c.weight);
        let rows = wt.shape()[0];
        let cols = wt.numel() / rows;
        let u = self.sn_state[c.state].data();
        // v from the current u without advancing the stored state
        let mut v = vec![T::zero(); cols];
        for r in 0..rows {
            for (vc, &wv) in v.iter_mut().zip(&wt.data()[r * cols..(r + 1) * cols]) {
                *vc += wv * u[r];
            }
        }
        normalize_vec(&mut v);
        let outer = Tensor::from_fn(wt.shape(), |i| u[i / cols] * v[i % cols]);
        let tape = w.tape();
        let sigma = (w * tape.constant(outer)).sum().maximum(tape.scalar(T::lit(SIGMA_FLOOR)));
        w / sigma
    }

    fn conv<'t>(&self, b: &Bound<'t, T>, x: Var<'t, T>, c: &SnConv) -> Var<'t, T> {
        let w = self.sn_weight(b, c);
        let geom = Conv2dGeometry { stride: c.stride, pad: c.kernel / 2 };
        crate::nn::conv(x, w, Some(b.var(c.bias)), geom)
    }

    /// Logit maps `[N, 1, h, w]` per head; `class_vec` is `[N, c_dim]`.
    pub fn discriminate<'t>(&self, b: &Bound<'t, T>, pyramid: &[Var<'t, T>], class_vec: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        if pyramid.len() != self.heads.len() {
            return Err(Error::Shape(format!("{} feature maps for {} heads", pyramid.len(), self.heads.len())));
        }
        let slope = T::lit(self.config.lrelu_slope);
        let gain = T::lit(std::f64::consts::SQRT_2);
        let mut out = Vec::with_capacity(self.heads.len());
        for (head, &x) in self.heads.iter().zip(pyramid) {
            let s = x.shape();
            if s[1] != head.input.channels {
                return Err(Error::Shape(format!("head expects {} channels, got {:?}", head.input.channels, s)));
            }
            let mut h = x;
            for c in &head.hidden {
                h = self.conv(b, h, c).leaky_relu(slope, gain);
            }
            let logits = self.conv(b, h, &head.out);
            let n = s[0];
            let cin = h.shape()[1];
            let proj = head.cmap.forward(b, class_vec, 1.0).reshape(&[n, cin, 1, 1]);
            let cond = (h * proj).sum_axis(1, true);
            out.push(logits + cond);
        }
        Ok(out)
    }

    /// Spectral norm of every normalised weight as currently estimated.
    pub fn normalized_weights(&self) -> Vec<Tensor<T>> {
        let tape = Tape::new();
        let b = self.params.bind(&tape, false);
        self.heads
            .iter()
            .flat_map(|h| h.hidden.iter().chain(std::iter::once(&h.out)))
            .map(|c| (*self.sn_weight(&b, c).value()).clone())
            .collect()
    }

    /// Power-iteration state as named tensors for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.sn_state.iter().enumerate().map(|(i, u)| (format!("sn.{i}"), u.clone())).collect()
    }

    pub fn load_state_tensors(&mut self, named: &[(String, Tensor<T>)]) -> Result<()> {
        for (name, t) in named {
            let i: usize = name
                .strip_prefix("sn.")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("unexpected state tensor `{name}`")))?;
            let slot = self
                .sn_state
                .get_mut(i)
                .ok_or_else(|| Error::Checkpoint(format!("state tensor `{name}` out of range")))?;
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("state tensor `{name}` has the wrong shape")));
            }
            *slot = t.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_is_monotone_in_map_size() {
        let depths: Vec<_> = (0..NUM_TAPS).map(head_depth).collect();
        assert_eq!(depths, vec![7, 6, 5, 4]);
    }

    #[test]
    fn blur_cutoff() {
        let cfg = BlurConfig::default();
        assert_eq!(cfg.sigma_at(0), 2.0);
        assert_eq!(cfg.sigma_at(199_999), 2.0);
        assert_eq!(cfg.sigma_at(200_000), 0.0);
    }
}
