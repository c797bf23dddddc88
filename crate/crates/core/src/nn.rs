//! Parameter storage, optimizers and small layer helpers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dGeometry, Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Seeded generator used everywhere randomness is needed.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub frozen: bool,
}

/// Named, ordered parameter tensors with per-entry freeze flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, frozen: false });
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    pub fn freeze_all(&mut self) {
        for e in &mut self.entries {
            e.frozen = true;
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| !self.is_frozen(id))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Record every parameter on `tape`. With `grad = true` non-frozen
    /// entries become trainable leaves; everything else is constant.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, grad: bool) -> Bound<'t, T> {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if grad && !e.frozen {
                    tape.param(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Overwrite values from another store by name; shapes must match.
    pub fn load_from(&mut self, named: &[(String, Tensor<T>)]) -> Result<()> {
        for (name, t) in named {
            let id = self
                .id_of(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            if self.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                    self.get(id).shape(),
                    t.shape()
                )));
            }
            *self.get_mut(id) = t.clone();
        }
        Ok(())
    }

    /// Sum of squared entries of every tensor, handy as a cheap checksum.
    pub fn checksum(&self) -> f64 {
        self.entries.iter().map(|e| e.value.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>()).sum()
    }
}

/// Parameters recorded on a tape.
pub struct Bound<'t, T: Scalar> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Gradients of the trainable leaves, keyed by parameter id.
    pub fn gradients(&self, grads: &Grads<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.vars
            .iter()
            .enumerate()
            .filter(|(_, v)| v.requires_grad())
            .map(|(i, &v)| (ParamId(i), grads.get_or_zeros(v)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// The adaptive-moment defaults (`beta = 0.9 / 0.999`, `eps = 1e-8`).
    pub fn defaults(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction; moments keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: HashMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: HashMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        let lr = self.config.lr;
        self.step_with_lr(store, grads, lr);
    }

    /// One update; frozen entries are skipped even if a gradient is given.
    pub fn step_with_lr(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) {
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = T::lit(lr / bc1.max(1e-300));
        let bc2_sqrt = T::lit(bc2.sqrt().max(1e-300));
        let eps = T::lit(c.eps);
        for (id, g) in grads {
            if store.is_frozen(*id) {
                continue;
            }
            let name = store.name(*id).to_string();
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = store.get_mut(*id);
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv -= step_size * *mv / ((*vv).sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

/// Exponential moving average of a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Ema<T> {
    pub shadow: ParamStore<T>,
}

impl<T: Scalar> Ema<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self { shadow: store.clone() }
    }

    pub fn update(&mut self, store: &ParamStore<T>, decay: f64) {
        let d = T::lit(decay);
        for (s, p) in self.shadow.entries.iter_mut().zip(&store.entries) {
            s.frozen = p.frozen;
            if p.frozen || s.value.shape() != p.value.shape() {
                s.value = p.value.clone();
                continue;
            }
            for (a, &b) in s.value.data_mut().iter_mut().zip(p.value.data()) {
                *a = d * *a + (T::one() - d) * b;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// layer helpers

/// Fully connected layer with runtime weight scaling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenseInit {
    /// Learning-rate multiplier folded into the weight parametrisation.
    pub lr_mul: f64,
    pub bias_init: f64,
    pub bias: bool,
}

impl Default for DenseInit {
    fn default() -> Self {
        Self { lr_mul: 1.0, bias_init: 0.0, bias: true }
    }
}

impl Dense {
    pub fn new<T: Scalar, R: rand::Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        init: DenseInit,
        rng: &mut R,
    ) -> Self {
        // stored as N(0, 1/lr_mul^2); runtime gain lr_mul / sqrt(fan_in)
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[in_features, out_features], 1.0 / init.lr_mul, rng),
        );
        let bias = init.bias.then(|| {
            store.add(format!("{name}.bias"), Tensor::full(&[out_features], T::lit(init.bias_init / init.lr_mul)))
        });
        let _ = init;
        Self { weight, bias, in_features, out_features }
    }

    pub fn forward<'t, T: Scalar>(&self, b: &Bound<'t, T>, x: Var<'t, T>, lr_mul: f64) -> Var<'t, T> {
        let gain = T::lit(lr_mul / (self.in_features as f64).sqrt());
        let y = x.matmul(b.var(self.weight)).scale(gain);
        match self.bias {
            Some(bias) => y + b.var(bias).scale(T::lit(lr_mul)),
            None => y,
        }
    }
}

/// Convolution weight of shape `[out, in, k, k]`, scaled at runtime by
/// `1 / sqrt(in * k * k)`.
pub fn conv_weight<T: Scalar, R: rand::Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    out_ch: usize,
    in_ch: usize,
    k: usize,
    rng: &mut R,
) -> ParamId {
    store.add(format!("{name}.weight"), Tensor::randn(&[out_ch, in_ch, k, k], 1.0, rng))
}

pub fn conv_gain<T: Scalar>(in_ch: usize, k: usize) -> T {
    T::lit(1.0 / ((in_ch * k * k) as f64).sqrt())
}

/// Convolution with an optional per-channel bias.
pub fn conv<'t, T: Scalar>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    geometry: Conv2dGeometry,
) -> Var<'t, T> {
    let y = x.conv2d(weight, geometry);
    match bias {
        Some(b) => {
            let c = b.shape()[0];
            y + b.reshape(&[1, c, 1, 1])
        }
        None => y,
    }
}

/// Divide rows by their root mean square (`x / sqrt(mean(x^2) + eps)`).
pub fn normalize_2nd_moment<'t, T: Scalar>(x: Var<'t, T>) -> Var<'t, T> {
    let ms = x.square().mean_axis(x.shape().len() - 1, true);
    x * ms.add_scalar(T::lit(1e-8)).rsqrt()
}

/// Row-wise L2 normalisation.
pub fn l2_normalize<'t, T: Scalar>(x: Var<'t, T>) -> Var<'t, T> {
    let ss = x.square().sum_axis(x.shape().len() - 1, true);
    x * ss.add_scalar(T::lit(1e-12)).rsqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_skips_frozen_and_descends() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::from_f64(&[2], &[1.0, -1.0]));
        let b = store.add("b", Tensor::from_f64(&[1], &[3.0]));
        store.set_frozen(b, true);
        let mut opt = Adam::new(AdamConfig::defaults(0.1));
        for _ in 0..50 {
            let g = store.get(a).scale(2.0);
            opt.step(&mut store, &[(a, g), (b, Tensor::from_f64(&[1], &[1.0]))]);
        }
        assert!(store.get(a).norm() < 0.5);
        assert_eq!(store.get(b).data(), &[3.0]);
    }

    #[test]
    fn bind_respects_freeze() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Tensor::ones(&[2]));
        let b = store.add("b", Tensor::ones(&[2]));
        store.set_frozen(b, true);
        let tape = Tape::new();
        let bound = store.bind(&tape, true);
        assert!(bound.var(a).requires_grad());
        assert!(!bound.var(b).requires_grad());
        let loss = (bound.var(a) * bound.var(b)).sum();
        let grads = tape.backward(loss);
        let g = bound.gradients(&grads);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].0, a);
    }
}
