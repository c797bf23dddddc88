//! Latent-optimization inversion, pivotal tuning, class inference for
//! targets, principal latent directions and latent edits.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::classifier::ImageClassifier;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::linalg::symmetric_eigen;
use crate::nn::{Adam, AdamConfig, SeededRng};
use crate::projector::{extract_feature_pyramid, FeatureNetwork};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub iterations: usize,
    pub lr_max: f64,
    pub ramp_up: usize,
    pub ramp_down: usize,
    pub mean_style_samples: usize,
    /// Weight of an additional pixel-space squared error (0 = perceptual only).
    /// Random feature networks alone leave visible residuals, so the
    /// default leans on pixels.
    pub pixel_weight: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self { iterations: 1000, lr_max: 0.05, ramp_up: 50, ramp_down: 250, mean_style_samples: 10_000, pixel_weight: 30.0 }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ramp_up + self.ramp_down > self.iterations && self.iterations > 0 {
            return Err(Error::InvalidArgument(format!(
                "ramp_up ({}) + ramp_down ({}) exceeds iterations ({})",
                self.ramp_up, self.ramp_down, self.iterations
            )));
        }
        if !(self.lr_max >= 0.0) {
            return Err(Error::InvalidArgument(format!("lr_max must be >= 0, got {}", self.lr_max)));
        }
        Ok(())
    }

    /// Learning rate at iteration `i`: linear warm-up from zero over
    /// `ramp_up`, cosine decay to zero over the final `ramp_down`.
    pub fn learning_rate(&self, i: usize) -> f64 {
        let up = if self.ramp_up == 0 { 1.0 } else { (i as f64 / self.ramp_up as f64).min(1.0) };
        let start_down = self.iterations.saturating_sub(self.ramp_down);
        let down = if i <= start_down || self.ramp_down == 0 {
            if i >= self.iterations && self.iterations > 0 { 0.0 } else { 1.0 }
        } else {
            let t = ((i - start_down) as f64 / self.ramp_down as f64).min(1.0);
            0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        };
        self.lr_max * up * down
    }
}

/// Per-sample distance between two image batches in the four taps of a
/// feature network: channel vectors are unit-normalised at every position,
/// squared differences summed over channels, averaged over positions and
/// summed over taps. Both batches are resized to the network input.
pub fn perceptual_distance_var<'t, T: Scalar>(net: &dyn FeatureNetwork<T>, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("perceptual distance of {:?} and {:?}", a.shape(), b.shape())));
    }
    let fa = extract_feature_pyramid(a, net, None)?;
    let fb = extract_feature_pyramid(b, net, None)?;
    let n = a.shape()[0];
    let mut total: Option<Var<'t, T>> = None;
    for (x, y) in fa.into_iter().zip(fb) {
        let d = (unit_channels(x) - unit_channels(y)).square().sum_axis(1, false);
        let hw = d.shape()[1] * d.shape()[2];
        let d = d.reshape(&[n, hw]).mean_axis(1, false);
        total = Some(match total {
            Some(t) => t + d,
            None => d,
        });
    }
    Ok(total.expect("four taps"))
}

fn unit_channels<'t, T: Scalar>(x: Var<'t, T>) -> Var<'t, T> {
    let ss = x.square().sum_axis(1, true);
    x * ss.add_scalar(T::lit(1e-10)).rsqrt()
}

/// [`perceptual_distance_var`] on plain tensors.
pub fn perceptual_distance<T: Scalar>(net: &dyn FeatureNetwork<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let d = perceptual_distance_var(net, tape.constant(a.clone()), tape.constant(b.clone()))?;
    Ok(d.value().to_f64_vec())
}

/// Class drawn from the classifier's softmax over a single image.
pub fn sample_class_for_image<T: Scalar>(image: &Tensor<T>, classifier: &dyn ImageClassifier<T>, seed: u64) -> Result<usize> {
    let batch = match image.ndim() {
        3 => image.clone().reshape(&[1, image.shape()[0], image.shape()[1], image.shape()[2]]),
        4 if image.shape()[0] == 1 => image.clone(),
        _ => return Err(Error::Shape(format!("expected a single image, got {:?}", image.shape()))),
    };
    let p = classifier.probabilities(&batch)?;
    let mut rng = SeededRng::seed_from_u64(seed);
    Ok(sample_categorical(&p.to_f64_vec(), &mut rng))
}

/// Index drawn with probability proportional to `weights`.
pub fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Result of latent optimization.
#[derive(Clone, Debug, PartialEq)]
pub struct Inversion<T: Scalar> {
    /// Style after the last iteration, `[1, w_dim]`.
    pub w: Tensor<T>,
    /// Lowest-loss style encountered.
    pub best_w: Tensor<T>,
    pub best_loss: f64,
    /// Loss at every iteration.
    pub losses: Vec<f64>,
    /// Running minimum of `losses`.
    pub best_trace: Vec<f64>,
}

fn reconstruction_loss<'t, T: Scalar>(
    net: &dyn FeatureNetwork<T>,
    recon: Var<'t, T>,
    target: Var<'t, T>,
    pixel_weight: f64,
) -> Result<Var<'t, T>> {
    let mut loss = perceptual_distance_var(net, recon, target)?.mean();
    if pixel_weight > 0.0 {
        loss = loss + (recon - target).square().mean().scale(T::lit(pixel_weight));
    }
    Ok(loss)
}

/// Optimise a single style code, starting from `w_init` (normally the mean
/// style), so that the synthesised image matches `target` `[1, 3, R, R]`.
/// Only the style receives updates.
pub fn invert_latent<T: Scalar>(
    target: &Tensor<T>,
    gen: &Generator<T>,
    w_init: &Tensor<T>,
    cfg: &InversionConfig,
    net: &dyn FeatureNetwork<T>,
) -> Result<Inversion<T>> {
    cfg.validate()?;
    let r = gen.resolution;
    if target.shape() != [1, 3, r, r] {
        return Err(Error::Shape(format!("target must be [1, 3, {r}, {r}], got {:?}", target.shape())));
    }
    let d = gen.config.w_dim;
    let mut w = w_init.clone().reshape(&[1, d]);
    let mut best_w = w.clone();
    let mut best_loss = f64::INFINITY;
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut best_trace = Vec::with_capacity(cfg.iterations);
    let mut opt = OneTensorAdam::new(&w);
    let grid = gen.input_grid();
    for i in 0..cfg.iterations {
        let tape = Tape::new();
        let b = gen.params.bind(&tape, false);
        let wv = tape.param(w.clone());
        let recon = gen.synthesize_var(&b, &[wv], &grid)?;
        let loss = reconstruction_loss(net, recon, tape.constant(target.clone()), cfg.pixel_weight)?;
        let lv = loss.item().f64();
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("inversion loss at iteration {i}")));
        }
        if lv < best_loss {
            best_loss = lv;
            best_w = w.clone();
        }
        losses.push(lv);
        best_trace.push(best_loss);
        let g = tape.backward(loss).get_or_zeros(wv);
        opt.step(&mut w, &g, cfg.learning_rate(i));
    }
    if cfg.iterations > 0 {
        let last = reconstruction_distance(gen, &w, target, net, cfg.pixel_weight)?;
        if last < best_loss {
            best_loss = last;
            best_w = w.clone();
        }
    }
    Ok(Inversion { w, best_w, best_loss, losses, best_trace })
}

/// Inversion objective of `w` against `target`.
pub fn reconstruction_distance<T: Scalar>(
    gen: &Generator<T>,
    w: &Tensor<T>,
    target: &Tensor<T>,
    net: &dyn FeatureNetwork<T>,
    pixel_weight: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let b = gen.params.bind(&tape, false);
    let recon = gen.synthesize_var(&b, &[tape.constant(w.clone())], &gen.input_grid())?;
    Ok(reconstruction_loss(net, recon, tape.constant(target.clone()), pixel_weight)?.item().f64())
}

/// Adam over a single free tensor with the usual default moments.
struct OneTensorAdam<T: Scalar> {
    m: Tensor<T>,
    v: Tensor<T>,
    t: i32,
}

impl<T: Scalar> OneTensorAdam<T> {
    fn new(like: &Tensor<T>) -> Self {
        Self { m: Tensor::zeros(like.shape()), v: Tensor::zeros(like.shape()), t: 0 }
    }

    fn step(&mut self, x: &mut Tensor<T>, g: &Tensor<T>, lr: f64) {
        let c = AdamConfig::defaults(lr);
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for ((p, &gv), (m, v)) in
            x.data_mut().iter_mut().zip(g.data()).zip(self.m.data_mut().iter_mut().zip(self.v.data_mut().iter_mut()))
        {
            let gv = gv.f64();
            let mn = c.beta1 * m.f64() + (1.0 - c.beta1) * gv;
            let vn = c.beta2 * v.f64() + (1.0 - c.beta2) * gv * gv;
            *m = T::lit(mn);
            *v = T::lit(vn);
            *p = T::lit(p.f64() - lr * (mn / bc1) / ((vn / bc2).sqrt() + c.eps));
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PtiConfig {
    pub steps: usize,
    pub lr: f64,
    pub pixel_weight: f64,
    pub locality_weight: f64,
    /// Interpolation factor towards random styles for the locality term.
    pub locality_epsilon: f64,
    pub locality_samples: usize,
    /// Abort when the locality term exceeds this value.
    pub locality_limit: f64,
    pub seed: u64,
}

impl Default for PtiConfig {
    fn default() -> Self {
        Self {
            steps: 350,
            lr: 3e-4,
            pixel_weight: 1.0,
            locality_weight: 1.0,
            locality_epsilon: 0.5,
            locality_samples: 4,
            locality_limit: 1e3,
            seed: 0,
        }
    }
}

/// Result of pivotal tuning.
#[derive(Clone, Debug)]
pub struct PivotalTuning<T: Scalar> {
    pub generator: Generator<T>,
    /// Perceptual distance at the pivot before and after tuning.
    pub initial_distance: f64,
    pub final_distance: f64,
    pub distances: Vec<f64>,
}

/// Fine-tune the synthesis parameters so that `pivot` reproduces `target`,
/// penalising output changes at styles `w_avg + ε (w_r - w_avg)` for `w_r`
/// drawn from `style_pool` `[M, w_dim]`. The best iterate by perceptual
/// distance at the pivot is returned.
pub fn pivotal_tune<T: Scalar>(
    target: &Tensor<T>,
    pivot: &Tensor<T>,
    gen: &Generator<T>,
    style_pool: &Tensor<T>,
    cfg: &PtiConfig,
    net: &dyn FeatureNetwork<T>,
) -> Result<PivotalTuning<T>> {
    let d = gen.config.w_dim;
    let pivot = pivot.clone().reshape(&[1, d]);
    let distance = |g: &Generator<T>| -> Result<f64> {
        let recon = g.synthesize_w(&pivot)?;
        Ok(perceptual_distance(net, &recon, target)?[0])
    };
    let initial = distance(gen)?;
    if cfg.steps == 0 {
        return Ok(PivotalTuning { generator: gen.clone(), initial_distance: initial, final_distance: initial, distances: vec![initial] });
    }
    if style_pool.ndim() != 2 || style_pool.shape()[1] != d || style_pool.shape()[0] == 0 {
        return Err(Error::Shape(format!("style pool must be [M, {d}], got {:?}", style_pool.shape())));
    }
    let mut tuned = gen.clone();
    for id in tuned.params.ids().collect::<Vec<_>>() {
        let name = tuned.params.name(id);
        if !name.starts_with("mapping.") && name != "input.freqs" && name != "input.phases" {
            tuned.params.set_frozen(id, false);
        }
    }
    let mut opt = Adam::new(AdamConfig::defaults(cfg.lr));
    let mut rng = SeededRng::seed_from_u64(cfg.seed);
    let grid = gen.input_grid();
    let avg = &gen.w_avg;
    let mut best = (initial, tuned.clone());
    let mut distances = vec![initial];
    for step in 0..cfg.steps {
        let m = style_pool.shape()[0];
        let picks: Vec<usize> = (0..cfg.locality_samples).map(|_| rng.random_range(0..m)).collect();
        let eps = T::lit(cfg.locality_epsilon);
        let locality_ws = Tensor::from_fn(&[cfg.locality_samples, d], |i| {
            let (p, j) = (picks[i / d], i % d);
            let a = avg.data()[j];
            a + eps * (style_pool.data()[p * d + j] - a)
        });
        let reference = if cfg.locality_samples > 0 { Some(gen.synthesize_w(&locality_ws)?) } else { None };

        let tape = Tape::new();
        let b = tuned.params.bind(&tape, true);
        let recon = tuned.synthesize_var(&b, &[tape.constant(pivot.clone())], &grid)?;
        let tv = tape.constant(target.clone());
        let dist = perceptual_distance_var(net, recon, tv)?.mean();
        let mut loss = dist;
        if cfg.pixel_weight > 0.0 {
            loss = loss + (recon - tv).square().mean().scale(T::lit(cfg.pixel_weight));
        }
        if let (Some(reference), true) = (reference, cfg.locality_weight > 0.0) {
            let out = tuned.synthesize_var(&b, &[tape.constant(locality_ws)], &grid)?;
            let loc = (out - tape.constant(reference)).square().mean();
            let lv = loc.item().f64();
            if !lv.is_finite() || lv > cfg.locality_limit {
                return Err(Error::Diverged(format!("locality term {lv} at tuning step {step}")));
            }
            loss = loss + loc.scale(T::lit(cfg.locality_weight));
        }
        let dv = dist.item().f64();
        if !dv.is_finite() {
            return Err(Error::NonFinite(format!("tuning loss at step {step}")));
        }
        if dv < best.0 {
            best = (dv, tuned.clone());
        }
        distances.push(dv);
        let grads = tape.backward(loss);
        let g = b.gradients(&grads);
        opt.step(&mut tuned.params, &g);
    }
    let last = distance(&tuned)?;
    distances.push(last);
    if last < best.0 {
        best = (last, tuned);
    }
    let mut generator = best.1;
    for id in generator.params.ids().collect::<Vec<_>>() {
        generator.params.set_frozen(id, gen.params.is_frozen(id));
    }
    Ok(PivotalTuning { generator, initial_distance: initial, final_distance: best.0, distances })
}

/// Where an edit direction came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionSource {
    Pca,
    Manual,
}

/// Unit vector in style space applied to an inclusive range of layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditDirection {
    pub vector: Vec<f64>,
    pub layer_range: (usize, usize),
    pub source: DirectionSource,
    /// Fraction of sample variance along this direction (PCA only).
    #[serde(default)]
    pub explained_variance: Option<f64>,
}

impl EditDirection {
    /// Normalise `vector` to unit length.
    pub fn manual(vector: &[f64], layer_range: (usize, usize)) -> Result<Self> {
        let n = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidArgument("edit direction must be a nonzero finite vector".into()));
        }
        Ok(Self {
            vector: vector.iter().map(|v| v / n).collect(),
            layer_range,
            source: DirectionSource::Manual,
            explained_variance: None,
        })
    }
}

/// Top-`k` principal components of styles `[n, d]`, variance-ordered.
pub fn pca_from_styles<T: Scalar>(ws: &Tensor<T>, k: usize, layer_range: (usize, usize)) -> Result<Vec<EditDirection>> {
    if ws.ndim() != 2 {
        return Err(Error::Shape(format!("styles must be [n, d], got {:?}", ws.shape())));
    }
    let (n, d) = (ws.shape()[0], ws.shape()[1]);
    if k >= d {
        return Err(Error::OutOfRange { what: "component count", value: k, limit: d });
    }
    if n <= k {
        return Err(Error::InvalidArgument(format!("need more than {k} samples, got {n}")));
    }
    let stats = crate::metrics::compute_feature_stats(ws)?;
    let eig = symmetric_eigen(&stats.covariance.iter().map(|v| v.f64()).collect::<Vec<_>>(), d)?;
    let total: f64 = eig.values.iter().map(|v| v.max(0.0)).sum();
    Ok((0..k)
        .map(|i| EditDirection {
            vector: eig.vectors[i].clone(),
            layer_range,
            source: DirectionSource::Pca,
            explained_variance: Some(if total > 0.0 { eig.values[i].max(0.0) / total } else { 0.0 }),
        })
        .collect())
}

/// Principal directions of `n_samples` mapped styles over random classes.
pub fn pca_directions<T: Scalar, R: Rng + ?Sized>(
    gen: &Generator<T>,
    class_vectors: &Tensor<T>,
    n_samples: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<EditDirection>> {
    let d = gen.config.w_dim;
    if k >= d {
        return Err(Error::OutOfRange { what: "component count", value: k, limit: d });
    }
    let classes = class_vectors.shape()[0];
    let mut rows = Vec::new();
    let mut done = 0;
    while done < n_samples {
        let m = 256.min(n_samples - done);
        let z = Tensor::<T>::randn(&[m, gen.config.z_dim], 1.0, rng);
        let idx: Vec<usize> = (0..m).map(|_| rng.random_range(0..classes)).collect();
        let c = Tensor::stack_outer(&idx.iter().map(|&i| class_vectors.slice_outer(i, 1)).collect::<Vec<_>>());
        rows.push(gen.map_latent(&z, &c)?);
        done += m;
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!("need more than {k} samples, got 0")));
    }
    pca_from_styles(&Tensor::stack_outer(&rows), k, (0, gen.num_ws() - 1))
}

/// Per-layer styles with `strength · dir` added inside its layer range.
pub fn edited_styles<T: Scalar>(w: &Tensor<T>, dir: &EditDirection, strength: f64, num_ws: usize) -> Result<Vec<Tensor<T>>> {
    let (lo, hi) = dir.layer_range;
    if lo > hi || hi >= num_ws {
        return Err(Error::InvalidArgument(format!("layer range {lo}..={hi} invalid for {num_ws} style inputs")));
    }
    let d = dir.vector.len();
    if w.numel() % d != 0 || w.shape().last() != Some(&d) {
        return Err(Error::Shape(format!("style {:?} does not match direction width {d}", w.shape())));
    }
    let mut edited = w.clone();
    for row in edited.data_mut().chunks_mut(d) {
        for (x, v) in row.iter_mut().zip(&dir.vector) {
            *x += T::lit(strength * v);
        }
    }
    Ok((0..num_ws).map(|i| if (lo..=hi).contains(&i) { edited.clone() } else { w.clone() }).collect())
}

/// Synthesise `w` with the edit applied.
pub fn apply_latent_edit<T: Scalar>(w: &Tensor<T>, dir: &EditDirection, strength: f64, gen: &Generator<T>) -> Result<Tensor<T>> {
    let ws = edited_styles(w, dir, strength, gen.num_ws())?;
    gen.synthesize(&ws, &gen.input_grid())
}
