//! Adversarial objective, classifier guidance, delayed path-length
//! regularization and the FID plateau controller.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, Tape, Var};
use crate::classifier::{cross_entropy, ImageClassifier};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adversarial loss family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// Logistic loss with the non-saturating generator objective.
    #[default]
    Logistic,
    Hinge,
    /// Logistic discriminator, literal minimax generator objective
    /// `log(1 - D(G(z)))`.
    Saturating,
}

/// Per-term breakdown of one loss evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub form: LossForm,
    /// One entry per discriminator head, grouped by feature network.
    pub adversarial: Vec<f64>,
    pub guidance: f64,
    pub path_length: f64,
    pub adversarial_total: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(form: LossForm, adversarial: Vec<f64>) -> Self {
        let mut r = Self { form, adversarial, guidance: 0.0, path_length: 0.0, adversarial_total: 0.0, total: 0.0 };
        r.reconcile();
        r
    }

    /// Recompute the totals from the parts.
    pub fn reconcile(&mut self) {
        self.adversarial_total = self.adversarial.iter().sum();
        self.total = self.adversarial_total + self.guidance + self.path_length;
    }

    /// Append another feature network's head terms.
    pub fn extend(&mut self, other: &LossReport) {
        self.adversarial.extend_from_slice(&other.adversarial);
        self.guidance += other.guidance;
        self.path_length += other.path_length;
        self.reconcile();
    }
}

fn check_logits<T: Scalar>(logits: &[Var<'_, T>], what: &str) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::Shape(format!("no {what} logits")));
    }
    for (k, l) in logits.iter().enumerate() {
        if !l.value().all_finite() {
            return Err(Error::NonFinite(format!("{what} logits of discriminator head {k}")));
        }
    }
    Ok(())
}

/// Sum over heads of the spatially averaged discriminator loss.
pub fn discriminator_loss<'t, T: Scalar>(
    real: &[Var<'t, T>],
    fake: &[Var<'t, T>],
    form: LossForm,
) -> Result<(Var<'t, T>, LossReport)> {
    if real.len() != fake.len() {
        return Err(Error::Shape(format!("{} real heads but {} fake heads", real.len(), fake.len())));
    }
    check_logits(real, "real")?;
    check_logits(fake, "fake")?;
    let one = T::one();
    let mut terms = Vec::with_capacity(real.len());
    for (&r, &f) in real.iter().zip(fake) {
        let t = match form {
            LossForm::Logistic | LossForm::Saturating => (-r).softplus().mean() + f.softplus().mean(),
            LossForm::Hinge => (-r).add_scalar(one).relu().mean() + f.add_scalar(one).relu().mean(),
        };
        terms.push(t);
    }
    let report = LossReport::new(form, terms.iter().map(|t| t.item().f64()).collect());
    Ok((sum_vars(&terms), report))
}

/// Sum over heads of the spatially averaged generator loss.
pub fn generator_adversarial_loss<'t, T: Scalar>(fake: &[Var<'t, T>], form: LossForm) -> Result<(Var<'t, T>, LossReport)> {
    check_logits(fake, "fake")?;
    let terms: Vec<_> = fake
        .iter()
        .map(|&f| match form {
            LossForm::Logistic => (-f).softplus().mean(),
            LossForm::Hinge => (-f).mean(),
            LossForm::Saturating => -(f.softplus().mean()),
        })
        .collect();
    let report = LossReport::new(form, terms.iter().map(|t| t.item().f64()).collect());
    Ok((sum_vars(&terms), report))
}

fn sum_vars<'t, T: Scalar>(vars: &[Var<'t, T>]) -> Var<'t, T> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = acc + v;
    }
    acc
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub lambda: f64,
    /// Guidance is active only for stage resolutions strictly above this.
    pub gate_resolution: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { lambda: 8.0, gate_resolution: 32 }
    }
}

/// `λ · mean(-log p_label(image))` above the gate resolution, zero otherwise.
pub fn classifier_guidance_loss<'t, T: Scalar>(
    image: Var<'t, T>,
    labels: &[usize],
    classifier: &dyn ImageClassifier<T>,
    resolution: usize,
    cfg: &GuidanceConfig,
) -> Result<Var<'t, T>> {
    let c = classifier.num_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::OutOfRange { what: "guidance class", value: bad, limit: c });
    }
    if resolution <= cfg.gate_resolution || cfg.lambda == 0.0 {
        return Ok(image.tape().scalar(T::zero()));
    }
    Ok(cross_entropy(classifier.logits(image)?, labels)?.scale(T::lit(cfg.lambda)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathLengthConfig {
    pub weight: f64,
    /// Images seen before the penalty switches on (counted over all stages).
    pub threshold_images: u64,
    /// Decay of the moving target norm.
    pub decay: f64,
    /// Generator steps between evaluations; the penalty is scaled by it.
    pub interval: usize,
    /// The regularization batch is the main batch divided by this.
    pub batch_shrink: usize,
    /// Step along the latent used to differentiate the norm with respect to
    /// the generator parameters.
    pub fd_step: f64,
}

impl Default for PathLengthConfig {
    fn default() -> Self {
        Self { weight: 2.0, threshold_images: 200_000, decay: 0.99, interval: 4, batch_shrink: 2, fd_step: 0.01 }
    }
}

/// Gaussian directions of the given shape, each sample scaled to unit L2 norm.
pub fn sample_image_directions<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n = shape[0];
    let per = shape[1..].iter().product::<usize>();
    let mut data: Vec<f64> = (0..n * per).map(|_| rng.sample(StandardNormal)).collect();
    for row in data.chunks_mut(per) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::new(shape.to_vec(), data.into_iter().map(T::lit).collect())
}

/// `Jᵀy` for every sample of a batch map `g: [N, d] -> [N, ...]`, where `J`
/// is the per-sample Jacobian at `w`. Rows of the result are `[N, d]`.
pub fn jacobian_transpose_products<T, F>(w: &Tensor<T>, y: &Tensor<T>, g: F) -> Result<Tensor<T>>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let wv = tape.param(w.clone());
    let out = g(&tape, wv)?;
    if out.shape() != y.shape() {
        return Err(Error::Shape(format!("map output {:?} does not match direction {:?}", out.shape(), y.shape())));
    }
    let root = (out * tape.constant(y.clone())).sum();
    let jt = tape.backward(root).get_or_zeros(wv);
    if !jt.all_finite() {
        return Err(Error::NonFinite("path-length Jacobian products".into()));
    }
    Ok(jt)
}

/// Row-wise L2 norms of `[N, d]`.
pub fn row_norms<T: Scalar>(x: &Tensor<T>) -> Vec<f64> {
    let d = x.shape()[1];
    x.data().chunks(d).map(|r| r.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()).collect()
}

/// Result of one path-length evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PathLengthOutcome<T: Scalar> {
    /// False before the activation threshold; everything else is then empty.
    pub active: bool,
    /// `mean((‖Jᵀy‖ - a)²)` using the updated `a`; unweighted.
    pub penalty: f64,
    pub norms: Vec<f64>,
    /// `Jᵀy`, `[N, d]`.
    pub products: Tensor<T>,
}

/// Path-length penalty for styles `w` `[N, d]` and unit image directions `y`.
/// The moving target `pl_mean` is updated before the penalty is formed.
pub fn path_length_penalty<T, F>(
    g: F,
    w: &Tensor<T>,
    y: &Tensor<T>,
    images_seen: u64,
    pl_mean: &mut f64,
    cfg: &PathLengthConfig,
) -> Result<PathLengthOutcome<T>>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    if w.ndim() != 2 || w.shape()[0] == 0 {
        return Err(Error::Shape(format!("path-length styles must be a nonempty [N, d] batch, got {:?}", w.shape())));
    }
    if images_seen < cfg.threshold_images {
        return Ok(PathLengthOutcome { active: false, penalty: 0.0, norms: Vec::new(), products: Tensor::zeros(&[0, w.shape()[1]]) });
    }
    let products = jacobian_transpose_products(w, y, g)?;
    let norms = row_norms(&products);
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    *pl_mean += (1.0 - cfg.decay) * (mean - *pl_mean);
    if !pl_mean.is_finite() {
        return Err(Error::NonFinite("path-length moving average".into()));
    }
    let penalty = norms.iter().map(|n| (n - *pl_mean).powi(2)).sum::<f64>() / norms.len() as f64;
    Ok(PathLengthOutcome { active: true, penalty, norms, products })
}

/// Scalar whose gradient with respect to the parameters used inside `g`
/// matches the gradient of the path-length penalty (with `a` and `y` held
/// fixed), up to a central-difference error of order `fd_step²`.
///
/// With `v_n = J_nᵀ y_n`, the penalty gradient is
/// `Σ_n s_n ∂/∂θ ⟨∂⟨g,y⟩/∂w, v̂_n⟩` where `s_n = 2(‖v_n‖ - a)/N`; the inner
/// directional derivative is replaced by a central difference along `v̂_n`.
pub fn path_length_surrogate<'t, T, F>(
    w: Var<'t, T>,
    y: &Tensor<T>,
    outcome: &PathLengthOutcome<T>,
    pl_mean: f64,
    fd_step: f64,
    g: F,
) -> Result<Var<'t, T>>
where
    T: Scalar,
    F: FnOnce(Var<'t, T>) -> Result<Var<'t, T>>,
{
    let tape = w.tape();
    if !outcome.active {
        return Ok(tape.scalar(T::zero()));
    }
    let n = outcome.norms.len();
    let d = outcome.products.shape()[1];
    if w.shape() != [n, d] {
        return Err(Error::Shape(format!("styles {:?} do not match the evaluated batch [{n}, {d}]", w.shape())));
    }
    let step = Tensor::from_fn(&[n, d], |i| {
        let norm = outcome.norms[i / d];
        if norm > 0.0 {
            T::lit(fd_step * outcome.products.data()[i].f64() / norm)
        } else {
            T::zero()
        }
    });
    let step = tape.constant(step);
    let out = g(concat(&[w + step, w - step], 0))?;
    let half = out.narrow(0, 0, n) - out.narrow(0, n, n);
    let per = (half * tape.constant(y.clone())).reshape(&[n, y.numel() / n]).sum_axis(1, false);
    let coef = Tensor::from_fn(&[n], |i| T::lit(2.0 * (outcome.norms[i] - pl_mean) / (n as f64 * 2.0 * fd_step)));
    Ok((per * tape.constant(coef)).sum())
}

/// Outcome of one FID observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlateauDecision {
    Improved,
    Stalled,
    /// No improvement for `patience` consecutive evaluations.
    Plateau,
}

/// Ends a stage once FID stops decreasing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauController {
    pub patience: usize,
    /// Relative improvement required to reset the patience counter.
    pub threshold: f64,
    /// Abort when FID exceeds this multiple of the stage minimum.
    pub divergence_factor: f64,
    pub best: Option<f64>,
    pub since_improvement: usize,
    pub evaluations: usize,
}

impl PlateauController {
    pub fn new(patience: usize, threshold: f64, divergence_factor: f64) -> Self {
        Self { patience, threshold, divergence_factor, best: None, since_improvement: 0, evaluations: 0 }
    }

    /// Forget the stage history (after growth).
    pub fn reset(&mut self) {
        self.best = None;
        self.since_improvement = 0;
        self.evaluations = 0;
    }

    pub fn observe(&mut self, fid: f64) -> Result<PlateauDecision> {
        if !fid.is_finite() {
            return Err(Error::Diverged(format!("FID is {fid}")));
        }
        self.evaluations += 1;
        match self.best {
            Some(best) if fid > self.divergence_factor * best => {
                Err(Error::Diverged(format!("FID {fid:.4} exceeds {} x the stage minimum {best:.4}", self.divergence_factor)))
            }
            Some(best) if fid >= best * (1.0 - self.threshold) => {
                self.since_improvement += 1;
                if self.since_improvement >= self.patience {
                    Ok(PlateauDecision::Plateau)
                } else {
                    Ok(PlateauDecision::Stalled)
                }
            }
            _ => {
                self.best = Some(self.best.map_or(fid, |b| b.min(fid)));
                self.since_improvement = 0;
                Ok(PlateauDecision::Improved)
            }
        }
    }
}
