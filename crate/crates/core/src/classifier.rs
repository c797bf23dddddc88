//! Small image classifiers used for guidance, class inference and scoring.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dGeometry, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{conv, Adam, AdamConfig, Bound, Dense, DenseInit, ParamId, ParamStore};
use crate::projector::resize_bilinear;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Anything mapping `[N, 3, H, W]` images to class logits `[N, C]`.
pub trait ImageClassifier<T: Scalar> {
    fn num_classes(&self) -> usize;
    /// Logits with the classifier's own parameters held fixed; gradients
    /// flow to `x` only.
    fn logits<'t>(&self, x: Var<'t, T>) -> Result<Var<'t, T>>;

    /// Softmax probabilities without gradients.
    fn probabilities(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.logits(tape.constant(images.clone()))?.softmax();
        Ok((*p.value()).clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Images are resized to this side before the first convolution.
    pub input_resolution: usize,
    pub channels: [usize; 3],
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { input_resolution: 32, channels: [16, 32, 32], seed: 7 }
    }
}

/// Three stride-2 convolutions, global average pool, linear read-out.
#[derive(Clone, Debug)]
pub struct ToyClassifier<T: Scalar> {
    pub config: ClassifierConfig,
    pub params: ParamStore<T>,
    num_classes: usize,
    convs: Vec<(ParamId, ParamId)>,
    head: Dense,
}

impl<T: Scalar> ToyClassifier<T> {
    pub fn new(config: ClassifierConfig, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument("a classifier needs at least two classes".into()));
        }
        let mut rng = crate::nn::seeded(config.seed);
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &c) in config.channels.iter().enumerate() {
            let w = params.add(
                format!("conv{i}.weight"),
                Tensor::randn(&[c, cin, 3, 3], (2.0 / (9 * cin) as f64).sqrt(), &mut rng),
            );
            let b = params.add(format!("conv{i}.bias"), Tensor::zeros(&[c]));
            convs.push((w, b));
            cin = c;
        }
        let head = Dense::new(&mut params, "head", cin, num_classes, DenseInit::default(), &mut rng);
        Ok(Self { config, params, num_classes, convs, head })
    }

    fn forward<'t>(&self, b: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("classifier expects [N, 3, H, W], got {s:?}")));
        }
        let mut h = resize_bilinear(x, self.config.input_resolution);
        for &(w, bias) in &self.convs {
            h = conv(h, b.var(w), Some(b.var(bias)), Conv2dGeometry { stride: 2, pad: 1 }).relu();
        }
        let c = h.shape()[1];
        let n = s[0];
        let pooled = h.reshape(&[n, c, h.shape()[2] * h.shape()[3]]).mean_axis(2, false);
        Ok(self.head.forward(b, pooled, 1.0))
    }

    /// Cross-entropy training with Adam; returns the final-epoch accuracy on
    /// the training images.
    pub fn fit<R: Rng + ?Sized>(
        &mut self,
        images: &Tensor<T>,
        labels: &[usize],
        epochs: usize,
        batch: usize,
        lr: f64,
        rng: &mut R,
    ) -> Result<f64> {
        let n = images.shape()[0];
        if labels.len() != n {
            return Err(Error::Shape(format!("{n} images but {} labels", labels.len())));
        }
        let mut opt = Adam::new(AdamConfig::defaults(lr));
        let mut order: Vec<usize> = (0..n).collect();
        let mut acc = 0.0;
        for _ in 0..epochs {
            order.shuffle(rng);
            let mut correct = 0;
            for chunk in order.chunks(batch.max(1)) {
                let xb = Tensor::stack_outer(&chunk.iter().map(|&i| images.slice_outer(i, 1)).collect::<Vec<_>>());
                let xb = xb.reshape(&[chunk.len(), 3, images.shape()[2], images.shape()[3]]);
                let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let tape = Tape::new();
                let b = self.params.bind(&tape, true);
                let logits = self.forward(&b, tape.constant(xb))?;
                correct += count_correct(&logits.value(), &yb);
                let loss = cross_entropy(logits, &yb)?;
                let grads = tape.backward(loss);
                opt.step(&mut self.params, &b.gradients(&grads));
            }
            acc = correct as f64 / n as f64;
        }
        Ok(acc)
    }

    /// Fraction of `images` assigned their label.
    pub fn accuracy(&self, images: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let p = self.probabilities(images)?;
        Ok(count_correct(&p, labels) as f64 / labels.len().max(1) as f64)
    }
}

impl<T: Scalar> ImageClassifier<T> for ToyClassifier<T> {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits<'t>(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let b = self.params.bind(x.tape(), false);
        self.forward(&b, x)
    }
}

/// Row-wise argmax.
pub fn argmax_rows<T: Scalar>(scores: &Tensor<T>) -> Vec<usize> {
    let c = scores.shape()[1];
    scores
        .data()
        .chunks(c)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

fn count_correct<T: Scalar>(scores: &Tensor<T>, labels: &[usize]) -> usize {
    argmax_rows(scores).iter().zip(labels).filter(|(a, b)| a == b).count()
}

/// Mean negative log-likelihood of `labels` under `logits` `[N, C]`.
pub fn cross_entropy<'t, T: Scalar>(logits: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let s = logits.shape();
    let (n, c) = (s[0], s[1]);
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} logit rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::OutOfRange { what: "class", value: bad, limit: c });
    }
    let onehot = Tensor::from_fn(&[n, c], |i| if labels[i / c] == i % c { T::one() } else { T::zero() });
    let picked = (logits.log_softmax() * logits.tape().constant(onehot)).sum();
    Ok(picked.scale(-T::one() / T::from_usize_lossy(n)))
}
