//! The training loop: alternating discriminator/generator steps, stage
//! control with growth, evaluation, logging and checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Grads, Tape, Var};
use crate::classifier::{ImageClassifier, ToyClassifier};
use crate::conditioning::{compute_class_embeddings, ClassEmbeddingTable, Conditioning, Side};
use crate::config::RunConfig;
use crate::container::Container;
use crate::data::LabeledImages;
use crate::discriminator::{blur_for_warmup, Discriminator};
use crate::error::{Error, Result};
use crate::generator::{truncate_style, Generator};
use crate::layerspec::{build_growth_schedule_with, GrowthSchedule};
use crate::metrics::{compute_feature_stats, frechet_distance, global_pool, inception_score, precision_recall, FeatureStatistics};
use crate::nn::{seeded, Adam, AdamConfig, Bound, Ema, ParamStore, SeededRng};
use crate::projector::{feature_taps, sample_augmentation, AugmentSample, ProjectedExtractor, ToyCnn, NUM_TAPS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{
    classifier_guidance_loss, discriminator_loss, generator_adversarial_loss, path_length_penalty, path_length_surrogate,
    sample_image_directions, LossReport, PlateauController, PlateauDecision,
};

/// Version of the checkpoint header and log records.
pub const SCHEMA_VERSION: u32 = 1;

/// Counters and stochastic state of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub images_seen: u64,
    pub stage_index: usize,
    pub stage_images: u64,
    /// Moving target `a` of the path-length penalty.
    pub pl_mean: f64,
    pub steps: u64,
    pub next_eval: u64,
    pub epoch: u64,
    pub cursor: usize,
    pub plateau: PlateauController,
    pub finished: bool,
    pub rng: SeededRng,
}

/// Squared gradient mass observed on parameters that must never change.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientAudit {
    pub projection_grad_sq: f64,
    pub projection_checks: u64,
    pub frozen_grad_sq: f64,
    pub frozen_checks: u64,
}

impl GradientAudit {
    fn audit_projections<'t, T: Scalar>(&mut self, extractors: &[ProjectedExtractor<T>], grads: &Grads<T>, pbs: &[Bound<'t, T>]) {
        for (e, pb) in extractors.iter().zip(pbs) {
            let (sq, n) = Self::observe(grads, e.projection.params.ids().map(|id| pb.var(id)));
            self.projection_grad_sq += sq;
            self.projection_checks += n;
        }
    }

    fn observe<'t, T: Scalar>(grads: &Grads<T>, vars: impl Iterator<Item = Var<'t, T>>) -> (f64, u64) {
        let mut sq = 0.0;
        let mut n = 0;
        for v in vars {
            n += 1;
            if let Some(g) = grads.get(v) {
                sq += g.sq_norm().f64();
            }
        }
        (sq, n)
    }
}

/// Metrics of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images_seen: u64,
    pub stage_resolution: usize,
    /// Fréchet distance in the feature space of the random evaluation network.
    pub fid: f64,
    pub is: Option<f64>,
    pub precision: f64,
    pub recall: f64,
}

/// Feature extraction for the training-time metrics.
pub struct Evaluator<T: Scalar> {
    pub network: ToyCnn<T>,
    pub samples: usize,
    pub seed: u64,
    pub k: usize,
}

impl<T: Scalar> Evaluator<T> {
    pub fn new(cfg: &crate::config::MetricsConfig) -> Result<Self> {
        Ok(Self { network: ToyCnn::new(&cfg.rfid_network)?, samples: cfg.eval_samples, seed: cfg.eval_seed, k: cfg.pr_k })
    }

    /// Globally pooled deepest tap, `[N, d]`.
    pub fn features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let n = images.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let m = 64.min(n - start);
            let taps = feature_taps(&self.network, &images.slice_outer(start, m))?;
            parts.push(global_pool(&taps[NUM_TAPS - 1]));
            start += m;
        }
        Ok(Tensor::stack_outer(&parts))
    }
}

/// Networks and optimiser state saved in a checkpoint.
#[derive(Clone, Debug)]
pub struct Models<T: Scalar> {
    pub generator: Generator<T>,
    pub generator_ema: Generator<T>,
    pub conditioning: Conditioning<T>,
    pub discriminators: Vec<Discriminator<T>>,
    pub classifier: Option<ToyClassifier<T>>,
    pub opt_g: Adam<T>,
    pub opt_d: Vec<Adam<T>>,
    pub opt_cond_g: Adam<T>,
    pub opt_cond_d: Adam<T>,
}

/// Images for `labels` from `gen`, optionally truncated towards each class's mean style.
pub fn generate_images<T: Scalar, R: Rng + ?Sized>(
    gen: &Generator<T>,
    cond: &Conditioning<T>,
    labels: &[usize],
    psi: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let mut means = std::collections::BTreeMap::new();
    if psi != 1.0 {
        for &l in labels {
            if let std::collections::btree_map::Entry::Vacant(e) = means.entry(l) {
                e.insert(class_mean_style(gen, cond, l)?);
            }
        }
    }
    let d = gen.config.w_dim;
    let mut parts = Vec::new();
    for chunk in labels.chunks(32) {
        let z = Tensor::<T>::randn(&[chunk.len(), gen.config.z_dim], 1.0, rng);
        let c = cond.embed(chunk, Side::Generator)?;
        let mut w = gen.map_latent(&z, &c)?;
        if psi != 1.0 {
            for (row, l) in w.data_mut().chunks_mut(d).zip(chunk) {
                let t = truncate_style(&Tensor::new(vec![1, d], row.to_vec()), &means[l], psi);
                row.copy_from_slice(t.data());
            }
        }
        parts.push(gen.synthesize_w(&w)?);
    }
    if parts.is_empty() {
        return Err(Error::InvalidArgument("no labels to generate".into()));
    }
    Ok(Tensor::stack_outer(&parts))
}

/// Draws behind each per-class mean style used for truncation.
pub const CLASS_MEAN_SAMPLES: usize = 4096;

/// Mean style of one class, from a fixed stream so it does not depend on the
/// caller's generator state.
pub fn class_mean_style<T: Scalar>(gen: &Generator<T>, cond: &Conditioning<T>, class: usize) -> Result<Tensor<T>> {
    let c = cond.embed(&[class], Side::Generator)?.reshape(&[gen.config.c_dim]);
    gen.compute_mean_style(CLASS_MEAN_SAMPLES, 256, &mut seeded(0x5EED_0000 + class as u64), |_| c.clone())
}

fn adam<T: Scalar>(cfg: &RunConfig, lr: f64) -> Adam<T> {
    Adam::new(AdamConfig { lr, beta1: cfg.optim.beta1, beta2: cfg.optim.beta2, eps: cfg.optim.eps })
}

fn build_extractors<T: Scalar>(cfg: &RunConfig) -> Result<Vec<ProjectedExtractor<T>>> {
    cfg.extractors.iter().map(|e| e.build()).collect()
}

/// Generator, discriminators and optimisers for a fresh run (or for
/// restoring one whose tensors are then overwritten).
fn build_models<T: Scalar>(
    cfg: &RunConfig,
    schedule: &GrowthSchedule<T>,
    extractors: &[ProjectedExtractor<T>],
    table: ClassEmbeddingTable<T>,
    classifier: Option<ToyClassifier<T>>,
    rng: &mut SeededRng,
) -> Result<Models<T>> {
    let generator = Generator::new(cfg.generator.clone(), schedule.stages[0].resolution, schedule.per_stage_specs[0].clone(), rng)?;
    let conditioning = Conditioning::new(table, cfg.generator.c_dim, cfg.conditioning.normalize, rng);
    let discriminators = extractors
        .iter()
        .map(|e| Discriminator::new(cfg.discriminator.clone(), e.feature_shapes(), "", rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Models {
        generator_ema: generator.clone(),
        generator,
        conditioning,
        opt_d: discriminators.iter().map(|_| adam(cfg, cfg.optim.d_lr)).collect(),
        discriminators,
        classifier,
        opt_g: adam(cfg, cfg.optim.g_lr),
        opt_cond_g: adam(cfg, cfg.optim.g_lr),
        opt_cond_d: adam(cfg, cfg.optim.d_lr),
    })
}

/// Replace the generator by its grown successor for `stage`; the stem and
/// mapping network come back frozen.
fn grow_models<T: Scalar>(m: &mut Models<T>, cfg: &RunConfig, schedule: &GrowthSchedule<T>, stage: usize, rng: &mut SeededRng) -> Result<()> {
    let grown = m.generator.grow(&schedule.stages[stage], &schedule.per_stage_specs[stage], rng)?;
    m.generator = grown;
    m.generator_ema = m.generator.clone();
    m.opt_g = adam(cfg, cfg.optim.g_lr);
    Ok(())
}

pub struct Trainer<T: Scalar> {
    pub config: RunConfig,
    pub schedule: GrowthSchedule<T>,
    pub state: TrainingState,
    pub models: Models<T>,
    pub class_names: Vec<String>,
    pub extractors: Vec<ProjectedExtractor<T>>,
    pub evaluator: Evaluator<T>,
    pub audit: GradientAudit,
    /// Every log record written so far.
    pub log: Vec<serde_json::Value>,
    pub log_path: Option<PathBuf>,
    /// Loss reports of the most recent step.
    pub last_losses: Option<(LossReport, LossReport)>,
    data: LabeledImages<T>,
    stage_data: LabeledImages<T>,
    order: Option<(u64, Vec<usize>)>,
    real_features: Option<(usize, Tensor<T>, FeatureStatistics<T>)>,
}

impl<T: Scalar> Trainer<T> {
    /// Set up a run on `data` (images at the final resolution or above).
    pub fn new(config: RunConfig, data: LabeledImages<T>) -> Result<Self> {
        config.validate()?;
        if let Some(k) = config.class_count {
            if k != data.class_count() {
                return Err(Error::Config {
                    path: "class_count".into(),
                    message: format!("config says {k} classes, dataset has {}", data.class_count()),
                });
            }
        }
        if data.class_count() < 2 {
            return Err(Error::Dataset("at least two classes are required".into()));
        }
        let schedule = build_growth_schedule_with(config.start_resolution, config.final_resolution, &config.schedule)?;
        let data = data.downsampled(config.final_resolution)?;
        let mut rng = seeded(config.seed);
        let extractors = build_extractors(&config)?;
        let classifier = if config.classifier.enabled {
            let c = &config.classifier;
            let mut clf = ToyClassifier::new(c.model.clone(), data.class_count())?;
            let mut crng = seeded(config.seed ^ 0xC1A5_5EED);
            let acc = clf.fit(&data.images, &data.labels, c.epochs, c.batch, c.lr, &mut crng)?;
            log::info!("guidance classifier training accuracy {acc:.3}");
            Some(clf)
        } else {
            None
        };
        let net = extractors[config.conditioning.extractor].network.as_ref();
        let mut table = compute_class_embeddings(&data.images, &data.labels, data.class_count(), net, config.conditioning.batch)?;
        if config.conditioning.center {
            table = table.centered();
        }
        let models = build_models(&config, &schedule, &extractors, table, classifier, &mut rng)?;
        let state = TrainingState {
            images_seen: 0,
            stage_index: 0,
            stage_images: 0,
            pl_mean: 0.0,
            steps: 0,
            next_eval: config.training.eval_interval_images,
            epoch: 0,
            cursor: 0,
            plateau: PlateauController::new(
                config.training.plateau_patience,
                config.training.plateau_threshold,
                config.training.divergence_factor,
            ),
            finished: false,
            rng,
        };
        Self::assemble(config, schedule, state, models, data, extractors)
    }

    fn assemble(
        config: RunConfig,
        schedule: GrowthSchedule<T>,
        state: TrainingState,
        models: Models<T>,
        data: LabeledImages<T>,
        extractors: Vec<ProjectedExtractor<T>>,
    ) -> Result<Self> {
        let evaluator = Evaluator::new(&config.metrics)?;
        let stage_data = data.downsampled(schedule.stages[state.stage_index].resolution)?;
        Ok(Self {
            class_names: data.class_names.clone(),
            config,
            schedule,
            state,
            models,
            extractors,
            evaluator,
            audit: GradientAudit::default(),
            log: Vec::new(),
            log_path: None,
            last_losses: None,
            data,
            stage_data,
            order: None,
            real_features: None,
        })
    }

    /// Continue a checkpointed run on the same dataset.
    pub fn resume(ckpt: Checkpoint<T>, data: LabeledImages<T>) -> Result<Self> {
        if data.class_count() != ckpt.class_names.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} classes, dataset has {}",
                ckpt.class_names.len(),
                data.class_count()
            )));
        }
        let data = data.downsampled(ckpt.config.final_resolution)?;
        let extractors = build_extractors(&ckpt.config)?;
        Self::assemble(ckpt.config, ckpt.schedule, ckpt.state, ckpt.models, data, extractors)
    }

    /// Append log records to `path` (JSON lines).
    pub fn with_log_file(mut self, path: impl Into<PathBuf>) -> Self {
        self.log_path = Some(path.into());
        self
    }

    pub fn stage_resolution(&self) -> usize {
        self.schedule.stages[self.state.stage_index].resolution
    }

    pub fn batch_size(&self) -> usize {
        self.config.batch_size.unwrap_or(self.schedule.stages[self.state.stage_index].batch_size)
    }

    pub fn stage_data(&self) -> &LabeledImages<T> {
        &self.stage_data
    }

    fn next_real_batch(&mut self, n: usize) -> (Tensor<T>, Vec<usize>) {
        let len = self.stage_data.len();
        let mut idx = Vec::with_capacity(n);
        while idx.len() < n {
            if self.state.cursor >= len {
                self.state.epoch += 1;
                self.state.cursor = 0;
            }
            let epoch = self.state.epoch;
            if self.order.as_ref().map(|o| o.0) != Some(epoch) {
                self.order = Some((epoch, self.stage_data.epoch_order(self.config.seed, epoch)));
            }
            let order = &self.order.as_ref().expect("order cached").1;
            let take = (n - idx.len()).min(len - self.state.cursor);
            idx.extend_from_slice(&order[self.state.cursor..self.state.cursor + take]);
            self.state.cursor += take;
        }
        self.stage_data.batch(&idx)
    }

    fn random_labels(&mut self, n: usize) -> Vec<usize> {
        let k = self.class_names.len();
        (0..n).map(|_| self.state.rng.random_range(0..k)).collect()
    }

    fn augmentations(&mut self, n_real: usize, n_fake: usize) -> Vec<AugmentSample> {
        let res = self.stage_resolution();
        let cfg = &self.config.augment;
        let mut a = sample_augmentation(cfg, n_real + n_fake, res, &mut self.state.rng);
        if !cfg.augment_fakes {
            for s in &mut a[n_real..] {
                *s = AugmentSample::identity();
            }
        }
        a
    }

    /// One discriminator update.
    pub fn discriminator_step(&mut self) -> Result<LossReport> {
        let n = self.batch_size();
        let (real, real_labels) = self.next_real_batch(n);
        let fake_labels = self.random_labels(n);
        let fake = {
            let m = &self.models;
            let z = Tensor::<T>::randn(&[n, m.generator.config.z_dim], 1.0, &mut self.state.rng);
            let c = m.conditioning.embed(&fake_labels, Side::Generator)?;
            m.generator.synthesize_w(&m.generator.map_latent(&z, &c)?)?
        };
        let aug = self.augmentations(n, n);
        for d in &mut self.models.discriminators {
            d.update_spectral_state();
        }
        let labels: Vec<usize> = real_labels.iter().chain(&fake_labels).copied().collect();

        let tape = Tape::new();
        let m = &self.models;
        let cb = m.conditioning.params.bind(&tape, true);
        let cvec = m.conditioning.embed_var(&cb, &labels, Side::Discriminator)?;
        let x = blur_for_warmup(tape.constant(Tensor::stack_outer(&[real, fake])), self.state.images_seen, &self.config.blur)?;
        let dbs: Vec<_> = m.discriminators.iter().map(|d| d.params.bind(&tape, true)).collect();
        let pbs: Vec<_> = self.extractors.iter().map(|e| e.projection.params.bind(&tape, false)).collect();
        let mut total: Option<Var<'_, T>> = None;
        let mut report: Option<LossReport> = None;
        for ((e, d), (db, pb)) in self.extractors.iter().zip(&m.discriminators).zip(dbs.iter().zip(&pbs)) {
            let pyr = e.pyramid_bound(x, Some(&aug), pb)?;
            let logits = d.discriminate(db, &pyr, cvec)?;
            let r: Vec<_> = logits.iter().map(|l| l.narrow(0, 0, n)).collect();
            let f: Vec<_> = logits.iter().map(|l| l.narrow(0, n, n)).collect();
            let (l, rep) = discriminator_loss(&r, &f, self.config.loss)?;
            total = Some(total.map_or(l, |t| t + l));
            match &mut report {
                Some(acc) => acc.extend(&rep),
                None => report = Some(rep),
            }
        }
        let total = total.expect("at least one extractor");
        let grads = tape.backward(total);
        self.audit.audit_projections(&self.extractors, &grads, &pbs);
        let d_grads: Vec<_> = dbs.iter().map(|b| b.gradients(&grads)).collect();
        let c_grads = side_gradients(&cb, &grads, &m.conditioning, Side::Discriminator);
        drop(dbs);
        drop(pbs);
        let m = &mut self.models;
        for ((d, opt), g) in m.discriminators.iter_mut().zip(&mut m.opt_d).zip(&d_grads) {
            opt.step(&mut d.params, g);
        }
        m.opt_cond_d.step(&mut m.conditioning.params, &c_grads);
        Ok(report.expect("at least one extractor"))
    }


    /// One generator update, including the lazy path-length step when due.
    pub fn generator_step(&mut self) -> Result<LossReport> {
        let n = self.batch_size();
        let res = self.stage_resolution();
        let labels = self.random_labels(n);
        let z = Tensor::<T>::randn(&[n, self.models.generator.config.z_dim], 1.0, &mut self.state.rng);
        let aug = self.augmentations(0, n);
        let d_class = self.models.conditioning.embed(&labels, Side::Discriminator)?;

        let tape = Tape::new();
        let m = &self.models;
        let g = &m.generator;
        let gb = g.params.bind(&tape, true);
        let cb = m.conditioning.params.bind(&tape, true);
        let c = m.conditioning.embed_var(&cb, &labels, Side::Generator)?;
        let w = g.map_var(&gb, tape.constant(z), c)?;
        let img = g.synthesize_var(&gb, &[w], &g.input_grid())?;
        let x = blur_for_warmup(img, self.state.images_seen, &self.config.blur)?;
        let cvec = tape.constant(d_class);
        let pbs: Vec<_> = self.extractors.iter().map(|e| e.projection.params.bind(&tape, false)).collect();
        let mut adv: Option<Var<'_, T>> = None;
        let mut report: Option<LossReport> = None;
        for ((e, d), pb) in self.extractors.iter().zip(&m.discriminators).zip(&pbs) {
            let db = d.params.bind(&tape, false);
            let pyr = e.pyramid_bound(x, Some(&aug), pb)?;
            let logits = d.discriminate(&db, &pyr, cvec)?;
            let (l, rep) = generator_adversarial_loss(&logits, self.config.loss)?;
            adv = Some(adv.map_or(l, |t| t + l));
            match &mut report {
                Some(acc) => acc.extend(&rep),
                None => report = Some(rep),
            }
        }
        let mut report = report.expect("at least one extractor");
        let guidance = match &m.classifier {
            Some(clf) => classifier_guidance_loss(img, &labels, clf as &dyn ImageClassifier<T>, res, &self.config.guidance)?,
            None => tape.scalar(T::zero()),
        };
        report.guidance = guidance.item().f64();
        report.reconcile();
        let loss = adv.expect("at least one extractor") + guidance;
        let grads = tape.backward(loss);
        self.audit.audit_projections(&self.extractors, &grads, &pbs);
        let frozen: Vec<_> = g.params.ids().filter(|&id| g.params.is_frozen(id)).map(|id| gb.var(id)).collect();
        let (sq, cnt) = GradientAudit::observe(&grads, frozen.into_iter());
        self.audit.frozen_grad_sq += sq;
        self.audit.frozen_checks += cnt;
        let g_grads = gb.gradients(&grads);
        let c_grads = side_gradients(&cb, &grads, &m.conditioning, Side::Generator);
        let wv = w.value();
        let w_mean = wv.reduce_to(&[wv.shape()[1]]).scale(T::lit(1.0 / n as f64));
        drop(pbs);
        let m = &mut self.models;
        m.opt_g.step(&mut m.generator.params, &g_grads);
        m.opt_cond_g.step(&mut m.conditioning.params, &c_grads);
        let beta = T::lit(0.995);
        for (a, &b) in m.generator.w_avg.data_mut().iter_mut().zip(w_mean.data()) {
            *a = b + beta * (*a - b);
        }

        let plc = &self.config.path_length;
        if self.state.steps % plc.interval as u64 == 0 && self.state.images_seen >= plc.threshold_images {
            report.path_length = self.path_length_step(n)?;
            report.reconcile();
        }
        Ok(report)
    }

    /// Returns the weighted penalty value.
    fn path_length_step(&mut self, batch: usize) -> Result<f64> {
        let n = (batch / self.config.path_length.batch_shrink).max(1);
        let res = self.stage_resolution();
        let labels = self.random_labels(n);
        let g = &self.models.generator;
        let z = Tensor::<T>::randn(&[n, g.config.z_dim], 1.0, &mut self.state.rng);
        let w = g.map_latent(&z, &self.models.conditioning.embed(&labels, Side::Generator)?)?;
        let y = sample_image_directions::<T, _>(&[n, 3, res, res], &mut self.state.rng);
        let grid = g.input_grid();
        let cfg = self.config.path_length.clone();
        let outcome = path_length_penalty(
            |tape: &Tape<T>, wv: Var<'_, T>| {
                let b = g.params.bind(tape, false);
                g.synthesize_var(&b, &[wv], &grid)
            },
            &w,
            &y,
            self.state.images_seen,
            &mut self.state.pl_mean,
            &cfg,
        )?;
        if !outcome.active {
            return Ok(0.0);
        }
        let tape = Tape::new();
        let gb = g.params.bind(&tape, true);
        let sur = path_length_surrogate(tape.constant(w), &y, &outcome, self.state.pl_mean, cfg.fd_step, |x| {
            g.synthesize_var(&gb, &[x], &grid)
        })?;
        let loss = sur.scale(T::lit(cfg.weight * cfg.interval as f64));
        let grads = tape.backward(loss);
        let gg = gb.gradients(&grads);
        let m = &mut self.models;
        m.opt_g.step(&mut m.generator.params, &gg);
        Ok(cfg.weight * outcome.penalty)
    }

    fn update_ema(&mut self) {
        let batch = self.batch_size();
        let decay = self.config.ema.decay(batch, self.state.images_seen);
        let m = &mut self.models;
        let mut ema = Ema { shadow: std::mem::take(&mut m.generator_ema.params) };
        ema.update(&m.generator.params, decay);
        m.generator_ema.params = ema.shadow;
        m.generator_ema.w_avg = m.generator.w_avg.clone();
    }

    /// One discriminator step followed by one generator step.
    pub fn step(&mut self) -> Result<(LossReport, LossReport)> {
        let d = self.discriminator_step()?;
        let g = self.generator_step()?;
        let n = self.batch_size() as u64;
        self.state.steps += 1;
        self.state.images_seen += n;
        self.state.stage_images += n;
        self.update_ema();
        self.last_losses = Some((d.clone(), g.clone()));
        Ok((d, g))
    }

    fn real_stats(&mut self) -> Result<(Tensor<T>, FeatureStatistics<T>)> {
        let res = self.stage_resolution();
        if let Some((r, f, s)) = &self.real_features {
            if *r == res {
                return Ok((f.clone(), s.clone()));
            }
        }
        let n = self.stage_data.len().min(self.evaluator.samples);
        let mut order = self.stage_data.epoch_order(self.evaluator.seed, u64::MAX);
        order.truncate(n);
        let (imgs, _) = self.stage_data.batch(&order);
        let f = self.evaluator.features(&imgs)?;
        let s = compute_feature_stats(&f)?;
        self.real_features = Some((res, f.clone(), s.clone()));
        Ok((f, s))
    }

    /// Metrics of `gen` against the current stage's real images.
    pub fn evaluate_generator(&mut self, gen: &Generator<T>, psi: f64, seed: u64) -> Result<EvalReport> {
        let (real_f, real_s) = self.real_stats()?;
        let k = self.class_names.len();
        let labels: Vec<usize> = (0..self.evaluator.samples).map(|i| i % k).collect();
        let mut rng = seeded(seed);
        let imgs = generate_images(gen, &self.models.conditioning, &labels, psi, &mut rng)?;
        let f = self.evaluator.features(&imgs)?;
        let fid = frechet_distance(&real_s, &compute_feature_stats(&f)?)?;
        let is = match &self.models.classifier {
            Some(c) => Some(inception_score(&c.probabilities(&imgs)?)?),
            None => None,
        };
        let kk = self.evaluator.k.min(real_f.shape()[0].min(f.shape()[0]).saturating_sub(1)).max(1);
        let (precision, recall) = precision_recall(&real_f, &f, kk)?;
        Ok(EvalReport { images_seen: self.state.images_seen, stage_resolution: gen.resolution, fid, is, precision, recall })
    }

    /// Evaluate the moving-average generator and log the result.
    pub fn evaluate(&mut self) -> Result<EvalReport> {
        let g = self.models.generator_ema.clone();
        let report = self.evaluate_generator(&g, 1.0, self.evaluator.seed)?;
        let losses = self.last_losses.as_ref().map(|(d, g)| json!({ "discriminator": d, "generator": g }));
        self.write_log(json!({
            "schema": SCHEMA_VERSION,
            "event": "eval",
            "images_seen": report.images_seen,
            "stage_resolution": report.stage_resolution,
            "fid": report.fid,
            "is": report.is,
            "precision": report.precision,
            "recall": report.recall,
            "pl_mean": self.state.pl_mean,
            "losses": losses,
        }))?;
        Ok(report)
    }

    fn write_log(&mut self, record: serde_json::Value) -> Result<()> {
        if let Some(p) = &self.log_path {
            if let Some(dir) = p.parent() {
                if !dir.as_os_str().is_empty() {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
            }
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "{record}").map_err(|e| Error::io(p, e))?;
        }
        self.log.push(record);
        Ok(())
    }

    /// Move to the next stage of the schedule.
    pub fn grow(&mut self) -> Result<()> {
        let next = self.state.stage_index + 1;
        if next >= self.schedule.stages.len() {
            return Err(Error::InvalidArgument("already at the final stage".into()));
        }
        grow_models(&mut self.models, &self.config, &self.schedule, next, &mut self.state.rng)?;
        self.state.stage_index = next;
        self.state.stage_images = 0;
        self.state.plateau.reset();
        self.state.cursor = 0;
        self.order = None;
        self.stage_data = self.data.downsampled(self.stage_resolution())?;
        let rec = json!({
            "schema": SCHEMA_VERSION,
            "event": "growth",
            "images_seen": self.state.images_seen,
            "stage_resolution": self.stage_resolution(),
            "layers": self.models.generator.num_layers(),
            "trainable_scalars": self.models.generator.params.trainable_ids().map(|id| self.models.generator.params.get(id).numel()).sum::<usize>(),
        });
        self.write_log(rec)
    }

    /// Train the current stage until the FID plateaus or the image cap is
    /// reached; returns the evaluations made.
    pub fn run_stage(&mut self, checkpoint: Option<&Path>) -> Result<Vec<EvalReport>> {
        let mut evals = Vec::new();
        let cap = self.config.training.max_stage_images;
        loop {
            self.step()?;
            let capped = cap.is_some_and(|c| self.state.stage_images >= c);
            if self.state.images_seen >= self.state.next_eval || capped {
                self.state.next_eval = self.state.images_seen + self.config.training.eval_interval_images;
                let r = self.evaluate()?;
                let decision = self.state.plateau.observe(r.fid)?;
                evals.push(r);
                if let (Some(p), true) = (checkpoint, self.config.training.checkpoint_every_eval) {
                    self.save_checkpoint(p)?;
                }
                if decision == PlateauDecision::Plateau || capped {
                    return Ok(evals);
                }
            }
        }
    }

    /// Run every remaining stage, growing in between.
    pub fn train(&mut self, checkpoint: Option<&Path>) -> Result<Vec<EvalReport>> {
        let mut all = Vec::new();
        while !self.state.finished {
            all.extend(self.run_stage(checkpoint)?);
            if self.state.stage_index + 1 < self.schedule.stages.len() {
                self.grow()?;
            } else {
                self.state.finished = true;
            }
        }
        if let Some(p) = checkpoint {
            self.save_checkpoint(p)?;
        }
        Ok(all)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            state: self.state.clone(),
            class_names: self.class_names.clone(),
            models: self.models.clone(),
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }
}

fn side_gradients<'t, T: Scalar>(
    b: &Bound<'t, T>,
    grads: &Grads<T>,
    cond: &Conditioning<T>,
    side: Side,
) -> Vec<(crate::nn::ParamId, Tensor<T>)> {
    let allowed = cond.side_param_ids(side);
    b.gradients(grads).into_iter().filter(|(id, _)| allowed.contains(id)).collect()
}

/// Everything needed to resume a run or use its networks.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub config: RunConfig,
    pub schedule: GrowthSchedule<T>,
    pub state: TrainingState,
    pub class_names: Vec<String>,
    pub models: Models<T>,
}

fn push_store<T: Scalar>(c: &mut Container, prefix: &str, store: &ParamStore<T>) {
    for e in store.entries() {
        c.push(format!("{prefix}{}", e.name), &e.value);
    }
}

fn push_adam<T: Scalar>(c: &mut Container, prefix: &str, opt: &Adam<T>) {
    let mut names: Vec<_> = opt.moments.keys().cloned().collect();
    names.sort();
    for n in names {
        let (m, v) = &opt.moments[&n];
        c.push(format!("{prefix}.m.{n}"), m);
        c.push(format!("{prefix}.v.{n}"), v);
    }
}

fn load_adam<T: Scalar>(c: &Container, prefix: &str, opt: &mut Adam<T>, step: u64) -> Result<()> {
    opt.step = step;
    opt.moments.clear();
    let ms = c.with_prefix::<T>(&format!("{prefix}.m."))?;
    for (name, m) in ms {
        let v = c.tensor::<T>(&format!("{prefix}.v.{name}"))?;
        opt.moments.insert(name, (m, v));
    }
    Ok(())
}

fn frozen_names<T: Scalar>(store: &ParamStore<T>) -> Vec<String> {
    store.entries().iter().filter(|e| e.frozen).map(|e| e.name.clone()).collect()
}

fn apply_frozen<T: Scalar>(store: &mut ParamStore<T>, names: &[String]) {
    for id in store.ids().collect::<Vec<_>>() {
        let f = names.iter().any(|n| n == store.name(id));
        store.set_frozen(id, f);
    }
}

fn load_store<T: Scalar>(c: &Container, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
    let named = c.with_prefix::<T>(prefix)?;
    if named.len() != store.len() {
        return Err(Error::Checkpoint(format!("`{prefix}` has {} tensors, expected {}", named.len(), store.len())));
    }
    store.load_from(&named)
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let m = &self.models;
        let header = json!({
            "kind": "training_checkpoint",
            "schema": SCHEMA_VERSION,
            "config": self.config,
            "schedule": self.schedule,
            "state": self.state,
            "class_names": self.class_names,
            "has_classifier": m.classifier.is_some(),
            "frozen": {
                "generator": frozen_names(&m.generator.params),
                "conditioning": frozen_names(&m.conditioning.params),
            },
            "optimizer_steps": {
                "g": m.opt_g.step,
                "d": m.opt_d.iter().map(|o| o.step).collect::<Vec<_>>(),
                "cond_g": m.opt_cond_g.step,
                "cond_d": m.opt_cond_d.step,
            },
        });
        let mut c = Container::new(header);
        push_store(&mut c, "G.", &m.generator.params);
        c.push("state.G.w_avg", &m.generator.w_avg);
        push_store(&mut c, "G_ema.", &m.generator_ema.params);
        c.push("state.G_ema.w_avg", &m.generator_ema.w_avg);
        push_store(&mut c, "cond.", &m.conditioning.params);
        for (e, d) in m.discriminators.iter().enumerate() {
            push_store(&mut c, &format!("D{e}."), &d.params);
            for (name, t) in d.state_tensors() {
                c.push(format!("state.D{e}.{name}"), &t);
            }
        }
        if let Some(clf) = &m.classifier {
            push_store(&mut c, "C.", &clf.params);
        }
        push_adam(&mut c, "opt.G", &m.opt_g);
        for (e, o) in m.opt_d.iter().enumerate() {
            push_adam(&mut c, &format!("opt.D{e}"), o);
        }
        push_adam(&mut c, "opt.cond_g", &m.opt_cond_g);
        push_adam(&mut c, "opt.cond_d", &m.opt_cond_d);
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        Self::from_container(&c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let h = &c.header;
        if h.get("kind").and_then(|v| v.as_str()) != Some("training_checkpoint") {
            return Err(Error::Checkpoint("not a training checkpoint".into()));
        }
        let schema = h.get("schema").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if schema != SCHEMA_VERSION {
            return Err(Error::Version { found: schema, expected: SCHEMA_VERSION });
        }
        let field = |k: &str| h.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("header lacks `{k}`")));
        let config: RunConfig = serde_json::from_value(field("config")?)?;
        let schedule: GrowthSchedule<T> = serde_json::from_value(field("schedule")?)?;
        let state: TrainingState = serde_json::from_value(field("state")?)?;
        let class_names: Vec<String> = serde_json::from_value(field("class_names")?)?;
        let has_classifier = h.get("has_classifier").and_then(|v| v.as_bool()).unwrap_or(false);
        let extractors = build_extractors::<T>(&config)?;
        let d_e = extractors[config.conditioning.extractor].network.tap_channels()[NUM_TAPS - 1];
        let table = ClassEmbeddingTable { embeddings: Tensor::zeros(&[class_names.len(), d_e]), source: String::new() };
        let classifier = if has_classifier {
            Some(ToyClassifier::new(config.classifier.model.clone(), class_names.len())?)
        } else {
            None
        };
        let mut rng = seeded(0);
        let mut m = build_models(&config, &schedule, &extractors, table, classifier, &mut rng)?;
        m.conditioning.source = extractors[config.conditioning.extractor].network.name().to_string();
        for s in 1..=state.stage_index {
            grow_models(&mut m, &config, &schedule, s, &mut rng)?;
        }
        load_store(c, "G.", &mut m.generator.params)?;
        load_store(c, "G_ema.", &mut m.generator_ema.params)?;
        m.generator.w_avg = c.tensor("state.G.w_avg")?;
        m.generator_ema.w_avg = c.tensor("state.G_ema.w_avg")?;
        load_store(c, "cond.", &mut m.conditioning.params)?;
        for (e, d) in m.discriminators.iter_mut().enumerate() {
            let named: Vec<_> = c.with_prefix::<T>(&format!("D{e}."))?;
            if named.len() != d.params.len() {
                return Err(Error::Checkpoint(format!("discriminator {e} tensor count mismatch")));
            }
            d.params.load_from(&named)?;
            d.load_state_tensors(&c.with_prefix::<T>(&format!("state.D{e}."))?)?;
        }
        if let Some(clf) = &mut m.classifier {
            load_store(c, "C.", &mut clf.params)?;
        }
        let frozen = field("frozen")?;
        let names = |k: &str| -> Result<Vec<String>> { Ok(serde_json::from_value(frozen.get(k).cloned().unwrap_or_default())?) };
        apply_frozen(&mut m.generator.params, &names("generator")?);
        apply_frozen(&mut m.generator_ema.params, &names("generator")?);
        apply_frozen(&mut m.conditioning.params, &names("conditioning")?);
        let steps = field("optimizer_steps")?;
        let step = |k: &str| steps.get(k).and_then(|v| v.as_u64()).unwrap_or(0);
        load_adam(c, "opt.G", &mut m.opt_g, step("g"))?;
        for (e, o) in m.opt_d.iter_mut().enumerate() {
            let s = steps.get("d").and_then(|v| v.get(e)).and_then(|v| v.as_u64()).unwrap_or(0);
            load_adam(c, &format!("opt.D{e}"), o, s)?;
        }
        load_adam(c, "opt.cond_g", &mut m.opt_cond_g, step("cond_g"))?;
        load_adam(c, "opt.cond_d", &mut m.opt_cond_d, step("cond_d"))?;
        Ok(Self { config, schedule, state, class_names, models: m })
    }
}
