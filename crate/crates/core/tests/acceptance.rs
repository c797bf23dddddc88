//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::Rng;
use scalegan::autodiff::{Tape, Var};
use scalegan::classifier::{ClassifierConfig, ImageClassifier, ToyClassifier};
use scalegan::conditioning::Side;
use scalegan::config::RunConfig;
use scalegan::data::synthetic_shapes;
use scalegan::discriminator::spectral_normalize;
use scalegan::generator::{FilterMode, Generator, GeneratorConfig};
use scalegan::inversion::{invert_latent, pivotal_tune, InversionConfig, PtiConfig};
use scalegan::layerspec::build_growth_schedule;
use scalegan::metrics::*;
use scalegan::nn::seeded;
use scalegan::projector::ExtractorConfig;
use scalegan::trainer::{generate_images, Trainer};
use scalegan::training::*;
use scalegan::{Result, Tensor};

type F = f32;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Runs one criterion, turning panics into failures and reporting wall time.
fn run(id: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
    });
    let took = start.elapsed();
    if let Some(l) = limit {
        if took > l {
            o.pass = false;
            o.detail.push_str(&format!("; over the {l:?} budget"));
        }
    }
    println!("criterion {id:>2} {} {name}: {} ({took:.1?})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

fn schedule_reproduction() -> Outcome {
    let s = build_growth_schedule::<f64>(16, 1024).unwrap();
    let counts = s.layer_counts();
    let critical_tail = s.per_stage_specs.iter().all(|specs| {
        let n = specs.len();
        specs[n - 2].is_critical && specs[n - 1].is_critical && specs[..n - 2].iter().all(|l| !l.is_critical)
    });
    outcome(counts == [11, 16, 21, 26, 31, 36, 39] && critical_tail, format!("layers {counts:?}, critical tail {critical_tail}"))
}

fn diag(mean: &[f64], var: &[f64]) -> FeatureStatistics<f64> {
    let d = mean.len();
    let covariance = (0..d * d).map(|i| if i / d == i % d { var[i / d] } else { 0.0 }).collect();
    FeatureStatistics { mean: mean.to_vec(), covariance, count: 1 }
}

fn frechet_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut rng = seeded(1);
    for _ in 0..20 {
        let d = rng.random_range(1..6);
        let (ma, mb): (Vec<f64>, Vec<f64>) = ((0..d).map(|_| rng.random_range(-2.0..2.0)).collect(), (0..d).map(|_| rng.random_range(-2.0..2.0)).collect());
        let (va, vb): (Vec<f64>, Vec<f64>) = ((0..d).map(|_| rng.random_range(0.1..4.0)).collect(), (0..d).map(|_| rng.random_range(0.1..4.0)).collect());
        let want: f64 = (0..d).map(|i| (ma[i] - mb[i]).powi(2) + (va[i].sqrt() - vb[i].sqrt()).powi(2)).sum();
        let got = frechet_distance(&diag(&ma, &va), &diag(&mb, &vb)).unwrap();
        worst = worst.max((got - want).abs());
    }
    let mut sym_ok = true;
    for _ in 0..100 {
        let d = rng.random_range(1..8);
        let stats = |rng: &mut scalegan::nn::SeededRng| {
            let x = Tensor::<f64>::randn(&[d + 4, d], rng.random_range(0.3..2.0), rng).map(|v| v + 0.5);
            compute_feature_stats(&x).unwrap()
        };
        let (a, b) = (stats(&mut rng), stats(&mut rng));
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        sym_ok &= (ab - ba).abs() < 1e-6 * (1.0 + ab) && frechet_distance(&a, &a).unwrap().abs() < 1e-6;
    }
    outcome(worst < 1e-6 && sym_ok, format!("max closed-form error {worst:.2e}, symmetry/zero on 100 pairs {sym_ok}"))
}

fn pr_oracle(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> (f64, f64) {
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let radii = |set: &[Vec<f64>]| -> Vec<f64> {
        (0..set.len())
            .map(|i| {
                let mut ds: Vec<f64> = (0..set.len()).filter(|&j| j != i).map(|j| d2(&set[i], &set[j])).collect();
                ds.sort_by(f64::total_cmp);
                ds[k - 1]
            })
            .collect()
    };
    let cover = |support: &[Vec<f64>], r: &[f64], q: &[Vec<f64>]| {
        q.iter().filter(|x| support.iter().zip(r).any(|(s, rr)| d2(x, s) <= *rr)).count() as f64 / q.len() as f64
    };
    let (rr, rf) = (radii(real), radii(fake));
    (cover(real, &rr, fake), cover(fake, &rf, real))
}

fn precision_recall_oracle() -> Outcome {
    let mut rng = seeded(2);
    let mut mismatches = 0;
    for _ in 0..50 {
        let n = rng.random_range(8..=128);
        let m = rng.random_range(8..=128);
        let d = rng.random_range(1..8);
        let shift = rng.random_range(0.0..1.5);
        let real: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let fake: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0) * 1.2 + shift).collect()).collect();
        let t = |rows: &[Vec<f64>]| Tensor::new(vec![rows.len(), d], rows.iter().flatten().copied().collect());
        for k in [1, 3, 5] {
            if precision_recall(&t(&real), &t(&fake), k).unwrap() != pr_oracle(&real, &fake, k) {
                mismatches += 1;
            }
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches over 150 (instance, k) pairs"))
}

fn inception_score_closed_forms() -> Outcome {
    let same = Tensor::<f64>::from_fn(&[7, 4], |i| [0.1, 0.2, 0.3, 0.4][i % 4]);
    let e1 = (inception_score(&same).unwrap() - 1.0).abs();
    let c = 6;
    let eye = Tensor::<f64>::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
    let ec = (inception_score(&eye).unwrap() - c as f64).abs();
    let mut rng = seeded(3);
    let mut er: f64 = 0.0;
    for _ in 0..20 {
        let (n, c) = (rng.random_range(2..12), rng.random_range(2..8));
        let p: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let r: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = r.iter().sum();
                r.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let mut kl = 0.0;
        for i in 0..n {
            for j in 0..c {
                let marginal: f64 = (0..n).map(|k| p[k][j]).sum::<f64>() / n as f64;
                kl += p[i][j] * (p[i][j].ln() - marginal.ln());
            }
        }
        let oracle = (kl / n as f64).exp();
        let got = inception_score(&Tensor::new(vec![n, c], p.concat())).unwrap();
        er = er.max((got - oracle).abs());
    }
    outcome(e1 < 1e-9 && ec < 1e-9 && er < 1e-9, format!("identical {e1:.1e}, one-hot {ec:.1e}, double loop {er:.1e}"))
}

struct Uniform(usize);

impl ImageClassifier<f64> for Uniform {
    fn num_classes(&self) -> usize {
        self.0
    }
    fn logits<'t>(&self, x: Var<'t, f64>) -> Result<Var<'t, f64>> {
        let n = x.shape()[0];
        Ok(x.tape().constant(Tensor::full(&[n, self.0], -1.7)))
    }
}

fn guidance_correctness() -> Outcome {
    let cfg = GuidanceConfig::default();
    let c = 10;
    let tape = Tape::new();
    let img = tape.constant(Tensor::<f64>::randn(&[4, 3, 8, 8], 1.0, &mut seeded(4)));
    let uniform = classifier_guidance_loss(img, &[0, 3, 9, 4], &Uniform(c), 64, &cfg).unwrap().item();
    let e_uniform = (uniform - 8.0 * (c as f64).ln()).abs();

    let clf = ToyClassifier::<f64>::new(ClassifierConfig { input_resolution: 8, channels: [4, 6, 8], seed: 5 }, 3).unwrap();
    let x0 = Tensor::randn(&[2, 3, 8, 8], 0.7, &mut seeded(6));
    let labels = [2, 0];
    let loss_at = |x: &Tensor<f64>| {
        let tape = Tape::new();
        classifier_guidance_loss(tape.constant(x.clone()), &labels, &clf, 64, &cfg).unwrap().item()
    };
    let tape = Tape::new();
    let xv = tape.leaf(x0.clone(), true);
    let g = tape.backward(classifier_guidance_loss(xv, &labels, &clf, 64, &cfg).unwrap()).get_or_zeros(xv);
    let mut worst: f64 = 0.0;
    let mut rng = seeded(7);
    for _ in 0..12 {
        let idx = [rng.random_range(0..2), rng.random_range(0..3), rng.random_range(0..8), rng.random_range(0..8)];
        let eps = 1e-5;
        let (mut p, mut m) = (x0.clone(), x0.clone());
        p.set(&idx, x0.at(&idx) + eps);
        m.set(&idx, x0.at(&idx) - eps);
        let fd = (loss_at(&p) - loss_at(&m)) / (2.0 * eps);
        let an = g.at(&idx);
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-10));
    }
    let mut gated = true;
    for res in [8, 16, 32] {
        let tape = Tape::new();
        let xv = tape.leaf(x0.clone(), true);
        let loss = classifier_guidance_loss(xv, &labels, &clf, res, &cfg).unwrap();
        gated &= loss.item() == 0.0 && tape.backward(loss).get_or_zeros(xv).max_abs() == 0.0;
    }
    outcome(
        e_uniform < 1e-9 && worst < 1e-3 && gated,
        format!("|L - 8 ln 10| = {e_uniform:.1e}, max FD rel. error {worst:.1e}, zero at <= 32: {gated}"),
    )
}

fn linear_map(m: Tensor<f64>) -> impl for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>> {
    move |tape, w| Ok(w.matmul(tape.constant(m.clone())))
}

fn path_length_regularizer() -> Outcome {
    let cfg = PathLengthConfig::default();
    let m = Tensor::<f64>::randn(&[3, 4], 1.0, &mut seeded(8));
    let w = Tensor::<f64>::randn(&[6, 3], 1.0, &mut seeded(9));
    let y = sample_image_directions::<f64, _>(&[6, 4], &mut seeded(10));
    let mut a = 0.0;
    let mut gated = true;
    for seen in [0, 100_000, 199_999] {
        let out = path_length_penalty(linear_map(m.clone()), &w, &y, seen, &mut a, &cfg).unwrap();
        gated &= !out.active && out.penalty == 0.0;
    }
    let out = path_length_penalty(linear_map(m.clone()), &w, &y, 200_000, &mut a, &cfg).unwrap();
    let mut worst: f64 = 0.0;
    for n in 0..6 {
        // dense Jacobian of w -> w M is Mᵀ; Jᵀy = M y
        let jt: Vec<f64> = (0..3).map(|i| (0..4).map(|o| m.at(&[i, o]) * y.at(&[n, o])).sum()).collect();
        let norm = jt.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max((out.norms[n] - norm).abs());
    }
    outcome(gated && out.active && worst < 1e-4, format!("zero before 200k: {gated}, max |‖Jᵀy‖ - oracle| {worst:.1e}"))
}

fn spectral_normalization() -> Outcome {
    let u = [2.0, -1.0, 2.0, 0.0];
    let v = [1.0, 0.0, 1.0];
    let w: Vec<f64> = (0..12).map(|i| u[i / 3] * v[i % 3]).collect();
    let truth = 3.0 * 2f64.sqrt();
    let mut state = vec![0.1, 0.7, -0.2, 0.4];
    let (_, sigma) = spectral_normalize(&w, 4, 3, &mut state, 5).unwrap();
    let e_rank1 = (sigma - truth).abs();
    let mut worst: f64 = 0.0;
    let mut rng = seeded(11);
    for _ in 0..20 {
        let (r, c) = (rng.random_range(1..6), rng.random_range(1..6));
        let w = Tensor::<f64>::randn(&[r, c], 1.0, &mut rng);
        let k = rng.random_range(0.01..100.0);
        let u0: Vec<f64> = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, _) = spectral_normalize(w.data(), r, c, &mut u0.clone(), 5).unwrap();
        let (b, _) = spectral_normalize(w.scale(k).data(), r, c, &mut u0.clone(), 5).unwrap();
        worst = worst.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    outcome(e_rank1 < 1e-6 && worst < 1e-6, format!("rank-1 error {e_rank1:.1e}, scale invariance {worst:.1e}"))
}

fn equivariance_ordering() -> Outcome {
    let cfg = GeneratorConfig { channel_base: 128.0, channel_max: 16, channel_min: 8, w_dim: 64, ..Default::default() };
    let sched = build_growth_schedule::<F>(16, 32).unwrap();
    let mut rng = seeded(3);
    let g16 = Generator::new(cfg.clone(), 16, sched.per_stage_specs[0].clone(), &mut rng).unwrap();
    let g = g16.grow(&sched.stages[1], &sched.per_stage_specs[1], &mut rng).unwrap();
    let ws = Tensor::<F>::randn(&[4, 64], 1.0, &mut rng);
    let opts = EqtOptions::default();
    let on = eq_t(&g, &ws, &opts, &mut seeded(5)).unwrap();
    let off = eq_t(&g.with_filter_mode(FilterMode::Nearest), &ws, &opts, &mut seeded(5)).unwrap();
    let fourier = Generator::<F>::new(GeneratorConfig { w_dim: 64, channel_max: 16, ..cfg }, 32, vec![], &mut seeded(1)).unwrap();
    let cap = eq_t(&fourier, &ws, &opts, &mut seeded(5)).unwrap();
    outcome(on - off >= 10.0 && cap == PSNR_CAP_DB, format!("filters on {on:.2} dB, off {off:.2} dB, Fourier-only {cap} dB"))
}

fn smoke_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.start_resolution = 16;
    cfg.final_resolution = 32;
    cfg.batch_size = Some(16);
    cfg.generator.channel_base = 128.0;
    cfg.generator.channel_max = 16;
    cfg.generator.w_dim = 64;
    cfg.generator.z_dim = 64;
    cfg.generator.c_dim = 64;
    cfg.generator.margin = 4;
    cfg.schedule.initial_layers = 4;
    cfg.schedule.layers_added = 3;
    cfg.schedule.final_layers_added = 3;
    cfg.discriminator.width = 16;
    cfg.discriminator.c_dim = 64;
    cfg.extractors = vec![
        ExtractorConfig::Cnn { input_resolution: 32, channels: [8, 16, 24, 32], seed: 0, projection_seed: 1, weights: None },
        ExtractorConfig::Vit { input_resolution: 32, patch: 8, dim: 32, heads: 2, seed: 2, projection_seed: 3, weights: None },
    ];
    cfg.guidance.gate_resolution = 8;
    cfg.classifier.epochs = 20;
    cfg.metrics.eval_samples = 128;
    cfg
}

const STEPS_PER_STAGE: usize = 200;

struct Smoke {
    trainer: Trainer<F>,
    untrained_fid: f64,
    trained_fid: f64,
    judge_accuracy: f64,
    frozen_blobs: usize,
    frozen_identical: bool,
    extractors_identical: bool,
}

fn smoke_run() -> Smoke {
    let cfg = smoke_config();
    let data = || synthetic_shapes::<F>(2, 128, 32, 1);

    let mut baseline = Trainer::new(cfg.clone(), data()).unwrap();
    baseline.grow().unwrap();
    let g0 = baseline.models.generator_ema.clone();
    let untrained_fid = baseline.evaluate_generator(&g0, 1.0, 9).unwrap().fid;

    let mut tr = Trainer::new(cfg, data()).unwrap();
    for _ in 0..STEPS_PER_STAGE {
        tr.step().unwrap();
    }
    tr.grow().unwrap();
    let g = &tr.models.generator;
    let frozen: Vec<_> = g.params.ids().filter(|&id| g.params.is_frozen(id)).collect();
    let snapshot: Vec<Tensor<F>> = frozen.iter().map(|&id| g.params.get(id).clone()).collect();
    let ext_before: Vec<_> = tr.extractors.iter().map(|e| e.projection.params.checksum()).collect();
    for _ in 0..STEPS_PER_STAGE {
        tr.step().unwrap();
    }
    let g = &tr.models.generator;
    let frozen_identical = frozen.iter().zip(&snapshot).all(|(&id, t)| g.params.is_frozen(id) && g.params.get(id).bit_eq(t));
    let extractors_identical = tr.extractors.iter().map(|e| e.projection.params.checksum()).collect::<Vec<_>>() == ext_before;
    let ema = tr.models.generator_ema.clone();
    let trained_fid = tr.evaluate_generator(&ema, 1.0, 9).unwrap().fid;

    let held = synthetic_shapes::<F>(2, 100, 32, 77);
    let mut judge = ToyClassifier::<F>::new(ClassifierConfig { seed: 11, ..Default::default() }, 2).unwrap();
    judge.fit(&held.images, &held.labels, 30, 32, 3e-3, &mut seeded(5)).unwrap();
    let labels: Vec<usize> = (0..256).map(|i| i % 2).collect();
    let imgs = generate_images(&ema, &tr.models.conditioning, &labels, 1.0, &mut seeded(21)).unwrap();
    let judge_accuracy = judge.accuracy(&imgs, &labels).unwrap();

    Smoke { trainer: tr, untrained_fid, trained_fid, judge_accuracy, frozen_blobs: frozen.len(), frozen_identical, extractors_identical }
}

fn growth_freeze(s: &Smoke) -> Outcome {
    let a = &s.trainer.audit;
    let pass = s.frozen_blobs > 0 && s.frozen_identical && s.extractors_identical && a.projection_checks > 0 && a.projection_grad_sq == 0.0;
    outcome(
        pass,
        format!(
            "{} frozen blobs bitwise unchanged over {STEPS_PER_STAGE} steps: {}, projection grad mass {} over {} checks",
            s.frozen_blobs, s.frozen_identical, a.projection_grad_sq, a.projection_checks
        ),
    )
}

fn training_smoke(s: &Smoke) -> Outcome {
    let ratio = s.trained_fid / s.untrained_fid;
    outcome(
        ratio <= 0.5 && s.judge_accuracy >= 0.8,
        format!("rFID {:.4} -> {:.4} (ratio {ratio:.3}), held-out judge accuracy {:.3}", s.untrained_fid, s.trained_fid, s.judge_accuracy),
    )
}

fn inversion_self_consistency(s: &Smoke) -> Outcome {
    let tr = &s.trainer;
    let g = &tr.models.generator_ema;
    let cond = &tr.models.conditioning;
    let net = tr.extractors[tr.config.conditioning.extractor].network.as_ref();
    let cfg = InversionConfig::default();
    assert_eq!((cfg.iterations, cfg.lr_max, cfg.ramp_up, cfg.ramp_down), (1000, 0.05, 50, 250));
    let classes = cond.embed(&[0, 1], Side::Generator).unwrap();
    let d = g.config.c_dim;
    let mut rng = seeded(31);
    let w_avg = g
        .compute_mean_style(cfg.mean_style_samples, 256, &mut rng, |r| classes.slice_outer(r.random_range(0..2), 1).reshape(&[d]))
        .unwrap();
    let mut psnrs = Vec::new();
    let mut pti_ok = true;
    let mut pti_detail = String::new();
    for t in 0..3 {
        let z = Tensor::<F>::randn(&[1, g.config.z_dim], 1.0, &mut rng);
        let w = g.map_latent(&z, &classes.slice_outer(t % 2, 1)).unwrap();
        let target = g.synthesize_w(&w).unwrap();
        let inv = invert_latent(&target, g, &w_avg, &cfg, net).unwrap();
        let best = inv.best_w.clone().reshape(&[1, g.config.w_dim]);
        psnrs.push(psnr(&g.synthesize_w(&best).unwrap(), &target, 2.0).unwrap());
        if t == 0 {
            let pool = g.map_latent(&Tensor::randn(&[8, g.config.z_dim], 1.0, &mut rng), &Tensor::from_fn(&[8, d], |i| classes.data()[i % d])).unwrap();
            let pti = pivotal_tune(&target, &best, g, &pool, &PtiConfig { steps: 100, ..Default::default() }, net).unwrap();
            pti_ok = pti.final_distance <= pti.initial_distance;
            pti_detail = format!("PTI distance {:.3e} -> {:.3e}", pti.initial_distance, pti.final_distance);
        }
    }
    let min = psnrs.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(min >= 30.0 && pti_ok, format!("PSNR per target {:?} dB, {pti_detail}", psnrs.iter().map(|p| (p * 100.0).round() / 100.0).collect::<Vec<_>>()))
}

fn truncation_monotonicity(s: &mut Smoke) -> Outcome {
    let tr = &mut s.trainer;
    tr.evaluator.samples = 2000;
    let g = tr.models.generator_ema.clone();
    let mut votes = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let pr: Vec<(f64, f64)> = [1.0, 0.7, 0.4]
            .iter()
            .map(|&psi| {
                let r = tr.evaluate_generator(&g, psi, 1000 + seed).unwrap();
                (r.precision, r.recall)
            })
            .collect();
        let ok = pr.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 <= w[0].1);
        votes += ok as usize;
        lines.push(format!("seed {seed}: {}{}", pr.iter().map(|(p, r)| format!("P {p:.3} R {r:.3}")).collect::<Vec<_>>().join(" | "), if ok { "" } else { " (violated)" }));
    }
    outcome(votes >= 2, format!("{votes}/3 seeds monotone; {}", lines.join("; ")))
}

#[test]
fn acceptance_criteria() {
    let mut results = vec![
        run(1, "schedule reproduction", Some(Duration::from_secs(1)), schedule_reproduction),
        run(2, "Frechet oracle", Some(Duration::from_secs(5)), frechet_oracle),
        run(3, "precision/recall oracle", Some(Duration::from_secs(30)), precision_recall_oracle),
        run(4, "inception-score closed forms", None, inception_score_closed_forms),
        run(5, "guidance correctness", None, guidance_correctness),
        run(6, "path-length regularizer", None, path_length_regularizer),
        run(7, "spectral normalization", None, spectral_normalization),
        run(8, "equivariance ordering", Some(Duration::from_secs(120)), equivariance_ordering),
    ];
    let start = Instant::now();
    let smoke = catch_unwind(smoke_run);
    let smoke_time = start.elapsed();
    match smoke {
        Ok(mut s) => {
            results.push(run(9, "growth freeze", None, || growth_freeze(&s)));
            results.push(run(10, "training smoke test", Some(Duration::from_secs(6 * 3600)), || {
                let mut o = training_smoke(&s);
                o.detail.push_str(&format!(", training and evaluation took {smoke_time:.1?}"));
                o
            }));
            results.push(run(11, "inversion self-consistency", None, || inversion_self_consistency(&s)));
            results.push(run(12, "truncation monotonicity", None, || truncation_monotonicity(&mut s)));
        }
        Err(_) => {
            for (id, name) in [(9, "growth freeze"), (10, "training smoke test"), (11, "inversion self-consistency"), (12, "truncation monotonicity")] {
                results.push(run(id, name, None, || outcome(false, "smoke training run failed")));
            }
        }
    }
    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    assert_eq!(passed, results.len());
}
