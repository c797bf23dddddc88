use proptest::prelude::*;
use rand::Rng;
use scalegan::autodiff::Var;
use scalegan::classifier::ImageClassifier;
use scalegan::generator::*;
use scalegan::inversion::*;
use scalegan::layerspec::*;
use scalegan::nn::seeded;
use scalegan::projector::{CnnConfig, ToyCnn};
use scalegan::{Result, Tensor};

fn tiny_gen(seed: u64) -> Generator<f64> {
    let opts = ScheduleOptions { initial_layers: 4, layers_added: 3, final_layers_added: 3, ..Default::default() };
    let s = build_growth_schedule_with::<f64>(16, 16, &opts).unwrap();
    let cfg = GeneratorConfig { channel_base: 64.0, channel_max: 8, channel_min: 4, margin: 4, w_dim: 16, z_dim: 8, c_dim: 8, ..Default::default() };
    Generator::new(cfg, 16, s.per_stage_specs[0].clone(), &mut seeded(seed)).unwrap()
}

fn net() -> ToyCnn<f64> {
    ToyCnn::new(&CnnConfig { input_resolution: 16, channels: [4, 6, 8, 8], seed: 2 }).unwrap()
}

#[test]
fn learning_rate_follows_the_published_schedule() {
    let cfg = InversionConfig::default();
    assert_eq!((cfg.iterations, cfg.ramp_up, cfg.ramp_down), (1000, 50, 250));
    assert_eq!(cfg.lr_max, 0.05);
    assert_eq!(cfg.learning_rate(0), 0.0);
    assert!((cfg.learning_rate(25) - 0.025).abs() < 1e-12);
    assert!((cfg.learning_rate(50) - 0.05).abs() < 1e-12);
    assert!((cfg.learning_rate(750) - 0.05).abs() < 1e-12);
    assert!((cfg.learning_rate(875) - 0.025).abs() < 1e-12);
    assert!(cfg.learning_rate(1000).abs() < 1e-12);
    let trace: Vec<f64> = (750..=1000).map(|i| cfg.learning_rate(i)).collect();
    assert!(trace.windows(2).all(|w| w[1] <= w[0]));
    assert!(InversionConfig { iterations: 200, ..cfg.clone() }.validate().is_err());
    assert!(InversionConfig { iterations: 0, ..cfg }.validate().is_ok());
}

#[test]
fn zero_iterations_return_the_mean_style() {
    let g = tiny_gen(1);
    let w_avg = Tensor::randn(&[16], 0.5, &mut seeded(2));
    let target = g.synthesize_w(&Tensor::randn(&[1, 16], 1.0, &mut seeded(3))).unwrap();
    let cfg = InversionConfig { iterations: 0, ..Default::default() };
    let inv = invert_latent(&target, &g, &w_avg, &cfg, &net()).unwrap();
    assert!(inv.w.data() == w_avg.data());
    assert!(inv.best_w.data() == w_avg.data());
    assert!(inv.losses.is_empty());
}

#[test]
fn inversion_only_moves_the_style() {
    let g = tiny_gen(4);
    let before = g.params.checksum();
    let frozen: Vec<bool> = g.params.ids().map(|id| g.params.is_frozen(id)).collect();
    let w_star = Tensor::randn(&[1, 16], 1.0, &mut seeded(5));
    let target = g.synthesize_w(&w_star).unwrap();
    let cfg = InversionConfig { iterations: 40, ramp_up: 5, ramp_down: 10, ..Default::default() };
    let inv = invert_latent(&target, &g, &Tensor::zeros(&[16]), &cfg, &net()).unwrap();
    assert_eq!(g.params.checksum(), before);
    assert_eq!(frozen, g.params.ids().map(|id| g.params.is_frozen(id)).collect::<Vec<_>>());
    assert_eq!(inv.losses.len(), 40);
    assert!(inv.best_trace.windows(2).all(|w| w[1] <= w[0]));
    assert!(inv.best_loss <= inv.losses[0]);
    assert!(inv.best_loss < 0.5 * inv.losses[0], "{} vs {}", inv.best_loss, inv.losses[0]);
    assert!(invert_latent(&target.slice_outer(0, 1).reshape(&[3, 16, 16]), &g, &Tensor::zeros(&[16]), &cfg, &net()).is_err());
}

struct Fixed(Vec<f64>);

impl ImageClassifier<f64> for Fixed {
    fn num_classes(&self) -> usize {
        self.0.len()
    }
    fn logits<'t>(&self, x: Var<'t, f64>) -> Result<Var<'t, f64>> {
        let n = x.shape()[0];
        let c = self.0.len();
        Ok(x.tape().constant(Tensor::from_fn(&[n, c], |i| self.0[i % c])))
    }
}

#[test]
fn one_hot_classifier_always_gives_its_class() {
    let img = Tensor::zeros(&[1, 3, 8, 8]);
    let clf = Fixed(vec![-1e4, -1e4, 0.0, -1e4]);
    for seed in 0..200 {
        assert_eq!(sample_class_for_image(&img, &clf, seed).unwrap(), 2);
    }
}

#[test]
fn uniform_classifier_draws_are_multinomial() {
    let img = Tensor::zeros(&[1, 3, 4, 4]);
    let c = 4;
    let clf = Fixed(vec![0.0; c]);
    let n = 10_000;
    let mut counts = vec![0usize; c];
    for seed in 0..n as u64 {
        counts[sample_class_for_image(&img, &clf, seed).unwrap()] += 1;
    }
    let p = 1.0 / c as f64;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for k in counts {
        assert!((k as f64 - n as f64 * p).abs() < 3.0 * sigma, "{k}");
    }
    assert_eq!(sample_class_for_image(&img, &clf, 77).unwrap(), sample_class_for_image(&img, &clf, 77).unwrap());
}

#[test]
fn categorical_sampler_skips_zero_weights() {
    let mut rng = seeded(1);
    for _ in 0..1000 {
        let k = sample_categorical(&[0.0, 2.0, 0.0, 1.0], &mut rng);
        assert!(k == 1 || k == 3);
    }
}

#[test]
fn pivotal_tuning_never_worsens_the_pivot() {
    let g = tiny_gen(6);
    let target = Tensor::uniform(&[1, 3, 16, 16], -0.8, 0.8, &mut seeded(7));
    let pivot = Tensor::randn(&[1, 16], 1.0, &mut seeded(8));
    let pool = Tensor::randn(&[16, 16], 1.0, &mut seeded(9));
    let cfg = PtiConfig { steps: 12, lr: 3e-3, ..Default::default() };
    let pivot_before = pivot.clone();
    let out = pivotal_tune(&target, &pivot, &g, &pool, &cfg, &net()).unwrap();
    assert!(out.final_distance <= out.initial_distance);
    assert!(pivot.bit_eq(&pivot_before));
    for id in g.params.ids() {
        assert_eq!(g.params.is_frozen(id), out.generator.params.is_frozen(id));
        if g.params.name(id).starts_with("mapping.") {
            assert!(g.params.get(id).bit_eq(out.generator.params.get(id)));
        }
    }
    // locality: outputs away from the pivot move little
    let probes = Tensor::from_fn(&[16, 16], |i| g.w_avg.data()[i % 16] + 0.5 * (pool.data()[i] - g.w_avg.data()[i % 16]));
    let a = g.synthesize_w(&probes).unwrap();
    let b = out.generator.synthesize_w(&probes).unwrap();
    let change = a.zip_map(&b, |x, y| (x - y) * (x - y)).mean();
    assert!(change < 0.05, "mean squared change {change}");
}

#[test]
fn zero_tuning_steps_leave_the_generator_unchanged() {
    let g = tiny_gen(10);
    let target = Tensor::zeros(&[1, 3, 16, 16]);
    let out = pivotal_tune(&target, &Tensor::zeros(&[1, 16]), &g, &Tensor::zeros(&[0, 16]), &PtiConfig { steps: 0, ..Default::default() }, &net()).unwrap();
    assert_eq!(out.generator.params.checksum(), g.params.checksum());
    assert_eq!(out.initial_distance, out.final_distance);
}

#[test]
fn pca_components_are_orthonormal_and_ordered() {
    let ws = Tensor::from_fn(&[400, 6], {
        let mut rng = seeded(11);
        let scales = [3.0, 2.0, 1.5, 1.0, 0.5, 0.25];
        move |i| rng.random_range(-1.0..1.0) * scales[i % 6]
    });
    let dirs = pca_from_styles(&ws, 4, (0, 3)).unwrap();
    assert_eq!(dirs.len(), 4);
    for (i, a) in dirs.iter().enumerate() {
        assert_eq!(a.source, DirectionSource::Pca);
        for (j, b) in dirs.iter().enumerate() {
            let dot: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((dot - want).abs() < 1e-6);
        }
    }
    let ev: Vec<f64> = dirs.iter().map(|d| d.explained_variance.unwrap()).collect();
    assert!(ev.windows(2).all(|w| w[0] >= w[1]));
    assert!(pca_from_styles(&ws, 6, (0, 0)).is_err());
    assert!(pca_from_styles(&ws.slice_outer(0, 3), 3, (0, 0)).is_err());
}

#[test]
fn pca_recovers_a_planted_plane() {
    let d = 7;
    let mut rng = seeded(12);
    // orthonormal basis of a random plane by Gram-Schmidt
    let mut u: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    u.iter_mut().for_each(|x| *x /= nu);
    let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(&u).for_each(|(x, a)| *x -= p * a);
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= nv);
    let n = 300;
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let (a, b): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
        data.extend((0..d).map(|j| a * u[j] + b * v[j] + 0.3));
    }
    let dirs = pca_from_styles(&Tensor::new(vec![n, d], data), 2, (0, 0)).unwrap();
    for dir in &dirs {
        let pu: f64 = dir.vector.iter().zip(&u).map(|(x, y)| x * y).sum();
        let pv: f64 = dir.vector.iter().zip(&v).map(|(x, y)| x * y).sum();
        // sine of the angle between the component and the plane
        let sin = (1.0 - pu * pu - pv * pv).max(0.0).sqrt();
        assert!(sin < 1e-3, "component leaves the plane: {sin}");
    }
}

#[test]
fn isotropic_samples_have_flat_spectrum() {
    let ws = Tensor::<f64>::randn(&[10_000, 8], 1.0, &mut seeded(13));
    let dirs = pca_from_styles(&ws, 7, (0, 0)).unwrap();
    let ev: Vec<f64> = dirs.iter().map(|d| d.explained_variance.unwrap()).collect();
    let ratio = ev[0] / ev[6];
    assert!(ratio < 1.5, "{ratio}");
}

#[test]
fn generator_pca_directions_are_unit_vectors() {
    let g = tiny_gen(14);
    let classes = Tensor::randn(&[3, 8], 1.0, &mut seeded(15));
    let dirs = pca_directions(&g, &classes, 200, 3, &mut seeded(16)).unwrap();
    assert_eq!(dirs.len(), 3);
    for d in dirs {
        assert_eq!(d.vector.len(), 16);
        assert!((d.vector.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(d.layer_range, (0, g.num_ws() - 1));
    }
    assert!(pca_directions(&g, &classes, 200, 16, &mut seeded(16)).is_err());
}

#[test]
fn edits_behave_like_vector_addition() {
    let g = tiny_gen(17);
    let n = g.num_ws();
    let w = Tensor::randn(&[1, 16], 1.0, &mut seeded(18));
    let mut e1 = vec![0.0; 16];
    e1[0] = 1.0;
    let mut e2 = vec![0.0; 16];
    e2[5] = 3.0;
    let full = EditDirection::manual(&e1, (0, n - 1)).unwrap();
    assert!(apply_latent_edit(&w, &full, 0.0, &g).unwrap().bit_eq(&g.synthesize_w(&w).unwrap()));
    let moved = Tensor::from_fn(&[1, 16], |i| w.data()[i] + if i == 0 { 0.7 } else { 0.0 });
    assert!(apply_latent_edit(&w, &full, 0.7, &g).unwrap().bit_eq(&g.synthesize_w(&moved).unwrap()));
    let d2 = EditDirection::manual(&e2, (0, n - 1)).unwrap();
    assert_eq!(d2.vector[5], 1.0);
    let ab = edited_styles(&edited_styles(&w, &full, 0.4, n).unwrap()[0], &d2, -1.2, n).unwrap();
    let ba = edited_styles(&edited_styles(&w, &d2, -1.2, n).unwrap()[0], &full, 0.4, n).unwrap();
    assert!(ab[0].bit_eq(&ba[0]));
    let partial = EditDirection::manual(&e1, (1, 2)).unwrap();
    let ws = edited_styles(&w, &partial, 1.0, n).unwrap();
    assert!(ws[0].bit_eq(&w) && !ws[1].bit_eq(&w) && !ws[2].bit_eq(&w));
    assert!(ws[3..].iter().all(|x| x.bit_eq(&w)));
    assert!(apply_latent_edit(&w, &EditDirection::manual(&e1, (2, 1)).unwrap(), 1.0, &g).is_err());
    assert!(apply_latent_edit(&w, &EditDirection::manual(&e1, (0, n)).unwrap(), 1.0, &g).is_err());
    assert!(EditDirection::manual(&[0.0; 4], (0, 0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn perceptual_distance_is_a_semimetric(seed in 0u64..10_000) {
        let net = net();
        let mut rng = seeded(seed);
        let a = Tensor::<f64>::uniform(&[2, 3, 16, 16], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[2, 3, 16, 16], -1.0, 1.0, &mut rng);
        let ab = perceptual_distance(&net, &a, &b).unwrap();
        let ba = perceptual_distance(&net, &b, &a).unwrap();
        let aa = perceptual_distance(&net, &a, &a).unwrap();
        for i in 0..2 {
            prop_assert!(ab[i] >= 0.0);
            prop_assert!((ab[i] - ba[i]).abs() < 1e-12);
            prop_assert_eq!(aa[i], 0.0);
        }
    }

    #[test]
    fn learning_rate_stays_in_range(i in 0usize..1200) {
        let lr = InversionConfig::default().learning_rate(i);
        prop_assert!((0.0..=0.05).contains(&lr));
    }
}
