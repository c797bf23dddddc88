use proptest::prelude::*;
use scalegan::generator::*;
use scalegan::layerspec::*;
use scalegan::metrics::psnr;
use scalegan::nn::{seeded, Adam, AdamConfig};
use scalegan::autodiff::Tape;
use scalegan::Tensor;

fn tiny() -> GeneratorConfig {
    GeneratorConfig { channel_base: 64.0, channel_max: 8, channel_min: 4, margin: 4, w_dim: 32, ..Default::default() }
}

fn small_schedule() -> GrowthSchedule<f64> {
    let opts = ScheduleOptions { initial_layers: 4, layers_added: 3, final_layers_added: 3, ..Default::default() };
    build_growth_schedule_with(16, 32, &opts).unwrap()
}

fn stage0(seed: u64) -> Generator<f64> {
    let s = small_schedule();
    Generator::new(tiny(), 16, s.per_stage_specs[0].clone(), &mut seeded(seed)).unwrap()
}

#[test]
fn published_dimensions_are_the_defaults() {
    let c = GeneratorConfig::default();
    assert_eq!(c.z_dim, 64);
    assert_eq!(c.w_dim, 512);
    assert_eq!(LATENT_DIM, 64);
    assert_eq!(STYLE_DIM, 512);
}

#[test]
fn mapping_is_deterministic_and_class_sensitive() {
    let mut rng = seeded(3);
    let g = Generator::<f64>::new(GeneratorConfig { channel_max: 8, ..Default::default() }, 16, vec![], &mut rng).unwrap();
    let z = Tensor::randn(&[1, 64], 1.0, &mut rng);
    let c1 = Tensor::randn(&[1, 64], 1.0, &mut rng);
    let c2 = Tensor::randn(&[1, 64], 1.0, &mut rng);
    let w1 = g.map_latent(&z, &c1).unwrap();
    assert_eq!(w1.shape(), &[1, 512]);
    assert!(w1.bit_eq(&g.map_latent(&z, &c1).unwrap()));
    assert!(!w1.bit_eq(&g.map_latent(&z, &c2).unwrap()));
}

#[test]
fn mapping_rejects_wrong_widths() {
    let g = stage0(1);
    let z = Tensor::<f64>::zeros(&[1, 63]);
    let c = Tensor::<f64>::zeros(&[1, 64]);
    assert!(g.map_latent(&z, &c).is_err());
}

#[test]
fn synthesis_shape_range_and_determinism() {
    let g = stage0(2);
    let w = Tensor::randn(&[3, 32], 1.0, &mut seeded(9));
    let a = g.synthesize_w(&w).unwrap();
    assert_eq!(a.shape(), &[3, 3, 16, 16]);
    assert!(a.data().iter().all(|v| v.abs() <= 1.0));
    assert!(a.bit_eq(&g.synthesize_w(&w).unwrap()));
    let wrong: Vec<_> = (0..g.num_ws() + 1).map(|_| w.clone()).collect();
    assert!(g.synthesize(&wrong, &g.input_grid()).is_err());
}

#[test]
fn growth_doubles_resolution_and_follows_the_schedule() {
    let s = small_schedule();
    let g = stage0(4);
    let grown = g.grow(&s.stages[1], &s.per_stage_specs[1], &mut seeded(5)).unwrap();
    assert_eq!(grown.resolution, 32);
    assert_eq!(grown.num_layers(), s.stages[1].layer_count);
    let w = Tensor::randn(&[1, 32], 1.0, &mut seeded(6));
    assert_eq!(grown.synthesize_w(&w).unwrap().shape(), &[1, 3, 32, 32]);
    assert!(g.grow(&s.stages[0], &s.per_stage_specs[0], &mut seeded(5)).is_err());
}

#[test]
fn full_size_growth_goes_from_eleven_to_sixteen_layers() {
    let s = build_growth_schedule::<f64>(16, 32).unwrap();
    let cfg = GeneratorConfig { channel_base: 16.0, channel_max: 4, channel_min: 4, margin: 2, w_dim: 16, ..Default::default() };
    let g = Generator::new(cfg, 16, s.per_stage_specs[0].clone(), &mut seeded(1)).unwrap();
    assert_eq!(g.num_layers(), 11);
    let grown = g.grow(&s.stages[1], &s.per_stage_specs[1], &mut seeded(2)).unwrap();
    assert_eq!(grown.num_layers(), 16);
}

#[test]
fn growth_freezes_mapping_input_and_kept_layers() {
    let s = small_schedule();
    let g = stage0(7);
    let grown = g.grow(&s.stages[1], &s.per_stage_specs[1], &mut seeded(8)).unwrap();
    let kept = s.stages[0].layer_count - 2;
    let p = &grown.params;
    for id in grown.mapping_param_ids() {
        assert!(p.is_frozen(id));
    }
    for i in 0..grown.num_layers() {
        let frozen = grown.layer_param_ids(i).iter().all(|&id| p.is_frozen(id));
        let trainable = grown.layer_param_ids(i).iter().all(|&id| !p.is_frozen(id));
        assert!(if i < kept { frozen } else { trainable }, "layer {i}");
    }
}

#[test]
fn grown_stem_reproduces_old_activations_bitwise() {
    let s = small_schedule();
    let g = stage0(10);
    let grown = g.grow(&s.stages[1], &s.per_stage_specs[1], &mut seeded(11)).unwrap();
    let kept = s.stages[0].layer_count - 2;
    let w = Tensor::randn(&[2, 32], 1.0, &mut seeded(12));
    let before = g.intermediate_activations(&w, kept).unwrap();
    let after = grown.intermediate_activations(&w, kept).unwrap();
    assert_eq!(before.len(), kept + 1);
    for (a, b) in before.iter().zip(&after) {
        assert!(a.bit_eq(b));
    }
}

#[test]
fn frozen_blobs_survive_optimizer_steps() {
    let s = small_schedule();
    let grown = stage0(13).grow(&s.stages[1], &s.per_stage_specs[1], &mut seeded(14)).unwrap();
    let mut g = grown.clone();
    let mut opt = Adam::new(AdamConfig::defaults(1e-2));
    let mut rng = seeded(15);
    for _ in 0..20 {
        let tape = Tape::new();
        let b = g.params.bind(&tape, true);
        let w = tape.constant(Tensor::randn(&[2, 32], 1.0, &mut rng));
        let img = g.synthesize_var(&b, &[w], &g.input_grid()).unwrap();
        let grads = tape.backward(img.square().mean());
        let gr = b.gradients(&grads);
        drop(b);
        opt.step(&mut g.params, &gr);
    }
    let mut changed = 0;
    for id in grown.params.ids() {
        let same = grown.params.get(id).bit_eq(g.params.get(id));
        if grown.params.is_frozen(id) {
            assert!(same, "{} moved", grown.params.name(id));
        } else if !same {
            changed += 1;
        }
    }
    assert!(changed > 0);
}

#[test]
fn style_mix_endpoints() {
    let g = stage0(16);
    let mut rng = seeded(17);
    let a = Tensor::randn(&[1, 32], 1.0, &mut rng);
    let b = Tensor::randn(&[1, 32], 1.0, &mut rng);
    let n = g.num_ws();
    assert!(g.style_mix(&a, &b, n).unwrap().bit_eq(&g.synthesize_w(&a).unwrap()));
    assert!(g.style_mix(&a, &b, 0).unwrap().bit_eq(&g.synthesize_w(&b).unwrap()));
    assert!(g.style_mix(&a, &a, 2).unwrap().bit_eq(&g.synthesize_w(&a).unwrap()));
    assert!(g.style_mix(&a, &b, n + 1).is_err());
}

#[test]
fn truncation_endpoints() {
    let w = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 3.0, -2.0, 5.0]);
    let avg = Tensor::from_f64(&[2], &[0.5, -1.0]);
    assert!(truncate_style(&w, &avg, 1.0).bit_eq(&w));
    assert_eq!(truncate_style(&w, &avg, 0.0).data(), &[0.5, -1.0, 0.5, -1.0]);
    assert_eq!(truncate_style(&w, &avg, 0.5).data(), &[0.75, 1.0, -0.75, 2.0]);
}

#[test]
fn mean_style_matches_a_streaming_mean() {
    let g = stage0(18);
    let c = Tensor::<f64>::randn(&[64], 1.0, &mut seeded(19));
    let n = 1000;
    let mean = g.compute_mean_style(n, 128, &mut seeded(20), |_| c.clone()).unwrap();
    // replay the same draws one at a time
    let mut rng = seeded(20);
    let mut acc = vec![0.0; 32];
    let mut done = 0;
    while done < n {
        let m = 128.min(n - done);
        let z = Tensor::<f64>::randn(&[m, 64], 1.0, &mut rng);
        for i in 0..m {
            let w = g.map_latent(&z.slice_outer(i, 1), &c.clone().reshape(&[1, 64])).unwrap();
            for (k, a) in acc.iter_mut().enumerate() {
                *a += (w.data()[k] - *a) / (done + i + 1) as f64;
            }
        }
        done += m;
    }
    for (a, b) in mean.data().iter().zip(&acc) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn mean_style_of_one_sample_is_that_sample() {
    let g = stage0(21);
    let c = Tensor::<f64>::zeros(&[64]);
    let mean = g.compute_mean_style(1, 1, &mut seeded(22), |_| c.clone()).unwrap();
    let z = Tensor::<f64>::randn(&[1, 64], 1.0, &mut seeded(22));
    let w = g.map_latent(&z, &c.reshape(&[1, 64])).unwrap();
    for (a, b) in mean.data().iter().zip(w.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(g.compute_mean_style(0, 1, &mut seeded(0), |_| Tensor::zeros(&[64])).is_err());
}

#[test]
fn grid_translation_matches_rolled_output() {
    let s = build_growth_schedule::<f64>(16, 32).unwrap();
    let cfg = GeneratorConfig { channel_base: 128.0, channel_max: 16, channel_min: 8, margin: 10, w_dim: 64, ..Default::default() };
    let g = Generator::new(cfg, 16, s.per_stage_specs[0].clone(), &mut seeded(3)).unwrap();
    let w = Tensor::randn(&[2, 64], 1.0, &mut seeded(4));
    let base = g.synthesize_w(&w).unwrap();
    let shifted = g.synthesize(&[w.clone()], &translate_input_grid(&g.input_grid(), [4.0, 0.0], 1.0).unwrap()).unwrap();
    // compare shifted[x] with base[x - 4] away from the borders
    let r = 16;
    let crop = 2;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for n in 0..2 {
        for c in 0..3 {
            for y in crop..r - crop {
                for x in 4 + crop..r - crop {
                    a.push(shifted.at(&[n, c, y, x]));
                    b.push(base.at(&[n, c, y, x - 4]));
                }
            }
        }
    }
    let len = a.len();
    let p = psnr(&Tensor::new(vec![len], a), &Tensor::new(vec![len], b), 2.0).unwrap();
    assert!(p >= 40.0, "translation PSNR {p:.2} dB");
}

#[test]
fn grid_helpers() {
    let g = stage0(23);
    let grid = g.input_grid();
    assert_eq!(translate_input_grid(&grid, [0.0, 0.0], 1.0).unwrap(), grid);
    let big = translate_input_grid(&grid, [0.0, 0.0], 1.25).unwrap();
    assert_eq!(big.canvas(), 20);
    let w = Tensor::randn(&[1, 32], 1.0, &mut seeded(24));
    assert_eq!(g.synthesize(&[w], &big).unwrap().shape(), &[1, 3, 20, 20]);
    assert!(translate_input_grid(&grid, [0.0, 0.0], 0.5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn truncation_composes_multiplicatively(
        w in prop::collection::vec(-5.0f64..5.0, 4),
        a in prop::collection::vec(-5.0f64..5.0, 4),
        p1 in 0.0f64..1.0,
        p2 in 0.0f64..1.0,
    ) {
        let w = Tensor::<f64>::from_f64(&[1, 4], &w);
        let a = Tensor::from_f64(&[4], &a);
        let twice = truncate_style(&truncate_style(&w, &a, p1), &a, p2);
        let once = truncate_style(&w, &a, p1 * p2);
        for (x, y) in twice.data().iter().zip(once.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn outputs_stay_in_range(seed in 0u64..1000, scale in 0.1f64..20.0) {
        let g = stage0(seed);
        let w = Tensor::randn(&[1, 32], scale, &mut seeded(seed + 1));
        let img = g.synthesize_w(&w).unwrap();
        prop_assert!(img.data().iter().all(|v| v.abs() <= 1.0 && v.is_finite()));
    }
}
