use proptest::prelude::*;
use scalegan::autodiff::Tape;
use scalegan::nn::seeded;
use scalegan::projector::*;
use scalegan::Tensor;

fn tiny_cnn() -> ToyCnn<f64> {
    ToyCnn::new(&CnnConfig { input_resolution: 16, channels: [3, 4, 5, 6], seed: 3 }).unwrap()
}

fn tiny_vit() -> ToyVit<f64> {
    ToyVit::new(&VitConfig { input_resolution: 16, patch: 4, dim: 8, heads: 2, mlp_ratio: 2, seed: 4 }).unwrap()
}

#[test]
fn small_inputs_are_resized_to_the_extractor_resolution() {
    let net = ToyCnn::<f32>::new(&CnnConfig::default()).unwrap();
    assert_eq!(net.input_resolution(), 224);
    let img = Tensor::<f32>::randn(&[1, 3, 32, 32], 0.5, &mut seeded(1));
    let taps = feature_taps(&net, &img).unwrap();
    assert_eq!(taps.len(), 4);
    let sizes: Vec<usize> = taps.iter().map(|t| t.shape()[2]).collect();
    assert_eq!(sizes, vec![112, 56, 28, 14]);
}

#[test]
fn both_extractors_emit_four_finite_maps() {
    let img = Tensor::<f64>::randn(&[2, 3, 24, 24], 0.5, &mut seeded(2));
    let nets: [Box<dyn FeatureNetwork<f64>>; 2] = [Box::new(tiny_cnn()), Box::new(tiny_vit())];
    for net in nets {
        let ex = ProjectedExtractor::new(net, 7).unwrap();
        let tape = Tape::new();
        let pyr = ex.pyramid(tape.constant(img.clone()), None).unwrap();
        assert_eq!(pyr.len(), 4);
        for (p, s) in pyr.iter().zip(ex.feature_shapes()) {
            assert_eq!(p.shape(), vec![2, s.channels, s.size, s.size]);
            assert!(p.value().all_finite());
        }
    }
}

#[test]
fn wrong_channel_count_is_rejected() {
    let net = tiny_cnn();
    let tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::zeros(&[1, 1, 16, 16]));
    assert!(extract_feature_pyramid(x, &net, None).is_err());
}

fn feature_sum(ex: &ProjectedExtractor<f64>, img: &Tensor<f64>) -> f64 {
    let tape = Tape::new();
    let pyr = ex.pyramid(tape.constant(img.clone()), None).unwrap();
    pyr.iter().map(|p| p.value().sum()).sum()
}

#[test]
fn pixel_gradient_matches_central_differences() {
    let nets: [Box<dyn FeatureNetwork<f64>>; 2] = [Box::new(tiny_cnn()), Box::new(tiny_vit())];
    for net in nets {
        let ex = ProjectedExtractor::new(net, 5).unwrap();
        let img = Tensor::<f64>::randn(&[1, 3, 12, 12], 0.5, &mut seeded(9));
        let tape = Tape::new();
        let x = tape.leaf(img.clone(), true);
        let pyr = ex.pyramid(x, None).unwrap();
        let mut total = pyr[0].sum();
        for p in &pyr[1..] {
            total = total + p.sum();
        }
        let grads = tape.backward(total);
        let g = grads.get_or_zeros(x);
        assert!(g.max_abs() > 0.0, "gradient reaches the image");
        let eps = 1e-5;
        for &idx in &[[0, 0, 5, 6], [0, 2, 3, 9], [0, 1, 10, 1]] {
            let mut plus = img.clone();
            plus.set(&idx, img.at(&idx) + eps);
            let mut minus = img.clone();
            minus.set(&idx, img.at(&idx) - eps);
            let fd = (feature_sum(&ex, &plus) - feature_sum(&ex, &minus)) / (2.0 * eps);
            let an = g.at(&idx);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-3, "{} at {idx:?}: fd {fd} analytic {an}", ex.network.name());
        }
    }
}

fn shapes() -> Vec<FeatureShape> {
    vec![
        FeatureShape { channels: 3, size: 8 },
        FeatureShape { channels: 4, size: 4 },
        FeatureShape { channels: 5, size: 2 },
        FeatureShape { channels: 6, size: 1 },
    ]
}

#[test]
fn projections_are_reproducible_from_the_seed() {
    let a = init_random_projections::<f64>(&shapes(), 11).unwrap();
    let b = init_random_projections::<f64>(&shapes(), 11).unwrap();
    let c = init_random_projections::<f64>(&shapes(), 12).unwrap();
    for (x, y) in a.params.entries().iter().zip(b.params.entries()) {
        assert!(x.value.bit_eq(&y.value));
    }
    assert!(a.params.entries().iter().zip(c.params.entries()).any(|(x, y)| !x.value.bit_eq(&y.value)));
    assert!(a.params.ids().all(|id| a.params.is_frozen(id)));
}

#[test]
fn projection_kernels_preserve_channels() {
    let p = init_random_projections::<f64>(&shapes(), 0).unwrap();
    for (l, s) in shapes().iter().enumerate() {
        assert_eq!(p.params.get(p.ccm[l]).shape(), &[s.channels, s.channels, 1, 1]);
        assert_eq!(p.params.get(p.csm_residual[l]).shape(), &[s.channels, s.channels, 3, 3]);
    }
    assert!(p.csm_lateral[3].is_none());
    assert!(init_random_projections::<f64>(&shapes()[..3], 0).is_err());
}

#[test]
fn zero_features_give_a_zero_pyramid() {
    let p = init_random_projections::<f64>(&shapes(), 1).unwrap();
    let tape = Tape::new();
    let raw: Vec<_> = shapes().iter().map(|s| tape.constant(Tensor::zeros(&[2, s.channels, s.size, s.size]))).collect();
    let out = project_pyramid(&raw, &p).unwrap();
    assert!(out.iter().all(|m| m.value().max_abs() == 0.0));
}

#[test]
fn projection_rejects_mismatched_maps() {
    let p = init_random_projections::<f64>(&shapes(), 1).unwrap();
    let tape = Tape::new();
    let mut raw: Vec<_> = shapes().iter().map(|s| tape.constant(Tensor::zeros(&[1, s.channels, s.size, s.size]))).collect();
    raw[1] = tape.constant(Tensor::zeros(&[1, 4, 3, 3]));
    assert!(project_pyramid(&raw, &p).is_err());
    assert!(project_pyramid(&raw[..3], &p).is_err());
}

/// Dense matrix-vector oracle for 1x1 maps, where bilinear resizing is the
/// identity and a padded 3x3 kernel reduces to its centre tap.
fn dense_oracle(p: &RandomProjectionParams<f64>, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let matvec = |w: &Tensor<f64>, v: &[f64], centre: bool| -> Vec<f64> {
        let s = w.shape();
        (0..s[0])
            .map(|o| {
                (0..s[1])
                    .map(|i| if centre { w.at(&[o, i, 1, 1]) } else { w.at(&[o, i, 0, 0]) } * v[i])
                    .sum()
            })
            .collect()
    };
    let mut out = vec![Vec::new(); 4];
    for l in (0..4).rev() {
        let mut z = matvec(p.params.get(p.ccm[l]), &x[l], false);
        if let Some(lat) = p.csm_lateral[l] {
            let add = matvec(p.params.get(lat), &out[l + 1], false);
            z.iter_mut().zip(add).for_each(|(a, b)| *a += b);
        }
        let r: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
        let res = matvec(p.params.get(p.csm_residual[l]), &r, true);
        out[l] = z.iter().zip(res).map(|(a, b)| a + b).collect();
    }
    out
}

#[test]
fn single_pixel_pyramid_matches_dense_oracle() {
    let shapes: Vec<_> = [2, 3, 2, 4].iter().map(|&c| FeatureShape { channels: c, size: 1 }).collect();
    let p = init_random_projections::<f64>(&shapes, 21).unwrap();
    let mut rng = seeded(5);
    let x: Vec<Vec<f64>> = shapes.iter().map(|s| Tensor::<f64>::randn(&[s.channels], 1.0, &mut rng).into_data()).collect();
    let tape = Tape::new();
    let raw: Vec<_> = shapes
        .iter()
        .zip(&x)
        .map(|(s, v)| tape.constant(Tensor::new(vec![1, s.channels, 1, 1], v.clone())))
        .collect();
    let got = project_pyramid(&raw, &p).unwrap();
    let want = dense_oracle(&p, &x);
    for (g, w) in got.iter().zip(&want) {
        for (a, b) in g.value().data().iter().zip(w) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn shared_augmentation_sample_gives_identical_features() {
    let ex = ProjectedExtractor::new(Box::new(tiny_cnn()), 2).unwrap();
    let img = Tensor::<f64>::randn(&[3, 3, 16, 16], 0.5, &mut seeded(8));
    let cfg = AugmentConfig { probability: 1.0, ..AugmentConfig::default() };
    let samples = sample_augmentation(&cfg, 3, 16, &mut seeded(4));
    assert!(samples.iter().all(|s| s.cutout.is_some() && s.contrast != 1.0));
    let run = || {
        let tape = Tape::new();
        let pyr = ex.pyramid(tape.constant(img.clone()), Some(&samples)).unwrap();
        pyr.iter().map(|p| (*p.value()).clone()).collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)));
    let tape = Tape::new();
    let plain = ex.pyramid(tape.constant(img.clone()), None).unwrap();
    assert!(!plain[0].value().bit_eq(&a[0]));
}

#[test]
fn disabled_augmentation_is_the_identity() {
    let cfg = AugmentConfig { enabled: false, ..AugmentConfig::default() };
    let samples = sample_augmentation(&cfg, 2, 8, &mut seeded(0));
    assert!(samples.iter().all(|s| *s == AugmentSample::identity()));
    let img = Tensor::<f64>::randn(&[2, 3, 8, 8], 1.0, &mut seeded(1));
    let tape = Tape::new();
    let y = apply_augmentation(tape.constant(img.clone()), &samples);
    assert!(y.value().bit_eq(&img));
}

#[test]
fn extractor_weights_roundtrip_through_the_container() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cnn.sgx");
    let a = tiny_cnn();
    save_feature_network(&a, &path).unwrap();
    let mut b = ToyCnn::<f64>::new(&CnnConfig { input_resolution: 16, channels: [3, 4, 5, 6], seed: 99 }).unwrap();
    assert!(a.params().checksum() != b.params().checksum());
    load_feature_network(&mut b, &path).unwrap();
    for (x, y) in a.params().entries().iter().zip(b.params().entries()) {
        assert!(x.value.bit_eq(&y.value));
    }
    let mut vit = tiny_vit();
    assert!(load_feature_network(&mut vit, &path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn projection_is_deterministic(seed in 0u64..1000, data_seed in 0u64..1000) {
        let p = init_random_projections::<f64>(&shapes(), seed).unwrap();
        let mut rng = seeded(data_seed);
        let tensors: Vec<_> = shapes().iter().map(|s| Tensor::<f64>::randn(&[1, s.channels, s.size, s.size], 1.0, &mut rng)).collect();
        let run = || {
            let tape = Tape::new();
            let raw: Vec<_> = tensors.iter().map(|t| tape.constant(t.clone())).collect();
            project_pyramid(&raw, &p).unwrap().iter().map(|v| (*v.value()).clone()).collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(x.bit_eq(y));
            prop_assert!(x.all_finite());
        }
    }

    #[test]
    fn projection_is_positively_homogeneous(scale in 0.1f64..4.0) {
        let p = init_random_projections::<f64>(&shapes(), 3).unwrap();
        let mut rng = seeded(1);
        let tensors: Vec<_> = shapes().iter().map(|s| Tensor::<f64>::randn(&[1, s.channels, s.size, s.size], 1.0, &mut rng)).collect();
        let tape = Tape::new();
        let a = project_pyramid(&tensors.iter().map(|t| tape.constant(t.clone())).collect::<Vec<_>>(), &p).unwrap();
        let b = project_pyramid(&tensors.iter().map(|t| tape.constant(t.scale(scale))).collect::<Vec<_>>(), &p).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let diff = x.value().scale(scale).zip_map(&y.value(), |u, v| u - v).max_abs();
            prop_assert!(diff < 1e-9 * (1.0 + scale));
        }
    }
}
