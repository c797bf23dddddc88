use image::{Rgb, RgbImage};
use scalegan::config::*;
use scalegan::container::{Container, FORMAT_VERSION, MAGIC};
use scalegan::data::*;
use scalegan::{Error, Tensor};

#[test]
fn empty_file_gives_the_default_run() {
    let cfg = RunConfig::from_toml_str("").unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.guidance.lambda, 8.0);
    assert_eq!(cfg.blur.sigma, 2.0);
    assert_eq!(cfg.blur.cutoff_images, 200_000);
    assert_eq!(cfg.path_length.threshold_images, 200_000);
    assert_eq!(cfg.generator.z_dim, 64);
    assert_eq!((cfg.start_resolution, cfg.final_resolution), (16, 1024));
    assert_eq!(cfg.extractors.len(), 2);
}

#[test]
fn misspelt_key_is_named_with_a_suggestion() {
    match RunConfig::from_toml_str("lamda = 3.0\n").unwrap_err() {
        Error::UnknownKey { key, suggestion } => {
            assert_eq!(key, "lamda");
            assert_eq!(suggestion.as_deref(), Some("guidance.lambda"));
        }
        other => panic!("{other}"),
    }
    let msg = RunConfig::from_toml_str("[guidance]\nlamda = 3.0\n").unwrap_err().to_string();
    assert!(msg.contains("guidance.lamda") && msg.contains("guidance.lambda"), "{msg}");
}

#[test]
fn invalid_values_are_rejected() {
    for bad in [
        "start_resolution = 24",
        "final_resolution = 8",
        "class_count = 1",
        "[guidance]\nlambda = -1.0",
        "[blur]\nsigma = -0.5",
        "[path_length]\ndecay = 1.0",
        "extractors = []",
    ] {
        assert!(RunConfig::from_toml_str(bad).is_err(), "{bad}");
    }
}

#[test]
fn serialization_roundtrips() {
    let mut cfg = RunConfig::default();
    cfg.seed = 99;
    cfg.guidance.lambda = 2.5;
    cfg.class_count = Some(3);
    cfg.batch_size = Some(12);
    let text = cfg.to_toml_string().unwrap();
    assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
}

#[test]
fn load_config_checks_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "dataset_path = \"missing\"\n").unwrap();
    assert!(load_config(&path).is_err());
    std::fs::create_dir(dir.path().join("data")).unwrap();
    std::fs::write(&path, "dataset_path = \"data\"\nseed = 4\n").unwrap();
    assert_eq!(load_config(&path).unwrap().seed, 4);
    assert!(load_config(&dir.path().join("nope.toml")).is_err());
}

#[test]
fn two_by_four_dataset_is_ingested_in_order() {
    let dir = tempfile::tempdir().unwrap();
    write_shapes_dataset(dir.path(), 2, 4, 16, 0).unwrap();
    let ds = ingest_dataset::<f32>(dir.path(), 16).unwrap();
    assert_eq!(ds.len(), 8);
    assert_eq!(ds.labels, vec![0, 0, 0, 0, 1, 1, 1, 1]);
    assert_eq!(ds.class_count(), 2);
    assert_eq!(ds.images.shape(), &[8, 3, 16, 16]);
    assert_eq!(ds.skipped, 0);
    let again = ingest_dataset::<f32>(dir.path(), 16).unwrap();
    assert!(again.images.bit_eq(&ds.images));
}

#[test]
fn epoch_order_is_seeded() {
    let ds = synthetic_shapes::<f32>(2, 10, 16, 3);
    let a = ds.epoch_order(7, 0);
    assert_eq!(a, ds.epoch_order(7, 0));
    assert_ne!(a, ds.epoch_order(7, 1));
    assert_ne!(a, ds.epoch_order(8, 0));
    let mut sorted = a.clone();
    sorted.sort();
    assert_eq!(sorted, (0..20).collect::<Vec<_>>());
}

#[test]
fn unreadable_images_are_skipped_and_empty_classes_fail() {
    let dir = tempfile::tempdir().unwrap();
    write_shapes_dataset(dir.path(), 2, 2, 16, 1).unwrap();
    let class1 = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).max().unwrap();
    std::fs::write(class1.join("zz_broken.png"), b"not a png").unwrap();
    let ds = ingest_dataset::<f32>(dir.path(), 16).unwrap();
    assert_eq!((ds.len(), ds.skipped), (4, 1));
    for f in std::fs::read_dir(&class1).unwrap() {
        let p = f.unwrap().path();
        if p.file_name().unwrap() != "zz_broken.png" {
            std::fs::remove_file(p).unwrap();
        }
    }
    assert!(matches!(ingest_dataset::<f32>(dir.path(), 16), Err(Error::EmptyClass { class: 1 })));
}

#[test]
fn index_file_assigns_labels() {
    let dir = tempfile::tempdir().unwrap();
    write_shapes_dataset(dir.path(), 2, 1, 16, 2).unwrap();
    let mut lines = String::from("# path,label\n");
    for (label, class) in std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).enumerate() {
        for f in std::fs::read_dir(&class).unwrap() {
            let f = f.unwrap().path();
            let rel = f.strip_prefix(dir.path()).unwrap().display().to_string();
            lines.push_str(&format!("{rel},{}\n", 1 - label.min(1)));
        }
    }
    let index = dir.path().join("index.csv");
    std::fs::write(&index, lines).unwrap();
    let ds = ingest_dataset::<f32>(&index, 16).unwrap();
    assert_eq!(ds.len(), 2);
    let mut labels = ds.labels.clone();
    labels.sort();
    assert_eq!(labels, vec![0, 1]);
}

#[test]
fn non_square_images_are_centre_cropped() {
    // 30x10: the centre 10x10 block is white, the margins are black
    let img = RgbImage::from_fn(30, 10, |x, _| if (10..20).contains(&x) { Rgb([255, 255, 255]) } else { Rgb([0, 0, 0]) });
    let t = prepare_image::<f64>(&img, 16);
    assert_eq!(t.shape(), &[3, 16, 16]);
    assert!(t.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    let tall = RgbImage::from_fn(7, 40, |_, y| Rgb([(y * 6) as u8, 0, 0]));
    assert_eq!(prepare_image::<f32>(&tall, 32).shape(), &[3, 32, 32]);
}

#[test]
fn saved_images_reload_to_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::<f64>::from_fn(&[3, 8, 8], |i| ((i as f64) * 0.37).sin());
    let path = dir.path().join("sub/x.png");
    save_image(&t, &path).unwrap();
    let back = load_image::<f64>(&path, 8).unwrap();
    assert!(back.zip_map(&t, |a, b| a - b).max_abs() <= 1.0 / 127.5 + 1e-9);
}

#[test]
fn container_roundtrips_with_documented_layout() {
    let mut c = Container::new(serde_json::json!({ "kind": "test", "resolution": 32 }));
    let a = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 - 2.5);
    let b = Tensor::<f64>::from_fn(&[4], |i| 1.0 / (i as f64 + 1.0));
    c.push("a", &a);
    c.push("b", &b);
    let bytes = c.to_bytes().unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
    let h = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + h]).unwrap();
    assert_eq!(header["resolution"], 32);
    assert_eq!(u64::from_le_bytes(bytes[16 + h..24 + h].try_into().unwrap()), 2);
    let back = Container::from_bytes(&bytes).unwrap();
    assert_eq!(back, c);
    assert!(back.tensor::<f32>("a").unwrap().bit_eq(&a));
    assert!(back.tensor::<f64>("b").unwrap().bit_eq(&b));
    assert!(back.tensor::<f32>("c").is_err());

    let mut wrong = bytes.clone();
    wrong[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(Container::from_bytes(&wrong).is_err());
    wrong = bytes.clone();
    wrong[0] = b'X';
    assert!(Container::from_bytes(&wrong).is_err());
    assert!(Container::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn container_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    let mut c = Container::new(serde_json::json!({}));
    c.push("x", &Tensor::<f64>::from_fn(&[3], |i| i as f64));
    c.save(&path).unwrap();
    assert_eq!(Container::load(&path).unwrap(), c);
}
