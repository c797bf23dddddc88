//! Command-line driver: training, sampling, inversion, editing and metrics.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use scalegan::conditioning::{compute_class_embeddings, Side};
use scalegan::config::{load_config, RunConfig};
use scalegan::data::{image_grid, ingest_dataset, load_image, save_image, write_shapes_dataset};
use scalegan::generator::Generator;
use scalegan::inversion::{
    apply_latent_edit, invert_latent, pca_directions, pivotal_tune, reconstruction_distance, sample_class_for_image,
    EditDirection,
};
use scalegan::layerspec::build_growth_schedule_with;
use scalegan::metrics::psnr;
use scalegan::nn::seeded;
use scalegan::trainer::{generate_images, Checkpoint, Trainer};
use scalegan::Tensor;

/// Environment variable overriding the output directory of every command.
const OUTPUT_ENV: &str = "SCALEGAN_OUTPUT_DIR";

type F = f32;

#[derive(Parser)]
#[command(name = "scalegan", version, about = "Progressive alias-free conditional GAN toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or resume) a run described by a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Stop after this many images (for short runs).
        #[arg(long)]
        max_images: Option<u64>,
    },
    /// Write a grid of samples, one row per class.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        per_class: usize,
        #[arg(long, default_value_t = 1.0)]
        psi: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated class indices (default: all).
        #[arg(long, value_delimiter = ',')]
        classes: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover a style code for an image, optionally followed by pivotal tuning.
    Invert {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Class used for the starting style; sampled from the classifier if omitted.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        pti: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Apply an edit direction to an inverted style code.
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON written by `invert`.
        #[arg(long)]
        latent: PathBuf,
        /// JSON written by `directions`.
        #[arg(long)]
        directions: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Comma-separated strengths, one image per value.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = vec![-3.0, 0.0, 3.0])]
        strengths: Vec<f64>,
        /// Inclusive layer range `lo:hi` overriding the stored one.
        #[arg(long)]
        layers: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Principal directions of the style space.
    Directions {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 4096)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics of a checkpoint against a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Resolution the caller expects; must match the checkpoint.
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        psi: f64,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compute the class-embedding table and write it as a sidecar file.
    Embed {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the per-stage layer specifications.
    Layerspec {
        #[arg(long, default_value_t = 16)]
        start: usize,
        #[arg(long, default_value_t = 1024)]
        r#final: usize,
        /// Optional config whose schedule options are used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Machine-readable output.
        #[arg(long)]
        json: bool,
    },
    /// Write the synthetic shapes dataset as PNG files.
    MakeShapes {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn output_dir(flag: Option<PathBuf>, fallback: &str) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from(fallback))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint<F>> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn dataset_path(cfg: &RunConfig) -> Result<PathBuf> {
    match &cfg.dataset_path {
        Some(p) => Ok(PathBuf::from(p)),
        None => bail!("config has no dataset_path"),
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, resume, output, max_images } => train(&config, resume, output, max_images),
        Command::Generate { checkpoint, per_class, psi, seed, classes, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let k = ck.class_names.len();
            let classes = if classes.is_empty() { (0..k).collect() } else { classes };
            let labels: Vec<usize> = classes.iter().flat_map(|&c| std::iter::repeat_n(c, per_class)).collect();
            let imgs = generate_images(&ck.models.generator_ema, &ck.models.conditioning, &labels, psi, &mut seeded(seed))?;
            save_image(&image_grid(&imgs, per_class), &out)?;
            println!("{}", json!({ "out": out, "classes": classes, "per_class": per_class, "psi": psi }));
            Ok(())
        }
        Command::Invert { checkpoint, image, class, iterations, pti, seed, output } => {
            invert(&checkpoint, &image, class, iterations, pti, seed, output)
        }
        Command::Edit { checkpoint, latent, directions, index, strengths, layers, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let g = &ck.models.generator_ema;
            let lat: serde_json::Value = read_json(&latent)?;
            let w: Vec<f64> = serde_json::from_value(lat["w"].clone()).context("latent file lacks `w`")?;
            if w.len() != g.config.w_dim {
                bail!("latent has width {}, generator expects {}", w.len(), g.config.w_dim);
            }
            let dirs: Vec<EditDirection> = serde_json::from_value(read_json(&directions)?)?;
            let Some(mut dir) = dirs.get(index).cloned() else {
                bail!("direction index {index} out of range ({} available)", dirs.len());
            };
            if let Some(spec) = layers {
                dir.layer_range = parse_range(&spec)?;
            }
            let w = Tensor::<F>::from_f64(&[1, w.len()], &w);
            let imgs = strengths.iter().map(|&s| apply_latent_edit(&w, &dir, s, g)).collect::<scalegan::Result<Vec<_>>>()?;
            save_image(&image_grid(&Tensor::stack_outer(&imgs), imgs.len()), &out)?;
            println!("{}", json!({ "out": out, "strengths": strengths, "layer_range": dir.layer_range }));
            Ok(())
        }
        Command::Directions { checkpoint, count, samples, seed, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let cond = &ck.models.conditioning;
            let k = cond.class_count();
            let cv = cond.embed(&(0..k).collect::<Vec<_>>(), Side::Generator)?;
            let dirs = pca_directions(&ck.models.generator_ema, &cv, samples, count, &mut seeded(seed))?;
            write_json(&out, &serde_json::to_value(&dirs)?)?;
            let ev: Vec<_> = dirs.iter().map(|d| d.explained_variance).collect();
            println!("{}", json!({ "out": out, "explained_variance": ev }));
            Ok(())
        }
        Command::Evaluate { checkpoint, dataset, resolution, psi, samples, seed } => {
            let ck = load_checkpoint(&checkpoint)?;
            let res = ck.models.generator_ema.resolution;
            if let Some(r) = resolution {
                if r != res {
                    bail!("checkpoint generator produces {res}x{res} images but {r}x{r} was requested");
                }
            }
            let path = match dataset {
                Some(p) => p,
                None => dataset_path(&ck.config)?,
            };
            let data = ingest_dataset::<F>(&path, ck.config.final_resolution)?;
            let mut tr = Trainer::resume(ck, data)?;
            if let Some(n) = samples {
                tr.evaluator.samples = n;
            }
            let g = tr.models.generator_ema.clone();
            let report = tr.evaluate_generator(&g, psi, seed)?;
            println!("{}", serde_json::to_string(&report)?);
            Ok(())
        }
        Command::Embed { config, out } => {
            let cfg = load_config(&config)?;
            let ext = cfg
                .extractors
                .get(cfg.conditioning.extractor)
                .context("conditioning.extractor names no configured extractor")?
                .build::<F>()?;
            let res = ext.network.input_resolution();
            let data = ingest_dataset::<F>(&dataset_path(&cfg)?, res)?;
            let table = compute_class_embeddings(&data.images, &data.labels, data.class_count(), ext.network.as_ref(), cfg.conditioning.batch)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&out, table.to_bytes()).with_context(|| format!("writing {}", out.display()))?;
            println!("{}", json!({ "out": out, "classes": table.class_count(), "dim": table.dim(), "source": table.source }));
            Ok(())
        }
        Command::Layerspec { start, r#final, config, json } => {
            let opts = match config {
                Some(p) => load_config(&p)?.schedule,
                None => RunConfig::default().schedule,
            };
            let s = build_growth_schedule_with::<f64>(start, r#final, &opts)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&s)?);
            } else {
                print!("{}", s.render_table());
            }
            Ok(())
        }
        Command::MakeShapes { out, classes, per_class, resolution, seed } => {
            write_shapes_dataset(&out, classes, per_class, resolution, seed)?;
            println!("{}", json!({ "out": out, "images": classes * per_class }));
            Ok(())
        }
    }
}

fn train(config: &Path, resume: Option<PathBuf>, output: Option<PathBuf>, max_images: Option<u64>) -> Result<()> {
    let cfg = load_config(config)?;
    let out = output_dir(output, &cfg.output_dir);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let data = ingest_dataset::<F>(&dataset_path(&cfg)?, cfg.final_resolution)?;
    if data.skipped > 0 {
        log::warn!("{} unreadable images were skipped", data.skipped);
    }
    let mut tr = match resume {
        Some(p) => {
            let ck = load_checkpoint(&p)?;
            if ck.config != cfg {
                log::warn!("resuming with the configuration stored in the checkpoint");
            }
            Trainer::resume(ck, data)?
        }
        None => {
            std::fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
            Trainer::new(cfg, data)?
        }
    }
    .with_log_file(out.join("log.jsonl"));
    let ckpt = out.join("checkpoint.sgx");
    match max_images {
        None => {
            tr.train(Some(&ckpt))?;
        }
        Some(limit) => {
            while tr.state.images_seen < limit && !tr.state.finished {
                tr.step()?;
            }
            tr.evaluate()?;
            tr.save_checkpoint(&ckpt)?;
        }
    }
    println!(
        "{}",
        json!({ "checkpoint": ckpt, "images_seen": tr.state.images_seen, "stage_resolution": tr.stage_resolution() })
    );
    Ok(())
}

fn invert(
    checkpoint: &Path,
    image: &Path,
    class: Option<usize>,
    iterations: Option<usize>,
    pti: bool,
    seed: u64,
    output: Option<PathBuf>,
) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let out = output_dir(output, &ck.config.output_dir);
    let g = &ck.models.generator_ema;
    let r = g.resolution;
    let target = load_image::<F>(image, r)?.reshape(&[1, 3, r, r]);
    let cond = &ck.models.conditioning;
    let class = match (class, &ck.models.classifier) {
        (Some(c), _) => c,
        (None, Some(clf)) => sample_class_for_image(&target, clf, seed)?,
        (None, None) => 0,
    };
    let cv = cond.embed(&[class], Side::Generator)?;
    let mut rng = seeded(seed);
    let mut inv_cfg = ck.config.inversion.clone();
    if let Some(n) = iterations {
        inv_cfg.iterations = n;
    }
    let w_init = g.compute_mean_style(inv_cfg.mean_style_samples, 256, &mut rng, |_| cv.clone())?;
    let net = ck.config.extractors[0].build::<F>()?.network;
    let inv = invert_latent(&target, g, &w_init, &inv_cfg, net.as_ref())?;
    let recon = g.synthesize_w(&inv.best_w)?;
    std::fs::create_dir_all(&out)?;
    save_image(&recon, &out.join("reconstruction.png"))?;
    let mut report = json!({
        "class": class,
        "w": inv.best_w.to_f64_vec(),
        "loss": inv.best_loss,
        "psnr": psnr(&recon, &target, 2.0)?,
    });
    if pti {
        let k = cond.class_count();
        let labels: Vec<usize> = (0..ck.config.pti.locality_samples.max(1) * 4).map(|i| i % k).collect();
        let z = Tensor::<F>::randn(&[labels.len(), g.config.z_dim], 1.0, &mut rng);
        let pool = g.map_latent(&z, &cond.embed(&labels, Side::Generator)?)?;
        let tuned = pivotal_tune(&target, &inv.best_w, g, &pool, &ck.config.pti, net.as_ref())?;
        let img = tuned.generator.synthesize_w(&inv.best_w)?;
        save_image(&img, &out.join("reconstruction_pti.png"))?;
        report["pti"] = json!({
            "initial_distance": tuned.initial_distance,
            "final_distance": tuned.final_distance,
            "psnr": psnr(&img, &target, 2.0)?,
            "pixel_distance": reconstruction_distance(&tuned.generator, &inv.best_w, &target, net.as_ref(), 1.0)?,
        });
        save_tuned(&ck, tuned.generator, &out.join("pti_checkpoint.sgx"))?;
    }
    write_json(&out.join("latent.json"), &report)?;
    println!("{}", json!({ "out": out, "class": class, "psnr": report["psnr"], "loss": report["loss"] }));
    Ok(())
}

/// Checkpoint copy whose sampling generator is the tuned one.
fn save_tuned(ck: &Checkpoint<F>, g: Generator<F>, path: &Path) -> Result<()> {
    let mut c = ck.clone();
    c.models.generator_ema = g;
    c.save(path)?;
    Ok(())
}

fn parse_range(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s.split_once(':').context("layer range must look like `lo:hi`")?;
    Ok((a.trim().parse()?, b.trim().parse()?))
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(v)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
