//! Run configuration: TOML file with defaults, validation and
//! nearest-match suggestions for unknown keys.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierConfig;
use crate::discriminator::{BlurConfig, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::inversion::{InversionConfig, PtiConfig};
use crate::layerspec::ScheduleOptions;
use crate::projector::{AugmentConfig, CnnConfig, ExtractorConfig};
use crate::training::{GuidanceConfig, LossForm, PathLengthConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub g_lr: f64,
    pub d_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { g_lr: 2.5e-3, d_lr: 2e-3, beta1: 0.0, beta2: 0.99, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmaConfig {
    pub enabled: bool,
    /// Half-life in images; by default `batch · 10 / 32` thousand.
    pub half_life_images: Option<f64>,
    /// Half-life is capped at `rampup · images_seen` (0 disables the cap).
    pub rampup: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self { enabled: true, half_life_images: None, rampup: 0.05 }
    }
}

impl EmaConfig {
    /// Per-step decay for a batch of `batch` images.
    pub fn decay(&self, batch: usize, images_seen: u64) -> f64 {
        if !self.enabled {
            return 0.0;
        }
        let mut half = self.half_life_images.unwrap_or(batch as f64 * 10.0 / 32.0 * 1000.0);
        if self.rampup > 0.0 {
            half = half.min(images_seen as f64 * self.rampup);
        }
        0.5f64.powf(batch as f64 / half.max(1e-8))
    }
}

/// Stage controller settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub eval_interval_images: u64,
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    pub divergence_factor: f64,
    /// Hard cap on images per stage.
    pub max_stage_images: Option<u64>,
    /// Checkpoint after every evaluation.
    pub checkpoint_every_eval: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            eval_interval_images: 50_000,
            plateau_patience: 3,
            plateau_threshold: 0.01,
            divergence_factor: 5.0,
            max_stage_images: None,
            checkpoint_every_eval: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditioningConfig {
    /// Index of the extractor whose deepest tap provides class embeddings.
    pub extractor: usize,
    pub normalize: bool,
    /// Subtract the cross-class mean from the table before training.
    pub center: bool,
    pub batch: usize,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self { extractor: 0, normalize: true, center: true, batch: 32 }
    }
}

/// Classifier used for guidance and the inception-style score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTraining {
    pub enabled: bool,
    pub model: ClassifierConfig,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        Self { enabled: true, model: ClassifierConfig::default(), epochs: 15, batch: 32, lr: 3e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Randomly initialised network for the training-time Fréchet distance.
    pub rfid_network: CnnConfig,
    pub eval_samples: usize,
    pub eval_seed: u64,
    pub pr_k: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            rfid_network: CnnConfig { input_resolution: 64, channels: [16, 32, 48, 64], seed: 2024 },
            eval_samples: 512,
            eval_seed: 99,
            pr_k: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset_path: Option<String>,
    pub class_count: Option<usize>,
    pub output_dir: String,
    pub start_resolution: usize,
    pub final_resolution: usize,
    /// Overrides the per-stage batch size of the schedule.
    pub batch_size: Option<usize>,
    pub loss: LossForm,
    pub schedule: ScheduleOptions,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub extractors: Vec<ExtractorConfig>,
    pub augment: AugmentConfig,
    pub blur: BlurConfig,
    pub guidance: GuidanceConfig,
    pub path_length: PathLengthConfig,
    pub optim: OptimConfig,
    pub ema: EmaConfig,
    pub training: StageConfig,
    pub conditioning: ConditioningConfig,
    pub classifier: ClassifierTraining,
    pub metrics: MetricsConfig,
    pub inversion: InversionConfig,
    pub pti: PtiConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset_path: None,
            class_count: None,
            output_dir: "runs".into(),
            start_resolution: 16,
            final_resolution: 1024,
            batch_size: None,
            loss: LossForm::Logistic,
            schedule: ScheduleOptions { batch_divisor: 16, ..ScheduleOptions::default() },
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            extractors: vec![
                ExtractorConfig::Cnn {
                    input_resolution: 224,
                    channels: CnnConfig::default().channels,
                    seed: 0,
                    projection_seed: 1,
                    weights: None,
                },
                ExtractorConfig::Vit {
                    input_resolution: 224,
                    patch: 16,
                    dim: 48,
                    heads: 3,
                    seed: 2,
                    projection_seed: 3,
                    weights: None,
                },
            ],
            augment: AugmentConfig::default(),
            blur: BlurConfig::default(),
            guidance: GuidanceConfig::default(),
            path_length: PathLengthConfig::default(),
            optim: OptimConfig::default(),
            ema: EmaConfig::default(),
            training: StageConfig::default(),
            conditioning: ConditioningConfig::default(),
            classifier: ClassifierTraining::default(),
            metrics: MetricsConfig::default(),
            inversion: InversionConfig::default(),
            pti: PtiConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse TOML text; missing keys take their defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::Config { path: String::new(), message: e.to_string() })?;
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            let message = e.inner().to_string();
            match unknown_field(&message) {
                Some((key, expected)) => {
                    let section = match path.strip_suffix(key.as_str()) {
                        Some(p) => p.trim_end_matches('.').to_string(),
                        None if path == "." => String::new(),
                        None => path.clone(),
                    };
                    Error::UnknownKey { suggestion: suggest_key(&key, &expected, &section), key: qualify(&section, &key) }
                }
                None => Error::Config { path, message },
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config { path: String::new(), message: e.to_string() })
    }

    /// Check cross-field constraints.
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: String| Err(Error::Config { path: path.into(), message });
        for (path, r) in [("start_resolution", self.start_resolution), ("final_resolution", self.final_resolution)] {
            if !r.is_power_of_two() || r < 16 {
                return bad(path, format!("{r} is not a power of two >= 16"));
            }
        }
        if self.start_resolution > self.final_resolution {
            return bad("start_resolution", "exceeds final_resolution".into());
        }
        if self.extractors.is_empty() {
            return bad("extractors", "at least one feature network is required".into());
        }
        if self.conditioning.extractor >= self.extractors.len() {
            return bad("conditioning.extractor", format!("no extractor with index {}", self.conditioning.extractor));
        }
        if self.discriminator.c_dim != self.generator.c_dim {
            return bad("discriminator.c_dim", format!("must equal generator.c_dim ({})", self.generator.c_dim));
        }
        if self.batch_size == Some(0) {
            return bad("batch_size", "must be positive".into());
        }
        if self.class_count == Some(0) || self.class_count == Some(1) {
            return bad("class_count", "at least two classes are required".into());
        }
        if self.guidance.lambda < 0.0 || !self.guidance.lambda.is_finite() {
            return bad("guidance.lambda", format!("must be finite and >= 0, got {}", self.guidance.lambda));
        }
        if !(self.blur.sigma >= 0.0) {
            return bad("blur.sigma", format!("must be >= 0, got {}", self.blur.sigma));
        }
        if !(0.0..1.0).contains(&self.path_length.decay) {
            return bad("path_length.decay", format!("must be in [0, 1), got {}", self.path_length.decay));
        }
        if self.path_length.interval == 0 || self.path_length.batch_shrink == 0 {
            return bad("path_length", "interval and batch_shrink must be positive".into());
        }
        if self.training.eval_interval_images == 0 {
            return bad("training.eval_interval_images", "must be positive".into());
        }
        if self.training.plateau_patience == 0 {
            return bad("training.plateau_patience", "must be positive".into());
        }
        if self.metrics.pr_k == 0 || self.metrics.eval_samples <= self.metrics.pr_k {
            return bad("metrics", "eval_samples must exceed pr_k > 0".into());
        }
        self.inversion.validate().or_else(|e| bad("inversion", e.to_string()))?;
        Ok(())
    }
}

/// Read and validate a config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg = RunConfig::from_toml_str(&text)?;
    if let Some(d) = &cfg.dataset_path {
        let p = path.parent().unwrap_or(Path::new(".")).join(d);
        if !Path::new(d).exists() && !p.exists() {
            return Err(Error::Config { path: "dataset_path".into(), message: format!("{d} does not exist") });
        }
    }
    Ok(cfg)
}

fn qualify(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

/// `unknown field `x`, expected one of `a`, `b`` -> (`x`, [`a`, `b`]).
fn unknown_field(message: &str) -> Option<(String, Vec<String>)> {
    let rest = message.strip_prefix("unknown field `")?;
    let (key, tail) = rest.split_once('`')?;
    let expected = tail.split('`').skip(1).step_by(2).map(str::to_string).collect();
    Some((key.to_string(), expected))
}

/// Closest known key: same section first, then any dotted key path in the
/// default configuration.
fn suggest_key(key: &str, expected: &[String], section: &str) -> Option<String> {
    let score = |cand: &str| strsim::normalized_damerau_levenshtein(key, cand);
    let local = expected.iter().map(|c| (score(c), qualify(section, c))).max_by(|a, b| a.0.total_cmp(&b.0));
    if let Some((s, c)) = &local {
        if *s >= 0.5 {
            return Some(c.clone());
        }
    }
    let mut paths = Vec::new();
    if let Ok(toml::Value::Table(t)) = toml::Value::try_from(RunConfig::default()) {
        collect_paths(&t, "", &mut paths);
    }
    let global = paths
        .into_iter()
        .map(|p| (score(p.rsplit('.').next().unwrap_or(&p)), p))
        .max_by(|a, b| a.0.total_cmp(&b.0));
    match (local, global) {
        (_, Some((s, p))) if s >= 0.5 => Some(p),
        (Some((s, c)), _) if s > 0.0 => Some(c),
        _ => None,
    }
}

fn collect_paths(t: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in t {
        let p = qualify(prefix, k);
        if let toml::Value::Table(sub) = v {
            collect_paths(sub, &p, out);
        }
        out.push(p);
    }
}
