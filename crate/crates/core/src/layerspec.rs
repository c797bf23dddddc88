//! Anti-aliased per-layer filter specifications and the progressive-growing
//! plan.
//!
//! Cutoff and stopband frequencies progress geometrically from the first
//! layer to the last, the exponent saturating two layers before the end so
//! the final pair is critically sampled. Sampling rates are the smallest
//! power of two that holds the stopband, capped at the stage resolution, and
//! transition bands are as wide as the sampling rate permits.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// First-layer cutoff, cycles per unit.
pub const FIRST_CUTOFF: f64 = 2.0;
/// log2 of the first-layer stopband.
pub const FIRST_STOPBAND_LOG2: f64 = 2.1;
/// log2 of the ratio between the last stopband and the output bandlimit.
pub const LAST_STOPBAND_LOG2_MARGIN: f64 = 0.3;
/// Number of critically sampled layers at the end of every specification.
pub const CRITICAL_LAYERS: usize = 2;
/// Sampling rates never exceed `resolution * SAMPLING_RATE_CAP`.
pub const SAMPLING_RATE_CAP: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LayerSpec<T: Scalar> {
    pub index: usize,
    pub sampling_rate: usize,
    pub cutoff: T,
    pub stopband: T,
    pub half_width: T,
    pub is_critical: bool,
}

impl<T: Scalar> LayerSpec<T> {
    pub fn bandlimit(&self) -> T {
        T::from_usize_lossy(self.sampling_rate) / T::lit(2.0)
    }
}

fn is_power_of_two(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

fn smallest_pow2_at_least<T: Scalar>(x: T) -> usize {
    let mut p = 1usize;
    while T::from_usize_lossy(p) < x {
        p *= 2;
    }
    p
}

/// Filter specifications for an `n_layers`-layer synthesis network that
/// outputs `resolution` pixels per side.
pub fn compute_layer_specs<T: Scalar>(resolution: usize, n_layers: usize) -> Result<Vec<LayerSpec<T>>> {
    if n_layers < CRITICAL_LAYERS {
        return Err(Error::InvalidArgument(format!(
            "need at least {CRITICAL_LAYERS} layers for the critically sampled pair, got {n_layers}"
        )));
    }
    if !is_power_of_two(resolution) || resolution < 16 {
        return Err(Error::InvalidArgument(format!(
            "resolution must be a power of two >= 16, got {resolution}"
        )));
    }
    let two = T::lit(2.0);
    let first_cutoff = T::lit(FIRST_CUTOFF);
    let first_stopband = two.powf(T::lit(FIRST_STOPBAND_LOG2));
    let last_cutoff = T::from_usize_lossy(resolution) / two;
    let last_stopband = last_cutoff * two.powf(T::lit(LAST_STOPBAND_LOG2_MARGIN));
    let cap = T::from_usize_lossy(resolution * SAMPLING_RATE_CAP);
    let span = n_layers - CRITICAL_LAYERS;

    Ok((0..n_layers)
        .map(|i| {
            let saturated = i >= span;
            let (cutoff, stopband) = if saturated {
                (last_cutoff, last_stopband)
            } else {
                let e = T::from_usize_lossy(i) / T::from_usize_lossy(span);
                (
                    first_cutoff * (last_cutoff / first_cutoff).powf(e),
                    first_stopband * (last_stopband / first_stopband).powf(e),
                )
            };
            let sampling_rate = smallest_pow2_at_least((stopband * two).min(cap));
            let half_rate = T::from_usize_lossy(sampling_rate) / two;
            LayerSpec {
                index: i,
                sampling_rate,
                cutoff,
                stopband,
                half_width: stopband.max(half_rate) - cutoff,
                is_critical: cutoff == half_rate,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthStage {
    pub resolution: usize,
    pub layer_count: usize,
    pub layers_cut: usize,
    pub layers_added: usize,
    pub batch_size: usize,
}

/// Whether the last stage adds fewer layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FinalStageRule {
    /// Reduced addition only when the schedule ends at `max_resolution`.
    #[default]
    AtMaxResolution,
    /// Reduced addition on the last stage of every schedule.
    Always,
    /// Never reduce.
    Never,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleOptions {
    pub initial_layers: usize,
    pub layers_cut: usize,
    pub layers_added: usize,
    pub final_layers_added: usize,
    pub max_resolution: usize,
    pub final_stage_rule: FinalStageRule,
    pub batch_divisor: usize,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        Self {
            initial_layers: 11,
            layers_cut: 2,
            layers_added: 7,
            final_layers_added: 5,
            max_resolution: 1024,
            final_stage_rule: FinalStageRule::AtMaxResolution,
            batch_divisor: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct GrowthSchedule<T: Scalar> {
    pub stages: Vec<GrowthStage>,
    pub per_stage_specs: Vec<Vec<LayerSpec<T>>>,
}

/// Training batch size for a stage resolution, divided by `divisor`.
pub fn batch_size_for_resolution(resolution: usize, divisor: usize) -> Result<usize> {
    let base = match resolution {
        16 | 32 | 64 => 2048,
        128 | 256 => 256,
        512 | 1024 => 128,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "resolution {resolution} is not in the growth schedule (16..=1024, powers of two)"
            )))
        }
    };
    if divisor == 0 {
        return Err(Error::InvalidArgument("batch divisor must be positive".into()));
    }
    Ok((base / divisor).max(1))
}

pub fn build_growth_schedule<T: Scalar>(start: usize, final_resolution: usize) -> Result<GrowthSchedule<T>> {
    build_growth_schedule_with(start, final_resolution, &ScheduleOptions::default())
}

pub fn build_growth_schedule_with<T: Scalar>(
    start: usize,
    final_resolution: usize,
    opts: &ScheduleOptions,
) -> Result<GrowthSchedule<T>> {
    for (name, r) in [("start", start), ("final", final_resolution)] {
        if !is_power_of_two(r) || r < 16 {
            return Err(Error::InvalidArgument(format!("{name} resolution {r} must be a power of two >= 16")));
        }
    }
    if start > final_resolution {
        return Err(Error::InvalidArgument(format!(
            "start resolution {start} exceeds final resolution {final_resolution}"
        )));
    }
    let reduce_last = match opts.final_stage_rule {
        FinalStageRule::AtMaxResolution => final_resolution == opts.max_resolution,
        FinalStageRule::Always => true,
        FinalStageRule::Never => false,
    };

    let mut stages = vec![GrowthStage {
        resolution: start,
        layer_count: opts.initial_layers,
        layers_cut: 0,
        layers_added: opts.initial_layers,
        batch_size: batch_size_for_resolution(start, opts.batch_divisor)?,
    }];
    let mut specs = vec![compute_layer_specs::<T>(start, opts.initial_layers)?];
    let mut res = start;
    while res < final_resolution {
        res *= 2;
        let prev = stages.last().expect("at least one stage");
        let added = if res == final_resolution && reduce_last && res > start {
            opts.final_layers_added
        } else {
            opts.layers_added
        };
        if prev.layer_count < opts.layers_cut {
            return Err(Error::InvalidArgument("cannot cut more layers than exist".into()));
        }
        let count = prev.layer_count - opts.layers_cut + added;
        let mut next: Vec<LayerSpec<T>> =
            specs.last().expect("specs per stage")[..prev.layer_count - opts.layers_cut].to_vec();
        let grown = compute_layer_specs::<T>(res, count)?;
        next.extend(grown.into_iter().skip(next.len()));
        stages.push(GrowthStage {
            resolution: res,
            layer_count: count,
            layers_cut: opts.layers_cut,
            layers_added: added,
            batch_size: batch_size_for_resolution(res, opts.batch_divisor)?,
        });
        specs.push(next);
    }
    Ok(GrowthSchedule { stages, per_stage_specs: specs })
}

impl<T: Scalar> GrowthSchedule<T> {
    pub fn layer_counts(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.layer_count).collect()
    }

    pub fn stage_for_resolution(&self, resolution: usize) -> Option<usize> {
        self.stages.iter().position(|s| s.resolution == resolution)
    }

    /// Human-readable table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        for (k, (stage, specs)) in self.stages.iter().zip(&self.per_stage_specs).enumerate() {
            let _ = writeln!(
                out,
                "stage {k}: {res}x{res}, {n} layers (cut {c}, added {a}), batch {b}",
                res = stage.resolution,
                n = stage.layer_count,
                c = stage.layers_cut,
                a = stage.layers_added,
                b = stage.batch_size
            );
            let _ = writeln!(out, "  {:>5} {:>6} {:>10} {:>10} {:>10} {:>8}", "layer", "rate", "cutoff", "stopband", "halfwidth", "critical");
            for s in specs {
                let _ = writeln!(
                    out,
                    "  {:>5} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>8}",
                    s.index,
                    s.sampling_rate,
                    s.cutoff.f64(),
                    s.stopband.f64(),
                    s.half_width.f64(),
                    if s.is_critical { "yes" } else { "" }
                );
            }
        }
        out
    }

    /// One line per layer:
    /// `stage,index,sampling_rate,cutoff,stopband,half_width,is_critical`.
    pub fn render_rows(&self) -> String {
        let mut out = String::from("stage,index,sampling_rate,cutoff,stopband,half_width,is_critical\n");
        for (k, specs) in self.per_stage_specs.iter().enumerate() {
            for s in specs {
                let _ = writeln!(
                    out,
                    "{k},{},{},{},{},{},{}",
                    s.index,
                    s.sampling_rate,
                    s.cutoff.f64(),
                    s.stopband.f64(),
                    s.half_width.f64(),
                    s.is_critical
                );
            }
        }
        out
    }
}
