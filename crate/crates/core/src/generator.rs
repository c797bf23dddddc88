//! Style-based generator: mapping network, Fourier-feature input, modulated
//! synthesis layers with anti-aliased resampling, growth surgery.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dGeometry, Tape, Var};
use crate::error::{Error, Result};
use crate::layerspec::{GrowthStage, LayerSpec};
use crate::nn::{normalize_2nd_moment, Bound, Dense, DenseInit, ParamId, ParamStore};
use crate::resample::{Lattice, SeparableMap, WindowedSinc};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LATENT_DIM: usize = 64;
pub const STYLE_DIM: usize = 512;

/// How each nonlinearity is wrapped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Windowed-sinc low-pass up/down sampling around every nonlinearity.
    #[default]
    AliasFree,
    /// Nearest-neighbour resampling with no low-pass filtering.
    Nearest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub z_dim: usize,
    pub c_dim: usize,
    pub w_dim: usize,
    pub mapping_layers: usize,
    pub mapping_lr_mul: f64,
    /// Channel count of a layer is `channel_base / (2 * cutoff)`, clamped.
    pub channel_base: f64,
    pub channel_min: usize,
    pub channel_max: usize,
    /// Extra samples kept on each side of every intermediate lattice.
    pub margin: usize,
    /// Filter taps per low-rate sample.
    pub filter_taps: usize,
    pub filter_mode: FilterMode,
    pub lrelu_slope: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            z_dim: LATENT_DIM,
            c_dim: LATENT_DIM,
            w_dim: STYLE_DIM,
            mapping_layers: 2,
            mapping_lr_mul: 0.01,
            channel_base: 1024.0,
            channel_min: 8,
            channel_max: 256,
            margin: 10,
            filter_taps: 6,
            filter_mode: FilterMode::AliasFree,
            lrelu_slope: 0.2,
        }
    }
}

impl GeneratorConfig {
    pub fn channels_for_cutoff(&self, cutoff: f64) -> usize {
        let c = (self.channel_base / (2.0 * cutoff)).round() as usize;
        c.clamp(self.channel_min, self.channel_max)
    }
}

/// Sinusoidal input signal. Frequencies are in cycles per image width,
/// translation in image widths, extent in image widths.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierInputGrid<T> {
    pub frequencies: Tensor<T>,
    pub phases: Tensor<T>,
    pub extent: f64,
    pub translation: [f64; 2],
    /// Output pixels per image width, used to convert pixel offsets.
    pub resolution: usize,
}

impl<T: Scalar> FourierInputGrid<T> {
    pub fn channels(&self) -> usize {
        self.phases.numel()
    }

    /// Output canvas side length in pixels.
    pub fn canvas(&self) -> usize {
        (self.resolution as f64 * self.extent).round() as usize
    }
}

/// Shift the grid by `offset` output pixels `(dx, dy)` and scale its extent.
/// A positive `dx` moves image content to the right.
pub fn translate_input_grid<T: Scalar>(
    grid: &FourierInputGrid<T>,
    offset: [f64; 2],
    scale: f64,
) -> Result<FourierInputGrid<T>> {
    if !(scale >= 1.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!("grid scale must be >= 1, got {scale}")));
    }
    let mut g = grid.clone();
    g.translation[0] += offset[0] / grid.resolution as f64;
    g.translation[1] += offset[1] / grid.resolution as f64;
    g.extent = grid.extent * scale;
    Ok(g)
}

#[derive(Clone, Debug, PartialEq)]
struct SynthLayer {
    affine: Dense,
    weight: ParamId,
    bias: ParamId,
    in_channels: usize,
    out_channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct ToRgb {
    affine: Dense,
    weight: ParamId,
    bias: ParamId,
    in_channels: usize,
}

/// Resampling maps for one layer on both axes (square lattices).
#[derive(Clone, Debug)]
struct LayerGeometry<T> {
    up: Rc<SeparableMap<T>>,
    down: Rc<SeparableMap<T>>,
}

#[derive(Clone, Debug)]
struct Geometry<T> {
    extent: f64,
    input: Lattice,
    layers: Vec<LayerGeometry<T>>,
}

/// Input signal rate and bandwidth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputSpec {
    pub sampling_rate: f64,
    pub bandwidth: f64,
}

#[derive(Clone, Debug)]
pub struct Generator<T: Scalar> {
    pub config: GeneratorConfig,
    pub params: ParamStore<T>,
    pub resolution: usize,
    pub specs: Vec<LayerSpec<T>>,
    /// Running average of mapped styles, used for truncation.
    pub w_avg: Tensor<T>,
    mapping: Vec<Dense>,
    input_freqs: ParamId,
    input_phases: ParamId,
    input_weight: ParamId,
    input_spec: InputSpec,
    layers: Vec<SynthLayer>,
    torgb: ToRgb,
    geometry: Geometry<T>,
}

impl<T: Scalar> Generator<T> {
    /// Fresh generator for `resolution` with the given synthesis layer specs.
    /// An empty spec list gives a network whose only layer is the Fourier
    /// input followed by the colour projection.
    pub fn new<R: Rng + ?Sized>(
        config: GeneratorConfig,
        resolution: usize,
        specs: Vec<LayerSpec<T>>,
        rng: &mut R,
    ) -> Result<Self> {
        if !resolution.is_power_of_two() || resolution < 2 {
            return Err(Error::InvalidArgument(format!("resolution {resolution} is not a power of two")));
        }
        if let Some(last) = specs.last() {
            if last.sampling_rate != resolution {
                return Err(Error::InvalidArgument(format!(
                    "last layer samples at {} but the output is {resolution}",
                    last.sampling_rate
                )));
            }
        }
        let mut params = ParamStore::new();
        let mut mapping = Vec::new();
        let mut in_f = config.z_dim + config.c_dim;
        for i in 0..config.mapping_layers {
            let init = DenseInit { lr_mul: config.mapping_lr_mul, ..Default::default() };
            mapping.push(Dense::new(&mut params, &format!("mapping.fc{i}"), in_f, config.w_dim, init, rng));
            in_f = config.w_dim;
        }
        let input_spec = match specs.first() {
            Some(s) => InputSpec { sampling_rate: s.sampling_rate as f64, bandwidth: s.cutoff.f64() },
            None => InputSpec { sampling_rate: resolution as f64, bandwidth: resolution as f64 / 4.0 },
        };
        let c0 = match specs.first() {
            Some(s) => config.channels_for_cutoff(s.cutoff.f64()),
            None => config.channels_for_cutoff(input_spec.bandwidth),
        };
        // frequencies inside a disc of radius ~bandwidth, uniform phases
        let mut freqs = Tensor::<T>::randn(&[c0, 2], 1.0, rng);
        for c in 0..c0 {
            let (fx, fy) = (freqs.at(&[c, 0]).f64(), freqs.at(&[c, 1]).f64());
            let r = (fx * fx + fy * fy).sqrt().max(1e-12);
            let k = input_spec.bandwidth / (r * (r * r).exp().powf(0.25));
            freqs.set(&[c, 0], T::lit(fx * k));
            freqs.set(&[c, 1], T::lit(fy * k));
        }
        let phases = Tensor::<T>::uniform(&[c0], -0.5, 0.5, rng);
        let input_freqs = params.add("input.freqs", freqs);
        let input_phases = params.add("input.phases", phases);
        params.set_frozen(input_freqs, true);
        params.set_frozen(input_phases, true);
        let input_weight = params.add("input.weight", Tensor::randn(&[c0, c0, 1, 1], 1.0, rng));

        let mut layers = Vec::new();
        let mut in_ch = c0;
        for (i, s) in specs.iter().enumerate() {
            let layer = new_layer(&mut params, &config, i, in_ch, s, rng);
            in_ch = layer.out_channels;
            layers.push(layer);
        }
        let torgb = new_torgb(&mut params, &config, in_ch, rng);
        let geometry = build_geometry(&config, resolution, &specs, input_spec, 1.0);
        Ok(Self {
            w_avg: Tensor::zeros(&[config.w_dim]),
            config,
            params,
            resolution,
            specs,
            mapping,
            input_freqs,
            input_phases,
            input_weight,
            input_spec,
            layers,
            torgb,
            geometry,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Number of style inputs consumed by synthesis (one per layer; the colour
    /// projection reuses the last one).
    pub fn num_ws(&self) -> usize {
        self.layers.len().max(1)
    }

    pub fn input_spec(&self) -> InputSpec {
        self.input_spec
    }

    pub fn layer_channels(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.out_channels).collect()
    }

    /// Canonical input grid: no translation, unit extent.
    pub fn input_grid(&self) -> FourierInputGrid<T> {
        FourierInputGrid {
            frequencies: self.params.get(self.input_freqs).clone(),
            phases: self.params.get(self.input_phases).clone(),
            extent: 1.0,
            translation: [0.0, 0.0],
            resolution: self.resolution,
        }
    }

    /// Parameters of the mapping network.
    pub fn mapping_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for d in &self.mapping {
            ids.push(d.weight);
            ids.extend(d.bias);
        }
        ids
    }

    /// Parameters owned by synthesis layer `i`.
    pub fn layer_param_ids(&self, i: usize) -> Vec<ParamId> {
        let l = &self.layers[i];
        let mut ids = vec![l.affine.weight, l.weight, l.bias];
        ids.extend(l.affine.bias);
        ids
    }

    /// Map latents `[N, z_dim]` and class vectors `[N, c_dim]` to styles.
    pub fn map_var<'t>(&self, b: &Bound<'t, T>, z: Var<'t, T>, c: Var<'t, T>) -> Result<Var<'t, T>> {
        let (zs, cs) = (z.shape(), c.shape());
        if zs.len() != 2 || zs[1] != self.config.z_dim || cs.len() != 2 || cs[1] != self.config.c_dim || cs[0] != zs[0]
        {
            return Err(Error::Shape(format!(
                "mapping expects z [N, {}] and class [N, {}], got {zs:?} and {cs:?}",
                self.config.z_dim, self.config.c_dim
            )));
        }
        let mut x = crate::autodiff::concat(&[normalize_2nd_moment(z), normalize_2nd_moment(c)], 1);
        let gain = T::lit(std::f64::consts::SQRT_2);
        for d in &self.mapping {
            x = d.forward(b, x, self.config.mapping_lr_mul).leaky_relu(T::lit(self.config.lrelu_slope), gain);
        }
        Ok(x)
    }

    /// Styles for a batch, evaluated without gradients.
    pub fn map_latent(&self, z: &Tensor<T>, class_vec: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let b = self.params.bind(&tape, false);
        let w = self.map_var(&b, tape.constant(z.clone()), tape.constant(class_vec.clone()))?;
        Ok((*w.value()).clone())
    }

    /// Render images `[N, 3, H, W]` in `[-1, 1]`. `ws` holds one `[N, w_dim]`
    /// style per layer, or a single style broadcast to every layer.
    pub fn synthesize_var<'t>(
        &self,
        b: &Bound<'t, T>,
        ws: &[Var<'t, T>],
        grid: &FourierInputGrid<T>,
    ) -> Result<Var<'t, T>> {
        let n_ws = self.num_ws();
        if ws.len() != 1 && ws.len() != n_ws {
            return Err(Error::Shape(format!("expected 1 or {n_ws} style inputs, got {}", ws.len())));
        }
        let n = ws[0].shape()[0];
        for w in ws {
            if w.shape() != [n, self.config.w_dim] {
                return Err(Error::Shape(format!("style has shape {:?}, expected [{n}, {}]", w.shape(), self.config.w_dim)));
            }
        }
        let style = |i: usize| if ws.len() == 1 { ws[0] } else { ws[i] };
        let owned;
        let geom = if (grid.extent - self.geometry.extent).abs() < 1e-12 {
            &self.geometry
        } else {
            owned = build_geometry(&self.config, self.resolution, &self.specs, self.input_spec, grid.extent);
            &owned
        };
        let tape = ws[0].tape();
        let feats = tape.constant(fourier_features(grid, &geom.input, self.input_spec));
        let c0 = grid.channels();
        let w_in = b.var(self.input_weight).scale(T::lit(1.0 / (c0 as f64).sqrt()));
        let x = feats.conv2d(w_in, Conv2dGeometry { stride: 1, pad: 0 });
        let ones = tape.constant(Tensor::ones(&[n, 1, 1, 1]));
        let mut x = x * ones;
        let slope = T::lit(self.config.lrelu_slope);
        let gain = T::lit(std::f64::consts::SQRT_2);
        for (i, (layer, lg)) in self.layers.iter().zip(&geom.layers).enumerate() {
            x = modulated_conv(b, x, style(i), layer);
            x = x.separable(Some(lg.up.clone()), Some(lg.up.clone()));
            x = x.leaky_relu(slope, gain);
            x = x.separable(Some(lg.down.clone()), Some(lg.down.clone()));
        }
        let last = style(n_ws - 1);
        let s = self.torgb.affine.forward(b, last, 1.0).scale(T::lit(1.0 / (self.torgb.in_channels as f64).sqrt()));
        let x = x * s.reshape(&[n, self.torgb.in_channels, 1, 1]);
        let y = crate::nn::conv(x, b.var(self.torgb.weight), Some(b.var(self.torgb.bias)), Conv2dGeometry { stride: 1, pad: 0 });
        Ok(y.tanh())
    }

    /// Render without gradients.
    pub fn synthesize(&self, ws: &[Tensor<T>], grid: &FourierInputGrid<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let b = self.params.bind(&tape, false);
        let vars: Vec<_> = ws.iter().map(|w| tape.constant(w.clone())).collect();
        if vars.is_empty() {
            return Err(Error::Shape("no style inputs".into()));
        }
        Ok((*self.synthesize_var(&b, &vars, grid)?.value()).clone())
    }

    /// Render with a single style broadcast to every layer.
    pub fn synthesize_w(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        self.synthesize(std::slice::from_ref(w), &self.input_grid())
    }

    /// Layers with index `< split` receive `w_a`, the rest `w_b`.
    pub fn style_mix(&self, w_a: &Tensor<T>, w_b: &Tensor<T>, split: usize) -> Result<Tensor<T>> {
        let n = self.num_ws();
        if split > n {
            return Err(Error::OutOfRange { what: "style mixing split", value: split, limit: n });
        }
        let ws: Vec<_> = (0..n).map(|i| if i < split { w_a.clone() } else { w_b.clone() }).collect();
        self.synthesize(&ws, &self.input_grid())
    }

    /// Output of the input stage and each of the first `k` layers, for a
    /// single broadcast style.
    pub fn intermediate_activations(&self, w: &Tensor<T>, k: usize) -> Result<Vec<Tensor<T>>> {
        let tape = Tape::new();
        let b = self.params.bind(&tape, false);
        let wv = tape.constant(w.clone());
        let n = w.shape()[0];
        let grid = self.input_grid();
        let feats = tape.constant(fourier_features(&grid, &self.geometry.input, self.input_spec));
        let w_in = b.var(self.input_weight).scale(T::lit(1.0 / (grid.channels() as f64).sqrt()));
        let mut x = feats.conv2d(w_in, Conv2dGeometry { stride: 1, pad: 0 }) * tape.constant(Tensor::ones(&[n, 1, 1, 1]));
        let mut out = vec![(*x.value()).clone()];
        let slope = T::lit(self.config.lrelu_slope);
        let gain = T::lit(std::f64::consts::SQRT_2);
        for (layer, lg) in self.layers.iter().zip(&self.geometry.layers).take(k) {
            x = modulated_conv(&b, x, wv, layer);
            x = x.separable(Some(lg.up.clone()), Some(lg.up.clone()));
            x = x.leaky_relu(slope, gain);
            x = x.separable(Some(lg.down.clone()), Some(lg.down.clone()));
            out.push((*x.value()).clone());
        }
        Ok(out)
    }

    /// Drop the last two layers and the colour projection, append fresh
    /// layers for `next_specs[kept..]`, and freeze everything that was kept
    /// together with the mapping network and the input stage.
    pub fn grow<R: Rng + ?Sized>(&self, next_stage: &GrowthStage, next_specs: &[LayerSpec<T>], rng: &mut R) -> Result<Self> {
        if next_stage.resolution != 2 * self.resolution {
            return Err(Error::InvalidArgument(format!(
                "growth from {} must target {}, got {}",
                self.resolution,
                2 * self.resolution,
                next_stage.resolution
            )));
        }
        let cut = next_stage.layers_cut;
        if cut > self.layers.len() {
            return Err(Error::InvalidArgument(format!("cannot cut {cut} of {} layers", self.layers.len())));
        }
        let kept = self.layers.len() - cut;
        if next_specs.len() != next_stage.layer_count || next_stage.layer_count != kept + next_stage.layers_added {
            return Err(Error::InvalidArgument(format!(
                "stage expects {} layers ({} kept + {} added), got {} specs",
                next_stage.layer_count,
                kept,
                next_stage.layers_added,
                next_specs.len()
            )));
        }
        if next_specs[..kept] != self.specs[..kept] {
            return Err(Error::InvalidArgument("kept layer specs differ from the current network".into()));
        }
        if next_specs.last().map(|s| s.sampling_rate) != Some(next_stage.resolution) {
            return Err(Error::InvalidArgument("last spec does not sample at the stage resolution".into()));
        }

        let mut params = ParamStore::new();
        let copy = |params: &mut ParamStore<T>, id: ParamId| -> ParamId {
            let nid = params.add(self.params.name(id), self.params.get(id).clone());
            params.set_frozen(nid, true);
            nid
        };
        let mapping = self
            .mapping
            .iter()
            .map(|d| Dense { weight: copy(&mut params, d.weight), bias: d.bias.map(|b| copy(&mut params, b)), ..*d })
            .collect();
        let input_freqs = copy(&mut params, self.input_freqs);
        let input_phases = copy(&mut params, self.input_phases);
        let input_weight = copy(&mut params, self.input_weight);
        let mut layers = Vec::new();
        for l in &self.layers[..kept] {
            let affine = Dense {
                weight: copy(&mut params, l.affine.weight),
                bias: l.affine.bias.map(|b| copy(&mut params, b)),
                ..l.affine
            };
            layers.push(SynthLayer {
                affine,
                weight: copy(&mut params, l.weight),
                bias: copy(&mut params, l.bias),
                in_channels: l.in_channels,
                out_channels: l.out_channels,
            });
        }
        let mut in_ch = layers.last().map_or(self.params.get(input_weight).shape()[0], |l| l.out_channels);
        for (i, s) in next_specs.iter().enumerate().skip(kept) {
            let layer = new_layer(&mut params, &self.config, i, in_ch, s, rng);
            in_ch = layer.out_channels;
            layers.push(layer);
        }
        let torgb = new_torgb(&mut params, &self.config, in_ch, rng);
        let specs = next_specs.to_vec();
        let geometry = build_geometry(&self.config, next_stage.resolution, &specs, self.input_spec, 1.0);
        Ok(Self {
            config: self.config.clone(),
            params,
            resolution: next_stage.resolution,
            specs,
            w_avg: self.w_avg.clone(),
            mapping,
            input_freqs,
            input_phases,
            input_weight,
            input_spec: self.input_spec,
            layers,
            torgb,
            geometry,
        })
    }

    /// Same network with a different resampling mode.
    pub fn with_filter_mode(&self, mode: FilterMode) -> Self {
        let mut g = self.clone();
        g.config.filter_mode = mode;
        g.geometry = build_geometry(&g.config, g.resolution, &g.specs, g.input_spec, 1.0);
        g
    }

    /// Mean style over `n` draws of `(z, class)`; `class_vec(k)` returns the
    /// class vector for class `k`.
    pub fn compute_mean_style<R: Rng + ?Sized>(
        &self,
        n: usize,
        batch: usize,
        rng: &mut R,
        mut sample_class_vec: impl FnMut(&mut R) -> Tensor<T>,
    ) -> Result<Tensor<T>> {
        if n == 0 {
            return Err(Error::InvalidArgument("mean style needs at least one sample".into()));
        }
        let mut sum = vec![0.0f64; self.config.w_dim];
        let mut done = 0;
        while done < n {
            let m = batch.max(1).min(n - done);
            let z = Tensor::<T>::randn(&[m, self.config.z_dim], 1.0, rng);
            let cs: Vec<_> = (0..m).map(|_| sample_class_vec(rng)).collect();
            let c = Tensor::stack_outer(&cs).reshape(&[m, self.config.c_dim]);
            let w = self.map_latent(&z, &c)?;
            for row in w.data().chunks(self.config.w_dim) {
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += v.f64();
                }
            }
            done += m;
        }
        Ok(Tensor::from_fn(&[self.config.w_dim], |i| T::lit(sum[i] / n as f64)))
    }
}

/// `w_avg + psi * (w - w_avg)` row-wise.
pub fn truncate_style<T: Scalar>(w: &Tensor<T>, w_avg: &Tensor<T>, psi: f64) -> Tensor<T> {
    let d = w_avg.numel();
    assert_eq!(w.numel() % d, 0, "style width mismatch");
    let p = T::lit(psi);
    let mut out = w.clone();
    for row in out.data_mut().chunks_mut(d) {
        for (v, &a) in row.iter_mut().zip(w_avg.data()) {
            *v = a + p * (*v - a);
        }
    }
    out
}

fn new_layer<T: Scalar, R: Rng + ?Sized>(
    params: &mut ParamStore<T>,
    config: &GeneratorConfig,
    index: usize,
    in_channels: usize,
    spec: &LayerSpec<T>,
    rng: &mut R,
) -> SynthLayer {
    let out_channels = config.channels_for_cutoff(spec.cutoff.f64());
    let name = format!("synthesis.L{index}");
    let affine = Dense::new(
        params,
        &format!("{name}.affine"),
        config.w_dim,
        in_channels,
        DenseInit { bias_init: 1.0, ..Default::default() },
        rng,
    );
    let weight = params.add(format!("{name}.weight"), Tensor::randn(&[out_channels, in_channels, 3, 3], 1.0, rng));
    let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
    SynthLayer { affine, weight, bias, in_channels, out_channels }
}

fn new_torgb<T: Scalar, R: Rng + ?Sized>(
    params: &mut ParamStore<T>,
    config: &GeneratorConfig,
    in_channels: usize,
    rng: &mut R,
) -> ToRgb {
    let affine = Dense::new(
        params,
        "torgb.affine",
        config.w_dim,
        in_channels,
        DenseInit { bias_init: 1.0, ..Default::default() },
        rng,
    );
    let weight = params.add("torgb.weight", Tensor::randn(&[3, in_channels, 1, 1], 1.0, rng));
    let bias = params.add("torgb.bias", Tensor::zeros(&[3]));
    ToRgb { affine, weight, bias, in_channels }
}

/// Modulated 3×3 convolution with weight demodulation:
/// `y[n,o] = d[n,o] * Σ_i W[o,i] * (s[n,i] x[n,i]) + b[o]`.
fn modulated_conv<'t, T: Scalar>(b: &Bound<'t, T>, x: Var<'t, T>, w: Var<'t, T>, layer: &SynthLayer) -> Var<'t, T> {
    let n = x.shape()[0];
    let (ci, co) = (layer.in_channels, layer.out_channels);
    let s = layer.affine.forward(b, w, 1.0);
    let xm = x * s.reshape(&[n, ci, 1, 1]);
    let weight = b.var(layer.weight);
    let y = xm.conv2d(weight, Conv2dGeometry::same(3));
    let wsq = weight.square().sum_axis(3, false).sum_axis(2, false); // [co, ci]
    let dcoef = wsq.matmul(s.square().permute(&[1, 0])).add_scalar(T::lit(1e-8)).rsqrt(); // [co, n]
    let y = y * dcoef.permute(&[1, 0]).reshape(&[n, co, 1, 1]);
    y + b.var(layer.bias).reshape(&[1, co, 1, 1])
}

/// Sample the Fourier features on `lat` (both axes), `[1, C, H, W]`.
fn fourier_features<T: Scalar>(grid: &FourierInputGrid<T>, lat: &Lattice, spec: InputSpec) -> Tensor<T> {
    let c = grid.channels();
    let len = lat.len;
    let mut out = vec![T::zero(); c * len * len];
    let tau = std::f64::consts::TAU;
    for ch in 0..c {
        let fx = grid.frequencies.at(&[ch, 0]).f64();
        let fy = grid.frequencies.at(&[ch, 1]).f64();
        let ph = grid.phases.data()[ch].f64() - fx * grid.translation[0] - fy * grid.translation[1];
        let r = (fx * fx + fy * fy).sqrt();
        let denom = (spec.sampling_rate / 2.0 - spec.bandwidth).max(1e-12);
        let amp = (1.0 - (r - spec.bandwidth) / denom).clamp(0.0, 1.0);
        for i in 0..len {
            let y = lat.position(i);
            for j in 0..len {
                let x = lat.position(j);
                out[(ch * len + i) * len + j] = T::lit((tau * (fx * x + fy * y + ph)).sin() * amp);
            }
        }
    }
    Tensor::new(vec![1, c, len, len], out)
}

fn build_geometry<T: Scalar>(
    config: &GeneratorConfig,
    resolution: usize,
    specs: &[LayerSpec<T>],
    input: InputSpec,
    extent: f64,
) -> Geometry<T> {
    let n = specs.len();
    let margin_for = |i: usize| if i + 1 == n { 0 } else { config.margin };
    let input_lat = if n == 0 {
        Lattice::centered(resolution as f64, extent, 0)
    } else {
        Lattice::centered(input.sampling_rate, extent, config.margin)
    };
    let mut layers = Vec::with_capacity(n);
    let mut src = input_lat;
    let mut in_cutoff = input.bandwidth;
    let mut in_half_width = specs.first().map_or(0.0, |s| s.half_width.f64());
    for (i, s) in specs.iter().enumerate() {
        let sr_in = src.rate;
        let sr_out = s.sampling_rate as f64;
        let tmp_rate = 2.0 * sr_in.max(sr_out);
        let up_factor = (tmp_rate / sr_in).round() as usize;
        let down_factor = (tmp_rate / sr_out).round() as usize;
        let margin_in = ((src.len as f64 - (sr_in * extent).round()) / 2.0).round() as usize;
        let tmp = Lattice::centered(tmp_rate, extent, margin_in * up_factor);
        let dst = Lattice::centered(sr_out, extent, margin_for(i));
        let (up, down) = match config.filter_mode {
            FilterMode::AliasFree => {
                let fu = WindowedSinc::design(tmp_rate, config.filter_taps * up_factor, in_cutoff, in_half_width);
                let fd = WindowedSinc::design(tmp_rate, config.filter_taps * down_factor, s.cutoff.f64(), s.half_width.f64());
                (
                    SeparableMap::from_kernel(&src, &tmp, fu.radius, |t| fu.eval(t)),
                    SeparableMap::from_kernel(&tmp, &dst, fd.radius, |t| fd.eval(t)),
                )
            }
            FilterMode::Nearest => (SeparableMap::nearest(&src, &tmp), SeparableMap::nearest(&tmp, &dst)),
        };
        layers.push(LayerGeometry { up: Rc::new(up), down: Rc::new(down) });
        src = dst;
        in_cutoff = s.cutoff.f64();
        in_half_width = s.half_width.f64();
    }
    Geometry { extent, input: input_lat, layers }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layerspec::compute_layer_specs;
    use crate::nn::seeded;

    fn tiny_config() -> GeneratorConfig {
        GeneratorConfig { channel_base: 32.0, channel_max: 8, channel_min: 4, margin: 4, w_dim: 32, ..Default::default() }
    }

    #[test]
    fn output_shape_and_range() {
        let mut rng = seeded(1);
        let specs = compute_layer_specs::<f64>(16, 4).unwrap();
        let g = Generator::new(tiny_config(), 16, specs, &mut rng).unwrap();
        let w = Tensor::randn(&[2, 32], 1.0, &mut rng);
        let img = g.synthesize_w(&w).unwrap();
        assert_eq!(img.shape(), &[2, 3, 16, 16]);
        assert!(img.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn truncation_is_affine() {
        let w = Tensor::<f64>::from_f64(&[1, 3], &[1.0, 2.0, 3.0]);
        let a = Tensor::from_f64(&[3], &[0.0, 1.0, -1.0]);
        let once = truncate_style(&w, &a, 0.35);
        let twice = truncate_style(&truncate_style(&w, &a, 0.7), &a, 0.5);
        for (x, y) in once.data().iter().zip(twice.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
