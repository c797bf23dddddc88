//! Fixed feature networks, differentiable augmentation and the random
//! cross-channel / cross-scale mixing that turns raw taps into a four-map
//! feature pyramid.

use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dGeometry, Tape, Var};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::{seeded, Bound, ParamId, ParamStore};
use crate::resample::SeparableMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NUM_TAPS: usize = 4;

/// A frozen network emitting four feature maps of strictly decreasing size.
pub trait FeatureNetwork<T: Scalar> {
    fn name(&self) -> &str;
    fn input_resolution(&self) -> usize;
    fn tap_names(&self) -> Vec<String>;
    fn tap_channels(&self) -> Vec<usize>;
    /// Spatial side of each tap at the input resolution.
    fn tap_sizes(&self) -> Vec<usize>;
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    /// Run on images already at `input_resolution`.
    fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Vec<Var<'t, T>>>;
}

/// Serialize extractor weights (name, tap list, weight blobs).
pub fn save_feature_network<T: Scalar>(net: &dyn FeatureNetwork<T>, path: &Path) -> Result<()> {
    let mut c = Container::new(serde_json::json!({
        "kind": "feature_network",
        "name": net.name(),
        "input_resolution": net.input_resolution(),
        "taps": net.tap_names(),
    }));
    for e in net.params().entries() {
        c.push(&e.name, &e.value);
    }
    c.save(path)
}

/// Load weights saved by [`save_feature_network`] (or produced externally in
/// the same container) into an architecture-compatible network.
pub fn load_feature_network<T: Scalar>(net: &mut dyn FeatureNetwork<T>, path: &Path) -> Result<()> {
    let c = Container::load(path)?;
    if c.header.get("kind").and_then(|k| k.as_str()) != Some("feature_network") {
        return Err(Error::Checkpoint(format!("{} is not a feature-network container", path.display())));
    }
    let taps: Vec<String> = serde_json::from_value(c.header["taps"].clone())?;
    if taps != net.tap_names() {
        return Err(Error::Extractor {
            extractor: net.name().to_string(),
            tap: taps.join(","),
            message: "tap list does not match the architecture".into(),
        });
    }
    let named = c.with_prefix::<T>("")?;
    net.params_mut().load_from(&named)
}

fn he_conv<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, o: usize, i: usize, k: usize, rng: &mut R) -> ParamId {
    let std = (2.0 / (i * k * k) as f64).sqrt();
    store.add(name, Tensor::randn(&[o, i, k, k], std, rng))
}

/// Small convolutional extractor: four stride-2 stages, one tap per stage.
#[derive(Clone, Debug)]
pub struct ToyCnn<T: Scalar> {
    name: String,
    input_resolution: usize,
    channels: [usize; NUM_TAPS],
    params: ParamStore<T>,
    stages: Vec<(ParamId, ParamId, ParamId)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub input_resolution: usize,
    pub channels: [usize; NUM_TAPS],
    pub seed: u64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self { input_resolution: 224, channels: [16, 32, 48, 64], seed: 0 }
    }
}

impl<T: Scalar> ToyCnn<T> {
    pub fn new(cfg: &CnnConfig) -> Result<Self> {
        if cfg.input_resolution < 16 || cfg.input_resolution % 16 != 0 {
            return Err(Error::InvalidArgument(format!(
                "CNN extractor input resolution {} must be a multiple of 16",
                cfg.input_resolution
            )));
        }
        let mut rng = seeded(cfg.seed);
        let mut params = ParamStore::new();
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let down = he_conv(&mut params, &format!("stage{i}.down"), c, cin, 3, &mut rng);
            let conv = he_conv(&mut params, &format!("stage{i}.conv"), c, c, 3, &mut rng);
            let bias = params.add(format!("stage{i}.bias"), Tensor::randn(&[c], 0.1, &mut rng));
            stages.push((down, conv, bias));
            cin = c;
        }
        params.freeze_all();
        Ok(Self {
            name: format!("cnn-s{}", cfg.seed),
            input_resolution: cfg.input_resolution,
            channels: cfg.channels,
            params,
            stages,
        })
    }
}

impl<T: Scalar> FeatureNetwork<T> for ToyCnn<T> {
    fn name(&self) -> &str {
        &self.name
    }
    fn input_resolution(&self) -> usize {
        self.input_resolution
    }
    fn tap_names(&self) -> Vec<String> {
        (0..NUM_TAPS).map(|i| format!("stage{i}")).collect()
    }
    fn tap_channels(&self) -> Vec<usize> {
        self.channels.to_vec()
    }
    fn tap_sizes(&self) -> Vec<usize> {
        (1..=NUM_TAPS).map(|i| self.input_resolution >> i).collect()
    }
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }
    fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.input_resolution || shape[3] != self.input_resolution {
            return Err(Error::Extractor {
                extractor: self.name.clone(),
                tap: "input".into(),
                message: format!("expected [N, 3, {r}, {r}], got {shape:?}", r = self.input_resolution),
            });
        }
        let b = self.params.bind(tape, false);
        let mut h = x;
        let mut taps = Vec::with_capacity(NUM_TAPS);
        for &(down, conv, bias) in &self.stages {
            h = h.conv2d(b.var(down), Conv2dGeometry { stride: 2, pad: 1 }).relu();
            let c = h.shape()[1];
            h = (h.conv2d(b.var(conv), Conv2dGeometry::same(3)) + b.var(bias).reshape(&[1, c, 1, 1])).relu();
            taps.push(h);
        }
        Ok(taps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub input_resolution: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self { input_resolution: 224, patch: 16, dim: 48, heads: 3, mlp_ratio: 2, seed: 1 }
    }
}

#[derive(Clone, Debug)]
struct VitBlock {
    qkv: ParamId,
    proj: ParamId,
    fc1: ParamId,
    fc2: ParamId,
}

/// Small attention-based extractor: patch embedding, four transformer
/// blocks, tokens reassembled into maps at 2×, 1×, 1/2× and 1/4× the patch
/// grid.
#[derive(Clone, Debug)]
pub struct ToyVit<T: Scalar> {
    name: String,
    cfg: VitConfig,
    params: ParamStore<T>,
    patch_embed: ParamId,
    pos_embed: ParamId,
    blocks: Vec<VitBlock>,
    resize: Vec<Rc<SeparableMap<T>>>,
}

impl<T: Scalar> ToyVit<T> {
    pub fn new(cfg: &VitConfig) -> Result<Self> {
        let g = cfg.input_resolution / cfg.patch.max(1);
        if cfg.patch == 0 || cfg.input_resolution % cfg.patch != 0 || g < 4 || g % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "ViT extractor needs a patch grid divisible by 4, got {}/{}",
                cfg.input_resolution, cfg.patch
            )));
        }
        if cfg.heads == 0 || cfg.dim % cfg.heads != 0 {
            return Err(Error::InvalidArgument(format!("dim {} not divisible by {} heads", cfg.dim, cfg.heads)));
        }
        let mut rng = seeded(cfg.seed);
        let mut params = ParamStore::new();
        let d = cfg.dim;
        let patch_embed = he_conv(&mut params, "patch_embed", d, 3, cfg.patch, &mut rng);
        let pos_embed = params.add("pos_embed", Tensor::randn(&[g * g, d], 0.5, &mut rng));
        let lin = |p: &mut ParamStore<T>, name: String, i: usize, o: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            p.add(name, Tensor::randn(&[i, o], (1.0 / i as f64).sqrt(), rng))
        };
        let blocks = (0..NUM_TAPS)
            .map(|i| VitBlock {
                qkv: lin(&mut params, format!("block{i}.qkv"), d, 3 * d, &mut rng),
                proj: lin(&mut params, format!("block{i}.proj"), d, d, &mut rng),
                fc1: lin(&mut params, format!("block{i}.fc1"), d, d * cfg.mlp_ratio, &mut rng),
                fc2: lin(&mut params, format!("block{i}.fc2"), d * cfg.mlp_ratio, d, &mut rng),
            })
            .collect();
        params.freeze_all();
        let resize = [2 * g, g, g / 2, g / 4].iter().map(|&s| Rc::new(SeparableMap::bilinear(g, s))).collect();
        Ok(Self { name: format!("vit-s{}", cfg.seed), cfg: cfg.clone(), params, patch_embed, pos_embed, blocks, resize })
    }

    fn grid(&self) -> usize {
        self.cfg.input_resolution / self.cfg.patch
    }
}

fn layer_norm<'t, T: Scalar>(x: Var<'t, T>) -> Var<'t, T> {
    let last = x.shape().len() - 1;
    let centered = x - x.mean_axis(last, true);
    let var = centered.square().mean_axis(last, true);
    centered * var.add_scalar(T::lit(1e-5)).rsqrt()
}

impl<T: Scalar> FeatureNetwork<T> for ToyVit<T> {
    fn name(&self) -> &str {
        &self.name
    }
    fn input_resolution(&self) -> usize {
        self.cfg.input_resolution
    }
    fn tap_names(&self) -> Vec<String> {
        (0..NUM_TAPS).map(|i| format!("block{i}")).collect()
    }
    fn tap_channels(&self) -> Vec<usize> {
        vec![self.cfg.dim; NUM_TAPS]
    }
    fn tap_sizes(&self) -> Vec<usize> {
        let g = self.grid();
        vec![2 * g, g, g / 2, g / 4]
    }
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }
    fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let shape = x.shape();
        let r = self.cfg.input_resolution;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != r || shape[3] != r {
            return Err(Error::Extractor {
                extractor: self.name.clone(),
                tap: "input".into(),
                message: format!("expected [N, 3, {r}, {r}], got {shape:?}"),
            });
        }
        let n = shape[0];
        let (g, d, heads) = (self.grid(), self.cfg.dim, self.cfg.heads);
        let (l, dh) = (g * g, d / heads);
        let b = self.params.bind(tape, false);
        let p = x.conv2d(b.var(self.patch_embed), Conv2dGeometry { stride: self.cfg.patch, pad: 0 });
        let mut h = p.reshape(&[n, d, l]).permute(&[0, 2, 1]) + b.var(self.pos_embed).reshape(&[1, l, d]);
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut taps = Vec::with_capacity(NUM_TAPS);
        for (i, blk) in self.blocks.iter().enumerate() {
            let a = layer_norm(h).reshape(&[n * l, d]).matmul(b.var(blk.qkv)); // [n*l, 3d]
            let split = |k: usize| {
                a.narrow(1, k * d, d).reshape(&[n, l, heads, dh]).permute(&[0, 2, 1, 3]).reshape(&[n * heads, l, dh])
            };
            let (q, kk, v) = (split(0), split(1), split(2));
            let att = q.bmm(kk.permute(&[0, 2, 1])).scale(scale).softmax();
            let o = att.bmm(v).reshape(&[n, heads, l, dh]).permute(&[0, 2, 1, 3]).reshape(&[n * l, d]);
            h = h + o.matmul(b.var(blk.proj)).reshape(&[n, l, d]);
            let m = layer_norm(h).reshape(&[n * l, d]).matmul(b.var(blk.fc1));
            let m = m * m.scale(T::lit(1.702)).sigmoid();
            h = h + m.matmul(b.var(blk.fc2)).reshape(&[n, l, d]);
            let map = h.permute(&[0, 2, 1]).reshape(&[n, d, g, g]);
            let rs = self.resize[i].clone();
            taps.push(map.separable(Some(rs.clone()), Some(rs)));
        }
        Ok(taps)
    }
}

/// Bilinear resize of `[N, C, H, W]` to `size × size`.
pub fn resize_bilinear<'t, T: Scalar>(x: Var<'t, T>, size: usize) -> Var<'t, T> {
    let s = x.shape();
    if s[2] == size && s[3] == size {
        return x;
    }
    let mh = Rc::new(SeparableMap::bilinear(s[2], size));
    let mw = if s[2] == s[3] { mh.clone() } else { Rc::new(SeparableMap::bilinear(s[3], size)) };
    x.separable(Some(mh), Some(mw))
}

// ---------------------------------------------------------------------------
// augmentation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub color: bool,
    pub translation: bool,
    pub cutout: bool,
    pub probability: f64,
    /// Maximum translation as a fraction of the image side.
    pub translation_ratio: f64,
    /// Cutout square side as a fraction of the image side.
    pub cutout_ratio: f64,
    /// Apply to generated images as well as real ones.
    pub augment_fakes: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            color: true,
            translation: true,
            cutout: true,
            probability: 0.5,
            translation_ratio: 0.125,
            cutout_ratio: 0.5,
            augment_fakes: true,
        }
    }
}

/// Per-sample transform parameters, sampled once and applied identically to
/// every feature path of that image.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSample {
    pub brightness: f64,
    pub saturation: f64,
    pub contrast: f64,
    pub shift: (isize, isize),
    /// `(y0, x0, side)` or `None`.
    pub cutout: Option<(usize, usize, usize)>,
}

impl AugmentSample {
    pub fn identity() -> Self {
        Self { brightness: 0.0, saturation: 1.0, contrast: 1.0, shift: (0, 0), cutout: None }
    }
}

pub fn sample_augmentation<R: Rng + ?Sized>(cfg: &AugmentConfig, n: usize, size: usize, rng: &mut R) -> Vec<AugmentSample> {
    (0..n)
        .map(|_| {
            let mut s = AugmentSample::identity();
            if !cfg.enabled {
                return s;
            }
            if cfg.color && rng.random::<f64>() < cfg.probability {
                s.brightness = rng.random_range(-0.5..0.5);
                s.saturation = rng.random_range(0.0..2.0);
                s.contrast = rng.random_range(0.5..1.5);
            }
            if cfg.translation && rng.random::<f64>() < cfg.probability {
                let m = (size as f64 * cfg.translation_ratio).round() as i64;
                s.shift = (rng.random_range(-m..=m) as isize, rng.random_range(-m..=m) as isize);
            }
            if cfg.cutout && rng.random::<f64>() < cfg.probability {
                let side = ((size as f64 * cfg.cutout_ratio).round() as usize).clamp(1, size);
                s.cutout = Some((rng.random_range(0..=size - side), rng.random_range(0..=size - side), side));
            }
            s
        })
        .collect()
}

/// Apply sampled transforms to `[N, 3, H, W]` images.
pub fn apply_augmentation<'t, T: Scalar>(x: Var<'t, T>, samples: &[AugmentSample]) -> Var<'t, T> {
    let s = x.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    assert_eq!(samples.len(), n, "one augmentation sample per image");
    let tape = x.tape();
    let per = |f: &dyn Fn(&AugmentSample) -> f64| tape.constant(Tensor::from_fn(&[n, 1, 1, 1], |i| T::lit(f(&samples[i]))));
    let mut y = x;
    if samples.iter().any(|a| a.brightness != 0.0 || a.saturation != 1.0 || a.contrast != 1.0) {
        y = y + per(&|a| a.brightness);
        let m = y.mean_axis(1, true);
        y = (y - m) * per(&|a| a.saturation) + m;
        let m = y.reshape(&[n, 3 * h * w]).mean_axis(1, true).reshape(&[n, 1, 1, 1]);
        y = (y - m) * per(&|a| a.contrast) + m;
    }
    if samples.iter().any(|a| a.shift != (0, 0)) {
        let shifts: Vec<_> = samples.iter().map(|a| a.shift).collect();
        y = y.shift_per_sample(&shifts);
    }
    if samples.iter().any(|a| a.cutout.is_some()) {
        let mut mask = Tensor::<T>::ones(&[n, 1, h, w]);
        for (i, a) in samples.iter().enumerate() {
            if let Some((y0, x0, side)) = a.cutout {
                for yy in y0..(y0 + side).min(h) {
                    for xx in x0..(x0 + side).min(w) {
                        mask.set(&[i, 0, yy, xx], T::zero());
                    }
                }
            }
        }
        y = y * tape.constant(mask);
    }
    y
}

/// Optionally augment, resize to the extractor's resolution and run it.
pub fn extract_feature_pyramid<'t, T: Scalar>(
    image: Var<'t, T>,
    net: &dyn FeatureNetwork<T>,
    augment: Option<&[AugmentSample]>,
) -> Result<Vec<Var<'t, T>>> {
    let s = image.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Extractor {
            extractor: net.name().to_string(),
            tap: "input".into(),
            message: format!("expected an [N, 3, H, W] image batch, got {s:?}"),
        });
    }
    let x = match augment {
        Some(a) => apply_augmentation(image, a),
        None => image,
    };
    let x = resize_bilinear(x, net.input_resolution());
    let taps = net.forward(image.tape(), x)?;
    if taps.len() != NUM_TAPS {
        return Err(Error::Extractor {
            extractor: net.name().to_string(),
            tap: format!("{}", taps.len()),
            message: "expected four taps".into(),
        });
    }
    for (t, name) in taps.iter().zip(net.tap_names()) {
        if !t.value().all_finite() {
            return Err(Error::Extractor { extractor: net.name().to_string(), tap: name, message: "non-finite activations".into() });
        }
    }
    Ok(taps)
}

// ---------------------------------------------------------------------------
// random projections

/// Channel count and spatial side of one tap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureShape {
    pub channels: usize,
    pub size: usize,
}

/// Fixed random mixing weights. Never optimised.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomProjectionParams<T: Scalar> {
    pub seed: u64,
    pub shapes: Vec<FeatureShape>,
    pub params: ParamStore<T>,
    /// Cross-channel 1×1 kernels `[C_l, C_l, 1, 1]`, shallowest first.
    pub ccm: Vec<ParamId>,
    /// Residual 3×3 kernels `[C_l, C_l, 3, 3]`.
    pub csm_residual: Vec<ParamId>,
    /// 1×1 kernels mapping the deeper scale's channels to this scale,
    /// `[C_l, C_{l+1}, 1, 1]`; absent for the deepest scale.
    pub csm_lateral: Vec<Option<ParamId>>,
}

pub fn init_random_projections<T: Scalar>(shapes: &[FeatureShape], seed: u64) -> Result<RandomProjectionParams<T>> {
    if shapes.len() != NUM_TAPS {
        return Err(Error::Shape(format!("expected {NUM_TAPS} feature shapes, got {}", shapes.len())));
    }
    let mut rng = seeded(seed);
    let mut params = ParamStore::new();
    let mut ccm = Vec::new();
    let mut csm_residual = Vec::new();
    let mut csm_lateral = Vec::new();
    for (l, s) in shapes.iter().enumerate() {
        let c = s.channels;
        ccm.push(params.add(format!("ccm{l}"), Tensor::randn(&[c, c, 1, 1], (1.0 / c as f64).sqrt(), &mut rng)));
        csm_residual.push(params.add(
            format!("csm{l}.residual"),
            Tensor::randn(&[c, c, 3, 3], (1.0 / (9 * c) as f64).sqrt(), &mut rng),
        ));
        csm_lateral.push(shapes.get(l + 1).map(|d| {
            params.add(
                format!("csm{l}.lateral"),
                Tensor::randn(&[c, d.channels, 1, 1], (1.0 / d.channels as f64).sqrt(), &mut rng),
            )
        }));
    }
    params.freeze_all();
    Ok(RandomProjectionParams { seed, shapes: shapes.to_vec(), params, ccm, csm_residual, csm_lateral })
}

/// Cross-channel mixing per scale, then cross-scale mixing from the deepest
/// map to the shallowest: `y_l = RCU(ccm_l + lateral_l(up(y_{l+1})))` with
/// `RCU(x) = x + conv3×3(relu(x))`. Maps are returned shallowest first.
pub fn project_pyramid<'t, T: Scalar>(raw: &[Var<'t, T>], p: &RandomProjectionParams<T>) -> Result<Vec<Var<'t, T>>> {
    let tape = raw.first().ok_or_else(|| Error::Shape("no raw maps".into()))?.tape();
    project_pyramid_bound(raw, p, &p.params.bind(tape, false))
}

/// [`project_pyramid`] with the projection weights already recorded as `b`.
pub fn project_pyramid_bound<'t, T: Scalar>(
    raw: &[Var<'t, T>],
    p: &RandomProjectionParams<T>,
    b: &Bound<'t, T>,
) -> Result<Vec<Var<'t, T>>> {
    if raw.len() != NUM_TAPS {
        return Err(Error::Shape(format!("expected {NUM_TAPS} raw maps, got {}", raw.len())));
    }
    for (l, (r, s)) in raw.iter().zip(&p.shapes).enumerate() {
        let sh = r.shape();
        if sh.len() != 4 || sh[1] != s.channels || sh[2] != s.size || sh[3] != s.size {
            return Err(Error::Shape(format!(
                "raw map {l} has shape {sh:?}, projection expects {} channels at {}²",
                s.channels, s.size
            )));
        }
    }
    let mixed: Vec<_> = raw
        .iter()
        .zip(&p.ccm)
        .map(|(r, &k)| r.conv2d(b.var(k), Conv2dGeometry { stride: 1, pad: 0 }))
        .collect();
    let mut out: Vec<Option<Var<'t, T>>> = vec![None; NUM_TAPS];
    for l in (0..NUM_TAPS).rev() {
        let mut x = mixed[l];
        if let (Some(deeper), Some(lat)) = (out.get(l + 1).copied().flatten(), p.csm_lateral[l]) {
            let up = resize_bilinear(deeper, p.shapes[l].size);
            x = x + up.conv2d(b.var(lat), Conv2dGeometry { stride: 1, pad: 0 });
        }
        let r = x.relu().conv2d(b.var(p.csm_residual[l]), Conv2dGeometry::same(3));
        out[l] = Some(x + r);
    }
    Ok(out.into_iter().map(|v| v.expect("every scale filled")).collect())
}

/// A feature network with its own projection weights.
pub struct ProjectedExtractor<T: Scalar> {
    pub network: Box<dyn FeatureNetwork<T>>,
    pub projection: RandomProjectionParams<T>,
}

impl<T: Scalar> ProjectedExtractor<T> {
    pub fn new(network: Box<dyn FeatureNetwork<T>>, projection_seed: u64) -> Result<Self> {
        let shapes: Vec<_> = network
            .tap_channels()
            .into_iter()
            .zip(network.tap_sizes())
            .map(|(channels, size)| FeatureShape { channels, size })
            .collect();
        let projection = init_random_projections(&shapes, projection_seed)?;
        Ok(Self { network, projection })
    }

    pub fn feature_shapes(&self) -> &[FeatureShape] {
        &self.projection.shapes
    }

    /// Image (already blurred/augmented as needed) to mixed pyramid.
    pub fn pyramid<'t>(&self, image: Var<'t, T>, augment: Option<&[AugmentSample]>) -> Result<Vec<Var<'t, T>>> {
        let raw = extract_feature_pyramid(image, self.network.as_ref(), augment)?;
        project_pyramid(&raw, &self.projection)
    }

    /// [`Self::pyramid`] with caller-recorded projection weights.
    pub fn pyramid_bound<'t>(
        &self,
        image: Var<'t, T>,
        augment: Option<&[AugmentSample]>,
        projection: &Bound<'t, T>,
    ) -> Result<Vec<Var<'t, T>>> {
        let raw = extract_feature_pyramid(image, self.network.as_ref(), augment)?;
        project_pyramid_bound(&raw, &self.projection, projection)
    }
}

/// Which extractor architecture to build.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractorConfig {
    Cnn {
        #[serde(default = "default_resolution")]
        input_resolution: usize,
        #[serde(default = "default_cnn_channels")]
        channels: [usize; NUM_TAPS],
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        projection_seed: u64,
        #[serde(default)]
        weights: Option<String>,
    },
    Vit {
        #[serde(default = "default_resolution")]
        input_resolution: usize,
        #[serde(default = "default_patch")]
        patch: usize,
        #[serde(default = "default_vit_dim")]
        dim: usize,
        #[serde(default = "default_heads")]
        heads: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        projection_seed: u64,
        #[serde(default)]
        weights: Option<String>,
    },
}

fn default_resolution() -> usize {
    224
}
fn default_cnn_channels() -> [usize; NUM_TAPS] {
    CnnConfig::default().channels
}
fn default_patch() -> usize {
    16
}
fn default_vit_dim() -> usize {
    48
}
fn default_heads() -> usize {
    3
}

impl ExtractorConfig {
    pub fn build_network<T: Scalar>(&self) -> Result<Box<dyn FeatureNetwork<T>>> {
        let (mut net, weights): (Box<dyn FeatureNetwork<T>>, _) = match self {
            ExtractorConfig::Cnn { input_resolution, channels, seed, weights, .. } => (
                Box::new(ToyCnn::new(&CnnConfig { input_resolution: *input_resolution, channels: *channels, seed: *seed })?),
                weights,
            ),
            ExtractorConfig::Vit { input_resolution, patch, dim, heads, seed, weights, .. } => (
                Box::new(ToyVit::new(&VitConfig {
                    input_resolution: *input_resolution,
                    patch: *patch,
                    dim: *dim,
                    heads: *heads,
                    mlp_ratio: 2,
                    seed: *seed,
                })?),
                weights,
            ),
        };
        if let Some(path) = weights {
            load_feature_network(net.as_mut(), Path::new(path))?;
        }
        Ok(net)
    }

    pub fn projection_seed(&self) -> u64 {
        match self {
            ExtractorConfig::Cnn { projection_seed, .. } | ExtractorConfig::Vit { projection_seed, .. } => *projection_seed,
        }
    }

    pub fn build<T: Scalar>(&self) -> Result<ProjectedExtractor<T>> {
        ProjectedExtractor::new(self.build_network()?, self.projection_seed())
    }
}

/// Run a network on plain tensors without recording gradients.
pub fn feature_taps<T: Scalar>(net: &dyn FeatureNetwork<T>, images: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let tape = Tape::new();
    let x = tape.constant(images.clone());
    let taps = extract_feature_pyramid(x, net, None)?;
    Ok(taps.iter().map(|t| (*t.value()).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cnn_and_vit_tap_shapes() {
        let cnn = ToyCnn::<f32>::new(&CnnConfig { input_resolution: 32, channels: [4, 6, 8, 10], seed: 0 }).unwrap();
        let vit = ToyVit::<f32>::new(&VitConfig { input_resolution: 32, patch: 4, dim: 8, heads: 2, mlp_ratio: 2, seed: 0 }).unwrap();
        let img = Tensor::<f32>::randn(&[2, 3, 20, 20], 0.5, &mut seeded(0));
        for net in [&cnn as &dyn FeatureNetwork<f32>, &vit] {
            let taps = feature_taps(net, &img).unwrap();
            let sizes: Vec<_> = taps.iter().map(|t| t.shape()[2]).collect();
            assert_eq!(sizes, net.tap_sizes());
            assert!(sizes.windows(2).all(|w| w[0] > w[1]));
            let chans: Vec<_> = taps.iter().map(|t| t.shape()[1]).collect();
            assert_eq!(chans, net.tap_channels());
        }
    }
}
