//! Class conditioning: per-class mean features from a feature network,
//! projected to the latent width for the generator and discriminator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::metrics::global_pool;
use crate::nn::{l2_normalize, Bound, ParamId, ParamStore};
use crate::projector::{feature_taps, FeatureNetwork, NUM_TAPS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddingTable<T: Scalar> {
    /// `[class_count, d_e]`.
    pub embeddings: Tensor<T>,
    pub source: String,
}

impl<T: Scalar> ClassEmbeddingTable<T> {
    pub fn class_count(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    /// Rows minus their mean over classes. Random feature networks give
    /// nearly parallel class means; centring keeps them apart after
    /// normalisation.
    pub fn centered(&self) -> Self {
        let (k, d) = (self.class_count(), self.dim());
        let mut mean = vec![0.0f64; d];
        for row in self.embeddings.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v.f64() / k as f64;
            }
        }
        let embeddings = Tensor::from_fn(&[k, d], |i| T::lit(self.embeddings.data()[i].f64() - mean[i % d]));
        Self { embeddings, source: self.source.clone() }
    }
}

/// Magic bytes of the class-embedding sidecar file.
pub const TABLE_MAGIC: &[u8; 4] = b"SGCE";

impl<T: Scalar> ClassEmbeddingTable<T> {
    /// Sidecar layout, little-endian: magic, class count (u32), d_e (u32),
    /// source length (u32), source bytes, then row-major f32 rows.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.source.len() + 4 * self.embeddings.numel());
        out.extend_from_slice(TABLE_MAGIC);
        out.extend_from_slice(&(self.class_count() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.source.len() as u32).to_le_bytes());
        out.extend_from_slice(self.source.as_bytes());
        for v in self.embeddings.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("class-embedding file: {m}"));
        if bytes.len() < 16 || &bytes[..4] != TABLE_MAGIC {
            return Err(bad("bad magic"));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        let (k, d, sl) = (u(4), u(8), u(12));
        let body = 16 + sl;
        if bytes.len() != body + 4 * k * d {
            return Err(bad("truncated or oversized"));
        }
        let source = String::from_utf8(bytes[16..body].to_vec()).map_err(|_| bad("source is not UTF-8"))?;
        let data = bytes[body..]
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        Ok(Self { embeddings: Tensor::new(vec![k, d], data), source })
    }
}

/// Mean over each class of the spatially pooled deepest feature map.
/// `images` is `[N, 3, H, W]` with one label per image.
pub fn compute_class_embeddings<T: Scalar>(
    images: &Tensor<T>,
    labels: &[usize],
    class_count: usize,
    net: &dyn FeatureNetwork<T>,
    batch: usize,
) -> Result<ClassEmbeddingTable<T>> {
    let n = images.shape()[0];
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} images but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
        return Err(Error::OutOfRange { what: "class label", value: bad, limit: class_count });
    }
    let d = net.tap_channels()[NUM_TAPS - 1];
    let mut sums = vec![0.0f64; class_count * d];
    let mut counts = vec![0usize; class_count];
    let mut start = 0;
    while start < n {
        let m = batch.max(1).min(n - start);
        let taps = feature_taps(net, &images.slice_outer(start, m))?;
        let pooled = global_pool(&taps[NUM_TAPS - 1]);
        for (i, row) in pooled.data().chunks(d).enumerate() {
            let c = labels[start + i];
            counts[c] += 1;
            for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(row) {
                *s += v.f64();
            }
        }
        start += m;
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass { class });
    }
    let embeddings = Tensor::from_fn(&[class_count, d], |i| T::lit(sums[i] / counts[i / d] as f64));
    Ok(ClassEmbeddingTable { embeddings, source: net.name().to_string() })
}

/// Affine map from embedding width to latent width.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingProjector<T: Scalar> {
    /// `[d_e, out_dim]`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub trainable: bool,
    /// L2-normalise the embedding row before projecting.
    pub normalize: bool,
}

/// `normalize?(embeddings[class]) · weight + bias`.
pub fn embed_class<T: Scalar>(table: &ClassEmbeddingTable<T>, projector: &EmbeddingProjector<T>, class: usize) -> Result<Tensor<T>> {
    if class >= table.class_count() {
        return Err(Error::OutOfRange { what: "class", value: class, limit: table.class_count() });
    }
    let d = table.dim();
    if projector.weight.shape()[0] != d {
        return Err(Error::Shape(format!("projector expects width {}, table has {d}", projector.weight.shape()[0])));
    }
    let out = projector.weight.shape()[1];
    let mut e: Vec<f64> = table.embeddings.data()[class * d..(class + 1) * d].iter().map(|v| v.f64()).collect();
    if projector.normalize {
        let norm = (e.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
        e.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(Tensor::from_fn(&[out], |j| {
        let mut s = projector.bias.data()[j].f64();
        for (i, ei) in e.iter().enumerate() {
            s += ei * projector.weight.data()[i * out + j].f64();
        }
        T::lit(s)
    }))
}

/// Which network consumes a projected class vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Generator,
    Discriminator,
}

/// Trainable table plus one projector per network.
#[derive(Clone, Debug)]
pub struct Conditioning<T: Scalar> {
    pub params: ParamStore<T>,
    pub source: String,
    pub normalize: bool,
    table: ParamId,
    g_proj: (ParamId, ParamId),
    d_proj: (ParamId, ParamId),
}

impl<T: Scalar> Conditioning<T> {
    pub fn new<R: Rng + ?Sized>(table: ClassEmbeddingTable<T>, out_dim: usize, normalize: bool, rng: &mut R) -> Self {
        let d = table.dim();
        let mut params = ParamStore::new();
        let t = params.add("table", table.embeddings);
        let std = (1.0 / d as f64).sqrt();
        let std = if normalize { 1.0 } else { std };
        let g_proj = (
            params.add("proj_g.weight", Tensor::randn(&[d, out_dim], std, rng)),
            params.add("proj_g.bias", Tensor::zeros(&[out_dim])),
        );
        let d_proj = (
            params.add("proj_d.weight", Tensor::randn(&[d, out_dim], std, rng)),
            params.add("proj_d.bias", Tensor::zeros(&[out_dim])),
        );
        Self { params, source: table.source, normalize, table: t, g_proj, d_proj }
    }

    pub fn class_count(&self) -> usize {
        self.params.get(self.table).shape()[0]
    }

    pub fn table(&self) -> ClassEmbeddingTable<T> {
        ClassEmbeddingTable { embeddings: self.params.get(self.table).clone(), source: self.source.clone() }
    }

    pub fn table_id(&self) -> ParamId {
        self.table
    }

    fn proj(&self, side: Side) -> (ParamId, ParamId) {
        match side {
            Side::Generator => self.g_proj,
            Side::Discriminator => self.d_proj,
        }
    }

    /// Parameters a loss on `side` is allowed to update: the projector of
    /// that side, plus the shared table for the discriminator.
    pub fn side_param_ids(&self, side: Side) -> Vec<ParamId> {
        let (w, b) = self.proj(side);
        match side {
            Side::Generator => vec![w, b],
            Side::Discriminator => vec![self.table, w, b],
        }
    }

    pub fn projector(&self, side: Side) -> EmbeddingProjector<T> {
        let (w, b) = self.proj(side);
        EmbeddingProjector {
            weight: self.params.get(w).clone(),
            bias: self.params.get(b).clone(),
            trainable: !self.params.is_frozen(w),
            normalize: self.normalize,
        }
    }

    /// Projected class vectors `[N, out_dim]` for `labels`.
    pub fn embed_var<'t>(&self, b: &Bound<'t, T>, labels: &[usize], side: Side) -> Result<Var<'t, T>> {
        let k = self.class_count();
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::OutOfRange { what: "class", value: bad, limit: k });
        }
        let mut e = b.var(self.table).gather_rows(labels);
        if self.normalize {
            e = l2_normalize(e);
        }
        let (w, bias) = self.proj(side);
        Ok(e.matmul(b.var(w)) + b.var(bias))
    }

    pub fn embed(&self, labels: &[usize], side: Side) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let b = self.params.bind(&tape, false);
        Ok((*self.embed_var(&b, labels, side)?.value()).clone())
    }
}
