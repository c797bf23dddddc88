//! Labelled image datasets: directory/index ingestion, resizing, seeded
//! ordering, and a synthetic shapes generator.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::nn::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// Images `[N, 3, R, R]` in `[-1, 1]` with one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages<T: Scalar> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    /// Files that could not be decoded.
    pub skipped: usize,
}

impl<T: Scalar> LabeledImages<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    /// Permutation of sample indices for `epoch`, fixed by `seed`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut rng = SeededRng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Images and labels at `indices`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let r = self.resolution();
        let parts: Vec<_> = indices.iter().map(|&i| self.images.slice_outer(i, 1)).collect();
        let imgs = Tensor::stack_outer(&parts).reshape(&[indices.len(), 3, r, r]);
        (imgs, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Copy at a lower power-of-two resolution by box averaging.
    pub fn downsampled(&self, resolution: usize) -> Result<Self> {
        let r = self.resolution();
        if resolution == r {
            return Ok(self.clone());
        }
        if resolution > r || r % resolution != 0 {
            return Err(Error::InvalidArgument(format!("cannot downsample {r} to {resolution}")));
        }
        let f = r / resolution;
        let n = self.len();
        let inv = T::lit(1.0 / (f * f) as f64);
        let src = &self.images;
        let images = Tensor::from_fn(&[n, 3, resolution, resolution], |i| {
            let x = i % resolution;
            let y = (i / resolution) % resolution;
            let plane = i / (resolution * resolution);
            let base = plane * r * r;
            let mut s = T::zero();
            for dy in 0..f {
                for dx in 0..f {
                    s += src.data()[base + (y * f + dy) * r + x * f + dx];
                }
            }
            s * inv
        });
        Ok(Self { images, labels: self.labels.clone(), class_names: self.class_names.clone(), skipped: self.skipped })
    }

    /// Indices of each class's samples.
    pub fn per_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_count()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

/// Centre-crop to a square and resize to `resolution`, returning `[3, R, R]`
/// values in `[-1, 1]`.
pub fn prepare_image<T: Scalar>(img: &RgbImage, resolution: usize) -> Tensor<T> {
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let cropped = image::imageops::crop_imm(img, (w - side) / 2, (h - side) / 2, side, side).to_image();
    let r = resolution as u32;
    let resized = if side == r { cropped } else { image::imageops::resize(&cropped, r, r, FilterType::Triangle) };
    rgb_to_tensor(&resized)
}

pub fn rgb_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    Tensor::from_fn(&[3, h, w], |i| {
        let c = i / (h * w);
        let y = (i / w) % h;
        let x = i % w;
        T::lit(img.get_pixel(x as u32, y as u32)[c] as f64 / 127.5 - 1.0)
    })
}

/// `[3, H, W]` (or `[1, 3, H, W]`) in `[-1, 1]` to an 8-bit image.
pub fn tensor_to_rgb<T: Scalar>(t: &Tensor<T>) -> RgbImage {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let v = t.data()[(c * h + y as usize) * w + x as usize].f64();
            ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
        };
        Rgb([px(0), px(1), px(2)])
    })
}

/// Tile `[N, 3, R, R]` images row-major into `[3, rows·R, cols·R]`.
pub fn image_grid<T: Scalar>(images: &Tensor<T>, cols: usize) -> Tensor<T> {
    let (n, c, h, w) = images.dims4();
    let cols = cols.clamp(1, n.max(1));
    let rows = n.div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut out = Tensor::full(&[c, gh, gw], T::lit(-1.0));
    let src = images.data();
    let dst = out.data_mut();
    for i in 0..n {
        let (oy, ox) = ((i / cols) * h, (i % cols) * w);
        for ch in 0..c {
            for y in 0..h {
                let s = ((i * c + ch) * h + y) * w;
                let d = (ch * gh + oy + y) * gw + ox;
                dst[d..d + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    out
}

pub fn save_image<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    tensor_to_rgb(t).save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn load_image<T: Scalar>(path: &Path, resolution: usize) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    Ok(prepare_image(&img.to_rgb8(), resolution))
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

/// Read a labelled dataset.
///
/// `path` is either a directory with one subdirectory per class (label =
/// position of the subdirectory in sorted order) or an index file whose
/// lines are `relative/path,label` (paths relative to the index file).
/// Undecodable files are skipped with a warning; a class without any image
/// is an error.
pub fn ingest_dataset<T: Scalar>(path: &Path, resolution: usize) -> Result<LabeledImages<T>> {
    let mut files: Vec<(PathBuf, usize)> = Vec::new();
    let class_names: Vec<String>;
    if path.is_dir() {
        let classes: Vec<PathBuf> = sorted_entries(path)?.into_iter().filter(|p| p.is_dir()).collect();
        if classes.is_empty() {
            return Err(Error::Dataset(format!("{} has no class subdirectories", path.display())));
        }
        class_names = classes.iter().map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned()).collect();
        for (label, dir) in classes.iter().enumerate() {
            for f in sorted_entries(dir)? {
                if f.is_file() && is_image(&f) {
                    files.push((f, label));
                }
            }
        }
    } else if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new("."));
        let mut max_label = 0;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (p, l) = line
                .rsplit_once(',')
                .ok_or_else(|| Error::Dataset(format!("{}:{}: expected `path,label`", path.display(), lineno + 1)))?;
            let label: usize = l
                .trim()
                .parse()
                .map_err(|_| Error::Dataset(format!("{}:{}: bad label `{}`", path.display(), lineno + 1, l.trim())))?;
            max_label = max_label.max(label);
            files.push((root.join(p.trim()), label));
        }
        class_names = (0..=max_label).map(|i| i.to_string()).collect();
    } else {
        return Err(Error::Dataset(format!("{} does not exist", path.display())));
    }

    let mut images = Vec::with_capacity(files.len());
    let mut labels = Vec::with_capacity(files.len());
    let mut skipped = 0;
    for (f, label) in files {
        match image::open(&f) {
            Ok(img) => {
                images.push(prepare_image::<T>(&img.to_rgb8(), resolution));
                labels.push(label);
            }
            Err(e) => {
                log::warn!("skipping unreadable image {}: {e}", f.display());
                skipped += 1;
            }
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} unreadable image(s)");
    }
    let mut counts = vec![0usize; class_names.len()];
    for &l in &labels {
        counts[l] += 1;
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass { class });
    }
    let n = labels.len();
    let images = Tensor::stack_outer(&images).reshape(&[n, 3, resolution, resolution]);
    Ok(LabeledImages { images, labels, class_names, skipped })
}

/// Shape drawn by each synthetic class, cycling if there are more classes.
const SHAPES: &[&str] = &["circle", "square", "triangle", "ring"];

fn inside(shape: &str, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        "circle" => dx * dx + dy * dy <= r * r,
        "square" => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        "triangle" => dy <= r * 0.8 && dy >= -r && (dx.abs() * 2.0) <= (r * 0.8 - dy) * 1.1,
        _ => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
    }
}

/// One shape on a dark background, rendered with 4×4 supersampling.
pub fn render_shape<R: Rng + ?Sized>(class: usize, resolution: usize, rng: &mut R) -> RgbImage {
    let shape = SHAPES[class % SHAPES.len()];
    let res = resolution as f64;
    let r = res * rng.random_range(0.22..0.34);
    let cx = res / 2.0 + rng.random_range(-0.12..0.12) * res;
    let cy = res / 2.0 + rng.random_range(-0.12..0.12) * res;
    let hue: f64 = rng.random_range(0.0..1.0);
    let fg = hsv(hue, 0.7, 0.95);
    let bg = [rng.random_range(0.02..0.12), rng.random_range(0.02..0.12), rng.random_range(0.05..0.18)];
    const SS: usize = 4;
    ImageBuffer::from_fn(resolution as u32, resolution as u32, |x, y| {
        let mut cover = 0.0;
        for sy in 0..SS {
            for sx in 0..SS {
                let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                if inside(shape, px - cx, py - cy, r) {
                    cover += 1.0;
                }
            }
        }
        let a = cover / (SS * SS) as f64;
        let c = |k: usize| ((fg[k] * a + bg[k] * (1.0 - a)) * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([c(0), c(1), c(2)])
    })
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// `per_class` rendered shapes for each of `classes` classes.
pub fn synthetic_shapes<T: Scalar>(classes: usize, per_class: usize, resolution: usize, seed: u64) -> LabeledImages<T> {
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for i in 0..classes * per_class {
        let class = i % classes;
        images.push(rgb_to_tensor::<T>(&render_shape(class, resolution, &mut rng)));
        labels.push(class);
    }
    let n = labels.len();
    LabeledImages {
        images: Tensor::stack_outer(&images).reshape(&[n, 3, resolution, resolution]),
        labels,
        class_names: (0..classes).map(|c| SHAPES[c % SHAPES.len()].to_string()).collect(),
        skipped: 0,
    }
}

/// Write a shapes dataset as PNG files in per-class subdirectories.
pub fn write_shapes_dataset(dir: &Path, classes: usize, per_class: usize, resolution: usize, seed: u64) -> Result<()> {
    let mut rng = SeededRng::seed_from_u64(seed);
    for c in 0..classes {
        let sub = dir.join(format!("{c:02}_{}", SHAPES[c % SHAPES.len()]));
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    }
    for i in 0..classes * per_class {
        let c = i % classes;
        let img = render_shape(c, resolution, &mut rng);
        let p = dir.join(format!("{c:02}_{}", SHAPES[c % SHAPES.len()])).join(format!("{:05}.png", i / classes));
        img.save(&p).map_err(|e| Error::Image(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}
