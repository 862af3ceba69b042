//! Small convolutional feature stack used by the metrics and by attribution.
//!
//! Layer 1 is a fixed analytic filter bank (color, opponent color, Sobel and
//! Laplacian on luminance); layers 2 and 3 are seeded random convolutions with
//! ReLU. Style embeddings are channel means plus Gram statistics of layers 1–2,
//! standardized with statistics fitted on a reference (natural) image set.
//! Content embeddings are the deepest layer's maps, instance-normalized per
//! channel (which strips global color/texture statistics) and pooled to 4×4.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::Params;
use crate::random::{normal_tensor, rng_from_seed};

const L1: usize = 8;
const L2: usize = 16;
const L3: usize = 32;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StackMeta {
    kind: String,
    seed: u64,
    fitted_on: usize,
}

#[derive(Debug, Clone)]
pub struct FeatureStack {
    params: Params,
    seed: u64,
    style_mean: Vec<f32>,
    style_std: Vec<f32>,
    fitted_on: usize,
}

/// All embeddings for a batch of images.
#[derive(Debug, Clone)]
pub struct ImageFeatures {
    pub style: Vec<Vec<f32>>,
    pub content: Vec<Vec<f32>>,
    pub pooled: Vec<Vec<f32>>,
}

pub fn style_dim() -> usize {
    L1 + L2 + L1 * (L1 + 1) / 2 + L2 * (L2 + 1) / 2
}

fn analytic_bank() -> Vec<f32> {
    // (out=8, in=3, 3, 3)
    let mut w = vec![0f32; L1 * 3 * 9];
    let idx = |o: usize, i: usize, y: usize, x: usize| ((o * 3 + i) * 3 + y) * 3 + x;
    for c in 0..3 {
        w[idx(c, c, 1, 1)] = 1.0;
    }
    let lum = [0.299f32, 0.587, 0.114];
    let sobel_x = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let lap = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
    for (i, l) in lum.iter().enumerate() {
        for y in 0..3 {
            for x in 0..3 {
                w[idx(3, i, y, x)] = l * sobel_x[y][x];
                w[idx(4, i, y, x)] = l * sobel_x[x][y];
                w[idx(5, i, y, x)] = l * lap[y][x];
            }
        }
    }
    w[idx(6, 0, 1, 1)] = 1.0;
    w[idx(6, 1, 1, 1)] = -1.0;
    w[idx(7, 0, 1, 1)] = 0.5;
    w[idx(7, 1, 1, 1)] = 0.5;
    w[idx(7, 2, 1, 1)] = -1.0;
    w
}

impl FeatureStack {
    /// Builds the stack with unit standardization (call [`fit`](Self::fit) next).
    pub fn new(seed: u64) -> Result<Self> {
        let device = Device::Cpu;
        let mut rng = rng_from_seed(seed);
        let mut params = Params::new();
        params.insert(
            "l1.weight",
            Tensor::from_vec(analytic_bank(), (L1, 3, 3, 3), &device)?,
        );
        params.insert(
            "l2.weight",
            normal_tensor(&mut rng, (L2, L1, 3, 3), (2.0 / (L1 * 9) as f64).sqrt(), DType::F32, &device)?,
        );
        params.insert(
            "l3.weight",
            normal_tensor(&mut rng, (L3, L2, 3, 3), (2.0 / (L2 * 9) as f64).sqrt(), DType::F32, &device)?,
        );
        let d = style_dim();
        Ok(Self {
            params,
            seed,
            style_mean: vec![0.0; d],
            style_std: vec![1.0; d],
            fitted_on: 0,
        })
    }

    /// Fits the style standardization on a reference image set.
    pub fn fit(&mut self, images: &[Image]) -> Result<()> {
        if images.len() < 2 {
            return Err(Error::Embedder("need at least two images to fit".into()));
        }
        let raw = self.raw_style(images)?;
        let d = style_dim();
        let n = raw.len() as f64;
        let mut mean = vec![0f64; d];
        for r in &raw {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += *v as f64 / n;
            }
        }
        let mut var = vec![0f64; d];
        for r in &raw {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (*v as f64 - m).powi(2) / n;
            }
        }
        self.style_mean = mean.iter().map(|v| *v as f32).collect();
        self.style_std = var.iter().map(|v| (v.sqrt() as f32).max(1e-4)).collect();
        self.fitted_on = images.len();
        Ok(())
    }

    fn layers(&self, images: &[Image]) -> Result<(Tensor, Tensor, Tensor)> {
        let mut buf = Vec::new();
        let (w, h) = (images[0].width, images[0].height);
        for img in images {
            if img.width != w || img.height != h {
                return Err(Error::Embedder("images in a batch must share a size".into()));
            }
            buf.extend_from_slice(&img.data);
        }
        let x = Tensor::from_vec(buf, (images.len(), 3, h, w), &Device::Cpu)?;
        let a1 = x.conv2d(self.params.get("l1.weight")?, 1, 1, 1, 1)?;
        let a2 = a1.conv2d(self.params.get("l2.weight")?, 1, 2, 1, 1)?.relu()?;
        let a3 = a2.conv2d(self.params.get("l3.weight")?, 1, 2, 1, 1)?.relu()?;
        Ok((a1, a2, a3))
    }

    fn gram_stats(a: &Tensor) -> Result<Vec<Vec<f32>>> {
        let (n, c, h, w) = a.dims4()?;
        let flat = a.reshape((n, c, h * w))?;
        let mean = flat.mean_keepdim(D::Minus1)?;
        let centered = flat.broadcast_sub(&mean)?;
        let gram = (centered.matmul(&centered.t()?)? / (h * w) as f64)?;
        let means: Vec<Vec<f32>> = mean.squeeze(D::Minus1)?.to_vec2()?;
        let grams: Vec<Vec<Vec<f32>>> = gram.to_vec3()?;
        Ok(means
            .into_iter()
            .zip(grams)
            .map(|(m, g)| {
                let mut v = m;
                for i in 0..c {
                    for j in i..c {
                        v.push(g[i][j]);
                    }
                }
                v
            })
            .collect())
    }

    fn raw_style(&self, images: &[Image]) -> Result<Vec<Vec<f32>>> {
        let (a1, a2, _) = self.layers(images)?;
        let s1 = Self::gram_stats(&a1)?;
        let s2 = Self::gram_stats(&a2)?;
        Ok(s1
            .into_iter()
            .zip(s2)
            .map(|(a, b)| {
                // means first, then grams, matching style_dim ordering
                let mut v = Vec::with_capacity(style_dim());
                v.extend_from_slice(&a[..L1]);
                v.extend_from_slice(&b[..L2]);
                v.extend_from_slice(&a[L1..]);
                v.extend_from_slice(&b[L2..]);
                v
            })
            .collect())
    }

    pub fn extract(&self, images: &[Image]) -> Result<ImageFeatures> {
        if images.is_empty() {
            return Ok(ImageFeatures {
                style: vec![],
                content: vec![],
                pooled: vec![],
            });
        }
        let mut style = Vec::with_capacity(images.len());
        let mut content = Vec::with_capacity(images.len());
        let mut pooled = Vec::with_capacity(images.len());
        // bounded batches keep memory flat on large manifests
        for chunk in images.chunks(64) {
            let (a1, a2, a3) = self.layers(chunk)?;
            let s1 = Self::gram_stats(&a1)?;
            let s2 = Self::gram_stats(&a2)?;
            for (a, b) in s1.into_iter().zip(s2) {
                let mut v = Vec::with_capacity(style_dim());
                v.extend_from_slice(&a[..L1]);
                v.extend_from_slice(&b[..L2]);
                v.extend_from_slice(&a[L1..]);
                v.extend_from_slice(&b[L2..]);
                for ((x, m), s) in v.iter_mut().zip(&self.style_mean).zip(&self.style_std) {
                    *x = (*x - m) / s;
                }
                style.push(v);
            }
            // content: instance-normalized deepest maps pooled to 4x4
            let (n, c, h, w) = a3.dims4()?;
            let flat = a3.reshape((n, c, h * w))?;
            let mean = flat.mean_keepdim(D::Minus1)?;
            let centered = flat.broadcast_sub(&mean)?;
            let std = (centered.sqr()?.mean_keepdim(D::Minus1)? + 1e-6)?.sqrt()?;
            let normed = centered.broadcast_div(&std)?.reshape((n, c, h, w))?;
            let grid = normed.avg_pool2d((h / 4).max(1))?;
            let cvec: Vec<Vec<f32>> = grid.flatten_from(1)?.to_vec2()?;
            content.extend(cvec);
            let p2 = a2.mean((2, 3))?;
            let p3 = a3.mean((2, 3))?;
            let pv: Vec<Vec<f32>> = Tensor::cat(&[p2, p3], 1)?.to_vec2()?;
            pooled.extend(pv);
        }
        Ok(ImageFeatures {
            style,
            content,
            pooled,
        })
    }

    pub fn style_embeddings(&self, images: &[Image]) -> Result<Vec<Vec<f32>>> {
        Ok(self.extract(images)?.style)
    }

    pub fn content_embeddings(&self, images: &[Image]) -> Result<Vec<Vec<f32>>> {
        Ok(self.extract(images)?.content)
    }

    pub fn pooled_features(&self, images: &[Image]) -> Result<Vec<Vec<f32>>> {
        Ok(self.extract(images)?.pooled)
    }

    pub fn fingerprint(&self) -> String {
        let mut parts = vec![
            format!("seed={}", self.seed),
            self.params.fingerprint().unwrap_or_default(),
        ];
        parts.push(
            self.style_mean
                .iter()
                .chain(&self.style_std)
                .map(|v| format!("{:08x}", v.to_bits()))
                .collect::<String>(),
        );
        checkpoint::fingerprint_parts(parts.iter().map(String::as_str))
    }

    /// Weights and standardization statistics as one parameter set.
    pub fn to_params(&self) -> Result<Params> {
        let mut p = self.params.clone();
        p.insert("style.mean", Tensor::new(self.style_mean.as_slice(), &Device::Cpu)?);
        p.insert("style.std", Tensor::new(self.style_std.as_slice(), &Device::Cpu)?);
        Ok(p)
    }

    pub fn from_params(p: &Params, seed: u64, fitted_on: usize) -> Result<Self> {
        let style_mean = p.get("style.mean")?.to_vec1()?;
        let style_std = p.get("style.std")?.to_vec1()?;
        let mut params = Params::new();
        for k in ["l1.weight", "l2.weight", "l3.weight"] {
            params.insert(k, p.get(k)?.clone());
        }
        Ok(Self {
            params,
            seed,
            style_mean,
            style_std,
            fitted_on,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fitted_on(&self) -> usize {
        self.fitted_on
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(
            path,
            &self.to_params()?,
            &StackMeta {
                kind: "feature-stack".into(),
                seed: self.seed,
                fitted_on: self.fitted_on,
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (p, meta): (Params, StackMeta) = checkpoint::load(path)?;
        if meta.kind != "feature-stack" {
            return Err(Error::Checkpoint(format!("{} is a {}", path.display(), meta.kind)));
        }
        Self::from_params(&p, meta.seed, meta.fitted_on)
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_natural, PaletteStyle, SceneSpec};

    fn naturals(n: usize, seed: u64) -> Vec<Image> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| render_natural(&SceneSpec::random(&mut rng), 32)).collect()
    }

    #[test]
    fn extraction_is_deterministic() {
        let fs = FeatureStack::new(0).unwrap();
        let imgs = naturals(3, 1);
        let a = fs.extract(&imgs).unwrap();
        let b = fs.extract(&imgs).unwrap();
        assert_eq!(a.style, b.style);
        assert_eq!(a.content, b.content);
        assert_eq!(a.style[0].len(), style_dim());
        assert_eq!(a.content[0].len(), 32 * 16);
    }

    #[test]
    fn styled_images_cluster_together() {
        let mut fs = FeatureStack::new(0).unwrap();
        fs.fit(&naturals(64, 2)).unwrap();
        let style = PaletteStyle::posterized();
        let a: Vec<Image> = naturals(8, 3).iter().map(|i| style.apply(i)).collect();
        let b: Vec<Image> = naturals(8, 4).iter().map(|i| style.apply(i)).collect();
        let nat = naturals(8, 5);
        let ea = fs.style_embeddings(&a).unwrap();
        let eb = fs.style_embeddings(&b).unwrap();
        let en = fs.style_embeddings(&nat).unwrap();
        let mean = |x: &[Vec<f32>], y: &[Vec<f32>]| {
            let mut s = 0.0;
            for p in x {
                for q in y {
                    s += cosine(p, q);
                }
            }
            s / (x.len() * y.len()) as f64
        };
        assert!(mean(&ea, &eb) > mean(&en, &eb) + 0.2);
    }

    #[test]
    fn save_load_preserves_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let mut fs = FeatureStack::new(4).unwrap();
        fs.fit(&naturals(8, 6)).unwrap();
        let p = dir.path().join("fs.safetensors");
        fs.save(&p).unwrap();
        let back = FeatureStack::load(&p).unwrap();
        assert_eq!(fs.fingerprint(), back.fingerprint());
    }
}
