//! Small joint image-text embedder trained contrastively on a separate
//! synthetic pretraining set. Used by the corpus filter's concept stage and by
//! the alignment metric.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{tokenize_caption, ImageTextScorer};
use crate::error::{Error, Result};
use crate::features::{cosine, FeatureStack};
use crate::image::Image;
use crate::nn::{scalar_f64, Params};
use crate::random::{derive_seed, normal_tensor, rng_from_seed};
use crate::synth::{render_art, render_natural, ArtKind, SceneSpec};
use crate::text::Vocab;

/// Concept phrases used to caption each medium in the pretraining set.
pub fn pretraining_phrases(kind: ArtKind) -> &'static [&'static str] {
    match kind {
        ArtKind::Painting => &[
            "painting", "art", "artwork", "abstract art", "realism art", "impressionism art",
            "expressionism art", "baroque art", "rococo art", "surrealism art",
        ],
        ArtKind::Sketch => &["drawing", "sketch", "illustration", "printmaking art", "minimalism art"],
        ArtKind::Logo => &[
            "logo", "advertisement", "stamp", "pop art", "digital art", "art deco", "conceptual art",
        ],
        ArtKind::Mosaic => &[
            "mosaic art", "tapestry", "cubism art", "art nouveau", "installation art", "sculpture",
            "futurism art", "dadaism art",
        ],
    }
}

/// Captioned pretraining pairs: natural photos and art of every kind, with
/// the medium always named in art captions.
pub fn pretraining_pairs(n: usize, art_fraction: f64, size: usize, seed: u64) -> Vec<(Image, String)> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| {
            let scene = SceneSpec::random(&mut rng);
            if rng.random_bool(art_fraction) {
                let kind = ArtKind::ALL[rng.random_range(0..ArtKind::ALL.len())];
                let phrases = pretraining_phrases(kind);
                let phrase = phrases[rng.random_range(0..phrases.len())];
                (render_art(&scene, kind, size), format!("{phrase} of {}", scene.caption()))
            } else {
                (render_natural(&scene, size), format!("a photo of {}", scene.caption()))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub temperature: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub pretraining_pairs: usize,
    pub art_fraction: f64,
    pub feature_seed: u64,
    pub seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden: 64,
            temperature: 0.1,
            steps: 400,
            batch_size: 96,
            lr: 5e-3,
            pretraining_pairs: 1200,
            art_fraction: 0.4,
            feature_seed: 7,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScorerMeta {
    kind: String,
    config: ScorerConfig,
    vocab: Vec<String>,
    feature_fitted_on: usize,
    final_loss: f64,
}

/// Image tower over fixed features, bag-of-words text tower.
#[derive(Debug, Clone)]
pub struct JointScorer {
    config: ScorerConfig,
    features: FeatureStack,
    vocab: Vocab,
    params: Params,
    final_loss: f64,
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

impl JointScorer {
    /// Trains the scorer from scratch on generated pretraining pairs.
    pub fn pretrain(config: ScorerConfig) -> Result<Self> {
        let pairs = pretraining_pairs(
            config.pretraining_pairs,
            config.art_fraction,
            32,
            derive_seed(config.seed, "scorer-pairs"),
        );
        let images: Vec<Image> = pairs.iter().map(|(i, _)| i.clone()).collect();
        let captions: Vec<String> = pairs.into_iter().map(|(_, c)| c).collect();
        Self::train_on(config, &images, &captions)
    }

    pub fn train_on(config: ScorerConfig, images: &[Image], captions: &[String]) -> Result<Self> {
        if images.len() != captions.len() || images.len() < 2 {
            return Err(Error::Config("scorer needs at least two captioned images".into()));
        }
        let naturals: Vec<Image> = images
            .iter()
            .zip(captions)
            .filter(|(_, c)| c.starts_with("a photo"))
            .map(|(i, _)| i.clone())
            .collect();
        let mut features = FeatureStack::new(config.feature_seed)?;
        features.fit(if naturals.len() >= 2 { &naturals } else { images })?;
        let vocab = Vocab::standard();
        let raw = Self::raw_features(&features, images)?;
        let fdim = raw[0].len();
        let n = raw.len() as f64;
        let mut mean = vec![0f64; fdim];
        let mut var = vec![0f64; fdim];
        for r in &raw {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += *v as f64 / n;
            }
        }
        for r in &raw {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (*v as f64 - m).powi(2) / n;
            }
        }
        let device = Device::Cpu;
        let mut params = Params::new();
        params.insert(
            "feat.mean",
            Tensor::new(mean.iter().map(|v| *v as f32).collect::<Vec<_>>(), &device)?,
        );
        params.insert(
            "feat.std",
            Tensor::new(var.iter().map(|v| (v.sqrt() as f32).max(1e-4)).collect::<Vec<_>>(), &device)?,
        );
        let mut rng = rng_from_seed(derive_seed(config.seed, "scorer-init"));
        let (h, e) = (config.hidden, config.embed_dim);
        params.insert("img.w1", normal_tensor(&mut rng, (fdim, h), (1.0 / fdim as f64).sqrt(), DType::F32, &device)?);
        params.insert("img.b1", Tensor::zeros(h, DType::F32, &device)?);
        params.insert("img.w2", normal_tensor(&mut rng, (h, e), (1.0 / h as f64).sqrt(), DType::F32, &device)?);
        params.insert("txt.table", normal_tensor(&mut rng, (vocab.len(), e), 0.1, DType::F32, &device)?);
        let mut scorer = Self {
            config: config.clone(),
            features,
            vocab,
            params,
            final_loss: f64::NAN,
        };

        let x_all = scorer.standardize(&raw)?;
        let bow_all = scorer.bow(captions)?;
        let (view, vars) = scorer
            .params
            .make_trainable(|name| name.starts_with("img.") || name.starts_with("txt."))?;
        let mut opt = AdamW::new(
            vars.iter().map(|(_, v)| v.clone()).collect(),
            ParamsAdamW {
                lr: config.lr,
                weight_decay: 1e-4,
                ..Default::default()
            },
        )?;
        let mut rng = rng_from_seed(derive_seed(config.seed, "scorer-batches"));
        let b = config.batch_size.min(images.len());
        let mut last = f64::NAN;
        for step in 0..config.steps {
            let idx: Vec<u32> = rand::seq::index::sample(&mut rng, images.len(), b)
                .into_iter()
                .map(|i| i as u32)
                .collect();
            let idx_t = Tensor::new(idx.as_slice(), &device)?;
            let x = x_all.index_select(&idx_t, 0)?;
            let bow = bow_all.index_select(&idx_t, 0)?;
            let img = Self::image_tower(&view, &x)?;
            let txt = Self::text_tower(&view, &bow)?;
            let logits = (img.matmul(&txt.t()?)? / config.temperature)?;
            let labels = Tensor::arange(0u32, b as u32, &device)?;
            let loss = ((candle_nn::loss::cross_entropy(&logits, &labels)?
                + candle_nn::loss::cross_entropy(&logits.t()?, &labels)?)?
                * 0.5)?;
            last = scalar_f64(&loss)?;
            if !last.is_finite() {
                return Err(Error::Diverged { step, last_good: None });
            }
            opt.backward_step(&loss)?;
            if step % 100 == 0 {
                log::debug!("scorer step {step} loss {last:.4}");
            }
        }
        scorer.params = view.deep_clone()?;
        scorer.final_loss = last;
        Ok(scorer)
    }

    fn raw_features(features: &FeatureStack, images: &[Image]) -> Result<Vec<Vec<f32>>> {
        let f = features.extract(images)?;
        Ok(f.style
            .into_iter()
            .zip(f.pooled)
            .map(|(mut s, p)| {
                s.extend(p);
                s
            })
            .collect())
    }

    fn standardize(&self, raw: &[Vec<f32>]) -> Result<Tensor> {
        let n = raw.len();
        let d = raw[0].len();
        let flat: Vec<f32> = raw.iter().flatten().copied().collect();
        let x = Tensor::from_vec(flat, (n, d), &Device::Cpu)?;
        Ok(x
            .broadcast_sub(self.params.get("feat.mean")?)?
            .broadcast_div(self.params.get("feat.std")?)?)
    }

    fn bow(&self, texts: &[String]) -> Result<Tensor> {
        let v = self.vocab.len();
        let mut data = vec![0f32; texts.len() * v];
        for (row, text) in texts.iter().enumerate() {
            let ids: Vec<u32> = tokenize_caption(text)
                .iter()
                .filter_map(|w| self.vocab.id(w))
                .collect();
            for id in &ids {
                data[row * v + *id as usize] += 1.0 / ids.len() as f32;
            }
        }
        Ok(Tensor::from_vec(data, (texts.len(), v), &Device::Cpu)?)
    }

    fn image_tower(p: &Params, x: &Tensor) -> Result<Tensor> {
        let h = x.matmul(p.get("img.w1")?)?.broadcast_add(p.get("img.b1")?)?.relu()?;
        l2_normalize(&h.matmul(p.get("img.w2")?)?)
    }

    fn text_tower(p: &Params, bow: &Tensor) -> Result<Tensor> {
        l2_normalize(&bow.matmul(p.get("txt.table")?)?)
    }

    /// Unit-norm image embeddings.
    pub fn image_embeddings(&self, images: &[Image]) -> Result<Vec<Vec<f32>>> {
        if images.is_empty() {
            return Ok(vec![]);
        }
        let raw = Self::raw_features(&self.features, images)?;
        let x = self.standardize(&raw)?;
        Ok(Self::image_tower(&self.params, &x)?.to_vec2()?)
    }

    /// Unit-norm text embeddings; text with no known words embeds to zero.
    pub fn text_embeddings(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        if texts.is_empty() {
            return Ok(vec![]);
        }
        let bow = self.bow(texts)?;
        Ok(Self::text_tower(&self.params, &bow)?.to_vec2()?)
    }

    /// Cosine between each image and its paired text.
    pub fn pair_cosines(&self, images: &[Image], texts: &[String]) -> Result<Vec<f64>> {
        if images.len() != texts.len() {
            return Err(Error::Embedder(format!(
                "{} images but {} texts",
                images.len(),
                texts.len()
            )));
        }
        let ie = self.image_embeddings(images)?;
        let te = self.text_embeddings(texts)?;
        Ok(ie.iter().zip(&te).map(|(a, b)| cosine(a, b)).collect())
    }

    /// Scores of many images against many concepts, `100 · cos`.
    pub fn score_matrix(&self, images: &[Image], concepts: &[String]) -> Result<Vec<Vec<f64>>> {
        let ie = self.image_embeddings(images)?;
        let te = self.text_embeddings(concepts)?;
        Ok(ie
            .iter()
            .map(|a| te.iter().map(|b| 100.0 * cosine(a, b)).collect())
            .collect())
    }

    pub fn final_loss(&self) -> f64 {
        self.final_loss
    }

    pub fn features(&self) -> &FeatureStack {
        &self.features
    }

    fn meta(&self) -> ScorerMeta {
        ScorerMeta {
            kind: "joint-scorer".into(),
            config: self.config.clone(),
            vocab: self.vocab.words().to_vec(),
            feature_fitted_on: self.features.fitted_on(),
            final_loss: self.final_loss,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut p = self.params.clone();
        p.extend(self.features.to_params()?.with_prefix("fs."));
        checkpoint::save(path, &p, &self.meta())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (p, meta): (Params, ScorerMeta) = checkpoint::load(path)?;
        if meta.kind != "joint-scorer" {
            return Err(Error::Checkpoint(format!("{} is a {}", path.display(), meta.kind)));
        }
        let features =
            FeatureStack::from_params(&p.strip_prefix("fs."), meta.config.feature_seed, meta.feature_fitted_on)?;
        let mut params = Params::new();
        for (k, v) in p.iter() {
            if !k.starts_with("fs.") {
                params.insert(k.clone(), v.clone());
            }
        }
        Ok(Self {
            config: meta.config,
            features,
            vocab: Vocab::from_word_list(meta.vocab),
            params,
            final_loss: meta.final_loss,
        })
    }
}

impl ImageTextScorer for JointScorer {
    fn score_concepts(&self, image: &Image, concepts: &[String]) -> Result<Vec<f64>> {
        Ok(self.score_matrix(std::slice::from_ref(image), concepts)?.remove(0))
    }

    fn fingerprint(&self) -> String {
        let mut parts = vec![self.features.fingerprint()];
        parts.push(self.params.fingerprint().unwrap_or_default());
        checkpoint::fingerprint_parts(parts.iter().map(String::as_str))
    }
}
