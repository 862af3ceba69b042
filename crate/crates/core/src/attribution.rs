//! Training-data attribution for generated images: a binary feature index,
//! content-feature similarity ranking and a gradient-influence ranking.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::adapter::Placement;
use crate::checkpoint;
use crate::corpus::{read_manifest, resolve_image_path};
use crate::diffusion::{training_loss, BaseModel};
use crate::error::{Error, Result};
use crate::features::{cosine, FeatureStack};
use crate::image::Image;
use crate::random::{derive_seed, normal_tensor, rng_from_seed};
use crate::unet::Denoiser;

const MAGIC: &[u8; 4] = b"ALIX";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    NaturalCorpus,
    ExemplarSet,
}

impl Source {
    fn tag(self) -> u8 {
        match self {
            Source::NaturalCorpus => 0,
            Source::ExemplarSet => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Source::NaturalCorpus),
            1 => Ok(Source::ExemplarSet),
            other => Err(Error::Checkpoint(format!("unknown index source tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexRecord {
    pub id: String,
    pub source: Source,
    /// SHA-256 of the image's 8-bit pixels.
    pub image_hash: String,
    pub vector: Vec<f32>,
}

/// Feature table keyed by (source, id).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureIndex {
    pub extractor_fingerprint: String,
    pub dim: usize,
    pub records: Vec<IndexRecord>,
}

/// Image to index; `None` marks a record whose image could not be read.
#[derive(Debug, Clone)]
pub struct IndexItem {
    pub id: String,
    pub source: Source,
    pub image: Option<Image>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IndexStats {
    pub indexed: usize,
    pub reused: usize,
    pub quarantined: Vec<String>,
}

fn write_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u32).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated index file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl FeatureIndex {
    pub fn empty(fs: &FeatureStack) -> Self {
        Self {
            extractor_fingerprint: fs.fingerprint(),
            dim: 0,
            records: vec![],
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, source: Source, id: &str) -> Option<&IndexRecord> {
        self.records.iter().find(|r| r.source == source && r.id == id)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        write_str(&mut w, &self.extractor_fingerprint);
        w.extend_from_slice(&(self.dim as u32).to_le_bytes());
        w.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            write_str(&mut w, &r.id);
            w.push(r.source.tag());
            write_str(&mut w, &r.image_hash);
            for v in &r.vector {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }
        w
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a feature index".into()));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported index version {version}")));
        }
        let extractor_fingerprint = c.string()?;
        let dim = c.u32()? as usize;
        let count = c.u64()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let id = c.string()?;
            let source = Source::from_tag(c.take(1)?[0])?;
            let image_hash = c.string()?;
            let vector = c
                .take(dim * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            records.push(IndexRecord {
                id,
                source,
                image_hash,
                vector,
            });
        }
        if c.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes in index file".into()));
        }
        Ok(Self {
            extractor_fingerprint,
            dim,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// A missing file is reported as an unindexed corpus.
    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|_| Error::Unindexed(path.display().to_string()))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// The index must have been built with this exact extractor.
    pub fn check_extractor(&self, fs: &FeatureStack) -> Result<()> {
        if self.extractor_fingerprint != fs.fingerprint() {
            return Err(Error::Unindexed(
                "index was built with a different feature extractor".into(),
            ));
        }
        Ok(())
    }
}

/// Content features for each item, sorted by (source, id). Records whose hash
/// matches an entry of `previous` (same extractor) reuse its vector.
pub fn build_index(items: &[IndexItem], fs: &FeatureStack, previous: Option<&FeatureIndex>) -> Result<(FeatureIndex, IndexStats)> {
    let fp = fs.fingerprint();
    let prev = previous.filter(|p| p.extractor_fingerprint == fp);
    let mut stats = IndexStats::default();
    let mut todo: Vec<(usize, &Image)> = Vec::new();
    let mut records: Vec<Option<IndexRecord>> = Vec::new();
    for it in items {
        let Some(img) = &it.image else {
            log::warn!("quarantined {}: image missing", it.id);
            stats.quarantined.push(it.id.clone());
            continue;
        };
        let hash = checkpoint::sha256_hex(&img.to_rgb8());
        match prev.and_then(|p| p.get(it.source, &it.id)).filter(|r| r.image_hash == hash) {
            Some(r) => {
                stats.reused += 1;
                records.push(Some(r.clone()));
            }
            None => {
                todo.push((records.len(), img));
                records.push(Some(IndexRecord {
                    id: it.id.clone(),
                    source: it.source,
                    image_hash: hash,
                    vector: vec![],
                }));
            }
        }
    }
    for chunk in todo.chunks(64) {
        let imgs: Vec<Image> = chunk.iter().map(|(_, i)| (*i).clone()).collect();
        let vecs = fs.content_embeddings(&imgs)?;
        for ((slot, _), v) in chunk.iter().zip(vecs) {
            records[*slot].as_mut().unwrap().vector = v;
        }
        stats.indexed += chunk.len();
    }
    let mut records: Vec<IndexRecord> = records.into_iter().flatten().collect();
    records.sort_by(|a, b| (a.source, &a.id).cmp(&(b.source, &b.id)));
    for w in records.windows(2) {
        if w[0].source == w[1].source && w[0].id == w[1].id {
            return Err(Error::Config(format!("duplicate id {} in index input", w[0].id)));
        }
    }
    let dim = records.first().map_or(0, |r| r.vector.len());
    Ok((
        FeatureIndex {
            extractor_fingerprint: fp,
            dim,
            records,
        },
        stats,
    ))
}

/// Index items for every line of a corpus manifest; unreadable images are
/// passed on as missing.
pub fn manifest_items(manifest: &Path, source: Source) -> Result<Vec<IndexItem>> {
    Ok(read_manifest(manifest)?
        .into_iter()
        .map(|r| {
            let path = resolve_image_path(manifest, &r.image_path);
            IndexItem {
                id: r.id,
                source,
                image: Image::load(&path).ok(),
            }
        })
        .collect())
}

/// Cache path for an index of `manifest` under `cache_dir`.
pub fn cached_index_path(cache_dir: &Path, manifest: &Path, fs: &FeatureStack) -> Result<PathBuf> {
    let m = checkpoint::file_sha256(manifest)?;
    let key = checkpoint::fingerprint_parts([m.as_str(), fs.fingerprint().as_str()]);
    Ok(cache_dir.join(format!("index-{}.alix", &key[..16])))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttributionMethod {
    FeatureSimilarity,
    GradientInfluence,
}

impl std::str::FromStr for AttributionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature-similarity" | "feature" => Ok(Self::FeatureSimilarity),
            "gradient-influence" | "gradient" => Ok(Self::GradientInfluence),
            other => Err(Error::Config(format!("unknown attribution method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributedItem {
    pub source: Source,
    pub image_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub query_id: String,
    pub method: AttributionMethod,
    pub items: Vec<AttributedItem>,
}

fn top_k(mut scored: Vec<AttributedItem>, k: usize) -> Vec<AttributedItem> {
    // ties broken by (source, id) so the ranking is total
    scored.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| (a.source, &a.image_id).cmp(&(b.source, &b.image_id)))
    });
    scored.truncate(k);
    scored
}

/// Ranks every indexed record by content-feature cosine with the query.
pub fn attribute_by_features(
    query_id: &str,
    query: &Image,
    indexes: &[&FeatureIndex],
    fs: &FeatureStack,
    k: usize,
) -> Result<AttributionResult> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if indexes.is_empty() {
        return Err(Error::Unindexed("no corpus index given".into()));
    }
    for ix in indexes {
        ix.check_extractor(fs)?;
    }
    let q = fs.content_embeddings(std::slice::from_ref(query))?.remove(0);
    let scored = indexes
        .iter()
        .flat_map(|ix| ix.records.iter())
        .map(|r| AttributedItem {
            source: r.source,
            image_id: r.id.clone(),
            score: cosine(&q, &r.vector),
        })
        .collect();
    Ok(AttributionResult {
        query_id: query_id.to_string(),
        method: AttributionMethod::FeatureSimilarity,
        items: top_k(scored, k),
    })
}

/// Training example seen by the gradient-influence ranker.
#[derive(Debug, Clone)]
pub struct InfluenceExample {
    pub id: String,
    pub source: Source,
    pub image: Image,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceConfig {
    /// Base layers whose weight gradients are compared.
    pub placement: Placement,
    /// Fixed (t, ε) draws averaged per example.
    pub draws: usize,
    pub seed: u64,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        Self {
            placement: Placement::UpBlock,
            draws: 4,
            seed: 0,
        }
    }
}

/// Gradient of the denoising loss w.r.t. the selected base weights, flattened.
/// Every call uses the same timesteps and noise.
pub fn loss_gradient(model: &BaseModel, image: &Image, caption: &str, cfg: &InfluenceConfig) -> Result<Vec<f32>> {
    let layers = cfg.placement.resolve(&Denoiser::weight_layers(&model.params))?;
    let names: Vec<String> = layers.iter().map(|l| format!("{}.weight", l.name)).collect();
    let (view, vars) = model.params.make_trainable(|n| names.iter().any(|w| w == n))?;
    if vars.is_empty() {
        return Err(Error::Config("influence parameter subset is empty".into()));
    }
    let size = model.codec.config.image_size;
    let img = if image.width == size && image.height == size { image.clone() } else { image.resize(size, size) };
    let x0 = model.codec.encode_images(&[&img])?;
    let n = cfg.draws.max(1);
    let x0 = x0.repeat((n, 1, 1, 1))?;
    let mut rng = rng_from_seed(derive_seed(cfg.seed, "influence"));
    let steps = model.schedule.steps();
    let ts: Vec<usize> = (0..n).map(|i| 1 + (i * steps) / n + steps / (2 * n)).map(|t| t.min(steps)).collect();
    let eps = normal_tensor(&mut rng, x0.dims(), 1.0, DType::F32, &Device::Cpu)?;
    let cond = model.encode_prompts(&vec![caption; n])?;
    let loss = training_loss(&model.predictor_with(&view, None), &x0, &ts, &eps, &cond, &model.schedule)?;
    let grads = loss.backward()?;
    let mut out = Vec::new();
    for (name, v) in &vars {
        let g = grads
            .get(v.as_tensor())
            .ok_or_else(|| Error::Invariant(format!("no gradient reached {name}")))?;
        out.extend(g.flatten_all()?.to_vec1::<f32>()?);
    }
    Ok(out)
}

/// Ranks examples by the dot product of their loss gradient with the query's.
pub fn attribute_by_gradient(
    model: &BaseModel,
    query_id: &str,
    query: &Image,
    query_prompt: &str,
    examples: &[InfluenceExample],
    cfg: &InfluenceConfig,
    k: usize,
) -> Result<AttributionResult> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if examples.is_empty() {
        return Err(Error::Unindexed("no training examples given".into()));
    }
    let gq = loss_gradient(model, query, query_prompt, cfg)?;
    let mut scored = Vec::with_capacity(examples.len());
    for ex in examples {
        let g = loss_gradient(model, &ex.image, &ex.caption, cfg)?;
        let dot: f64 = gq.iter().zip(&g).map(|(a, b)| *a as f64 * *b as f64).sum();
        scored.push(AttributedItem {
            source: ex.source,
            image_id: ex.id.clone(),
            score: dot,
        });
    }
    Ok(AttributionResult {
        query_id: query_id.to_string(),
        method: AttributionMethod::GradientInfluence,
        items: top_k(scored, k),
    })
}

/// Query image followed by the ranked images, labelled with source and score.
pub fn attribution_panel(query: &Image, result: &AttributionResult, lookup: impl Fn(Source, &str) -> Option<Image>) -> Result<Image> {
    let mut images = vec![query.clone()];
    let mut labels = vec!["query".to_string()];
    for (rank, it) in result.items.iter().enumerate() {
        let img = lookup(it.source, &it.image_id)
            .ok_or_else(|| Error::MissingField(format!("image for {}", it.image_id)))?;
        let tag = match it.source {
            Source::NaturalCorpus => "n",
            Source::ExemplarSet => "e",
        };
        images.push(img);
        labels.push(format!("{}{tag}:{:.2}", rank + 1, it.score));
    }
    crate::grid::render_grid(&images, &labels)
}

/// The ranked list is the first `k` of a non-increasing score order.
pub fn is_ranked(result: &AttributionResult) -> bool {
    result.items.windows(2).all(|w| w[0].score >= w[1].score)
}

/// Scores rounded for stable text output.
pub fn render_result(result: &AttributionResult) -> String {
    let mut s = format!("query {} ({:?})\n", result.query_id, result.method);
    for (i, it) in result.items.iter().enumerate() {
        s.push_str(&format!("{:>3} {:<15} {:<24} {:.6}\n", i + 1, format!("{:?}", it.source), it.image_id, it.score));
    }
    s
}
