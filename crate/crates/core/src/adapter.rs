//! Low-rank style adapter θ′: attachment, the combined style + content
//! objective, augmentation, training, and the textual-inversion probe.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::diffusion::{sample_timesteps, BaseModel};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{mse, scalar_f64, LayerHook, LayerKind, Params};
use crate::random::{derive_seed, normal_tensor, rng_from_seed, SeededRng};
use crate::schedule::forward_diffuse_batch;
use crate::text::{compose_style_prompt, CondBatch, Conditioning, StyleToken, DEFAULT_STYLE_TOKEN};
use crate::unet::{Block, Denoiser, LayerInfo, NoisePredictor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "layers")]
pub enum Placement {
    UpBlock,
    AllBlocks,
    Layers(Vec<String>),
}

impl Placement {
    /// Base layers this placement selects, in name order.
    pub fn resolve(&self, available: &[LayerInfo]) -> Result<Vec<LayerInfo>> {
        match self {
            Placement::UpBlock => Ok(available
                .iter()
                .filter(|l| Block::of(&l.name) == Block::Up)
                .cloned()
                .collect()),
            Placement::AllBlocks => Ok(available
                .iter()
                .filter(|l| Block::of(&l.name) != Block::Other)
                .cloned()
                .collect()),
            Placement::Layers(names) => {
                if names.is_empty() {
                    return Err(Error::Config("explicit placement lists no layers".into()));
                }
                let mut out = Vec::new();
                for n in names {
                    match available.iter().find(|l| &l.name == n) {
                        Some(l) => out.push(l.clone()),
                        None => return Err(Error::UnknownLayer(n.clone())),
                    }
                }
                out.sort_by(|a, b| a.name.cmp(&b.name));
                out.dedup_by(|a, b| a.name == b.name);
                Ok(out)
            }
        }
    }
}

impl std::str::FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "up" | "up-block" | "up_block" => Ok(Placement::UpBlock),
            "all" | "all-blocks" | "all_blocks" => Ok(Placement::AllBlocks),
            other => Ok(Placement::Layers(
                other.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub rank: usize,
    pub placement: Placement,
    pub scale: f64,
    pub seed: u64,
    pub token: String,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            rank: 1,
            placement: Placement::UpBlock,
            scale: 1.0,
            seed: 0,
            token: DEFAULT_STYLE_TOKEN.into(),
        }
    }
}

/// Shape of one adapted layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraLayer {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub kernel: Option<usize>,
}

/// θ′: per-layer factors `<layer>.lora_a` (r × in [× k × k]) and
/// `<layer>.lora_b` (out × r [× 1 × 1]).
#[derive(Debug, Clone)]
pub struct AdapterBundle {
    pub spec: AdapterSpec,
    pub layers: Vec<LoraLayer>,
    pub params: Params,
    pub style_token: StyleToken,
    pub base_fingerprint: String,
    pub content_weight: f64,
    pub steps_trained: usize,
    pub exemplar_fingerprints: Vec<String>,
    applications: Arc<AtomicUsize>,
}

/// Adds `scale · B(A(x))` to the outputs of the adapted layers.
#[derive(Clone, Copy)]
pub struct LoraHook<'a> {
    pub bundle: &'a AdapterBundle,
    pub params: &'a Params,
    pub scale: f64,
}

impl LayerHook for LoraHook<'_> {
    fn delta(&self, layer: &str, kind: LayerKind, x: &Tensor) -> Result<Option<Tensor>> {
        if self.scale == 0.0 || !self.bundle.layers.iter().any(|l| l.name == layer) {
            return Ok(None);
        }
        let a = self.params.get(&format!("{layer}.lora_a"))?;
        let b = self.params.get(&format!("{layer}.lora_b"))?;
        let d = match kind {
            LayerKind::Linear => x.broadcast_matmul(&a.t()?)?.broadcast_matmul(&b.t()?)?,
            LayerKind::Conv2d { stride, padding } => {
                x.conv2d(a, padding, stride, 1, 1)?.conv2d(b, 0, 1, 1, 1)?
            }
        };
        self.bundle.applications.fetch_add(1, Ordering::Relaxed);
        Ok(Some((d * self.scale)?))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdapterMeta {
    kind: String,
    spec: AdapterSpec,
    layers: Vec<LoraLayer>,
    vocabulary_id: u32,
    base_fingerprint: String,
    content_weight: f64,
    steps_trained: usize,
    exemplar_fingerprints: Vec<String>,
}

/// Attaches a fresh adapter: B = 0, A small random from `spec.seed`.
pub fn attach_adapter(model: &BaseModel, spec: AdapterSpec) -> Result<AdapterBundle> {
    if spec.rank == 0 {
        return Err(Error::Config("adapter rank must be >= 1".into()));
    }
    if !spec.scale.is_finite() {
        return Err(Error::Config("adapter scale must be finite".into()));
    }
    let available = Denoiser::weight_layers(&model.params);
    let chosen = spec.placement.resolve(&available)?;
    if chosen.is_empty() {
        return Err(Error::Config("placement selects no layers".into()));
    }
    let style_token = model.text.style_token(&spec.token)?;
    let mut rng = rng_from_seed(derive_seed(spec.seed, "lora-a"));
    let r = spec.rank;
    let mut params = Params::new();
    let mut layers = Vec::new();
    for l in chosen {
        let fan_in = l.in_dim * l.kernel.map_or(1, |k| k * k);
        let std = 1.0 / (fan_in as f64).sqrt();
        let (a, b) = match l.kernel {
            None => (
                normal_tensor(&mut rng, (r, l.in_dim), std, DType::F32, &Device::Cpu)?,
                Tensor::zeros((l.out_dim, r), DType::F32, &Device::Cpu)?,
            ),
            Some(k) => (
                normal_tensor(&mut rng, (r, l.in_dim, k, k), std, DType::F32, &Device::Cpu)?,
                Tensor::zeros((l.out_dim, r, 1, 1), DType::F32, &Device::Cpu)?,
            ),
        };
        params.insert(format!("{}.lora_a", l.name), a);
        params.insert(format!("{}.lora_b", l.name), b);
        layers.push(LoraLayer {
            name: l.name,
            in_dim: l.in_dim,
            out_dim: l.out_dim,
            kernel: l.kernel,
        });
    }
    Ok(AdapterBundle {
        spec,
        layers,
        params,
        style_token,
        base_fingerprint: model.weights_fingerprint()?,
        content_weight: 0.0,
        steps_trained: 0,
        exemplar_fingerprints: vec![],
        applications: Arc::new(AtomicUsize::new(0)),
    })
}

impl AdapterBundle {
    pub fn hook(&self) -> LoraHook<'_> {
        self.hook_with_scale(self.spec.scale)
    }

    pub fn hook_with_scale(&self, scale: f64) -> LoraHook<'_> {
        LoraHook {
            bundle: self,
            params: &self.params,
            scale,
        }
    }

    /// Number of layer outputs the adapter has modified so far.
    pub fn applications(&self) -> usize {
        self.applications.load(Ordering::Relaxed)
    }

    pub fn reset_applications(&self) {
        self.applications.store(0, Ordering::Relaxed);
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name.as_str()).collect()
    }

    /// Every adapted layer must exist in `model` with the recorded shape.
    pub fn check_compatible(&self, model: &BaseModel) -> Result<()> {
        let available = Denoiser::weight_layers(&model.params);
        for l in &self.layers {
            match available.iter().find(|a| a.name == l.name) {
                Some(a) if a.in_dim == l.in_dim && a.out_dim == l.out_dim && a.kernel == l.kernel => {}
                Some(_) => {
                    return Err(Error::IncompatibleAdapter(format!("layer {} changed shape", l.name)))
                }
                None => {
                    return Err(Error::IncompatibleAdapter(format!("base model has no layer {}", l.name)))
                }
            }
        }
        if self.style_token.vocabulary_id != model.text.style_token(&self.style_token.surface_form)?.vocabulary_id {
            return Err(Error::IncompatibleAdapter("style token id differs".into()));
        }
        Ok(())
    }

    /// Effective weight delta `scale · B·A` of one layer, flattened to
    /// (out, in·k·k).
    pub fn effective_delta(&self, layer: &str) -> Result<Tensor> {
        let a = self.params.get(&format!("{layer}.lora_a"))?;
        let b = self.params.get(&format!("{layer}.lora_b"))?;
        let (out, r) = (b.dim(0)?, b.dim(1)?);
        let a2 = a.reshape((r, a.elem_count() / r))?;
        Ok((b.reshape((out, r))?.matmul(&a2)? * self.spec.scale)?)
    }

    fn meta(&self) -> AdapterMeta {
        AdapterMeta {
            kind: "adapter".into(),
            spec: self.spec.clone(),
            layers: self.layers.clone(),
            vocabulary_id: self.style_token.vocabulary_id,
            base_fingerprint: self.base_fingerprint.clone(),
            content_weight: self.content_weight,
            steps_trained: self.steps_trained,
            exemplar_fingerprints: self.exemplar_fingerprints.clone(),
        }
    }

    /// Writes the weight archive and a `.json` manifest next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = self.meta();
        checkpoint::save(path, &self.params, &meta)?;
        let side = path.with_extension("json");
        std::fs::write(&side, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta): (Params, AdapterMeta) = checkpoint::load(path)?;
        if meta.kind != "adapter" {
            return Err(Error::Checkpoint(format!("{} is not an adapter", path.display())));
        }
        for l in &meta.layers {
            for s in ["lora_a", "lora_b"] {
                params.get(&format!("{}.{s}", l.name))?;
            }
        }
        Ok(Self {
            style_token: StyleToken {
                surface_form: meta.spec.token.clone(),
                vocabulary_id: meta.vocabulary_id,
                embedding: None,
            },
            spec: meta.spec,
            layers: meta.layers,
            params,
            base_fingerprint: meta.base_fingerprint,
            content_weight: meta.content_weight,
            steps_trained: meta.steps_trained,
            exemplar_fingerprints: meta.exemplar_fingerprints,
            applications: Arc::new(AtomicUsize::new(0)),
        })
    }
}

/// Style and content terms of the adapter objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub style_loss: f64,
    pub content_loss: f64,
    pub weight: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(style_loss: f64, content_loss: f64, weight: f64) -> Self {
        Self {
            style_loss,
            content_loss,
            weight,
            total: style_loss + weight * content_loss,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.style_loss.is_finite() && self.content_loss.is_finite() && self.total.is_finite()
    }
}

/// Differentiable pieces of one adapter objective evaluation.
pub struct AdapterLoss {
    pub total: Tensor,
    pub style: Tensor,
    pub content: Tensor,
    /// The frozen base prediction used as the content target.
    pub content_target: Tensor,
    pub breakdown: LossBreakdown,
}

/// Evaluates `L_S + w·L_C` on one shared (t, ε) draw.
#[allow(clippy::too_many_arguments)]
pub fn adapter_loss(
    model: &BaseModel,
    hook: &LoraHook<'_>,
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    styled: &CondBatch,
    plain: &CondBatch,
    w: f64,
) -> Result<AdapterLoss> {
    let x_t = forward_diffuse_batch(x0, ts, eps, &model.schedule)?;
    let adapted = model.predictor(Some(hook));
    let style = mse(&adapted.predict(&x_t, ts, styled)?, eps)?;
    let content_target = model.predictor(None).predict(&x_t, ts, plain)?.detach();
    let content = mse(&adapted.predict(&x_t, ts, plain)?, &content_target)?;
    let total = if w == 0.0 {
        style.clone()
    } else {
        (&style + (&content * w)?)?
    };
    let breakdown = LossBreakdown::new(scalar_f64(&style)?, scalar_f64(&content)?, w);
    Ok(AdapterLoss {
        total,
        style,
        content,
        content_target,
        breakdown,
    })
}

/// Crop parameters drawn by [`augment`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Fraction of the image area covered by the crop (before fitting).
    pub scale: f64,
    /// Crop width / height.
    pub aspect: f64,
    pub crop: (f32, f32, f32, f32),
}

/// Crop of area fraction `scale` and aspect `aspect` whose top-left corner sits
/// at fraction (`fx`, `fy`) of the free space, resized to `out`×`out`. A crop
/// that would exceed the image is shrunk keeping its aspect ratio.
pub fn crop_with(img: &Image, scale: f64, aspect: f64, fx: f64, fy: f64, out: usize) -> (Image, (f32, f32, f32, f32)) {
    let (w, h) = (img.width as f64, img.height as f64);
    let area = scale * w * h;
    let mut cw = (area * aspect).sqrt();
    let mut ch = (area / aspect).sqrt();
    let fit = (w / cw).min(h / ch).min(1.0);
    cw *= fit;
    ch *= fit;
    let x = (w - cw) * fx;
    let y = (h - ch) * fy;
    let rect = (x as f32, y as f32, cw as f32, ch as f32);
    (img.crop_resize(rect, out, out), rect)
}

/// Random scale in [0.9, 1.0], aspect ratio log-uniform in [3/4, 4/3],
/// random position, resized to `out`.
pub fn augment(img: &Image, rng: &mut SeededRng, out: usize) -> (Image, AugmentParams) {
    let scale = rng.random_range(0.9..=1.0);
    let log_r = rng.random_range((0.75f64).ln()..=(4.0f64 / 3.0).ln());
    let aspect = log_r.exp();
    let fx = rng.random_range(0.0..=1.0);
    let fy = rng.random_range(0.0..=1.0);
    let (image, crop) = crop_with(img, scale, aspect, fx, fy, out);
    (image, AugmentParams { scale, aspect, crop })
}

/// Few-shot style exemplars with content-only captions.
#[derive(Debug, Clone)]
pub struct StyleExemplarSet {
    pub label: String,
    pub items: Vec<(Image, String)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CaptionLine {
    file: String,
    caption: String,
}

impl StyleExemplarSet {
    pub fn new(label: &str, items: Vec<(Image, String)>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Config("exemplar set is empty".into()));
        }
        Ok(Self {
            label: label.to_string(),
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn images(&self) -> Vec<Image> {
        self.items.iter().map(|(i, _)| i.clone()).collect()
    }

    /// SHA-256 of each image's 8-bit pixels.
    pub fn fingerprints(&self) -> Vec<String> {
        self.items
            .iter()
            .map(|(i, _)| checkpoint::sha256_hex(&i.to_rgb8()))
            .collect()
    }

    /// Writes `NNN.png` files plus `captions.jsonl`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut lines = String::new();
        for (k, (img, cap)) in self.items.iter().enumerate() {
            let file = format!("{k:03}.png");
            img.save(&dir.join(&file))?;
            lines.push_str(&serde_json::to_string(&CaptionLine {
                file,
                caption: cap.clone(),
            })?);
            lines.push('\n');
        }
        let p = dir.join("captions.jsonl");
        std::fs::write(&p, lines).map_err(|e| Error::io(&p, e))?;
        let lp = dir.join("label.txt");
        std::fs::write(&lp, &self.label).map_err(|e| Error::io(&lp, e))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let p = dir.join("captions.jsonl");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut items = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let c: CaptionLine = serde_json::from_str(line)?;
            if c.caption.trim().is_empty() {
                return Err(Error::MissingField(format!("caption for {}", c.file)));
            }
            items.push((Image::load(&dir.join(&c.file))?, c.caption));
        }
        let label = std::fs::read_to_string(dir.join("label.txt"))
            .map(|s| s.trim().to_string())
            .unwrap_or_else(|_| dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        Self::new(&label, items)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterTrainConfig {
    pub rank: usize,
    pub placement: Placement,
    pub content_weight: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub scale: f64,
    pub token: String,
    pub augment: bool,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for AdapterTrainConfig {
    fn default() -> Self {
        Self {
            rank: 1,
            placement: Placement::UpBlock,
            content_weight: 50.0,
            steps: 1000,
            batch_size: 5,
            lr: 2e-4,
            scale: 1.0,
            token: DEFAULT_STYLE_TOKEN.into(),
            augment: true,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterReport {
    pub losses: Vec<LossBreakdown>,
    pub base_fingerprint_before: String,
    pub base_fingerprint_after: String,
    pub checkpoint: Option<PathBuf>,
}

/// Batch of augmented exemplar latents with styled and plain conditionings.
struct ExemplarBatch {
    x0: Tensor,
    styled: CondBatch,
    plain: CondBatch,
}

struct ExemplarSampler<'a> {
    model: &'a BaseModel,
    set: &'a StyleExemplarSet,
    styled: Vec<Conditioning>,
    plain: Vec<Conditioning>,
    augment: bool,
}

impl<'a> ExemplarSampler<'a> {
    fn new(model: &'a BaseModel, set: &'a StyleExemplarSet, token: &StyleToken, augment: bool) -> Result<Self> {
        let mut styled = Vec::new();
        let mut plain = Vec::new();
        for (_, cap) in &set.items {
            styled.push(model.text.encode(&compose_style_prompt(cap, token)?)?);
            plain.push(model.text.encode(cap)?);
        }
        Ok(Self {
            model,
            set,
            styled,
            plain,
            augment,
        })
    }

    fn draw(&self, rng: &mut SeededRng, n: usize) -> Result<(Vec<usize>, Vec<Image>)> {
        let size = self.model.codec.config.image_size;
        let mut idx = Vec::with_capacity(n);
        let mut imgs = Vec::with_capacity(n);
        for _ in 0..n {
            let i = rng.random_range(0..self.set.len());
            let src = &self.set.items[i].0;
            let img = if self.augment {
                augment(src, rng, size).0
            } else if src.width != size || src.height != size {
                src.resize(size, size)
            } else {
                src.clone()
            };
            idx.push(i);
            imgs.push(img);
        }
        Ok((idx, imgs))
    }

    fn batch(&self, rng: &mut SeededRng, n: usize) -> Result<ExemplarBatch> {
        let (idx, imgs) = self.draw(rng, n)?;
        let refs: Vec<&Image> = imgs.iter().collect();
        let x0 = self.model.codec.encode_images(&refs)?;
        let styled = CondBatch::stack(&idx.iter().map(|&i| &self.styled[i]).collect::<Vec<_>>())?;
        let plain = CondBatch::stack(&idx.iter().map(|&i| &self.plain[i]).collect::<Vec<_>>())?;
        Ok(ExemplarBatch { x0, styled, plain })
    }
}

/// Trains θ′ with AdamW on `L_S + w·L_C`; θ is never touched.
pub fn train_adapter(
    model: &BaseModel,
    exemplars: &StyleExemplarSet,
    cfg: &AdapterTrainConfig,
    out: Option<&Path>,
) -> Result<(AdapterBundle, AdapterReport)> {
    let before = model.weights_fingerprint()?;
    let mut bundle = attach_adapter(
        model,
        AdapterSpec {
            rank: cfg.rank,
            placement: cfg.placement.clone(),
            scale: cfg.scale,
            seed: cfg.seed,
            token: cfg.token.clone(),
        },
    )?;
    bundle.content_weight = cfg.content_weight;
    bundle.exemplar_fingerprints = exemplars.fingerprints();
    let sampler = ExemplarSampler::new(model, exemplars, &bundle.style_token, cfg.augment)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut last_good: Option<PathBuf> = None;
    if cfg.steps > 0 {
        let (view, vars) = bundle.params.make_trainable(|_| true)?;
        let mut opt = AdamW::new(
            vars.iter().map(|(_, v)| v.clone()).collect(),
            ParamsAdamW {
                lr: cfg.lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let mut rng = rng_from_seed(derive_seed(cfg.seed, "adapter-train"));
        for step in 0..cfg.steps {
            let b = sampler.batch(&mut rng, cfg.batch_size)?;
            let n = cfg.batch_size;
            let ts = sample_timesteps(&mut rng, n, model.schedule.steps());
            let eps = normal_tensor(&mut rng, b.x0.dims(), 1.0, DType::F32, &Device::Cpu)?;
            let hook = LoraHook {
                bundle: &bundle,
                params: &view,
                scale: cfg.scale,
            };
            let l = adapter_loss(model, &hook, &b.x0, &ts, &eps, &b.styled, &b.plain, cfg.content_weight)?;
            if !l.breakdown.is_finite() {
                log::error!("adapter loss diverged at step {step}");
                return Err(Error::Diverged { step, last_good });
            }
            losses.push(l.breakdown);
            opt.backward_step(&l.total)?;
            if let Some(p) = out {
                if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                    let mut snap = bundle.clone();
                    snap.params = view.deep_clone()?;
                    snap.steps_trained = step + 1;
                    snap.save(p)?;
                    last_good = Some(p.to_path_buf());
                }
            }
            if step % 200 == 0 {
                log::info!(
                    "adapter step {step}: L_S {:.4} L_C {:.6} total {:.4}",
                    l.breakdown.style_loss,
                    l.breakdown.content_loss,
                    l.breakdown.total
                );
            }
        }
        bundle.params = view.deep_clone()?;
        bundle.steps_trained = cfg.steps;
    }
    let after = model.weights_fingerprint()?;
    if after != before {
        return Err(Error::Invariant("base weights changed during adapter training".into()));
    }
    if let Some(p) = out {
        bundle.save(p)?;
    }
    Ok((
        bundle,
        AdapterReport {
            losses,
            base_fingerprint_before: before,
            base_fingerprint_after: after,
            checkpoint: out.map(Path::to_path_buf),
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub token: String,
    pub augment: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 5,
            lr: 5e-3,
            token: DEFAULT_STYLE_TOKEN.into(),
            augment: true,
            seed: 0,
        }
    }
}

/// Learned pseudo-token embedding from the textual-inversion probe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeResult {
    pub token: StyleToken,
    pub losses: Vec<f64>,
    pub base_fingerprint_before: String,
    pub base_fingerprint_after: String,
}

impl ProbeResult {
    pub fn embedding_tensor(&self) -> Result<Option<Tensor>> {
        Ok(match &self.token.embedding {
            Some(v) => Some(Tensor::new(v.as_slice(), &Device::Cpu)?),
            None => None,
        })
    }

    /// Encodes `prompt` with the learned row substituted for the token.
    pub fn encode(&self, model: &BaseModel, prompt: &str) -> Result<Conditioning> {
        match self.embedding_tensor()? {
            Some(row) => model
                .text
                .encode_with_override(prompt, Some((self.token.vocabulary_id, &row))),
            None => model.text.encode(prompt),
        }
    }
}

/// Optimizes only the style token's embedding row against the denoising
/// objective on the exemplars, with every model weight frozen.
pub fn textual_inversion_probe(
    model: &BaseModel,
    exemplars: &StyleExemplarSet,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let before = model.weights_fingerprint()?;
    let text_before = model.text.params.fingerprint()?;
    let mut token = model.text.style_token(&cfg.token)?;
    let init = model.text.token_embedding(token.vocabulary_id)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    if cfg.steps > 0 {
        let var = Var::from_tensor(&init.copy()?)?;
        let mut opt = AdamW::new(
            vec![var.clone()],
            ParamsAdamW {
                lr: cfg.lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let prompts: Vec<String> = exemplars
            .items
            .iter()
            .map(|(_, c)| compose_style_prompt(c, &token))
            .collect::<Result<_>>()?;
        let sampler = ExemplarSampler::new(model, exemplars, &token, cfg.augment)?;
        let mut rng = rng_from_seed(derive_seed(cfg.seed, "probe"));
        let pred = model.predictor(None);
        for step in 0..cfg.steps {
            let (idx, imgs) = sampler.draw(&mut rng, cfg.batch_size)?;
            let refs: Vec<&Image> = imgs.iter().collect();
            let x0 = model.codec.encode_images(&refs)?;
            let conds = idx
                .iter()
                .map(|&i| {
                    model
                        .text
                        .encode_with_override(&prompts[i], Some((token.vocabulary_id, var.as_tensor())))
                })
                .collect::<Result<Vec<_>>>()?;
            let cond = CondBatch::stack(&conds.iter().collect::<Vec<_>>())?;
            let ts = sample_timesteps(&mut rng, idx.len(), model.schedule.steps());
            let eps = normal_tensor(&mut rng, x0.dims(), 1.0, DType::F32, &Device::Cpu)?;
            let x_t = forward_diffuse_batch(&x0, &ts, &eps, &model.schedule)?;
            let loss = mse(&pred.predict(&x_t, &ts, &cond)?, &eps)?;
            let v = scalar_f64(&loss)?;
            if !v.is_finite() {
                return Err(Error::Diverged { step, last_good: None });
            }
            losses.push(v);
            opt.backward_step(&loss)?;
        }
        token.embedding = Some(var.as_tensor().to_vec1()?);
    }
    let after = model.weights_fingerprint()?;
    if after != before || model.text.params.fingerprint()? != text_before {
        return Err(Error::Invariant("textual inversion modified model weights".into()));
    }
    Ok(ProbeResult {
        token,
        losses,
        base_fingerprint_before: before,
        base_fingerprint_after: after,
    })
}

/// Per-layer flags: does this adapter touch the layer?
pub fn adapted_layer_map(model: &BaseModel, bundle: &AdapterBundle) -> BTreeMap<String, bool> {
    Denoiser::weight_layers(&model.params)
        .into_iter()
        .map(|l| {
            let on = bundle.layers.iter().any(|a| a.name == l.name);
            (l.name, on)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{CodecConfig, LatentCodec};
    use crate::diffusion::{initial_noise, BaseModelConfig};
    use crate::schedule::ScheduleConfig;
    use crate::synth::{generate_exemplars, PaletteStyle};
    use crate::text::{TextEncoder, TextEncoderConfig, Vocab};
    use crate::unet::DenoiserConfig;
    use proptest::prelude::*;

    fn model() -> BaseModel {
        let codec = LatentCodec::init(CodecConfig::default()).unwrap();
        let text = TextEncoder::new(TextEncoderConfig::default(), Vocab::standard()).unwrap();
        BaseModel::init(
            BaseModelConfig {
                denoiser: DenoiserConfig {
                    channels: 16,
                    mid_channels: 16,
                    time_dim: 32,
                    groups: 4,
                    ..Default::default()
                },
                schedule: ScheduleConfig {
                    steps: 100,
                    ..Default::default()
                },
                guidance_dropout: 0.1,
            },
            codec,
            text,
        )
        .unwrap()
    }

    fn exemplars(n: usize) -> StyleExemplarSet {
        StyleExemplarSet::new("poster", generate_exemplars(&PaletteStyle::posterized(), n, 32, 3)).unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn fresh_adapter_matches_base() {
        let m = model();
        let ad = attach_adapter(&m, AdapterSpec::default()).unwrap();
        assert!(!ad.layers.is_empty());
        let x = initial_noise(m.latent_shape(), &[1, 2]).unwrap();
        let c = m.encode_prompts(&["a red ball", "a box"]).unwrap();
        let hook = ad.hook();
        let a = flat(&m.predictor(Some(&hook)).predict(&x, &[30, 70], &c).unwrap());
        let b = flat(&m.predictor(None).predict(&x, &[30, 70], &c).unwrap());
        let d = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
        assert!(d < 1e-6);
        assert!(ad.applications() > 0);
    }

    #[test]
    fn unknown_layer_is_typed_error() {
        let m = model();
        let err = attach_adapter(
            &m,
            AdapterSpec {
                placement: Placement::Layers(vec!["up.0.nope".into()]),
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnknownLayer(_)));
    }

    #[test]
    fn up_block_placement_only_touches_up_layers() {
        let m = model();
        let ad = attach_adapter(&m, AdapterSpec::default()).unwrap();
        for (name, on) in adapted_layer_map(&m, &ad) {
            assert_eq!(on, Block::of(&name) == Block::Up, "{name}");
        }
        let all = attach_adapter(
            &m,
            AdapterSpec {
                placement: Placement::AllBlocks,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(all.layers.len() > ad.layers.len());
    }

    #[test]
    fn rank_64_is_supported() {
        let m = model();
        let ad = attach_adapter(&m, AdapterSpec { rank: 64, ..Default::default() }).unwrap();
        let l = &ad.layers[0];
        let d = ad.effective_delta(&l.name).unwrap();
        assert_eq!(d.dims()[0], l.out_dim);
    }

    #[test]
    fn fresh_adapter_has_zero_content_loss_and_w0_total_is_style() {
        let m = model();
        let ad = attach_adapter(&m, AdapterSpec::default()).unwrap();
        let ex = exemplars(4);
        let s = ExemplarSampler::new(&m, &ex, &ad.style_token, true).unwrap();
        let mut rng = rng_from_seed(1);
        let b = s.batch(&mut rng, 3).unwrap();
        let eps = normal_tensor(&mut rng, b.x0.dims(), 1.0, DType::F32, &Device::Cpu).unwrap();
        let hook = ad.hook();
        let l = adapter_loss(&m, &hook, &b.x0, &[10, 50, 90], &eps, &b.styled, &b.plain, 50.0).unwrap();
        assert_eq!(l.breakdown.content_loss, 0.0);
        let l0 = adapter_loss(&m, &hook, &b.x0, &[10, 50, 90], &eps, &b.styled, &b.plain, 0.0).unwrap();
        assert_eq!(l0.breakdown.total, l0.breakdown.style_loss);
        assert_eq!(scalar_f64(&l0.total).unwrap(), l0.breakdown.style_loss);
    }

    /// Kolmogorov-Smirnov statistic of `xs` against Uniform(lo, hi).
    fn ks_uniform(mut xs: Vec<f64>, lo: f64, hi: f64) -> f64 {
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, x)| {
                let f = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn augmentation_draws_are_uniform() {
        let img = Image::new(8, 8);
        let mut rng = rng_from_seed(11);
        let n = 10_000;
        let draws: Vec<AugmentParams> = (0..n).map(|_| augment(&img, &mut rng, 8).1).collect();
        // asymptotic 1% critical value
        let crit = 1.628 / (n as f64).sqrt();
        let d_scale = ks_uniform(draws.iter().map(|p| p.scale).collect(), 0.9, 1.0);
        let d_aspect = ks_uniform(
            draws.iter().map(|p| p.aspect.ln()).collect(),
            0.75f64.ln(),
            (4.0f64 / 3.0).ln(),
        );
        assert!(d_scale < crit, "{d_scale} >= {crit}");
        assert!(d_aspect < crit, "{d_aspect} >= {crit}");
        assert!(draws.iter().all(|p| (0.9..=1.0).contains(&p.scale)));
    }

    #[test]
    fn content_target_carries_no_gradient() {
        let m = model();
        let ad = attach_adapter(&m, AdapterSpec::default()).unwrap();
        let (view, vars) = ad.params.make_trainable(|_| true).unwrap();
        let ex = exemplars(3);
        let s = ExemplarSampler::new(&m, &ex, &ad.style_token, false).unwrap();
        let mut rng = rng_from_seed(2);
        let b = s.batch(&mut rng, 2).unwrap();
        let eps = normal_tensor(&mut rng, b.x0.dims(), 1.0, DType::F32, &Device::Cpu).unwrap();
        let hook = LoraHook { bundle: &ad, params: &view, scale: 1.0 };
        let l = adapter_loss(&m, &hook, &b.x0, &[20, 60], &eps, &b.styled, &b.plain, 50.0).unwrap();
        let grads = l.total.backward().unwrap();
        assert!(!l.content_target.track_op());
        // the adapter factors do receive gradient
        assert!(vars.iter().any(|(_, v)| grads.get(v.as_tensor()).is_some()));
        assert!(m.params.iter().all(|(_, t)| !t.is_variable()));
    }

    #[test]
    fn training_updates_only_adapter() {
        let m = model();
        let ex = exemplars(5);
        let cfg = AdapterTrainConfig { steps: 5, lr: 1e-2, ..Default::default() };
        let (ad, rep) = train_adapter(&m, &ex, &cfg, None).unwrap();
        assert_eq!(rep.base_fingerprint_before, rep.base_fingerprint_after);
        assert_eq!(rep.losses.len(), 5);
        for l in &rep.losses {
            assert_eq!(l.total, l.style_loss + 50.0 * l.content_loss);
        }
        let moved = ad.layers.iter().any(|l| {
            let b = flat(ad.params.get(&format!("{}.lora_b", l.name)).unwrap());
            b.iter().any(|v| *v != 0.0)
        });
        assert!(moved);
    }

    #[test]
    fn zero_steps_equals_initialization() {
        let m = model();
        let ex = exemplars(2);
        let cfg = AdapterTrainConfig { steps: 0, ..Default::default() };
        let (ad, _) = train_adapter(&m, &ex, &cfg, None).unwrap();
        let fresh = attach_adapter(&m, AdapterSpec::default()).unwrap();
        assert_eq!(ad.params.fingerprint().unwrap(), fresh.params.fingerprint().unwrap());
    }

    #[test]
    fn save_load_and_compatibility() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        let ex = exemplars(3);
        let p = dir.path().join("a.safetensors");
        let (ad, _) = train_adapter(&m, &ex, &AdapterTrainConfig { steps: 2, ..Default::default() }, Some(&p)).unwrap();
        assert!(p.with_extension("json").exists());
        let back = AdapterBundle::load(&p).unwrap();
        assert_eq!(back.params.fingerprint().unwrap(), ad.params.fingerprint().unwrap());
        assert_eq!(back.exemplar_fingerprints.len(), 3);
        back.check_compatible(&m).unwrap();
        let mut other = model();
        other.denoiser.config.channels = 8;
        other.params = other.denoiser.init_params(DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(back.check_compatible(&other), Err(Error::IncompatibleAdapter(_))));
    }

    #[test]
    fn exemplar_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ex = exemplars(3);
        ex.save_dir(dir.path()).unwrap();
        let back = StyleExemplarSet::load_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.label, "poster");
        assert_eq!(back.items[1].1, ex.items[1].1);
    }

    #[test]
    fn identity_augmentation_is_resize() {
        let img = exemplars(1).items[0].0.clone();
        let (out, rect) = crop_with(&img, 1.0, 1.0, 0.5, 0.5, 32);
        assert_eq!(rect, (0.0, 0.0, 32.0, 32.0));
        assert_eq!(out, img.resize(32, 32));
    }

    #[test]
    fn probe_with_zero_steps_is_noop() {
        let m = model();
        let r = textual_inversion_probe(&m, &exemplars(2), &ProbeConfig { steps: 0, ..Default::default() }).unwrap();
        assert!(r.token.embedding.is_none());
        let a = r.encode(&m, "a ball in the style of sks art").unwrap();
        let b = m.text.encode("a ball in the style of sks art").unwrap();
        assert_eq!(flat(&a.embeddings), flat(&b.embeddings));
    }

    #[test]
    fn probe_never_modifies_weights() {
        let m = model();
        let r = textual_inversion_probe(&m, &exemplars(3), &ProbeConfig { steps: 3, lr: 0.1, ..Default::default() }).unwrap();
        assert_eq!(r.base_fingerprint_before, r.base_fingerprint_after);
        let learned = r.token.embedding.clone().unwrap();
        let init: Vec<f32> = m.text.token_embedding(r.token.vocabulary_id).unwrap().to_vec1().unwrap();
        assert_ne!(learned, init);
    }

    proptest! {
        #[test]
        fn augmented_crops_respect_bounds(seed in 0u64..5000) {
            let img = Image::filled(32, 24, [0.3, 0.3, 0.3]);
            let mut rng = rng_from_seed(seed);
            let (out, p) = augment(&img, &mut rng, 32);
            prop_assert_eq!((out.width, out.height), (32, 32));
            prop_assert!((0.9..=1.0).contains(&p.scale));
            let ratio = (p.crop.2 / p.crop.3) as f64;
            prop_assert!((0.75 - 1e-4..=4.0 / 3.0 + 1e-4).contains(&ratio));
            prop_assert!(p.crop.0 >= 0.0 && p.crop.1 >= 0.0);
            prop_assert!(p.crop.0 + p.crop.2 <= 32.0 + 1e-3 && p.crop.1 + p.crop.3 <= 24.0 + 1e-3);
        }

        #[test]
        fn loss_algebra_is_exact(s in 0f64..10.0, c in 0f64..10.0, w in 0f64..200.0) {
            let b = LossBreakdown::new(s, c, w);
            prop_assert_eq!(b.total, s + w * c);
        }
    }
}
