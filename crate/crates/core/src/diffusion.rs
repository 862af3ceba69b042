//! Base model bundle, denoiser training with guidance dropout, and the
//! deterministic DDIM sampler / inverter.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::codec::{CodecMeta, LatentCodec};
use crate::error::{Error, Result};
use crate::nn::{mse, scalar_f64, LayerHook, Params};
use crate::random::{derive_seed, normal_tensor, rng_from_seed, SeededRng};
use crate::schedule::{forward_diffuse_batch, NoiseSchedule, NoisedSample, ScheduleConfig};
use crate::text::{CondBatch, Conditioning, TextEncoder, TextEncoderMeta};
use crate::unet::{BoundDenoiser, Denoiser, DenoiserConfig, NoisePredictor};

pub const DEFAULT_GUIDANCE: f64 = 7.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseModelConfig {
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    /// Probability of replacing a training caption with the null prompt.
    pub guidance_dropout: f64,
}

impl Default for BaseModelConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            guidance_dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BaseMeta {
    kind: String,
    config: BaseModelConfig,
    codec: CodecMeta,
    text: TextEncoderMeta,
    corpus_fingerprint: String,
    steps_trained: usize,
}

/// Denoiser weights θ plus the schedule, codec and text encoder they were
/// trained with.
#[derive(Debug, Clone)]
pub struct BaseModel {
    pub config: BaseModelConfig,
    pub denoiser: Denoiser,
    pub params: Params,
    pub schedule: NoiseSchedule,
    pub codec: LatentCodec,
    pub text: TextEncoder,
    pub corpus_fingerprint: String,
    pub steps_trained: usize,
}

impl BaseModel {
    pub fn init(config: BaseModelConfig, codec: LatentCodec, text: TextEncoder) -> Result<Self> {
        if config.denoiser.in_channels != codec.config.latent_channels {
            return Err(Error::Config(format!(
                "denoiser expects {} channels but the codec produces {}",
                config.denoiser.in_channels, codec.config.latent_channels
            )));
        }
        if config.denoiser.text_dim != text.config.dim {
            return Err(Error::Config(format!(
                "denoiser text_dim {} != text encoder dim {}",
                config.denoiser.text_dim,
                text.config.dim
            )));
        }
        if !(0.0..=1.0).contains(&config.guidance_dropout) {
            return Err(Error::Config("guidance_dropout must lie in [0, 1]".into()));
        }
        let denoiser = Denoiser::new(config.denoiser.clone())?;
        let params = denoiser.init_params(DType::F32, &Device::Cpu)?;
        let schedule = NoiseSchedule::new(config.schedule.clone())?;
        Ok(Self {
            config,
            denoiser,
            params,
            schedule,
            codec,
            text,
            corpus_fingerprint: String::new(),
            steps_trained: 0,
        })
    }

    pub fn predictor<'a>(&'a self, hook: Option<&'a dyn LayerHook>) -> BoundDenoiser<'a> {
        self.predictor_with(&self.params, hook)
    }

    pub fn predictor_with<'a>(
        &'a self,
        params: &'a Params,
        hook: Option<&'a dyn LayerHook>,
    ) -> BoundDenoiser<'a> {
        BoundDenoiser {
            model: &self.denoiser,
            params,
            hook,
        }
    }

    /// Hash of θ.
    pub fn weights_fingerprint(&self) -> Result<String> {
        self.params.fingerprint()
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        self.codec.latent_shape()
    }

    pub fn encode_prompts(&self, prompts: &[&str]) -> Result<CondBatch> {
        let conds = prompts
            .iter()
            .map(|p| self.text.encode(p))
            .collect::<Result<Vec<_>>>()?;
        CondBatch::stack(&conds.iter().collect::<Vec<_>>())
    }

    pub fn null_batch(&self, n: usize) -> Result<CondBatch> {
        CondBatch::stack(&[&self.text.null_conditioning()?])?.repeat_each(n)
    }

    fn meta(&self) -> BaseMeta {
        BaseMeta {
            kind: "base-model".into(),
            config: self.config.clone(),
            codec: self.codec.meta(),
            text: self.text.meta(),
            corpus_fingerprint: self.corpus_fingerprint.clone(),
            steps_trained: self.steps_trained,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut all = self.params.with_prefix("unet.");
        all.extend(self.codec.params.with_prefix("codec."));
        all.extend(self.text.params.with_prefix("text."));
        checkpoint::save(path, &all, &self.meta())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (all, meta): (Params, BaseMeta) = checkpoint::load(path)?;
        if meta.kind != "base-model" {
            return Err(Error::Checkpoint(format!("{} is not a base-model checkpoint", path.display())));
        }
        let codec = LatentCodec::from_parts(all.strip_prefix("codec."), meta.codec)?;
        let text = TextEncoder::from_parts(all.strip_prefix("text."), meta.text)?;
        let mut model = Self::init(meta.config, codec, text)?;
        let params = all.strip_prefix("unet.");
        let expected: Vec<&String> = model.params.names().collect();
        let got: Vec<&String> = params.names().collect();
        if expected != got {
            return Err(Error::Checkpoint("denoiser parameter names do not match config".into()));
        }
        if !params.all_finite()? {
            return Err(Error::Checkpoint("checkpoint contains non-finite weights".into()));
        }
        model.params = params;
        model.corpus_fingerprint = meta.corpus_fingerprint;
        model.steps_trained = meta.steps_trained;
        Ok(model)
    }
}

/// `ε_null + s·(ε_cond − ε_null)`; scale 1 returns `ε_cond` untouched.
pub fn guided_eps(eps_cond: &Tensor, eps_null: &Tensor, scale: f64) -> Result<Tensor> {
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    Ok((eps_null + ((eps_cond - eps_null)? * scale)?)?)
}

/// Mean squared error between the predicted and the injected noise.
pub fn training_loss(
    predictor: &dyn NoisePredictor,
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    cond: &CondBatch,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let x_t = forward_diffuse_batch(x0, ts, eps, schedule)?;
    let pred = predictor.predict(&x_t, ts, cond)?;
    mse(&pred, eps)
}

/// Which rows get the null conditioning.
pub fn dropout_mask(rng: &mut SeededRng, n: usize, rate: f64) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(rate)).collect()
}

pub fn sample_timesteps(rng: &mut SeededRng, n: usize, max_t: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(1..=max_t)).collect()
}

/// One training example: a latent (C × h × w) with its caption.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub id: String,
    pub latent: Tensor,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainBaseConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Steps per epoch; defaults to one pass over the training set.
    pub epoch_steps: Option<usize>,
    pub checkpoint_every: usize,
    /// Emit a sample grid every this many epochs (0 disables).
    pub grid_every_epochs: usize,
    pub grid_prompts: Vec<String>,
    pub grid_sample_steps: usize,
}

impl Default for TrainBaseConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            epoch_steps: None,
            checkpoint_every: 1000,
            grid_every_epochs: 0,
            grid_prompts: vec![],
            grid_sample_steps: 25,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub timestamp: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub epoch_val_losses: Vec<f64>,
    pub nulled: usize,
    pub seen: usize,
    pub log_path: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub grids: Vec<PathBuf>,
}

fn now_secs() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

struct CondCache<'m> {
    text: &'m TextEncoder,
    map: BTreeMap<String, Conditioning>,
    null: Conditioning,
}

impl<'m> CondCache<'m> {
    fn new(text: &'m TextEncoder) -> Result<Self> {
        Ok(Self {
            text,
            map: BTreeMap::new(),
            null: text.null_conditioning()?,
        })
    }

    fn batch(&mut self, captions: &[&str], nulled: &[bool]) -> Result<CondBatch> {
        for c in captions {
            if !self.map.contains_key(*c) {
                self.map.insert(c.to_string(), self.text.encode(c)?);
            }
        }
        let refs: Vec<&Conditioning> = captions
            .iter()
            .zip(nulled)
            .map(|(c, n)| if *n { &self.null } else { &self.map[*c] })
            .collect();
        CondBatch::stack(&refs)
    }
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub loss: f64,
    pub nulled: usize,
}

/// Draws (t, ε, dropout) for `batch`, computes the denoising loss on the
/// trainable `view` of θ and applies one optimizer update.
#[allow(clippy::too_many_arguments)]
fn training_step(
    model: &BaseModel,
    view: &Params,
    opt: &mut AdamW,
    batch: &[&TrainingExample],
    conds: &mut CondCache<'_>,
    rng: &mut SeededRng,
    step: usize,
) -> Result<StepOutcome> {
    let n = batch.len();
    let lat: Vec<Tensor> = batch.iter().map(|e| e.latent.clone()).collect();
    let x0 = Tensor::stack(&lat, 0)?;
    let ts = sample_timesteps(rng, n, model.schedule.steps());
    let eps = normal_tensor(rng, x0.dims(), 1.0, DType::F32, &Device::Cpu)?;
    let nulled = dropout_mask(rng, n, model.config.guidance_dropout);
    let caps: Vec<&str> = batch.iter().map(|e| e.caption.as_str()).collect();
    let cond = conds.batch(&caps, &nulled)?;
    let pred = model.predictor_with(view, None);
    let loss = training_loss(&pred, &x0, &ts, &eps, &cond, &model.schedule)?;
    let value = scalar_f64(&loss)?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            batch_ids: batch.iter().map(|e| e.id.clone()).collect(),
        });
    }
    opt.backward_step(&loss)?;
    Ok(StepOutcome {
        loss: value,
        nulled: nulled.iter().filter(|b| **b).count(),
    })
}

/// Validation denoising loss with fixed (t, ε) draws.
pub fn validation_loss(model: &BaseModel, params: &Params, examples: &[TrainingExample], seed: u64) -> Result<f64> {
    if examples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut rng = rng_from_seed(derive_seed(seed, "validation"));
    let mut conds = CondCache::new(&model.text)?;
    let pred = model.predictor_with(params, None);
    let mut total = 0.0;
    for chunk in examples.chunks(64) {
        let lat: Vec<Tensor> = chunk.iter().map(|e| e.latent.clone()).collect();
        let x0 = Tensor::stack(&lat, 0)?;
        let ts = sample_timesteps(&mut rng, chunk.len(), model.schedule.steps());
        let eps = normal_tensor(&mut rng, x0.dims(), 1.0, DType::F32, &Device::Cpu)?;
        let caps: Vec<&str> = chunk.iter().map(|e| e.caption.as_str()).collect();
        let cond = conds.batch(&caps, &vec![false; chunk.len()])?;
        let l = scalar_f64(&training_loss(&pred, &x0, &ts, &eps, &cond, &model.schedule)?)?;
        total += l * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Trains θ from its current values. With `out_dir`, writes
/// `base.safetensors`, `train_log.jsonl` and optional sample grids there.
pub fn train_base(
    mut model: BaseModel,
    train: &[TrainingExample],
    validation: &[TrainingExample],
    cfg: &TrainBaseConfig,
    out_dir: Option<&Path>,
) -> Result<(BaseModel, TrainReport)> {
    let mut report = TrainReport::default();
    let ckpt_path = out_dir.map(|d| d.join("base.safetensors"));
    let mut log = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join("train_log.jsonl");
            report.log_path = Some(p.clone());
            Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let mut write_log = |rec: &LogRecord| -> Result<()> {
        if let Some((f, p)) = log.as_mut() {
            serde_json::to_writer(&mut *f, rec)?;
            f.write_all(b"\n").map_err(|e| Error::io(p.as_path(), e))?;
        }
        Ok(())
    };
    if cfg.steps == 0 {
        if let Some(p) = &ckpt_path {
            model.save(p)?;
            report.checkpoint = Some(p.clone());
        }
        return Ok((model, report));
    }
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let (view, vars) = model.params.make_trainable(|_| true)?;
    let mut opt = AdamW::new(
        vars.iter().map(|(_, v)| v.clone()).collect(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut conds = CondCache::new(&model.text)?;
    let mut batch_rng = rng_from_seed(derive_seed(cfg.seed, "batches"));
    let mut draw_rng = rng_from_seed(derive_seed(cfg.seed, "draws"));
    let bs = cfg.batch_size.min(train.len()).max(1);
    let epoch_steps = cfg.epoch_steps.unwrap_or(train.len().div_ceil(bs)).max(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut last_good: Option<PathBuf> = None;
    let mut epoch_loss = 0.0;
    for step in 0..cfg.steps {
        if cursor + bs > order.len() {
            order.shuffle(&mut batch_rng);
            cursor = 0;
        }
        let batch: Vec<&TrainingExample> = order[cursor..cursor + bs].iter().map(|&i| &train[i]).collect();
        cursor += bs;
        let out = match training_step(&model, &view, &mut opt, &batch, &mut conds, &mut draw_rng, step) {
            Ok(o) => o,
            Err(Error::NonFiniteLoss { step, batch_ids }) => {
                log::error!("non-finite loss at step {step} on {batch_ids:?}");
                return Err(Error::Diverged { step, last_good });
            }
            Err(e) => return Err(e),
        };
        report.losses.push(out.loss);
        report.nulled += out.nulled;
        report.seen += bs;
        epoch_loss += out.loss;
        write_log(&LogRecord {
            step,
            loss: out.loss,
            lr: cfg.lr,
            timestamp: now_secs(),
            epoch: None,
            val_loss: None,
        })?;
        if (step + 1) % epoch_steps == 0 {
            let epoch = (step + 1) / epoch_steps;
            let val = validation_loss(&model, &view, validation, cfg.seed)?;
            report.epoch_val_losses.push(val);
            log::info!(
                "epoch {epoch}: train {:.4} val {val:.4}",
                epoch_loss / epoch_steps as f64
            );
            epoch_loss = 0.0;
            write_log(&LogRecord {
                step,
                loss: out.loss,
                lr: cfg.lr,
                timestamp: now_secs(),
                epoch: Some(epoch),
                val_loss: Some(val),
            })?;
            if let (Some(dir), true) = (out_dir, cfg.grid_every_epochs > 0 && epoch % cfg.grid_every_epochs == 0) {
                let mut snap = model.clone();
                snap.params = view.deep_clone()?;
                report.grids.push(write_sample_grid(&snap, cfg, dir, epoch)?);
            }
        }
        if let Some(p) = &ckpt_path {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                let mut snap = model.clone();
                snap.params = view.deep_clone()?;
                snap.steps_trained += step + 1;
                snap.save(p)?;
                last_good = Some(p.clone());
            }
        }
    }
    model.params = view.deep_clone()?;
    model.steps_trained += cfg.steps;
    if let Some(p) = &ckpt_path {
        model.save(p)?;
        report.checkpoint = Some(p.clone());
    }
    Ok((model, report))
}

fn write_sample_grid(model: &BaseModel, cfg: &TrainBaseConfig, dir: &Path, epoch: usize) -> Result<PathBuf> {
    let prompts: Vec<&str> = if cfg.grid_prompts.is_empty() {
        vec!["a red ball on the beach", "a blue box in the snow"]
    } else {
        cfg.grid_prompts.iter().map(String::as_str).collect()
    };
    let cond = model.encode_prompts(&prompts)?;
    let null = model.null_batch(prompts.len())?;
    let seeds: Vec<u64> = (0..prompts.len() as u64).collect();
    let out = ddim_sample(
        model,
        &cond,
        &null,
        &SampleOptions {
            guidance_scale: DEFAULT_GUIDANCE,
            steps: cfg.grid_sample_steps,
        },
        &seeds,
        None,
    )?;
    let images = model.codec.decode_images(&out.latents)?;
    let labels: Vec<String> = prompts.iter().map(|s| s.to_string()).collect();
    let grid_dir = dir.join("samples");
    std::fs::create_dir_all(&grid_dir).map_err(|e| Error::io(&grid_dir, e))?;
    let path = grid_dir.join(format!("epoch_{epoch:03}.png"));
    crate::grid::render_grid(&images, &labels)?.save(&path)?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub guidance_scale: f64,
    pub steps: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            guidance_scale: DEFAULT_GUIDANCE,
            steps: 50,
        }
    }
}

/// Per-timestep adapter decision consulted by the sampler.
pub trait AdapterGate {
    /// Hook to apply at diffusion timestep `t`; `None` runs the base weights.
    fn hook_at(&self, t: usize) -> Option<&dyn LayerHook>;

    /// Conditioning to use instead of the sampler's at timestep `t`.
    fn cond_at(&self, _t: usize) -> Option<&CondBatch> {
        None
    }
}

/// One sampler iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t_from: usize,
    pub t_to: usize,
    /// Timestep passed to the denoiser.
    pub model_t: usize,
    pub adapter_active: bool,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub latents: Tensor,
    pub trace: Vec<StepRecord>,
}

/// Standard-normal starting latents, one independent stream per seed.
pub fn initial_noise(shape: (usize, usize, usize), seeds: &[u64]) -> Result<Tensor> {
    let rows = seeds
        .iter()
        .map(|s| normal_tensor(&mut rng_from_seed(*s), shape, 1.0, DType::F32, &Device::Cpu))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&rows, 0)?)
}

/// Descending timesteps from `t_from` to 0 on the `steps`-point DDIM grid.
pub fn denoising_grid(schedule: &NoiseSchedule, t_from: usize, steps: usize) -> Result<Vec<usize>> {
    schedule.check(t_from)?;
    let mut g: Vec<usize> = schedule
        .ddim_timesteps(steps)?
        .into_iter()
        .filter(|t| *t <= t_from)
        .collect();
    if g.first() != Some(&t_from) {
        g.insert(0, t_from);
    }
    if g.last() != Some(&0) {
        g.push(0);
    }
    Ok(g)
}

/// Moves `x` from ᾱ_a to ᾱ_b along the deterministic DDIM path implied by `eps`.
pub fn ddim_step(x: &Tensor, eps: &Tensor, ab_from: f64, ab_to: f64) -> Result<Tensor> {
    let x0 = ((x - (eps * (1.0 - ab_from).sqrt())?)? / ab_from.sqrt())?;
    Ok(((x0 * ab_to.sqrt())? + (eps * (1.0 - ab_to).sqrt())?)?)
}

#[allow(clippy::too_many_arguments)]
fn predict_guided(
    model: &BaseModel,
    hook: Option<&dyn LayerHook>,
    x: &Tensor,
    t: usize,
    cond: &CondBatch,
    null: &CondBatch,
    scale: f64,
) -> Result<Tensor> {
    let pred = model.predictor(hook);
    let ts = vec![t; x.dim(0)?];
    if scale == 1.0 {
        return pred.predict(x, &ts, cond);
    }
    let e_null = pred.predict(x, &ts, null)?;
    if scale == 0.0 {
        return Ok(e_null);
    }
    let e_cond = pred.predict(x, &ts, cond)?;
    guided_eps(&e_cond, &e_null, scale)
}

/// Denoises `x_t` from `t_from` to a clean latent.
pub fn ddim_denoise(
    model: &BaseModel,
    x_t: &Tensor,
    t_from: usize,
    cond: &CondBatch,
    null: &CondBatch,
    opts: &SampleOptions,
    gate: Option<&dyn AdapterGate>,
) -> Result<SampleOutput> {
    if opts.guidance_scale < 0.0 || !opts.guidance_scale.is_finite() {
        return Err(Error::Config(format!("guidance scale {} must be >= 0", opts.guidance_scale)));
    }
    let n = x_t.dim(0)?;
    if cond.batch_size()? != n || null.batch_size()? != n {
        return Err(Error::Shape {
            expected: format!("{n} conditionings"),
            got: format!("{} / {}", cond.batch_size()?, null.batch_size()?),
        });
    }
    let grid = denoising_grid(&model.schedule, t_from, opts.steps)?;
    let mut x = x_t.clone();
    let mut trace = Vec::with_capacity(grid.len());
    for w in grid.windows(2) {
        let (ta, tb) = (w[0], w[1]);
        let hook = gate.and_then(|g| g.hook_at(ta));
        let c = gate.and_then(|g| g.cond_at(ta)).unwrap_or(cond);
        let eps = predict_guided(model, hook, &x, ta, c, null, opts.guidance_scale)?;
        x = ddim_step(&x, &eps, model.schedule.alpha_bar(ta)?, model.schedule.alpha_bar(tb)?)?;
        trace.push(StepRecord {
            t_from: ta,
            t_to: tb,
            model_t: ta,
            adapter_active: hook.is_some(),
        });
    }
    Ok(SampleOutput { latents: x, trace })
}

/// Text-to-latent sampling from pure noise at T; row `i` starts from `seeds[i]`.
pub fn ddim_sample(
    model: &BaseModel,
    cond: &CondBatch,
    null: &CondBatch,
    opts: &SampleOptions,
    seeds: &[u64],
    gate: Option<&dyn AdapterGate>,
) -> Result<SampleOutput> {
    let x_t = initial_noise(model.latent_shape(), seeds)?;
    ddim_denoise(model, &x_t, model.schedule.steps(), cond, null, opts, gate)
}

/// Runs the DDIM recurrence backwards from the clean latent `x0` to
/// `target_step` with guidance 1. Each step from t_a up to t_b evaluates the
/// denoiser on the current latent at t_b.
pub fn ddim_invert(
    model: &BaseModel,
    x0: &Tensor,
    cond: &CondBatch,
    target_step: usize,
    steps: usize,
) -> Result<NoisedSample> {
    let mut grid = denoising_grid(&model.schedule, target_step, steps)?;
    grid.reverse();
    let mut x = x0.clone();
    let pred = model.predictor(None);
    let n = x0.dim(0)?;
    for w in grid.windows(2) {
        let (ta, tb) = (w[0], w[1]);
        let eps = pred.predict(&x, &vec![tb; n], cond)?;
        x = ddim_step(&x, &eps, model.schedule.alpha_bar(ta)?, model.schedule.alpha_bar(tb)?)?;
    }
    let ab = model.schedule.alpha_bar(target_step)?;
    let eps = if target_step == 0 {
        x.zeros_like()?
    } else {
        ((&x - (x0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?
    };
    Ok(NoisedSample {
        x_t: x,
        t: target_step,
        eps,
    })
}
