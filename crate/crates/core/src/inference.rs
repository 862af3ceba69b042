//! Text-to-image generation with timestep-gated adapter injection, and
//! stylization of real images via inversion plus adapted denoising.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterBundle, LoraHook, ProbeResult};
use crate::diffusion::{ddim_denoise, ddim_invert, initial_noise, AdapterGate, BaseModel, SampleOptions, StepRecord};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::LayerHook;
use crate::text::{compose_style_prompt, CondBatch, Conditioning};

/// Conditioning used at steps where the adapter is off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InactiveConditioning {
    /// The content prompt alone.
    #[default]
    Plain,
    /// The style-suffixed prompt, as when the adapter is on.
    Styled,
}

/// Adapter on at every sampler step whose diffusion timestep is ≤ `t_start`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectionPolicy {
    pub t_start: usize,
    pub scale: f64,
    #[serde(default)]
    pub inactive: InactiveConditioning,
}

impl InjectionPolicy {
    pub fn full(steps: usize) -> Self {
        Self {
            t_start: steps,
            scale: 1.0,
            inactive: InactiveConditioning::Plain,
        }
    }

    pub fn off() -> Self {
        Self {
            t_start: 0,
            scale: 0.0,
            inactive: InactiveConditioning::Plain,
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.t_start > steps {
            return Err(Error::Config(format!("t_start {} exceeds T = {steps}", self.t_start)));
        }
        if !self.scale.is_finite() {
            return Err(Error::Config("adapter scale must be finite".into()));
        }
        Ok(())
    }

    pub fn active_at(&self, t: usize) -> bool {
        self.scale != 0.0 && t <= self.t_start
    }
}

/// The four-column injection sweep: no adapter, late, mid and full.
pub fn injection_sweep(steps: usize) -> Vec<(&'static str, usize)> {
    vec![
        ("no adapter", 0),
        ("late", steps * 6 / 10),
        ("mid", steps * 8 / 10),
        ("full", steps),
    ]
}

/// Sampler gate realising an [`InjectionPolicy`].
pub struct PolicyGate<'a> {
    policy: InjectionPolicy,
    hook: Option<LoraHook<'a>>,
    styled: CondBatch,
}

impl<'a> PolicyGate<'a> {
    pub fn new(policy: InjectionPolicy, adapter: Option<&'a AdapterBundle>, styled: CondBatch) -> Self {
        Self {
            policy,
            hook: adapter.map(|a| a.hook_with_scale(policy.scale)),
            styled,
        }
    }

    fn on(&self, t: usize) -> bool {
        self.hook.is_some() && self.policy.active_at(t)
    }

    /// Conditioning the denoiser sees at `t` given the plain batch.
    pub fn conditioning_at<'b>(&'b self, t: usize, plain: &'b CondBatch) -> &'b CondBatch {
        self.cond_at(t).unwrap_or(plain)
    }
}

impl AdapterGate for PolicyGate<'_> {
    fn hook_at(&self, t: usize) -> Option<&dyn LayerHook> {
        if self.on(t) {
            self.hook.as_ref().map(|h| h as &dyn LayerHook)
        } else {
            None
        }
    }

    fn cond_at(&self, t: usize) -> Option<&CondBatch> {
        if self.on(t) || self.policy.inactive == InactiveConditioning::Styled {
            Some(&self.styled)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenerationOutput {
    pub images: Vec<Image>,
    pub latents: Tensor,
    pub trace: Vec<StepRecord>,
}

fn check_prompts(prompts: &[&str]) -> Result<()> {
    if prompts.is_empty() {
        return Err(Error::Config("no prompts given".into()));
    }
    if prompts.iter().any(|p| p.trim().is_empty()) {
        return Err(Error::MissingField("prompt".into()));
    }
    Ok(())
}

fn styled_batch(model: &BaseModel, adapter: Option<&AdapterBundle>, prompts: &[&str]) -> Result<CondBatch> {
    let token = match adapter {
        Some(a) => a.style_token.clone(),
        None => model.text.style_token(crate::text::DEFAULT_STYLE_TOKEN)?,
    };
    let styled: Vec<String> = prompts
        .iter()
        .map(|p| compose_style_prompt(p, &token))
        .collect::<Result<_>>()?;
    model.encode_prompts(&styled.iter().map(String::as_str).collect::<Vec<_>>())
}

/// Samples one image per (prompt, seed) pair.
pub fn generate(
    model: &BaseModel,
    adapter: Option<&AdapterBundle>,
    prompts: &[&str],
    policy: &InjectionPolicy,
    opts: &SampleOptions,
    seeds: &[u64],
) -> Result<GenerationOutput> {
    check_prompts(prompts)?;
    if prompts.len() != seeds.len() {
        return Err(Error::Config(format!("{} prompts but {} seeds", prompts.len(), seeds.len())));
    }
    policy.validate(model.schedule.steps())?;
    if let Some(a) = adapter {
        a.check_compatible(model)?;
    }
    let plain = model.encode_prompts(prompts)?;
    let styled = styled_batch(model, adapter, prompts)?;
    let null = model.null_batch(prompts.len())?;
    let gate = PolicyGate::new(*policy, adapter, styled);
    let x_t = initial_noise(model.latent_shape(), seeds)?;
    let out = ddim_denoise(model, &x_t, model.schedule.steps(), &plain, &null, opts, Some(&gate))?;
    Ok(GenerationOutput {
        images: model.codec.decode_images(&out.latents)?,
        latents: out.latents,
        trace: out.trace,
    })
}

/// Inverts each image to `invert_to` under its content prompt, then
/// denoises with the gated adapter and style-suffixed prompt.
pub fn stylize(
    model: &BaseModel,
    adapter: Option<&AdapterBundle>,
    images: &[Image],
    content_prompts: &[&str],
    invert_to: usize,
    policy: &InjectionPolicy,
    opts: &SampleOptions,
) -> Result<GenerationOutput> {
    check_prompts(content_prompts)?;
    if images.len() != content_prompts.len() {
        return Err(Error::Config(format!(
            "{} images but {} prompts",
            images.len(),
            content_prompts.len()
        )));
    }
    model.schedule.check(invert_to)?;
    policy.validate(model.schedule.steps())?;
    if let Some(a) = adapter {
        a.check_compatible(model)?;
    }
    let size = model.codec.config.image_size;
    let fitted: Vec<Image> = images
        .iter()
        .map(|i| if i.width == size && i.height == size { i.clone() } else { i.resize(size, size) })
        .collect();
    let refs: Vec<&Image> = fitted.iter().collect();
    let x0 = model.codec.encode_images(&refs)?;
    let plain = model.encode_prompts(content_prompts)?;
    let inv = ddim_invert(model, &x0, &plain, invert_to, opts.steps)?;
    let styled = styled_batch(model, adapter, content_prompts)?;
    let null = model.null_batch(images.len())?;
    let gate = PolicyGate::new(*policy, adapter, styled);
    let out = ddim_denoise(model, &inv.x_t, invert_to, &plain, &null, opts, Some(&gate))?;
    Ok(GenerationOutput {
        images: model.codec.decode_images(&out.latents)?,
        latents: out.latents,
        trace: out.trace,
    })
}

/// Base-model generation from style-suffixed prompts encoded with the
/// probe's learned token embedding.
pub fn generate_with_probe(
    model: &BaseModel,
    probe: &ProbeResult,
    prompts: &[&str],
    opts: &SampleOptions,
    seeds: &[u64],
) -> Result<GenerationOutput> {
    check_prompts(prompts)?;
    if prompts.len() != seeds.len() {
        return Err(Error::Config(format!("{} prompts but {} seeds", prompts.len(), seeds.len())));
    }
    let conds: Vec<Conditioning> = prompts
        .iter()
        .map(|p| probe.encode(model, &compose_style_prompt(p, &probe.token)?))
        .collect::<Result<_>>()?;
    let cond = CondBatch::stack(&conds.iter().collect::<Vec<_>>())?;
    let null = model.null_batch(prompts.len())?;
    let x_t = initial_noise(model.latent_shape(), seeds)?;
    let out = ddim_denoise(model, &x_t, model.schedule.steps(), &cond, &null, opts, None)?;
    Ok(GenerationOutput {
        images: model.codec.decode_images(&out.latents)?,
        latents: out.latents,
        trace: out.trace,
    })
}
