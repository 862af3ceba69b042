//! Language-only prompt encoder over a compact word vocabulary.
//!
//! The encoder is a token embedding table plus sinusoidal positions, followed
//! by an optional stack of self-attention mixing layers. Its weights come from
//! a seeded initialization and never see an image.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize_caption, CAPTION_EXCLUSION_TERMS, IMAGE_CONCEPTS};
use crate::error::{Error, Result};
use crate::nn::{Layers, ParamInit, Params};
use crate::random::rng_from_seed;

pub const PAD: &str = "[pad]";
pub const BOS: &str = "[bos]";
pub const UNK: &str = "[unk]";

pub const DEFAULT_STYLE_TOKEN: &str = "sks";

const BASE_WORDS: &[&str] = &[
    "a", "an", "the", "of", "in", "on", "at", "with", "and", "to", "near", "next", "during",
    "style", "photo", "picture", "image", "red", "yellow", "white", "purple", "orange",
    "black", "blue", "green", "pink", "ball", "box", "tower", "tent", "meadow", "beach",
    "desert", "snow", "night", "party", "cart", "partly", "cloudy", "start", "sks",
];

/// Word-level vocabulary. Ids 0..3 are reserved for pad, bos and unk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

impl Vocab {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut list: Vec<String> = vec![PAD.into(), BOS.into(), UNK.into()];
        let mut extra: Vec<String> = words
            .into_iter()
            .flat_map(|w| tokenize_caption(w.as_ref()))
            .collect();
        extra.sort();
        extra.dedup();
        list.extend(extra.into_iter().filter(|w| ![PAD, BOS, UNK].contains(&w.as_str())));
        Self::from_list(list)
    }

    fn from_list(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words, index }
    }

    /// The default vocabulary: fixture words, art terms and the style template.
    pub fn standard() -> Self {
        Self::from_words(
            BASE_WORDS
                .iter()
                .chain(CAPTION_EXCLUSION_TERMS)
                .chain(IMAGE_CONCEPTS)
                .copied(),
        )
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn unk_id(&self) -> u32 {
        2
    }

    pub fn bos_id(&self) -> u32 {
        1
    }

    /// Content token ids of `text` (no bos).
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        tokenize_caption(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(self.unk_id()))
            .collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i != 0 && i != self.bos_id())
            .map(|&i| self.word(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Vocab = serde_json::from_str(&text)?;
        Ok(Self::from_list(v.words))
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Rebuilds a vocabulary from its exact word list (ids are positions).
    pub fn from_word_list(words: Vec<String>) -> Self {
        Self::from_list(words)
    }
}

/// The placeholder token bound to a learned style.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleToken {
    pub surface_form: String,
    pub vocabulary_id: u32,
    /// Only set by the textual-inversion probe.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
}

impl StyleToken {
    pub fn new(surface_form: &str, vocab: &Vocab) -> Result<Self> {
        let ids = vocab.tokenize(surface_form);
        match ids.as_slice() {
            [id] if *id != vocab.unk_id() => Ok(Self {
                surface_form: surface_form.to_string(),
                vocabulary_id: *id,
                embedding: None,
            }),
            _ => Err(Error::Config(format!(
                "style token `{surface_form}` must map to exactly one known vocabulary id"
            ))),
        }
    }

    pub fn suffix(&self) -> String {
        format!(" in the style of {} art", self.surface_form)
    }
}

/// Appends " in the style of <token> art" to a content prompt.
pub fn compose_style_prompt(content: &str, token: &StyleToken) -> Result<String> {
    let content = content.trim_end();
    if content.trim().is_empty() {
        return Err(Error::Config("style prompt needs non-empty content".into()));
    }
    if is_style_prompt(content, token) {
        return Err(Error::Config(format!(
            "prompt `{content}` already carries the style suffix"
        )));
    }
    Ok(format!("{content}{}", token.suffix()))
}

pub fn is_style_prompt(prompt: &str, token: &StyleToken) -> bool {
    prompt.trim_end().ends_with(token.suffix().trim_start())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub dim: usize,
    pub max_tokens: usize,
    /// Number of self-attention mixing layers; 0 gives a non-contextual encoder.
    pub context_layers: usize,
    pub seed: u64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            max_tokens: 16,
            context_layers: 1,
            seed: 17,
        }
    }
}

/// Where the encoder weights came from; must never include an image-trained source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextProvenance {
    pub source: String,
    pub training_modalities: Vec<String>,
}

impl TextProvenance {
    pub fn random_init(seed: u64) -> Self {
        Self {
            source: format!("seeded-random-init:{seed}"),
            training_modalities: vec![],
        }
    }

    pub fn assert_text_only(&self) -> Result<()> {
        match self.training_modalities.iter().find(|m| m.as_str() != "text") {
            Some(m) => Err(Error::Invariant(format!(
                "text encoder provenance includes non-text modality `{m}`"
            ))),
            None => Ok(()),
        }
    }
}

/// An encoded prompt.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub prompt_text: String,
    /// Leading bos followed by content ids, after truncation.
    pub token_ids: Vec<u32>,
    /// (max_tokens, dim); rows past `token_ids.len()` are zero.
    pub embeddings: Tensor,
    pub is_null: bool,
    pub truncated: bool,
}

impl Conditioning {
    pub fn valid_len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn embedding_rows(&self) -> Result<Vec<Vec<f32>>> {
        Ok(self.embeddings.to_dtype(DType::F32)?.to_vec2()?)
    }
}

/// Batched conditioning fed to the denoiser.
#[derive(Debug, Clone)]
pub struct CondBatch {
    /// (B, L, D)
    pub context: Tensor,
    /// (B, L) with 1 for valid tokens and 0 for padding.
    pub mask: Tensor,
}

impl CondBatch {
    pub fn stack(conds: &[&Conditioning]) -> Result<Self> {
        if conds.is_empty() {
            return Err(Error::Shape {
                expected: "at least one conditioning".into(),
                got: "0".into(),
            });
        }
        let ctx: Vec<Tensor> = conds.iter().map(|c| c.embeddings.clone()).collect();
        let context = Tensor::stack(&ctx, 0)?;
        let l = conds[0].embeddings.dim(0)?;
        let mut m = Vec::with_capacity(conds.len() * l);
        for c in conds {
            for i in 0..l {
                m.push(if i < c.valid_len() { 1f32 } else { 0.0 });
            }
        }
        let mask = Tensor::from_vec(m, (conds.len(), l), context.device())?.to_dtype(context.dtype())?;
        Ok(Self { context, mask })
    }

    /// Repeats each row `n` times (row-major), e.g. to pair one prompt with
    /// several noise draws.
    pub fn repeat_each(&self, n: usize) -> Result<Self> {
        let (b, l, d) = self.context.dims3()?;
        let context = self
            .context
            .unsqueeze(1)?
            .broadcast_as((b, n, l, d))?
            .reshape((b * n, l, d))?;
        let mask = self
            .mask
            .unsqueeze(1)?
            .broadcast_as((b, n, l))?
            .reshape((b * n, l))?;
        Ok(Self { context, mask })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            context: self.context.to_dtype(dtype)?,
            mask: self.mask.to_dtype(dtype)?,
        })
    }

    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.context.dim(0)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextEncoderMeta {
    pub config: TextEncoderConfig,
    pub vocab: Vocab,
    pub provenance: TextProvenance,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub vocab: Vocab,
    pub params: Params,
    pub provenance: TextProvenance,
    positions: Tensor,
}

fn sinusoidal_positions(len: usize, dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(len * dim);
    for p in 0..len {
        for i in 0..dim {
            let freq = (-(10000f64).ln() * (i / 2 * 2) as f64 / dim as f64).exp();
            let v = if i % 2 == 0 {
                (p as f64 * freq).sin()
            } else {
                (p as f64 * freq).cos()
            };
            data.push((0.5 * v) as f32);
        }
    }
    Ok(Tensor::from_vec(data, (len, dim), &Device::Cpu)?)
}

impl TextEncoder {
    pub fn new(config: TextEncoderConfig, vocab: Vocab) -> Result<Self> {
        if config.max_tokens < 2 || config.dim == 0 || config.dim % 2 != 0 {
            return Err(Error::Config("text encoder needs max_tokens >= 2 and an even dim".into()));
        }
        let mut rng = rng_from_seed(config.seed);
        let mut init = ParamInit::new(&mut rng, DType::F32, &Device::Cpu);
        init.normal("tok.embedding", &[vocab.len(), config.dim], 1.0)?;
        for i in 0..config.context_layers {
            init.norm(&format!("ctx.{i}.norm"), config.dim)?;
            for p in ["q", "k", "v", "o"] {
                init.linear(&format!("ctx.{i}.{p}"), config.dim, config.dim)?;
            }
        }
        let params = init.finish();
        let positions = sinusoidal_positions(config.max_tokens, config.dim)?;
        Ok(Self {
            provenance: TextProvenance::random_init(config.seed),
            config,
            vocab,
            params,
            positions,
        })
    }

    pub fn from_parts(params: Params, meta: TextEncoderMeta) -> Result<Self> {
        meta.provenance.assert_text_only()?;
        let positions = sinusoidal_positions(meta.config.max_tokens, meta.config.dim)?;
        Ok(Self {
            config: meta.config,
            vocab: Vocab::from_word_list(meta.vocab.words().to_vec()),
            params,
            provenance: meta.provenance,
            positions,
        })
    }

    pub fn meta(&self) -> TextEncoderMeta {
        TextEncoderMeta {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn style_token(&self, surface_form: &str) -> Result<StyleToken> {
        StyleToken::new(surface_form, &self.vocab)
    }

    /// Token ids with bos, truncated to `max_tokens`; second value flags truncation.
    pub fn token_ids(&self, prompt: &str) -> (Vec<u32>, bool) {
        let mut ids = vec![self.vocab.bos_id()];
        ids.extend(self.vocab.tokenize(prompt));
        let truncated = ids.len() > self.config.max_tokens;
        ids.truncate(self.config.max_tokens);
        (ids, truncated)
    }

    /// Raw embedding row of a vocabulary id.
    pub fn token_embedding(&self, id: u32) -> Result<Tensor> {
        Ok(self.params.get("tok.embedding")?.get(id as usize)?)
    }

    pub fn encode(&self, prompt: &str) -> Result<Conditioning> {
        self.encode_with_override(prompt, None)
    }

    /// Encodes a prompt, optionally replacing the embedding row of one token id
    /// (used by textual inversion, where the replacement is trainable).
    pub fn encode_with_override(
        &self,
        prompt: &str,
        replace: Option<(u32, &Tensor)>,
    ) -> Result<Conditioning> {
        let (ids, truncated) = self.token_ids(prompt);
        if truncated {
            log::warn!(
                "prompt truncated to {} tokens: {prompt:?}",
                self.config.max_tokens
            );
        }
        let n = ids.len();
        let table = self.params.get("tok.embedding")?;
        let idx = Tensor::new(ids.as_slice(), &Device::Cpu)?;
        let mut emb = table.index_select(&idx, 0)?;
        if let Some((rid, row)) = replace {
            let sel: Vec<f32> = ids.iter().map(|&i| if i == rid { 1.0 } else { 0.0 }).collect();
            if sel.iter().any(|v| *v > 0.0) {
                let sel = Tensor::from_vec(sel, (n, 1), &Device::Cpu)?;
                let keep = (1.0 - &sel)?;
                let row = row.reshape((1, self.config.dim))?;
                emb = (emb.broadcast_mul(&keep)? + sel.broadcast_mul(&row)?)?;
            }
        }
        let mut h = (emb + self.positions.narrow(0, 0, n)?)?;
        let layers = Layers::new(&self.params);
        for i in 0..self.config.context_layers {
            let x = layers.layer_norm(&format!("ctx.{i}.norm"), &h)?;
            let q = layers.linear(&format!("ctx.{i}.q"), &x)?;
            let k = layers.linear(&format!("ctx.{i}.k"), &x)?;
            let v = layers.linear(&format!("ctx.{i}.v"), &x)?;
            let att = (q.matmul(&k.t()?)? / (self.config.dim as f64).sqrt())?;
            let att = candle_nn::ops::softmax(&att, D::Minus1)?;
            let mixed = layers.linear(&format!("ctx.{i}.o"), &att.matmul(&v)?)?;
            h = (h + mixed)?;
        }
        let pad = self.config.max_tokens - n;
        let embeddings = if pad > 0 {
            Tensor::cat(&[h, Tensor::zeros((pad, self.config.dim), DType::F32, &Device::Cpu)?], 0)?
        } else {
            h
        };
        Ok(Conditioning {
            prompt_text: prompt.to_string(),
            token_ids: ids,
            embeddings,
            is_null: prompt.trim().is_empty(),
            truncated,
        })
    }

    /// The unconditional encoding used for classifier-free guidance.
    pub fn null_conditioning(&self) -> Result<Conditioning> {
        self.encode("")
    }
}
