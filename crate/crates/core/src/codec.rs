//! Image ⇄ latent autoencoder, plus a pixel-space passthrough mode.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::image::{images_to_tensor, psnr, tensor_to_images, Image};
use crate::nn::{scalar_f64, Layers, ParamInit, Params};
use crate::random::{derive_seed, normal_tensor, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecKind {
    /// encode/decode are the identity on [-1, 1] pixel tensors.
    Passthrough,
    Autoencoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub kind: CodecKind,
    pub image_size: usize,
    pub latent_channels: usize,
    /// Spatial downsampling factor; a power of two.
    pub downsample: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl CodecConfig {
    pub fn passthrough(image_size: usize) -> Self {
        Self {
            kind: CodecKind::Passthrough,
            image_size,
            latent_channels: 3,
            downsample: 1,
            hidden: 0,
            seed: 0,
        }
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.downsample
    }

    pub fn validate(&self) -> Result<()> {
        if !self.downsample.is_power_of_two() {
            return Err(Error::Config(format!(
                "codec downsample {} is not a power of two",
                self.downsample
            )));
        }
        if self.image_size % self.downsample != 0 {
            return Err(Error::Config("image size must be divisible by downsample".into()));
        }
        if self.kind == CodecKind::Passthrough && (self.downsample != 1 || self.latent_channels != 3)
        {
            return Err(Error::Config(
                "passthrough codec needs downsample 1 and 3 latent channels".into(),
            ));
        }
        Ok(())
    }
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            kind: CodecKind::Autoencoder,
            image_size: 32,
            latent_channels: 4,
            downsample: 4,
            hidden: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub kl_weight: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 16,
            lr: 2e-3,
            kl_weight: 1e-6,
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

/// A latent tensor (C × h × w) with optional provenance.
#[derive(Debug, Clone)]
pub struct LatentImage {
    pub tensor: Tensor,
    pub source_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecMeta {
    pub kind: String,
    pub config: CodecConfig,
    pub scaling: f64,
    pub corpus_fingerprint: String,
    pub steps_trained: usize,
}

#[derive(Debug, Clone)]
pub struct LatentCodec {
    pub config: CodecConfig,
    pub params: Params,
    /// Multiplies encoder means so latents have roughly unit scale.
    pub scaling: f64,
    pub corpus_fingerprint: String,
    pub steps_trained: usize,
}

fn stages(config: &CodecConfig) -> usize {
    config.downsample.trailing_zeros() as usize
}

// (B, C, H, W) -> (B, 4C, H/2, W/2)
fn space_to_depth(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h / 2, 2, w / 2, 2))?
        .permute((0, 1, 3, 5, 2, 4))?
        .reshape((b, c * 4, h / 2, w / 2))?)
}

fn depth_to_space(x: &Tensor) -> Result<Tensor> {
    let (b, c4, h, w) = x.dims4()?;
    let c = c4 / 4;
    Ok(x.reshape((b, c, 2, 2, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, c, h * 2, w * 2))?)
}

impl LatentCodec {
    pub fn passthrough(image_size: usize) -> Self {
        Self {
            config: CodecConfig::passthrough(image_size),
            params: Params::new(),
            scaling: 1.0,
            corpus_fingerprint: String::new(),
            steps_trained: 0,
        }
    }

    pub fn init(config: CodecConfig) -> Result<Self> {
        config.validate()?;
        if config.kind == CodecKind::Passthrough {
            return Ok(Self::passthrough(config.image_size));
        }
        let mut rng = rng_from_seed(config.seed);
        let mut p = ParamInit::new(&mut rng, DType::F32, &Device::Cpu);
        let h = config.hidden;
        let z = config.latent_channels;
        let n = stages(&config);
        let pix = if n > 0 { 12 } else { 3 };
        p.conv("enc.in", pix, h, 3)?;
        for i in 1..n {
            p.conv(&format!("enc.down{i}"), h, h, 3)?;
        }
        p.conv("enc.mid", h, h, 3)?;
        p.conv("enc.out", h, 2 * z, 1)?;
        p.conv("dec.in", z, h, 3)?;
        p.conv("dec.mid", h, h, 3)?;
        for i in 1..n {
            p.conv(&format!("dec.up{i}"), h, h, 3)?;
        }
        p.conv("dec.out", h, pix, 3)?;
        Ok(Self {
            config,
            params: p.finish(),
            scaling: 1.0,
            corpus_fingerprint: String::new(),
            steps_trained: 0,
        })
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let s = self.config.latent_size();
        (self.config.latent_channels, s, s)
    }

    fn encode_moments(&self, params: &Params, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let l = Layers::new(params);
        let n = stages(&self.config);
        let x = if n > 0 { space_to_depth(x)? } else { x.clone() };
        let mut h = l.conv2d("enc.in", &x, 1, 1)?.silu()?;
        for i in 1..n {
            h = l.conv2d(&format!("enc.down{i}"), &h, 2, 1)?.silu()?;
        }
        h = (&h + l.conv2d("enc.mid", &h, 1, 1)?.silu()?)?;
        let m = l.conv2d("enc.out", &h, 1, 0)?;
        let z = self.config.latent_channels;
        let mean = m.narrow(1, 0, z)?;
        let logvar = m.narrow(1, z, z)?.clamp(-20.0, 10.0)?;
        Ok((mean, logvar))
    }

    fn decode_raw(&self, params: &Params, z: &Tensor) -> Result<Tensor> {
        let l = Layers::new(params);
        let mut h = l.conv2d("dec.in", z, 1, 1)?.silu()?;
        h = (&h + l.conv2d("dec.mid", &h, 1, 1)?.silu()?)?;
        let n = stages(&self.config);
        for i in 1..n {
            let (_, _, hh, ww) = h.dims4()?;
            h = h.upsample_nearest2d(hh * 2, ww * 2)?;
            h = l.conv2d(&format!("dec.up{i}"), &h, 1, 1)?.silu()?;
        }
        let out = l.conv2d("dec.out", &h, 1, 1)?;
        if n > 0 {
            depth_to_space(&out)
        } else {
            Ok(out)
        }
    }

    fn check_image_tensor(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.config.image_size;
        if c != 3 || h != s || w != s {
            return Err(Error::Shape {
                expected: format!("(B, 3, {s}, {s})"),
                got: format!("{:?}", x.dims()),
            });
        }
        Ok(())
    }

    /// Encodes a (B, 3, H, W) tensor in [-1, 1] to scaled latents using the
    /// posterior mean.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.check_image_tensor(x)?;
        match self.config.kind {
            CodecKind::Passthrough => Ok(x.clone()),
            CodecKind::Autoencoder => {
                let (mean, _) = self.encode_moments(&self.params, x)?;
                Ok((mean * self.scaling)?)
            }
        }
    }

    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = z.dims4()?;
        let (ec, eh, ew) = self.latent_shape();
        if (c, h, w) != (ec, eh, ew) {
            return Err(Error::Shape {
                expected: format!("(B, {ec}, {eh}, {ew})"),
                got: format!("{:?}", z.dims()),
            });
        }
        match self.config.kind {
            CodecKind::Passthrough => Ok(z.clone()),
            CodecKind::Autoencoder => self.decode_raw(&self.params, &(z / self.scaling)?),
        }
    }

    pub fn encode_images(&self, images: &[&Image]) -> Result<Tensor> {
        let mut out = Vec::new();
        for chunk in images.chunks(64) {
            let x = images_to_tensor(chunk, &Device::Cpu)?;
            out.push(self.encode_tensor(&x)?);
        }
        Ok(Tensor::cat(&out, 0)?)
    }

    pub fn decode_images(&self, z: &Tensor) -> Result<Vec<Image>> {
        let n = z.dim(0)?;
        let mut out = Vec::with_capacity(n);
        let mut i = 0;
        while i < n {
            let k = (n - i).min(64);
            out.extend(tensor_to_images(&self.decode_tensor(&z.narrow(0, i, k)?)?)?);
            i += k;
        }
        Ok(out)
    }

    pub fn encode(&self, image: &Image, source_id: Option<&str>) -> Result<LatentImage> {
        let t = self.encode_images(&[image])?.squeeze(0)?;
        Ok(LatentImage {
            tensor: t,
            source_id: source_id.map(str::to_string),
        })
    }

    pub fn decode(&self, latent: &LatentImage) -> Result<Image> {
        let z = latent.tensor.unsqueeze(0)?;
        Ok(self.decode_images(&z)?.remove(0))
    }

    pub fn meta(&self) -> CodecMeta {
        CodecMeta {
            kind: "codec".into(),
            config: self.config.clone(),
            scaling: self.scaling,
            corpus_fingerprint: self.corpus_fingerprint.clone(),
            steps_trained: self.steps_trained,
        }
    }

    pub fn from_parts(params: Params, meta: CodecMeta) -> Result<Self> {
        meta.config.validate()?;
        if !(meta.scaling > 0.0 && meta.scaling.is_finite()) {
            return Err(Error::Checkpoint(format!("invalid latent scaling {}", meta.scaling)));
        }
        Ok(Self {
            config: meta.config,
            params,
            scaling: meta.scaling,
            corpus_fingerprint: meta.corpus_fingerprint,
            steps_trained: meta.steps_trained,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params, &self.meta())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta): (Params, CodecMeta) = checkpoint::load(path)?;
        if meta.kind != "codec" {
            return Err(Error::Checkpoint(format!("{} is not a codec checkpoint", path.display())));
        }
        Self::from_parts(params, meta)
    }

    /// Mean reconstruction PSNR (dB) over `images`.
    pub fn reconstruction_psnr(&self, images: &[Image]) -> Result<f64> {
        if images.is_empty() {
            return Ok(0.0);
        }
        let refs: Vec<&Image> = images.iter().collect();
        let recon = self.decode_images(&self.encode_images(&refs)?)?;
        Ok(images.iter().zip(&recon).map(|(a, b)| psnr(a, b)).sum::<f64>() / images.len() as f64)
    }

    /// Standard deviation of scaled latents over `images`.
    pub fn latent_std(&self, images: &[Image]) -> Result<f64> {
        let refs: Vec<&Image> = images.iter().collect();
        let z = self.encode_images(&refs)?.to_dtype(DType::F64)?;
        let mean = scalar_f64(&z.mean_all()?)?;
        let var = scalar_f64(&(z - mean)?.sqr()?.mean_all()?)?;
        Ok(var.sqrt())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecReport {
    pub losses: Vec<f64>,
    pub heldout_psnr: f64,
    pub latent_std: f64,
    pub checkpoint: Option<PathBuf>,
}

/// Trains the autoencoder on `train` images (reconstruction MSE plus a small
/// KL term), then fixes the latent scaling from the training latents.
///
/// When `out` is given, checkpoints are written every `checkpoint_every`
/// steps; on a non-finite loss the last good checkpoint is kept and
/// [`Error::Diverged`] returned.
pub fn train_codec(
    config: CodecConfig,
    train: &[Image],
    held_out: &[Image],
    tcfg: &CodecTrainConfig,
    corpus_fingerprint: &str,
    out: Option<&Path>,
) -> Result<(LatentCodec, CodecReport)> {
    let mut codec = LatentCodec::init(config)?;
    codec.corpus_fingerprint = corpus_fingerprint.to_string();
    if codec.config.kind == CodecKind::Passthrough {
        if let Some(p) = out {
            codec.save(p)?;
        }
        let heldout_psnr = codec.reconstruction_psnr(held_out)?;
        return Ok((
            codec,
            CodecReport {
                losses: vec![],
                heldout_psnr,
                latent_std: 0.0,
                checkpoint: out.map(Path::to_path_buf),
            },
        ));
    }
    if train.is_empty() {
        return Err(Error::Config("codec training set is empty".into()));
    }
    let (view, vars) = codec.params.make_trainable(|_| true)?;
    let mut opt = AdamW::new(
        vars.iter().map(|(_, v)| v.clone()).collect(),
        ParamsAdamW {
            lr: tcfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = rng_from_seed(derive_seed(tcfg.seed, "codec-batches"));
    let mut noise_rng = rng_from_seed(derive_seed(tcfg.seed, "codec-noise"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(tcfg.steps);
    let mut last_good: Option<PathBuf> = None;
    for step in 0..tcfg.steps {
        if cursor + tcfg.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..(cursor + tcfg.batch_size).min(order.len())];
        cursor += tcfg.batch_size;
        let batch: Vec<&Image> = idx.iter().map(|&i| &train[i]).collect();
        let x = images_to_tensor(&batch, &Device::Cpu)?;
        let (mean, logvar) = codec.encode_moments(&view, &x)?;
        let noise = normal_tensor(&mut noise_rng, mean.dims(), 1.0, DType::F32, &Device::Cpu)?;
        let z = (&mean + (logvar.affine(0.5, 0.0)?.exp()? * noise)?)?;
        let recon = codec.decode_raw(&view, &z)?;
        let rec_loss = (recon - &x)?.sqr()?.mean_all()?;
        let kl = ((mean.sqr()? + logvar.exp()?)? - &logvar)?
            .affine(1.0, -1.0)?
            .mean_all()?
            .affine(0.5, 0.0)?;
        let loss = (rec_loss + kl.affine(tcfg.kl_weight, 0.0)?)?;
        let value = scalar_f64(&loss)?;
        if !value.is_finite() {
            log::error!("codec training diverged at step {step}");
            return Err(Error::Diverged { step, last_good });
        }
        losses.push(value);
        opt.backward_step(&loss)?;
        if let Some(p) = out {
            if tcfg.checkpoint_every > 0 && (step + 1) % tcfg.checkpoint_every == 0 {
                let mut snap = codec.clone();
                snap.params = view.deep_clone()?;
                snap.steps_trained = step + 1;
                snap.save(p)?;
                last_good = Some(p.to_path_buf());
            }
        }
        if step % 250 == 0 {
            log::info!("codec step {step} loss {value:.5}");
        }
    }
    codec.params = view.deep_clone()?;
    codec.steps_trained = tcfg.steps;
    // scaling from training latents (unscaled means)
    codec.scaling = 1.0;
    let sample: Vec<Image> = train.iter().take(256).cloned().collect();
    let std = codec.latent_std(&sample)?;
    codec.scaling = if std > 1e-6 { 1.0 / std } else { 1.0 };
    let heldout_psnr = codec.reconstruction_psnr(held_out)?;
    let latent_std = if held_out.len() >= 2 {
        codec.latent_std(held_out)?
    } else {
        1.0
    };
    if let Some(p) = out {
        codec.save(p)?;
    }
    Ok((
        codec,
        CodecReport {
            losses,
            heldout_psnr,
            latent_std,
            checkpoint: out.map(Path::to_path_buf),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_shuffle_roundtrip() {
        let x = Tensor::arange(0f32, 96.0, &Device::Cpu).unwrap().reshape((2, 3, 4, 4)).unwrap();
        let s = space_to_depth(&x).unwrap();
        assert_eq!(s.dims(), &[2, 12, 2, 2]);
        // channel 0 of the packed tensor holds the top-left pixel of each 2x2 cell
        let v: Vec<f32> = s.get(0).unwrap().get(0).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(v, vec![0.0, 2.0, 8.0, 10.0]);
        let back = depth_to_space(&s).unwrap();
        let a: Vec<f32> = back.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    fn gradient_image(seed: usize) -> Image {
        let mut img = Image::new(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                let v = ((x + seed) as f32 / 40.0).min(1.0);
                img.set(x, y, [v, y as f32 / 32.0, 0.5]);
            }
        }
        img
    }

    #[test]
    fn passthrough_is_identity() {
        let c = LatentCodec::passthrough(32);
        let img = gradient_image(3);
        let t = images_to_tensor(&[&img], &Device::Cpu).unwrap();
        let z = c.encode_tensor(&t).unwrap();
        let a: Vec<f32> = z.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
        let back = c.decode(&c.encode(&img, None).unwrap()).unwrap();
        assert!(back.data.iter().zip(&img.data).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn passthrough_training_is_noop() {
        let (c, rep) = train_codec(
            CodecConfig::passthrough(32),
            &[gradient_image(0)],
            &[gradient_image(1)],
            &CodecTrainConfig::default(),
            "fp",
            None,
        )
        .unwrap();
        assert!(c.params.is_empty());
        assert!(rep.losses.is_empty());
    }

    #[test]
    fn zero_image_gives_finite_latent_and_reconstruction() {
        let c = LatentCodec::init(CodecConfig::default()).unwrap();
        let img = Image::new(32, 32);
        let z = c.encode(&img, Some("zero")).unwrap();
        let v: Vec<f32> = z.tensor.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
        assert_eq!(z.tensor.dims(), &[4, 8, 8]);
        let r = c.decode(&z).unwrap();
        assert!(r.data.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn encode_is_deterministic() {
        let c = LatentCodec::init(CodecConfig::default()).unwrap();
        let img = gradient_image(5);
        let a: Vec<f32> = c.encode(&img, None).unwrap().tensor.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = c.encode(&img, None).unwrap().tensor.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_typed() {
        let c = LatentCodec::init(CodecConfig::default()).unwrap();
        let err = c.encode(&Image::new(16, 16), None).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        let z = Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(c.decode_tensor(&z), Err(Error::Shape { .. })));
    }

    #[test]
    fn config_rejects_non_power_of_two() {
        let cfg = CodecConfig {
            downsample: 3,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn short_training_reduces_loss_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let imgs: Vec<Image> = (0..8).map(gradient_image).collect();
        let path = dir.path().join("codec.safetensors");
        let (codec, rep) = train_codec(
            CodecConfig::default(),
            &imgs,
            &imgs[..2],
            &CodecTrainConfig {
                steps: 40,
                batch_size: 4,
                ..Default::default()
            },
            "fp",
            Some(&path),
        )
        .unwrap();
        assert!(rep.losses.last().unwrap() < &rep.losses[0]);
        let back = LatentCodec::load(&path).unwrap();
        assert_eq!(back.scaling, codec.scaling);
        assert_eq!(back.corpus_fingerprint, "fp");
        assert_eq!(back.params.fingerprint().unwrap(), codec.params.fingerprint().unwrap());
    }
}
