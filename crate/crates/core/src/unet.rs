//! Compact U-shaped noise predictor with one down, one mid and one up block,
//! timestep conditioning and cross-attention to the prompt embeddings.
//!
//! Layer names are grouped by prefix (`down.`, `mid.`, `up.`); adapters use
//! these prefixes to decide where they attach.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{timestep_embedding, LayerHook, Layers, ParamInit, Params};
use crate::random::rng_from_seed;
use crate::text::CondBatch;

/// Anything that predicts the injected noise from a noised sample.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Tensor, t: &[usize], cond: &CondBatch) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub channels: usize,
    pub mid_channels: usize,
    pub time_dim: usize,
    pub text_dim: usize,
    pub groups: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            channels: 32,
            mid_channels: 64,
            time_dim: 64,
            text_dim: 32,
            groups: 8,
            seed: 0,
        }
    }
}

/// Block a layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Down,
    Mid,
    Up,
    Other,
}

impl Block {
    pub fn of(layer: &str) -> Block {
        if layer.starts_with("down.") {
            Block::Down
        } else if layer.starts_with("mid.") {
            Block::Mid
        } else if layer.starts_with("up.") {
            Block::Up
        } else {
            Block::Other
        }
    }
}

/// Shape facts about a weight-bearing layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Kernel size for convolutions, `None` for linear layers.
    pub kernel: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
}

const SINUSOID_DIM: usize = 32;

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        if config.channels % config.groups != 0 || config.mid_channels % config.groups != 0 {
            return Err(Error::Config("channel counts must be divisible by groups".into()));
        }
        Ok(Self { config })
    }

    pub fn init_params(&self, dtype: DType, device: &Device) -> Result<Params> {
        let c = &self.config;
        let mut rng = rng_from_seed(c.seed);
        let mut p = ParamInit::new(&mut rng, dtype, device);
        let (ch, mid, td, txt) = (c.channels, c.mid_channels, c.time_dim, c.text_dim);
        p.linear("time.l1", SINUSOID_DIM, td)?;
        p.linear("time.l2", td, td)?;
        p.conv("conv_in", c.in_channels, ch, 3)?;
        res_params(&mut p, "down.0.res", ch, ch, td)?;
        attn_params(&mut p, "down.0.attn", ch, txt)?;
        p.conv("down.0.down", ch, mid, 3)?;
        res_params(&mut p, "mid.res", mid, mid, td)?;
        attn_params(&mut p, "mid.attn", mid, txt)?;
        p.conv("up.0.upconv", mid, mid, 3)?;
        res_params(&mut p, "up.0.res", mid + ch, ch, td)?;
        attn_params(&mut p, "up.0.attn", ch, txt)?;
        p.norm("up.0.ff.norm", ch)?;
        p.linear("up.0.ff.l1", ch, 2 * ch)?;
        p.linear("up.0.ff.l2", 2 * ch, ch)?;
        p.norm("out.norm", ch)?;
        p.conv("out.conv", ch, c.in_channels, 3)?;
        Ok(p.finish())
    }

    /// Linear and convolution layers (norms excluded), in name order.
    pub fn weight_layers(params: &Params) -> Vec<LayerInfo> {
        params
            .iter()
            .filter_map(|(name, t)| {
                let layer = name.strip_suffix(".weight")?;
                match t.dims() {
                    [out, inp] => Some(LayerInfo {
                        name: layer.to_string(),
                        in_dim: *inp,
                        out_dim: *out,
                        kernel: None,
                    }),
                    [out, inp, k, _] => Some(LayerInfo {
                        name: layer.to_string(),
                        in_dim: *inp,
                        out_dim: *out,
                        kernel: Some(*k),
                    }),
                    _ => None,
                }
            })
            .collect()
    }

    pub fn forward(
        &self,
        layers: Layers<'_>,
        x: &Tensor,
        t: &[usize],
        cond: &CondBatch,
    ) -> Result<Tensor> {
        let c = &self.config;
        let (b, cin, h, w) = x.dims4()?;
        if cin != c.in_channels || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape {
                expected: format!("(B, {}, even H, even W)", c.in_channels),
                got: format!("{:?}", x.dims()),
            });
        }
        if t.len() != b || cond.batch_size()? != b {
            return Err(Error::Shape {
                expected: format!("{b} timesteps and conditionings"),
                got: format!("{} timesteps, {} conditionings", t.len(), cond.batch_size()?),
            });
        }
        let tf: Vec<f64> = t.iter().map(|v| *v as f64).collect();
        let temb = timestep_embedding(&tf, SINUSOID_DIM, x.dtype(), x.device())?;
        let temb = layers.linear("time.l1", &temb)?.silu()?;
        let temb = layers.linear("time.l2", &temb)?.silu()?;

        let g = c.groups;
        let h0 = layers.conv2d("conv_in", x, 1, 1)?;
        let h1 = res_block(&layers, "down.0.res", &h0, &temb, g)?;
        let skip = cross_attention(&layers, "down.0.attn", &h1, cond, g)?;
        let hd = layers.conv2d("down.0.down", &skip, 2, 1)?;
        let hm = res_block(&layers, "mid.res", &hd, &temb, g)?;
        let hm = cross_attention(&layers, "mid.attn", &hm, cond, g)?;
        let hu = hm.upsample_nearest2d(h, w)?;
        let hu = layers.conv2d("up.0.upconv", &hu, 1, 1)?;
        let hu = Tensor::cat(&[hu, skip], 1)?;
        let hu = res_block(&layers, "up.0.res", &hu, &temb, g)?;
        let hu = cross_attention(&layers, "up.0.attn", &hu, cond, g)?;
        // pointwise feed-forward over channels
        let n = layers.group_norm("up.0.ff.norm", &hu, g)?;
        let tokens = n.flatten_from(2)?.transpose(1, 2)?;
        let ff = layers.linear("up.0.ff.l1", &tokens)?.gelu()?;
        let ff = layers.linear("up.0.ff.l2", &ff)?;
        let ff = ff.transpose(1, 2)?.reshape(hu.dims())?;
        let hu = (hu + ff)?;
        let out = layers.group_norm("out.norm", &hu, g)?.silu()?;
        layers.conv2d("out.conv", &out, 1, 1)
    }
}

fn res_params(p: &mut ParamInit<'_>, name: &str, cin: usize, cout: usize, td: usize) -> Result<()> {
    p.norm(&format!("{name}.norm1"), cin)?;
    p.conv(&format!("{name}.conv1"), cin, cout, 3)?;
    p.linear(&format!("{name}.temb"), td, cout)?;
    p.norm(&format!("{name}.norm2"), cout)?;
    p.conv(&format!("{name}.conv2"), cout, cout, 3)?;
    if cin != cout {
        p.conv(&format!("{name}.skip"), cin, cout, 1)?;
    }
    Ok(())
}

fn attn_params(p: &mut ParamInit<'_>, name: &str, ch: usize, txt: usize) -> Result<()> {
    p.norm(&format!("{name}.norm"), ch)?;
    p.linear(&format!("{name}.q"), ch, ch)?;
    p.linear(&format!("{name}.k"), txt, ch)?;
    p.linear(&format!("{name}.v"), txt, ch)?;
    p.linear(&format!("{name}.o"), ch, ch)?;
    Ok(())
}

fn res_block(layers: &Layers<'_>, name: &str, x: &Tensor, temb: &Tensor, groups: usize) -> Result<Tensor> {
    let h = layers.group_norm(&format!("{name}.norm1"), x, groups)?.silu()?;
    let h = layers.conv2d(&format!("{name}.conv1"), &h, 1, 1)?;
    let tproj = layers.linear(&format!("{name}.temb"), temb)?;
    let (b, c) = tproj.dims2()?;
    let h = h.broadcast_add(&tproj.reshape((b, c, 1, 1))?)?;
    let h = layers.group_norm(&format!("{name}.norm2"), &h, groups)?.silu()?;
    let h = layers.conv2d(&format!("{name}.conv2"), &h, 1, 1)?;
    let skip_name = format!("{name}.skip");
    let skip = if layers.params.contains(&format!("{skip_name}.weight")) {
        layers.conv2d(&skip_name, x, 1, 0)?
    } else {
        x.clone()
    };
    Ok((skip + h)?)
}

fn cross_attention(
    layers: &Layers<'_>,
    name: &str,
    x: &Tensor,
    cond: &CondBatch,
    groups: usize,
) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let n = layers.group_norm(&format!("{name}.norm"), x, groups)?;
    let tokens = n.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
    let q = layers.linear(&format!("{name}.q"), &tokens)?;
    let ctx = cond.context.to_dtype(x.dtype())?;
    let k = layers.linear(&format!("{name}.k"), &ctx)?;
    let v = layers.linear(&format!("{name}.v"), &ctx)?;
    let scores = (q.matmul(&k.t()?)? / (c as f64).sqrt())?;
    // padding tokens get a large negative bias
    let bias = ((cond.mask.to_dtype(x.dtype())? - 1.0)? * 1e9)?.unsqueeze(1)?;
    let att = candle_nn::ops::softmax(&scores.broadcast_add(&bias)?, D::Minus1)?;
    let out = layers.linear(&format!("{name}.o"), &att.matmul(&v)?)?;
    let out = out.transpose(1, 2)?.reshape((b, c, h, w))?;
    Ok((x + out)?)
}

/// Binds a denoiser to a parameter set and an optional adapter hook.
pub struct BoundDenoiser<'a> {
    pub model: &'a Denoiser,
    pub params: &'a Params,
    pub hook: Option<&'a dyn LayerHook>,
}

impl NoisePredictor for BoundDenoiser<'_> {
    fn predict(&self, x_t: &Tensor, t: &[usize], cond: &CondBatch) -> Result<Tensor> {
        self.model
            .forward(Layers::with_hook(self.params, self.hook), x_t, t, cond)
    }
}

/// Tiny two-layer noise predictor used for gradient verification:
/// `eps = W2 · tanh(W1 · [x, mean(context), t/T] + b1) + b2` on flat latents.
pub struct ToyDenoiser<'a> {
    pub params: &'a Params,
    pub max_t: usize,
}

impl ToyDenoiser<'_> {
    pub fn init(latent_dim: usize, text_dim: usize, hidden: usize, dtype: DType, seed: u64) -> Result<Params> {
        let mut rng = rng_from_seed(seed);
        let mut p = ParamInit::new(&mut rng, dtype, &Device::Cpu);
        p.linear("l1", latent_dim + text_dim + 1, hidden)?;
        p.linear("l2", hidden, latent_dim)?;
        // non-zero biases so every parameter has a generic gradient
        let mut params = p.finish();
        let b1 = params.get("l1.bias")?.ones_like()?.affine(0.1, 0.0)?;
        params.insert("l1.bias", b1);
        let b2 = params.get("l2.bias")?.ones_like()?.affine(-0.05, 0.0)?;
        params.insert("l2.bias", b2);
        Ok(params)
    }
}

impl NoisePredictor for ToyDenoiser<'_> {
    fn predict(&self, x_t: &Tensor, t: &[usize], cond: &CondBatch) -> Result<Tensor> {
        let (b, _) = x_t.dims2()?;
        let ctx = cond.context.to_dtype(x_t.dtype())?;
        let mask = cond.mask.to_dtype(x_t.dtype())?;
        let pooled = ctx
            .broadcast_mul(&mask.unsqueeze(2)?)?
            .sum(1)?
            .broadcast_div(&mask.sum_keepdim(1)?)?;
        let tt: Vec<f64> = t.iter().map(|v| *v as f64 / self.max_t as f64).collect();
        let tt = Tensor::new(tt, x_t.device())?.to_dtype(x_t.dtype())?.reshape((b, 1))?;
        let inp = Tensor::cat(&[x_t, &pooled, &tt], 1)?;
        let layers = Layers::new(self.params);
        let h = layers.linear("l1", &inp)?.tanh()?;
        layers.linear("l2", &h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::normal_tensor;

    fn cond(b: usize, l: usize, d: usize) -> CondBatch {
        let mut rng = rng_from_seed(11);
        let context = normal_tensor(&mut rng, (b, l, d), 1.0, DType::F32, &Device::Cpu).unwrap();
        let mut m = vec![1f32; b * l];
        for r in 0..b {
            m[r * l + l - 1] = 0.0;
        }
        let mask = Tensor::from_vec(m, (b, l), &Device::Cpu).unwrap();
        CondBatch { context, mask }
    }

    #[test]
    fn output_shape_matches_input() {
        let d = Denoiser::new(DenoiserConfig::default()).unwrap();
        let p = d.init_params(DType::F32, &Device::Cpu).unwrap();
        let x = normal_tensor(&mut rng_from_seed(1), (2, 4, 8, 8), 1.0, DType::F32, &Device::Cpu).unwrap();
        let y = d.forward(Layers::new(&p), &x, &[10, 900], &cond(2, 5, 32)).unwrap();
        assert_eq!(y.dims(), x.dims());
    }

    #[test]
    fn padding_tokens_are_ignored() {
        let d = Denoiser::new(DenoiserConfig::default()).unwrap();
        let p = d.init_params(DType::F32, &Device::Cpu).unwrap();
        let x = normal_tensor(&mut rng_from_seed(1), (1, 4, 8, 8), 1.0, DType::F32, &Device::Cpu).unwrap();
        let c = cond(1, 5, 32);
        let y1: Vec<f32> = d.forward(Layers::new(&p), &x, &[100], &c).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        // overwrite the padded row with garbage
        let ctx = c.context.slice_assign(&[0..1, 4..5, 0..32], &Tensor::ones((1, 1, 32), DType::F32, &Device::Cpu).unwrap().affine(50.0, 0.0).unwrap()).unwrap();
        let c2 = CondBatch { context: ctx, mask: c.mask.clone() };
        let y2: Vec<f32> = d.forward(Layers::new(&p), &x, &[100], &c2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for (a, b) in y1.iter().zip(&y2) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn block_groups_cover_up_layers() {
        let d = Denoiser::new(DenoiserConfig::default()).unwrap();
        let p = d.init_params(DType::F32, &Device::Cpu).unwrap();
        let layers = Denoiser::weight_layers(&p);
        let up: Vec<_> = layers.iter().filter(|l| Block::of(&l.name) == Block::Up).collect();
        assert!(up.iter().any(|l| l.kernel.is_some()));
        assert!(up.iter().any(|l| l.name.ends_with("attn.k")));
        assert!(up.iter().any(|l| l.name.contains(".ff.")));
        assert!(layers.iter().all(|l| !l.name.contains("norm")));
    }

    #[test]
    fn toy_denoiser_is_small() {
        let p = ToyDenoiser::init(2, 2, 4, DType::F64, 0).unwrap();
        assert!(p.num_elements() <= 50);
    }

    #[test]
    fn bad_input_shape_is_rejected() {
        let d = Denoiser::new(DenoiserConfig::default()).unwrap();
        let p = d.init_params(DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            d.forward(Layers::new(&p), &x, &[1], &cond(1, 3, 32)),
            Err(Error::Shape { .. })
        ));
    }
}
