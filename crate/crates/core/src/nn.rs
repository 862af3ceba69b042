//! Named parameter storage and the handful of layer primitives the models are
//! built from. Layers look their weights up by name so that adapters can
//! intercept individual layers without the models knowing about them.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::random::{normal_tensor, uniform_tensor, SeededRng};

/// An ordered map from parameter name to tensor.
#[derive(Debug, Clone, Default)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(|t| t.elem_count()).sum()
    }

    /// Sub-map of tensors whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> Params {
        let tensors = self
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect();
        Params { tensors }
    }

    pub fn with_prefix(&self, prefix: &str) -> Params {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| (format!("{prefix}{k}"), v.clone()))
            .collect();
        Params { tensors }
    }

    pub fn extend(&mut self, other: Params) {
        self.tensors.extend(other.tensors);
    }

    /// Deep copy: the returned tensors do not share storage with `self`, so a
    /// later in-place optimizer update on a `Var` built from them leaves
    /// `self` untouched. The copies carry no autograd history.
    pub fn deep_clone(&self) -> Result<Params> {
        let mut out = Params::new();
        for (k, v) in &self.tensors {
            out.insert(k.clone(), v.copy()?.detach());
        }
        Ok(out)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Params> {
        let mut out = Params::new();
        for (k, v) in &self.tensors {
            out.insert(k.clone(), v.to_dtype(dtype)?);
        }
        Ok(out)
    }

    /// Replaces the tensors selected by `select` with freshly created
    /// variables. Returns the view (sharing storage with the variables) and
    /// the variables themselves, in name order.
    pub fn make_trainable(
        &self,
        select: impl Fn(&str) -> bool,
    ) -> Result<(Params, Vec<(String, Var)>)> {
        let mut view = self.clone();
        let mut vars = Vec::new();
        for (k, v) in &self.tensors {
            if select(k) {
                let var = Var::from_tensor(v)?;
                view.insert(k.clone(), var.as_tensor().clone());
                vars.push((k.clone(), var));
            }
        }
        Ok((view, vars))
    }

    /// SHA-256 over names, shapes and little-endian f32 values.
    pub fn fingerprint(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (k, v) in &self.tensors {
            hasher.update(k.as_bytes());
            for d in v.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            let vals: Vec<f32> = v.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            for x in vals {
                hasher.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    pub fn all_finite(&self) -> Result<bool> {
        for v in self.tensors.values() {
            let vals: Vec<f32> = v.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            if vals.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// How a layer consumes its input; adapters need this to build a matching delta.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    Conv2d { stride: usize, padding: usize },
}

/// Hook through which a low-rank adapter adds its contribution to a layer output.
pub trait LayerHook {
    /// Returns the additive delta for `layer` given the layer input, or `None`
    /// when the layer is not adapted.
    fn delta(&self, layer: &str, kind: LayerKind, x: &Tensor) -> Result<Option<Tensor>>;
}

/// Parameter lookup plus an optional adapter hook.
#[derive(Clone, Copy)]
pub struct Layers<'a> {
    pub params: &'a Params,
    pub hook: Option<&'a dyn LayerHook>,
}

impl<'a> Layers<'a> {
    pub fn new(params: &'a Params) -> Self {
        Self { params, hook: None }
    }

    pub fn with_hook(params: &'a Params, hook: Option<&'a dyn LayerHook>) -> Self {
        Self { params, hook }
    }

    fn w(&self, layer: &str, suffix: &str) -> Result<&'a Tensor> {
        self.params.get(&format!("{layer}.{suffix}"))
    }

    /// `y = x Wᵀ + b` over the last dimension.
    pub fn linear(&self, layer: &str, x: &Tensor) -> Result<Tensor> {
        let w = self.w(layer, "weight")?;
        let b = self.w(layer, "bias")?;
        let mut y = x.broadcast_matmul(&w.t()?)?.broadcast_add(b)?;
        if let Some(hook) = self.hook {
            if let Some(d) = hook.delta(layer, LayerKind::Linear, x)? {
                y = (y + d)?;
            }
        }
        Ok(y)
    }

    pub fn conv2d(&self, layer: &str, x: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let w = self.w(layer, "weight")?;
        let b = self.w(layer, "bias")?;
        let out_c = w.dim(0)?;
        let mut y = x
            .conv2d(w, padding, stride, 1, 1)?
            .broadcast_add(&b.reshape((1, out_c, 1, 1))?)?;
        if let Some(hook) = self.hook {
            if let Some(d) = hook.delta(layer, LayerKind::Conv2d { stride, padding }, x)? {
                y = (y + d)?;
            }
        }
        Ok(y)
    }

    pub fn group_norm(&self, layer: &str, x: &Tensor, groups: usize) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, groups, (c / groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered
            .broadcast_div(&(var + 1e-5)?.sqrt()?)?
            .reshape((b, c, h, w))?;
        let gamma = self.w(layer, "weight")?.reshape((1, c, 1, 1))?;
        let beta = self.w(layer, "bias")?.reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }

    pub fn layer_norm(&self, layer: &str, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        let gamma = self.w(layer, "weight")?;
        let beta = self.w(layer, "bias")?;
        Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
    }
}

/// Seeded initializer that fills a [`Params`] map.
pub struct ParamInit<'r> {
    pub params: Params,
    rng: &'r mut SeededRng,
    dtype: DType,
    device: Device,
}

impl<'r> ParamInit<'r> {
    pub fn new(rng: &'r mut SeededRng, dtype: DType, device: &Device) -> Self {
        Self {
            params: Params::new(),
            rng,
            dtype,
            device: device.clone(),
        }
    }

    pub fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize) -> Result<()> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = uniform_tensor(self.rng, (out_dim, in_dim), bound, self.dtype, &self.device)?;
        let b = Tensor::zeros(out_dim, self.dtype, &self.device)?;
        self.params.insert(format!("{name}.weight"), w);
        self.params.insert(format!("{name}.bias"), b);
        Ok(())
    }

    pub fn conv(&mut self, name: &str, in_c: usize, out_c: usize, k: usize) -> Result<()> {
        let bound = 1.0 / ((in_c * k * k) as f64).sqrt();
        let w = uniform_tensor(self.rng, (out_c, in_c, k, k), bound, self.dtype, &self.device)?;
        let b = Tensor::zeros(out_c, self.dtype, &self.device)?;
        self.params.insert(format!("{name}.weight"), w);
        self.params.insert(format!("{name}.bias"), b);
        Ok(())
    }

    /// Zero-initialized conv, used for residual output projections.
    pub fn conv_zero(&mut self, name: &str, in_c: usize, out_c: usize, k: usize) -> Result<()> {
        let w = Tensor::zeros((out_c, in_c, k, k), self.dtype, &self.device)?;
        let b = Tensor::zeros(out_c, self.dtype, &self.device)?;
        self.params.insert(format!("{name}.weight"), w);
        self.params.insert(format!("{name}.bias"), b);
        Ok(())
    }

    pub fn norm(&mut self, name: &str, c: usize) -> Result<()> {
        self.params.insert(
            format!("{name}.weight"),
            Tensor::ones(c, self.dtype, &self.device)?,
        );
        self.params.insert(
            format!("{name}.bias"),
            Tensor::zeros(c, self.dtype, &self.device)?,
        );
        Ok(())
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let t = normal_tensor(self.rng, shape, std, self.dtype, &self.device)?;
        self.params.insert(name, t);
        Ok(())
    }

    pub fn finish(self) -> Params {
        self.params
    }
}

/// Sinusoidal embedding of integer timesteps, shape (len(t), dim).
pub fn timestep_embedding(t: &[f64], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &tv in t {
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            data.push((tv * freq).sin() as f32);
        }
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            data.push((tv * freq).cos() as f32);
        }
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), device)?.to_dtype(dtype)?)
}

/// Mean squared error over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
