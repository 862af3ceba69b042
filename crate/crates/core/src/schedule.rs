//! Variance schedule and the closed-form forward (noising) process.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// Linear-β schedule over timesteps `1..=T`; timestep 0 is the clean sample
/// (ᾱ₀ = 1).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    /// β_t for t = 1..=T, stored at index t − 1.
    beta: Vec<f64>,
    /// ᾱ_t for t = 0..=T.
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let t = config.steps;
        if t == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(config.beta_start > 0.0
            && config.beta_end < 1.0
            && config.beta_start <= config.beta_end)
        {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < start <= end < 1, got {}..{}",
                config.beta_start, config.beta_end
            )));
        }
        let beta: Vec<f64> = (0..t)
            .map(|i| {
                if t == 1 {
                    config.beta_start
                } else {
                    config.beta_start
                        + (config.beta_end - config.beta_start) * i as f64 / (t - 1) as f64
                }
            })
            .collect();
        let alpha_bar = cumulative_alpha_bar(&beta);
        Ok(Self {
            config,
            beta,
            alpha_bar,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    /// T, the largest timestep.
    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        if t == 0 {
            return Ok(0.0);
        }
        Ok(self.beta[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bar[t])
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t > self.config.steps {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.config.steps,
            });
        }
        Ok(())
    }

    /// DDIM timestep grid from T down to T/steps (inclusive), evenly spaced.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.config.steps;
        if steps == 0 || steps > t {
            return Err(Error::Config(format!(
                "sampling steps must be in 1..={t}, got {steps}"
            )));
        }
        let mut ts: Vec<usize> = (1..=steps)
            .rev()
            .map(|i| ((i * t) as f64 / steps as f64).round() as usize)
            .collect();
        ts.dedup();
        Ok(ts)
    }
}

/// ᾱ_t = Π_{s ≤ t} (1 − β_s), with ᾱ₀ = 1.
pub fn cumulative_alpha_bar(beta: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(beta.len() + 1);
    let mut acc = 1.0;
    out.push(acc);
    for b in beta {
        acc *= 1.0 - b;
        out.push(acc);
    }
    out
}

/// A noised sample together with the noise that produced it.
#[derive(Debug, Clone)]
pub struct NoisedSample {
    pub x_t: Tensor,
    pub t: usize,
    pub eps: Tensor,
}

/// `x_t = sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·eps`.
pub fn forward_diffuse(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<NoisedSample> {
    if x0.dims() != eps.dims() {
        return Err(Error::Shape {
            expected: format!("{:?}", x0.dims()),
            got: format!("{:?}", eps.dims()),
        });
    }
    let ab = schedule.alpha_bar(t)?;
    let x_t = ((x0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?;
    Ok(NoisedSample {
        x_t,
        t,
        eps: eps.clone(),
    })
}

/// Per-row forward diffusion for a batch with one timestep per row.
pub fn forward_diffuse_batch(
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let b = x0.dim(0)?;
    if ts.len() != b || x0.dims() != eps.dims() {
        return Err(Error::Shape {
            expected: format!("{} timesteps and matching noise", b),
            got: format!("{} timesteps, noise {:?}", ts.len(), eps.dims()),
        });
    }
    let mut a = Vec::with_capacity(b);
    let mut s = Vec::with_capacity(b);
    for &t in ts {
        let ab = schedule.alpha_bar(t)?;
        a.push(ab.sqrt());
        s.push((1.0 - ab).sqrt());
    }
    let mut shape = vec![b];
    shape.extend(std::iter::repeat_n(1, x0.rank() - 1));
    let a = Tensor::new(a, x0.device())?.to_dtype(x0.dtype())?.reshape(shape.as_slice())?;
    let s = Tensor::new(s, x0.device())?.to_dtype(x0.dtype())?.reshape(shape.as_slice())?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use proptest::prelude::*;

    #[test]
    fn default_schedule_invariants() {
        let s = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
        assert_eq!(s.alpha_bars().len(), 1001);
        assert!(s.alpha_bar(0).unwrap() >= 0.99);
        assert!(s.betas().iter().all(|b| *b > 0.0));
        assert!(s.betas().windows(2).all(|w| w[0] <= w[1]));
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(1000).unwrap() < 1e-3);
        let recomputed = cumulative_alpha_bar(s.betas());
        for (a, b) in recomputed.iter().zip(s.alpha_bars()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn out_of_range_timestep_is_typed_error() {
        let s = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
        let x = Tensor::zeros(4, DType::F32, &Device::Cpu).unwrap();
        let err = forward_diffuse(&x, 1001, &x, &s).unwrap_err();
        assert!(matches!(err, Error::TimestepOutOfRange { t: 1001, max: 1000 }));
    }

    #[test]
    fn endpoints_of_forward_process() {
        let s = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
        let x0 = Tensor::new(&[1.0f64, -2.0, 0.5, 3.0], &Device::Cpu).unwrap();
        let eps = Tensor::new(&[0.3f64, -1.1, 2.0, 0.1], &Device::Cpu).unwrap();
        let at0: Vec<f64> = forward_diffuse(&x0, 0, &eps, &s).unwrap().x_t.to_vec1().unwrap();
        let inf = 3.0;
        for (a, b) in at0.iter().zip([1.0, -2.0, 0.5, 3.0]) {
            assert!((a - b).abs() <= 1e-2 * inf);
        }
        let at_t: Vec<f64> = forward_diffuse(&x0, 1000, &eps, &s).unwrap().x_t.to_vec1().unwrap();
        for (a, b) in at_t.iter().zip([0.3, -1.1, 2.0, 0.1]) {
            assert!((a - b).abs() < 0.03);
        }
    }

    #[test]
    fn ddim_grid_is_descending_and_bounded() {
        let s = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
        let g = s.ddim_timesteps(50).unwrap();
        assert_eq!(g.len(), 50);
        assert_eq!(g[0], 1000);
        assert_eq!(*g.last().unwrap(), 20);
        assert!(g.contains(&800));
        assert!(s.ddim_timesteps(0).is_err());
        assert!(s.ddim_timesteps(1001).is_err());
    }

    proptest! {
        #[test]
        fn any_linear_schedule_is_monotone(start in 1e-5f64..1e-2, span in 0f64..0.5, steps in 1usize..400) {
            let s = NoiseSchedule::new(ScheduleConfig { steps, beta_start: start, beta_end: start + span }).unwrap();
            prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            prop_assert!(s.alpha_bars().iter().all(|a| *a > 0.0 && *a <= 1.0));
        }
    }
}
