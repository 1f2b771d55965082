//! EDM-preconditioned conditional denoising.
//!
//! The learnable network `F` is wrapped as
//! `D(z_t; sigma) = c_skip * z_t + c_out * F(c_in * z_t, cond; c_noise)` and
//! trained by regressing `D` onto the clean latent with a `lambda(sigma)`
//! weighted squared error.

mod sampler;

pub use sampler::{sample, SamplerConfig};

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conditions::ConditionBundle;
use crate::error::{Error, Result};
use crate::media::LatentVolume;
use crate::registry::{Options, OptionsExt, Registry};

pub const DEFAULT_SIGMA_DATA: f64 = 0.5;

/// The conditional network `F` inside the preconditioned denoiser.
pub trait DenoisingNetwork {
    /// `scaled_noisy` is `c_in(sigma) * z_t`; returns a tensor of the same shape.
    fn forward(&self, scaled_noisy: &Tensor, cond: &ConditionBundle, c_noise: f64) -> Result<Tensor>;
}

impl<T: DenoisingNetwork + ?Sized> DenoisingNetwork for &T {
    fn forward(&self, scaled_noisy: &Tensor, cond: &ConditionBundle, c_noise: f64) -> Result<Tensor> {
        (**self).forward(scaled_noisy, cond, c_noise)
    }
}

impl<T: DenoisingNetwork + ?Sized> DenoisingNetwork for Box<T> {
    fn forward(&self, scaled_noisy: &Tensor, cond: &ConditionBundle, c_noise: f64) -> Result<Tensor> {
        (**self).forward(scaled_noisy, cond, c_noise)
    }
}

/// Network that always predicts zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNetwork;

impl DenoisingNetwork for ZeroNetwork {
    fn forward(&self, scaled_noisy: &Tensor, _cond: &ConditionBundle, _c_noise: f64) -> Result<Tensor> {
        Ok(scaled_noisy.zeros_like()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreconditionCoeffs {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn precondition(sigma: f64, sigma_data: f64) -> Result<PreconditionCoeffs> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidSigma(sigma));
    }
    if !(sigma_data > 0.0) || !sigma_data.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma_data must be positive, got {sigma_data}")));
    }
    let sd2 = sigma_data * sigma_data;
    let denom = sigma * sigma + sd2;
    Ok(PreconditionCoeffs {
        c_skip: sd2 / denom,
        c_out: sigma * sigma_data / denom.sqrt(),
        c_in: 1.0 / denom.sqrt(),
        c_noise: 0.25 * sigma.ln(),
    })
}

/// Inverse of `c_noise`: recovers sigma from the network's noise input.
pub fn sigma_from_c_noise(c_noise: f64) -> f64 {
    (4.0 * c_noise).exp()
}

#[derive(Debug, Clone)]
pub struct DiffusionState {
    pub z_t: LatentVolume,
    pub sigma: f64,
    pub step_index: usize,
}

/// Karras-style sampling schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub num_steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { sigma_min: 0.002, sigma_max: 80.0, rho: 7.0, num_steps: 15 }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) || !self.sigma_max.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.num_steps == 0 {
            return Err(Error::InvalidArgument("num_steps must be at least 1".into()));
        }
        if !(self.rho > 0.0) {
            return Err(Error::InvalidArgument(format!("rho must be positive, got {}", self.rho)));
        }
        Ok(())
    }

    /// `num_steps` strictly decreasing noise levels followed by a final 0.
    pub fn sigmas(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let n = self.num_steps;
        let inv = 1.0 / self.rho;
        let (hi, lo) = (self.sigma_max.powf(inv), self.sigma_min.powf(inv));
        let mut out: Vec<f64> = (0..n)
            .map(|i| {
                let t = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
                (hi + t * (lo - hi)).powf(self.rho)
            })
            .collect();
        out.push(0.0);
        Ok(out)
    }
}

/// Log-normal distribution of training noise levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SigmaDistribution {
    pub log_mean: f64,
    pub log_std: f64,
}

impl Default for SigmaDistribution {
    fn default() -> Self {
        Self { log_mean: -1.2, log_std: 1.2 }
    }
}

impl SigmaDistribution {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        (self.log_mean + self.log_std * z).exp()
    }
}

/// The `lambda(sigma)` factor of the training objective.
pub trait LossWeighting: Send + Sync {
    fn name(&self) -> &str;
    fn weight(&self, sigma: f64, sigma_data: f64) -> f64;
}

/// `(sigma^2 + sigma_data^2) / (sigma * sigma_data)^2`, which gives unit
/// effective weight on the network output.
#[derive(Debug, Clone, Copy, Default)]
pub struct EdmWeighting;

impl LossWeighting for EdmWeighting {
    fn name(&self) -> &str {
        "edm"
    }

    fn weight(&self, sigma: f64, sigma_data: f64) -> f64 {
        (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantWeighting(pub f64);

impl LossWeighting for ConstantWeighting {
    fn name(&self) -> &str {
        "constant"
    }

    fn weight(&self, _sigma: f64, _sigma_data: f64) -> f64 {
        self.0
    }
}

pub fn builtin_loss_weightings() -> Registry<dyn LossWeighting> {
    let mut reg: Registry<dyn LossWeighting> = Registry::new("loss weighting");
    reg.register("edm", |_| Ok(Box::new(EdmWeighting)));
    reg.register("constant", |opts: &Options| {
        let w = opts.f64_or("value", 1.0)?;
        if !(w > 0.0) {
            return Err(Error::InvalidArgument("constant loss weight must be positive".into()));
        }
        Ok(Box::new(ConstantWeighting(w)))
    });
    reg
}

/// I.i.d. standard normal tensor drawn from `rng`.
pub fn gaussian<R: Rng + ?Sized>(dims: &[usize], dtype: DType, rng: &mut R) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let data: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, dims, &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// `z_t = z_0 + n` with `n ~ N(0, sigma^2)`; returns `(z_t, n)`.
pub fn add_noise<R: Rng + ?Sized>(z0: &LatentVolume, sigma: f64, rng: &mut R) -> Result<(LatentVolume, LatentVolume)> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidSigma(sigma));
    }
    let n = (gaussian(z0.dims(), z0.data.dtype(), rng)? * sigma)?;
    let z_t = (&z0.data + &n)?;
    Ok((z0.with_data(z_t), z0.with_data(n)))
}

/// The preconditioned denoiser `D(z_t; sigma, cond)`.
pub fn denoise(state: &DiffusionState, cond: &ConditionBundle, net: &dyn DenoisingNetwork, sigma_data: f64) -> Result<LatentVolume> {
    let z_t = &state.z_t.data;
    if cond.masked_latents.dims() != z_t.dims() {
        return Err(Error::shape(format!(
            "masked latents {:?} not aligned with noisy latents {:?}",
            cond.masked_latents.dims(),
            z_t.dims()
        )));
    }
    let c = precondition(state.sigma, sigma_data)?;
    let f = net.forward(&(z_t * c.c_in)?, cond, c.c_noise)?;
    if f.dims() != z_t.dims() {
        return Err(Error::shape(format!("network output {:?} differs from input {:?}", f.dims(), z_t.dims())));
    }
    let out = ((z_t * c.c_skip)? + (f * c.c_out)?)?;
    Ok(state.z_t.with_data(out))
}

/// `lambda(sigma) * mean((D(z_t) - z_0)^2)`, as a differentiable scalar tensor.
pub fn dsm_loss(
    z0: &LatentVolume,
    state: &DiffusionState,
    cond: &ConditionBundle,
    net: &dyn DenoisingNetwork,
    weighting: &dyn LossWeighting,
    sigma_data: f64,
) -> Result<Tensor> {
    let pred = denoise(state, cond, net, sigma_data)?;
    let lambda = weighting.weight(state.sigma, sigma_data);
    Ok(((pred.data - &z0.data)?.sqr()?.mean_all()? * lambda)?)
}

/// `uncond + scale * (cond - uncond)`.
pub fn cfg_combine(cond_out: &Tensor, uncond_out: &Tensor, scale: f64) -> Result<Tensor> {
    if cond_out.dims() != uncond_out.dims() {
        return Err(Error::shape(format!("cfg inputs {:?} vs {:?}", cond_out.dims(), uncond_out.dims())));
    }
    Ok((uncond_out + ((cond_out - uncond_out)? * scale)?)?)
}

#[cfg(test)]
mod tests;
