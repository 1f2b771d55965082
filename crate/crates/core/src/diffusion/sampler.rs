use serde::{Deserialize, Serialize};

use super::{cfg_combine, denoise, DenoisingNetwork, DiffusionState, NoiseSchedule, DEFAULT_SIGMA_DATA};
use crate::conditions::ConditionBundle;
use crate::error::{Error, Result};
use crate::media::LatentVolume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub schedule: NoiseSchedule,
    pub guidance_scale: f64,
    pub sigma_data: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { schedule: NoiseSchedule::default(), guidance_scale: 3.0, sigma_data: DEFAULT_SIGMA_DATA }
    }
}

/// Deterministic first-order Euler integration of the probability-flow ODE.
///
/// `initial_noise` is unit-variance and is scaled by the first noise level.
/// At every step the conditional and unconditional (audio and reference
/// zeroed) denoised estimates are combined with classifier-free guidance.
pub fn sample(
    initial_noise: &LatentVolume,
    cond: &ConditionBundle,
    net: &dyn DenoisingNetwork,
    config: &SamplerConfig,
) -> Result<LatentVolume> {
    if !(config.guidance_scale >= 0.0) {
        return Err(Error::InvalidArgument(format!("guidance scale must be nonnegative, got {}", config.guidance_scale)));
    }
    let sigmas = config.schedule.sigmas()?;
    let uncond = (config.guidance_scale != 1.0).then(|| cond.unconditional()).transpose()?;
    let mut z = (&initial_noise.data * sigmas[0])?;
    for (step, pair) in sigmas.windows(2).enumerate() {
        let (sigma, next) = (pair[0], pair[1]);
        let state = DiffusionState { z_t: initial_noise.with_data(z.clone()), sigma, step_index: step };
        let cond_out = denoise(&state, cond, net, config.sigma_data)?.data;
        let denoised = match &uncond {
            Some(u) => cfg_combine(&cond_out, &denoise(&state, u, net, config.sigma_data)?.data, config.guidance_scale)?,
            None => cond_out,
        };
        // dz/dsigma = (z - D) / sigma
        let slope = ((&z - &denoised)? / sigma)?;
        // sampling never backpropagates; dropping the graph keeps memory flat
        z = (&z + (slope * (next - sigma))?)?.detach();
    }
    Ok(initial_noise.with_data(z))
}
