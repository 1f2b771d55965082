use candle_core::{DType, Device, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::conditions::ConditionBundle;

fn vol(data: Vec<f64>, dims: &[usize]) -> LatentVolume {
    LatentVolume::new(Tensor::from_vec(data, dims, &Device::Cpu).unwrap(), 1).unwrap()
}

fn bundle_for(z: &LatentVolume) -> ConditionBundle {
    ConditionBundle::latents_only(z.with_data(z.data.zeros_like().unwrap()))
}

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

/// Algebraic inverse of the preconditioned wrapper: makes `D` return `z0`.
struct OracleNet {
    z0: Tensor,
    sigma_data: f64,
}

impl DenoisingNetwork for OracleNet {
    fn forward(&self, x: &Tensor, _cond: &ConditionBundle, c_noise: f64) -> Result<Tensor> {
        let sigma = sigma_from_c_noise(c_noise);
        let c = precondition(sigma, self.sigma_data)?;
        let z_t = (x / c.c_in)?;
        Ok(((&self.z0 - (z_t * c.c_skip)?)? / c.c_out)?)
    }
}

/// `F(x) = w * x` with a single trainable scalar.
struct ScaleNet {
    w: Var,
}

impl DenoisingNetwork for ScaleNet {
    fn forward(&self, x: &Tensor, _cond: &ConditionBundle, _c_noise: f64) -> Result<Tensor> {
        Ok(x.broadcast_mul(self.w.as_tensor())?)
    }
}

#[test]
fn coefficients_at_sigma_data() {
    let c = precondition(0.5, 0.5).unwrap();
    // sigma = sigma_d = s: c_skip = s^2/(2 s^2), c_out = s^2/(s sqrt 2), c_in = 1/(s sqrt 2)
    assert!((c.c_skip - 0.5).abs() < 1e-15);
    assert!((c.c_out - 0.5 / 2f64.sqrt()).abs() < 1e-15);
    assert!((c.c_in - 1.0 / (0.5 * 2f64.sqrt())).abs() < 1e-15);
    assert!((c.c_noise - 0.25 * 0.5f64.ln()).abs() < 1e-15);
}

#[test]
fn zero_noise_limit() {
    let c = precondition(1e-9, 0.5).unwrap();
    assert!((c.c_skip - 1.0).abs() < 1e-12);
    assert!(c.c_out.abs() < 1e-8);
}

#[test]
fn nonpositive_sigma_is_rejected() {
    for s in [0.0, -1.0, f64::NAN] {
        assert!(matches!(precondition(s, 0.5), Err(Error::InvalidSigma(_))));
    }
}

#[test]
fn c_in_identity_at_random_sigmas() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dist = SigmaDistribution { log_mean: 0.0, log_std: 2.0 };
    for _ in 0..100 {
        let s = dist.sample(&mut rng);
        let c = precondition(s, 0.5).unwrap();
        assert!((c.c_in * c.c_in * (s * s + 0.25) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn add_noise_zero_sigma_is_exact() {
    let z0 = vol((0..16).map(|i| i as f64 * 0.1).collect(), &[1, 1, 4, 4]);
    let (z_t, _) = add_noise(&z0, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(values(&z_t.data), values(&z0.data));
}

#[test]
fn add_noise_std_matches_sigma() {
    let z0 = LatentVolume::new(Tensor::zeros((10, 10, 100, 100), DType::F32, &Device::Cpu).unwrap(), 1).unwrap();
    let sigma = 0.7;
    let (z_t, n) = add_noise(&z0, sigma, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let v = values(&n.data);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    assert!((std / sigma - 1.0).abs() < 0.01, "std {std}");
    assert_eq!(values(&z_t.data), v);
}

#[test]
fn add_noise_is_seeded() {
    let z0 = vol(vec![0.0; 8], &[1, 2, 2, 2]);
    let a = add_noise(&z0, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap().1;
    let b = add_noise(&z0, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap().1;
    assert_eq!(values(&a.data), values(&b.data));
}

#[test]
fn zero_net_returns_skip_scaled_input() {
    let z = vol(vec![1.0, -2.0, 3.0, 0.5], &[1, 1, 2, 2]);
    let state = DiffusionState { z_t: z.clone(), sigma: 1.3, step_index: 0 };
    let out = denoise(&state, &bundle_for(&z), &ZeroNetwork, 0.5).unwrap();
    let c_skip = 0.25 / (1.3f64 * 1.3 + 0.25);
    for (o, x) in values(&out.data).iter().zip(values(&z.data)) {
        assert!((o - c_skip * x).abs() < 1e-12);
    }
}

#[test]
fn oracle_net_recovers_clean_latent() {
    let z0 = vol(vec![0.3, -0.1, 0.8, 0.0], &[1, 1, 2, 2]);
    let z_t = vol(vec![1.0, 2.0, -3.0, 0.25], &[1, 1, 2, 2]);
    let net = OracleNet { z0: z0.data.clone(), sigma_data: 0.5 };
    for sigma in [0.01, 0.5, 7.0] {
        let state = DiffusionState { z_t: z_t.clone(), sigma, step_index: 0 };
        let out = denoise(&state, &bundle_for(&z0), &net, 0.5).unwrap();
        for (a, b) in values(&out.data).iter().zip(values(&z0.data)) {
            assert!((a - b).abs() < 1e-12);
        }
        let loss = dsm_loss(&z0, &state, &bundle_for(&z0), &net, &EdmWeighting, 0.5).unwrap();
        assert!(loss.to_scalar::<f64>().unwrap().abs() < 1e-20);
    }
}

#[test]
fn misaligned_condition_is_shape_mismatch() {
    let z = vol(vec![0.0; 4], &[1, 1, 2, 2]);
    let other = vol(vec![0.0; 8], &[1, 2, 2, 2]);
    let state = DiffusionState { z_t: z, sigma: 1.0, step_index: 0 };
    let err = denoise(&state, &ConditionBundle::latents_only(other), &ZeroNetwork, 0.5).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch(_)));
}

#[test]
fn dsm_gradient_matches_finite_differences() {
    let z0 = vol(vec![0.2, -0.4, 0.9, 0.1], &[1, 1, 2, 2]);
    let z_t = vol(vec![0.7, -1.1, 1.5, -0.3], &[1, 1, 2, 2]);
    let state = DiffusionState { z_t, sigma: 0.8, step_index: 0 };
    let cond = bundle_for(&z0);
    let loss_at = |w: f64| -> (f64, Option<f64>) {
        let net = ScaleNet { w: Var::from_tensor(&Tensor::new(&[w], &Device::Cpu).unwrap()).unwrap() };
        let loss = dsm_loss(&z0, &state, &cond, &net, &EdmWeighting, 0.5).unwrap();
        let grad = loss.backward().unwrap().get(net.w.as_tensor()).map(|g| values(g)[0]);
        (loss.to_scalar::<f64>().unwrap(), grad)
    };
    for w in [-0.6, 0.3, 1.7] {
        let analytic = loss_at(w).1.unwrap();
        let h = 1e-5;
        let numeric = (loss_at(w + h).0 - loss_at(w - h).0) / (2.0 * h);
        let rel = (analytic - numeric).abs() / numeric.abs().max(1e-12);
        assert!(rel < 1e-4, "w={w}: analytic {analytic} numeric {numeric}");
    }
}

#[test]
fn cfg_degenerate_scales() {
    let c = Tensor::new(&[1.0f64, 2.0, 3.0], &Device::Cpu).unwrap();
    let u = Tensor::new(&[0.5f64, -1.0, 4.0], &Device::Cpu).unwrap();
    assert_eq!(values(&cfg_combine(&c, &u, 1.0).unwrap()), values(&c));
    assert_eq!(values(&cfg_combine(&c, &u, 0.0).unwrap()), values(&u));
    assert_eq!(values(&cfg_combine(&c, &c, 3.0).unwrap()), values(&c));
    let bad = Tensor::new(&[1.0f64], &Device::Cpu).unwrap();
    assert!(matches!(cfg_combine(&c, &bad, 2.0), Err(Error::ShapeMismatch(_))));
}

#[test]
fn schedule_is_strictly_decreasing_and_ends_at_zero() {
    let s = NoiseSchedule::default().sigmas().unwrap();
    assert_eq!(s.len(), 16);
    assert!((s[0] - 80.0).abs() < 1e-9);
    assert!((s[14] - 0.002).abs() < 1e-12);
    assert_eq!(s[15], 0.0);
    assert!(s.windows(2).all(|w| w[0] > w[1]));
    assert!(NoiseSchedule { sigma_min: 1.0, sigma_max: 0.5, ..Default::default() }.validate().is_err());
    assert!(NoiseSchedule { num_steps: 0, ..Default::default() }.validate().is_err());
}

#[test]
fn single_step_oracle_sampling_returns_clean_latent() {
    let z0 = vol(vec![0.3, -0.2, 0.1, 0.9], &[1, 1, 2, 2]);
    let noise = vol(vec![0.5, -1.5, 2.0, 0.1], &[1, 1, 2, 2]);
    let net = OracleNet { z0: z0.data.clone(), sigma_data: 0.5 };
    let cfg = SamplerConfig { schedule: NoiseSchedule { num_steps: 1, ..Default::default() }, ..Default::default() };
    let out = sample(&noise, &bundle_for(&z0), &net, &cfg).unwrap();
    // one Euler step from sigma_max straight to 0 lands exactly on D = z0
    for (a, b) in values(&out.data).iter().zip(values(&z0.data)) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn zero_net_sampling_shrinks_norm() {
    let noise = vol(vec![1.0, -0.5, 0.25, 2.0], &[1, 1, 2, 2]);
    let cfg = SamplerConfig { schedule: NoiseSchedule { num_steps: 6, ..Default::default() }, guidance_scale: 1.0, sigma_data: 0.5 };
    let sigmas = cfg.schedule.sigmas().unwrap();
    let norm0: f64 = values(&noise.data).iter().map(|x| x * x).sum::<f64>().sqrt() * sigmas[0];
    // With F = 0, D = c_skip z, so each Euler step multiplies z by
    // 1 + (next - s)(1 - c_skip(s)) / s.
    let mut expected = norm0;
    let mut norms = vec![norm0];
    for w in sigmas.windows(2) {
        let c_skip = 0.25 / (w[0] * w[0] + 0.25);
        expected *= 1.0 + (w[1] - w[0]) * (1.0 - c_skip) / w[0];
        norms.push(expected);
    }
    assert!(norms.windows(2).all(|w| w[1] < w[0]));
    let out = sample(&noise, &bundle_for(&noise), &ZeroNetwork, &cfg).unwrap();
    let got: f64 = values(&out.data).iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((got - expected).abs() < 1e-9 * norm0, "{got} vs {expected}");
}

#[test]
fn sampling_is_deterministic() {
    let noise = vol(vec![1.0, -0.5, 0.25, 2.0], &[1, 1, 2, 2]);
    let net = ScaleNet { w: Var::from_tensor(&Tensor::new(&[0.3f64], &Device::Cpu).unwrap()).unwrap() };
    let cfg = SamplerConfig::default();
    let a = sample(&noise, &bundle_for(&noise), &net, &cfg).unwrap();
    let b = sample(&noise, &bundle_for(&noise), &net, &cfg).unwrap();
    assert_eq!(values(&a.data), values(&b.data));
}

#[test]
fn sampled_latent_carries_no_graph() {
    let noise = vol(vec![1.0, -0.5, 0.25, 2.0], &[1, 1, 2, 2]);
    let net = ScaleNet { w: Var::from_tensor(&Tensor::new(&[0.3f64], &Device::Cpu).unwrap()).unwrap() };
    let out = sample(&noise, &bundle_for(&noise), &net, &SamplerConfig::default()).unwrap();
    assert!(!out.data.track_op());
}

#[test]
fn loss_weighting_registry() {
    let reg = builtin_loss_weightings();
    let edm = reg.create("edm", &Default::default()).unwrap();
    assert!((edm.weight(0.5, 0.5) - 0.5 / 0.0625).abs() < 1e-12);
    assert!(matches!(reg.create("nope", &Default::default()), Err(Error::UnknownStrategy { .. })));
}

proptest! {
    #[test]
    fn denoise_is_affine_in_network_output(sigma in 0.01f64..50.0, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let z = vol(vec![0.4, -0.7, 1.2, 0.05], &[1, 1, 2, 2]);
        let state = DiffusionState { z_t: z.clone(), sigma, step_index: 0 };
        let cond = bundle_for(&z);
        let at = |w: f64| {
            let net = ScaleNet { w: Var::from_tensor(&Tensor::new(&[w], &Device::Cpu).unwrap()).unwrap() };
            values(&denoise(&state, &cond, &net, 0.5).unwrap().data)
        };
        let (da, db, dm) = (at(a), at(b), at(0.5 * (a + b)));
        for i in 0..4 {
            prop_assert!((dm[i] - 0.5 * (da[i] + db[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn dsm_loss_is_nonnegative(sigma in 0.005f64..80.0, w in -3.0f64..3.0) {
        let z0 = vol(vec![0.1, 0.2, -0.3, 0.4], &[1, 1, 2, 2]);
        let state = DiffusionState { z_t: vol(vec![1.0, -1.0, 0.5, 0.0], &[1, 1, 2, 2]), sigma, step_index: 0 };
        let net = ScaleNet { w: Var::from_tensor(&Tensor::new(&[w], &Device::Cpu).unwrap()).unwrap() };
        let l = dsm_loss(&z0, &state, &bundle_for(&z0), &net, &EdmWeighting, 0.5).unwrap().to_scalar::<f64>().unwrap();
        prop_assert!(l >= 0.0);
    }

    #[test]
    fn cfg_is_affine_in_scale(s1 in -5.0f64..5.0, s2 in -5.0f64..5.0) {
        let c = Tensor::new(&[1.0f64, -2.0, 0.3], &Device::Cpu).unwrap();
        let u = Tensor::new(&[0.2f64, 0.7, -1.0], &Device::Cpu).unwrap();
        let a = values(&cfg_combine(&c, &u, s1).unwrap());
        let b = values(&cfg_combine(&c, &u, s2).unwrap());
        let m = values(&cfg_combine(&c, &u, 0.5 * (s1 + s2)).unwrap());
        for i in 0..3 {
            prop_assert!((m[i] - 0.5 * (a[i] + b[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_sampler_reproduces_clean_latent(steps in 1usize..20, lo in 0.001f64..0.1, hi in 1.0f64..100.0, rho in 1.0f64..10.0) {
        let z0 = vol(vec![0.3, -0.2, 0.1, 0.9], &[1, 1, 2, 2]);
        let noise = vol(vec![0.5, -1.5, 2.0, 0.1], &[1, 1, 2, 2]);
        let net = OracleNet { z0: z0.data.clone(), sigma_data: 0.5 };
        let cfg = SamplerConfig { schedule: NoiseSchedule { sigma_min: lo, sigma_max: hi, rho, num_steps: steps }, ..Default::default() };
        let out = sample(&noise, &bundle_for(&z0), &net, &cfg).unwrap();
        for (a, b) in values(&out.data).iter().zip(values(&z0.data)) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }
}
