//! First-order optimizers with inspectable, checkpointable state.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::registry::{Options, OptionsExt, Registry};

pub trait Optimizer: Send {
    fn name(&self) -> &str;
    fn learning_rate(&self) -> f64;
    /// Applies one update to every var that has a gradient in `grads`.
    fn step(&mut self, vars: &[Var], grads: &GradStore) -> Result<()>;
    /// Moment buffers and counters, keyed by position in the var list.
    fn state(&self) -> BTreeMap<String, Tensor>;
    fn load_state(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()>;
}

/// Adam with decoupled weight decay.
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: BTreeMap<usize, Tensor>,
    v: BTreeMap<usize, Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self::with_betas(lr, weight_decay, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, weight_decay: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, weight_decay, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

impl Optimizer for AdamW {
    fn name(&self) -> &str {
        "adamw"
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn step(&mut self, vars: &[Var], grads: &GradStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, var) in vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let m = match self.m.get(&i) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(&i) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            let theta = var.as_tensor();
            let decayed = (theta * (1.0 - self.lr * self.weight_decay))?;
            var.set(&(decayed - (update * self.lr)?)?)?;
            self.m.insert(i, m);
            self.v.insert(i, v);
        }
        Ok(())
    }

    fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (i, m) in &self.m {
            out.insert(format!("m.{i}"), m.clone());
        }
        for (i, v) in &self.v {
            out.insert(format!("v.{i}"), v.clone());
        }
        if let Ok(t) = Tensor::new(&[self.t as f64], &candle_core::Device::Cpu) {
            out.insert("t".into(), t);
        }
        out
    }

    fn load_state(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        self.m.clear();
        self.v.clear();
        self.t = 0;
        for (key, tensor) in state {
            if key == "t" {
                self.t = tensor.to_vec1::<f64>()?.first().copied().unwrap_or(0.0) as u64;
                continue;
            }
            let (kind, index) = key
                .split_once('.')
                .and_then(|(k, i)| Some((k, i.parse::<usize>().ok()?)))
                .ok_or_else(|| Error::ConfigMismatch(format!("unexpected optimizer state `{key}`")))?;
            match kind {
                "m" => self.m.insert(index, tensor.clone()),
                "v" => self.v.insert(index, tensor.clone()),
                _ => return Err(Error::ConfigMismatch(format!("unexpected optimizer state `{key}`"))),
            };
        }
        Ok(())
    }
}

/// Plain gradient descent with optional heavy-ball momentum.
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: BTreeMap<usize, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: BTreeMap::new() }
    }
}

impl Optimizer for Sgd {
    fn name(&self) -> &str {
        "sgd"
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn step(&mut self, vars: &[Var], grads: &GradStore) -> Result<()> {
        for (i, var) in vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let vel = match self.velocity.get(&i) {
                Some(prev) if self.momentum > 0.0 => ((prev * self.momentum)? + g)?,
                _ => g.clone(),
            };
            var.set(&(var.as_tensor() - (&vel * self.lr)?)?)?;
            if self.momentum > 0.0 {
                self.velocity.insert(i, vel);
            }
        }
        Ok(())
    }

    fn state(&self) -> BTreeMap<String, Tensor> {
        self.velocity.iter().map(|(i, t)| (format!("velocity.{i}"), t.clone())).collect()
    }

    fn load_state(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        self.velocity.clear();
        for (key, tensor) in state {
            let index = key
                .strip_prefix("velocity.")
                .and_then(|i| i.parse::<usize>().ok())
                .ok_or_else(|| Error::ConfigMismatch(format!("unexpected optimizer state `{key}`")))?;
            self.velocity.insert(index, tensor.clone());
        }
        Ok(())
    }
}

/// Rescales all gradients in place so their joint L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(vars: &[Var], grads: &mut GradStore, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for var in vars {
        if let Some(g) = grads.get(var.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if norm.is_finite() && norm > max_norm && max_norm > 0.0 {
        let factor = max_norm / norm;
        for var in vars {
            if let Some(g) = grads.get(var.as_tensor()) {
                let scaled = (g * factor)?;
                grads.insert(var.as_tensor(), scaled);
            }
        }
    }
    Ok(norm)
}

pub fn builtin_optimizers() -> Registry<dyn Optimizer> {
    let mut reg: Registry<dyn Optimizer> = Registry::new("optimizer");
    reg.register("adamw", |opts: &Options| {
        Ok(Box::new(AdamW::with_betas(
            positive(opts.f64_or("lr", 6e-5)?, "lr")?,
            opts.f64_or("weight_decay", 0.01)?,
            opts.f64_or("beta1", 0.9)?,
            opts.f64_or("beta2", 0.999)?,
            opts.f64_or("eps", 1e-8)?,
        )))
    });
    reg.register("sgd", |opts: &Options| {
        Ok(Box::new(Sgd::new(positive(opts.f64_or("lr", 1e-2)?, "lr")?, opts.f64_or("momentum", 0.0)?)))
    });
    reg
}

fn positive(x: f64, what: &str) -> Result<f64> {
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(Error::InvalidArgument(format!("{what} must be positive, got {x}")))
    }
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device};

    use super::*;

    fn quadratic_grads(var: &Var) -> GradStore {
        // d/dx (x - 3)^2
        let loss = (var.as_tensor() - 3.0).unwrap().sqr().unwrap().sum_all().unwrap();
        loss.backward().unwrap()
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let var = Var::from_tensor(&Tensor::new(&[0.0f64, 10.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&[var.clone()], &quadratic_grads(&var)).unwrap();
        // bias-corrected first update is lr * sign(g)
        let x = var.as_tensor().to_vec1::<f64>().unwrap();
        assert!((x[0] - 0.1).abs() < 1e-6 && (x[1] - 9.9).abs() < 1e-6);
    }

    #[test]
    fn adamw_converges_on_quadratic() {
        let var = Var::from_tensor(&Tensor::new(&[0.0f32], &Device::Cpu).unwrap()).unwrap();
        let mut opt = AdamW::new(0.05, 0.0);
        for _ in 0..500 {
            let g = quadratic_grads(&var);
            opt.step(&[var.clone()], &g).unwrap();
        }
        let x = var.as_tensor().to_vec1::<f32>().unwrap()[0];
        assert!((x - 3.0).abs() < 0.05, "{x}");
    }

    #[test]
    fn state_round_trip_continues_identically() {
        let run = |split: bool| {
            let var = Var::from_tensor(&Tensor::new(&[1.0f32, -2.0], &Device::Cpu).unwrap()).unwrap();
            let mut opt = AdamW::new(0.01, 0.1);
            for i in 0..6 {
                if split && i == 3 {
                    let saved = opt.state();
                    opt = AdamW::new(0.01, 0.1);
                    opt.load_state(&saved).unwrap();
                }
                let g = quadratic_grads(&var);
                opt.step(&[var.clone()], &g).unwrap();
            }
            var.as_tensor().to_vec1::<f32>().unwrap()
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let a = Var::from_tensor(&Tensor::new(&[0.0f32, 0.0], &Device::Cpu).unwrap()).unwrap();
        let mut g = quadratic_grads(&a);
        let before = clip_grad_norm(&[a.clone()], &mut g, 1.0).unwrap();
        assert!((before - 72f64.sqrt()).abs() < 1e-5);
        let after = g.get(a.as_tensor()).unwrap().sqr().unwrap().sum_all().unwrap().to_dtype(DType::F64).unwrap();
        assert!((after.to_scalar::<f64>().unwrap().sqrt() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn registry_builds_optimizers() {
        let reg = builtin_optimizers();
        assert_eq!(reg.create("adamw", &Default::default()).unwrap().learning_rate(), 6e-5);
        assert_eq!(reg.create("sgd", &Default::default()).unwrap().name(), "sgd");
    }
}
