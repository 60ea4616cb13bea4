//! AdamW with decoupled weight decay, warmup-cosine learning rate, global
//! gradient-norm clipping and an exponential moving average of weights.
//!
//! Optimizer and EMA state are plain host vectors keyed by parameter name so
//! they serialise into checkpoints without depending on tensor internals.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

#[derive(Debug)]
pub struct AdamW {
    pub params: AdamWParams,
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(vars: Vec<(String, Var)>, params: AdamWParams) -> Result<Self> {
        let zeros = |v: &Var| Tensor::zeros(v.shape(), v.dtype(), v.device());
        let m = vars
            .iter()
            .map(|(_, v)| zeros(v))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = vars
            .iter()
            .map(|(_, v)| zeros(v))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            params,
            vars,
            m,
            v,
            step: 0,
        })
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. Parameters without a gradient
    /// are left untouched (their moments still decay as for a zero
    /// gradient, matching the usual dense implementation).
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let p = self.params;
        let bc1 = 1.0 - p.beta1.powi(self.step as i32);
        let bc2 = 1.0 - p.beta2.powi(self.step as i32);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Detached so the moments do not chain autograd history across steps.
            let g = &g.detach();
            let m = ((&self.m[i] * p.beta1)? + (g * (1.0 - p.beta1))?)?;
            let v = ((&self.v[i] * p.beta2)? + (g.sqr()? * (1.0 - p.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + p.eps)?)?;
            let decay = if var.rank() >= 2 { p.weight_decay } else { 0.0 };
            let next = ((var.as_tensor() * (1.0 - lr * decay))? - (update * lr)?)?;
            var.set(&next.detach())?;
            self.m[i] = m.detach();
            self.v[i] = v.detach();
        }
        Ok(())
    }

    pub fn state(&self) -> Result<AdamWState> {
        let host = |t: &Tensor| -> Result<Vec<f32>> { Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?) };
        let mut s = AdamWState {
            step: self.step,
            ..Default::default()
        };
        for (i, (name, _)) in self.vars.iter().enumerate() {
            s.m.insert(name.clone(), host(&self.m[i])?);
            s.v.insert(name.clone(), host(&self.v[i])?);
        }
        Ok(s)
    }

    pub fn load_state(&mut self, s: &AdamWState) -> Result<()> {
        for (i, (name, var)) in self.vars.iter().enumerate() {
            let (Some(m), Some(v)) = (s.m.get(name), s.v.get(name)) else {
                return Err(Error::Format(format!("optimizer state lacks {name}")));
            };
            let mk = |d: &Vec<f32>| -> Result<Tensor> {
                Ok(Tensor::from_slice(d, var.shape(), var.device())?.to_dtype(var.dtype())?)
            };
            self.m[i] = mk(m)?;
            self.v[i] = mk(v)?;
        }
        self.step = s.step;
        Ok(())
    }
}

/// Linear warmup from 0 to `base`, then cosine decay to `end` at `total`.
pub fn lr_at(step: usize, base: f64, end: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    end + 0.5 * (base - end) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Global L2 norm of the gradients of `vars`.
pub fn grad_norm(grads: &GradStore, vars: &[(String, Var)]) -> Result<f64> {
    let mut total = 0f64;
    for (_, v) in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}

/// Rescales gradients in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradStore, vars: &[(String, Var)], max_norm: f64) -> Result<f64> {
    let norm = grad_norm(grads, vars)?;
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradients".into()));
    }
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for (_, v) in vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                let scaled = (g * scale)?;
                grads.insert(v.as_tensor(), scaled);
            }
        }
    }
    Ok(norm)
}

/// Sums several gradient stores over `vars` (for accumulation).
pub fn accumulate(stores: Vec<GradStore>, vars: &[(String, Var)], scale: f64) -> Result<GradStore> {
    let mut it = stores.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::InvalidArgument("no gradients".into()))?;
    for g in it {
        for (_, v) in vars {
            let t = v.as_tensor();
            if let Some(x) = g.get(t) {
                let sum = match acc.get(t) {
                    Some(a) => (a + x)?,
                    None => x.clone(),
                };
                acc.insert(t, sum);
            }
        }
    }
    if scale != 1.0 {
        for (_, v) in vars {
            if let Some(a) = acc.get(v.as_tensor()) {
                let s = (a * scale)?;
                acc.insert(v.as_tensor(), s);
            }
        }
    }
    Ok(acc)
}

/// Exponential moving average of parameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ema {
    pub decay: f64,
    pub shadow: BTreeMap<String, Vec<f32>>,
}

impl Ema {
    pub fn new(vars: &[(String, Var)], decay: f64) -> Result<Self> {
        let mut shadow = BTreeMap::new();
        for (name, v) in vars {
            shadow.insert(
                name.clone(),
                v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1()?,
            );
        }
        Ok(Self { decay, shadow })
    }

    pub fn update(&mut self, vars: &[(String, Var)]) -> Result<()> {
        let d = self.decay as f32;
        for (name, v) in vars {
            let cur: Vec<f32> = v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
            let s = self
                .shadow
                .get_mut(name)
                .ok_or_else(|| Error::Format(format!("EMA lacks {name}")))?;
            for (a, b) in s.iter_mut().zip(cur) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
        Ok(())
    }

    /// Writes the averaged weights into `vars`.
    pub fn copy_to(&self, vars: &[(String, Var)]) -> Result<()> {
        for (name, v) in vars {
            let s = self
                .shadow
                .get(name)
                .ok_or_else(|| Error::Format(format!("EMA lacks {name}")))?;
            let t = Tensor::from_slice(s, v.shape(), v.device())?.to_dtype(v.dtype())?;
            v.set(&t)?;
        }
        Ok(())
    }
}
