//! Minimal transformer layers over candle tensors.
//!
//! Parameters live in a [`ParamStore`] per parameter group (encoder,
//! quantizer, decoder, ...) so that stages can freeze whole groups and
//! checkpoints can address every tensor by a stable name. Initial values are
//! drawn on the host from a seeded ChaCha stream, which keeps model
//! construction reproducible independent of candle's device RNG.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{shape_err, Result};

#[derive(Clone, Debug)]
pub struct ParamStore {
    group: String,
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(group: impl Into<String>, dtype: DType, device: &Device) -> Self {
        Self {
            group: group.into(),
            vars: BTreeMap::new(),
            dtype,
            device: device.clone(),
        }
    }

    pub fn group(&self) -> &str {
        &self.group
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let full = format!("{}.{}", self.group, name);
        assert!(!self.vars.contains_key(&full), "parameter {full} registered twice");
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(full, var);
        Ok(out)
    }

    pub fn normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, shape, data)
    }

    pub fn uniform<R: Rng>(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut R) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, shape, data)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, shape, vec![value; n])
    }

    pub fn from_values(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if values.len() != shape.iter().product::<usize>() {
            return Err(shape_err(format!("{name}: {} values for {shape:?}", values.len())));
        }
        self.insert(name, shape, values)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, full_name: &str) -> Option<&Var> {
        self.vars.get(full_name)
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites parameters in place from host values keyed by full name.
    /// Every parameter must be present with a matching element count.
    pub fn load(&self, values: &BTreeMap<String, Vec<f32>>) -> Result<()> {
        for (name, var) in &self.vars {
            let v = values
                .get(name)
                .ok_or_else(|| crate::error::Error::Format(format!("missing parameter {name}")))?;
            if v.len() != var.elem_count() {
                return Err(shape_err(format!(
                    "{name}: {} values for {:?}",
                    v.len(),
                    var.shape().dims()
                )));
            }
            let t = Tensor::from_slice(v, var.shape(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Host copy of every parameter, in name order.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f32>>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let flat = v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
                Ok((k.clone(), flat))
            })
            .collect()
    }
}

/// Dense layer; weight stored `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[fan_in, fan_out], bound, rng)?;
        let bias = if bias {
            Some(store.constant(&format!("{name}.bias"), &[fan_out], 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// Zero-initialised layer, used for residual heads that must start as a
    /// no-op.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let weight = store.constant(&format!("{name}.weight"), &[fan_in, fan_out], 0.0)?;
        let bias = Some(store.constant(&format!("{name}.bias"), &[fan_out], 0.0)?);
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let fan_in = *dims.last().ok_or_else(|| shape_err("linear on a scalar"))?;
        let rows = x.elem_count() / fan_in.max(1);
        let y = x.reshape((rows, fan_in))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: store.constant(&format!("{name}.gain"), &[width], 1.0)?,
            bias: store.constant(&format!("{name}.bias"), &[width], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.bias)?)
    }
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Sigmoid approximation of GELU, `x * sigmoid(1.702 x)`.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok((x * candle_nn::ops::sigmoid(&(x * 1.702)?)?)?)
}

#[derive(Clone, Debug)]
pub struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(shape_err(format!("width {width} not divisible by {heads} heads")));
        }
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width, true, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), width, width, true, rng)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, s, width) = x.dims3()?;
        let dh = width / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, s, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
        let att = softmax_last(&scores)?;
        let out = att.matmul(&v)?.transpose(1, 2)?.reshape((b, s, width))?;
        self.proj.forward(&out)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width)?,
            attn: Attention::new(store, &format!("{name}.attn"), width, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), width, width * mlp_ratio, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), width * mlp_ratio, width, true, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?)?)?;
        let h = gelu(&self.fc1.forward(&self.ln2.forward(&x)?)?)?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }
}

/// Pre-norm transformer stack with a final layer norm.
#[derive(Clone, Debug)]
pub struct Transformer {
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl Transformer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| Block::new(store, &format!("{name}.blocks.{i}"), width, heads, mlp_ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            norm: LayerNorm::new(store, &format!("{name}.norm"), width)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        self.norm.forward(&h)
    }
}

/// Transformer size presets addressed by name in configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SizePreset {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

pub fn size_preset(name: &str) -> Option<SizePreset> {
    let (width, depth, heads, mlp_ratio) = match name {
        "micro" => (32, 2, 2, 2),
        "tiny" => (64, 2, 4, 4),
        "small" => (128, 4, 4, 4),
        "desk" => (256, 4, 4, 4),
        "base" => (768, 12, 12, 4),
        _ => return None,
    };
    Some(SizePreset {
        width,
        depth,
        heads,
        mlp_ratio,
    })
}

pub const SIZE_PRESETS: [&str; 5] = ["micro", "tiny", "small", "desk", "base"];
