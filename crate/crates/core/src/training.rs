//! Training steps for the three stages and the loss bookkeeping they share.

use candle_core::{DType, Tensor, D};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::ImageBatch;
use crate::error::{shape_err, Error, Result};
use crate::exec::Execution;
use crate::model::{ParamGroup, TokenizerModel};
use crate::multistep::{first_step_predict, sfvr_replace, MaskState};
use crate::nn::log_softmax_last;
use crate::optim::{clip_grad_norm, lr_at, AdamW, AdamWParams, Ema};
use crate::quantizer::quantizer_loss;
use crate::teacher::TeacherTokens;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub name: String,
    pub value: f64,
    pub weight: f64,
}

/// Per-term losses of one step; `total` is the weighted sum of the terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stage: u8,
    pub step: usize,
    pub terms: Vec<LossTerm>,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl LossReport {
    pub fn weighted_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * t.value).sum()
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }
}

/// Accumulates weighted scalar loss tensors and their host values.
pub(crate) struct LossBuilder {
    total: Option<Tensor>,
    terms: Vec<LossTerm>,
}

impl LossBuilder {
    pub(crate) fn new() -> Self {
        Self {
            total: None,
            terms: Vec::new(),
        }
    }

    pub(crate) fn add(&mut self, name: &str, loss: Tensor, weight: f64) -> Result<()> {
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name}")));
        }
        self.terms.push(LossTerm {
            name: name.into(),
            value,
            weight,
        });
        if weight != 0.0 {
            let w = (loss * weight)?;
            self.total = Some(match self.total.take() {
                Some(t) => (t + w)?,
                None => w,
            });
        }
        Ok(())
    }

    /// Records a term that carries no gradient.
    pub(crate) fn add_value(&mut self, name: &str, value: f64, weight: f64) {
        self.terms.push(LossTerm {
            name: name.into(),
            value,
            weight,
        });
    }

    pub(crate) fn finish(self, stage: u8, step: usize) -> (Option<Tensor>, LossReport) {
        let total = self.terms.iter().map(|t| t.weight * t.value).sum();
        (
            self.total,
            LossReport {
                stage,
                step,
                terms: self.terms,
                total,
                lr: 0.0,
                grad_norm: 0.0,
            },
        )
    }
}

/// Mean cross-entropy over masked positions plus `w_unmasked` times the mean
/// over resolved positions, with optional label smoothing. Empty sets
/// contribute zero. Returns `(total, masked_mean, resolved_mean)`.
pub fn masked_ce_loss(
    logits: &Tensor,
    truth: &TeacherTokens,
    state: &MaskState,
    w_unmasked: f64,
    label_smoothing: f64,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, l, _) = logits.dims3()?;
    if truth.batch != b || truth.len != l || state.batch != b || state.len != l {
        return Err(shape_err(format!(
            "logits {b}x{l}, truth {}x{}, state {}x{}",
            truth.batch, truth.len, state.batch, state.len
        )));
    }
    let n_resolved = state.resolved.iter().filter(|&&r| r).count();
    let n_masked = b * l - n_resolved;
    if n_masked + n_resolved == 0 {
        return Err(Error::InvalidArgument("no positions to score".into()));
    }
    let dev = logits.device();
    let dt = logits.dtype();
    let logp = log_softmax_last(logits)?;
    let idx = Tensor::from_vec(truth.ids.clone(), (b, l, 1), dev)?;
    let picked = logp.gather(&idx, D::Minus1)?.squeeze(D::Minus1)?;
    let ce = if label_smoothing > 0.0 {
        let smooth = logp.mean(D::Minus1)?;
        ((picked * (1.0 - label_smoothing))? + (smooth * label_smoothing)?)?.neg()?
    } else {
        picked.neg()?
    };
    let masked_w: Vec<f64> = state
        .resolved
        .iter()
        .map(|&r| if r { 0.0 } else { 1.0 / n_masked.max(1) as f64 })
        .collect();
    let resolved_w: Vec<f64> = state
        .resolved
        .iter()
        .map(|&r| if r { 1.0 / n_resolved.max(1) as f64 } else { 0.0 })
        .collect();
    let mw = Tensor::from_vec(masked_w, (b, l), dev)?.to_dtype(dt)?;
    let rw = Tensor::from_vec(resolved_w, (b, l), dev)?.to_dtype(dt)?;
    let masked = (&ce * mw)?.sum_all()?;
    let resolved = (&ce * rw)?.sum_all()?;
    let total = (&masked + (&resolved * w_unmasked)?)?;
    Ok((total, masked, resolved))
}

/// Per-row reveal sets for stage 2: a uniform masking rate per example,
/// truncated so at least one position is masked and one revealed.
pub fn sample_reveal<R: Rng>(batch: usize, len: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if len < 2 {
        return Err(Error::InvalidArgument(
            "need at least two grid positions to reveal".into(),
        ));
    }
    Ok((0..batch)
        .map(|_| {
            let rate: f64 = rng.random();
            let n_mask = ((rate * len as f64).ceil() as usize).clamp(1, len - 1);
            let mut pos = sample(rng, len, len - n_mask).into_vec();
            pos.sort_unstable();
            pos
        })
        .collect())
}

/// Mixes `(seed, stage, step, stream)` into an independent RNG seed, so every
/// step's randomness is a pure function of its coordinates.
pub fn step_seed(seed: u64, stage: u8, step: usize, stream: u64) -> u64 {
    let mut x = seed ^ 0x5DEE_CE66_D1CE_4E5B;
    for v in [stage as u64, step as u64, stream] {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(v);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

/// Owns a tokenizer model and its optimizer for stages 1 and 2.
#[derive(Debug)]
pub struct TokenizerTrainer {
    pub cfg: RunConfig,
    pub model: TokenizerModel,
    pub opt: AdamW,
    pub ema: Option<Ema>,
    pub step: usize,
    pub exec: Execution,
}

impl TokenizerTrainer {
    pub fn new(cfg: RunConfig, model: TokenizerModel, exec: Execution) -> Result<Self> {
        let vars = model.vars(&[ParamGroup::Encoder, ParamGroup::Quantizer, ParamGroup::Decoder]);
        let opt = AdamW::new(
            vars.clone(),
            AdamWParams {
                beta1: cfg.optimizer.beta1,
                beta2: cfg.optimizer.beta2,
                eps: 1e-8,
                weight_decay: cfg.optimizer.weight_decay,
            },
        )?;
        let ema = if cfg.training.use_ema {
            Some(Ema::new(&vars, cfg.training.ema_decay)?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            model,
            opt,
            ema,
            step: 0,
            exec,
        })
    }

    pub fn stage(&self) -> u8 {
        self.cfg.experiment.stage
    }

    pub fn lr(&self) -> f64 {
        let s = &self.cfg.lr_scheduler;
        lr_at(
            self.step,
            s.learning_rate,
            s.end_lr,
            s.warmup_steps,
            self.cfg.training.max_train_steps,
        )
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(step_seed(self.cfg.experiment.seed, self.stage(), self.step, stream))
    }

    /// Loss graph for one batch; no parameter update.
    pub fn forward_loss(&self, images: &ImageBatch, truth: &TeacherTokens) -> Result<(Option<Tensor>, LossReport)> {
        let lat = self.model.latents(images, self.exec)?;
        let (b, l) = (images.batch, self.model.dims.grid_len);
        let state = if self.cfg.training.single_step_generation {
            MaskState::masked(b, l)
        } else {
            let mut rng = self.rng(1);
            let seed: u64 = rng.random();
            let pred = first_step_predict(
                &lat.zq.data,
                &self.model,
                self.cfg.model.decoder.randomize_temperature,
                seed,
            )?;
            let reveal = sample_reveal(b, l, &mut rng)?;
            sfvr_replace(
                &MaskState::masked(b, l),
                &pred,
                &reveal,
                self.cfg.effective_replace_ratio(),
                truth,
                &mut rng,
            )?
        };
        let logits = self.model.decode_step(&state, &lat.zq_st)?;
        let losses = &self.cfg.losses;
        let (_, masked, resolved) = masked_ce_loss(
            &logits,
            truth,
            &state,
            losses.loss_weight_unmasked_token,
            losses.label_smoothing,
        )?;
        let q = quantizer_loss(&lat.ze, &lat.zq.data, self.cfg.model.vq_model.commitment_cost)?;
        let mut lb = LossBuilder::new();
        lb.add("masked_ce", masked, 1.0)?;
        if !self.cfg.training.single_step_generation {
            lb.add("unmasked_ce", resolved, losses.loss_weight_unmasked_token)?;
        }
        lb.add("quantizer", q, losses.quantizer_weight)?;
        Ok(lb.finish(self.stage(), self.step))
    }

    /// Forward, backward, clip, update, renormalise, EMA.
    pub fn train_step(&mut self, images: &ImageBatch, truth: &TeacherTokens) -> Result<LossReport> {
        let (total, mut report) = self.forward_loss(images, truth)?;
        let total = total.ok_or_else(|| Error::InvalidArgument("no trainable loss".into()))?;
        let mut grads = total.backward()?;
        let vars = self.opt.vars().to_vec();
        report.grad_norm = clip_grad_norm(&mut grads, &vars, self.cfg.training.max_grad_norm)?;
        report.lr = self.lr();
        self.opt.step(&grads, report.lr)?;
        self.model.post_update()?;
        if let Some(ema) = self.ema.as_mut() {
            ema.update(&vars)?;
        }
        self.step += 1;
        Ok(report)
    }
}
