//! Stage 3: pixel-space fine-tuning of the decoder and teacher pixel head
//! against a patch discriminator, with the encoder and quantizer frozen.

use candle_core::{DType, Device, Tensor};
use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::FeatureNet;
use crate::model::{ParamGroup, TokenizerModel};
use crate::multistep::MaskState;
use crate::nn::{gelu, softmax_last, Linear, ParamStore};
use crate::optim::{accumulate, clip_grad_norm, lr_at, AdamW, AdamWParams, Ema};
use crate::teacher::PixelHead;
use crate::training::{LossBuilder, LossReport};

/// Discriminator losses below this count as collapsed.
pub const COLLAPSE_LOSS: f64 = 1e-4;
/// Consecutive collapsed steps before a warning is recorded.
pub const COLLAPSE_STEPS: usize = 100;

/// Per-patch MLP discriminator producing one logit per image patch.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    pub store: ParamStore,
    fc1: Linear,
    fc2: Linear,
    out: Linear,
    patch: usize,
}

impl PatchDiscriminator {
    pub fn new(patch: usize, hidden: usize, seed: u64, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD15C);
        let mut store = ParamStore::new("discriminator", DType::F32, device);
        let plen = patch * patch * 3;
        let fc1 = Linear::new(&mut store, "fc1", plen, hidden, true, &mut rng)?;
        let fc2 = Linear::new(&mut store, "fc2", hidden, hidden, true, &mut rng)?;
        let out = Linear::new(&mut store, "out", hidden, 1, true, &mut rng)?;
        Ok(Self {
            store,
            fc1,
            fc2,
            out,
            patch,
        })
    }

    /// Logits `B x P` for images `B x H x W x 3`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = images.dims4()?;
        let p = self.patch;
        if h % p != 0 || w % p != 0 {
            return Err(Error::Shape(format!("{h}x{w} not divisible by patch {p}")));
        }
        let patches = images
            .reshape((b, h / p, p, w / p, p, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((b, (h / p) * (w / p), p * p * c))?;
        let x = gelu(&self.fc1.forward(&patches)?)?;
        let x = gelu(&self.fc2.forward(&x)?)?;
        Ok(self.out.forward(&x)?.squeeze(2)?)
    }
}

/// Running means of real and fake discriminator logits for the LeCam
/// regulariser.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LecamEma {
    pub real: f64,
    pub fake: f64,
    pub decay: f64,
}

impl LecamEma {
    pub fn new(decay: f64) -> Self {
        Self {
            real: 0.0,
            fake: 0.0,
            decay,
        }
    }

    /// `mean(relu(real - ema_fake)^2) + mean(relu(ema_real - fake)^2)`.
    pub fn penalty(&self, real: &Tensor, fake: &Tensor) -> Result<Tensor> {
        let a = (real - self.fake)?.relu()?.sqr()?.mean_all()?;
        let b = ((fake.neg()? + self.real)?).relu()?.sqr()?.mean_all()?;
        Ok((a + b)?)
    }

    pub fn update(&mut self, real_mean: f64, fake_mean: f64) {
        self.real = self.decay * self.real + (1.0 - self.decay) * real_mean;
        self.fake = self.decay * self.fake + (1.0 - self.decay) * fake_mean;
    }
}

/// Hinge discriminator loss `mean(relu(1 - real)) + mean(relu(1 + fake))`.
pub fn hinge_d_loss(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let r = (real.neg()? + 1.0)?.relu()?.mean_all()?;
    let f = (fake + 1.0)?.relu()?.mean_all()?;
    Ok((r + f)?)
}

/// Mutable stage-3 bookkeeping that must survive a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneState {
    pub lecam: LecamEma,
    pub collapse_streak: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug)]
pub struct FinetuneTrainer {
    pub cfg: RunConfig,
    pub model: TokenizerModel,
    pub head: PixelHead,
    pub features: FeatureNet,
    pub disc: PatchDiscriminator,
    pub gen_opt: AdamW,
    pub disc_opt: AdamW,
    pub ema: Option<Ema>,
    pub state: FinetuneState,
    pub step: usize,
    pub exec: Execution,
}

impl FinetuneTrainer {
    pub fn new(
        cfg: RunConfig,
        model: TokenizerModel,
        head: PixelHead,
        features: FeatureNet,
        exec: Execution,
    ) -> Result<Self> {
        if cfg.experiment.stage != 3 {
            return Err(Error::Config(format!(
                "fine-tuning needs a stage-3 config, got stage {}",
                cfg.experiment.stage
            )));
        }
        let disc = PatchDiscriminator::new(head_patch(&cfg), 64, cfg.experiment.seed, model.device())?;
        let adam = |lr_beta2: f64| AdamWParams {
            beta1: cfg.optimizer.beta1,
            beta2: lr_beta2,
            eps: 1e-8,
            weight_decay: cfg.optimizer.weight_decay,
        };
        let gen_vars = Self::gen_vars_of(&model, &head);
        let gen_opt = AdamW::new(gen_vars.clone(), adam(cfg.optimizer.beta2))?;
        let disc_vars: Vec<_> = disc.store.vars().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let disc_opt = AdamW::new(disc_vars, adam(cfg.optimizer.beta2))?;
        let ema = if cfg.training.use_ema {
            Some(Ema::new(&gen_vars, cfg.training.ema_decay)?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            model,
            head,
            features,
            disc,
            gen_opt,
            disc_opt,
            ema,
            state: FinetuneState {
                lecam: LecamEma::new(0.999),
                collapse_streak: 0,
                warnings: Vec::new(),
            },
            step: 0,
            exec,
        })
    }

    fn gen_vars_of(model: &TokenizerModel, head: &PixelHead) -> Vec<(String, candle_core::Var)> {
        let mut v = model.vars(&[ParamGroup::Decoder]);
        v.extend(head.store.vars().iter().map(|(k, v)| (k.clone(), v.clone())));
        v
    }

    /// Decoder plus pixel-head parameters updated by the generator loss.
    pub fn gen_vars(&self) -> Vec<(String, candle_core::Var)> {
        Self::gen_vars_of(&self.model, &self.head)
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

    pub fn disc_active(&self) -> bool {
        self.step >= self.cfg.losses.discriminator_start.unwrap_or(0)
    }

    /// Differentiable reconstruction `B x H x W x 3` from the single-pass
    /// token distribution of the frozen-encoder latents.
    pub fn reconstruct_soft(&self, images: &ImageBatch) -> Result<Tensor> {
        let lat = self.model.latents(images, self.exec)?;
        let zq = lat.zq_st.detach();
        let state = MaskState::masked(images.batch, self.model.dims.grid_len);
        let probs = softmax_last(&self.model.decode_step(&state, &zq)?)?;
        self.head.forward(&probs)
    }

    /// One generator update followed, once the discriminator is active, by
    /// one discriminator update. The batch is split into
    /// `gradient_accumulation_steps` equal micro-batches.
    pub fn train_step(&mut self, images: &ImageBatch) -> Result<LossReport> {
        let accum = self.cfg.training.gradient_accumulation_steps.max(1);
        if images.batch < accum {
            return Err(Error::InvalidArgument(format!(
                "batch {} smaller than {accum} accumulation steps",
                images.batch
            )));
        }
        let l = self.cfg.losses.clone();
        let rw = l.reconstruction_weight.unwrap_or(1.0);
        let pw = l.perceptual_weight.unwrap_or(1.0);
        let factor = l.discriminator_factor.unwrap_or(1.0);
        let aw = l.discriminator_weight.unwrap_or(0.5) * factor;
        let lw = l.lecam_regularization_weight.unwrap_or(0.0);
        let active = self.disc_active();
        let gen_vars = self.gen_vars();
        let disc_vars: Vec<_> = self
            .disc
            .store
            .vars()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let chunk = images.batch / accum;
        let dev = self.model.device().clone();
        let mut sums = [0f64; 5];
        let mut gen_grads = Vec::with_capacity(accum);
        let mut disc_grads = Vec::with_capacity(accum);
        let mut logit_means = (0f64, 0f64);
        for a in 0..accum {
            let idx: Vec<usize> = (a * chunk..(a + 1) * chunk).collect();
            let sub = images.select(&idx);
            let target = sub.to_tensor(&dev)?;
            let recon = self.reconstruct_soft(&sub)?;
            let l2 = (&recon - &target)?.sqr()?.mean_all()?;
            let (f_fake, _) = self.features.forward_tensor(&recon)?;
            let (f_real, _) = self.features.forward_tensor(&target)?;
            let perc = (f_fake - f_real.detach())?.sqr()?.mean_all()?;
            let mut gen = ((&l2 * rw)? + (&perc * pw)?)?;
            sums[0] += scalar(&l2)?;
            sums[1] += scalar(&perc)?;
            if active {
                let adv = self.disc.forward(&recon)?.mean_all()?.neg()?;
                sums[2] += scalar(&adv)?;
                gen = (gen + (&adv * aw)?)?;
            }
            gen_grads.push(gen.backward()?);
            if active {
                let fake_in = recon.detach();
                let real = self.disc.forward(&target)?;
                let fake = self.disc.forward(&fake_in)?;
                let hinge = hinge_d_loss(&real, &fake)?;
                let lecam = self.state.lecam.penalty(&real, &fake)?;
                logit_means.0 += scalar(&real.mean_all()?)?;
                logit_means.1 += scalar(&fake.mean_all()?)?;
                sums[3] += scalar(&lecam)?;
                sums[4] += scalar(&hinge)?;
                let d = ((hinge * factor)? + (lecam * lw)?)?;
                disc_grads.push(d.backward()?);
            }
        }
        let n = accum as f64;
        let mut grads = accumulate(gen_grads, &gen_vars, 1.0 / n)?;
        let grad_norm = clip_grad_norm(&mut grads, &gen_vars, self.cfg.training.max_grad_norm)?;
        let lr = self.lr();
        self.gen_opt.step(&grads, lr)?;
        if active {
            let mut dg = accumulate(disc_grads, &disc_vars, 1.0 / n)?;
            clip_grad_norm(&mut dg, &disc_vars, self.cfg.training.max_grad_norm)?;
            let dlr = self
                .cfg
                .optimizer
                .discriminator_learning_rate
                .unwrap_or(self.cfg.optimizer.learning_rate);
            let dlr = lr_at(
                self.step,
                dlr,
                dlr * 0.1,
                self.cfg.lr_scheduler.warmup_steps,
                self.cfg.training.max_train_steps,
            );
            self.disc_opt.step(&dg, dlr)?;
            self.state.lecam.update(logit_means.0 / n, logit_means.1 / n);
            self.track_collapse(sums[4] / n);
        }
        if let Some(ema) = self.ema.as_mut() {
            ema.update(&gen_vars)?;
        }
        let mut lb = LossBuilder::new();
        lb.add_value("l2", sums[0] / n, rw);
        lb.add_value("perceptual", sums[1] / n, pw);
        lb.add_value("adversarial", sums[2] / n, aw);
        lb.add_value("lecam", sums[3] / n, lw);
        lb.add_value("quantizer", 0.0, l.quantizer_weight);
        lb.add_value("discriminator", sums[4] / n, 0.0);
        let (_, mut report) = lb.finish(3, self.step);
        report.lr = lr;
        report.grad_norm = grad_norm;
        for t in &report.terms {
            if !t.value.is_finite() {
                return Err(Error::NonFinite(format!("loss term {}", t.name)));
            }
        }
        self.step += 1;
        Ok(report)
    }

    fn track_collapse(&mut self, d_loss: f64) {
        if d_loss < COLLAPSE_LOSS {
            self.state.collapse_streak += 1;
            if self.state.collapse_streak == COLLAPSE_STEPS {
                let msg = format!(
                    "discriminator collapse: loss below {COLLAPSE_LOSS:e} for {COLLAPSE_STEPS} steps (step {})",
                    self.step
                );
                warn!("{msg}");
                self.state.warnings.push(msg);
            }
        } else {
            self.state.collapse_streak = 0;
        }
    }
}

fn head_patch(cfg: &RunConfig) -> usize {
    cfg.model.decoder.vit_dec_patch_size
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;
    use crate::data::synthetic_dataset;
    use crate::teacher::TeacherTokenizer;

    fn setup(disc_start: usize) -> (FinetuneTrainer, ImageBatch) {
        let mut cfg = RunConfig::defaults(3, Profile::Ci).unwrap();
        cfg.losses.discriminator_start = Some(disc_start);
        cfg.training.use_ema = false;
        let ds = synthetic_dataset(0, 0, 16, cfg.image_size(), Execution::Parallel);
        let (teacher, _) = TeacherTokenizer::fit(
            &ds.images,
            cfg.model.decoder.vit_dec_patch_size,
            cfg.model.decoder.codebook_size,
            10_000,
            0,
            Execution::Parallel,
        )
        .unwrap();
        let model = TokenizerModel::from_config(&cfg, 0).unwrap();
        let head = PixelHead::new(&teacher, 0, &Device::Cpu).unwrap();
        let feats = FeatureNet::new(cfg.image_size(), 10, 8, 0).unwrap();
        (
            FinetuneTrainer::new(cfg, model, head, feats, Execution::Parallel).unwrap(),
            ds.images,
        )
    }

    #[test]
    fn adversarial_terms_are_zero_before_start() {
        let (mut t, imgs) = setup(2);
        let batch = imgs.select(&[0, 1, 2, 3]);
        for step in 0..3 {
            let r = t.train_step(&batch).unwrap();
            if step < 2 {
                assert_eq!(r.term("adversarial"), Some(0.0));
                assert_eq!(r.term("lecam"), Some(0.0));
                assert_eq!(r.term("discriminator"), Some(0.0));
            } else {
                assert!(r.term("discriminator").unwrap() > 0.0);
            }
            assert!((r.total - r.weighted_sum()).abs() < 1e-6);
        }
    }

    #[test]
    fn encoder_and_quantizer_stay_frozen() {
        let (mut t, imgs) = setup(0);
        let frozen = |t: &FinetuneTrainer| -> Vec<Vec<f32>> {
            t.model
                .vars(&[ParamGroup::Encoder, ParamGroup::Quantizer])
                .iter()
                .map(|(_, v)| v.as_tensor().flatten_all().unwrap().to_vec1().unwrap())
                .collect()
        };
        let before = frozen(&t);
        let head_before = t.head.store.snapshot().unwrap();
        t.train_step(&imgs.select(&[0, 1, 2, 3])).unwrap();
        assert_eq!(before, frozen(&t));
        assert_ne!(head_before, t.head.store.snapshot().unwrap());
    }

    #[test]
    fn hinge_and_lecam_values() {
        let dev = Device::Cpu;
        let real = Tensor::new(&[2.0f32, 0.0], &dev).unwrap();
        let fake = Tensor::new(&[-2.0f32, 0.5], &dev).unwrap();
        // relu(1-r) = [0, 1] -> 0.5; relu(1+f) = [0, 1.5] -> 0.75.
        assert!((scalar(&hinge_d_loss(&real, &fake).unwrap()).unwrap() - 1.25).abs() < 1e-6);
        let ema = LecamEma {
            real: 1.0,
            fake: -1.0,
            decay: 0.9,
        };
        // relu(r + 1)^2 = [9, 1] -> 5; relu(1 - f)^2 = [9, 0.25] -> 4.625.
        assert!((scalar(&ema.penalty(&real, &fake).unwrap()).unwrap() - 9.625).abs() < 1e-5);
    }

    #[test]
    fn collapse_is_reported_once_per_streak() {
        let (mut t, _) = setup(0);
        for _ in 0..(COLLAPSE_STEPS + 5) {
            t.track_collapse(0.0);
        }
        assert_eq!(t.state.warnings.len(), 1);
        t.track_collapse(1.0);
        assert_eq!(t.state.collapse_streak, 0);
    }
}
