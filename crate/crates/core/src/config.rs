//! Run configuration.
//!
//! The file format is TOML whose tables and keys follow the tokenizer's
//! published hyper-parameter table in snake_case (`[model.vq_model]`,
//! `[losses]`, `[lr_scheduler]`, ...). Parsing is strict: unknown keys are
//! errors, and keys that only make sense in the pixel fine-tuning stage are
//! rejected in stages 1 and 2. Missing keys take the desk-scale defaults for
//! the configured stage, and the fully resolved config is what gets echoed
//! into checkpoints and reports.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{size_preset, SizePreset, SIZE_PRESETS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub model: ModelSection,
    pub losses: LossConfig,
    pub dataset: DatasetConfig,
    pub optimizer: OptimizerConfig,
    pub lr_scheduler: LrSchedulerConfig,
    pub training: TrainingConfig,
    pub generator: GeneratorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub stage: u8,
    pub seed: u64,
    pub max_train_examples: usize,
    pub resume_training: bool,
    pub output_dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub vq_model: VqModelConfig,
    pub decoder: DecoderConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqModelConfig {
    pub codebook_size: usize,
    pub token_size: usize,
    pub use_l2_norm: bool,
    pub commitment_cost: f64,
    pub vit_enc_model_size: String,
    pub vit_enc_patch_size: usize,
    pub num_latent_tokens: usize,
    pub num_group: usize,
    pub finetune_decoder: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vit_dec_model_size: String,
    /// Patch size of the teacher grid; sets the proxy-code count.
    pub vit_dec_patch_size: usize,
    pub num_latent_tokens: usize,
    pub token_size: usize,
    /// Teacher grid length L2.
    pub num_proxy_codes: usize,
    /// Teacher vocabulary V.
    pub codebook_size: usize,
    pub randomize_temperature: f64,
    pub guidance_scale: f64,
    pub guidance_decay: String,
    pub replace_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub quantizer_weight: f64,
    pub label_smoothing: f64,
    pub loss_weight_unmasked_token: f64,
    pub discriminator_type: Option<String>,
    pub discriminator_start: Option<usize>,
    pub discriminator_factor: Option<f64>,
    pub discriminator_weight: Option<f64>,
    pub perceptual_loss: Option<String>,
    pub perceptual_weight: Option<f64>,
    pub reconstruction_loss: Option<String>,
    pub reconstruction_weight: Option<f64>,
    pub lecam_regularization_weight: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_workers_per_gpu: usize,
    /// `"synthetic"` (built-in shapes corpus) or `"simple"` (manifest).
    pub dataset_type: String,
    pub manifest: Option<String>,
    pub synthetic_train_size: usize,
    pub synthetic_val_size: usize,
    pub resize_shorter_edge: usize,
    pub crop_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub discriminator_learning_rate: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedulerConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub end_lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub gradient_accumulation_steps: usize,
    pub per_gpu_batch_size: usize,
    /// Accepted for parity; desk-scale numerics always run in fp32.
    pub mixed_precision: String,
    pub enable_tf32: bool,
    pub use_ema: bool,
    pub ema_decay: f64,
    pub max_train_steps: usize,
    pub max_grad_norm: f64,
    pub use_mlmloss: bool,
    /// Stage-1 behaviour: every teacher position stays masked.
    pub single_step_generation: bool,
    /// Revealed positions carry the model's own first-pass prediction
    /// (with probability `replace_prob`) instead of the teacher token.
    pub guided_mask: bool,
    pub eval_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub model_size: String,
    pub num_classes: usize,
    pub max_train_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub generation_steps: usize,
    pub temperature: f64,
    pub reconstruction_steps: usize,
}

/// Scale profile used to fill missing keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 32x32 images, D=256 transformers, 5k/20k/20k stage steps.
    Desk,
    /// 16x16 images and micro transformers sized for the test suite.
    Ci,
}

impl RunConfig {
    /// Fully resolved defaults for `stage` under `profile`.
    pub fn defaults(stage: u8, profile: Profile) -> Result<Self> {
        Raw::default().resolve(stage, profile)
    }

    pub fn encoder_size(&self) -> SizePreset {
        size_preset(&self.model.vq_model.vit_enc_model_size).expect("validated")
    }

    pub fn decoder_size(&self) -> SizePreset {
        size_preset(&self.model.decoder.vit_dec_model_size).expect("validated")
    }

    pub fn generator_size(&self) -> SizePreset {
        size_preset(&self.generator.model_size).expect("validated")
    }

    pub fn image_size(&self) -> usize {
        self.dataset.crop_size
    }

    /// Probability that a revealed position carries the model prediction.
    pub fn effective_replace_ratio(&self) -> f64 {
        if self.training.guided_mask {
            self.model.decoder.replace_prob
        } else {
            0.0
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical JSON encoding. The resume flag is
    /// excluded: resuming does not change what a run computes.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.experiment.resume_training = false;
        let json = serde_json::to_vec(&c).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }

    pub fn validate(&self) -> Result<()> {
        let e = |m: String| Err(Error::Config(m));
        let vq = &self.model.vq_model;
        let dec = &self.model.decoder;
        if !(1..=3).contains(&self.experiment.stage) {
            return e(format!(
                "experiment.stage must be 1, 2 or 3, got {}",
                self.experiment.stage
            ));
        }
        for (key, v) in [
            ("model.vq_model.codebook_size", vq.codebook_size),
            ("model.vq_model.token_size", vq.token_size),
            ("model.vq_model.vit_enc_patch_size", vq.vit_enc_patch_size),
            ("model.vq_model.num_latent_tokens", vq.num_latent_tokens),
            ("model.decoder.vit_dec_patch_size", dec.vit_dec_patch_size),
            ("model.decoder.codebook_size", dec.codebook_size),
            ("model.decoder.num_proxy_codes", dec.num_proxy_codes),
            ("dataset.crop_size", self.dataset.crop_size),
            ("dataset.resize_shorter_edge", self.dataset.resize_shorter_edge),
            ("training.per_gpu_batch_size", self.training.per_gpu_batch_size),
            (
                "training.gradient_accumulation_steps",
                self.training.gradient_accumulation_steps,
            ),
            ("generator.num_classes", self.generator.num_classes),
            ("generator.batch_size", self.generator.batch_size),
            ("generator.generation_steps", self.generator.generation_steps),
            ("generator.reconstruction_steps", self.generator.reconstruction_steps),
        ] {
            if v == 0 {
                return e(format!("{key} must be positive"));
            }
        }
        for (key, name) in [
            ("model.vq_model.vit_enc_model_size", &vq.vit_enc_model_size),
            ("model.decoder.vit_dec_model_size", &dec.vit_dec_model_size),
            ("generator.model_size", &self.generator.model_size),
        ] {
            if size_preset(name).is_none() {
                return e(format!("{key} = {name:?}; expected one of {SIZE_PRESETS:?}"));
            }
        }
        if vq.num_group != 1 {
            return e("model.vq_model.num_group must be 1 (grouped quantization is unsupported)".into());
        }
        if dec.num_latent_tokens != vq.num_latent_tokens {
            return e("model.decoder.num_latent_tokens must equal model.vq_model.num_latent_tokens".into());
        }
        if dec.token_size != vq.token_size {
            return e("model.decoder.token_size must equal model.vq_model.token_size".into());
        }
        let crop = self.dataset.crop_size;
        if !crop.is_multiple_of(vq.vit_enc_patch_size) || !crop.is_multiple_of(dec.vit_dec_patch_size) {
            return e(format!(
                "dataset.crop_size {crop} must be divisible by both patch sizes"
            ));
        }
        let grid = crop / dec.vit_dec_patch_size;
        if dec.num_proxy_codes != grid * grid {
            return e(format!(
                "model.decoder.num_proxy_codes = {} but a {crop}px crop with patch {} gives {}",
                dec.num_proxy_codes,
                dec.vit_dec_patch_size,
                grid * grid
            ));
        }
        if self.dataset.resize_shorter_edge < crop {
            return e("dataset.resize_shorter_edge must be at least dataset.crop_size".into());
        }
        if dec.guidance_scale != 0.0 {
            return e("model.decoder.guidance_scale must be 0.0 (guidance is not supported)".into());
        }
        if dec.guidance_decay != "constant" {
            return e("model.decoder.guidance_decay must be \"constant\"".into());
        }
        for (key, v) in [
            ("model.decoder.replace_prob", dec.replace_prob),
            ("losses.label_smoothing", self.losses.label_smoothing),
            ("optimizer.beta1", self.optimizer.beta1),
            ("optimizer.beta2", self.optimizer.beta2),
            ("training.ema_decay", self.training.ema_decay),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return e(format!("{key} must lie in [0, 1], got {v}"));
            }
        }
        for (key, v) in [
            ("model.vq_model.commitment_cost", vq.commitment_cost),
            ("model.decoder.randomize_temperature", dec.randomize_temperature),
            ("losses.quantizer_weight", self.losses.quantizer_weight),
            (
                "losses.loss_weight_unmasked_token",
                self.losses.loss_weight_unmasked_token,
            ),
            ("optimizer.weight_decay", self.optimizer.weight_decay),
            ("training.max_grad_norm", self.training.max_grad_norm),
            ("generator.temperature", self.generator.temperature),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return e(format!("{key} must be a finite non-negative number, got {v}"));
            }
        }
        for (key, v) in [
            ("optimizer.learning_rate", self.optimizer.learning_rate),
            ("lr_scheduler.learning_rate", self.lr_scheduler.learning_rate),
            ("generator.learning_rate", self.generator.learning_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return e(format!("{key} must be positive, got {v}"));
            }
        }
        if self.lr_scheduler.end_lr < 0.0 || self.lr_scheduler.end_lr > self.lr_scheduler.learning_rate {
            return e("lr_scheduler.end_lr must lie in [0, learning_rate]".into());
        }
        if !["synthetic", "simple"].contains(&self.dataset.dataset_type.as_str()) {
            return e(format!(
                "dataset.dataset_type = {:?}; expected \"synthetic\" or \"simple\"",
                self.dataset.dataset_type
            ));
        }
        if self.dataset.dataset_type == "simple" && self.dataset.manifest.is_none() {
            return e("dataset.dataset_type = \"simple\" requires dataset.manifest".into());
        }
        if !["fp32", "fp16", "bf16", "no"].contains(&self.training.mixed_precision.as_str()) {
            return e("training.mixed_precision must be one of fp32, fp16, bf16, no".into());
        }
        if self.training.single_step_generation && self.training.guided_mask {
            return e("training.single_step_generation and training.guided_mask are exclusive".into());
        }
        if self.experiment.stage == 3 {
            let l = &self.losses;
            if l.discriminator_type.as_deref() != Some("patchgan") {
                return e("losses.discriminator_type must be \"patchgan\"".into());
            }
            if l.reconstruction_loss.as_deref() != Some("l2") {
                return e("losses.reconstruction_loss must be \"l2\"".into());
            }
            if l.perceptual_loss.as_deref() != Some("classifier_features") {
                return e("losses.perceptual_loss must be \"classifier_features\"".into());
            }
            if !self.model.vq_model.finetune_decoder {
                return e("stage 3 requires model.vq_model.finetune_decoder = true".into());
            }
        } else if self.model.vq_model.finetune_decoder {
            return e("model.vq_model.finetune_decoder only applies to stage 3".into());
        }
        Ok(())
    }
}

/// Reads, defaults and validates a config file. An empty file yields the
/// desk-profile stage-1 defaults.
pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path.as_ref())?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let raw: Raw = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
    let stage = raw.experiment.as_ref().and_then(|e| e.stage).unwrap_or(1);
    let profile = raw.experiment.as_ref().and_then(|e| e.profile).unwrap_or(Profile::Desk);
    raw.resolve(stage, profile)
}

// Raw, all-optional mirror of the file format.

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Raw {
    experiment: Option<RawExperiment>,
    model: Option<RawModel>,
    losses: Option<RawLosses>,
    dataset: Option<RawDataset>,
    optimizer: Option<RawOptimizer>,
    lr_scheduler: Option<RawLr>,
    training: Option<RawTraining>,
    generator: Option<RawGenerator>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    stage: Option<u8>,
    profile: Option<Profile>,
    seed: Option<u64>,
    max_train_examples: Option<usize>,
    resume_training: Option<bool>,
    output_dir: Option<String>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    vq_model: Option<RawVq>,
    decoder: Option<RawDecoder>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVq {
    codebook_size: Option<usize>,
    token_size: Option<usize>,
    use_l2_norm: Option<bool>,
    commitment_cost: Option<f64>,
    vit_enc_model_size: Option<String>,
    vit_enc_patch_size: Option<usize>,
    num_latent_tokens: Option<usize>,
    num_group: Option<usize>,
    finetune_decoder: Option<bool>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDecoder {
    vit_dec_model_size: Option<String>,
    vit_dec_patch_size: Option<usize>,
    num_latent_tokens: Option<usize>,
    token_size: Option<usize>,
    num_proxy_codes: Option<usize>,
    codebook_size: Option<usize>,
    randomize_temperature: Option<f64>,
    guidance_scale: Option<f64>,
    guidance_decay: Option<String>,
    replace_prob: Option<f64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLosses {
    quantizer_weight: Option<f64>,
    label_smoothing: Option<f64>,
    loss_weight_unmasked_token: Option<f64>,
    discriminator_type: Option<String>,
    discriminator_start: Option<usize>,
    discriminator_factor: Option<f64>,
    discriminator_weight: Option<f64>,
    perceptual_loss: Option<String>,
    perceptual_weight: Option<f64>,
    reconstruction_loss: Option<String>,
    reconstruction_weight: Option<f64>,
    lecam_regularization_weight: Option<f64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    num_workers_per_gpu: Option<usize>,
    dataset_type: Option<String>,
    manifest: Option<String>,
    synthetic_train_size: Option<usize>,
    synthetic_val_size: Option<usize>,
    resize_shorter_edge: Option<usize>,
    crop_size: Option<usize>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptimizer {
    learning_rate: Option<f64>,
    discriminator_learning_rate: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    weight_decay: Option<f64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLr {
    learning_rate: Option<f64>,
    warmup_steps: Option<usize>,
    end_lr: Option<f64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTraining {
    gradient_accumulation_steps: Option<usize>,
    per_gpu_batch_size: Option<usize>,
    mixed_precision: Option<String>,
    enable_tf32: Option<bool>,
    use_ema: Option<bool>,
    ema_decay: Option<f64>,
    max_train_steps: Option<usize>,
    max_grad_norm: Option<f64>,
    use_mlmloss: Option<bool>,
    single_step_generation: Option<bool>,
    guided_mask: Option<bool>,
    eval_every: Option<usize>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGenerator {
    model_size: Option<String>,
    num_classes: Option<usize>,
    max_train_steps: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    generation_steps: Option<usize>,
    temperature: Option<f64>,
    reconstruction_steps: Option<usize>,
}

fn stage3_only(stage: u8, key: &str, present: bool) -> Result<()> {
    if present && stage != 3 {
        return Err(Error::Config(format!(
            "{key} only applies to stage 3 (pixel fine-tuning); this config is stage {stage}"
        )));
    }
    Ok(())
}

impl Raw {
    fn resolve(self, stage: u8, profile: Profile) -> Result<RunConfig> {
        if !(1..=3).contains(&stage) {
            return Err(Error::Config(format!(
                "experiment.stage must be 1, 2 or 3, got {stage}"
            )));
        }
        let desk = profile == Profile::Desk;
        let pick = |d: usize, c: usize| if desk { d } else { c };

        let ex = self.experiment.unwrap_or_default();
        let experiment = ExperimentConfig {
            stage,
            seed: ex.seed.unwrap_or(0),
            max_train_examples: ex.max_train_examples.unwrap_or(pick(20_000, 4_096)),
            resume_training: ex.resume_training.unwrap_or(true),
            output_dir: ex.output_dir.unwrap_or_else(|| "runs/default".into()),
        };

        let model = self.model.unwrap_or_default();
        let rv = model.vq_model.unwrap_or_default();
        let crop = self.dataset.as_ref().and_then(|d| d.crop_size).unwrap_or(pick(32, 16));
        let latent = rv.num_latent_tokens.unwrap_or(pick(64, 8));
        let token_size = rv.token_size.unwrap_or(pick(32, 8));
        let vq_model = VqModelConfig {
            codebook_size: rv.codebook_size.unwrap_or(pick(8192, 64)),
            token_size,
            use_l2_norm: rv.use_l2_norm.unwrap_or(true),
            commitment_cost: rv.commitment_cost.unwrap_or(0.25),
            vit_enc_model_size: rv
                .vit_enc_model_size
                .unwrap_or_else(|| if desk { "desk" } else { "micro" }.into()),
            vit_enc_patch_size: rv.vit_enc_patch_size.unwrap_or(4),
            num_latent_tokens: latent,
            num_group: rv.num_group.unwrap_or(1),
            finetune_decoder: rv.finetune_decoder.unwrap_or(stage == 3),
        };
        let rd = model.decoder.unwrap_or_default();
        let dec_patch = rd.vit_dec_patch_size.unwrap_or(4);
        let grid = crop.checked_div(dec_patch).unwrap_or(0);
        let decoder = DecoderConfig {
            vit_dec_model_size: rd
                .vit_dec_model_size
                .unwrap_or_else(|| if desk { "desk" } else { "micro" }.into()),
            vit_dec_patch_size: dec_patch,
            num_latent_tokens: rd.num_latent_tokens.unwrap_or(latent),
            token_size: rd.token_size.unwrap_or(token_size),
            num_proxy_codes: rd.num_proxy_codes.unwrap_or(grid * grid),
            codebook_size: rd.codebook_size.unwrap_or(pick(1024, 32)),
            randomize_temperature: rd.randomize_temperature.unwrap_or(1.0),
            guidance_scale: rd.guidance_scale.unwrap_or(0.0),
            guidance_decay: rd.guidance_decay.unwrap_or_else(|| "constant".into()),
            replace_prob: rd.replace_prob.unwrap_or(1.0),
        };

        let rl = self.losses.unwrap_or_default();
        stage3_only(stage, "losses.discriminator_type", rl.discriminator_type.is_some())?;
        stage3_only(stage, "losses.discriminator_start", rl.discriminator_start.is_some())?;
        stage3_only(stage, "losses.discriminator_factor", rl.discriminator_factor.is_some())?;
        stage3_only(stage, "losses.discriminator_weight", rl.discriminator_weight.is_some())?;
        stage3_only(stage, "losses.perceptual_loss", rl.perceptual_loss.is_some())?;
        stage3_only(stage, "losses.perceptual_weight", rl.perceptual_weight.is_some())?;
        stage3_only(stage, "losses.reconstruction_loss", rl.reconstruction_loss.is_some())?;
        stage3_only(
            stage,
            "losses.reconstruction_weight",
            rl.reconstruction_weight.is_some(),
        )?;
        stage3_only(
            stage,
            "losses.lecam_regularization_weight",
            rl.lecam_regularization_weight.is_some(),
        )?;
        let s3 = stage == 3;
        let only3 = |v: Option<f64>, d: f64| if s3 { Some(v.unwrap_or(d)) } else { None };
        let losses = LossConfig {
            quantizer_weight: rl.quantizer_weight.unwrap_or(1.0),
            label_smoothing: rl.label_smoothing.unwrap_or(0.0),
            loss_weight_unmasked_token: rl.loss_weight_unmasked_token.unwrap_or(0.1),
            discriminator_type: s3.then(|| rl.discriminator_type.unwrap_or_else(|| "patchgan".into())),
            discriminator_start: s3.then(|| rl.discriminator_start.unwrap_or(pick(400, 100))),
            discriminator_factor: only3(rl.discriminator_factor, 1.0),
            discriminator_weight: only3(rl.discriminator_weight, 0.5),
            perceptual_loss: s3.then(|| rl.perceptual_loss.unwrap_or_else(|| "classifier_features".into())),
            perceptual_weight: only3(rl.perceptual_weight, 1.0),
            reconstruction_loss: s3.then(|| rl.reconstruction_loss.unwrap_or_else(|| "l2".into())),
            reconstruction_weight: only3(rl.reconstruction_weight, 1.0),
            lecam_regularization_weight: only3(rl.lecam_regularization_weight, 0.001),
        };

        let rds = self.dataset.unwrap_or_default();
        let dataset = DatasetConfig {
            num_workers_per_gpu: rds.num_workers_per_gpu.unwrap_or(12),
            dataset_type: rds.dataset_type.unwrap_or_else(|| "synthetic".into()),
            manifest: rds.manifest,
            synthetic_train_size: rds.synthetic_train_size.unwrap_or(pick(20_000, 4_096)),
            synthetic_val_size: rds.synthetic_val_size.unwrap_or(pick(1_000, 256)),
            resize_shorter_edge: rds.resize_shorter_edge.unwrap_or(crop),
            crop_size: crop,
        };

        let ro = self.optimizer.unwrap_or_default();
        stage3_only(
            stage,
            "optimizer.discriminator_learning_rate",
            ro.discriminator_learning_rate.is_some(),
        )?;
        let lr_default = if desk { 1e-4 } else { 1e-3 };
        let optimizer = OptimizerConfig {
            learning_rate: ro.learning_rate.unwrap_or(lr_default),
            discriminator_learning_rate: only3(ro.discriminator_learning_rate, lr_default),
            beta1: ro.beta1.unwrap_or(0.9),
            beta2: ro.beta2.unwrap_or(if s3 { 0.999 } else { 0.99 }),
            weight_decay: ro.weight_decay.unwrap_or(1e-4),
        };
        let rlr = self.lr_scheduler.unwrap_or_default();
        let lr_scheduler = LrSchedulerConfig {
            learning_rate: rlr.learning_rate.unwrap_or(optimizer.learning_rate),
            warmup_steps: rlr.warmup_steps.unwrap_or(pick(250, 50)),
            end_lr: rlr.end_lr.unwrap_or(optimizer.learning_rate / 10.0),
        };

        let rt = self.training.unwrap_or_default();
        let default_steps = match (stage, desk) {
            (1, true) => 5_000,
            (_, true) => 20_000,
            (1, false) => 300,
            (2, false) => 1_200,
            _ => 300,
        };
        let training = TrainingConfig {
            gradient_accumulation_steps: rt.gradient_accumulation_steps.unwrap_or(if s3 { 2 } else { 1 }),
            per_gpu_batch_size: rt.per_gpu_batch_size.unwrap_or(if s3 { 8 } else { 32 }),
            mixed_precision: rt.mixed_precision.unwrap_or_else(|| "fp16".into()),
            enable_tf32: rt.enable_tf32.unwrap_or(true),
            use_ema: rt.use_ema.unwrap_or(true),
            ema_decay: rt.ema_decay.unwrap_or(if desk { 0.999 } else { 0.98 }),
            max_train_steps: rt.max_train_steps.unwrap_or(default_steps),
            max_grad_norm: rt.max_grad_norm.unwrap_or(1.0),
            use_mlmloss: rt.use_mlmloss.unwrap_or(true),
            single_step_generation: rt.single_step_generation.unwrap_or(stage == 1),
            guided_mask: rt.guided_mask.unwrap_or(stage != 1),
            eval_every: rt.eval_every.unwrap_or(pick(1_000, 100)),
        };

        let rg = self.generator.unwrap_or_default();
        let generator = GeneratorConfig {
            model_size: rg
                .model_size
                .unwrap_or_else(|| if desk { "small" } else { "micro" }.into()),
            num_classes: rg.num_classes.unwrap_or(10),
            max_train_steps: rg.max_train_steps.unwrap_or(pick(20_000, 2_000)),
            batch_size: rg.batch_size.unwrap_or(pick(64, 32)),
            learning_rate: rg.learning_rate.unwrap_or(if desk { 2e-4 } else { 2e-3 }),
            generation_steps: rg.generation_steps.unwrap_or(8),
            temperature: rg.temperature.unwrap_or(1.0),
            reconstruction_steps: rg.reconstruction_steps.unwrap_or(8),
        };

        let cfg = RunConfig {
            experiment,
            model: ModelSection { vq_model, decoder },
            losses,
            dataset,
            optimizer,
            lr_scheduler,
            training,
            generator,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_desk_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.experiment.stage, 1);
        assert_eq!(cfg.model.vq_model.commitment_cost, 0.25);
        assert_eq!(cfg.model.decoder.replace_prob, 1.0);
        assert_eq!(cfg.model.vq_model.codebook_size, 8192);
        assert_eq!(cfg.model.vq_model.token_size, 32);
        assert!(cfg.model.vq_model.use_l2_norm);
        assert_eq!(cfg.model.vq_model.num_latent_tokens, 64);
        assert_eq!(cfg.model.decoder.randomize_temperature, 1.0);
        assert_eq!(cfg.losses.loss_weight_unmasked_token, 0.1);
        assert_eq!(cfg.optimizer.beta2, 0.99);
        assert_eq!(cfg.training.max_train_steps, 5_000);
        assert!(cfg.training.single_step_generation && !cfg.training.guided_mask);
        assert_eq!(cfg.model.decoder.num_proxy_codes, 64);
        assert_eq!(cfg.losses.discriminator_start, None);
    }

    #[test]
    fn stage_defaults_follow_the_table() {
        let s2 = RunConfig::defaults(2, Profile::Desk).unwrap();
        assert!(!s2.training.single_step_generation && s2.training.guided_mask);
        assert_eq!(s2.training.max_train_steps, 20_000);
        assert_eq!(s2.effective_replace_ratio(), 1.0);
        let s3 = RunConfig::defaults(3, Profile::Desk).unwrap();
        assert_eq!(s3.optimizer.beta2, 0.999);
        assert_eq!(s3.training.per_gpu_batch_size, 8);
        assert_eq!(s3.training.gradient_accumulation_steps, 2);
        assert_eq!(s3.losses.discriminator_weight, Some(0.5));
        assert_eq!(s3.losses.lecam_regularization_weight, Some(0.001));
        assert!(s3.model.vq_model.finetune_decoder);
    }

    #[test]
    fn range_and_key_errors() {
        let err = parse_config("[model.vq_model]\ncodebook_size = 0\n").unwrap_err();
        assert!(err.to_string().contains("codebook_size"), "{err}");
        let err = parse_config("foo = 1\n").unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
        let err = parse_config("[training]\nfoo = 1\n").unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
        let err = parse_config("[losses]\ndiscriminator_start = 5\n").unwrap_err();
        assert!(err.to_string().contains("only applies to stage 3"), "{err}");
        assert!(parse_config("[experiment]\nstage = 3\n[losses]\ndiscriminator_start = 5\n").is_ok());
        assert!(parse_config("[model.decoder]\nguidance_scale = 1.5\n").is_err());
        assert!(parse_config("[model.decoder]\nreplace_prob = 1.5\n").is_err());
        assert!(parse_config("[model.decoder]\nnum_proxy_codes = 10\n").is_err());
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let cfg = RunConfig::defaults(2, Profile::Ci).unwrap();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.experiment.seed += 1;
        assert_ne!(other.hash(), cfg.hash());
    }
}
