//! Orchestration of the three training stages: corpus and teacher setup,
//! per-stage checkpoint trails, resumption, evaluation and loss curves.
//!
//! Output layout under the run directory:
//!
//! ```text
//! losses.csv                  step,stage,term,value,config_hash
//! stage{s}/config.toml        resolved config of the stage
//! stage{s}/step-{n:07}.ckpt   periodic checkpoints
//! stage{s}/final.ckpt         end-of-stage checkpoint
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Device;
use log::info;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{ingest, synthetic_splits, BatchStream, Crop, Dataset, DatasetManifest, ImageBatch, IngestOptions};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::finetune::{FinetuneState, FinetuneTrainer};
use crate::metrics::{heldout_eval, EvalOptions, FeatureNet};
use crate::model::TokenizerModel;
use crate::multistep::{make_schedule, multistep_reconstruct, ScheduleMode};
use crate::quantizer::QuantizedLatent;
use crate::teacher::{PixelHead, TeacherTokenizer, TeacherTokens};
use crate::training::{LossReport, TokenizerTrainer};

/// Width of the feature extractor's embedding.
pub const FEATURE_DIM: usize = 32;
/// Optimisation steps for the feature extractor.
pub const FEATURE_STEPS: usize = 400;
/// Patches sampled for the teacher's k-means fit.
pub const TEACHER_PATCHES: usize = 20_000;
/// Held-out images scored at each evaluation.
pub const EVAL_IMAGES: usize = 256;

#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Dataset,
    pub val: Dataset,
}

/// Loads the configured corpus: the built-in synthetic shapes or a manifest.
pub fn load_corpus(cfg: &RunConfig, exec: Execution) -> Result<Corpus> {
    let d = &cfg.dataset;
    let seed = cfg.experiment.seed;
    let (train, val) = match d.dataset_type.as_str() {
        "synthetic" => synthetic_splits(seed, d.synthetic_train_size, d.synthetic_val_size, d.crop_size, exec),
        _ => {
            let path = d
                .manifest
                .as_ref()
                .ok_or_else(|| Error::Config("dataset.manifest is unset".into()))?;
            let m = DatasetManifest::load(path)?;
            let opts = |crop| IngestOptions {
                resize_shorter_edge: d.resize_shorter_edge,
                crop_size: d.crop_size,
                crop,
                seed,
            };
            let tr = ingest(&m.root, &m.train, m.num_classes, &opts(Crop::Random), exec)?;
            let va = ingest(&m.root, &m.val, m.num_classes, &opts(Crop::Center), exec)?;
            if tr.skipped + va.skipped > 0 {
                log::warn!("skipped {} unreadable images", tr.skipped + va.skipped);
            }
            (tr.dataset, va.dataset)
        }
    };
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("corpus has an empty split".into()));
    }
    let cap = cfg.experiment.max_train_examples.max(1).min(train.len());
    Ok(Corpus {
        train: train.head(cap),
        val,
    })
}

/// Frozen teacher, its pixel head, and the feature extractor used by the
/// perceptual loss and the Fréchet proxy.
#[derive(Clone, Debug)]
pub struct Assets {
    pub teacher: TeacherTokenizer,
    pub head: PixelHead,
    pub features: FeatureNet,
}

impl Assets {
    pub fn fit(cfg: &RunConfig, corpus: &Corpus, exec: Execution) -> Result<Self> {
        let seed = cfg.experiment.seed;
        let dec = &cfg.model.decoder;
        let (teacher, rep) = TeacherTokenizer::fit(
            &corpus.train.images,
            dec.vit_dec_patch_size,
            dec.codebook_size,
            TEACHER_PATCHES,
            seed,
            exec,
        )?;
        info!("teacher fit: {} iterations, inertia {:.4}", rep.iterations, rep.inertia);
        let head = PixelHead::new(&teacher, seed, &Device::Cpu)?;
        let features = FeatureNet::new(cfg.image_size(), corpus.train.num_classes, FEATURE_DIM, seed)?;
        let rep = features.train(&corpus.train.images, &corpus.train.labels, FEATURE_STEPS, seed)?;
        info!("feature net: train accuracy {:.3}", rep.train_accuracy);
        Ok(Self {
            teacher,
            head,
            features,
        })
    }

    fn save_into(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.put_teacher(&self.teacher)?;
        ck.put_store("pixel_head", &self.head.store)?;
        ck.put_store("features", &self.features.store)?;
        ck.set_meta("features/classes", &self.features.classes)?;
        ck.set_meta("features/dim", &self.features.feature_dim)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let teacher = ck.teacher()?;
        let head = PixelHead::new(&teacher, 0, &Device::Cpu)?;
        ck.load_store("pixel_head", &head.store)?;
        let features = FeatureNet::new(
            teacher.image_size,
            ck.meta("features/classes")?,
            ck.meta("features/dim")?,
            0,
        )?;
        ck.load_store("features", &features.store)?;
        Ok(Self {
            teacher,
            head,
            features,
        })
    }
}

/// A trained tokenizer ready for inference.
#[derive(Debug)]
pub struct TrainedTokenizer {
    pub cfg: RunConfig,
    pub model: TokenizerModel,
    pub assets: Assets,
    pub stage: u8,
}

impl TrainedTokenizer {
    /// Loads a checkpoint; with `ema` the averaged weights replace the raw
    /// ones where available.
    pub fn load(path: &Path, ema: bool) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let model = TokenizerModel::from_config(&ck.config, 0)?;
        ck.load_model("model", &model)?;
        let assets = Assets::from_checkpoint(&ck)?;
        if ema && ck.meta.contains_key("ema/decay") {
            let mut vars = model.all_vars();
            vars.extend(assets.head.store.vars().iter().map(|(k, v)| (k.clone(), v.clone())));
            for (name, var) in vars {
                if let Some(b) = ck.blocks.get(&format!("ema/{name}")) {
                    let t = candle_core::Tensor::from_slice(&b.data, var.shape(), var.device())?;
                    var.set(&t)?;
                }
            }
        }
        Ok(Self {
            cfg: ck.config.clone(),
            model,
            assets,
            stage: ck.stage,
        })
    }

    pub fn encode(&self, images: &ImageBatch, exec: Execution) -> Result<QuantizedLatent> {
        Ok(self.model.latents(images, exec)?.zq)
    }

    pub fn reconstruct_tokens(
        &self,
        zq: &QuantizedLatent,
        steps: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<TeacherTokens> {
        let schedule = make_schedule(steps, self.model.dims.grid_len, ScheduleMode::Cosine)?;
        Ok(multistep_reconstruct(&zq.data, &self.model, &schedule, temperature, seed, false)?.tokens)
    }

    pub fn decode_pixels(&self, tokens: &TeacherTokens) -> Result<ImageBatch> {
        self.assets.head.decode(tokens)
    }

    /// Encode, reconstruct in `steps` passes and decode to pixels.
    pub fn reconstruct(
        &self,
        images: &ImageBatch,
        steps: usize,
        temperature: f64,
        seed: u64,
        exec: Execution,
    ) -> Result<ImageBatch> {
        let zq = self.encode(images, exec)?;
        self.decode_pixels(&self.reconstruct_tokens(&zq, steps, temperature, seed)?)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    pub exec: Execution,
    /// Stop after this many steps in this invocation (checkpointing first);
    /// used to exercise resumption.
    pub step_budget: Option<usize>,
    pub log_every: usize,
}

impl TrainOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            exec: Execution::default(),
            step_budget: None,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub stage: u8,
    /// Every checkpoint written by this invocation, in order.
    pub checkpoints: Vec<PathBuf>,
    /// `true` once the stage's final checkpoint exists.
    pub finished: bool,
    pub last_report: Option<LossReport>,
    pub warnings: Vec<String>,
}

pub fn stage_dir(out: &Path, stage: u8) -> PathBuf {
    out.join(format!("stage{stage}"))
}

pub fn final_checkpoint(out: &Path, stage: u8) -> PathBuf {
    stage_dir(out, stage).join("final.ckpt")
}

fn step_checkpoint(out: &Path, stage: u8, step: usize) -> PathBuf {
    stage_dir(out, stage).join(format!("step-{step:07}.ckpt"))
}

/// Highest-step periodic checkpoint of a stage, if any.
pub fn latest_checkpoint(out: &Path, stage: u8) -> Result<Option<PathBuf>> {
    let dir = stage_dir(out, stage);
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(&dir)? {
        let p = entry?.path();
        let step = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step-"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(s) = step {
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, p));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Appends loss rows; on open, rows of `stage` at or after `from_step` are
/// dropped so a resumed run does not duplicate them.
pub struct LossCsv {
    file: fs::File,
    hash: String,
}

impl LossCsv {
    pub const HEADER: &'static str = "step,stage,term,value,config_hash";

    pub fn open(path: &Path, stage: u8, from_step: usize, config_hash: &str) -> Result<Self> {
        let mut kept = vec![Self::HEADER.to_string()];
        if path.exists() {
            for line in fs::read_to_string(path)?.lines().skip(1) {
                let mut it = line.split(',');
                let step: Option<usize> = it.next().and_then(|s| s.parse().ok());
                let st: Option<u8> = it.next().and_then(|s| s.parse().ok());
                if let (Some(s), Some(g)) = (step, st) {
                    if g < stage || (g == stage && s < from_step) {
                        kept.push(line.to_string());
                    }
                }
            }
        }
        fs::write(path, kept.join("\n") + "\n")?;
        Ok(Self {
            file: fs::OpenOptions::new().append(true).open(path)?,
            hash: config_hash.to_string(),
        })
    }

    pub fn write(&mut self, step: usize, stage: u8, term: &str, value: f64) -> Result<()> {
        writeln!(self.file, "{step},{stage},{term},{value},{}", self.hash)?;
        Ok(())
    }

    pub fn write_report(&mut self, r: &LossReport) -> Result<()> {
        for t in &r.terms {
            self.write(r.step, r.stage, &t.name, t.value)?;
        }
        self.write(r.step, r.stage, "total", r.total)?;
        self.write(r.step, r.stage, "lr", r.lr)?;
        self.write(r.step, r.stage, "grad_norm", r.grad_norm)
    }
}

/// Runs the given stages in order. Each stage after the first of the
/// sequence starts from the previous stage's final checkpoint, which must
/// exist on disk if that stage is not part of the sequence.
pub fn run_training(cfgs: &[RunConfig], opts: &TrainOptions) -> Result<Vec<StageOutcome>> {
    for w in cfgs.windows(2) {
        if w[1].experiment.stage != w[0].experiment.stage + 1 {
            return Err(Error::Config(format!(
                "stages must run in order, got {} then {}",
                w[0].experiment.stage, w[1].experiment.stage
            )));
        }
    }
    let mut out = Vec::new();
    for cfg in cfgs {
        let o = run_stage(cfg, opts)?;
        let done = o.finished;
        out.push(o);
        if !done {
            break;
        }
    }
    Ok(out)
}

enum Trainer {
    Token(Box<TokenizerTrainer>),
    Finetune(Box<FinetuneTrainer>),
}

impl Trainer {
    fn step(&self) -> usize {
        match self {
            Trainer::Token(t) => t.step,
            Trainer::Finetune(t) => t.step,
        }
    }
}

/// Runs (or resumes) a single stage.
pub fn run_stage(cfg: &RunConfig, opts: &TrainOptions) -> Result<StageOutcome> {
    cfg.validate()?;
    let stage = cfg.experiment.stage;
    let out = &opts.out_dir;
    let fin = final_checkpoint(out, stage);
    if cfg.experiment.resume_training && fin.exists() {
        info!("stage {stage} already complete at {}", fin.display());
        return Ok(StageOutcome {
            stage,
            checkpoints: vec![],
            finished: true,
            last_report: None,
            warnings: vec![],
        });
    }
    fs::create_dir_all(stage_dir(out, stage))?;
    fs::write(stage_dir(out, stage).join("config.toml"), cfg.to_toml()?)?;

    let resume = if cfg.experiment.resume_training {
        latest_checkpoint(out, stage)?
            .map(|p| Checkpoint::load(&p))
            .transpose()?
    } else {
        None
    };
    if let Some(ck) = &resume {
        if ck.config.hash() != cfg.hash() {
            return Err(Error::Config(format!(
                "stage {stage} checkpoint at step {} was written with a different config (hash {})",
                ck.step,
                ck.config.hash()
            )));
        }
    }

    let corpus = load_corpus(cfg, opts.exec)?;
    let model = TokenizerModel::from_config(cfg, cfg.experiment.seed)?;
    let assets = match (&resume, stage) {
        (Some(ck), _) => Assets::from_checkpoint(ck)?,
        (None, 1) => Assets::fit(cfg, &corpus, opts.exec)?,
        (None, _) => {
            let prev = Checkpoint::load(&final_checkpoint(out, stage - 1))?;
            prev.load_model("model", &model)?;
            Assets::from_checkpoint(&prev)?
        }
    };
    let train_tokens = assets.teacher.tokenize(&corpus.train.images, opts.exec)?;
    let val = corpus.val.head(EVAL_IMAGES);
    let val_tokens = assets.teacher.tokenize(&val.images, opts.exec)?;

    let mut trainer = if stage == 3 {
        Trainer::Finetune(Box::new(FinetuneTrainer::new(
            cfg.clone(),
            model,
            assets.head.clone(),
            assets.features.clone(),
            opts.exec,
        )?))
    } else {
        Trainer::Token(Box::new(TokenizerTrainer::new(cfg.clone(), model, opts.exec)?))
    };
    if let Some(ck) = &resume {
        restore(&mut trainer, ck)?;
        info!("resumed stage {stage} at step {}", ck.step);
    }

    let total = cfg.training.max_train_steps;
    let start = trainer.step();
    let mut csv = LossCsv::open(&out.join("losses.csv"), stage, start, &cfg.hash())?;
    let stream = BatchStream::new(corpus.train.len(), cfg.training.per_gpu_batch_size, cfg.experiment.seed)?;
    let budget_end = opts.step_budget.map_or(total, |b| (start + b).min(total));
    let every = cfg.training.eval_every.max(1);
    let mut checkpoints = Vec::new();
    let mut last = None;
    for step in start..budget_end {
        // Stage offsets keep each stage's batch sequence distinct.
        let idx = stream.indices(step + stage_offset(stage));
        let images = corpus.train.images.select(&idx);
        let report = match &mut trainer {
            Trainer::Token(t) => t.train_step(&images, &train_tokens.select(&idx))?,
            Trainer::Finetune(t) => t.train_step(&images)?,
        };
        csv.write_report(&report)?;
        if opts.log_every > 0 && step % opts.log_every == 0 {
            info!(
                "stage {stage} step {step}: total {:.4} lr {:.2e}",
                report.total, report.lr
            );
        }
        last = Some(report);
        let done = step + 1;
        if done % every == 0 || done == total {
            evaluate(&trainer, &val.images, &val_tokens, cfg, &mut csv, done)?;
            if done < total {
                let p = step_checkpoint(out, stage, done);
                snapshot(&trainer, &assets, cfg)?.save(&p)?;
                checkpoints.push(p);
            }
        }
    }
    let end = trainer.step();
    if end < total {
        if checkpoints
            .last()
            .is_none_or(|p| p != &step_checkpoint(out, stage, end))
            && end > start
        {
            let p = step_checkpoint(out, stage, end);
            snapshot(&trainer, &assets, cfg)?.save(&p)?;
            checkpoints.push(p);
        }
    } else {
        snapshot(&trainer, &assets, cfg)?.save(&fin)?;
        checkpoints.push(fin);
    }
    let warnings = match &trainer {
        Trainer::Finetune(t) => t.state.warnings.clone(),
        Trainer::Token(_) => vec![],
    };
    Ok(StageOutcome {
        stage,
        checkpoints,
        finished: end >= total,
        last_report: last,
        warnings,
    })
}

fn stage_offset(stage: u8) -> usize {
    (stage as usize - 1) << 32
}

fn evaluate(
    trainer: &Trainer,
    images: &ImageBatch,
    tokens: &TeacherTokens,
    cfg: &RunConfig,
    csv: &mut LossCsv,
    step: usize,
) -> Result<()> {
    let stage = cfg.experiment.stage;
    match trainer {
        Trainer::Token(t) => {
            let e = heldout_eval(
                &t.model,
                images,
                tokens,
                &EvalOptions {
                    steps: cfg.generator.reconstruction_steps,
                    mode: ScheduleMode::Cosine,
                    temperature: cfg.model.decoder.randomize_temperature,
                    seed: cfg.experiment.seed,
                    batch: 128,
                },
                t.exec,
            )?;
            csv.write(step, stage, "eval_masked_ce", e.masked_ce)?;
            csv.write(step, stage, "eval_token_accuracy", e.token_accuracy)?;
            info!("stage {stage} eval at {step}: masked CE {:.4}", e.masked_ce);
        }
        Trainer::Finetune(t) => {
            let mut sq = 0.0;
            for chunk in (0..images.batch).collect::<Vec<_>>().chunks(64) {
                let sub = images.select(chunk);
                let rec = t.reconstruct_soft(&sub)?;
                let target = sub.to_tensor(t.model.device())?;
                sq += (rec - target)?
                    .sqr()?
                    .sum_all()?
                    .to_dtype(candle_core::DType::F64)?
                    .to_scalar::<f64>()?;
            }
            let l2 = sq / images.data.len() as f64;
            csv.write(step, stage, "eval_pixel_l2", l2)?;
            info!("stage 3 eval at {step}: pixel l2 {l2:.5}");
        }
    }
    Ok(())
}

fn snapshot(trainer: &Trainer, assets: &Assets, cfg: &RunConfig) -> Result<Checkpoint> {
    let stage = cfg.experiment.stage;
    let mut ck = Checkpoint::new(stage, trainer.step(), cfg.clone());
    ck.set_meta(
        "rng",
        &serde_json::json!({"scheme": "step-indexed", "seed": cfg.experiment.seed}),
    )?;
    match trainer {
        Trainer::Token(t) => {
            assets.save_into(&mut ck)?;
            ck.put_model("model", &t.model)?;
            ck.put_optimizer("opt", &t.opt)?;
            if let Some(e) = &t.ema {
                ck.put_ema("ema", e)?;
            }
        }
        Trainer::Finetune(t) => {
            let live = Assets {
                head: t.head.clone(),
                ..assets.clone()
            };
            live.save_into(&mut ck)?;
            ck.put_model("model", &t.model)?;
            ck.put_optimizer("opt", &t.gen_opt)?;
            ck.put_store("disc", &t.disc.store)?;
            ck.put_optimizer("disc_opt", &t.disc_opt)?;
            ck.set_meta("finetune", &t.state)?;
            if let Some(e) = &t.ema {
                ck.put_ema("ema", e)?;
            }
        }
    }
    Ok(ck)
}

fn restore(trainer: &mut Trainer, ck: &Checkpoint) -> Result<()> {
    match trainer {
        Trainer::Token(t) => {
            ck.load_model("model", &t.model)?;
            ck.load_optimizer("opt", &mut t.opt)?;
            if let Some(e) = t.ema.as_mut() {
                ck.load_ema("ema", e)?;
            }
            t.step = ck.step;
        }
        Trainer::Finetune(t) => {
            ck.load_model("model", &t.model)?;
            ck.load_store("pixel_head", &t.head.store)?;
            ck.load_optimizer("opt", &mut t.gen_opt)?;
            ck.load_store("disc", &t.disc.store)?;
            ck.load_optimizer("disc_opt", &mut t.disc_opt)?;
            t.state = ck.meta::<FinetuneState>("finetune")?;
            if let Some(e) = t.ema.as_mut() {
                ck.load_ema("ema", e)?;
            }
            t.step = ck.step;
        }
    }
    Ok(())
}
