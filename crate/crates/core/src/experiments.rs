//! Ablation sweeps: replacement ratio, warm-up, and step-count studies on a
//! shared corpus, teacher and feature extractor.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::BatchStream;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{frechet_distance, heldout_eval, per_step_diagnostics, EvalOptions, Features, StepDiagnostics};
use crate::model::TokenizerModel;
use crate::multistep::ScheduleMode;
use crate::pipeline::{load_corpus, Assets, Corpus};
use crate::teacher::TeacherTokens;
use crate::training::TokenizerTrainer;

/// One evaluated configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub seed: u64,
    pub replace_ratio: f64,
    pub warmup: bool,
    pub train_steps: usize,
    pub eval_steps: usize,
    pub masked_ce: f64,
    pub token_accuracy: f64,
    pub frechet: f64,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str =
        "name,seed,replace_ratio,warmup,train_steps,eval_steps,masked_ce,token_accuracy,frechet";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.name,
            self.seed,
            self.replace_ratio,
            self.warmup,
            self.train_steps,
            self.eval_steps,
            self.masked_ce,
            self.token_accuracy,
            self.frechet
        )
    }
}

/// Shared state for a family of runs with the same seed.
pub struct Study {
    pub stage1: RunConfig,
    pub stage2: RunConfig,
    pub corpus: Corpus,
    pub assets: Assets,
    pub train_tokens: TeacherTokens,
    pub val_tokens: TeacherTokens,
    pub real_features: Features,
    pub exec: Execution,
}

impl Study {
    pub fn prepare(stage1: RunConfig, stage2: RunConfig, exec: Execution) -> Result<Self> {
        if stage1.experiment.stage != 1 || stage2.experiment.stage != 2 {
            return Err(Error::Config("a study needs a stage-1 and a stage-2 config".into()));
        }
        if stage1.experiment.seed != stage2.experiment.seed {
            return Err(Error::Config("stage configs of a study must share the seed".into()));
        }
        let corpus = load_corpus(&stage1, exec)?;
        let assets = Assets::fit(&stage1, &corpus, exec)?;
        let train_tokens = assets.teacher.tokenize(&corpus.train.images, exec)?;
        let val_tokens = assets.teacher.tokenize(&corpus.val.images, exec)?;
        let real_features = assets.features.features(&corpus.val.images)?;
        Ok(Self {
            stage1,
            stage2,
            corpus,
            assets,
            train_tokens,
            val_tokens,
            real_features,
            exec,
        })
    }

    pub fn seed(&self) -> u64 {
        self.stage1.experiment.seed
    }

    fn train(&self, cfg: RunConfig, model: TokenizerModel, stream_offset: usize) -> Result<TokenizerModel> {
        let stream = BatchStream::new(
            self.corpus.train.len(),
            cfg.training.per_gpu_batch_size,
            cfg.experiment.seed,
        )?;
        let steps = cfg.training.max_train_steps;
        let mut t = TokenizerTrainer::new(cfg, model, self.exec)?;
        for step in 0..steps {
            let idx = stream.indices(stream_offset + step);
            t.train_step(&self.corpus.train.images.select(&idx), &self.train_tokens.select(&idx))?;
        }
        Ok(t.model)
    }

    /// Stage 1 from a fresh model.
    pub fn warm_start(&self) -> Result<TokenizerModel> {
        let model = TokenizerModel::from_config(&self.stage1, self.seed())?;
        self.train(self.stage1.clone(), model, 0)
    }

    /// Stage 2 at `ratio`, from a copy of `init` (or from scratch with
    /// `steps` overriding the stage length).
    pub fn stage2(&self, init: Option<&TokenizerModel>, ratio: f64, steps: usize) -> Result<TokenizerModel> {
        let mut cfg = self.stage2.clone();
        cfg.model.decoder.replace_prob = ratio;
        cfg.training.max_train_steps = steps;
        let model = TokenizerModel::from_config(&cfg, self.seed())?;
        if let Some(src) = init {
            copy_params(src, &model)?;
        }
        let offset = if init.is_some() {
            self.stage1.training.max_train_steps
        } else {
            0
        };
        self.train(cfg, model, offset)
    }

    pub fn eval_options(&self, steps: usize) -> EvalOptions {
        EvalOptions {
            steps,
            mode: ScheduleMode::Cosine,
            temperature: self.stage2.model.decoder.randomize_temperature,
            seed: self.seed() ^ 0xE7A1,
            batch: 128,
        }
    }

    /// Held-out masked cross-entropy, token accuracy and Fréchet proxy of
    /// `steps`-step reconstructions.
    pub fn evaluate(&self, model: &TokenizerModel, steps: usize) -> Result<(f64, f64, f64)> {
        let e = heldout_eval(
            model,
            &self.corpus.val.images,
            &self.val_tokens,
            &self.eval_options(steps),
            self.exec,
        )?;
        let tokens = e.tokens.as_ref().expect("heldout_eval returns tokens");
        let images = self.assets.head.decode(tokens)?;
        let fd = frechet_distance(&self.real_features, &self.assets.features.features(&images)?)?;
        Ok((e.masked_ce, e.token_accuracy, fd))
    }

    pub fn diagnostics(&self, model: &TokenizerModel, steps: usize) -> Result<StepDiagnostics> {
        per_step_diagnostics(
            model,
            &self.corpus.val.images,
            &self.val_tokens,
            &self.eval_options(steps),
            self.exec,
        )
    }

    /// Fréchet proxy of the teacher's own reconstructions: the floor any
    /// tokenizer can reach with this teacher.
    pub fn teacher_frechet(&self) -> Result<f64> {
        let rec = self.assets.head.decode(&self.val_tokens)?;
        frechet_distance(&self.real_features, &self.assets.features.features(&rec)?)
    }

    fn row(
        &self,
        name: &str,
        model: &TokenizerModel,
        ratio: f64,
        warmup: bool,
        train_steps: usize,
        eval_steps: usize,
    ) -> Result<AblationRow> {
        let (masked_ce, token_accuracy, frechet) = self.evaluate(model, eval_steps)?;
        Ok(AblationRow {
            name: name.into(),
            seed: self.seed(),
            replace_ratio: ratio,
            warmup,
            train_steps,
            eval_steps,
            masked_ce,
            token_accuracy,
            frechet,
        })
    }
}

/// Copies every parameter value of `src` into `dst` (same architecture).
pub fn copy_params(src: &TokenizerModel, dst: &TokenizerModel) -> Result<()> {
    for (s, d) in src.stores().iter().zip(dst.stores()) {
        d.load(&s.snapshot()?)?;
    }
    Ok(())
}

/// What a sweep trains and measures.
#[derive(Clone, Debug)]
pub struct SweepPlan {
    pub ratios: Vec<f64>,
    /// Also train stage 2 from scratch for the combined step budget at the
    /// configured ratio.
    pub no_warmup: bool,
    pub eval_steps: Vec<usize>,
}

/// Trained models of a sweep, kept for follow-up measurements.
pub struct SweepModels {
    pub warm: TokenizerModel,
    pub by_ratio: Vec<(f64, TokenizerModel)>,
    pub cold: Option<TokenizerModel>,
}

/// Runs stage 1 once, then stage 2 per ratio (and optionally without
/// warm-up), evaluating each at every requested step count.
pub fn ablation_sweep(study: &Study, plan: &SweepPlan) -> Result<(Vec<AblationRow>, SweepModels)> {
    let s1 = study.stage1.training.max_train_steps;
    let s2 = study.stage2.training.max_train_steps;
    let warm = study.warm_start()?;
    let mut rows = Vec::new();
    for &t in &plan.eval_steps {
        rows.push(study.row("stage1", &warm, 0.0, true, s1, t)?);
    }
    let mut by_ratio = Vec::new();
    for &r in &plan.ratios {
        let m = study.stage2(Some(&warm), r, s2)?;
        let name = if r == 0.0 {
            "vanilla".to_string()
        } else {
            format!("sfvr-{r}")
        };
        for &t in &plan.eval_steps {
            rows.push(study.row(&name, &m, r, true, s1 + s2, t)?);
        }
        by_ratio.push((r, m));
    }
    let cold = if plan.no_warmup {
        let r = study.stage2.model.decoder.replace_prob;
        let m = study.stage2(None, r, s1 + s2)?;
        for &t in &plan.eval_steps {
            rows.push(study.row("no-warmup", &m, r, false, s1 + s2, t)?);
        }
        Some(m)
    } else {
        None
    };
    Ok((rows, SweepModels { warm, by_ratio, cold }))
}
