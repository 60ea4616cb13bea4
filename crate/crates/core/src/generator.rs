//! Class-conditional masked-token generation over tokenizer latents.
//!
//! A bidirectional transformer sees a class token followed by the `K` latent
//! token ids (masked positions use a dedicated mask embedding) and predicts
//! the codebook index at every position. Generation reuses the
//! confidence-ordered unmasking loop of [`crate::multistep`], and generated
//! ids are decoded through the tokenizer's codebook, multi-step teacher
//! reconstruction, and pixel head.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{Dataset, ImageBatch};
use crate::error::{shape_err, Error, Result};
use crate::exec::Execution;
use crate::multistep::{
    host_logits, iterative_decode, make_schedule, read_hash_sidecar, write_hash_sidecar, MaskState, ScheduleMode,
};
use crate::nn::{log_softmax_last, size_preset, Linear, ParamStore, SizePreset, Transformer};
use crate::optim::{clip_grad_norm, lr_at, AdamW, AdamWParams};
use crate::pipeline::TrainedTokenizer;
use crate::quantizer::lookup;
use crate::training::{step_seed, LossBuilder, LossReport};

/// Stage id used to derive the generator's per-step RNG streams.
const GENERATOR_STREAM: u8 = 4;

/// Pre-tokenized corpus: `num_items` rows of `K` codebook ids with labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenCorpus {
    pub num_items: usize,
    pub k: usize,
    pub n: usize,
    pub ids: Vec<u32>,
    pub labels: Vec<u32>,
    pub config_hash: String,
}

impl TokenCorpus {
    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.num_items * self.k || self.labels.len() != self.num_items {
            return Err(Error::Format(format!(
                "{} ids and {} labels for {} items of length {}",
                self.ids.len(),
                self.labels.len(),
                self.num_items,
                self.k
            )));
        }
        if let Some(&bad) = self.ids.iter().find(|&&i| i as usize >= self.n) {
            return Err(Error::OutOfRange {
                index: bad as usize,
                size: self.n,
            });
        }
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.k..(i + 1) * self.k]
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            num_items: rows.len(),
            k: self.k,
            n: self.n,
            ids: rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            config_hash: self.config_hash.clone(),
        }
    }

    /// Little-endian i32 header `(num_items, K, n)`, row-major i32 ids, then
    /// one i32 label per item. The config hash goes to a JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for v in [self.num_items, self.k, self.n] {
            w.write_all(&(v as i32).to_le_bytes())?;
        }
        for &v in self.ids.iter().chain(&self.labels) {
            w.write_all(&(v as i32).to_le_bytes())?;
        }
        w.flush()?;
        write_hash_sidecar(path, &self.config_hash)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(std::fs::File::open(path)?).read_to_end(&mut bytes)?;
        if bytes.len() < 12 || bytes.len() % 4 != 0 {
            return Err(Error::Format(format!("{} is not a token corpus", path.display())));
        }
        let words: Vec<i32> = bytes
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if words.iter().any(|&w| w < 0) {
            return Err(Error::Format("negative field in token corpus".into()));
        }
        let (items, k, n) = (words[0] as usize, words[1] as usize, words[2] as usize);
        let need = items
            .checked_mul(k + 1)
            .and_then(|x| x.checked_add(3))
            .ok_or_else(|| Error::Format("header overflow".into()))?;
        if words.len() != need {
            return Err(Error::Format(format!("expected {need} words, found {}", words.len())));
        }
        let ids = words[3..3 + items * k].iter().map(|&w| w as u32).collect();
        let labels = words[3 + items * k..].iter().map(|&w| w as u32).collect();
        let c = Self {
            num_items: items,
            k,
            n,
            ids,
            labels,
            config_hash: read_hash_sidecar(path)?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Encodes every image of `data` with the frozen tokenizer.
pub fn pretokenize(tok: &TrainedTokenizer, data: &Dataset, exec: Execution) -> Result<TokenCorpus> {
    let mut ids = Vec::with_capacity(data.len() * tok.model.dims.latent_tokens);
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(256) {
        ids.extend(tok.encode(&data.images.select(chunk), exec)?.ids);
    }
    let c = TokenCorpus {
        num_items: data.len(),
        k: tok.model.dims.latent_tokens,
        n: tok.model.dims.codebook_size,
        ids,
        labels: data.labels.clone(),
        config_hash: tok.cfg.hash(),
    };
    c.validate()?;
    Ok(c)
}

#[derive(Clone, Debug)]
pub struct GeneratorModel {
    pub store: ParamStore,
    /// `(n + 1) x D`; the last row is the mask embedding.
    tok_embed: Tensor,
    class_embed: Tensor,
    pos: Tensor,
    body: Transformer,
    head: Linear,
    pub k: usize,
    pub n: usize,
    pub classes: usize,
}

impl GeneratorModel {
    pub fn new(k: usize, n: usize, classes: usize, size: SizePreset, seed: u64) -> Result<Self> {
        if k == 0 || n == 0 || classes == 0 {
            return Err(Error::InvalidArgument("generator needs K, n and classes > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6E4E);
        let mut store = ParamStore::new("generator", DType::F32, &Device::Cpu);
        let w = size.width;
        let tok_embed = store.normal("tok_embed", &[n + 1, w], 0.02, &mut rng)?;
        let class_embed = store.normal("class_embed", &[classes, w], 0.02, &mut rng)?;
        let pos = store.normal("pos", &[k + 1, w], 0.02, &mut rng)?;
        let body = Transformer::new(&mut store, "body", w, size.depth, size.heads, size.mlp_ratio, &mut rng)?;
        let head = Linear::new(&mut store, "head", w, n, true, &mut rng)?;
        Ok(Self {
            store,
            tok_embed,
            class_embed,
            pos,
            body,
            head,
            k,
            n,
            classes,
        })
    }

    pub fn from_config(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let size = size_preset(&cfg.generator.model_size)
            .ok_or_else(|| Error::Config(format!("unknown generator size {}", cfg.generator.model_size)))?;
        Self::new(
            cfg.model.vq_model.num_latent_tokens,
            cfg.model.vq_model.codebook_size,
            cfg.generator.num_classes,
            size,
            seed,
        )
    }

    fn check_labels(&self, labels: &[u32]) -> Result<()> {
        match labels.iter().find(|&&l| l as usize >= self.classes) {
            Some(&l) => Err(Error::OutOfRange {
                index: l as usize,
                size: self.classes,
            }),
            None => Ok(()),
        }
    }

    /// Logits `B x K x n` for a partially masked sequence batch.
    pub fn forward(&self, state: &MaskState, labels: &[u32]) -> Result<Tensor> {
        if state.len != self.k || state.batch != labels.len() {
            return Err(shape_err(format!(
                "state {}x{} with {} labels, generator expects length {}",
                state.batch,
                state.len,
                labels.len(),
                self.k
            )));
        }
        self.check_labels(labels)?;
        let b = state.batch;
        let mut ids = Vec::with_capacity(b * self.k);
        for (i, &r) in state.resolved.iter().enumerate() {
            if r {
                if state.tokens[i] as usize >= self.n {
                    return Err(Error::OutOfRange {
                        index: state.tokens[i] as usize,
                        size: self.n,
                    });
                }
                ids.push(state.tokens[i]);
            } else {
                ids.push(self.n as u32);
            }
        }
        let dev = self.tok_embed.device();
        let w = self.tok_embed.dim(1)?;
        let tok = self
            .tok_embed
            .index_select(&Tensor::from_vec(ids, b * self.k, dev)?, 0)?
            .reshape((b, self.k, w))?;
        let cls = self
            .class_embed
            .index_select(&Tensor::from_vec(labels.to_vec(), b, dev)?, 0)?
            .reshape((b, 1, w))?;
        let x = Tensor::cat(&[&cls, &tok], 1)?.broadcast_add(&self.pos)?;
        let h = self.body.forward(&x)?;
        self.head.forward(&h.narrow(1, 1, self.k)?)
    }
}

/// Mean cross-entropy over the masked positions; zero when none are masked.
pub fn masked_token_loss(logits: &Tensor, truth: &[u32], masked: &[bool]) -> Result<Tensor> {
    let (b, k, _) = logits.dims3()?;
    if truth.len() != b * k || masked.len() != b * k {
        return Err(shape_err("masked_token_loss: length mismatch"));
    }
    let count = masked.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(Tensor::zeros((), logits.dtype(), logits.device())?);
    }
    let idx = Tensor::from_vec(truth.to_vec(), (b, k, 1), logits.device())?;
    let nll = log_softmax_last(logits)?
        .gather(&idx, D::Minus1)?
        .squeeze(D::Minus1)?
        .neg()?;
    let w: Vec<f32> = masked
        .iter()
        .map(|&m| if m { 1.0 / count as f32 } else { 0.0 })
        .collect();
    let w = Tensor::from_vec(w, (b, k), logits.device())?.to_dtype(logits.dtype())?;
    Ok((nll * w)?.sum_all()?)
}

/// MaskGIT-style training mask: rate `cos(pi u / 2)` with `u ~ U[0, 1)`,
/// at least one masked position per row.
pub fn sample_generator_mask<R: Rng>(batch: usize, k: usize, rng: &mut R) -> Vec<bool> {
    let mut out = vec![false; batch * k];
    for row in 0..batch {
        let u: f64 = rng.random();
        let rate = (std::f64::consts::FRAC_PI_2 * u).cos();
        let n = ((rate * k as f64).ceil() as usize).clamp(1, k);
        for p in sample(rng, k, n) {
            out[row * k + p] = true;
        }
    }
    out
}

#[derive(Debug)]
pub struct GeneratorTrainer {
    pub model: GeneratorModel,
    pub opt: AdamW,
    pub cfg: RunConfig,
    pub step: usize,
}

impl GeneratorTrainer {
    pub fn new(cfg: RunConfig, model: GeneratorModel) -> Result<Self> {
        let vars: Vec<_> = model.store.vars().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let opt = AdamW::new(
            vars,
            AdamWParams {
                beta1: 0.9,
                beta2: 0.99,
                eps: 1e-8,
                weight_decay: cfg.optimizer.weight_decay,
            },
        )?;
        Ok(Self {
            model,
            opt,
            cfg,
            step: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        let g = &self.cfg.generator;
        let total = g.max_train_steps.max(1);
        lr_at(
            self.step,
            g.learning_rate,
            g.learning_rate * 0.1,
            (total / 20).max(1),
            total,
        )
    }

    /// One masked-prediction update on the rows `idx` of `corpus`.
    pub fn train_step(&mut self, corpus: &TokenCorpus, idx: &[usize]) -> Result<LossReport> {
        if corpus.k != self.model.k || corpus.n != self.model.n {
            return Err(Error::InvalidArgument(format!(
                "corpus K={} n={} does not match generator K={} n={}",
                corpus.k, corpus.n, self.model.k, self.model.n
            )));
        }
        let batch = corpus.select(idx);
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(self.cfg.experiment.seed, GENERATOR_STREAM, self.step, 0));
        let masked = sample_generator_mask(batch.num_items, batch.k, &mut rng);
        let state = MaskState {
            batch: batch.num_items,
            len: batch.k,
            resolved: masked.iter().map(|&m| !m).collect(),
            tokens: batch
                .ids
                .iter()
                .zip(&masked)
                .map(|(&t, &m)| if m { 0 } else { t })
                .collect(),
            step_index: 0,
        };
        let logits = self.model.forward(&state, &batch.labels)?;
        let loss = masked_token_loss(&logits, &batch.ids, &masked)?;
        let mut lb = LossBuilder::new();
        lb.add("masked_ce", loss, 1.0)?;
        let (total, mut report) = lb.finish(GENERATOR_STREAM, self.step);
        let total = total.ok_or_else(|| Error::InvalidArgument("no trainable loss".into()))?;
        let mut grads = total.backward()?;
        let vars = self.opt.vars().to_vec();
        report.grad_norm = clip_grad_norm(&mut grads, &vars, self.cfg.training.max_grad_norm)?;
        report.lr = self.lr();
        self.opt.step(&grads, report.lr)?;
        self.step += 1;
        Ok(report)
    }

    pub fn snapshot(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(self.cfg.experiment.stage, self.step, self.cfg.clone());
        ck.set_meta("kind", &"generator")?;
        ck.set_meta("generator/shape", &(self.model.k, self.model.n, self.model.classes))?;
        ck.put_store("generator", &self.model.store)?;
        ck.put_optimizer("generator_opt", &self.opt)?;
        Ok(ck)
    }

    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_store("generator", &self.model.store)?;
        ck.load_optimizer("generator_opt", &mut self.opt)?;
        self.step = ck.step;
        Ok(())
    }
}

/// Loads generator weights from a checkpoint written by
/// [`GeneratorTrainer::snapshot`].
pub fn load_generator(path: &Path) -> Result<(GeneratorModel, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    if ck.meta::<String>("kind").ok().as_deref() != Some("generator") {
        return Err(Error::Format(format!(
            "{} is not a generator checkpoint",
            path.display()
        )));
    }
    let model = GeneratorModel::from_config(&ck.config, 0)?;
    let (k, n, c): (usize, usize, usize) = ck.meta("generator/shape")?;
    if (k, n, c) != (model.k, model.n, model.classes) {
        return Err(Error::Format("generator shape disagrees with its config".into()));
    }
    ck.load_store("generator", &model.store)?;
    Ok((model, ck.config))
}

/// Iterative class-conditional generation; returns `B x K` codebook ids.
pub fn generate(model: &GeneratorModel, labels: &[u32], steps: usize, temperature: f64, seed: u64) -> Result<Vec<u32>> {
    model.check_labels(labels)?;
    let schedule = make_schedule(steps, model.k, ScheduleMode::Cosine)?;
    let rec = iterative_decode(
        labels.len(),
        model.k,
        model.n,
        &schedule,
        temperature,
        seed,
        false,
        |state| host_logits(&model.forward(state, labels)?),
    )?;
    Ok(rec.tokens.ids)
}

/// Decodes generated ids to pixels through the tokenizer.
pub fn decode_generated(
    tok: &TrainedTokenizer,
    ids: &[u32],
    steps: usize,
    temperature: f64,
    seed: u64,
) -> Result<ImageBatch> {
    let k = tok.model.dims.latent_tokens;
    if !ids.len().is_multiple_of(k) {
        return Err(shape_err(format!("{} ids is not a multiple of K={k}", ids.len())));
    }
    let zq = lookup(ids, ids.len() / k, &tok.model.codebook)?;
    tok.decode_pixels(&tok.reconstruct_tokens(&zq, steps, temperature, seed)?)
}
