//! Evaluation: held-out multi-step cross-entropy, per-step diagnostics,
//! Fréchet distance, inception-style score and codebook usage.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchStream, ImageBatch};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::TokenizerModel;
use crate::multistep::{make_schedule, multistep_reconstruct, ScheduleMode};
use crate::nn::{gelu, log_softmax_last, softmax_last, Linear, ParamStore};
use crate::optim::{lr_at, AdamW, AdamWParams};
use crate::teacher::TeacherTokens;

/// Multi-step reconstruction quality on a held-out set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeldOutEval {
    pub steps: usize,
    /// Mean over positions of the cross-entropy of the logits each position
    /// had at the step it was committed, against the teacher token.
    pub masked_ce: f64,
    /// Fraction of committed tokens equal to the teacher token.
    pub token_accuracy: f64,
    #[serde(skip)]
    pub tokens: Option<TeacherTokens>,
}

fn log_softmax_at(row: &[f32], idx: usize) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    row[idx] as f64 - lse
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub steps: usize,
    pub mode: ScheduleMode,
    pub temperature: f64,
    pub seed: u64,
    pub batch: usize,
}

/// Encodes `images`, reconstructs with `opts.steps` decoding steps and scores
/// the committed predictions against `truth`.
pub fn heldout_eval(
    model: &TokenizerModel,
    images: &ImageBatch,
    truth: &TeacherTokens,
    opts: &EvalOptions,
    exec: Execution,
) -> Result<HeldOutEval> {
    if images.batch != truth.batch || images.batch == 0 {
        return Err(Error::InvalidArgument("image/token batch mismatch or empty set".into()));
    }
    let schedule = make_schedule(opts.steps, model.dims.grid_len, opts.mode)?;
    let v = model.dims.vocab;
    let mut ce = 0.0;
    let mut correct = 0usize;
    let mut ids = Vec::with_capacity(truth.ids.len());
    let idx: Vec<usize> = (0..images.batch).collect();
    for (chunk_no, chunk) in idx.chunks(opts.batch.max(1)).enumerate() {
        let imgs = images.select(chunk);
        let tr = truth.select(chunk);
        let lat = model.latents(&imgs, exec)?;
        let rec = multistep_reconstruct(
            &lat.zq.data,
            model,
            &schedule,
            opts.temperature,
            opts.seed.wrapping_add(chunk_no as u64),
            false,
        )?;
        for (i, &t) in tr.ids.iter().enumerate() {
            ce -= log_softmax_at(&rec.commit_logits[i * v..(i + 1) * v], t as usize);
            if rec.tokens.ids[i] == t {
                correct += 1;
            }
        }
        ids.extend(rec.tokens.ids);
    }
    let n = truth.ids.len() as f64;
    Ok(HeldOutEval {
        steps: opts.steps,
        masked_ce: ce / n,
        token_accuracy: correct as f64 / n,
        tokens: Some(TeacherTokens {
            ids,
            batch: truth.batch,
            len: truth.len,
        }),
    })
}

// ---------------------------------------------------------------------------
// Per-step diagnostics

/// Per-step divergence of the decoder's predictions from the final step and
/// from the teacher tokens. The ground-truth series uses the one-hot teacher
/// distribution as reference, so `nll_to_truth` is a cross-entropy (KL to a
/// degenerate distribution equals the NLL).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub steps: usize,
    /// `KL(p_T || p_t)`, final step as reference, mean over positions.
    pub kl_to_final: Vec<f64>,
    pub nll_to_truth: Vec<f64>,
    pub top1_truth: Vec<f64>,
    /// Agreement of the step-`t` argmax with the final step's argmax.
    pub top1_final: Vec<f64>,
}

fn softmax_row(row: &[f32]) -> Vec<f64> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs a `steps`-step reconstruction capturing every step's logits.
pub fn per_step_diagnostics(
    model: &TokenizerModel,
    images: &ImageBatch,
    truth: &TeacherTokens,
    opts: &EvalOptions,
    exec: Execution,
) -> Result<StepDiagnostics> {
    if images.batch != truth.batch || images.batch == 0 {
        return Err(Error::InvalidArgument("image/token batch mismatch or empty set".into()));
    }
    let steps = opts.steps;
    let schedule = make_schedule(steps, model.dims.grid_len, opts.mode)?;
    let v = model.dims.vocab;
    let mut kl = vec![0.0; steps];
    let mut nll = vec![0.0; steps];
    let mut t_truth = vec![0.0; steps];
    let mut t_final = vec![0.0; steps];
    let idx: Vec<usize> = (0..images.batch).collect();
    for (chunk_no, chunk) in idx.chunks(opts.batch.max(1)).enumerate() {
        let imgs = images.select(chunk);
        let tr = truth.select(chunk);
        let lat = model.latents(&imgs, exec)?;
        let rec = multistep_reconstruct(
            &lat.zq.data,
            model,
            &schedule,
            opts.temperature,
            opts.seed.wrapping_add(chunk_no as u64),
            true,
        )?;
        let logits = rec.step_logits.expect("captured");
        let last = &logits[steps - 1];
        let rows = tr.ids.len();
        let per_step: Vec<[f64; 4]> = exec.map_range(steps, |t| {
            let mut acc = [0.0; 4];
            for i in 0..rows {
                let row_t = &logits[t][i * v..(i + 1) * v];
                let row_f = &last[i * v..(i + 1) * v];
                let p = softmax_row(row_f);
                let q = softmax_row(row_t);
                acc[0] += p
                    .iter()
                    .zip(&q)
                    .filter(|(a, _)| **a > 0.0)
                    .map(|(a, b)| a * (a.ln() - b.max(f64::MIN_POSITIVE).ln()))
                    .sum::<f64>()
                    .max(0.0);
                acc[1] -= log_softmax_at(row_t, tr.ids[i] as usize);
                let am = argmax(row_t);
                acc[2] += (am == tr.ids[i] as usize) as u8 as f64;
                acc[3] += (am == argmax(row_f)) as u8 as f64;
            }
            acc
        });
        for (t, a) in per_step.into_iter().enumerate() {
            kl[t] += a[0];
            nll[t] += a[1];
            t_truth[t] += a[2];
            t_final[t] += a[3];
        }
    }
    let n = truth.ids.len() as f64;
    let scale = |v: Vec<f64>| v.into_iter().map(|x| x / n).collect::<Vec<_>>();
    let mut kl = scale(kl);
    // Self-comparison is exactly zero.
    kl[steps - 1] = 0.0;
    Ok(StepDiagnostics {
        steps,
        kl_to_final: kl,
        nll_to_truth: scale(nll),
        top1_truth: scale(t_truth),
        top1_final: scale(t_final),
    })
}

// ---------------------------------------------------------------------------
// Fréchet distance and inception-style score

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrechetReport {
    pub score: f64,
    pub extractor: String,
    pub real_count: usize,
    pub fake_count: usize,
}

/// Row-major `n x dim` feature matrix.
#[derive(Clone, Debug)]
pub struct Features {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidArgument(format!(
                "{} values for feature dim {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.count();
        let x = DMatrix::from_row_slice(n, self.dim, &self.data);
        let mean = x.row_mean().transpose();
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        (mean, cov)
    }
}

const EIG_CLAMP: f64 = 1e-10;

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < -1e-6 * scale) {
        return Err(Error::InvalidArgument(format!(
            "covariance not positive semidefinite (eigenvalue {bad:e})"
        )));
    }
    let d = eig.eigenvalues.map(|l| l.max(EIG_CLAMP).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

/// `|mu_r - mu_f|^2 + Tr(S_r + S_f - 2 (S_r S_f)^{1/2})`, computing the trace
/// term through the symmetric form `S_r^{1/2} S_f S_r^{1/2}`.
pub fn frechet_distance(real: &Features, fake: &Features) -> Result<f64> {
    if real.dim != fake.dim {
        return Err(Error::InvalidArgument("feature dimensions differ".into()));
    }
    if real.count() < 2 || fake.count() < 2 {
        return Err(Error::InvalidArgument("need at least two samples per side".into()));
    }
    let (mr, sr) = real.moments();
    let (mf, sf) = fake.moments();
    let root_r = psd_sqrt(&sr)?;
    let cross = psd_sqrt(&(&root_r * &sf * &root_r))?;
    let diff = (&mr - &mf).norm_squared();
    let score = diff + sr.trace() + sf.trace() - 2.0 * cross.trace();
    Ok(score.max(0.0))
}

pub fn frechet_score(real: &Features, fake: &Features, extractor: &str) -> Result<FrechetReport> {
    Ok(FrechetReport {
        score: frechet_distance(real, fake)?,
        extractor: extractor.into(),
        real_count: real.count(),
        fake_count: fake.count(),
    })
}

/// `exp(E_x KL(p(y|x) || p(y)))` over row-major class probabilities.
pub fn inception_style_score(probs: &[f64], classes: usize) -> Result<f64> {
    if classes == 0 || probs.is_empty() || !probs.len().is_multiple_of(classes) {
        return Err(Error::InvalidArgument("empty or ragged probability matrix".into()));
    }
    let n = probs.len() / classes;
    let mut marginal = vec![0.0; classes];
    for row in probs.chunks_exact(classes) {
        for (m, p) in marginal.iter_mut().zip(row) {
            *m += p / n as f64;
        }
    }
    let kl: f64 = probs
        .chunks_exact(classes)
        .map(|row| {
            row.iter()
                .zip(&marginal)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, m)| p * (p.ln() - m.ln()))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n as f64;
    Ok(kl.exp())
}

pub use crate::quantizer::codebook_usage;

// ---------------------------------------------------------------------------
// Feature extractor

/// Small MLP classifier trained on the corpus; its penultimate activations
/// are the features for the Fréchet proxy and its class probabilities feed
/// the inception-style score. Scores are only comparable between runs that
/// share an extractor.
#[derive(Clone, Debug)]
pub struct FeatureNet {
    pub store: ParamStore,
    fc1: Linear,
    fc2: Linear,
    out: Linear,
    pub image_size: usize,
    pub classes: usize,
    pub feature_dim: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureNetReport {
    pub steps: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

impl FeatureNet {
    pub fn new(image_size: usize, classes: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFEA7);
        let mut store = ParamStore::new("features", DType::F32, &Device::Cpu);
        let inp = image_size * image_size * 3;
        let fc1 = Linear::new(&mut store, "fc1", inp, 128, true, &mut rng)?;
        let fc2 = Linear::new(&mut store, "fc2", 128, feature_dim, true, &mut rng)?;
        let out = Linear::new(&mut store, "out", feature_dim, classes, true, &mut rng)?;
        Ok(Self {
            store,
            fc1,
            fc2,
            out,
            image_size,
            classes,
            feature_dim,
        })
    }

    pub fn id(&self) -> String {
        format!("mlp-{}px-f{}", self.image_size, self.feature_dim)
    }

    fn input(&self, images: &ImageBatch) -> Result<Tensor> {
        if images.height != self.image_size || images.width != self.image_size {
            return Err(Error::Shape(format!(
                "feature net expects {0}x{0} images",
                self.image_size
            )));
        }
        Ok(images.to_tensor(&Device::Cpu)?.reshape((images.batch, ()))?)
    }

    /// `(features, logits)`.
    pub fn forward(&self, images: &ImageBatch) -> Result<(Tensor, Tensor)> {
        self.forward_tensor(&self.input(images)?)
    }

    /// Differentiable forward over a `B x H x W x 3` (or flattened) tensor.
    pub fn forward_tensor(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let b = images.dim(0)?;
        let x = images.reshape((b, ()))?;
        let h = gelu(&self.fc1.forward(&x)?)?;
        let f = self.fc2.forward(&h)?;
        let logits = self.out.forward(&gelu(&f)?)?;
        Ok((f, logits))
    }

    pub fn train(&self, images: &ImageBatch, labels: &[u32], steps: usize, seed: u64) -> Result<FeatureNetReport> {
        let vars: Vec<_> = self.store.vars().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let mut opt = AdamW::new(
            vars,
            AdamWParams {
                beta1: 0.9,
                beta2: 0.99,
                eps: 1e-8,
                weight_decay: 1e-4,
            },
        )?;
        let stream = BatchStream::new(images.batch, 64, seed)?;
        let mut last = 0.0;
        for step in 0..steps {
            let idx = stream.indices(step);
            let (_, logits) = self.forward(&images.select(&idx))?;
            let y = Tensor::from_vec(
                idx.iter().map(|&i| labels[i]).collect::<Vec<_>>(),
                (idx.len(), 1),
                &Device::Cpu,
            )?;
            let loss = log_softmax_last(&logits)?.gather(&y, 1)?.mean_all()?.neg()?;
            last = loss.to_scalar::<f32>()? as f64;
            opt.step(&loss.backward()?, lr_at(step, 2e-3, 2e-4, steps / 10, steps))?;
        }
        let probs = self.probabilities(images)?;
        let correct = probs
            .chunks_exact(self.classes)
            .zip(labels)
            .filter(|(p, &l)| {
                let best = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
                best == l as usize
            })
            .count();
        Ok(FeatureNetReport {
            steps,
            final_loss: last,
            train_accuracy: correct as f64 / labels.len().max(1) as f64,
        })
    }

    pub fn features(&self, images: &ImageBatch) -> Result<Features> {
        let mut data = Vec::with_capacity(images.batch * self.feature_dim);
        for chunk in (0..images.batch).collect::<Vec<_>>().chunks(256) {
            let (f, _) = self.forward(&images.select(chunk))?;
            data.extend(f.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?);
        }
        Features::new(self.feature_dim, data)
    }

    /// Row-major class probabilities.
    pub fn probabilities(&self, images: &ImageBatch) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.batch * self.classes);
        for chunk in (0..images.batch).collect::<Vec<_>>().chunks(256) {
            let (_, logits) = self.forward(&images.select(chunk))?;
            out.extend(
                softmax_last(&logits)?
                    .to_dtype(DType::F64)?
                    .flatten_all()?
                    .to_vec1::<f64>()?,
            );
        }
        Ok(out)
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f32>>> {
        self.store.snapshot()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(n: usize, dim: usize, mean: f64, seed: u64) -> Features {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * dim)
            .map(|_| mean + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        Features::new(dim, data).unwrap()
    }

    #[test]
    fn frechet_identity_and_symmetry() {
        let a = gaussian(200, 4, 0.0, 1);
        let b = gaussian(150, 4, 0.5, 2);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-8, "{ab} {ba}");
        assert!(frechet_distance(&a, &Features::new(4, vec![0.0; 4]).unwrap()).is_err());
    }

    #[test]
    fn frechet_shifted_equal_moments() {
        // Same sample shifted by 3: equal covariance, squared mean gap 9.
        let a = gaussian(300, 1, 0.0, 3);
        let b = Features::new(1, a.data.iter().map(|x| x + 3.0).collect()).unwrap();
        assert!((frechet_distance(&a, &b).unwrap() - 9.0).abs() < 1e-8);
    }

    #[test]
    fn inception_score_extremes() {
        let uniform = vec![0.25; 4 * 10];
        assert!((inception_style_score(&uniform, 4).unwrap() - 1.0).abs() < 1e-12);
        let mut onehot = vec![0.0; 8 * 8];
        for i in 0..8 {
            onehot[i * 8 + i] = 1.0;
        }
        assert!((inception_style_score(&onehot, 8).unwrap() - 8.0).abs() < 1e-9);
        assert!(inception_style_score(&[], 3).is_err());
    }
}
