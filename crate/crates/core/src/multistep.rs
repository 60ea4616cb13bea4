//! Mask bookkeeping, reveal schedules, the self-forcing replacement
//! primitive, and iterative masked reconstruction.

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::TokenizerModel;
use crate::teacher::TeacherTokens;

/// Per-position masked/resolved status over a `B x L2` grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskState {
    pub batch: usize,
    pub len: usize,
    pub resolved: Vec<bool>,
    /// Meaningful only where `resolved`; 0 elsewhere.
    pub tokens: Vec<u32>,
    pub step_index: usize,
}

impl MaskState {
    pub fn masked(batch: usize, len: usize) -> Self {
        Self {
            batch,
            len,
            resolved: vec![false; batch * len],
            tokens: vec![0; batch * len],
            step_index: 0,
        }
    }

    pub fn resolved_count(&self, row: usize) -> usize {
        self.resolved[row * self.len..(row + 1) * self.len]
            .iter()
            .filter(|&&r| r)
            .count()
    }

    pub fn is_complete(&self) -> bool {
        self.resolved.iter().all(|&r| r)
    }

    pub fn commit(&mut self, row: usize, pos: usize, token: u32) -> Result<()> {
        let i = row * self.len + pos;
        if self.resolved[i] {
            return Err(Error::InvalidArgument(format!(
                "position {pos} of row {row} is already resolved"
            )));
        }
        self.resolved[i] = true;
        self.tokens[i] = token;
        Ok(())
    }

    pub fn to_tokens(&self) -> Result<TeacherTokens> {
        if !self.is_complete() {
            return Err(Error::InvalidArgument("mask state still has masked positions".into()));
        }
        Ok(TeacherTokens {
            ids: self.tokens.clone(),
            batch: self.batch,
            len: self.len,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Cosine,
    Uniform,
}

impl std::str::FromStr for ScheduleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "uniform" => Ok(Self::Uniform),
            _ => Err(Error::InvalidArgument(format!("unknown schedule mode {s:?}"))),
        }
    }
}

/// Per-step reveal counts for `T`-step decoding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub counts: Vec<usize>,
    pub mode: ScheduleMode,
}

impl StepSchedule {
    pub fn steps(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Resolved positions after `t` steps.
    pub fn prefix(&self, t: usize) -> usize {
        self.counts[..t].iter().sum()
    }
}

/// Cosine mode keeps `ceil(L2 * cos(pi t / 2T))` positions masked after step
/// `t` and reveals the differences; counts of zero are then topped up from
/// the largest step so every step reveals at least one position.
pub fn make_schedule(steps: usize, len: usize, mode: ScheduleMode) -> Result<StepSchedule> {
    if steps == 0 || steps > len {
        return Err(Error::InvalidArgument(format!(
            "step count {steps} must lie in [1, {len}]"
        )));
    }
    let mut counts = match mode {
        ScheduleMode::Uniform => (0..steps)
            .map(|t| (t + 1) * len / steps - t * len / steps)
            .collect::<Vec<_>>(),
        ScheduleMode::Cosine => {
            let masked_after = |t: usize| -> usize {
                if t >= steps {
                    return 0;
                }
                let x = len as f64 * (std::f64::consts::FRAC_PI_2 * t as f64 / steps as f64).cos();
                ((x - 1e-9).ceil().max(0.0) as usize).min(len)
            };
            (1..=steps).map(|t| masked_after(t - 1) - masked_after(t)).collect()
        }
    };
    while let Some(z) = counts.iter().position(|&c| c == 0) {
        let (big, _) = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        counts[big] -= 1;
        counts[z] += 1;
    }
    debug_assert_eq!(counts.iter().sum::<usize>(), len);
    Ok(StepSchedule { counts, mode })
}

/// Samples one id per row of `logits` (`rows x V`, host f32) from the
/// temperature-scaled softmax; temperature 0 is greedy (lowest index on
/// ties). Returns ids and their log-probabilities under the unscaled
/// softmax.
pub fn sample_rows<R: Rng>(
    logits: &[f32],
    vocab: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<(Vec<u32>, Vec<f64>)> {
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature {temperature}")));
    }
    let rows = logits.len() / vocab;
    let mut ids = Vec::with_capacity(rows);
    let mut logp = Vec::with_capacity(rows);
    let mut w = vec![0f64; vocab];
    for r in 0..rows {
        let row = &logits[r * vocab..(r + 1) * vocab];
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoder logits".into()));
        }
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        let id = if temperature == 0.0 {
            row.iter().position(|&v| v as f64 == max).unwrap()
        } else {
            let mut total = 0.0;
            for (wi, &v) in w.iter_mut().zip(row) {
                *wi = ((v as f64 - max) / temperature).exp();
                total += *wi;
            }
            let mut u = rng.random::<f64>() * total;
            let mut pick = vocab - 1;
            for (i, &wi) in w.iter().enumerate() {
                if u < wi {
                    pick = i;
                    break;
                }
                u -= wi;
            }
            pick
        };
        ids.push(id as u32);
        logp.push(row[id] as f64 - lse);
    }
    Ok((ids, logp))
}

pub(crate) fn host_logits(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.detach().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
}

/// `M̂_1`: one decoder pass on the fully masked state, sampled per position.
/// Runs on detached inputs so no gradient is recorded.
pub fn first_step_predict(zq: &Tensor, model: &TokenizerModel, temperature: f64, seed: u64) -> Result<TeacherTokens> {
    let b = zq.dims()[0];
    let len = model.dims.grid_len;
    let logits = model.decode_step(&MaskState::masked(b, len), &zq.detach())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ids, _) = sample_rows(&host_logits(&logits)?, model.dims.vocab, temperature, &mut rng)?;
    Ok(TeacherTokens { ids, batch: b, len })
}

/// Reveals `reveal[row]` positions of `state`; each takes `pred` with
/// probability `ratio` and `truth` otherwise, drawn independently.
pub fn sfvr_replace<R: Rng>(
    state: &MaskState,
    pred: &TeacherTokens,
    reveal: &[Vec<usize>],
    ratio: f64,
    truth: &TeacherTokens,
    rng: &mut R,
) -> Result<MaskState> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "replacement ratio {ratio} outside [0, 1]"
        )));
    }
    if reveal.len() != state.batch
        || pred.batch != state.batch
        || truth.batch != state.batch
        || pred.len != state.len
        || truth.len != state.len
    {
        return Err(shape_err("sfvr_replace: batch or length mismatch"));
    }
    let mut out = state.clone();
    for (row, positions) in reveal.iter().enumerate() {
        for &p in positions {
            if p >= state.len {
                return Err(Error::OutOfRange {
                    index: p,
                    size: state.len,
                });
            }
            let i = row * state.len + p;
            // The coin is always drawn so the stream does not depend on the
            // ratio's degenerate values.
            let use_pred = rng.random::<f64>() < ratio;
            let token = if use_pred { pred.ids[i] } else { truth.ids[i] };
            out.commit(row, p, token)?;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub tokens: TeacherTokens,
    /// Step (0-based) at which each position was committed.
    pub commit_step: Vec<usize>,
    /// Logits row each position had when it was committed, `B x L2 x V`.
    pub commit_logits: Vec<f32>,
    /// Full logits of every step when capture was requested.
    pub step_logits: Option<Vec<Vec<f32>>>,
    /// Resolved count per row after each step.
    pub resolved_after: Vec<usize>,
}

/// Iterative decoding: after each pass, the scheduled number of still-masked
/// positions with the highest confidence are committed to their sampled
/// tokens. Confidence is the sampled token's log-probability plus Gumbel
/// noise scaled by `temperature * (1 - (t + 1) / T)`.
pub fn multistep_reconstruct(
    zq: &Tensor,
    model: &TokenizerModel,
    schedule: &StepSchedule,
    temperature: f64,
    seed: u64,
    capture: bool,
) -> Result<Reconstruction> {
    let b = zq.dims()[0];
    let zq = zq.detach();
    iterative_decode(
        b,
        model.dims.grid_len,
        model.dims.vocab,
        schedule,
        temperature,
        seed,
        capture,
        |state| host_logits(&model.decode_step(state, &zq)?),
    )
}

/// The confidence-ordered unmasking loop behind [`multistep_reconstruct`],
/// over any predictor mapping a mask state to `B x len x vocab` host logits.
#[allow(clippy::too_many_arguments)]
pub fn iterative_decode<F>(
    batch: usize,
    len: usize,
    vocab: usize,
    schedule: &StepSchedule,
    temperature: f64,
    seed: u64,
    capture: bool,
    mut predict: F,
) -> Result<Reconstruction>
where
    F: FnMut(&MaskState) -> Result<Vec<f32>>,
{
    let (b, v) = (batch, vocab);
    if schedule.total() != len {
        return Err(shape_err(format!(
            "schedule covers {} positions, grid has {len}",
            schedule.total()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = MaskState::masked(b, len);
    let mut commit_step = vec![usize::MAX; b * len];
    let mut commit_logits = vec![0f32; b * len * v];
    let mut step_logits = capture.then(Vec::new);
    let mut resolved_after = Vec::with_capacity(schedule.steps());
    let steps = schedule.steps();
    for (t, &count) in schedule.counts.iter().enumerate() {
        let logits = predict(&state)?;
        if logits.len() != b * len * v {
            return Err(shape_err(format!("predictor returned {} logits", logits.len())));
        }
        let (ids, logp) = sample_rows(&logits, v, temperature, &mut rng)?;
        let noise_scale = temperature * (1.0 - (t + 1) as f64 / steps as f64);
        for row in 0..b {
            let mut cand: Vec<(f64, usize)> = (0..len)
                .filter(|&p| !state.resolved[row * len + p])
                .map(|p| {
                    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                    let g = -(-u.ln()).ln();
                    (logp[row * len + p] + noise_scale * g, p)
                })
                .collect();
            cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for &(_, p) in cand.iter().take(count) {
                let i = row * len + p;
                state.commit(row, p, ids[i])?;
                commit_step[i] = t;
                commit_logits[i * v..(i + 1) * v].copy_from_slice(&logits[i * v..(i + 1) * v]);
            }
        }
        state.step_index = t + 1;
        resolved_after.push(state.resolved_count(0));
        if let Some(s) = step_logits.as_mut() {
            s.push(logits);
        }
    }
    Ok(Reconstruction {
        tokens: state.to_tokens()?,
        commit_step,
        commit_logits,
        step_logits,
        resolved_after,
    })
}

// ---------------------------------------------------------------------------
// Token files

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenFile {
    pub batch: usize,
    pub len: usize,
    pub vocab: usize,
    pub ids: Vec<u32>,
    /// Hash of the config that produced the tokens.
    #[serde(default)]
    pub config_hash: String,
}

impl TokenFile {
    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.batch * self.len {
            return Err(Error::Format(format!(
                "{} ids for a {}x{} grid",
                self.ids.len(),
                self.batch,
                self.len
            )));
        }
        if let Some(&bad) = self.ids.iter().find(|&&i| i as usize >= self.vocab) {
            return Err(Error::OutOfRange {
                index: bad as usize,
                size: self.vocab,
            });
        }
        Ok(())
    }

    /// Binary layout: little-endian i32 header `(B, L, V)`, then the ids as
    /// row-major i32. The config hash is not part of the binary layout.
    pub fn write_binary(&self, w: &mut impl Write) -> Result<()> {
        self.validate()?;
        for h in [self.batch, self.len, self.vocab] {
            w.write_all(&(h as i32).to_le_bytes())?;
        }
        for &id in &self.ids {
            w.write_all(&(id as i32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(r: &mut impl Read) -> Result<Self> {
        let mut word = [0u8; 4];
        let mut next = |r: &mut dyn Read| -> Result<i32> {
            r.read_exact(&mut word)?;
            Ok(i32::from_le_bytes(word))
        };
        let mut header = [0usize; 3];
        for h in &mut header {
            let v = next(r)?;
            if v < 0 {
                return Err(Error::Format(format!("negative header field {v}")));
            }
            *h = v as usize;
        }
        let [batch, len, vocab] = header;
        let n = batch
            .checked_mul(len)
            .ok_or_else(|| Error::Format("header overflow".into()))?;
        let mut ids = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            let v = next(r)?;
            if v < 0 {
                return Err(Error::Format(format!("negative token id {v}")));
            }
            ids.push(v as u32);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", rest.len())));
        }
        let f = Self {
            batch,
            len,
            vocab,
            ids,
            config_hash: String::new(),
        };
        f.validate()?;
        Ok(f)
    }

    /// Chooses JSON or binary by extension (`.json` vs anything else).
    pub fn save(&self, path: &Path) -> Result<()> {
        if path.extension().is_some_and(|e| e == "json") {
            self.validate()?;
            std::fs::write(path, serde_json::to_vec(self)?)?;
        } else {
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            self.write_binary(&mut f)?;
            f.flush()?;
            write_hash_sidecar(path, &self.config_hash)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e == "json") {
            let f: Self = serde_json::from_slice(&std::fs::read(path)?)?;
            f.validate()?;
            Ok(f)
        } else {
            let mut f = Self::read_binary(&mut std::io::BufReader::new(std::fs::File::open(path)?))?;
            f.config_hash = read_hash_sidecar(path)?;
            Ok(f)
        }
    }
}

/// Path of the JSON sidecar that carries a binary artifact's config hash.
pub fn hash_sidecar(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

/// Writes `{"config_hash": ...}` next to `path`; an empty hash writes nothing.
pub fn write_hash_sidecar(path: &Path, hash: &str) -> Result<()> {
    if hash.is_empty() {
        return Ok(());
    }
    let v = serde_json::json!({ "config_hash": hash });
    std::fs::write(hash_sidecar(path), serde_json::to_vec_pretty(&v)?)?;
    Ok(())
}

/// Reads the sidecar hash, or an empty string when there is none.
pub fn read_hash_sidecar(path: &Path) -> Result<String> {
    let side = hash_sidecar(path);
    if !side.exists() {
        return Ok(String::new());
    }
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(side)?)?;
    Ok(v["config_hash"].as_str().unwrap_or_default().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(make_schedule(1, 64, ScheduleMode::Cosine).unwrap().counts, vec![64]);
        assert_eq!(make_schedule(8, 64, ScheduleMode::Uniform).unwrap().counts, vec![8; 8]);
        // ceil(64 cos(pi t / 16)) for t = 0..8: 64 63 60 54 46 36 25 13 0.
        assert_eq!(
            make_schedule(8, 64, ScheduleMode::Cosine).unwrap().counts,
            vec![1, 3, 6, 8, 10, 11, 12, 13]
        );
        assert!(make_schedule(0, 4, ScheduleMode::Cosine).is_err());
        assert!(make_schedule(5, 4, ScheduleMode::Cosine).is_err());
        let s = make_schedule(16, 16, ScheduleMode::Cosine).unwrap();
        assert_eq!(s.counts, vec![1; 16]);
    }

    #[test]
    fn greedy_and_degenerate_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = [0.0f32, 3.0, 3.0, -1.0];
        let (ids, _) = sample_rows(&logits, 4, 0.0, &mut rng).unwrap();
        assert_eq!(ids, vec![1]);
        let one_hot = [-1e4f32, -1e4, 0.0, -1e4, 0.0, -1e4, -1e4, -1e4];
        for temp in [0.0, 0.5, 1.0, 3.0] {
            let (ids, _) = sample_rows(&one_hot, 4, temp, &mut rng).unwrap();
            assert_eq!(ids, vec![2, 0]);
        }
        assert!(sample_rows(&[f32::NAN, 0.0], 2, 1.0, &mut rng).is_err());
    }

    fn tokens(ids: Vec<u32>, len: usize) -> TeacherTokens {
        let batch = ids.len() / len;
        TeacherTokens { ids, batch, len }
    }

    #[test]
    fn sfvr_degenerate_ratios_use_one_source() {
        const SENTINEL: u32 = 999;
        let len = 10;
        let state = MaskState::masked(1, len);
        let reveal = vec![(0..len).collect::<Vec<_>>()];
        let pred = tokens(vec![1; len], len);
        let poisoned = tokens(vec![SENTINEL; len], len);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sfvr_replace(&state, &pred, &reveal, 1.0, &poisoned, &mut rng).unwrap();
        assert!(s.tokens.iter().all(|&t| t == 1));
        let truth = tokens(vec![2; len], len);
        let s = sfvr_replace(&state, &poisoned, &reveal, 0.0, &truth, &mut rng).unwrap();
        assert!(s.tokens.iter().all(|&t| t == 2));
        assert!(sfvr_replace(&s, &pred, &reveal, 0.5, &truth, &mut rng).is_err());
    }

    #[test]
    fn sfvr_half_ratio_is_binomial() {
        let len = 1000;
        let state = MaskState::masked(1, len);
        let reveal = vec![(0..len).collect::<Vec<_>>()];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = sfvr_replace(
            &state,
            &tokens(vec![1; len], len),
            &reveal,
            0.5,
            &tokens(vec![0; len], len),
            &mut rng,
        )
        .unwrap();
        let n = s.tokens.iter().filter(|&&t| t == 1).count();
        assert!((400..=600).contains(&n), "{n}");
    }

    #[test]
    fn token_file_round_trips() {
        let f = TokenFile {
            batch: 2,
            len: 3,
            vocab: 5,
            ids: vec![0, 1, 2, 3, 4, 0],
            config_hash: String::new(),
        };
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 * (3 + 6));
        assert_eq!(TokenFile::read_binary(&mut buf.as_slice()).unwrap(), f);
        buf.push(0);
        assert!(TokenFile::read_binary(&mut buf.as_slice()).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        f.save(&p).unwrap();
        assert_eq!(TokenFile::load(&p).unwrap(), f);
        let hashed = TokenFile {
            config_hash: "abc".into(),
            ..f
        };
        let p = dir.path().join("t.tok");
        hashed.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap().len(), 4 * 9);
        assert_eq!(TokenFile::load(&p).unwrap(), hashed);
    }
}
