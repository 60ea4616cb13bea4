//! Commands that load a trained tokenizer: reconstruct, encode, decode and
//! diagnose.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;
use sftok::data::{Dataset, ImageBatch};
use sftok::generator::pretokenize;
use sftok::metrics::{frechet_distance, heldout_eval, per_step_diagnostics, EvalOptions};
use sftok::multistep::{ScheduleMode, TokenFile};
use sftok::pipeline::{load_corpus, TrainedTokenizer};
use sftok::quantizer::lookup;
use sftok::teacher::TeacherTokens;
use sftok::Execution;

use crate::args::{CheckpointArgs, DecodeArgs, DiagnoseArgs, EncodeArgs, ReconstructArgs, Split};
use crate::plot::plot_csv;
use crate::report::{ensure_dir, write_csv, write_json};

pub fn load_tokenizer(a: &CheckpointArgs) -> Result<TrainedTokenizer> {
    TrainedTokenizer::load(&a.checkpoint, !a.no_ema).with_context(|| format!("loading {}", a.checkpoint.display()))
}

fn split(tok: &TrainedTokenizer, which: Split, count: Option<usize>, exec: Execution) -> Result<Dataset> {
    let corpus = load_corpus(&tok.cfg, exec)?;
    let set = match which {
        Split::Train => corpus.train,
        Split::Val => corpus.val,
    };
    Ok(match count {
        Some(n) => set.head(n),
        None => set,
    })
}

/// Held-out images with their teacher tokens.
fn heldout(tok: &TrainedTokenizer, n: usize, exec: Execution) -> Result<(ImageBatch, TeacherTokens)> {
    let val = split(tok, Split::Val, Some(n.max(1)), exec)?;
    let truth = tok.assets.teacher.tokenize(&val.images, exec)?;
    Ok((val.images, truth))
}

fn concat(batches: &[ImageBatch]) -> Result<ImageBatch> {
    let first = &batches[0];
    let data: Vec<f32> = batches.iter().flat_map(|b| b.data.iter().copied()).collect();
    let n = batches.iter().map(|b| b.batch).sum();
    Ok(ImageBatch::new(data, n, first.height, first.width)?)
}

#[derive(Serialize)]
struct StepRow {
    steps: usize,
    masked_ce: f64,
    token_accuracy: f64,
    frechet: f64,
}

pub fn reconstruct(a: ReconstructArgs, exec: Execution) -> Result<()> {
    let tok = load_tokenizer(&a.ck)?;
    let l2 = tok.model.dims.grid_len;
    if let Some(&t) = a.steps.0.iter().find(|&&t| t > l2) {
        bail!("step count {t} exceeds the {l2}-position token grid");
    }
    ensure_dir(&a.out)?;
    let temperature = a.temperature.unwrap_or(tok.cfg.model.decoder.randomize_temperature);
    let seed = a.seed.unwrap_or(tok.cfg.experiment.seed);
    let (images, truth) = heldout(&tok, a.images, exec)?;
    let real = tok.assets.features.features(&images)?;
    let teacher_fd = frechet_distance(&real, &tok.assets.features.features(&tok.assets.head.decode(&truth)?)?)?;
    let hash = tok.cfg.hash();
    let show = a.grid.min(images.batch);
    let pick: Vec<usize> = (0..show).collect();
    let mut grid = vec![images.select(&pick)];
    let mut rows = Vec::new();
    for &t in &a.steps.0 {
        let opts = EvalOptions {
            steps: t,
            mode: ScheduleMode::Cosine,
            temperature,
            seed,
            batch: 128,
        };
        let e = heldout_eval(&tok.model, &images, &truth, &opts, exec)?;
        let rec = tok
            .assets
            .head
            .decode(e.tokens.as_ref().expect("tokens are returned"))?;
        let frechet = frechet_distance(&real, &tok.assets.features.features(&rec)?)?;
        println!(
            "T={t:>3}  masked_ce={:.4}  token_accuracy={:.4}  frechet={frechet:.3}",
            e.masked_ce, e.token_accuracy
        );
        if show > 0 {
            grid.push(rec.select(&pick));
        }
        rows.push(StepRow {
            steps: t,
            masked_ce: e.masked_ce,
            token_accuracy: e.token_accuracy,
            frechet,
        });
    }
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.steps.to_string(),
                r.masked_ce.to_string(),
                r.token_accuracy.to_string(),
                r.frechet.to_string(),
                hash.clone(),
            ]
        })
        .collect();
    let csv = a.out.join("reconstruct.csv");
    write_csv(
        &csv,
        &["steps", "masked_ce", "token_accuracy", "frechet", "config_hash"],
        &csv_rows,
    )?;
    write_json(
        &a.out.join("reconstruct.json"),
        &json!({
            "checkpoint": a.ck.checkpoint,
            "config_hash": hash,
            "images": images.batch,
            "temperature": temperature,
            "seed": seed,
            "teacher_frechet": teacher_fd,
            "rows": rows,
        }),
    )?;
    if show > 0 {
        // One row per setting: originals, then each step count.
        concat(&grid)?.grid(show).save(a.out.join("reconstruct_grid.png"))?;
    }
    if let Some(fmt) = a.plot {
        plot_csv(&csv, &a.out.join(format!("reconstruct.{}", fmt.ext())), &[], false)?;
    }
    Ok(())
}

pub fn encode(a: EncodeArgs, exec: Execution) -> Result<()> {
    let tok = load_tokenizer(&a.ck)?;
    let data = split(&tok, a.split, a.count, exec)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    if a.corpus {
        let c = pretokenize(&tok, &data, exec)?;
        c.save(&a.out)?;
        log::info!(
            "wrote {} sequences of {} tokens to {}",
            c.num_items,
            c.k,
            a.out.display()
        );
        return Ok(());
    }
    let mut ids = Vec::with_capacity(data.len() * tok.model.dims.latent_tokens);
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(256) {
        ids.extend(tok.encode(&data.images.select(chunk), exec)?.ids);
    }
    let f = TokenFile {
        batch: data.len(),
        len: tok.model.dims.latent_tokens,
        vocab: tok.model.dims.codebook_size,
        ids,
        config_hash: tok.cfg.hash(),
    };
    f.save(&a.out)?;
    log::info!("wrote {}x{} latent tokens to {}", f.batch, f.len, a.out.display());
    Ok(())
}

/// Loads a latent token file and checks it against the tokenizer.
pub fn load_latents(tok: &TrainedTokenizer, path: &Path) -> Result<TokenFile> {
    let f = TokenFile::load(path).with_context(|| format!("loading {}", path.display()))?;
    let d = &tok.model.dims;
    if f.len != d.latent_tokens || f.vocab != d.codebook_size {
        bail!(
            "{} holds {}x{} ids over {} codes; the tokenizer expects {} tokens over {} codes",
            path.display(),
            f.batch,
            f.len,
            f.vocab,
            d.latent_tokens,
            d.codebook_size
        );
    }
    if !f.config_hash.is_empty() && f.config_hash != tok.cfg.hash() {
        log::warn!("{} was written under a different config", path.display());
    }
    Ok(f)
}

pub fn decode(a: DecodeArgs) -> Result<()> {
    let tok = load_tokenizer(&a.ck)?;
    let f = load_latents(&tok, &a.tokens)?;
    ensure_dir(&a.out)?;
    let temperature = a.temperature.unwrap_or(tok.cfg.model.decoder.randomize_temperature);
    let zq = lookup(&f.ids, f.batch, &tok.model.codebook)?;
    let grid_tokens = tok.reconstruct_tokens(&zq, a.steps, temperature, a.seed)?;
    tok.decode_pixels(&grid_tokens)?
        .grid(a.cols)
        .save(a.out.join("decoded.png"))?;
    let ext = a.tokens.extension().and_then(|e| e.to_str()).unwrap_or("bin");
    // The latents are re-emitted unchanged alongside the decoded grid.
    f.save(&a.out.join(format!("latents.{ext}")))?;
    TokenFile {
        batch: grid_tokens.batch,
        len: grid_tokens.len,
        vocab: tok.model.dims.vocab,
        ids: grid_tokens.ids,
        config_hash: tok.cfg.hash(),
    }
    .save(&a.out.join("grid_tokens.bin"))?;
    log::info!("decoded {} images into {}", f.batch, a.out.display());
    Ok(())
}

pub fn diagnose(a: DiagnoseArgs, exec: Execution) -> Result<()> {
    let tok = load_tokenizer(&a.ck)?;
    ensure_dir(&a.out)?;
    let (images, truth) = heldout(&tok, a.images, exec)?;
    let opts = EvalOptions {
        steps: a.steps,
        mode: ScheduleMode::Cosine,
        temperature: a.temperature.unwrap_or(tok.cfg.model.decoder.randomize_temperature),
        seed: a.seed.unwrap_or(tok.cfg.experiment.seed),
        batch: 128,
    };
    let d = per_step_diagnostics(&tok.model, &images, &truth, &opts, exec)?;
    let hash = tok.cfg.hash();
    let rows: Vec<Vec<String>> = (0..d.steps)
        .map(|t| {
            vec![
                (t + 1).to_string(),
                d.kl_to_final[t].to_string(),
                d.nll_to_truth[t].to_string(),
                d.top1_truth[t].to_string(),
                d.top1_final[t].to_string(),
                hash.clone(),
            ]
        })
        .collect();
    let csv = a.out.join("diagnose.csv");
    write_csv(
        &csv,
        &[
            "step",
            "kl_to_final",
            "nll_to_truth",
            "top1_truth",
            "top1_final",
            "config_hash",
        ],
        &rows,
    )?;
    write_json(
        &a.out.join("diagnose.json"),
        &json!({
            "checkpoint": a.ck.checkpoint,
            "config_hash": hash,
            "images": images.batch,
            "temperature": opts.temperature,
            "seed": opts.seed,
            "columns": {
                "kl_to_final": "KL(p_T || p_t): final step's distribution as reference",
                "nll_to_truth": "KL to the one-hot teacher token, which equals its negative log-likelihood",
                "top1_truth": "argmax of step t equals the teacher token",
                "top1_final": "argmax of step t equals the argmax of the final step",
            },
            "diagnostics": d,
        }),
    )?;
    for r in &rows {
        println!(
            "step {:>2}  kl_to_final={}  nll_to_truth={}  top1_truth={}  top1_final={}",
            r[0], r[1], r[2], r[3], r[4]
        );
    }
    if let Some(fmt) = a.plot {
        plot_csv(&csv, &a.out.join(format!("diagnose.{}", fmt.ext())), &[], false)?;
    }
    Ok(())
}
