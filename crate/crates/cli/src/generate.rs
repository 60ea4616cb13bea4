//! Generator training and sampling.

use anyhow::{bail, Context, Result};
use serde_json::json;
use sftok::config::load_config;
use sftok::data::BatchStream;
use sftok::generator::{
    decode_generated, generate, load_generator, pretokenize, GeneratorModel, GeneratorTrainer, TokenCorpus,
};
use sftok::metrics::frechet_distance;
use sftok::multistep::TokenFile;
use sftok::pipeline::{load_corpus, LossCsv};
use sftok::Execution;

use crate::args::{GenerateArgs, TrainGeneratorArgs};
use crate::inspect::load_tokenizer;
use crate::report::{ensure_dir, write_json};

pub fn train(a: TrainGeneratorArgs, exec: Execution) -> Result<()> {
    let tok = load_tokenizer(&a.ck)?;
    let mut cfg = tok.cfg.clone();
    if let Some(p) = &a.config {
        cfg.generator = load_config(p)?.generator;
    }
    if let Some(n) = a.steps {
        cfg.generator.max_train_steps = n;
    }
    cfg.validate()?;
    let corpus = match &a.corpus {
        Some(p) => TokenCorpus::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => pretokenize(&tok, &load_corpus(&tok.cfg, exec)?.train, exec)?,
    };
    if let Some(&l) = corpus.labels.iter().find(|&&l| l as usize >= cfg.generator.num_classes) {
        bail!(
            "corpus label {l} exceeds generator.num_classes = {}",
            cfg.generator.num_classes
        );
    }
    ensure_dir(&a.out)?;
    let total = cfg.generator.max_train_steps;
    let every = (total / a.checkpoints.max(1)).max(1);
    let stream = BatchStream::new(
        corpus.num_items,
        cfg.generator.batch_size.min(corpus.num_items),
        cfg.experiment.seed,
    )?;
    let model = GeneratorModel::from_config(&cfg, cfg.experiment.seed)?;
    let mut t = GeneratorTrainer::new(cfg.clone(), model)?;
    let mut csv = LossCsv::open(&a.out.join("losses.csv"), 4, 0, &cfg.hash())?;
    let mut written = Vec::new();
    while t.step < total {
        let r = t.train_step(&corpus, &stream.indices(t.step))?;
        csv.write_report(&r)?;
        if a.log_every > 0 && r.step % a.log_every == 0 {
            log::info!("generator step {} masked_ce {:.4}", r.step, r.total);
        }
        if t.step % every == 0 && t.step < total {
            let p = a.out.join(format!("step-{:07}.ckpt", t.step));
            t.snapshot()?.save(&p)?;
            written.push(p);
        }
    }
    let p = a.out.join("final.ckpt");
    t.snapshot()?.save(&p)?;
    written.push(p);
    println!("{}", json!({ "steps": total, "checkpoints": written }));
    Ok(())
}

pub fn run(a: GenerateArgs, exec: Execution) -> Result<()> {
    let tok = load_tokenizer(&a.ck)?;
    let (model, gcfg) = load_generator(&a.generator).with_context(|| format!("loading {}", a.generator.display()))?;
    if model.k != tok.model.dims.latent_tokens || model.n != tok.model.dims.codebook_size {
        bail!(
            "generator ({} tokens over {} codes) does not match the tokenizer",
            model.k,
            model.n
        );
    }
    let labels: Vec<u32> = match a.per_class {
        Some(n) => (0..model.classes as u32)
            .flat_map(|c| std::iter::repeat_n(c, n))
            .collect(),
        None if a.labels.is_empty() => (0..model.classes as u32).collect(),
        None => a.labels.clone(),
    };
    let g = &gcfg.generator;
    let steps = a.steps.unwrap_or(g.generation_steps);
    let recon = a.recon_steps.unwrap_or(g.reconstruction_steps);
    let temperature = a.temperature.unwrap_or(g.temperature);
    ensure_dir(&a.out)?;
    let ids = generate(&model, &labels, steps, temperature, a.seed)?;
    TokenFile {
        batch: labels.len(),
        len: model.k,
        vocab: model.n,
        ids: ids.clone(),
        config_hash: gcfg.hash(),
    }
    .save(&a.out.join("generated.bin"))?;
    let images = decode_generated(&tok, &ids, recon, temperature, a.seed.wrapping_add(1))?;
    images
        .grid(a.per_class.unwrap_or(8))
        .save(a.out.join("generated.png"))?;
    let mut summary = json!({
        "generator": a.generator,
        "config_hash": gcfg.hash(),
        "samples": labels.len(),
        "generation_steps": steps,
        "reconstruction_steps": recon,
        "temperature": temperature,
        "seed": a.seed,
    });
    if a.score {
        let val = load_corpus(&tok.cfg, exec)?.val;
        let fd = frechet_distance(
            &tok.assets.features.features(&val.images)?,
            &tok.assets.features.features(&images)?,
        )?;
        summary["frechet"] = json!(fd);
    }
    write_json(&a.out.join("generate.json"), &summary)?;
    println!("{summary}");
    Ok(())
}
