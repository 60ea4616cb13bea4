use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, ValueEnum};
use sftok::config::Profile;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProfileArg {
    Desk,
    Ci,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Ci => Profile::Ci,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PlotFormat {
    Svg,
    Png,
}

impl PlotFormat {
    pub fn ext(self) -> &'static str {
        match self {
            PlotFormat::Svg => "svg",
            PlotFormat::Png => "png",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
}

/// Step counts given as `a..b` (inclusive) and/or comma-separated values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepList(pub Vec<usize>);

impl FromStr for StepList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let parse = |x: &str| {
                x.trim()
                    .parse::<usize>()
                    .map_err(|e| format!("bad step count {x:?}: {e}"))
            };
            if let Some((a, b)) = part.split_once("..") {
                let (a, b) = (parse(a)?, parse(b.trim_start_matches('='))?);
                if a > b {
                    return Err(format!("empty range {part}"));
                }
                out.extend(a..=b);
            } else {
                out.push(parse(part)?);
            }
        }
        if out.is_empty() || out.contains(&0) {
            return Err("step counts must be positive".into());
        }
        out.sort_unstable();
        out.dedup();
        Ok(StepList(out))
    }
}

#[derive(Args, Debug, Clone)]
pub struct CheckpointArgs {
    /// Tokenizer checkpoint (a stage's `final.ckpt` or any step checkpoint).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Use the raw weights even when EMA weights are stored.
    #[arg(long)]
    pub no_ema: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Stage config files, in stage order. Without any, profile defaults
    /// for `--stages` are used.
    #[arg(long = "config")]
    pub configs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    pub profile: ProfileArg,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1u8, 2, 3])]
    pub stages: Vec<u8>,
    /// Run directory (checkpoints, configs, loss log).
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the latest checkpoint of each stage.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many optimiser steps in this invocation.
    #[arg(long)]
    pub step_budget: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override every stage's step count.
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
    /// Also write loss-curve plots.
    #[arg(long, value_enum)]
    pub plot: Option<PlotFormat>,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub ck: CheckpointArgs,
    /// Step counts to evaluate, e.g. `1..16` or `1,2,4,8,16`.
    #[arg(long, default_value = "1,2,4,8,16")]
    pub steps: StepList,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Held-out images to score.
    #[arg(long, default_value_t = sftok::pipeline::EVAL_IMAGES)]
    pub images: usize,
    /// Images shown in the reconstruction grid (0 disables it).
    #[arg(long, default_value_t = 8)]
    pub grid: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub plot: Option<PlotFormat>,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[command(flatten)]
    pub ck: CheckpointArgs,
    #[arg(long, value_enum, default_value = "val")]
    pub split: Split,
    /// Encode at most this many images.
    #[arg(long)]
    pub count: Option<usize>,
    /// Token file to write (`.json` for JSON, binary otherwise).
    #[arg(long)]
    pub out: PathBuf,
    /// Write a labelled pre-tokenized corpus for generator training instead.
    #[arg(long)]
    pub corpus: bool,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub ck: CheckpointArgs,
    /// Latent token file written by `encode` or `generate`.
    #[arg(long)]
    pub tokens: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Images per row of the output grid.
    #[arg(long, default_value_t = 8)]
    pub cols: usize,
}

#[derive(Args, Debug)]
pub struct TrainGeneratorArgs {
    #[command(flatten)]
    pub ck: CheckpointArgs,
    /// Generator settings are read from this config's `[generator]` table;
    /// defaults to the tokenizer's config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Pre-tokenized corpus; encodes the training split when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Evenly spaced checkpoints written during training.
    #[arg(long, default_value_t = 3)]
    pub checkpoints: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub ck: CheckpointArgs,
    #[arg(long)]
    pub generator: PathBuf,
    /// Class labels to sample, comma-separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "per_class")]
    pub labels: Vec<u32>,
    /// Samples per class for every class.
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Generation steps; defaults to the generator config.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Tokenizer reconstruction steps; defaults to the generator config.
    #[arg(long)]
    pub recon_steps: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also score samples against held-out images with the Fréchet proxy.
    #[arg(long)]
    pub score: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub ck: CheckpointArgs,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = sftok::pipeline::EVAL_IMAGES)]
    pub images: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub plot: Option<PlotFormat>,
}

#[derive(Args, Debug)]
pub struct TheoryArgs {
    #[arg(long, default_value_t = 10_000)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub max_contexts: usize,
    #[arg(long, default_value_t = 4)]
    pub max_positions: usize,
    #[arg(long, default_value_t = 8)]
    pub max_vocab: usize,
    #[arg(long, default_value_t = 20_000)]
    pub max_coupled_entries: usize,
    /// JSON-lines report; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Stage-1 config; profile defaults when absent.
    #[arg(long)]
    pub stage1: Option<PathBuf>,
    /// Stage-2 config; profile defaults when absent.
    #[arg(long)]
    pub stage2: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    pub profile: ProfileArg,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1])]
    pub seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.5, 0.8, 1.0])]
    pub ratios: Vec<f64>,
    /// Also train stage 2 from scratch for the combined step budget.
    #[arg(long)]
    pub no_warmup: bool,
    #[arg(long, default_value = "1,2,4,8,16")]
    pub steps: StepList,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub plot: Option<PlotFormat>,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// CSV report: a loss log, a reconstruct/ablate step table or a
    /// diagnose table.
    #[arg(long)]
    pub input: PathBuf,
    /// Output file; `.svg` or `.png`.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss terms to draw (loss logs only); all when absent.
    #[arg(long, value_delimiter = ',')]
    pub terms: Vec<String>,
    /// Plot records even when they come from different configs.
    #[arg(long)]
    pub force: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_lists() {
        assert_eq!("1..4".parse::<StepList>().unwrap().0, vec![1, 2, 3, 4]);
        assert_eq!("8, 1,2,2".parse::<StepList>().unwrap().0, vec![1, 2, 8]);
        assert_eq!("1..=3,16".parse::<StepList>().unwrap().0, vec![1, 2, 3, 16]);
        assert!("0,1".parse::<StepList>().is_err());
        assert!("4..2".parse::<StepList>().is_err());
        assert!("x".parse::<StepList>().is_err());
    }
}
