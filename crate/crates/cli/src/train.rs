use anyhow::{bail, Result};
use serde_json::json;
use sftok::config::{load_config, RunConfig};
use sftok::pipeline::{run_training, TrainOptions};
use sftok::Execution;

use crate::args::TrainArgs;
use crate::plot::plot_csv;

/// Resolves the stage configs named on the command line.
pub fn stage_configs(a: &TrainArgs) -> Result<Vec<RunConfig>> {
    let mut cfgs = if a.configs.is_empty() {
        a.stages
            .iter()
            .map(|&s| RunConfig::defaults(s, a.profile.into()))
            .collect::<sftok::Result<Vec<_>>>()?
    } else {
        a.configs.iter().map(load_config).collect::<sftok::Result<Vec<_>>>()?
    };
    if cfgs.is_empty() {
        bail!("no stages to train");
    }
    for c in &mut cfgs {
        if let Some(s) = a.seed {
            c.experiment.seed = s;
        }
        if let Some(n) = a.max_steps {
            c.training.max_train_steps = n;
        }
        c.experiment.resume_training |= a.resume;
        c.validate()?;
    }
    Ok(cfgs)
}

pub fn run(a: TrainArgs, exec: Execution) -> Result<()> {
    let cfgs = stage_configs(&a)?;
    let opts = TrainOptions {
        exec,
        step_budget: a.step_budget,
        log_every: a.log_every,
        ..TrainOptions::new(&a.out)
    };
    let outcomes = run_training(&cfgs, &opts)?;
    for o in &outcomes {
        let line = json!({
            "stage": o.stage,
            "finished": o.finished,
            "checkpoints": o.checkpoints,
            "last_report": o.last_report,
            "warnings": o.warnings,
        });
        println!("{line}");
    }
    if let Some(fmt) = a.plot {
        let out = a.out.join(format!("losses.{}", fmt.ext()));
        plot_csv(&a.out.join("losses.csv"), &out, &[], false)?;
        log::info!("wrote {}", out.display());
    }
    Ok(())
}
