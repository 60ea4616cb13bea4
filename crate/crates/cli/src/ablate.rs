//! Replacement-ratio, warm-up and step-count sweeps.

use anyhow::{bail, Result};
use serde_json::json;
use sftok::config::{load_config, RunConfig};
use sftok::experiments::{ablation_sweep, AblationRow, Study, SweepPlan};
use sftok::Execution;

use crate::args::AblateArgs;
use crate::plot::plot_csv;
use crate::report::{ensure_dir, write_csv, write_json};

fn config(path: Option<&std::path::Path>, stage: u8, a: &AblateArgs) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => load_config(p)?,
        None => RunConfig::defaults(stage, a.profile.into())?,
    })
}

pub fn run(a: AblateArgs, exec: Execution) -> Result<()> {
    if a.seeds.is_empty() || a.ratios.is_empty() {
        bail!("need at least one seed and one ratio");
    }
    if let Some(r) = a.ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        bail!("replacement ratio {r} is outside [0, 1]");
    }
    let base1 = config(a.stage1.as_deref(), 1, &a)?;
    let base2 = config(a.stage2.as_deref(), 2, &a)?;
    ensure_dir(&a.out)?;
    let plan = SweepPlan {
        ratios: a.ratios.clone(),
        no_warmup: a.no_warmup,
        eval_steps: a.steps.0.clone(),
    };
    let mut rows: Vec<(AblationRow, String)> = Vec::new();
    let mut teacher = Vec::new();
    for &seed in &a.seeds {
        let (mut s1, mut s2) = (base1.clone(), base2.clone());
        s1.experiment.seed = seed;
        s2.experiment.seed = seed;
        s1.validate()?;
        s2.validate()?;
        let hash = s2.hash();
        log::info!("seed {seed}: preparing corpus, teacher and features");
        let study = Study::prepare(s1, s2, exec)?;
        let floor = study.teacher_frechet()?;
        teacher.push(json!({ "seed": seed, "teacher_frechet": floor }));
        let (found, _) = ablation_sweep(&study, &plan)?;
        for r in found {
            println!("{}", serde_json::to_string(&r)?);
            rows.push((r, hash.clone()));
        }
    }
    let header: Vec<&str> = AblationRow::CSV_HEADER.split(',').chain(["config_hash"]).collect();
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|(r, h)| r.csv().split(',').map(String::from).chain([h.clone()]).collect())
        .collect();
    let csv = a.out.join("ablation.csv");
    write_csv(&csv, &header, &table)?;
    let only_rows: Vec<&AblationRow> = rows.iter().map(|(r, _)| r).collect();
    write_json(
        &a.out.join("ablation.json"),
        &json!({ "seeds": a.seeds, "teacher": teacher, "rows": only_rows }),
    )?;
    if let Some(fmt) = a.plot {
        plot_csv(&csv, &a.out.join(format!("ablation.{}", fmt.ext())), &[], false)?;
    }
    Ok(())
}
