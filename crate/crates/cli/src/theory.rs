//! Randomized verification of the loss and accuracy inequalities.

use std::io::Write;

use anyhow::Result;
use sftok::theory::{check_instances, InstanceLimits};
use sftok::Execution;

use crate::args::TheoryArgs;
use crate::InvariantFailure;

pub fn run(a: TheoryArgs, exec: Execution) -> Result<()> {
    let limits = InstanceLimits {
        max_contexts: a.max_contexts,
        max_positions: a.max_positions,
        max_vocab: a.max_vocab,
        max_coupled_entries: a.max_coupled_entries,
    };
    let reports = check_instances(a.instances, a.seed, &limits, exec)?;
    let mut sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    for r in &reports {
        serde_json::to_writer(&mut sink, r)?;
        writeln!(sink)?;
    }
    sink.flush()?;
    let failed: Vec<_> = reports.iter().filter(|r| !r.all_hold()).collect();
    log::info!("{} of {} checks hold", reports.len() - failed.len(), reports.len());
    if let Some(f) = failed.first() {
        return Err(InvariantFailure(format!(
            "{} checks violated; first at seed {} ({:?}): ls={} lm={} mi_sum={}",
            failed.len(),
            f.seed,
            f.coupling,
            f.ls,
            f.lm,
            f.mi_sum
        ))
        .into());
    }
    Ok(())
}
