//! Reproducibility checks: rerun a finished run and diff its metrics, and
//! re-evaluate a checkpoint independently of the training loop.

use std::path::Path;

use fedins_core::data::build_federated_data;
use fedins_core::federation::{evaluate_state, ClientView};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::metrics::read_metrics;
use crate::runner::{run_experiment, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE};

/// Accuracy of a checkpoint's state on test shards rebuilt from its
/// stored config.
#[derive(Debug, Clone, PartialEq)]
pub struct Reevaluation {
    pub round: usize,
    pub acc_global: f64,
    pub acc_clients: Vec<f64>,
}

pub fn reevaluate_checkpoint(path: &Path) -> Result<Reevaluation> {
    let ck = Checkpoint::load(path)?;
    let (cfg, bb, state) = ck.restore()?;
    let data = build_federated_data(&cfg.data(), cfg.federation.seed)?;
    let views = data
        .clients
        .iter()
        .map(|c| ClientView::new(&bb, c))
        .collect::<fedins_core::Result<Vec<_>>>()?;
    let (acc_global, acc_clients) = evaluate_state(&cfg.federation, &bb, &state, &views)?;
    Ok(Reevaluation {
        round: state.round,
        acc_global,
        acc_clients,
    })
}

/// Checks that the last metrics row of `dir` matches a re-evaluation of the
/// checkpoint, to the printed precision.
pub fn check_checkpoint_against_metrics(dir: &Path) -> Result<Reevaluation> {
    let re = reevaluate_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    let rows = read_metrics(&dir.join(METRICS_FILE))?;
    let last = rows
        .last()
        .ok_or_else(|| HarnessError::Mismatch("metrics file has no rows".into()))?;
    let recorded: Vec<String> = std::iter::once(last.acc_global)
        .chain(last.acc_clients.iter().copied())
        .map(|a| format!("{a:.6}"))
        .collect();
    let again: Vec<String> = std::iter::once(re.acc_global)
        .chain(re.acc_clients.iter().copied())
        .map(|a| format!("{a:.6}"))
        .collect();
    if last.round != re.round || recorded != again {
        return Err(HarnessError::Mismatch(format!(
            "checkpoint round {} re-evaluates to {:?}, metrics round {} recorded {:?}",
            re.round, again, last.round, recorded
        )));
    }
    Ok(re)
}

/// Reruns the run in `dir` into `scratch` and requires byte-identical
/// metrics plus a consistent checkpoint.
pub fn verify_run(dir: &Path, scratch: &Path) -> Result<Reevaluation> {
    let cfg = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    run_experiment(&cfg, scratch)?;
    let a = std::fs::read(dir.join(METRICS_FILE)).map_err(HarnessError::io(dir.join(METRICS_FILE)))?;
    let b = std::fs::read(scratch.join(METRICS_FILE)).map_err(HarnessError::io(scratch.join(METRICS_FILE)))?;
    if a != b {
        let (ta, tb) = (String::from_utf8_lossy(&a), String::from_utf8_lossy(&b));
        let line = ta
            .lines()
            .zip(tb.lines())
            .position(|(x, y)| x != y)
            .map_or(ta.lines().count().min(tb.lines().count()) + 1, |i| i + 1);
        return Err(HarnessError::Mismatch(format!(
            "metrics differ from the rerun at line {line}"
        )));
    }
    check_checkpoint_against_metrics(dir)
}
