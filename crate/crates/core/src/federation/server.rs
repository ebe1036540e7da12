use alloc::format;
use alloc::vec::Vec;

use rand::seq::index;

use super::config::{FederationConfig, Strategy};
use super::eval::{accuracy, evaluate_payload, ClientView};
use super::ledger::{ledger_record, CommLedger};
use super::local::{local_update, LocalOutcome};
use super::payload::{init_global_state, GlobalState, Payload};
use crate::backbone::FrozenBackbone;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Runs per-client work. Implementations may run clients concurrently but
/// must return results in client order.
pub trait ClientExecutor {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<Result<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync;
}

/// Runs clients one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl ClientExecutor for Sequential {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<Result<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync,
    {
        (0..n).map(f).collect()
    }
}

/// `|D^k| / Σ|D^j|` for each entry of `samples`.
pub fn aggregation_weights(samples: &[usize]) -> Result<Vec<f64>> {
    let total: usize = samples.iter().sum();
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(samples.iter().map(|&n| n as f64 / total as f64).collect())
}

/// Elementwise weighted mean, accumulated in list order starting from
/// `w_0 · p_0`.
pub fn server_aggregate(payloads: &[&Payload], weights: &[f64]) -> Result<Payload> {
    if payloads.is_empty() || payloads.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} payloads with {} weights",
            payloads.len(),
            weights.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if !((sum - 1.0).abs() <= 1e-12) {
        return Err(Error::WeightSum(sum));
    }
    let first = payloads[0];
    if let Some(i) = payloads.iter().position(|p| !p.same_layout(first)) {
        return Err(Error::PayloadMismatch(format!(
            "payload {i} differs in layout from payload 0"
        )));
    }
    let mut out = first.clone();
    for s in out.slices_mut() {
        for v in s.iter_mut() {
            *v *= weights[0];
        }
    }
    for (p, &w) in payloads.iter().zip(weights).skip(1) {
        for (o, s) in out.slices_mut().into_iter().zip(p.slices()) {
            for (ov, sv) in o.iter_mut().zip(s) {
                *ov += w * sv;
            }
        }
    }
    Ok(out)
}

/// Metrics of one completed round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    /// 1-based index of the round just completed.
    pub round: usize,
    pub strategy: Strategy,
    pub acc_global: f64,
    pub acc_clients: Vec<f64>,
    pub uplink: usize,
    pub downlink: usize,
    pub participants: Vec<usize>,
    /// Clients that had no training data.
    pub skipped: Vec<usize>,
    /// Sample-weighted mean of the participants' last-epoch losses.
    pub train_loss: f64,
}

fn participants(cfg: &FederationConfig, round: usize) -> Vec<usize> {
    let k = cfg.clients;
    if cfg.participation >= 1.0 {
        return (0..k).collect();
    }
    let n = (crate::math::round(cfg.participation * k as f64) as usize).clamp(1, k);
    let mut r = rng::stream(cfg.seed, Stream::Participation, &[round as u64]);
    let mut v = index::sample(&mut r, k, n).into_vec();
    v.sort_unstable();
    v
}

/// Global and per-client test accuracy of `state`.
pub fn evaluate_state(
    cfg: &FederationConfig,
    bb: &FrozenBackbone,
    state: &GlobalState,
    views: &[ClientView],
) -> Result<(f64, Vec<f64>)> {
    let mut correct = 0;
    let mut total = 0;
    let mut per = Vec::with_capacity(views.len());
    for (k, v) in views.iter().enumerate() {
        let c = evaluate_payload(cfg, bb, state.snapshot_for(k), &v.test, &v.test_queries)?;
        per.push(accuracy(c, v.test.len()));
        correct += c;
        total += v.test.len();
    }
    let global = if state.strategy.aggregates() {
        accuracy(correct, total)
    } else {
        per.iter().sum::<f64>() / per.len() as f64
    };
    Ok((global, per))
}

/// Broadcast, local updates, aggregation, accounting and evaluation.
pub fn run_round<E: ClientExecutor>(
    cfg: &FederationConfig,
    bb: &FrozenBackbone,
    views: &[ClientView],
    state: &mut GlobalState,
    ledger: &mut CommLedger,
    exec: &E,
) -> Result<RoundReport> {
    if views.len() != cfg.clients {
        return Err(Error::InvalidArgument(format!(
            "{} client datasets for K = {}",
            views.len(),
            cfg.clients
        )));
    }
    let z = state.round;
    let chosen = participants(cfg, z);
    let snapshot: &GlobalState = state;
    let results = exec.map(chosen.len(), |i| {
        let k = chosen[i];
        local_update(cfg, bb, &views[k], snapshot.snapshot_for(k), k, z)
    });
    let outcomes: Vec<LocalOutcome> = results.into_iter().collect::<Result<_>>()?;
    let trained: Vec<&LocalOutcome> = outcomes.iter().filter(|o| !o.skipped).collect();
    let skipped: Vec<usize> = outcomes.iter().filter(|o| o.skipped).map(|o| o.client).collect();
    if trained.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let samples: Vec<usize> = trained.iter().map(|o| o.samples).collect();
    let weights = aggregation_weights(&samples)?;
    let train_loss = trained
        .iter()
        .zip(&weights)
        .map(|(o, w)| w * o.epoch_losses.last().copied().unwrap_or(0.0))
        .sum();

    if cfg.strategy.aggregates() {
        let payloads: Vec<&Payload> = trained.iter().map(|o| &o.payload).collect();
        state.payload = server_aggregate(&payloads, &weights)?;
    } else {
        for o in &trained {
            state.client_payloads[o.client] = o.payload.clone();
        }
    }
    let uploads: Vec<(usize, &Payload)> = trained.iter().map(|o| (o.client, &o.payload)).collect();
    let row = ledger_record(cfg.strategy, z + 1, &state.payload, &uploads);
    state.round = z + 1;
    let (acc_global, acc_clients) = evaluate_state(cfg, bb, state, views)?;
    let report = RoundReport {
        round: z + 1,
        strategy: cfg.strategy,
        acc_global,
        acc_clients,
        uplink: row.uplink,
        downlink: row.downlink,
        participants: chosen,
        skipped,
        train_loss,
    };
    ledger.rows.push(row);
    Ok(report)
}

/// Final state and history of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationOutcome {
    pub state: GlobalState,
    pub reports: Vec<RoundReport>,
    pub ledger: CommLedger,
}

/// All `Z` rounds from a fresh state. `on_round` sees each report as soon as
/// the round finishes, so a caller can persist partial results.
pub fn run_federation<E, F>(
    cfg: &FederationConfig,
    bb: &FrozenBackbone,
    views: &[ClientView],
    exec: &E,
    mut on_round: F,
) -> Result<FederationOutcome>
where
    E: ClientExecutor,
    F: FnMut(&RoundReport, &GlobalState) -> Result<()>,
{
    cfg.validate()?;
    let mut state = init_global_state(cfg, bb)?;
    let mut ledger = CommLedger::default();
    let mut reports = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let report = run_round(cfg, bb, views, &mut state, &mut ledger, exec)?;
        on_round(&report, &state)?;
        reports.push(report);
    }
    Ok(FederationOutcome { state, reports, ledger })
}
