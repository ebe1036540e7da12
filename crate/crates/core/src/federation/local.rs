use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::config::{FederationConfig, Strategy};
use super::eval::ClientView;
use super::payload::Payload;
use crate::backbone::{network_backward, network_forward, FrozenBackbone, HeadParams, QueryVector};
use crate::error::{Error, Result};
use crate::nn::{sgd_update, softmax_xent};
use crate::pool::pool_batch_grads;
use crate::rng::{self, Stream};

/// Result of one client's local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub client: usize,
    pub payload: Payload,
    /// `|D^k|`.
    pub samples: usize,
    /// Mean mini-batch objective per epoch.
    pub epoch_losses: Vec<f64>,
    /// Set when the client had no training data; the payload is the snapshot.
    pub skipped: bool,
}

/// Objective and payload-shaped gradient of the rows `idx` of the client's
/// training set. θ is never differentiated for SSF strategies.
pub fn batch_grads(
    cfg: &FederationConfig,
    bb: &FrozenBackbone,
    payload: &Payload,
    view: &ClientView,
    idx: &[usize],
) -> Result<(f64, Payload)> {
    let batch = view.train.subset(idx);
    match payload {
        Payload::Pool { pool, head } => {
            let queries: Vec<QueryVector> = idx.iter().map(|&i| view.train_queries[i].clone()).collect();
            let out = pool_batch_grads(
                bb,
                pool,
                head.as_ref(),
                &batch.features,
                &batch.labels,
                cfg.top_c,
                cfg.key_weight,
                Some(&queries),
                None,
            )?;
            Ok((
                out.loss,
                Payload::Pool {
                    pool: out.grads.pool,
                    head: out.grads.head,
                },
            ))
        }
        Payload::Single { entry, head } => {
            let (logits, trace) = bb.forward_traced(entry, head, &batch.features)?;
            let (loss, dlogits) = softmax_xent(&logits, &batch.labels)?;
            let (entry, head) = bb.backward_ssf(entry, head, &trace, &dlogits)?;
            Ok((loss, Payload::Single { entry, head }))
        }
        Payload::Full { backbone, head } => {
            let bcfg = bb.config();
            let (logits, trace) = network_forward(bcfg, backbone, None, Some(head), &batch.features)?;
            let (loss, dlogits) = softmax_xent(&logits, &batch.labels)?;
            let g = network_backward(bcfg, backbone, None, head, &trace, &dlogits, true)?;
            let backbone = g
                .theta
                .ok_or(Error::InvalidArgument("backbone gradient missing".into()))?;
            let head: HeadParams = g.head;
            Ok((loss, Payload::Full { backbone, head }))
        }
    }
}

/// `(μ/2)·‖local − global‖²` and its gradient `μ·(local − global)`.
pub fn proximal_penalty(local: &Payload, global: &Payload, mu: f64) -> Result<(f64, Payload)> {
    if !(mu >= 0.0) {
        return Err(Error::InvalidArgument(alloc::format!(
            "proximal weight must be >= 0, got {mu}"
        )));
    }
    if !local.same_layout(global) {
        return Err(Error::PayloadMismatch("proximal term needs matching payloads".into()));
    }
    let mut grad = local.zeros_like();
    let mut sq = 0.0;
    for ((g, l), w) in grad.slices_mut().into_iter().zip(local.slices()).zip(global.slices()) {
        for ((gv, lv), wv) in g.iter_mut().zip(l).zip(w) {
            let d = lv - wv;
            sq += d * d;
            *gv = mu * d;
        }
    }
    Ok((0.5 * mu * sq, grad))
}

/// Training objective of `payload` on the client's whole training set.
pub fn client_loss(cfg: &FederationConfig, bb: &FrozenBackbone, payload: &Payload, view: &ClientView) -> Result<f64> {
    if view.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let idx: Vec<usize> = (0..view.train.len()).collect();
    batch_grads(cfg, bb, payload, view, &idx).map(|(l, _)| l)
}

/// `T` epochs of shuffled mini-batch SGD starting from `snapshot`, driven by
/// the `(seed, k, z)` stream.
pub fn local_update(
    cfg: &FederationConfig,
    bb: &FrozenBackbone,
    view: &ClientView,
    snapshot: &Payload,
    client: usize,
    round: usize,
) -> Result<LocalOutcome> {
    let n = view.train.len();
    let mut payload = snapshot.clone();
    if n == 0 {
        return Ok(LocalOutcome {
            client,
            payload,
            samples: 0,
            epoch_losses: Vec::new(),
            skipped: true,
        });
    }
    let mut r = rng::stream(cfg.seed, Stream::Local, &[client as u64, round as u64]);
    let mut epoch_losses = Vec::with_capacity(cfg.local_epochs);
    for _ in 0..cfg.local_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let (mut total, mut batches) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let (mut loss, mut grads) = batch_grads(cfg, bb, &payload, view, idx)?;
            if cfg.strategy == Strategy::FedProx {
                let (pen, pg) = proximal_penalty(&payload, snapshot, cfg.prox_mu)?;
                loss += pen;
                for (g, p) in grads.slices_mut().into_iter().zip(pg.slices()) {
                    for (gv, pv) in g.iter_mut().zip(p) {
                        *gv += pv;
                    }
                }
            }
            for (p, g) in payload.slices_mut().into_iter().zip(grads.slices()) {
                sgd_update(p, g, cfg.lr);
            }
            total += loss;
            batches += 1;
        }
        if !payload.is_finite() {
            return Err(Error::NonFinite("local update diverged"));
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(LocalOutcome {
        client,
        payload,
        samples: n,
        epoch_losses,
        skipped: false,
    })
}
