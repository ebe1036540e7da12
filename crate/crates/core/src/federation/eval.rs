use alloc::vec::Vec;

use crate::backbone::{argmax_rows, network_forward, FrozenBackbone, LabeledData, QueryVector};
use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::pool::instance_adaptive_model;

use super::config::FederationConfig;
use super::payload::Payload;

/// One client's data with the frozen queries precomputed. Queries depend
/// only on θ, which never changes under SSF strategies.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientView {
    pub train: LabeledData,
    pub test: LabeledData,
    pub train_queries: Vec<QueryVector>,
    pub test_queries: Vec<QueryVector>,
}

impl ClientView {
    pub fn new(bb: &FrozenBackbone, ds: &ClientDataset) -> Result<Self> {
        Self::from_parts(bb, ds.train.data.clone(), ds.test.data.clone())
    }

    pub fn from_parts(bb: &FrozenBackbone, train: LabeledData, test: LabeledData) -> Result<Self> {
        let q = |d: &LabeledData| {
            if d.is_empty() {
                Ok(Vec::new())
            } else {
                bb.extract_queries(&d.features)
            }
        };
        Ok(Self {
            train_queries: q(&train)?,
            test_queries: q(&test)?,
            train,
            test,
        })
    }
}

/// Predicted labels for the rows of `x`. Pool payloads route every row
/// through query, selection, composition and merging; `queries` must then
/// hold the frozen query of each row.
pub fn predict(
    cfg: &FederationConfig,
    bb: &FrozenBackbone,
    payload: &Payload,
    x: &Matrix,
    queries: &[QueryVector],
) -> Result<Vec<usize>> {
    if x.rows() == 0 {
        return Ok(Vec::new());
    }
    match payload {
        Payload::Pool { pool, head } => {
            if queries.len() != x.rows() {
                return Err(Error::InvalidArgument("one query per instance required".into()));
            }
            let mut out = Vec::with_capacity(x.rows());
            for (i, q) in queries.iter().enumerate() {
                let (model, _) = instance_adaptive_model(bb, pool, head.as_ref(), q, cfg.top_c)?;
                out.push(model.predict(&x.select_rows(&[i]))?[0]);
            }
            Ok(out)
        }
        Payload::Single { entry, head } => bb.reparameterize(entry, head)?.predict(x),
        Payload::Full { backbone, head } => {
            let (logits, _) = network_forward(bb.config(), backbone, None, Some(head), x)?;
            Ok(argmax_rows(&logits))
        }
    }
}

/// Number of correctly classified rows.
pub fn evaluate_payload(
    cfg: &FederationConfig,
    bb: &FrozenBackbone,
    payload: &Payload,
    data: &LabeledData,
    queries: &[QueryVector],
) -> Result<usize> {
    let pred = predict(cfg, bb, payload, &data.features, queries)?;
    Ok(pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count())
}

/// `correct / total`, or 0 for an empty set.
pub fn accuracy(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}
