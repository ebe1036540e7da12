use alloc::vec::Vec;

use super::config::{FederationConfig, Strategy};
use super::payload::Payload;
use crate::backbone::BackboneConfig;

/// Scalars exchanged in one round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerRow {
    pub round: usize,
    pub uplink: usize,
    pub downlink: usize,
    /// `(client, uplink scalars)` for every participant.
    pub per_client: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommLedger {
    pub rows: Vec<LedgerRow>,
}

impl CommLedger {
    pub fn total_uplink(&self) -> usize {
        self.rows.iter().map(|r| r.uplink).sum()
    }

    pub fn total_downlink(&self) -> usize {
        self.rows.iter().map(|r| r.downlink).sum()
    }
}

/// Counts for one round: every participant uploads its payload and receives
/// the global one. Nothing moves under [`Strategy::Solo`].
pub fn ledger_record(strategy: Strategy, round: usize, global: &Payload, uploads: &[(usize, &Payload)]) -> LedgerRow {
    if !strategy.aggregates() {
        return LedgerRow {
            round,
            uplink: 0,
            downlink: 0,
            per_client: uploads.iter().map(|&(k, _)| (k, 0)).collect(),
        };
    }
    let per_client: Vec<(usize, usize)> = uploads.iter().map(|&(k, p)| (k, p.scalar_count())).collect();
    LedgerRow {
        round,
        uplink: per_client.iter().map(|&(_, n)| n).sum(),
        downlink: uploads.len() * global.scalar_count(),
        per_client,
    }
}

/// Per-client payload size from the configuration alone.
pub fn closed_form_payload_scalars(cfg: &FederationConfig, bcfg: &BackboneConfig) -> usize {
    let entry = bcfg.insertion_spec().entry_scalars();
    let head = bcfg.head_scalars();
    match cfg.strategy {
        Strategy::FedIns => {
            let m = cfg.pool_size;
            let heads = if cfg.per_entry_heads { m * head } else { head };
            m * entry + m * bcfg.width + heads
        }
        Strategy::FedSsf | Strategy::Solo => entry + head,
        Strategy::FedAvgFull | Strategy::FedProx => bcfg.backbone_scalars() + head,
    }
}
