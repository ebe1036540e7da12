use alloc::format;

use crate::error::{Error, Result};

/// What is trained and exchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// SSF pool with keys, routed per instance.
    FedIns,
    /// A single SSF entry plus head.
    FedSsf,
    /// Full fine-tuning of backbone and head, plain averaging.
    FedAvgFull,
    /// Full fine-tuning with a proximal term toward the broadcast model.
    FedProx,
    /// Single SSF entry plus head per client, never aggregated.
    Solo,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::FedIns,
        Strategy::FedSsf,
        Strategy::FedAvgFull,
        Strategy::FedProx,
        Strategy::Solo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::FedIns => "fedins",
            Self::FedSsf => "fedssf",
            Self::FedAvgFull => "fedavg_full",
            Self::FedProx => "fedprox",
            Self::Solo => "solo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }

    pub fn trains_backbone(self) -> bool {
        matches!(self, Self::FedAvgFull | Self::FedProx)
    }

    pub fn aggregates(self) -> bool {
        !matches!(self, Self::Solo)
    }
}

/// Federated training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FederationConfig {
    pub strategy: Strategy,
    /// Number of clients `K`.
    pub clients: usize,
    /// Communication rounds `Z`.
    pub rounds: usize,
    /// Local epochs `T` per round.
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Pool size `M`.
    pub pool_size: usize,
    /// Entries selected per instance, `C`.
    pub top_c: usize,
    /// Weight of the key objective, `λ`.
    pub key_weight: f64,
    /// FedProx proximal weight `μ`.
    pub prox_mu: f64,
    pub seed: u64,
    /// Fraction of clients sampled per round.
    pub participation: f64,
    /// One head per pool entry instead of one shared head.
    pub per_entry_heads: bool,
    /// Standard deviation of the SSF initialisation around identity.
    pub ssf_init_std: f64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::FedIns,
            clients: 5,
            rounds: 20,
            local_epochs: 5,
            lr: 0.01,
            batch_size: 32,
            pool_size: 25,
            top_c: 3,
            key_weight: 0.5,
            prox_mu: 0.001,
            seed: 0,
            participation: 1.0,
            per_entry_heads: false,
            ssf_init_std: 0.02,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: alloc::string::String| Err(Error::Config(m));
        if self.clients == 0 {
            return fail("clients must be >= 1".into());
        }
        if self.rounds == 0 {
            return fail("rounds must be >= 1".into());
        }
        if self.local_epochs == 0 {
            return fail("local_epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return fail(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if self.pool_size == 0 || self.top_c == 0 || self.top_c > self.pool_size {
            return fail(format!("C <= M violated: C = {}, M = {}", self.top_c, self.pool_size));
        }
        if !(self.key_weight >= 0.0) {
            return fail("key_weight must be >= 0".into());
        }
        if !(self.prox_mu >= 0.0) {
            return fail("prox_mu must be >= 0".into());
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return fail(format!("participation must lie in (0, 1], got {}", self.participation));
        }
        if !(self.ssf_init_std >= 0.0) {
            return fail("ssf_init_std must be >= 0".into());
        }
        Ok(())
    }
}
