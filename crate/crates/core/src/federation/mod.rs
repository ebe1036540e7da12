//! Round-based federated training.
//!
//! Each round the server broadcasts its payload, every participating client
//! runs `T` local epochs of mini-batch SGD on its shard, and the server
//! replaces its payload with the `|D^k|/|D|`-weighted mean of the returned
//! payloads. Pools are averaged slot by slot: all clients start each round
//! from the same global pool, so slot `i` means the same thing everywhere.

mod config;
mod eval;
mod ledger;
mod local;
mod payload;
mod server;

pub use config::{FederationConfig, Strategy};
pub use eval::{accuracy, evaluate_payload, predict, ClientView};
pub use ledger::{closed_form_payload_scalars, ledger_record, CommLedger, LedgerRow};
pub use local::{batch_grads, client_loss, local_update, proximal_penalty, LocalOutcome};
pub use payload::{init_global_state, GlobalState, Payload};
pub use server::{
    aggregation_weights, evaluate_state, run_federation, run_round, server_aggregate, ClientExecutor,
    FederationOutcome, RoundReport, Sequential,
};
