//! Single experiment runs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use fedins_core::backbone::{pretrain_backbone, FrozenBackbone};
use fedins_core::data::{build_federated_data, source_task, FederatedData};
use fedins_core::federation::{run_federation, ClientExecutor, ClientView, CommLedger, GlobalState, RoundReport};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::executor::Threaded;
use crate::metrics::MetricsWriter;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.txt";

/// Pretrained backbone and client data for one config.
pub struct Prepared {
    pub backbone: FrozenBackbone,
    pub data: FederatedData,
    pub views: Vec<ClientView>,
}

/// Pretrains θ on the source task and builds the federated clients.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let seed = cfg.federation.seed;
    let source = source_task(&cfg.synthetic, cfg.source_styles, cfg.style_bank_seed, seed)?;
    let (backbone, _) = pretrain_backbone(cfg.backbone(), &source, &cfg.pretrain())?;
    let data = build_federated_data(&cfg.data(), seed)?;
    let views = data
        .clients
        .iter()
        .map(|c| ClientView::new(&backbone, c))
        .collect::<fedins_core::Result<_>>()?;
    Ok(Prepared { backbone, data, views })
}

pub struct RunOutput {
    pub reports: Vec<RoundReport>,
    pub ledger: CommLedger,
    pub state: GlobalState,
    pub backbone: FrozenBackbone,
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn final_accuracy(&self) -> f64 {
        self.reports.last().map_or(0.0, |r| r.acc_global)
    }
}

/// Runs with the configured thread count.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutput> {
    run_with(cfg, dir, &Threaded::new(cfg.threads))
}

/// Writes `config.txt`, streams `metrics.csv` round by round and saves
/// `checkpoint.bin` at the end.
pub fn run_with<E: ClientExecutor>(cfg: &ExperimentConfig, dir: &Path, exec: &E) -> Result<RunOutput> {
    std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    let cfg_path = dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, cfg.to_text()).map_err(HarnessError::io(&cfg_path))?;
    let prepared = prepare(cfg)?;
    let mut metrics = MetricsWriter::create(&dir.join(METRICS_FILE), cfg.federation.clients)?;
    let mut io_error = None;
    let mut clock = Instant::now();
    let outcome = run_federation(
        &cfg.federation,
        &prepared.backbone,
        &prepared.views,
        exec,
        |report, _| {
            let wall = if cfg.record_wall_clock {
                clock.elapsed().as_millis() as u64
            } else {
                0
            };
            clock = Instant::now();
            if let Err(e) = metrics.write(report, wall) {
                io_error = Some(e);
                return Err(fedins_core::Error::InvalidArgument("metrics write failed".into()));
            }
            Ok(())
        },
    );
    if let Some(e) = io_error {
        return Err(e);
    }
    let outcome = outcome?;
    Checkpoint::capture(cfg, &prepared.backbone, &outcome.state).save(&dir.join(CHECKPOINT_FILE))?;
    Ok(RunOutput {
        reports: outcome.reports,
        ledger: outcome.ledger,
        state: outcome.state,
        backbone: prepared.backbone,
        dir: dir.to_path_buf(),
    })
}
