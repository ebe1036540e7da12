use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedins::checkpoint::Checkpoint;
use fedins::config::{ConfigLoader, ExperimentConfig};
use fedins::presets::preset_loader;
use fedins::runner::{run_experiment, METRICS_FILE};
use fedins::stats::partition_stats;
use fedins::sweep::run_sweep;
use fedins::verify::{check_checkpoint_against_metrics, verify_run};
use fedins::{HarnessError, Result};

/// Federated SSF-pool simulator at desk scale.
///
/// Settings come from defaults, then a preset or config file, then flags
/// (flag > file > default). Exit status: 0 success, 1 config error,
/// 2 runtime error, 3 verification mismatch.
#[derive(Parser)]
#[command(name = "fedins", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Source {
    /// Shipped preset (desk-accept, fig5a-desk, fig5b-desk, fig6a-desk, fig6b-desk).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Config file in `key = value` format.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
}

impl Source {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut l = match (&self.preset, &self.config) {
            (Some(p), _) => preset_loader(p)?,
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
                    path: path.clone(),
                    source,
                })?;
                let mut l = ConfigLoader::new();
                l.text(&text, &path.display().to_string())?;
                l
            }
            (None, None) => ConfigLoader::new(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            l.set(k.trim(), v.trim(), "--set")?;
        }
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("strategy", self.strategy.clone()),
            ("rounds", self.rounds.map(|v| v.to_string())),
            ("output_dir", self.out.as_ref().map(|p| p.display().to_string())),
            ("threads", self.threads.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                l.set(k, &v, &format!("--{}", k.replace('_', "-")))?;
            }
        }
        l.finish()
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one configuration; writes config.txt, metrics.csv, checkpoint.bin.
    Run(Source),
    /// Run the configured sweep; one directory per point plus summary.csv.
    Sweep(Source),
    /// Print per-client class histograms and style mixes without training.
    PartitionStats {
        #[command(flatten)]
        source: Source,
        /// Also write the table to this file.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Rerun a finished run and require byte-identical metrics, then
    /// re-evaluate its checkpoint.
    Verify {
        /// Run directory (holding config.txt, metrics.csv, checkpoint.bin).
        dir: PathBuf,
        /// Where to put the rerun; defaults to <dir>/verify.
        #[arg(long)]
        scratch: Option<PathBuf>,
        /// Only re-evaluate the checkpoint against the last metrics row.
        #[arg(long)]
        checkpoint_only: bool,
    },
    /// Print a checkpoint's manifest summary after an integrity check.
    InspectCheckpoint {
        path: PathBuf,
        /// Warn when the checkpoint was written under a different config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Run(src) => {
            let cfg = src.resolve()?;
            let out = run_experiment(&cfg, &cfg.output_dir)?;
            for r in &out.reports {
                println!(
                    "round {:>3}  acc {:.4}  uplink {}  downlink {}",
                    r.round, r.acc_global, r.uplink, r.downlink
                );
            }
            println!("metrics: {}", out.dir.join(METRICS_FILE).display());
        }
        Cmd::Sweep(src) => {
            let cfg = src.resolve()?;
            let out = run_sweep(&cfg)?;
            println!(
                "{:>10}  {:<12} {:>8} {:>8} {:>5}",
                out.axis.name(),
                "strategy",
                "mean",
                "std",
                "runs"
            );
            for r in &out.summary {
                println!(
                    "{:>10}  {:<12} {:>8.4} {:>8.4} {:>5}",
                    r.value,
                    r.strategy.name(),
                    r.mean,
                    r.std,
                    r.runs
                );
            }
            println!(
                "summary: {}",
                cfg.output_dir.join(fedins::sweep::SUMMARY_FILE).display()
            );
        }
        Cmd::PartitionStats { source, save } => {
            let cfg = source.resolve()?;
            let stats = partition_stats(&cfg)?;
            let table = stats.to_csv();
            print!("{table}");
            println!(
                "total {} samples over {} clients; max class deviation from uniform {:.4}",
                stats.total,
                stats.clients.len(),
                stats.max_uniform_deviation()
            );
            if let Some(p) = save {
                std::fs::write(&p, table).map_err(|source| HarnessError::Io { path: p, source })?;
            }
        }
        Cmd::Verify {
            dir,
            scratch,
            checkpoint_only,
        } => {
            let re = if checkpoint_only {
                check_checkpoint_against_metrics(&dir)?
            } else {
                verify_run(&dir, &scratch.unwrap_or_else(|| dir.join("verify")))?
            };
            println!("verified: round {} acc {:.6}", re.round, re.acc_global);
        }
        Cmd::InspectCheckpoint { path, config } => {
            let ck = match config {
                Some(c) => {
                    let (ck, warning) = Checkpoint::load_checked(&path, &ExperimentConfig::load(&c)?)?;
                    if let Some(w) = warning {
                        eprintln!("warning: {w}");
                    }
                    ck
                }
                None => Checkpoint::load(&path)?,
            };
            println!("strategy         {}", ck.strategy.name());
            println!("round            {}", ck.round);
            println!("config_hash      {}", ck.config_hash);
            println!("blocks           {}", ck.blocks.len());
            println!("frozen_scalars   {}", ck.frozen_scalars());
            println!("payload_scalars  {}", ck.payload_scalars());
            println!("total_scalars    {}", ck.total_scalars());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
