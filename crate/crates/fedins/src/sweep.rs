//! One-axis sweeps over seeded independent runs.
//!
//! Results land in `<output_dir>/<axis>=<value>/<strategy>/seed<seed>/` plus
//! a `summary.csv` with the mean and sample standard deviation of the final
//! global accuracy per (value, strategy).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use fedins_core::federation::{Sequential, Strategy};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::executor::Threaded;
use crate::metrics::read_metrics;
use crate::runner::{run_with, METRICS_FILE};

pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    AlphaDir,
    NStyles,
    /// `M`; `top_c` is capped at the swept value.
    PoolSize,
    /// `C`.
    TopC,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::AlphaDir => "alpha_dir",
            Self::NStyles => "n_styles",
            Self::PoolSize => "pool_size",
            Self::TopC => "top_c",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "alpha_dir" => Some(Self::AlphaDir),
            "n_styles" => Some(Self::NStyles),
            "pool_size" | "M" => Some(Self::PoolSize),
            "top_c" | "C" => Some(Self::TopC),
            _ => None,
        }
    }

    fn integral(self) -> bool {
        !matches!(self, Self::AlphaDir)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepSpec {
    pub axis: Option<SweepAxis>,
    pub values: Vec<f64>,
    /// Empty means the base strategy only.
    pub strategies: Vec<Strategy>,
    /// Empty means the base seed only.
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub strategy: Strategy,
    pub seed: u64,
}

impl SweepSpec {
    pub(crate) fn check(&self, base: &ExperimentConfig) -> Result<(), (&'static str, String)> {
        let Some(axis) = self.axis else {
            return Err(("sweep_axis", "sweep keys given without sweep_axis".into()));
        };
        if self.values.is_empty() {
            return Err(("sweep_values", "sweep_values is empty".into()));
        }
        for p in self.points(base) {
            if axis.integral() && (p.value < 0.0 || p.value.fract() != 0.0) {
                return Err((
                    "sweep_values",
                    format!("{} takes whole numbers, got {}", axis.name(), p.value),
                ));
            }
            let cfg = point_config(base, axis, p);
            cfg.check()
                .map_err(|(_, m)| ("sweep_values", format!("{} = {}: {m}", axis.name(), p.value)))?;
        }
        Ok(())
    }

    /// Points in (value, strategy, seed) order.
    pub fn points(&self, base: &ExperimentConfig) -> Vec<SweepPoint> {
        let strategies = if self.strategies.is_empty() {
            vec![base.federation.strategy]
        } else {
            self.strategies.clone()
        };
        let seeds = if self.seeds.is_empty() {
            vec![base.federation.seed]
        } else {
            self.seeds.clone()
        };
        let mut out = Vec::new();
        for &value in &self.values {
            for &strategy in &strategies {
                for &seed in &seeds {
                    out.push(SweepPoint { value, strategy, seed });
                }
            }
        }
        out
    }
}

/// The standalone config of one sweep point.
pub fn point_config(base: &ExperimentConfig, axis: SweepAxis, p: SweepPoint) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.sweep = None;
    cfg.federation.strategy = p.strategy;
    cfg.federation.seed = p.seed;
    match axis {
        SweepAxis::AlphaDir => cfg.alpha_dir = p.value,
        SweepAxis::NStyles => cfg.n_styles = p.value as usize,
        SweepAxis::PoolSize => {
            cfg.federation.pool_size = p.value as usize;
            cfg.federation.top_c = cfg.federation.top_c.min(cfg.federation.pool_size);
        }
        SweepAxis::TopC => cfg.federation.top_c = p.value as usize,
    }
    cfg
}

pub fn point_dir(root: &Path, axis: SweepAxis, p: SweepPoint) -> PathBuf {
    root.join(format!("{}={}", axis.name(), p.value))
        .join(p.strategy.name())
        .join(format!("seed{}", p.seed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointResult {
    pub point: SweepPoint,
    pub final_accuracy: f64,
    /// Uplink scalars of the first round.
    pub uplink: usize,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub value: f64,
    pub strategy: Strategy,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    pub runs: usize,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(results: &[PointResult]) -> Vec<SummaryRow> {
    let mut keys: Vec<(f64, Strategy)> = Vec::new();
    for r in results {
        let k = (r.point.value, r.point.strategy);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(value, strategy)| {
            let accs: Vec<f64> = results
                .iter()
                .filter(|r| r.point.value == value && r.point.strategy == strategy)
                .map(|r| r.final_accuracy)
                .collect();
            let (mean, std) = mean_std(&accs);
            SummaryRow {
                value,
                strategy,
                mean,
                std,
                runs: accs.len(),
            }
        })
        .collect()
}

pub fn summary_text(axis: SweepAxis, rows: &[SummaryRow]) -> String {
    let mut s = format!("{},strategy,mean_acc,std_acc,runs\n", axis.name());
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{}",
            r.value,
            r.strategy.name(),
            r.mean,
            r.std,
            r.runs
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub axis: SweepAxis,
    pub results: Vec<PointResult>,
    pub summary: Vec<SummaryRow>,
}

/// Runs every point, in parallel across `threads` workers. Final accuracies
/// are read back from each point's metrics file.
pub fn run_sweep(base: &ExperimentConfig) -> Result<SweepOutcome> {
    let spec = base
        .sweep
        .clone()
        .ok_or_else(|| HarnessError::Config("no sweep configured (set sweep_axis and sweep_values)".into()))?;
    base.check()
        .map_err(|(k, m)| HarnessError::Config(format!("{k}: {m}")))?;
    let axis = spec.axis.expect("checked");
    let points = spec.points(base);
    let root = &base.output_dir;
    let workers = Threaded::new(base.threads).threads.min(points.len()).max(1);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<PointResult>>>> = Mutex::new((0..points.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= points.len() {
                    break;
                }
                let p = points[i];
                let dir = point_dir(root, axis, p);
                let r = run_with(&point_config(base, axis, p), &dir, &Sequential).and_then(|out| {
                    let rows = read_metrics(&dir.join(METRICS_FILE))?;
                    let last = rows
                        .last()
                        .ok_or_else(|| HarnessError::Config("empty metrics".into()))?;
                    Ok(PointResult {
                        point: p,
                        final_accuracy: last.acc_global,
                        uplink: out.ledger.rows.first().map_or(0, |r| r.uplink),
                        dir,
                    })
                });
                slots.lock().expect("sweep slot lock")[i] = Some(r);
            });
        }
    });
    let results = slots
        .into_inner()
        .expect("sweep slot lock")
        .into_iter()
        .map(|r| r.expect("every point ran"))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&results);
    let path = root.join(SUMMARY_FILE);
    std::fs::create_dir_all(root).map_err(HarnessError::io(root))?;
    std::fs::write(&path, summary_text(axis, &summary)).map_err(HarnessError::io(&path))?;
    Ok(SweepOutcome { axis, results, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn invalid_values_rejected_before_running() {
        let text = "sweep_axis = top_c\nsweep_values = 1, 30\n";
        let err = ExperimentConfig::from_text(text, "t").unwrap_err().to_string();
        assert!(err.contains("t:2:") && err.contains("top_c = 30"), "{err}");
        let frac = ExperimentConfig::from_text("sweep_axis = n_styles\nsweep_values = 1.5\n", "t").unwrap_err();
        assert!(frac.to_string().contains("whole numbers"));
    }

    #[test]
    fn pool_axis_caps_c() {
        let base = ExperimentConfig::default();
        let p = SweepPoint {
            value: 1.0,
            strategy: Strategy::FedIns,
            seed: 0,
        };
        let cfg = point_config(&base, SweepAxis::PoolSize, p);
        assert_eq!((cfg.federation.pool_size, cfg.federation.top_c), (1, 1));
    }
}
