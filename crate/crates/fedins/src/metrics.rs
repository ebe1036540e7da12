//! Per-round metrics as comma-separated text.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fedins_core::federation::RoundReport;

use crate::error::{HarnessError, Result};

pub fn header(clients: usize) -> String {
    let mut h = String::from("round,strategy,acc_global");
    for k in 0..clients {
        h.push_str(&format!(",acc_client_{k}"));
    }
    h.push_str(",uplink,downlink,wall_ms");
    h
}

pub fn format_row(r: &RoundReport, wall_ms: u64) -> String {
    let mut s = format!("{},{},{:.6}", r.round, r.strategy.name(), r.acc_global);
    for a in &r.acc_clients {
        s.push_str(&format!(",{a:.6}"));
    }
    s.push_str(&format!(",{},{},{wall_ms}", r.uplink, r.downlink));
    s
}

/// One parsed metrics line.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub strategy: String,
    pub acc_global: f64,
    pub acc_clients: Vec<f64>,
    pub uplink: usize,
    pub downlink: usize,
    pub wall_ms: u64,
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    let head = lines
        .next()
        .ok_or_else(|| HarnessError::Config("empty metrics file".into()))?;
    let cols = head.split(',').count();
    if cols < 6 || !head.starts_with("round,strategy,acc_global") {
        return Err(HarnessError::Config(format!("unexpected metrics header `{head}`")));
    }
    let bad = |n: usize| HarnessError::Config(format!("malformed metrics line {n}"));
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != cols {
                return Err(bad(i + 2));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 2));
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad(i + 2));
            Ok(MetricsRow {
                round: int(f[0])?,
                strategy: f[1].to_string(),
                acc_global: num(f[2])?,
                acc_clients: f[3..cols - 3].iter().map(|s| num(s)).collect::<Result<_>>()?,
                uplink: int(f[cols - 3])?,
                downlink: int(f[cols - 2])?,
                wall_ms: f[cols - 1].parse().map_err(|_| bad(i + 2))?,
            })
        })
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    parse_metrics(&std::fs::read_to_string(path).map_err(HarnessError::io(path))?)
}

/// Appends rows as rounds finish and flushes each one, so an aborted run
/// leaves every completed round on disk.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path, clients: usize) -> Result<Self> {
        let file = File::create(path).map_err(HarnessError::io(path))?;
        let mut w = Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        w.line(&header(clients))?;
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}")
            .and_then(|_| self.out.flush())
            .map_err(HarnessError::io(&self.path))
    }

    pub fn write(&mut self, r: &RoundReport, wall_ms: u64) -> Result<()> {
        self.line(&format_row(r, wall_ms))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedins_core::federation::Strategy;

    #[test]
    fn row_round_trips() {
        let r = RoundReport {
            round: 3,
            strategy: Strategy::FedIns,
            acc_global: 0.5,
            acc_clients: vec![0.25, 0.75],
            uplink: 10,
            downlink: 12,
            participants: vec![0, 1],
            skipped: vec![],
            train_loss: 1.0,
        };
        let text = format!("{}\n{}\n", header(2), format_row(&r, 0));
        assert_eq!(
            text,
            "round,strategy,acc_global,acc_client_0,acc_client_1,uplink,downlink,wall_ms\n3,fedins,0.500000,0.250000,0.750000,10,12,0\n"
        );
        let rows = parse_metrics(&text).unwrap();
        assert_eq!(rows[0].acc_clients, vec![0.25, 0.75]);
        assert_eq!((rows[0].uplink, rows[0].downlink), (10, 12));
    }
}
