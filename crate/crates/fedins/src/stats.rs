//! Partition and style audits without training.

use std::fmt::Write as _;

use fedins_core::data::build_federated_data;

use crate::config::ExperimentConfig;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct ClientStats {
    pub samples: usize,
    pub train: usize,
    pub test: usize,
    pub class_hist: Vec<usize>,
    /// Samples per style, one column per configured style.
    pub style_counts: Vec<usize>,
    /// Samples mapped through any style.
    pub styled: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionStats {
    pub clients: Vec<ClientStats>,
    pub total: usize,
    pub n_classes: usize,
    pub n_styles: usize,
}

pub fn partition_stats(cfg: &ExperimentConfig) -> Result<PartitionStats> {
    let data = build_federated_data(&cfg.data(), cfg.federation.seed)?;
    let clients = data
        .clients
        .iter()
        .map(|c| {
            let mut class_hist = vec![0; data.n_classes];
            let mut style_counts = vec![0; cfg.n_styles];
            let mut styled = 0;
            for part in [&c.train, &c.test] {
                for &y in &part.data.labels {
                    class_hist[y] += 1;
                }
                for s in part.styles.iter().flatten() {
                    style_counts[*s] += 1;
                    styled += 1;
                }
            }
            ClientStats {
                samples: c.train.data.len() + c.test.data.len(),
                train: c.train.data.len(),
                test: c.test.data.len(),
                class_hist,
                style_counts,
                styled,
            }
        })
        .collect();
    Ok(PartitionStats {
        clients,
        total: data.total,
        n_classes: data.n_classes,
        n_styles: cfg.n_styles,
    })
}

impl PartitionStats {
    /// Comma-separated table, one row per client.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("client,samples,train,test");
        for c in 0..self.n_classes {
            let _ = write!(s, ",class_{c}");
        }
        s.push_str(",styled");
        for j in 0..self.n_styles {
            let _ = write!(s, ",style_{j}");
        }
        s.push('\n');
        for (k, c) in self.clients.iter().enumerate() {
            let _ = write!(s, "{k},{},{},{}", c.samples, c.train, c.test);
            for h in &c.class_hist {
                let _ = write!(s, ",{h}");
            }
            let _ = write!(s, ",{}", c.styled);
            for n in &c.style_counts {
                let _ = write!(s, ",{n}");
            }
            s.push('\n');
        }
        s
    }

    /// Largest relative deviation of any client's class count from that
    /// client's uniform share.
    pub fn max_uniform_deviation(&self) -> f64 {
        self.clients
            .iter()
            .filter(|c| c.samples > 0)
            .flat_map(|c| {
                let u = c.samples as f64 / self.n_classes as f64;
                c.class_hist.iter().map(move |&h| (h as f64 - u).abs() / u)
            })
            .fold(0.0, f64::max)
    }
}
