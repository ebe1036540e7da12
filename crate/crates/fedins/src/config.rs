//! Flat `key = value` experiment configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Lists are comma separated. Unknown keys, repeated keys, malformed values
//! and violated invariants are reported with the line they came from.
//! Later sources override earlier ones: defaults, then a preset or file,
//! then command-line flags.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fedins_core::backbone::{BackboneConfig, InsertionScheme, PretrainConfig};
use fedins_core::data::{DataConfig, PartitionSpec, SyntheticSpec, STYLE_BANK_SIZE};
use fedins_core::federation::{FederationConfig, Strategy};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};
use crate::sweep::{SweepAxis, SweepSpec};

/// Everything one run (or one sweep) needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub preset: String,
    pub federation: FederationConfig,
    pub synthetic: SyntheticSpec,
    pub alpha_dir: f64,
    pub min_per_client: usize,
    pub n_styles: usize,
    pub test_fraction: f64,
    pub style_bank_seed: u64,
    pub width: usize,
    pub depth: usize,
    pub ssf_insertion: InsertionScheme,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,
    /// Styles mixed into the pretraining source task.
    pub source_styles: usize,
    pub output_dir: PathBuf,
    /// Worker threads; 0 picks the machine's parallelism.
    pub threads: usize,
    /// Write measured per-round times instead of 0 in `wall_ms`.
    pub record_wall_clock: bool,
    pub sweep: Option<SweepSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: "custom".into(),
            federation: FederationConfig::default(),
            synthetic: SyntheticSpec::default(),
            alpha_dir: 0.5,
            min_per_client: 10,
            n_styles: 0,
            test_fraction: 0.2,
            style_bank_seed: 1,
            width: 64,
            depth: 3,
            ssf_insertion: InsertionScheme::LinearAndNorm,
            pretrain_epochs: 10,
            pretrain_lr: 0.05,
            pretrain_batch_size: 32,
            source_styles: 4,
            output_dir: PathBuf::from("runs"),
            threads: 0,
            record_wall_clock: false,
            sweep: None,
        }
    }
}

/// Every accepted key, in canonical order.
pub const KEYS: &[&str] = &[
    "preset",
    "strategy",
    "clients",
    "rounds",
    "local_epochs",
    "lr",
    "batch_size",
    "pool_size",
    "top_c",
    "key_weight",
    "prox_mu",
    "seed",
    "participation",
    "per_entry_heads",
    "ssf_init_std",
    "n_classes",
    "dim",
    "samples_per_class",
    "geometry_seed",
    "modes_per_class",
    "center_std",
    "noise_std",
    "alpha_dir",
    "min_per_client",
    "n_styles",
    "test_fraction",
    "style_bank_seed",
    "width",
    "depth",
    "ssf_insertion",
    "pretrain_epochs",
    "pretrain_lr",
    "pretrain_batch_size",
    "source_styles",
    "output_dir",
    "threads",
    "record_wall_clock",
    "sweep_axis",
    "sweep_values",
    "sweep_strategies",
    "sweep_seeds",
];

/// Keys that do not change results and are left out of the config hash.
const UNHASHED: &[&str] = &["output_dir", "threads", "record_wall_clock"];

fn parse_num<T: std::str::FromStr>(v: &str, what: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("expected {what}, got `{v}`"))
}

fn parse_f64(v: &str) -> Result<f64, String> {
    let x: f64 = parse_num(v, "a number")?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("expected a finite number, got `{v}`"))
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_strategy(v: &str) -> Result<Strategy, String> {
    Strategy::parse(v).ok_or_else(|| {
        let names: Vec<&str> = Strategy::ALL.iter().map(|s| s.name()).collect();
        format!("unknown strategy `{v}` (expected one of {})", names.join(", "))
    })
}

fn parse_list<T>(v: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(f).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    fn sweep_mut(&mut self) -> &mut SweepSpec {
        self.sweep.get_or_insert_with(SweepSpec::default)
    }

    /// Assigns one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let f = &mut self.federation;
        let s = &mut self.synthetic;
        match key {
            "preset" => self.preset = v.to_string(),
            "strategy" => f.strategy = parse_strategy(v)?,
            "clients" => f.clients = parse_num(v, "an integer")?,
            "rounds" => f.rounds = parse_num(v, "an integer")?,
            "local_epochs" => f.local_epochs = parse_num(v, "an integer")?,
            "lr" => f.lr = parse_f64(v)?,
            "batch_size" => f.batch_size = parse_num(v, "an integer")?,
            "pool_size" => f.pool_size = parse_num(v, "an integer")?,
            "top_c" => f.top_c = parse_num(v, "an integer")?,
            "key_weight" => f.key_weight = parse_f64(v)?,
            "prox_mu" => f.prox_mu = parse_f64(v)?,
            "seed" => f.seed = parse_num(v, "an unsigned integer")?,
            "participation" => f.participation = parse_f64(v)?,
            "per_entry_heads" => f.per_entry_heads = parse_bool(v)?,
            "ssf_init_std" => f.ssf_init_std = parse_f64(v)?,
            "n_classes" => s.n_classes = parse_num(v, "an integer")?,
            "dim" => s.dim = parse_num(v, "an integer")?,
            "samples_per_class" => s.samples_per_class = parse_num(v, "an integer")?,
            "geometry_seed" => s.geometry_seed = parse_num(v, "an unsigned integer")?,
            "modes_per_class" => s.modes_per_class = parse_num(v, "an integer")?,
            "center_std" => s.center_std = parse_f64(v)?,
            "noise_std" => s.noise_std = parse_f64(v)?,
            "alpha_dir" => self.alpha_dir = parse_f64(v)?,
            "min_per_client" => self.min_per_client = parse_num(v, "an integer")?,
            "n_styles" => self.n_styles = parse_num(v, "an integer")?,
            "test_fraction" => self.test_fraction = parse_f64(v)?,
            "style_bank_seed" => self.style_bank_seed = parse_num(v, "an unsigned integer")?,
            "width" => self.width = parse_num(v, "an integer")?,
            "depth" => self.depth = parse_num(v, "an integer")?,
            "ssf_insertion" => {
                self.ssf_insertion = InsertionScheme::parse(v)
                    .ok_or_else(|| format!("expected linear_and_norm or linear_only, got `{v}`"))?
            }
            "pretrain_epochs" => self.pretrain_epochs = parse_num(v, "an integer")?,
            "pretrain_lr" => self.pretrain_lr = parse_f64(v)?,
            "pretrain_batch_size" => self.pretrain_batch_size = parse_num(v, "an integer")?,
            "source_styles" => self.source_styles = parse_num(v, "an integer")?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "threads" => self.threads = parse_num(v, "an integer")?,
            "record_wall_clock" => self.record_wall_clock = parse_bool(v)?,
            "sweep_axis" => {
                self.sweep_mut().axis = Some(SweepAxis::parse(v).ok_or_else(|| format!("unknown sweep axis `{v}`"))?)
            }
            "sweep_values" => self.sweep_mut().values = parse_list(v, parse_f64)?,
            "sweep_strategies" => self.sweep_mut().strategies = parse_list(v, parse_strategy)?,
            "sweep_seeds" => self.sweep_mut().seeds = parse_list(v, |x| parse_num(x, "an unsigned integer"))?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Current value of every key, in [`KEYS`] order. Sweep keys are empty
    /// when no sweep is configured.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let f = &self.federation;
        let s = &self.synthetic;
        let sw = self.sweep.clone().unwrap_or_default();
        KEYS.iter()
            .map(|&k| {
                let v = match k {
                    "preset" => self.preset.clone(),
                    "strategy" => f.strategy.name().to_string(),
                    "clients" => f.clients.to_string(),
                    "rounds" => f.rounds.to_string(),
                    "local_epochs" => f.local_epochs.to_string(),
                    "lr" => f.lr.to_string(),
                    "batch_size" => f.batch_size.to_string(),
                    "pool_size" => f.pool_size.to_string(),
                    "top_c" => f.top_c.to_string(),
                    "key_weight" => f.key_weight.to_string(),
                    "prox_mu" => f.prox_mu.to_string(),
                    "seed" => f.seed.to_string(),
                    "participation" => f.participation.to_string(),
                    "per_entry_heads" => f.per_entry_heads.to_string(),
                    "ssf_init_std" => f.ssf_init_std.to_string(),
                    "n_classes" => s.n_classes.to_string(),
                    "dim" => s.dim.to_string(),
                    "samples_per_class" => s.samples_per_class.to_string(),
                    "geometry_seed" => s.geometry_seed.to_string(),
                    "modes_per_class" => s.modes_per_class.to_string(),
                    "center_std" => s.center_std.to_string(),
                    "noise_std" => s.noise_std.to_string(),
                    "alpha_dir" => self.alpha_dir.to_string(),
                    "min_per_client" => self.min_per_client.to_string(),
                    "n_styles" => self.n_styles.to_string(),
                    "test_fraction" => self.test_fraction.to_string(),
                    "style_bank_seed" => self.style_bank_seed.to_string(),
                    "width" => self.width.to_string(),
                    "depth" => self.depth.to_string(),
                    "ssf_insertion" => self.ssf_insertion.name().to_string(),
                    "pretrain_epochs" => self.pretrain_epochs.to_string(),
                    "pretrain_lr" => self.pretrain_lr.to_string(),
                    "pretrain_batch_size" => self.pretrain_batch_size.to_string(),
                    "source_styles" => self.source_styles.to_string(),
                    "output_dir" => self.output_dir.display().to_string(),
                    "threads" => self.threads.to_string(),
                    "record_wall_clock" => self.record_wall_clock.to_string(),
                    "sweep_axis" => sw.axis.map(|a| a.name().to_string()).unwrap_or_default(),
                    "sweep_values" => join(&sw.values),
                    "sweep_strategies" => sw.strategies.iter().map(|s| s.name()).collect::<Vec<_>>().join(","),
                    "sweep_seeds" => join(&sw.seeds),
                    _ => unreachable!("KEYS and entries() disagree on `{k}`"),
                };
                (k, v)
            })
            .collect()
    }

    /// Config text that reparses to `self`; blank values are omitted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            if !v.is_empty() {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }

    /// SHA-256 over the result-relevant keys.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !UNHASHED.contains(&k) {
                h.update(format!("{k}={v}\n"));
            }
        }
        hex::encode(h.finalize())
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            input_dim: self.synthetic.dim,
            width: self.width,
            depth: self.depth,
            n_classes: self.synthetic.n_classes,
            scheme: self.ssf_insertion,
            ..Default::default()
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            batch_size: self.pretrain_batch_size,
            seed: self.federation.seed,
        }
    }

    pub fn data(&self) -> DataConfig {
        DataConfig {
            synthetic: self.synthetic,
            partition: PartitionSpec {
                clients: self.federation.clients,
                alpha_dir: self.alpha_dir,
                seed: self.federation.seed,
                min_per_client: self.min_per_client,
            },
            n_styles: self.n_styles,
            test_fraction: self.test_fraction,
            style_bank_seed: self.style_bank_seed,
        }
    }

    /// The key-level invariants, as `(key, message)`.
    pub fn check(&self) -> Result<(), (&'static str, String)> {
        let f = &self.federation;
        let s = &self.synthetic;
        let need = |ok: bool, key: &'static str, msg: String| if ok { Ok(()) } else { Err((key, msg)) };
        need(f.clients >= 1, "clients", "clients must be >= 1".into())?;
        need(f.rounds >= 1, "rounds", "rounds must be >= 1".into())?;
        need(f.local_epochs >= 1, "local_epochs", "local_epochs must be >= 1".into())?;
        need(f.batch_size >= 1, "batch_size", "batch_size must be >= 1".into())?;
        need(f.lr >= 0.0, "lr", "lr must be >= 0".into())?;
        need(f.pool_size >= 1, "pool_size", "pool_size (M) must be >= 1".into())?;
        need(
            f.top_c >= 1 && f.top_c <= f.pool_size,
            "top_c",
            format!(
                "invariant C ≤ M violated: top_c = {}, pool_size = {}",
                f.top_c, f.pool_size
            ),
        )?;
        need(f.key_weight >= 0.0, "key_weight", "key_weight must be >= 0".into())?;
        need(f.prox_mu >= 0.0, "prox_mu", "prox_mu must be >= 0".into())?;
        need(
            f.participation > 0.0 && f.participation <= 1.0,
            "participation",
            "participation must lie in (0, 1]".into(),
        )?;
        need(
            f.ssf_init_std >= 0.0,
            "ssf_init_std",
            "ssf_init_std must be >= 0".into(),
        )?;
        need(s.n_classes >= 2, "n_classes", "n_classes must be >= 2".into())?;
        need(s.dim >= 2, "dim", "dim must be >= 2".into())?;
        need(
            s.samples_per_class >= 1,
            "samples_per_class",
            "samples_per_class must be >= 1".into(),
        )?;
        need(
            s.modes_per_class >= 1,
            "modes_per_class",
            "modes_per_class must be >= 1".into(),
        )?;
        need(s.center_std > 0.0, "center_std", "center_std must be > 0".into())?;
        need(s.noise_std >= 0.0, "noise_std", "noise_std must be >= 0".into())?;
        need(self.alpha_dir > 0.0, "alpha_dir", "alpha_dir must be > 0".into())?;
        need(
            self.n_styles <= STYLE_BANK_SIZE,
            "n_styles",
            format!("n_styles must be <= {STYLE_BANK_SIZE}"),
        )?;
        need(
            (0.0..1.0).contains(&self.test_fraction),
            "test_fraction",
            "test_fraction must lie in [0, 1)".into(),
        )?;
        need(self.width >= 2, "width", "width must be >= 2".into())?;
        need(self.depth >= 1, "depth", "depth must be >= 1".into())?;
        need(
            self.pretrain_lr >= 0.0,
            "pretrain_lr",
            "pretrain_lr must be >= 0".into(),
        )?;
        need(
            self.pretrain_batch_size >= 1,
            "pretrain_batch_size",
            "pretrain_batch_size must be >= 1".into(),
        )?;
        need(
            self.source_styles <= STYLE_BANK_SIZE,
            "source_styles",
            format!("source_styles must be <= {STYLE_BANK_SIZE}"),
        )?;
        if let Some(sw) = &self.sweep {
            sw.check(self)?;
        }
        Ok(())
    }

    /// Defaults overlaid with the text of a config file.
    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut l = ConfigLoader::new();
        l.text(text, origin)?;
        l.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        Self::from_text(&text, &path.display().to_string())
    }
}

/// Builds a config from layered sources while remembering where each key
/// was last set, so invariant errors can point at a line.
#[derive(Debug, Clone)]
pub struct ConfigLoader {
    cfg: ExperimentConfig,
    origin_of: HashMap<&'static str, (String, usize)>,
}

impl Default for ConfigLoader {
    fn default() -> Self {
        Self::new()
    }
}

impl ConfigLoader {
    pub fn new() -> Self {
        Self {
            cfg: ExperimentConfig::default(),
            origin_of: HashMap::new(),
        }
    }

    fn canonical(key: &str) -> Option<&'static str> {
        KEYS.iter().copied().find(|k| *k == key)
    }

    /// Applies one config text. A key may appear at most once per text.
    pub fn text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut here: HashMap<&'static str, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| HarnessError::ConfigLine {
                origin: origin.to_string(),
                line,
                message,
            };
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let key = Self::canonical(k).ok_or_else(|| err(format!("unknown key `{k}`")))?;
            if let Some(first) = here.insert(key, line) {
                return Err(err(format!("duplicate key `{key}` (first set on line {first})")));
            }
            self.set_at(key, v, origin, line)?;
        }
        Ok(())
    }

    fn set_at(&mut self, key: &'static str, value: &str, origin: &str, line: usize) -> Result<()> {
        self.cfg.set(key, value).map_err(|m| HarnessError::ConfigLine {
            origin: origin.to_string(),
            line,
            message: format!("{key}: {m}"),
        })?;
        self.origin_of.insert(key, (origin.to_string(), line));
        Ok(())
    }

    /// Applies a `key=value` override, e.g. from a command-line flag.
    pub fn set(&mut self, key: &str, value: &str, origin: &str) -> Result<()> {
        let key = Self::canonical(key).ok_or_else(|| HarnessError::ConfigLine {
            origin: origin.to_string(),
            line: 0,
            message: format!("unknown key `{key}`"),
        })?;
        self.set_at(key, value, origin, 0)
    }

    /// Validates and returns the config.
    pub fn finish(self) -> Result<ExperimentConfig> {
        match self.cfg.check() {
            Ok(()) => Ok(self.cfg),
            Err((key, message)) => Err(match self.origin_of.get(key) {
                Some((origin, line)) => HarnessError::ConfigLine {
                    origin: origin.clone(),
                    line: *line,
                    message,
                },
                None => HarnessError::Config(message),
            }),
        }
    }
}
