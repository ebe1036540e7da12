//! Checkpoint files: a text manifest followed by raw little-endian `f64`s.
//!
//! ```text
//! fedins-checkpoint
//! format_version 1
//! strategy fedins
//! round 20
//! config_hash <sha256 hex>
//! config <key> = <value>          (one line per config key)
//! block <role> <name> <d0>x<d1>   (role: frozen | payload | client<k>)
//! payload_scalars <n>
//! total_scalars <n>
//! data_sha256 <sha256 hex of the data section>
//! end
//! <total_scalars × 8 bytes>
//! ```
//!
//! Blocks are stored in manifest order. Loading is all or nothing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fedins_core::backbone::FrozenBackbone;
use fedins_core::federation::{init_global_state, GlobalState, Payload, Strategy};
use fedins_core::nn::ParamBlock;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "fedins-checkpoint";
const END: &[u8] = b"\nend\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Backbone weights θ, never trained by SSF strategies.
    Frozen,
    /// The global payload.
    Payload,
    /// A SOLO client's own payload.
    Client(usize),
}

impl Role {
    fn tag(self) -> String {
        match self {
            Self::Frozen => "frozen".into(),
            Self::Payload => "payload".into(),
            Self::Client(k) => format!("client{k}"),
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "frozen" => Some(Self::Frozen),
            "payload" => Some(Self::Payload),
            _ => s.strip_prefix("client")?.parse().ok().map(Self::Client),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub strategy: Strategy,
    pub round: usize,
    pub config_hash: String,
    /// Config text that reproduces the run.
    pub config_text: String,
    pub blocks: Vec<(Role, ParamBlock)>,
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

impl Checkpoint {
    pub fn capture(cfg: &ExperimentConfig, bb: &FrozenBackbone, state: &GlobalState) -> Self {
        let mut blocks: Vec<(Role, ParamBlock)> = bb
            .params()
            .blocks("theta.")
            .into_iter()
            .map(|b| (Role::Frozen, b))
            .collect();
        blocks.extend(state.payload.blocks().into_iter().map(|b| (Role::Payload, b)));
        for (k, p) in state.client_payloads.iter().enumerate() {
            blocks.extend(p.blocks().into_iter().map(|b| (Role::Client(k), b)));
        }
        Self {
            strategy: state.strategy,
            round: state.round,
            config_hash: cfg.hash(),
            config_text: cfg.to_text(),
            blocks,
        }
    }

    fn scalars(&self, pick: impl Fn(Role) -> bool) -> usize {
        self.blocks.iter().filter(|(r, _)| pick(*r)).map(|(_, b)| b.len()).sum()
    }

    /// Scalars of the global payload: what one client uploads per round.
    pub fn payload_scalars(&self) -> usize {
        self.scalars(|r| r == Role::Payload)
    }

    pub fn frozen_scalars(&self) -> usize {
        self.scalars(|r| r == Role::Frozen)
    }

    pub fn total_scalars(&self) -> usize {
        self.scalars(|_| true)
    }

    fn data_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * self.total_scalars());
        for (_, b) in &self.blocks {
            for v in &b.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn manifest(&self, data: &[u8]) -> String {
        let mut m = String::new();
        let _ = writeln!(m, "{MAGIC}");
        let _ = writeln!(m, "format_version {FORMAT_VERSION}");
        let _ = writeln!(m, "strategy {}", self.strategy.name());
        let _ = writeln!(m, "round {}", self.round);
        let _ = writeln!(m, "config_hash {}", self.config_hash);
        for l in self.config_text.lines() {
            let _ = writeln!(m, "config {l}");
        }
        for (role, b) in &self.blocks {
            let _ = writeln!(m, "block {} {} {}", role.tag(), b.name, shape_str(&b.shape));
        }
        let _ = writeln!(m, "payload_scalars {}", self.payload_scalars());
        let _ = writeln!(m, "total_scalars {}", self.total_scalars());
        let _ = write!(m, "data_sha256 {}", hex::encode(Sha256::digest(data)));
        m
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let data = self.data_bytes();
        let mut out = self.manifest(&data).into_bytes();
        out.extend_from_slice(END);
        out.extend_from_slice(&data);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(HarnessError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(HarnessError::io(path))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and compares the stored config hash with `expected`; a
    /// mismatch is returned as a warning, not an error.
    pub fn load_checked(path: &Path, expected: &ExperimentConfig) -> Result<(Self, Option<String>)> {
        let ck = Self::load(path)?;
        let want = expected.hash();
        let warning = (ck.config_hash != want).then(|| {
            format!(
                "{}: config hash {} differs from the current config ({want})",
                path.display(),
                ck.config_hash
            )
        });
        Ok((ck, warning))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |m: String| HarnessError::checkpoint(path, m);
        let split = bytes
            .windows(END.len())
            .position(|w| w == END)
            .ok_or_else(|| fail("no manifest terminator; file truncated or not a checkpoint".into()))?;
        let head = std::str::from_utf8(&bytes[..split]).map_err(|_| fail("manifest is not UTF-8".into()))?;
        let data = &bytes[split + END.len()..];
        let mut lines = head.lines();
        if lines.next() != Some(MAGIC) {
            return Err(fail("not a fedins checkpoint".into()));
        }

        let mut version = None;
        let mut strategy = None;
        let mut round = None;
        let mut config_hash = None;
        let mut config_text = String::new();
        let mut layout: Vec<(Role, String, Vec<usize>)> = Vec::new();
        let mut payload_scalars = None;
        let mut total_scalars = None;
        let mut digest = None;
        for (i, line) in lines.enumerate() {
            let bad = || fail(format!("malformed manifest line {}: `{line}`", i + 2));
            let (tag, rest) = line.split_once(' ').ok_or_else(bad)?;
            match tag {
                "format_version" => version = Some(rest.parse::<u32>().map_err(|_| bad())?),
                "strategy" => strategy = Some(Strategy::parse(rest).ok_or_else(bad)?),
                "round" => round = Some(rest.parse::<usize>().map_err(|_| bad())?),
                "config_hash" => config_hash = Some(rest.to_string()),
                "config" => {
                    config_text.push_str(rest);
                    config_text.push('\n');
                }
                "block" => {
                    let mut f = rest.split(' ');
                    let (Some(role), Some(name), Some(shape), None) = (f.next(), f.next(), f.next(), f.next()) else {
                        return Err(bad());
                    };
                    let role = Role::parse(role).ok_or_else(bad)?;
                    let shape = shape
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad())?;
                    layout.push((role, name.to_string(), shape));
                }
                "payload_scalars" => payload_scalars = Some(rest.parse::<usize>().map_err(|_| bad())?),
                "total_scalars" => total_scalars = Some(rest.parse::<usize>().map_err(|_| bad())?),
                "data_sha256" => digest = Some(rest.to_string()),
                _ => return Err(bad()),
            }
        }
        let version = version.ok_or_else(|| fail("missing format_version".into()))?;
        if version != FORMAT_VERSION {
            return Err(fail(format!(
                "format version {version} is not supported (this build reads version {FORMAT_VERSION})"
            )));
        }
        let missing = |k: &str| fail(format!("manifest lacks `{k}`"));
        let total = total_scalars.ok_or_else(|| missing("total_scalars"))?;
        let listed: usize = layout.iter().map(|(_, _, s)| s.iter().product::<usize>()).sum();
        if listed != total {
            return Err(fail(format!(
                "blocks hold {listed} scalars but total_scalars is {total}"
            )));
        }
        if data.len() != 8 * total {
            return Err(fail(format!(
                "integrity error: data section has {} bytes, expected {}",
                data.len(),
                8 * total
            )));
        }
        if Some(hex::encode(Sha256::digest(data))) != digest {
            return Err(fail("integrity error: data checksum mismatch".into()));
        }
        let mut values = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let blocks = layout
            .into_iter()
            .map(|(role, name, shape)| {
                let n = shape.iter().product();
                let v: Vec<f64> = values.by_ref().take(n).collect();
                ParamBlock::new(name, shape, v).map(|b| (role, b))
            })
            .collect::<fedins_core::Result<Vec<_>>>()?;
        let ck = Self {
            strategy: strategy.ok_or_else(|| missing("strategy"))?,
            round: round.ok_or_else(|| missing("round"))?,
            config_hash: config_hash.ok_or_else(|| missing("config_hash"))?,
            config_text,
            blocks,
        };
        if Some(ck.payload_scalars()) != payload_scalars {
            return Err(fail("payload_scalars does not match the listed payload blocks".into()));
        }
        Ok(ck)
    }

    fn role_blocks(&self, role: Role) -> Vec<ParamBlock> {
        self.blocks
            .iter()
            .filter(|(r, _)| *r == role)
            .map(|(_, b)| b.clone())
            .collect()
    }

    /// Rebuilds the config, frozen backbone and global state.
    pub fn restore(&self) -> Result<(ExperimentConfig, FrozenBackbone, GlobalState)> {
        let cfg = ExperimentConfig::from_text(&self.config_text, "checkpoint config")?;
        if cfg.federation.strategy != self.strategy {
            return Err(HarnessError::checkpoint(
                PathBuf::new(),
                "stored strategy differs from stored config",
            ));
        }
        let template = FrozenBackbone::random(cfg.backbone(), 0)?;
        let mut params = template.params().clone();
        let frozen = self.role_blocks(Role::Frozen);
        let expect = params.blocks("theta.");
        if frozen.len() != expect.len()
            || frozen
                .iter()
                .zip(&expect)
                .any(|(a, b)| a.name != b.name || a.shape != b.shape)
        {
            return Err(
                fedins_core::Error::PayloadMismatch("frozen blocks do not match the backbone config".into()).into(),
            );
        }
        for (s, b) in params.slices_mut().into_iter().zip(&frozen) {
            s.copy_from_slice(&b.values);
        }
        let bb = FrozenBackbone::new(cfg.backbone(), params)?;
        let mut state = init_global_state(&cfg.federation, &bb)?;
        state.round = self.round;
        state.payload.load_blocks(&self.role_blocks(Role::Payload))?;
        let clients: Vec<&mut Payload> = state.client_payloads.iter_mut().collect();
        for (k, p) in clients.into_iter().enumerate() {
            p.load_blocks(&self.role_blocks(Role::Client(k)))?;
        }
        Ok((cfg, bb, state))
    }
}
