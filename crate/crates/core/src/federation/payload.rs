use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::config::{FederationConfig, Strategy};
use crate::backbone::{BackboneParams, FrozenBackbone, HeadParams};
use crate::error::{Error, Result};
use crate::nn::ParamBlock;
use crate::pool::SsfPool;
use crate::rng::{self, Stream};
use crate::ssf::SsfEntry;

/// The trainable parameters exchanged between server and clients.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Keys, pool entries and either a shared head or per-entry heads.
    Pool {
        pool: SsfPool,
        head: Option<HeadParams>,
    },
    Single {
        entry: SsfEntry,
        head: HeadParams,
    },
    Full {
        backbone: BackboneParams,
        head: HeadParams,
    },
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Pool { .. } => "pool",
            Self::Single { .. } => "single",
            Self::Full { .. } => "full",
        }
    }

    /// Parameter slices in canonical order (also the checkpoint order).
    pub fn slices(&self) -> Vec<&[f64]> {
        match self {
            Self::Pool { pool, head } => {
                let mut v = pool.slices();
                if let Some(h) = head {
                    v.extend(h.slices());
                }
                v
            }
            Self::Single { entry, head } => {
                let mut v = entry.slices();
                v.extend(head.slices());
                v
            }
            Self::Full { backbone, head } => {
                let mut v = backbone.slices();
                v.extend(head.slices());
                v
            }
        }
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Self::Pool { pool, head } => {
                let mut v = pool.slices_mut();
                if let Some(h) = head {
                    v.extend(h.slices_mut());
                }
                v
            }
            Self::Single { entry, head } => {
                let mut v = entry.slices_mut();
                v.extend(head.slices_mut());
                v
            }
            Self::Full { backbone, head } => {
                let mut v = backbone.slices_mut();
                v.extend(head.slices_mut());
                v
            }
        }
    }

    /// Named, shaped blocks in the same order as [`Payload::slices`].
    pub fn blocks(&self) -> Vec<ParamBlock> {
        fn entry_blocks(out: &mut Vec<ParamBlock>, prefix: &str, e: &SsfEntry) {
            for (i, p) in e.pairs.iter().enumerate() {
                out.push(ParamBlock {
                    name: format!("{prefix}point{i}.scale"),
                    shape: vec![p.scale.len()],
                    values: p.scale.clone(),
                });
                out.push(ParamBlock {
                    name: format!("{prefix}point{i}.shift"),
                    shape: vec![p.shift.len()],
                    values: p.shift.clone(),
                });
            }
        }
        let mut out = Vec::new();
        match self {
            Self::Pool { pool, head } => {
                for (m, e) in pool.entries.iter().enumerate() {
                    entry_blocks(&mut out, &format!("pool.entry{m}."), e);
                }
                for (m, k) in pool.keys.iter().enumerate() {
                    out.push(ParamBlock {
                        name: format!("pool.key{m}"),
                        shape: vec![k.len()],
                        values: k.clone(),
                    });
                }
                if let Some(hs) = &pool.heads {
                    for (m, h) in hs.iter().enumerate() {
                        out.extend(h.blocks(&format!("pool.head{m}")));
                    }
                }
                if let Some(h) = head {
                    out.extend(h.blocks("head"));
                }
            }
            Self::Single { entry, head } => {
                entry_blocks(&mut out, "ssf.", entry);
                out.extend(head.blocks("head"));
            }
            Self::Full { backbone, head } => {
                out.extend(backbone.blocks("full."));
                out.extend(head.blocks("head"));
            }
        }
        out
    }

    /// Overwrites every value from `blocks`, which must match
    /// [`Payload::blocks`] in names and shapes.
    pub fn load_blocks(&mut self, blocks: &[ParamBlock]) -> Result<()> {
        let template = self.blocks();
        if template.len() != blocks.len() {
            return Err(Error::PayloadMismatch(format!(
                "expected {} blocks, got {}",
                template.len(),
                blocks.len()
            )));
        }
        for (t, b) in template.iter().zip(blocks) {
            if t.name != b.name || t.shape != b.shape || b.values.len() != t.values.len() {
                return Err(Error::PayloadMismatch(format!("block `{}` vs `{}`", t.name, b.name)));
            }
        }
        for (s, b) in self.slices_mut().into_iter().zip(blocks) {
            s.copy_from_slice(&b.values);
        }
        Ok(())
    }

    pub fn scalar_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.slices_mut() {
            s.fill(0.0);
        }
        z
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        let (a, b) = (self.slices(), other.slices());
        core::mem::discriminant(self) == core::mem::discriminant(other)
            && a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }

    /// Flat copy of every scalar, in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Server state.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub strategy: Strategy,
    /// Completed rounds.
    pub round: usize,
    pub payload: Payload,
    /// Per-client payloads; only used by [`Strategy::Solo`].
    pub client_payloads: Vec<Payload>,
}

impl GlobalState {
    /// The payload client `k` trains from this round.
    pub fn snapshot_for(&self, k: usize) -> &Payload {
        self.client_payloads.get(k).unwrap_or(&self.payload)
    }

    pub fn describe(&self) -> String {
        format!(
            "{} after {} rounds, {} payload scalars",
            self.strategy.name(),
            self.round,
            self.payload.scalar_count()
        )
    }
}

const INIT_HEAD: u64 = 0;
const INIT_ENTRY: u64 = 1;
const INIT_KEY: u64 = 2;
const INIT_ENTRY_HEAD: u64 = 3;

/// Round-0 state. Streams are keyed by role and slot, so a one-entry pool
/// starts from exactly the same entry and head as a single SSF.
pub fn init_global_state(cfg: &FederationConfig, bb: &FrozenBackbone) -> Result<GlobalState> {
    cfg.validate()?;
    let seed = cfg.seed;
    let n = bb.config().n_classes;
    let d = bb.feature_dim();
    let head = || HeadParams::random(n, d, &mut rng::stream(seed, Stream::Init, &[INIT_HEAD]));
    let entry = |m: usize| {
        SsfEntry::random_near_identity(
            bb.spec(),
            cfg.ssf_init_std,
            &mut rng::stream(seed, Stream::Init, &[INIT_ENTRY, m as u64]),
        )
    };
    let payload = match cfg.strategy {
        Strategy::FedIns => {
            let mut pool = SsfPool::init(
                bb.spec(),
                cfg.pool_size,
                d,
                cfg.ssf_init_std,
                |m| rng::stream(seed, Stream::Init, &[INIT_ENTRY, m as u64]),
                |m| rng::stream(seed, Stream::Init, &[INIT_KEY, m as u64]),
            )?;
            if cfg.per_entry_heads {
                pool.heads = Some(
                    (0..cfg.pool_size)
                        .map(|m| {
                            HeadParams::random(n, d, &mut rng::stream(seed, Stream::Init, &[INIT_ENTRY_HEAD, m as u64]))
                        })
                        .collect(),
                );
                pool.validate()?;
                Payload::Pool { pool, head: None }
            } else {
                Payload::Pool {
                    pool,
                    head: Some(head()),
                }
            }
        }
        Strategy::FedSsf | Strategy::Solo => Payload::Single {
            entry: entry(0),
            head: head(),
        },
        Strategy::FedAvgFull | Strategy::FedProx => Payload::Full {
            backbone: bb.params().clone(),
            head: head(),
        },
    };
    let client_payloads = match cfg.strategy {
        Strategy::Solo => vec![payload.clone(); cfg.clients],
        _ => Vec::new(),
    };
    Ok(GlobalState {
        strategy: cfg.strategy,
        round: 0,
        payload,
        client_payloads,
    })
}
