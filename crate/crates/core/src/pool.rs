//! SSF pools with learnable keys.
//!
//! Routing: the frozen backbone turns an instance into a query, the `C`
//! keys with the highest cosine similarity pick pool entries, and the
//! instance's SSF is the unweighted mean of those entries. Training uses the
//! same routing per instance; keys learn through a surrogate that pulls each
//! selected key toward the query.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::backbone::{FrozenBackbone, HeadParams, MergedModel, QueryVector};
use crate::error::{Error, Result};
use crate::math;
use crate::nn::{softmax_xent, Matrix};
use crate::rng::Rng;
use crate::ssf::{ssf_weighted_sum, InsertionSpec, SsfEntry};

/// `M` SSF entries, each with a key in query space; optionally one head per
/// entry (off by default, in which case the head is shared and lives outside
/// the pool).
#[derive(Debug, Clone, PartialEq)]
pub struct SsfPool {
    pub entries: Vec<SsfEntry>,
    pub keys: Vec<Vec<f64>>,
    pub heads: Option<Vec<HeadParams>>,
}

impl SsfPool {
    pub fn new(entries: Vec<SsfEntry>, keys: Vec<Vec<f64>>, heads: Option<Vec<HeadParams>>) -> Result<Self> {
        let pool = Self { entries, keys, heads };
        pool.validate()?;
        Ok(pool)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.entries.len();
        if m == 0 || self.keys.len() != m {
            return Err(Error::InvalidArgument(format!(
                "pool needs M >= 1 entries and as many keys, got {} / {}",
                m,
                self.keys.len()
            )));
        }
        if let Some(i) = self.entries.iter().position(|e| !e.same_layout(&self.entries[0])) {
            return Err(Error::IncompatibleEntries(format!("pool entry {i} differs in layout")));
        }
        let d = self.keys[0].len();
        if let Some(i) = self.keys.iter().position(|k| k.len() != d || math::norm(k) == 0.0) {
            return Err(Error::InvalidArgument(format!(
                "key {i} is zero or of the wrong dimension"
            )));
        }
        if let Some(h) = &self.heads {
            if h.len() != m || h.iter().any(|x| !x.same_layout(&h[0])) {
                return Err(Error::InvalidArgument(
                    "per-entry heads must match the pool size".into(),
                ));
            }
        }
        Ok(())
    }

    /// Entries near identity, unit keys drawn uniformly on the sphere.
    pub fn init(
        spec: &InsertionSpec,
        size: usize,
        key_dim: usize,
        entry_std: f64,
        mut entry_rng: impl FnMut(usize) -> Rng,
        mut key_rng: impl FnMut(usize) -> Rng,
    ) -> Result<Self> {
        let entries = (0..size)
            .map(|m| SsfEntry::random_near_identity(spec, entry_std, &mut entry_rng(m)))
            .collect();
        let keys = (0..size).map(|m| random_unit(key_dim, &mut key_rng(m))).collect();
        Self::new(entries, keys, None)
    }

    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn key_dim(&self) -> usize {
        self.keys[0].len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self.entries.iter().map(SsfEntry::zeros_like).collect(),
            keys: self.keys.iter().map(|k| vec![0.0; k.len()]).collect(),
            heads: self
                .heads
                .as_ref()
                .map(|h| h.iter().map(HeadParams::zeros_like).collect()),
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| a.same_layout(b))
            && self.keys.iter().zip(&other.keys).all(|(a, b)| a.len() == b.len())
            && match (&self.heads, &other.heads) {
                (None, None) => true,
                (Some(a), Some(b)) => a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.same_layout(y)),
                _ => false,
            }
    }

    /// Parameter slices: entries, then keys, then per-entry heads.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.entries.iter().flat_map(SsfEntry::slices).collect();
        v.extend(self.keys.iter().map(Vec::as_slice));
        if let Some(h) = &self.heads {
            v.extend(h.iter().flat_map(HeadParams::slices));
        }
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self.entries.iter_mut().flat_map(SsfEntry::slices_mut).collect();
        v.extend(self.keys.iter_mut().map(Vec::as_mut_slice));
        if let Some(h) = &mut self.heads {
            v.extend(h.iter_mut().flat_map(HeadParams::slices_mut));
        }
        v
    }

    pub fn scalar_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }
}

fn random_unit(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = math::norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Indices of the best-matched keys, most similar first.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub indices: Vec<usize>,
    pub sims: Vec<f64>,
}

impl SelectionResult {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Cosine similarity of `q` with every key, with `|q|` precomputed.
fn cosines(q: &[f64], q_norm: f64, keys: &[Vec<f64>]) -> Vec<f64> {
    keys.iter()
        .map(|k| {
            let c = math::dot(q, k) / (q_norm * math::norm(k));
            c.clamp(-1.0, 1.0)
        })
        .collect()
}

/// Picks the `c` keys most cosine-similar to `q`; equal similarities go to
/// the lower index.
pub fn select_top_c(pool: &SsfPool, q: &QueryVector, c: usize) -> Result<SelectionResult> {
    let m = pool.size();
    if c == 0 || c > m {
        return Err(Error::InvalidSelectionCount { c, m });
    }
    if q.dim() != pool.key_dim() {
        return Err(Error::Shape {
            op: "select_top_c",
            left: format!("query {}", q.dim()),
            right: format!("keys {}", pool.key_dim()),
        });
    }
    let q_norm = math::norm(&q.0);
    if !(q_norm > 0.0) || !q_norm.is_finite() {
        return Err(Error::DegenerateQuery);
    }
    let sims = cosines(&q.0, q_norm, &pool.keys);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order.truncate(c);
    Ok(SelectionResult {
        sims: order.iter().map(|&i| sims[i]).collect(),
        indices: order,
    })
}

/// Mean of the selected entries, weight `1/C` each.
pub fn compose_instance_ssf(pool: &SsfPool, sel: &SelectionResult) -> Result<SsfEntry> {
    let chosen = selected(&pool.entries, sel)?;
    let w = 1.0 / chosen.len() as f64;
    ssf_weighted_sum(&chosen, &vec![w; chosen.len()])
}

/// Mean of the selected per-entry heads, or the shared head.
pub fn compose_instance_head(pool: &SsfPool, shared: Option<&HeadParams>, sel: &SelectionResult) -> Result<HeadParams> {
    let Some(heads) = &pool.heads else {
        return shared
            .cloned()
            .ok_or_else(|| Error::PayloadMismatch("pool has neither a shared nor per-entry heads".into()));
    };
    let chosen = selected(heads, sel)?;
    let w = 1.0 / chosen.len() as f64;
    let mut out = chosen[0].zeros_like();
    for h in chosen {
        for (o, s) in out.slices_mut().into_iter().zip(h.slices()) {
            for (a, b) in o.iter_mut().zip(s) {
                *a += w * b;
            }
        }
    }
    Ok(out)
}

fn selected<'a, T>(items: &'a [T], sel: &SelectionResult) -> Result<Vec<&'a T>> {
    if sel.indices.is_empty() {
        return Err(Error::InvalidSelectionCount { c: 0, m: items.len() });
    }
    sel.indices
        .iter()
        .map(|&i| {
            items.get(i).ok_or(Error::InvalidSelectionCount {
                c: i + 1,
                m: items.len(),
            })
        })
        .collect()
}

/// Per-key gradients as `(pool index, dL/dk)`.
pub type KeyGrads = Vec<(usize, Vec<f64>)>;

/// Key objective `λ · Σ_c (1 − cos(q, k_{m_c}))` and its gradient for each
/// selected key; the query is treated as a constant.
pub fn key_match_loss(q: &QueryVector, pool: &SsfPool, sel: &SelectionResult, lambda: f64) -> Result<(f64, KeyGrads)> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "key loss weight must be >= 0, got {lambda}"
        )));
    }
    let q_norm = math::norm(&q.0);
    if !(q_norm > 0.0) {
        return Err(Error::DegenerateQuery);
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(sel.len());
    for &m in &sel.indices {
        let k = pool.keys.get(m).ok_or(Error::InvalidSelectionCount {
            c: m + 1,
            m: pool.size(),
        })?;
        let k_norm = math::norm(k);
        let cos = math::dot(&q.0, k) / (q_norm * k_norm);
        loss += 1.0 - cos;
        // ∂cos/∂k = q/(|q||k|) − cos·k/|k|²
        let g =
            q.0.iter()
                .zip(k)
                .map(|(qv, kv)| -lambda * (qv / (q_norm * k_norm) - cos * kv / (k_norm * k_norm)))
                .collect();
        grads.push((m, g));
    }
    Ok((lambda * loss, grads))
}

/// Instance-adaptive logits for one instance.
pub fn pool_forward(
    bb: &FrozenBackbone,
    pool: &SsfPool,
    head: Option<&HeadParams>,
    x: &Matrix,
    c: usize,
) -> Result<(Matrix, SelectionResult)> {
    let q = bb.extract_query(x)?;
    let sel = select_top_c(pool, &q, c)?;
    let entry = compose_instance_ssf(pool, &sel)?;
    let h = compose_instance_head(pool, head, &sel)?;
    Ok((bb.forward_with_ssf(&entry, &h, x)?, sel))
}

/// The merged per-instance model `θ′(x)` used for inference.
pub fn instance_adaptive_model(
    bb: &FrozenBackbone,
    pool: &SsfPool,
    head: Option<&HeadParams>,
    q: &QueryVector,
    c: usize,
) -> Result<(MergedModel, SelectionResult)> {
    let sel = select_top_c(pool, q, c)?;
    let entry = compose_instance_ssf(pool, &sel)?;
    let h = compose_instance_head(pool, head, &sel)?;
    Ok((bb.reparameterize(&entry, &h)?, sel))
}

/// Gradients of a pool batch objective.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolGrads {
    pub pool: SsfPool,
    /// Shared-head gradient; `None` when the pool carries per-entry heads.
    pub head: Option<HeadParams>,
}

/// Loss and gradients of one mini-batch under per-instance routing.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolBatchOutput {
    /// `task_loss + key_loss`.
    pub loss: f64,
    /// Mean cross-entropy over the batch.
    pub task_loss: f64,
    /// Mean key objective over the batch.
    pub key_loss: f64,
    pub grads: PoolGrads,
    pub selections: Vec<SelectionResult>,
}

/// Batch objective `mean_i xent_i + mean_i key_loss_i` with per-instance
/// selection, held fixed for the backward pass.
///
/// Each selected entry receives `1/C` of its instance's SSF gradient;
/// unselected entries and keys get exact zeros. `queries` may carry
/// precomputed frozen queries for the rows of `x`. `fixed` overrides the
/// selections (used by gradient checks).
#[allow(clippy::too_many_arguments)]
pub fn pool_batch_grads(
    bb: &FrozenBackbone,
    pool: &SsfPool,
    head: Option<&HeadParams>,
    x: &Matrix,
    labels: &[usize],
    c: usize,
    lambda: f64,
    queries: Option<&[QueryVector]>,
    fixed: Option<&[SelectionResult]>,
) -> Result<PoolBatchOutput> {
    let b = x.rows();
    let owned;
    let queries = match queries {
        Some(q) if q.len() == b => q,
        Some(_) => return Err(Error::InvalidArgument("query count differs from batch".into())),
        None => {
            owned = bb.extract_queries(x)?;
            &owned
        }
    };
    let selections: Vec<SelectionResult> = match fixed {
        Some(s) if s.len() == b => s.to_vec(),
        Some(_) => return Err(Error::InvalidArgument("selection count differs from batch".into())),
        None => queries
            .iter()
            .map(|q| select_top_c(pool, q, c))
            .collect::<Result<_>>()?,
    };

    let mut rows = Vec::with_capacity(b);
    let mut forward = Vec::with_capacity(b);
    for (i, sel) in selections.iter().enumerate() {
        let entry = compose_instance_ssf(pool, sel)?;
        let h = compose_instance_head(pool, head, sel)?;
        let (logits, trace) = bb.forward_traced(&entry, &h, &x.select_rows(&[i]))?;
        rows.push(logits);
        forward.push((entry, h, trace));
    }
    let logits = Matrix::vstack(&rows)?;
    let (task_loss, dlogits) = softmax_xent(&logits, labels)?;

    let mut grads = PoolGrads {
        pool: pool.zeros_like(),
        head: match pool.heads {
            Some(_) => None,
            None => head.map(HeadParams::zeros_like),
        },
    };
    let bf = b as f64;
    let mut key_total = 0.0;
    for (i, (sel, (entry, h, trace))) in selections.iter().zip(&forward).enumerate() {
        let (d_entry, d_head) = bb.backward_ssf(entry, h, trace, &dlogits.select_rows(&[i]))?;
        let share = 1.0 / sel.len() as f64;
        for &m in &sel.indices {
            grads.pool.entries[m].add_scaled(&d_entry, share);
        }
        match grads.pool.heads.as_mut() {
            Some(heads) => {
                for &m in &sel.indices {
                    add_head_scaled(&mut heads[m], &d_head, share);
                }
            }
            None => add_head_scaled(grads.head.as_mut().expect("shared head"), &d_head, 1.0),
        }
        if lambda > 0.0 {
            let (kl, kg) = key_match_loss(&queries[i], pool, sel, lambda)?;
            key_total += kl;
            for (m, g) in kg {
                for (a, v) in grads.pool.keys[m].iter_mut().zip(&g) {
                    *a += v / bf;
                }
            }
        }
    }
    let key_loss = key_total / bf;
    Ok(PoolBatchOutput {
        loss: task_loss + key_loss,
        task_loss,
        key_loss,
        grads,
        selections,
    })
}

fn add_head_scaled(acc: &mut HeadParams, g: &HeadParams, w: f64) {
    for (a, s) in acc.slices_mut().into_iter().zip(g.slices()) {
        for (x, y) in a.iter_mut().zip(s) {
            *x += w * y;
        }
    }
}
