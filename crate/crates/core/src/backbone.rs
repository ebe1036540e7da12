//! The frozen feature extractor: `depth` blocks of
//! `linear → [SSF] → layer_norm → [SSF] → gelu`, followed by a linear
//! classification head.
//!
//! SSF points after layer norms are optional ([`InsertionScheme`]); points
//! after linear layers are always present and are the ones that fold into
//! weights at inference time.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::nn::{
    gelu, gelu_backward, layer_norm_backward, layer_norm_forward, linear, linear_backward, linear_backward_input,
    sgd_update, softmax_xent, LayerNormOutput, Matrix, ParamBlock,
};
use crate::rng::{self, Rng, Stream};
use crate::ssf::{merge_into_affine, modulate, modulate_backward, InsertionPoint, InsertionSpec, SsfEntry, SsfPair};

/// Where SSF modulations sit inside each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertionScheme {
    /// After every linear layer and after every layer norm.
    LinearAndNorm,
    /// After every linear layer only; every point is mergeable.
    LinearOnly,
}

impl InsertionScheme {
    pub fn name(self) -> &'static str {
        match self {
            Self::LinearAndNorm => "linear_and_norm",
            Self::LinearOnly => "linear_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear_and_norm" => Some(Self::LinearAndNorm),
            "linear_only" => Some(Self::LinearOnly),
            _ => None,
        }
    }

    fn has_norm_point(self) -> bool {
        matches!(self, Self::LinearAndNorm)
    }
}

/// Architecture of the toy backbone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub width: usize,
    pub depth: usize,
    /// Classes of the downstream (federated) task.
    pub n_classes: usize,
    pub scheme: InsertionScheme,
    pub ln_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            width: 64,
            depth: 3,
            n_classes: 8,
            scheme: InsertionScheme::LinearAndNorm,
            ln_eps: crate::nn::LN_EPS,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.depth == 0 {
            return Err(Error::Config("input_dim and depth must be >= 1".into()));
        }
        if self.width < 2 {
            return Err(Error::Config("width must be >= 2 (layer norm)".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be >= 2".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn insertion_spec(&self) -> InsertionSpec {
        let mut points = Vec::new();
        for l in 0..self.depth {
            points.push(InsertionPoint {
                id: format!("block{l}.linear"),
                width: self.width,
                affine_preceded: true,
            });
            if self.scheme.has_norm_point() {
                points.push(InsertionPoint {
                    id: format!("block{l}.norm"),
                    width: self.width,
                    affine_preceded: false,
                });
            }
        }
        InsertionSpec::new(points).expect("generated ids are unique")
    }

    fn layer_in(&self, l: usize) -> usize {
        if l == 0 {
            self.input_dim
        } else {
            self.width
        }
    }

    /// Scalars in the backbone weights θ.
    pub fn backbone_scalars(&self) -> usize {
        (0..self.depth)
            .map(|l| self.width * self.layer_in(l) + self.width)
            .sum()
    }

    pub fn head_scalars(&self) -> usize {
        self.n_classes * self.width + self.n_classes
    }

    /// Index of the point after block `l`'s linear layer, and after its norm.
    fn point_indices(&self, l: usize) -> (usize, Option<usize>) {
        if self.scheme.has_norm_point() {
            (2 * l, Some(2 * l + 1))
        } else {
            (l, None)
        }
    }
}

/// Weight and bias of an affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    /// Weights ~ N(0, 1/fan_in), zero bias.
    pub fn random(out: usize, inp: usize, rng: &mut Rng) -> Self {
        let dist = Normal::new(0.0, 1.0 / crate::math::sqrt(inp as f64)).expect("finite std");
        let data = (0..out * inp).map(|_| dist.sample(rng)).collect();
        Self {
            weight: Matrix::from_parts_unchecked(out, inp, data),
            bias: vec![0.0; out],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }

    fn slices(&self) -> [&[f64]; 2] {
        [self.weight.data(), &self.bias]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 2] {
        [self.weight.data_mut(), &mut self.bias]
    }

    fn blocks(&self, prefix: &str) -> [ParamBlock; 2] {
        [
            ParamBlock {
                name: format!("{prefix}.weight"),
                shape: vec![self.weight.rows(), self.weight.cols()],
                values: self.weight.data().to_vec(),
            },
            ParamBlock {
                name: format!("{prefix}.bias"),
                shape: vec![self.bias.len()],
                values: self.bias.clone(),
            },
        ]
    }
}

/// Backbone weights θ: one linear layer per block.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub layers: Vec<LinearLayer>,
}

impl BackboneParams {
    pub fn random(cfg: &BackboneConfig, rng: &mut Rng) -> Self {
        Self {
            layers: (0..cfg.depth)
                .map(|l| LinearLayer::random(cfg.width, cfg.layer_in(l), rng))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(LinearLayer::zeros_like).collect(),
        }
    }

    pub fn check(&self, cfg: &BackboneConfig) -> Result<()> {
        let ok = self.layers.len() == cfg.depth
            && self.layers.iter().enumerate().all(|(l, layer)| {
                layer.weight.rows() == cfg.width
                    && layer.weight.cols() == cfg.layer_in(l)
                    && layer.bias.len() == cfg.width
            });
        if ok {
            Ok(())
        } else {
            Err(Error::PayloadMismatch(
                "backbone weights do not match the architecture".into(),
            ))
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.layers.iter().map(LinearLayer::scalar_count).sum()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(LinearLayer::slices).collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(LinearLayer::slices_mut).collect()
    }

    /// Named blocks `<prefix>layer{l}.weight|bias`.
    pub fn blocks(&self, prefix: &str) -> Vec<ParamBlock> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| layer.blocks(&format!("{prefix}layer{l}")))
            .collect()
    }
}

/// Classification head `h`: logits = W_h · feature + b_h.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl HeadParams {
    pub fn random(n_classes: usize, width: usize, rng: &mut Rng) -> Self {
        let l = LinearLayer::random(n_classes, width, rng);
        Self {
            weight: l.weight,
            bias: l.bias,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn scalar_count(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.weight.rows() == other.weight.rows()
            && self.weight.cols() == other.weight.cols()
            && self.bias.len() == other.bias.len()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        vec![self.weight.data(), &self.bias]
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.data_mut(), &mut self.bias]
    }

    pub fn blocks(&self, prefix: &str) -> Vec<ParamBlock> {
        LinearLayer {
            weight: self.weight.clone(),
            bias: self.bias.clone(),
        }
        .blocks(prefix)
        .into()
    }
}

/// Query vector for key matching; lives in the backbone feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryVector(pub Vec<f64>);

impl QueryVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

struct BlockTrace {
    input: Matrix,
    linear_out: Matrix,
    norm: LayerNormOutput,
    gelu_in: Matrix,
}

/// Intermediate values of a forward pass, kept for the backward pass.
pub struct Trace {
    blocks: Vec<BlockTrace>,
    feature: Matrix,
}

impl Trace {
    /// Final pre-head feature.
    pub fn feature(&self) -> &Matrix {
        &self.feature
    }
}

/// Gradients produced by [`network_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub head: HeadParams,
    pub entry: Option<SsfEntry>,
    pub theta: Option<BackboneParams>,
}

fn pair(entry: Option<&SsfEntry>, idx: Option<usize>) -> Option<&SsfPair> {
    entry.zip(idx).map(|(e, i)| &e.pairs[i])
}

/// Forward pass through backbone weights `params`, an optional SSF entry and
/// the head. With `head = None` only features are computed and the returned
/// logits are empty.
pub fn network_forward(
    cfg: &BackboneConfig,
    params: &BackboneParams,
    entry: Option<&SsfEntry>,
    head: Option<&HeadParams>,
    x: &Matrix,
) -> Result<(Matrix, Trace)> {
    if x.cols() != cfg.input_dim {
        return Err(shape_err(
            "backbone input",
            x.shape_str(),
            format!("?x{}", cfg.input_dim),
        ));
    }
    let mut blocks = Vec::with_capacity(cfg.depth);
    let mut h = x.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let (lin_idx, norm_idx) = cfg.point_indices(l);
        let linear_out = linear(&h, &layer.weight, &layer.bias)?;
        let norm_in = match pair(entry, Some(lin_idx)) {
            Some(p) => modulate(&linear_out, &p.scale, &p.shift)?,
            None => linear_out.clone(),
        };
        let norm = layer_norm_forward(&norm_in, cfg.ln_eps)?;
        let gelu_in = match pair(entry, norm_idx) {
            Some(p) => modulate(&norm.y, &p.scale, &p.shift)?,
            None => norm.y.clone(),
        };
        let out = gelu(&gelu_in)?;
        blocks.push(BlockTrace {
            input: h,
            linear_out,
            norm,
            gelu_in,
        });
        h = out;
    }
    let logits = match head {
        Some(hd) => linear(&h, &hd.weight, &hd.bias)?,
        None => Matrix::zeros(x.rows(), 0),
    };
    Ok((logits, Trace { blocks, feature: h }))
}

/// Backward pass matching [`network_forward`]. Gradients for θ are only
/// computed when `want_theta` is set.
pub fn network_backward(
    cfg: &BackboneConfig,
    params: &BackboneParams,
    entry: Option<&SsfEntry>,
    head: &HeadParams,
    trace: &Trace,
    dlogits: &Matrix,
    want_theta: bool,
) -> Result<NetGrads> {
    let hg = linear_backward(dlogits, &trace.feature, &head.weight)?;
    let head_grad = HeadParams {
        weight: hg.dw,
        bias: hg.db,
    };
    let mut d = hg.dx;
    let mut entry_grad = entry.map(SsfEntry::zeros_like);
    let mut theta_grad = want_theta.then(|| params.zeros_like());
    for l in (0..params.layers.len()).rev() {
        let bt = &trace.blocks[l];
        let (lin_idx, norm_idx) = cfg.point_indices(l);
        d = gelu_backward(&d, &bt.gelu_in)?;
        if let (Some(p), Some(i)) = (pair(entry, norm_idx), norm_idx) {
            let g = modulate_backward(&d, &bt.norm.y, &p.scale)?;
            let eg = &mut entry_grad.as_mut().expect("entry present").pairs[i];
            eg.scale = g.dscale;
            eg.shift = g.dshift;
            d = g.dx;
        }
        d = layer_norm_backward(&d, &bt.norm)?;
        if let Some(p) = pair(entry, Some(lin_idx)) {
            let g = modulate_backward(&d, &bt.linear_out, &p.scale)?;
            let eg = &mut entry_grad.as_mut().expect("entry present").pairs[lin_idx];
            eg.scale = g.dscale;
            eg.shift = g.dshift;
            d = g.dx;
        }
        let layer = &params.layers[l];
        if let Some(tg) = theta_grad.as_mut() {
            let g = linear_backward(&d, &bt.input, &layer.weight)?;
            tg.layers[l] = LinearLayer {
                weight: g.dw,
                bias: g.db,
            };
            d = g.dx;
        } else if l > 0 {
            d = linear_backward_input(&d, &layer.weight)?;
        }
    }
    Ok(NetGrads {
        head: head_grad,
        entry: entry_grad,
        theta: theta_grad,
    })
}

/// Labeled examples: one feature row per label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledData {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(shape_err(
                "LabeledData",
                features.shape_str(),
                format!("{} labels", labels.len()),
            ));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Pretraining hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// The frozen backbone θ together with its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone {
    cfg: BackboneConfig,
    params: BackboneParams,
    spec: InsertionSpec,
}

impl FrozenBackbone {
    pub fn new(cfg: BackboneConfig, params: BackboneParams) -> Result<Self> {
        cfg.validate()?;
        params.check(&cfg)?;
        Ok(Self {
            spec: cfg.insertion_spec(),
            cfg,
            params,
        })
    }

    /// Freezes freshly initialised random weights (the "random features" mode).
    pub fn random(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, Stream::Pretrain, &[0]);
        let params = BackboneParams::random(&cfg, &mut r);
        Self::new(cfg, params)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &BackboneParams {
        &self.params
    }

    pub fn spec(&self) -> &InsertionSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.width
    }

    /// Logits of the frozen backbone modulated by `entry`, through `head`.
    pub fn forward_with_ssf(&self, entry: &SsfEntry, head: &HeadParams, x: &Matrix) -> Result<Matrix> {
        self.forward_traced(entry, head, x).map(|(l, _)| l)
    }

    pub fn forward_traced(&self, entry: &SsfEntry, head: &HeadParams, x: &Matrix) -> Result<(Matrix, Trace)> {
        entry.check_spec(&self.spec)?;
        self.check_head(head)?;
        network_forward(&self.cfg, &self.params, Some(entry), Some(head), x)
    }

    /// Gradients w.r.t. `entry` and `head` only; θ stays untouched.
    pub fn backward_ssf(
        &self,
        entry: &SsfEntry,
        head: &HeadParams,
        trace: &Trace,
        dlogits: &Matrix,
    ) -> Result<(SsfEntry, HeadParams)> {
        let g = network_backward(&self.cfg, &self.params, Some(entry), head, trace, dlogits, false)?;
        Ok((g.entry.expect("entry given"), g.head))
    }

    /// Frozen pre-head features with no SSF applied, one row per input row.
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        network_forward(&self.cfg, &self.params, None, None, x).map(|(_, t)| t.feature)
    }

    /// Query for key matching: the frozen final feature of one instance.
    pub fn extract_query(&self, x: &Matrix) -> Result<QueryVector> {
        if x.rows() != 1 {
            return Err(Error::NotSingleInstance(x.rows()));
        }
        Ok(QueryVector(self.features(x)?.into_data()))
    }

    /// Queries for every row; row `i` equals `extract_query` of row `i`.
    pub fn extract_queries(&self, x: &Matrix) -> Result<Vec<QueryVector>> {
        let f = self.features(x)?;
        Ok((0..f.rows()).map(|i| QueryVector(f.row(i).to_vec())).collect())
    }

    /// Folds `entry` into θ where possible; the rest stay explicit modulations.
    pub fn reparameterize(&self, entry: &SsfEntry, head: &HeadParams) -> Result<MergedModel> {
        entry.check_spec(&self.spec)?;
        self.check_head(head)?;
        let mut blocks = Vec::with_capacity(self.cfg.depth);
        for (l, layer) in self.params.layers.iter().enumerate() {
            let (lin_idx, norm_idx) = self.cfg.point_indices(l);
            let p = &entry.pairs[lin_idx];
            let point = &self.spec.points()[lin_idx];
            let (weight, bias) = merge_into_affine(point, &layer.weight, &layer.bias, &p.scale, &p.shift)?;
            blocks.push(MergedBlock {
                weight,
                bias,
                post_norm: norm_idx.map(|i| entry.pairs[i].clone()),
            });
        }
        Ok(MergedModel {
            blocks,
            head: head.clone(),
            ln_eps: self.cfg.ln_eps,
        })
    }

    pub fn check_head(&self, head: &HeadParams) -> Result<()> {
        if head.weight.cols() != self.cfg.width || head.bias.len() != head.weight.rows() || head.weight.rows() < 2 {
            return Err(shape_err(
                "head",
                head.weight.shape_str(),
                format!("?x{}", self.cfg.width),
            ));
        }
        Ok(())
    }
}

/// Trains θ and a throwaway head on a source task with plain SGD, then
/// freezes θ. `epochs = 0` yields the random-feature backbone.
pub fn pretrain_backbone(
    cfg: BackboneConfig,
    source: &LabeledData,
    pc: &PretrainConfig,
) -> Result<(FrozenBackbone, HeadParams)> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if pc.batch_size == 0 || !(pc.lr >= 0.0) {
        return Err(Error::InvalidArgument(
            "pretraining needs batch_size >= 1 and lr >= 0".into(),
        ));
    }
    let n_src = source.labels.iter().copied().max().unwrap_or(0) + 1;
    let n_src = n_src.max(2);
    let mut init = rng::stream(pc.seed, Stream::Pretrain, &[0]);
    let mut params = BackboneParams::random(&cfg, &mut init);
    let mut head = HeadParams::random(n_src, cfg.width, &mut init);
    let mut order: Vec<usize> = (0..source.len()).collect();
    for epoch in 0..pc.epochs {
        let mut r = rng::stream(pc.seed, Stream::Pretrain, &[1, epoch as u64]);
        order.shuffle(&mut r);
        for batch in order.chunks(pc.batch_size) {
            let b = source.subset(batch);
            let (logits, trace) = network_forward(&cfg, &params, None, Some(&head), &b.features)?;
            let (_, dlogits) = softmax_xent(&logits, &b.labels)?;
            let g = network_backward(&cfg, &params, None, &head, &trace, &dlogits, true)?;
            for (p, gs) in params
                .slices_mut()
                .into_iter()
                .zip(g.theta.expect("theta requested").slices())
            {
                sgd_update(p, gs, pc.lr);
            }
            for (p, gs) in head.slices_mut().into_iter().zip(g.head.slices()) {
                sgd_update(p, gs, pc.lr);
            }
        }
    }
    Ok((FrozenBackbone::new(cfg, params)?, head))
}

struct MergedBlock {
    weight: Matrix,
    bias: Vec<f64>,
    post_norm: Option<SsfPair>,
}

/// Inference model with SSF folded into the linear layers.
pub struct MergedModel {
    blocks: Vec<MergedBlock>,
    head: HeadParams,
    ln_eps: f64,
}

impl MergedModel {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for b in &self.blocks {
            let u = linear(&h, &b.weight, &b.bias)?;
            let mut n = layer_norm_forward(&u, self.ln_eps)?.y;
            if let Some(p) = &b.post_norm {
                n = modulate(&n, &p.scale, &p.shift)?;
            }
            h = gelu(&n)?;
        }
        linear(&h, &self.head.weight, &self.head.bias)
    }

    /// Parameter blocks carried beyond θ′ and the head (the unmergeable
    /// modulations).
    pub fn extra_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| b.post_norm.is_some()).count()
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(x)?))
    }
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            let r = m.row(i);
            let mut best = 0;
            for j in 1..r.len() {
                if r[j] > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
