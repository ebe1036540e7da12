//! Synthetic federated data.
//!
//! * Classes are unions of Gaussian modes in `dim` dimensions, so they
//!   overlap and are not linearly separable.
//! * Label shift across clients comes from a per-class Dirichlet split with
//!   concentration `alpha_dir` (smaller means more skew).
//! * Intra-client heterogeneity comes from `n_styles` injective feature
//!   transforms mixed inside each client.
//!
//! Naming: `alpha_dir` is the Dirichlet concentration and `n_styles` the
//! number of mixed styles. Neither is related to the SSF scale/shift vectors.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};

use crate::backbone::LabeledData;
use crate::error::{Error, Result};
use crate::math;
use crate::nn::Matrix;
use crate::rng::{self, derive_seed, Rng, Stream};

/// Number of transforms in the style bank.
pub const STYLE_BANK_SIZE: usize = 20;
/// Attempts made by [`dirichlet_partition`] before giving up.
pub const PARTITION_ATTEMPTS: usize = 100;

/// Geometry of a synthetic classification task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Seeds the mode centres; samples are drawn from the run seed.
    pub geometry_seed: u64,
    /// Gaussian modes per class.
    pub modes_per_class: usize,
    /// Standard deviation of mode centres around the origin, per coordinate.
    pub center_std: f64,
    /// Within-mode noise standard deviation, per coordinate.
    pub noise_std: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 8,
            dim: 32,
            samples_per_class: 150,
            geometry_seed: 1,
            modes_per_class: 2,
            center_std: 1.0,
            noise_std: 0.8,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.dim < 2 {
            return Err(Error::Config("synthetic task needs n_classes >= 2 and dim >= 2".into()));
        }
        if self.samples_per_class == 0 || self.modes_per_class == 0 {
            return Err(Error::Config(
                "samples_per_class and modes_per_class must be >= 1".into(),
            ));
        }
        if !(self.center_std > 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::Config("center_std must be > 0 and noise_std >= 0".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_classes * self.samples_per_class
    }
}

/// Class-major dataset: sample `i` of class `c` sits at row
/// `c * samples_per_class + i` and comes from mode `i % modes_per_class`.
pub fn generate_dataset(spec: &SyntheticSpec, seed: u64) -> Result<LabeledData> {
    spec.validate()?;
    let mut geo = rng::stream(spec.geometry_seed, Stream::Dataset, &[0]);
    let center = Normal::new(0.0, spec.center_std).expect("validated");
    let centers: Vec<Vec<f64>> = (0..spec.n_classes * spec.modes_per_class)
        .map(|_| (0..spec.dim).map(|_| center.sample(&mut geo)).collect())
        .collect();
    let mut r = rng::stream(seed, Stream::Dataset, &[1, spec.geometry_seed]);
    let mut data = Vec::with_capacity(spec.total() * spec.dim);
    let mut labels = Vec::with_capacity(spec.total());
    for c in 0..spec.n_classes {
        for i in 0..spec.samples_per_class {
            let mu = &centers[c * spec.modes_per_class + i % spec.modes_per_class];
            for &m in mu {
                let z: f64 = StandardNormal.sample(&mut r);
                data.push(m + spec.noise_std * z);
            }
            labels.push(c);
        }
    }
    LabeledData::new(Matrix::new(spec.total(), spec.dim, data)?, labels)
}

/// Inter-client split settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub clients: usize,
    pub alpha_dir: f64,
    pub seed: u64,
    pub min_per_client: usize,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("clients must be >= 1".into()));
        }
        if !(self.alpha_dir > 0.0) || !self.alpha_dir.is_finite() {
            return Err(Error::Config(format!("alpha_dir must be > 0, got {}", self.alpha_dir)));
        }
        Ok(())
    }
}

/// Splits `quota` units by `props` with largest-remainder rounding; ties in
/// the fractional part go to the lower index.
pub fn largest_remainder(quota: usize, props: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * quota as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|v| *v as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - counts[a] as f64;
        let fb = raw[b] - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(quota.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Draws `Dirichlet(alpha·1_K)` as normalized Gamma(alpha, 1) variates.
pub fn sample_dirichlet(k: usize, alpha: f64, r: &mut Rng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|_| Error::InvalidArgument(format!("invalid Dirichlet concentration {alpha}")))?;
    loop {
        let g: Vec<f64> = (0..k).map(|_| gamma.sample(r)).collect();
        let s = g.iter().fold(0.0, |a, v| a + v);
        if s > 0.0 && s.is_finite() {
            return Ok(g.into_iter().map(|v| v / s).collect());
        }
    }
}

/// Per-class Dirichlet label split. Each attempt draws one proportion vector
/// per class, shuffles that class's indices and deals them out by
/// largest-remainder counts. The whole partition is redrawn until every
/// client has at least `min_per_client` samples. Client lists are sorted.
pub fn dirichlet_partition(labels: &[usize], spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let k = spec.clients;
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let by_class: Vec<Vec<usize>> = (0..n_classes)
        .map(|c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
        .collect();
    for attempt in 0..PARTITION_ATTEMPTS {
        let mut r = rng::stream(spec.seed, Stream::Partition, &[attempt as u64]);
        let mut parts = vec![Vec::new(); k];
        for idx in &by_class {
            let mut idx = idx.clone();
            idx.shuffle(&mut r);
            let props = sample_dirichlet(k, spec.alpha_dir, &mut r)?;
            let counts = largest_remainder(idx.len(), &props);
            let mut start = 0;
            for (client, &n) in counts.iter().enumerate() {
                parts[client].extend_from_slice(&idx[start..start + n]);
                start += n;
            }
        }
        if parts.iter().all(|p| p.len() >= spec.min_per_client) {
            for p in &mut parts {
                p.sort_unstable();
            }
            return Ok(parts);
        }
    }
    Err(Error::PartitionInfeasible {
        attempts: PARTITION_ATTEMPTS,
        min_per_client: spec.min_per_client,
    })
}

/// One injective feature-space style: `x ↦ φ(D·R·x) + b` with `R`
/// orthogonal, `D` positive diagonal and `φ(z) = z + a·tanh(z)`, `a ≥ 0`,
/// which is strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleTransform {
    pub index: usize,
    rotation: Matrix,
    scale: Vec<f64>,
    bend: f64,
    offset: Vec<f64>,
}

impl StyleTransform {
    /// Transform number `index` of the family keyed by `bank_seed`.
    pub fn new(index: usize, dim: usize, bank_seed: u64) -> Self {
        let mut r = rng::stream(bank_seed, Stream::StyleBank, &[index as u64, dim as u64]);
        let rotation = random_orthogonal(dim, &mut r);
        let scale = (0..dim).map(|_| math::exp(r.random_range(-0.5..0.5))).collect();
        let bend = r.random_range(0.2..0.8);
        let offset = (0..dim)
            .map(|_| 2.0 * Distribution::<f64>::sample(&StandardNormal, &mut r))
            .collect();
        Self {
            index,
            rotation,
            scale,
            bend,
            offset,
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn apply_row(&self, x: &[f64], out: &mut [f64]) {
        for (o, ((row, s), b)) in out.iter_mut().zip(
            (0..self.dim())
                .map(|i| self.rotation.row(i))
                .zip(&self.scale)
                .zip(&self.offset),
        ) {
            let z = s * math::dot(row, x);
            *o = z + self.bend * math::tanh(z) + b;
        }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.dim() {
            return Err(Error::Shape {
                op: "style",
                left: x.shape_str(),
                right: format!("dim {}", self.dim()),
            });
        }
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            self.apply_row(x.row(i), out.row_mut(i));
        }
        Ok(out)
    }
}

fn random_orthogonal(dim: usize, r: &mut Rng) -> Matrix {
    // Gram–Schmidt on a Gaussian matrix; redraw rows that collapse.
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(r)).collect();
        for u in &rows {
            let d = math::dot(&v, u);
            for (a, b) in v.iter_mut().zip(u) {
                *a -= d * b;
            }
        }
        let n = math::norm(&v);
        if n > 1e-8 {
            rows.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    Matrix::from_rows(&rows).expect("square")
}

/// The ordered family `T_0 … T_19` used for intra-client heterogeneity.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleBank {
    transforms: Vec<StyleTransform>,
}

impl StyleBank {
    pub fn new(dim: usize, bank_seed: u64) -> Self {
        Self {
            transforms: (0..STYLE_BANK_SIZE)
                .map(|j| StyleTransform::new(j, dim, bank_seed))
                .collect(),
        }
    }

    pub fn get(&self, j: usize) -> Option<&StyleTransform> {
        self.transforms.get(j)
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }
}

/// Samples with an optional style tag per row.
#[derive(Debug, Clone, PartialEq)]
pub struct StyledData {
    pub data: LabeledData,
    pub styles: Vec<Option<usize>>,
}

/// Style assignment of `n` samples: one `random_range(0..n_styles)` draw per
/// sample, in order, from the `Styles` stream of `seed`.
pub fn style_assignment(n: usize, n_styles: usize, seed: u64) -> Vec<Option<usize>> {
    if n_styles == 0 {
        return vec![None; n];
    }
    let mut r = rng::stream(seed, Stream::Styles, &[]);
    (0..n).map(|_| Some(r.random_range(0..n_styles))).collect()
}

/// Maps every sample through one of the first `n_styles` bank transforms,
/// chosen uniformly at random; `n_styles = 0` returns the data untouched.
pub fn inject_intra_heterogeneity(
    data: &LabeledData,
    n_styles: usize,
    seed: u64,
    bank: &StyleBank,
) -> Result<StyledData> {
    if n_styles > bank.len() {
        return Err(Error::InvalidArgument(format!(
            "n_styles = {n_styles} exceeds the style bank size {}",
            bank.len()
        )));
    }
    let styles = style_assignment(data.len(), n_styles, seed);
    let mut features = data.features.clone();
    for (i, s) in styles.iter().enumerate() {
        if let Some(j) = *s {
            let t = bank.get(j).expect("checked above");
            let x = data.features.row(i).to_vec();
            t.apply_row(&x, features.row_mut(i));
        }
    }
    Ok(StyledData {
        data: LabeledData::new(features, data.labels.clone())?,
        styles,
    })
}

/// A client's local train and test shards.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub train: StyledData,
    pub test: StyledData,
}

/// Stratified split: per class, a seeded shuffle and `round(frac · n_c)`
/// samples to test, keeping at least one training sample when possible.
pub fn split_train_test(data: &StyledData, test_fraction: f64, seed: u64) -> Result<ClientDataset> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidArgument(format!(
            "test fraction {test_fraction} not in [0, 1)"
        )));
    }
    let labels = &data.data.labels;
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut r = rng::stream(seed, Stream::Split, &[]);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut r);
        let n_test = libm::round(test_fraction * idx.len() as f64) as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    if train.is_empty() && !test.is_empty() {
        train.push(test.pop().expect("non-empty"));
    }
    train.sort_unstable();
    test.sort_unstable();
    let pick = |idx: &[usize]| StyledData {
        data: data.data.subset(idx),
        styles: idx.iter().map(|&i| data.styles[i]).collect(),
    };
    Ok(ClientDataset {
        train: pick(&train),
        test: pick(&test),
    })
}

/// Everything needed to build the federated clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub synthetic: SyntheticSpec,
    pub partition: PartitionSpec,
    pub n_styles: usize,
    pub test_fraction: f64,
    pub style_bank_seed: u64,
}

/// Client shards plus the index bookkeeping behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedData {
    pub clients: Vec<ClientDataset>,
    /// Dataset rows held by each client, before the train/test split.
    pub partition: Vec<Vec<usize>>,
    pub n_classes: usize,
    pub total: usize,
}

/// Generates the task, splits it across clients, styles each client's data
/// and splits each client into train/test.
pub fn build_federated_data(cfg: &DataConfig, seed: u64) -> Result<FederatedData> {
    let full = generate_dataset(&cfg.synthetic, seed)?;
    let partition = dirichlet_partition(&full.labels, &cfg.partition)?;
    let bank = StyleBank::new(cfg.synthetic.dim, cfg.style_bank_seed);
    let clients = partition
        .iter()
        .enumerate()
        .map(|(k, idx)| {
            let local = full.subset(idx);
            let styled = inject_intra_heterogeneity(
                &local,
                cfg.n_styles,
                derive_seed(seed, Stream::Styles, &[k as u64]),
                &bank,
            )?;
            split_train_test(
                &styled,
                cfg.test_fraction,
                derive_seed(seed, Stream::Split, &[k as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FederatedData {
        clients,
        partition,
        n_classes: cfg.synthetic.n_classes,
        total: full.len(),
    })
}

/// Offset of the source task's style transforms in the transform family;
/// they never coincide with bank transforms `0..STYLE_BANK_SIZE`.
pub const SOURCE_STYLE_OFFSET: usize = 1000;

/// Pretraining source task: same generative family as the federated task but
/// a fresh set of class modes and styles disjoint from the bank.
pub fn source_task(
    spec: &SyntheticSpec,
    n_source_styles: usize,
    style_bank_seed: u64,
    seed: u64,
) -> Result<LabeledData> {
    let src = SyntheticSpec {
        geometry_seed: derive_seed(spec.geometry_seed, Stream::Source, &[]),
        ..*spec
    };
    let data = generate_dataset(&src, derive_seed(seed, Stream::Source, &[1]))?;
    if n_source_styles == 0 {
        return Ok(data);
    }
    let assign = style_assignment(data.len(), n_source_styles, derive_seed(seed, Stream::Source, &[2]));
    let transforms: Vec<StyleTransform> = (0..n_source_styles)
        .map(|j| StyleTransform::new(SOURCE_STYLE_OFFSET + j, spec.dim, style_bank_seed))
        .collect();
    let mut features = data.features.clone();
    for (i, s) in assign.iter().enumerate() {
        let t = &transforms[s.expect("n_source_styles > 0")];
        let x = data.features.row(i).to_vec();
        t.apply_row(&x, features.row_mut(i));
    }
    LabeledData::new(features, data.labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_deterministic_with_exact_class_counts() {
        let spec = SyntheticSpec {
            samples_per_class: 10,
            ..Default::default()
        };
        let a = generate_dataset(&spec, 3).unwrap();
        assert_eq!(a, generate_dataset(&spec, 3).unwrap());
        assert_ne!(a, generate_dataset(&spec, 4).unwrap());
        for c in 0..spec.n_classes {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 10);
        }
    }

    #[test]
    fn largest_remainder_is_exhaustive() {
        assert_eq!(largest_remainder(10, &[0.5, 0.25, 0.25]), vec![5, 3, 2]);
        assert_eq!(largest_remainder(7, &[1.0 / 3.0; 3]), vec![3, 2, 2]);
        assert_eq!(largest_remainder(0, &[0.2, 0.8]), vec![0, 0]);
    }

    #[test]
    fn single_client_gets_everything() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let spec = PartitionSpec {
            clients: 1,
            alpha_dir: 0.5,
            seed: 1,
            min_per_client: 1,
        };
        let p = dirichlet_partition(&labels, &spec).unwrap();
        assert_eq!(p, vec![(0..30).collect::<Vec<_>>()]);
    }

    #[test]
    fn infeasible_minimum() {
        let labels = vec![0, 1, 0, 1];
        let spec = PartitionSpec {
            clients: 3,
            alpha_dir: 1.0,
            seed: 1,
            min_per_client: 2,
        };
        assert_eq!(
            dirichlet_partition(&labels, &spec),
            Err(Error::PartitionInfeasible {
                attempts: 100,
                min_per_client: 2
            })
        );
    }

    #[test]
    fn styles_zero_and_one() {
        let spec = SyntheticSpec {
            samples_per_class: 5,
            ..Default::default()
        };
        let d = generate_dataset(&spec, 1).unwrap();
        let bank = StyleBank::new(spec.dim, 9);
        let s0 = inject_intra_heterogeneity(&d, 0, 5, &bank).unwrap();
        assert_eq!(s0.data, d);
        assert!(s0.styles.iter().all(Option::is_none));
        let s1 = inject_intra_heterogeneity(&d, 1, 5, &bank).unwrap();
        assert!(s1.styles.iter().all(|s| *s == Some(0)));
        assert_eq!(s1.data.features, bank.get(0).unwrap().apply(&d.features).unwrap());
        assert!(inject_intra_heterogeneity(&d, 21, 5, &bank).is_err());
    }

    #[test]
    fn split_is_stratified() {
        let spec = SyntheticSpec {
            samples_per_class: 10,
            n_classes: 3,
            ..Default::default()
        };
        let d = generate_dataset(&spec, 1).unwrap();
        let styled = StyledData {
            styles: vec![None; d.len()],
            data: d,
        };
        let cd = split_train_test(&styled, 0.2, 4).unwrap();
        assert_eq!(cd.test.data.len(), 6);
        assert_eq!(cd.train.data.len(), 24);
        for c in 0..3 {
            assert_eq!(cd.test.data.labels.iter().filter(|&&l| l == c).count(), 2);
        }
    }
}
