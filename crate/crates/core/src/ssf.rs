//! Scale-and-shift feature modulation (SSF): `y = γ ⊙ x + β` applied after
//! backbone operations, plus the algebra used to aggregate, compose and
//! merge SSF parameters.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::nn::Matrix;
use crate::rng::Rng;

/// One place in the backbone where an SSF modulation is applied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InsertionPoint {
    pub id: String,
    pub width: usize,
    /// True only when the operation right before this point is affine, which
    /// is the only case where the modulation can be folded into weights.
    pub affine_preceded: bool,
}

/// Ordered list of insertion points of a backbone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InsertionSpec {
    points: Vec<InsertionPoint>,
}

impl InsertionSpec {
    pub fn new(points: Vec<InsertionPoint>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if p.width == 0 {
                return Err(Error::InvalidDimension(format!(
                    "insertion point `{}` has width 0",
                    p.id
                )));
            }
            if points[..i].iter().any(|q| q.id == p.id) {
                return Err(Error::InvalidArgument(format!("duplicate insertion point `{}`", p.id)));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[InsertionPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Scalars in one [`SsfEntry`] for this spec (scale + shift per point).
    pub fn entry_scalars(&self) -> usize {
        self.points.iter().map(|p| 2 * p.width).sum()
    }
}

/// Scale and shift vectors of one insertion point.
#[derive(Debug, Clone, PartialEq)]
pub struct SsfPair {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

/// One full set of SSF parameters, one [`SsfPair`] per insertion point.
#[derive(Debug, Clone, PartialEq)]
pub struct SsfEntry {
    pub pairs: Vec<SsfPair>,
}

impl SsfEntry {
    /// γ = 1, β = 0 everywhere.
    pub fn identity(spec: &InsertionSpec) -> Self {
        Self {
            pairs: spec
                .points()
                .iter()
                .map(|p| SsfPair {
                    scale: vec![1.0; p.width],
                    shift: vec![0.0; p.width],
                })
                .collect(),
        }
    }

    /// γ ~ N(1, σ²), β ~ N(0, σ²).
    pub fn random_near_identity(spec: &InsertionSpec, sigma: f64, rng: &mut Rng) -> Self {
        let mut e = Self::identity(spec);
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).expect("sigma > 0");
            for v in e.slices_mut() {
                for x in v.iter_mut() {
                    *x += noise.sample(rng);
                }
            }
        }
        e
    }

    /// Uniform perturbation used by tests and oracles: γ ∈ 1 ± a, β ∈ ±a.
    pub fn random_uniform(spec: &InsertionSpec, amplitude: f64, rng: &mut Rng) -> Self {
        let mut e = Self::identity(spec);
        for v in e.slices_mut() {
            for x in v.iter_mut() {
                *x += amplitude * (2.0 * rng.random::<f64>() - 1.0);
            }
        }
        e
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            pairs: self
                .pairs
                .iter()
                .map(|p| SsfPair {
                    scale: vec![0.0; p.scale.len()],
                    shift: vec![0.0; p.shift.len()],
                })
                .collect(),
        }
    }

    pub fn widths(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().map(|p| p.scale.len())
    }

    pub fn scalar_count(&self) -> usize {
        self.pairs.iter().map(|p| p.scale.len() + p.shift.len()).sum()
    }

    /// Checks widths against a spec.
    pub fn check_spec(&self, spec: &InsertionSpec) -> Result<()> {
        let ok = self.pairs.len() == spec.len()
            && self
                .pairs
                .iter()
                .zip(spec.points())
                .all(|(p, ip)| p.scale.len() == ip.width && p.shift.len() == ip.width);
        if ok {
            Ok(())
        } else {
            Err(Error::IncompatibleEntries(format!(
                "entry widths {:?} vs spec widths {:?}",
                self.widths().collect::<Vec<_>>(),
                spec.points().iter().map(|p| p.width).collect::<Vec<_>>()
            )))
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.pairs.len() == other.pairs.len()
            && self
                .pairs
                .iter()
                .zip(&other.pairs)
                .all(|(a, b)| a.scale.len() == b.scale.len() && a.shift.len() == b.shift.len())
    }

    /// Parameter slices in canonical order: per point, scale then shift.
    pub fn slices(&self) -> Vec<&[f64]> {
        self.pairs
            .iter()
            .flat_map(|p| [p.scale.as_slice(), p.shift.as_slice()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.pairs
            .iter_mut()
            .flat_map(|p| [p.scale.as_mut_slice(), p.shift.as_mut_slice()])
            .collect()
    }

    /// `self += w · other`, elementwise.
    pub fn add_scaled(&mut self, other: &Self, w: f64) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += w * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// `y = γ ⊙ x + β`, broadcast over rows.
pub fn modulate(x: &Matrix, scale: &[f64], shift: &[f64]) -> Result<Matrix> {
    if scale.len() != x.cols() || shift.len() != x.cols() {
        return Err(shape_err(
            "modulate",
            x.shape_str(),
            format!("scale {} / shift {}", scale.len(), shift.len()),
        ));
    }
    let mut y = Vec::with_capacity(x.data().len());
    for i in 0..x.rows() {
        y.extend(x.row(i).iter().zip(scale).zip(shift).map(|((v, g), b)| g * v + b));
    }
    Ok(Matrix::from_parts_unchecked(x.rows(), x.cols(), y))
}

/// Gradients of [`modulate`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModulateGrads {
    pub dx: Matrix,
    pub dscale: Vec<f64>,
    pub dshift: Vec<f64>,
}

/// `dx = γ ⊙ dy`, `dγ = Σ_rows dy ⊙ x`, `dβ = Σ_rows dy`.
pub fn modulate_backward(dy: &Matrix, x: &Matrix, scale: &[f64]) -> Result<ModulateGrads> {
    if dy.rows() != x.rows() || dy.cols() != x.cols() || scale.len() != x.cols() {
        return Err(shape_err(
            "modulate_backward",
            dy.shape_str(),
            format!("{} / scale {}", x.shape_str(), scale.len()),
        ));
    }
    let d = x.cols();
    let mut dx = Vec::with_capacity(dy.data().len());
    let mut dscale = vec![0.0; d];
    let mut dshift = vec![0.0; d];
    for i in 0..x.rows() {
        let (g, xi) = (dy.row(i), x.row(i));
        for j in 0..d {
            dx.push(scale[j] * g[j]);
            dscale[j] += g[j] * xi[j];
            dshift[j] += g[j];
        }
    }
    Ok(ModulateGrads {
        dx: Matrix::from_parts_unchecked(x.rows(), d, dx),
        dscale,
        dshift,
    })
}

/// Folds a modulation into the affine layer right before it:
/// `W' = diag(γ)·W`, `b' = γ ⊙ b + β`.
pub fn merge_into_affine(
    point: &InsertionPoint,
    w: &Matrix,
    b: &[f64],
    scale: &[f64],
    shift: &[f64],
) -> Result<(Matrix, Vec<f64>)> {
    if !point.affine_preceded {
        return Err(Error::MergeUnsupported(point.id.clone()));
    }
    let out = w.rows();
    if b.len() != out || scale.len() != out || shift.len() != out || point.width != out {
        return Err(shape_err(
            "merge_into_affine",
            w.shape_str(),
            format!("bias {} / scale {} / shift {}", b.len(), scale.len(), shift.len()),
        ));
    }
    let mut merged = w.clone();
    for (o, g) in scale.iter().enumerate() {
        for v in merged.row_mut(o) {
            *v *= g;
        }
    }
    let bias = b.iter().zip(scale).zip(shift).map(|((bv, g), s)| g * bv + s).collect();
    Ok((merged, bias))
}

/// Elementwise `Σ wᵢ · entryᵢ`, accumulated in list order.
pub fn ssf_weighted_sum(entries: &[&SsfEntry], weights: &[f64]) -> Result<SsfEntry> {
    let (first, rest) = entries
        .split_first()
        .ok_or_else(|| Error::IncompatibleEntries("empty entry list".into()))?;
    if weights.len() != entries.len() {
        return Err(Error::IncompatibleEntries(format!(
            "{} entries but {} weights",
            entries.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("ssf weights"));
    }
    if let Some(i) = rest.iter().position(|e| !e.same_layout(first)) {
        return Err(Error::IncompatibleEntries(format!("entry {} differs in layout", i + 1)));
    }
    let mut out = first.zeros_like();
    for (a, b) in out.slices_mut().into_iter().zip(first.slices()) {
        for (x, y) in a.iter_mut().zip(b) {
            *x = weights[0] * y;
        }
    }
    for (e, &w) in rest.iter().zip(&weights[1..]) {
        out.add_scaled(e, w);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec1(width: usize, affine: bool) -> InsertionSpec {
        InsertionSpec::new(vec![InsertionPoint {
            id: "p".into(),
            width,
            affine_preceded: affine,
        }])
        .unwrap()
    }

    fn entry(scale: Vec<f64>, shift: Vec<f64>) -> SsfEntry {
        SsfEntry {
            pairs: vec![SsfPair { scale, shift }],
        }
    }

    #[test]
    fn modulate_cases() {
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(modulate(&x, &[1.0, 1.0], &[0.0, 0.0]).unwrap(), x);
        let y = modulate(&x, &[2.0, 3.0], &[0.5, -0.5]).unwrap();
        assert_eq!(y.data(), &[2.5, 5.5]);
        assert!(matches!(modulate(&x, &[1.0], &[0.0, 0.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn modulate_backward_hand_case() {
        let dy = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let x = Matrix::from_rows(&[[2.0, 3.0]]).unwrap();
        let g = modulate_backward(&dy, &x, &[4.0, 5.0]).unwrap();
        assert_eq!(g.dx.data(), &[4.0, 5.0]);
        assert_eq!(g.dscale, vec![2.0, 3.0]);
        assert_eq!(g.dshift, vec![1.0, 1.0]);
        let z = modulate_backward(&Matrix::zeros(1, 2), &x, &[4.0, 5.0]).unwrap();
        assert!(z.dx.data().iter().chain(&z.dscale).chain(&z.dshift).all(|v| *v == 0.0));
    }

    #[test]
    fn merge_hand_case_and_refusal() {
        let w = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let sp = spec1(2, true);
        let p = &sp.points()[0];
        let (w2, b2) = merge_into_affine(p, &w, &[1.0, 1.0], &[2.0, 3.0], &[0.5, -0.5]).unwrap();
        assert_eq!(w2.data(), &[2.0, 4.0, 9.0, 12.0]);
        assert_eq!(b2, vec![2.5, 2.5]);
        let (w3, b3) = merge_into_affine(p, &w, &[1.0, 1.0], &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!((w3, b3), (w.clone(), vec![1.0, 1.0]));
        let sq = spec1(2, false);
        let q = &sq.points()[0];
        assert_eq!(
            merge_into_affine(q, &w, &[1.0, 1.0], &[1.0, 1.0], &[0.0, 0.0]),
            Err(Error::MergeUnsupported("p".into()))
        );
    }

    #[test]
    fn weighted_sums() {
        let a = entry(vec![1.0, 2.0], vec![0.0, 0.0]);
        let b = entry(vec![3.0, 4.0], vec![0.0, 0.0]);
        assert_eq!(ssf_weighted_sum(&[&a], &[1.0]).unwrap(), a);
        let m = ssf_weighted_sum(&[&a, &b], &[0.5, 0.5]).unwrap();
        assert_eq!(m.pairs[0].scale, vec![2.0, 3.0]);
        let s1 = entry(vec![1.0], vec![1.0]);
        let s5 = entry(vec![5.0], vec![5.0]);
        let m = ssf_weighted_sum(&[&s1, &s5], &[0.25, 0.75]).unwrap();
        assert_eq!(m.pairs[0].scale, vec![4.0]);
        assert!(ssf_weighted_sum(&[], &[]).is_err());
        let c = entry(vec![1.0], vec![1.0]);
        assert!(matches!(
            ssf_weighted_sum(&[&a, &c], &[0.5, 0.5]),
            Err(Error::IncompatibleEntries(_))
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(InsertionSpec::new(vec![
            InsertionPoint {
                id: "a".into(),
                width: 1,
                affine_preceded: true
            },
            InsertionPoint {
                id: "a".into(),
                width: 1,
                affine_preceded: false
            },
        ])
        .is_err());
        assert!(InsertionSpec::new(vec![InsertionPoint {
            id: "a".into(),
            width: 0,
            affine_preceded: true
        }])
        .is_err());
        assert_eq!(spec1(4, true).entry_scalars(), 8);
    }
}
