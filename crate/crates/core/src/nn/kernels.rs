use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::Matrix;
use crate::error::{shape_err, Error, Result};
use crate::math;

/// √(2/π), used by the tanh approximation of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh approximation of GELU.
pub const GELU_CUBIC: f64 = 0.044_715;

fn ensure_finite(m: &Matrix, what: &'static str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// `y[i] = W · x[i] + b` for every row of `x`.
pub fn linear(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    if x.cols() != w.cols() {
        return Err(shape_err("linear", x.shape_str(), w.shape_str()));
    }
    if b.len() != w.rows() {
        return Err(shape_err("linear bias", w.shape_str(), format!("{}", b.len())));
    }
    ensure_finite(x, "linear input")?;
    let (rows, out) = (x.rows(), w.rows());
    let mut y = Vec::with_capacity(rows * out);
    for i in 0..rows {
        let xi = x.row(i);
        for (o, bo) in b.iter().enumerate() {
            y.push(math::dot(w.row(o), xi) + bo);
        }
    }
    Ok(Matrix::from_parts_unchecked(rows, out, y))
}

/// Gradients of [`linear`] with respect to its input, weight and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub dx: Matrix,
    pub dw: Matrix,
    pub db: Vec<f64>,
}

/// `dx = dy · W`. Used where the weight is frozen.
pub fn linear_backward_input(dy: &Matrix, w: &Matrix) -> Result<Matrix> {
    if dy.cols() != w.rows() {
        return Err(shape_err("linear_backward", dy.shape_str(), w.shape_str()));
    }
    let (rows, inp) = (dy.rows(), w.cols());
    let mut dx = vec![0.0; rows * inp];
    for i in 0..rows {
        let dyi = dy.row(i);
        let dxi = &mut dx[i * inp..(i + 1) * inp];
        for (o, &g) in dyi.iter().enumerate() {
            for (d, wv) in dxi.iter_mut().zip(w.row(o)) {
                *d += g * wv;
            }
        }
    }
    Ok(Matrix::from_parts_unchecked(rows, inp, dx))
}

pub fn linear_backward(dy: &Matrix, x: &Matrix, w: &Matrix) -> Result<LinearGrads> {
    if dy.rows() != x.rows() || x.cols() != w.cols() {
        return Err(shape_err("linear_backward", x.shape_str(), dy.shape_str()));
    }
    let dx = linear_backward_input(dy, w)?;
    let (inp, out) = (w.cols(), w.rows());
    let mut dw = vec![0.0; out * inp];
    let mut db = vec![0.0; out];
    for i in 0..x.rows() {
        let (dyi, xi) = (dy.row(i), x.row(i));
        for o in 0..out {
            let g = dyi[o];
            db[o] += g;
            for (d, xv) in dw[o * inp..(o + 1) * inp].iter_mut().zip(xi) {
                *d += g * xv;
            }
        }
    }
    Ok(LinearGrads {
        dx,
        dw: Matrix::from_parts_unchecked(out, inp, dw),
        db,
    })
}

/// Forward state of a layer norm, retained for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormOutput {
    /// Normalized rows; also the layer output.
    pub y: Matrix,
    pub inv_std: Vec<f64>,
}

/// Per-row normalization to zero mean, unit (biased) variance.
/// No learned affine.
pub fn layer_norm_forward(x: &Matrix, eps: f64) -> Result<LayerNormOutput> {
    let d = x.cols();
    if d < 2 {
        return Err(Error::InvalidDimension(format!("layer_norm needs d >= 2, got {d}")));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
    }
    ensure_finite(x, "layer_norm input")?;
    let n = d as f64;
    let mut y = Vec::with_capacity(x.rows() * d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let r = x.row(i);
        let mean = r.iter().fold(0.0, |a, v| a + v) / n;
        let var = r.iter().fold(0.0, |a, v| a + (v - mean) * (v - mean)) / n;
        let s = 1.0 / math::sqrt(var + eps);
        inv_std.push(s);
        y.extend(r.iter().map(|v| (v - mean) * s));
    }
    Ok(LayerNormOutput {
        y: Matrix::from_parts_unchecked(x.rows(), d, y),
        inv_std,
    })
}

pub fn layer_norm(x: &Matrix, eps: f64) -> Result<Matrix> {
    layer_norm_forward(x, eps).map(|o| o.y)
}

/// `dx = s/d · (d·dy − Σdy − x̂·Σ(dy ⊙ x̂))` per row.
pub fn layer_norm_backward(dy: &Matrix, fwd: &LayerNormOutput) -> Result<Matrix> {
    if dy.rows() != fwd.y.rows() || dy.cols() != fwd.y.cols() {
        return Err(shape_err("layer_norm_backward", dy.shape_str(), fwd.y.shape_str()));
    }
    let d = dy.cols();
    let n = d as f64;
    let mut dx = Vec::with_capacity(dy.rows() * d);
    for i in 0..dy.rows() {
        let (g, xh) = (dy.row(i), fwd.y.row(i));
        let sum_g = g.iter().fold(0.0, |a, v| a + v);
        let sum_gx = math::dot(g, xh);
        let s = fwd.inv_std[i] / n;
        dx.extend(g.iter().zip(xh).map(|(gj, xj)| s * (n * gj - sum_g - xj * sum_gx)));
    }
    Ok(Matrix::from_parts_unchecked(dy.rows(), d, dx))
}

#[inline]
fn gelu_scalar(x: f64) -> f64 {
    let t = math::tanh(GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x));
    0.5 * x * (1.0 + t)
}

#[inline]
fn gelu_grad_scalar(x: f64) -> f64 {
    let t = math::tanh(GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x));
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Tanh-approximated GELU.
pub fn gelu(x: &Matrix) -> Result<Matrix> {
    ensure_finite(x, "gelu input")?;
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    Ok(Matrix::from_parts_unchecked(x.rows(), x.cols(), data))
}

/// `dx = dy ⊙ gelu'(x)`.
pub fn gelu_backward(dy: &Matrix, x: &Matrix) -> Result<Matrix> {
    if dy.rows() != x.rows() || dy.cols() != x.cols() {
        return Err(shape_err("gelu_backward", dy.shape_str(), x.shape_str()));
    }
    let data = dy
        .data()
        .iter()
        .zip(x.data())
        .map(|(g, &v)| g * gelu_grad_scalar(v))
        .collect();
    Ok(Matrix::from_parts_unchecked(x.rows(), x.cols(), data))
}

/// Mean cross-entropy of `softmax(logits)` against integer labels, and its
/// gradient `(softmax − onehot)/B`.
pub fn softmax_xent(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (b, n) = (logits.rows(), logits.cols());
    if b == 0 {
        return Err(Error::InvalidDimension("softmax_xent needs B >= 1".into()));
    }
    if labels.len() != b {
        return Err(shape_err(
            "softmax_xent",
            logits.shape_str(),
            format!("{} labels", labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::InvalidLabel { label, classes: n });
    }
    ensure_finite(logits, "logits")?;
    let bf = b as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(b * n);
    for (i, &label) in labels.iter().enumerate() {
        let z = logits.row(i);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum = z.iter().fold(0.0, |a, v| a + math::exp(v - max));
        let lse = max + math::ln(sum);
        total += lse - z[label];
        grad.extend(z.iter().enumerate().map(|(j, v)| {
            let p = math::exp(v - lse);
            (if j == label { p - 1.0 } else { p }) / bf
        }));
    }
    Ok((total / bf, Matrix::from_parts_unchecked(b, n, grad)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn linear_identity_and_affine() {
        let x = m(&[&[1.0, 2.0]]);
        assert_eq!(linear(&x, &Matrix::identity(2), &[0.0, 0.0]).unwrap(), x);
        let w = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let y = linear(&x, &w, &[0.5, -0.5]).unwrap();
        assert_eq!(y.data(), &[5.5, 10.5]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let x = Matrix::zeros(1, 3);
        let err = linear(&x, &Matrix::identity(2), &[0.0, 0.0]).unwrap_err();
        assert_eq!(
            err,
            Error::Shape {
                op: "linear",
                left: "1x3".into(),
                right: "2x2".into()
            }
        );
    }

    #[test]
    fn layer_norm_cases() {
        let y = layer_norm(&m(&[&[1.0, 1.0, 1.0]]), 1e-5).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
        let y = layer_norm(&m(&[&[1.0, -1.0]]), 1e-5).unwrap();
        assert!((y.get(0, 0) - 1.0).abs() < 1e-5 && (y.get(0, 1) + 1.0).abs() < 1e-5);
        assert!(matches!(
            layer_norm(&m(&[&[1.0]]), 1e-5),
            Err(Error::InvalidDimension(_))
        ));
    }

    #[test]
    fn gelu_fixed_points() {
        let y = gelu(&m(&[&[0.0, 10.0]])).unwrap();
        assert_eq!(y.get(0, 0), 0.0);
        assert!((y.get(0, 1) - 10.0).abs() < 1e-6);
    }

    #[test]
    fn xent_uniform_and_saturated() {
        let (loss, _) = softmax_xent(&Matrix::zeros(1, 4), &[2]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        let (loss, _) = softmax_xent(&m(&[&[50.0, 0.0, 0.0]]), &[0]).unwrap();
        assert!((0.0..1e-12).contains(&loss));
        assert_eq!(
            softmax_xent(&Matrix::zeros(1, 3), &[3]).unwrap_err(),
            Error::InvalidLabel { label: 3, classes: 3 }
        );
    }
}
