use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// A named, shaped, flat block of trainable (or frozen) scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(Error::BlockMismatch(format!(
                "{name}: shape {shape:?} holds {expect} values, got {}",
                values.len()
            )));
        }
        Ok(Self { name, shape, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            name: self.name.clone(),
            shape: self.shape.clone(),
            values: alloc::vec![0.0; self.values.len()],
        }
    }
}

/// `p ← p − lr·g`, elementwise.
#[inline]
pub fn sgd_update(p: &mut [f64], g: &[f64], lr: f64) {
    debug_assert_eq!(p.len(), g.len());
    for (pv, gv) in p.iter_mut().zip(g) {
        *pv -= lr * gv;
    }
}

/// One SGD step over a block set, visiting blocks in slice order.
pub fn sgd_step(params: &mut [ParamBlock], grads: &[ParamBlock], lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
    }
    if params.len() != grads.len() {
        return Err(Error::BlockMismatch(format!(
            "{} parameter blocks vs {} gradient blocks",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.name != g.name || p.shape != g.shape || p.values.len() != g.values.len() {
            return Err(Error::BlockMismatch(p.name.clone()));
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        sgd_update(&mut p.values, &g.values, lr);
    }
    Ok(())
}
