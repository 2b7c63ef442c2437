use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::archive::TensorMap;
use crate::error::{Error, Result};
use crate::params::BoundParams;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PROJECTOR: &str = "projector";
pub const PREDICTOR: &str = "predictor";
pub const PROTOTYPES: &str = "prototypes";

/// Bias-free two-layer MLP `x -> relu(x W1) W2`.
///
/// Used both as the projection head (`d_feat -> d_hidden -> d_proj`) and as
/// BYOL's prediction head (`d_proj -> d_hidden -> d_proj`).
#[derive(Debug, Clone)]
pub struct MlpHead {
    prefix: String,
    pub w1: Tensor,
    pub w2: Tensor,
}

impl MlpHead {
    pub fn new(prefix: &str, d_in: usize, d_hidden: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            prefix: prefix.to_string(),
            w1: normal(&[d_in, d_hidden], (2.0 / d_in as f32).sqrt(), rng),
            w2: normal(&[d_hidden, d_out], (1.0 / d_hidden as f32).sqrt(), rng),
        }
    }

    pub fn w1_name(prefix: &str) -> String {
        format!("{prefix}.w1")
    }

    pub fn w2_name(prefix: &str) -> String {
        format!("{prefix}.w2")
    }

    pub fn insert_into(&self, map: &mut TensorMap) {
        map.insert(Self::w1_name(&self.prefix), self.w1.clone());
        map.insert(Self::w2_name(&self.prefix), self.w2.clone());
    }

    /// Apply the head whose weights are bound under `prefix`.
    pub fn forward(tape: &mut Tape, bound: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
        let w1 = bound.get(&Self::w1_name(prefix))?;
        let w2 = bound.get(&Self::w2_name(prefix))?;
        let h = tape.matmul(x, w1, false)?;
        let h = tape.relu(h);
        tape.matmul(h, w2, false)
    }
}

/// SwaV cluster prototypes, one unit-norm row per prototype.
#[derive(Debug, Clone)]
pub struct PrototypeBank {
    pub weights: Tensor,
}

impl PrototypeBank {
    pub fn new(n_prototypes: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if n_prototypes < 2 || dim == 0 {
            return Err(Error::Config(format!("need at least 2 prototypes of positive dim, got {n_prototypes}x{dim}")));
        }
        let mut weights = normal(&[n_prototypes, dim], 1.0, rng);
        normalize_rows(&mut weights)?;
        Ok(Self { weights })
    }

    /// Project every row back onto the unit sphere.
    pub fn normalize(&mut self) -> Result<()> {
        normalize_rows(&mut self.weights)
    }
}

/// Row-wise in-place l2 normalization of a 2-D tensor.
pub fn normalize_rows(t: &mut Tensor) -> Result<()> {
    let cols = t.shape()[t.ndim() - 1];
    for (r, row) in t.data_mut().chunks_mut(cols).enumerate() {
        let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::InvalidArgument(format!("row {r} has zero norm")));
        }
        row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
    }
    Ok(())
}

fn normal(shape: &[usize], std: f32, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}
