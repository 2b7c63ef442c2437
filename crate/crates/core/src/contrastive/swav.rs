use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwavParams {
    /// Softmax temperature applied to prototype scores when predicting codes.
    #[serde(default = "default_temperature")]
    pub temperature: f32,
    /// Sharpening of `exp(scores / epsilon)` before the Sinkhorn iterations.
    #[serde(default = "default_epsilon")]
    pub epsilon: f32,
    #[serde(default = "default_iters")]
    pub sinkhorn_iters: usize,
    /// Leading views whose codes are computed (the global crops).
    #[serde(default = "default_code_views")]
    pub code_views: usize,
}

fn default_temperature() -> f32 {
    0.1
}
fn default_epsilon() -> f32 {
    0.05
}
fn default_iters() -> usize {
    3
}
fn default_code_views() -> usize {
    2
}

impl Default for SwavParams {
    fn default() -> Self {
        Self {
            temperature: default_temperature(),
            epsilon: default_epsilon(),
            sinkhorn_iters: default_iters(),
            code_views: default_code_views(),
        }
    }
}

/// Balanced soft assignment of `B` samples to `K` prototypes.
///
/// Starts from `exp(scores / epsilon)`, then alternately rescales columns to
/// mass `1/K` and rows to mass `1/B` for `n_iters` rounds, and finally scales
/// by `B` so each row is a distribution over prototypes.
pub fn sinkhorn_assign(scores: &Tensor, n_iters: usize, epsilon: f32) -> Result<Tensor> {
    if scores.ndim() != 2 {
        return Err(Error::Shape(format!("sinkhorn expects [B, K] scores, got {:?}", scores.shape())));
    }
    let (b, k) = (scores.shape()[0], scores.shape()[1]);
    if k < 2 {
        return Err(Error::InvalidArgument(format!("sinkhorn needs at least 2 prototypes, got {k}")));
    }
    if n_iters == 0 {
        return Err(Error::InvalidArgument("sinkhorn needs at least one iteration".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("sinkhorn epsilon must be positive, got {epsilon}")));
    }
    if !scores.is_finite() {
        return Err(Error::InvalidArgument("sinkhorn scores contain non-finite values".into()));
    }
    let max = scores.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let eps = epsilon as f64;
    let mut q: Vec<f64> = scores.data().iter().map(|&s| ((s as f64 - max) / eps).exp()).collect();
    let total: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= total);
    for _ in 0..n_iters {
        for col in 0..k {
            let sum: f64 = (0..b).map(|r| q[r * k + col]).sum();
            if sum > 0.0 {
                let f = 1.0 / (k as f64 * sum);
                (0..b).for_each(|r| q[r * k + col] *= f);
            }
        }
        for row in q.chunks_mut(k) {
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                let f = 1.0 / (b as f64 * sum);
                row.iter_mut().for_each(|v| *v *= f);
            }
        }
    }
    let data = q.iter().map(|&v| (v * b as f64) as f32).collect();
    Tensor::new(vec![b, k], data)
}

/// Swapped-prediction loss.
///
/// `views` are l2-normalized projections `[B, d]` of the same batch under
/// different augmentations; `prototypes` is `[K, d]`. Codes come from the
/// first `params.code_views` views via [`sinkhorn_assign`] and are constants
/// on the tape. The loss averages, over every ordered pair `(a, b)` with `a`
/// a code view and `b != a`, the cross-entropy between view `a`'s codes and
/// the softmax of view `b`'s scores at `params.temperature`.
pub fn swav_loss(tape: &mut Tape, views: &[Var], prototypes: Var, params: &SwavParams) -> Result<Var> {
    if views.len() < 2 {
        return Err(Error::InvalidArgument(format!("swav needs at least 2 views, got {}", views.len())));
    }
    if !(params.temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("swav temperature must be positive, got {}", params.temperature)));
    }
    let batch = tape.shape(views[0])[0];
    let mut scores = Vec::with_capacity(views.len());
    for &v in views {
        if tape.shape(v)[0] != batch {
            return Err(Error::Shape("swav views differ in batch size".into()));
        }
        scores.push(tape.matmul(v, prototypes, true)?);
    }
    let code_views = params.code_views.clamp(1, views.len());
    let mut codes = Vec::with_capacity(code_views);
    for &s in &scores[..code_views] {
        let q = sinkhorn_assign(tape.value(s), params.sinkhorn_iters, params.epsilon)?;
        codes.push(tape.constant(q));
    }
    let mut log_probs = Vec::with_capacity(scores.len());
    for &s in &scores {
        let scaled = tape.scale(s, 1.0 / params.temperature);
        log_probs.push(tape.log_softmax_rows(scaled)?);
    }
    let mut terms = Vec::new();
    for (a, &q) in codes.iter().enumerate() {
        for (b, &lp) in log_probs.iter().enumerate() {
            if a == b {
                continue;
            }
            let prod = tape.mul(q, lp)?;
            let total = tape.sum(prod);
            terms.push(tape.scale(total, -1.0 / batch as f32));
        }
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f32))
}
