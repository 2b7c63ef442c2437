use crate::archive::TensorMap;
use crate::error::{Error, Result};
use crate::params::BoundParams;
use crate::tape::{Tape, Var};

use super::heads::MlpHead;

/// Mean over rows of `|l2n(pred) - l2n(target)|^2`, i.e. `2 - 2 cos`.
///
/// `target` must be a constant on the tape.
pub fn byol_regression(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.requires_grad(target) {
        return Err(Error::InvalidArgument("byol target projection must not carry gradients".into()));
    }
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::Shape(format!("byol prediction {:?} vs target {:?}", tape.shape(pred), tape.shape(target))));
    }
    let rows = tape.shape(pred)[0];
    let p = tape.l2_normalize_rows(pred)?;
    let t = tape.l2_normalize_rows(target)?;
    let diff = tape.sub(p, t)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / rows as f32))
}

/// Symmetrized BYOL loss: view 1's prediction regresses view 2's target
/// projection and vice versa; the two terms are averaged.
pub fn byol_loss(
    tape: &mut Tape,
    bound: &BoundParams,
    predictor: &str,
    online_proj: [Var; 2],
    target_proj: [Var; 2],
) -> Result<Var> {
    let p0 = MlpHead::forward(tape, bound, predictor, online_proj[0])?;
    let p1 = MlpHead::forward(tape, bound, predictor, online_proj[1])?;
    let a = byol_regression(tape, p0, target_proj[1])?;
    let b = byol_regression(tape, p1, target_proj[0])?;
    let sum = tape.add(a, b)?;
    Ok(tape.scale(sum, 0.5))
}

/// Non-trainable copy of the online encoder and projector, tracked by EMA.
#[derive(Debug, Clone)]
pub struct TargetNetwork {
    pub params: TensorMap,
    pub momentum: f32,
}

impl TargetNetwork {
    pub fn new(online: &TensorMap, momentum: f32) -> Result<Self> {
        check_momentum(momentum)?;
        Ok(Self { params: online.clone(), momentum })
    }

    /// `target <- m * target + (1 - m) * online` for every tensor.
    pub fn ema_update(&mut self, online: &TensorMap) -> Result<()> {
        ema_update(&mut self.params, online, self.momentum)
    }
}

fn check_momentum(m: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidArgument(format!("ema momentum must lie in [0, 1], got {m}")));
    }
    Ok(())
}

/// `target <- m * target + (1 - m) * online`, elementwise over identically shaped maps.
pub fn ema_update(target: &mut TensorMap, online: &TensorMap, momentum: f32) -> Result<()> {
    check_momentum(momentum)?;
    if target.len() != online.len() {
        return Err(Error::Shape(format!("target has {} tensors, online {}", target.len(), online.len())));
    }
    let m = momentum as f64;
    for (name, t) in target.iter_mut() {
        let o = online.get(name).ok_or_else(|| Error::Shape(format!("online network lacks {name}")))?;
        if o.shape() != t.shape() {
            return Err(Error::Shape(format!("{name}: target {:?} vs online {:?}", t.shape(), o.shape())));
        }
        for (tv, &ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = (m * *tv as f64 + (1.0 - m) * ov as f64) as f32;
        }
    }
    Ok(())
}
