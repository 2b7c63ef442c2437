//! Binding named parameter tensors onto a tape and applying their gradients.

use std::collections::BTreeMap;

use crate::archive::TensorMap;
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::tape::{Gradients, Tape, Var};

/// Tape handles for a set of named tensors.
#[derive(Debug, Default, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl FromIterator<(String, Var)> for BoundParams {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self { vars: iter.into_iter().collect() }
    }
}

impl BoundParams {
    /// Put every tensor of `params` selected by `select` on the tape, as a
    /// trainable leaf when `trainable` is set and as a constant otherwise.
    pub fn bind(tape: &mut Tape, params: &TensorMap, trainable: bool, select: impl Fn(&str) -> bool) -> Self {
        let mut out = Self::default();
        out.extend(tape, params, trainable, select);
        out
    }

    pub fn extend(&mut self, tape: &mut Tape, params: &TensorMap, trainable: bool, select: impl Fn(&str) -> bool) {
        for (name, t) in params.iter().filter(|(n, _)| select(n)) {
            let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
            self.vars.insert(name.clone(), v);
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Naming(format!("parameter {name:?} is not bound")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    /// One optimizer step for every bound tensor of `params` that received a gradient.
    pub fn apply(&self, tape: &Tape, grads: &Gradients, params: &mut TensorMap, opt: &mut Optimizer) -> Result<()> {
        for (name, &var) in &self.vars {
            if !tape.requires_grad(var) {
                continue;
            }
            let Some(param) = params.get_mut(name) else { continue };
            let grad = grads.get_or_zeros(var);
            opt.step(name, param, &grad)?;
        }
        Ok(())
    }
}
