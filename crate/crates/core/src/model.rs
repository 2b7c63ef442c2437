//! MiniNet: a small conv encoder of `conv3x3 -> BN -> ReLU -> maxpool2` blocks
//! followed by global average pooling.
//!
//! Parameters live in a flat [`TensorMap`] using the names
//! `block{i}.conv.weight` and `block{i}.bn.{gamma,beta,running_mean,running_var}`,
//! with an optional one-element `block{i}.bn.eps` written by exact-mode surgery.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::archive::TensorMap;
use crate::error::{Error, Result};
use crate::params::BoundParams;
use crate::tape::{BatchStats, Mode, Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Nominal training resolution; the encoder itself accepts any size that survives the pooling.
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    /// Output channels of each block.
    #[serde(default = "default_blocks")]
    pub blocks: Vec<usize>,
}

fn default_in_channels() -> usize {
    3
}
fn default_input_size() -> usize {
    32
}
fn default_blocks() -> Vec<usize> {
    vec![16, 32, 64, 128]
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { in_channels: default_in_channels(), input_size: default_input_size(), blocks: default_blocks() }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("model needs at least one block".into()));
        }
        if self.in_channels == 0 || self.blocks.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.input_size < self.min_input_size() {
            return Err(Error::Config(format!(
                "input size {} too small for {} pooling stages (need {})",
                self.input_size,
                self.blocks.len(),
                self.min_input_size()
            )));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.blocks.last().expect("validated spec has blocks")
    }

    /// Smallest spatial side that still leaves one pixel after every pooling stage.
    pub fn min_input_size(&self) -> usize {
        1 << self.blocks.len()
    }

    fn in_channels_of(&self, block: usize) -> usize {
        if block == 0 {
            self.in_channels
        } else {
            self.blocks[block - 1]
        }
    }
}

pub fn conv_weight_name(block: usize) -> String {
    format!("block{block}.conv.weight")
}

pub fn bn_name(block: usize, field: &str) -> String {
    format!("block{block}.bn.{field}")
}

/// Encoder parameters that receive gradients.
pub fn is_trainable(name: &str) -> bool {
    name.ends_with(".conv.weight") || name.ends_with(".bn.gamma") || name.ends_with(".bn.beta")
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    params: TensorMap,
}

impl Model {
    /// He-normal conv weights; BN at identity (`gamma = 1`, `beta = 0`, mean 0, var 1).
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = TensorMap::new();
        for (i, &out) in spec.blocks.iter().enumerate() {
            let shape = vec![out, spec.in_channels_of(i), KERNEL, KERNEL];
            params.insert(conv_weight_name(i), he_normal(&shape, &mut rng));
            params.insert(bn_name(i, "gamma"), Tensor::ones(vec![out]));
            params.insert(bn_name(i, "beta"), Tensor::zeros(vec![out]));
            params.insert(bn_name(i, "running_mean"), Tensor::zeros(vec![out]));
            params.insert(bn_name(i, "running_var"), Tensor::ones(vec![out]));
        }
        Ok(Self { spec, params })
    }

    /// Rebuild a model from a checkpoint, inferring the block layout from tensor shapes.
    pub fn from_tensors(params: TensorMap, input_size: usize) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut in_channels = None;
        while let Some(w) = params.get(&conv_weight_name(blocks.len())) {
            let i = blocks.len();
            let s = w.shape();
            if s.len() != 4 || s[2] != KERNEL || s[3] != KERNEL {
                return Err(Error::Naming(format!("{} has shape {s:?}, expected [K, C, 3, 3]", conv_weight_name(i))));
            }
            let expected_in = if i == 0 { *in_channels.get_or_insert(s[1]) } else { blocks[i - 1] };
            if s[1] != expected_in {
                return Err(Error::Naming(format!(
                    "{} expects {} input channels, previous block yields {expected_in}",
                    conv_weight_name(i),
                    s[1]
                )));
            }
            for field in ["gamma", "beta", "running_mean", "running_var"] {
                let name = bn_name(i, field);
                let t = params.get(&name).ok_or_else(|| Error::Naming(format!("missing {name}")))?;
                if t.shape() != [s[0]] {
                    return Err(Error::Naming(format!("{name} has shape {:?}, expected [{}]", t.shape(), s[0])));
                }
            }
            if let Some(eps) = params.get(&bn_name(i, "eps")) {
                if eps.numel() != 1 || !(eps.data()[0] > 0.0) {
                    return Err(Error::Naming(format!("{} must be one positive value", bn_name(i, "eps"))));
                }
            }
            blocks.push(s[0]);
        }
        if blocks.is_empty() {
            return Err(Error::Naming(format!("no {} found", conv_weight_name(0))));
        }
        let known = |name: &str| {
            (0..blocks.len()).any(|i| {
                name == conv_weight_name(i)
                    || ["gamma", "beta", "running_mean", "running_var", "eps"].iter().any(|f| name == bn_name(i, f))
            })
        };
        if let Some(extra) = params.keys().find(|k| !known(k)) {
            return Err(Error::Naming(format!("unexpected tensor {extra:?} in encoder checkpoint")));
        }
        let spec = ModelSpec { in_channels: in_channels.unwrap_or(3), input_size, blocks };
        spec.validate()?;
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &TensorMap {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut TensorMap {
        &mut self.params
    }

    pub fn into_params(self) -> TensorMap {
        self.params
    }

    pub fn eps(&self, block: usize) -> f32 {
        self.params.get(&bn_name(block, "eps")).map_or(BN_EPS, |t| t.data()[0])
    }

    /// Bind the trainable tensors (`trainable = true`) or all of them as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        BoundParams::bind(tape, &self.params, trainable, is_trainable)
    }

    /// Features `[N, feature_dim]` for `x[N, C, H, W]`.
    ///
    /// In train mode the per-block batch statistics are returned for
    /// [`Model::update_running_stats`].
    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: Var, mode: Mode) -> Result<(Var, Vec<BatchStats>)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::Shape(format!("encoder expects [N, {}, H, W], got {shape:?}", self.spec.in_channels)));
        }
        let min = self.spec.min_input_size();
        if shape[2] < min || shape[3] < min {
            return Err(Error::Shape(format!(
                "spatial size {}x{} too small for {} blocks (need at least {min})",
                shape[2],
                shape[3],
                self.spec.blocks.len()
            )));
        }
        let mut h = x;
        let mut stats = Vec::new();
        for i in 0..self.spec.blocks.len() {
            let w = bound.get(&conv_weight_name(i))?;
            let g = bound.get(&bn_name(i, "gamma"))?;
            let b = bound.get(&bn_name(i, "beta"))?;
            let conv = tape.conv2d(h, w, 1, 1)?;
            let rm = self.params[&bn_name(i, "running_mean")].data();
            let rv = self.params[&bn_name(i, "running_var")].data();
            let (bn, st) = tape.batch_norm(conv, g, b, rm, rv, self.eps(i), mode)?;
            stats.extend(st);
            let act = tape.relu(bn);
            h = tape.max_pool2(act)?;
        }
        Ok((tape.global_avg_pool(h)?, stats))
    }

    /// Features for a batch, without recording gradients. Running statistics are not touched.
    pub fn encode(&self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let (f, _) = self.forward(&mut tape, &bound, x, mode)?;
        Ok(tape.value(f).clone())
    }

    /// `running <- (1 - momentum) * running + momentum * batch`, with unbiased batch variance.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        if stats.len() != self.spec.blocks.len() {
            return Err(Error::Shape(format!("{} batch stats for {} blocks", stats.len(), self.spec.blocks.len())));
        }
        for (i, st) in stats.iter().enumerate() {
            for (field, batch) in [("running_mean", &st.mean), ("running_var", &st.var_unbiased)] {
                let t = self.params.get_mut(&bn_name(i, field)).expect("validated model");
                for (r, &b) in t.data_mut().iter_mut().zip(batch.iter()) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
        Ok(())
    }
}

/// He-normal draw: `N(0, 2 / fan_in)` with `fan_in` the product of all but the first dim.
pub fn he_normal(shape: &[usize], rng: &mut impl rand::Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape matches")
}
