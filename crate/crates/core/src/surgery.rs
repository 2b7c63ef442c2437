//! Checkpoint surgery applied before a second round of pretraining:
//! dead-filter repair followed by Frobenius-norm rescaling of each
//! conv + batch-norm pair, plus a per-layer weight-distribution summary.
//!
//! For a layer with conv-weight Frobenius norm `s > 1` the rescaling is
//!
//! ```text
//! W      <- W / sqrt(s)
//! mean   <- mean / sqrt(s)
//! var    <- var / s^2
//! gamma  <- gamma / sqrt(s)
//! beta   unchanged
//! ```
//!
//! which leaves the eval-mode output of `BN(conv(x))` unchanged up to the
//! `eps` term. [`EpsMode::Exact`] also divides `eps` by `s^2`, making the
//! preservation exact.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::TensorMap;
use crate::error::{Error, Result};
use crate::model::BN_EPS;
use crate::tensor::Tensor;

pub const DEAD_FILTER_THRESHOLD: f32 = 0.1;

const CONV_SUFFIX: &str = ".conv.weight";
const BN_FIELDS: [&str; 4] = ["gamma", "beta", "running_mean", "running_var"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairStrategy {
    /// Leave dead filters alone; only record them.
    #[default]
    Baseline,
    /// Redraw dead filters from He-normal.
    Random,
    /// Overwrite each dead filter with a uniformly chosen live filter of the same layer.
    Copy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsMode {
    /// `eps` kept as is; preservation is approximate.
    #[default]
    Paper,
    /// `eps` divided by `s^2`; preservation is exact.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurgeryOptions {
    #[serde(default)]
    pub strategy: RepairStrategy,
    #[serde(default = "default_threshold")]
    pub threshold: f32,
    #[serde(default)]
    pub eps_mode: EpsMode,
    #[serde(default)]
    pub seed: u64,
}

fn default_threshold() -> f32 {
    DEAD_FILTER_THRESHOLD
}

impl Default for SurgeryOptions {
    fn default() -> Self {
        Self {
            strategy: RepairStrategy::default(),
            threshold: DEAD_FILTER_THRESHOLD,
            eps_mode: EpsMode::Paper,
            seed: 0,
        }
    }
}

/// One conv layer together with the batch norm that follows it.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGroup {
    /// Key prefix, e.g. `block2`.
    pub name: String,
    pub conv_weight: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
}

impl LayerGroup {
    pub fn validate(&self) -> Result<()> {
        let s = self.conv_weight.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("{}: conv weight {s:?} is not 4-D", self.name)));
        }
        for (field, t) in self.bn_tensors() {
            if t.shape() != [s[0]] {
                return Err(Error::Shape(format!(
                    "{}: bn.{field} has shape {:?}, conv has {} filters",
                    self.name,
                    t.shape(),
                    s[0]
                )));
            }
        }
        if self.running_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(format!("{}: negative running variance", self.name)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument(format!("{}: eps must be positive", self.name)));
        }
        Ok(())
    }

    pub fn filters(&self) -> usize {
        self.conv_weight.shape()[0]
    }

    fn filter_len(&self) -> usize {
        self.conv_weight.numel() / self.filters()
    }

    fn bn_tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ]
    }

    /// Frobenius norm of each output filter's `[C, kh, kw]` slice.
    pub fn filter_norms(&self) -> Vec<f32> {
        self.conv_weight
            .data()
            .chunks(self.filter_len())
            .map(|f| f.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt() as f32)
            .collect()
    }
}

/// Frobenius norm over every conv weight of the layer. BN parameters are not included.
pub fn layer_frobenius_norm(layer: &LayerGroup) -> f32 {
    layer.conv_weight.norm()
}

/// Rescale a layer whose conv norm exceeds 1; layers at or below 1 come back unchanged.
///
/// Returns the new layer and the norm `s` that was measured.
pub fn scale_layer(layer: &LayerGroup, eps_mode: EpsMode) -> (LayerGroup, f32) {
    let s = layer_frobenius_norm(layer);
    if !(s > 1.0) {
        return (layer.clone(), s);
    }
    let s64 = s as f64;
    let root = s64.sqrt();
    let div = |t: &Tensor, d: f64| t.map(|v| (v as f64 / d) as f32);
    let mut out = LayerGroup {
        name: layer.name.clone(),
        conv_weight: div(&layer.conv_weight, root),
        gamma: div(&layer.gamma, root),
        beta: layer.beta.clone(),
        running_mean: div(&layer.running_mean, root),
        running_var: div(&layer.running_var, s64 * s64),
        eps: layer.eps,
    };
    if eps_mode == EpsMode::Exact {
        out.eps = (layer.eps as f64 / (s64 * s64)) as f32;
    }
    (out, s)
}

/// What happened to one filter whose norm fell below the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRepair {
    pub index: usize,
    pub norm_before: f32,
    pub norm_after: f32,
    /// Live filter copied over this one (copy strategy only).
    pub source: Option<usize>,
}

/// Replace filters whose norm is below `threshold` according to `strategy`.
///
/// BN per-channel parameters are left untouched. Copy sources are drawn from
/// the filters that were live before any replacement.
pub fn repair_dead_filters(
    layer: &LayerGroup,
    threshold: f32,
    strategy: RepairStrategy,
    rng: &mut impl Rng,
) -> Result<(LayerGroup, Vec<FilterRepair>)> {
    let norms = layer.filter_norms();
    let dead: Vec<usize> = (0..norms.len()).filter(|&i| norms[i] < threshold).collect();
    let live: Vec<usize> = (0..norms.len()).filter(|&i| norms[i] >= threshold).collect();
    let mut out = layer.clone();
    if dead.is_empty() {
        return Ok((out, Vec::new()));
    }
    if strategy == RepairStrategy::Copy && live.is_empty() {
        return Err(Error::NoLiveFilters { layer: layer.name.clone(), threshold });
    }
    let len = layer.filter_len();
    let fan_in = len as f64;
    let std = (2.0 / fan_in).sqrt() as f32;
    let normal = rand_distr::Normal::new(0.0f32, std).expect("positive std");
    let mut records = Vec::with_capacity(dead.len());
    for &i in &dead {
        let mut source = None;
        match strategy {
            RepairStrategy::Baseline => {}
            RepairStrategy::Random => {
                let dst = &mut out.conv_weight.data_mut()[i * len..(i + 1) * len];
                for v in dst.iter_mut() {
                    *v = rng.sample(normal);
                }
            }
            RepairStrategy::Copy => {
                let src = live[rng.random_range(0..live.len())];
                let filter = layer.conv_weight.data()[src * len..(src + 1) * len].to_vec();
                out.conv_weight.data_mut()[i * len..(i + 1) * len].copy_from_slice(&filter);
                source = Some(src);
            }
        }
        records.push(FilterRepair { index: i, norm_before: norms[i], norm_after: 0.0, source });
    }
    let after = out.filter_norms();
    for r in &mut records {
        r.norm_after = after[r.index];
    }
    Ok((out, records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    /// Conv norm `s` measured after repair, before scaling.
    pub frobenius_norm: f32,
    pub scaled: bool,
    /// `sqrt(s)` when scaled, else 1.
    pub scale_divisor: f32,
    pub norm_after: f32,
    pub filter_norms_before: Vec<f32>,
    pub filter_norms_after: Vec<f32>,
    /// Every filter found below the threshold, with what was done to it.
    pub dead_filters: Vec<FilterRepair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurgeryReport {
    pub threshold: f32,
    pub strategy: RepairStrategy,
    pub eps_mode: EpsMode,
    pub seed: u64,
    pub layers: Vec<LayerReport>,
    /// Conv layers with no batch norm attached; passed through untouched.
    pub unpaired_convs: Vec<String>,
}

impl SurgeryReport {
    /// Filters actually overwritten (zero under the baseline strategy).
    pub fn replaced_count(&self) -> usize {
        if self.strategy == RepairStrategy::Baseline {
            return 0;
        }
        self.layers.iter().map(|l| l.dead_filters.len()).sum()
    }

    pub fn dead_count(&self) -> usize {
        self.layers.iter().map(|l| l.dead_filters.len()).sum()
    }

    pub fn scaled_count(&self) -> usize {
        self.layers.iter().filter(|l| l.scaled).count()
    }

    pub fn is_noop(&self) -> bool {
        self.scaled_count() == 0 && self.replaced_count() == 0
    }
}

/// Extract every conv + BN group from a checkpoint, in key order.
///
/// Returns the groups and the names of conv layers without a BN.
pub fn layer_groups(archive: &TensorMap, default_eps: f32) -> Result<(Vec<LayerGroup>, Vec<String>)> {
    let mut groups = Vec::new();
    let mut unpaired = Vec::new();
    let mut claimed = BTreeSet::new();
    for (key, weight) in archive {
        let Some(prefix) = key.strip_suffix(CONV_SUFFIX) else { continue };
        if prefix.is_empty() {
            return Err(Error::Naming(format!("{key:?} has an empty layer prefix")));
        }
        let names: Vec<String> = BN_FIELDS.iter().map(|f| format!("{prefix}.bn.{f}")).collect();
        let present = names.iter().filter(|n| archive.contains_key(*n)).count();
        if present == 0 {
            unpaired.push(prefix.to_string());
            continue;
        }
        if present != names.len() {
            let missing: Vec<&String> = names.iter().filter(|n| !archive.contains_key(*n)).collect();
            return Err(Error::Naming(format!("layer {prefix} has an incomplete batch norm; missing {missing:?}")));
        }
        let eps_key = format!("{prefix}.bn.eps");
        let eps = match archive.get(&eps_key) {
            Some(t) if t.numel() == 1 => t.data()[0],
            Some(t) => return Err(Error::Naming(format!("{eps_key} has shape {:?}, expected [1]", t.shape()))),
            None => default_eps,
        };
        claimed.extend(names.iter().cloned());
        claimed.insert(eps_key);
        let group = LayerGroup {
            name: prefix.to_string(),
            conv_weight: weight.clone(),
            gamma: archive[&names[0]].clone(),
            beta: archive[&names[1]].clone(),
            running_mean: archive[&names[2]].clone(),
            running_var: archive[&names[3]].clone(),
            eps,
        };
        group.validate().map_err(|e| Error::Naming(e.to_string()))?;
        groups.push(group);
    }
    if let Some(orphan) = archive.keys().find(|k| k.contains(".bn.") && !claimed.contains(*k)) {
        return Err(Error::Naming(format!("{orphan:?} has no matching {CONV_SUFFIX}")));
    }
    if groups.is_empty() && unpaired.is_empty() {
        return Err(Error::Naming(format!("no *{CONV_SUFFIX} tensors found")));
    }
    Ok((groups, unpaired))
}

fn write_group(out: &mut TensorMap, g: &LayerGroup, write_eps: bool) {
    out.insert(format!("{}{CONV_SUFFIX}", g.name), g.conv_weight.clone());
    for (field, t) in g.bn_tensors() {
        out.insert(format!("{}.bn.{field}", g.name), t.clone());
    }
    if write_eps {
        out.insert(format!("{}.bn.eps", g.name), Tensor::scalar(g.eps));
    }
}

/// Repair then rescale every conv + BN group of a checkpoint.
///
/// Tensors that belong to no group pass through untouched; each layer draws
/// from its own seed-derived random stream.
pub fn surgery_pipeline(archive: &TensorMap, options: &SurgeryOptions) -> Result<(TensorMap, SurgeryReport)> {
    if !(options.threshold >= 0.0) || !options.threshold.is_finite() {
        return Err(Error::Config(format!("threshold must be a non-negative number, got {}", options.threshold)));
    }
    let (groups, unpaired) = layer_groups(archive, BN_EPS)?;
    let mut out = archive.clone();
    let mut layers = Vec::with_capacity(groups.len());
    for (idx, group) in groups.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        rng.set_stream(idx as u64);
        let filter_norms_before = group.filter_norms();
        let (repaired, dead_filters) = repair_dead_filters(group, options.threshold, options.strategy, &mut rng)?;
        let (scaled, s) = scale_layer(&repaired, options.eps_mode);
        let did_scale = s > 1.0;
        let eps_changed = scaled.eps.to_bits() != group.eps.to_bits();
        let had_eps = archive.contains_key(&format!("{}.bn.eps", group.name));
        write_group(&mut out, &scaled, eps_changed || had_eps);
        layers.push(LayerReport {
            name: group.name.clone(),
            frobenius_norm: s,
            scaled: did_scale,
            scale_divisor: if did_scale { (s as f64).sqrt() as f32 } else { 1.0 },
            norm_after: layer_frobenius_norm(&scaled),
            filter_norms_before,
            filter_norms_after: scaled.filter_norms(),
            dead_filters,
        });
    }
    let report = SurgeryReport {
        threshold: options.threshold,
        strategy: options.strategy,
        eps_mode: options.eps_mode,
        seed: options.seed,
        layers,
        unpaired_convs: unpaired,
    };
    Ok((out, report))
}

/// Per-layer weight statistics, one CSV row per conv + BN group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: String,
    pub conv_fro_norm: f32,
    pub gamma_min: f32,
    pub gamma_max: f32,
    pub gamma_mean: f32,
    pub beta_min: f32,
    pub beta_max: f32,
    pub beta_mean: f32,
    pub rm_mean: f32,
    pub rv_mean: f32,
    pub frac_filters_above_1: f32,
    pub frac_filters_below_0p1: f32,
}

pub const SUMMARY_CSV_HEADER: &str = "layer,conv_fro_norm,gamma_min,gamma_max,gamma_mean,beta_min,beta_max,beta_mean,rm_mean,rv_mean,frac_filters_above_1,frac_filters_below_0p1";

pub fn weight_distribution_summary(archive: &TensorMap) -> Result<Vec<LayerSummary>> {
    let (groups, _) = layer_groups(archive, BN_EPS)?;
    Ok(groups
        .iter()
        .map(|g| {
            let (gamma_min, gamma_max, gamma_mean) = min_max_mean(&g.gamma);
            let (beta_min, beta_max, beta_mean) = min_max_mean(&g.beta);
            let norms = g.filter_norms();
            let frac =
                |pred: &dyn Fn(f32) -> bool| norms.iter().filter(|&&n| pred(n)).count() as f32 / norms.len() as f32;
            LayerSummary {
                layer: g.name.clone(),
                conv_fro_norm: layer_frobenius_norm(g),
                gamma_min,
                gamma_max,
                gamma_mean,
                beta_min,
                beta_max,
                beta_mean,
                rm_mean: min_max_mean(&g.running_mean).2,
                rv_mean: min_max_mean(&g.running_var).2,
                frac_filters_above_1: frac(&|n| n > 1.0),
                frac_filters_below_0p1: frac(&|n| n < DEAD_FILTER_THRESHOLD),
            }
        })
        .collect())
}

pub fn summary_to_csv(rows: &[LayerSummary]) -> String {
    let mut out = String::from(SUMMARY_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.layer,
            r.conv_fro_norm,
            r.gamma_min,
            r.gamma_max,
            r.gamma_mean,
            r.beta_min,
            r.beta_max,
            r.beta_mean,
            r.rm_mean,
            r.rv_mean,
            r.frac_filters_above_1,
            r.frac_filters_below_0p1
        );
    }
    out
}

fn min_max_mean(t: &Tensor) -> (f32, f32, f32) {
    let d = t.data();
    let min = d.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = d.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    (min, max, t.sum() / d.len() as f32)
}
