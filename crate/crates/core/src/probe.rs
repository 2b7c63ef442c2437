//! Downstream evaluation: linear probe or full fine-tuning on a labelled
//! dataset, plus A/B comparison tables.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::TensorMap;
use crate::datasets::{split_fraction, train_test_split, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::BoundParams;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

pub const TEST_FRACTION: f64 = 0.2;
const CLASSIFIER_W: &str = "classifier.weight";
const CLASSIFIER_B: &str = "classifier.bias";
const ENCODE_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Frozen encoder (eval-mode BN), one trained linear layer.
    Linear,
    /// Encoder and linear layer trained together.
    #[default]
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Share of the training split used per run.
    pub fraction: f64,
    /// Defaults to 3 when `fraction < 1`, else 1.
    pub n_runs: Option<usize>,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            mode: ProbeMode::Finetune,
            epochs: 20,
            batch_size: 32,
            optimizer: OptimizerConfig::finetune_default(),
            fraction: 1.0,
            n_runs: None,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("fraction must be in (0, 1], got {}", self.fraction)));
        }
        if self.n_runs == Some(0) {
            return Err(Error::Config("n_runs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.optimizer.validate()
    }

    /// Runs actually performed: full data leaves nothing to resample, so one.
    pub fn effective_runs(&self) -> usize {
        if self.fraction >= 1.0 {
            1
        } else {
            self.n_runs.unwrap_or(3)
        }
    }
}

/// Identifies the pretraining behind a report row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLabel {
    pub method: String,
    pub init: String,
    pub surgery: String,
}

impl Default for RunLabel {
    fn default() -> Self {
        Self { method: "-".into(), init: "-".into(), surgery: "-".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub label: RunLabel,
    pub mode: ProbeMode,
    pub fraction: f64,
    /// Accuracy of each run, in run order.
    pub runs: Vec<f64>,
    pub mean_accuracy: f64,
    pub n_train: Vec<usize>,
    pub n_test: usize,
    /// Fingerprint of the full dataset the report was computed on.
    pub dataset: String,
}

pub const REPORT_CSV_HEADER: &str = "method,init,surgery,fraction,run,accuracy";

impl ProbeReport {
    pub fn with_label(mut self, label: RunLabel) -> Self {
        self.label = label;
        self
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        self.append_rows(&mut out);
        out
    }

    fn append_rows(&self, out: &mut String) {
        let RunLabel { method, init, surgery } = &self.label;
        for (run, acc) in self.runs.iter().enumerate() {
            let _ = writeln!(out, "{method},{init},{surgery},{},{run},{acc}", self.fraction);
        }
    }
}

/// Accuracy of `encoder` on `dataset` under `config`.
///
/// The dataset is split 80/20 per class from `config.seed`; each run trains
/// on a `fraction` subset of the training split and is scored on the full test split.
pub fn evaluate(encoder: &TensorMap, dataset: &Dataset, config: &ProbeConfig) -> Result<ProbeReport> {
    config.validate()?;
    let (h, w) = dataset.image_size();
    let model = Model::from_tensors(encoder.clone(), h.min(w))?;
    let (train_pool, test) = train_test_split(dataset, TEST_FRACTION, config.seed)?;
    let mut runs = Vec::new();
    let mut n_train = Vec::new();
    for run in 0..config.effective_runs() {
        let train = split_fraction(&train_pool, config.fraction, run, config.seed)?;
        let run_seed = config.seed.wrapping_add(run as u64);
        let acc = match config.mode {
            ProbeMode::Linear => linear_probe(&model, &train, &test, config, run_seed)?,
            ProbeMode::Finetune => finetune(&model, &train, &test, config, run_seed)?,
        };
        runs.push(acc);
        n_train.push(train.len());
    }
    let mean_accuracy = runs.iter().sum::<f64>() / runs.len() as f64;
    Ok(ProbeReport {
        label: RunLabel::default(),
        mode: config.mode,
        fraction: config.fraction,
        runs,
        mean_accuracy,
        n_train,
        n_test: test.len(),
        dataset: dataset.fingerprint(),
    })
}

fn classifier(d: usize, k: usize) -> TensorMap {
    TensorMap::from([
        (CLASSIFIER_W.to_string(), Tensor::zeros(vec![d, k])),
        (CLASSIFIER_B.to_string(), Tensor::zeros(vec![k])),
    ])
}

fn logits(tape: &mut Tape, head: &BoundParams, features: Var) -> Result<Var> {
    let w = head.get(CLASSIFIER_W)?;
    let b = head.get(CLASSIFIER_B)?;
    let z = tape.matmul(features, w, false)?;
    tape.add_row_vector(z, b)
}

fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let k = tape.shape(logits)[1];
    let lp = tape.log_softmax_rows(logits)?;
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * k + y).collect();
    let picked = tape.gather(lp, &idx)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -1.0))
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn accuracy(scores: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels.iter().enumerate().filter(|&(i, &y)| argmax(scores.row(i)) == y).count();
    hits as f64 / labels.len() as f64
}

fn encode_all(model: &Model, data: &Dataset) -> Result<Tensor> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let parts =
        idx.chunks(ENCODE_CHUNK).map(|c| model.encode(&data.batch(c), Mode::Eval)).collect::<Result<Vec<_>>>()?;
    Tensor::stack_rows(&parts)
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn linear_probe(model: &Model, train: &Dataset, test: &Dataset, cfg: &ProbeConfig, seed: u64) -> Result<f64> {
    let train_x = encode_all(model, train)?;
    let test_x = encode_all(model, test)?;
    fit_linear(&train_x, train.labels(), &test_x, test.labels(), train.n_classes(), cfg, seed)
}

/// Train a softmax-regression classifier on `train_x[N, d]` and return its test accuracy.
pub fn fit_linear(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    if train_x.ndim() != 2 || test_x.ndim() != 2 || train_x.shape()[1] != test_x.shape()[1] {
        return Err(Error::Shape(format!("features {:?} and {:?} do not match", train_x.shape(), test_x.shape())));
    }
    if train_x.shape()[0] != train_y.len() || test_x.shape()[0] != test_y.len() {
        return Err(Error::DatasetMismatch("feature and label counts differ".into()));
    }
    if let Some(&bad) = train_y.iter().chain(test_y).find(|&&y| y >= n_classes) {
        return Err(Error::DatasetMismatch(format!("label {bad} out of range for {n_classes} classes")));
    }
    let mut head = classifier(train_x.shape()[1], n_classes);
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.epochs {
        for b in batches(train_y.len(), cfg.batch_size, &mut rng) {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &head, true, |_| true);
            let x = tape.constant(train_x.select(&b)?);
            let z = logits(&mut tape, &bound, x)?;
            let labels: Vec<usize> = b.iter().map(|&i| train_y[i]).collect();
            let loss = cross_entropy(&mut tape, z, &labels)?;
            let grads = tape.backward(loss)?;
            bound.apply(&tape, &grads, &mut head, &mut opt)?;
        }
    }
    let mut tape = Tape::no_grad();
    let bound = BoundParams::bind(&mut tape, &head, false, |_| true);
    let x = tape.constant(test_x.clone());
    let z = logits(&mut tape, &bound, x)?;
    Ok(accuracy(tape.value(z), test_y))
}

fn finetune(model: &Model, train: &Dataset, test: &Dataset, cfg: &ProbeConfig, seed: u64) -> Result<f64> {
    let mut model = model.clone();
    let mut head = classifier(model.spec().feature_dim(), train.n_classes());
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.epochs {
        for b in batches(train.len(), cfg.batch_size, &mut rng) {
            // Batch norm needs more than one sample for batch statistics.
            if b.len() < 2 {
                continue;
            }
            let mut tape = Tape::new();
            let enc = model.bind(&mut tape, true);
            let bound = BoundParams::bind(&mut tape, &head, true, |_| true);
            let x = tape.constant(train.batch(&b));
            let (f, stats) = model.forward(&mut tape, &enc, x, Mode::Train)?;
            let z = logits(&mut tape, &bound, f)?;
            let labels: Vec<usize> = b.iter().map(|&i| train.labels()[i]).collect();
            let loss = cross_entropy(&mut tape, z, &labels)?;
            let grads = tape.backward(loss)?;
            enc.apply(&tape, &grads, model.params_mut(), &mut opt)?;
            bound.apply(&tape, &grads, &mut head, &mut opt)?;
            model.update_running_stats(&stats)?;
        }
    }
    let test_x = encode_all(&model, test)?;
    let mut tape = Tape::no_grad();
    let bound = BoundParams::bind(&mut tape, &head, false, |_| true);
    let x = tape.constant(test_x);
    let z = logits(&mut tape, &bound, x)?;
    Ok(accuracy(tape.value(z), test.labels()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: RunLabel,
    pub fraction: f64,
    pub runs: Vec<f64>,
    pub mean_accuracy: f64,
    /// Mean accuracy minus the baseline's, in percentage points; positive is better.
    pub delta_points: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: usize,
    pub rows: Vec<ComparisonRow>,
}

pub const COMPARISON_CSV_HEADER: &str = "method,init,surgery,fraction,accuracy,delta";

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(COMPARISON_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let RunLabel { method, init, surgery } = &r.label;
            let _ =
                writeln!(out, "{method},{init},{surgery},{},{},{:+.4}", r.fraction, r.mean_accuracy, r.delta_points);
        }
        out
    }
}

/// Accuracy deltas of every report against `reports[baseline]`.
pub fn compare_runs(reports: &[ProbeReport], baseline: usize) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least two reports to compare, got {}", reports.len())));
    }
    let base = reports.get(baseline).ok_or_else(|| {
        Error::InvalidArgument(format!("baseline index {baseline} out of range for {} reports", reports.len()))
    })?;
    for (i, r) in reports.iter().enumerate() {
        if r.dataset != base.dataset {
            return Err(Error::DatasetMismatch(format!(
                "report {i} was computed on dataset {}, the baseline on {}",
                r.dataset, base.dataset
            )));
        }
    }
    let rows = reports
        .iter()
        .map(|r| ComparisonRow {
            label: r.label.clone(),
            fraction: r.fraction,
            runs: r.runs.clone(),
            mean_accuracy: r.mean_accuracy,
            delta_points: 100.0 * (r.mean_accuracy - base.mean_accuracy),
        })
        .collect();
    Ok(Comparison { baseline, rows })
}
