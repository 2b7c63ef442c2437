//! Self-supervised pretraining runs: from scratch or from an existing
//! encoder checkpoint, optionally after weight surgery.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{read_archive, write_archive, TensorMap};
use crate::augment::{augment_view, view_rng, AugmentPolicy, MAX_VIEWS};
use crate::contrastive::{
    byol_loss, ema_update, normalize_rows, nt_xent_loss, swav_loss, MlpHead, PrototypeBank, SwavParams, PREDICTOR,
    PROJECTOR, PROTOTYPES,
};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::BoundParams;
use crate::surgery::{surgery_pipeline, EpsMode, RepairStrategy, SurgeryOptions, SurgeryReport, DEAD_FILTER_THRESHOLD};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

pub const ENCODER_FILE: &str = "encoder.safetensors";
pub const HEADS_FILE: &str = "heads.safetensors";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const SURGERY_REPORT_FILE: &str = "surgery_report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Simclr,
    Swav,
    Byol,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Simclr, Method::Swav, Method::Byol];

    pub fn name(self) -> &'static str {
        match self {
            Method::Simclr => "simclr",
            Method::Swav => "swav",
            Method::Byol => "byol",
        }
    }
}

/// Where the encoder weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Fresh He-normal weights for `PretrainConfig::model`.
    Random,
    /// An encoder archive written by an earlier run.
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurgeryMode {
    #[default]
    Off,
    Paper,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurgeryConfig {
    #[serde(default)]
    pub mode: SurgeryMode,
    #[serde(default)]
    pub strategy: RepairStrategy,
    #[serde(default = "default_threshold")]
    pub threshold: f32,
}

fn default_threshold() -> f32 {
    DEAD_FILTER_THRESHOLD
}

impl Default for SurgeryConfig {
    fn default() -> Self {
        Self { mode: SurgeryMode::Off, strategy: RepairStrategy::Baseline, threshold: DEAD_FILTER_THRESHOLD }
    }
}

impl SurgeryConfig {
    pub fn enabled(&self) -> bool {
        self.mode != SurgeryMode::Off
    }

    pub fn options(&self, seed: u64) -> Option<SurgeryOptions> {
        let eps_mode = match self.mode {
            SurgeryMode::Off => return None,
            SurgeryMode::Paper => EpsMode::Paper,
            SurgeryMode::Exact => EpsMode::Exact,
        };
        Some(SurgeryOptions { strategy: self.strategy, threshold: self.threshold, eps_mode, seed })
    }

    /// Short tag used in report rows.
    pub fn label(&self) -> String {
        match self.mode {
            SurgeryMode::Off => "off".into(),
            SurgeryMode::Paper => format!("paper-{}", strategy_name(self.strategy)),
            SurgeryMode::Exact => format!("exact-{}", strategy_name(self.strategy)),
        }
    }
}

fn strategy_name(s: RepairStrategy) -> &'static str {
    match s {
        RepairStrategy::Baseline => "baseline",
        RepairStrategy::Random => "random",
        RepairStrategy::Copy => "copy",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub method: Method,
    pub init: Init,
    pub surgery: SurgeryConfig,
    /// Encoder layout for random init; ignored when loading a checkpoint.
    pub model: ModelSpec,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub batch_size: usize,
    /// Output side of the two global views.
    pub crop_size: usize,
    /// Augmentation of the global views; its `output_size` is replaced by `crop_size`.
    pub augment: AugmentPolicy,
    /// Extra small crops, SwaV only.
    pub local_crops: usize,
    pub local_crop_size: usize,
    pub optimizer: OptimizerConfig,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    /// NT-Xent temperature.
    pub temperature: f32,
    pub n_prototypes: usize,
    pub swav: SwavParams,
    /// BYOL target EMA momentum.
    pub ema_momentum: f32,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Simclr,
            init: Init::Random,
            surgery: SurgeryConfig::default(),
            model: ModelSpec::default(),
            epochs: 10,
            iters_per_epoch: 50,
            batch_size: 64,
            crop_size: 32,
            augment: AugmentPolicy::default(),
            local_crops: 0,
            local_crop_size: 16,
            optimizer: OptimizerConfig::adam(1e-3, 1e-5),
            proj_hidden: 64,
            proj_dim: 32,
            temperature: 0.5,
            n_prototypes: 16,
            swav: SwavParams::default(),
            ema_momentum: 0.99,
            seed: 0,
            output_dir: None,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters_per_epoch == 0 {
            return Err(Error::Config("iters_per_epoch must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.proj_hidden == 0 || self.proj_dim == 0 {
            return Err(Error::Config("projection sizes must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.n_prototypes < 2 {
            return Err(Error::Config(format!("n_prototypes must be at least 2, got {}", self.n_prototypes)));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!("ema_momentum must be in [0, 1], got {}", self.ema_momentum)));
        }
        if self.local_crops + 2 > MAX_VIEWS {
            return Err(Error::Config(format!("local_crops must be at most {}", MAX_VIEWS - 2)));
        }
        if self.local_crops > 0 && self.method != Method::Swav {
            return Err(Error::Config("local_crops is only used by swav".into()));
        }
        if let Init::Checkpoint(path) = &self.init {
            if !path.is_file() {
                return Err(Error::Config(format!("init checkpoint {} does not exist", path.display())));
            }
        }
        self.global_policy().validate()?;
        if self.local_crops > 0 {
            self.local_policy().validate()?;
        }
        self.optimizer.validate()?;
        if let Init::Random = self.init {
            self.model.validate()?;
        }
        Ok(())
    }

    pub fn global_policy(&self) -> AugmentPolicy {
        AugmentPolicy { output_size: self.crop_size, ..self.augment.clone() }
    }

    pub fn local_policy(&self) -> AugmentPolicy {
        AugmentPolicy::local(self.local_crop_size)
    }
}

/// Epochs at 10, 30, 60 and 100 percent of the budget, rounded up and deduplicated.
pub fn checkpoint_schedule(epochs: usize) -> Vec<usize> {
    let mut out: Vec<usize> = [10, 30, 60, 100].iter().map(|p| (epochs * p).div_ceil(100)).filter(|&e| e > 0).collect();
    out.dedup();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Mean loss over the epoch's iterations.
    pub loss: f64,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: Option<Method>,
    pub epochs: Vec<EpochMetrics>,
    pub checkpoint_epochs: Vec<usize>,
    pub final_checkpoint: Option<PathBuf>,
}

impl RunMetrics {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{}", e.epoch, e.loss, e.seconds);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub encoder: Model,
    /// Projection/prediction heads and prototypes, kept apart from the encoder.
    pub heads: TensorMap,
    pub metrics: RunMetrics,
    pub surgery: Option<SurgeryReport>,
}

impl PretrainOutput {
    /// Write encoder, heads, metrics and any surgery report into `dir`.
    pub fn save(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let encoder_path = dir.join(ENCODER_FILE);
        write_archive(&encoder_path, self.encoder.params())?;
        if !self.heads.is_empty() {
            write_archive(dir.join(HEADS_FILE), &self.heads)?;
        }
        self.metrics.final_checkpoint = Some(encoder_path);
        fs::write(dir.join(METRICS_CSV), self.metrics.to_csv())?;
        fs::write(dir.join(METRICS_JSON), serde_json::to_string_pretty(&self.metrics)?)?;
        if let Some(report) = &self.surgery {
            fs::write(dir.join(SURGERY_REPORT_FILE), serde_json::to_string_pretty(report)?)?;
        }
        Ok(())
    }
}

/// Load or build the starting encoder and apply configured surgery.
pub fn initial_encoder(config: &PretrainConfig) -> Result<(Model, Option<SurgeryReport>)> {
    let params = match &config.init {
        Init::Random => Model::build(config.model.clone(), config.seed)?.into_params(),
        Init::Checkpoint(path) => read_archive(path)?,
    };
    prepare_encoder(params, config)
}

fn prepare_encoder(params: TensorMap, config: &PretrainConfig) -> Result<(Model, Option<SurgeryReport>)> {
    let (params, report) = match config.surgery.options(config.seed) {
        Some(opts) => {
            let (p, r) = surgery_pipeline(&params, &opts)?;
            (p, Some(r))
        }
        None => (params, None),
    };
    Ok((Model::from_tensors(params, config.crop_size)?, report))
}

/// Run pretraining on `dataset`.
pub fn run_pretrain(config: &PretrainConfig, dataset: &Dataset) -> Result<PretrainOutput> {
    run_pretrain_observed(config, dataset, |_, _| Ok(None))
}

/// Like [`run_pretrain`], calling `observer(epoch, encoder)` at every
/// [`checkpoint_schedule`] epoch; a returned accuracy is stored in the metrics.
pub fn run_pretrain_observed(
    config: &PretrainConfig,
    dataset: &Dataset,
    observer: impl FnMut(usize, &Model) -> Result<Option<f64>>,
) -> Result<PretrainOutput> {
    config.validate()?;
    let (encoder, report) = initial_encoder(config)?;
    train(config, dataset, encoder, report, observer)
}

/// Pretrain starting from in-memory encoder weights (surgery still applies).
pub fn run_pretrain_from(
    config: &PretrainConfig,
    dataset: &Dataset,
    init: TensorMap,
    observer: impl FnMut(usize, &Model) -> Result<Option<f64>>,
) -> Result<PretrainOutput> {
    let probe = PretrainConfig { init: Init::Random, ..config.clone() };
    probe.validate()?;
    let (encoder, report) = prepare_encoder(init, config)?;
    train(config, dataset, encoder, report, observer)
}

fn train(
    config: &PretrainConfig,
    dataset: &Dataset,
    encoder: Model,
    report: Option<SurgeryReport>,
    mut observer: impl FnMut(usize, &Model) -> Result<Option<f64>>,
) -> Result<PretrainOutput> {
    if config.batch_size > dataset.len() {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {} images in the dataset",
            config.batch_size,
            dataset.len()
        )));
    }
    let mut trainer = Trainer::new(config, dataset, encoder)?;
    let schedule = checkpoint_schedule(config.epochs);
    let mut metrics =
        RunMetrics { method: Some(config.method), checkpoint_epochs: schedule.clone(), ..RunMetrics::default() };
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut total = 0.0f64;
        for iter in 0..config.iters_per_epoch {
            let loss = trainer.step()?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, iteration: iter, loss });
            }
            total += loss as f64;
        }
        if trainer.encoder.params().values().any(|t| !t.is_finite()) {
            return Err(Error::Divergence { epoch, iteration: config.iters_per_epoch, loss: f32::NAN });
        }
        let probe_accuracy = if schedule.contains(&epoch) { observer(epoch, &trainer.encoder)? } else { None };
        metrics.epochs.push(EpochMetrics {
            epoch,
            loss: total / config.iters_per_epoch as f64,
            seconds: start.elapsed().as_secs_f64(),
            probe_accuracy,
        });
    }
    Ok(PretrainOutput { encoder: trainer.encoder, heads: trainer.heads, metrics, surgery: report })
}

struct Trainer<'a> {
    config: &'a PretrainConfig,
    dataset: &'a Dataset,
    encoder: Model,
    heads: TensorMap,
    target: Option<(Model, TensorMap)>,
    optimizer: Optimizer,
    sampler: ChaCha8Rng,
    global: AugmentPolicy,
    local: AugmentPolicy,
    step: u64,
}

impl<'a> Trainer<'a> {
    fn new(config: &'a PretrainConfig, dataset: &'a Dataset, encoder: Model) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let feat = encoder.spec().feature_dim();
        let mut heads = TensorMap::new();
        MlpHead::new(PROJECTOR, feat, config.proj_hidden, config.proj_dim, &mut rng).insert_into(&mut heads);
        match config.method {
            Method::Simclr => {}
            Method::Swav => {
                let bank = PrototypeBank::new(config.n_prototypes, config.proj_dim, &mut rng)?;
                heads.insert(PROTOTYPES.to_string(), bank.weights);
            }
            Method::Byol => {
                MlpHead::new(PREDICTOR, config.proj_dim, config.proj_hidden, config.proj_dim, &mut rng)
                    .insert_into(&mut heads);
            }
        }
        let target = (config.method == Method::Byol).then(|| (encoder.clone(), projector_only(&heads)));
        let mut sampler = ChaCha8Rng::seed_from_u64(config.seed);
        sampler.set_stream(2);
        Ok(Self {
            config,
            dataset,
            encoder,
            heads,
            target,
            optimizer: Optimizer::new(config.optimizer)?,
            sampler,
            global: config.global_policy(),
            local: config.local_policy(),
            step: 0,
        })
    }

    /// Stack view `view` of every sampled image.
    fn views(&self, indices: &[usize], view: usize, policy: &AugmentPolicy) -> Result<Tensor> {
        let n = indices.len() as u64;
        let mut parts = Vec::with_capacity(indices.len());
        for (j, &i) in indices.iter().enumerate() {
            let key = self.step * n + j as u64;
            let mut rng = view_rng(self.config.seed, key, view);
            parts.push(augment_view(&self.dataset.image(i), policy, &mut rng)?);
        }
        Tensor::stack(&parts)
    }

    fn step(&mut self) -> Result<f32> {
        let cfg = self.config;
        let n = cfg.batch_size;
        let indices = sample(&mut self.sampler, self.dataset.len(), n).into_vec();
        let pair =
            Tensor::stack_rows(&[self.views(&indices, 0, &self.global)?, self.views(&indices, 1, &self.global)?])?;

        let mut tape = Tape::new();
        let enc = self.encoder.bind(&mut tape, true);
        let heads = BoundParams::bind(&mut tape, &self.heads, true, |_| true);
        let x = tape.constant(pair.clone());
        let (feat, stats) = self.encoder.forward(&mut tape, &enc, x, Mode::Train)?;
        let z = MlpHead::forward(&mut tape, &heads, PROJECTOR, feat)?;

        let loss = match cfg.method {
            Method::Simclr => {
                let partners: Vec<usize> = (0..2 * n).map(|i| (i + n) % (2 * n)).collect();
                nt_xent_loss(&mut tape, z, &partners, cfg.temperature)?
            }
            Method::Swav => {
                let zn = tape.l2_normalize_rows(z)?;
                let mut views = vec![take_rows(&mut tape, zn, 0, n)?, take_rows(&mut tape, zn, n, n)?];
                for v in 0..cfg.local_crops {
                    let batch = self.views(&indices, 2 + v, &self.local)?;
                    let xl = tape.constant(batch);
                    let (fl, _) = self.encoder.forward(&mut tape, &enc, xl, Mode::Train)?;
                    let zl = MlpHead::forward(&mut tape, &heads, PROJECTOR, fl)?;
                    views.push(tape.l2_normalize_rows(zl)?);
                }
                swav_loss(&mut tape, &views, heads.get(PROTOTYPES)?, &cfg.swav)?
            }
            Method::Byol => {
                let (target_enc, target_proj) = self.target.as_ref().expect("byol target");
                let t = target_projection(target_enc, target_proj, &pair)?;
                let online = [take_rows(&mut tape, z, 0, n)?, take_rows(&mut tape, z, n, n)?];
                let t0 = tape.constant(t.select(&(0..n).collect::<Vec<_>>())?);
                let t1 = tape.constant(t.select(&(n..2 * n).collect::<Vec<_>>())?);
                byol_loss(&mut tape, &heads, PREDICTOR, online, [t0, t1])?
            }
        };
        let loss_value = tape.value(loss).item()?;
        self.step += 1;
        if !loss_value.is_finite() {
            return Ok(loss_value);
        }
        let grads = tape.backward(loss)?;
        enc.apply(&tape, &grads, self.encoder.params_mut(), &mut self.optimizer)?;
        heads.apply(&tape, &grads, &mut self.heads, &mut self.optimizer)?;
        self.encoder.update_running_stats(&stats)?;
        match cfg.method {
            Method::Simclr => {}
            Method::Swav => normalize_rows(self.heads.get_mut(PROTOTYPES).expect("prototypes"))?,
            Method::Byol => {
                let (target_enc, target_proj) = self.target.as_mut().expect("byol target");
                ema_update(target_enc.params_mut(), self.encoder.params(), cfg.ema_momentum)?;
                ema_update(target_proj, &projector_only(&self.heads), cfg.ema_momentum)?;
            }
        }
        Ok(loss_value)
    }
}

fn projector_only(heads: &TensorMap) -> TensorMap {
    [MlpHead::w1_name(PROJECTOR), MlpHead::w2_name(PROJECTOR)]
        .into_iter()
        .filter_map(|k| heads.get(&k).map(|t| (k, t.clone())))
        .collect()
}

/// Target-network projections of `batch`, computed without gradients.
fn target_projection(encoder: &Model, projector: &TensorMap, batch: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let enc = encoder.bind(&mut tape, false);
    let proj = BoundParams::bind(&mut tape, projector, false, |_| true);
    let x = tape.constant(batch.clone());
    let (f, _) = encoder.forward(&mut tape, &enc, x, Mode::Train)?;
    let z = MlpHead::forward(&mut tape, &proj, PROJECTOR, f)?;
    Ok(tape.value(z).clone())
}

/// Rows `start..start + count` of a 2-D var.
fn take_rows(tape: &mut Tape, x: Var, start: usize, count: usize) -> Result<Var> {
    let cols = tape.shape(x)[1];
    let idx: Vec<usize> = (start * cols..(start + count) * cols).collect();
    let flat = tape.gather(x, &idx)?;
    tape.reshape(flat, &[count, cols])
}
