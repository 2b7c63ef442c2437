//! `reprime` command-line tool.
//!
//! Data goes to stdout, diagnostics to stderr. Exit codes: 0 success,
//! 1 runtime failure, 2 invalid input or configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use reprime::archive::{read_archive, write_archive};
use reprime::datasets::{generate_synthetic, Dataset, SyntheticSpec};
use reprime::pretrain::{run_pretrain, Init, PretrainConfig, SurgeryConfig};
use reprime::probe::{compare_runs, evaluate, ProbeConfig, ProbeReport, RunLabel};
use reprime::surgery::{
    summary_to_csv, surgery_pipeline, weight_distribution_summary, EpsMode, LayerSummary, RepairStrategy,
    SurgeryOptions,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;

const SEED_ENV: &str = "REPRIME_SEED";
const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
const PROBE_REPORT_JSON: &str = "probe_report.json";
const PROBE_REPORT_CSV: &str = "probe_report.csv";

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<reprime::Error> for CliError {
    fn from(e: reprime::Error) -> Self {
        use reprime::Error as E;
        match e {
            E::Divergence { .. } | E::NoLiveFilters { .. } | E::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<reprime::archive::ArchiveError> for CliError {
    fn from(e: reprime::archive::ArchiveError) -> Self {
        reprime::Error::from(e).into()
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "reprime", version, about = "Two-step self-supervised pretraining with weight surgery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer weight statistics of a checkpoint.
    Inspect {
        checkpoint: PathBuf,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Repair dead filters and rescale every conv + BN layer of a checkpoint.
    Surgery {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = StrategyArg::Baseline)]
        strategy: StrategyArg,
        #[arg(long, default_value_t = reprime::surgery::DEAD_FILTER_THRESHOLD)]
        threshold: f32,
        #[arg(long, value_enum, default_value_t = EpsArg::Paper)]
        eps_mode: EpsArg,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        /// Overwrite an existing output archive.
        #[arg(long)]
        force: bool,
    },
    /// Self-supervised pretraining described by an experiment file.
    Pretrain { experiment: PathBuf },
    /// Fine-tune or linear evaluation described by an experiment file.
    Probe { experiment: PathBuf },
    /// Generate a synthetic dataset archive.
    GenData {
        #[arg(long, default_value = "target")]
        preset: String,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        images_per_class: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy deltas between probe reports, in percentage points.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        /// Index of the report the others are compared against.
        #[arg(long, default_value_t = 0)]
        baseline: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Baseline,
    Random,
    Copy,
}

#[derive(Clone, Copy, ValueEnum)]
enum EpsArg {
    Paper,
    Exact,
}

/// Where an experiment's images come from; exactly one field must be set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spec: Option<SyntheticSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    dataset: DatasetSection,
    #[serde(default)]
    pretrain: Option<PretrainConfig>,
    /// Shorthand for `pretrain.surgery`.
    #[serde(default)]
    surgery: Option<SurgeryConfig>,
    #[serde(default)]
    probe: Option<ProbeConfig>,
    /// Encoder to evaluate; defaults to the pretraining output.
    #[serde(default)]
    encoder: Option<PathBuf>,
    /// Row label for probe reports; derived from the pretraining setup when absent.
    #[serde(default)]
    label: Option<RunLabel>,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    /// Seed for every section that does not set its own.
    #[serde(default)]
    seed: Option<u64>,
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Input(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn has_key(raw: &Value, section: &str, key: &str) -> bool {
    raw.get(section).and_then(|s| s.get(key)).is_some()
}

/// Parse, check and fill in an experiment file.
fn load_experiment(path: &Path) -> CliResult<ExperimentFile> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let raw: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: invalid JSON: {e}", path.display())))?;
    let mut exp: ExperimentFile = serde_path_to_error::deserialize(raw.clone())
        .map_err(|e| CliError::Input(format!("{}: at `{}`: {}", path.display(), e.path(), e.inner())))?;

    let seed = match exp.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    exp.seed = Some(seed);
    if let Some(p) = exp.pretrain.as_mut() {
        if !has_key(&raw, "pretrain", "seed") {
            p.seed = seed;
        }
        if let Some(s) = exp.surgery.take() {
            if has_key(&raw, "pretrain", "surgery") {
                return Err(CliError::Input("`surgery` is set both at top level and in `pretrain`".into()));
            }
            p.surgery = s;
        }
        match (&exp.output_dir, &p.output_dir) {
            (Some(a), Some(b)) if a != b => {
                return Err(CliError::Input("`output_dir` and `pretrain.output_dir` disagree".into()));
            }
            (None, Some(b)) => exp.output_dir = Some(b.clone()),
            _ => {}
        }
        p.output_dir = exp.output_dir.clone();
        p.validate()?;
    } else if exp.surgery.is_some() {
        return Err(CliError::Input("`surgery` needs a `pretrain` section".into()));
    }
    if let Some(p) = exp.probe.as_mut() {
        if !has_key(&raw, "probe", "seed") {
            p.seed = seed;
        }
        p.validate()?;
    }
    let d = &mut exp.dataset;
    let sources = [d.preset.is_some(), d.spec.is_some(), d.path.is_some()].iter().filter(|&&b| b).count();
    if sources != 1 {
        return Err(CliError::Input("`dataset` needs exactly one of `preset`, `spec` or `path`".into()));
    }
    if d.preset.is_some() && d.seed.is_none() {
        d.seed = Some(seed);
    }
    if d.seed.is_some() && d.preset.is_none() {
        return Err(CliError::Input("`dataset.seed` only applies to `dataset.preset`".into()));
    }
    Ok(exp)
}

fn load_dataset(section: &DatasetSection) -> CliResult<Dataset> {
    if let Some(path) = &section.path {
        return Ok(Dataset::load(path)?);
    }
    let spec = match (&section.preset, &section.spec) {
        (Some(name), _) => SyntheticSpec::preset(name, section.seed.unwrap_or(0))?,
        (None, Some(spec)) => spec.clone(),
        (None, None) => unreachable!("validated in load_experiment"),
    };
    spec.validate()?;
    Ok(generate_synthetic(&spec)?)
}

fn output_dir(exp: &ExperimentFile) -> CliResult<PathBuf> {
    exp.output_dir.clone().ok_or_else(|| CliError::Input("experiment needs an `output_dir`".into()))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn summary_table(rows: &[LayerSummary]) -> String {
    let mut out = format!(
        "{:<10} {:>10} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "layer", "fro_norm", "γ mean", "β mean", "μ mean", "σ² mean", "γ min", ">1", "<0.1"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<10} {:>10.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.3} {:>8.3}",
            r.layer,
            r.conv_fro_norm,
            r.gamma_mean,
            r.beta_mean,
            r.rm_mean,
            r.rv_mean,
            r.gamma_min,
            r.frac_filters_above_1,
            r.frac_filters_below_0p1
        );
    }
    out
}

fn cmd_inspect(checkpoint: &Path, csv: Option<&Path>) -> CliResult<()> {
    let archive = read_archive(checkpoint)?;
    let rows = weight_distribution_summary(&archive)?;
    print!("{}", summary_table(&rows));
    if let Some(path) = csv {
        write_text(path, &summary_to_csv(&rows))?;
    }
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn cmd_surgery(input: &Path, output: &Path, options: SurgeryOptions, force: bool) -> CliResult<()> {
    if output.exists() && !force {
        return Err(CliError::Input(format!("{} exists; pass --force to overwrite", output.display())));
    }
    let archive = read_archive(input)?;
    let (out, report) = surgery_pipeline(&archive, &options)?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    write_archive(output, &out)?;
    let report_path = sibling(output, ".report.json");
    write_json(&report_path, &report)?;
    write_json(&sibling(output, ".config.json"), &serde_json::json!({ "input": input, "options": options }))?;
    println!(
        "layers={} scaled={} dead={} replaced={} noop={} report={}",
        report.layers.len(),
        report.scaled_count(),
        report.dead_count(),
        report.replaced_count(),
        report.is_noop(),
        report_path.display()
    );
    Ok(())
}

fn cmd_pretrain(path: &Path) -> CliResult<()> {
    let exp = load_experiment(path)?;
    let cfg = exp.pretrain.clone().ok_or_else(|| CliError::Input("experiment has no `pretrain` section".into()))?;
    let dir = output_dir(&exp)?;
    let dataset = load_dataset(&exp.dataset)?;
    write_json(&dir.join(RESOLVED_CONFIG_FILE), &exp)?;
    eprintln!("pretraining {} for {} epochs on {} images", cfg.method.name(), cfg.epochs, dataset.len());
    let mut out = run_pretrain(&cfg, &dataset)?;
    out.save(&dir)?;
    print!("{}", out.metrics.to_csv());
    Ok(())
}

fn derived_label(exp: &ExperimentFile) -> RunLabel {
    match &exp.pretrain {
        Some(p) => RunLabel {
            method: p.method.name().into(),
            init: match p.init {
                Init::Random => "p1x".into(),
                Init::Checkpoint(_) => "p2x".into(),
            },
            surgery: p.surgery.label(),
        },
        None => RunLabel::default(),
    }
}

fn cmd_probe(path: &Path) -> CliResult<()> {
    let exp = load_experiment(path)?;
    let cfg = exp.probe.clone().ok_or_else(|| CliError::Input("experiment has no `probe` section".into()))?;
    let dir = output_dir(&exp)?;
    let encoder_path = match &exp.encoder {
        Some(p) => p.clone(),
        None => dir.join(reprime::pretrain::ENCODER_FILE),
    };
    let encoder = read_archive(&encoder_path)?;
    let dataset = load_dataset(&exp.dataset)?;
    let label = exp.label.clone().unwrap_or_else(|| derived_label(&exp));
    let resolved = ExperimentFile { encoder: Some(encoder_path), label: Some(label.clone()), ..exp };
    write_json(&dir.join("resolved_probe_config.json"), &resolved)?;
    let report = evaluate(&encoder, &dataset, &cfg)?.with_label(label);
    write_json(&dir.join(PROBE_REPORT_JSON), &report)?;
    write_text(&dir.join(PROBE_REPORT_CSV), &report.to_csv())?;
    print!("{}", report.to_csv());
    eprintln!("mean accuracy {:.4} over {} run(s)", report.mean_accuracy, report.runs.len());
    Ok(())
}

fn cmd_gen_data(preset: &str, seed: u64, per_class: Option<usize>, size: Option<usize>, out: &Path) -> CliResult<()> {
    let mut spec = SyntheticSpec::preset(preset, seed)?;
    if let Some(n) = per_class {
        spec.images_per_class = n;
    }
    if let Some(s) = size {
        spec.image_size = s;
    }
    spec.validate()?;
    let ds = generate_synthetic(&spec)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    ds.save(out)?;
    write_json(&sibling(out, ".config.json"), &spec)?;
    println!("images={} classes={} fingerprint={}", ds.len(), ds.n_classes(), ds.fingerprint());
    Ok(())
}

fn cmd_compare(paths: &[PathBuf], baseline: usize, csv: Option<&Path>) -> CliResult<()> {
    let reports = paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<ProbeReport>(&text)
                .map_err(|e| CliError::Input(format!("{}: not a probe report: {e}", p.display())))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let cmp = compare_runs(&reports, baseline)?;
    let table = cmp.to_csv();
    if let Some(path) = csv {
        write_text(path, &table)?;
    }
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Inspect { checkpoint, csv } => cmd_inspect(&checkpoint, csv.as_deref()),
        Command::Surgery { input, output, strategy, threshold, eps_mode, seed, force } => {
            let options = SurgeryOptions {
                strategy: match strategy {
                    StrategyArg::Baseline => RepairStrategy::Baseline,
                    StrategyArg::Random => RepairStrategy::Random,
                    StrategyArg::Copy => RepairStrategy::Copy,
                },
                threshold,
                eps_mode: match eps_mode {
                    EpsArg::Paper => EpsMode::Paper,
                    EpsArg::Exact => EpsMode::Exact,
                },
                seed,
            };
            cmd_surgery(&input, &output, options, force)
        }
        Command::Pretrain { experiment } => cmd_pretrain(&experiment),
        Command::Probe { experiment } => cmd_probe(&experiment),
        Command::GenData { preset, seed, images_per_class, image_size, out } => {
            cmd_gen_data(&preset, seed, images_per_class, image_size, &out)
        }
        Command::Compare { reports, baseline, csv } => cmd_compare(&reports, baseline, csv.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
