//! Command-line front end: `generate`, `identify`, `evaluate`, `sweep-noise`.
//!
//! Settings come from built-in defaults, then the `--config` file, then
//! explicit flags. Every random stream is derived from the run seed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{derive_seed, DataSource, Method, RunConfig, SeedPurpose};
use crate::dataset::{fmt_f64, inject_noise, load_timeseries, ChannelNames, NoiseSpec, Schema, TimeSeries};
use crate::ensemble::{bagging_mean, basic_fit, run_ensemble, CandidateMetrics, EnsembleReport, IdentificationProblem};
use crate::error::{Error, Result};
use crate::model_file::{ModelFile, Provenance};
use crate::plants::{generate, plant_by_name, ExcitationKind};
use crate::simulate::{evaluate_series, SindyModel};

#[derive(Debug, Parser)]
#[command(
    name = "esindy",
    version,
    about = "Sparse identification of nonlinear difference equations with inputs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a built-in plant under random excitation and write a CSV.
    Generate(GenerateArgs),
    /// Identify a model and write the model file and a JSON report.
    Identify(IdentifyArgs),
    /// Score a saved model on a data file.
    Evaluate(EvaluateArgs),
    /// Repeat identification over several noise levels.
    SweepNoise(SweepArgs),
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub plant: Option<String>,
    /// Number of samples.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, value_enum)]
    pub excitation: Option<ExcitationArg>,
    /// Output CSV (default: <out-dir>/data.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ExcitationArg {
    Steps,
    FilteredRandom,
}

impl From<ExcitationArg> for ExcitationKind {
    fn from(a: ExcitationArg) -> Self {
        match a {
            ExcitationArg::Steps => ExcitationKind::Steps,
            ExcitationArg::FilteredRandom => ExcitationKind::FilteredRandom,
        }
    }
}

#[derive(Debug, Args, Default)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// Training CSV; switches the data source to `file`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Separate record for the long-term score.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// State columns (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub states: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub controls: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub exogenous: Option<Vec<String>>,
    #[arg(long)]
    pub sample_period: Option<f64>,
    #[arg(long)]
    pub sigma_x: Option<usize>,
    /// Threshold of the basic method.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Initial threshold of the ensemble methods.
    #[arg(long)]
    pub lambda_init: Option<f64>,
    #[arg(long)]
    pub target_elites: Option<usize>,
    #[arg(long)]
    pub r2_gate: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub k_clusters: Option<usize>,
    /// Evaluate bagging iterations on one thread.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Args)]
pub struct IdentifyArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Relative noise level applied to the training states.
    #[arg(long)]
    pub eta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Noise levels (comma separated).
    #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
    pub eta: Vec<f64>,
    /// Output CSV (default: <out-dir>/sweep.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Default, PartialEq, Eq)]
pub enum HorizonMode {
    OneStep,
    #[default]
    MultiStep,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Which prediction goes into the trajectory CSV.
    #[arg(long, value_enum, default_value = "multi-step")]
    pub horizon: HorizonMode,
    /// Metrics JSON (default: stdout only).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Trajectory CSV with truth and prediction per channel.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
}

fn base_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::Io { path, source } => Error::Config(format!("cannot read {}: {source}", path.display())),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.out_dir {
        cfg.output.dir = dir.clone();
    }
    Ok(cfg)
}

/// Layers the flags over the config file.
pub fn resolve_pipeline_config(args: &PipelineArgs) -> Result<RunConfig> {
    let mut cfg = base_config(&args.common)?;
    if let Some(m) = args.method {
        cfg.method = m;
    }
    if let Some(path) = &args.data {
        cfg.data.source = DataSource::File;
        cfg.data.file = Some(path.clone());
    }
    if let Some(path) = &args.validation {
        cfg.data.validation_file = Some(path.clone());
    }
    if args.states.is_some() || args.controls.is_some() || args.exogenous.is_some() || args.sample_period.is_some() {
        let mut schema = cfg.schema.clone().unwrap_or(Schema {
            states: Vec::new(),
            controls: Vec::new(),
            exogenous: Vec::new(),
            sample_period: 0.1,
        });
        if let Some(v) = &args.states {
            schema.states = v.clone();
        }
        if let Some(v) = &args.controls {
            schema.controls = v.clone();
        }
        if let Some(v) = &args.exogenous {
            schema.exogenous = v.clone();
        }
        if let Some(p) = args.sample_period {
            schema.sample_period = p;
        }
        cfg.schema = Some(schema);
    }
    if let Some(s) = args.sigma_x {
        cfg.library.sigma_x = s;
    }
    if let Some(l) = args.lambda {
        cfg.stls.lambda = l;
    }
    if let Some(l) = args.lambda_init {
        cfg.ensemble.lambda_init = l;
    }
    if let Some(t) = args.target_elites {
        cfg.ensemble.target_elites = t;
    }
    if let Some(g) = args.r2_gate {
        cfg.ensemble.r2_gate = g;
    }
    if let Some(m) = args.max_iterations {
        cfg.ensemble.max_iterations = m;
    }
    if let Some(k) = args.k_clusters {
        cfg.ensemble.k_clusters = k;
    }
    if args.sequential {
        cfg.ensemble.parallel = false;
    }
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// Training record before noise, plus the optional validation record.
pub fn load_data(cfg: &RunConfig) -> Result<(TimeSeries, Option<TimeSeries>)> {
    match cfg.data.source {
        DataSource::Plant => {
            let plant = plant_by_name(&cfg.data.plant)?;
            let seed = derive_seed(cfg.seed, SeedPurpose::Excitation, 0);
            let train = generate(&plant, cfg.data.excitation, cfg.data.horizon, seed)?;
            let validation = match &cfg.data.validation_file {
                Some(p) => Some(load_timeseries(p, &schema_of(train.names(), train.sample_period()))?),
                None => None,
            };
            Ok((train, validation))
        }
        DataSource::File => {
            let schema = cfg
                .schema
                .as_ref()
                .ok_or_else(|| Error::Config("file input needs a schema".into()))?;
            let file = cfg
                .data
                .file
                .as_ref()
                .ok_or_else(|| Error::Config("data.file is not set".into()))?;
            let train = load_timeseries(file, schema)?;
            let validation = match &cfg.data.validation_file {
                Some(p) => Some(load_timeseries(p, schema)?),
                None => None,
            };
            Ok((train, validation))
        }
    }
}

fn schema_of(names: &ChannelNames, sample_period: f64) -> Schema {
    Schema {
        states: names.states.clone(),
        controls: names.controls.clone(),
        exogenous: names.exogenous.clone(),
        sample_period,
    }
}

/// Result of one identification run.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub model: SindyModel,
    pub training: TimeSeries,
    pub metrics: CandidateMetrics,
    pub ensemble: Option<EnsembleReport>,
    pub iterations: usize,
    pub wall_time_s: f64,
    pub warnings: Vec<String>,
}

/// Data, noise, library and the configured method. `row` selects the noise
/// and ensemble streams so that sweep rows are independent; row 0 is what
/// `identify` runs.
pub fn run_pipeline(cfg: &RunConfig, row: u64) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let (train, validation) = load_data(cfg)?;
    let noise = NoiseSpec::new(cfg.noise.eta, derive_seed(cfg.seed, SeedPurpose::Noise, row))?;
    let training = inject_noise(&train, &noise)?;
    let problem = IdentificationProblem::from_series(&training, validation.as_ref(), &cfg.library)?;
    let mut ens_cfg = cfg.ensemble_config();
    ens_cfg.seed = derive_seed(cfg.seed, SeedPurpose::Ensemble, row);
    let (model, ensemble, iterations, warnings) = match cfg.method {
        Method::Basic => (basic_fit(&problem, &cfg.stls)?, None, 1, Vec::new()),
        Method::ESindy => (
            bagging_mean(&problem, &ens_cfg)?,
            None,
            ens_cfg.target_elites,
            Vec::new(),
        ),
        Method::Proposed => {
            let run = run_ensemble(&problem, &ens_cfg)?;
            let report = run.report();
            (run.selected, Some(report), run.iterations_used, run.warnings)
        }
    };
    let metrics = problem.evaluate(&model)?;
    Ok(PipelineOutcome {
        model,
        training,
        metrics,
        ensemble,
        iterations,
        wall_time_s: started.elapsed().as_secs_f64(),
        warnings,
    })
}

#[derive(Debug, Serialize)]
struct IdentifyReport<'a> {
    method: &'static str,
    seed: u64,
    config_hash: String,
    channels: &'a [String],
    r2_one_step: &'a [f64],
    r2_long_term: &'a [f64],
    n_terms: usize,
    diverged: bool,
    diverged_at: Option<usize>,
    iterations: usize,
    wall_time_s: f64,
    warnings: &'a [String],
    equations: &'a [String],
    ensemble: Option<&'a EnsembleReport>,
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<PathBuf> {
    let mut cfg = base_config(&args.common)?;
    if let Some(p) = &args.plant {
        cfg.data.plant = p.clone();
    }
    if let Some(h) = args.horizon {
        cfg.data.horizon = h;
    }
    if let Some(e) = args.excitation {
        cfg.data.excitation = e.into();
    }
    let plant = plant_by_name(&cfg.data.plant)?;
    let seed = derive_seed(cfg.seed, SeedPurpose::Excitation, 0);
    let ts = generate(&plant, cfg.data.excitation, cfg.data.horizon, seed)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.output.dir.join("data.csv"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    ts.write_csv(&out)?;
    println!(
        "wrote {} samples of '{}' to {} (states: {}; controls: {}; exogenous: {})",
        ts.len(),
        plant.name,
        out.display(),
        ts.names().states.join(","),
        ts.names().controls.join(","),
        ts.names().exogenous.join(",")
    );
    Ok(out)
}

pub fn cmd_identify(args: &IdentifyArgs) -> Result<PathBuf> {
    let mut cfg = resolve_pipeline_config(&args.pipeline)?;
    if let Some(eta) = args.eta {
        cfg.noise.eta = eta;
    }
    let outcome = run_pipeline(&cfg, 0)?;
    let hash = cfg.hash();
    let names = outcome.training.names().clone();
    let file = ModelFile::from_model(
        &outcome.model,
        &names,
        Provenance::new(&hash, cfg.seed, cfg.method.as_str()),
    )?;
    let dir = &cfg.output.dir;
    ensure_dir(dir)?;
    let model_path = dir.join("model.json");
    file.save(&model_path)?;
    if cfg.data.source == DataSource::Plant || cfg.noise.eta > 0.0 {
        outcome.training.write_csv(&dir.join("training.csv"))?;
    }
    let report = IdentifyReport {
        method: cfg.method.as_str(),
        seed: cfg.seed,
        config_hash: hash,
        channels: &names.states,
        r2_one_step: &outcome.metrics.r2_one_step,
        r2_long_term: &outcome.metrics.r2_long,
        n_terms: outcome.metrics.support_count,
        diverged: outcome.metrics.diverged,
        diverged_at: outcome.metrics.diverged_at,
        iterations: outcome.iterations,
        wall_time_s: outcome.wall_time_s,
        warnings: &outcome.warnings,
        equations: &file.equations,
        ensemble: outcome.ensemble.as_ref(),
    };
    write_text(&dir.join("report.json"), &to_json(&report))?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "{}: N = {}, one-step R2 = {}, long-term R2 = {}{}",
        cfg.method.as_str(),
        outcome.metrics.support_count,
        fmt_list(&outcome.metrics.r2_one_step),
        fmt_list(&outcome.metrics.r2_long),
        if outcome.metrics.diverged { " (diverged)" } else { "" }
    );
    println!("model written to {}", model_path.display());
    Ok(model_path)
}

fn fmt_list(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

#[derive(Debug, Serialize, PartialEq)]
pub struct EvaluationMetrics {
    pub channels: Vec<String>,
    pub r2_one_step: Vec<f64>,
    pub r2_long_term: Vec<f64>,
    pub n_terms: usize,
    pub diverged: bool,
    pub diverged_at: Option<usize>,
    pub horizon: usize,
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<EvaluationMetrics> {
    let file = ModelFile::load(&args.model)?;
    let model = file.to_model()?;
    let data = load_timeseries(&args.data, &schema_of(&file.channels, file.sample_period))?;
    let eval = evaluate_series(&model, &data)?;
    let metrics = EvaluationMetrics {
        channels: file.channels.states.clone(),
        r2_one_step: eval.one_step.r2_per_output.clone(),
        r2_long_term: eval.long_term.r2_per_output.clone(),
        n_terms: model.coefficients().support_count(),
        diverged: eval.long_term.diverged,
        diverged_at: eval.long_term.diverged_at,
        horizon: eval.long_term.horizon,
    };
    let json = to_json(&metrics);
    print!("{json}");
    if let Some(path) = &args.metrics {
        write_text(path, &json)?;
    }
    if let Some(path) = &args.trajectory {
        let report = match args.horizon {
            HorizonMode::OneStep => &eval.one_step,
            HorizonMode::MultiStep => &eval.long_term,
        };
        let truth = model.offsets().restore_states(&eval.scenario.truth);
        let predicted = report.in_original_units(model.offsets());
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["time".to_string()];
        header.extend(file.channels.states.iter().map(|c| format!("{c}_true")));
        header.extend(file.channels.states.iter().map(|c| format!("{c}_pred")));
        w.write_record(&header)?;
        for k in 0..truth.ncols() {
            let mut row = vec![fmt_f64((model.sigma_x() + 1 + k) as f64 * file.sample_period)];
            row.extend(truth.column(k).iter().map(|v| fmt_f64(*v)));
            if k < predicted.ncols() {
                row.extend(predicted.column(k).iter().map(|v| fmt_f64(*v)));
            } else {
                row.extend(std::iter::repeat_n(String::new(), truth.nrows()));
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(metrics)
}

/// One sweep row; failed rows keep the error text and empty metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub eta: f64,
    pub outcome: std::result::Result<(CandidateMetrics, f64, usize), String>,
}

pub fn cmd_sweep_noise(args: &SweepArgs) -> Result<Vec<SweepRow>> {
    let cfg = resolve_pipeline_config(&args.pipeline)?;
    if let Some(bad) = args.eta.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
        return Err(Error::Config(format!("noise level {bad} is not >= 0")));
    }
    let mut rows = Vec::new();
    let mut names: Option<Vec<String>> = None;
    for (i, &eta) in args.eta.iter().enumerate() {
        let mut row_cfg = cfg.clone();
        row_cfg.noise.eta = eta;
        let outcome = match run_pipeline(&row_cfg, i as u64) {
            Ok(o) => {
                names.get_or_insert_with(|| o.training.names().states.clone());
                eprintln!(
                    "eta {eta}: long-term R2 = {}, N = {}",
                    fmt_list(&o.metrics.r2_long),
                    o.metrics.support_count
                );
                Ok((o.metrics, o.wall_time_s, o.iterations))
            }
            Err(e) if matches!(e, Error::Config(_) | Error::Schema(_) | Error::Io { .. }) => return Err(e),
            Err(e) => {
                eprintln!("eta {eta}: {e}");
                Err(e.to_string())
            }
        };
        rows.push(SweepRow { eta, outcome });
    }
    let names = names.unwrap_or_default();
    let out = args.out.clone().unwrap_or_else(|| cfg.output.dir.join("sweep.csv"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    let mut w = csv::Writer::from_path(&out)?;
    let mut header = vec!["eta".to_string(), "seed".to_string(), "status".to_string()];
    header.extend(names.iter().map(|n| format!("one_step_r2_{n}")));
    header.extend(names.iter().map(|n| format!("long_term_r2_{n}")));
    header.extend(["n_terms", "diverged", "wall_time_s", "iterations", "error"].map(String::from));
    w.write_record(&header)?;
    for row in &rows {
        let mut rec = vec![fmt_f64(row.eta), cfg.seed.to_string()];
        match &row.outcome {
            Ok((m, wall, iters)) => {
                rec.push("ok".into());
                rec.extend(m.r2_one_step.iter().chain(&m.r2_long).map(|v| fmt_f64(*v)));
                rec.extend([
                    m.support_count.to_string(),
                    m.diverged.to_string(),
                    format!("{wall:.3}"),
                    iters.to_string(),
                    String::new(),
                ]);
            }
            Err(msg) => {
                rec.push("error".into());
                rec.extend(std::iter::repeat_n(String::new(), 2 * names.len() + 4));
                rec.push(msg.clone());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&out, e))?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(rows)
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a).map(|_| ()),
        Command::Identify(a) => cmd_identify(a).map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(a).map(|_| ()),
        Command::SweepNoise(a) => cmd_sweep_noise(a).map(|_| ()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
