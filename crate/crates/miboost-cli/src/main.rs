//! Command-line front end: run the synthetic benchmark study, fit a
//! cross-validated model to a CSV with missing cells, or impute a CSV.
//!
//! Configuration comes from an optional JSON file (`--config`); flags
//! override file values, which override the built-in defaults. Exit codes:
//! 0 success, 2 usage or configuration error, 3 runtime failure.

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::fmt::Display;
use std::path::{Path, PathBuf};

use miboost::boosting::SquaredError;
use miboost::crossval::{miboost_cv, CvConfig, MiboostCvResult};
use miboost::data::{load_csv, write_completed_csv, MissingDataset};
use miboost::imputation::mice_fit;
use miboost::simulation::{run_study, Method, SimConfig};

/// Everything a run needs, as one JSON document. Unknown keys are
/// rejected; every field has a default, so a partial file is fine.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    sim: SimConfig,
    methods: Vec<String>,
    /// Worker threads. Never echoed back out: outputs are byte-identical
    /// across thread counts, so the echo must not record this.
    #[serde(skip_serializing)]
    threads: Option<usize>,
    out_dir: PathBuf,
    data: Option<PathBuf>,
    response: String,
    missing_token: String,
    observed_response_only: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            sim: SimConfig::default(),
            methods: Method::ALL.iter().map(|m| m.to_string()).collect(),
            threads: None,
            out_dir: PathBuf::from("results"),
            data: None,
            response: "y".into(),
            missing_token: "NA".into(),
            observed_response_only: false,
        }
    }
}

#[derive(Debug)]
enum CliError {
    /// Bad flags, config, or input files: exit 2.
    Usage(String),
    /// Failure while computing or writing results: exit 3.
    Runtime(String),
}

type CliResult<T> = Result<T, CliError>;

fn usage<E: Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime<E: Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser)]
#[command(name = "miboost", version, about = "Boosted variable selection and prediction for multiply imputed data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the synthetic benchmark study and write result files
    Simulate(SimulateArgs),
    /// Cross-validate and fit a boosted model on a CSV
    Fit(FitArgs),
    /// Impute a CSV several times and write the completed copies
    Impute(ImputeArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON config file; flags override its values
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; fixed seed means byte-identical outputs
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism)
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Stdout format
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    format: OutputFormat,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Text,
    Csv,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of benchmark rounds
    #[arg(long)]
    rounds: Option<usize>,
    /// Comma-separated methods: miboost, eaboost, salasso, saenet
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    methods: Option<Vec<String>>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Input CSV; cells equal to the missing token (or empty) are missing
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Response column name
    #[arg(long)]
    response: Option<String>,
    /// Cell value that marks a missing entry
    #[arg(long, value_name = "TOKEN")]
    missing_token: Option<String>,
    /// Number of imputations
    #[arg(long)]
    m: Option<usize>,
    /// Number of cross-validation folds
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct ImputeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Input CSV; cells equal to the missing token (or empty) are missing
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Response column name
    #[arg(long)]
    response: Option<String>,
    /// Cell value that marks a missing entry
    #[arg(long, value_name = "TOKEN")]
    missing_token: Option<String>,
    /// Number of completed copies
    #[arg(long)]
    m: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Impute(a) => cmd_impute(a),
    };
    match outcome {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(3);
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn apply_common(cfg: &mut RunConfig, a: &CommonArgs) {
    if let Some(s) = a.seed {
        cfg.sim.seed = s;
    }
    if let Some(t) = a.threads {
        cfg.threads = Some(t);
    }
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    }
}

/// Run `f` on a pool of the requested size, or on the global default pool.
fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(usage("--threads must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| runtime(format!("cannot build a {n}-thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn parse_methods(names: &[String]) -> CliResult<Vec<Method>> {
    if names.is_empty() {
        return Err(usage("no methods requested"));
    }
    let mut methods = Vec::with_capacity(names.len());
    for name in names {
        let m: Method = name.parse().map_err(usage)?;
        if methods.contains(&m) {
            return Err(usage(format!("method {m} listed twice")));
        }
        methods.push(m);
    }
    Ok(methods)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    let path = dir.join(name);
    std::fs::write(&path, text + "\n").map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))
}

fn cmd_simulate(a: SimulateArgs) -> CliResult<()> {
    let mut cfg = load_config(a.common.config.as_deref())?;
    if let Some(r) = a.rounds {
        cfg.sim.rounds = r;
    }
    if let Some(ms) = a.methods {
        cfg.methods = ms;
    }
    apply_common(&mut cfg, &a.common);
    let methods = parse_methods(&cfg.methods)?;
    cfg.sim.validate().map_err(usage)?;
    let summary = with_pool(cfg.threads, || run_study(&cfg.sim, &methods))?.map_err(runtime)?;
    summary.write_results(&cfg.out_dir).map_err(runtime)?;
    match a.common.format {
        OutputFormat::Text => print!("{}", summary.table_text()),
        OutputFormat::Csv => print!("{}", summary.summary_csv()),
    }
    eprintln!("results written to {}", cfg.out_dir.display());
    Ok(())
}

fn require_data(cfg: &RunConfig) -> CliResult<PathBuf> {
    cfg.data
        .clone()
        .ok_or_else(|| usage("no input CSV; pass --data or set \"data\" in the config"))
}

fn load_input(cfg: &RunConfig, data: &Path) -> CliResult<MissingDataset> {
    load_csv(data, &cfg.response, &cfg.missing_token).map_err(usage)
}

/// Intercept and slopes on the original covariate scale. Fitting centers
/// the covariates, so the intercept shifts back by the mean vector.
fn original_scale(result: &MiboostCvResult) -> (f64, Vec<f64>) {
    let fit = &result.fit;
    let mut intercept = fit.mean_offset() + fit.averaged[0];
    let slopes: Vec<f64> = fit.averaged[1..].to_vec();
    let mean_of_means: Vec<f64> = {
        let m = result.centerings.len() as f64;
        let p = result.centerings[0].means.len();
        (0..p)
            .map(|j| result.centerings.iter().map(|c| c.means[j]).sum::<f64>() / m)
            .collect()
    };
    for (s, mu) in slopes.iter().zip(&mean_of_means) {
        intercept -= s * mu;
    }
    (intercept, slopes)
}

#[derive(Serialize)]
struct ModelArtifact<'a> {
    response: &'a str,
    covariates: &'a [String],
    t_star: usize,
    selected: Vec<&'a str>,
    fit: &'a miboost::BoostFit,
    centerings: &'a [miboost::CenteringInfo],
    imputation_models: &'a [miboost::ImputationModel],
}

fn cmd_fit(a: FitArgs) -> CliResult<()> {
    let mut cfg = load_config(a.common.config.as_deref())?;
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
    }
    if let Some(r) = a.response {
        cfg.response = r;
    }
    if let Some(t) = a.missing_token {
        cfg.missing_token = t;
    }
    if let Some(m) = a.m {
        cfg.sim.m = m;
    }
    if let Some(k) = a.k {
        cfg.sim.k = k;
    }
    apply_common(&mut cfg, &a.common);
    let data_path = require_data(&cfg)?;
    let d = load_input(&cfg, &data_path)?;
    let cv = CvConfig {
        k: cfg.sim.k,
        m: cfg.sim.m,
        t_stop_max: cfg.sim.t_stop_max,
        nu: cfg.sim.nu,
        mice: cfg.sim.mice.clone(),
        seed: cfg.sim.seed,
        observed_response_only: cfg.observed_response_only,
    };
    cv.validate().map_err(usage)?;
    let result = with_pool(cfg.threads, || miboost_cv(&d, &cv, &SquaredError))?.map_err(runtime)?;

    ensure_dir(&cfg.out_dir)?;
    let selected: Vec<&str> = result
        .fit
        .selected_set()
        .into_iter()
        .map(|j| d.names()[j].as_str())
        .collect();
    let artifact = ModelArtifact {
        response: d.response_name(),
        covariates: d.names(),
        t_star: result.t_star(),
        selected: selected.clone(),
        fit: &result.fit,
        centerings: &result.centerings,
        imputation_models: &result.models,
    };
    write_json(&cfg.out_dir, "model.json", &artifact)?;
    write_curve_csv(&cfg.out_dir, &result)?;
    write_json(&cfg.out_dir, "config.json", &cfg)?;

    let (intercept, slopes) = original_scale(&result);
    match a.common.format {
        OutputFormat::Text => {
            println!("t_star: {}", result.t_star());
            println!("selected ({}): {}", selected.len(), selected.join(" "));
            let width = selected
                .iter()
                .map(|s| s.len())
                .chain(["(intercept)".len()])
                .max()
                .unwrap();
            println!("{:>width$}  {:>14}", "(intercept)", format!("{intercept:.6}"));
            for &name in &selected {
                let j = d.names().iter().position(|n| n == name).unwrap();
                println!("{:>width$}  {:>14}", name, format!("{:.6}", slopes[j]));
            }
        }
        OutputFormat::Csv => {
            println!("variable,coefficient");
            println!("(intercept),{intercept}");
            for &name in &selected {
                let j = d.names().iter().position(|n| n == name).unwrap();
                println!("{},{}", name, slopes[j]);
            }
        }
    }
    eprintln!("model written to {}", cfg.out_dir.display());
    Ok(())
}

fn write_curve_csv(dir: &Path, result: &MiboostCvResult) -> CliResult<()> {
    let mut out = String::from("t,mean_val_mse");
    for f in 1..=result.curve.per_fold.len() {
        out.push_str(&format!(",fold_{f}"));
    }
    out.push('\n');
    for t in 0..result.curve.errors.len() {
        out.push_str(&format!("{t},{}", result.curve.errors[t]));
        for fold in &result.curve.per_fold {
            out.push_str(&format!(",{}", fold[t]));
        }
        out.push('\n');
    }
    let path = dir.join("cv_curve.csv");
    std::fs::write(&path, out).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

#[derive(Serialize)]
struct ImputeManifest<'a> {
    response: &'a str,
    covariates: &'a [String],
    m: usize,
    files: Vec<String>,
    models: &'a [miboost::ImputationModel],
}

fn cmd_impute(a: ImputeArgs) -> CliResult<()> {
    let mut cfg = load_config(a.common.config.as_deref())?;
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
    }
    if let Some(r) = a.response {
        cfg.response = r;
    }
    if let Some(t) = a.missing_token {
        cfg.missing_token = t;
    }
    if let Some(m) = a.m {
        cfg.sim.m = m;
    }
    apply_common(&mut cfg, &a.common);
    let data_path = require_data(&cfg)?;
    let d = load_input(&cfg, &data_path)?;
    let m = cfg.sim.m;
    let set = with_pool(cfg.threads, || mice_fit(&d, m, &cfg.sim.mice, cfg.sim.seed))?.map_err(runtime)?;

    ensure_dir(&cfg.out_dir)?;
    let mut files = Vec::with_capacity(m);
    for (i, completed) in set.completed.iter().enumerate() {
        let name = format!("imputed_{}.csv", i + 1);
        write_completed_csv(completed, d.names(), d.response_name(), &cfg.out_dir.join(&name))
            .map_err(runtime)?;
        files.push(name);
    }
    let manifest = ImputeManifest {
        response: d.response_name(),
        covariates: d.names(),
        m,
        files: files.clone(),
        models: &set.models,
    };
    write_json(&cfg.out_dir, "manifest.json", &manifest)?;
    write_json(&cfg.out_dir, "config.json", &cfg)?;

    match a.common.format {
        OutputFormat::Text => {
            for f in &files {
                println!("wrote {}", cfg.out_dir.join(f).display());
            }
            println!("wrote {}", cfg.out_dir.join("manifest.json").display());
        }
        OutputFormat::Csv => {
            println!("file");
            for f in &files {
                println!("{f}");
            }
            println!("manifest.json");
        }
    }
    Ok(())
}
