use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use kflow::harness::{
    emit_plot_data, resolve_model, run_experiment, validate_model, validate_spec, ExperimentConfig, ExperimentKind, Report, REPORT_SCHEMA,
};
use kflow::kpoint::cumulant_audit;
use kflow::model::ModelConfig;
use kflow::oracle::{local_time_mgf, mc_localtime, she_moment_k1, she_moment_k2};
use kflow::phi::Phi;
use kflow::{Error, Result};

#[derive(Parser)]
#[command(name = "kflow", version, about = "Stochastic flows of kernels: validation, estimation and reference values")]
struct Cli {
    /// Experiment config (JSON); command-line flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Mixed into every seed.
    #[arg(long, global = true)]
    seed_base: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a model against the structural assumptions.
    ValidateModel {
        #[arg(long)]
        model: String,
    },
    /// Estimate the effective noise strength from the difference chain.
    EstimateGamma(Experiment),
    /// Moments of the rescaled field against the limiting values.
    MomentSweep(Experiment),
    /// Drift constants and their cumulant expansion.
    DriftTable(Experiment),
    /// Invariant-measure and path statistics of the difference chain.
    DiffchainStats(Experiment),
    /// Reference values for the limiting equation, printed as JSON.
    Oracle(OracleArgs),
    /// Joint cumulants against the vanishing rule, printed as JSON.
    CumulantAudit {
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
    },
    /// Long-format plot data from a report.
    EmitPlotData {
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Args)]
struct Experiment {
    #[arg(long)]
    model: Option<String>,
    #[arg(long = "N-list", alias = "n-list", value_delimiter = ',')]
    n_list: Option<Vec<u64>>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<u32>>,
    /// `gauss:a,eps`, `bump:a,w` or `const:c`.
    #[arg(long)]
    phi: Option<String>,
    #[arg(long)]
    n_env: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    gamma_sq: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleKind {
    K1,
    K2,
    Mgf,
    Mc,
}

#[derive(Args)]
struct OracleArgs {
    kind: OracleKind,
    #[arg(long, default_value_t = 1.0)]
    t: f64,
    #[arg(long, default_value = "gauss:0,0.5")]
    phi: String,
    /// Local-time coefficient.
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 20_000)]
    paths: usize,
    #[arg(long, default_value_t = 1e-3)]
    mesh: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn experiment_config(cli: &Cli, kind: ExperimentKind, e: &Experiment) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let model = e.model.clone().ok_or_else(|| Error::Config { field: "model".into(), msg: "pass --model or --config".into() })?;
            ExperimentConfig::new(model, kind)
        }
    };
    cfg.kind = kind;
    if let Some(m) = &e.model {
        cfg.model = m.clone();
    }
    if let Some(v) = &e.n_list {
        cfg.n_grid = v.clone();
    }
    if let Some(v) = e.t {
        cfg.t = v;
    }
    if let Some(v) = &e.k {
        cfg.k_list = v.clone();
    }
    if let Some(v) = &e.phi {
        cfg.phi = v.clone();
    }
    if let Some(v) = e.n_env {
        cfg.n_env = v;
    }
    if let Some(v) = &e.seeds {
        cfg.seeds = v.clone();
    }
    if let Some(v) = e.steps {
        cfg.steps = v;
    }
    if e.gamma_sq.is_some() {
        cfg.gamma_sq = e.gamma_sq;
    }
    if let Some(v) = &cli.out {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = cli.workers {
        cfg.workers = v;
    }
    if let Some(v) = cli.seed_base {
        cfg.seed_base = v;
    }
    Ok(cfg)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json(cli: &Cli, name: &str, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = &cli.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(name), serde_json::to_string_pretty(value)?)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        rayon_pool(n)?;
    }
    match &cli.command {
        Command::ValidateModel { model } => {
            let report = if model.starts_with("builtin:") {
                validate_spec(&resolve_model(model)?)?
            } else {
                validate_model(&ModelConfig::parse(&std::fs::read_to_string(model)?)?)?
            };
            print_json(&report)?;
            write_json(cli, "validate-model.json", &report)?;
            report.into_result().map(|_| ())
        }
        Command::EstimateGamma(e) => experiment(cli, ExperimentKind::EstimateGamma, e),
        Command::MomentSweep(e) => experiment(cli, ExperimentKind::MomentSweep, e),
        Command::DriftTable(e) => experiment(cli, ExperimentKind::DriftTable, e),
        Command::DiffchainStats(e) => experiment(cli, ExperimentKind::DiffchainStats, e),
        Command::Oracle(o) => {
            let phi: Phi = o.phi.parse()?;
            match o.kind {
                OracleKind::K1 => print_json(&she_moment_k1(o.t, &phi)?),
                OracleKind::K2 => print_json(&she_moment_k2(o.t, &phi, o.gamma)?),
                OracleKind::Mgf => print_json(&local_time_mgf(o.gamma, o.t)?),
                OracleKind::Mc => print_json(&mc_localtime(o.k, o.t, o.gamma, &phi, o.paths, o.mesh, o.seed)?),
            }
        }
        Command::CumulantAudit { model, tol } => {
            let spec = resolve_model(model)?;
            let range = spec.interaction_range();
            let mut bases: Vec<Vec<i64>> = (0..=range + 1).map(|d| vec![0, d]).collect();
            bases.push(vec![0, 0, 0]);
            bases.push(vec![0, 1, 2]);
            let rows = cumulant_audit(&spec, &bases, *tol)?;
            let failures: Vec<String> = rows
                .iter()
                .filter(|r| !r.pass)
                .map(|r| format!("m={} indices={:?} base={:?}: {}", r.m, r.indices, r.base, r.value))
                .collect();
            let out = json!({ "schema": REPORT_SCHEMA, "model": spec.name, "p": spec.symmetry_order_p, "rows": rows });
            print_json(&out)?;
            write_json(cli, "cumulant-audit.json", &out)?;
            if failures.is_empty() {
                Ok(())
            } else {
                Err(Error::ValidationFailure(failures))
            }
        }
        Command::EmitPlotData { report } => {
            let r = Report::from_json(&std::fs::read_to_string(report)?)?;
            let dir = cli.out.clone().unwrap_or_else(|| report.parent().map(Path::to_path_buf).unwrap_or_default());
            std::fs::create_dir_all(&dir)?;
            let path = dir.join(format!("{}.plot.csv", r.config.kind.as_str()));
            emit_plot_data(&r, &path)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn rayon_pool(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("--workers must be positive".into()));
    }
    // Oracle and audit commands use the global pool; experiments build their own.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn experiment(cli: &Cli, kind: ExperimentKind, e: &Experiment) -> Result<()> {
    let cfg = experiment_config(cli, kind, e)?;
    let out = cfg.out_dir.join(format!("{}.csv", kind.as_str()));
    let result = run_experiment(&cfg);
    if !matches!(result, Err(Error::EstimatorDisagreement(_)) | Ok(_)) {
        return result.map(|_| ());
    }
    println!("{}", out.display());
    result.map(|_| ())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::ValidationFailure(_) | Error::EstimatorDisagreement(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
