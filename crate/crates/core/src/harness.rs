//! Experiment orchestration: model validation, experiment dispatch, CSV and
//! JSON reports, and long-format plot data.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::annealed::{annealed_law, crossover_exponent, drift_expansion, symmetry_order};
use crate::diff_chain::{analytic_pi_origin, diff_kernel, estimate_pi_ratio, gamma_ext_sq_exact, gamma_ext_sq_seeds, simulate_diff_chain};
use crate::error::{Error, Result};
use crate::kpoint::{cumulant_audit, decay_profile, joint_kernel_pmf};
use crate::model::{hass_model, load_model, nn_uniform_two_step, normalize_lattice, s1_model, ModelConfig, ModelSpec};
use crate::oracle::{mc_localtime, she_moment_k1, she_moment_k2, OracleMethod};
use crate::phi::Phi;
use crate::quenched::moment_estimate;
use crate::rng::derive_seed;
use crate::stats::{z_score, Estimate};

pub const REPORT_SCHEMA: &str = "kflow.report/1";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Fixed CSV headers, one per experiment kind.
pub const GAMMA_COLUMNS: [&str; 6] = ["model", "p", "gamma_ext_sq", "stderr", "steps", "seeds"];
pub const MOMENT_COLUMNS: [&str; 8] = ["N", "k", "estimator", "value", "stderr", "n_env", "oracle_value", "z_score"];
pub const DRIFT_COLUMNS: [&str; 6] = ["N", "p", "beta", "d_N", "d_tilde_N", "gap_over_sqrtN"];
pub const DIFFCHAIN_COLUMNS: [&str; 7] = ["statistic", "seed", "steps", "value", "stderr", "oracle_value", "oracle_method"];
pub const PLOT_COLUMNS: [&str; 7] = ["series", "estimator", "x_log2", "y", "y_err", "overlay", "overlay_method"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    EstimateGamma,
    MomentSweep,
    DriftTable,
    DiffchainStats,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::EstimateGamma => "estimate-gamma",
            ExperimentKind::MomentSweep => "moment-sweep",
            ExperimentKind::DriftTable => "drift-table",
            ExperimentKind::DiffchainStats => "diffchain-stats",
        }
    }
}

fn default_n_grid() -> Vec<u64> {
    vec![512, 2048]
}
fn default_t() -> f64 {
    1.0
}
fn default_k() -> Vec<u32> {
    vec![2]
}
fn default_phi() -> String {
    "gauss:0,0.5".into()
}
fn default_n_env() -> usize {
    256
}
fn default_seeds() -> Vec<u64> {
    vec![1]
}
fn default_steps() -> usize {
    1_000_000
}
fn default_oracle_paths() -> usize {
    20_000
}
fn default_workers() -> usize {
    1
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// One experiment. `model` is a path to a model config (relative paths are
/// resolved against the experiment config's directory) or `builtin:<name>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: String,
    pub kind: ExperimentKind,
    #[serde(default = "default_n_grid")]
    pub n_grid: Vec<u64>,
    #[serde(default = "default_t")]
    pub t: f64,
    #[serde(default = "default_k")]
    pub k_list: Vec<u32>,
    #[serde(default = "default_phi")]
    pub phi: String,
    #[serde(default = "default_n_env")]
    pub n_env: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Difference-chain steps per seed.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Interaction strength for the limiting moments; derived from the model when absent.
    #[serde(default)]
    pub gamma_sq: Option<f64>,
    /// Paths for Monte-Carlo oracles (moments of order 3 and 4).
    #[serde(default = "default_oracle_paths")]
    pub oracle_paths: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed_base: u64,
}

impl ExperimentConfig {
    pub fn new(model: impl Into<String>, kind: ExperimentKind) -> Self {
        ExperimentConfig {
            model: model.into(),
            kind,
            n_grid: default_n_grid(),
            t: default_t(),
            k_list: default_k(),
            phi: default_phi(),
            n_env: default_n_env(),
            seeds: default_seeds(),
            steps: default_steps(),
            gamma_sq: None,
            oracle_paths: default_oracle_paths(),
            workers: default_workers(),
            out_dir: default_out(),
            seed_base: 0,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Config { field: format!("line {} column {}", e.line(), e.column()), msg: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&fs::read_to_string(path)?)?;
        if let Some(dir) = path.parent() {
            if !cfg.model.starts_with("builtin:") && Path::new(&cfg.model).is_relative() {
                cfg.model = dir.join(&cfg.model).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    pub fn phi(&self) -> Result<Phi> {
        self.phi.parse()
    }

    /// Checks the invariants and creates the output directory.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Error::Config { field: field.into(), msg };
        let distinct: HashSet<u64> = self.seeds.iter().copied().collect();
        if self.seeds.is_empty() || distinct.len() != self.seeds.len() {
            return Err(bad("seeds", "must be nonempty and pairwise distinct".into()));
        }
        if self.n_grid.is_empty() || self.n_grid.iter().any(|n| !n.is_power_of_two()) {
            return Err(bad("n_grid", "must be nonempty powers of two".into()));
        }
        if !(self.t > 0.0 && self.t.is_finite()) {
            return Err(bad("t", format!("must be positive, got {}", self.t)));
        }
        if self.k_list.is_empty() || self.k_list.iter().any(|k| !(1..=4).contains(k)) {
            return Err(bad("k_list", "entries must lie in 1..=4".into()));
        }
        if self.n_env < 2 {
            return Err(bad("n_env", "need at least two environments".into()));
        }
        if self.workers == 0 {
            return Err(bad("workers", "must be positive".into()));
        }
        self.phi().map_err(|e| bad("phi", e.to_string()))?;
        fs::create_dir_all(&self.out_dir).map_err(|e| bad("out_dir", e.to_string()))?;
        if fs::metadata(&self.out_dir)?.permissions().readonly() {
            return Err(bad("out_dir", "not writable".into()));
        }
        Ok(())
    }

    fn seed(&self, s: u64) -> u64 {
        derive_seed(self.seed_base, s)
    }
}

/// Resolves `builtin:<name>` or a model config path to a normalized model.
pub fn resolve_model(reference: &str) -> Result<ModelSpec> {
    match reference.strip_prefix("builtin:") {
        Some("s1") => normalize_lattice(&s1_model()),
        Some("hass") => normalize_lattice(&hass_model()),
        Some("nn_uniform_two_step") => normalize_lattice(&nn_uniform_two_step()),
        Some(other) => Err(Error::Config { field: "model".into(), msg: format!("unknown builtin model `{other}`") }),
        None => load_model(Path::new(reference)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationItem {
    pub name: String,
    pub status: ItemStatus,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub model: String,
    pub p: Option<u32>,
    pub items: Vec<ValidationItem>,
}

impl ValidationReport {
    pub fn failures(&self) -> Vec<String> {
        self.items.iter().filter(|i| i.status == ItemStatus::Fail).map(|i| format!("{}: {}", i.name, i.detail)).collect()
    }

    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.status == ItemStatus::Pass)
    }

    /// `Err(ValidationFailure)` listing the failing items.
    pub fn into_result(self) -> Result<Self> {
        let f = self.failures();
        if f.is_empty() {
            Ok(self)
        } else {
            Err(Error::ValidationFailure(f))
        }
    }
}

const ITEMS: [&str; 6] =
    ["symmetry_order", "projectivity", "cumulant_vanishing", "decay_of_correlations", "irreducibility", "mean_preservation"];

fn item(name: &str, pass: bool, detail: String) -> ValidationItem {
    ValidationItem { name: name.into(), status: if pass { ItemStatus::Pass } else { ItemStatus::Fail }, detail }
}

/// Builds the model from its config and checks each structural assumption.
/// A periodic annealed support is reported as an irreducibility failure.
pub fn validate_model(config: &ModelConfig) -> Result<ValidationReport> {
    match config.build() {
        Ok(model) => validate_spec(&model),
        Err(Error::PeriodicSupport(g)) => Ok(ValidationReport {
            model: config.name.clone().unwrap_or_default(),
            p: None,
            items: ITEMS
                .iter()
                .map(|&name| {
                    if name == "irreducibility" {
                        item(name, false, format!("annealed steps generate {g}Z; compose two layers with the two_step_nn family"))
                    } else {
                        ValidationItem { name: name.into(), status: ItemStatus::Skipped, detail: "model not constructed".into() }
                    }
                })
                .collect(),
        }),
        Err(e) => Err(e),
    }
}

pub fn validate_spec(model: &ModelSpec) -> Result<ValidationReport> {
    let mut items = Vec::with_capacity(ITEMS.len());
    let p = symmetry_order(model)?;
    let (num, den) = crossover_exponent(p);
    items.push(item(ITEMS[0], true, format!("p = {p}, crossover exponent {num}/{den}")));

    let range = model.interaction_range();
    let span = model.offsets[model.width() - 1] - model.offsets[0];
    let mu = model.annealed_unit_masses();
    let mut worst: f64 = 0.0;
    for d in 0..=range + 1 {
        let pk = joint_kernel_pmf(model, &[0, d])?;
        for i in 0..2 {
            worst = pk.marginal(i).iter().zip(&mu).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        }
    }
    items.push(item(ITEMS[1], worst <= 1e-12, format!("max marginal deviation {worst:.3e}")));

    let mut bases: Vec<Vec<i64>> = (0..=range + 1).map(|d| vec![0, d]).collect();
    bases.push(vec![0, 0, 0]);
    bases.push(vec![0, 1, 2]);
    let audit = cumulant_audit(model, &bases, 1e-12)?;
    let bad = audit.iter().filter(|r| !r.pass).count();
    items.push(item(ITEMS[2], bad == 0, format!("{} cumulants checked, {bad} violations", audit.len())));

    let seps: Vec<i64> = (0..=range + 3).collect();
    let rows = decay_profile(model, 2, &seps)?;
    let far = rows.iter().filter(|r| r.separation > range).map(|r| r.max_gap).fold(0.0, f64::max);
    items.push(item(ITEMS[3], far <= 1e-12, format!("max moment gap beyond separation {range}: {far:.3e}")));

    let window = range.max(span) + 2;
    let (reach_ok, detail) = irreducibility(model, window);
    items.push(item(ITEMS[4], reach_ok, detail));

    let mut drift: f64 = 0.0;
    for x in -window..=window {
        let row = diff_kernel(model, x);
        drift = drift.max((row.law.mean() - model.lattice_scale * x as f64).abs());
    }
    items.push(item(ITEMS[5], drift <= 1e-12, format!("max |E[step] - x| on |x| <= {window}: {drift:.3e}")));

    Ok(ValidationReport { model: model.name.clone(), p: Some(p), items })
}

/// Breadth-first search over difference states: every state in `[-w, w]`
/// must be reachable from 0 and must reach 0.
fn irreducibility(model: &ModelSpec, w: i64) -> (bool, String) {
    let bound = 4 * w;
    let next = |x: i64| -> Vec<i64> { diff_kernel(model, x).law.masses.iter().filter(|m| m.1 > 0.0).map(|m| m.0).collect() };
    let bfs = |start: i64, target: Option<i64>| -> BTreeSet<i64> {
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(x) = queue.pop_front() {
            if Some(x) == target {
                break;
            }
            for y in next(x) {
                if y.abs() <= bound && seen.insert(y) {
                    queue.push_back(y);
                }
            }
        }
        seen
    };
    let from_zero = bfs(0, None);
    let missing: Vec<i64> = (-w..=w).filter(|x| !from_zero.contains(x)).collect();
    if !missing.is_empty() {
        return (false, format!("states {missing:?} unreachable from 0"));
    }
    let stuck: Vec<i64> = (-w..=w).filter(|&x| !bfs(x, Some(0)).contains(&0)).collect();
    if !stuck.is_empty() {
        return (false, format!("0 unreachable from {stuck:?}"));
    }
    (true, format!("window [-{w}, {w}] communicates"))
}

/// One result row; `oracle_method` records the provenance of the oracle column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub series: String,
    pub estimator: String,
    pub n: Option<u64>,
    pub k: Option<u32>,
    pub seed: Option<u64>,
    pub x_log2: f64,
    pub value: f64,
    pub stderr: f64,
    pub samples: u64,
    pub oracle_value: Option<f64>,
    pub oracle_method: OracleMethod,
    pub z_score: Option<f64>,
    /// Whether the row belongs in the plot data.
    pub plot: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub model: String,
    pub rows: Vec<ReportRow>,
    pub disagreements: Vec<String>,
    pub wall_clock_s: f64,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn csv_path(&self) -> PathBuf {
        self.config.out_dir.join(format!("{}.csv", self.config.kind.as_str()))
    }

    pub fn json_path(&self) -> PathBuf {
        self.config.out_dir.join(format!("{}.report.json", self.config.kind.as_str()))
    }
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn pool_equal(parts: &[Estimate]) -> Estimate {
    let m = parts.len() as f64;
    let value = parts.iter().map(|e| e.value).sum::<f64>() / m;
    let se = parts.iter().map(|e| e.stderr * e.stderr).sum::<f64>().sqrt() / m;
    Estimate::new(value, se, parts.iter().map(|e| e.n).sum(), parts[0].method.clone())
}

/// Runs one experiment on a pool of `config.workers` threads, writes
/// `<kind>.csv` and `<kind>.report.json` to `config.out_dir`, and fails with
/// `EstimatorDisagreement` after writing if any estimators disagreed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Report> {
    config.validate()?;
    let model = resolve_model(&config.model)?;
    validate_spec(&model)?.into_result()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(config.workers).build().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let start = Instant::now();
    let (rows, csv, disagreements) = pool.install(|| match config.kind {
        ExperimentKind::EstimateGamma => estimate_gamma(config, &model),
        ExperimentKind::MomentSweep => moment_sweep(config, &model),
        ExperimentKind::DriftTable => drift_table(config, &model),
        ExperimentKind::DiffchainStats => diffchain_stats(config, &model),
    })?;
    let report = Report {
        schema: REPORT_SCHEMA.into(),
        version: VERSION.into(),
        config: config.clone(),
        model: model.name.clone(),
        rows,
        disagreements,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    fs::write(report.csv_path(), csv)?;
    fs::write(report.json_path(), report.to_json()?)?;
    if !report.disagreements.is_empty() {
        return Err(Error::EstimatorDisagreement(report.disagreements.join("; ")));
    }
    Ok(report)
}

type Output = (Vec<ReportRow>, Vec<u8>, Vec<String>);

fn writer(columns: &[&str]) -> Result<csv::Writer<Vec<u8>>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(columns)?;
    Ok(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn estimate_gamma(config: &ExperimentConfig, model: &ModelSpec) -> Result<Output> {
    let seeds: Vec<u64> = config.seeds.iter().map(|&s| config.seed(s)).collect();
    let (merged, parts) = gamma_ext_sq_seeds(model, config.steps, &seeds)?;
    let exact = gamma_ext_sq_exact(model)?;
    let (oracle, method) = match exact {
        Some(v) => (Some(v), OracleMethod::ClosedForm),
        None => (Some(merged.value), OracleMethod::MonteCarlo),
    };
    let p = model.symmetry_order_p;
    let x = (config.steps as f64).log2();
    let mut w = writer(&GAMMA_COLUMNS)?;
    let mut rows = Vec::new();
    for ((e, &s), &raw) in parts.iter().zip(&seeds).zip(&config.seeds) {
        w.write_record([
            model.name.clone(),
            p.to_string(),
            e.value.to_string(),
            e.stderr.to_string(),
            config.steps.to_string(),
            raw.to_string(),
        ])?;
        rows.push(ReportRow {
            series: model.name.clone(),
            estimator: e.method.clone(),
            n: None,
            k: None,
            seed: Some(s),
            x_log2: x,
            value: e.value,
            stderr: e.stderr,
            samples: e.n,
            oracle_value: oracle,
            oracle_method: method,
            z_score: oracle.and_then(|o| finite(z_score(e.value - o, e.stderr, 0.0))),
            plot: false,
        });
    }
    let joined = config.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";");
    w.write_record([
        model.name.clone(),
        p.to_string(),
        merged.value.to_string(),
        merged.stderr.to_string(),
        config.steps.to_string(),
        joined,
    ])?;
    rows.push(ReportRow {
        series: model.name.clone(),
        estimator: merged.method.clone(),
        n: None,
        k: None,
        seed: None,
        x_log2: x,
        value: merged.value,
        stderr: merged.stderr,
        samples: merged.n,
        oracle_value: exact,
        oracle_method: if exact.is_some() { OracleMethod::ClosedForm } else { OracleMethod::MonteCarlo },
        z_score: exact.and_then(|o| finite(z_score(merged.value - o, merged.stderr, 0.0))),
        plot: true,
    });
    Ok((rows, finish(w)?, Vec::new()))
}

/// `γ_ext²` for the limiting moments: the config value, else the exact ratio,
/// else a simulated estimate.
fn interaction(config: &ExperimentConfig, model: &ModelSpec) -> Result<f64> {
    if let Some(g) = config.gamma_sq {
        return Ok(g);
    }
    if let Some(g) = gamma_ext_sq_exact(model)? {
        return Ok(g);
    }
    let seeds: Vec<u64> = config.seeds.iter().map(|&s| config.seed(s)).collect();
    Ok(gamma_ext_sq_seeds(model, config.steps, &seeds)?.0.value)
}

fn moment_sweep(config: &ExperimentConfig, model: &ModelSpec) -> Result<Output> {
    let phi = config.phi()?;
    let needs_gamma = config.k_list.iter().any(|&k| k >= 2);
    let gamma_sq = if needs_gamma { interaction(config, model)? } else { 0.0 };
    let mut w = writer(&MOMENT_COLUMNS)?;
    let mut rows = Vec::new();
    let mut disagreements = Vec::new();
    for &k in &config.k_list {
        let (oracle, oracle_err, method) = match k {
            1 => {
                let r = she_moment_k1(config.t, &phi)?;
                (r.value, r.error_bound, r.method)
            }
            2 => {
                let r = she_moment_k2(config.t, &phi, gamma_sq)?;
                (r.value, r.error_bound, r.method)
            }
            _ => {
                let r = mc_localtime(k as usize, config.t, gamma_sq, &phi, config.oracle_paths, 1e-3, config.seed(u64::from(k)))?;
                (r.estimate.value, r.estimate.stderr + r.bias, OracleMethod::MonteCarlo)
            }
        };
        for &n in &config.n_grid {
            let reports: Vec<_> = config
                .seeds
                .iter()
                .map(|&s| moment_estimate(model, n, config.t, &phi, k, config.n_env, derive_seed(config.seed(s), n)))
                .collect::<Result<_>>()?;
            let direct = pool_equal(&reports.iter().map(|r| r.direct.clone()).collect::<Vec<_>>());
            let tilted = pool_equal(&reports.iter().map(|r| r.tilted.clone()).collect::<Vec<_>>());
            let between = z_score(direct.value - tilted.value, direct.stderr, tilted.stderr);
            if between > 4.0 {
                disagreements.push(format!("N={n} k={k}: direct {} vs tilted {} ({between:.2} SE)", direct.value, tilted.value));
            }
            for e in [&direct, &tilted] {
                let z = finite(z_score(e.value - oracle, e.stderr, oracle_err));
                w.write_record([
                    n.to_string(),
                    k.to_string(),
                    e.method.clone(),
                    e.value.to_string(),
                    e.stderr.to_string(),
                    config.n_env.to_string(),
                    oracle.to_string(),
                    fmt_opt(z),
                ])?;
                rows.push(ReportRow {
                    series: format!("k={k}"),
                    estimator: e.method.clone(),
                    n: Some(n),
                    k: Some(k),
                    seed: None,
                    x_log2: (n as f64).log2(),
                    value: e.value,
                    stderr: e.stderr,
                    samples: e.n,
                    oracle_value: Some(oracle),
                    oracle_method: method,
                    z_score: z,
                    plot: true,
                });
            }
        }
    }
    Ok((rows, finish(w)?, disagreements))
}

fn drift_table(config: &ExperimentConfig, model: &ModelSpec) -> Result<Output> {
    let mu = annealed_law(model);
    let p = model.symmetry_order_p;
    let mut w = writer(&DRIFT_COLUMNS)?;
    let mut rows = Vec::new();
    for &n in &config.n_grid {
        let d = drift_expansion(&mu, n, p)?;
        let gap = d.gap_over_sqrt_n();
        w.write_record([n.to_string(), p.to_string(), d.beta.to_string(), d.d_n.to_string(), d.d_tilde_n.to_string(), gap.to_string()])?;
        rows.push(ReportRow {
            series: "d_N".into(),
            estimator: "exact".into(),
            n: Some(n),
            k: None,
            seed: None,
            x_log2: (n as f64).log2(),
            value: d.d_n,
            stderr: 0.0,
            samples: 0,
            oracle_value: Some(d.d_tilde_n),
            oracle_method: OracleMethod::ClosedForm,
            z_score: None,
            plot: true,
        });
    }
    Ok((rows, finish(w)?, Vec::new()))
}

/// Site indicator of 0 against the normalized indicator of `0 < |x| ≤ 4`.
fn origin_ratio(model: &ModelSpec, steps: usize, seed: u64) -> Result<Estimate> {
    estimate_pi_ratio(model, |x| f64::from(x == 0), |x| if x != 0 && x.abs() <= 4 { 0.125 } else { 0.0 }, steps, seed)
}

fn diffchain_stats(config: &ExperimentConfig, model: &ModelSpec) -> Result<Output> {
    let pi_oracle = analytic_pi_origin(model).ok();
    let gamma_oracle = gamma_ext_sq_exact(model)?;
    let horizon = *config.n_grid.last().expect("validated") as usize;
    let mut w = writer(&DIFFCHAIN_COLUMNS)?;
    let mut rows = Vec::new();
    let x = (config.steps as f64).log2();
    for &raw in &config.seeds {
        let seed = config.seed(raw);
        let pi = origin_ratio(model, config.steps, seed)?;
        let (gamma, _) = gamma_ext_sq_seeds(model, config.steps, &[seed])?;
        let endpoints: Vec<f64> = (0..config.n_env as u64)
            .map(|i| {
                let path = simulate_diff_chain(model, 0, horizon, derive_seed(seed, i));
                let end = model.lattice_scale * *path.last().expect("nonempty path") as f64;
                end * end / (horizon as f64)
            })
            .collect();
        let var = Estimate::from_samples(&endpoints, "path_variance");
        let stats = [
            ("pi_origin_ratio", pi, pi_oracle, OracleMethod::ClosedForm),
            ("gamma_ext_sq", gamma, gamma_oracle, OracleMethod::ClosedForm),
            ("rescaled_variance", var, Some(2.0), OracleMethod::ClosedForm),
        ];
        for (name, e, oracle, method) in stats {
            let method = if oracle.is_some() { method } else { OracleMethod::MonteCarlo };
            w.write_record([
                name.to_string(),
                raw.to_string(),
                config.steps.to_string(),
                e.value.to_string(),
                e.stderr.to_string(),
                fmt_opt(oracle),
                if oracle.is_some() { method.as_str().to_string() } else { String::new() },
            ])?;
            rows.push(ReportRow {
                series: name.into(),
                estimator: e.method.clone(),
                n: None,
                k: None,
                seed: Some(seed),
                x_log2: x,
                value: e.value,
                stderr: e.stderr,
                samples: e.n,
                oracle_value: oracle,
                oracle_method: method,
                z_score: oracle.and_then(|o| finite(z_score(e.value - o, e.stderr, 0.0))),
                plot: true,
            });
        }
    }
    Ok((rows, finish(w)?, Vec::new()))
}

/// Long-format plot data: one row per plotted estimate, `x_log2` on the
/// horizontal axis, the oracle as overlay.
pub fn emit_plot_data(report: &Report, path: &Path) -> Result<()> {
    fs::write(path, plot_csv(&report.rows)?)?;
    Ok(())
}

pub fn plot_csv(rows: &[ReportRow]) -> Result<Vec<u8>> {
    let mut w = writer(&PLOT_COLUMNS)?;
    for r in rows.iter().filter(|r| r.plot) {
        w.write_record([
            r.series.clone(),
            r.estimator.clone(),
            r.x_log2.to_string(),
            r.value.to_string(),
            r.stderr.to_string(),
            fmt_opt(r.oracle_value),
            r.oracle_method.as_str().to_string(),
        ])?;
    }
    finish(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: ExperimentKind, dir: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::new("builtin:s1", kind);
        c.out_dir = dir.to_path_buf();
        c
    }

    #[test]
    fn s1_validates_with_p_one() {
        let r = validate_spec(&resolve_model("builtin:s1").unwrap()).unwrap();
        assert_eq!(r.p, Some(1));
        assert!(r.passed(), "{:?}", r.items);
        let h = validate_spec(&resolve_model("builtin:hass").unwrap()).unwrap();
        assert_eq!(h.p, Some(2));
        assert!(h.passed(), "{:?}", h.items);
        assert!(validate_spec(&resolve_model("builtin:nn_uniform_two_step").unwrap()).unwrap().passed());
    }

    #[test]
    fn periodic_model_fails_irreducibility() {
        let text = r#"{"family": "product_iid", "offsets": [-1, 1],
            "affine": {"base": [1.0, 0.0], "slope": [-1.0, 1.0], "weight": {"kind": "uniform", "lo": 0.0, "hi": 1.0}}}"#;
        let r = validate_model(&ModelConfig::parse(text).unwrap()).unwrap();
        let f = r.failures();
        assert_eq!(f.len(), 1);
        assert!(f[0].starts_with("irreducibility"));
        assert!(matches!(r.into_result(), Err(Error::ValidationFailure(_))));
    }

    #[test]
    fn config_invariants() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(ExperimentKind::DriftTable, dir.path());
        c.validate().unwrap();
        c.seeds = vec![1, 1];
        assert!(c.validate().is_err());
        c.seeds = vec![1];
        c.n_grid = vec![1000];
        assert!(c.validate().is_err());
        assert!(matches!(
            ExperimentConfig::parse(r#"{"model": "builtin:s1", "kind": "drift-table", "colour": 1}"#),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn drift_table_report_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(ExperimentKind::DriftTable, dir.path());
        c.n_grid = vec![1024, 1 << 16];
        let r = run_experiment(&c).unwrap();
        assert_eq!(Report::from_json(&r.to_json().unwrap()).unwrap(), r);
        let csv = fs::read_to_string(r.csv_path()).unwrap();
        assert_eq!(csv.lines().next().unwrap(), DRIFT_COLUMNS.join(","));
        assert_eq!(csv.lines().count(), 3);
        assert!(r.rows.iter().all(|row| row.oracle_method == OracleMethod::ClosedForm));
    }

    #[test]
    fn moment_sweep_rows_per_estimator() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(ExperimentKind::MomentSweep, dir.path());
        c.n_grid = vec![64, 128];
        c.k_list = vec![1, 2];
        c.n_env = 64;
        let r = run_experiment(&c).unwrap();
        assert_eq!(r.rows.len(), 2 * 2 * 2);
        let plot = String::from_utf8(plot_csv(&r.rows).unwrap()).unwrap();
        let series: BTreeSet<&str> = plot.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(series, BTreeSet::from(["k=1", "k=2"]));
    }

    #[test]
    fn empty_plot_is_header_only() {
        let out = String::from_utf8(plot_csv(&[]).unwrap()).unwrap();
        assert_eq!(out, PLOT_COLUMNS.join(",") + "\n");
    }

    #[test]
    fn identical_output_across_worker_counts() {
        let dir = tempfile::tempdir().unwrap();
        let mut outputs = Vec::new();
        for workers in [1, 3] {
            let mut c = cfg(ExperimentKind::DiffchainStats, &dir.path().join(workers.to_string()));
            c.workers = workers;
            c.steps = 20_000;
            c.seeds = vec![4, 5];
            c.n_grid = vec![64];
            c.n_env = 50;
            let r = run_experiment(&c).unwrap();
            outputs.push(fs::read(r.csv_path()).unwrap());
        }
        assert_eq!(outputs[0], outputs[1]);
    }
}
