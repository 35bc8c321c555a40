//! Benchmark grid over systems, estimators, noise levels and trials.
//!
//! Each trial draws one demonstration and runs every configured estimator
//! on it, so the estimators are compared on identical data. Records are
//! sorted before they are written, which makes the output independent of
//! scheduling.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demo::{sample_demonstration, Demonstration};
use crate::error::{Error, Result};
use crate::forward::{solve_forward, SolverOptions};
use crate::kkt::{method1_estimate, Method1Options};
use crate::likelihood::NoiseModel;
use crate::mle::{method2_estimate, method3_estimate, MleOptions};
use crate::model::ActiveSet;
use crate::systems::{standard_problem, true_theta, System, DEFAULT_HORIZON};

/// Noise levels used for both `σ_u` and `σ₀`, log-spaced over four decades.
pub const SIGMA_GRID: [f64; 13] = [
    0.0001, 0.000215, 0.000464, 0.001, 0.00215, 0.00464, 0.01, 0.0215, 0.0464, 0.1, 0.215, 0.464,
    1.0,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "M1", alias = "1")]
    M1,
    #[serde(rename = "M2", alias = "2")]
    M2,
    #[serde(rename = "M3", alias = "3")]
    M3,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::M1, Method::M2, Method::M3];

    pub fn name(self) -> &'static str {
        match self {
            Method::M1 => "M1",
            Method::M2 => "M2",
            Method::M3 => "M3",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "1" | "M1" => Ok(Method::M1),
            "2" | "M2" => Ok(Method::M2),
            "3" | "M3" => Ok(Method::M3),
            other => Err(Error::InvalidArgument(format!(
                "unknown method {other:?} (expected 1, 2 or 3)"
            ))),
        }
    }
}

/// How the `σ_u` and `σ₀` lists combine into cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridShape {
    /// Every pair of the two lists.
    Full,
    /// Pairs with equal position; the lists must have the same length.
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputPaths {
    pub records: PathBuf,
    pub summary: PathBuf,
}

impl Default for OutputPaths {
    fn default() -> Self {
        Self {
            records: PathBuf::from("records.csv"),
            summary: PathBuf::from("summary.csv"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub systems: Vec<System>,
    pub methods: Vec<Method>,
    pub sigma_u: Vec<f64>,
    pub sigma_0: Vec<f64>,
    pub grid: GridShape,
    pub trials: usize,
    pub master_seed: u64,
    /// Worker threads; zero uses every available core.
    pub workers: usize,
    pub horizon: usize,
    /// Measure estimator wall time. Off leaves `runtime_ms` empty so that
    /// repeated runs write identical files.
    pub record_timing: bool,
    pub forward: SolverOptions,
    pub method1: Method1Options,
    pub mle: MleOptions,
    pub output: OutputPaths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Full noise grid with 100 trials per cell.
    pub fn desk() -> Self {
        Self {
            systems: System::ALL.to_vec(),
            methods: Method::ALL.to_vec(),
            sigma_u: SIGMA_GRID.to_vec(),
            sigma_0: SIGMA_GRID.to_vec(),
            grid: GridShape::Full,
            trials: 100,
            master_seed: 1,
            workers: 0,
            horizon: DEFAULT_HORIZON,
            record_timing: true,
            forward: SolverOptions::default(),
            method1: Method1Options::default(),
            mle: MleOptions::default(),
            output: OutputPaths::default(),
        }
    }

    /// Full noise grid with 1000 trials per cell.
    pub fn large() -> Self {
        Self {
            trials: 1000,
            ..Self::desk()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let sigmas = self.sigma_u.iter().chain(&self.sigma_0);
        if sigmas.clone().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config(
                "noise levels must be finite and non-negative".into(),
            ));
        }
        if self.grid == GridShape::Diagonal && self.sigma_u.len() != self.sigma_0.len() {
            return Err(Error::Config(
                "a diagonal grid needs sigma_u and sigma_0 of equal length".into(),
            ));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        self.forward.validate()?;
        self.mle.solver.validate()?;
        Ok(())
    }

    /// `(σ_u, σ₀)` cells in configuration order.
    pub fn cells(&self) -> Vec<(f64, f64)> {
        match self.grid {
            GridShape::Full => self
                .sigma_u
                .iter()
                .flat_map(|&u| self.sigma_0.iter().map(move |&s| (u, s)))
                .collect(),
            GridShape::Diagonal => self
                .sigma_u
                .iter()
                .copied()
                .zip(self.sigma_0.iter().copied())
                .collect(),
        }
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Demonstration seed of one trial. The method is left out on purpose:
/// every estimator sees the same demonstration.
pub fn trial_seed(
    master_seed: u64,
    system: System,
    sigma_u: f64,
    sigma_0: f64,
    trial: usize,
) -> u64 {
    let system_id = match system {
        System::Linear => 1,
        System::Nonlinear => 2,
    };
    [
        system_id,
        sigma_u.to_bits(),
        sigma_0.to_bits(),
        trial as u64,
    ]
    .iter()
    .fold(mix(master_seed), |h, &x| {
        mix(h ^ x.wrapping_add(0x9e37_79b9_7f4a_7c15))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub system: System,
    pub method: Method,
    pub sigma_u: f64,
    pub sigma_0: f64,
    pub trial: usize,
    pub seed: u64,
    /// `None` when the error is undefined or the trial failed.
    pub error: Option<f64>,
    pub runtime_ms: Option<f64>,
    /// Log-likelihood of the likelihood estimators.
    pub loglik: Option<f64>,
    pub active_set: Option<ActiveSet>,
    pub flags: Vec<String>,
}

impl TrialRecord {
    fn key(&self) -> (System, Method, u64, u64, usize) {
        (
            self.system,
            self.method,
            self.sigma_u.to_bits(),
            self.sigma_0.to_bits(),
            self.trial,
        )
    }
}

fn compare(a: &TrialRecord, b: &TrialRecord) -> std::cmp::Ordering {
    a.system
        .cmp(&b.system)
        .then(a.method.cmp(&b.method))
        .then(a.sigma_u.total_cmp(&b.sigma_u))
        .then(a.sigma_0.total_cmp(&b.sigma_0))
        .then(a.trial.cmp(&b.trial))
}

/// `‖V̂ − V‖ / ‖V‖` between the controller inputs under the estimated and
/// the true weights; `None` when `V = 0`.
pub fn prediction_error(
    system: System,
    horizon: usize,
    theta_hat: &DVector<f64>,
    theta_true: &DVector<f64>,
    z0: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<Option<f64>> {
    let problem = standard_problem(system, horizon);
    let truth = solve_forward(&problem, theta_true, z0, opts)?.inputs;
    relative_error(&problem, theta_hat, &truth, z0, opts)
}

fn relative_error(
    problem: &crate::model::ControlProblem,
    theta_hat: &DVector<f64>,
    truth: &DVector<f64>,
    z0: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<Option<f64>> {
    let norm = truth.norm();
    if norm == 0.0 {
        return Ok(None);
    }
    let predicted = solve_forward(problem, theta_hat, z0, opts)?.inputs;
    Ok(Some((predicted - truth).norm() / norm))
}

struct Outcome {
    theta: DVector<f64>,
    loglik: Option<f64>,
    active_set: ActiveSet,
    flags: Vec<String>,
}

fn estimate(config: &ExperimentConfig, method: Method, demo: &Demonstration) -> Result<Outcome> {
    let problem = demo.problem();
    let u = &demo.observation.inputs;
    let x0 = &demo.observation.x0;
    if method == Method::M1 {
        let m1 = method1_estimate(&problem, u, x0, &config.method1)?;
        let mut flags = Vec::new();
        if m1.unidentifiable {
            flags.push("unidentifiable".to_string());
        }
        return Ok(Outcome {
            theta: m1.theta.values().clone(),
            loglik: None,
            active_set: m1.active_set,
            flags,
        });
    }
    let noise = NoiseModel::isotropic(
        problem.input_len(),
        problem.state_dim(),
        demo.sigma_u,
        demo.sigma_0,
    )?;
    let result = if method == Method::M2 {
        method2_estimate(&problem, u, x0, &noise, &config.mle)?
    } else {
        method3_estimate(&problem, u, x0, &noise, &config.mle)?
    };
    let d = &result.diagnostics;
    let mut flags = Vec::new();
    if !d.converged {
        flags.push("not_converged".to_string());
    }
    if d.fallback {
        flags.push("fallback".to_string());
    }
    if d.unidentifiable {
        flags.push("unidentifiable".to_string());
    }
    Ok(Outcome {
        theta: result.theta.values().clone(),
        loglik: Some(result.loglik),
        active_set: result.active_set,
        flags,
    })
}

/// One record per configured method for a single demonstration.
pub fn run_trial(
    config: &ExperimentConfig,
    system: System,
    sigma_u: f64,
    sigma_0: f64,
    trial: usize,
) -> Vec<TrialRecord> {
    let seed = trial_seed(config.master_seed, system, sigma_u, sigma_0, trial);
    let blank = |method: Method, flag: &str| TrialRecord {
        system,
        method,
        sigma_u,
        sigma_0,
        trial,
        seed,
        error: None,
        runtime_ms: None,
        loglik: None,
        active_set: None,
        flags: vec![flag.to_string()],
    };
    let demo = match sample_demonstration(
        system,
        &true_theta(),
        sigma_u,
        sigma_0,
        seed,
        config.horizon,
        &config.forward,
    ) {
        Ok(d) if d.converged => d,
        Ok(_) => {
            return config
                .methods
                .iter()
                .map(|&m| blank(m, "demo_not_converged"))
                .collect()
        }
        Err(_) => {
            return config
                .methods
                .iter()
                .map(|&m| blank(m, "demo_failed"))
                .collect()
        }
    };
    let problem = demo.problem();

    config
        .methods
        .iter()
        .map(|&method| {
            let started = Instant::now();
            let outcome = estimate(config, method, &demo);
            let elapsed = started.elapsed().as_secs_f64() * 1e3;
            let Ok(outcome) = outcome else {
                return blank(method, "estimator_failed");
            };
            let mut flags = outcome.flags;
            let error = match relative_error(
                &problem,
                &outcome.theta,
                &demo.truth.inputs,
                &demo.truth.z0,
                &config.forward,
            ) {
                Ok(Some(e)) => Some(e),
                Ok(None) => {
                    flags.push("undefined_error".to_string());
                    None
                }
                Err(_) => {
                    flags.push("evaluation_failed".to_string());
                    None
                }
            };
            TrialRecord {
                system,
                method,
                sigma_u,
                sigma_0,
                trial,
                seed,
                error,
                runtime_ms: config
                    .record_timing
                    .then_some(elapsed.max(f64::MIN_POSITIVE)),
                loglik: outcome.loglik,
                active_set: Some(outcome.active_set),
                flags,
            }
        })
        .collect()
}

/// Runs every (system, cell, trial) and returns the records sorted by
/// system, method, `σ_u`, `σ₀` and trial.
pub fn run_grid(config: &ExperimentConfig) -> Result<Vec<TrialRecord>> {
    config.validate()?;
    let mut tasks = Vec::new();
    for &system in &config.systems {
        for (su, s0) in config.cells() {
            for trial in 0..config.trials {
                tasks.push((system, su, s0, trial));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut records: Vec<TrialRecord> = pool.install(|| {
        tasks
            .par_iter()
            .flat_map_iter(|&(system, su, s0, trial)| run_trial(config, system, su, s0, trial))
            .collect()
    });
    records.sort_by(compare);
    Ok(records)
}

pub const RECORD_HEADER: [&str; 11] = [
    "system",
    "method",
    "sigma_u",
    "sigma_0",
    "trial",
    "seed",
    "error",
    "runtime_ms",
    "loglik",
    "active_set",
    "flags",
];

fn opt_field(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn parse_opt(field: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| Error::Config(format!("bad number {field:?} in records")))
}

pub fn write_records<W: std::io::Write>(records: &[TrialRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RECORD_HEADER)?;
    for r in records {
        w.write_record([
            r.system.name().to_string(),
            r.method.name().to_string(),
            r.sigma_u.to_string(),
            r.sigma_0.to_string(),
            r.trial.to_string(),
            r.seed.to_string(),
            opt_field(r.error),
            opt_field(r.runtime_ms),
            opt_field(r.loglik),
            r.active_set
                .as_ref()
                .map(|a| a.encode())
                .unwrap_or_default(),
            r.flags.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: std::io::Read>(input: R) -> Result<Vec<TrialRecord>> {
    let mut reader = csv::Reader::from_reader(input);
    let header = reader.headers()?.clone();
    if header.iter().ne(RECORD_HEADER.iter().copied()) {
        return Err(Error::Config("unexpected records header".into()));
    }
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or("");
        let bad = |what: &str| Error::Config(format!("bad {what} {:?} in records", row));
        records.push(TrialRecord {
            system: field(0).parse()?,
            method: field(1).parse()?,
            sigma_u: field(2).parse().map_err(|_| bad("sigma_u"))?,
            sigma_0: field(3).parse().map_err(|_| bad("sigma_0"))?,
            trial: field(4).parse().map_err(|_| bad("trial"))?,
            seed: field(5).parse().map_err(|_| bad("seed"))?,
            error: parse_opt(field(6))?,
            runtime_ms: parse_opt(field(7))?,
            loglik: parse_opt(field(8))?,
            active_set: if field(9).is_empty() {
                None
            } else {
                Some(ActiveSet::decode(field(9))?)
            },
            flags: if field(10).is_empty() {
                Vec::new()
            } else {
                field(10).split(';').map(str::to_string).collect()
            },
        });
    }
    Ok(records)
}

/// Nearest-rank percentile of sorted, non-empty `values`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p10: f64,
    pub p25: f64,
    pub p75: f64,
    pub p90: f64,
    /// Sample standard deviation; zero for a single value.
    pub stddev: f64,
}

impl SummaryStats {
    /// `None` for an empty slice.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let stddev = if n > 1 {
            (sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self {
            count: n,
            mean,
            median: percentile(&sorted, 50.0),
            p10: percentile(&sorted, 10.0),
            p25: percentile(&sorted, 25.0),
            p75: percentile(&sorted, 75.0),
            p90: percentile(&sorted, 90.0),
            stddev,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub system: System,
    pub method: Method,
    pub sigma_u: f64,
    pub sigma_0: f64,
    pub error: SummaryStats,
    pub runtime_ms: Option<SummaryStats>,
    /// Records without a defined error.
    pub flagged: usize,
}

/// Statistics per cell over records with a defined error. Cells with no
/// such record are left out.
pub fn summarize(records: &[TrialRecord]) -> Vec<CellSummary> {
    let mut sorted: Vec<&TrialRecord> = records.iter().collect();
    sorted.sort_by(|a, b| compare(a, b));
    let mut out = Vec::new();
    let mut start = 0;
    while start < sorted.len() {
        let head = sorted[start];
        let cell = (
            head.system,
            head.method,
            head.sigma_u.to_bits(),
            head.sigma_0.to_bits(),
        );
        let mut end = start;
        while end < sorted.len() {
            let k = sorted[end].key();
            if (k.0, k.1, k.2, k.3) != cell {
                break;
            }
            end += 1;
        }
        let group = &sorted[start..end];
        let errors: Vec<f64> = group.iter().filter_map(|r| r.error).collect();
        let runtimes: Vec<f64> = group
            .iter()
            .filter(|r| r.error.is_some())
            .filter_map(|r| r.runtime_ms)
            .collect();
        if let Some(error) = SummaryStats::from_values(&errors) {
            out.push(CellSummary {
                system: head.system,
                method: head.method,
                sigma_u: head.sigma_u,
                sigma_0: head.sigma_0,
                error,
                runtime_ms: SummaryStats::from_values(&runtimes),
                flagged: group.len() - errors.len(),
            });
        }
        start = end;
    }
    out
}

pub const SUMMARY_HEADER: [&str; 15] = [
    "system",
    "method",
    "sigma_u",
    "sigma_0",
    "count",
    "flagged",
    "mean",
    "median",
    "p10",
    "p25",
    "p75",
    "p90",
    "stddev",
    "runtime_median_ms",
    "runtime_p90_ms",
];

pub fn write_summary<W: std::io::Write>(cells: &[CellSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for c in cells {
        let e = &c.error;
        w.write_record([
            c.system.name().to_string(),
            c.method.name().to_string(),
            c.sigma_u.to_string(),
            c.sigma_0.to_string(),
            e.count.to_string(),
            c.flagged.to_string(),
            e.mean.to_string(),
            e.median.to_string(),
            e.p10.to_string(),
            e.p25.to_string(),
            e.p75.to_string(),
            e.p90.to_string(),
            e.stddev.to_string(),
            opt_field(c.runtime_ms.as_ref().map(|r| r.median)),
            opt_field(c.runtime_ms.as_ref().map(|r| r.p90)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the grid and writes both CSV files named in the configuration.
pub fn run_benchmark(config: &ExperimentConfig) -> Result<(Vec<TrialRecord>, Vec<CellSummary>)> {
    let records = run_grid(config)?;
    let cells = summarize(&records);
    for path in [&config.output.records, &config.output.summary] {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
    }
    write_records(&records, std::fs::File::create(&config.output.records)?)?;
    write_summary(&cells, std::fs::File::create(&config.output.summary)?)?;
    Ok((records, cells))
}
