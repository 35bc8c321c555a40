//! `ioc`: generate demonstrations, learn cost weights, run the benchmark
//! grid and check the closed-form LQ results.
//!
//! Exit codes: 0 success, 1 usage error, 2 numerical failure. Data and
//! reports go to stdout; diagnostics go to stderr.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ioc_core::demo::{sample_demonstration, Demonstration};
use ioc_core::harness::{prediction_error, run_benchmark, write_summary, ExperimentConfig, Method};
use ioc_core::kkt::method1_estimate;
use ioc_core::likelihood::NoiseModel;
use ioc_core::lq::{run_theory_checks, TheoryOptions};
use ioc_core::mle::{method2_estimate, method3_estimate};
use ioc_core::model::Normalization;
use ioc_core::systems::{true_theta, System};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "ioc",
    version,
    about = "Learn controller cost weights from noisy demonstrations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file with default settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file (generate, learn) or directory (benchmark).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Worker threads; zero uses every core.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw one noisy demonstration and write it as JSON.
    #[command(allow_negative_numbers = true)]
    Generate {
        #[arg(long, value_parser = parse_system)]
        system: System,
        #[arg(long, value_parser = non_negative)]
        sigma_u: f64,
        #[arg(long = "sigma-0", value_parser = non_negative)]
        sigma_0: f64,
        #[arg(long)]
        horizon: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate the cost weights of a demonstration.
    Learn {
        /// 1: KKT relaxation, 2: likelihood, 3: likelihood with estimated initial state.
        #[arg(long, value_parser = parse_method)]
        method: Method,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        normalization: Option<NormalizationArg>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the benchmark grid and write records and summary CSVs.
    Benchmark {
        #[arg(long, value_enum)]
        profile: Option<Profile>,
        #[arg(long)]
        trials: Option<usize>,
        /// Leave the runtime column empty so repeated runs are byte-identical.
        #[arg(long)]
        no_timing: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Check the closed-form results for unconstrained LQ problems.
    Theory {
        #[arg(long)]
        mc_samples: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        directions: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Large,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormalizationArg {
    /// Last weight fixed to one.
    Fixed,
    /// Unit Euclidean norm.
    Unit,
    /// No normalization.
    Free,
}

fn parse_system(s: &str) -> Result<System, String> {
    s.parse().map_err(|e: ioc_core::Error| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: ioc_core::Error| e.to_string())
}

fn non_negative(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(x) if x.is_finite() && x >= 0.0 => Ok(x),
        _ => Err(format!("{s:?} is not a finite non-negative number")),
    }
}

enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<ioc_core::Error> for Failure {
    fn from(e: ioc_core::Error) -> Self {
        match e {
            ioc_core::Error::Config(_)
            | ioc_core::Error::Io(_)
            | ioc_core::Error::Json(_)
            | ioc_core::Error::Csv(_) => Failure::Usage(e.to_string()),
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

/// Settings file: experiment fields at the top level plus an optional
/// `[theory]` table.
fn load_config(path: Option<&Path>) -> Result<(ExperimentConfig, TheoryOptions), Failure> {
    let Some(path) = path else {
        return Ok((ExperimentConfig::default(), TheoryOptions::default()));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Failure::Usage(format!("{}: {e}", path.display())))?;
    let theory = match table.remove("theory") {
        Some(value) => value.try_into().map_err(|e: toml::de::Error| {
            Failure::Usage(format!("{}: [theory]: {e}", path.display()))
        })?,
        None => TheoryOptions::default(),
    };
    let experiment = ExperimentConfig::from_toml_str(
        &toml::to_string(&table).map_err(|e| Failure::Usage(e.to_string()))?,
    )?;
    Ok((experiment, theory))
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

#[derive(Serialize)]
struct LearnReport {
    method: Method,
    theta: Vec<f64>,
    active_set: String,
    loglik: Option<f64>,
    /// Relative input error against the demonstration's noise-free truth.
    error: Option<f64>,
    converged: bool,
    fallback: bool,
    unidentifiable: bool,
    runtime_ms: f64,
}

fn generate(
    system: System,
    sigma_u: f64,
    sigma_0: f64,
    horizon: Option<usize>,
    common: &Common,
) -> Result<(), Failure> {
    let (config, _) = load_config(common.config.as_deref())?;
    let horizon = horizon.unwrap_or(config.horizon);
    if horizon == 0 {
        return Err(Failure::Usage("horizon must be positive".into()));
    }
    let seed = common.seed.unwrap_or(config.master_seed);
    let demo = sample_demonstration(
        system,
        &true_theta(),
        sigma_u,
        sigma_0,
        seed,
        horizon,
        &config.forward,
    )?;
    if !demo.converged {
        eprintln!("warning: forward solve did not converge for seed {seed}");
    }
    write_output(common.output.as_deref(), &(demo.to_json()? + "\n"))
}

fn learn(
    method: Method,
    input: &Path,
    normalization: Option<NormalizationArg>,
    common: &Common,
) -> Result<(), Failure> {
    let (mut config, _) = load_config(common.config.as_deref())?;
    let text = std::fs::read_to_string(input)
        .map_err(|e| Failure::Usage(format!("{}: {e}", input.display())))?;
    let demo = Demonstration::from_json(&text)?;
    let problem = demo.problem();
    if let Some(n) = normalization {
        let normalization = match n {
            NormalizationArg::Fixed => Normalization::FixedComponent(problem.num_features() - 1),
            NormalizationArg::Unit => Normalization::UnitNorm,
            NormalizationArg::Free => Normalization::Free,
        };
        config.method1.normalization = normalization;
        config.mle.normalization = normalization;
    }
    let u = &demo.observation.inputs;
    let x0 = &demo.observation.x0;
    let started = std::time::Instant::now();
    let (theta, active_set, loglik, converged, fallback, unidentifiable) = match method {
        Method::M1 => {
            let e = method1_estimate(&problem, u, x0, &config.method1)?;
            (e.theta, e.active_set, None, true, false, e.unidentifiable)
        }
        Method::M2 | Method::M3 => {
            let noise = NoiseModel::isotropic(
                problem.input_len(),
                problem.state_dim(),
                demo.sigma_u,
                demo.sigma_0,
            )?;
            let e = if method == Method::M2 {
                method2_estimate(&problem, u, x0, &noise, &config.mle)?
            } else {
                method3_estimate(&problem, u, x0, &noise, &config.mle)?
            };
            let d = &e.diagnostics;
            (
                e.theta,
                e.active_set,
                Some(e.loglik),
                d.converged,
                d.fallback,
                d.unidentifiable,
            )
        }
    };
    let runtime_ms = started.elapsed().as_secs_f64() * 1e3;
    let error = prediction_error(
        demo.system,
        demo.horizon,
        theta.values(),
        &demo.truth.theta,
        &demo.truth.z0,
        &config.forward,
    )?;
    if error.is_none() {
        eprintln!("warning: true inputs are zero; prediction error undefined");
    }
    let report = LearnReport {
        method,
        theta: theta.values().iter().copied().collect(),
        active_set: active_set.encode(),
        loglik,
        error,
        converged,
        fallback,
        unidentifiable,
        runtime_ms,
    };
    let json = serde_json::to_string_pretty(&report).map_err(ioc_core::Error::from)? + "\n";
    if let Some(path) = common.output.as_deref() {
        std::fs::write(path, &json)?;
    }
    std::io::stdout().write_all(json.as_bytes())?;
    Ok(())
}

fn benchmark(
    profile: Option<Profile>,
    trials: Option<usize>,
    no_timing: bool,
    common: &Common,
) -> Result<(), Failure> {
    let (mut config, _) = match (profile, common.config.as_deref()) {
        (Some(_), Some(_)) => {
            return Err(Failure::Usage(
                "--profile and --config are mutually exclusive".into(),
            ))
        }
        (Some(Profile::Desk), None) => (ExperimentConfig::desk(), TheoryOptions::default()),
        (Some(Profile::Large), None) => (ExperimentConfig::large(), TheoryOptions::default()),
        (None, path) => load_config(path)?,
    };
    if let Some(seed) = common.seed {
        config.master_seed = seed;
    }
    if let Some(workers) = common.workers {
        config.workers = workers;
    }
    if let Some(trials) = trials {
        config.trials = trials;
    }
    if no_timing {
        config.record_timing = false;
    }
    if let Some(dir) = common.output.as_deref() {
        config.output.records = dir.join("records.csv");
        config.output.summary = dir.join("summary.csv");
    }
    config.validate()?;
    let resolved = config.to_toml_string()?;
    eprintln!("# resolved configuration\n{resolved}");
    let (records, cells) = run_benchmark(&config)?;
    let flagged = records.iter().filter(|r| r.error.is_none()).count();
    if flagged > 0 {
        eprintln!(
            "warning: {flagged} of {} records have no defined error",
            records.len()
        );
    }
    let mut summary = Vec::new();
    write_summary(&cells, &mut summary)?;
    std::io::stdout().write_all(&summary)?;
    Ok(())
}

fn theory(
    mc_samples: Option<usize>,
    trials: Option<usize>,
    directions: Option<usize>,
    common: &Common,
) -> Result<(), Failure> {
    let (_, mut opts) = load_config(common.config.as_deref())?;
    if let Some(n) = mc_samples {
        opts.mc_samples = n;
    }
    if let Some(n) = trials {
        opts.trials = n;
    }
    if let Some(n) = directions {
        opts.directions = n;
    }
    if let Some(seed) = common.seed {
        opts.seed = seed;
    }
    if opts.directions == 0 || opts.horizon == 0 {
        return Err(Failure::Usage(
            "directions and horizon must be positive".into(),
        ));
    }
    let checks = run_theory_checks(&opts)?;
    let mut out = String::new();
    let mut failed = Vec::new();
    for c in &checks {
        let status = match (c.passed, c.underpowered) {
            (_, true) => "UNDERPOWERED",
            (true, false) => "PASS",
            (false, false) => "FAIL",
        };
        out.push_str(&format!("{status:<12} {:<32} {}\n", c.name, c.detail));
        if c.underpowered {
            eprintln!(
                "warning: {} ran with too few samples to be conclusive",
                c.name
            );
        } else if !c.passed {
            failed.push(c.name);
        }
    }
    write_output(common.output.as_deref(), &out)?;
    if common.output.is_some() {
        std::io::stdout().write_all(out.as_bytes())?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numerical(format!(
            "failed checks: {}",
            failed.join(", ")
        )))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Generate {
            system,
            sigma_u,
            sigma_0,
            horizon,
            common,
        } => generate(*system, *sigma_u, *sigma_0, *horizon, common),
        Command::Learn {
            method,
            input,
            normalization,
            common,
        } => learn(*method, input, *normalization, common),
        Command::Benchmark {
            profile,
            trials,
            no_timing,
            common,
        } => benchmark(*profile, *trials, *no_timing, common),
        Command::Theory {
            mc_samples,
            trials,
            directions,
            common,
        } => theory(*mc_samples, *trials, *directions, common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(2)
        }
    }
}
