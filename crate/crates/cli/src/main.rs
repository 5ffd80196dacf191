//! `monomed`: estimate natural direct and indirect effects from a CSV, run
//! the simulation study, check the exact oracle, and render reports.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use monomed::dataset::{DataError, Dataset};
use monomed::estimator::{self, EffectEstimates, EstimationError, EstimatorConfig, HyVariant};
use monomed::oracle::{self, OracleReport};
use monomed::sim::{self, MetricsRow, SimMetrics, StudyConfig};
use serde::{Deserialize, Serialize};

use config::{DgmChoice, Format, RunConfig};

#[derive(Parser)]
#[command(name = "monomed", version, about = "Natural direct and indirect effects under monotone treatment take-up")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Subcommand)]
enum Command {
    /// Cross-fitted one-step estimates of θ(a,a'), NDE, NIE and ATE.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        a: Option<u8>,
        #[arg(long)]
        aprime: Option<u8>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        truncate: Option<f64>,
        /// Known P(A=1); the treatment model is then not fitted.
        #[arg(long)]
        randomized_a: Option<f64>,
    },
    /// Monte Carlo study over the specification scenarios.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        scenario: Option<Vec<String>>,
    },
    /// Exact truths, efficiency bounds, influence-function checks and the
    /// remainder table for a binary model.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        /// `benchmark`, `confounded` or `uniform`.
        #[arg(long)]
        dgm: Option<String>,
        #[arg(long, value_delimiter = ',')]
        eps: Option<Vec<f64>>,
    },
    /// Render stored simulation metrics as a table and an SVG chart.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Data(String),
    Estimation(String),
    Output(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Estimation(_) => 4,
            CliError::Output(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Estimation(m) | CliError::Output(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EstimationError> for CliError {
    fn from(e: EstimationError) -> Self {
        match e {
            EstimationError::Config(m) => CliError::Config(m),
            EstimationError::Data(d) => d.into(),
            other => CliError::Estimation(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Estimate {
            common,
            data,
            a,
            aprime,
            folds,
            truncate,
            randomized_a,
        } => estimate_cmd(&common, data, a, aprime, folds, truncate, randomized_a),
        Command::Simulate {
            common,
            reps,
            n,
            scenario,
        } => simulate_cmd(&common, reps, n, scenario),
        Command::OracleCheck { common, dgm, eps } => oracle_cmd(&common, dgm, eps),
        Command::Report { common, metrics, svg } => report_cmd(&common, metrics, svg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

struct Resolved {
    cfg: RunConfig,
    out: Option<PathBuf>,
    seed: u64,
    format: Format,
}

fn resolve(common: &Common) -> Result<Resolved, CliError> {
    let cfg = config::load(common.config.as_deref()).map_err(CliError::Config)?;
    Ok(Resolved {
        out: common.out.clone().or_else(|| cfg.out.clone()),
        seed: common.seed.or(cfg.seed).unwrap_or(0),
        format: common.format.or(cfg.format).unwrap_or_default(),
        cfg,
    })
}

/// Writes `body` to `out`, or to stdout. When it goes to stdout, the
/// human-readable `summary` goes to stderr instead.
fn emit(out: Option<&Path>, body: &str, summary: &str) -> Result<(), CliError> {
    match out {
        Some(p) => {
            std::fs::write(p, body).map_err(|e| CliError::Output(format!("{}: {e}", p.display())))?;
            print!("{summary}");
        }
        None => {
            print!("{body}");
            eprint!("{summary}");
        }
    }
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable output") + "\n"
}

#[allow(clippy::too_many_arguments)]
fn estimate_cmd(
    common: &Common,
    data: Option<PathBuf>,
    a: Option<u8>,
    aprime: Option<u8>,
    folds: Option<usize>,
    truncate: Option<f64>,
    randomized_a: Option<f64>,
) -> Result<(), CliError> {
    let r = resolve(common)?;
    let sec = &r.cfg.estimate;
    let mut est_sec = sec.clone();
    est_sec.a = a.unwrap_or(sec.a);
    est_sec.a_prime = aprime.unwrap_or(sec.a_prime);
    let estimand = est_sec.estimand().map_err(CliError::Config)?;
    let path = data
        .or_else(|| r.cfg.data.path.clone())
        .ok_or_else(|| CliError::Config("no data file: pass --data or set [data] path".into()))?;
    let columns = match r.cfg.data.columns.clone() {
        Some(c) => c,
        None => Dataset::infer_columns(&path)?,
    };
    let ec = EstimatorConfig {
        folds: folds.unwrap_or(sec.folds),
        truncation: truncate.unwrap_or(sec.truncation),
        learners: r.cfg.learners.resolve().map_err(CliError::Config)?,
        randomized_a: randomized_a.or(sec.randomized_a),
        clip_q_diff: sec.clip_q_diff,
        variant: sec.variant.unwrap_or_default(),
        stratify_folds: sec.stratify_folds,
        seed: r.seed,
    };
    ec.validate()?;
    let d = Dataset::load_csv(&path, &columns)?;
    let est = estimator::estimate(&d, &ec, estimand)?;
    let body = match r.format {
        Format::Json => to_json(&est),
        Format::Csv => estimates_csv(&est),
    };
    emit(r.out.as_deref(), &body, &estimate_summary(&est))
}

fn estimates_csv(e: &EffectEstimates) -> String {
    let mut s = String::from("quantity,est,se,ci_low,ci_high\n");
    for (k, t) in &e.theta {
        let _ = writeln!(
            s,
            "\"theta({k})\",{},{},{},{}",
            t.est,
            t.se,
            t.est - estimator::Z_95 * t.se,
            t.est + estimator::Z_95 * t.se
        );
    }
    for (name, eff) in [("nde", e.nde), ("nie", e.nie), ("ate", e.ate)] {
        let _ = writeln!(s, "{name},{},{},{},{}", eff.est, eff.se, eff.ci[0], eff.ci[1]);
    }
    s
}

fn estimate_summary(e: &EffectEstimates) -> String {
    let mut s = format!(
        "n = {}; theta({},{}) = {:.4} (SE {:.4})\n",
        e.n, e.estimand.a, e.estimand.a_prime, e.estimand.est, e.estimand.se
    );
    for (name, eff) in [("NDE", e.nde), ("NIE", e.nie), ("ATE", e.ate)] {
        let _ = writeln!(
            s,
            "{name}  {:>8.4}  (SE {:.4}; 95% CI {:.4} to {:.4})",
            eff.est, eff.se, eff.ci[0], eff.ci[1]
        );
    }
    for w in &e.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

#[derive(Debug, Serialize, Deserialize)]
struct SimulationOutput {
    dgm: String,
    metrics: Vec<SimMetrics>,
}

fn simulate_cmd(common: &Common, reps: Option<usize>, n: Option<Vec<usize>>, scenario: Option<Vec<String>>) -> Result<(), CliError> {
    let r = resolve(common)?;
    let mut sec = r.cfg.simulate.clone();
    if let Some(s) = scenario {
        sec.scenarios = s;
    }
    let dgm = sec.dgm.resolve().map_err(CliError::Config)?;
    let scenarios = sec.scenarios().map_err(CliError::Config)?;
    let ns = n.unwrap_or(sec.n.clone());
    let reps = reps.unwrap_or(sec.reps);
    let mut metrics = Vec::new();
    for &n in &ns {
        for &scenario in &scenarios {
            let cfg = StudyConfig {
                scenario,
                reps,
                n,
                folds: sec.folds,
                seed: r.seed,
                truncation: sec.truncation,
            };
            let (m, _) = sim::run_study(&dgm, &cfg).map_err(|e| match e {
                sim::SimError::TooFewReps(_) | sim::SimError::EmptySample | sim::SimError::Oracle(_) => {
                    CliError::Config(e.to_string())
                }
                other => CliError::Estimation(other.to_string()),
            })?;
            metrics.push(m);
        }
    }
    let table = sim::rows(&metrics);
    let body = match r.format {
        Format::Json => to_json(&SimulationOutput {
            dgm: dgm.name.clone(),
            metrics,
        }),
        Format::Csv => metrics_csv(&table)?,
    };
    emit(r.out.as_deref(), &body, &sim::render_text(&table))
}

fn metrics_csv(rows: &[MetricsRow]) -> Result<String, CliError> {
    let mut buf = Vec::new();
    sim::write_csv(rows, &mut buf).map_err(|e| CliError::Output(e.to_string()))?;
    Ok(String::from_utf8(buf).expect("csv is utf-8"))
}

fn oracle_cmd(common: &Common, dgm: Option<String>, eps: Option<Vec<f64>>) -> Result<(), CliError> {
    let r = resolve(common)?;
    let sec = &r.cfg.oracle;
    let model = dgm.map(DgmChoice::Named).unwrap_or(sec.dgm.clone()).resolve().map_err(CliError::Config)?;
    let adjudicate_on = sec.adjudicate_on.resolve().map_err(CliError::Config)?;
    let eps = eps.unwrap_or(sec.eps.clone());
    if eps.is_empty() {
        return Err(CliError::Config("eps must list at least one perturbation size".into()));
    }
    let report = oracle::oracle_report(&model, &adjudicate_on, HyVariant::default(), &eps)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let body = match r.format {
        Format::Json => to_json(&report),
        Format::Csv => remainder_csv(&report),
    };
    emit(r.out.as_deref(), &body, &oracle_summary(&report))
}

/// Remainder rows with the ratio of `|lhs|` at the previous (twice as
/// large) perturbation to `|lhs|` at this one.
fn remainder_csv(rep: &OracleReport) -> String {
    let mut s = String::from("a,a_prime,z,z_prime,eps,lhs,rhs,abs_diff,ratio\n");
    for (i, row) in rep.remainder.iter().enumerate() {
        let ratio = i
            .checked_sub(3)
            .map(|p| rep.remainder[p].lhs.abs() / row.lhs.abs())
            .map_or(String::new(), |v| v.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            row.a, row.a_prime, row.z, row.z_prime, row.eps, row.lhs, row.rhs, row.abs_diff, ratio
        );
    }
    s
}

fn oracle_summary(rep: &OracleReport) -> String {
    let t = &rep.truths;
    let mut s = format!(
        "model {}: theta(1,1) = {:.6}, theta(1,0) = {:.6}, theta(0,0) = {:.6}\n\
         NDE truth = {:.6}, bound = {:.6}\nNIE truth = {:.6}, bound = {:.6}\n",
        rep.dgm, t.theta11, t.theta10, t.theta00, t.nde, rep.bound_nde, t.nie, rep.bound_nie
    );
    let max_mz = rep.mean_zero.iter().map(|r| r.residual).fold(0.0, f64::max);
    let _ = writeln!(s, "max |E[D] - theta| = {max_mz:.2e} ({:?} weights)", rep.variant);
    let _ = writeln!(
        s,
        "variant adjudication on {}: {}",
        rep.adjudication.dgm,
        rep.adjudication
            .chosen
            .map_or("inconclusive".to_string(), |v| format!("{v:?}"))
    );
    let _ = writeln!(s, "{:>3} {:>3} {:>8} {:>12} {:>12} {:>10} {:>7}", "z", "z'", "eps", "lhs", "rhs", "|diff|", "ratio");
    for (i, row) in rep.remainder.iter().enumerate() {
        let ratio = i
            .checked_sub(3)
            .map_or(String::new(), |p| format!("{:.3}", rep.remainder[p].lhs.abs() / row.lhs.abs()));
        let _ = writeln!(
            s,
            "{:>3} {:>3} {:>8} {:>12.4e} {:>12.4e} {:>10.1e} {:>7}",
            row.z, row.z_prime, row.eps, row.lhs, row.rhs, row.abs_diff, ratio
        );
    }
    s
}

fn report_cmd(common: &Common, metrics: Option<PathBuf>, svg: Option<PathBuf>) -> Result<(), CliError> {
    let r = resolve(common)?;
    let path = metrics
        .or_else(|| r.cfg.report.metrics.clone())
        .ok_or_else(|| CliError::Config("no metrics store: pass --metrics or set [report] metrics".into()))?;
    let rows = load_metrics(&path)?;
    let svg_path = svg.or_else(|| r.cfg.report.svg.clone());
    if let Some(p) = &svg_path {
        std::fs::write(p, sim::render_svg(&rows)).map_err(|e| CliError::Output(format!("{}: {e}", p.display())))?;
    }
    let text = sim::render_text(&rows);
    match &r.out {
        Some(p) => {
            let body = match r.format {
                Format::Csv => metrics_csv(&rows)?,
                Format::Json => to_json(&rows),
            };
            std::fs::write(p, body).map_err(|e| CliError::Output(format!("{}: {e}", p.display())))?;
            print!("{text}");
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// Reads a metrics store written by `simulate`, as CSV or JSON.
fn load_metrics(path: &Path) -> Result<Vec<MetricsRow>, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        if bytes.iter().all(u8::is_ascii_whitespace) {
            return Ok(Vec::new());
        }
        let out: SimulationOutput =
            serde_json::from_slice(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Ok(sim::rows(&out.metrics))
    } else {
        sim::read_csv(&bytes[..]).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}
