//! Sampling from a binary structural model, the four-scenario Monte Carlo
//! study and its Table-1-style report.

use std::fmt::Write as _;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, ObservedRecord, OutcomeKind};
use crate::estimator::{self, EstimandSpec, EstimatorConfig, NuisanceSpecs};
use crate::learners::{LearnerSpec, Link};
use crate::oracle::{self, Contrast, DgmSpec, OracleError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("n must be at least 1")]
    EmptySample,
    #[error("at least 2 replications are needed for a Monte Carlo standard deviation, got {0}")]
    TooFewReps(usize),
    #[error("{failed} of {reps} replications failed, over the 1% budget; first error: {first}")]
    FailureBudget { failed: usize, reps: usize, first: String },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("metrics table: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `n` i.i.d. draws by ancestral sampling. Columns `W1..W3, A, Z, M, Y`.
pub fn sample_dgm(dgm: &DgmSpec, n: usize, seed: u64) -> Result<Dataset, SimError> {
    if n == 0 {
        return Err(SimError::EmptySample);
    }
    dgm.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = dgm.nodes();
    let records = (0..n)
        .map(|_| {
            let mut x = [0u8; 7];
            for (k, (_, node)) in nodes.iter().enumerate() {
                x[k] = (rng.gen::<f64>() < node.p1(&x)) as u8;
            }
            ObservedRecord {
                w: vec![x[0] as f64, x[1] as f64, x[2] as f64],
                a: x[3],
                z: x[4],
                m: vec![x[5] as f64],
                y: x[6] as f64,
            }
        })
        .collect();
    let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    Ok(Dataset::new(records, names(&["W1", "W2", "W3"]), names(&["M"]), OutcomeKind::Binary)
        .expect("sampled records are valid"))
}

/// Which nuisances get the default stack; the rest are intercept-only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    AllCorrect,
    GEQRCorrect,
    MuRhoGCorrect,
    MuRhoQCorrect,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::AllCorrect,
        Scenario::GEQRCorrect,
        Scenario::MuRhoGCorrect,
        Scenario::MuRhoQCorrect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::AllCorrect => "all_correct",
            Scenario::GEQRCorrect => "g_e_q_r_correct",
            Scenario::MuRhoGCorrect => "mu_rho_g_correct",
            Scenario::MuRhoQCorrect => "mu_rho_q_correct",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|sc| sc.name() == s)
    }

    /// Correctly specified slots, in `g, e, q, r, mu, rho` order.
    pub fn correct(self) -> [bool; 6] {
        match self {
            Scenario::AllCorrect => [true; 6],
            Scenario::GEQRCorrect => [true, true, true, true, false, false],
            Scenario::MuRhoGCorrect => [true, false, false, false, true, true],
            Scenario::MuRhoQCorrect => [false, false, true, false, true, true],
        }
    }

    pub fn specs(self, stack: &LearnerSpec) -> NuisanceSpecs {
        let [g, e, q, r, mu, rho] = self.correct();
        let pick = |ok: bool, link| {
            if ok {
                stack.clone().with_link(link)
            } else {
                LearnerSpec::intercept_only(link)
            }
        };
        NuisanceSpecs {
            g: pick(g, Link::Logit),
            q: pick(q, Link::Logit),
            e: pick(e, Link::Logit),
            r: pick(r, Link::Logit),
            mu: pick(mu, Link::Logit),
            rho: pick(rho, Link::Identity),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub scenario: Scenario,
    pub reps: usize,
    pub n: usize,
    pub folds: usize,
    pub seed: u64,
    pub truncation: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::AllCorrect,
            reps: 500,
            n: 10_000,
            folds: 2,
            seed: 1,
            truncation: 0.01,
        }
    }
}

/// One replication's NDE and NIE estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepResult {
    pub rep: usize,
    pub nde: (f64, f64, bool),
    pub nie: (f64, f64, bool),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectMetrics {
    pub truth: f64,
    pub bound: f64,
    pub mean_est: f64,
    pub abs_bias: f64,
    pub sqrt_n_abs_bias: f64,
    pub relse: f64,
    pub relsd: f64,
    pub relrmse: f64,
    pub coverage95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub scenario: Scenario,
    pub n: usize,
    pub reps: usize,
    pub failures: usize,
    pub seed: u64,
    pub nde: EffectMetrics,
    pub nie: EffectMetrics,
}

/// Order-independent sum: values are sorted before accumulation.
fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

/// Metrics from `(estimate, se, covered)` triples.
pub fn effect_metrics(values: &[(f64, f64, bool)], truth: f64, bound: f64, n: usize) -> EffectMetrics {
    let r = values.len() as f64;
    let nf = n as f64;
    let mean_est = sorted_sum(values.iter().map(|v| v.0).collect()) / r;
    let mean_se = sorted_sum(values.iter().map(|v| v.1).collect()) / r;
    let var = sorted_sum(values.iter().map(|v| (v.0 - mean_est).powi(2)).collect()) / (r - 1.0);
    let mse = sorted_sum(values.iter().map(|v| (v.0 - truth).powi(2)).collect()) / r;
    let mc_sd = var.sqrt();
    let abs_bias = (mean_est - truth).abs();
    EffectMetrics {
        truth,
        bound,
        mean_est,
        abs_bias,
        sqrt_n_abs_bias: nf.sqrt() * abs_bias,
        relse: mean_se / mc_sd,
        relsd: nf.sqrt() * mc_sd / bound.sqrt(),
        relrmse: nf * mse / bound,
        coverage95: values.iter().filter(|v| v.2).count() as f64 / r,
    }
}

/// Per-replication seeds `(data, estimator)` from a stream-split generator.
pub fn rep_seeds(seed: u64, rep: usize) -> (u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    (rng.gen(), rng.gen())
}

pub fn run_rep(dgm: &DgmSpec, cfg: &StudyConfig, specs: &NuisanceSpecs, truths: &oracle::EffectTruths, rep: usize) -> Result<RepResult, String> {
    let (data_seed, est_seed) = rep_seeds(cfg.seed, rep);
    let d = sample_dgm(dgm, cfg.n, data_seed).map_err(|e| e.to_string())?;
    let ec = EstimatorConfig {
        folds: cfg.folds,
        truncation: cfg.truncation,
        learners: specs.clone(),
        seed: est_seed,
        ..EstimatorConfig::default()
    };
    let est = estimator::estimate(&d, &ec, EstimandSpec::new(1, 0)).map_err(|e| e.to_string())?;
    Ok(RepResult {
        rep,
        nde: (est.nde.est, est.nde.se, est.nde.covers(truths.nde)),
        nie: (est.nie.est, est.nie.se, est.nie.covers(truths.nie)),
    })
}

/// Runs `cfg.reps` replications in parallel with the default stack in the
/// correctly specified slots.
pub fn run_study(dgm: &DgmSpec, cfg: &StudyConfig) -> Result<(SimMetrics, Vec<RepResult>), SimError> {
    run_study_with(dgm, cfg, &LearnerSpec::default_stack(Link::Logit))
}

pub fn run_study_with(dgm: &DgmSpec, cfg: &StudyConfig, stack: &LearnerSpec) -> Result<(SimMetrics, Vec<RepResult>), SimError> {
    if cfg.reps < 2 {
        return Err(SimError::TooFewReps(cfg.reps));
    }
    if cfg.n == 0 {
        return Err(SimError::EmptySample);
    }
    let truths = oracle::effect_truths(dgm)?;
    let variant = estimator::HyVariant::default();
    let bound_nde = oracle::efficiency_bound(dgm, Contrast::Nde, variant)?;
    let bound_nie = oracle::efficiency_bound(dgm, Contrast::Nie, variant)?;
    let specs = cfg.scenario.specs(stack);
    let outcomes: Vec<Result<RepResult, String>> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| run_rep(dgm, cfg, &specs, &truths, rep))
        .collect();
    let mut reps = Vec::with_capacity(cfg.reps);
    let mut errors = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => reps.push(r),
            Err(e) => errors.push(e),
        }
    }
    if errors.len() * 100 > cfg.reps {
        return Err(SimError::FailureBudget {
            failed: errors.len(),
            reps: cfg.reps,
            first: errors[0].clone(),
        });
    }
    let metrics = metrics_from_reps(cfg, &reps, errors.len(), &truths, bound_nde, bound_nie);
    Ok((metrics, reps))
}

pub fn metrics_from_reps(
    cfg: &StudyConfig,
    reps: &[RepResult],
    failures: usize,
    truths: &oracle::EffectTruths,
    bound_nde: f64,
    bound_nie: f64,
) -> SimMetrics {
    let nde: Vec<_> = reps.iter().map(|r| r.nde).collect();
    let nie: Vec<_> = reps.iter().map(|r| r.nie).collect();
    SimMetrics {
        scenario: cfg.scenario,
        n: cfg.n,
        reps: reps.len(),
        failures,
        seed: cfg.seed,
        nde: effect_metrics(&nde, truths.nde, bound_nde, cfg.n),
        nie: effect_metrics(&nie, truths.nie, bound_nie, cfg.n),
    }
}

/// One row of the flat metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub effect: String,
    pub scenario: String,
    pub n: usize,
    pub reps: usize,
    pub abs_bias: f64,
    pub sqrt_n_abs_bias: f64,
    pub relse: f64,
    pub relsd: f64,
    pub relrmse: f64,
    pub coverage95: f64,
}

pub const TABLE_COLUMNS: [&str; 10] = [
    "effect",
    "scenario",
    "n",
    "reps",
    "abs_bias",
    "sqrt_n_abs_bias",
    "relse",
    "relsd",
    "relrmse",
    "coverage95",
];

pub fn rows(metrics: &[SimMetrics]) -> Vec<MetricsRow> {
    let mut out = Vec::new();
    for (effect, pick) in [
        ("nde", (|m: &SimMetrics| m.nde) as fn(&SimMetrics) -> EffectMetrics),
        ("nie", |m: &SimMetrics| m.nie),
    ] {
        for m in metrics {
            let e = pick(m);
            out.push(MetricsRow {
                effect: effect.into(),
                scenario: m.scenario.name().into(),
                n: m.n,
                reps: m.reps,
                abs_bias: e.abs_bias,
                sqrt_n_abs_bias: e.sqrt_n_abs_bias,
                relse: e.relse,
                relsd: e.relsd,
                relrmse: e.relrmse,
                coverage95: e.coverage95,
            });
        }
    }
    out
}

pub fn write_csv<W: Write>(rows: &[MetricsRow], w: W) -> Result<(), SimError> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(TABLE_COLUMNS)?;
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<MetricsRow>, SimError> {
    let mut rd = csv::Reader::from_reader(r);
    rd.deserialize().map(|r| r.map_err(SimError::from)).collect()
}

/// Fixed-width text in a tabular layout: one block per
/// effect, rows grouped by sample size.
pub fn render_text(rows: &[MetricsRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<6} {:<18} {:>7} {:>5} {:>9} {:>15} {:>7} {:>7} {:>8} {:>10}",
        "effect", "scenario", "n", "reps", "|bias|", "sqrt(n)|bias|", "relse", "relsd", "relrmse", "95%CI Cov"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<6} {:<18} {:>7} {:>5} {:>9.4} {:>15.4} {:>7.3} {:>7.3} {:>8.3} {:>10.3}",
            r.effect, r.scenario, r.n, r.reps, r.abs_bias, r.sqrt_n_abs_bias, r.relse, r.relsd, r.relrmse, r.coverage95
        );
    }
    s
}

/// Coverage against sample size, one line per effect and scenario.
pub fn render_svg(rows: &[MetricsRow]) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let mut ns: Vec<usize> = rows.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    let x_of = |n: usize| {
        if ns.len() < 2 {
            return w / 2.0;
        }
        let (lo, hi) = ((ns[0] as f64).ln(), (*ns.last().unwrap() as f64).ln());
        pad + ((n as f64).ln() - lo) / (hi - lo) * (w - 2.0 * pad)
    };
    let y_of = |c: f64| h - pad - c * (h - 2.0 * pad);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{yb}\" x2=\"{xr}\" y2=\"{yb}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{yb}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{y95}\" x2=\"{xr}\" y2=\"{y95}\" stroke=\"grey\" stroke-dasharray=\"4\"/>\n\
         <text x=\"{tx}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">95% CI coverage by sample size</text>\n",
        yb = h - pad,
        xr = w - pad,
        y95 = y_of(0.95),
        tx = w / 2.0,
    );
    for n in &ns {
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"11\">{n}</text>",
            x_of(*n),
            h - pad + 16.0
        );
    }
    let colors = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"];
    let mut series: Vec<(String, String)> = rows.iter().map(|r| (r.effect.clone(), r.scenario.clone())).collect();
    series.sort();
    series.dedup();
    for (i, (effect, scenario)) in series.iter().enumerate() {
        let mut pts: Vec<&MetricsRow> = rows.iter().filter(|r| &r.effect == effect && &r.scenario == scenario).collect();
        pts.sort_by_key(|r| r.n);
        let path: Vec<String> = pts
            .iter()
            .map(|r| format!("{:.1},{:.1}", x_of(r.n), y_of(r.coverage95)))
            .collect();
        let color = colors[i % colors.len()];
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            path.join(" ")
        );
        for p in &path {
            let (x, y) = p.split_once(',').unwrap();
            let _ = writeln!(s, "<circle cx=\"{x}\" cy=\"{y}\" r=\"3\" fill=\"{color}\"/>");
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" fill=\"{color}\">{effect} {scenario}</text>",
            pad + 10.0,
            pad + 14.0 * (i as f64 + 1.0)
        );
    }
    s.push_str("</svg>\n");
    s
}
