//! Cross-fitted one-step estimation of `θ(a,a') = E[Y_{a, M_{a'}}]` and of
//! the natural direct, indirect and total effects.
//!
//! `θ(a,a')` splits into three terms indexed by `(z,z') ∈ {(1,1),(1,0),(0,0)}`
//! (always-takers, compliers, never-takers under monotonicity). Each term's
//! uncentered influence function is
//!
//! ```text
//! D_{z,z'} = H_Y (Y - μ(A,M,Z,W)) + H_Z (Z - P(Z=1|A,W)) + H_M (μ(a,M,z,W) - ρ_{z,z'}(W)) + H_W
//! ```
//!
//! and the estimator is the sample mean of `D = D_{1,1} + D_{1,0} + D_{0,0}`
//! with every nuisance predicted out-of-fold.
//!
//! Nuisances, for fixed `(a, a')`:
//! - `g(a|W) = P(A=a|W)`
//! - `q(z|a,W) = P(Z=z|A=a,W)`
//! - `e(a|M,z,W) = P(A=a|M,Z=z,W)`
//! - `r(z|M,a',W) = P(Z=z|M,A=a',W)`
//! - `μ(a,M,z,W) = E(Y|M,Z=z,A=a,W)`
//! - `ρ_{z,z'}(W) = ∫ μ(a,m,z,W) dP(m|a',z',W)`

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crossfit::{
    self, az_stratum, m_columns, w_columns, Column, CrossFitError, CrossFitModels, CrossFitPredictions,
    FoldPlan, Overrides,
};
use crate::dataset::{self, DataError, Dataset, ObservedRecord, OutcomeKind, PositivityFlags, PropensitySummary};
use crate::learners::{Link, LearnerSpec};

/// The `(z, z')` index of the three terms, in storage order.
pub const Z_PAIRS: [(u8, u8); 3] = [(1, 1), (1, 0), (0, 0)];

/// Normal quantile for two-sided 95% intervals.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("nuisance regression failed: {0}")]
    Nuisance(#[from] CrossFitError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EstimandSpec {
    pub a: u8,
    pub a_prime: u8,
}

impl EstimandSpec {
    pub const fn new(a: u8, a_prime: u8) -> Self {
        Self { a, a_prime }
    }

    /// The three `(a, a')` pairs needed for NDE, NIE and ATE.
    pub const CONTRASTS: [EstimandSpec; 3] = [Self::new(1, 1), Self::new(1, 0), Self::new(0, 0)];
}

/// Which form of the `H_{Y,0,0}` weight to use.
///
/// `InverseGA` leads with `1{Z=0,A=a}/g(a|W)`. `InverseGAPrime` leads with
/// `1{Z=0,A=a}/g(a'|W)`, the density ratio `p(m|a',0,w)/p(m|a,0,w)` written
/// through `e` and `q`. The two coincide whenever `g(a|W) = g(a'|W)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyVariant {
    InverseGA,
    InverseGAPrime,
}

#[derive(Debug, Deserialize)]
struct VariantFixture {
    variant: HyVariant,
}

impl HyVariant {
    /// The variant recorded by the oracle adjudication in
    /// `fixtures/eif_variant.json`.
    pub fn adjudicated() -> Self {
        let fx: VariantFixture = serde_json::from_str(include_str!("../fixtures/eif_variant.json"))
            .expect("eif_variant.json is valid");
        fx.variant
    }
}

impl Default for HyVariant {
    fn default() -> Self {
        Self::adjudicated()
    }
}

/// Options that change how weights are formed from a nuisance row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EifOptions {
    pub variant: HyVariant,
    /// Clip `q(1|a,W) - q(1|a',W)` at zero.
    pub clip_q_diff: bool,
}

impl Default for EifOptions {
    fn default() -> Self {
        Self {
            variant: HyVariant::default(),
            clip_q_diff: false,
        }
    }
}

/// Nuisance values for one observation at a fixed `(a, a')`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NuisanceRow {
    pub g_a: f64,
    pub g_ap: f64,
    /// `P(Z=1|A=a,W)`, `P(Z=1|A=a',W)`.
    pub q1_a: f64,
    pub q1_ap: f64,
    /// `P(Z=1|A=A_i,W)` at the observed treatment.
    pub q1_obs: f64,
    pub e_a_z1: f64,
    pub e_ap_z1: f64,
    pub e_a_z0: f64,
    pub e_ap_z0: f64,
    /// `P(Z=1|M,A=a',W)`.
    pub r1_ap: f64,
    pub mu_a_z1: f64,
    pub mu_a_z0: f64,
    /// `μ` at the observed `(A, Z)`.
    pub mu_obs: f64,
    pub rho11: f64,
    pub rho10: f64,
    pub rho00: f64,
}

impl NuisanceRow {
    fn q_diff(&self, clip: bool) -> f64 {
        let d = self.q1_a - self.q1_ap;
        if clip {
            d.max(0.0)
        } else {
            d
        }
    }

    fn rho(&self, k: usize) -> f64 {
        [self.rho11, self.rho10, self.rho00][k]
    }

    fn mu_a(&self, z: u8) -> f64 {
        if z == 1 {
            self.mu_a_z1
        } else {
            self.mu_a_z0
        }
    }
}

/// `H` weights for one observation, indexed like [`Z_PAIRS`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HWeights {
    pub y: [f64; 3],
    pub m: [f64; 3],
    pub z: [f64; 3],
    pub w: [f64; 3],
}

fn ind(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

pub fn eif_weights(rec: &ObservedRecord, n: &NuisanceRow, est: EstimandSpec, opts: EifOptions) -> HWeights {
    let (a, ap) = (est.a, est.a_prime);
    let (obs_a, obs_z) = (rec.a, rec.z);
    let q_diff = n.q_diff(opts.clip_q_diff);
    let q0_a = 1.0 - n.q1_a;
    let q0_ap = 1.0 - n.q1_ap;
    let e_ratio_1 = n.e_ap_z1 / n.e_a_z1;
    let e_ratio_0 = n.e_ap_z0 / n.e_a_z0;
    let r_ratio = (1.0 - n.r1_ap) / n.r1_ap;

    let z1_a = ind(obs_z == 1 && obs_a == a);
    let z0_a = ind(obs_z == 0 && obs_a == a);
    let z1_ap = ind(obs_z == 1 && obs_a == ap);
    let z0_ap = ind(obs_z == 0 && obs_a == ap);
    let is_a = ind(obs_a == a);
    let is_ap = ind(obs_a == ap);

    let hy00_lead = match opts.variant {
        HyVariant::InverseGA => z0_a / n.g_a,
        HyVariant::InverseGAPrime => z0_a / n.g_ap,
    };
    HWeights {
        y: [
            z1_a / n.g_ap * e_ratio_1,
            z1_a / (n.g_ap * q0_ap) * e_ratio_1 * r_ratio * q_diff,
            hy00_lead * e_ratio_0 * q0_a / q0_ap,
        ],
        m: [
            z1_ap / n.g_ap,
            z0_ap / (q0_ap * n.g_ap) * q_diff,
            z0_ap / (q0_ap * n.g_ap) * q0_a,
        ],
        z: [
            is_ap / n.g_ap * n.rho11,
            (is_a / n.g_a - is_ap / n.g_ap) * n.rho10,
            -is_a / n.g_a * n.rho00,
        ],
        w: [n.rho11 * n.q1_ap, n.rho10 * q_diff, n.rho00 * q0_a],
    }
}

/// `D_{z,z'}` for each term and their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub d: [f64; 3],
    pub total: f64,
}

pub fn eif_contribution(rec: &ObservedRecord, n: &NuisanceRow, h: &HWeights) -> Contribution {
    let y_resid = rec.y - n.mu_obs;
    let z_resid = rec.z as f64 - n.q1_obs;
    let mut d = [0.0; 3];
    for (k, &(z, _)) in Z_PAIRS.iter().enumerate() {
        d[k] = h.y[k] * y_resid + h.z[k] * z_resid + h.m[k] * (n.mu_a(z) - n.rho(k)) + h.w[k];
    }
    Contribution {
        d,
        total: d[0] + d[1] + d[2],
    }
}

/// Per-observation weights and contributions for one `(a, a')`.
#[derive(Debug, Clone, PartialEq)]
pub struct EifEvaluation {
    pub estimand: EstimandSpec,
    pub weights: Vec<HWeights>,
    pub contributions: Vec<Contribution>,
}

impl EifEvaluation {
    pub fn evaluate(d: &Dataset, rows: &[NuisanceRow], est: EstimandSpec, opts: EifOptions) -> Self {
        let (weights, contributions) = d
            .records()
            .iter()
            .zip(rows)
            .map(|(rec, n)| {
                let h = eif_weights(rec, n, est, opts);
                (h, eif_contribution(rec, n, &h))
            })
            .unzip();
        Self {
            estimand: est,
            weights,
            contributions,
        }
    }

    pub fn totals(&self) -> Vec<f64> {
        self.contributions.iter().map(|c| c.total).collect()
    }

    /// Sample means of `D_{1,1}`, `D_{1,0}`, `D_{0,0}`.
    pub fn term_means(&self) -> [f64; 3] {
        let n = self.contributions.len() as f64;
        let mut s = [0.0; 3];
        for c in &self.contributions {
            for k in 0..3 {
                s[k] += c.d[k];
            }
        }
        s.map(|v| v / n)
    }
}

/// Learner for each nuisance regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSpecs {
    pub g: LearnerSpec,
    pub q: LearnerSpec,
    pub e: LearnerSpec,
    pub r: LearnerSpec,
    /// The link is replaced by the outcome's natural link at fit time.
    pub mu: LearnerSpec,
    pub rho: LearnerSpec,
}

impl NuisanceSpecs {
    pub fn uniform(stack: &LearnerSpec) -> Self {
        Self {
            g: stack.clone().with_link(Link::Logit),
            q: stack.clone().with_link(Link::Logit),
            e: stack.clone().with_link(Link::Logit),
            r: stack.clone().with_link(Link::Logit),
            mu: stack.clone().with_link(Link::Logit),
            rho: stack.clone().with_link(Link::Identity),
        }
    }
}

impl Default for NuisanceSpecs {
    fn default() -> Self {
        Self::uniform(&LearnerSpec::default_stack(Link::Logit))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub folds: usize,
    pub truncation: f64,
    pub learners: NuisanceSpecs,
    /// Known `P(A=1)` when treatment is randomized; `g` is then not fitted.
    pub randomized_a: Option<f64>,
    pub clip_q_diff: bool,
    pub variant: HyVariant,
    /// Balance folds within `(A, Z)` cells.
    pub stratify_folds: bool,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            folds: 2,
            truncation: 0.01,
            learners: NuisanceSpecs::default(),
            randomized_a: None,
            clip_q_diff: false,
            variant: HyVariant::default(),
            stratify_folds: false,
            seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<(), EstimationError> {
        if !(self.truncation > 0.0 && self.truncation < 0.5) {
            return Err(EstimationError::Config(format!(
                "truncation must lie in (0, 0.5), got {}",
                self.truncation
            )));
        }
        if self.folds < 2 {
            return Err(EstimationError::Config(format!("folds must be >= 2, got {}", self.folds)));
        }
        if let Some(p) = self.randomized_a {
            if !(p > 0.0 && p < 1.0) {
                return Err(EstimationError::Config(format!(
                    "randomized P(A=1) must lie in (0, 1), got {p}"
                )));
            }
        }
        Ok(())
    }

    fn eif_options(&self) -> EifOptions {
        EifOptions {
            variant: self.variant,
            clip_q_diff: self.clip_q_diff,
        }
    }
}

/// Pseudo-outcome regressions for one `(a, z)`: `μ(a,M,z,W)` regressed on
/// `(A, Z, W)`. The fold-`j` model is trained on fold-`j` training rows with
/// pseudo-outcomes from the fold-`j` outcome model, so nothing from the
/// validation fold enters.
#[derive(Debug, Clone)]
pub struct RhoModels {
    pub models: CrossFitModels,
    /// Per-fold range of the pseudo-outcome; predictions are clamped to it
    /// for binary outcomes.
    pub range: Vec<(f64, f64)>,
    pub clamp: bool,
}

impl RhoModels {
    pub fn predict(&self, d: &Dataset, plan: &FoldPlan, a_prime: u8, z_prime: u8) -> CrossFitPredictions {
        let mut p = self.models.predict(d, plan, Overrides::az(a_prime, z_prime));
        if self.clamp {
            for (i, v) in p.values.iter_mut().enumerate() {
                let (lo, hi) = self.range[plan.assignment[i]];
                *v = v.clamp(lo, hi);
            }
        }
        p
    }
}

fn rho_features(d: &Dataset) -> Vec<Column> {
    let mut f = vec![Column::A, Column::Z];
    f.extend(w_columns(d));
    f
}

#[allow(clippy::too_many_arguments)]
pub fn fit_rho_models(
    d: &Dataset,
    plan: &FoldPlan,
    mu: &CrossFitModels,
    spec: &LearnerSpec,
    a: u8,
    z: u8,
    seed: u64,
) -> Result<RhoModels, CrossFitError> {
    let n = d.len();
    let mut pseudo = vec![vec![f64::NAN; n]; plan.folds];
    let mut range = Vec::with_capacity(plan.folds);
    for (j, col) in pseudo.iter_mut().enumerate() {
        let rows = plan.training(j);
        let vals = mu.predict_fold(d, j, &rows, Overrides::az(a, z));
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        range.push((lo, hi));
        for (&i, v) in rows.iter().zip(vals) {
            col[i] = v;
        }
    }
    let producer = format!("rho[mu(a={a},M,z={z},W)] ~ A+Z+W");
    let models = crossfit::crossfit_fit(
        d,
        plan,
        &spec.clone().with_link(Link::Identity),
        &producer,
        |j, i| pseudo[j][i],
        &rho_features(d),
        None::<fn(&ObservedRecord) -> bool>,
        seed,
    )?;
    Ok(RhoModels {
        models,
        range,
        clamp: d.y_kind() == OutcomeKind::Binary,
    })
}

/// `ρ` for one `(a, z, a', z')`: fit the pseudo-outcome regression and
/// predict with `A = a'`, `Z = z'`.
#[allow(clippy::too_many_arguments)]
pub fn fit_rho(
    d: &Dataset,
    plan: &FoldPlan,
    mu: &CrossFitModels,
    spec: &LearnerSpec,
    a: u8,
    z: u8,
    a_prime: u8,
    z_prime: u8,
    seed: u64,
) -> Result<CrossFitPredictions, CrossFitError> {
    Ok(fit_rho_models(d, plan, mu, spec, a, z, seed)?.predict(d, plan, a_prime, z_prime))
}

/// Out-of-fold predictions of every nuisance at every slot needed by the
/// requested estimands. Probability slots are already truncated.
#[derive(Debug, Clone)]
pub struct NuisanceBank {
    /// `P(A=1|W)`.
    pub g1: Vec<f64>,
    /// `q1[a][i] = P(Z=1|A=a,W_i)`.
    pub q1: [Vec<f64>; 2],
    /// `e1[z][i] = P(A=1|M_i,Z=z,W_i)`.
    pub e1: [Vec<f64>; 2],
    /// `r1[a][i] = P(Z=1|M_i,A=a,W_i)`.
    pub r1: [Vec<f64>; 2],
    /// `mu[a][z][i] = μ(a,M_i,z,W_i)`.
    pub mu: [[Vec<f64>; 2]; 2],
    pub mu_obs: Vec<f64>,
    /// Keyed by `(a, z, a', z')`.
    pub rho: HashMap<(u8, u8, u8, u8), Vec<f64>>,
    pub truncated: usize,
    pub truncation: f64,
    pub warnings: Vec<String>,
    /// Every trained regression (treatment, take-up, mediator-side and
    /// outcome models, then one per pseudo-outcome regression).
    pub fits: Vec<CrossFitModels>,
}

impl NuisanceBank {
    pub fn row(&self, i: usize, rec: &ObservedRecord, est: EstimandSpec) -> NuisanceRow {
        let (a, ap) = (est.a as usize, est.a_prime as usize);
        let g = |x: usize| if x == 1 { self.g1[i] } else { 1.0 - self.g1[i] };
        let e = |x: usize, z: usize| {
            if x == 1 {
                self.e1[z][i]
            } else {
                1.0 - self.e1[z][i]
            }
        };
        let rho = |z: u8, zp: u8| self.rho[&(est.a, z, est.a_prime, zp)][i];
        NuisanceRow {
            g_a: g(a),
            g_ap: g(ap),
            q1_a: self.q1[a][i],
            q1_ap: self.q1[ap][i],
            q1_obs: self.q1[rec.a as usize][i],
            e_a_z1: e(a, 1),
            e_ap_z1: e(ap, 1),
            e_a_z0: e(a, 0),
            e_ap_z0: e(ap, 0),
            r1_ap: self.r1[ap][i],
            mu_a_z1: self.mu[a][1][i],
            mu_a_z0: self.mu[a][0][i],
            mu_obs: self.mu_obs[i],
            rho11: rho(1, 1),
            rho10: rho(1, 0),
            rho00: rho(0, 0),
        }
    }

    pub fn rows(&self, d: &Dataset, est: EstimandSpec) -> Vec<NuisanceRow> {
        d.records()
            .iter()
            .enumerate()
            .map(|(i, rec)| self.row(i, rec, est))
            .collect()
    }

    pub fn propensity_summary(&self) -> PropensitySummary {
        let lo = self.truncation;
        let hi = 1.0 - self.truncation;
        let at_bound = |v: &[f64]| v.iter().any(|&p| p <= lo || p >= hi);
        let at_low = |v: &[f64]| v.iter().any(|&p| p <= lo);
        let at_high = |v: &[f64]| v.iter().any(|&p| p >= hi);
        let slots: Vec<&Vec<f64>> = [&self.g1]
            .into_iter()
            .chain(self.q1.iter())
            .chain(self.e1.iter())
            .chain(self.r1.iter())
            .collect();
        let min = slots.iter().flat_map(|v| v.iter()).copied().fold(f64::INFINITY, f64::min);
        let max = slots.iter().flat_map(|v| v.iter()).copied().fold(f64::NEG_INFINITY, f64::max);
        let negative_q_diff = self.q1[1].iter().zip(&self.q1[0]).filter(|(x, y)| *x - *y < 0.0).count();
        PropensitySummary {
            min,
            max,
            truncated: self.truncated,
            negative_q_diff,
            positivity: PositivityFlags {
                treatment: at_bound(&self.g1),
                confounder_11: self.q1.iter().any(|v| at_low(v)),
                confounder_10: self.q1.iter().any(|v| at_bound(v)),
                confounder_00: self.q1.iter().any(|v| at_high(v)),
                mediator: self.e1.iter().chain(self.r1.iter()).any(|v| at_bound(v)),
            },
        }
    }
}

/// Which `(a, z)` pseudo-outcome regressions and `(a', z')` predictions the
/// estimands need.
fn rho_plan(estimands: &[EstimandSpec]) -> BTreeMap<(u8, u8), Vec<(u8, u8)>> {
    let mut plan: BTreeMap<(u8, u8), Vec<(u8, u8)>> = BTreeMap::new();
    for est in estimands {
        for &(z, zp) in &Z_PAIRS {
            let slot = plan.entry((est.a, z)).or_default();
            if !slot.contains(&(est.a_prime, zp)) {
                slot.push((est.a_prime, zp));
            }
        }
    }
    plan
}

fn truncate(values: &mut [f64], delta: f64) -> usize {
    let mut count = 0;
    for v in values.iter_mut() {
        let t = v.clamp(delta, 1.0 - delta);
        if t != *v {
            count += 1;
            *v = t;
        }
    }
    count
}

fn seed_for(seed: u64, slot: u64) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(slot.wrapping_mul(0x9E37_79B9))
}

/// Fits every regression once and predicts all slots needed by `estimands`.
pub fn fit_nuisance_bank(
    d: &Dataset,
    plan: &FoldPlan,
    cfg: &EstimatorConfig,
    estimands: &[EstimandSpec],
) -> Result<NuisanceBank, EstimationError> {
    cfg.validate()?;
    let specs = &cfg.learners;
    let w = w_columns(d);
    let m = m_columns(d);
    let cat = |parts: &[&[Column]]| parts.iter().flat_map(|p| p.iter().copied()).collect::<Vec<_>>();
    let recs = d.records();
    let mu_link = match d.y_kind() {
        OutcomeKind::Binary => Link::Logit,
        OutcomeKind::Continuous => Link::Identity,
    };
    let no_subset = None::<fn(&ObservedRecord) -> bool>;

    let g_feats = w.clone();
    let q_feats = cat(&[&[Column::A], &w]);
    let e_feats = cat(&[&m, &[Column::Z], &w]);
    let r_feats = cat(&[&m, &[Column::A], &w]);
    let mu_feats = cat(&[&m, &[Column::Z, Column::A], &w]);

    // the five base regressions are independent
    type Job<'a> = (&'a str, LearnerSpec, Column, &'a [Column], u64);
    let jobs: Vec<Job> = vec![
        ("g: A ~ W", specs.g.clone().with_link(Link::Logit), Column::A, &g_feats, 1),
        ("q: Z ~ A+W", specs.q.clone().with_link(Link::Logit), Column::Z, &q_feats, 2),
        ("e: A ~ M+Z+W", specs.e.clone().with_link(Link::Logit), Column::A, &e_feats, 3),
        ("r: Z ~ M+A+W", specs.r.clone().with_link(Link::Logit), Column::Z, &r_feats, 4),
        ("mu: Y ~ M+Z+A+W", specs.mu.clone().with_link(mu_link), Column::Y, &mu_feats, 5),
    ];
    let skip_g = cfg.randomized_a.is_some();
    let fitted: Vec<Option<CrossFitModels>> = jobs
        .par_iter()
        .map(|(name, spec, target, feats, slot)| {
            if skip_g && *slot == 1 {
                return Ok(None);
            }
            crossfit::crossfit_fit(
                d,
                plan,
                spec,
                name,
                |_, i| match target {
                    Column::A => recs[i].a as f64,
                    Column::Z => recs[i].z as f64,
                    _ => recs[i].y,
                },
                feats,
                no_subset,
                seed_for(cfg.seed, *slot),
            )
            .map(Some)
        })
        .collect::<Result<_, CrossFitError>>()?;
    let [g_m, q_m, e_m, r_m, mu_m]: [Option<CrossFitModels>; 5] =
        fitted.try_into().expect("five regressions");
    let (q_m, e_m, r_m, mu_m) = (q_m.unwrap(), e_m.unwrap(), r_m.unwrap(), mu_m.unwrap());

    let mut warnings = Vec::new();
    for models in [g_m.as_ref(), Some(&q_m), Some(&e_m), Some(&r_m), Some(&mu_m)]
        .into_iter()
        .flatten()
    {
        warnings.extend(models.warnings.iter().cloned());
    }

    let delta = cfg.truncation;
    let mut truncated = 0;
    let mut g1 = match (&g_m, cfg.randomized_a) {
        (_, Some(p)) => vec![p; d.len()],
        (Some(models), None) => models.predict(d, plan, Overrides::NONE).values,
        (None, None) => unreachable!("g is fitted unless randomized"),
    };
    truncated += truncate(&mut g1, delta);
    let mut slot2 = |models: &CrossFitModels, at: [Overrides; 2]| {
        at.map(|o| {
            let mut v = models.predict(d, plan, o).values;
            truncated += truncate(&mut v, delta);
            v
        })
    };
    let q1 = slot2(&q_m, [Overrides::a(0), Overrides::a(1)]);
    let e1 = slot2(
        &e_m,
        [
            Overrides { a: None, z: Some(0) },
            Overrides { a: None, z: Some(1) },
        ],
    );
    let r1 = slot2(&r_m, [Overrides::a(0), Overrides::a(1)]);
    let mu = [0u8, 1].map(|a| [0u8, 1].map(|z| mu_m.predict(d, plan, Overrides::az(a, z)).values));
    let mu_obs = mu_m.predict(d, plan, Overrides::NONE).values;

    let rho_jobs: Vec<((u8, u8), Vec<(u8, u8)>)> = rho_plan(estimands).into_iter().collect();
    let rho_fits: Vec<(CrossFitModels, Vec<((u8, u8, u8, u8), Vec<f64>)>)> = rho_jobs
        .par_iter()
        .map(|((a, z), targets)| {
            let models = fit_rho_models(
                d,
                plan,
                &mu_m,
                &specs.rho,
                *a,
                *z,
                seed_for(cfg.seed, 10 + 2 * *a as u64 + *z as u64),
            )?;
            let preds = targets
                .iter()
                .map(|&(ap, zp)| ((*a, *z, ap, zp), models.predict(d, plan, ap, zp).values))
                .collect();
            Ok((models.models, preds))
        })
        .collect::<Result<_, CrossFitError>>()?;
    let mut fits: Vec<CrossFitModels> = [g_m, Some(q_m), Some(e_m), Some(r_m), Some(mu_m)]
        .into_iter()
        .flatten()
        .collect();
    let mut rho = HashMap::new();
    for (models, preds) in rho_fits {
        for w in &models.warnings {
            if !warnings.contains(w) {
                warnings.push(w.clone());
            }
        }
        fits.push(models);
        rho.extend(preds);
    }
    if truncated > 0 {
        warnings.push(format!(
            "{truncated} probability predictions truncated to [{delta}, {}]",
            1.0 - delta
        ));
    }
    Ok(NuisanceBank {
        g1,
        q1,
        e1,
        r1,
        mu,
        mu_obs,
        rho,
        truncated,
        truncation: delta,
        warnings,
        fits,
    })
}

/// Nuisance rows for a single `(a, a')`.
#[derive(Debug, Clone)]
pub struct NuisanceFits {
    pub estimand: EstimandSpec,
    pub rows: Vec<NuisanceRow>,
    pub truncated: usize,
    pub warnings: Vec<String>,
}

pub fn fit_nuisances(
    d: &Dataset,
    plan: &FoldPlan,
    cfg: &EstimatorConfig,
    est: EstimandSpec,
) -> Result<NuisanceFits, EstimationError> {
    let bank = fit_nuisance_bank(d, plan, cfg, &[est])?;
    Ok(NuisanceFits {
        estimand: est,
        rows: bank.rows(d, est),
        truncated: bank.truncated,
        warnings: bank.warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Effect {
    pub est: f64,
    pub se: f64,
    pub ci: [f64; 2],
}

impl Effect {
    pub fn from_influence(values: &[f64]) -> Self {
        let (est, se) = mean_and_se(values);
        Self {
            est,
            se,
            ci: [est - Z_95 * se, est + Z_95 * se],
        }
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci[0] <= truth && truth <= self.ci[1]
    }
}

/// Sample mean and `sd / sqrt(n)` (sd with `n - 1`; zero for `n = 1`).
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt() / n.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaEstimate {
    pub est: f64,
    pub se: f64,
    /// Means of `D_{1,1}`, `D_{1,0}`, `D_{0,0}`.
    pub terms: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimandSummary {
    pub a: u8,
    pub a_prime: u8,
    pub est: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimates {
    pub n: usize,
    pub estimand: EstimandSummary,
    /// Keyed `"a,a'"`.
    pub theta: BTreeMap<String, ThetaEstimate>,
    pub nde: Effect,
    pub nie: Effect,
    pub ate: Effect,
    pub config: EstimatorConfig,
    pub warnings: Vec<String>,
    pub diagnostics: dataset::DiagnosticsReport,
}

impl EffectEstimates {
    pub fn theta(&self, a: u8, a_prime: u8) -> Option<&ThetaEstimate> {
        self.theta.get(&theta_key(EstimandSpec::new(a, a_prime)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("estimates serialize")
    }
}

pub fn theta_key(est: EstimandSpec) -> String {
    format!("{},{}", est.a, est.a_prime)
}

/// Everything computed along the way, for inspection and tests.
#[derive(Debug, Clone)]
pub struct EstimationDetails {
    pub plan: FoldPlan,
    pub bank: NuisanceBank,
    pub eif: BTreeMap<EstimandSpec, EifEvaluation>,
}

pub fn estimate(d: &Dataset, cfg: &EstimatorConfig, requested: EstimandSpec) -> Result<EffectEstimates, EstimationError> {
    estimate_with_details(d, cfg, requested).map(|(e, _)| e)
}

pub fn estimate_with_details(
    d: &Dataset,
    cfg: &EstimatorConfig,
    requested: EstimandSpec,
) -> Result<(EffectEstimates, EstimationDetails), EstimationError> {
    cfg.validate()?;
    if requested.a > 1 || requested.a_prime > 1 {
        return Err(EstimationError::Config("a and a' must be 0 or 1".into()));
    }
    let plan = if cfg.stratify_folds {
        let labels: Vec<usize> = d.records().iter().map(az_stratum).collect();
        crossfit::make_folds_stratified(d.len(), cfg.folds, cfg.seed, &labels)?
    } else {
        crossfit::make_folds(d.len(), cfg.folds, cfg.seed)?
    };
    let mut estimands = EstimandSpec::CONTRASTS.to_vec();
    if !estimands.contains(&requested) {
        estimands.push(requested);
    }
    let bank = fit_nuisance_bank(d, &plan, cfg, &estimands)?;
    let opts = cfg.eif_options();
    let eif: BTreeMap<EstimandSpec, EifEvaluation> = estimands
        .iter()
        .map(|&est| (est, EifEvaluation::evaluate(d, &bank.rows(d, est), est, opts)))
        .collect();

    let mut theta = BTreeMap::new();
    for (est, ev) in &eif {
        let (m, se) = mean_and_se(&ev.totals());
        theta.insert(
            theta_key(*est),
            ThetaEstimate {
                est: m,
                se,
                terms: ev.term_means(),
            },
        );
    }
    let total = |a, ap| eif[&EstimandSpec::new(a, ap)].totals();
    let (d11, d10, d00) = (total(1, 1), total(1, 0), total(0, 0));
    let contrast = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p - q).collect::<Vec<_>>();
    let nde = Effect::from_influence(&contrast(&d10, &d00));
    let nie = Effect::from_influence(&contrast(&d11, &d10));
    let ate_if = contrast(&d11, &d00);
    let (_, ate_se) = mean_and_se(&ate_if);
    let ate_est = nde.est + nie.est;
    let ate = Effect {
        est: ate_est,
        se: ate_se,
        ci: [ate_est - Z_95 * ate_se, ate_est + Z_95 * ate_se],
    };

    let mut diagnostics = dataset::diagnose(d, &[])?;
    let summary = bank.propensity_summary();
    let mut warnings = bank.warnings.clone();
    if summary.negative_q_diff > 0 {
        warnings.push(format!(
            "{} observations have estimated P(Z=1|A=1,W) < P(Z=1|A=0,W){}",
            summary.negative_q_diff,
            if cfg.clip_q_diff { " (clipped at 0)" } else { "" }
        ));
    }
    if diagnostics.any_monotonicity_flag() {
        warnings.push("empirical take-up is lower under A=1 than under A=0 (monotonicity diagnostic)".into());
    }
    diagnostics.propensity = Some(summary);
    let req = &theta[&theta_key(requested)];
    let estimates = EffectEstimates {
        n: d.len(),
        estimand: EstimandSummary {
            a: requested.a,
            a_prime: requested.a_prime,
            est: req.est,
            se: req.se,
        },
        theta,
        nde,
        nie,
        ate,
        config: cfg.clone(),
        warnings,
        diagnostics,
    };
    Ok((estimates, EstimationDetails { plan, bank, eif }))
}
