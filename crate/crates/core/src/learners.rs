//! Regression learners used for every nuisance function.
//!
//! Three kinds are supported: an intercept-only model (the deliberate
//! misspecification device), a generalized linear model fitted by damped
//! iteratively reweighted least squares, and discrete cross-validated
//! selection among candidate learners.
//!
//! Rows with identical feature vectors are collapsed into weighted patterns
//! before fitting. Both the binomial and the Gaussian likelihood depend on
//! the data only through per-pattern weight totals and weighted target
//! means, so this is exact; on designs built from discrete covariates it
//! reduces each fit to a handful of patterns.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fitted means for constant logit targets are clamped to
/// `[CONSTANT_CLAMP, 1 - CONSTANT_CLAMP]` before the link transform.
pub const CONSTANT_CLAMP: f64 = 1e-6;
/// Logit predictions are kept strictly inside (0, 1).
const PREDICTION_EDGE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LearnerError {
    #[error("design has {rows} rows but target has {targets}")]
    Shape { rows: usize, targets: usize },
    #[error("cannot fit on zero rows")]
    NoRows,
    #[error("logit link needs targets in [0,1]; row {row} has {value}")]
    TargetOutOfRange { row: usize, value: f64 },
    #[error("non-finite target at row {0}")]
    NonFiniteTarget(usize),
    #[error("sample weights must be finite, non-negative and not all zero")]
    BadWeights,
    #[error("cv_select needs at least one candidate")]
    NoCandidates,
    #[error("cv_folds must be at least 2")]
    TooFewFolds,
    #[error("expected column `{expected}` at position {position}, found `{found}`")]
    ColumnMismatch {
        position: usize,
        expected: String,
        found: String,
    },
    #[error("expected {expected} columns, found {found}")]
    ColumnCount { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Logit,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    InterceptOnly,
    Glm,
    CvSelect,
}

/// Feature expansion applied by a GLM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    /// The input columns as given.
    Main,
    /// Input columns plus every product of two distinct columns.
    Pairwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    pub link: Link,
    #[serde(default = "default_basis")]
    pub basis: Basis,
    #[serde(default)]
    pub candidates: Vec<LearnerSpec>,
    #[serde(default = "default_cv_folds")]
    pub cv_folds: usize,
    #[serde(default)]
    pub l2_penalty: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_basis() -> Basis {
    Basis::Main
}
fn default_cv_folds() -> usize {
    10
}
fn default_max_iter() -> usize {
    100
}
fn default_tol() -> f64 {
    1e-8
}

impl LearnerSpec {
    pub fn intercept_only(link: Link) -> Self {
        Self::base(LearnerKind::InterceptOnly, link, Basis::Main)
    }

    pub fn glm(link: Link, basis: Basis) -> Self {
        Self::base(LearnerKind::Glm, link, basis)
    }

    pub fn cv_select(link: Link, candidates: Vec<LearnerSpec>) -> Self {
        let mut s = Self::base(LearnerKind::CvSelect, link, Basis::Main);
        s.candidates = candidates;
        s
    }

    /// Selection among intercept-only, main-effects GLM and pairwise GLM.
    pub fn default_stack(link: Link) -> Self {
        Self::cv_select(
            link,
            vec![
                Self::intercept_only(link),
                Self::glm(link, Basis::Main),
                Self::glm(link, Basis::Pairwise),
            ],
        )
    }

    fn base(kind: LearnerKind, link: Link, basis: Basis) -> Self {
        Self {
            kind,
            link,
            basis,
            candidates: Vec::new(),
            cv_folds: default_cv_folds(),
            l2_penalty: 0.0,
            max_iter: default_max_iter(),
            tol: default_tol(),
        }
    }

    /// The same learner with `link` applied recursively to all candidates.
    pub fn with_link(mut self, link: Link) -> Self {
        self.link = link;
        self.candidates = self
            .candidates
            .into_iter()
            .map(|c| c.with_link(link))
            .collect();
        self
    }

    pub fn with_cv_folds(mut self, k: usize) -> Self {
        self.cv_folds = k;
        self
    }

    pub fn label(&self) -> String {
        match self.kind {
            LearnerKind::InterceptOnly => "intercept_only".into(),
            LearnerKind::Glm => match self.basis {
                Basis::Main => "glm".into(),
                Basis::Pairwise => "glm_pairwise".into(),
            },
            LearnerKind::CvSelect => {
                let names: Vec<_> = self.candidates.iter().map(|c| c.label()).collect();
                format!("cv_select[{}]", names.join(","))
            }
        }
    }
}

/// Dense row-major feature matrix with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    names: Vec<String>,
    nrows: usize,
    data: Vec<f64>,
}

impl Design {
    pub fn new(names: Vec<String>, nrows: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), nrows * names.len(), "design data has wrong length");
        Self { names, nrows, data }
    }

    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>]) -> Self {
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(names, rows.len(), data)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.ncols();
        &self.data[i * p..(i + 1) * p]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FitWarning {
    /// IRLS stopped at `max_iter` without meeting `tol` (e.g. separation).
    NotConverged { iterations: usize },
    /// Logit target had a single value; fitted mean clamped.
    ConstantTarget { mean: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSelection {
    pub chosen: usize,
    pub chosen_label: String,
    /// Mean held-out loss per candidate, in candidate order.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    /// The learner whose coefficients these are; for `cv_select` this is the
    /// selected candidate.
    pub spec: LearnerSpec,
    /// Intercept first, then one per entry of `feature_names`.
    pub coefficients: Vec<f64>,
    pub input_names: Vec<String>,
    pub feature_names: Vec<String>,
    pub warnings: Vec<FitWarning>,
    pub selection: Option<CvSelection>,
}

impl FittedModel {
    pub fn converged(&self) -> bool {
        !self
            .warnings
            .iter()
            .any(|w| matches!(w, FitWarning::NotConverged { .. }))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn predict(&self, x: &Design) -> Result<Vec<f64>, LearnerError> {
        if x.ncols() != self.input_names.len() {
            return Err(LearnerError::ColumnCount {
                expected: self.input_names.len(),
                found: x.ncols(),
            });
        }
        for (position, (want, got)) in self.input_names.iter().zip(x.names()).enumerate() {
            if want != got {
                return Err(LearnerError::ColumnMismatch {
                    position,
                    expected: want.clone(),
                    found: got.clone(),
                });
            }
        }
        let basis = self.basis();
        let mut feats = Vec::with_capacity(self.coefficients.len());
        Ok((0..x.nrows())
            .map(|i| {
                feats.clear();
                expand_into(basis, x.row(i), &mut feats);
                self.respond(&feats)
            })
            .collect())
    }

    /// Prediction for a single already-assembled input row.
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut feats = Vec::with_capacity(self.coefficients.len());
        expand_into(self.basis(), row, &mut feats);
        self.respond(&feats)
    }

    fn basis(&self) -> Option<Basis> {
        match self.spec.kind {
            LearnerKind::InterceptOnly => None,
            _ => Some(self.spec.basis),
        }
    }

    fn respond(&self, feats: &[f64]) -> f64 {
        let eta = self.coefficients[0]
            + feats
                .iter()
                .zip(&self.coefficients[1..])
                .map(|(x, b)| x * b)
                .sum::<f64>();
        match self.spec.link {
            Link::Identity => eta,
            Link::Logit => expit(eta).clamp(PREDICTION_EDGE, 1.0 - PREDICTION_EDGE),
        }
    }
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn expand_into(basis: Option<Basis>, row: &[f64], out: &mut Vec<f64>) {
    match basis {
        None => {}
        Some(Basis::Main) => out.extend_from_slice(row),
        Some(Basis::Pairwise) => {
            out.extend_from_slice(row);
            for i in 0..row.len() {
                for j in i + 1..row.len() {
                    out.push(row[i] * row[j]);
                }
            }
        }
    }
}

fn expanded_names(basis: Option<Basis>, names: &[String]) -> Vec<String> {
    match basis {
        None => Vec::new(),
        Some(Basis::Main) => names.to_vec(),
        Some(Basis::Pairwise) => {
            let mut out = names.to_vec();
            for i in 0..names.len() {
                for j in i + 1..names.len() {
                    out.push(format!("{}:{}", names[i], names[j]));
                }
            }
            out
        }
    }
}

/// Row-to-pattern map over the raw design. Patterns are keyed on the exact
/// bit pattern of each row; when most rows are unique the map is the identity.
struct Patterns {
    ids: Vec<usize>,
    representative: Vec<usize>,
}

impl Patterns {
    fn build(x: &Design) -> Self {
        let n = x.nrows();
        let mut map: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut ids = Vec::with_capacity(n);
        let mut representative = Vec::new();
        for i in 0..n {
            let key: Vec<u64> = x.row(i).iter().map(|v| v.to_bits()).collect();
            let next = representative.len();
            let id = *map.entry(key).or_insert(next);
            if id == next {
                representative.push(i);
            }
            ids.push(id);
            if representative.len() * 2 > n && n > 64 {
                return Self::identity(n);
            }
        }
        Self {
            ids,
            representative,
        }
    }

    fn identity(n: usize) -> Self {
        Self {
            ids: (0..n).collect(),
            representative: (0..n).collect(),
        }
    }
}

/// Weighted sufficient statistics for a subset of rows.
struct Aggregate {
    /// Expanded feature rows, one per pattern present.
    features: Vec<Vec<f64>>,
    weight: Vec<f64>,
    mean: Vec<f64>,
}

impl Aggregate {
    fn build(
        basis: Option<Basis>,
        x: &Design,
        y: &[f64],
        w: &[f64],
        rows: &[usize],
        patterns: &Patterns,
    ) -> Self {
        let g = patterns.representative.len();
        let mut wsum = vec![0.0; g];
        let mut ysum = vec![0.0; g];
        for &i in rows {
            let id = patterns.ids[i];
            wsum[id] += w[i];
            ysum[id] += w[i] * y[i];
        }
        let mut features = Vec::new();
        let mut weight = Vec::new();
        let mut mean = Vec::new();
        for id in 0..g {
            if wsum[id] > 0.0 {
                let mut f = Vec::new();
                expand_into(basis, x.row(patterns.representative[id]), &mut f);
                features.push(f);
                weight.push(wsum[id]);
                mean.push(ysum[id] / wsum[id]);
            }
        }
        Self {
            features,
            weight,
            mean,
        }
    }

    fn total_weight(&self) -> f64 {
        self.weight.iter().sum()
    }

    fn grand_mean(&self) -> f64 {
        self.weight
            .iter()
            .zip(&self.mean)
            .map(|(w, m)| w * m)
            .sum::<f64>()
            / self.total_weight()
    }
}

/// Fits `spec` to `(x, y)` with optional non-negative sample weights.
/// `seed` drives the fold assignment of `cv_select`.
pub fn fit(
    spec: &LearnerSpec,
    x: &Design,
    y: &[f64],
    sample_weights: Option<&[f64]>,
    seed: u64,
) -> Result<FittedModel, LearnerError> {
    let n = x.nrows();
    if y.len() != n {
        return Err(LearnerError::Shape {
            rows: n,
            targets: y.len(),
        });
    }
    if n == 0 {
        return Err(LearnerError::NoRows);
    }
    for (i, &v) in y.iter().enumerate() {
        if !v.is_finite() {
            return Err(LearnerError::NonFiniteTarget(i));
        }
    }
    let ones;
    let w = match sample_weights {
        Some(w) => {
            if w.len() != n || w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().sum::<f64>() <= 0.0
            {
                return Err(LearnerError::BadWeights);
            }
            w
        }
        None => {
            ones = vec![1.0; n];
            &ones
        }
    };
    let patterns = Patterns::build(x);
    let rows: Vec<usize> = (0..n).collect();
    fit_rows(spec, x, y, w, &rows, &patterns, seed)
}

fn check_targets(link: Link, y: &[f64], rows: &[usize]) -> Result<(), LearnerError> {
    if link == Link::Logit {
        for &i in rows {
            if !(0.0..=1.0).contains(&y[i]) {
                return Err(LearnerError::TargetOutOfRange { row: i, value: y[i] });
            }
        }
    }
    Ok(())
}

fn fit_rows(
    spec: &LearnerSpec,
    x: &Design,
    y: &[f64],
    w: &[f64],
    rows: &[usize],
    patterns: &Patterns,
    seed: u64,
) -> Result<FittedModel, LearnerError> {
    check_targets(spec.link, y, rows)?;
    match spec.kind {
        LearnerKind::InterceptOnly | LearnerKind::Glm => {
            let basis = (spec.kind == LearnerKind::Glm).then_some(spec.basis);
            let agg = Aggregate::build(basis, x, y, w, rows, patterns);
            if agg.weight.is_empty() {
                return Err(LearnerError::BadWeights);
            }
            Ok(fit_parametric(spec, basis, x.names(), &agg))
        }
        LearnerKind::CvSelect => cv_select(spec, x, y, w, rows, patterns, seed),
    }
}

fn fit_parametric(
    spec: &LearnerSpec,
    basis: Option<Basis>,
    input_names: &[String],
    agg: &Aggregate,
) -> FittedModel {
    let feature_names = expanded_names(basis, input_names);
    let p = feature_names.len();
    let mut warnings = Vec::new();
    let mean = agg.grand_mean();
    let constant = agg.mean.iter().all(|&m| m == agg.mean[0]);

    let coefficients = if basis.is_none() || (spec.link == Link::Logit && constant) {
        let intercept = match spec.link {
            Link::Identity => mean,
            Link::Logit => {
                let clamped = mean.clamp(CONSTANT_CLAMP, 1.0 - CONSTANT_CLAMP);
                if constant && (mean <= CONSTANT_CLAMP || mean >= 1.0 - CONSTANT_CLAMP) {
                    warnings.push(FitWarning::ConstantTarget { mean });
                }
                logit(clamped)
            }
        };
        let mut c = vec![0.0; p + 1];
        c[0] = intercept;
        c
    } else {
        match spec.link {
            Link::Identity => weighted_least_squares(agg, p, spec.l2_penalty),
            Link::Logit => {
                let (beta, converged, iterations) = irls_logit(agg, p, spec);
                if !converged {
                    warnings.push(FitWarning::NotConverged { iterations });
                }
                beta
            }
        }
    };
    FittedModel {
        spec: LearnerSpec {
            candidates: Vec::new(),
            ..spec.clone()
        },
        coefficients,
        input_names: input_names.to_vec(),
        feature_names,
        warnings,
        selection: None,
    }
}

fn augmented(features: &[f64]) -> impl Iterator<Item = f64> + '_ {
    std::iter::once(1.0).chain(features.iter().copied())
}

/// Solves `H x = g` for symmetric positive semi-definite `H`, adding a
/// growing diagonal jitter when `H` is numerically singular (collinear or
/// all-zero columns).
fn solve_psd(h: DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let scale = (0..h.nrows()).map(|i| h[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut jitter = 0.0;
    for _ in 0..20 {
        let mut m = h.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = m.cholesky() {
            let x = ch.solve(g);
            if x.iter().all(|v| v.is_finite()) {
                return x;
            }
        }
        jitter = if jitter == 0.0 { scale * 1e-12 } else { jitter * 10.0 };
    }
    DVector::zeros(g.len())
}

fn weighted_least_squares(agg: &Aggregate, p: usize, l2: f64) -> Vec<f64> {
    let total = agg.total_weight();
    let mut xtx = DMatrix::<f64>::zeros(p + 1, p + 1);
    let mut xty = DVector::<f64>::zeros(p + 1);
    for ((f, &wk), &yk) in agg.features.iter().zip(&agg.weight).zip(&agg.mean) {
        let row: Vec<f64> = augmented(f).collect();
        let wk = wk / total;
        for i in 0..=p {
            xty[i] += wk * row[i] * yk;
            for j in 0..=i {
                xtx[(i, j)] += wk * row[i] * row[j];
            }
        }
    }
    for i in 0..=p {
        for j in 0..i {
            xtx[(j, i)] = xtx[(i, j)];
        }
        if i > 0 {
            xtx[(i, i)] += l2;
        }
    }
    solve_psd(xtx, &xty).iter().copied().collect()
}

/// Penalized mean negative log-likelihood.
fn logit_objective(agg: &Aggregate, beta: &[f64], l2: f64) -> f64 {
    let total = agg.total_weight();
    let mut nll = 0.0;
    for ((f, &wk), &yk) in agg.features.iter().zip(&agg.weight).zip(&agg.mean) {
        let eta: f64 = augmented(f).zip(beta).map(|(x, b)| x * b).sum();
        // log(1 + e^eta) - y * eta, stable in both tails
        let softplus = if eta > 0.0 {
            eta + (-eta).exp().ln_1p()
        } else {
            eta.exp().ln_1p()
        };
        nll += wk / total * (softplus - yk * eta);
    }
    nll + 0.5 * l2 * beta[1..].iter().map(|b| b * b).sum::<f64>()
}

/// Newton-Raphson (IRLS) with step halving on objective increase.
/// Returns `(coefficients, converged, iterations)`.
fn irls_logit(agg: &Aggregate, p: usize, spec: &LearnerSpec) -> (Vec<f64>, bool, usize) {
    let total = agg.total_weight();
    let mean = agg.grand_mean().clamp(CONSTANT_CLAMP, 1.0 - CONSTANT_CLAMP);
    let mut beta = vec![0.0; p + 1];
    beta[0] = logit(mean);
    let mut obj = logit_objective(agg, &beta, spec.l2_penalty);
    for iter in 1..=spec.max_iter {
        let mut h = DMatrix::<f64>::zeros(p + 1, p + 1);
        let mut g = DVector::<f64>::zeros(p + 1);
        for ((f, &wk), &yk) in agg.features.iter().zip(&agg.weight).zip(&agg.mean) {
            let row: Vec<f64> = augmented(f).collect();
            let eta: f64 = row.iter().zip(&beta).map(|(x, b)| x * b).sum();
            let mu = expit(eta);
            let wk = wk / total;
            let v = wk * mu * (1.0 - mu);
            for i in 0..=p {
                g[i] += wk * (yk - mu) * row[i];
                for j in 0..=i {
                    h[(i, j)] += v * row[i] * row[j];
                }
            }
        }
        for i in 0..=p {
            for j in 0..i {
                h[(j, i)] = h[(i, j)];
            }
            if i > 0 {
                h[(i, i)] += spec.l2_penalty;
                g[i] -= spec.l2_penalty * beta[i];
            }
        }
        let step = solve_psd(h, &g);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
            let cobj = logit_objective(agg, &cand, spec.l2_penalty);
            if cobj.is_finite() && cobj <= obj + 1e-15 * obj.abs().max(1.0) {
                accepted = Some((cand, cobj));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, cobj)) = accepted else {
            // no descent direction left at machine precision
            return (beta, true, iter);
        };
        let change = cand
            .iter()
            .zip(&beta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        beta = cand;
        obj = cobj;
        if change < spec.tol {
            return (beta, true, iter);
        }
    }
    (beta, false, spec.max_iter)
}

/// Balanced random assignment of `n` items to `k` folds.
pub(crate) fn balanced_folds(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    fold
}

fn held_out_loss(link: Link, pred: f64, y: f64) -> f64 {
    match link {
        Link::Identity => (y - pred).powi(2),
        Link::Logit => {
            let p = pred.clamp(1e-15, 1.0 - 1e-15);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        }
    }
}

fn cv_select(
    spec: &LearnerSpec,
    x: &Design,
    y: &[f64],
    w: &[f64],
    rows: &[usize],
    patterns: &Patterns,
    seed: u64,
) -> Result<FittedModel, LearnerError> {
    if spec.candidates.is_empty() {
        return Err(LearnerError::NoCandidates);
    }
    if spec.cv_folds < 2 {
        return Err(LearnerError::TooFewFolds);
    }
    let candidates: Vec<LearnerSpec> = spec
        .candidates
        .iter()
        .map(|c| c.clone().with_link(spec.link))
        .collect();
    let k = spec.cv_folds.min(rows.len());
    let mut losses = vec![0.0; candidates.len()];
    if k >= 2 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fold = balanced_folds(rows.len(), k, &mut rng);
        let total: f64 = rows.iter().map(|&i| w[i]).sum();
        for f in 0..k {
            let train: Vec<usize> = rows
                .iter()
                .zip(&fold)
                .filter(|(_, &j)| j != f)
                .map(|(&i, _)| i)
                .collect();
            let test: Vec<usize> = rows
                .iter()
                .zip(&fold)
                .filter(|(_, &j)| j == f)
                .map(|(&i, _)| i)
                .collect();
            if train.iter().all(|&i| w[i] == 0.0) {
                continue;
            }
            for (c, cand) in candidates.iter().enumerate() {
                let model = fit_rows(cand, x, y, w, &train, patterns, seed.wrapping_add(1 + f as u64))?;
                for &i in &test {
                    losses[c] += w[i] * held_out_loss(spec.link, model.predict_row(x.row(i)), y[i]);
                }
            }
        }
        for l in &mut losses {
            *l /= total;
        }
    }
    let chosen = losses
        .iter()
        .enumerate()
        .fold(0, |best, (i, &l)| if l < losses[best] { i } else { best });
    let mut model = fit_rows(&candidates[chosen], x, y, w, rows, patterns, seed)?;
    model.selection = Some(CvSelection {
        chosen,
        chosen_label: candidates[chosen].label(),
        losses,
    });
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn one_col(xs: &[f64]) -> Design {
        Design::new(vec!["x".into()], xs.len(), xs.to_vec())
    }

    fn logistic_data(n: usize, seed: u64) -> (Design, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x: f64 = rng.gen_range(-2.0..2.0);
            let p = expit(0.3 + 1.2 * x);
            xs.push(x);
            ys.push(if rng.gen::<f64>() < p { 1.0 } else { 0.0 });
        }
        (one_col(&xs), ys)
    }

    #[test]
    fn intercept_only_is_mean() {
        let x = one_col(&[1.0, 2.0, 3.0, 4.0]);
        let y = [0.0, 1.0, 1.0, 0.0];
        let m = fit(&LearnerSpec::intercept_only(Link::Logit), &x, &y, None, 0).unwrap();
        for p in m.predict(&x).unwrap() {
            assert!((p - 0.5).abs() < 1e-15);
        }
        let id = fit(&LearnerSpec::intercept_only(Link::Identity), &x, &[1.0, 2.0, 4.0, 8.0], None, 0).unwrap();
        assert_eq!(id.predict(&x).unwrap(), vec![3.75; 4]);
    }

    #[test]
    fn weighted_intercept() {
        let x = one_col(&[0.0, 0.0]);
        let m = fit(
            &LearnerSpec::intercept_only(Link::Identity),
            &x,
            &[1.0, 3.0],
            Some(&[3.0, 1.0]),
            0,
        )
        .unwrap();
        assert_eq!(m.coefficients, vec![1.5]);
    }

    #[test]
    fn zero_coefficients_predict_half() {
        let m = FittedModel {
            spec: LearnerSpec::glm(Link::Logit, Basis::Main),
            coefficients: vec![0.0, 0.0],
            input_names: vec!["x".into()],
            feature_names: vec!["x".into()],
            warnings: vec![],
            selection: None,
        };
        assert_eq!(m.predict(&one_col(&[-3.0, 0.0, 9.0])).unwrap(), vec![0.5; 3]);
        let m2 = FittedModel {
            coefficients: vec![-0.9, 2.0],
            ..m
        };
        let p = m2.predict(&one_col(&[1.0])).unwrap()[0];
        assert!((p - 1.0 / (1.0 + (-1.1f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn column_mismatch_names_column() {
        let m = fit(&LearnerSpec::glm(Link::Identity, Basis::Main), &one_col(&[0.0, 1.0, 2.0]), &[1.0, 2.0, 3.0], None, 0)
            .unwrap();
        let other = Design::new(vec!["z".into()], 1, vec![0.0]);
        let err = m.predict(&other).unwrap_err();
        assert!(err.to_string().contains("`x`") && err.to_string().contains("`z`"), "{err}");
    }

    #[test]
    fn glm_recovers_generating_coefficients() {
        let (x, y) = logistic_data(50_000, 11);
        let m = fit(&LearnerSpec::glm(Link::Logit, Basis::Main), &x, &y, None, 0).unwrap();
        assert!(m.converged());
        assert!((m.coefficients[0] - 0.3).abs() < 0.05, "{:?}", m.coefficients);
        assert!((m.coefficients[1] - 1.2).abs() < 0.05, "{:?}", m.coefficients);
    }

    #[test]
    fn cv_prefers_glm_on_logistic_signal() {
        let (x, y) = logistic_data(50_000, 12);
        let spec = LearnerSpec::cv_select(
            Link::Logit,
            vec![LearnerSpec::intercept_only(Link::Logit), LearnerSpec::glm(Link::Logit, Basis::Main)],
        );
        let m = fit(&spec, &x, &y, None, 5).unwrap();
        let sel = m.selection.as_ref().unwrap();
        assert_eq!(sel.chosen, 1);
        assert!(sel.losses[1] < sel.losses[0]);
        assert_eq!(m.spec.kind, LearnerKind::Glm);
    }

    #[test]
    fn identity_glm_is_exact_least_squares() {
        // y = 1 + 2x exactly
        let xs = [0.0, 1.0, 2.0, 3.5];
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 + 2.0 * x).collect();
        let m = fit(&LearnerSpec::glm(Link::Identity, Basis::Main), &one_col(&xs), &ys, None, 0).unwrap();
        assert!((m.coefficients[0] - 1.0).abs() < 1e-10);
        assert!((m.coefficients[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn separable_data_terminates_and_flags() {
        let xs = [-2.0, -1.0, 1.0, 2.0];
        let ys = [0.0, 0.0, 1.0, 1.0];
        let spec = LearnerSpec {
            max_iter: 25,
            ..LearnerSpec::glm(Link::Logit, Basis::Main)
        };
        let m = fit(&spec, &one_col(&xs), &ys, None, 0).unwrap();
        assert!(!m.converged());
        let p = m.predict(&one_col(&xs)).unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(p[0] < 0.01 && p[3] > 0.99);
    }

    #[test]
    fn constant_logit_target_is_clamped() {
        let x = one_col(&[0.0, 1.0, 2.0]);
        let m = fit(&LearnerSpec::glm(Link::Logit, Basis::Pairwise), &x, &[1.0; 3], None, 0).unwrap();
        assert!((m.coefficients[0] - logit(1.0 - CONSTANT_CLAMP)).abs() < 1e-9);
        assert!(m.warnings.iter().any(|w| matches!(w, FitWarning::ConstantTarget { .. })));
        let p = m.predict(&x).unwrap();
        assert!(p.iter().all(|&v| (v - (1.0 - CONSTANT_CLAMP)).abs() < 1e-12));
    }

    #[test]
    fn logit_rejects_out_of_range_targets() {
        let err = fit(&LearnerSpec::glm(Link::Logit, Basis::Main), &one_col(&[0.0, 1.0]), &[0.0, 2.0], None, 0)
            .unwrap_err();
        assert_eq!(err, LearnerError::TargetOutOfRange { row: 1, value: 2.0 });
    }

    #[test]
    fn pairwise_basis_names() {
        let names = expanded_names(Some(Basis::Pairwise), &["a".into(), "b".into(), "c".into()]);
        assert_eq!(names, vec!["a", "b", "c", "a:b", "a:c", "b:c"]);
    }

    #[test]
    fn compression_matches_uncompressed_fit() {
        // few distinct rows -> compressed; compare against fit with
        // explicitly aggregated weights
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..400)
            .map(|_| vec![rng.gen_range(0..2) as f64, rng.gen_range(0..2) as f64])
            .collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| (rng.gen::<f64>() < expit(-0.5 + r[0] - 0.7 * r[1])) as u8 as f64)
            .collect();
        let x = Design::from_rows(vec!["u".into(), "v".into()], &rows);
        let m = fit(&LearnerSpec::glm(Link::Logit, Basis::Pairwise), &x, &y, None, 0).unwrap();
        let mut agg: HashMap<(u64, u64), (f64, f64)> = HashMap::new();
        for (r, &t) in rows.iter().zip(&y) {
            let e = agg.entry((r[0] as u64, r[1] as u64)).or_default();
            e.0 += 1.0;
            e.1 += t;
        }
        let mut keys: Vec<_> = agg.keys().copied().collect();
        keys.sort();
        let arows: Vec<Vec<f64>> = keys.iter().map(|k| vec![k.0 as f64, k.1 as f64]).collect();
        let ay: Vec<f64> = keys.iter().map(|k| agg[k].1 / agg[k].0).collect();
        let aw: Vec<f64> = keys.iter().map(|k| agg[k].0).collect();
        let ax = Design::from_rows(vec!["u".into(), "v".into()], &arows);
        let m2 = fit(&LearnerSpec::glm(Link::Logit, Basis::Pairwise), &ax, &ay, Some(&aw), 0).unwrap();
        for (a, b) in m.coefficients.iter().zip(&m2.coefficients) {
            assert!((a - b).abs() < 1e-9, "{:?} vs {:?}", m.coefficients, m2.coefficients);
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let (x, y) = logistic_data(2_000, 4);
        let spec = LearnerSpec::default_stack(Link::Logit);
        let a = fit(&spec, &x, &y, None, 9).unwrap();
        let b = fit(&spec, &x, &y, None, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn model_serializes_to_json() {
        let m = fit(&LearnerSpec::intercept_only(Link::Logit), &one_col(&[0.0, 1.0]), &[0.0, 1.0], None, 0).unwrap();
        let s = m.to_json();
        assert!(s.contains("\"coefficients\""));
        let back: FittedModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }
}
