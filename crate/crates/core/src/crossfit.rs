//! Fold partitioning and out-of-fold prediction.
//!
//! Observation `i` in validation fold `j(i)` is always predicted by a model
//! trained on the complement of that fold. Folds are 0-based internally.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, ObservedRecord};
use crate::learners::{self, Design, FittedModel, LearnerError, LearnerKind, LearnerSpec};

#[derive(Debug, Error, PartialEq)]
pub enum CrossFitError {
    #[error("need at least 2 folds, got {0}")]
    TooFewFolds(usize),
    #[error("n = {n} is too small for {folds} folds (need n >= {need})")]
    TooFewRows { n: usize, folds: usize, need: usize },
    #[error("fold plan covers {plan} rows but the dataset has {data}")]
    PlanMismatch { plan: usize, data: usize },
    #[error("strata labels cover {labels} rows, expected {n}")]
    StrataLength { labels: usize, n: usize },
    #[error("regression `{producer}`, fold {fold}: {source}")]
    Learner {
        producer: String,
        fold: usize,
        #[source]
        source: LearnerError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n: usize,
    pub folds: usize,
    /// Validation fold of each observation, in `0..folds`.
    pub assignment: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn validation(&self, fold: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn training(&self, fold: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.assignment[i] != fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.folds];
        for &j in &self.assignment {
            s[j] += 1;
        }
        s
    }
}

fn check_fold_args(n: usize, folds: usize) -> Result<(), CrossFitError> {
    if folds < 2 {
        return Err(CrossFitError::TooFewFolds(folds));
    }
    if n < 2 * folds {
        return Err(CrossFitError::TooFewRows {
            n,
            folds,
            need: 2 * folds,
        });
    }
    Ok(())
}

/// Uniformly random balanced partition; sizes differ by at most one.
pub fn make_folds(n: usize, folds: usize, seed: u64) -> Result<FoldPlan, CrossFitError> {
    check_fold_args(n, folds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(FoldPlan {
        n,
        folds,
        assignment: learners::balanced_folds(n, folds, &mut rng),
        seed,
    })
}

/// Balanced partition that is also balanced within each stratum (e.g. the
/// four `(A, Z)` cells). Strata are dealt round-robin with one running
/// counter, so overall sizes still differ by at most one.
pub fn make_folds_stratified(
    n: usize,
    folds: usize,
    seed: u64,
    labels: &[usize],
) -> Result<FoldPlan, CrossFitError> {
    check_fold_args(n, folds)?;
    if labels.len() != n {
        return Err(CrossFitError::StrataLength {
            labels: labels.len(),
            n,
        });
    }
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| labels[i]);
    let mut assignment = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = pos % folds;
    }
    Ok(FoldPlan {
        n,
        folds,
        assignment,
        seed,
    })
}

/// Stratum label of a record's `(A, Z)` cell, for [`make_folds_stratified`].
pub fn az_stratum(r: &ObservedRecord) -> usize {
    2 * r.a as usize + r.z as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Column {
    W(usize),
    A,
    Z,
    M(usize),
    Y,
}

impl Column {
    pub fn name(&self, d: &Dataset) -> String {
        match *self {
            Column::W(i) => d.w_names()[i].clone(),
            Column::A => "A".into(),
            Column::Z => "Z".into(),
            Column::M(i) => d.m_names()[i].clone(),
            Column::Y => "Y".into(),
        }
    }

    fn value(&self, r: &ObservedRecord, at: Overrides) -> f64 {
        match *self {
            Column::W(i) => r.w[i],
            Column::A => at.a.unwrap_or(r.a) as f64,
            Column::Z => at.z.unwrap_or(r.z) as f64,
            Column::M(i) => r.m[i],
            Column::Y => r.y,
        }
    }
}

/// All covariate columns `W`.
pub fn w_columns(d: &Dataset) -> Vec<Column> {
    (0..d.w_names().len()).map(Column::W).collect()
}

/// All mediator columns `M`.
pub fn m_columns(d: &Dataset) -> Vec<Column> {
    (0..d.m_names().len()).map(Column::M).collect()
}

/// Values fixed for `A` and/or `Z` when a fitted model is evaluated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overrides {
    pub a: Option<u8>,
    pub z: Option<u8>,
}

impl Overrides {
    pub const NONE: Overrides = Overrides { a: None, z: None };

    pub fn a(a: u8) -> Self {
        Self { a: Some(a), z: None }
    }

    pub fn az(a: u8, z: u8) -> Self {
        Self {
            a: Some(a),
            z: Some(z),
        }
    }

    fn describe(&self) -> String {
        let mut parts = Vec::new();
        if let Some(a) = self.a {
            parts.push(format!("A={a}"));
        }
        if let Some(z) = self.z {
            parts.push(format!("Z={z}"));
        }
        if parts.is_empty() {
            "observed".into()
        } else {
            parts.join(",")
        }
    }
}

fn design_for(d: &Dataset, rows: &[usize], features: &[Column], at: Overrides) -> Design {
    let names = features.iter().map(|c| c.name(d)).collect();
    let recs = d.records();
    let data = rows
        .iter()
        .flat_map(|&i| features.iter().map(move |c| c.value(&recs[i], at)))
        .collect();
    Design::new(names, rows.len(), data)
}

/// One trained model per fold for a single regression.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossFitModels {
    pub producer: String,
    pub features: Vec<Column>,
    /// `models[j]` was trained on the complement of validation fold `j`.
    pub models: Vec<FittedModel>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossFitPredictions {
    pub values: Vec<f64>,
    /// Regression target, features and the prediction-time overrides.
    pub producer: String,
}

impl CrossFitModels {
    /// Out-of-fold predictions for every record with `at` applied.
    pub fn predict(&self, d: &Dataset, plan: &FoldPlan, at: Overrides) -> CrossFitPredictions {
        let recs = d.records();
        let mut row = Vec::with_capacity(self.features.len());
        let values = (0..d.len())
            .map(|i| {
                row.clear();
                row.extend(self.features.iter().map(|c| c.value(&recs[i], at)));
                self.models[plan.assignment[i]].predict_row(&row)
            })
            .collect();
        CrossFitPredictions {
            values,
            producer: format!("{} @ {}", self.producer, at.describe()),
        }
    }

    /// Predictions of the fold-`fold` model at the given rows (used to build
    /// pseudo-outcomes on that fold's own training rows).
    pub fn predict_fold(&self, d: &Dataset, fold: usize, rows: &[usize], at: Overrides) -> Vec<f64> {
        let recs = d.records();
        let mut row = Vec::with_capacity(self.features.len());
        rows.iter()
            .map(|&i| {
                row.clear();
                row.extend(self.features.iter().map(|c| c.value(&recs[i], at)));
                self.models[fold].predict_row(&row)
            })
            .collect()
    }
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(fold as u64 + 1))
}

/// Trains one model per fold. `target(j, i)` gives the regression target for
/// row `i` when training the fold-`j` model, so pseudo-outcomes may depend
/// on the fold. `subset` restricts training rows; a fold whose restricted
/// training set is empty falls back to an intercept-only fit on the whole
/// fold complement.
pub fn crossfit_fit<T, S>(
    d: &Dataset,
    plan: &FoldPlan,
    spec: &LearnerSpec,
    producer: &str,
    target: T,
    features: &[Column],
    subset: Option<S>,
    seed: u64,
) -> Result<CrossFitModels, CrossFitError>
where
    T: Fn(usize, usize) -> f64 + Sync,
    S: Fn(&ObservedRecord) -> bool + Sync,
{
    if plan.n != d.len() {
        return Err(CrossFitError::PlanMismatch {
            plan: plan.n,
            data: d.len(),
        });
    }
    let fitted: Vec<Result<(FittedModel, Vec<String>), CrossFitError>> = (0..plan.folds)
        .into_par_iter()
        .map(|j| {
            let all_train = plan.training(j);
            let mut warnings = Vec::new();
            let restricted: Vec<usize> = match &subset {
                Some(keep) => all_train
                    .iter()
                    .copied()
                    .filter(|&i| keep(&d.records()[i]))
                    .collect(),
                None => all_train.clone(),
            };
            let (rows, fold_spec) = if restricted.is_empty() {
                warnings.push(format!(
                    "{producer}: fold {j} has no training rows in subset; intercept-only fallback"
                ));
                (all_train, LearnerSpec::intercept_only(spec.link))
            } else {
                (restricted, spec.clone())
            };
            let y: Vec<f64> = rows.iter().map(|&i| target(j, i)).collect();
            let x = design_for(d, &rows, features, Overrides::NONE);
            let model = learners::fit(&fold_spec, &x, &y, None, fold_seed(seed, j)).map_err(|source| {
                CrossFitError::Learner {
                    producer: producer.to_string(),
                    fold: j,
                    source,
                }
            })?;
            if fold_spec.kind != LearnerKind::InterceptOnly
                && model
                    .warnings
                    .iter()
                    .any(|w| matches!(w, learners::FitWarning::ConstantTarget { .. }))
            {
                warnings.push(format!(
                    "{producer}: fold {j} training target has a single class; clamped intercept-only"
                ));
            }
            if !model.converged() {
                warnings.push(format!("{producer}: fold {j} did not converge"));
            }
            Ok((model, warnings))
        })
        .collect();
    let mut models = Vec::with_capacity(plan.folds);
    let mut warnings = Vec::new();
    for r in fitted {
        let (m, w) = r?;
        models.push(m);
        warnings.extend(w);
    }
    Ok(CrossFitModels {
        producer: producer.to_string(),
        features: features.to_vec(),
        models,
        warnings,
    })
}

/// Fits a column-target regression and predicts it with `at` applied.
pub fn crossfit_regression(
    d: &Dataset,
    plan: &FoldPlan,
    spec: &LearnerSpec,
    target: Column,
    features: &[Column],
    at: Overrides,
    seed: u64,
) -> Result<CrossFitPredictions, CrossFitError> {
    let producer = format!(
        "{} ~ {}",
        target.name(d),
        features.iter().map(|c| c.name(d)).collect::<Vec<_>>().join("+")
    );
    let recs = d.records();
    let models = crossfit_fit(
        d,
        plan,
        spec,
        &producer,
        |_, i| target.value(&recs[i], Overrides::NONE),
        features,
        None::<fn(&ObservedRecord) -> bool>,
        seed,
    )?;
    Ok(models.predict(d, plan, at))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::OutcomeKind;
    use crate::learners::Link;

    fn toy(n: usize) -> Dataset {
        let recs = (0..n)
            .map(|i| ObservedRecord {
                w: vec![(i % 3) as f64],
                a: (i % 2) as u8,
                z: ((i / 2) % 2) as u8,
                m: vec![0.0],
                y: (i % 5) as f64,
            })
            .collect();
        Dataset::new(recs, vec!["W1".into()], vec!["M".into()], OutcomeKind::Continuous).unwrap()
    }

    #[test]
    fn balanced_sizes() {
        assert_eq!(make_folds(10, 2, 1).unwrap().sizes(), vec![5, 5]);
        let mut s = make_folds(11, 2, 1).unwrap().sizes();
        s.sort();
        assert_eq!(s, vec![5, 6]);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        assert_eq!(make_folds(50, 3, 7).unwrap(), make_folds(50, 3, 7).unwrap());
        assert_ne!(
            make_folds(50, 3, 7).unwrap().assignment,
            make_folds(50, 3, 8).unwrap().assignment
        );
    }

    #[test]
    fn too_small() {
        assert!(matches!(make_folds(3, 2, 0), Err(CrossFitError::TooFewRows { .. })));
        assert!(matches!(make_folds(30, 1, 0), Err(CrossFitError::TooFewFolds(1))));
    }

    #[test]
    fn stratified_is_balanced_within_cells() {
        let d = toy(103);
        let labels: Vec<usize> = d.records().iter().map(az_stratum).collect();
        let plan = make_folds_stratified(103, 2, 5, &labels).unwrap();
        let s = plan.sizes();
        assert!(s[0].abs_diff(s[1]) <= 1);
        for cell in 0..4 {
            let c: Vec<_> = (0..103).filter(|&i| labels[i] == cell).collect();
            let in0 = c.iter().filter(|&&i| plan.assignment[i] == 0).count();
            assert!(in0.abs_diff(c.len() - in0) <= 1);
        }
    }

    #[test]
    fn intercept_only_yields_training_fold_means() {
        let d = toy(40);
        let plan = make_folds(40, 2, 3).unwrap();
        let p = crossfit_regression(
            &d,
            &plan,
            &LearnerSpec::intercept_only(Link::Identity),
            Column::Y,
            &[Column::W(0)],
            Overrides::NONE,
            0,
        )
        .unwrap();
        for j in 0..2 {
            let train = plan.training(j);
            let mean = train.iter().map(|&i| d.records()[i].y).sum::<f64>() / train.len() as f64;
            for i in plan.validation(j) {
                assert!((p.values[i] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn overrides_replace_treatment() {
        // Y = 10*A exactly; identity GLM on (A, W) predicts 10 at A=1
        let recs = (0..20)
            .map(|i| ObservedRecord {
                w: vec![(i % 4) as f64],
                a: (i % 2) as u8,
                z: 0,
                m: vec![0.0],
                y: 10.0 * (i % 2) as f64,
            })
            .collect();
        let d = Dataset::new(recs, vec!["W1".into()], vec!["M".into()], OutcomeKind::Continuous).unwrap();
        let plan = make_folds(20, 2, 1).unwrap();
        let spec = LearnerSpec::glm(Link::Identity, learners::Basis::Main);
        let p = crossfit_regression(&d, &plan, &spec, Column::Y, &[Column::A, Column::W(0)], Overrides::a(1), 0)
            .unwrap();
        for v in p.values {
            assert!((v - 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_subset_falls_back() {
        let d = toy(20);
        let plan = make_folds(20, 2, 1).unwrap();
        let recs = d.records();
        let m = crossfit_fit(
            &d,
            &plan,
            &LearnerSpec::glm(Link::Identity, learners::Basis::Main),
            "Y",
            |_, i| recs[i].y,
            &[Column::W(0)],
            Some(|_: &ObservedRecord| false),
            0,
        )
        .unwrap();
        assert_eq!(m.warnings.len(), 2);
        assert!(m.models.iter().all(|f| f.spec.kind == LearnerKind::InterceptOnly));
    }

    #[test]
    fn plan_must_match_data() {
        let d = toy(20);
        let plan = make_folds(30, 2, 1).unwrap();
        let err = crossfit_regression(
            &d,
            &plan,
            &LearnerSpec::intercept_only(Link::Identity),
            Column::Y,
            &[],
            Overrides::NONE,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, CrossFitError::PlanMismatch { .. }));
    }
}
