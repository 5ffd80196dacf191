use std::path::{Path, PathBuf};

use monomed::dataset::ColumnSpec;
use monomed::estimator::{EstimandSpec, EstimatorConfig, HyVariant, NuisanceSpecs};
use monomed::learners::{Basis, LearnerSpec, Link};
use monomed::oracle::{DgmSpec, SWEEP_EPS};
use monomed::sim::Scenario;
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

/// The TOML run configuration. Every section is optional; command-line
/// flags override file values.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub estimate: EstimateSection,
    #[serde(default)]
    pub learners: LearnerSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub report: ReportSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub columns: Option<ColumnSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateSection {
    pub a: u8,
    pub a_prime: u8,
    pub folds: usize,
    pub truncation: f64,
    pub randomized_a: Option<f64>,
    pub clip_q_diff: bool,
    pub stratify_folds: bool,
    pub variant: Option<HyVariant>,
}

impl Default for EstimateSection {
    fn default() -> Self {
        let d = EstimatorConfig::default();
        Self {
            a: 1,
            a_prime: 0,
            folds: d.folds,
            truncation: d.truncation,
            randomized_a: None,
            clip_q_diff: false,
            stratify_folds: false,
            variant: None,
        }
    }
}

/// A learner by name (`default`, `intercept_only`, `glm`, `glm_pairwise`)
/// or as a full specification table.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum LearnerChoice {
    Named(String),
    Spec(LearnerSpec),
}

impl LearnerChoice {
    pub fn resolve(&self, link: Link) -> Result<LearnerSpec, String> {
        match self {
            LearnerChoice::Spec(s) => Ok(s.clone().with_link(link)),
            LearnerChoice::Named(name) => match name.as_str() {
                "default" => Ok(LearnerSpec::default_stack(link)),
                "intercept_only" => Ok(LearnerSpec::intercept_only(link)),
                "glm" => Ok(LearnerSpec::glm(link, Basis::Main)),
                "glm_pairwise" => Ok(LearnerSpec::glm(link, Basis::Pairwise)),
                other => Err(format!("unknown learner `{other}`")),
            },
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerSection {
    pub g: Option<LearnerChoice>,
    pub q: Option<LearnerChoice>,
    pub e: Option<LearnerChoice>,
    pub r: Option<LearnerChoice>,
    pub mu: Option<LearnerChoice>,
    pub rho: Option<LearnerChoice>,
}

impl LearnerSection {
    pub fn resolve(&self) -> Result<NuisanceSpecs, String> {
        let d = NuisanceSpecs::default();
        let pick = |c: &Option<LearnerChoice>, fallback: LearnerSpec, link| match c {
            Some(c) => c.resolve(link),
            None => Ok(fallback),
        };
        Ok(NuisanceSpecs {
            g: pick(&self.g, d.g, Link::Logit)?,
            q: pick(&self.q, d.q, Link::Logit)?,
            e: pick(&self.e, d.e, Link::Logit)?,
            r: pick(&self.r, d.r, Link::Logit)?,
            mu: pick(&self.mu, d.mu, Link::Logit)?,
            rho: pick(&self.rho, d.rho, Link::Identity)?,
        })
    }
}

/// A built-in model name or an inline model table.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum DgmChoice {
    Named(String),
    Spec(DgmSpec),
}

impl Default for DgmChoice {
    fn default() -> Self {
        DgmChoice::Named("benchmark".into())
    }
}

impl DgmChoice {
    pub fn resolve(&self) -> Result<DgmSpec, String> {
        match self {
            DgmChoice::Spec(s) => Ok(s.clone()),
            DgmChoice::Named(n) => match n.as_str() {
                "benchmark" => Ok(DgmSpec::benchmark()),
                "confounded" => Ok(DgmSpec::confounded()),
                "uniform" => Ok(DgmSpec::uniform()),
                other => Err(format!("unknown model `{other}` (expected benchmark, confounded or uniform)")),
            },
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub dgm: DgmChoice,
    pub scenarios: Vec<String>,
    pub reps: usize,
    pub n: Vec<usize>,
    pub folds: usize,
    pub truncation: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            dgm: DgmChoice::default(),
            scenarios: Scenario::ALL.iter().map(|s| s.name().to_string()).collect(),
            reps: 500,
            n: vec![10_000],
            folds: 2,
            truncation: 0.01,
        }
    }
}

impl SimulateSection {
    pub fn scenarios(&self) -> Result<Vec<Scenario>, String> {
        self.scenarios
            .iter()
            .map(|s| Scenario::from_name(s).ok_or_else(|| format!("unknown scenario `{s}`")))
            .collect()
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub dgm: DgmChoice,
    pub adjudicate_on: DgmChoice,
    pub eps: Vec<f64>,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            dgm: DgmChoice::default(),
            adjudicate_on: DgmChoice::Named("confounded".into()),
            eps: SWEEP_EPS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    pub metrics: Option<PathBuf>,
    pub svg: Option<PathBuf>,
}

pub fn load(path: Option<&Path>) -> Result<RunConfig, String> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            toml::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))
        }
    }
}

impl EstimateSection {
    pub fn estimand(&self) -> Result<EstimandSpec, String> {
        if self.a > 1 || self.a_prime > 1 {
            return Err(format!("a and a' must be 0 or 1, got ({}, {})", self.a, self.a_prime));
        }
        Ok(EstimandSpec::new(self.a, self.a_prime))
    }
}
