//! Observed-data model, CSV ingestion and identification diagnostics.
//!
//! A [`Dataset`] holds `n` records of `(W, A, Z, M, Y)` where `A` (treatment
//! assignment) and `Z` (the treatment-induced confounder, e.g. take-up) are
//! binary, `W` and `M` are real vectors and `Y` is binary or continuous.
//! Datasets are immutable once constructed.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: column `{column}` is empty")]
    MissingValue { row: usize, column: String },
    #[error("row {row}: column `{column}` has non-numeric value `{value}`")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: column `{column}` must be 0 or 1, found {value}")]
    NotBinary {
        row: usize,
        column: String,
        value: f64,
    },
    #[error("row {row}: non-finite value in column `{column}`")]
    NonFinite { row: usize, column: String },
    #[error("row {row}: expected {expected} fields, found {found}")]
    Arity {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("dataset has no records")]
    Empty,
    #[error("outcome declared binary but row {row} has Y = {value}")]
    OutcomeNotBinary { row: usize, value: f64 },
    #[error("column spec needs at least one mediator column")]
    NoMediator,
    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Binary,
    Continuous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservedRecord {
    pub w: Vec<f64>,
    pub a: u8,
    pub z: u8,
    pub m: Vec<f64>,
    pub y: f64,
}

/// Names the CSV columns that hold each block of variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub w: Vec<String>,
    pub a: String,
    pub z: String,
    pub m: Vec<String>,
    pub y: String,
    /// Inferred from the data when absent: binary iff every `Y` is 0 or 1.
    #[serde(default)]
    pub y_kind: Option<OutcomeKind>,
}

impl ColumnSpec {
    /// The layout written by [`Dataset::write_csv`] for a dataset with the
    /// given covariate and mediator names.
    pub fn standard(w_names: &[String], m_names: &[String]) -> Self {
        Self {
            w: w_names.to_vec(),
            a: "A".into(),
            z: "Z".into(),
            m: m_names.to_vec(),
            y: "Y".into(),
            y_kind: None,
        }
    }

    /// The default layout for a header: `W*` covariates, `A`, `Z`, `M*`
    /// mediators and `Y`, in file order.
    pub fn from_header<'a>(header: impl IntoIterator<Item = &'a str>) -> Self {
        let (mut w, mut m) = (Vec::new(), Vec::new());
        for h in header.into_iter().map(str::trim) {
            if h.starts_with('W') {
                w.push(h.to_string());
            } else if h.starts_with('M') {
                m.push(h.to_string());
            }
        }
        Self::standard(&w, &m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<ObservedRecord>,
    w_names: Vec<String>,
    m_names: Vec<String>,
    y_kind: OutcomeKind,
}

impl Dataset {
    /// Validates and wraps records. Row numbers in errors are 1-based.
    pub fn new(
        records: Vec<ObservedRecord>,
        w_names: Vec<String>,
        m_names: Vec<String>,
        y_kind: OutcomeKind,
    ) -> Result<Self, DataError> {
        if records.is_empty() {
            return Err(DataError::Empty);
        }
        if m_names.is_empty() {
            return Err(DataError::NoMediator);
        }
        for (i, r) in records.iter().enumerate() {
            let row = i + 1;
            if r.w.len() != w_names.len() || r.m.len() != m_names.len() {
                return Err(DataError::Arity {
                    row,
                    expected: w_names.len() + m_names.len(),
                    found: r.w.len() + r.m.len(),
                });
            }
            for (v, name) in r.w.iter().zip(&w_names).chain(r.m.iter().zip(&m_names)) {
                if !v.is_finite() {
                    return Err(DataError::NonFinite {
                        row,
                        column: name.clone(),
                    });
                }
            }
            if r.a > 1 {
                return Err(DataError::NotBinary {
                    row,
                    column: "A".into(),
                    value: r.a as f64,
                });
            }
            if r.z > 1 {
                return Err(DataError::NotBinary {
                    row,
                    column: "Z".into(),
                    value: r.z as f64,
                });
            }
            if !r.y.is_finite() {
                return Err(DataError::NonFinite {
                    row,
                    column: "Y".into(),
                });
            }
            if y_kind == OutcomeKind::Binary && r.y != 0.0 && r.y != 1.0 {
                return Err(DataError::OutcomeNotBinary { row, value: r.y });
            }
        }
        Ok(Self {
            records,
            w_names,
            m_names,
            y_kind,
        })
    }

    pub fn records(&self) -> &[ObservedRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn w_names(&self) -> &[String] {
        &self.w_names
    }

    pub fn m_names(&self) -> &[String] {
        &self.m_names
    }

    pub fn y_kind(&self) -> OutcomeKind {
        self.y_kind
    }

    /// Reads only the header of `path` and applies [`ColumnSpec::from_header`].
    pub fn infer_columns(path: impl AsRef<Path>) -> Result<ColumnSpec, DataError> {
        let mut rdr = csv::Reader::from_path(path)?;
        Ok(ColumnSpec::from_header(rdr.headers()?.iter()))
    }

    pub fn load_csv(path: impl AsRef<Path>, schema: &ColumnSpec) -> Result<Self, DataError> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(file, schema)
    }

    pub fn read_csv<R: Read>(reader: R, schema: &ColumnSpec) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let position = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| DataError::MissingColumn(name.to_string()))
        };
        if schema.m.is_empty() {
            return Err(DataError::NoMediator);
        }
        let w_idx = schema
            .w
            .iter()
            .map(|c| position(c))
            .collect::<Result<Vec<_>, _>>()?;
        let a_idx = position(&schema.a)?;
        let z_idx = position(&schema.z)?;
        let m_idx = schema
            .m
            .iter()
            .map(|c| position(c))
            .collect::<Result<Vec<_>, _>>()?;
        let y_idx = position(&schema.y)?;

        let mut records = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row_no = i + 1;
            let row = row?;
            if row.len() != headers.len() {
                return Err(DataError::Arity {
                    row: row_no,
                    expected: headers.len(),
                    found: row.len(),
                });
            }
            let cell = |idx: usize| -> Result<f64, DataError> {
                let column = headers.get(idx).unwrap_or_default().trim().to_string();
                let raw = row.get(idx).unwrap_or_default().trim();
                if raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan") {
                    return Err(DataError::MissingValue {
                        row: row_no,
                        column,
                    });
                }
                let v: f64 = raw.parse().map_err(|_| DataError::NonNumeric {
                    row: row_no,
                    column: column.clone(),
                    value: raw.to_string(),
                })?;
                if !v.is_finite() {
                    return Err(DataError::NonFinite {
                        row: row_no,
                        column,
                    });
                }
                Ok(v)
            };
            let binary = |idx: usize, column: &str| -> Result<u8, DataError> {
                let v = cell(idx)?;
                if v == 0.0 {
                    Ok(0)
                } else if v == 1.0 {
                    Ok(1)
                } else {
                    Err(DataError::NotBinary {
                        row: row_no,
                        column: column.to_string(),
                        value: v,
                    })
                }
            };
            records.push(ObservedRecord {
                w: w_idx.iter().map(|&j| cell(j)).collect::<Result<_, _>>()?,
                a: binary(a_idx, &schema.a)?,
                z: binary(z_idx, &schema.z)?,
                m: m_idx.iter().map(|&j| cell(j)).collect::<Result<_, _>>()?,
                y: cell(y_idx)?,
            });
        }
        let y_kind = schema.y_kind.unwrap_or_else(|| {
            if records.iter().all(|r| r.y == 0.0 || r.y == 1.0) {
                OutcomeKind::Binary
            } else {
                OutcomeKind::Continuous
            }
        });
        Self::new(records, schema.w.clone(), schema.m.clone(), y_kind)
    }

    /// Writes the standard layout `W..., A, Z, M..., Y` (see
    /// [`ColumnSpec::standard`]). Floats use the shortest representation
    /// that parses back to the same value.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.w_names.iter().map(String::as_str).collect();
        header.extend(["A", "Z"]);
        header.extend(self.m_names.iter().map(String::as_str));
        header.push("Y");
        wtr.write_record(&header)?;
        for r in &self.records {
            let mut fields: Vec<String> = r.w.iter().map(|v| v.to_string()).collect();
            fields.push(r.a.to_string());
            fields.push(r.z.to_string());
            fields.extend(r.m.iter().map(|v| v.to_string()));
            fields.push(r.y.to_string());
            wtr.write_record(&fields)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Same covariates/mediators, records replaced. Used by tests and by
    /// resampling code that must keep the schema.
    pub fn with_records(&self, records: Vec<ObservedRecord>) -> Result<Self, DataError> {
        Self::new(
            records,
            self.w_names.clone(),
            self.m_names.clone(),
            self.y_kind,
        )
    }
}

/// Empirical take-up by arm within one stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumTakeUp {
    /// Covariate values defining the stratum (empty for the overall row).
    pub key: Vec<(String, f64)>,
    pub n: usize,
    pub n_treated: usize,
    pub n_control: usize,
    /// `None` when the arm is empty in this stratum.
    pub p_z_given_a1: Option<f64>,
    pub p_z_given_a0: Option<f64>,
    /// Set when P(Z=1|A=1) < P(Z=1|A=0): take-up falls under assignment,
    /// which is incompatible with the no-defiers assumption in aggregate.
    pub monotonicity_flag: bool,
    /// Set when an arm is empty and the comparison was skipped.
    pub skipped: bool,
}

/// Near-violations of positivity after nuisance estimation. Each flag is
/// raised when some observation's estimated probability hit the truncation
/// bound, one flag per case of the positivity assumption.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PositivityFlags {
    /// g(a|W) at a bound.
    pub treatment: bool,
    /// q(z|a',W) at a bound, needed for the (1,1) and (1,0)/(0,0) M-laws.
    pub confounder_11: bool,
    pub confounder_10: bool,
    pub confounder_00: bool,
    /// e(a|M,Z,W) or r(z|M,a',W) at a bound: mediator overlap across arms.
    pub mediator: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PropensitySummary {
    pub min: f64,
    pub max: f64,
    pub truncated: usize,
    /// Observations with q(1|1,W) - q(1|0,W) < 0.
    pub negative_q_diff: usize,
    pub positivity: PositivityFlags,
}

/// Advisory report. Monotonicity is an individual-level assumption; these
/// aggregate comparisons can falsify it but never confirm it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub advisory: bool,
    pub overall: StratumTakeUp,
    pub strata: Vec<StratumTakeUp>,
    pub propensity: Option<PropensitySummary>,
}

impl DiagnosticsReport {
    pub fn any_monotonicity_flag(&self) -> bool {
        self.overall.monotonicity_flag || self.strata.iter().any(|s| s.monotonicity_flag)
    }
}

fn take_up<'a>(key: Vec<(String, f64)>, recs: impl Iterator<Item = &'a ObservedRecord>) -> StratumTakeUp {
    let (mut n1, mut z1, mut n0, mut z0) = (0usize, 0usize, 0usize, 0usize);
    for r in recs {
        if r.a == 1 {
            n1 += 1;
            z1 += r.z as usize;
        } else {
            n0 += 1;
            z0 += r.z as usize;
        }
    }
    let p1 = (n1 > 0).then(|| z1 as f64 / n1 as f64);
    let p0 = (n0 > 0).then(|| z0 as f64 / n0 as f64);
    let flag = matches!((p1, p0), (Some(a), Some(b)) if a < b);
    StratumTakeUp {
        key,
        n: n1 + n0,
        n_treated: n1,
        n_control: n0,
        p_z_given_a1: p1,
        p_z_given_a0: p0,
        monotonicity_flag: flag,
        skipped: p1.is_none() || p0.is_none(),
    }
}

/// Empirical take-up P(Z=1|A=a) overall and within strata formed by the
/// distinct values of the named covariates.
pub fn diagnose(d: &Dataset, strata: &[String]) -> Result<DiagnosticsReport, DataError> {
    if d.is_empty() {
        return Err(DataError::Empty);
    }
    let cols = strata
        .iter()
        .map(|s| {
            d.w_names()
                .iter()
                .position(|w| w == s)
                .ok_or_else(|| DataError::UnknownCovariate(s.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let overall = take_up(Vec::new(), d.records().iter());
    let mut groups: BTreeMap<Vec<u64>, Vec<&ObservedRecord>> = BTreeMap::new();
    if !cols.is_empty() {
        for r in d.records() {
            // order by value; bit patterns of non-negative floats sort like the floats
            let key = cols.iter().map(|&c| order_key(r.w[c])).collect();
            groups.entry(key).or_default().push(r);
        }
    }
    let strata = groups
        .into_values()
        .map(|recs| {
            let key = cols
                .iter()
                .zip(strata)
                .map(|(&c, name)| (name.clone(), recs[0].w[c]))
                .collect();
            take_up(key, recs.into_iter())
        })
        .collect();
    Ok(DiagnosticsReport {
        advisory: true,
        overall,
        strata,
        propensity: None,
    })
}

fn order_key(v: f64) -> u64 {
    let bits = v.to_bits();
    if v.is_sign_negative() {
        !bits
    } else {
        bits | (1 << 63)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ColumnSpec {
        ColumnSpec {
            w: vec!["W1".into()],
            a: "A".into(),
            z: "Z".into(),
            m: vec!["M".into()],
            y: "Y".into(),
            y_kind: None,
        }
    }

    fn rec(a: u8, z: u8) -> ObservedRecord {
        ObservedRecord {
            w: vec![0.0],
            a,
            z,
            m: vec![0.0],
            y: 0.0,
        }
    }

    #[test]
    fn three_row_file() {
        let csv = "W1,A,Z,M,Y\n0.5,1,0,1.25,1\n1,0,0,0,0\n-2,1,1,3,1\n";
        let d = Dataset::read_csv(csv.as_bytes(), &spec()).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.records()[0].w.len(), 1);
        assert_eq!(d.records()[0].m.len(), 1);
        assert_eq!(d.y_kind(), OutcomeKind::Binary);
        assert_eq!(d.records()[2].w[0], -2.0);
    }

    #[test]
    fn column_order_comes_from_header() {
        let csv = "Y,M,Z,A,W1\n1,2,0,1,7\n";
        let d = Dataset::read_csv(csv.as_bytes(), &spec()).unwrap();
        let r = &d.records()[0];
        assert_eq!((r.w[0], r.a, r.z, r.m[0], r.y), (7.0, 1, 0, 2.0, 1.0));
    }

    #[test]
    fn a_outside_domain_names_row() {
        let mut csv = String::from("W1,A,Z,M,Y\n");
        for i in 1..=8 {
            let a = if i == 7 { 2 } else { 1 };
            csv.push_str(&format!("0,{a},0,0,0\n"));
        }
        let err = Dataset::read_csv(csv.as_bytes(), &spec()).unwrap_err();
        assert!(matches!(err, DataError::NotBinary { row: 7, .. }), "{err}");
        assert!(err.to_string().contains("row 7"));
    }

    #[test]
    fn rejects_missing_and_non_numeric() {
        let missing = "W1,A,Z,M,Y\n0,1,0,,1\n";
        assert!(matches!(
            Dataset::read_csv(missing.as_bytes(), &spec()),
            Err(DataError::MissingValue { row: 1, .. })
        ));
        let na = "W1,A,Z,M,Y\n0,1,0,1,1\n0,1,0,NA,1\n";
        assert!(matches!(
            Dataset::read_csv(na.as_bytes(), &spec()),
            Err(DataError::MissingValue { row: 2, .. })
        ));
        let text = "W1,A,Z,M,Y\nabc,1,0,1,1\n";
        assert!(matches!(
            Dataset::read_csv(text.as_bytes(), &spec()),
            Err(DataError::NonNumeric { row: 1, .. })
        ));
        let no_y = "W1,A,Z,M\n0,1,0,1\n";
        let err = Dataset::read_csv(no_y.as_bytes(), &spec()).unwrap_err();
        assert!(matches!(&err, DataError::MissingColumn(c) if c == "Y"));
    }

    #[test]
    fn continuous_outcome_inferred() {
        let csv = "W1,A,Z,M,Y\n0,1,0,1,0.25\n";
        let d = Dataset::read_csv(csv.as_bytes(), &spec()).unwrap();
        assert_eq!(d.y_kind(), OutcomeKind::Continuous);
    }

    #[test]
    fn write_then_read_is_identity() {
        let csv = "W1,A,Z,M,Y\n0.1,1,0,1e-300,1\n0.30000000000000004,0,1,-7.5,0\n";
        let d = Dataset::read_csv(csv.as_bytes(), &spec()).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice(), &spec()).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn perfect_compliance_has_no_flag() {
        let recs: Vec<_> = (0..10).map(|i| rec((i % 2) as u8, (i % 2) as u8)).collect();
        let d = Dataset::new(recs, vec!["W1".into()], vec!["M".into()], OutcomeKind::Binary).unwrap();
        let rep = diagnose(&d, &[]).unwrap();
        assert_eq!(rep.overall.p_z_given_a1, Some(1.0));
        assert_eq!(rep.overall.p_z_given_a0, Some(0.0));
        assert!(!rep.any_monotonicity_flag());
        assert!(rep.advisory);
    }

    #[test]
    fn all_defiers_raise_flag() {
        let recs: Vec<_> = (0..10).map(|i| rec((i % 2) as u8, 1 - (i % 2) as u8)).collect();
        let d = Dataset::new(recs, vec!["W1".into()], vec!["M".into()], OutcomeKind::Binary).unwrap();
        let rep = diagnose(&d, &[]).unwrap();
        assert!(rep.overall.monotonicity_flag);
    }

    #[test]
    fn empty_arm_in_stratum_is_skipped() {
        let mut recs: Vec<_> = (0..6).map(|i| rec((i % 2) as u8, 0)).collect();
        recs.push(ObservedRecord {
            w: vec![1.0],
            a: 1,
            z: 1,
            m: vec![0.0],
            y: 0.0,
        });
        let d = Dataset::new(recs, vec!["W1".into()], vec!["M".into()], OutcomeKind::Binary).unwrap();
        let rep = diagnose(&d, &["W1".into()]).unwrap();
        assert_eq!(rep.strata.len(), 2);
        assert!(!rep.strata[0].skipped);
        assert!(rep.strata[1].skipped);
        assert_eq!(rep.strata[1].key, vec![("W1".to_string(), 1.0)]);
        assert!(diagnose(&d, &["nope".into()]).is_err());
    }
}
