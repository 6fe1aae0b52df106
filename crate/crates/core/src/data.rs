//! Trial data model, CSV ingestion and index-set partitioning.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Unit-level data of a hybrid trial: randomized units (S=1) plus external
/// controls (S=0). Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialData {
    covariates: Matrix,
    outcome: Vec<f64>,
    assignment: Vec<u8>,
    sample: Vec<u8>,
    unit_ids: Vec<String>,
}

impl TrialData {
    /// Validates and builds a dataset. `unit_ids` defaults to row numbers.
    pub fn new(covariates: Matrix, outcome: Vec<f64>, assignment: Vec<u8>, sample: Vec<u8>, unit_ids: Option<Vec<String>>) -> Result<Self> {
        let n = outcome.len();
        if covariates.rows() != n || assignment.len() != n || sample.len() != n {
            return Err(Error::InvalidParameter(format!(
                "length mismatch: covariates {} rows, outcome {n}, assignment {}, sample {}",
                covariates.rows(),
                assignment.len(),
                sample.len()
            )));
        }
        if covariates.cols() == 0 {
            return Err(Error::InvalidParameter("at least one covariate is required".into()));
        }
        let unit_ids = unit_ids.unwrap_or_else(|| (0..n).map(|i| i.to_string()).collect());
        if unit_ids.len() != n {
            return Err(Error::InvalidParameter("unit id count does not match rows".into()));
        }
        for i in 0..n {
            if assignment[i] > 1 {
                return Err(Error::BadValue { row: i, column: "A".into(), value: assignment[i].to_string() });
            }
            if sample[i] > 1 {
                return Err(Error::BadValue { row: i, column: "S".into(), value: sample[i].to_string() });
            }
            if sample[i] == 0 && assignment[i] == 1 {
                return Err(Error::EcTreated { row: i });
            }
            if !outcome[i].is_finite() {
                return Err(Error::BadValue { row: i, column: "Y".into(), value: outcome[i].to_string() });
            }
            if covariates.row(i).iter().any(|v| !v.is_finite()) {
                return Err(Error::BadValue { row: i, column: "X".into(), value: format!("{:?}", covariates.row(i)) });
            }
        }
        Ok(TrialData { covariates, outcome, assignment, sample, unit_ids })
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    /// Covariate dimension.
    pub fn p(&self) -> usize {
        self.covariates.cols()
    }

    pub fn covariates(&self) -> &Matrix {
        &self.covariates
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn assignment(&self) -> &[u8] {
        &self.assignment
    }

    pub fn sample(&self) -> &[u8] {
        &self.sample
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn n_rct(&self) -> usize {
        self.sample.iter().filter(|&&s| s == 1).count()
    }

    pub fn n_external(&self) -> usize {
        self.n() - self.n_rct()
    }

    /// Copy with the outcome replaced.
    pub fn with_outcome(&self, outcome: Vec<f64>) -> Result<TrialData> {
        TrialData::new(self.covariates.clone(), outcome, self.assignment.clone(), self.sample.clone(), Some(self.unit_ids.clone()))
    }

    /// Copy with a new assignment vector; external controls must stay at 0.
    pub fn with_assignment(&self, assignment: Vec<u8>) -> Result<TrialData> {
        TrialData::new(self.covariates.clone(), self.outcome.clone(), assignment, self.sample.clone(), Some(self.unit_ids.clone()))
    }

    /// Rows `idx` in order; repeated indices produce repeated units.
    pub fn select(&self, idx: &[usize]) -> TrialData {
        TrialData {
            covariates: self.covariates.select_rows(idx),
            outcome: idx.iter().map(|&i| self.outcome[i]).collect(),
            assignment: idx.iter().map(|&i| self.assignment[i]).collect(),
            sample: idx.iter().map(|&i| self.sample[i]).collect(),
            unit_ids: idx.iter().map(|&i| self.unit_ids[i].clone()).collect(),
        }
    }

    /// Stratified bootstrap: resamples with replacement inside the treated,
    /// randomized-control and external groups of `sets`, keeping each
    /// group's size. Rows of the result are ordered treated, controls,
    /// externals.
    pub fn stratified_resample<R: Rng + ?Sized>(&self, sets: &IndexSets, rng: &mut R) -> (TrialData, IndexSets) {
        let mut idx = Vec::with_capacity(sets.treated.len() + sets.rct_controls.len() + sets.external.len());
        let mut assignment = Vec::with_capacity(idx.capacity());
        for (group, a) in [(&sets.treated, 1u8), (&sets.rct_controls, 0u8), (&sets.external, 0u8)] {
            for _ in 0..group.len() {
                idx.push(group[rng.random_range(0..group.len())]);
                assignment.push(a);
            }
        }
        let mut boot = self.select(&idx);
        // The resampled groups follow `sets`, which may differ from the
        // stored assignment (FRT resamples).
        boot.assignment = assignment;
        let n1 = sets.treated.len();
        let n0 = sets.rct_controls.len();
        let ne = sets.external.len();
        let boot_sets = IndexSets::from_groups(n1, n0, ne);
        (boot, boot_sets)
    }
}

/// Membership of a unit in the partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    Treated,
    Control,
    External,
}

/// Index sets: treated 𝒯, randomized controls 𝒞, all randomized ℛ and
/// external controls ℰ. All lists are ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSets {
    pub treated: Vec<usize>,
    pub rct_controls: Vec<usize>,
    pub rct_all: Vec<usize>,
    pub external: Vec<usize>,
    group: Vec<Group>,
}

impl IndexSets {
    /// Partition from sample indicators and an assignment vector.
    pub fn from_labels(sample: &[u8], assignment: &[u8]) -> Result<IndexSets> {
        let n = sample.len();
        let mut sets = IndexSets {
            treated: Vec::new(),
            rct_controls: Vec::new(),
            rct_all: Vec::new(),
            external: Vec::new(),
            group: Vec::with_capacity(n),
        };
        for i in 0..n {
            if sample[i] == 1 {
                sets.rct_all.push(i);
                if assignment[i] == 1 {
                    sets.treated.push(i);
                    sets.group.push(Group::Treated);
                } else {
                    sets.rct_controls.push(i);
                    sets.group.push(Group::Control);
                }
            } else {
                sets.external.push(i);
                sets.group.push(Group::External);
            }
        }
        if sets.treated.is_empty() {
            return Err(Error::EmptyGroup("treated"));
        }
        if sets.rct_controls.is_empty() {
            return Err(Error::EmptyGroup("rct_controls"));
        }
        Ok(sets)
    }

    /// Layout produced by [`TrialData::stratified_resample`].
    fn from_groups(n1: usize, n0: usize, ne: usize) -> IndexSets {
        let treated: Vec<usize> = (0..n1).collect();
        let rct_controls: Vec<usize> = (n1..n1 + n0).collect();
        let external: Vec<usize> = (n1 + n0..n1 + n0 + ne).collect();
        let mut group = vec![Group::Treated; n1];
        group.extend(std::iter::repeat_n(Group::Control, n0));
        group.extend(std::iter::repeat_n(Group::External, ne));
        IndexSets { treated, rct_controls, rct_all: (0..n1 + n0).collect(), external, group }
    }

    #[inline]
    pub fn group(&self, i: usize) -> Group {
        self.group[i]
    }

    pub fn n(&self) -> usize {
        self.group.len()
    }

    pub fn n_rct(&self) -> usize {
        self.rct_all.len()
    }

    /// Assignment vector implied by the partition.
    pub fn assignment(&self) -> Vec<u8> {
        self.group.iter().map(|g| u8::from(*g == Group::Treated)).collect()
    }
}

/// Partition of the observed data.
pub fn partition(data: &TrialData) -> Result<IndexSets> {
    IndexSets::from_labels(data.sample(), data.assignment())
}

/// Randomization design of the trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DesignSpec {
    /// Each randomized unit is treated independently with probability `prob`.
    BernoulliFixedProb { prob: f64 },
}

impl DesignSpec {
    pub fn bernoulli(prob: f64) -> Result<DesignSpec> {
        if !(prob > 0.0 && prob < 1.0) {
            return Err(Error::InvalidParameter(format!("treatment probability {prob} outside (0,1)")));
        }
        Ok(DesignSpec::BernoulliFixedProb { prob })
    }

    /// Known propensity score ê; constant in x.
    pub fn known_propensity(&self) -> f64 {
        match *self {
            DesignSpec::BernoulliFixedProb { prob } => prob,
        }
    }
}

/// Column names of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub outcome: String,
    pub treatment: String,
    pub sample: String,
    /// Covariate columns; empty means every column not otherwise mapped.
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Unit id column; when unset, a column named `id` is used if present.
    #[serde(default)]
    pub id: Option<String>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping { outcome: "y".into(), treatment: "a".into(), sample: "s".into(), covariates: Vec::new(), id: None }
    }
}

/// One problem found while validating a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationIssue {
    pub kind: &'static str,
    pub row: Option<usize>,
    pub column: Option<String>,
    pub message: String,
}

impl From<&Error> for ValidationIssue {
    fn from(e: &Error) -> Self {
        let (row, column) = match e {
            Error::BadValue { row, column, .. } => (Some(*row), Some(column.clone())),
            Error::EcTreated { row } => (Some(*row), None),
            Error::MissingColumn(c) => (None, Some(c.clone())),
            _ => (None, None),
        };
        ValidationIssue { kind: e.kind(), row, column, message: e.to_string() }
    }
}

struct Columns {
    outcome: usize,
    treatment: usize,
    sample: usize,
    covariates: Vec<(usize, String)>,
    id: Option<usize>,
}

const DEFAULT_ID_COLUMN: &str = "id";

fn resolve_columns(headers: &csv::StringRecord, schema: &ColumnMapping) -> Result<Columns> {
    let find = |name: &str| headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::MissingColumn(name.to_string()));
    let outcome = find(&schema.outcome)?;
    let treatment = find(&schema.treatment)?;
    let sample = find(&schema.sample)?;
    // Without an explicit id column, a column literally named "id" is used.
    let id = match schema.id.as_deref() {
        Some(name) => Some(find(name)?),
        None => headers.iter().position(|h| h.trim() == DEFAULT_ID_COLUMN),
    };
    let covariates = if schema.covariates.is_empty() {
        headers
            .iter()
            .enumerate()
            .filter(|(j, _)| ![outcome, treatment, sample].contains(j) && Some(*j) != id)
            .map(|(j, h)| (j, h.trim().to_string()))
            .collect()
    } else {
        schema.covariates.iter().map(|c| Ok((find(c)?, c.clone()))).collect::<Result<Vec<_>>>()?
    };
    if covariates.is_empty() {
        return Err(Error::MissingColumn("<covariate>".into()));
    }
    Ok(Columns { outcome, treatment, sample, covariates, id })
}

fn parse_real(record: &csv::StringRecord, row: usize, col: usize, name: &str) -> Result<f64> {
    let raw = record.get(col).unwrap_or("").trim();
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::BadValue { row, column: name.to_string(), value: raw.to_string() }),
    }
}

fn parse_flag(record: &csv::StringRecord, row: usize, col: usize, name: &str) -> Result<u8> {
    let raw = record.get(col).unwrap_or("").trim();
    match raw {
        "0" | "0.0" => Ok(0),
        "1" | "1.0" => Ok(1),
        _ => Err(Error::BadValue { row, column: name.to_string(), value: raw.to_string() }),
    }
}

struct ParsedRow {
    covariates: Vec<f64>,
    outcome: f64,
    a: u8,
    s: u8,
    id: Option<String>,
}

fn parse_row(record: &csv::StringRecord, row: usize, cols: &Columns, schema: &ColumnMapping) -> Result<ParsedRow> {
    let outcome = parse_real(record, row, cols.outcome, &schema.outcome)?;
    let a = parse_flag(record, row, cols.treatment, &schema.treatment)?;
    let s = parse_flag(record, row, cols.sample, &schema.sample)?;
    let covariates = cols.covariates.iter().map(|(j, name)| parse_real(record, row, *j, name)).collect::<Result<Vec<_>>>()?;
    if s == 0 && a == 1 {
        return Err(Error::EcTreated { row });
    }
    let id = cols.id.map(|j| record.get(j).unwrap_or("").trim().to_string());
    Ok(ParsedRow { covariates, outcome, a, s, id })
}

/// Reads a headered CSV into validated trial data. Rows keep file order;
/// `row` numbers in errors are 0-based data rows.
pub fn load_dataset<R: Read>(source: R, schema: &ColumnMapping) -> Result<TrialData> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers()?.clone();
    let cols = resolve_columns(&headers, schema)?;
    let p = cols.covariates.len();
    let mut x = Vec::new();
    let (mut y, mut a, mut s, mut ids) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (row, record) in reader.records().enumerate() {
        let parsed = parse_row(&record?, row, &cols, schema)?;
        x.extend(parsed.covariates);
        y.push(parsed.outcome);
        a.push(parsed.a);
        s.push(parsed.s);
        ids.push(parsed.id.unwrap_or_else(|| row.to_string()));
    }
    let n = y.len();
    TrialData::new(Matrix::new(x, n, p), y, a, s, Some(ids))
}

/// Collects every problem in a CSV instead of stopping at the first.
pub fn validate_dataset<R: Read>(source: R, schema: &ColumnMapping) -> Vec<ValidationIssue> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(source);
    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(e) => return vec![ValidationIssue::from(&Error::from(e))],
    };
    let cols = match resolve_columns(&headers, schema) {
        Ok(c) => c,
        Err(e) => return vec![ValidationIssue::from(&e)],
    };
    let mut issues = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let outcome = record.map_err(Error::from).and_then(|r| parse_row(&r, row, &cols, schema));
        if let Err(e) = outcome {
            issues.push(ValidationIssue::from(&e));
        }
    }
    issues
}

/// Writes data back as CSV using `schema`'s names (covariates default to
/// `x1..xp`). Reals use shortest round-trip formatting.
pub fn write_dataset<W: Write>(data: &TrialData, schema: &ColumnMapping, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let cov_names: Vec<String> =
        if schema.covariates.len() == data.p() { schema.covariates.clone() } else { (1..=data.p()).map(|j| format!("x{j}")).collect() };
    let id_name = schema.id.clone().unwrap_or_else(|| DEFAULT_ID_COLUMN.to_string());
    let mut header = vec![id_name, schema.outcome.clone(), schema.treatment.clone(), schema.sample.clone()];
    header.extend(cov_names);
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec = vec![data.unit_ids[i].clone(), data.outcome[i].to_string(), data.assignment[i].to_string(), data.sample[i].to_string()];
        rec.extend(data.covariates.row(i).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
