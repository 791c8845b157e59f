//! Experimental data model: validated treatment/outcome/covariate columns,
//! CSV ingestion with listwise deletion, and the sample moments consumed by
//! the estimation modules.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column-role mapping for CSV ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub treatments: Vec<String>,
    pub outcomes: Vec<String>,
    pub covariates: Vec<String>,
}

impl ColumnSchema {
    pub fn new<S: Into<String>>(
        treatments: Vec<S>,
        outcomes: Vec<S>,
        covariates: Vec<S>,
    ) -> Self {
        Self {
            treatments: treatments.into_iter().map(Into::into).collect(),
            outcomes: outcomes.into_iter().map(Into::into).collect(),
            covariates: covariates.into_iter().map(Into::into).collect(),
        }
    }
}

/// Unit-level experimental data.
///
/// Immutable after construction; all estimators take `&ExperimentData` and are
/// safe to run in parallel on a shared instance.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    n: usize,
    treatments: DMatrix<f64>,
    outcomes: DMatrix<f64>,
    covariates: DMatrix<f64>,
    treatment_labels: Vec<String>,
    outcome_labels: Vec<String>,
    covariate_labels: Vec<String>,
    dropped_rows: usize,
}

/// Treatment-cell key: one 0/1 entry per arm indicator. All-zero is control.
pub type CellKey = Vec<u8>;

/// Per-cell means and covariances.
#[derive(Debug, Clone)]
pub struct ArmMoments {
    pub count: usize,
    pub means: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Sample moments over all observed columns, ordered
/// `[treatments..., outcomes..., covariates...]`.
#[derive(Debug, Clone)]
pub struct MomentSummary {
    pub labels: Vec<String>,
    pub means: DVector<f64>,
    /// Unbiased sample covariance (denominator n-1).
    pub cov: DMatrix<f64>,
    pub per_arm: BTreeMap<CellKey, ArmMoments>,
}

impl MomentSummary {
    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

fn is_missing(tok: &str) -> bool {
    let t = tok.trim();
    t.is_empty()
        || t.eq_ignore_ascii_case("na")
        || t.eq_ignore_ascii_case("nan")
        || t.eq_ignore_ascii_case("null")
}

impl ExperimentData {
    /// Validates and assembles a dataset from column-major data.
    pub fn from_columns(
        treatments: Vec<(String, Vec<f64>)>,
        outcomes: Vec<(String, Vec<f64>)>,
        covariates: Vec<(String, Vec<f64>)>,
        dropped_rows: usize,
    ) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::Schema("at least one outcome column required".into()));
        }
        if treatments.is_empty() {
            return Err(Error::Schema(
                "at least one treatment column required".into(),
            ));
        }
        let n = outcomes[0].1.len();
        for (name, col) in treatments
            .iter()
            .chain(outcomes.iter())
            .chain(covariates.iter())
        {
            if col.len() != n {
                return Err(Error::Validation(format!(
                    "column `{name}` has {} rows, expected {n}",
                    col.len()
                )));
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "column `{name}` contains non-finite values"
                )));
            }
        }
        for (name, col) in &treatments {
            let mut distinct: Vec<f64> = Vec::new();
            for &v in col {
                if v != 0.0 && v != 1.0 {
                    return Err(Error::DegenerateDesign(format!(
                        "treatment column `{name}` takes value {v}; multi-valued \
                         assignments must be split into 0/1 indicator columns"
                    )));
                }
                if !distinct.contains(&v) {
                    distinct.push(v);
                }
            }
            if distinct.len() < 2 {
                return Err(Error::DegenerateDesign(format!(
                    "treatment column `{name}` is constant"
                )));
            }
        }
        let (t, j, p) = (treatments.len(), outcomes.len(), covariates.len());
        let min_n = (t + p + 2).max(4);
        if n < min_n {
            return Err(Error::Validation(format!(
                "n = {n} but at least {min_n} rows are required for {t} arm(s), \
                 {j} outcome(s), {p} covariate(s)"
            )));
        }
        let to_matrix = |cols: &[(String, Vec<f64>)]| {
            DMatrix::from_fn(n, cols.len(), |r, c| cols[c].1[r])
        };
        Ok(Self {
            n,
            treatments: to_matrix(&treatments),
            outcomes: to_matrix(&outcomes),
            covariates: if covariates.is_empty() {
                DMatrix::zeros(n, 0)
            } else {
                to_matrix(&covariates)
            },
            treatment_labels: treatments.into_iter().map(|c| c.0).collect(),
            outcome_labels: outcomes.into_iter().map(|c| c.0).collect(),
            covariate_labels: covariates.into_iter().map(|c| c.0).collect(),
            dropped_rows,
        })
    }

    /// Reads a CSV file (header row required, UTF-8, `.` decimal point) and
    /// validates it against the schema. Rows with missing or non-numeric
    /// entries in any schema column are dropped and counted.
    pub fn ingest_csv<P: AsRef<Path>>(path: P, schema: &ColumnSchema) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_path(path.as_ref())?;
        let headers = reader.headers()?.clone();
        let find = |name: &String| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Schema(format!("column `{name}` not found in header")))
        };
        let t_idx: Vec<usize> = schema.treatments.iter().map(find).collect::<Result<_>>()?;
        let y_idx: Vec<usize> = schema.outcomes.iter().map(find).collect::<Result<_>>()?;
        let x_idx: Vec<usize> = schema.covariates.iter().map(find).collect::<Result<_>>()?;

        let mut t_cols: Vec<Vec<f64>> = vec![Vec::new(); t_idx.len()];
        let mut y_cols: Vec<Vec<f64>> = vec![Vec::new(); y_idx.len()];
        let mut x_cols: Vec<Vec<f64>> = vec![Vec::new(); x_idx.len()];
        let mut dropped = 0usize;
        for record in reader.records() {
            let record = record?;
            let mut row: Vec<f64> = Vec::with_capacity(t_idx.len() + y_idx.len() + x_idx.len());
            let mut ok = true;
            for &i in t_idx.iter().chain(y_idx.iter()).chain(x_idx.iter()) {
                let tok = record.get(i).unwrap_or("");
                if is_missing(tok) {
                    ok = false;
                    break;
                }
                match tok.trim().parse::<f64>() {
                    Ok(v) if v.is_finite() => row.push(v),
                    _ => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                dropped += 1;
                continue;
            }
            let mut it = row.into_iter();
            for col in t_cols.iter_mut() {
                col.push(it.next().unwrap());
            }
            for col in y_cols.iter_mut() {
                col.push(it.next().unwrap());
            }
            for col in x_cols.iter_mut() {
                col.push(it.next().unwrap());
            }
        }
        let zip = |names: &[String], cols: Vec<Vec<f64>>| {
            names
                .iter()
                .cloned()
                .zip(cols)
                .collect::<Vec<(String, Vec<f64>)>>()
        };
        Self::from_columns(
            zip(&schema.treatments, t_cols),
            zip(&schema.outcomes, y_cols),
            zip(&schema.covariates, x_cols),
            dropped,
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }
    /// Number of outcome measures J.
    pub fn n_outcomes(&self) -> usize {
        self.outcomes.ncols()
    }
    /// Number of treatment arms T.
    pub fn n_arms(&self) -> usize {
        self.treatments.ncols()
    }
    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }
    pub fn dropped_rows(&self) -> usize {
        self.dropped_rows
    }
    pub fn treatment_labels(&self) -> &[String] {
        &self.treatment_labels
    }
    pub fn outcome_labels(&self) -> &[String] {
        &self.outcome_labels
    }
    pub fn covariate_labels(&self) -> &[String] {
        &self.covariate_labels
    }

    pub fn outcome(&self, j: usize) -> DVector<f64> {
        self.outcomes.column(j).into_owned()
    }
    pub fn treatment(&self, t: usize) -> DVector<f64> {
        self.treatments.column(t).into_owned()
    }
    pub fn covariate(&self, p: usize) -> DVector<f64> {
        self.covariates.column(p).into_owned()
    }
    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }
    pub fn treatments(&self) -> &DMatrix<f64> {
        &self.treatments
    }
    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    /// Treatment-cell key of row `i`.
    pub fn cell_of(&self, i: usize) -> CellKey {
        (0..self.n_arms())
            .map(|t| self.treatments[(i, t)] as u8)
            .collect()
    }

    /// Row indices grouped by treatment cell.
    pub fn cells(&self) -> BTreeMap<CellKey, Vec<usize>> {
        let mut map: BTreeMap<CellKey, Vec<usize>> = BTreeMap::new();
        for i in 0..self.n {
            map.entry(self.cell_of(i)).or_default().push(i);
        }
        map
    }

    /// Rows assigned to arm `t`.
    pub fn arm_rows(&self, t: usize) -> Vec<usize> {
        (0..self.n)
            .filter(|&i| self.treatments[(i, t)] == 1.0)
            .collect()
    }

    /// Rows with every arm indicator zero.
    pub fn control_rows(&self) -> Vec<usize> {
        (0..self.n)
            .filter(|&i| (0..self.n_arms()).all(|t| self.treatments[(i, t)] == 0.0))
            .collect()
    }

    /// All observed columns as one matrix, ordered
    /// `[treatments..., outcomes..., covariates...]`.
    pub fn observed_matrix(&self) -> (DMatrix<f64>, Vec<String>) {
        let m = self.n_arms() + self.n_outcomes() + self.n_covariates();
        let mut out = DMatrix::zeros(self.n, m);
        let mut labels = Vec::with_capacity(m);
        let mut c = 0;
        for t in 0..self.n_arms() {
            out.set_column(c, &self.treatments.column(t));
            labels.push(self.treatment_labels[t].clone());
            c += 1;
        }
        for j in 0..self.n_outcomes() {
            out.set_column(c, &self.outcomes.column(j));
            labels.push(self.outcome_labels[j].clone());
            c += 1;
        }
        for p in 0..self.n_covariates() {
            out.set_column(c, &self.covariates.column(p));
            labels.push(self.covariate_labels[p].clone());
            c += 1;
        }
        (out, labels)
    }

    /// Sample moments of all observed columns, deterministic for fixed input.
    pub fn moments(&self) -> MomentSummary {
        let (mat, labels) = self.observed_matrix();
        let (means, cov) = means_and_cov(&mat);
        let mut per_arm = BTreeMap::new();
        for (key, rows) in self.cells() {
            let sub = select_rows(&mat, &rows);
            let (m, c) = means_and_cov(&sub);
            per_arm.insert(
                key,
                ArmMoments {
                    count: rows.len(),
                    means: m,
                    cov: c,
                },
            );
        }
        MomentSummary {
            labels,
            means,
            cov,
            per_arm,
        }
    }
}

pub(crate) fn select_rows(mat: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), mat.ncols(), |r, c| mat[(rows[r], c)])
}

/// Column means and the unbiased (n-1) covariance matrix.
pub(crate) fn means_and_cov(mat: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = mat.nrows();
    let m = mat.ncols();
    let means = DVector::from_fn(m, |c, _| mat.column(c).sum() / n as f64);
    let mut cov = DMatrix::zeros(m, m);
    if n > 1 {
        let mut centered = mat.clone();
        for c in 0..m {
            let mu = means[c];
            for r in 0..n {
                centered[(r, c)] -= mu;
            }
        }
        cov = centered.transpose() * &centered / (n as f64 - 1.0);
        // enforce exact symmetry against round-off
        for a in 0..m {
            for b in (a + 1)..m {
                let v = 0.5 * (cov[(a, b)] + cov[(b, a)]);
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
    }
    (means, cov)
}
