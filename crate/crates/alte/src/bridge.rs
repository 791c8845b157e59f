//! Nonparametric measurement bridges for finite-support measures.
//!
//! A discrete measure cannot be a linear function of a continuous latent
//! outcome. A bridge maps each observed support value to the reference
//! measure's scale by solving `E[h(Y_j) | W = w] = E[Y_ref | W = w]` across
//! instrument cells (treatment arms, optionally crossed with covariate
//! quantile bins). For a binary measure and a binary instrument this is an
//! exact 2x2 solve.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dataset::ExperimentData;
use crate::error::{Error, Result};
use crate::estimate::{bootstrap, dim_neyman, AlteResult, EstimatorKind, VarianceMethod};
use crate::index::WeightScheme;

/// Estimated bridge for one measure: a map from observed support values to
/// values on the reference scale.
#[derive(Debug, Clone, Serialize)]
pub struct BridgeFunction {
    pub measure: usize,
    pub support: Vec<f64>,
    pub values: Vec<f64>,
    pub instrument: String,
}

impl BridgeFunction {
    /// Applies the bridge; support values are matched exactly.
    pub fn apply(&self, y: f64) -> Result<f64> {
        self.support
            .iter()
            .position(|&s| s == y)
            .map(|i| self.values[i])
            .ok_or_else(|| {
                Error::Validation(format!(
                    "value {y} is outside the bridge support for measure {}",
                    self.measure
                ))
            })
    }

    /// Identity bridge for a measure that is already on the reference scale
    /// up to the scaling parameter.
    pub fn linear(measure: usize, support: Vec<f64>, lambda: f64) -> Self {
        let values = support.iter().map(|&s| s / lambda).collect();
        Self {
            measure,
            support,
            values,
            instrument: "linear".into(),
        }
    }
}

fn distinct_sorted(col: &[f64]) -> Vec<f64> {
    let mut vals: Vec<f64> = Vec::new();
    for &v in col {
        if !vals.contains(&v) {
            vals.push(v);
        }
    }
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vals
}

/// Exact bridge for a binary measure using one treatment arm: two arm-level
/// equations in the two unknown bridge values.
pub fn solve_bridge_binary(
    data: &ExperimentData,
    j: usize,
    reference: usize,
) -> Result<BridgeFunction> {
    let y_j = data.outcome(j);
    let support = distinct_sorted(y_j.as_slice());
    if support.len() != 2 {
        return Err(Error::Validation(format!(
            "measure {j} has {} distinct values, expected 2",
            support.len()
        )));
    }
    let (lo, hi) = (support[0], support[1]);
    let y_ref = data.outcome(reference);
    let treated = data.arm_rows(0);
    let control = data.control_rows();
    let prob_hi = |rows: &[usize]| -> f64 {
        rows.iter().filter(|&&i| y_j[i] == hi).count() as f64 / rows.len() as f64
    };
    let mean_ref = |rows: &[usize]| -> f64 {
        rows.iter().map(|&i| y_ref[i]).sum::<f64>() / rows.len() as f64
    };
    let (p1, p0) = (prob_hi(&treated), prob_hi(&control));
    if p1 == 0.0 || p1 == 1.0 || p0 == 0.0 || p0 == 1.0 {
        return Err(Error::DegenerateDesign(format!(
            "both arms must contain both values of measure {j}"
        )));
    }
    // [p1 1-p1; p0 1-p0] [h_hi; h_lo] = [E[Yref|1]; E[Yref|0]]; the
    // determinant is p1 - p0
    let det = p1 - p0;
    if det.abs() < 1e-10 {
        return Err(Error::IrrelevantInstrument(format!(
            "P[Y{j}=hi] is {p1:.4} in both arms; the treatment carries no \
             information about the latent shift"
        )));
    }
    let (m1, m0) = (mean_ref(&treated), mean_ref(&control));
    let h_hi = ((1.0 - p0) * m1 - (1.0 - p1) * m0) / det;
    let h_lo = (p1 * m0 - p0 * m1) / det;
    Ok(BridgeFunction {
        measure: j,
        support: vec![lo, hi],
        values: vec![h_lo, h_hi],
        instrument: data.treatment_labels()[0].clone(),
    })
}

/// Instrument cells for the discrete bridge: treatment cells, optionally
/// crossed with quantile bins of one covariate.
#[derive(Debug, Clone, Copy, Default)]
pub struct BridgeInstruments {
    /// Covariate index to bin, with the number of quantile bins.
    pub covariate_bins: Option<(usize, usize)>,
}

fn instrument_cells(
    data: &ExperimentData,
    instruments: &BridgeInstruments,
) -> Result<Vec<Vec<usize>>> {
    let mut cells: BTreeMap<(Vec<u8>, usize), Vec<usize>> = BTreeMap::new();
    let bin_of: Box<dyn Fn(usize) -> usize> = match instruments.covariate_bins {
        None => Box::new(|_| 0usize),
        Some((p, bins)) => {
            if p >= data.n_covariates() {
                return Err(Error::Validation(format!("covariate {p} out of range")));
            }
            if bins < 2 {
                return Err(Error::Validation("need at least 2 covariate bins".into()));
            }
            let col = data.covariate(p);
            let mut sorted: Vec<f64> = col.as_slice().to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let cuts: Vec<f64> = (1..bins)
                .map(|b| sorted[(b * sorted.len()) / bins])
                .collect();
            Box::new(move |i| cuts.iter().filter(|&&c| col[i] >= c).count())
        }
    };
    for i in 0..data.n() {
        cells
            .entry((data.cell_of(i), bin_of(i)))
            .or_default()
            .push(i);
    }
    Ok(cells.into_values().collect())
}

/// Least-squares bridge for a finite-support measure over instrument cells.
/// The system must have rank at least the support size; with more cells than
/// support values the minimum-norm least-squares solution is returned.
pub fn solve_bridge_discrete(
    data: &ExperimentData,
    j: usize,
    reference: usize,
    instruments: &BridgeInstruments,
) -> Result<BridgeFunction> {
    let y_j = data.outcome(j);
    let y_ref = data.outcome(reference);
    let support = distinct_sorted(y_j.as_slice());
    if support.len() < 2 {
        return Err(Error::Validation(format!(
            "measure {j} is constant; no bridge exists"
        )));
    }
    let cells = instrument_cells(data, instruments)?;
    if cells.len() < support.len() {
        return Err(Error::UnderIdentified {
            rank: cells.len(),
            needed: support.len(),
        });
    }
    // A[w, s] = P[Y_j = support_s | cell w]; b[w] = E[Y_ref | cell w]
    let mut a = DMatrix::zeros(cells.len(), support.len());
    let mut b = DVector::zeros(cells.len());
    for (w, rows) in cells.iter().enumerate() {
        let nw = rows.len() as f64;
        for &i in rows {
            let s = support.iter().position(|&v| v == y_j[i]).unwrap();
            a[(w, s)] += 1.0 / nw;
            b[w] += y_ref[i] / nw;
        }
    }
    let svd = a.clone().svd(true, true);
    let tol = 1e-10 * svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < support.len() {
        return Err(Error::UnderIdentified {
            rank,
            needed: support.len(),
        });
    }
    let h = svd
        .solve(&b, tol)
        .map_err(|e| Error::Singular(format!("bridge system: {e}")))?;
    Ok(BridgeFunction {
        measure: j,
        support,
        values: h.iter().copied().collect(),
        instrument: if instruments.covariate_bins.is_some() {
            "arms x covariate bins".into()
        } else {
            "arms".into()
        },
    })
}

/// Transforms bridged measures, combines them with the reference measure
/// under the given weights, and estimates the ALTE by difference in means.
/// Standard errors come from a percentile bootstrap that re-solves every
/// bridge in each draw.
pub fn alte_with_bridges(
    data: &ExperimentData,
    bridges: &[BridgeFunction],
    scheme: &WeightScheme,
    reference: usize,
    bootstrap_draws: usize,
    seed: u64,
) -> Result<AlteResult> {
    let j_count = data.n_outcomes();
    if scheme.weights.len() != j_count {
        return Err(Error::Validation("weight/outcome length mismatch".into()));
    }
    for m in 0..j_count {
        if m != reference && !bridges.iter().any(|b| b.measure == m) {
            return Err(Error::Validation(format!(
                "measure {m} has no bridge and is not the reference"
            )));
        }
    }
    let instruments: Vec<(usize, BridgeInstruments)> = bridges
        .iter()
        .map(|b| (b.measure, BridgeInstruments::default()))
        .collect();

    let point = |d: &ExperimentData, solved: &[BridgeFunction]| -> Result<f64> {
        let mut values = vec![0.0; d.n()];
        for m in 0..j_count {
            let w = scheme.weights[m];
            if w == 0.0 {
                continue;
            }
            let col = d.outcome(m);
            if m == reference {
                for i in 0..d.n() {
                    values[i] += w * col[i];
                }
            } else {
                let bridge = solved.iter().find(|b| b.measure == m).unwrap();
                for i in 0..d.n() {
                    values[i] += w * bridge.apply(col[i])?;
                }
            }
        }
        let (tau, _) = dim_neyman(&values, &d.arm_rows(0), &d.control_rows());
        Ok(tau)
    };

    let tau = point(data, bridges)?;
    let boot = bootstrap(data, bootstrap_draws, seed, |d| {
        let solved: Result<Vec<BridgeFunction>> = instruments
            .iter()
            .map(|(m, inst)| solve_bridge_discrete(d, *m, reference, inst))
            .collect();
        point(d, &solved?)
    })?;

    Ok(AlteResult {
        tau_hat: tau,
        se: boot.se,
        ci95: boot.ci95,
        variance_method: VarianceMethod::Bootstrap,
        estimator: EstimatorKind::BridgedDim,
        arm: 0,
        arm_label: data.treatment_labels()[0].clone(),
        n_treated: data.arm_rows(0).len(),
        n_control: data.control_rows().len(),
        weights: scheme.weights.clone(),
        lambda: vec![1.0; j_count],
        warnings: if boot.failures > 0 {
            vec![format!("{} bootstrap draws failed", boot.failures)]
        } else {
            Vec::new()
        },
    })
}
