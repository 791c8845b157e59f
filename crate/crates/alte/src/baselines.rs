//! Reference estimators that current practice builds from multiple outcomes:
//! equal-weight standardized index, inverse-covariance weighting, the first
//! principal component, and seemingly unrelated regression. The index-based
//! estimators carry a sample-specific scale, so their point estimates are not
//! comparable across studies; they are included for power comparisons and as
//! the saturated alternative in model checks.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dataset::ExperimentData;
use crate::error::{Error, Result};
use crate::estimate::{dim_neyman, AlteResult, EstimatorKind, VarianceMethod};
use crate::linreg::{chi2_sf, ols, variance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    EqualStd,
    Icw,
    Pca,
    Sur,
}

/// Per-equation effect estimate from the SUR fit.
#[derive(Debug, Clone, Serialize)]
pub struct SurEffect {
    pub outcome: String,
    pub regressor: String,
    pub estimate: f64,
    pub se: f64,
}

/// Baseline estimator output; index-based methods fill `index_effect`,
/// SUR fills the per-equation table.
#[derive(Debug, Clone, Serialize)]
pub struct BaselineResult {
    pub method: BaselineMethod,
    pub index_effect: Option<AlteResult>,
    pub per_equation: Vec<SurEffect>,
    /// Index weights or PCA loadings.
    pub weights: Vec<f64>,
    /// SUR residual covariance.
    pub residual_cov: Option<Vec<Vec<f64>>>,
    /// Joint Wald test that all arm effects are zero (SUR only):
    /// (statistic, df, p-value).
    pub joint_test: Option<(f64, usize, f64)>,
    pub warnings: Vec<String>,
}

fn index_result(
    data: &ExperimentData,
    values: &[f64],
    arm: usize,
    weights: Vec<f64>,
    method: BaselineMethod,
    warnings: Vec<String>,
) -> Result<BaselineResult> {
    let treated = data.arm_rows(arm);
    let control = data.control_rows();
    if treated.is_empty() || control.is_empty() {
        return Err(Error::DegenerateDesign("empty arm".into()));
    }
    let (tau, se) = dim_neyman(values, &treated, &control);
    let alte = AlteResult {
        tau_hat: tau,
        se,
        ci95: (tau - 1.96 * se, tau + 1.96 * se),
        variance_method: VarianceMethod::NeymanKnownLambda,
        estimator: EstimatorKind::Dim,
        arm,
        arm_label: data.treatment_labels()[arm].clone(),
        n_treated: treated.len(),
        n_control: control.len(),
        weights: weights.clone(),
        lambda: vec![1.0; data.n_outcomes()],
        warnings: Vec::new(),
    };
    Ok(BaselineResult {
        method,
        index_effect: Some(alte),
        per_equation: Vec::new(),
        weights,
        residual_cov: None,
        joint_test: None,
        warnings,
    })
}

/// Inverse-covariance-weighted index: outcomes standardized by their overall
/// mean and control-group standard deviation, then combined with
/// `w = S^-1 1 / (1' S^-1 1)` where S is the covariance of the standardized
/// outcomes over all units.
pub fn icw_index(data: &ExperimentData, arm: usize) -> Result<BaselineResult> {
    let j = data.n_outcomes();
    let n = data.n();
    let control = data.control_rows();
    let mut std_outcomes = DMatrix::zeros(n, j);
    for m in 0..j {
        let col = data.outcome(m);
        let ctrl: Vec<f64> = control.iter().map(|&i| col[i]).collect();
        let sd = variance(&ctrl).sqrt();
        if sd <= 0.0 {
            return Err(Error::Validation(format!(
                "control-group standard deviation of `{}` is zero",
                data.outcome_labels()[m]
            )));
        }
        let mu = col.mean();
        for i in 0..n {
            std_outcomes[(i, m)] = (col[i] - mu) / sd;
        }
    }
    let (_, mut cov) = crate::dataset::means_and_cov(&std_outcomes);
    let mut warnings = Vec::new();
    let ones = DVector::from_element(j, 1.0);
    // eigenvalue screen: a singular-but-consistent system would otherwise
    // yield an arbitrary particular solution instead of the symmetric one
    let eig_min = cov
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if eig_min < 1e-10 * cov.trace() {
        let ridge = 1e-8 * cov.trace();
        for d in 0..j {
            cov[(d, d)] += ridge;
        }
        warnings.push("singular standardized covariance; ridge applied".to_string());
    }
    let sinv1 = cov
        .clone()
        .lu()
        .solve(&ones)
        .filter(|v| v.iter().all(|x| x.is_finite()))
        .ok_or_else(|| Error::Singular("standardized outcome covariance".into()))?;
    let total = sinv1.sum();
    let weights: Vec<f64> = sinv1.iter().map(|v| v / total).collect();
    let values: Vec<f64> = (0..n)
        .map(|i| (0..j).map(|m| weights[m] * std_outcomes[(i, m)]).sum())
        .collect();
    index_result(data, &values, arm, weights, BaselineMethod::Icw, warnings)
}

/// First-principal-component index on the covariance of the demeaned
/// outcomes; the loading of the first outcome is kept non-negative.
pub fn pca_index(data: &ExperimentData, arm: usize) -> Result<BaselineResult> {
    let j = data.n_outcomes();
    if j < 2 {
        return Err(Error::Validation(
            "principal-component index needs at least two outcomes".into(),
        ));
    }
    let n = data.n();
    let mut demeaned = data.outcomes().clone();
    for m in 0..j {
        let mu = demeaned.column(m).mean();
        for i in 0..n {
            demeaned[(i, m)] -= mu;
        }
    }
    let (_, cov) = crate::dataset::means_and_cov(&demeaned);
    let eig = cov.symmetric_eigen();
    let mut top = 0;
    for k in 1..j {
        if eig.eigenvalues[k] > eig.eigenvalues[top] {
            top = k;
        }
    }
    let mut loading: Vec<f64> = eig.eigenvectors.column(top).iter().copied().collect();
    if loading[0] < 0.0 {
        for v in loading.iter_mut() {
            *v = -*v;
        }
    }
    let values: Vec<f64> = (0..n)
        .map(|i| (0..j).map(|m| loading[m] * demeaned[(i, m)]).sum())
        .collect();
    index_result(data, &values, arm, loading, BaselineMethod::Pca, Vec::new())
}

/// Equal-weight average of z-scored outcomes (overall mean and sd).
pub fn equal_std_index(data: &ExperimentData, arm: usize) -> Result<BaselineResult> {
    let j = data.n_outcomes();
    let n = data.n();
    let mut values = vec![0.0; n];
    for m in 0..j {
        let col = data.outcome(m);
        let sd = variance(col.as_slice()).sqrt();
        if sd <= 0.0 {
            return Err(Error::Validation(format!(
                "outcome `{}` is constant",
                data.outcome_labels()[m]
            )));
        }
        let mu = col.mean();
        for i in 0..n {
            values[i] += (col[i] - mu) / sd / j as f64;
        }
    }
    index_result(
        data,
        &values,
        arm,
        vec![1.0 / j as f64; j],
        BaselineMethod::EqualStd,
        Vec::new(),
    )
}

/// Seemingly unrelated regression with a shared regressor set, so the SUR
/// solution equals per-equation OLS. Reports the cross-equation residual
/// covariance and a joint Wald test that every arm effect is zero.
pub fn sur_fit(
    data: &ExperimentData,
    arms: &[usize],
    covariates: &[usize],
) -> Result<BaselineResult> {
    let n = data.n();
    let j = data.n_outcomes();
    let k = 1 + data.n_arms() + covariates.len();
    let mut x = DMatrix::zeros(n, k);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        for t in 0..data.n_arms() {
            x[(i, 1 + t)] = data.treatments()[(i, t)];
        }
        for (c, &p) in covariates.iter().enumerate() {
            x[(i, 1 + data.n_arms() + c)] = data.covariates()[(i, p)];
        }
    }
    let mut coefs = Vec::new();
    let mut resid = DMatrix::zeros(n, j);
    let mut xtx_inv = None;
    for m in 0..j {
        let fit = ols(&x, &data.outcome(m))?;
        for i in 0..n {
            resid[(i, m)] = fit.residuals[i];
        }
        if xtx_inv.is_none() {
            xtx_inv = Some(fit.xtx_inv.clone());
        }
        coefs.push(fit.coefficients);
    }
    let xtx_inv = xtx_inv.unwrap();
    // residual covariance with the regression df correction
    let df = (n - k) as f64;
    let omega = resid.transpose() * &resid / df;

    let mut per_equation = Vec::new();
    let reg_name = |c: usize| -> String {
        if c == 0 {
            "intercept".to_string()
        } else if c <= data.n_arms() {
            data.treatment_labels()[c - 1].clone()
        } else {
            data.covariate_labels()[covariates[c - 1 - data.n_arms()]].clone()
        }
    };
    for m in 0..j {
        for c in 0..k {
            per_equation.push(SurEffect {
                outcome: data.outcome_labels()[m].clone(),
                regressor: reg_name(c),
                estimate: coefs[m][c],
                se: (omega[(m, m)] * xtx_inv[(c, c)]).max(0.0).sqrt(),
            });
        }
    }

    // joint Wald test over the requested arm coefficients, stacked across
    // equations; Cov(b_m, b_l) = Omega_ml * (X'X)^-1
    let arm_cols: Vec<usize> = arms.iter().map(|&a| 1 + a).collect();
    let dim = arm_cols.len() * j;
    let mut b = DVector::zeros(dim);
    let mut v = DMatrix::zeros(dim, dim);
    for m in 0..j {
        for (ea, &c) in arm_cols.iter().enumerate() {
            b[m * arm_cols.len() + ea] = coefs[m][c];
            for l in 0..j {
                for (eb, &c2) in arm_cols.iter().enumerate() {
                    v[(m * arm_cols.len() + ea, l * arm_cols.len() + eb)] =
                        omega[(m, l)] * xtx_inv[(c, c2)];
                }
            }
        }
    }
    let joint_test = v.clone().try_inverse().map(|vinv| {
        let w = (b.transpose() * vinv * &b)[(0, 0)];
        (w, dim, chi2_sf(w, dim as f64))
    });

    Ok(BaselineResult {
        method: BaselineMethod::Sur,
        index_effect: None,
        per_equation,
        weights: Vec::new(),
        residual_cov: Some(
            (0..j)
                .map(|a| (0..j).map(|c| omega[(a, c)]).collect())
                .collect(),
        ),
        joint_test,
        warnings: Vec::new(),
    })
}

impl BaselineResult {
    /// Looks up a SUR coefficient by outcome and regressor label.
    pub fn sur_effect(&self, outcome: &str, regressor: &str) -> Option<&SurEffect> {
        self.per_equation
            .iter()
            .find(|e| e.outcome == outcome && e.regressor == regressor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linreg::mean;
    use approx::assert_relative_eq;

    fn toy(z: Vec<f64>, ys: Vec<Vec<f64>>) -> ExperimentData {
        let outcomes = ys
            .into_iter()
            .enumerate()
            .map(|(j, col)| (format!("y{}", j + 1), col))
            .collect();
        ExperimentData::from_columns(vec![("z".into(), z)], outcomes, vec![], 0).unwrap()
    }

    #[test]
    fn icw_single_outcome_is_standardized_dim() {
        let z = vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let y = vec![0.2, 0.6, 1.4, 1.8, 0.4, 1.6];
        let data = toy(z.clone(), vec![y.clone()]);
        let r = icw_index(&data, 0).unwrap();
        let eff = r.index_effect.unwrap();
        let ctrl: Vec<f64> = y
            .iter()
            .zip(&z)
            .filter(|(_, &zi)| zi == 0.0)
            .map(|(&v, _)| v)
            .collect();
        let trt: Vec<f64> = y
            .iter()
            .zip(&z)
            .filter(|(_, &zi)| zi == 1.0)
            .map(|(&v, _)| v)
            .collect();
        let expect = (mean(&trt) - mean(&ctrl)) / variance(&ctrl).sqrt();
        assert_relative_eq!(eff.tau_hat, expect, epsilon = 1e-10);
    }

    #[test]
    fn icw_perfectly_correlated_outcomes_get_half_weight() {
        let z = vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let y = vec![0.2, 0.6, 1.4, 1.8, 0.4, 1.6, 0.1, 1.5];
        // affine copy: after standardization the two outcomes coincide, the
        // covariance is singular, and the ridge fallback splits the weight
        let y2: Vec<f64> = y.iter().map(|v| 3.0 * v + 1.0).collect();
        let data = toy(z, vec![y, y2]);
        let r = icw_index(&data, 0).unwrap();
        assert_relative_eq!(r.weights[0], 0.5, epsilon = 1e-4);
        assert_relative_eq!(r.weights[1], 0.5, epsilon = 1e-4);
        assert!(!r.warnings.is_empty());
    }

    #[test]
    fn pca_duplicated_outcomes_equal_loadings() {
        let z = vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let y = vec![0.2, 0.6, 1.4, 1.8, 0.4, 1.6, 0.1, 1.5];
        let data = toy(z, vec![y.clone(), y]);
        let r = pca_index(&data, 0).unwrap();
        assert_relative_eq!(r.weights[0], r.weights[1], epsilon = 1e-10);
        assert!(r.weights[0] > 0.0);
    }

    #[test]
    fn pca_uncorrelated_unequal_variance_picks_the_big_one() {
        // variances (4, 1), uncorrelated: the first component is outcome 1
        let z = vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let y1 = vec![4.0, -4.0, 2.0, -2.0, 4.0, -4.0, 2.0, -2.0];
        let y2 = vec![1.0, 1.0, -1.0, -1.0, -1.0, -1.0, 1.0, 1.0];
        let data = toy(z, vec![y1, y2]);
        let r = pca_index(&data, 0).unwrap();
        assert_relative_eq!(r.weights[0].abs(), 1.0, epsilon = 1e-8);
        assert_relative_eq!(r.weights[1].abs(), 0.0, epsilon = 1e-8);
    }

    #[test]
    fn equal_std_single_outcome_is_standardized_dim() {
        let z = vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let y = vec![0.2, 0.6, 1.4, 1.8, 0.4, 1.6];
        let data = toy(z.clone(), vec![y.clone()]);
        let r = equal_std_index(&data, 0).unwrap();
        let sd = variance(&y).sqrt();
        let ctrl: Vec<f64> = y
            .iter()
            .zip(&z)
            .filter(|(_, &zi)| zi == 0.0)
            .map(|(&v, _)| v)
            .collect();
        let trt: Vec<f64> = y
            .iter()
            .zip(&z)
            .filter(|(_, &zi)| zi == 1.0)
            .map(|(&v, _)| v)
            .collect();
        let expect = (mean(&trt) - mean(&ctrl)) / sd;
        assert_relative_eq!(r.index_effect.unwrap().tau_hat, expect, epsilon = 1e-10);
    }

    #[test]
    fn equal_std_constant_column_errors() {
        let z = vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let data = toy(z, vec![vec![1.0; 6], vec![0.2, 0.6, 1.4, 1.8, 0.4, 1.6]]);
        let err = equal_std_index(&data, 0).unwrap_err();
        match err {
            Error::Validation(msg) => assert!(msg.contains("y1")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sur_matches_per_equation_ols_exactly() {
        let z = vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let y1 = vec![0.2, 0.6, 1.4, 1.8, 0.4, 1.6, 0.1, 1.5];
        let y2 = vec![1.1, 0.8, 2.6, 2.9, 1.0, 2.7, 0.9, 2.8];
        let data = toy(z.clone(), vec![y1.clone(), y2]);
        let r = sur_fit(&data, &[0], &[]).unwrap();
        let slope = crate::linreg::covariance(&z, &y1) / variance(&z);
        let e = r.sur_effect("y1", "z").unwrap();
        assert_relative_eq!(e.estimate, slope, epsilon = 1e-10);
        let omega = r.residual_cov.as_ref().unwrap();
        assert_relative_eq!(omega[0][1], omega[1][0], epsilon = 1e-12);
        assert!(r.joint_test.is_some());
    }
}
