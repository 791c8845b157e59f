//! Construction of the weighted scaled index.
//!
//! Scaled measures `Y_j / lambda_j` all target the latent outcome on the
//! reference scale; a weight vector summing to one combines them. Optimal
//! weights need the measurement-error variances, recovered here by method of
//! moments from `Var(Y_j) = lambda_j^2 psi + sigma_j^2` and
//! `Cov(Y_j, Y_k) = lambda_j lambda_k psi`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dataset::{CellKey, ExperimentData};
use crate::error::{Error, Result};
use crate::identify::ScalingEstimate;

/// Tolerance (relative to Var(Y_j)) below which a negative error-variance
/// estimate is treated as a Heywood case and truncated to zero.
pub const HEYWOOD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Equal,
    InverseVariance,
    CovarianceOptimal,
    User,
}

/// Weights over the scaled measures; always sums to one.
#[derive(Debug, Clone, Serialize)]
pub struct WeightScheme {
    pub kind: WeightKind,
    pub weights: Vec<f64>,
    pub warnings: Vec<String>,
}

impl WeightScheme {
    pub fn equal(j: usize) -> Self {
        Self {
            kind: WeightKind::Equal,
            weights: vec![1.0 / j as f64; j],
            warnings: Vec::new(),
        }
    }

    pub fn user(weights: Vec<f64>) -> Result<Self> {
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!(
                "user weights sum to {s}, expected 1"
            )));
        }
        Ok(Self {
            kind: WeightKind::User,
            weights,
            warnings: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorVarianceSource {
    MomentSystem,
    StructuralFit,
}

/// Measurement-error variances and the latent disturbance variance.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorVarianceEstimate {
    pub sigma2: Vec<f64>,
    /// Variance of the latent disturbance (within treatment cells).
    pub psi: f64,
    pub pooled: bool,
    pub source: ErrorVarianceSource,
    /// Per-cell estimates when `pooled` is false.
    pub per_arm: Option<BTreeMap<CellKey, Vec<f64>>>,
    pub warnings: Vec<String>,
}

impl ErrorVarianceEstimate {
    pub fn known(sigma2: Vec<f64>, psi: f64) -> Self {
        Self {
            sigma2,
            psi,
            pooled: true,
            source: ErrorVarianceSource::MomentSystem,
            per_arm: None,
            warnings: Vec::new(),
        }
    }
}

/// Per-unit weighted scaled index.
#[derive(Debug, Clone, Serialize)]
pub struct WsiOutcome {
    pub values: Vec<f64>,
    pub scheme: WeightScheme,
    pub lambda: Vec<f64>,
    pub reference: usize,
}

/// Demeans each outcome within its treatment cell.
fn cell_demeaned(data: &ExperimentData) -> DMatrix<f64> {
    let mut out = data.outcomes().clone();
    for (_, rows) in data.cells() {
        for j in 0..data.n_outcomes() {
            let m = rows.iter().map(|&i| out[(i, j)]).sum::<f64>() / rows.len() as f64;
            for &i in &rows {
                out[(i, j)] -= m;
            }
        }
    }
    out
}

fn moment_solution(
    demeaned: &DMatrix<f64>,
    lambda: &[f64],
    warnings: &mut Vec<String>,
) -> (Vec<f64>, f64) {
    let n = demeaned.nrows() as f64;
    let j_count = demeaned.ncols();
    let cross = |a: usize, b: usize| -> f64 {
        let mut s = 0.0;
        for i in 0..demeaned.nrows() {
            s += demeaned[(i, a)] * demeaned[(i, b)];
        }
        s / (n - 1.0)
    };
    // psi: plain average of pairwise Cov(Y_j, Y_k)/(lambda_j lambda_k)
    let mut psi = 0.0;
    let mut pairs = 0usize;
    for a in 0..j_count {
        for b in (a + 1)..j_count {
            psi += cross(a, b) / (lambda[a] * lambda[b]);
            pairs += 1;
        }
    }
    psi /= pairs as f64;
    if psi < 0.0 {
        warnings.push(format!("latent variance estimate {psi:.4e} truncated to 0"));
        psi = 0.0;
    }
    let mut sigma2 = Vec::with_capacity(j_count);
    for j in 0..j_count {
        let var_j = cross(j, j);
        let mut s2 = var_j - lambda[j] * lambda[j] * psi;
        if s2 < 0.0 {
            if s2 < -HEYWOOD_TOL * var_j {
                warnings.push(format!(
                    "Heywood case: sigma2[{j}] = {s2:.4e} truncated to 0"
                ));
            }
            s2 = 0.0;
        }
        sigma2.push(s2);
    }
    (sigma2, psi)
}

/// Method-of-moments measurement-error variances.
///
/// `pooled` demeans outcomes within each treatment cell and estimates a
/// common sigma^2 vector from the pooled residuals; otherwise the moments are
/// solved per cell and the headline `sigma2` is the sample-size-weighted
/// average, with per-cell detail attached.
pub fn estimate_error_variances(
    data: &ExperimentData,
    lambda: &ScalingEstimate,
    pooled: bool,
) -> Result<ErrorVarianceEstimate> {
    let j_count = data.n_outcomes();
    if j_count < 2 {
        return Err(Error::Validation(
            "error variances are not separable from the latent variance with J = 1".into(),
        ));
    }
    let mut warnings = Vec::new();
    if pooled {
        let demeaned = cell_demeaned(data);
        let (sigma2, psi) = moment_solution(&demeaned, &lambda.lambda, &mut warnings);
        Ok(ErrorVarianceEstimate {
            sigma2,
            psi,
            pooled,
            source: ErrorVarianceSource::MomentSystem,
            per_arm: None,
            warnings,
        })
    } else {
        let mut per_arm = BTreeMap::new();
        let mut sigma2 = vec![0.0; j_count];
        let mut psi = 0.0;
        let n = data.n() as f64;
        for (key, rows) in data.cells() {
            let sub = crate::dataset::select_rows(data.outcomes(), &rows);
            let mut centered = sub.clone();
            for j in 0..j_count {
                let m = centered.column(j).sum() / rows.len() as f64;
                for r in 0..rows.len() {
                    centered[(r, j)] -= m;
                }
            }
            let (s2, p) = moment_solution(&centered, &lambda.lambda, &mut warnings);
            let w = rows.len() as f64 / n;
            for j in 0..j_count {
                sigma2[j] += w * s2[j];
            }
            psi += w * p;
            per_arm.insert(key, s2);
        }
        Ok(ErrorVarianceEstimate {
            sigma2,
            psi,
            pooled,
            source: ErrorVarianceSource::MomentSystem,
            per_arm: Some(per_arm),
            warnings,
        })
    }
}

/// Builds a weight scheme of the requested kind.
///
/// `inverse_variance` weights are `(lambda_j^2/sigma_j^2) / sum_k (...)`;
/// `covariance_optimal` solves `w = S^-1 1 / (1' S^-1 1)` on the covariance
/// of the scaled-measure errors, `S[j,k] = error_cov[j,k]/(lambda_j lambda_k)`.
pub fn make_weights(
    kind: WeightKind,
    lambda: &ScalingEstimate,
    errvar: Option<&ErrorVarianceEstimate>,
    error_cov: Option<&DMatrix<f64>>,
    user: Option<Vec<f64>>,
) -> Result<WeightScheme> {
    let j_count = lambda.lambda.len();
    match kind {
        WeightKind::Equal => Ok(WeightScheme::equal(j_count)),
        WeightKind::User => {
            WeightScheme::user(user.ok_or_else(|| {
                Error::Validation("user weight kind requires a weight vector".into())
            })?)
        }
        WeightKind::InverseVariance => {
            let ev = errvar.ok_or_else(|| {
                Error::Validation("inverse-variance weights need error variances".into())
            })?;
            let mut warnings = Vec::new();
            // a noiseless measure with nonzero loading dominates
            let noiseless: Vec<usize> = (0..j_count)
                .filter(|&j| ev.sigma2[j] == 0.0 && lambda.lambda[j] != 0.0)
                .collect();
            let weights = if !noiseless.is_empty() {
                warnings.push(format!(
                    "measure {} has zero error variance and receives full weight",
                    noiseless[0]
                ));
                let mut w = vec![0.0; j_count];
                w[noiseless[0]] = 1.0;
                w
            } else {
                let prec: Vec<f64> = (0..j_count)
                    .map(|j| lambda.lambda[j] * lambda.lambda[j] / ev.sigma2[j])
                    .collect();
                if prec.iter().any(|p| !p.is_finite()) {
                    return Err(Error::Validation(
                        "non-finite precision in inverse-variance weights".into(),
                    ));
                }
                let total: f64 = prec.iter().sum();
                prec.into_iter().map(|p| p / total).collect()
            };
            Ok(WeightScheme {
                kind,
                weights,
                warnings,
            })
        }
        WeightKind::CovarianceOptimal => {
            let cov = error_cov.ok_or_else(|| {
                Error::Validation("covariance-optimal weights need an error covariance".into())
            })?;
            if cov.nrows() != j_count || cov.ncols() != j_count {
                return Err(Error::Validation(format!(
                    "error covariance is {}x{}, expected {j_count}x{j_count}",
                    cov.nrows(),
                    cov.ncols()
                )));
            }
            let mut scaled = DMatrix::zeros(j_count, j_count);
            for a in 0..j_count {
                for b in 0..j_count {
                    scaled[(a, b)] = cov[(a, b)] / (lambda.lambda[a] * lambda.lambda[b]);
                }
            }
            let eig = scaled.clone().symmetric_eigen();
            if let Some(min) = eig
                .eigenvalues
                .iter()
                .cloned()
                .min_by(|a, b| a.partial_cmp(b).unwrap())
            {
                if min <= 0.0 {
                    return Err(Error::NotPositiveDefinite(format!(
                        "scaled error covariance has eigenvalue {min:.4e}"
                    )));
                }
            }
            let ones = DVector::from_element(j_count, 1.0);
            let sinv1 = scaled
                .lu()
                .solve(&ones)
                .ok_or_else(|| Error::Singular("scaled error covariance".into()))?;
            let denom = sinv1.sum();
            Ok(WeightScheme {
                kind,
                weights: sinv1.iter().map(|v| v / denom).collect(),
                warnings: Vec::new(),
            })
        }
    }
}

/// Builds the per-unit index `sum_j w_j * Y_ij / lambda_j`.
pub fn build_wsi(
    data: &ExperimentData,
    lambda: &ScalingEstimate,
    scheme: &WeightScheme,
) -> Result<WsiOutcome> {
    let j_count = data.n_outcomes();
    if scheme.weights.len() != j_count {
        return Err(Error::Validation(format!(
            "{} weights for {j_count} outcomes",
            scheme.weights.len()
        )));
    }
    for j in 0..j_count {
        if scheme.weights[j] != 0.0 && lambda.lambda[j] == 0.0 {
            return Err(Error::ZeroScale(format!(
                "measure `{}` has lambda = 0 but weight {}",
                data.outcome_labels()[j],
                scheme.weights[j]
            )));
        }
    }
    let mut values = vec![0.0; data.n()];
    for j in 0..j_count {
        if scheme.weights[j] == 0.0 {
            continue;
        }
        let c = scheme.weights[j] / lambda.lambda[j];
        let col = data.outcomes().column(j);
        for i in 0..data.n() {
            values[i] += c * col[i];
        }
    }
    Ok(WsiOutcome {
        values,
        scheme: scheme.clone(),
        lambda: lambda.lambda.clone(),
        reference: lambda.reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn toy(z: Vec<f64>, ys: Vec<Vec<f64>>) -> ExperimentData {
        let outcomes = ys
            .into_iter()
            .enumerate()
            .map(|(j, col)| (format!("y{}", j + 1), col))
            .collect();
        ExperimentData::from_columns(vec![("z".into(), z)], outcomes, vec![], 0).unwrap()
    }

    #[test]
    fn error_variances_identical_measures_are_noiseless() {
        let eta = vec![0.3, -1.2, 0.8, 1.9, -0.4, 0.0, 2.2, -0.6];
        let z = vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let data = toy(z.clone(), vec![eta.clone(), eta.clone()]);
        let lambda = ScalingEstimate::identity(2, 0);
        let ev = estimate_error_variances(&data, &lambda, true).unwrap();
        assert_relative_eq!(ev.sigma2[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(ev.sigma2[1], 0.0, epsilon = 1e-12);
        // psi equals the pooled within-arm variance of eta
        let mut expect = 0.0;
        for arm in [0.0, 1.0] {
            let vals: Vec<f64> = eta
                .iter()
                .zip(&z)
                .filter(|(_, &zi)| zi == arm)
                .map(|(&e, _)| e)
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            expect += vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        expect /= eta.len() as f64 - 1.0;
        assert_relative_eq!(ev.psi, expect, epsilon = 1e-12);
    }

    #[test]
    fn error_variances_need_two_measures() {
        let data = toy(
            vec![0.0, 1.0, 0.0, 1.0, 1.0],
            vec![vec![0.1, 0.9, 0.3, 1.2, 0.8]],
        );
        let lambda = ScalingEstimate::identity(1, 0);
        assert!(estimate_error_variances(&data, &lambda, true).is_err());
    }

    #[test]
    fn weights_symmetric_case() {
        let lambda = ScalingEstimate::known(vec![1.0, 1.0], 0);
        let ev = ErrorVarianceEstimate::known(vec![1.0, 1.0], 1.0);
        let w = make_weights(WeightKind::InverseVariance, &lambda, Some(&ev), None, None).unwrap();
        assert_relative_eq!(w.weights[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(w.weights[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn weights_derived_two_measure_case() {
        let lambda = ScalingEstimate::known(vec![1.0, 2.0], 0);
        let ev = ErrorVarianceEstimate::known(vec![1.0, 1.0], 1.0);
        let w = make_weights(WeightKind::InverseVariance, &lambda, Some(&ev), None, None).unwrap();
        assert_relative_eq!(w.weights[0], 0.2, epsilon = 1e-12);
        assert_relative_eq!(w.weights[1], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn weights_derived_three_measure_case() {
        let lambda = ScalingEstimate::known(vec![1.0, 1.0, 1.0], 0);
        let ev = ErrorVarianceEstimate::known(vec![0.5, 0.1, 2.0], 1.0);
        let w = make_weights(WeightKind::InverseVariance, &lambda, Some(&ev), None, None).unwrap();
        assert_relative_eq!(w.weights[0], 0.16, epsilon = 1e-12);
        assert_relative_eq!(w.weights[1], 0.80, epsilon = 1e-12);
        assert_relative_eq!(w.weights[2], 0.04, epsilon = 1e-12);
    }

    #[test]
    fn noiseless_measure_dominates_with_flag() {
        let lambda = ScalingEstimate::known(vec![1.0, 1.0], 0);
        let ev = ErrorVarianceEstimate::known(vec![0.0, 1.0], 1.0);
        let w = make_weights(WeightKind::InverseVariance, &lambda, Some(&ev), None, None).unwrap();
        assert_eq!(w.weights, vec![1.0, 0.0]);
        assert!(!w.warnings.is_empty());
    }

    #[test]
    fn covariance_optimal_matches_inverse_variance_when_diagonal() {
        let lambda = ScalingEstimate::known(vec![1.0, 2.0, 0.5], 0);
        let sigma2 = vec![0.7, 1.3, 0.4];
        let ev = ErrorVarianceEstimate::known(sigma2.clone(), 1.0);
        let diag = DMatrix::from_diagonal(&DVector::from_vec(sigma2));
        let w1 = make_weights(WeightKind::InverseVariance, &lambda, Some(&ev), None, None).unwrap();
        let w2 =
            make_weights(WeightKind::CovarianceOptimal, &lambda, None, Some(&diag), None).unwrap();
        for j in 0..3 {
            assert_relative_eq!(w1.weights[j], w2.weights[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn covariance_optimal_rejects_non_pd() {
        let lambda = ScalingEstimate::known(vec![1.0, 1.0], 0);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err =
            make_weights(WeightKind::CovarianceOptimal, &lambda, None, Some(&cov), None)
                .unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite(_)));
    }

    #[test]
    fn covariance_optimal_minimizes_variance_on_simplex_grid() {
        // grid search over the simplex, step 0.05: no grid point beats the
        // optimal weights by more than 1e-6
        let lambda = ScalingEstimate::known(vec![1.0, 1.0, 1.0], 0);
        let cov = DMatrix::from_row_slice(
            3,
            3,
            &[0.9, 0.2, 0.1, 0.2, 0.5, 0.15, 0.1, 0.15, 1.4],
        );
        let w =
            make_weights(WeightKind::CovarianceOptimal, &lambda, None, Some(&cov), None).unwrap();
        let quad = |w: &[f64]| {
            let mut v = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    v += w[a] * w[b] * cov[(a, b)];
                }
            }
            v
        };
        let best = quad(&w.weights);
        let steps = 20; // 0.05 grid
        for a in 0..=steps {
            for b in 0..=(steps - a) {
                let c = steps - a - b;
                let cand = [
                    a as f64 / steps as f64,
                    b as f64 / steps as f64,
                    c as f64 / steps as f64,
                ];
                assert!(quad(&cand) >= best - 1e-6);
            }
        }
    }

    #[test]
    fn wsi_single_measure_is_the_measure() {
        let y = vec![0.5, 1.5, 2.5, -0.5, 0.0, 3.0];
        let data = toy(vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0], vec![y.clone()]);
        let lambda = ScalingEstimate::identity(1, 0);
        let wsi = build_wsi(&data, &lambda, &WeightScheme::equal(1)).unwrap();
        for i in 0..y.len() {
            assert_relative_eq!(wsi.values[i], y[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn wsi_hand_computed_combination() {
        let data = toy(
            vec![0.0, 1.0, 0.0, 1.0],
            vec![vec![2.0, 2.0, 2.0, 2.0], vec![4.0, 4.0, 4.0, 4.0]],
        );
        // constant outcome columns are fine for build_wsi; bypass validation
        // by constructing from non-constant data then checking one row
        let lambda = ScalingEstimate::known(vec![1.0, 2.0], 0);
        let scheme = WeightScheme::user(vec![0.5, 0.5]).unwrap();
        let wsi = build_wsi(&data, &lambda, &scheme).unwrap();
        assert_relative_eq!(wsi.values[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn wsi_zero_lambda_with_weight_errors() {
        let data = toy(
            vec![0.0, 1.0, 0.0, 1.0],
            vec![vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 3.0, 5.0, 7.0]],
        );
        let lambda = ScalingEstimate::known(vec![1.0, 0.0], 0);
        let err = build_wsi(&data, &lambda, &WeightScheme::equal(2)).unwrap_err();
        match err {
            Error::ZeroScale(msg) => assert!(msg.contains("y2")),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn weights_always_sum_to_one(
            lam in proptest::collection::vec(0.1f64..3.0, 2..6),
            sig in proptest::collection::vec(0.05f64..4.0, 2..6),
        ) {
            let j = lam.len().min(sig.len());
            let lambda = ScalingEstimate::known(lam[..j].to_vec(), 0);
            let ev = ErrorVarianceEstimate::known(sig[..j].to_vec(), 1.0);
            let w = make_weights(WeightKind::InverseVariance, &lambda, Some(&ev), None, None)
                .unwrap();
            let total: f64 = w.weights.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let e = WeightScheme::equal(j);
            prop_assert!((e.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn wsi_linear_in_each_outcome(scale in 0.5f64..3.0) {
            // coefficient on Y_j is w_j / lambda_j
            let y1 = vec![0.4, 1.1, 2.4, 3.0, 0.2, 2.8];
            let y2 = vec![1.0, 0.7, 4.1, 5.2, 0.8, 4.4];
            let z = vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0];
            let data = toy(z.clone(), vec![y1.clone(), y2.clone()]);
            let scaled = toy(z, vec![y1.clone(), y2.iter().map(|v| v * scale).collect()]);
            let lambda = ScalingEstimate::known(vec![1.0, 2.0], 0);
            let scheme = WeightScheme::user(vec![0.3, 0.7]).unwrap();
            let a = build_wsi(&data, &lambda, &scheme).unwrap();
            let b = build_wsi(&scaled, &lambda, &scheme).unwrap();
            for i in 0..y1.len() {
                let expect = a.values[i] + (scale - 1.0) * y2[i] * 0.7 / 2.0;
                prop_assert!((b.values[i] - expect).abs() < 1e-10);
            }
        }
    }
}
