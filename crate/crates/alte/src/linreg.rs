//! Internal least-squares and distribution helpers shared by the estimator
//! modules. Not part of the public API.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor, Normal};

use crate::error::{Error, Result};

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Unbiased sample variance (n-1).
pub(crate) fn variance(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n as f64 - 1.0)
}

/// Unbiased sample covariance (n-1).
pub(crate) fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    if n < 2 {
        return 0.0;
    }
    let (ma, mb) = (mean(a), mean(b));
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / (n as f64 - 1.0)
}

/// Ordinary least squares fit.
pub(crate) struct OlsFit {
    pub coefficients: DVector<f64>,
    pub fitted: DVector<f64>,
    pub residuals: DVector<f64>,
    pub xtx_inv: DMatrix<f64>,
    pub rss: f64,
}

/// OLS of `y` on the columns of `x` (caller includes the intercept column).
pub(crate) fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsFit> {
    let xtx = x.transpose() * x;
    let xtx_inv = xtx.clone().try_inverse().ok_or_else(|| {
        Error::RankDeficient(format!(
            "X'X is singular ({} columns, {} rows)",
            x.ncols(),
            x.nrows()
        ))
    })?;
    // guard against try_inverse succeeding on a numerically singular matrix
    let id_err = (&xtx * &xtx_inv - DMatrix::<f64>::identity(x.ncols(), x.ncols())).norm();
    if !id_err.is_finite() || id_err > 1e-6 * (1.0 + xtx.norm()) {
        return Err(Error::RankDeficient(
            "X'X is numerically singular".to_string(),
        ));
    }
    let coefficients = &xtx_inv * x.transpose() * y;
    let fitted = x * &coefficients;
    let residuals = y - &fitted;
    let rss = residuals.norm_squared();
    Ok(OlsFit {
        coefficients,
        fitted,
        residuals,
        xtx_inv,
        rss,
    })
}

/// Classical homoskedastic coefficient covariance, sigma^2 (X'X)^-1.
pub(crate) fn ols_cov_classical(x: &DMatrix<f64>, fit: &OlsFit) -> DMatrix<f64> {
    let df = x.nrows() as f64 - x.ncols() as f64;
    let sigma2 = fit.rss / df;
    &fit.xtx_inv * sigma2
}

/// HC2 robust coefficient covariance,
/// (X'X)^-1 X' diag(e_i^2/(1-h_i)) X (X'X)^-1.
pub(crate) fn ols_cov_hc2(x: &DMatrix<f64>, fit: &OlsFit) -> DMatrix<f64> {
    let n = x.nrows();
    let k = x.ncols();
    let mut meat = DMatrix::zeros(k, k);
    for i in 0..n {
        let xi = x.row(i).transpose();
        let h = (xi.transpose() * &fit.xtx_inv * &xi)[(0, 0)];
        let w = fit.residuals[i] * fit.residuals[i] / (1.0 - h).max(1e-12);
        meat += &xi * xi.transpose() * w;
    }
    &fit.xtx_inv * meat * &fit.xtx_inv
}

pub(crate) struct TwoSlsFit {
    pub coefficients: DVector<f64>,
    /// F statistic for the excluded instruments in the first stage of the
    /// (single) endogenous regressor.
    pub first_stage_f: f64,
}

/// 2SLS of `y` on `[1, endog, exog...]` using instruments `[1, z..., exog...]`.
/// A single endogenous regressor is supported; `coefficients[1]` is its slope.
pub(crate) fn two_sls(
    y: &DVector<f64>,
    endog: &DVector<f64>,
    instruments: &[DVector<f64>],
    exog: &[DVector<f64>],
) -> Result<TwoSlsFit> {
    let n = y.len();
    let k_iv = instruments.len();
    if k_iv == 0 {
        return Err(Error::Validation("no instruments supplied".into()));
    }
    // first stage: endog ~ 1 + instruments + exog
    let mut w = DMatrix::zeros(n, 1 + k_iv + exog.len());
    for i in 0..n {
        w[(i, 0)] = 1.0;
    }
    for (c, z) in instruments.iter().enumerate() {
        w.set_column(1 + c, z);
    }
    for (c, x) in exog.iter().enumerate() {
        w.set_column(1 + k_iv + c, x);
    }
    let first = ols(&w, endog)?;
    // F test of the excluded instruments: compare against 1 + exog only
    let mut w0 = DMatrix::zeros(n, 1 + exog.len());
    for i in 0..n {
        w0[(i, 0)] = 1.0;
    }
    for (c, x) in exog.iter().enumerate() {
        w0.set_column(1 + c, x);
    }
    let restricted = ols(&w0, endog)?;
    let df2 = n as f64 - w.ncols() as f64;
    let first_stage_f =
        ((restricted.rss - first.rss) / k_iv as f64) / (first.rss / df2).max(1e-300);

    // second stage on fitted endogenous values
    let mut x2 = DMatrix::zeros(n, 2 + exog.len());
    for i in 0..n {
        x2[(i, 0)] = 1.0;
        x2[(i, 1)] = first.fitted[i];
    }
    for (c, x) in exog.iter().enumerate() {
        x2.set_column(2 + c, x);
    }
    let second = ols(&x2, y)?;
    Ok(TwoSlsFit {
        coefficients: second.coefficients,
        first_stage_f,
    })
}

pub(crate) fn chi2_sf(stat: f64, df: f64) -> f64 {
    if df <= 0.0 {
        return 1.0;
    }
    match ChiSquared::new(df) {
        Ok(d) => (1.0 - d.cdf(stat.max(0.0))).clamp(0.0, 1.0),
        Err(_) => f64::NAN,
    }
}

pub(crate) fn f_sf(stat: f64, df1: f64, df2: f64) -> f64 {
    if stat <= 0.0 {
        return 1.0;
    }
    match FisherSnedecor::new(df1, df2) {
        Ok(d) => (1.0 - d.cdf(stat)).clamp(0.0, 1.0),
        Err(_) => f64::NAN,
    }
}

/// Two-sided normal p-value for a z statistic.
pub(crate) fn z_pvalue(z: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    (2.0 * (1.0 - n.cdf(z.abs()))).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ols_recovers_exact_line() {
        let n = 20;
        let x = DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { r as f64 });
        let y = DVector::from_fn(n, |r, _| 2.0 + 3.0 * r as f64);
        let fit = ols(&x, &y).unwrap();
        assert_relative_eq!(fit.coefficients[0], 2.0, epsilon = 1e-10);
        assert_relative_eq!(fit.coefficients[1], 3.0, epsilon = 1e-10);
    }

    #[test]
    fn ols_rank_deficiency_detected() {
        let n = 10;
        let x = DMatrix::from_fn(n, 2, |r, _| r as f64); // duplicated column
        let y = DVector::from_fn(n, |r, _| r as f64);
        assert!(ols(&x, &y).is_err());
    }

    #[test]
    fn two_sls_matches_cov_ratio_single_instrument() {
        // exactly identified IV slope = cov(z,y)/cov(z,x)
        let z = DVector::from_vec(vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        let x = DVector::from_vec(vec![0.1, 0.8, 2.2, 3.1, 0.4, 2.9]);
        let y = DVector::from_vec(vec![0.4, 1.3, 4.8, 6.0, 1.1, 5.6]);
        let fit = two_sls(&y, &x, std::slice::from_ref(&z), &[]).unwrap();
        let num = covariance(z.as_slice(), y.as_slice());
        let den = covariance(z.as_slice(), x.as_slice());
        assert_relative_eq!(fit.coefficients[1], num / den, epsilon = 1e-10);
        assert!(fit.first_stage_f > 0.0);
    }
}
