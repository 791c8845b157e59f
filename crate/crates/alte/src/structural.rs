//! Covariance-structure modeling.
//!
//! The latent model routes every treatment arm and covariate through a single
//! latent outcome measured by J indicators (`lambda_1 = 1` fixes the scale);
//! the SUR alternative gives each indicator its own coefficients and a free
//! residual covariance. Both imply a covariance matrix for the observed
//! variables `[arms..., covariates..., measures...]`; fitting minimizes a
//! ULS or GLS discrepancy between the implied and sample matrices, and
//! `n * F_min` is reported as a chi-square statistic with `moments - free
//! parameters` degrees of freedom. Nested models are compared by chi-square
//! differences; the multigroup fit tests measurement equivalence across
//! treatment cells.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dataset::ExperimentData;
use crate::error::{Error, Result};
use crate::linreg::chi2_sf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Single latent outcome; arms and covariates affect measures only
    /// through it.
    Latent,
    /// Seemingly unrelated regressions: direct arrows from every exogenous
    /// variable to every measure, free residual covariance.
    Sur,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscrepancyKind {
    Uls,
    Gls,
}

/// Structural model over `[arms..., covariates..., measures...]`.
#[derive(Debug, Clone, Serialize)]
pub struct StructuralModel {
    pub kind: ModelKind,
    pub n_arms: usize,
    pub n_covariates: usize,
    pub n_measures: usize,
    /// Constrains every arm coefficient to zero (for fit-difference tests of
    /// the ALTE).
    pub fix_beta_zero: bool,
}

impl StructuralModel {
    pub fn latent(n_arms: usize, n_covariates: usize, n_measures: usize) -> Self {
        Self {
            kind: ModelKind::Latent,
            n_arms,
            n_covariates,
            n_measures,
            fix_beta_zero: false,
        }
    }

    pub fn sur(n_arms: usize, n_covariates: usize, n_measures: usize) -> Self {
        Self {
            kind: ModelKind::Sur,
            n_arms,
            n_covariates,
            n_measures,
            fix_beta_zero: false,
        }
    }

    pub fn with_null_effect(mut self) -> Self {
        self.fix_beta_zero = true;
        self
    }

    fn n_exog(&self) -> usize {
        self.n_arms + self.n_covariates
    }

    pub fn n_observed(&self) -> usize {
        self.n_exog() + self.n_measures
    }

    pub fn n_moments(&self) -> usize {
        let m = self.n_observed();
        m * (m + 1) / 2
    }

    /// Number of free parameters.
    pub fn n_free(&self) -> usize {
        let q = self.n_exog();
        let j = self.n_measures;
        let phi = q * (q + 1) / 2;
        match self.kind {
            ModelKind::Latent => {
                let paths = if self.fix_beta_zero {
                    self.n_covariates
                } else {
                    q
                };
                paths + (j - 1) + phi + 1 + j
            }
            ModelKind::Sur => {
                let per_eq = if self.fix_beta_zero {
                    self.n_covariates
                } else {
                    q
                };
                j * per_eq + j * (j + 1) / 2 + phi
            }
        }
    }

    pub fn df(&self) -> Result<usize> {
        let (m, f) = (self.n_moments(), self.n_free());
        if f > m {
            return Err(Error::Validation(format!(
                "{f} free parameters exceed {m} moments"
            )));
        }
        Ok(m - f)
    }

    /// Names for the entries of the parameter vector, in order.
    pub fn param_names(&self) -> Vec<String> {
        let q = self.n_exog();
        let j = self.n_measures;
        let mut names = Vec::new();
        let exog_name = |a: usize| {
            if a < self.n_arms {
                format!("z{}", a + 1)
            } else {
                format!("x{}", a - self.n_arms + 1)
            }
        };
        match self.kind {
            ModelKind::Latent => {
                for a in 0..q {
                    if self.fix_beta_zero && a < self.n_arms {
                        continue;
                    }
                    names.push(format!("beta:{}", exog_name(a)));
                }
                for m in 1..j {
                    names.push(format!("lambda:{}", m + 1));
                }
                for a in 0..q {
                    for b in a..q {
                        names.push(format!("phi:{}:{}", exog_name(a), exog_name(b)));
                    }
                }
                names.push("psi".to_string());
                for m in 0..j {
                    names.push(format!("sigma2:y{}", m + 1));
                }
            }
            ModelKind::Sur => {
                for m in 0..j {
                    for a in 0..q {
                        if self.fix_beta_zero && a < self.n_arms {
                            continue;
                        }
                        names.push(format!("beta:y{}:{}", m + 1, exog_name(a)));
                    }
                }
                for a in 0..j {
                    for b in a..j {
                        names.push(format!("omega:y{}:y{}", a + 1, b + 1));
                    }
                }
                for a in 0..q {
                    for b in a..q {
                        names.push(format!("phi:{}:{}", exog_name(a), exog_name(b)));
                    }
                }
            }
        }
        names
    }
}

fn vech_len(m: usize) -> usize {
    m * (m + 1) / 2
}

fn unpack_symmetric(theta: &[f64], m: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m, m);
    let mut k = 0;
    for a in 0..m {
        for b in a..m {
            out[(a, b)] = theta[k];
            out[(b, a)] = theta[k];
            k += 1;
        }
    }
    out
}

/// Model-implied covariance of the observed variables.
pub fn implied_covariance(model: &StructuralModel, theta: &[f64]) -> Result<DMatrix<f64>> {
    if theta.len() != model.n_free() {
        return Err(Error::Validation(format!(
            "theta has {} entries, model has {} free parameters",
            theta.len(),
            model.n_free()
        )));
    }
    let q = model.n_exog();
    let j = model.n_measures;
    let m = model.n_observed();
    let mut sigma = DMatrix::zeros(m, m);
    match model.kind {
        ModelKind::Latent => {
            let mut idx = 0;
            let mut b = DVector::zeros(q);
            for a in 0..q {
                if model.fix_beta_zero && a < model.n_arms {
                    b[a] = 0.0;
                } else {
                    b[a] = theta[idx];
                    idx += 1;
                }
            }
            let mut lambda = DVector::from_element(j, 1.0);
            for jm in 1..j {
                lambda[jm] = theta[idx];
                idx += 1;
            }
            let phi = unpack_symmetric(&theta[idx..idx + vech_len(q)], q);
            idx += vech_len(q);
            let psi = theta[idx];
            idx += 1;
            let sigma2 = &theta[idx..idx + j];

            let phi_b = &phi * &b;
            let var_eta = (b.transpose() * &phi_b)[(0, 0)] + psi;
            for a in 0..q {
                for c in 0..q {
                    sigma[(a, c)] = phi[(a, c)];
                }
                for jm in 0..j {
                    let v = lambda[jm] * phi_b[a];
                    sigma[(a, q + jm)] = v;
                    sigma[(q + jm, a)] = v;
                }
            }
            for a in 0..j {
                for c in 0..j {
                    sigma[(q + a, q + c)] = lambda[a] * lambda[c] * var_eta;
                }
                sigma[(q + a, q + a)] += sigma2[a];
            }
        }
        ModelKind::Sur => {
            let per_eq = if model.fix_beta_zero {
                model.n_covariates
            } else {
                q
            };
            let mut bmat = DMatrix::zeros(q, j);
            let mut idx = 0;
            for jm in 0..j {
                for a in 0..q {
                    if model.fix_beta_zero && a < model.n_arms {
                        continue;
                    }
                    bmat[(a, jm)] = theta[idx];
                    idx += 1;
                }
            }
            debug_assert_eq!(idx, j * per_eq);
            let omega = unpack_symmetric(&theta[idx..idx + vech_len(j)], j);
            idx += vech_len(j);
            let phi = unpack_symmetric(&theta[idx..idx + vech_len(q)], q);

            let phi_b = &phi * &bmat; // q x j
            let yy = bmat.transpose() * &phi_b + omega;
            for a in 0..q {
                for c in 0..q {
                    sigma[(a, c)] = phi[(a, c)];
                }
                for jm in 0..j {
                    sigma[(a, q + jm)] = phi_b[(a, jm)];
                    sigma[(q + jm, a)] = phi_b[(a, jm)];
                }
            }
            for a in 0..j {
                for c in 0..j {
                    sigma[(q + a, q + c)] = yy[(a, c)];
                }
            }
        }
    }
    Ok(sigma)
}

/// Fit statistics and the estimated parameter vector.
#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub theta: Vec<f64>,
    pub param_names: Vec<String>,
    pub discrepancy: f64,
    pub chi2: f64,
    pub df: usize,
    pub p_value: f64,
    #[serde(skip)]
    pub implied: DMatrix<f64>,
    #[serde(skip)]
    pub residual: DMatrix<f64>,
    pub kind: DiscrepancyKind,
    pub n: usize,
    /// Total fitted moments (covariances, plus means for multigroup fits).
    pub n_moments: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn param(&self, name: &str) -> Option<f64> {
        self.param_names
            .iter()
            .position(|p| p == name)
            .map(|i| self.theta[i])
    }
}

/// Sample input for a covariance-structure fit.
pub enum FitInput<'a> {
    Data(&'a ExperimentData),
    Moments { cov: DMatrix<f64>, n: usize },
}

impl<'a> FitInput<'a> {
    fn sample_cov(&self, model: &StructuralModel) -> Result<(DMatrix<f64>, usize)> {
        match self {
            FitInput::Moments { cov, n } => {
                if cov.nrows() != model.n_observed() {
                    return Err(Error::Validation(format!(
                        "covariance is {}x{}, model has {} observed variables",
                        cov.nrows(),
                        cov.ncols(),
                        model.n_observed()
                    )));
                }
                Ok((cov.clone(), *n))
            }
            FitInput::Data(data) => {
                if data.n_arms() != model.n_arms
                    || data.n_covariates() != model.n_covariates
                    || data.n_outcomes() != model.n_measures
                {
                    return Err(Error::Validation(
                        "data shape does not match the model".into(),
                    ));
                }
                let q = model.n_exog();
                let m = model.n_observed();
                let n = data.n();
                let mut mat = DMatrix::zeros(n, m);
                for t in 0..data.n_arms() {
                    mat.set_column(t, &data.treatment(t));
                }
                for p in 0..data.n_covariates() {
                    mat.set_column(data.n_arms() + p, &data.covariate(p));
                }
                for jm in 0..data.n_outcomes() {
                    mat.set_column(q + jm, &data.outcome(jm));
                }
                let (_, cov) = crate::dataset::means_and_cov(&mat);
                Ok((cov, n))
            }
        }
    }
}

fn uls_discrepancy(s: &DMatrix<f64>, sigma: &DMatrix<f64>) -> f64 {
    let d = s - sigma;
    0.5 * d.norm_squared()
}

fn gls_discrepancy(s_inv: &DMatrix<f64>, s: &DMatrix<f64>, sigma: &DMatrix<f64>) -> f64 {
    let d = (s - sigma) * s_inv;
    0.5 * (&d * &d).trace()
}

/// Numerical gradient by central differences.
fn num_grad<F: Fn(&[f64]) -> f64>(f: &F, theta: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; theta.len()];
    let mut th = theta.to_vec();
    for k in 0..theta.len() {
        let h = 1e-6 * (1.0 + theta[k].abs());
        th[k] = theta[k] + h;
        let fp = f(&th);
        th[k] = theta[k] - h;
        let fm = f(&th);
        th[k] = theta[k];
        g[k] = (fp - fm) / (2.0 * h);
    }
    g
}

/// BFGS with backtracking line search over the unmasked parameters.
/// Returns (theta, objective, gradient_inf_norm, converged).
fn bfgs<F: Fn(&[f64]) -> f64>(
    f: &F,
    start: &[f64],
    mask: &[bool],
    max_iter: usize,
) -> (Vec<f64>, f64, f64, bool) {
    let free: Vec<usize> = (0..start.len()).filter(|&k| !mask[k]).collect();
    let p = free.len();
    let mut full = start.to_vec();
    let mut x = DVector::from_fn(p, |i, _| start[free[i]]);
    let eval = |full: &mut Vec<f64>, x: &DVector<f64>| -> f64 {
        for (i, &k) in free.iter().enumerate() {
            full[k] = x[i];
        }
        f(full)
    };
    let mut fx = eval(&mut full, &x);
    let grad_at = |full: &mut Vec<f64>, x: &DVector<f64>| -> DVector<f64> {
        for (i, &k) in free.iter().enumerate() {
            full[k] = x[i];
        }
        let g = num_grad(f, full);
        DVector::from_fn(p, |i, _| g[free[i]])
    };
    let mut g = grad_at(&mut full, &x);
    let mut h_inv = DMatrix::<f64>::identity(p, p);
    let mut converged = false;
    for _it in 0..max_iter {
        if g.amax() < 1e-9 * (1.0 + fx.abs()) {
            converged = true;
            break;
        }
        let dir = -(&h_inv * &g);
        let slope = g.dot(&dir);
        let mut alpha = 1.0;
        let mut x_new = &x + &dir * alpha;
        let mut f_new = eval(&mut full, &x_new);
        let mut ls_ok = false;
        for _ in 0..50 {
            if f_new.is_finite() && f_new <= fx + 1e-4 * alpha * slope {
                ls_ok = true;
                break;
            }
            alpha *= 0.5;
            x_new = &x + &dir * alpha;
            f_new = eval(&mut full, &x_new);
        }
        if !ls_ok {
            if (&h_inv - DMatrix::<f64>::identity(p, p)).norm() > 1e-12 {
                h_inv = DMatrix::identity(p, p);
                continue;
            }
            break;
        }
        let g_new = grad_at(&mut full, &x_new);
        let s = &x_new - &x;
        let yv = &g_new - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let i_mat = DMatrix::<f64>::identity(p, p);
            let left = &i_mat - &s * yv.transpose() * rho;
            let right = &i_mat - &yv * s.transpose() * rho;
            h_inv = &left * h_inv * &right + &s * s.transpose() * rho;
        }
        let tiny = (fx - f_new).abs() <= 1e-13 * (1.0 + fx.abs());
        x = x_new;
        fx = f_new;
        g = g_new;
        if tiny {
            converged = true;
            break;
        }
    }
    for (i, &k) in free.iter().enumerate() {
        full[k] = x[i];
    }
    (full, fx, g.amax(), converged)
}

fn start_values(model: &StructuralModel, s: &DMatrix<f64>) -> Vec<f64> {
    let q = model.n_exog();
    let j = model.n_measures;
    let phi = s.view((0, 0), (q, q)).into_owned();
    let phi_inv = phi
        .clone()
        .try_inverse()
        .unwrap_or_else(|| DMatrix::identity(q, q));
    let s_xy = |jm: usize| -> DVector<f64> { DVector::from_fn(q, |a, _| s[(a, q + jm)]) };
    match model.kind {
        ModelKind::Latent => {
            let mut theta = Vec::new();
            let b0 = &phi_inv * s_xy(0);
            for a in 0..q {
                if model.fix_beta_zero && a < model.n_arms {
                    continue;
                }
                theta.push(b0[a]);
            }
            // lambda via the projection on the exogenous block (2SLS from
            // moments); cross-measure ratio as fallback
            let denom = (s_xy(0).transpose() * &phi_inv * s_xy(0))[(0, 0)];
            let mut lambda = vec![1.0; j];
            for jm in 1..j {
                let num = (s_xy(jm).transpose() * &phi_inv * s_xy(0))[(0, 0)];
                lambda[jm] = if denom.abs() > 1e-12 && (num / denom).is_finite() {
                    num / denom
                } else if j >= 3 {
                    let k = (1..j).find(|&k| k != jm).unwrap_or(0);
                    let d = s[(q, q + k)];
                    if d.abs() > 1e-12 {
                        s[(q + jm, q + k)] / d
                    } else {
                        1.0
                    }
                } else {
                    1.0
                };
                theta.push(lambda[jm]);
            }
            for a in 0..q {
                for b in a..q {
                    theta.push(phi[(a, b)]);
                }
            }
            let explained = (b0.transpose() * &phi * &b0)[(0, 0)];
            let var_eta = if j >= 2 && lambda[1].abs() > 1e-12 {
                (s[(q, q + 1)] / lambda[1]).max(0.05 * s[(q, q)])
            } else {
                0.5 * s[(q, q)]
            };
            theta.push((var_eta - explained).max(1e-3 * s[(q, q)]));
            for jm in 0..j {
                let s2 = s[(q + jm, q + jm)] - lambda[jm] * lambda[jm] * var_eta;
                theta.push(s2.max(1e-3 * s[(q + jm, q + jm)]));
            }
            theta
        }
        ModelKind::Sur => {
            // the SUR model is saturated; these starts are the closed form
            let mut theta = Vec::new();
            let mut bmat = DMatrix::zeros(q, j);
            for jm in 0..j {
                let b = &phi_inv * s_xy(jm);
                for a in 0..q {
                    bmat[(a, jm)] = if model.fix_beta_zero && a < model.n_arms {
                        0.0
                    } else {
                        b[a]
                    };
                    if !(model.fix_beta_zero && a < model.n_arms) {
                        theta.push(b[a]);
                    }
                }
            }
            let phi_b = &phi * &bmat;
            for a in 0..j {
                for b in a..j {
                    let fitted = (bmat.column(a).transpose() * phi_b.column(b))[(0, 0)];
                    theta.push(s[(q + a, q + b)] - fitted);
                }
            }
            for a in 0..q {
                for b in a..q {
                    theta.push(phi[(a, b)]);
                }
            }
            theta
        }
    }
}

/// Indices of variance parameters (psi and sigma2) in the latent layout.
fn variance_param_indices(model: &StructuralModel) -> Vec<usize> {
    match model.kind {
        ModelKind::Latent => {
            let q = model.n_exog();
            let paths = if model.fix_beta_zero {
                model.n_covariates
            } else {
                q
            };
            let base = paths + (model.n_measures - 1) + vech_len(q);
            (base..base + 1 + model.n_measures).collect()
        }
        ModelKind::Sur => Vec::new(),
    }
}

/// Minimum-distance fit of a covariance-structure model.
pub fn fit(model: &StructuralModel, input: FitInput, kind: DiscrepancyKind) -> Result<FitResult> {
    let (s, n) = input.sample_cov(model)?;
    let df = model.df()?;
    let s_inv = match kind {
        DiscrepancyKind::Gls => {
            let eig_min = s
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            if eig_min <= 0.0 {
                return Err(Error::NotPositiveDefinite(format!(
                    "sample covariance has eigenvalue {eig_min:.4e}"
                )));
            }
            Some(s.clone().try_inverse().ok_or_else(|| {
                Error::NotPositiveDefinite("sample covariance for GLS weights".into())
            })?)
        }
        DiscrepancyKind::Uls => None,
    };
    let objective = |theta: &[f64]| -> f64 {
        match implied_covariance(model, theta) {
            Ok(sigma) => match (&kind, &s_inv) {
                (DiscrepancyKind::Gls, Some(inv)) => gls_discrepancy(inv, &s, &sigma),
                _ => uls_discrepancy(&s, &sigma),
            },
            Err(_) => f64::INFINITY,
        }
    };
    let start = start_values(model, &s);
    let mask = vec![false; start.len()];
    let max_iter = 500;
    let (mut theta, mut fmin, mut gnorm, mut converged) =
        bfgs(&objective, &start, &mask, max_iter);

    let mut warnings = Vec::new();
    // Heywood handling: pin negative variance components at zero and refit
    let var_idx = variance_param_indices(model);
    let offenders: Vec<usize> = var_idx.iter().copied().filter(|&k| theta[k] < 0.0).collect();
    if !offenders.is_empty() {
        let mut mask2 = vec![false; theta.len()];
        for &k in &offenders {
            theta[k] = 0.0;
            mask2[k] = true;
            warnings.push(format!(
                "Heywood case: {} pinned at 0",
                model.param_names()[k]
            ));
        }
        let (t2, f2, g2, c2) = bfgs(&objective, &theta, &mask2, max_iter);
        theta = t2;
        fmin = f2;
        gnorm = g2;
        converged = c2;
    }
    if !converged && gnorm > 1e-4 * (1.0 + fmin.abs()) {
        return Err(Error::NonConvergence {
            iters: max_iter,
            residual: gnorm,
        });
    }

    let implied = implied_covariance(model, &theta)?;
    let residual = &s - &implied;
    let chi2 = (n as f64 * fmin).max(0.0);
    Ok(FitResult {
        theta,
        param_names: model.param_names(),
        discrepancy: fmin,
        chi2,
        df,
        p_value: if df > 0 { chi2_sf(chi2, df as f64) } else { 1.0 },
        implied,
        residual,
        kind,
        n,
        n_moments: model.n_moments(),
        converged,
        warnings,
    })
}

/// Chi-square difference test between two fits of nested models on the same
/// sample.
#[derive(Debug, Clone, Serialize)]
pub struct NestedComparison {
    pub chi2_diff: f64,
    pub df_diff: usize,
    pub p_value: f64,
    pub chi2_restricted: f64,
    pub chi2_free: f64,
}

pub fn compare_fits(restricted: &FitResult, free: &FitResult) -> Result<NestedComparison> {
    if restricted.n != free.n || restricted.n_moments != free.n_moments {
        return Err(Error::NotNested(
            "fits use different samples or observed variables".into(),
        ));
    }
    if restricted.df < free.df {
        return Err(Error::NotNested(
            "restricted model has fewer constraints than the free model".into(),
        ));
    }
    let df_diff = restricted.df - free.df;
    let chi2_diff = (restricted.chi2 - free.chi2).max(0.0);
    Ok(NestedComparison {
        chi2_diff,
        df_diff,
        p_value: if df_diff > 0 {
            chi2_sf(chi2_diff, df_diff as f64)
        } else {
            1.0
        },
        chi2_restricted: restricted.chi2,
        chi2_free: free.chi2,
    })
}

/// Fits both models and performs the nested comparison. The restricted model
/// must constrain a superset of the free model's constraints: identical
/// models, latent against SUR on the same variables, or a null-effect
/// restriction of the same model.
pub fn compare_nested(
    restricted: &StructuralModel,
    free: &StructuralModel,
    data: &ExperimentData,
    kind: DiscrepancyKind,
) -> Result<NestedComparison> {
    let same_shape = restricted.n_arms == free.n_arms
        && restricted.n_covariates == free.n_covariates
        && restricted.n_measures == free.n_measures;
    if !same_shape {
        return Err(Error::NotNested(
            "models describe different observed variables".into(),
        ));
    }
    let nested = match (restricted.kind, free.kind) {
        (ModelKind::Latent, ModelKind::Sur) => true,
        (ModelKind::Sur, ModelKind::Latent) => false,
        _ => restricted.fix_beta_zero || !free.fix_beta_zero,
    };
    if !nested {
        return Err(Error::NotNested(format!(
            "{:?} is not a restriction of {:?}",
            restricted.kind, free.kind
        )));
    }
    let fit_r = fit(restricted, FitInput::Data(data), kind)?;
    let fit_f = fit(free, FitInput::Data(data), kind)?;
    compare_fits(&fit_r, &fit_f)
}

// ---------------------------------------------------------------------------
// Multigroup measurement-equivalence fit
// ---------------------------------------------------------------------------

/// Cross-group equality constraints on measurement parameters.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GroupConstraints {
    pub equal_lambda: bool,
    pub equal_sigma: bool,
}

impl GroupConstraints {
    pub fn constrained() -> Self {
        Self {
            equal_lambda: true,
            equal_sigma: true,
        }
    }
    pub fn free() -> Self {
        Self {
            equal_lambda: false,
            equal_sigma: false,
        }
    }
}

struct GroupSample {
    n: usize,
    means: DVector<f64>,
    cov: DMatrix<f64>,
    cov_inv: Option<DMatrix<f64>>,
}

/// Multigroup measurement model fitted jointly over treatment cells.
///
/// Per group g the measures satisfy `Y_j = tau_j + lambda_j^g eta + e_j` with
/// `E[eta | g] = m_g` (structural means, reference group fixed at 0),
/// `Var(eta | g) = psi` shared across groups for identification, and
/// group-specific scaling/error variances unless constrained equal. The
/// reference measure keeps `lambda_1 = 1` in every group. The joint
/// discrepancy sums per-group covariance and mean terms; `chi2 = n * F`.
pub fn fit_multigroup(
    data: &ExperimentData,
    constraints: GroupConstraints,
    kind: DiscrepancyKind,
    grouping: Option<&[usize]>,
) -> Result<FitResult> {
    let j = data.n_outcomes();
    if j < 2 {
        return Err(Error::Validation(
            "measurement-equivalence fit needs at least two measures".into(),
        ));
    }
    let groups: Vec<Vec<usize>> = match grouping {
        Some(g) => {
            if g.len() != data.n() {
                return Err(Error::Validation("grouping length mismatch".into()));
            }
            let n_groups = g.iter().max().map(|m| m + 1).unwrap_or(0);
            let mut rows = vec![Vec::new(); n_groups];
            for (i, &gi) in g.iter().enumerate() {
                rows[gi].push(i);
            }
            rows
        }
        None => data.cells().into_values().collect(),
    };
    let n_groups = groups.len();
    let moments_per_group = j + vech_len(j);
    for (g, rows) in groups.iter().enumerate() {
        if rows.is_empty() {
            return Err(Error::EmptyGroup(format!("group {g} has no rows")));
        }
        if rows.len() < moments_per_group {
            return Err(Error::EmptyGroup(format!(
                "group {g} has {} rows, fewer than its {moments_per_group} moments",
                rows.len()
            )));
        }
    }
    let n_total: usize = groups.iter().map(|r| r.len()).sum();

    let mut samples = Vec::new();
    for rows in &groups {
        let sub = crate::dataset::select_rows(data.outcomes(), rows);
        let (means, cov) = crate::dataset::means_and_cov(&sub);
        let cov_inv = match kind {
            DiscrepancyKind::Gls => Some(cov.clone().try_inverse().ok_or_else(|| {
                Error::NotPositiveDefinite("group covariance for GLS weights".into())
            })?),
            DiscrepancyKind::Uls => None,
        };
        samples.push(GroupSample {
            n: rows.len(),
            means,
            cov,
            cov_inv,
        });
    }

    // parameter layout: tau (J), m_g (G-1), psi, lambda block, sigma block
    let lambda_groups = if constraints.equal_lambda { 1 } else { n_groups };
    let sigma_groups = if constraints.equal_sigma { 1 } else { n_groups };
    let n_free = j + (n_groups - 1) + 1 + (j - 1) * lambda_groups + j * sigma_groups;
    let n_moments = n_groups * moments_per_group;
    if n_free > n_moments {
        return Err(Error::Validation(format!(
            "{n_free} free parameters exceed {n_moments} moments"
        )));
    }
    let df = n_moments - n_free;

    let lam_of = move |theta: &[f64], g: usize, m: usize| -> f64 {
        if m == 0 {
            return 1.0;
        }
        let base = j + (n_groups - 1) + 1;
        let gg = if constraints.equal_lambda { 0 } else { g };
        theta[base + gg * (j - 1) + (m - 1)]
    };
    let sig_of = move |theta: &[f64], g: usize, m: usize| -> f64 {
        let base = j + (n_groups - 1) + 1 + (j - 1) * lambda_groups;
        let gg = if constraints.equal_sigma { 0 } else { g };
        theta[base + gg * j + m]
    };
    let objective = |theta: &[f64]| -> f64 {
        let psi = theta[j + (n_groups - 1)];
        let mut total = 0.0;
        for (g, smp) in samples.iter().enumerate() {
            let m_g = if g == 0 { 0.0 } else { theta[j + g - 1] };
            let mut sigma = DMatrix::zeros(j, j);
            let mut mu = DVector::zeros(j);
            for a in 0..j {
                let la = lam_of(theta, g, a);
                mu[a] = theta[a] + la * m_g;
                for b in 0..j {
                    sigma[(a, b)] = la * lam_of(theta, g, b) * psi;
                }
                sigma[(a, a)] += sig_of(theta, g, a);
            }
            let w = smp.n as f64 / n_total as f64;
            let fcov = match (&kind, &smp.cov_inv) {
                (DiscrepancyKind::Gls, Some(inv)) => gls_discrepancy(inv, &smp.cov, &sigma),
                _ => uls_discrepancy(&smp.cov, &sigma),
            };
            let dm = &smp.means - &mu;
            let fmean = match (&kind, &smp.cov_inv) {
                (DiscrepancyKind::Gls, Some(inv)) => (dm.transpose() * inv * &dm)[(0, 0)],
                _ => dm.norm_squared(),
            };
            total += w * (fcov + fmean);
        }
        total
    };

    // start values
    let mut theta = vec![0.0; n_free];
    for m in 0..j {
        theta[m] = samples[0].means[m];
    }
    for g in 1..n_groups {
        theta[j + g - 1] = samples[g].means[0] - samples[0].means[0];
    }
    let mut pooled = DMatrix::zeros(j, j);
    for smp in &samples {
        pooled += &smp.cov * (smp.n as f64 / n_total as f64);
    }
    let psi0 = pooled[(0, 1)].abs().max(1e-3 * pooled[(0, 0)]);
    theta[j + n_groups - 1] = psi0;
    let lam_base = j + n_groups;
    for g in 0..lambda_groups {
        for m in 1..j {
            theta[lam_base + g * (j - 1) + (m - 1)] = pooled[(0, m)] / psi0;
        }
    }
    let sig_base = lam_base + (j - 1) * lambda_groups;
    for g in 0..sigma_groups {
        for m in 0..j {
            let lam0 = if m == 0 {
                1.0
            } else {
                theta[lam_base
                    + (if constraints.equal_lambda { 0 } else { g }) * (j - 1)
                    + m
                    - 1]
            };
            theta[sig_base + g * j + m] =
                (pooled[(m, m)] - lam0 * lam0 * psi0).max(1e-3 * pooled[(m, m)]);
        }
    }

    let mask = vec![false; n_free];
    let (theta, fmin, gnorm, converged) = bfgs(&objective, &theta, &mask, 800);
    if !converged && gnorm > 1e-4 * (1.0 + fmin.abs()) {
        return Err(Error::NonConvergence {
            iters: 800,
            residual: gnorm,
        });
    }
    let chi2 = (n_total as f64 * fmin).max(0.0);

    let mut param_names = Vec::new();
    for m in 0..j {
        param_names.push(format!("tau:y{}", m + 1));
    }
    for g in 1..n_groups {
        param_names.push(format!("latent_mean:g{g}"));
    }
    param_names.push("psi".into());
    for g in 0..lambda_groups {
        for m in 1..j {
            param_names.push(if constraints.equal_lambda {
                format!("lambda:y{}", m + 1)
            } else {
                format!("lambda:y{}:g{g}", m + 1)
            });
        }
    }
    for g in 0..sigma_groups {
        for m in 0..j {
            param_names.push(if constraints.equal_sigma {
                format!("sigma2:y{}", m + 1)
            } else {
                format!("sigma2:y{}:g{g}", m + 1)
            });
        }
    }

    Ok(FitResult {
        theta,
        param_names,
        discrepancy: fmin,
        chi2,
        df,
        p_value: if df > 0 { chi2_sf(chi2, df as f64) } else { 1.0 },
        implied: DMatrix::zeros(j, j),
        residual: DMatrix::zeros(j, j),
        kind,
        n: n_total,
        n_moments,
        converged,
        warnings: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn simulate_latent(
        n: usize,
        beta: f64,
        lambda: &[f64],
        err_sd: &[f64],
        seed: u64,
    ) -> ExperimentData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z: Vec<f64> = (0..n).map(|i| if i < n / 2 { 1.0 } else { 0.0 }).collect();
        for i in (1..n).rev() {
            let k = rng.random_range(0..=i);
            z.swap(i, k);
        }
        let std = Normal::new(0.0, 1.0).unwrap();
        let eta: Vec<f64> = z
            .iter()
            .map(|&zi| beta * zi + std.sample(&mut rng))
            .collect();
        let outcomes = lambda
            .iter()
            .zip(err_sd)
            .enumerate()
            .map(|(j, (&l, &s))| {
                let noise = Normal::new(0.0, s).unwrap();
                (
                    format!("y{}", j + 1),
                    eta.iter()
                        .map(|&e| l * e + noise.sample(&mut rng))
                        .collect::<Vec<f64>>(),
                )
            })
            .collect();
        ExperimentData::from_columns(vec![("z".into(), z)], outcomes, vec![], 0).unwrap()
    }

    #[test]
    fn implied_covariance_unit_latent_case() {
        // beta=0, psi=1, lambda=(1,1,1), sigma2=(0,0,0): all Y-Y covariances
        // 1, Y-Z covariances 0
        let model = StructuralModel::latent(1, 0, 3);
        let theta = vec![0.0, 1.0, 1.0, 0.25, 1.0, 0.0, 0.0, 0.0];
        let sigma = implied_covariance(&model, &theta).unwrap();
        for a in 0..3 {
            assert_relative_eq!(sigma[(0, 1 + a)], 0.0, epsilon = 1e-14);
            for b in 0..3 {
                assert_relative_eq!(sigma[(1 + a, 1 + b)], 1.0, epsilon = 1e-14);
            }
        }
        assert_relative_eq!(sigma[(0, 0)], 0.25, epsilon = 1e-14);
    }

    #[test]
    fn implied_covariance_symbolic_zy2_entry() {
        // Cov(Y2, Z) = lambda2 * beta * Var(Z)
        let model = StructuralModel::latent(1, 0, 3);
        let (beta, lam2, lam3, phi, psi) = (0.7, 1.9, 0.4, 0.21, 1.3);
        let theta = vec![beta, lam2, lam3, phi, psi, 0.5, 0.6, 0.7];
        let sigma = implied_covariance(&model, &theta).unwrap();
        assert_relative_eq!(sigma[(0, 2)], lam2 * beta * phi, epsilon = 1e-12);
        assert_relative_eq!(
            sigma[(2, 2)],
            lam2 * lam2 * (beta * beta * phi + psi) + 0.6,
            epsilon = 1e-12
        );
    }

    #[test]
    fn df_accounting_matches_three_measure_shape() {
        let model = StructuralModel::latent(1, 0, 3);
        assert_eq!(model.n_moments(), 10);
        assert_eq!(model.n_free(), 8);
        assert_eq!(model.df().unwrap(), 2);
        let sur = StructuralModel::sur(1, 0, 3);
        assert_eq!(sur.n_free(), 10);
        assert_eq!(sur.df().unwrap(), 0);
    }

    #[test]
    fn df_accounting_application_shape() {
        // 2 arms + 1 covariate + 2 measures
        let m = StructuralModel::latent(2, 1, 2);
        assert_eq!(m.n_moments(), 15);
        assert_eq!(m.df().unwrap(), 2);
        let m0 = StructuralModel::latent(2, 0, 2);
        assert_eq!(m0.df().unwrap(), 1);
        let sur = StructuralModel::sur(2, 1, 2);
        assert_eq!(sur.df().unwrap(), 0);
    }

    #[test]
    fn exactly_identified_fit_reproduces_sample_covariance() {
        let data = simulate_latent(300, 0.8, &[1.0, 1.4], &[0.7, 0.9], 5);
        let model = StructuralModel::latent(1, 0, 2);
        assert_eq!(model.df().unwrap(), 0);
        let res = fit(&model, FitInput::Data(&data), DiscrepancyKind::Gls).unwrap();
        assert!(
            res.residual.amax() < 1e-8,
            "residual {}",
            res.residual.amax()
        );
        let ratio = crate::identify::lambda_treatment_iv(&data, 1, 0).unwrap();
        assert_relative_eq!(res.param("lambda:2").unwrap(), ratio, epsilon = 1e-6);
        let z = data.treatment(0);
        let y = data.outcome(0);
        let beta = crate::linreg::covariance(z.as_slice(), y.as_slice())
            / crate::linreg::variance(z.as_slice());
        assert_relative_eq!(res.param("beta:z1").unwrap(), beta, epsilon = 1e-6);
    }

    #[test]
    fn sur_fit_is_saturated() {
        let data = simulate_latent(200, 0.6, &[1.0, 0.8, 1.1], &[0.5, 0.6, 0.7], 7);
        let model = StructuralModel::sur(1, 0, 3);
        let res = fit(&model, FitInput::Data(&data), DiscrepancyKind::Gls).unwrap();
        assert_eq!(res.df, 0);
        assert!(res.chi2 < 1e-6);
    }

    #[test]
    fn latent_fit_recovers_parameters() {
        let data = simulate_latent(40_000, 1.0, &[1.0, 1.6, 0.5], &[0.8, 1.0, 0.6], 11);
        let model = StructuralModel::latent(1, 0, 3);
        let res = fit(&model, FitInput::Data(&data), DiscrepancyKind::Gls).unwrap();
        assert!((res.param("lambda:2").unwrap() - 1.6).abs() < 0.05);
        assert!((res.param("lambda:3").unwrap() - 0.5).abs() < 0.05);
        assert!((res.param("beta:z1").unwrap() - 1.0).abs() < 0.05);
        assert!((res.param("psi").unwrap() - 1.0).abs() < 0.05);
        assert!((res.param("sigma2:y2").unwrap() - 1.0).abs() < 0.08);
    }

    #[test]
    fn identical_models_compare_to_p_one() {
        let data = simulate_latent(300, 0.8, &[1.0, 1.2, 0.9], &[0.5, 0.7, 0.6], 13);
        let model = StructuralModel::latent(1, 0, 3);
        let cmp = compare_nested(&model, &model, &data, DiscrepancyKind::Gls).unwrap();
        assert_eq!(cmp.df_diff, 0);
        assert_relative_eq!(cmp.chi2_diff, 0.0, epsilon = 1e-9);
        assert_relative_eq!(cmp.p_value, 1.0);
    }

    #[test]
    fn latent_vs_sur_has_two_df_on_three_measure_shape() {
        let data = simulate_latent(500, 0.8, &[1.0, 1.2, 0.9], &[0.5, 0.7, 0.6], 17);
        let latent = StructuralModel::latent(1, 0, 3);
        let sur = StructuralModel::sur(1, 0, 3);
        let cmp = compare_nested(&latent, &sur, &data, DiscrepancyKind::Gls).unwrap();
        assert_eq!(cmp.df_diff, 2);
        assert!(cmp.p_value > 0.0 && cmp.p_value <= 1.0);
        assert!(compare_nested(&sur, &latent, &data, DiscrepancyKind::Gls).is_err());
    }

    #[test]
    fn null_effect_restriction_detects_effect() {
        let data = simulate_latent(2_000, 1.0, &[1.0, 1.2], &[0.6, 0.7], 19);
        let free = StructuralModel::latent(1, 0, 2);
        let null = StructuralModel::latent(1, 0, 2).with_null_effect();
        let cmp = compare_nested(&null, &free, &data, DiscrepancyKind::Gls).unwrap();
        assert_eq!(cmp.df_diff, 1);
        assert!(cmp.p_value < 1e-6);
    }

    #[test]
    fn multigroup_free_vs_constrained_df_gap() {
        let data = simulate_latent(600, 0.8, &[1.0, 1.3], &[0.6, 0.8], 23);
        let con = fit_multigroup(
            &data,
            GroupConstraints::constrained(),
            DiscrepancyKind::Gls,
            None,
        )
        .unwrap();
        let free = fit_multigroup(&data, GroupConstraints::free(), DiscrepancyKind::Gls, None)
            .unwrap();
        // J=2, G=2: freeing lambda (1) and sigma (2) for the extra group
        assert_eq!(con.df - free.df, 3);
        let cmp = compare_fits(&con, &free).unwrap();
        assert_eq!(cmp.df_diff, 3);
        assert!(cmp.p_value > 0.0 && cmp.p_value <= 1.0);
    }

    #[test]
    fn multigroup_three_measures_equivalence_holds_under_truth() {
        let data = simulate_latent(1_200, 0.8, &[1.0, 1.3, 0.7], &[0.6, 0.8, 0.5], 31);
        let con = fit_multigroup(
            &data,
            GroupConstraints::constrained(),
            DiscrepancyKind::Gls,
            None,
        )
        .unwrap();
        let free = fit_multigroup(&data, GroupConstraints::free(), DiscrepancyKind::Gls, None)
            .unwrap();
        let cmp = compare_fits(&con, &free).unwrap();
        // J=3, G=2: 2 lambda + 3 sigma freed
        assert_eq!(cmp.df_diff, 5);
        // measurement parameters truly equal across groups: no rejection
        assert!(cmp.p_value > 0.01);
    }
}
