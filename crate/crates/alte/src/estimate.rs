//! Point and variance estimation of the average latent treatment effect.
//!
//! `dim_wsi` is the difference in arm means of the weighted scaled index with
//! a Neyman variance that treats the scaling and weights as known.
//! `stacked_regression` reproduces it as a single regression on stacked
//! scaled outcomes. `ols_adjusted` regresses the index on all arm indicators
//! and covariates with HC2 errors. `gmm_joint` estimates the scaling
//! parameters, variance components, and the ALTE as one stacked
//! method-of-moments system, so the reported sandwich variance carries the
//! estimation uncertainty of every ingredient.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dataset::{CellKey, ExperimentData};
use crate::error::{Error, Result};
use crate::identify::{lambda_combined, InstrumentRoster, ScalingEstimate};
use crate::index::{
    estimate_error_variances, WeightKind, WeightScheme, WsiOutcome,
};
use crate::linreg::{ols, ols_cov_hc2, variance};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMethod {
    NeymanKnownLambda,
    GmmSandwich,
    Hc2Robust,
    Bootstrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Dim,
    Stacked,
    OlsAdjusted,
    GmmJoint,
    BridgedDim,
}

/// An ALTE estimate in the units of the reference measure.
#[derive(Debug, Clone, Serialize)]
pub struct AlteResult {
    pub tau_hat: f64,
    pub se: f64,
    pub ci95: (f64, f64),
    pub variance_method: VarianceMethod,
    pub estimator: EstimatorKind,
    pub arm: usize,
    pub arm_label: String,
    pub n_treated: usize,
    pub n_control: usize,
    pub weights: Vec<f64>,
    pub lambda: Vec<f64>,
    pub warnings: Vec<String>,
}

impl AlteResult {
    pub fn t_ratio(&self) -> f64 {
        self.tau_hat / self.se
    }

    pub fn p_value(&self) -> f64 {
        crate::linreg::z_pvalue(self.t_ratio())
    }
}

fn analytic_ci(tau: f64, se: f64) -> (f64, f64) {
    (tau - 1.96 * se, tau + 1.96 * se)
}

/// Difference in means with the Neyman variance S1^2/n1 + S0^2/n0.
pub(crate) fn dim_neyman(values: &[f64], treated: &[usize], control: &[usize]) -> (f64, f64) {
    let pick = |rows: &[usize]| rows.iter().map(|&i| values[i]).collect::<Vec<f64>>();
    let t = pick(treated);
    let c = pick(control);
    let tau = crate::linreg::mean(&t) - crate::linreg::mean(&c);
    let v = variance(&t) / t.len() as f64 + variance(&c) / c.len() as f64;
    (tau, v.max(0.0).sqrt())
}

/// Difference-in-means ALTE for one arm against the pure control group.
///
/// With several arms the remaining arms are excluded from the comparison and
/// a warning flag recommends `ols_adjusted`, which estimates all arms
/// jointly.
pub fn dim_wsi(wsi: &WsiOutcome, data: &ExperimentData, arm: usize) -> Result<AlteResult> {
    if arm >= data.n_arms() {
        return Err(Error::Validation(format!("arm {arm} out of range")));
    }
    let treated = data.arm_rows(arm);
    let control = data.control_rows();
    if treated.is_empty() || control.is_empty() {
        return Err(Error::DegenerateDesign(
            "both arms must be nonempty for difference in means".into(),
        ));
    }
    let (tau, se) = dim_neyman(&wsi.values, &treated, &control);
    let mut warnings = Vec::new();
    if data.n_arms() > 1 {
        warnings.push(
            "multiple correlated arms: units in other arms were excluded; \
             use ols_adjusted for joint estimation"
                .to_string(),
        );
    }
    Ok(AlteResult {
        tau_hat: tau,
        se,
        ci95: analytic_ci(tau, se),
        variance_method: VarianceMethod::NeymanKnownLambda,
        estimator: EstimatorKind::Dim,
        arm,
        arm_label: data.treatment_labels()[arm].clone(),
        n_treated: treated.len(),
        n_control: control.len(),
        weights: wsi.scheme.weights.clone(),
        lambda: wsi.lambda.clone(),
        warnings,
    })
}

/// Stacked regression: the nJ weighted scaled outcomes regressed on a
/// replicated `(1, Z)` design. The coefficient on Z equals the weighted
/// difference-in-means exactly; outcomes are stacked as `J * w_j * Y_ij /
/// lambda_j` so non-uniform weights reproduce the weighted estimator.
pub fn stacked_regression(
    data: &ExperimentData,
    lambda: &ScalingEstimate,
    scheme: &WeightScheme,
    arm: usize,
) -> Result<AlteResult> {
    let j_count = data.n_outcomes();
    if scheme.weights.len() != j_count {
        return Err(Error::Validation("weight/outcome length mismatch".into()));
    }
    let treated = data.arm_rows(arm);
    let control = data.control_rows();
    if treated.is_empty() || control.is_empty() {
        return Err(Error::DegenerateDesign(
            "both arms must be nonempty for the stacked regression".into(),
        ));
    }
    let rows: Vec<usize> = treated.iter().chain(control.iter()).copied().collect();
    let n_rows = rows.len() * j_count;
    let mut x = DMatrix::zeros(n_rows, 2);
    let mut y = DVector::zeros(n_rows);
    let mut r = 0;
    for &i in &rows {
        let zi = data.treatments()[(i, arm)];
        for j in 0..j_count {
            x[(r, 0)] = 1.0;
            x[(r, 1)] = zi;
            y[r] = j_count as f64 * scheme.weights[j] * data.outcomes()[(i, j)]
                / lambda.lambda[j];
            r += 1;
        }
    }
    let fit = ols(&x, &y)?;
    let beta = fit.coefficients[1];

    // algebraic identity with the weighted difference in means
    let wsi = crate::index::build_wsi(data, lambda, scheme)?;
    let (tau, se) = dim_neyman(&wsi.values, &treated, &control);
    debug_assert!((beta - tau).abs() <= 1e-10 * (1.0 + tau.abs()));

    Ok(AlteResult {
        tau_hat: beta,
        se,
        ci95: analytic_ci(beta, se),
        variance_method: VarianceMethod::NeymanKnownLambda,
        estimator: EstimatorKind::Stacked,
        arm,
        arm_label: data.treatment_labels()[arm].clone(),
        n_treated: treated.len(),
        n_control: control.len(),
        weights: scheme.weights.clone(),
        lambda: lambda.lambda.clone(),
        warnings: Vec::new(),
    })
}

/// OLS of the index on all arm indicators plus the selected covariates, with
/// HC2 robust standard errors. Returns one result per requested arm.
pub fn ols_adjusted(
    data: &ExperimentData,
    wsi: &WsiOutcome,
    arms: &[usize],
    covariates: &[usize],
) -> Result<Vec<AlteResult>> {
    let n = data.n();
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
    let y = DVector::from_vec(wsi.values.clone());
    let fit = ols(&x, &y).map_err(|e| match e {
        Error::RankDeficient(_) => Error::RankDeficient(format!(
            "collinear columns among [intercept, {}, {}]",
            data.treatment_labels().join(", "),
            covariates
                .iter()
                .map(|&p| data.covariate_labels()[p].as_str())
                .collect::<Vec<_>>()
                .join(", ")
        )),
        other => other,
    })?;
    let cov = ols_cov_hc2(&x, &fit);
    let mut out = Vec::new();
    for &arm in arms {
        if arm >= data.n_arms() {
            return Err(Error::Validation(format!("arm {arm} out of range")));
        }
        let idx = 1 + arm;
        let tau = fit.coefficients[idx];
        let se = cov[(idx, idx)].max(0.0).sqrt();
        out.push(AlteResult {
            tau_hat: tau,
            se,
            ci95: analytic_ci(tau, se),
            variance_method: VarianceMethod::Hc2Robust,
            estimator: EstimatorKind::OlsAdjusted,
            arm,
            arm_label: data.treatment_labels()[arm].clone(),
            n_treated: data.arm_rows(arm).len(),
            n_control: data.control_rows().len(),
            weights: wsi.scheme.weights.clone(),
            lambda: wsi.lambda.clone(),
            warnings: Vec::new(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Joint GMM
// ---------------------------------------------------------------------------

/// Options for the joint GMM system.
#[derive(Debug, Clone)]
pub struct GmmOptions {
    pub arm: usize,
    pub reference: usize,
    pub roster: InstrumentRoster,
    pub weight_kind: WeightKind,
    /// Fixes the scaling vector and drops the lambda moment block.
    pub fixed_lambda: Option<Vec<f64>>,
    /// `true` expresses the ALTE as mu1 - mu0 with two per-arm moments;
    /// `false` uses the single inverse-propensity-weighted moment.
    pub split_tau: bool,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            arm: 0,
            reference: 0,
            roster: InstrumentRoster::treatments_only(),
            weight_kind: WeightKind::InverseVariance,
            fixed_lambda: None,
            split_tau: true,
            max_iterations: 100,
            tolerance: 1e-11,
        }
    }
}

/// Joint GMM fit: every component of the two-step pipeline as one parameter
/// vector with a sandwich covariance.
#[derive(Debug, Clone, Serialize)]
pub struct GmmJointFit {
    pub alte: AlteResult,
    pub lambda: Vec<f64>,
    pub lambda_se: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub psi: f64,
    pub omega: Vec<f64>,
    pub n_moments: usize,
    pub n_params: usize,
    pub iterations: usize,
    pub residual_norm: f64,
}

struct GmmSystem<'d> {
    data: &'d ExperimentData,
    reference: usize,
    arm: usize,
    cells: Vec<(CellKey, Vec<usize>)>,
    cell_of_row: Vec<usize>,
    treated: Vec<bool>,
    control: Vec<bool>,
    p_hat: f64,
    /// (measure, instrument column) pairs for the lambda block.
    lambda_instruments: Vec<(usize, DVector<f64>)>,
    free_measures: Vec<usize>,
    fixed_lambda: Option<Vec<f64>>,
    weight_kind: WeightKind,
    split_tau: bool,
    j: usize,
    n: usize,
}

impl<'d> GmmSystem<'d> {
    fn new(data: &'d ExperimentData, opts: &GmmOptions) -> Result<Self> {
        if opts.weight_kind == WeightKind::CovarianceOptimal
            || opts.weight_kind == WeightKind::User
        {
            return Err(Error::Validation(
                "joint GMM supports equal or inverse-variance weights".into(),
            ));
        }
        let j = data.n_outcomes();
        if j < 2 && opts.weight_kind == WeightKind::InverseVariance {
            return Err(Error::Validation(
                "inverse-variance joint GMM needs J >= 2".into(),
            ));
        }
        let cells: Vec<(CellKey, Vec<usize>)> = data.cells().into_iter().collect();
        let mut cell_of_row = vec![0usize; data.n()];
        for (c, (_, rows)) in cells.iter().enumerate() {
            for &i in rows {
                cell_of_row[i] = c;
            }
        }
        let treated_rows = data.arm_rows(opts.arm);
        let control_rows = data.control_rows();
        if treated_rows.is_empty() || control_rows.is_empty() {
            return Err(Error::DegenerateDesign("empty arm in joint GMM".into()));
        }
        if !opts.split_tau && data.n_arms() > 1 {
            return Err(Error::Validation(
                "the single-moment ALTE variant requires a single arm".into(),
            ));
        }
        let mut treated = vec![false; data.n()];
        let mut control = vec![false; data.n()];
        for &i in &treated_rows {
            treated[i] = true;
        }
        for &i in &control_rows {
            control[i] = true;
        }
        let p_hat =
            treated_rows.len() as f64 / (treated_rows.len() + control_rows.len()) as f64;

        let free_measures: Vec<usize> = if opts.fixed_lambda.is_some() {
            Vec::new()
        } else {
            (0..j).filter(|&m| m != opts.reference).collect()
        };
        let mut lambda_instruments = Vec::new();
        for &m in &free_measures {
            lambda_instruments.push((m, DVector::from_element(data.n(), 1.0)));
            if opts.roster.treatments {
                for t in 0..data.n_arms() {
                    lambda_instruments.push((m, data.treatment(t)));
                }
            }
            if opts.roster.other_measures {
                for k in 0..j {
                    if k != m && k != opts.reference {
                        lambda_instruments.push((m, data.outcome(k)));
                    }
                }
            }
            if opts.roster.covariates {
                for p in 0..data.n_covariates() {
                    lambda_instruments.push((m, data.covariate(p)));
                }
            }
        }
        Ok(Self {
            data,
            reference: opts.reference,
            arm: opts.arm,
            cells,
            cell_of_row,
            treated,
            control,
            p_hat,
            lambda_instruments,
            free_measures,
            fixed_lambda: opts.fixed_lambda.clone(),
            weight_kind: opts.weight_kind,
            split_tau: opts.split_tau,
            j,
            n: data.n(),
        })
    }

    fn n_params(&self) -> usize {
        self.cells.len() * self.j
            + 2 * self.free_measures.len()
            + 1
            + self.j
            + if self.split_tau { 2 } else { 1 }
    }

    fn n_moments(&self) -> usize {
        self.cells.len() * self.j
            + self.lambda_instruments.len()
            + 1
            + self.j
            + if self.split_tau { 2 } else { 1 }
    }

    // parameter layout offsets
    fn off_alpha(&self) -> usize {
        self.cells.len() * self.j
    }
    fn off_psi(&self) -> usize {
        self.off_alpha() + 2 * self.free_measures.len()
    }
    fn off_sigma(&self) -> usize {
        self.off_psi() + 1
    }
    fn off_mu(&self) -> usize {
        self.off_sigma() + self.j
    }

    fn lambda_of(&self, theta: &DVector<f64>) -> Vec<f64> {
        if let Some(fixed) = &self.fixed_lambda {
            return fixed.clone();
        }
        let mut lam = vec![1.0; self.j];
        for (b, &m) in self.free_measures.iter().enumerate() {
            lam[m] = theta[self.off_alpha() + 2 * b + 1];
        }
        lam
    }

    fn omega_of(&self, theta: &DVector<f64>) -> Vec<f64> {
        match self.weight_kind {
            WeightKind::Equal => vec![1.0 / self.j as f64; self.j],
            _ => {
                let lam = self.lambda_of(theta);
                let prec: Vec<f64> = (0..self.j)
                    .map(|m| {
                        let s2 = theta[self.off_sigma() + m].max(1e-12);
                        lam[m] * lam[m] / s2
                    })
                    .collect();
                let total: f64 = prec.iter().sum();
                prec.into_iter().map(|p| p / total).collect()
            }
        }
    }

    /// Per-unit moment vector written into `g`; `lam`, `omega`, and `grand`
    /// are precomputed per theta.
    #[allow(clippy::too_many_arguments)]
    fn g_unit(
        &self,
        i: usize,
        theta: &DVector<f64>,
        lam: &[f64],
        omega: &[f64],
        grand: f64,
        g: &mut DVector<f64>,
    ) {
        let data = self.data;
        let j = self.j;
        let cell = self.cell_of_row[i];
        let mut idx = 0;
        // cell means
        for c in 0..self.cells.len() {
            for m in 0..j {
                g[idx] = if c == cell {
                    data.outcomes()[(i, m)] - theta[c * j + m]
                } else {
                    0.0
                };
                idx += 1;
            }
        }
        // lambda IV block
        let y_ref = data.outcomes()[(i, self.reference)];
        for (b, &m) in self.free_measures.iter().enumerate() {
            let alpha = theta[self.off_alpha() + 2 * b];
            let lam_m = theta[self.off_alpha() + 2 * b + 1];
            let e = data.outcomes()[(i, m)] - alpha - lam_m * y_ref;
            for (mm, w) in &self.lambda_instruments {
                if *mm == m {
                    g[idx] = e * w[i];
                    idx += 1;
                }
            }
        }
        // psi: average over pairs of scaled centered cross-products
        let psi = theta[self.off_psi()];
        let centered = |m: usize| data.outcomes()[(i, m)] - theta[cell * j + m];
        if j == 1 {
            g[idx] = centered(0) * centered(0) - psi - theta[self.off_sigma()];
            idx += 1;
        } else {
            let mut pair_sum = 0.0;
            let mut pairs = 0usize;
            for a in 0..j {
                let ca = centered(a);
                for b in (a + 1)..j {
                    pair_sum += ca * centered(b) / (lam[a] * lam[b]);
                    pairs += 1;
                }
            }
            g[idx] = pair_sum / pairs as f64 - psi;
            idx += 1;
        }
        // second moments
        for m in 0..j {
            let c = centered(m);
            g[idx] = c * c - lam[m] * lam[m] * psi - theta[self.off_sigma() + m];
            idx += 1;
        }
        // ALTE block
        let mut index = 0.0;
        for m in 0..j {
            index += omega[m] * data.outcomes()[(i, m)] / lam[m];
        }
        if self.split_tau {
            g[idx] = if self.treated[i] {
                index - theta[self.off_mu()]
            } else {
                0.0
            };
            g[idx + 1] = if self.control[i] {
                index - theta[self.off_mu() + 1]
            } else {
                0.0
            };
        } else {
            let zi = if self.treated[i] { 1.0 } else { 0.0 };
            let ipw = zi / self.p_hat - (1.0 - zi) / (1.0 - self.p_hat);
            g[idx] = ipw * (index - grand) - theta[self.off_mu()];
        }
    }

    /// Grand mean of the index implied by the cell-mean parameters; centers
    /// the single-moment ALTE variant so its sandwich matches the split form.
    fn grand_index(&self, theta: &DVector<f64>, lam: &[f64], omega: &[f64]) -> f64 {
        if self.split_tau {
            return 0.0;
        }
        let j = self.j;
        let mut grand = 0.0;
        for (c, (_, rows)) in self.cells.iter().enumerate() {
            let share = rows.len() as f64 / self.n as f64;
            let mut cell_index = 0.0;
            for m in 0..j {
                cell_index += omega[m] * theta[c * j + m] / lam[m];
            }
            grand += share * cell_index;
        }
        grand
    }

    fn g_bar(&self, theta: &DVector<f64>) -> DVector<f64> {
        let lam = self.lambda_of(theta);
        let omega = self.omega_of(theta);
        let grand = self.grand_index(theta, &lam, &omega);
        let mut acc = DVector::zeros(self.n_moments());
        let mut g = DVector::zeros(self.n_moments());
        for i in 0..self.n {
            self.g_unit(i, theta, &lam, &omega, grand, &mut g);
            acc += &g;
        }
        acc / self.n as f64
    }

    fn moment_outer(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let lam = self.lambda_of(theta);
        let omega = self.omega_of(theta);
        let grand = self.grand_index(theta, &lam, &omega);
        let m = self.n_moments();
        let mut s = DMatrix::zeros(m, m);
        let mut g = DVector::zeros(m);
        for i in 0..self.n {
            self.g_unit(i, theta, &lam, &omega, grand, &mut g);
            s.syger(1.0, &g, &g, 1.0);
        }
        for a in 0..m {
            for b in 0..a {
                s[(b, a)] = s[(a, b)];
            }
        }
        s / self.n as f64
    }

    /// Central-difference Jacobian of the averaged moments,
    /// step 1e-6 * (1 + |theta_k|).
    fn jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let m = self.n_moments();
        let p = self.n_params();
        let mut jac = DMatrix::zeros(m, p);
        let mut th = theta.clone();
        for k in 0..p {
            let h = 1e-6 * (1.0 + theta[k].abs());
            th[k] = theta[k] + h;
            let g_plus = self.g_bar(&th);
            th[k] = theta[k] - h;
            let g_minus = self.g_bar(&th);
            th[k] = theta[k];
            for r in 0..m {
                jac[(r, k)] = (g_plus[r] - g_minus[r]) / (2.0 * h);
            }
        }
        jac
    }

    fn start(&self, opts: &GmmOptions) -> Result<DVector<f64>> {
        let data = self.data;
        let j = self.j;
        let mut theta = DVector::zeros(self.n_params());
        for (c, (_, rows)) in self.cells.iter().enumerate() {
            for m in 0..j {
                let s: f64 = rows.iter().map(|&i| data.outcomes()[(i, m)]).sum();
                theta[c * j + m] = s / rows.len() as f64;
            }
        }
        let lambda_est = if let Some(fixed) = &opts.fixed_lambda {
            ScalingEstimate::known(fixed.clone(), opts.reference)
        } else {
            lambda_combined(data, opts.reference, opts.roster)?
        };
        let y_ref_mean = data.outcome(opts.reference).mean();
        for (b, &m) in self.free_measures.iter().enumerate() {
            let lam = lambda_est.lambda[m];
            theta[self.off_alpha() + 2 * b + 1] = lam;
            theta[self.off_alpha() + 2 * b] = data.outcome(m).mean() - lam * y_ref_mean;
        }
        let (psi0, sigma0) = if j >= 2 {
            let ev = estimate_error_variances(data, &lambda_est, true)?;
            (ev.psi, ev.sigma2)
        } else {
            let v = variance(data.outcome(0).as_slice());
            (v / 2.0, vec![v / 2.0])
        };
        theta[self.off_psi()] = psi0;
        for m in 0..j {
            theta[self.off_sigma() + m] = sigma0[m];
        }
        let omega = self.omega_of(&theta);
        let lam = self.lambda_of(&theta);
        let index_mean = |rows: &[usize]| -> f64 {
            rows.iter()
                .map(|&i| {
                    (0..j)
                        .map(|m| omega[m] * data.outcomes()[(i, m)] / lam[m])
                        .sum::<f64>()
                })
                .sum::<f64>()
                / rows.len() as f64
        };
        let m1 = index_mean(&data.arm_rows(self.arm));
        let m0 = index_mean(&data.control_rows());
        if self.split_tau {
            theta[self.off_mu()] = m1;
            theta[self.off_mu() + 1] = m0;
        } else {
            theta[self.off_mu()] = m1 - m0;
        }
        Ok(theta)
    }
}

/// One-step joint GMM (identity weighting) solved by damped Gauss-Newton,
/// with a heteroskedasticity-robust sandwich covariance computed from a
/// numerical moment Jacobian.
///
/// With a single arm and treatment-only instruments the moment system is
/// exactly identified and the point estimates coincide with the two-step
/// pipeline (ratio scaling, pooled variance components, weighted difference
/// in means).
pub fn gmm_joint(data: &ExperimentData, opts: &GmmOptions) -> Result<GmmJointFit> {
    let sys = GmmSystem::new(data, opts)?;
    let mut theta = sys.start(opts)?;
    let mut g = sys.g_bar(&theta);
    let mut obj = g.norm_squared();
    let scale = 1.0 + sys.moment_outer(&theta).diagonal().amax();
    let mut iterations = 0;
    while obj.sqrt() > opts.tolerance * scale && iterations < opts.max_iterations {
        let jac = sys.jacobian(&theta);
        // Gauss-Newton step: solve J d = -g in the least-squares sense
        let svd = jac.clone().svd(true, true);
        let step = svd
            .solve(&(-&g), 1e-12)
            .map_err(|e| Error::Singular(format!("GMM Jacobian solve: {e}")))?;
        let mut lam = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &theta + &step * lam;
            let g_cand = sys.g_bar(&cand);
            let obj_cand = g_cand.norm_squared();
            if obj_cand < obj * (1.0 - 1e-4 * lam) || obj_cand < obj {
                theta = cand;
                g = g_cand;
                obj = obj_cand;
                accepted = true;
                break;
            }
            lam *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break;
        }
    }
    let residual = obj.sqrt();
    if !residual.is_finite() {
        return Err(Error::NonConvergence {
            iters: iterations,
            residual,
        });
    }

    // sandwich: (G'G)^-1 G'SG (G'G)^-1 / n   (identity weighting)
    let jac = sys.jacobian(&theta);
    let s = sys.moment_outer(&theta);
    let gtg = jac.transpose() * &jac;
    let bread = gtg
        .try_inverse()
        .ok_or_else(|| Error::Singular("G'WG in joint GMM".into()))?;
    let meat = jac.transpose() * &s * &jac;
    let cov = (&bread * meat * &bread) / sys.n as f64;

    let lambda = sys.lambda_of(&theta);
    let mut lambda_se = vec![0.0; sys.j];
    for (b, &m) in sys.free_measures.iter().enumerate() {
        lambda_se[m] = cov[(sys.off_alpha() + 2 * b + 1, sys.off_alpha() + 2 * b + 1)]
            .max(0.0)
            .sqrt();
    }
    let sigma2: Vec<f64> = (0..sys.j).map(|m| theta[sys.off_sigma() + m]).collect();
    let psi = theta[sys.off_psi()];
    let omega = sys.omega_of(&theta);

    let (tau, var_tau) = if sys.split_tau {
        let (i1, i0) = (sys.off_mu(), sys.off_mu() + 1);
        (
            theta[i1] - theta[i0],
            cov[(i1, i1)] + cov[(i0, i0)] - 2.0 * cov[(i1, i0)],
        )
    } else {
        (theta[sys.off_mu()], cov[(sys.off_mu(), sys.off_mu())])
    };
    let se = var_tau.max(0.0).sqrt();

    let mut warnings = Vec::new();
    if residual > opts.tolerance * scale * 10.0 && sys.n_moments() == sys.n_params() {
        warnings.push(format!(
            "exactly identified system left residual norm {residual:.3e}"
        ));
    }
    for (m, s2) in sigma2.iter().enumerate() {
        if *s2 < 0.0 {
            warnings.push(format!("Heywood case: joint sigma2[{m}] = {s2:.4e}"));
        }
    }

    let alte = AlteResult {
        tau_hat: tau,
        se,
        ci95: analytic_ci(tau, se),
        variance_method: VarianceMethod::GmmSandwich,
        estimator: EstimatorKind::GmmJoint,
        arm: sys.arm,
        arm_label: data.treatment_labels()[sys.arm].clone(),
        n_treated: data.arm_rows(sys.arm).len(),
        n_control: data.control_rows().len(),
        weights: omega.clone(),
        lambda: lambda.clone(),
        warnings,
    };
    Ok(GmmJointFit {
        alte,
        lambda,
        lambda_se,
        sigma2,
        psi,
        omega,
        n_moments: sys.n_moments(),
        n_params: sys.n_params(),
        iterations,
        residual_norm: residual,
    })
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

/// Percentile bootstrap over unit resamples.
#[derive(Debug, Clone, Serialize)]
pub struct BootstrapSummary {
    pub se: f64,
    pub ci95: (f64, f64),
    pub draws: usize,
    pub failures: usize,
    pub estimates: Vec<f64>,
}

/// Resamples rows with replacement; per-draw seeds are `hash(seed, draw)`.
pub fn bootstrap<F>(
    data: &ExperimentData,
    draws: usize,
    seed: u64,
    estimator: F,
) -> Result<BootstrapSummary>
where
    F: Fn(&ExperimentData) -> Result<f64> + Sync,
{
    use rand::Rng;
    use rand::SeedableRng;
    let n = data.n();
    let mut estimates = Vec::with_capacity(draws);
    let mut failures = 0usize;
    for b in 0..draws {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seeds::derive(seed, b as u64));
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        match data.subset(&rows).and_then(|d| estimator(&d)) {
            Ok(v) if v.is_finite() => estimates.push(v),
            _ => failures += 1,
        }
    }
    if estimates.is_empty() {
        return Err(Error::Validation(
            "all bootstrap draws failed to produce an estimate".into(),
        ));
    }
    let se = variance(&estimates).sqrt();
    let mut sorted = estimates.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| {
        let idx = ((sorted.len() as f64 - 1.0) * p).round() as usize;
        sorted[idx]
    };
    Ok(BootstrapSummary {
        se,
        ci95: (q(0.025), q(0.975)),
        draws,
        failures,
        estimates,
    })
}

impl ExperimentData {
    /// Row-subset copy (used by the bootstrap and group fits); revalidates the
    /// design so degenerate resamples surface as errors.
    pub fn subset(&self, rows: &[usize]) -> Result<ExperimentData> {
        let pick = |col: &DVector<f64>| rows.iter().map(|&i| col[i]).collect::<Vec<f64>>();
        let treatments = (0..self.n_arms())
            .map(|t| (self.treatment_labels()[t].clone(), pick(&self.treatment(t))))
            .collect();
        let outcomes = (0..self.n_outcomes())
            .map(|j| (self.outcome_labels()[j].clone(), pick(&self.outcome(j))))
            .collect();
        let covariates = (0..self.n_covariates())
            .map(|p| (self.covariate_labels()[p].clone(), pick(&self.covariate(p))))
            .collect();
        ExperimentData::from_columns(treatments, outcomes, covariates, self.dropped_rows())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn toy(z: Vec<f64>, ys: Vec<Vec<f64>>) -> ExperimentData {
        let outcomes = ys
            .into_iter()
            .enumerate()
            .map(|(j, col)| (format!("y{}", j + 1), col))
            .collect();
        ExperimentData::from_columns(vec![("z".into(), z)], outcomes, vec![], 0).unwrap()
    }

    /// Balanced two-arm data with eta = tau * z + noise and J noisy measures.
    fn simulate(
        n: usize,
        tau: f64,
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
        let eta: Vec<f64> = z.iter().map(|&zi| tau * zi + std.sample(&mut rng)).collect();
        let ys: Vec<Vec<f64>> = lambda
            .iter()
            .zip(err_sd)
            .map(|(&l, &s)| {
                let noise = Normal::new(0.0, s).unwrap();
                eta.iter().map(|&e| l * e + noise.sample(&mut rng)).collect()
            })
            .collect();
        toy(z, ys)
    }

    #[test]
    fn dim_perfect_separation_zero_se() {
        let z = vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let data = toy(z.clone(), vec![vec![0.1, 0.2, 1.3, 1.4, 0.3, 1.2]]);
        let wsi = WsiOutcome {
            values: z,
            scheme: WeightScheme::equal(1),
            lambda: vec![1.0],
            reference: 0,
        };
        let r = dim_wsi(&wsi, &data, 0).unwrap();
        assert_relative_eq!(r.tau_hat, 1.0, epsilon = 1e-12);
        assert_relative_eq!(r.se, 0.0, epsilon = 1e-12);
        assert_eq!(r.ci95, (1.0, 1.0));
    }

    #[test]
    fn dim_multi_arm_sets_warning() {
        let data = ExperimentData::from_columns(
            vec![
                ("z1".into(), vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0]),
                ("z2".into(), vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]),
            ],
            vec![("y".into(), vec![1.2, 0.8, 0.1, 1.4, 0.7, 0.2, 1.1, 0.9])],
            vec![],
            0,
        )
        .unwrap();
        let wsi = WsiOutcome {
            values: data.outcome(0).as_slice().to_vec(),
            scheme: WeightScheme::equal(1),
            lambda: vec![1.0],
            reference: 0,
        };
        let r = dim_wsi(&wsi, &data, 0).unwrap();
        assert!(!r.warnings.is_empty());
        assert_eq!(r.n_control, 2);
    }

    #[test]
    fn stacked_equals_dim_with_uniform_weights() {
        let data = simulate(80, 1.0, &[1.0, 0.7, 1.3], &[0.5, 0.8, 0.3], 9);
        let lambda = ScalingEstimate::known(vec![1.0, 0.7, 1.3], 0);
        let scheme = WeightScheme::equal(3);
        let wsi = crate::index::build_wsi(&data, &lambda, &scheme).unwrap();
        let d = dim_wsi(&wsi, &data, 0).unwrap();
        let s = stacked_regression(&data, &lambda, &scheme, 0).unwrap();
        assert_relative_eq!(s.tau_hat, d.tau_hat, epsilon = 1e-10);
    }

    #[test]
    fn stacked_equals_weighted_dim_with_optimal_weights() {
        let data = simulate(80, 1.0, &[1.0, 0.7, 1.3], &[0.5, 0.8, 0.3], 11);
        let lambda = ScalingEstimate::known(vec![1.0, 0.7, 1.3], 0);
        let scheme = WeightScheme::user(vec![0.6, 0.3, 0.1]).unwrap();
        let wsi = crate::index::build_wsi(&data, &lambda, &scheme).unwrap();
        let d = dim_wsi(&wsi, &data, 0).unwrap();
        let s = stacked_regression(&data, &lambda, &scheme, 0).unwrap();
        assert_relative_eq!(s.tau_hat, d.tau_hat, epsilon = 1e-10);
    }

    #[test]
    fn single_outcome_stacked_is_plain_ols_slope() {
        let data = simulate(60, 0.8, &[1.0], &[0.6], 13);
        let lambda = ScalingEstimate::identity(1, 0);
        let s = stacked_regression(&data, &lambda, &WeightScheme::equal(1), 0).unwrap();
        // OLS slope of y on z equals DIM for binary z
        let z = data.treatment(0);
        let y = data.outcome(0);
        let slope = crate::linreg::covariance(z.as_slice(), y.as_slice())
            / crate::linreg::variance(z.as_slice());
        assert_relative_eq!(s.tau_hat, slope, epsilon = 1e-10);
    }

    #[test]
    fn ols_adjusted_single_arm_no_covariates_matches_dim() {
        let data = simulate(100, 1.0, &[1.0, 0.9], &[0.5, 0.5], 17);
        let lambda = ScalingEstimate::known(vec![1.0, 0.9], 0);
        let scheme = WeightScheme::equal(2);
        let wsi = crate::index::build_wsi(&data, &lambda, &scheme).unwrap();
        let d = dim_wsi(&wsi, &data, 0).unwrap();
        let o = &ols_adjusted(&data, &wsi, &[0], &[]).unwrap()[0];
        assert_relative_eq!(o.tau_hat, d.tau_hat, epsilon = 1e-10);
    }

    #[test]
    fn ols_adjusted_rank_deficiency_names_columns() {
        let y = vec![0.3, 1.2, 0.4, 1.5, 0.1, 1.1, 0.2, 1.3];
        let z = vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let data = ExperimentData::from_columns(
            vec![("z".into(), z.clone())],
            vec![("y".into(), y.clone())],
            vec![("x".into(), z.clone())], // collinear with z
            0,
        )
        .unwrap();
        let wsi = WsiOutcome {
            values: y,
            scheme: WeightScheme::equal(1),
            lambda: vec![1.0],
            reference: 0,
        };
        let err = ols_adjusted(&data, &wsi, &[0], &[0]).unwrap_err();
        assert!(matches!(err, Error::RankDeficient(_)));
    }

    #[test]
    fn gmm_joint_matches_two_step_pipeline_exactly_identified() {
        let data = simulate(400, 1.0, &[1.0, 0.8, 1.2], &[0.6, 0.9, 0.4], 21);
        let opts = GmmOptions::default();
        let fit = gmm_joint(&data, &opts).unwrap();
        // two-step pipeline with the same conventions
        let lam = lambda_combined(&data, 0, InstrumentRoster::treatments_only()).unwrap();
        let ev = estimate_error_variances(&data, &lam, true).unwrap();
        let scheme =
            crate::index::make_weights(WeightKind::InverseVariance, &lam, Some(&ev), None, None)
                .unwrap();
        let wsi = crate::index::build_wsi(&data, &lam, &scheme).unwrap();
        let d = dim_wsi(&wsi, &data, 0).unwrap();
        assert_relative_eq!(fit.alte.tau_hat, d.tau_hat, epsilon = 1e-6);
        // the moment system averages over n while the pipeline covariances
        // use n-1; the ratio cancels in the weights and in tau
        let adj = (data.n() as f64 - 1.0) / data.n() as f64;
        for j in 0..3 {
            assert_relative_eq!(fit.lambda[j], lam.lambda[j], epsilon = 1e-6);
            assert_relative_eq!(fit.sigma2[j], ev.sigma2[j] * adj, epsilon = 1e-6);
        }
        assert_relative_eq!(fit.psi, ev.psi * adj, epsilon = 1e-6);
        assert_eq!(fit.n_moments, fit.n_params);
    }

    #[test]
    fn gmm_split_and_single_tau_variants_agree() {
        let data = simulate(300, 0.7, &[1.0, 1.1], &[0.5, 0.7], 23);
        let split = gmm_joint(&data, &GmmOptions::default()).unwrap();
        let single = gmm_joint(
            &data,
            &GmmOptions {
                split_tau: false,
                ..GmmOptions::default()
            },
        )
        .unwrap();
        assert_relative_eq!(split.alte.tau_hat, single.alte.tau_hat, epsilon = 1e-6);
        assert_relative_eq!(split.alte.se, single.alte.se, epsilon = 1e-6);
    }

    #[test]
    fn gmm_known_lambda_se_close_to_neyman() {
        let data = simulate(10_000, 1.0, &[1.0, 1.0], &[1.0, 1.0], 29);
        let lambda = ScalingEstimate::known(vec![1.0, 1.0], 0);
        let fit = gmm_joint(
            &data,
            &GmmOptions {
                fixed_lambda: Some(vec![1.0, 1.0]),
                weight_kind: WeightKind::Equal,
                ..GmmOptions::default()
            },
        )
        .unwrap();
        let scheme = WeightScheme::equal(2);
        let wsi = crate::index::build_wsi(&data, &lambda, &scheme).unwrap();
        let d = dim_wsi(&wsi, &data, 0).unwrap();
        assert_relative_eq!(fit.alte.tau_hat, d.tau_hat, epsilon = 1e-8);
        assert!(
            (fit.alte.se - d.se).abs() / d.se < 0.01,
            "gmm se {} vs neyman {}",
            fit.alte.se,
            d.se
        );
    }

    #[test]
    fn bootstrap_reproducible_and_reasonable() {
        let data = simulate(200, 1.0, &[1.0, 1.0], &[0.8, 0.8], 31);
        let lambda = ScalingEstimate::known(vec![1.0, 1.0], 0);
        let scheme = WeightScheme::equal(2);
        let f = |d: &ExperimentData| {
            let wsi = crate::index::build_wsi(d, &lambda, &scheme)?;
            Ok(dim_wsi(&wsi, d, 0)?.tau_hat)
        };
        let b1 = bootstrap(&data, 200, 42, f).unwrap();
        let b2 = bootstrap(&data, 200, 42, f).unwrap();
        assert_eq!(b1.estimates, b2.estimates);
        let wsi = crate::index::build_wsi(&data, &lambda, &scheme).unwrap();
        let d = dim_wsi(&wsi, &data, 0).unwrap();
        assert!((b1.se - d.se).abs() / d.se < 0.35);
        assert!(b1.ci95.0 < d.tau_hat && d.tau_hat < b1.ci95.1);
    }
}
