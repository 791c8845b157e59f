//! Identification of the measurement scaling parameters.
//!
//! Each non-reference measure j is linked to the reference measure by
//! `Y_j = alpha_j + lambda_j * Y_ref + e_j`, where the composite error is
//! correlated with `Y_ref`. The scaling parameter is identified by
//! instrumental variables: the randomized treatment arms, the other
//! measures, or pre-treatment covariates. Single-instrument estimates are
//! covariance ratios; the combined estimator stacks all instrument moment
//! conditions in a two-step GMM and reports the Hansen J overidentification
//! statistic.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dataset::ExperimentData;
use crate::error::{Error, Result};
use crate::linreg::{chi2_sf, covariance, two_sls, variance};

/// Default relevance tolerance on the standardized first-stage covariance.
pub const WEAK_INSTRUMENT_TOL: f64 = 1e-6;

/// Which instruments enter the stacked moment conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct InstrumentRoster {
    pub treatments: bool,
    pub other_measures: bool,
    pub covariates: bool,
}

impl Default for InstrumentRoster {
    fn default() -> Self {
        Self {
            treatments: true,
            other_measures: true,
            covariates: false,
        }
    }
}

impl InstrumentRoster {
    pub fn treatments_only() -> Self {
        Self {
            treatments: true,
            other_measures: false,
            covariates: false,
        }
    }

    pub fn with_covariates(mut self) -> Self {
        self.covariates = true;
        self
    }

    pub fn is_empty(&self) -> bool {
        !self.treatments && !self.other_measures && !self.covariates
    }
}

/// Per-instrument single-IV estimate of one scaling parameter.
#[derive(Debug, Clone, Serialize)]
pub struct PerInstrumentLambda {
    pub measure: usize,
    pub instrument: String,
    pub estimate: f64,
}

/// Hansen J overidentification statistic.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct OveridStat {
    pub j_stat: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Estimated scaling vector with the chosen normalization.
#[derive(Debug, Clone, Serialize)]
pub struct ScalingEstimate {
    /// Index of the measure that sets the scale; `lambda[reference] == 1`.
    pub reference: usize,
    pub lambda: Vec<f64>,
    /// Standard errors; zero at the reference entry.
    pub se: Vec<f64>,
    pub per_instrument: Vec<PerInstrumentLambda>,
    /// Present when the system is overidentified (df > 0 reports a real test;
    /// df = 0 is recorded with J ~ 0).
    pub overid_stat: Option<OveridStat>,
    /// First-stage F statistics keyed by measure index.
    pub first_stage_f: Vec<(usize, f64)>,
    pub instruments: InstrumentRoster,
    pub warnings: Vec<String>,
}

impl ScalingEstimate {
    /// Wraps a known scaling vector (no estimation uncertainty).
    pub fn known(lambda: Vec<f64>, reference: usize) -> Self {
        let j = lambda.len();
        Self {
            reference,
            lambda,
            se: vec![0.0; j],
            per_instrument: Vec::new(),
            overid_stat: None,
            first_stage_f: Vec::new(),
            instruments: InstrumentRoster::treatments_only(),
            warnings: Vec::new(),
        }
    }

    /// Unit scaling for all measures.
    pub fn identity(n_outcomes: usize, reference: usize) -> Self {
        Self::known(vec![1.0; n_outcomes], reference)
    }
}

fn check_relevance(instrument: &[f64], y_ref: &[f64], context: &str, f_stat: f64) -> Result<()> {
    let c = covariance(instrument, y_ref);
    let scale = variance(instrument).sqrt() * variance(y_ref).sqrt();
    if c.abs() < WEAK_INSTRUMENT_TOL * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::WeakInstrument {
            context: context.to_string(),
            f_stat,
        });
    }
    Ok(())
}

fn first_stage_f_single(z: &[f64], y_ref: &[f64]) -> f64 {
    // F = t^2 of the slope in y_ref ~ 1 + z
    let n = z.len() as f64;
    let (vz, c) = (variance(z), covariance(z, y_ref));
    if vz <= 0.0 {
        return 0.0;
    }
    let beta = c / vz;
    let resid_var = variance(y_ref) - beta * c;
    let se2 = resid_var.max(0.0) / (vz * (n - 1.0)) * (n - 1.0) / (n - 2.0);
    if se2 <= 0.0 {
        return f64::INFINITY;
    }
    beta * beta / se2
}

/// Scaling of measure `j` identified by the treatment arms (Proposition-1
/// route (1)).
///
/// With a single arm and no requested covariates, this is the covariance
/// ratio `Cov(Z, Y_j) / Cov(Z, Y_ref)`. With several arms or covariates it is
/// the 2SLS coefficient of `Y_ref` in the regression of `Y_j` on `Y_ref`,
/// instrumented by all arms (plus covariates when `use_covariates`).
pub fn lambda_treatment_iv(
    data: &ExperimentData,
    j: usize,
    reference: usize,
) -> Result<f64> {
    lambda_treatment_iv_opts(data, j, reference, false)
}

pub fn lambda_treatment_iv_opts(
    data: &ExperimentData,
    j: usize,
    reference: usize,
    use_covariates: bool,
) -> Result<f64> {
    if j == reference {
        return Ok(1.0);
    }
    let y_j = data.outcome(j);
    let y_ref = data.outcome(reference);
    let n_inst = data.n_arms() + if use_covariates { data.n_covariates() } else { 0 };
    if n_inst == 1 {
        let z = data.treatment(0);
        let f = first_stage_f_single(z.as_slice(), y_ref.as_slice());
        check_relevance(z.as_slice(), y_ref.as_slice(), &format!("measure {j}"), f)?;
        return Ok(covariance(z.as_slice(), y_j.as_slice())
            / covariance(z.as_slice(), y_ref.as_slice()));
    }
    let mut instruments: Vec<DVector<f64>> = (0..data.n_arms()).map(|t| data.treatment(t)).collect();
    if use_covariates {
        for p in 0..data.n_covariates() {
            instruments.push(data.covariate(p));
        }
    }
    let relevant = instruments.iter().any(|w| {
        let c = covariance(w.as_slice(), y_ref.as_slice());
        let scale = variance(w.as_slice()).sqrt() * variance(y_ref.as_slice()).sqrt();
        c.abs() >= WEAK_INSTRUMENT_TOL * scale.max(f64::MIN_POSITIVE)
    });
    let fit = two_sls(&y_j, &y_ref, &instruments, &[])?;
    if !relevant {
        return Err(Error::WeakInstrument {
            context: format!("measure {j}"),
            f_stat: fit.first_stage_f,
        });
    }
    Ok(fit.coefficients[1])
}

/// Scaling of measure `j` identified by another measure `k` (Proposition-1
/// route (2)): `Cov(Y_k, Y_j) / Cov(Y_k, Y_ref)`.
pub fn lambda_measure_iv(
    data: &ExperimentData,
    j: usize,
    k: usize,
    reference: usize,
) -> Result<f64> {
    if k == j || k == reference {
        return Err(Error::IndexCollision(format!(
            "instrument measure {k} must differ from target {j} and reference {reference}"
        )));
    }
    if data.n_outcomes() < 3 {
        return Err(Error::Validation(
            "measure-as-instrument identification needs J >= 3".into(),
        ));
    }
    let y_j = data.outcome(j);
    let y_k = data.outcome(k);
    let y_ref = data.outcome(reference);
    let f = first_stage_f_single(y_k.as_slice(), y_ref.as_slice());
    check_relevance(
        y_k.as_slice(),
        y_ref.as_slice(),
        &format!("measure {j} instrumented by measure {k}"),
        f,
    )?;
    Ok(covariance(y_k.as_slice(), y_j.as_slice())
        / covariance(y_k.as_slice(), y_ref.as_slice()))
}

struct MomentBlocks {
    /// Mean of the stacked per-unit moment "constant part".
    c_bar: DVector<f64>,
    /// Mean of the stacked Jacobian blocks (moments x params).
    d_bar: DMatrix<f64>,
    /// Per-unit instrument values, one row per unit, one column per moment,
    /// paired with the (measure, y_ref, y_j) layout needed to rebuild g_i.
    instruments: Vec<(usize, DVector<f64>, String)>,
    measures: Vec<usize>,
}

fn build_blocks(
    data: &ExperimentData,
    reference: usize,
    roster: &InstrumentRoster,
) -> Result<MomentBlocks> {
    let n = data.n();
    let mut instruments: Vec<(usize, DVector<f64>, String)> = Vec::new();
    let measures: Vec<usize> = (0..data.n_outcomes()).filter(|&j| j != reference).collect();
    for &j in &measures {
        // intercept moment always present
        instruments.push((j, DVector::from_element(n, 1.0), "const".into()));
        if roster.treatments {
            for t in 0..data.n_arms() {
                instruments.push((j, data.treatment(t), data.treatment_labels()[t].clone()));
            }
        }
        if roster.other_measures {
            for k in 0..data.n_outcomes() {
                if k != j && k != reference {
                    instruments.push((j, data.outcome(k), data.outcome_labels()[k].clone()));
                }
            }
        }
        if roster.covariates {
            for p in 0..data.n_covariates() {
                instruments.push((j, data.covariate(p), data.covariate_labels()[p].clone()));
            }
        }
    }
    let y_ref = data.outcome(reference);
    let n_m = instruments.len();
    let n_p = 2 * measures.len();
    let mut c_bar = DVector::zeros(n_m);
    let mut d_bar = DMatrix::zeros(n_m, n_p);
    for (m, (j, w, _)) in instruments.iter().enumerate() {
        let y_j = data.outcome(*j);
        let block = measures.iter().position(|&x| x == *j).unwrap();
        for i in 0..n {
            c_bar[m] += y_j[i] * w[i];
            d_bar[(m, 2 * block)] += w[i];
            d_bar[(m, 2 * block + 1)] += y_ref[i] * w[i];
        }
    }
    c_bar /= n as f64;
    d_bar /= n as f64;
    Ok(MomentBlocks {
        c_bar,
        d_bar,
        instruments,
        measures,
    })
}

fn moment_outer(
    data: &ExperimentData,
    reference: usize,
    blocks: &MomentBlocks,
    theta: &DVector<f64>,
) -> DMatrix<f64> {
    let n = data.n();
    let n_m = blocks.instruments.len();
    let y_ref = data.outcome(reference);
    let mut s = DMatrix::zeros(n_m, n_m);
    let mut g_i = DVector::zeros(n_m);
    for i in 0..n {
        for (m, (j, w, _)) in blocks.instruments.iter().enumerate() {
            let block = blocks.measures.iter().position(|&x| x == *j).unwrap();
            let e = data.outcomes()[(i, *j)] - theta[2 * block] - theta[2 * block + 1] * y_ref[i];
            g_i[m] = e * w[i];
        }
        s += &g_i * g_i.transpose();
    }
    s / n as f64
}

fn solve_linear_gmm(
    d: &DMatrix<f64>,
    c: &DVector<f64>,
    w: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let dtwd = d.transpose() * w * d;
    let rhs = d.transpose() * w * c;
    dtwd.clone()
        .try_inverse()
        .map(|inv| inv * rhs)
        .ok_or_else(|| Error::Singular("D'WD in stacked IV system".into()))
}

/// Combined two-step GMM over all stacked IV moment conditions
/// `E[(Y_j - alpha_j - lambda_j Y_ref) * W] = 0`.
///
/// First step uses the identity weight; the second step weights by the
/// inverse of the heteroskedasticity-robust moment covariance, falling back
/// to identity (with a warning) when that matrix cannot be inverted.
pub fn lambda_combined(
    data: &ExperimentData,
    reference: usize,
    roster: InstrumentRoster,
) -> Result<ScalingEstimate> {
    if roster.is_empty() {
        return Err(Error::Validation("instrument roster is empty".into()));
    }
    if reference >= data.n_outcomes() {
        return Err(Error::Validation(format!(
            "reference index {reference} out of range"
        )));
    }
    let n = data.n() as f64;
    let mut warnings = Vec::new();
    let y_ref = data.outcome(reference);

    // relevance screen per measure: at least one roster instrument must
    // predict the reference measure
    let mut first_stage_f = Vec::new();
    for j in 0..data.n_outcomes() {
        if j == reference {
            continue;
        }
        let mut best = 0.0f64;
        let mut any_relevant = false;
        let mut check = |w: &[f64]| {
            let f = first_stage_f_single(w, y_ref.as_slice());
            best = best.max(f);
            let c = covariance(w, y_ref.as_slice());
            let scale = variance(w).sqrt() * variance(y_ref.as_slice()).sqrt();
            if c.abs() >= WEAK_INSTRUMENT_TOL * scale.max(f64::MIN_POSITIVE) {
                any_relevant = true;
            }
        };
        if roster.treatments {
            for t in 0..data.n_arms() {
                check(data.treatment(t).as_slice());
            }
        }
        if roster.other_measures {
            for k in 0..data.n_outcomes() {
                if k != j && k != reference {
                    check(data.outcome(k).as_slice());
                }
            }
        }
        if roster.covariates {
            for p in 0..data.n_covariates() {
                check(data.covariate(p).as_slice());
            }
        }
        if !any_relevant {
            return Err(Error::WeakInstrument {
                context: format!("measure {j}"),
                f_stat: best,
            });
        }
        first_stage_f.push((j, best));
    }

    let blocks = build_blocks(data, reference, &roster)?;
    let n_m = blocks.instruments.len();
    let n_p = 2 * blocks.measures.len();

    // step 1: identity weighting
    let identity = DMatrix::<f64>::identity(n_m, n_m);
    let theta1 = solve_linear_gmm(&blocks.d_bar, &blocks.c_bar, &identity)?;
    // step 2: HC-robust moment covariance
    let s1 = moment_outer(data, reference, &blocks, &theta1);
    let (w2, efficient) = match s1.clone().try_inverse() {
        Some(inv) if inv.iter().all(|v| v.is_finite()) => (inv, true),
        _ => {
            warnings.push("singular moment covariance; identity weighting used".to_string());
            (identity.clone(), false)
        }
    };
    let theta = solve_linear_gmm(&blocks.d_bar, &blocks.c_bar, &w2)?;

    // sandwich covariance (G'WG)^-1 G'WSWG (G'WG)^-1 / n with G = -d_bar
    let s2 = moment_outer(data, reference, &blocks, &theta);
    let dtwd = blocks.d_bar.transpose() * &w2 * &blocks.d_bar;
    let bread = dtwd
        .try_inverse()
        .ok_or_else(|| Error::Singular("D'WD in stacked IV system".into()))?;
    let meat = blocks.d_bar.transpose() * &w2 * &s2 * &w2 * &blocks.d_bar;
    let cov_theta = (&bread * meat * &bread) / n;

    // Hansen J at the step-2 estimate with the step-2 weight
    let g_bar = &blocks.c_bar - &blocks.d_bar * &theta;
    let j_stat = n * (g_bar.transpose() * &w2 * &g_bar)[(0, 0)];
    let df = n_m - n_p;
    let overid_stat = Some(OveridStat {
        j_stat: if efficient { j_stat } else { f64::NAN },
        df,
        p_value: if df > 0 && efficient {
            chi2_sf(j_stat, df as f64)
        } else {
            1.0
        },
    });

    let mut lambda = vec![0.0; data.n_outcomes()];
    let mut se = vec![0.0; data.n_outcomes()];
    lambda[reference] = 1.0;
    for (b, &j) in blocks.measures.iter().enumerate() {
        lambda[j] = theta[2 * b + 1];
        se[j] = cov_theta[(2 * b + 1, 2 * b + 1)].max(0.0).sqrt();
        if !lambda[j].is_finite() || lambda[j] == 0.0 {
            return Err(Error::ZeroScale(format!(
                "estimated lambda for measure {j} is {}",
                lambda[j]
            )));
        }
    }

    // per-instrument single-IV table
    let mut per_instrument = Vec::new();
    for &j in &blocks.measures {
        if roster.treatments {
            if let Ok(v) = lambda_treatment_iv(data, j, reference) {
                per_instrument.push(PerInstrumentLambda {
                    measure: j,
                    instrument: "treatments".into(),
                    estimate: v,
                });
            }
        }
        if roster.other_measures {
            for k in 0..data.n_outcomes() {
                if k != j && k != reference {
                    if let Ok(v) = lambda_measure_iv(data, j, k, reference) {
                        per_instrument.push(PerInstrumentLambda {
                            measure: j,
                            instrument: data.outcome_labels()[k].clone(),
                            estimate: v,
                        });
                    }
                }
            }
        }
    }

    Ok(ScalingEstimate {
        reference,
        lambda,
        se,
        per_instrument,
        overid_stat,
        first_stage_f,
        instruments: roster,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
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
    fn treatment_iv_hand_computed_ratio() {
        let data = toy(
            vec![0.0, 0.0, 1.0, 1.0],
            vec![vec![0.0, 1.0, 2.0, 3.0], vec![0.0, 2.0, 4.0, 6.0]],
        );
        let l = lambda_treatment_iv(&data, 1, 0).unwrap();
        assert_relative_eq!(l, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn treatment_iv_identity_for_same_measure() {
        let data = toy(
            vec![0.0, 1.0, 0.0, 1.0],
            vec![
                vec![0.2, 1.4, 0.1, 1.6],
                vec![0.2, 1.4, 0.1, 1.6],
            ],
        );
        let l = lambda_treatment_iv(&data, 1, 0).unwrap();
        assert_relative_eq!(l, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn treatment_iv_equals_reduced_form_slope_ratio() {
        let data = toy(
            vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0],
            vec![
                vec![0.4, 1.1, 2.4, 3.0, 0.2, 2.8],
                vec![1.0, 0.7, 4.1, 5.2, 0.8, 4.4],
            ],
        );
        let l = lambda_treatment_iv(&data, 1, 0).unwrap();
        let z = data.treatment(0);
        let slope = |y: DVector<f64>| {
            covariance(z.as_slice(), y.as_slice()) / variance(z.as_slice())
        };
        let expect = slope(data.outcome(1)) / slope(data.outcome(0));
        assert_relative_eq!(l, expect, epsilon = 1e-10);
    }

    #[test]
    fn measure_iv_noiseless_measures_give_unity() {
        let eta = vec![0.3, -1.2, 0.8, 1.9, -0.4, 0.0, 2.2, -0.6];
        let z = vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let data = toy(z, vec![eta.clone(), eta.clone(), eta.clone()]);
        for (j, k) in [(1usize, 2usize), (2, 1)] {
            let l = lambda_measure_iv(&data, j, k, 0).unwrap();
            assert_relative_eq!(l, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn measure_iv_index_collision_rejected() {
        let eta = vec![0.3, -1.2, 0.8, 1.9, -0.4, 0.0, 2.2, -0.6];
        let z = vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let data = toy(z, vec![eta.clone(), eta.clone(), eta]);
        assert!(matches!(
            lambda_measure_iv(&data, 1, 1, 0),
            Err(Error::IndexCollision(_))
        ));
    }

    #[test]
    fn weak_instrument_detected() {
        // y_ref unrelated to z
        let data = toy(
            vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0],
            vec![
                vec![1.0, 2.0, 1.0, 2.0, 1.5, 1.5],
                vec![0.3, 0.9, 0.5, 0.1, 0.2, 0.8],
            ],
        );
        // make cov exactly 0: y_ref symmetric across arms
        let data = {
            let z = vec![0.0, 0.0, 1.0, 1.0];
            let y_ref = vec![1.0, 2.0, 1.0, 2.0];
            let y_j = vec![0.3, 0.9, 0.5, 0.1];
            drop(data);
            toy(z, vec![y_ref, y_j])
        };
        assert!(matches!(
            lambda_treatment_iv(&data, 1, 0),
            Err(Error::WeakInstrument { .. })
        ));
    }

    #[test]
    fn combined_exactly_identified_matches_ratio() {
        // two measures, treatment-only roster: exactly identified per equation
        let data = toy(
            vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0],
            vec![
                vec![0.4, 1.1, 2.4, 3.0, 0.2, 2.8],
                vec![1.0, 0.7, 4.1, 5.2, 0.8, 4.4],
            ],
        );
        let est = lambda_combined(&data, 0, InstrumentRoster::treatments_only()).unwrap();
        let ratio = lambda_treatment_iv(&data, 1, 0).unwrap();
        assert_relative_eq!(est.lambda[1], ratio, epsilon = 1e-10);
        assert_eq!(est.overid_stat.unwrap().df, 0);
        assert_relative_eq!(est.lambda[0], 1.0);
    }

    #[test]
    fn reference_change_rescales_exactly_identified() {
        let data = toy(
            vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0],
            vec![
                vec![0.4, 1.1, 2.4, 3.0, 0.2, 2.8, 3.3, 0.6],
                vec![1.0, 0.7, 4.1, 5.2, 0.8, 4.4, 5.5, 1.2],
                vec![0.1, 0.5, 1.4, 1.8, 0.0, 1.5, 1.9, 0.3],
            ],
        );
        let roster = InstrumentRoster::treatments_only();
        let a = lambda_combined(&data, 0, roster).unwrap();
        let b = lambda_combined(&data, 1, roster).unwrap();
        for j in 0..3 {
            assert_relative_eq!(b.lambda[j], a.lambda[j] / a.lambda[1], epsilon = 1e-8);
        }
    }

    #[test]
    fn empty_roster_rejected() {
        let data = toy(
            vec![0.0, 0.0, 1.0, 1.0],
            vec![vec![0.0, 1.0, 2.0, 3.0], vec![0.0, 2.0, 4.0, 6.0]],
        );
        let roster = InstrumentRoster {
            treatments: false,
            other_measures: false,
            covariates: false,
        };
        assert!(lambda_combined(&data, 0, roster).is_err());
    }
}
