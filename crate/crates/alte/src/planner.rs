//! Design-stage planning: variance forecasts under optimal weighting and the
//! budget split between additional measures and additional subjects.
//!
//! With independent errors and optimal weights the estimator variance is
//! `Var(eta1)/n1 + Var(eta0)/n0 + (1/n1 + 1/n0) / sum_j lambda_j^2/sigma_j^2`.
//! The budget search enumerates every feasible `(extra measures, extra
//! subjects)` pair, adding subjects in even counts split across arms.

use serde::Serialize;

use crate::error::{Error, Result};

/// Budget-allocation problem. New measures inherit `per_measure_precision`
/// (lambda^2 over error variance); pass explicit vectors for heterogeneous
/// existing measures.
#[derive(Debug, Clone, Serialize)]
pub struct DesignProblem {
    pub n: usize,
    pub n_measures: usize,
    pub budget: f64,
    pub cost_per_measure: f64,
    pub cost_per_subject: f64,
    pub latent_var_treated: f64,
    pub latent_var_control: f64,
    /// lambda_j^2 / sigma_j^2 for one measure (equal-measure case).
    pub per_measure_precision: f64,
    /// Optional explicit (lambda, sigma2) pairs for the existing measures.
    pub existing: Option<Vec<(f64, f64)>>,
}

impl DesignProblem {
    pub fn validate(&self) -> Result<()> {
        if self.budget < 0.0 || self.cost_per_measure < 0.0 || self.cost_per_subject < 0.0 {
            return Err(Error::Validation("costs and budget must be >= 0".into()));
        }
        if self.per_measure_precision <= 0.0 {
            return Err(Error::Validation(
                "per-measure precision must be positive".into(),
            ));
        }
        if self.n < 2 || self.n_measures < 1 {
            return Err(Error::Validation("need n >= 2 and at least one measure".into()));
        }
        Ok(())
    }

    fn precision_sum(&self, extra_measures: usize) -> f64 {
        let base = match &self.existing {
            Some(v) => v.iter().map(|(l, s2)| l * l / s2).sum(),
            None => self.n_measures as f64 * self.per_measure_precision,
        };
        base + extra_measures as f64 * self.per_measure_precision
    }
}

/// Forecast variance of the optimally weighted estimator.
pub fn forecast_variance(
    n1: usize,
    n0: usize,
    psi_treated: f64,
    psi_control: f64,
    precision_sum: f64,
) -> f64 {
    let (n1, n0) = (n1 as f64, n0 as f64);
    psi_treated / n1 + psi_control / n0 + (1.0 / n1 + 1.0 / n0) / precision_sum
}

/// Forecast variance from explicit scaling and error vectors.
pub fn forecast_variance_vectors(
    n1: usize,
    n0: usize,
    lambda: &[f64],
    sigma2: &[f64],
    psi: (f64, f64),
) -> f64 {
    let precision: f64 = lambda
        .iter()
        .zip(sigma2)
        .map(|(l, s2)| if *s2 == 0.0 { f64::INFINITY } else { l * l / s2 })
        .sum();
    if precision.is_infinite() {
        return psi.0 / n1 as f64 + psi.1 / n0 as f64;
    }
    forecast_variance(n1, n0, psi.0, psi.1, precision)
}

#[derive(Debug, Clone, Serialize)]
pub struct FrontierPoint {
    pub extra_measures: usize,
    pub extra_subjects: usize,
    pub cost: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DesignSolution {
    pub extra_measures: usize,
    pub extra_subjects: usize,
    pub variance: f64,
    pub status_quo_variance: f64,
    pub reduction: f64,
    pub frontier: Vec<FrontierPoint>,
}

/// Exhaustive integer search over feasible designs. Subjects are added in
/// even counts (half per arm); ties break toward fewer measures, then fewer
/// subjects.
pub fn optimize_budget(problem: &DesignProblem) -> Result<DesignSolution> {
    problem.validate()?;
    let half = problem.n / 2;
    let (n1, n0) = (half, problem.n - half);
    let status_quo = forecast_variance(
        n1,
        n0,
        problem.latent_var_treated,
        problem.latent_var_control,
        problem.precision_sum(0),
    );
    let max_measures = if problem.cost_per_measure > 0.0 {
        (problem.budget / problem.cost_per_measure).floor() as usize
    } else {
        0
    };
    let mut frontier = Vec::new();
    let mut best: Option<FrontierPoint> = None;
    for j in 0..=max_measures {
        let remaining = problem.budget - j as f64 * problem.cost_per_measure;
        let mut k = if problem.cost_per_subject > 0.0 {
            (remaining / problem.cost_per_subject).floor() as usize
        } else {
            0
        };
        k -= k % 2; // even counts split across arms
        let variance = forecast_variance(
            n1 + k / 2,
            n0 + k / 2,
            problem.latent_var_treated,
            problem.latent_var_control,
            problem.precision_sum(j),
        );
        let point = FrontierPoint {
            extra_measures: j,
            extra_subjects: k,
            cost: j as f64 * problem.cost_per_measure + k as f64 * problem.cost_per_subject,
            variance,
        };
        let better = match &best {
            None => true,
            Some(b) => {
                variance < b.variance - 1e-15
                    || (variance <= b.variance + 1e-15
                        && (j, k) < (b.extra_measures, b.extra_subjects))
            }
        };
        if better {
            best = Some(point.clone());
        }
        frontier.push(point);
    }
    let best = best.ok_or_else(|| Error::Validation("empty feasible set".into()))?;
    Ok(DesignSolution {
        extra_measures: best.extra_measures,
        extra_subjects: best.extra_subjects,
        variance: best.variance,
        status_quo_variance: status_quo,
        reduction: status_quo - best.variance,
        frontier,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MarginalRow {
    pub j: usize,
    /// Closed-form variance change from adding the (J+1)-th measure,
    /// `(4/n) * (-1 / (J (J+1) Sigma))`.
    pub delta: f64,
    /// `Delta(J+1)/Delta(J) = J/(J+2)`.
    pub ratio_next: f64,
    /// Variance ratio after adding n/4 subjects per arm at this J (the
    /// one-third reduction rule: new/old = n/(n + 2*(n/4)) = 2/3).
    pub subjects_rule_ratio: f64,
}

/// Closed-form marginal-gain table for the equal-measure-quality case.
pub fn marginal_tables(problem: &DesignProblem, j_grid: &[usize]) -> Result<Vec<MarginalRow>> {
    problem.validate()?;
    let n = problem.n as f64;
    let sigma = problem.per_measure_precision;
    Ok(j_grid
        .iter()
        .map(|&j| {
            let jf = j as f64;
            MarginalRow {
                j,
                delta: (4.0 / n) * (-1.0 / (jf * (jf + 1.0) * sigma)),
                ratio_next: jf / (jf + 2.0),
                subjects_rule_ratio: n / (n + 2.0 * (n / 4.0)),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scenario(sigma2: f64) -> DesignProblem {
        DesignProblem {
            n: 500,
            n_measures: 1,
            budget: 5000.0,
            cost_per_measure: 1000.0,
            cost_per_subject: 10.0,
            latent_var_treated: 1.0,
            latent_var_control: 1.0,
            per_measure_precision: 1.0 / sigma2,
            existing: None,
        }
    }

    #[test]
    fn forecast_zero_error_reduces_to_latent_variance() {
        let v = forecast_variance_vectors(250, 250, &[1.0, 1.0], &[0.0, 1.0], (1.0, 1.0));
        assert_relative_eq!(v, 1.0 / 250.0 + 1.0 / 250.0, epsilon = 1e-12);
    }

    #[test]
    fn forecast_halves_when_arms_double() {
        let v1 = forecast_variance(250, 250, 1.0, 1.0, 2.0);
        let v2 = forecast_variance(500, 500, 1.0, 1.0, 2.0);
        assert_relative_eq!(v2, v1 / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn forecast_low_reliability_status_quo() {
        // one measure with error variance 1.701, latent variance 1 per arm
        let v = forecast_variance(250, 250, 1.0, 1.0, 1.0 / 1.701);
        assert_relative_eq!(v, (2.0 + 2.0 * 1.701) / 250.0, epsilon = 1e-12);
    }

    #[test]
    fn budget_high_reliability_adds_one_measure() {
        let sol = optimize_budget(&scenario(0.379)).unwrap();
        assert_eq!(
            (sol.extra_measures, sol.extra_subjects),
            (1, 400),
            "frontier {:?}",
            sol.frontier
        );
    }

    #[test]
    fn budget_low_reliability_adds_two_measures() {
        let sol = optimize_budget(&scenario(1.701)).unwrap();
        assert_eq!((sol.extra_measures, sol.extra_subjects), (2, 300));
    }

    #[test]
    fn budget_reliability_mapping_gives_same_answers() {
        // sigma2 = (1 - r)/r for unit latent variance
        let from_rel = |r: f64| (1.0 - r) / r;
        let hi = optimize_budget(&scenario(from_rel(0.75))).unwrap();
        assert_eq!((hi.extra_measures, hi.extra_subjects), (1, 400));
        let lo = optimize_budget(&scenario(from_rel(0.4))).unwrap();
        assert_eq!((lo.extra_measures, lo.extra_subjects), (2, 300));
    }

    #[test]
    fn zero_budget_keeps_status_quo() {
        let mut p = scenario(1.0);
        p.budget = 0.0;
        let sol = optimize_budget(&p).unwrap();
        assert_eq!((sol.extra_measures, sol.extra_subjects), (0, 0));
        assert_relative_eq!(sol.variance, sol.status_quo_variance);
    }

    #[test]
    fn budget_scale_invariance() {
        let base = optimize_budget(&scenario(1.701)).unwrap();
        let mut scaled = scenario(1.701);
        scaled.budget *= 7.5;
        scaled.cost_per_measure *= 7.5;
        scaled.cost_per_subject *= 7.5;
        let s = optimize_budget(&scaled).unwrap();
        assert_eq!(
            (base.extra_measures, base.extra_subjects),
            (s.extra_measures, s.extra_subjects)
        );
    }

    #[test]
    fn forecast_monotone_in_measures_and_subjects() {
        let p = scenario(1.0);
        let mut last = f64::INFINITY;
        for j in 0..6 {
            let v = forecast_variance(250, 250, 1.0, 1.0, p.precision_sum(j));
            assert!(v < last || (v - last).abs() < 1e-15);
            last = v;
        }
        let v1 = forecast_variance(250, 250, 1.0, 1.0, 1.0);
        let v2 = forecast_variance(300, 300, 1.0, 1.0, 1.0);
        assert!(v2 < v1);
    }

    #[test]
    fn marginal_table_known_ratios() {
        let rows = marginal_tables(&scenario(1.0), &[1, 2, 3]).unwrap();
        assert_relative_eq!(rows[0].ratio_next, 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(rows[1].ratio_next, 0.5, epsilon = 1e-12);
        assert_relative_eq!(rows[0].subjects_rule_ratio, 2.0 / 3.0, epsilon = 1e-12);
        // Sigma -> infinity: delta -> 0
        let mut p = scenario(1.0);
        p.per_measure_precision = 1e12;
        let rows = marginal_tables(&p, &[1]).unwrap();
        assert!(rows[0].delta.abs() < 1e-11);
    }
}
