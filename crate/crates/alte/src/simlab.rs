//! Data-generating processes and the Monte Carlo engine.
//!
//! A `DgpSpec` describes one simulated experiment: latent potential-outcome
//! laws, scaling and error parameters per measure, optional contamination
//! (direct treatment leaks, nonlinear transforms, correlated errors), and an
//! IRT block for additive-index studies. `generate` is deterministic in
//! `(spec, seed)`; `run_mc` runs a roster of estimators on identical
//! replicate datasets with per-replicate seeds `derive(seed, r)`, so results
//! are independent of the parallel schedule.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::dataset::ExperimentData;
use crate::error::{Error, Result};
use crate::estimate::{gmm_joint, GmmOptions};
use crate::identify::InstrumentRoster;
use crate::index::WeightKind;
use crate::linreg::{mean, variance};
use crate::seeds;
use crate::structural::{compare_nested, DiscrepancyKind, StructuralModel};

/// Distribution of a latent component. Normal parameters are mean and
/// standard deviation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dist {
    Constant { value: f64 },
    Normal { mean: f64, sd: f64 },
}

impl Dist {
    pub fn mean(&self) -> f64 {
        match self {
            Dist::Constant { value } => *value,
            Dist::Normal { mean, .. } => *mean,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Dist::Constant { value } => *value,
            Dist::Normal { mean, sd } => Normal::new(*mean, *sd).unwrap().sample(rng),
        }
    }
}

/// Latent potential outcomes: `eta0 = base`, `eta1 = base + effect` with an
/// independent effect draw per unit (a constant effect reproduces
/// unit-constant treatment effects; a dispersed one gives HTE).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LatentLaw {
    pub base: Dist,
    pub effect: Dist,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    Identity,
    /// Signal is `lambda * eta^2`.
    Quadratic,
    /// Signal is `lambda * exp(eta)`.
    Exponential,
    /// The linear value (with error) is dichotomized at its sample mean:
    /// `Y = 1[xi < mean(xi)]`.
    BinarizeBelowMean,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasureSpec {
    #[serde(default)]
    pub label: Option<String>,
    pub lambda: f64,
    #[serde(default)]
    pub intercept: f64,
    pub error_sd: f64,
    #[serde(default)]
    pub transform: Transform,
    /// Direct treatment path into this measure (exclusion violation).
    #[serde(default)]
    pub leak: f64,
}

impl MeasureSpec {
    pub fn linear(lambda: f64, error_sd: f64) -> Self {
        Self {
            label: None,
            lambda,
            intercept: 0.0,
            error_sd,
            transform: Transform::Identity,
            leak: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovariateSpec {
    #[serde(default)]
    pub label: Option<String>,
    pub mean: f64,
    pub sd: f64,
    /// Coefficient on the covariate in the latent equation.
    pub coef: f64,
}

/// Binary-item IRT block (3PL): discrimination uniform on `[a_low, a_high]`,
/// difficulty normal `(b_mean, b_sd)`, guessing floor `c`. Items are summed
/// into an overall additive index plus two half indices; the latent draw is
/// kept as an extra outcome column for linearization checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IrtSpec {
    pub items: usize,
    #[serde(default = "default_a_low")]
    pub a_low: f64,
    #[serde(default = "default_a_high")]
    pub a_high: f64,
    #[serde(default)]
    pub b_mean: f64,
    #[serde(default = "default_b_sd")]
    pub b_sd: f64,
    #[serde(default = "default_guessing")]
    pub guessing: f64,
}

fn default_a_low() -> f64 {
    0.5
}
fn default_a_high() -> f64 {
    1.5
}
fn default_b_sd() -> f64 {
    2.0
}
fn default_guessing() -> f64 {
    0.2
}

fn default_treated_share() -> f64 {
    0.5
}

/// One simulated experimental design.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpSpec {
    pub name: String,
    pub n: usize,
    pub latent: LatentLaw,
    #[serde(default)]
    pub measures: Vec<MeasureSpec>,
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
    /// Pairwise measurement-error correlations `(measure_a, measure_b, rho)`.
    #[serde(default)]
    pub error_correlations: Vec<(usize, usize, f64)>,
    /// Complete randomization: `round(n * treated_share)` treated units.
    #[serde(default = "default_treated_share")]
    pub treated_share: f64,
    /// Which measure sets the latent scale.
    #[serde(default)]
    pub reference: usize,
    #[serde(default)]
    pub irt: Option<IrtSpec>,
}

impl DgpSpec {
    /// ALTE in units of the reference measure.
    pub fn true_alte(&self) -> f64 {
        let lam = if self.irt.is_some() {
            1.0
        } else {
            self.measures[self.reference].lambda
        };
        lam * self.latent.effect.mean()
    }

    pub fn with_effect_mean(&self, mean: f64) -> Self {
        let mut out = self.clone();
        out.latent.effect = match out.latent.effect {
            Dist::Constant { .. } => Dist::Constant { value: mean },
            Dist::Normal { sd, .. } => Dist::Normal { mean, sd },
        };
        out.name = format!("{}@{mean}", self.name);
        out
    }

    /// Three noisy measures of a unit treatment effect on a dispersed latent
    /// base, with intercepts and very unequal reliabilities.
    pub fn recovery_three_measures(n: usize) -> Self {
        Self {
            name: "recovery".into(),
            n,
            latent: LatentLaw {
                base: Dist::Normal { mean: 1.0, sd: 2.0 },
                effect: Dist::Constant { value: 1.0 },
            },
            measures: vec![
                MeasureSpec {
                    label: None,
                    lambda: 0.1,
                    intercept: 3.0,
                    error_sd: 5.0,
                    transform: Transform::Identity,
                    leak: 0.0,
                },
                MeasureSpec {
                    label: None,
                    lambda: 1.0,
                    intercept: 2.0,
                    error_sd: 2.0,
                    transform: Transform::Identity,
                    leak: 0.0,
                },
                MeasureSpec {
                    label: None,
                    lambda: 0.5,
                    intercept: 1.0,
                    error_sd: 1.0,
                    transform: Transform::Identity,
                    leak: 0.0,
                },
            ],
            covariates: Vec::new(),
            error_correlations: Vec::new(),
            treated_share: 0.5,
            reference: 1,
            irt: None,
        }
    }

    /// Power-comparison design: degenerate control, treated latent
    /// `N(theta, 1)`, three unit-loading measures with error variances
    /// 0.5, 0.1, and 2.
    pub fn power_three_measures(n: usize, theta: f64) -> Self {
        Self {
            name: format!("power@{theta}"),
            n,
            latent: LatentLaw {
                base: Dist::Constant { value: 0.0 },
                effect: Dist::Normal { mean: theta, sd: 1.0 },
            },
            measures: vec![
                MeasureSpec::linear(1.0, 0.5f64.sqrt()),
                MeasureSpec::linear(1.0, 0.1f64.sqrt()),
                MeasureSpec::linear(1.0, 2.0f64.sqrt()),
            ],
            covariates: Vec::new(),
            error_correlations: Vec::new(),
            treated_share: 0.5,
            reference: 0,
            irt: None,
        }
    }

    /// Equal-reliability design for variance-reduction tables: unit latent
    /// variance in both arms, `j` unit-loading measures with a common error
    /// standard deviation.
    pub fn equal_reliability(n: usize, j: usize, error_sd: f64) -> Self {
        Self {
            name: format!("equal_reliability_j{j}"),
            n,
            latent: LatentLaw {
                base: Dist::Normal { mean: 2.0, sd: 1.0 },
                effect: Dist::Constant { value: -1.0 },
            },
            measures: (0..j).map(|_| MeasureSpec::linear(1.0, error_sd)).collect(),
            covariates: Vec::new(),
            error_correlations: Vec::new(),
            treated_share: 0.5,
            reference: 0,
            irt: None,
        }
    }

    /// Continuous reference plus two latent-threshold binary measures.
    pub fn binary_bridge(n: usize) -> Self {
        Self {
            name: "binary_bridge".into(),
            n,
            latent: LatentLaw {
                base: Dist::Constant { value: 0.0 },
                effect: Dist::Normal { mean: 1.0, sd: 1.0 },
            },
            measures: vec![
                MeasureSpec::linear(1.0, 1.0),
                MeasureSpec {
                    label: None,
                    lambda: 0.5,
                    intercept: 0.0,
                    error_sd: 0.5,
                    transform: Transform::BinarizeBelowMean,
                    leak: 0.0,
                },
                MeasureSpec {
                    label: None,
                    lambda: 1.5,
                    intercept: 0.0,
                    error_sd: 0.5,
                    transform: Transform::BinarizeBelowMean,
                    leak: 0.0,
                },
            ],
            covariates: Vec::new(),
            error_correlations: Vec::new(),
            treated_share: 0.5,
            reference: 0,
            irt: None,
        }
    }

    /// `n_valid` clean unit-loading measures plus one contaminated measure
    /// with a direct treatment path of size `leak`. With
    /// `leak_on_reference` the contamination hits the reference measure
    /// instead and the latent effect is shifted so the treatment identifies
    /// the scale.
    pub fn exclusion_violation(n: usize, n_valid: usize, leak: f64, leak_on_reference: bool) -> Self {
        let mut measures = vec![MeasureSpec::linear(1.0, 1.0); n_valid + 1];
        let effect = if leak_on_reference {
            measures[0].leak = leak;
            Dist::Normal { mean: 1.0, sd: 1.0 }
        } else {
            measures[n_valid].leak = leak;
            Dist::Normal { mean: 0.0, sd: 1.0 }
        };
        Self {
            name: format!("exclusion_v{n_valid}"),
            n,
            latent: LatentLaw {
                base: Dist::Constant { value: 0.0 },
                effect,
            },
            measures,
            covariates: Vec::new(),
            error_correlations: Vec::new(),
            treated_share: 0.5,
            reference: 0,
            irt: None,
        }
    }

    /// Two linear measures around one nonlinear measure 2.
    pub fn nonlinearity(n: usize, transform: Transform, effect_mean: f64) -> Self {
        Self {
            name: format!("nonlinearity_{transform:?}"),
            n,
            latent: LatentLaw {
                base: Dist::Constant { value: 0.0 },
                effect: Dist::Normal { mean: effect_mean, sd: 1.0 },
            },
            measures: vec![
                MeasureSpec::linear(1.0, 1.0),
                MeasureSpec {
                    label: None,
                    lambda: 1.0,
                    intercept: 0.0,
                    error_sd: 1.0,
                    transform,
                    leak: 0.0,
                },
                MeasureSpec::linear(1.0, 1.0),
            ],
            covariates: Vec::new(),
            error_correlations: Vec::new(),
            treated_share: 0.5,
            reference: 0,
            irt: None,
        }
    }

    /// Additive-index linearization study: binary 3PL items summed into
    /// indices, latent kept as a column.
    pub fn irt_additive_index(n: usize, items: usize) -> Self {
        Self {
            name: format!("irt_{items}_items"),
            n,
            latent: LatentLaw {
                base: Dist::Normal { mean: 0.0, sd: 1.0 },
                effect: Dist::Constant { value: 0.0 },
            },
            measures: Vec::new(),
            covariates: Vec::new(),
            error_correlations: Vec::new(),
            treated_share: 0.5,
            reference: 0,
            irt: Some(IrtSpec {
                items,
                a_low: default_a_low(),
                a_high: default_a_high(),
                b_mean: 0.0,
                b_sd: default_b_sd(),
                guessing: default_guessing(),
            }),
        }
    }
}

fn error_cholesky(spec: &DgpSpec) -> Result<Option<Vec<Vec<f64>>>> {
    if spec.error_correlations.is_empty() {
        return Ok(None);
    }
    let j = spec.measures.len();
    let mut corr = nalgebra::DMatrix::<f64>::identity(j, j);
    for &(a, b, rho) in &spec.error_correlations {
        if a >= j || b >= j || a == b {
            return Err(Error::Validation(format!(
                "invalid error-correlation pair ({a}, {b})"
            )));
        }
        corr[(a, b)] = rho;
        corr[(b, a)] = rho;
    }
    let chol = corr
        .cholesky()
        .ok_or_else(|| Error::Validation("error correlation matrix is not PD".into()))?;
    let l = chol.l();
    Ok(Some(
        (0..j)
            .map(|r| (0..j).map(|c| l[(r, c)]).collect())
            .collect(),
    ))
}

/// Deterministic dataset for `(spec, seed)`.
pub fn generate(spec: &DgpSpec, seed: u64) -> Result<ExperimentData> {
    if spec.n < 4 {
        return Err(Error::Validation("spec.n must be at least 4".into()));
    }
    if spec.measures.is_empty() && spec.irt.is_none() {
        return Err(Error::Validation("spec has no measures".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.n;
    // complete randomization
    let n_treated = ((n as f64) * spec.treated_share).round() as usize;
    let mut z: Vec<f64> = (0..n).map(|i| if i < n_treated { 1.0 } else { 0.0 }).collect();
    z.shuffle(&mut rng);

    let covariate_draws: Vec<Vec<f64>> = spec
        .covariates
        .iter()
        .map(|c| {
            let d = Normal::new(c.mean, c.sd).unwrap();
            (0..n).map(|_| d.sample(&mut rng)).collect()
        })
        .collect();

    let mut eta = Vec::with_capacity(n);
    for i in 0..n {
        let base = spec.latent.base.sample(&mut rng);
        let effect = spec.latent.effect.sample(&mut rng);
        let mut e = base + z[i] * effect;
        for (c, cov) in spec.covariates.iter().enumerate() {
            e += cov.coef * covariate_draws[c][i];
        }
        eta.push(e);
    }

    let outcomes: Vec<(String, Vec<f64>)> = if let Some(irt) = &spec.irt {
        if irt.items < 2 {
            return Err(Error::Validation("IRT block needs at least 2 items".into()));
        }
        let a_dist = Uniform::new(irt.a_low, irt.a_high)
            .map_err(|e| Error::Validation(format!("bad discrimination range: {e}")))?;
        let b_dist = Normal::new(irt.b_mean, irt.b_sd).unwrap();
        let a: Vec<f64> = (0..irt.items).map(|_| a_dist.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..irt.items).map(|_| b_dist.sample(&mut rng)).collect();
        let half = irt.items / 2;
        let mut index = vec![0.0; n];
        let mut index_a = vec![0.0; n];
        let mut index_b = vec![0.0; n];
        for i in 0..n {
            for l in 0..irt.items {
                let p = irt.guessing
                    + (1.0 - irt.guessing) / (1.0 + (-a[l] * (eta[i] - b[l])).exp());
                let hit = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
                index[i] += hit;
                if l < half {
                    index_a[i] += hit;
                } else {
                    index_b[i] += hit;
                }
            }
        }
        vec![
            ("index".into(), index),
            ("index_a".into(), index_a),
            ("index_b".into(), index_b),
            ("eta".into(), eta.clone()),
        ]
    } else {
        let chol = error_cholesky(spec)?;
        let j = spec.measures.len();
        let std = Normal::new(0.0, 1.0).unwrap();
        let mut errors = vec![vec![0.0; n]; j];
        for i in 0..n {
            let u: Vec<f64> = (0..j).map(|_| std.sample(&mut rng)).collect();
            for (m, err_col) in errors.iter_mut().enumerate() {
                let raw = match &chol {
                    Some(l) => (0..=m).map(|k| l[m][k] * u[k]).sum::<f64>(),
                    None => u[m],
                };
                err_col[i] = spec.measures[m].error_sd * raw;
            }
        }
        spec.measures
            .iter()
            .enumerate()
            .map(|(m, ms)| {
                let label = ms
                    .label
                    .clone()
                    .unwrap_or_else(|| format!("y{}", m + 1));
                let col: Vec<f64> = (0..n)
                    .map(|i| {
                        let signal = match ms.transform {
                            Transform::Quadratic => ms.lambda * eta[i] * eta[i],
                            Transform::Exponential => ms.lambda * eta[i].exp(),
                            _ => ms.lambda * eta[i],
                        };
                        ms.intercept + signal + errors[m][i] + ms.leak * z[i]
                    })
                    .collect();
                let col = if ms.transform == Transform::BinarizeBelowMean {
                    let mu = mean(&col);
                    col.into_iter()
                        .map(|v| if v < mu { 1.0 } else { 0.0 })
                        .collect()
                } else {
                    col
                };
                (label, col)
            })
            .collect()
    };

    let covariates = spec
        .covariates
        .iter()
        .zip(covariate_draws)
        .enumerate()
        .map(|(c, (cs, col))| {
            (
                cs.label.clone().unwrap_or_else(|| format!("x{}", c + 1)),
                col,
            )
        })
        .collect();
    ExperimentData::from_columns(vec![("z".into(), z)], outcomes, covariates, 0)
}

// ---------------------------------------------------------------------------
// Monte Carlo engine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McEstimator {
    /// Joint GMM with inverse-variance weights; scaling identified by the
    /// treatment and the other measures.
    WsiOptimal,
    /// Joint GMM with equal weights.
    WsiEqual,
    /// Latent covariance-structure fit; rejection by the chi-square
    /// difference against the null-effect restriction.
    Structural,
    Icw,
    Pca,
    EqualStd,
}

impl McEstimator {
    pub fn label(&self) -> &'static str {
        match self {
            McEstimator::WsiOptimal => "wsi_optimal",
            McEstimator::WsiEqual => "wsi_equal",
            McEstimator::Structural => "structural",
            McEstimator::Icw => "icw",
            McEstimator::Pca => "pca",
            McEstimator::EqualStd => "equal_std",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "wsi_optimal" | "wsi" | "optimal" => Ok(Self::WsiOptimal),
            "wsi_equal" | "equal" => Ok(Self::WsiEqual),
            "structural" | "sem" => Ok(Self::Structural),
            "icw" => Ok(Self::Icw),
            "pca" => Ok(Self::Pca),
            "equal_std" => Ok(Self::EqualStd),
            other => Err(Error::Validation(format!("unknown estimator `{other}`"))),
        }
    }
}

/// (estimate, se, reject) for one replicate.
type ReplicateOutcome = (f64, f64, bool);

fn run_estimator(
    est: McEstimator,
    data: &ExperimentData,
    reference: usize,
    alpha: f64,
    chi2_crit: f64,
    z_crit: f64,
) -> Result<ReplicateOutcome> {
    let _ = alpha;
    match est {
        McEstimator::WsiOptimal | McEstimator::WsiEqual => {
            let weight_kind = if est == McEstimator::WsiOptimal {
                WeightKind::InverseVariance
            } else {
                WeightKind::Equal
            };
            let fit = gmm_joint(
                data,
                &GmmOptions {
                    reference,
                    roster: InstrumentRoster {
                        treatments: true,
                        other_measures: true,
                        covariates: false,
                    },
                    weight_kind,
                    ..GmmOptions::default()
                },
            )?;
            let a = fit.alte;
            Ok((a.tau_hat, a.se, (a.tau_hat / a.se).abs() > z_crit))
        }
        McEstimator::Structural => {
            let model = StructuralModel::latent(
                data.n_arms(),
                data.n_covariates(),
                data.n_outcomes(),
            );
            let null = model.clone().with_null_effect();
            let cmp = compare_nested(&null, &model, data, DiscrepancyKind::Gls)?;
            let fit = crate::structural::fit(
                &model,
                crate::structural::FitInput::Data(data),
                DiscrepancyKind::Gls,
            )?;
            let beta = fit
                .param("beta:z1")
                .ok_or_else(|| Error::Validation("missing beta".into()))?
                * if reference == 0 {
                    1.0
                } else {
                    fit.param(&format!("lambda:{}", reference + 1)).unwrap_or(1.0)
                };
            // likelihood-ratio-style se implied by the fit difference
            let se = if cmp.chi2_diff > 0.0 {
                beta.abs() / cmp.chi2_diff.sqrt()
            } else {
                f64::INFINITY
            };
            Ok((beta, se, cmp.chi2_diff > chi2_crit))
        }
        McEstimator::Icw => {
            let r = crate::baselines::icw_index(data, 0)?;
            let a = r.index_effect.unwrap();
            Ok((a.tau_hat, a.se, (a.tau_hat / a.se).abs() > z_crit))
        }
        McEstimator::Pca => {
            let r = crate::baselines::pca_index(data, 0)?;
            let a = r.index_effect.unwrap();
            Ok((a.tau_hat, a.se, (a.tau_hat / a.se).abs() > z_crit))
        }
        McEstimator::EqualStd => {
            let r = crate::baselines::equal_std_index(data, 0)?;
            let a = r.index_effect.unwrap();
            Ok((a.tau_hat, a.se, (a.tau_hat / a.se).abs() > z_crit))
        }
    }
}

/// Aggregates for one estimator in a Monte Carlo run.
#[derive(Debug, Clone, Serialize)]
pub struct EstimatorReport {
    pub estimator: String,
    pub mean_estimate: f64,
    pub empirical_sd: f64,
    pub mean_se: f64,
    pub bias: f64,
    pub rmse: f64,
    pub rejection_rate: f64,
    /// Binomial Monte Carlo standard error of the rejection rate.
    pub rejection_mc_se: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct McReport {
    pub name: String,
    pub replicates: usize,
    pub seed: u64,
    pub alpha: f64,
    pub true_alte: f64,
    pub estimators: Vec<EstimatorReport>,
    #[serde(skip)]
    pub runtime_seconds: f64,
}

impl McReport {
    pub fn estimator(&self, label: &str) -> Option<&EstimatorReport> {
        self.estimators.iter().find(|e| e.estimator == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "estimator,mean_estimate,empirical_sd,mean_se,bias,rmse,rejection_rate,rejection_mc_se,failures\n",
        );
        for e in &self.estimators {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                e.estimator,
                e.mean_estimate,
                e.empirical_sd,
                e.mean_se,
                e.bias,
                e.rmse,
                e.rejection_rate,
                e.rejection_mc_se,
                e.failures
            ));
        }
        out
    }
}

/// Runs every estimator on identical replicate datasets and aggregates.
/// Failures are counted per estimator and excluded from the aggregates; the
/// run never aborts on a replicate failure.
pub fn run_mc(
    spec: &DgpSpec,
    estimators: &[McEstimator],
    replicates: usize,
    seed: u64,
    alpha: f64,
) -> Result<McReport> {
    if estimators.is_empty() {
        return Err(Error::Validation("empty estimator roster".into()));
    }
    let started = std::time::Instant::now();
    let z_crit = statrs::distribution::Normal::new(0.0, 1.0)
        .unwrap()
        .inverse_cdf(1.0 - alpha / 2.0);
    let chi2_crit = ChiSquared::new(1.0).unwrap().inverse_cdf(1.0 - alpha);

    let outcomes: Vec<Vec<Option<ReplicateOutcome>>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let rep_seed = seeds::derive(seed, r as u64);
            let data = match generate(spec, rep_seed) {
                Ok(d) => d,
                Err(_) => return vec![None; estimators.len()],
            };
            estimators
                .iter()
                .map(|&est| {
                    run_estimator(est, &data, spec.reference, alpha, chi2_crit, z_crit)
                        .ok()
                        .filter(|(t, s, _)| t.is_finite() && s.is_finite())
                })
                .collect()
        })
        .collect();

    let true_alte = spec.true_alte();
    let mut reports = Vec::new();
    for (e, est) in estimators.iter().enumerate() {
        let ok: Vec<&ReplicateOutcome> =
            outcomes.iter().filter_map(|row| row[e].as_ref()).collect();
        let failures = replicates - ok.len();
        let taus: Vec<f64> = ok.iter().map(|o| o.0).collect();
        let ses: Vec<f64> = ok.iter().map(|o| o.1).collect();
        let rejections = ok.iter().filter(|o| o.2).count();
        let (mean_estimate, empirical_sd, mean_se, bias, rmse, rate) = if ok.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN)
        } else {
            let m = mean(&taus);
            let rate = rejections as f64 / ok.len() as f64;
            (
                m,
                variance(&taus).sqrt(),
                mean(&ses),
                m - true_alte,
                (taus.iter().map(|t| (t - true_alte).powi(2)).sum::<f64>()
                    / taus.len() as f64)
                    .sqrt(),
                rate,
            )
        };
        reports.push(EstimatorReport {
            estimator: est.label().to_string(),
            mean_estimate,
            empirical_sd,
            mean_se,
            bias,
            rmse,
            rejection_rate: rate,
            rejection_mc_se: if ok.is_empty() {
                f64::NAN
            } else {
                (rate * (1.0 - rate) / ok.len() as f64).sqrt()
            },
            failures,
        });
    }
    Ok(McReport {
        name: spec.name.clone(),
        replicates,
        seed,
        alpha,
        true_alte,
        estimators: reports,
        runtime_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Power curve over a grid of latent effect means.
#[derive(Debug, Clone, Serialize)]
pub struct PowerStudy {
    pub thetas: Vec<f64>,
    pub reports: Vec<McReport>,
}

impl PowerStudy {
    /// Tidy CSV: estimator, theta, power, mc_se.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("estimator,theta,power,mc_se\n");
        for (theta, report) in self.thetas.iter().zip(&self.reports) {
            for e in &report.estimators {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    e.estimator, theta, e.rejection_rate, e.rejection_mc_se
                ));
            }
        }
        out
    }

    pub fn power(&self, estimator: &str, theta_index: usize) -> Option<f64> {
        self.reports[theta_index]
            .estimator(estimator)
            .map(|e| e.rejection_rate)
    }
}

pub fn power_study(
    base: &DgpSpec,
    thetas: &[f64],
    estimators: &[McEstimator],
    replicates: usize,
    seed: u64,
    alpha: f64,
) -> Result<PowerStudy> {
    let mut reports = Vec::new();
    for &theta in thetas {
        let spec = base.with_effect_mean(theta);
        // identical replicate seeds across theta points: common random
        // numbers for the latent draws
        reports.push(run_mc(&spec, estimators, replicates, seed, alpha)?);
    }
    Ok(PowerStudy {
        thetas: thetas.to_vec(),
        reports,
    })
}

// ---------------------------------------------------------------------------
// Studies
// ---------------------------------------------------------------------------

/// Bias series from the exclusion-violation study.
#[derive(Debug, Clone, Serialize)]
pub struct ExclusionStudy {
    pub valid_grid: Vec<usize>,
    pub leak: f64,
    pub leak_on_reference: bool,
    pub bias: Vec<f64>,
    pub empirical_sd: Vec<f64>,
    pub mc_se: Vec<f64>,
}

/// WSI bias as clean measures are added next to one contaminated measure.
///
/// The scaling is identified by the other measures (the latent shift is
/// centered at zero, so the treatment is not a usable instrument); the index
/// uses equal weights. With the leak on a non-reference measure the bias is
/// the leak diluted by that measure's weight, so it shrinks as valid
/// measures are added. With the leak on the reference measure every scaled
/// measure inherits the contaminated scale and the bias stays at the full
/// leak size.
pub fn study_exclusion_violation(
    n: usize,
    leak: f64,
    valid_grid: &[usize],
    replicates: usize,
    seed: u64,
    leak_on_reference: bool,
) -> Result<ExclusionStudy> {
    let mut bias = Vec::new();
    let mut sds = Vec::new();
    let mut mc_se = Vec::new();
    for &n_valid in valid_grid {
        if n_valid < 2 {
            return Err(Error::Validation(
                "need at least 2 valid measures for measure-instrument identification".into(),
            ));
        }
        let spec = DgpSpec::exclusion_violation(n, n_valid, leak, leak_on_reference);
        let truth = spec.true_alte();
        let taus: Vec<f64> = (0..replicates)
            .into_par_iter()
            .filter_map(|r| {
                let data = generate(&spec, seeds::derive(seed, r as u64)).ok()?;
                let roster = if leak_on_reference {
                    InstrumentRoster::treatments_only()
                } else {
                    InstrumentRoster {
                        treatments: false,
                        other_measures: true,
                        covariates: false,
                    }
                };
                let lam = crate::identify::lambda_combined(&data, spec.reference, roster).ok()?;
                let scheme = crate::index::WeightScheme::equal(data.n_outcomes());
                let wsi = crate::index::build_wsi(&data, &lam, &scheme).ok()?;
                let d = crate::estimate::dim_wsi(&wsi, &data, 0).ok()?;
                Some(d.tau_hat)
            })
            .collect();
        if taus.is_empty() {
            return Err(Error::Validation("all replicates failed".into()));
        }
        let m = mean(&taus);
        let sd = variance(&taus).sqrt();
        bias.push(m - truth);
        sds.push(sd);
        mc_se.push(sd / (taus.len() as f64).sqrt());
    }
    Ok(ExclusionStudy {
        valid_grid: valid_grid.to_vec(),
        leak,
        leak_on_reference,
        bias,
        empirical_sd: sds,
        mc_se,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct NonlinearityStudy {
    pub transform: Transform,
    pub naive_bias: f64,
    pub robust_bias: f64,
    pub naive_sd: f64,
    pub robust_sd: f64,
    pub mc_se: f64,
    pub replicates: usize,
}

/// Linear WSI under a nonlinear measure 2: the naive variant keeps using the
/// other measures as instruments for the contaminated scaling parameter; the
/// robust variant identifies every scaling parameter from the treatment
/// alone.
pub fn study_nonlinearity(
    n: usize,
    transform: Transform,
    effect_mean: f64,
    replicates: usize,
    seed: u64,
) -> Result<NonlinearityStudy> {
    let spec = DgpSpec::nonlinearity(n, transform, effect_mean);
    let truth = spec.true_alte();
    let outcomes: Vec<(f64, f64)> = (0..replicates)
        .into_par_iter()
        .filter_map(|r| {
            let data = generate(&spec, seeds::derive(seed, r as u64)).ok()?;
            let scheme = crate::index::WeightScheme::equal(3);
            let naive_roster = InstrumentRoster {
                treatments: false,
                other_measures: true,
                covariates: false,
            };
            let lam_naive =
                crate::identify::lambda_combined(&data, 0, naive_roster).ok()?;
            let wsi_naive = crate::index::build_wsi(&data, &lam_naive, &scheme).ok()?;
            let naive = crate::estimate::dim_wsi(&wsi_naive, &data, 0).ok()?.tau_hat;
            let lam_robust = crate::identify::lambda_combined(
                &data,
                0,
                InstrumentRoster::treatments_only(),
            )
            .ok()?;
            let wsi_robust = crate::index::build_wsi(&data, &lam_robust, &scheme).ok()?;
            let robust = crate::estimate::dim_wsi(&wsi_robust, &data, 0).ok()?.tau_hat;
            Some((naive, robust))
        })
        .collect();
    if outcomes.is_empty() {
        return Err(Error::Validation("all replicates failed".into()));
    }
    let naive: Vec<f64> = outcomes.iter().map(|o| o.0).collect();
    let robust: Vec<f64> = outcomes.iter().map(|o| o.1).collect();
    Ok(NonlinearityStudy {
        transform,
        naive_bias: mean(&naive) - truth,
        robust_bias: mean(&robust) - truth,
        naive_sd: variance(&naive).sqrt(),
        robust_sd: variance(&robust).sqrt(),
        mc_se: variance(&robust).sqrt() / (robust.len() as f64).sqrt(),
        replicates: outcomes.len(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceReductionRow {
    pub regime: String,
    pub j: usize,
    /// Mean of the per-replicate Neyman variance estimates.
    pub var_reported: f64,
    /// Empirical variance of the point estimates.
    pub var_empirical: f64,
    pub delta: Option<f64>,
    pub delta_ratio: Option<f64>,
    pub theory_ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceReductionTable {
    pub n: usize,
    pub replicates: usize,
    pub rows: Vec<VarianceReductionRow>,
}

impl VarianceReductionTable {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("regime,j,var_reported,var_empirical,delta,delta_ratio,theory_ratio\n");
        for r in &self.rows {
            let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.regime,
                r.j,
                r.var_reported,
                r.var_empirical,
                fmt(r.delta),
                fmt(r.delta_ratio),
                fmt(r.theory_ratio)
            ));
        }
        out
    }

    pub fn row(&self, regime: &str, j: usize) -> Option<&VarianceReductionRow> {
        self.rows.iter().find(|r| r.regime == regime && r.j == j)
    }
}

/// Empirical variance of the optimally weighted estimator as measures are
/// added, against the closed-form ratio `Delta(J+1)/Delta(J) = J/(J+2)`.
///
/// Scaling parameters are known (unit loadings); the weights use estimated
/// error variances. One dataset with the maximal J is generated per
/// replicate and truncated, so the deltas difference out common noise.
pub fn study_variance_reduction(
    n: usize,
    j_grid: &[usize],
    regimes: &[(String, f64)],
    replicates: usize,
    seed: u64,
) -> Result<VarianceReductionTable> {
    let j_max = *j_grid.iter().max().unwrap_or(&1);
    let mut rows = Vec::new();
    for (regime, err_sd) in regimes {
        let spec = DgpSpec::equal_reliability(n, j_max, *err_sd);
        let per_j: Vec<Vec<(f64, f64)>> = (0..replicates)
            .into_par_iter()
            .filter_map(|r| {
                let data = generate(&spec, seeds::derive(seed, r as u64)).ok()?;
                let mut row = Vec::with_capacity(j_grid.len());
                for &j in j_grid {
                    let sub = truncate_measures(&data, j).ok()?;
                    let lam = crate::identify::ScalingEstimate::identity(j, 0);
                    let scheme = if j == 1 {
                        crate::index::WeightScheme::equal(1)
                    } else {
                        let ev =
                            crate::index::estimate_error_variances(&sub, &lam, true).ok()?;
                        crate::index::make_weights(
                            WeightKind::InverseVariance,
                            &lam,
                            Some(&ev),
                            None,
                            None,
                        )
                        .ok()?
                    };
                    let wsi = crate::index::build_wsi(&sub, &lam, &scheme).ok()?;
                    let d = crate::estimate::dim_wsi(&wsi, &sub, 0).ok()?;
                    row.push((d.tau_hat, d.se * d.se));
                }
                Some(row)
            })
            .collect();
        if per_j.is_empty() {
            return Err(Error::Validation("all replicates failed".into()));
        }
        let mut var_reported = Vec::new();
        let mut var_empirical = Vec::new();
        for (idx, _) in j_grid.iter().enumerate() {
            let taus: Vec<f64> = per_j.iter().map(|row| row[idx].0).collect();
            let vars: Vec<f64> = per_j.iter().map(|row| row[idx].1).collect();
            var_reported.push(mean(&vars));
            var_empirical.push(variance(&taus));
        }
        for (idx, &j) in j_grid.iter().enumerate() {
            let delta = if idx + 1 < j_grid.len() {
                Some(var_reported[idx + 1] - var_reported[idx])
            } else {
                None
            };
            let delta_next = if idx + 2 < j_grid.len() {
                Some(var_reported[idx + 2] - var_reported[idx + 1])
            } else {
                None
            };
            rows.push(VarianceReductionRow {
                regime: regime.clone(),
                j,
                var_reported: var_reported[idx],
                var_empirical: var_empirical[idx],
                delta,
                delta_ratio: match (delta, delta_next) {
                    (Some(d), Some(dn)) if d != 0.0 => Some(dn / d),
                    _ => None,
                },
                theory_ratio: if idx + 2 < j_grid.len() {
                    Some(j as f64 / (j as f64 + 2.0))
                } else {
                    None
                },
            });
        }
    }
    Ok(VarianceReductionTable {
        n,
        replicates,
        rows,
    })
}

/// Keeps the first `j` outcome columns.
fn truncate_measures(data: &ExperimentData, j: usize) -> Result<ExperimentData> {
    let treatments = (0..data.n_arms())
        .map(|t| {
            (
                data.treatment_labels()[t].clone(),
                data.treatment(t).as_slice().to_vec(),
            )
        })
        .collect();
    let outcomes = (0..j)
        .map(|m| {
            (
                data.outcome_labels()[m].clone(),
                data.outcome(m).as_slice().to_vec(),
            )
        })
        .collect();
    let covariates = (0..data.n_covariates())
        .map(|p| {
            (
                data.covariate_labels()[p].clone(),
                data.covariate(p).as_slice().to_vec(),
            )
        })
        .collect();
    ExperimentData::from_columns(treatments, outcomes, covariates, data.dropped_rows())
}

// ---------------------------------------------------------------------------
// Synthetic application data
// ---------------------------------------------------------------------------

/// Generating parameters of the bundled synthetic application dataset:
/// two mutually exclusive arms plus control, one baseline covariate, two
/// index outcomes driven by a common latent attitude.
#[derive(Debug, Clone, Copy)]
pub struct ApplicationTruth {
    pub n: usize,
    pub beta_full: f64,
    pub beta_brief: f64,
    pub gamma_covariate: f64,
    pub lambda2: f64,
    pub psi: f64,
    pub sigma2: [f64; 2],
    pub covariate_mean: f64,
    pub covariate_var: f64,
    pub intercepts: [f64; 2],
}

pub const APPLICATION_TRUTH: ApplicationTruth = ApplicationTruth {
    n: 1578,
    beta_full: 0.431,
    beta_brief: 0.090,
    gamma_covariate: 0.662,
    lambda2: 1.549,
    psi: 1.32,
    sigma2: [2.52, 6.70],
    covariate_mean: 1.76,
    covariate_var: 19.318,
    intercepts: [0.721, 0.5566],
};

/// Synthetic dataset shaped like the door-to-door canvassing application:
/// n = 1578 split evenly over full treatment, brief treatment, and control.
pub fn application_synthetic(seed: u64) -> ExperimentData {
    let t = APPLICATION_TRUTH;
    let n = t.n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = n / 3;
    let mut cells: Vec<u8> = (0..n)
        .map(|i| {
            if i < per {
                1
            } else if i < 2 * per {
                2
            } else {
                0
            }
        })
        .collect();
    cells.shuffle(&mut rng);
    let z1: Vec<f64> = cells.iter().map(|&c| (c == 1) as u8 as f64).collect();
    let z2: Vec<f64> = cells.iter().map(|&c| (c == 2) as u8 as f64).collect();
    let x_dist = Normal::new(t.covariate_mean, t.covariate_var.sqrt()).unwrap();
    let zeta = Normal::new(0.0, t.psi.sqrt()).unwrap();
    let e1 = Normal::new(0.0, t.sigma2[0].sqrt()).unwrap();
    let e2 = Normal::new(0.0, t.sigma2[1].sqrt()).unwrap();
    let mut x = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    let mut y2 = Vec::with_capacity(n);
    for i in 0..n {
        let xi = x_dist.sample(&mut rng);
        let eta = t.beta_full * z1[i]
            + t.beta_brief * z2[i]
            + t.gamma_covariate * xi
            + zeta.sample(&mut rng);
        x.push(xi);
        y1.push(t.intercepts[0] + eta + e1.sample(&mut rng));
        y2.push(t.intercepts[1] + t.lambda2 * eta + e2.sample(&mut rng));
    }
    ExperimentData::from_columns(
        vec![("treat_full".into(), z1), ("treat_brief".into(), z2)],
        vec![("attitudes".into(), y1), ("policy_views".into(), y2)],
        vec![("baseline".into(), x)],
        0,
    )
    .expect("synthetic application data is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn generate_is_deterministic() {
        let spec = DgpSpec::recovery_three_measures(200);
        let a = generate(&spec, 42).unwrap();
        let b = generate(&spec, 42).unwrap();
        assert_eq!(a.outcomes(), b.outcomes());
        assert_eq!(a.treatments(), b.treatments());
        let c = generate(&spec, 43).unwrap();
        assert_ne!(a.outcomes(), c.outcomes());
    }

    #[test]
    fn generate_matches_closed_form_moments() {
        // columns of the three-measure recovery DGP have known means and
        // variances
        let spec = DgpSpec::recovery_three_measures(100_000);
        let data = generate(&spec, 7).unwrap();
        // eta = 1 + z + noise(sd 2); E[y2] = 2 + E[eta] = 2 + 1.5
        let y2 = data.outcome(1);
        assert!((mean(y2.as_slice()) - 3.5).abs() < 0.05);
        // Var(y2) = Var(eta) + 4 = (0.25 + 4) + 4
        assert!((variance(y2.as_slice()) - 8.25).abs() < 0.2);
        // y1: intercept 3 + 0.1 eta, sd 5
        let y1 = data.outcome(0);
        assert!((mean(y1.as_slice()) - 3.15).abs() < 0.06);
        let n1 = data.arm_rows(0).len();
        assert_eq!(n1, 50_000);
    }

    #[test]
    fn generate_zero_error_identical_columns() {
        let mut spec = DgpSpec::recovery_three_measures(500);
        spec.measures = vec![MeasureSpec::linear(1.0, 0.0), MeasureSpec::linear(1.0, 0.0)];
        let data = generate(&spec, 11).unwrap();
        for i in 0..data.n() {
            assert_relative_eq!(
                data.outcomes()[(i, 0)],
                data.outcomes()[(i, 1)],
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn irt_indices_land_in_item_range() {
        let spec = DgpSpec::irt_additive_index(400, 20);
        let data = generate(&spec, 13).unwrap();
        let labels = data.outcome_labels();
        assert_eq!(labels, &["index", "index_a", "index_b", "eta"]);
        for col in [1usize, 2] {
            let v = data.outcome(col);
            assert!(v.iter().all(|&x| (0.0..=10.0).contains(&x)));
        }
        let idx = data.outcome(0);
        assert!(idx.iter().all(|&x| (0.0..=20.0).contains(&x)));
    }

    #[test]
    fn error_correlation_is_respected() {
        let mut spec = DgpSpec::recovery_three_measures(60_000);
        spec.error_correlations = vec![(0, 2, 0.5)];
        let data = generate(&spec, 17).unwrap();
        // measure the error correlation via residual covariance after
        // removing the latent part: Cov(y1, y3) = l1*l3*Var(eta) + rho*s1*s3
        let y1 = data.outcome(0);
        let y3 = data.outcome(2);
        let c13 = crate::linreg::covariance(y1.as_slice(), y3.as_slice());
        let var_eta = 4.25; // 4 + 0.25
        let implied_err_cov = c13 - 0.1 * 0.5 * var_eta;
        assert!(
            (implied_err_cov - 0.5 * 5.0 * 1.0).abs() < 0.15,
            "err cov {implied_err_cov}"
        );
    }

    #[test]
    fn run_mc_is_deterministic_and_reports_all_estimators() {
        let spec = DgpSpec::power_three_measures(120, 0.3);
        let roster = [McEstimator::WsiEqual, McEstimator::Icw, McEstimator::Pca];
        let a = run_mc(&spec, &roster, 30, 42, 0.05).unwrap();
        let b = run_mc(&spec, &roster, 30, 42, 0.05).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(a.estimators.len(), 3);
        for e in &a.estimators {
            assert!(e.rejection_rate >= 0.0 && e.rejection_rate <= 1.0);
        }
    }

    #[test]
    fn size_is_near_nominal_under_the_null() {
        let spec = DgpSpec::power_three_measures(300, 0.0);
        let report = run_mc(
            &spec,
            &[McEstimator::WsiEqual, McEstimator::EqualStd],
            400,
            7,
            0.05,
        )
        .unwrap();
        for e in &report.estimators {
            assert!(
                (e.rejection_rate - 0.05).abs() < 0.035,
                "{} size {}",
                e.estimator,
                e.rejection_rate
            );
        }
    }

    #[test]
    fn equal_weights_wsi_equals_stacked_regression_per_replicate() {
        let spec = DgpSpec::recovery_three_measures(300);
        for r in 0..5 {
            let data = generate(&spec, seeds::derive(99, r)).unwrap();
            let lam = crate::identify::lambda_combined(
                &data,
                1,
                InstrumentRoster::treatments_only(),
            )
            .unwrap();
            let scheme = crate::index::WeightScheme::equal(3);
            let wsi = crate::index::build_wsi(&data, &lam, &scheme).unwrap();
            let d = crate::estimate::dim_wsi(&wsi, &data, 0).unwrap();
            let s = crate::estimate::stacked_regression(&data, &lam, &scheme, 0).unwrap();
            assert_relative_eq!(d.tau_hat, s.tau_hat, epsilon = 1e-10);
        }
    }

    #[test]
    fn application_synthetic_matches_published_shape() {
        let data = application_synthetic(42);
        assert_eq!(data.n(), 1578);
        assert_eq!(data.n_arms(), 2);
        assert_eq!(data.n_outcomes(), 2);
        assert_eq!(data.n_covariates(), 1);
        assert_eq!(data.arm_rows(0).len(), 526);
        assert_eq!(data.arm_rows(1).len(), 526);
        assert_eq!(data.control_rows().len(), 526);
        // covariance shape: Cov(z1, z2) = -1/9 for exclusive thirds
        let m = data.moments();
        let i1 = m.index_of("treat_full").unwrap();
        let i2 = m.index_of("treat_brief").unwrap();
        assert!((m.cov[(i1, i2)] + 1.0 / 9.0).abs() < 0.005);
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = DgpSpec::power_three_measures(500, 0.25);
        let json = serde_json::to_string_pretty(&spec).unwrap();
        let back: DgpSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back.n, 500);
        assert_eq!(back.measures.len(), 3);
        assert_eq!(spec.true_alte(), back.true_alte());
    }
}
