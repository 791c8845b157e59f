//! Estimation of average latent treatment effects (ALTE) from randomized
//! experiments with multiple error-prone outcome measures.
//!
//! An unobserved outcome is measured by J noisy indicators
//! `Y_j = lambda_j * eta + e_j`. Fixing `lambda_1 = 1` puts the latent
//! outcome on the scale of a chosen reference measure; the remaining scaling
//! parameters are identified by instrumental variables (treatment arms, the
//! other measures, or covariates). A weighted scaled index
//! `sum_j w_j Y_j / lambda_j` then serves as a regression outcome with an
//! interpretable, study-comparable metric.
//!
//! The crate covers the estimation pipeline (`identify`, `index`,
//! `estimate`), covariance-structure model fits with chi-square tests
//! (`structural`), nonparametric bridges for discrete measures (`bridge`),
//! reference estimators (`baselines`), specification diagnostics
//! (`diagnose`), a seeded Monte Carlo lab (`simlab`), and a design-budget
//! planner (`planner`). Each major capability has a runnable example under
//! `examples/`; the thin `alte` binary exposes the same workflows as
//! subcommands.

pub mod baselines;
pub mod bridge;
pub mod cli;
pub mod dataset;
pub mod diagnose;
pub mod error;
pub mod estimate;
pub mod identify;
pub mod index;
pub mod planner;
pub mod report;
pub mod seeds;
pub mod simlab;
pub mod structural;

mod linreg;

pub use dataset::{ColumnSchema, ExperimentData, MomentSummary};
pub use error::{Error, Result};
pub use estimate::{AlteResult, EstimatorKind, VarianceMethod};
pub use identify::{InstrumentRoster, ScalingEstimate};
pub use index::{WeightKind, WeightScheme, WsiOutcome};
