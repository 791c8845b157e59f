//! Command-line workflows: estimation from CSV files, diagnostics,
//! simulation studies, power curves, design planning, and side-by-side
//! method comparison. The `alte` binary is a thin wrapper over
//! [`execute`]; every subcommand writes its artifacts atomically and is
//! byte-reproducible from `(input, flags, seed)`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::baselines;
use crate::dataset::{ColumnSchema, ExperimentData};
use crate::diagnose;
use crate::error::{Error, Result};
use crate::estimate::{self, AlteResult, GmmOptions};
use crate::identify::{lambda_combined, InstrumentRoster, ScalingEstimate};
use crate::index::{self, WeightKind};
use crate::planner;
use crate::report::{self, write_atomic};
use crate::simlab::{self, DgpSpec, McEstimator, Transform};
use crate::structural::{self, DiscrepancyKind, GroupConstraints, StructuralModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Table,
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(
    name = "alte",
    about = "Average latent treatment effects from multi-measure experiments",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Output directory; defaults to $ALTE_OUT_DIR, then the working
    /// directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for anything randomized (bootstrap, simulations).
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Cap on simulation worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Table)]
    pub format: OutputFormat,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the ALTE from a CSV file.
    Estimate(EstimateArgs),
    /// Linearity diagnostics on measure pairs.
    Diagnose(DiagnoseArgs),
    /// Monte Carlo runs and robustness studies.
    Simulate(SimulateArgs),
    /// Power curves over a grid of latent effects.
    Power(PowerArgs),
    /// Budget split between extra measures and extra subjects.
    Design(DesignArgs),
    /// Side-by-side comparison of WSI, structural, and SUR estimates.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct SchemaArgs {
    /// Input CSV (header row required).
    #[arg(long)]
    pub input: PathBuf,
    /// Comma-separated treatment indicator columns.
    #[arg(long, value_delimiter = ',')]
    pub treatment: Vec<String>,
    /// Comma-separated outcome columns.
    #[arg(long, value_delimiter = ',')]
    pub outcomes: Vec<String>,
    /// Comma-separated covariate columns.
    #[arg(long, value_delimiter = ',', default_value = "")]
    pub covariates: Vec<String>,
    /// Outcome that sets the latent scale (defaults to the first outcome).
    #[arg(long)]
    pub reference: Option<String>,
}

impl SchemaArgs {
    fn load(&self) -> Result<(ExperimentData, usize)> {
        let covariates: Vec<String> = self
            .covariates
            .iter()
            .filter(|c| !c.is_empty())
            .cloned()
            .collect();
        let schema = ColumnSchema {
            treatments: self.treatment.clone(),
            outcomes: self.outcomes.clone(),
            covariates,
        };
        let data = ExperimentData::ingest_csv(&self.input, &schema)?;
        let reference = match &self.reference {
            None => 0,
            Some(r) => self
                .outcomes
                .iter()
                .position(|o| o == r)
                .ok_or_else(|| {
                    Error::Schema(format!("reference `{r}` is not an outcome column"))
                })?,
        };
        Ok((data, reference))
    }
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub schema: SchemaArgs,
    /// equal | optimal | user:w1,w2,...
    #[arg(long, default_value = "optimal")]
    pub weights: String,
    /// neyman | gmm | bootstrap
    #[arg(long, default_value = "gmm")]
    pub variance: String,
    /// Instruments for the scaling parameters:
    /// treatments | measures | treatments+measures[+covariates]
    #[arg(long, default_value = "treatments+measures")]
    pub instruments: String,
    /// Covariate-adjusted regression instead of difference in means.
    #[arg(long)]
    pub adjusted: bool,
    /// Bootstrap draws when --variance bootstrap.
    #[arg(long, default_value_t = 1000)]
    pub replicates: usize,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub schema: SchemaArgs,
    /// `all` (every outcome against the reference) or `label1,label2`.
    #[arg(long, default_value = "all")]
    pub pairs: String,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long, default_value_t = 0.5)]
    pub central_fraction: f64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// DGP spec as JSON (see `DgpSpec`); or use --preset.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// recovery | power | bridge (built-in specs).
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, default_value_t = 1000)]
    pub replicates: usize,
    /// Comma-separated roster: wsi_optimal, wsi_equal, structural, icw,
    /// pca, equal_std.
    #[arg(long, value_delimiter = ',', default_value = "wsi_optimal")]
    pub estimators: Vec<String>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Sample size for presets.
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    /// Robustness study instead of a plain run:
    /// exclusion | nonlinearity | variance-reduction
    #[arg(long)]
    pub study: Option<String>,
    /// Leak size for the exclusion study.
    #[arg(long, default_value_t = 0.05)]
    pub leak: f64,
    /// Valid-measure grid for the exclusion study.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6")]
    pub valid_grid: Vec<usize>,
    /// Put the leak on the reference measure (exclusion study).
    #[arg(long)]
    pub leak_on_reference: bool,
    /// quadratic | exponential (nonlinearity study).
    #[arg(long, default_value = "quadratic")]
    pub transform: String,
    /// Treated latent mean for the nonlinearity study.
    #[arg(long, default_value_t = 1.5)]
    pub effect_mean: f64,
    /// Measure-count grid for the variance-reduction study.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6")]
    pub j_grid: Vec<usize>,
    /// Error-sd regimes for the variance-reduction study, label:sd pairs.
    #[arg(long, value_delimiter = ',', default_value = "high:2.0,low:5.0")]
    pub regimes: Vec<String>,
}

#[derive(Debug, Args)]
pub struct PowerArgs {
    /// Base DGP spec as JSON; defaults to the built-in three-measure design.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.15,0.25,0.35,0.45")]
    pub theta: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    pub replicates: usize,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "wsi_optimal,structural,wsi_equal,icw,pca"
    )]
    pub estimators: Vec<String>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
}

#[derive(Debug, Args)]
pub struct DesignArgs {
    #[arg(long)]
    pub budget: f64,
    #[arg(long)]
    pub cost_measure: f64,
    #[arg(long)]
    pub cost_subject: f64,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub measures: usize,
    /// Reliability of one measure; mapped to an error variance via
    /// `sigma2 = latent_var * (1 - r)/r`.
    #[arg(long)]
    pub reliability: Option<f64>,
    /// Error variance of one measure (overrides --reliability).
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// Latent variance per arm.
    #[arg(long, default_value_t = 1.0)]
    pub latent_var: f64,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub schema: SchemaArgs,
    /// Also run the measurement-equivalence test across treatment cells.
    #[arg(long)]
    pub equivalence: bool,
}

/// Runs a parsed command; returns the process exit code.
pub fn execute(cli: &Cli) -> i32 {
    if let Some(jobs) = cli.jobs {
        // ignore failure when a pool already exists (repeat invocations in
        // one process)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Schema(_)
                | Error::Validation(_)
                | Error::DegenerateDesign(_)
                | Error::Io(_)
                | Error::Csv(_)
                | Error::Json(_) => 1,
                _ => 2,
            }
        }
    }
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os("ALTE_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Estimate(args) => run_estimate(cli, args),
        Command::Diagnose(args) => run_diagnose(cli, args),
        Command::Simulate(args) => run_simulate(cli, args),
        Command::Power(args) => run_power(cli, args),
        Command::Design(args) => run_design(cli, args),
        Command::Compare(args) => run_compare(cli, args),
    }
}

fn parse_roster(s: &str) -> Result<InstrumentRoster> {
    let mut roster = InstrumentRoster {
        treatments: false,
        other_measures: false,
        covariates: false,
    };
    for part in s.split('+') {
        match part.trim() {
            "treatments" | "treatment" | "arms" => roster.treatments = true,
            "measures" | "other_measures" => roster.other_measures = true,
            "covariates" => roster.covariates = true,
            other => {
                return Err(Error::Validation(format!(
                    "unknown instrument group `{other}`"
                )))
            }
        }
    }
    Ok(roster)
}

fn parse_weights(s: &str, j: usize) -> Result<(WeightKind, Option<Vec<f64>>)> {
    match s {
        "equal" => Ok((WeightKind::Equal, None)),
        "optimal" | "ivw" | "inverse_variance" => Ok((WeightKind::InverseVariance, None)),
        other if other.starts_with("user:") => {
            let weights: Vec<f64> = other[5..]
                .split(',')
                .map(|w| {
                    w.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Validation(format!("bad weight `{w}`")))
                })
                .collect::<Result<_>>()?;
            if weights.len() != j {
                return Err(Error::Validation(format!(
                    "{} user weights for {j} outcomes",
                    weights.len()
                )));
            }
            Ok((WeightKind::User, Some(weights)))
        }
        other => Err(Error::Validation(format!("unknown weight kind `{other}`"))),
    }
}

#[derive(Serialize)]
struct DataSummary {
    n: usize,
    dropped_rows: usize,
    treatments: Vec<String>,
    outcomes: Vec<String>,
    covariates: Vec<String>,
}

impl DataSummary {
    fn of(data: &ExperimentData) -> Self {
        Self {
            n: data.n(),
            dropped_rows: data.dropped_rows(),
            treatments: data.treatment_labels().to_vec(),
            outcomes: data.outcome_labels().to_vec(),
            covariates: data.covariate_labels().to_vec(),
        }
    }
}

#[derive(Serialize)]
struct EstimateEnvelope<'a> {
    schema_version: u32,
    command: &'static str,
    seed: u64,
    data: DataSummary,
    scaling: &'a ScalingEstimate,
    error_variances: Option<&'a index::ErrorVarianceEstimate>,
    weights: &'a index::WeightScheme,
    estimates: &'a [AlteResult],
    warnings: &'a [String],
}

fn emit_warnings(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn run_estimate(cli: &Cli, args: &EstimateArgs) -> Result<()> {
    let (data, reference) = args.schema.load()?;
    let roster = parse_roster(&args.instruments)?;
    let scaling = lambda_combined(&data, reference, roster)?;
    let j = data.n_outcomes();
    let (kind, user) = parse_weights(&args.weights, j)?;
    let errvar = if j >= 2 {
        Some(index::estimate_error_variances(&data, &scaling, true)?)
    } else {
        None
    };
    let scheme = match kind {
        WeightKind::Equal => index::WeightScheme::equal(j),
        WeightKind::User => index::WeightScheme::user(user.unwrap())?,
        _ => index::make_weights(kind, &scaling, errvar.as_ref(), None, None)?,
    };
    let wsi = index::build_wsi(&data, &scaling, &scheme)?;

    let mut warnings: Vec<String> = Vec::new();
    warnings.extend(scaling.warnings.iter().cloned());
    if let Some(ev) = &errvar {
        warnings.extend(ev.warnings.iter().cloned());
    }
    warnings.extend(scheme.warnings.iter().cloned());
    if data.dropped_rows() > 0 {
        warnings.push(format!(
            "{} rows dropped during ingestion (missing values)",
            data.dropped_rows()
        ));
    }

    let arms: Vec<usize> = (0..data.n_arms()).collect();
    let covs: Vec<usize> = (0..data.n_covariates()).collect();
    let estimates: Vec<AlteResult> = match args.variance.as_str() {
        "neyman" => {
            if args.adjusted || data.n_arms() > 1 {
                estimate::ols_adjusted(&data, &wsi, &arms, if args.adjusted { &covs } else { &[] })?
            } else {
                vec![estimate::dim_wsi(&wsi, &data, 0)?]
            }
        }
        "gmm" => {
            if args.adjusted {
                // covariate adjustment runs through the regression path
                estimate::ols_adjusted(&data, &wsi, &arms, &covs)?
            } else {
                let mut out = Vec::new();
                for &arm in &arms {
                    let fit = estimate::gmm_joint(
                        &data,
                        &GmmOptions {
                            arm,
                            reference,
                            roster,
                            weight_kind: if kind == WeightKind::User {
                                WeightKind::Equal
                            } else {
                                kind
                            },
                            ..GmmOptions::default()
                        },
                    )?;
                    out.push(fit.alte);
                }
                out
            }
        }
        "bootstrap" => {
            let mut out = Vec::new();
            for &arm in &arms {
                let base = estimate::dim_wsi(&wsi, &data, arm)?;
                let scheme_b = scheme.clone();
                let boot = estimate::bootstrap(&data, args.replicates, cli.seed, |d| {
                    let lam = lambda_combined(d, reference, roster)?;
                    let s = match kind {
                        WeightKind::Equal | WeightKind::User => scheme_b.clone(),
                        _ => {
                            let ev = index::estimate_error_variances(d, &lam, true)?;
                            index::make_weights(kind, &lam, Some(&ev), None, None)?
                        }
                    };
                    let w = index::build_wsi(d, &lam, &s)?;
                    Ok(estimate::dim_wsi(&w, d, arm)?.tau_hat)
                })?;
                let mut r = base;
                r.se = boot.se;
                r.ci95 = boot.ci95;
                r.variance_method = estimate::VarianceMethod::Bootstrap;
                out.push(r);
            }
            out
        }
        other => {
            return Err(Error::Validation(format!(
                "unknown variance method `{other}`"
            )))
        }
    };
    for e in &estimates {
        warnings.extend(e.warnings.iter().cloned());
    }

    let envelope = EstimateEnvelope {
        schema_version: 1,
        command: "estimate",
        seed: cli.seed,
        data: DataSummary::of(&data),
        scaling: &scaling,
        error_variances: errvar.as_ref(),
        weights: &scheme,
        estimates: &estimates,
        warnings: &warnings,
    };
    let json = report::to_json_string(&envelope)?;
    let dir = out_dir(cli);
    write_atomic(dir.join("estimate.json"), &json)?;
    emit_warnings(&warnings);
    match cli.format {
        OutputFormat::Json => print!("{json}"),
        _ => {
            let rows: Vec<report::TableRow> = estimates
                .iter()
                .map(|e| report::TableRow {
                    label: e.arm_label.clone(),
                    cells: vec![Some((e.tau_hat, e.se, e.p_value()))],
                })
                .collect();
            print!(
                "{}",
                report::render_table("ALTE estimates (reference scale)", &["WSI".into()], &rows)
            );
            println!(
                "lambda: [{}]",
                scaling
                    .lambda
                    .iter()
                    .map(|l| format!("{l:.3}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            if let Some(o) = &scaling.overid_stat {
                if o.df > 0 {
                    println!("overidentification J = {:.3} (df {}, p = {:.3})", o.j_stat, o.df, o.p_value);
                }
            }
        }
    }
    Ok(())
}

fn run_diagnose(cli: &Cli, args: &DiagnoseArgs) -> Result<()> {
    let (data, reference) = args.schema.load()?;
    let pairs: Vec<(usize, usize)> = if args.pairs == "all" {
        (0..data.n_outcomes())
            .filter(|&j| j != reference)
            .map(|j| (j, reference))
            .collect()
    } else {
        let names: Vec<&str> = args.pairs.split(',').collect();
        if names.len() != 2 {
            return Err(Error::Validation(
                "--pairs expects `all` or two outcome labels".into(),
            ));
        }
        let find = |n: &str| {
            data.outcome_labels()
                .iter()
                .position(|l| l == n)
                .ok_or_else(|| Error::Schema(format!("outcome `{n}` not found")))
        };
        vec![(find(names[0])?, find(names[1])?)]
    };
    if pairs.len() > 1 {
        eprintln!(
            "note: testing {} pairs; a Bonferroni-adjusted level is 0.05/{} = {:.4}",
            pairs.len(),
            pairs.len(),
            0.05 / pairs.len() as f64
        );
    }
    #[derive(Serialize)]
    struct DiagnoseEnvelope {
        schema_version: u32,
        command: &'static str,
        tests: Vec<diagnose::SpecTestResult>,
        pair_labels: Vec<(String, String)>,
        warnings: Vec<String>,
    }
    let mut tests = Vec::new();
    let mut labels = Vec::new();
    let mut warnings = Vec::new();
    let dir = out_dir(cli);
    for &(j, k) in &pairs {
        labels.push((
            data.outcome_labels()[j].clone(),
            data.outcome_labels()[k].clone(),
        ));
        match diagnose::reset_test(&data, j, k, &[2, 3]) {
            Ok(t) => tests.push(t),
            Err(e) => warnings.push(format!("reset({j},{k}): {e}")),
        }
        match diagnose::rainbow_test(&data, j, k, args.central_fraction) {
            Ok(t) => tests.push(t),
            Err(e) => warnings.push(format!("rainbow({j},{k}): {e}")),
        }
        let series = diagnose::scatter_smooth(&data, j, k, args.bins)?;
        let csv = diagnose::series_to_csv(&series);
        write_atomic(
            dir.join(format!(
                "diagnose_{}_vs_{}.csv",
                data.outcome_labels()[j],
                data.outcome_labels()[k]
            )),
            &csv,
        )?;
    }
    let envelope = DiagnoseEnvelope {
        schema_version: 1,
        command: "diagnose",
        tests,
        pair_labels: labels,
        warnings: warnings.clone(),
    };
    let json = report::to_json_string(&envelope)?;
    write_atomic(dir.join("diagnose.json"), &json)?;
    emit_warnings(&warnings);
    if cli.format == OutputFormat::Json {
        print!("{json}");
    } else {
        for t in &envelope.tests {
            println!(
                "{:?} on ({}, {}): F = {:.4} (df {}, {}), p = {:.4}",
                t.test,
                envelope.pair_labels[0].0,
                envelope.pair_labels[0].1,
                t.statistic,
                t.df1,
                t.df2,
                t.p_value
            );
        }
    }
    Ok(())
}

fn load_spec(args_spec: &Option<PathBuf>, preset: &Option<String>, n: usize) -> Result<DgpSpec> {
    match (args_spec, preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)?;
            Ok(serde_json::from_str(&text)?)
        }
        (None, Some(p)) => match p.as_str() {
            "recovery" => Ok(DgpSpec::recovery_three_measures(n)),
            "power" => Ok(DgpSpec::power_three_measures(n, 0.25)),
            "bridge" => Ok(DgpSpec::binary_bridge(n)),
            other => Err(Error::Validation(format!("unknown preset `{other}`"))),
        },
        (None, None) => Ok(DgpSpec::recovery_three_measures(n)),
    }
}

fn parse_estimators(names: &[String]) -> Result<Vec<McEstimator>> {
    names.iter().map(|s| McEstimator::parse(s)).collect()
}

fn run_simulate(cli: &Cli, args: &SimulateArgs) -> Result<()> {
    let dir = out_dir(cli);
    match args.study.as_deref() {
        None => {
            let spec = load_spec(&args.spec, &args.preset, args.n)?;
            let roster = parse_estimators(&args.estimators)?;
            let report =
                simlab::run_mc(&spec, &roster, args.replicates, cli.seed, args.alpha)?;
            let json = report::to_json_string(&report)?;
            write_atomic(dir.join("mc_report.json"), &json)?;
            write_atomic(dir.join("mc_report.csv"), &report.to_csv())?;
            if cli.format == OutputFormat::Json {
                print!("{json}");
            } else {
                print!("{}", report.to_csv());
            }
        }
        Some("exclusion") => {
            let study = simlab::study_exclusion_violation(
                args.n.max(2000),
                args.leak,
                &args.valid_grid,
                args.replicates,
                cli.seed,
                args.leak_on_reference,
            )?;
            let json = report::to_json_string(&study)?;
            write_atomic(dir.join("exclusion_study.json"), &json)?;
            print!("{json}");
        }
        Some("nonlinearity") => {
            let transform = match args.transform.as_str() {
                "quadratic" => Transform::Quadratic,
                "exponential" => Transform::Exponential,
                "identity" => Transform::Identity,
                other => {
                    return Err(Error::Validation(format!(
                        "unknown transform `{other}`"
                    )))
                }
            };
            let study = simlab::study_nonlinearity(
                args.n.max(1000),
                transform,
                args.effect_mean,
                args.replicates,
                cli.seed,
            )?;
            let json = report::to_json_string(&study)?;
            write_atomic(dir.join("nonlinearity_study.json"), &json)?;
            print!("{json}");
        }
        Some("variance-reduction") | Some("variance_reduction") => {
            let regimes: Vec<(String, f64)> = args
                .regimes
                .iter()
                .map(|r| {
                    let (label, sd) = r.split_once(':').ok_or_else(|| {
                        Error::Validation(format!("regime `{r}` is not label:sd"))
                    })?;
                    Ok((
                        label.to_string(),
                        sd.parse::<f64>()
                            .map_err(|_| Error::Validation(format!("bad sd in `{r}`")))?,
                    ))
                })
                .collect::<Result<_>>()?;
            let table = simlab::study_variance_reduction(
                args.n,
                &args.j_grid,
                &regimes,
                args.replicates,
                cli.seed,
            )?;
            write_atomic(dir.join("variance_reduction.csv"), &table.to_csv())?;
            let json = report::to_json_string(&table)?;
            write_atomic(dir.join("variance_reduction.json"), &json)?;
            print!("{}", table.to_csv());
        }
        Some(other) => {
            return Err(Error::Validation(format!("unknown study `{other}`")));
        }
    }
    Ok(())
}

fn run_power(cli: &Cli, args: &PowerArgs) -> Result<()> {
    let base = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)?
        }
        None => DgpSpec::power_three_measures(args.n, 0.0),
    };
    let roster = parse_estimators(&args.estimators)?;
    let study = simlab::power_study(
        &base,
        &args.theta,
        &roster,
        args.replicates,
        cli.seed,
        args.alpha,
    )?;
    let dir = out_dir(cli);
    write_atomic(dir.join("power_curve.csv"), &study.to_csv())?;
    write_atomic(dir.join("power.json"), &report::to_json_string(&study)?)?;
    print!("{}", study.to_csv());
    Ok(())
}

fn run_design(cli: &Cli, args: &DesignArgs) -> Result<()> {
    let sigma2 = match (args.sigma2, args.reliability) {
        (Some(s2), _) => s2,
        (None, Some(r)) => {
            if !(0.0 < r && r < 1.0) {
                return Err(Error::Validation("reliability must be in (0, 1)".into()));
            }
            args.latent_var * (1.0 - r) / r
        }
        (None, None) => {
            return Err(Error::Validation(
                "provide --sigma2 or --reliability".into(),
            ))
        }
    };
    let problem = planner::DesignProblem {
        n: args.n,
        n_measures: args.measures,
        budget: args.budget,
        cost_per_measure: args.cost_measure,
        cost_per_subject: args.cost_subject,
        latent_var_treated: args.latent_var,
        latent_var_control: args.latent_var,
        per_measure_precision: 1.0 / sigma2,
        existing: None,
    };
    let solution = planner::optimize_budget(&problem)?;
    let dir = out_dir(cli);
    #[derive(Serialize)]
    struct DesignEnvelope<'a> {
        schema_version: u32,
        command: &'static str,
        problem: &'a planner::DesignProblem,
        solution: &'a planner::DesignSolution,
    }
    let json = report::to_json_string(&DesignEnvelope {
        schema_version: 1,
        command: "design",
        problem: &problem,
        solution: &solution,
    })?;
    write_atomic(dir.join("design.json"), &json)?;
    let mut frontier = String::from("extra_measures,extra_subjects,cost,variance\n");
    for p in &solution.frontier {
        frontier.push_str(&format!(
            "{},{},{},{}\n",
            p.extra_measures, p.extra_subjects, p.cost, p.variance
        ));
    }
    write_atomic(dir.join("design_frontier.csv"), &frontier)?;
    println!(
        "optimal allocation: ({} measures, {} subjects); forecast variance {:.6} (status quo {:.6})",
        solution.extra_measures,
        solution.extra_subjects,
        solution.variance,
        solution.status_quo_variance
    );
    Ok(())
}

fn run_compare(cli: &Cli, args: &CompareArgs) -> Result<()> {
    let (data, reference) = args.schema.load()?;
    let arms: Vec<usize> = (0..data.n_arms()).collect();
    let covs: Vec<usize> = (0..data.n_covariates()).collect();
    let dir = out_dir(cli);

    if data.n_outcomes() < 2 {
        // single outcome: no scaling to identify; report SUR only
        let sur = baselines::sur_fit(&data, &arms, &covs)?;
        let json = report::to_json_string(&sur)?;
        write_atomic(dir.join("compare.json"), &json)?;
        println!(
            "single outcome column: latent-model comparison needs J >= 2; \
             reporting per-outcome regression only"
        );
        print!("{json}");
        return Ok(());
    }

    let roster = InstrumentRoster {
        treatments: true,
        other_measures: data.n_outcomes() > 2,
        covariates: false,
    };
    let scaling = lambda_combined(&data, reference, roster)?;
    let scaling_cov = if data.n_covariates() > 0 {
        Some(lambda_combined(&data, reference, roster.with_covariates())?)
    } else {
        None
    };
    let errvar = index::estimate_error_variances(&data, &scaling, true)?;
    let scheme = index::make_weights(
        WeightKind::InverseVariance,
        &scaling,
        Some(&errvar),
        None,
        None,
    )?;
    let wsi = index::build_wsi(&data, &scaling, &scheme)?;
    let wsi_unadjusted = estimate::ols_adjusted(&data, &wsi, &arms, &[])?;
    let wsi_adjusted = if data.n_covariates() > 0 {
        let scaling_a = scaling_cov.as_ref().unwrap();
        let errvar_a = index::estimate_error_variances(&data, scaling_a, true)?;
        let scheme_a = index::make_weights(
            WeightKind::InverseVariance,
            scaling_a,
            Some(&errvar_a),
            None,
            None,
        )?;
        let wsi_a = index::build_wsi(&data, scaling_a, &scheme_a)?;
        Some(estimate::ols_adjusted(&data, &wsi_a, &arms, &covs)?)
    } else {
        None
    };

    let latent_plain = StructuralModel::latent(data.n_arms(), 0, data.n_outcomes());
    let data_no_cov = strip_covariates(&data)?;
    let fit_plain = structural::fit(
        &latent_plain,
        structural::FitInput::Data(&data_no_cov),
        DiscrepancyKind::Gls,
    )?;
    let fit_cov = if data.n_covariates() > 0 {
        let latent_cov =
            StructuralModel::latent(data.n_arms(), data.n_covariates(), data.n_outcomes());
        Some(structural::fit(
            &latent_cov,
            structural::FitInput::Data(&data),
            DiscrepancyKind::Gls,
        )?)
    } else {
        None
    };
    let sur_model = StructuralModel::sur(data.n_arms(), data.n_covariates(), data.n_outcomes());
    let latent_full = StructuralModel::latent(data.n_arms(), data.n_covariates(), data.n_outcomes());
    let nested = structural::compare_nested(&latent_full, &sur_model, &data, DiscrepancyKind::Gls)?;
    let sur = baselines::sur_fit(&data, &arms, &covs)?;
    let equivalence = if args.equivalence {
        let con = structural::fit_multigroup(
            &data,
            GroupConstraints::constrained(),
            DiscrepancyKind::Gls,
            None,
        )?;
        let free = structural::fit_multigroup(
            &data,
            GroupConstraints::free(),
            DiscrepancyKind::Gls,
            None,
        )?;
        Some(structural::compare_fits(&con, &free)?)
    } else {
        None
    };

    #[derive(Serialize)]
    struct CompareEnvelope<'a> {
        schema_version: u32,
        command: &'static str,
        data: DataSummary,
        scaling: &'a ScalingEstimate,
        scaling_with_covariates: Option<&'a ScalingEstimate>,
        wsi_unadjusted: &'a [AlteResult],
        wsi_adjusted: Option<&'a [AlteResult]>,
        structural_unadjusted: &'a structural::FitResult,
        structural_adjusted: Option<&'a structural::FitResult>,
        sur: &'a baselines::BaselineResult,
        latent_vs_sur: &'a structural::NestedComparison,
        measurement_equivalence: Option<&'a structural::NestedComparison>,
    }
    let envelope = CompareEnvelope {
        schema_version: 1,
        command: "compare",
        data: DataSummary::of(&data),
        scaling: &scaling,
        scaling_with_covariates: scaling_cov.as_ref(),
        wsi_unadjusted: &wsi_unadjusted,
        wsi_adjusted: wsi_adjusted.as_deref(),
        structural_unadjusted: &fit_plain,
        structural_adjusted: fit_cov.as_ref(),
        sur: &sur,
        latent_vs_sur: &nested,
        measurement_equivalence: equivalence.as_ref(),
    };
    let json = report::to_json_string(&envelope)?;
    write_atomic(dir.join("compare.json"), &json)?;

    if cli.format == OutputFormat::Json {
        print!("{json}");
    } else {
        let mut columns = vec!["Structural".to_string(), "WSI".to_string()];
        if wsi_adjusted.is_some() {
            columns.push("Structural+X".into());
            columns.push("WSI+X".into());
        }
        let mut rows = Vec::new();
        for (i, arm) in arms.iter().enumerate() {
            let beta = fit_plain.param(&format!("beta:z{}", arm + 1));
            let mut cells = vec![
                beta.map(|b| (b, f64::NAN, f64::NAN)),
                Some((
                    wsi_unadjusted[i].tau_hat,
                    wsi_unadjusted[i].se,
                    wsi_unadjusted[i].p_value(),
                )),
            ];
            if let (Some(adj), Some(fc)) = (&wsi_adjusted, &fit_cov) {
                cells.push(fc.param(&format!("beta:z{}", arm + 1)).map(|b| (b, f64::NAN, f64::NAN)));
                cells.push(Some((adj[i].tau_hat, adj[i].se, adj[i].p_value())));
            }
            rows.push(report::TableRow {
                label: data.treatment_labels()[*arm].clone(),
                cells,
            });
        }
        print!("{}", report::render_table("ALTE comparison", &columns, &rows));
        println!(
            "lambda_2: {:.3} (unadjusted){}",
            scaling.lambda[if reference == 0 { 1 } else { 0 }],
            scaling_cov
                .as_ref()
                .map(|s| format!(
                    " / {:.3} (with covariate instruments)",
                    s.lambda[if reference == 0 { 1 } else { 0 }]
                ))
                .unwrap_or_default()
        );
        println!(
            "structural chi2 p-value: {:.3} (df {}){}",
            fit_plain.p_value,
            fit_plain.df,
            fit_cov
                .as_ref()
                .map(|f| format!(" / {:.3} (df {})", f.p_value, f.df))
                .unwrap_or_default()
        );
        println!(
            "latent vs SUR: chi2 diff {:.3}, df {}, p = {:.3}",
            nested.chi2_diff, nested.df_diff, nested.p_value
        );
        if let Some(eq) = &equivalence {
            println!(
                "measurement equivalence: chi2 diff {:.3}, df {}, p = {:.3}",
                eq.chi2_diff, eq.df_diff, eq.p_value
            );
        }
        if let Some((w, df, p)) = sur.joint_test {
            println!("SUR joint arm test: chi2 {w:.3}, df {df}, p = {p:.3}");
        }
    }
    Ok(())
}

fn strip_covariates(data: &ExperimentData) -> Result<ExperimentData> {
    let treatments = (0..data.n_arms())
        .map(|t| {
            (
                data.treatment_labels()[t].clone(),
                data.treatment(t).as_slice().to_vec(),
            )
        })
        .collect();
    let outcomes = (0..data.n_outcomes())
        .map(|j| {
            (
                data.outcome_labels()[j].clone(),
                data.outcome(j).as_slice().to_vec(),
            )
        })
        .collect();
    ExperimentData::from_columns(treatments, outcomes, vec![], data.dropped_rows())
}
