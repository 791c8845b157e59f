//! Linearity diagnostics on measure pairs.
//!
//! If every measure is linear in the latent outcome, each pair of measures is
//! linearly related, so standard specification tests on a pair provide an
//! observable check of the modeling assumption. RESET augments the linear fit
//! with powers of the fitted values; the Rainbow test compares the fit on the
//! central half of the data against the full sample. `scatter_smooth` emits
//! plot-ready series for visual checks.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dataset::ExperimentData;
use crate::error::{Error, Result};
use crate::linreg::{f_sf, ols};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecTest {
    Reset,
    Rainbow,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpecTestResult {
    pub test: SpecTest,
    pub statistic: f64,
    pub df1: usize,
    pub df2: usize,
    pub p_value: f64,
    /// (dependent measure, regressor measure).
    pub pair: (usize, usize),
}

fn design(x: &DVector<f64>) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { x[r] })
}

/// Regression specification error test of `Y_j ~ Y_k`: an F test of the
/// added powers of the fitted values (squares and cubes by default).
pub fn reset_test(
    data: &ExperimentData,
    j: usize,
    k: usize,
    powers: &[u32],
) -> Result<SpecTestResult> {
    if powers.is_empty() {
        return Err(Error::Validation("empty power list".into()));
    }
    let y = data.outcome(j);
    let x = data.outcome(k);
    let n = data.n();
    if n <= 2 + powers.len() {
        return Err(Error::Validation("too few rows for the RESET test".into()));
    }
    let base = design(&x);
    let fit0 = ols(&base, &y)?;
    // standardize the fitted values before powering: the augmented span is
    // unchanged, but the design stays conditioned when the linear slope is
    // near zero
    let f_mean = fit0.fitted.mean();
    let f_sd = crate::linreg::variance(fit0.fitted.as_slice()).sqrt();
    if f_sd <= 0.0 {
        return Err(Error::DegenerateTest(
            "fitted values are constant; the regressor carries no variation".into(),
        ));
    }
    let mut aug = DMatrix::zeros(n, 2 + powers.len());
    aug.view_mut((0, 0), (n, 2)).copy_from(&base);
    for (c, &p) in powers.iter().enumerate() {
        for r in 0..n {
            aug[(r, 2 + c)] = ((fit0.fitted[r] - f_mean) / f_sd).powi(p as i32);
        }
    }
    let fit1 = ols(&aug, &y).map_err(|e| match e {
        Error::RankDeficient(_) => Error::DegenerateTest(
            "powers of the fitted values are collinear (binary or few-valued \
             regressor); build an additive index before testing"
                .into(),
        ),
        other => other,
    })?;
    let q = powers.len();
    let df2 = n - (2 + q);
    let stat = ((fit0.rss - fit1.rss) / q as f64) / (fit1.rss / df2 as f64);
    if !stat.is_finite() {
        return Err(Error::DegenerateTest(
            "degenerate residual variance in the RESET test".into(),
        ));
    }
    Ok(SpecTestResult {
        test: SpecTest::Reset,
        statistic: stat.max(0.0),
        df1: q,
        df2,
        p_value: f_sf(stat.max(0.0), q as f64, df2 as f64),
        pair: (j, k),
    })
}

/// Rainbow test of `Y_j ~ Y_k`: compares the full-sample fit against the fit
/// on the central fraction of the data (by distance of `Y_k` from its
/// median).
pub fn rainbow_test(
    data: &ExperimentData,
    j: usize,
    k: usize,
    central_fraction: f64,
) -> Result<SpecTestResult> {
    if !(0.0 < central_fraction && central_fraction <= 1.0) {
        return Err(Error::Validation("central fraction must be in (0, 1]".into()));
    }
    let y = data.outcome(j);
    let x = data.outcome(k);
    let n = data.n();
    let n_sub = ((n as f64) * central_fraction).round() as usize;
    if n_sub < 10 {
        return Err(Error::Validation(
            "central subset has fewer than 10 observations".into(),
        ));
    }
    if n_sub >= n {
        return Err(Error::DegenerateTest(
            "central fraction covers the whole sample".into(),
        ));
    }
    // central subset by distance from the median of Y_k
    let mut sorted: Vec<f64> = x.as_slice().to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if n % 2 == 0 {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    } else {
        sorted[n / 2]
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        (x[a] - median)
            .abs()
            .partial_cmp(&(x[b] - median).abs())
            .unwrap()
    });
    let central: Vec<usize> = order[..n_sub].to_vec();

    let full_fit = ols(&design(&x), &y)?;
    let xs = DVector::from_fn(n_sub, |r, _| x[central[r]]);
    let ys = DVector::from_fn(n_sub, |r, _| y[central[r]]);
    let sub_fit = ols(&design(&xs), &ys).map_err(|e| match e {
        Error::RankDeficient(_) => Error::DegenerateTest(
            "central subsample is constant in the regressor; build an \
             additive index before testing"
                .into(),
        ),
        other => other,
    })?;
    let df1 = n - n_sub;
    let df2 = n_sub - 2;
    let stat = ((full_fit.rss - sub_fit.rss) / df1 as f64) / (sub_fit.rss / df2 as f64);
    if !stat.is_finite() {
        return Err(Error::DegenerateTest(
            "degenerate residual variance in the Rainbow test".into(),
        ));
    }
    Ok(SpecTestResult {
        test: SpecTest::Rainbow,
        statistic: stat.max(0.0),
        df1,
        df2,
        p_value: f_sf(stat.max(0.0), df1 as f64, df2 as f64),
        pair: (j, k),
    })
}

/// One plot series: points, binned means, a local-linear smooth, or the OLS
/// line.
#[derive(Debug, Clone, Serialize)]
pub struct PlotSeries {
    pub series: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Scatter data with binned means, a fixed-span local-linear smooth (tricube
/// weights, span 0.75), and the OLS line, as four labeled series for
/// external plotting.
pub fn scatter_smooth(
    data: &ExperimentData,
    j: usize,
    k: usize,
    bins: usize,
) -> Result<Vec<PlotSeries>> {
    let y = data.outcome(j);
    let x = data.outcome(k);
    let n = data.n();
    if n == 0 {
        return Ok(Vec::new());
    }
    let bins = bins.max(1);
    let mut out = Vec::new();
    out.push(PlotSeries {
        series: "points".into(),
        x: x.as_slice().to_vec(),
        y: y.as_slice().to_vec(),
    });

    let x_min = x.min();
    let x_max = x.max();
    let width = ((x_max - x_min) / bins as f64).max(f64::MIN_POSITIVE);
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); bins];
    for i in 0..n {
        let b = (((x[i] - x_min) / width) as usize).min(bins - 1);
        sums[b].0 += x[i];
        sums[b].1 += y[i];
        sums[b].2 += 1;
    }
    let mut bx = Vec::new();
    let mut by = Vec::new();
    for (sx, sy, c) in sums {
        if c > 0 {
            bx.push(sx / c as f64);
            by.push(sy / c as f64);
        }
    }
    out.push(PlotSeries {
        series: "binned_mean".into(),
        x: bx,
        y: by,
    });

    // local-linear smooth with tricube weights over a fixed span
    let span = 0.75;
    let k_near = (((n as f64) * span).ceil() as usize).clamp(2, n);
    let grid: Vec<f64> = (0..100)
        .map(|g| x_min + (x_max - x_min) * g as f64 / 99.0)
        .collect();
    let mut sx_sorted: Vec<f64> = x.as_slice().to_vec();
    sx_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut smooth_y = Vec::with_capacity(grid.len());
    for &g in &grid {
        let mut dists: Vec<f64> = x.iter().map(|&xi| (xi - g).abs()).collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let h = dists[k_near - 1].max(f64::MIN_POSITIVE);
        // weighted linear fit at g
        let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let u = ((x[i] - g) / h).abs();
            if u >= 1.0 {
                continue;
            }
            let w = (1.0 - u * u * u).powi(3);
            let d = x[i] - g;
            s0 += w;
            s1 += w * d;
            s2 += w * d * d;
            t0 += w * y[i];
            t1 += w * d * y[i];
        }
        let det = s0 * s2 - s1 * s1;
        let v = if det.abs() > 1e-12 {
            (s2 * t0 - s1 * t1) / det
        } else if s0 > 0.0 {
            t0 / s0
        } else {
            f64::NAN
        };
        smooth_y.push(v);
    }
    out.push(PlotSeries {
        series: "local_linear".into(),
        x: grid.clone(),
        y: smooth_y,
    });

    let fit = ols(&design(&x), &y)?;
    out.push(PlotSeries {
        series: "ols".into(),
        x: grid.clone(),
        y: grid
            .iter()
            .map(|&g| fit.coefficients[0] + fit.coefficients[1] * g)
            .collect(),
    });
    Ok(out)
}

/// Serializes plot series as tidy CSV (`series,x,y`).
pub fn series_to_csv(series: &[PlotSeries]) -> String {
    let mut out = String::from("series,x,y\n");
    for s in series {
        for (x, y) in s.x.iter().zip(&s.y) {
            out.push_str(&format!("{},{},{}\n", s.series, x, y));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn pair_data(n: usize, quadratic: bool, seed: u64) -> ExperimentData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = Normal::new(0.0, 1.0).unwrap();
        let x: Vec<f64> = (0..n).map(|_| std.sample(&mut rng)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&v| {
                let m = if quadratic { v * v } else { v };
                m + 0.5 * std.sample(&mut rng)
            })
            .collect();
        let z: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        ExperimentData::from_columns(
            vec![("z".into(), z)],
            vec![("yj".into(), y), ("yk".into(), x)],
            vec![],
            0,
        )
        .unwrap()
    }

    #[test]
    fn reset_size_near_nominal_under_linearity() {
        let mut rejections = 0;
        let reps = 400;
        for r in 0..reps {
            let data = pair_data(300, false, 1000 + r);
            let t = reset_test(&data, 0, 1, &[2, 3]).unwrap();
            if t.p_value < 0.05 {
                rejections += 1;
            }
        }
        let rate = rejections as f64 / reps as f64;
        assert!((rate - 0.05).abs() < 0.03, "size {rate}");
    }

    #[test]
    fn reset_detects_quadratic_relationship() {
        let mut rejections = 0;
        let reps = 100;
        for r in 0..reps {
            let data = pair_data(1000, true, 2000 + r);
            let t = reset_test(&data, 0, 1, &[2, 3]).unwrap();
            if t.p_value < 0.05 {
                rejections += 1;
            }
        }
        assert!(rejections as f64 / reps as f64 > 0.9);
    }

    #[test]
    fn reset_binary_regressor_is_degenerate() {
        let n = 60;
        let x: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let y: Vec<f64> = x.iter().map(|&v| 2.0 * v + 0.1).collect();
        let z: Vec<f64> = (0..n).map(|i| ((i / 2) % 2) as f64).collect();
        let data = ExperimentData::from_columns(
            vec![("z".into(), z)],
            vec![("yj".into(), y), ("yk".into(), x)],
            vec![],
            0,
        )
        .unwrap();
        assert!(matches!(
            reset_test(&data, 0, 1, &[2, 3]),
            Err(Error::DegenerateTest(_))
        ));
    }

    #[test]
    fn rainbow_size_and_power() {
        let mut size_rej = 0;
        let mut power_rej = 0;
        let reps = 200;
        for r in 0..reps {
            let lin = pair_data(400, false, 3000 + r);
            if rainbow_test(&lin, 0, 1, 0.5).unwrap().p_value < 0.05 {
                size_rej += 1;
            }
            let quad = pair_data(400, true, 4000 + r);
            if rainbow_test(&quad, 0, 1, 0.5).unwrap().p_value < 0.05 {
                power_rej += 1;
            }
        }
        let size = size_rej as f64 / reps as f64;
        assert!((size - 0.05).abs() < 0.04, "size {size}");
        assert!(power_rej as f64 / reps as f64 > 0.8);
    }

    #[test]
    fn tests_invariant_to_affine_rescaling() {
        let data = pair_data(500, true, 7);
        let scaled = ExperimentData::from_columns(
            vec![("z".into(), data.treatment(0).as_slice().to_vec())],
            vec![
                (
                    "yj".into(),
                    data.outcome(0).iter().map(|v| 3.0 * v - 7.0).collect(),
                ),
                (
                    "yk".into(),
                    data.outcome(1).iter().map(|v| -0.5 * v + 2.0).collect(),
                ),
            ],
            vec![],
            0,
        )
        .unwrap();
        let a = reset_test(&data, 0, 1, &[2, 3]).unwrap();
        let b = reset_test(&scaled, 0, 1, &[2, 3]).unwrap();
        assert!((a.p_value - b.p_value).abs() < 1e-10);
        let c = rainbow_test(&data, 0, 1, 0.5).unwrap();
        let d = rainbow_test(&scaled, 0, 1, 0.5).unwrap();
        assert!((c.p_value - d.p_value).abs() < 1e-10);
    }

    #[test]
    fn scatter_smooth_agrees_with_ols_on_linear_data() {
        let data = pair_data(2000, false, 11);
        let series = scatter_smooth(&data, 0, 1, 20).unwrap();
        let smooth = series.iter().find(|s| s.series == "local_linear").unwrap();
        let line = series.iter().find(|s| s.series == "ols").unwrap();
        // compare away from the sparse tails
        let lo = 10;
        let hi = smooth.x.len() - 10;
        for g in lo..hi {
            assert!(
                (smooth.y[g] - line.y[g]).abs() < 0.15,
                "gap {} at x={}",
                (smooth.y[g] - line.y[g]).abs(),
                smooth.x[g]
            );
        }
    }

    #[test]
    fn scatter_csv_has_all_series() {
        let data = pair_data(100, false, 13);
        let series = scatter_smooth(&data, 0, 1, 10).unwrap();
        let csv = series_to_csv(&series);
        for name in ["points", "binned_mean", "local_linear", "ols"] {
            assert!(csv.contains(name));
        }
    }
}
