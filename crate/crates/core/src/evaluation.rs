//! Forecast evaluation: MSE under pooled, per-asset and per-month
//! weighting, out-of-sample R², Clark–West tests with Bartlett HAC errors,
//! cumulative forecast-error differences, quintile diagnostics,
//! permutation group importance and kernel density summaries.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::ForecastRow;
use crate::learners::{DenseMatrix, FittedModel, TrainingSet};
use crate::month::Month;
use crate::panel::PredictorGroup;
use crate::stats;

pub const CW_LAGS: usize = 4;
pub const DENSITY_GRID: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalWeighting {
    /// Pooled over all asset-months.
    Panel,
    /// Mean over assets of each asset's time-series mean.
    TimeSeries,
    /// Mean over months of each month's cross-sectional mean.
    CrossSection,
}

impl EvalWeighting {
    pub const ALL: [EvalWeighting; 3] = [
        EvalWeighting::Panel,
        EvalWeighting::TimeSeries,
        EvalWeighting::CrossSection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalWeighting::Panel => "panel",
            EvalWeighting::TimeSeries => "ts",
            EvalWeighting::CrossSection => "cs",
        }
    }
}

impl fmt::Display for EvalWeighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalWeighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "panel" => Ok(EvalWeighting::Panel),
            "ts" | "timeseries" | "time_series" => Ok(EvalWeighting::TimeSeries),
            "cs" | "crosssection" | "cross_section" => Ok(EvalWeighting::CrossSection),
            _ => Err(Error::InvalidArgument(format!("unknown weighting {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Model,
    Benchmark,
}

/// Aggregated series of `value(row)` under a weighting: the rows themselves
/// (in the given order) for `Panel`, per-asset means ordered by asset for
/// `TimeSeries`, per-month means ordered by month for `CrossSection`.
fn aggregate<F: Fn(&ForecastRow) -> f64>(
    rows: &[&ForecastRow],
    weighting: EvalWeighting,
    value: F,
) -> Vec<f64> {
    fn group_means<K: Ord>(it: impl Iterator<Item = (K, f64)>) -> Vec<f64> {
        let mut acc: BTreeMap<K, (f64, usize)> = BTreeMap::new();
        for (k, v) in it {
            let e = acc.entry(k).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        acc.into_values().map(|(s, n)| s / n as f64).collect()
    }
    match weighting {
        EvalWeighting::Panel => rows.iter().map(|r| value(r)).collect(),
        EvalWeighting::TimeSeries => group_means(rows.iter().map(|r| (r.asset, value(r)))),
        EvalWeighting::CrossSection => group_means(rows.iter().map(|r| (r.target_month, value(r)))),
    }
}

pub fn mse(rows: &[&ForecastRow], source: Source, weighting: EvalWeighting) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Empty("forecast rows".into()));
    }
    let series = aggregate(rows, weighting, |r| match source {
        Source::Model => r.model_error().powi(2),
        Source::Benchmark => r.benchmark_error().powi(2),
    });
    Ok(stats::mean(&series))
}

/// `1 - MSE_model / MSE_benchmark`; `None` when the benchmark is perfect.
pub fn oos_r2(rows: &[&ForecastRow], weighting: EvalWeighting) -> Result<Option<f64>> {
    let m = mse(rows, Source::Model, weighting)?;
    let b = mse(rows, Source::Benchmark, weighting)?;
    Ok((b > 0.0).then(|| 1.0 - m / b))
}

/// Clark–West adjusted loss differential of one row; positive values
/// favour the model.
pub fn cw_differential(r: &ForecastRow) -> f64 {
    r.benchmark_error().powi(2) - r.model_error().powi(2) + (r.benchmark - r.forecast).powi(2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CwResult {
    pub dbar: f64,
    pub hac_se: f64,
    pub statistic: f64,
    pub lags: usize,
    pub n: usize,
    /// The differential series is constant, so the standard error is zero.
    pub degenerate: bool,
}

impl CwResult {
    /// One-sided significance marker at 10/5/1%.
    pub fn stars(&self) -> &'static str {
        let s = self.statistic;
        if s > 2.326 {
            "***"
        } else if s > 1.645 {
            "**"
        } else if s > 1.282 {
            "*"
        } else {
            ""
        }
    }
}

/// Bartlett-kernel long-run variance of `x` around its mean with at most
/// `lags` lags (truncated to `len - 1`).
pub fn newey_west_variance(x: &[f64], lags: usize) -> f64 {
    let n = x.len();
    let m = stats::mean(x);
    let d: Vec<f64> = x.iter().map(|v| v - m).collect();
    let gamma = |l: usize| d[l..].iter().zip(&d).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let big_l = lags.min(n.saturating_sub(1));
    let mut omega = gamma(0);
    for l in 1..=big_l {
        omega += 2.0 * (1.0 - l as f64 / (big_l as f64 + 1.0)) * gamma(l);
    }
    omega.max(0.0)
}

/// Clark–West test of the model against the benchmark. Rows should be in
/// (target month, asset) order so the pooled series is time ordered. The
/// per-asset series has no meaningful ordering, so it uses lag 0.
pub fn clark_west(
    rows: &[&ForecastRow],
    weighting: EvalWeighting,
    lags: usize,
) -> Result<CwResult> {
    let series = aggregate(rows, weighting, cw_differential);
    let n = series.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "Clark-West needs at least 2 aggregated points, got {n}"
        )));
    }
    let lags = if weighting == EvalWeighting::TimeSeries {
        0
    } else {
        lags
    };
    let dbar = stats::mean(&series);
    let hac_se = (newey_west_variance(&series, lags) / n as f64).sqrt();
    let degenerate = hac_se <= f64::EPSILON * dbar.abs().max(f64::MIN_POSITIVE)
        || series.iter().all(|v| *v == series[0]);
    let statistic = if degenerate {
        if dbar == 0.0 {
            0.0
        } else {
            dbar.signum() * f64::INFINITY
        }
    } else {
        dbar / hac_se
    };
    Ok(CwResult {
        dbar,
        hac_se: if degenerate { 0.0 } else { hac_se },
        statistic,
        lags,
        n,
        degenerate,
    })
}

/// Running sum over months of (benchmark - model) cross-sectional MSE.
pub fn cdfe(rows: &[&ForecastRow]) -> Vec<(Month, f64)> {
    let mut per_month: BTreeMap<Month, (f64, f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = per_month.entry(r.target_month).or_insert((0.0, 0.0, 0));
        e.0 += r.benchmark_error().powi(2);
        e.1 += r.model_error().powi(2);
        e.2 += 1;
    }
    let mut total = 0.0;
    per_month
        .into_iter()
        .map(|(m, (b, f, n))| {
            total += (b - f) / n as f64;
            (m, total)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct QuintileStats {
    /// Time-average of the equal-weighted realized portfolio beta.
    pub realized: f64,
    pub forecast_model: f64,
    pub forecast_benchmark: f64,
    pub mse_benchmark: f64,
    pub mse_model: f64,
    pub frac_positive_benchmark: f64,
    pub frac_positive_model: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuintileReport {
    /// Quintile 1 holds the lowest realized betas.
    pub quintiles: [QuintileStats; 5],
    pub months_used: usize,
    pub months_skipped: usize,
}

/// Monthly sorts on realized beta into quintile portfolios, compared with
/// the model and benchmark forecasts of the same stocks.
pub fn quintile_report(rows: &[&ForecastRow]) -> QuintileReport {
    let mut by_month: BTreeMap<Month, Vec<&ForecastRow>> = BTreeMap::new();
    for r in rows {
        by_month.entry(r.target_month).or_default().push(r);
    }
    let mut acc = [QuintileStats::default(); 5];
    let (mut used, mut skipped) = (0usize, 0usize);
    for (_, mut month) in by_month {
        let n = month.len();
        if n < 5 {
            skipped += 1;
            continue;
        }
        used += 1;
        month.sort_by(|a, b| {
            a.realization
                .total_cmp(&b.realization)
                .then(a.asset.cmp(&b.asset))
        });
        for (q, a) in acc.iter_mut().enumerate() {
            let part = &month[q * n / 5..(q + 1) * n / 5];
            let k = part.len() as f64;
            let real = part.iter().map(|r| r.realization).sum::<f64>() / k;
            let fm = part.iter().map(|r| r.forecast).sum::<f64>() / k;
            let fb = part.iter().map(|r| r.benchmark).sum::<f64>() / k;
            a.realized += real;
            a.forecast_model += fm;
            a.forecast_benchmark += fb;
            a.mse_model += (real - fm).powi(2);
            a.mse_benchmark += (real - fb).powi(2);
            a.frac_positive_model +=
                part.iter().filter(|r| r.model_error() > 0.0).count() as f64 / k;
            a.frac_positive_benchmark +=
                part.iter().filter(|r| r.benchmark_error() > 0.0).count() as f64 / k;
        }
    }
    if used > 0 {
        let t = used as f64;
        for a in acc.iter_mut() {
            a.realized /= t;
            a.forecast_model /= t;
            a.forecast_benchmark /= t;
            a.mse_model /= t;
            a.mse_benchmark /= t;
            a.frac_positive_model /= t;
            a.frac_positive_benchmark /= t;
        }
    }
    QuintileReport {
        quintiles: acc,
        months_used: used,
        months_skipped: skipped,
    }
}

/// Source of row permutations for importance calculations.
pub trait Permuter {
    fn permutation(&mut self, n: usize) -> Vec<usize>;
}

pub struct SeededPermuter(ChaCha8Rng);

impl SeededPermuter {
    pub fn new(seed: u64) -> Self {
        SeededPermuter(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl Permuter for SeededPermuter {
    fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut self.0);
        p
    }
}

/// Leaves rows in place; every importance is then zero.
pub struct IdentityPermuter;

impl Permuter for IdentityPermuter {
    fn permutation(&mut self, n: usize) -> Vec<usize> {
        (0..n).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupImportance {
    pub group: PredictorGroup,
    /// Mean over months of the MSE increase from permuting the group.
    pub raw: f64,
    /// Share of the total positive increase, in percent.
    pub normalized: f64,
}

/// Normalizes raw importances: negatives clamp to zero, the rest scale to
/// sum to 100 (all zero when nothing matters).
pub fn normalize_importance(raw: &[(PredictorGroup, f64)]) -> Vec<GroupImportance> {
    let total: f64 = raw.iter().map(|(_, v)| v.max(0.0)).sum();
    raw.iter()
        .map(|&(group, v)| GroupImportance {
            group,
            raw: v,
            normalized: if total > 0.0 {
                100.0 * v.max(0.0) / total
            } else {
                0.0
            },
        })
        .collect()
}

/// Permutation importance per predictor group. Within each target month the
/// group's columns are shuffled jointly across assets (one permutation per
/// group and month); importance is the resulting increase in that month's
/// MSE, averaged over months.
pub fn permutation_group_importance(
    model: &FittedModel,
    rows: &TrainingSet,
    groups: &[(PredictorGroup, Vec<usize>)],
    permuter: &mut dyn Permuter,
) -> Result<Vec<GroupImportance>> {
    if rows.n() == 0 {
        return Err(Error::Empty("importance rows".into()));
    }
    let mut months: BTreeMap<Month, Vec<usize>> = BTreeMap::new();
    for (i, k) in rows.row_keys.iter().enumerate() {
        months.entry(k.target_month).or_default().push(i);
    }
    let mut raw = vec![0.0; groups.len()];
    for idx in months.values() {
        let x = rows.x.select_rows(idx);
        let y: Vec<f64> = idx.iter().map(|&i| rows.y[i]).collect();
        let base = crate::learners::mse(&model.predict(&x)?, &y);
        for (g, (_, cols)) in groups.iter().enumerate() {
            if cols.is_empty() {
                continue;
            }
            let perm = permuter.permutation(idx.len());
            let mut xp: DenseMatrix = x.clone();
            for (k, &src) in perm.iter().enumerate() {
                for &c in cols {
                    xp.set(k, c, x.get(src, c));
                }
            }
            let e = crate::learners::mse(&model.predict(&xp)?, &y);
            raw[g] += e - base;
        }
    }
    let t = months.len() as f64;
    let raw: Vec<(PredictorGroup, f64)> = groups
        .iter()
        .zip(raw)
        .map(|((g, _), v)| (*g, v / t))
        .collect();
    Ok(normalize_importance(&raw))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensitySummary {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub mode: f64,
    pub bandwidth: f64,
    /// All values equal: the grid is that single point and the density a
    /// unit point mass.
    pub degenerate: bool,
}

/// Gaussian kernel density with Silverman's bandwidth on `grid_size`
/// points over `[min - 3 bw, max + 3 bw]`; the mode is the grid argmax,
/// near-ties resolved toward the lowest grid value.
pub fn density_summary(values: &[f64], grid_size: usize) -> Result<DensitySummary> {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.len() < 2 {
        return Err(Error::InvalidArgument(
            "density needs at least 2 finite values".into(),
        ));
    }
    if grid_size < 2 {
        return Err(Error::InvalidArgument(
            "density grid needs at least 2 points".into(),
        ));
    }
    let mut sorted = v.clone();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    if lo == hi {
        return Ok(DensitySummary {
            grid: vec![lo],
            density: vec![1.0],
            mode: lo,
            bandwidth: 0.0,
            degenerate: true,
        });
    }
    let n = v.len() as f64;
    let sd = stats::sample_var(&v).sqrt();
    let iqr = stats::quantile_sorted(&sorted, 0.75) - stats::quantile_sorted(&sorted, 0.25);
    let mut spread = sd.min(iqr / 1.34);
    if spread <= 0.0 {
        spread = sd;
    }
    let bw = 0.9 * spread * n.powf(-0.2);
    let (a, b) = (lo - 3.0 * bw, hi + 3.0 * bw);
    let step = (b - a) / (grid_size - 1) as f64;
    let grid: Vec<f64> = (0..grid_size).map(|k| a + step * k as f64).collect();
    let norm = 1.0 / (n * bw * (2.0 * std::f64::consts::PI).sqrt());
    let density: Vec<f64> = grid
        .iter()
        .map(|&g| {
            norm * v
                .iter()
                .map(|&x| {
                    let z = (g - x) / bw;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
        })
        .collect();
    let peak = density.iter().copied().fold(f64::MIN, f64::max);
    let k = density
        .iter()
        .position(|&d| d >= peak * (1.0 - 1e-12))
        .expect("nonempty grid");
    Ok(DensitySummary {
        mode: grid[k],
        grid,
        density,
        bandwidth: bw,
        degenerate: false,
    })
}
