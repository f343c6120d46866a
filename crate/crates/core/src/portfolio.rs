//! Market-neutral minimum-variance portfolios under a single-factor
//! covariance built from beta forecasts.
//!
//! With covariance `s bb' + D` and the neutrality constraint `b'w = 0`, the
//! rank-one term vanishes on the feasible set, so the program reduces to a
//! separable quadratic with two linear equalities and box bounds. Its dual
//! is a concave function of the two multipliers: for a fixed neutrality
//! multiplier the budget multiplier is found exactly on the piecewise
//! linear budget curve, and the neutrality multiplier is then found by a
//! safeguarded root search on a monotone function. The active set falls out
//! of the clipping pattern.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{density_summary, DensitySummary, DENSITY_GRID};
use crate::forecast::ForecastRow;
use crate::month::Month;
use crate::panel::{MonthlyMeta, ReturnPanel};
use crate::par;
use crate::stats;

pub const RESID_VAR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorCovariance {
    pub betas: Vec<f64>,
    pub market_var: f64,
    pub resid_var: Vec<f64>,
}

impl FactorCovariance {
    pub fn new(betas: Vec<f64>, market_var: f64, resid_var: Vec<f64>) -> Result<Self> {
        if betas.len() != resid_var.len() {
            return Err(Error::LengthMismatch(betas.len(), resid_var.len()));
        }
        if !(market_var > 0.0 && market_var.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "market variance must be positive, got {market_var}"
            )));
        }
        if resid_var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(
                "residual variances must be positive".into(),
            ));
        }
        if betas.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("betas".into()));
        }
        Ok(FactorCovariance {
            betas,
            market_var,
            resid_var,
        })
    }

    pub fn n(&self) -> usize {
        self.betas.len()
    }

    /// The implied dense matrix `s bb' + diag(resid_var)`.
    pub fn dense(&self) -> Vec<Vec<f64>> {
        let n = self.n();
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let d = if i == j { self.resid_var[i] } else { 0.0 };
                        self.market_var * self.betas[i] * self.betas[j] + d
                    })
                    .collect()
            })
            .collect()
    }

    /// `w' Sigma w` without forming the matrix.
    pub fn variance(&self, w: &[f64]) -> f64 {
        let bw: f64 = self.betas.iter().zip(w).map(|(b, x)| b * x).sum();
        self.market_var * bw * bw
            + self
                .resid_var
                .iter()
                .zip(w)
                .map(|(d, x)| d * x * x)
                .sum::<f64>()
    }
}

/// Factor covariance over a daily window. `betas[i]` is the beta used for
/// asset `i`'s residuals; assets with fewer than `min_obs` returns are
/// dropped. Returns the covariance and the kept indices.
pub fn build_factor_cov(
    betas: &[f64],
    market: &[f64],
    assets: &[Vec<Option<f64>>],
    min_obs: usize,
) -> Result<(FactorCovariance, Vec<usize>)> {
    if betas.len() != assets.len() {
        return Err(Error::LengthMismatch(betas.len(), assets.len()));
    }
    let market_var = stats::sample_var(market);
    let mut kept = Vec::new();
    let mut kb = Vec::new();
    let mut resid = Vec::new();
    for (i, series) in assets.iter().enumerate() {
        if series.len() != market.len() {
            return Err(Error::LengthMismatch(series.len(), market.len()));
        }
        let e: Vec<f64> = series
            .iter()
            .zip(market)
            .filter_map(|(r, m)| r.map(|r| r - betas[i] * m))
            .collect();
        if e.len() < min_obs.max(2) {
            continue;
        }
        kept.push(i);
        kb.push(betas[i]);
        resid.push(stats::sample_var(&e).max(RESID_VAR_FLOOR));
    }
    Ok((FactorCovariance::new(kb, market_var, resid)?, kept))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QpSolution {
    pub weights: Vec<f64>,
    pub objective: f64,
    /// Indices held at a bound.
    pub active_bounds: Vec<usize>,
    /// Multipliers of the budget and neutrality constraints, in the
    /// convention `2 Sigma w = lambda 1 + mu b + bound terms`.
    pub multipliers: (f64, f64),
}

/// Separable program: minimize `sum d_i x_i^2` subject to
/// `sum_{i: budget_i} x_i = 1`, `sum b_i x_i = 0`, `lo_i <= x_i <= hi_i`.
struct Separable {
    d: Vec<f64>,
    budget: Vec<bool>,
    b: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Separable {
    fn x_at(&self, i: usize, lam: f64, mu: f64) -> f64 {
        let a = if self.budget[i] { lam } else { 0.0 };
        ((a + mu * self.b[i]) / (2.0 * self.d[i])).clamp(self.lo[i], self.hi[i])
    }

    fn budget_sum(&self, lam: f64, mu: f64) -> f64 {
        (0..self.d.len())
            .filter(|&i| self.budget[i])
            .map(|i| self.x_at(i, lam, mu))
            .sum()
    }

    /// Budget multiplier for a given neutrality multiplier: the budget sum
    /// is piecewise linear and nondecreasing in lambda, so locate the
    /// segment containing 1 and solve on it exactly.
    fn lambda_for(&self, mu: f64) -> f64 {
        let idx: Vec<usize> = (0..self.d.len()).filter(|&i| self.budget[i]).collect();
        let knot = |i: usize, bound: f64| 2.0 * self.d[i] * bound - mu * self.b[i];
        let mut bps: Vec<f64> = idx
            .iter()
            .flat_map(|&i| [knot(i, self.lo[i]), knot(i, self.hi[i])])
            .collect();
        bps.sort_by(f64::total_cmp);
        bps.dedup();
        let (mut a, mut z) = (0usize, bps.len() - 1);
        if self.budget_sum(bps[z], mu) <= 1.0 {
            return bps[z];
        }
        if self.budget_sum(bps[a], mu) >= 1.0 {
            return bps[a];
        }
        while z - a > 1 {
            let m = (a + z) / 2;
            if self.budget_sum(bps[m], mu) < 1.0 {
                a = m;
            } else {
                z = m;
            }
        }
        let mid = 0.5 * (bps[a] + bps[z]);
        let (mut clipped, mut inv, mut shift) = (0.0, 0.0, 0.0);
        for &i in &idx {
            let (kl, kh) = (knot(i, self.lo[i]), knot(i, self.hi[i]));
            if mid <= kl {
                clipped += self.lo[i];
            } else if mid >= kh {
                clipped += self.hi[i];
            } else {
                inv += 1.0 / (2.0 * self.d[i]);
                shift += mu * self.b[i] / (2.0 * self.d[i]);
            }
        }
        if inv == 0.0 {
            return bps[a];
        }
        ((1.0 - clipped - shift) / inv).clamp(bps[a], bps[z])
    }

    fn point(&self, mu: f64) -> (f64, Vec<f64>, f64) {
        let lam = self.lambda_for(mu);
        let x: Vec<f64> = (0..self.d.len()).map(|i| self.x_at(i, lam, mu)).collect();
        let phi = x.iter().zip(&self.b).map(|(x, b)| x * b).sum();
        (lam, x, phi)
    }

    /// Solves for the neutrality multiplier; the neutrality residual is
    /// nondecreasing in it. Returns `(x, lambda, mu)`.
    fn solve(&self) -> Result<(Vec<f64>, f64, f64)> {
        let (lam0, x0, phi0) = self.point(0.0);
        if phi0 == 0.0 {
            return Ok((x0, lam0, 0.0));
        }
        let scale = (0..self.d.len())
            .filter(|&i| self.b[i] != 0.0)
            .map(|i| {
                let bound = self.lo[i].abs().max(self.hi[i].abs());
                let bound = if bound.is_finite() { bound } else { 1.0 };
                2.0 * self.d[i] * bound / self.b[i].abs()
            })
            .fold(0.0f64, f64::max);
        if scale == 0.0 {
            return Err(Error::NoConvergence(
                "neutrality constraint has no support".into(),
            ));
        }
        // Bracket the root.
        let dir = if phi0 < 0.0 { 1.0 } else { -1.0 };
        let mut step = scale;
        let mut prev = (0.0, lam0, x0, phi0);
        let mut found = None;
        for _ in 0..200 {
            let mu = dir * step;
            let (lam, x, phi) = self.point(mu);
            if phi == 0.0 {
                return Ok((x, lam, mu));
            }
            if phi.signum() != prev.3.signum() {
                found = Some((prev, (mu, lam, x, phi)));
                break;
            }
            prev = (mu, lam, x, phi);
            step *= 2.0;
        }
        let Some((p, q)) = found else {
            return Err(Error::NoConvergence(
                "could not bracket the neutrality multiplier".into(),
            ));
        };
        let (mut lo, mut hi) = if p.3 < 0.0 { (p, q) } else { (q, p) };
        // Illinois regula falsi with bisection safeguard.
        let (mut fl, mut fh) = (lo.3, hi.3);
        let mut last = 0i8;
        for _ in 0..400 {
            if (hi.0 - lo.0).abs() <= 4.0 * f64::EPSILON * lo.0.abs().max(hi.0.abs()) {
                break;
            }
            let mut mu = lo.0 - fl * (hi.0 - lo.0) / (fh - fl);
            if !(mu > lo.0.min(hi.0) && mu < lo.0.max(hi.0)) {
                mu = 0.5 * (lo.0 + hi.0);
            }
            let (lam, x, phi) = self.point(mu);
            if phi == 0.0 {
                return Ok((x, lam, mu));
            }
            if phi < 0.0 {
                lo = (mu, lam, x, phi);
                fl = phi;
                if last == -1 {
                    fh /= 2.0;
                }
                last = -1;
            } else {
                hi = (mu, lam, x, phi);
                fh = phi;
                if last == 1 {
                    fl /= 2.0;
                }
                last = 1;
            }
        }
        // Both ends satisfy the budget and box; mix them to zero the
        // neutrality residual exactly.
        let t = hi.3 / (hi.3 - lo.3);
        let x =
            lo.2.iter()
                .zip(&hi.2)
                .map(|(a, b)| t * a + (1.0 - t) * b)
                .collect();
        Ok((x, t * lo.1 + (1.0 - t) * hi.1, t * lo.0 + (1.0 - t) * hi.0))
    }
}

/// Checks that some `w` in the box satisfies `sum w = 1`, `b'w = 0`.
/// The image of the box under `w -> (sum w, b'w)` is a zonogon; `(1, 0)`
/// lies outside it iff some direction `(p, q)` has `p > h(p, q)`, where `h`
/// is the support function. `h` is linear between the directions where a
/// coefficient `p + q b_i` changes sign, so checking those directions (and
/// the axes, keeping every sector pointed) is exact.
pub fn check_feasible(betas: &[f64], lo: f64, hi: f64) -> Result<()> {
    let support = |p: f64, q: f64| -> f64 {
        betas
            .iter()
            .map(|b| {
                let c = p + q * b;
                if c > 0.0 {
                    c * hi
                } else {
                    c * lo
                }
            })
            .sum()
    };
    let mut dirs: Vec<(f64, f64)> = vec![(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)];
    for b in betas {
        let r = (1.0 + b * b).sqrt();
        dirs.push((-b / r, 1.0 / r));
        dirs.push((b / r, -1.0 / r));
    }
    let scale = 1.0 + betas.iter().map(|b| b.abs()).sum::<f64>() * hi.abs().max(lo.abs());
    for (p, q) in dirs {
        if p - support(p, q) > 1e-12 * scale {
            return Err(Error::Infeasible { a: p, b: q });
        }
    }
    Ok(())
}

/// Minimizes `w' Sigma w` subject to full investment, zero beta (using the
/// covariance's betas) and `-bound <= w_i <= bound`.
pub fn solve_min_variance_neutral(cov: &FactorCovariance, bound: f64) -> Result<QpSolution> {
    let n = cov.n();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 assets, got {n}"
        )));
    }
    check_feasible(&cov.betas, -bound, bound)?;
    let prob = Separable {
        d: cov.resid_var.clone(),
        budget: vec![true; n],
        b: cov.betas.clone(),
        lo: vec![-bound; n],
        hi: vec![bound; n],
    };
    let (w, lam, mu) = prob.solve()?;
    Ok(finish(cov, w, lam, mu, bound))
}

/// The same program without the neutrality constraint. The rank-one term
/// is carried by an auxiliary variable `z = b'w` with cost `s z^2`.
pub fn solve_min_variance(cov: &FactorCovariance, bound: f64) -> Result<QpSolution> {
    let n = cov.n();
    if n as f64 * bound < 1.0 {
        return Err(Error::Infeasible { a: 1.0, b: 0.0 });
    }
    let mut d = cov.resid_var.clone();
    d.push(cov.market_var);
    let mut b = cov.betas.clone();
    b.push(-1.0);
    let mut budget = vec![true; n];
    budget.push(false);
    let mut lo = vec![-bound; n];
    lo.push(f64::NEG_INFINITY);
    let mut hi = vec![bound; n];
    hi.push(f64::INFINITY);
    let prob = Separable {
        d,
        budget,
        b,
        lo,
        hi,
    };
    let (mut w, lam, mu) = prob.solve()?;
    w.pop();
    Ok(finish(cov, w, lam, mu, bound))
}

fn finish(cov: &FactorCovariance, weights: Vec<f64>, lam: f64, mu: f64, bound: f64) -> QpSolution {
    let active_bounds = weights
        .iter()
        .enumerate()
        .filter(|(_, w)| (w.abs() - bound).abs() <= 1e-12)
        .map(|(i, _)| i)
        .collect();
    QpSolution {
        objective: cov.variance(&weights),
        weights,
        active_bounds,
        multipliers: (lam, mu),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PortfolioConfig {
    pub universe_size: usize,
    pub bound: f64,
    /// Months of daily data behind the covariance estimate.
    pub cov_window_months: u32,
    pub min_obs: usize,
}

impl Default for PortfolioConfig {
    fn default() -> Self {
        PortfolioConfig {
            universe_size: 500,
            bound: 0.3,
            cov_window_months: 24,
            min_obs: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FormationResult {
    pub formation: Month,
    /// Last month of the window over which the ex-post beta is realized.
    pub target: Month,
    pub ex_post_beta: f64,
    pub ex_ante_variance: f64,
    /// `(asset, weight)` pairs.
    pub weights: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrackResult {
    pub months: Vec<FormationResult>,
    /// Formation months that could not be solved, with the reason.
    pub skipped: Vec<(Month, String)>,
    pub density: Option<DensitySummary>,
}

/// Forms a neutral portfolio each month from CAPM beta forecasts (or their
/// benchmarks) and tracks its realized beta over the following window.
/// `rows` must share one model and horizon; the formation month is each
/// row's feature month.
pub fn form_and_track(
    rows: &[&ForecastRow],
    returns: &ReturnPanel,
    meta: Option<&MonthlyMeta>,
    asset_ids: &[String],
    cfg: &PortfolioConfig,
    use_benchmark: bool,
) -> TrackResult {
    let mut by_month: BTreeMap<Month, Vec<&ForecastRow>> = BTreeMap::new();
    for r in rows {
        by_month.entry(r.feature_month()).or_default().push(r);
    }
    let months: Vec<(Month, Vec<&ForecastRow>)> = by_month.into_iter().collect();
    let results = par::map_slice(&months, |(formation, rows)| {
        let formation = *formation;
        let mut cands: Vec<&ForecastRow> = rows.clone();
        if let Some(meta) = meta {
            cands.retain(|r| meta.get(&asset_ids[r.asset], formation).is_some());
            cands.sort_by(|a, b| {
                let cap = |r: &ForecastRow| {
                    meta.get(&asset_ids[r.asset], formation)
                        .map_or(0.0, |m| m.mktcap)
                };
                cap(b).total_cmp(&cap(a)).then(a.asset.cmp(&b.asset))
            });
        } else {
            cands.sort_by_key(|r| r.asset);
        }
        if cands.len() < cfg.universe_size {
            warn!(
                "{formation}: universe has {} assets, fewer than {}",
                cands.len(),
                cfg.universe_size
            );
        }
        cands.truncate(cfg.universe_size);
        let first = formation.offset(1 - cfg.cov_window_months as i32);
        let Some(span) = returns.window_span(first, formation) else {
            return Err((
                formation,
                "no daily returns in covariance window".to_string(),
            ));
        };
        let betas: Vec<f64> = cands
            .iter()
            .map(|r| {
                if use_benchmark {
                    r.benchmark
                } else {
                    r.forecast
                }
            })
            .collect();
        let series: Vec<Vec<Option<f64>>> = cands
            .iter()
            .map(|r| returns.asset_returns(r.asset)[span.clone()].to_vec())
            .collect();
        let (cov, kept) = build_factor_cov(&betas, &returns.market()[span], &series, cfg.min_obs)
            .map_err(|e| (formation, e.to_string()))?;
        let sol =
            solve_min_variance_neutral(&cov, cfg.bound).map_err(|e| (formation, e.to_string()))?;
        let ex_post = kept
            .iter()
            .zip(&sol.weights)
            .map(|(&k, w)| w * cands[k].realization)
            .sum();
        Ok(FormationResult {
            formation,
            target: cands[0].target_month,
            ex_post_beta: ex_post,
            ex_ante_variance: sol.objective,
            weights: kept
                .iter()
                .zip(&sol.weights)
                .map(|(&k, &w)| (cands[k].asset, w))
                .collect(),
        })
    });
    let mut out = TrackResult {
        months: Vec::new(),
        skipped: Vec::new(),
        density: None,
    };
    for r in results {
        match r {
            Ok(m) => out.months.push(m),
            Err(s) => out.skipped.push(s),
        }
    }
    let betas: Vec<f64> = out.months.iter().map(|m| m.ex_post_beta).collect();
    out.density = density_summary(&betas, DENSITY_GRID).ok();
    out
}
