//! Dividend-discount share pricing with discount rates implied by
//! conditional CAPM beta forecasts.
//!
//! Rates are annual and converted to monthly by dividing by 12; cash flows
//! are monthly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::beta::{BetaKind, Semibetas};
use crate::error::{Error, Result};
use crate::forecast::ForecastPanel;
use crate::month::Month;
use crate::panel::{MonthlyMeta, ReturnPanel};

/// Horizons of the term structure, in months.
pub const TERM_HORIZONS: [u32; 4] = [1, 3, 6, 12];
/// Cash-flow multiples of the monthly cash flow per term bucket.
pub const TERM_CF_MULTIPLES: [f64; 4] = [1.0, 2.0, 3.0, 6.0];

/// Annual CAPM cost of equity.
pub fn annual_cost_of_equity(beta: f64, premium_annual: f64, riskfree_annual: f64) -> f64 {
    riskfree_annual + beta * premium_annual
}

/// Monthly CAPM cost of equity.
pub fn cost_of_equity(beta: f64, premium_annual: f64, riskfree_annual: f64) -> f64 {
    annual_cost_of_equity(beta, premium_annual, riskfree_annual) / 12.0
}

fn check_terminal(r: f64, g: f64, context: &str) -> Result<()> {
    if !(r.is_finite() && g.is_finite()) || r <= g {
        return Err(Error::TerminalValue {
            context: context.to_string(),
            rate: r,
            growth: g,
        });
    }
    Ok(())
}

/// Twelve flat monthly cash flows plus a growing perpetuity from month 13.
pub fn dcf_single(cf1: f64, r: f64, g: f64) -> Result<f64> {
    if !(cf1 > 0.0 && cf1.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "cash flow must be positive, got {cf1}"
        )));
    }
    check_terminal(r, g, "single-horizon valuation")?;
    let annuity: f64 = (1..=12).map(|j| cf1 / (1.0 + r).powi(j)).sum();
    Ok(annuity + cf1 / (r - g) / (1.0 + r).powi(12))
}

/// Bucketed valuation with one rate per horizon: bucket `j` (1-based) holds
/// the cash flow of horizon `TERM_HORIZONS[j-1]` discounted `j` periods,
/// followed by a perpetuity on the 12-month bucket at the 12-month rate.
pub fn dcf_term_structure(cf1: f64, rates: [f64; 4], g: f64) -> Result<f64> {
    if !(cf1 > 0.0 && cf1.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "cash flow must be positive, got {cf1}"
        )));
    }
    if rates.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("term-structure rates".into()));
    }
    check_terminal(rates[3], g, "term-structure valuation")?;
    let buckets: f64 = rates
        .iter()
        .zip(TERM_CF_MULTIPLES)
        .enumerate()
        .map(|(j, (r, m))| m * cf1 / (1.0 + r).powi(j as i32 + 1))
        .sum();
    let r12 = rates[3];
    Ok(buckets + TERM_CF_MULTIPLES[3] * cf1 / (r12 - g) / (1.0 + r12).powi(12))
}

/// Panel out-of-sample R² of model-implied against benchmark-implied prices.
pub fn valuation_r2(predicted: &[f64], realized: &[f64], benchmark: &[f64]) -> Result<Option<f64>> {
    if predicted.is_empty() {
        return Err(Error::Empty("valuation rows".into()));
    }
    if predicted.len() != realized.len() {
        return Err(Error::LengthMismatch(predicted.len(), realized.len()));
    }
    if benchmark.len() != realized.len() {
        return Err(Error::LengthMismatch(benchmark.len(), realized.len()));
    }
    let sse = |p: &[f64]| {
        p.iter()
            .zip(realized)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
    };
    let b = sse(benchmark);
    Ok((b > 0.0).then(|| 1.0 - sse(predicted) / b))
}

/// How a CAPM beta forecast is obtained from the forecast panel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapmSource {
    /// The CAPM forecast itself.
    Direct,
    /// Downside and upside forecasts weighted by the market's down/up
    /// variance shares over the window ending at the forecast origin.
    DownUp,
    /// The four semibeta forecasts.
    Semibetas,
}

impl CapmSource {
    pub const ALL: [CapmSource; 3] = [
        CapmSource::Direct,
        CapmSource::DownUp,
        CapmSource::Semibetas,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CapmSource::Direct => "capm",
            CapmSource::DownUp => "down_up",
            CapmSource::Semibetas => "semibetas",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValuationConfig {
    pub growth_annual: Vec<f64>,
    pub premium_annual: Vec<f64>,
    pub riskfree_annual: f64,
}

impl Default for ValuationConfig {
    fn default() -> Self {
        ValuationConfig {
            growth_annual: vec![0.0, 0.01, 0.02],
            premium_annual: vec![0.08, 0.10, 0.12],
            riskfree_annual: 0.0,
        }
    }
}

/// Reconstructed CAPM forecast and benchmark for one asset, origin month
/// and horizon.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CapmPair {
    pub forecast: f64,
    pub benchmark: f64,
}

type KindMap = BTreeMap<BetaKind, (f64, f64)>;

/// Reconstructed CAPM forecasts keyed by (model, source, asset, origin
/// month, horizon).
pub fn reconstruct_capm(
    fp: &ForecastPanel,
    returns: &ReturnPanel,
) -> BTreeMap<(String, CapmSource), BTreeMap<(usize, Month, u32), CapmPair>> {
    let mut grouped: BTreeMap<(String, usize, Month, u32), KindMap> = BTreeMap::new();
    for r in &fp.rows {
        grouped
            .entry((r.model.clone(), r.asset, r.feature_month(), r.horizon))
            .or_default()
            .insert(r.kind, (r.forecast, r.benchmark));
    }
    let mut out: BTreeMap<(String, CapmSource), BTreeMap<(usize, Month, u32), CapmPair>> =
        BTreeMap::new();
    for ((model, asset, origin, h), kinds) in grouped {
        let key = (asset, origin, h);
        if let Some(&(f, b)) = kinds.get(&BetaKind::Capm) {
            out.entry((model.clone(), CapmSource::Direct))
                .or_default()
                .insert(
                    key,
                    CapmPair {
                        forecast: f,
                        benchmark: b,
                    },
                );
        }
        if let (Some(&(fd, bd)), Some(&(fu, bu))) =
            (kinds.get(&BetaKind::Down), kinds.get(&BetaKind::Up))
        {
            if let Some(w) = crate::beta::window_down_weight(returns, origin, h) {
                let mix = |d: f64, u: f64| w * d + (1.0 - w) * u;
                out.entry((model.clone(), CapmSource::DownUp))
                    .or_default()
                    .insert(
                        key,
                        CapmPair {
                            forecast: mix(fd, fu),
                            benchmark: mix(bd, bu),
                        },
                    );
            }
        }
        let semis: Option<Vec<(f64, f64)>> = BetaKind::SEMIBETAS
            .iter()
            .map(|k| kinds.get(k).copied())
            .collect();
        if let Some(s) = semis {
            let build = |pick: fn(&(f64, f64)) -> f64| {
                crate::beta::reconstruct_from_semibetas(&Semibetas {
                    n: pick(&s[0]),
                    p: pick(&s[1]),
                    m_neg: pick(&s[2]),
                    m_pos: pick(&s[3]),
                })
            };
            out.entry((model, CapmSource::Semibetas))
                .or_default()
                .insert(
                    key,
                    CapmPair {
                        forecast: build(|x| x.0),
                        benchmark: build(|x| x.1),
                    },
                );
        }
    }
    out
}

/// Monthly cash flow: trailing 12-month mean of dividends (months without a
/// recorded dividend count as zero).
pub fn monthly_cash_flow(meta: &MonthlyMeta, asset: &str, month: Month) -> f64 {
    (0..12)
        .filter_map(|k| meta.get(asset, month.offset(-k)).and_then(|r| r.dividend))
        .sum::<f64>()
        / 12.0
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValuationRow {
    pub growth_annual: f64,
    pub premium_annual: f64,
    /// `"1"`, `"3"`, `"6"`, `"12"` or `"ts"` for the term structure.
    pub horizon: String,
    pub model: String,
    pub source: CapmSource,
    pub r2: Option<f64>,
    pub n: usize,
    /// Rows dropped because the discount rate did not exceed growth.
    pub excluded: usize,
}

/// Valuation R² for every (growth, premium, horizon, model, source).
/// Prices are set at the forecast origin month and compared with the
/// observed price in that month; only rows with a positive cash flow are
/// valued.
pub fn value_forecasts(
    fp: &ForecastPanel,
    returns: &ReturnPanel,
    meta: &MonthlyMeta,
    cfg: &ValuationConfig,
) -> Result<Vec<ValuationRow>> {
    let capm = reconstruct_capm(fp, returns);
    let mut rows = Vec::new();
    for &g_annual in &cfg.growth_annual {
        for &prem in &cfg.premium_annual {
            let g = g_annual / 12.0;
            let rate = |beta: f64| cost_of_equity(beta, prem, cfg.riskfree_annual);
            for ((model, source), table) in &capm {
                let inputs = |asset: usize, origin: Month| -> Option<(f64, f64)> {
                    let id = &fp.asset_ids[asset];
                    let price = meta.get(id, origin)?.price;
                    let cf = monthly_cash_flow(meta, id, origin);
                    (cf > 0.0 && price.is_finite()).then_some((cf, price))
                };
                for &h in &TERM_HORIZONS {
                    let (mut pred, mut real, mut bench, mut excluded) = (vec![], vec![], vec![], 0);
                    for (&(asset, origin, hh), pair) in table {
                        if hh != h {
                            continue;
                        }
                        let Some((cf, price)) = inputs(asset, origin) else {
                            continue;
                        };
                        match (
                            dcf_single(cf, rate(pair.forecast), g),
                            dcf_single(cf, rate(pair.benchmark), g),
                        ) {
                            (Ok(p), Ok(b)) => {
                                pred.push(p);
                                bench.push(b);
                                real.push(price);
                            }
                            _ => excluded += 1,
                        }
                    }
                    if !pred.is_empty() {
                        rows.push(ValuationRow {
                            growth_annual: g_annual,
                            premium_annual: prem,
                            horizon: h.to_string(),
                            model: model.clone(),
                            source: *source,
                            r2: valuation_r2(&pred, &real, &bench)?,
                            n: pred.len(),
                            excluded,
                        });
                    }
                }
                // Term structure: all four horizons from the same origin.
                let mut origins: BTreeMap<(usize, Month), [Option<CapmPair>; 4]> = BTreeMap::new();
                for (&(asset, origin, h), pair) in table {
                    if let Some(pos) = TERM_HORIZONS.iter().position(|&x| x == h) {
                        origins.entry((asset, origin)).or_default()[pos] = Some(*pair);
                    }
                }
                let (mut pred, mut real, mut bench, mut excluded) = (vec![], vec![], vec![], 0);
                for ((asset, origin), pairs) in origins {
                    let Some(p4) = pairs.iter().copied().collect::<Option<Vec<_>>>() else {
                        continue;
                    };
                    let Some((cf, price)) = inputs(asset, origin) else {
                        continue;
                    };
                    let fr = [0, 1, 2, 3].map(|k| rate(p4[k].forecast));
                    let br = [0, 1, 2, 3].map(|k| rate(p4[k].benchmark));
                    match (dcf_term_structure(cf, fr, g), dcf_term_structure(cf, br, g)) {
                        (Ok(p), Ok(b)) => {
                            pred.push(p);
                            bench.push(b);
                            real.push(price);
                        }
                        _ => excluded += 1,
                    }
                }
                if !pred.is_empty() {
                    rows.push(ValuationRow {
                        growth_annual: g_annual,
                        premium_annual: prem,
                        horizon: "ts".into(),
                        model: model.clone(),
                        source: *source,
                        r2: valuation_r2(&pred, &real, &bench)?,
                        n: pred.len(),
                        excluded,
                    });
                }
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_of_equity_examples() {
        assert!((annual_cost_of_equity(1.0, 0.12, 0.0) - 0.12).abs() < 1e-15);
        assert!((cost_of_equity(1.0, 0.12, 0.0) - 0.01).abs() < 1e-15);
        assert_eq!(annual_cost_of_equity(0.0, 0.12, 0.03), 0.03);
        assert!((annual_cost_of_equity(-0.5, 0.08, 0.0) + 0.04).abs() < 1e-15);
    }

    #[test]
    fn single_horizon_perpetuity() {
        assert!((dcf_single(1.0, 0.01, 0.0).unwrap() - 100.0).abs() < 1e-9);
        assert!(matches!(
            dcf_single(1.0, 0.01, 0.01),
            Err(Error::TerminalValue { .. })
        ));
        let a = dcf_single(1.0, 0.013, 0.001).unwrap();
        assert!((dcf_single(2.0, 0.013, 0.001).unwrap() - 2.0 * a).abs() < 1e-12);
        for k in [5u32, 20, 50, 100, 400] {
            let r = 1.0 / k as f64;
            assert!((dcf_single(3.0, r, 0.0).unwrap() - 3.0 * k as f64).abs() < 1e-9 * k as f64);
        }
        assert!(dcf_single(0.0, 0.01, 0.0).is_err());
    }

    #[test]
    fn single_horizon_monotonicity() {
        let mut prev = f64::INFINITY;
        for i in 0..50 {
            let v = dcf_single(1.0, 0.003 + 0.0005 * i as f64, 0.001).unwrap();
            assert!(v < prev);
            prev = v;
        }
        let mut prev = 0.0;
        for i in 0..50 {
            let v = dcf_single(1.0, 0.02, 0.0003 * i as f64).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn term_structure_example() {
        let v = dcf_term_structure(1.0, [0.01; 4], 0.0).unwrap();
        let want = 1.0 / 1.01
            + 2.0 / 1.01f64.powi(2)
            + 3.0 / 1.01f64.powi(3)
            + 6.0 / 1.01f64.powi(4)
            + 600.0 / 1.01f64.powi(12);
        assert!((v - want).abs() < 1e-12);
        assert!((v - 544.10).abs() < 0.01);
        assert!((v - dcf_single(1.0, 0.01, 0.0).unwrap()).abs() > 1.0);
        assert!((dcf_term_structure(2.5, [0.01; 4], 0.0).unwrap() - 2.5 * v).abs() < 1e-9);
        assert!(dcf_term_structure(1.0, [0.01, 0.01, 0.01, 0.0], 0.0).is_err());
    }

    #[test]
    fn valuation_r2_examples() {
        let real = [10.0, 20.0, 30.0];
        assert_eq!(
            valuation_r2(&real, &real, &[11.0, 21.0, 31.0]).unwrap(),
            Some(1.0)
        );
        assert_eq!(
            valuation_r2(&[11.0, 21.0, 31.0], &real, &[11.0, 21.0, 31.0]).unwrap(),
            Some(0.0)
        );
        let r2 = valuation_r2(&[11.0, 21.0, 31.0], &real, &[12.0, 22.0, 32.0])
            .unwrap()
            .unwrap();
        assert!((r2 - 0.75).abs() < 1e-15);
    }
}
