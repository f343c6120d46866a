//! Synthetic panels with a known characteristic-driven beta process.

use std::path::Path;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::month::Month;
use crate::panel::{
    write_characteristics, write_daily_returns, write_group_map, write_market, write_monthly_meta,
    CharacteristicPanel, DelimitedFormat, MetaRow, MonthSlice, MonthlyMeta, PredictorGroup,
    ReturnPanel,
};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub n_assets: usize,
    pub n_months: usize,
    pub days_per_month: usize,
    pub start_month: Month,
    pub market_mean: f64,
    pub market_vol: f64,
    /// Beta intercept.
    pub b0: f64,
    /// Loadings of the true beta on the signal characteristics; one
    /// signal characteristic per entry.
    pub theta: Vec<f64>,
    /// AR(1) persistence of every characteristic.
    pub rho: f64,
    /// Months between the characteristics and the beta they drive.
    pub beta_lag: usize,
    pub idio_vol: f64,
    pub noise_chars: usize,
    pub beta_clip: (f64, f64),
    /// Probability that a daily asset return is missing.
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            n_assets: 100,
            n_months: 60,
            days_per_month: 21,
            start_month: Month::new(2000, 1),
            market_mean: 0.0004,
            market_vol: 0.01,
            b0: 1.0,
            theta: vec![0.3, -0.2, 0.15],
            rho: 0.9,
            beta_lag: 1,
            idio_vol: 0.02,
            noise_chars: 3,
            beta_clip: (-1.0, 4.0),
            missing_rate: 0.0,
            seed: 0,
        }
    }
}

impl DgpConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n_assets == 0 || self.n_months == 0 {
            return bad("synthetic panel needs at least one asset and one month");
        }
        if !(1..=28).contains(&self.days_per_month) {
            return bad("days_per_month must be in 1..=28");
        }
        if self.theta.is_empty() && self.noise_chars == 0 {
            return bad("at least one characteristic is required");
        }
        if !(self.rho.abs() < 1.0) {
            return bad("rho must lie in (-1, 1)");
        }
        if !(self.market_vol > 0.0) || self.idio_vol < 0.0 {
            return bad("volatilities must be positive (idiosyncratic may be zero)");
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad("missing_rate must lie in [0, 1)");
        }
        if self.beta_clip.0 > self.beta_clip.1 {
            return bad("beta_clip bounds are reversed");
        }
        Ok(())
    }
}

/// Ground-truth monthly betas, `values[asset][month index]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrueBetas {
    pub asset_ids: Vec<String>,
    pub months: Vec<Month>,
    pub values: Vec<Vec<f64>>,
}

impl TrueBetas {
    pub fn get(&self, asset: usize, month: Month) -> Option<f64> {
        let m = self.months.binary_search(&month).ok()?;
        Some(self.values[asset][m])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        w.write_record(["month", "asset_id", "beta"])
            .map_err(|e| Error::csv(path, e))?;
        for (m, month) in self.months.iter().enumerate() {
            for (a, id) in self.asset_ids.iter().enumerate() {
                w.write_record([month.to_string(), id.clone(), self.values[a][m].to_string()])
                    .map_err(|e| Error::csv(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub returns: ReturnPanel,
    pub characteristics: CharacteristicPanel,
    pub meta: MonthlyMeta,
    pub true_betas: TrueBetas,
}

pub fn asset_id(i: usize) -> String {
    format!("A{i:05}")
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn standardize(xs: &mut [f64]) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    for x in xs.iter_mut() {
        *x = if sd > 0.0 { (*x - mean) / sd } else { 0.0 };
    }
}

/// Characteristic names, signal first, and their groups (round-robin over
/// the taxonomy).
fn predictor_layout(cfg: &DgpConfig) -> (Vec<String>, Vec<PredictorGroup>) {
    let names: Vec<String> = (1..=cfg.theta.len())
        .map(|k| format!("sig{k}"))
        .chain((1..=cfg.noise_chars).map(|k| format!("noise{k}")))
        .collect();
    let groups = (0..names.len())
        .map(|j| PredictorGroup::ALL[j % PredictorGroup::ALL.len()])
        .collect();
    (names, groups)
}

pub fn generate(cfg: &DgpConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let (n, t, d) = (cfg.n_assets, cfg.n_months, cfg.days_per_month);
    let k = cfg.theta.len() + cfg.noise_chars;
    let burn = cfg.beta_lag;
    let total = t + burn;
    let innov = (1.0 - cfg.rho * cfg.rho).sqrt();

    // Per-asset draws: characteristic innovations, size state, returns noise.
    struct AssetDraws {
        shocks: Vec<f64>,
        size: Vec<f64>,
        eps: Vec<f64>,
        missing: Vec<bool>,
    }
    let draws = par::map_range(n, |i| {
        let mut rng = stream(cfg.seed, i as u64 + 1);
        let shocks = (0..total * k)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut s = 2.0 * rng.sample::<f64, _>(StandardNormal);
        let size = (0..t)
            .map(|_| {
                s = 0.95 * s + 0.3 * rng.sample::<f64, _>(StandardNormal);
                s
            })
            .collect();
        let eps = (0..t * d)
            .map(|_| cfg.idio_vol * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let missing = (0..t * d)
            .map(|_| cfg.missing_rate > 0.0 && rng.random::<f64>() < cfg.missing_rate)
            .collect();
        AssetDraws {
            shocks,
            size,
            eps,
            missing,
        }
    });

    // Characteristics x[month][asset * k + j], re-standardized each month.
    let mut x: Vec<Vec<f64>> = Vec::with_capacity(total);
    for m in 0..total {
        let mut cur = vec![0.0; n * k];
        for j in 0..k {
            let mut col: Vec<f64> = (0..n)
                .map(|i| {
                    let shock = draws[i].shocks[m * k + j];
                    if m == 0 {
                        shock
                    } else {
                        cfg.rho * x[m - 1][i * k + j] + innov * shock
                    }
                })
                .collect();
            standardize(&mut col);
            for i in 0..n {
                cur[i * k + j] = col[i];
            }
        }
        x.push(cur);
    }

    let months: Vec<Month> = (0..t).map(|m| cfg.start_month.offset(m as i32)).collect();
    let betas: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..t)
                .map(|m| {
                    let src = &x[m + burn - cfg.beta_lag];
                    let lin: f64 = cfg
                        .theta
                        .iter()
                        .enumerate()
                        .map(|(j, th)| th * src[i * k + j])
                        .sum();
                    (cfg.b0 + lin).clamp(cfg.beta_clip.0, cfg.beta_clip.1)
                })
                .collect()
        })
        .collect();

    let mut market_rng = stream(cfg.seed, 0);
    let normal = Normal::new(cfg.market_mean, cfg.market_vol)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let market: Vec<f64> = (0..t * d).map(|_| normal.sample(&mut market_rng)).collect();
    let dates: Vec<NaiveDate> = months
        .iter()
        .flat_map(|m| {
            (1..=d as u32)
                .map(move |day| NaiveDate::from_ymd_opt(m.year(), m.month(), day).unwrap())
        })
        .collect();
    let returns: Vec<Vec<Option<f64>>> = par::map_range(n, |i| {
        (0..t * d)
            .map(|day| {
                let r = betas[i][day / d] * market[day] + draws[i].eps[day];
                (!draws[i].missing[day]).then_some(r)
            })
            .collect()
    });
    let asset_ids: Vec<String> = (0..n).map(asset_id).collect();
    let rp = ReturnPanel::new(asset_ids.clone(), dates, returns, market)?;

    let (names, groups) = predictor_layout(cfg);
    let slices = (0..t)
        .map(|m| MonthSlice {
            assets: (0..n).collect(),
            values: x[m + burn].clone(),
            missing: vec![false; n * k],
        })
        .collect();
    let cp = CharacteristicPanel::new(months.clone(), asset_ids.clone(), names, groups, slices)?;

    let mut meta = MonthlyMeta::default();
    for (i, id) in asset_ids.iter().enumerate() {
        for (m, month) in months.iter().enumerate() {
            let mktcap = 1e3 * draws[i].size[m].exp();
            meta.insert(
                id.clone(),
                *month,
                MetaRow {
                    price: 20.0 * (0.5 * draws[i].size[m]).exp(),
                    volume: 1e4 * (0.8 * draws[i].size[m]).exp(),
                    mktcap,
                    dividend: Some(mktcap * 0.03 / 12.0),
                },
            );
        }
    }

    Ok(SyntheticData {
        returns: rp,
        characteristics: cp,
        meta,
        true_betas: TrueBetas {
            asset_ids,
            months,
            values: betas,
        },
    })
}

/// File names written by [`write_dataset`].
pub const RETURNS_FILE: &str = "returns.csv";
pub const MARKET_FILE: &str = "market.csv";
pub const CHARACTERISTICS_FILE: &str = "characteristics.csv";
pub const GROUPS_FILE: &str = "groups.csv";
pub const META_FILE: &str = "meta.csv";
pub const TRUE_BETAS_FILE: &str = "true_betas.csv";

pub fn write_dataset(data: &SyntheticData, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let fmt = DelimitedFormat::default();
    write_daily_returns(&dir.join(RETURNS_FILE), &data.returns, fmt)?;
    write_market(&dir.join(MARKET_FILE), &data.returns, fmt)?;
    write_characteristics(&dir.join(CHARACTERISTICS_FILE), &data.characteristics, fmt)?;
    write_group_map(&dir.join(GROUPS_FILE), &data.characteristics, fmt)?;
    write_monthly_meta(&dir.join(META_FILE), &data.meta, fmt)?;
    data.true_betas.write_csv(&dir.join(TRUE_BETAS_FILE))
}
