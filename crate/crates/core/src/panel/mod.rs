//! In-memory daily-return and monthly-characteristic panels.
//!
//! Both panels are immutable after construction and are shared read-only
//! between parallel workers downstream.

mod io;
mod preprocess;
mod universe;

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::month::Month;

pub use io::{
    load_characteristics, load_daily_returns, load_monthly_meta, write_characteristics,
    write_daily_returns, write_group_map, write_market, write_monthly_meta, DelimitedFormat,
    MarketSource,
};
pub use preprocess::{lag_predictors, preprocess_characteristics};
pub use universe::{
    apply_universe_filters, EligibilityMask, MetaRow, MonthlyMeta, ReferenceUniverse,
    UniverseFilter,
};

/// Daily excess returns for a set of assets plus the market, indexed by
/// trading day and partitioned into calendar months.
#[derive(Clone, Debug)]
pub struct ReturnPanel {
    asset_ids: Vec<String>,
    dates: Vec<NaiveDate>,
    /// `returns[asset][day]`; `None` marks a missing observation.
    returns: Vec<Vec<Option<f64>>>,
    market: Vec<f64>,
    months: Vec<Month>,
    month_spans: Vec<Range<usize>>,
}

impl ReturnPanel {
    /// Validates and builds a panel. `returns` is indexed `[asset][day]`.
    pub fn new(
        asset_ids: Vec<String>,
        dates: Vec<NaiveDate>,
        returns: Vec<Vec<Option<f64>>>,
        market: Vec<f64>,
    ) -> Result<Self> {
        if returns.len() != asset_ids.len() {
            return Err(Error::LengthMismatch(returns.len(), asset_ids.len()));
        }
        if market.len() != dates.len() {
            return Err(Error::LengthMismatch(market.len(), dates.len()));
        }
        for w in dates.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidArgument(format!(
                    "dates must be strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        for (d, m) in dates.iter().zip(&market) {
            if !m.is_finite() {
                return Err(Error::MissingMarket(d.to_string()));
            }
        }
        for (id, series) in asset_ids.iter().zip(&returns) {
            if series.len() != dates.len() {
                return Err(Error::LengthMismatch(series.len(), dates.len()));
            }
            if series.iter().flatten().any(|r| !r.is_finite()) {
                return Err(Error::NonFinite(format!("return for asset {id}")));
            }
        }
        let mut months = Vec::new();
        let mut month_spans: Vec<Range<usize>> = Vec::new();
        for (i, d) in dates.iter().enumerate() {
            let m = Month::from_date(*d);
            if months.last() == Some(&m) {
                month_spans.last_mut().unwrap().end = i + 1;
            } else {
                months.push(m);
                month_spans.push(i..i + 1);
            }
        }
        Ok(ReturnPanel {
            asset_ids,
            dates,
            returns,
            market,
            months,
            month_spans,
        })
    }

    pub fn asset_ids(&self) -> &[String] {
        &self.asset_ids
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn market(&self) -> &[f64] {
        &self.market
    }

    pub fn asset_returns(&self, asset: usize) -> &[Option<f64>] {
        &self.returns[asset]
    }

    pub fn n_assets(&self) -> usize {
        self.asset_ids.len()
    }

    pub fn n_return_cells(&self) -> usize {
        self.returns
            .iter()
            .map(|s| s.iter().flatten().count())
            .sum()
    }

    /// Calendar months covered by the panel, increasing.
    pub fn months(&self) -> &[Month] {
        &self.months
    }

    /// Day-index range of a month, if the month is in the panel.
    pub fn month_span(&self, month: Month) -> Option<Range<usize>> {
        self.months
            .binary_search(&month)
            .ok()
            .map(|i| self.month_spans[i].clone())
    }

    /// Day-index range covering the inclusive month window `first..=last`
    /// (restricted to months present in the panel).
    pub fn window_span(&self, first: Month, last: Month) -> Option<Range<usize>> {
        let lo = self.months.partition_point(|m| *m < first);
        let hi = self.months.partition_point(|m| *m <= last);
        if lo >= hi {
            None
        } else {
            Some(self.month_spans[lo].start..self.month_spans[hi - 1].end)
        }
    }

    pub fn month_of_day(&self, day: usize) -> Month {
        Month::from_date(self.dates[day])
    }

    /// Whether the asset has at least one daily return in `month`.
    pub fn has_return_in(&self, asset: usize, month: Month) -> bool {
        self.month_span(month)
            .map(|span| self.returns[asset][span].iter().any(Option::is_some))
            .unwrap_or(false)
    }

    /// Aligned `(asset, market)` pairs over a day range, skipping missing days.
    pub fn aligned(&self, asset: usize, span: Range<usize>) -> (Vec<f64>, Vec<f64>) {
        let mut ri = Vec::with_capacity(span.len());
        let mut rm = Vec::with_capacity(span.len());
        for d in span {
            if let Some(r) = self.returns[asset][d] {
                ri.push(r);
                rm.push(self.market[d]);
            }
        }
        (ri, rm)
    }

    pub fn index_of(&self, asset_id: &str) -> Option<usize> {
        self.asset_ids.iter().position(|a| a == asset_id)
    }
}

/// Predictor taxonomy used to group characteristics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PredictorGroup {
    Intangibles,
    Investment,
    Momentum,
    Profitability,
    TradingFrictions,
    ValueVsGrowth,
}

impl PredictorGroup {
    pub const ALL: [PredictorGroup; 6] = [
        PredictorGroup::Intangibles,
        PredictorGroup::Investment,
        PredictorGroup::Momentum,
        PredictorGroup::Profitability,
        PredictorGroup::TradingFrictions,
        PredictorGroup::ValueVsGrowth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PredictorGroup::Intangibles => "Intangibles",
            PredictorGroup::Investment => "Investment",
            PredictorGroup::Momentum => "Momentum",
            PredictorGroup::Profitability => "Profitability",
            PredictorGroup::TradingFrictions => "TradingFrictions",
            PredictorGroup::ValueVsGrowth => "ValueVsGrowth",
        }
    }
}

impl fmt::Display for PredictorGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PredictorGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        Ok(match key.as_str() {
            "intangibles" => PredictorGroup::Intangibles,
            "investment" => PredictorGroup::Investment,
            "momentum" => PredictorGroup::Momentum,
            "profitability" => PredictorGroup::Profitability,
            "tradingfrictions" => PredictorGroup::TradingFrictions,
            "valuevsgrowth" | "valuegrowth" => PredictorGroup::ValueVsGrowth,
            _ => return Err(Error::UnknownGroup(s.to_string())),
        })
    }
}

/// One month's cross-section: the assets observed and their predictor rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MonthSlice {
    /// Indices into the panel's `asset_ids`, increasing.
    pub assets: Vec<usize>,
    /// Row-major `assets.len() x P` values; missing cells hold NaN.
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
}

impl MonthSlice {
    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn row(&self, i: usize, p: usize) -> &[f64] {
        &self.values[i * p..(i + 1) * p]
    }

    pub fn position(&self, asset: usize) -> Option<usize> {
        self.assets.binary_search(&asset).ok()
    }
}

/// Monthly firm characteristics with predictor-group labels.
#[derive(Clone, Debug, PartialEq)]
pub struct CharacteristicPanel {
    months: Vec<Month>,
    asset_ids: Vec<String>,
    predictor_names: Vec<String>,
    predictor_groups: Vec<PredictorGroup>,
    slices: Vec<MonthSlice>,
    lag_applied: u32,
}

impl CharacteristicPanel {
    pub fn new(
        months: Vec<Month>,
        asset_ids: Vec<String>,
        predictor_names: Vec<String>,
        predictor_groups: Vec<PredictorGroup>,
        slices: Vec<MonthSlice>,
    ) -> Result<Self> {
        if predictor_names.len() != predictor_groups.len() {
            return Err(Error::LengthMismatch(
                predictor_names.len(),
                predictor_groups.len(),
            ));
        }
        if predictor_names.is_empty() {
            return Err(Error::Empty("predictor list".into()));
        }
        if months.len() != slices.len() {
            return Err(Error::LengthMismatch(months.len(), slices.len()));
        }
        if months.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "months must be strictly increasing".into(),
            ));
        }
        let p = predictor_names.len();
        for s in &slices {
            if s.values.len() != s.assets.len() * p || s.missing.len() != s.values.len() {
                return Err(Error::LengthMismatch(s.values.len(), s.assets.len() * p));
            }
            if s.assets.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(
                    "slice assets must be increasing".into(),
                ));
            }
        }
        Ok(CharacteristicPanel {
            months,
            asset_ids,
            predictor_names,
            predictor_groups,
            slices,
            lag_applied: 0,
        })
    }

    pub fn months(&self) -> &[Month] {
        &self.months
    }

    pub fn asset_ids(&self) -> &[String] {
        &self.asset_ids
    }

    pub fn predictor_names(&self) -> &[String] {
        &self.predictor_names
    }

    pub fn predictor_groups(&self) -> &[PredictorGroup] {
        &self.predictor_groups
    }

    pub fn n_predictors(&self) -> usize {
        self.predictor_names.len()
    }

    pub fn lag_applied(&self) -> u32 {
        self.lag_applied
    }

    pub fn slices(&self) -> &[MonthSlice] {
        &self.slices
    }

    pub fn slice(&self, month: Month) -> Option<&MonthSlice> {
        self.months
            .binary_search(&month)
            .ok()
            .map(|i| &self.slices[i])
    }

    /// The month the data stored under `month` was originally observed.
    pub fn origin_month(&self, month: Month) -> Month {
        month.offset(-(self.lag_applied as i32))
    }

    pub fn group_of(&self, predictor: &str) -> Option<PredictorGroup> {
        self.predictor_names
            .iter()
            .position(|n| n == predictor)
            .map(|j| self.predictor_groups[j])
    }

    /// Column indices per group, in `PredictorGroup::ALL` order.
    pub fn group_columns(&self) -> Vec<(PredictorGroup, Vec<usize>)> {
        PredictorGroup::ALL
            .iter()
            .map(|g| {
                let cols = (0..self.n_predictors())
                    .filter(|&j| self.predictor_groups[j] == *g)
                    .collect();
                (*g, cols)
            })
            .collect()
    }

    /// Predictor row of `asset` in `month`.
    pub fn row(&self, month: Month, asset: usize) -> Option<&[f64]> {
        let s = self.slice(month)?;
        let i = s.position(asset)?;
        Some(s.row(i, self.n_predictors()))
    }

    pub fn is_missing(&self, month: Month, asset: usize, predictor: usize) -> Option<bool> {
        let s = self.slice(month)?;
        let i = s.position(asset)?;
        Some(s.missing[i * self.n_predictors() + predictor])
    }

    pub fn has_missing(&self) -> bool {
        self.slices.iter().any(|s| s.missing.iter().any(|&m| m))
    }

    pub fn asset_index(&self, id: &str) -> Option<usize> {
        self.asset_ids.iter().position(|a| a == id)
    }

    /// Appends extra predictor columns. `values` maps `(month, asset)` to a
    /// row of length `names.len()`; absent cells become missing.
    pub fn with_extra_columns(
        &self,
        names: &[String],
        groups: &[PredictorGroup],
        values: &HashMap<(Month, usize), Vec<Option<f64>>>,
    ) -> Result<Self> {
        if names.len() != groups.len() {
            return Err(Error::LengthMismatch(names.len(), groups.len()));
        }
        let p_old = self.n_predictors();
        let p_new = p_old + names.len();
        let slices = self
            .months
            .iter()
            .zip(&self.slices)
            .map(|(m, s)| {
                let mut out = MonthSlice {
                    assets: s.assets.clone(),
                    values: Vec::with_capacity(s.assets.len() * p_new),
                    missing: Vec::with_capacity(s.assets.len() * p_new),
                };
                for (i, &a) in s.assets.iter().enumerate() {
                    out.values.extend_from_slice(s.row(i, p_old));
                    out.missing
                        .extend_from_slice(&s.missing[i * p_old..(i + 1) * p_old]);
                    let extra = values.get(&(*m, a));
                    for k in 0..names.len() {
                        match extra.and_then(|row| row[k]) {
                            Some(v) if v.is_finite() => {
                                out.values.push(v);
                                out.missing.push(false);
                            }
                            _ => {
                                out.values.push(f64::NAN);
                                out.missing.push(true);
                            }
                        }
                    }
                }
                out
            })
            .collect();
        let mut predictor_names = self.predictor_names.clone();
        predictor_names.extend_from_slice(names);
        let mut predictor_groups = self.predictor_groups.clone();
        predictor_groups.extend_from_slice(groups);
        Ok(CharacteristicPanel {
            months: self.months.clone(),
            asset_ids: self.asset_ids.clone(),
            predictor_names,
            predictor_groups,
            slices,
            lag_applied: self.lag_applied,
        })
    }

    pub(crate) fn from_parts(
        months: Vec<Month>,
        asset_ids: Vec<String>,
        predictor_names: Vec<String>,
        predictor_groups: Vec<PredictorGroup>,
        slices: Vec<MonthSlice>,
        lag_applied: u32,
    ) -> Self {
        CharacteristicPanel {
            months,
            asset_ids,
            predictor_names,
            predictor_groups,
            slices,
            lag_applied,
        }
    }
}
