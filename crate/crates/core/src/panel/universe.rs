use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use serde::{Deserialize, Serialize};

use super::ReturnPanel;
use crate::error::{Error, Result};
use crate::month::Month;
use crate::stats::quantile;

/// Monthly per-asset market data: price, volume, market cap and the cash
/// flow used for valuation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaRow {
    pub price: f64,
    pub volume: f64,
    pub mktcap: f64,
    pub dividend: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MonthlyMeta {
    rows: BTreeMap<(String, Month), MetaRow>,
}

impl MonthlyMeta {
    pub fn insert(&mut self, asset: String, month: Month, row: MetaRow) {
        self.rows.insert((asset, month), row);
    }

    pub fn get(&self, asset: &str, month: Month) -> Option<&MetaRow> {
        self.rows.get(&(asset.to_string(), month))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, Month), &MetaRow)> {
        self.rows.iter()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Which assets define the market-cap percentile threshold.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceUniverse {
    #[default]
    All,
    Assets(BTreeSet<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniverseFilter {
    pub min_price: f64,
    pub require_positive_volume: bool,
    pub market_cap_percentile: f64,
    pub percentile_reference: ReferenceUniverse,
}

impl Default for UniverseFilter {
    fn default() -> Self {
        UniverseFilter {
            min_price: 5.0,
            require_positive_volume: true,
            market_cap_percentile: 0.2,
            percentile_reference: ReferenceUniverse::All,
        }
    }
}

/// Per-month eligibility flags, indexed by the return panel's asset order.
pub type EligibilityMask = BTreeMap<Month, Vec<bool>>;

/// Marks an asset eligible in a month iff its price exceeds `min_price`,
/// its volume is positive (when required) and its market cap is at least
/// the configured quantile of the reference universe's caps that month.
/// Assets without a meta row for the month are ineligible.
pub fn apply_universe_filters(
    rp: &ReturnPanel,
    meta: &MonthlyMeta,
    f: &UniverseFilter,
) -> Result<EligibilityMask> {
    if !(0.0..=1.0).contains(&f.market_cap_percentile) {
        return Err(Error::InvalidArgument(format!(
            "market_cap_percentile {} outside [0, 1]",
            f.market_cap_percentile
        )));
    }
    let mut mask = EligibilityMask::new();
    for &month in rp.months() {
        let reference: Vec<f64> = rp
            .asset_ids()
            .iter()
            .filter(|id| match &f.percentile_reference {
                ReferenceUniverse::All => true,
                ReferenceUniverse::Assets(set) => set.contains(*id),
            })
            .filter_map(|id| meta.get(id, month).map(|r| r.mktcap))
            .collect();
        let threshold = if reference.is_empty() {
            warn!("month {month}: empty reference universe, market-cap screen disabled");
            f64::NEG_INFINITY
        } else {
            quantile(&reference, f.market_cap_percentile)
        };
        let flags = rp
            .asset_ids()
            .iter()
            .map(|id| match meta.get(id, month) {
                None => false,
                Some(r) => {
                    r.price > f.min_price
                        && (!f.require_positive_volume || r.volume > 0.0)
                        && r.mktcap >= threshold
                }
            })
            .collect();
        mask.insert(month, flags);
    }
    Ok(mask)
}
