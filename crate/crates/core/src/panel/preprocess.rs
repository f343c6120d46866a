use super::{CharacteristicPanel, MonthSlice};
use crate::error::{Error, Result};
use crate::stats::{median, quantile_sorted};

const WINSOR_LO: f64 = 0.005;
const WINSOR_HI: f64 = 0.995;

/// Cross-sectional cleaning, month by month and column by column:
/// median imputation, winsorization at the 0.5/99.5 percentiles, then
/// z-scoring with the population standard deviation. Constant columns
/// become zero, as do columns missing for every asset in a month.
pub fn preprocess_characteristics(cp: &CharacteristicPanel) -> Result<CharacteristicPanel> {
    let p = cp.n_predictors();
    let mut slices = Vec::with_capacity(cp.slices().len());
    for (month, s) in cp.months().iter().zip(cp.slices()) {
        let n = s.n_assets();
        if n == 0 {
            return Err(Error::EmptyMonth(*month));
        }
        let mut values = s.values.clone();
        for j in 0..p {
            let mut col: Vec<f64> = (0..n)
                .filter(|&i| !s.missing[i * p + j])
                .map(|i| s.values[i * p + j])
                .collect();
            if col.is_empty() {
                for i in 0..n {
                    values[i * p + j] = 0.0;
                }
                continue;
            }
            let fill = median(&col);
            col.clear();
            col.extend((0..n).map(|i| {
                if s.missing[i * p + j] {
                    fill
                } else {
                    s.values[i * p + j]
                }
            }));
            standardize_column(&mut col);
            for i in 0..n {
                values[i * p + j] = col[i];
            }
        }
        slices.push(MonthSlice {
            assets: s.assets.clone(),
            values,
            missing: vec![false; n * p],
        });
    }
    Ok(CharacteristicPanel::from_parts(
        cp.months().to_vec(),
        cp.asset_ids().to_vec(),
        cp.predictor_names().to_vec(),
        cp.predictor_groups().to_vec(),
        slices,
        cp.lag_applied(),
    ))
}

/// Winsorize then z-score one cross-sectional column in place.
fn standardize_column(col: &mut [f64]) {
    let mut sorted = col.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&sorted, WINSOR_LO);
    let hi = quantile_sorted(&sorted, WINSOR_HI);
    for v in col.iter_mut() {
        *v = v.clamp(lo, hi);
    }
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if sd <= 1e-14 * (1.0 + mean.abs()) {
        col.fill(0.0);
        return;
    }
    for v in col.iter_mut() {
        *v = (*v - mean) / sd;
    }
}

/// Shifts every predictor forward by `h` months: the row stored at month
/// `t` is the raw row observed at `t - h`. Months whose source falls before
/// the panel start are dropped, and nothing is stored past the last raw
/// month.
pub fn lag_predictors(cp: &CharacteristicPanel, h: i64) -> Result<CharacteristicPanel> {
    if h <= 0 {
        return Err(Error::InvalidLag(h));
    }
    let h32 = h as i32;
    let Some(&last) = cp.months().last() else {
        return Err(Error::EmptyAfterLag(h as u32));
    };
    let mut months = Vec::new();
    let mut slices = Vec::new();
    for (m, s) in cp.months().iter().zip(cp.slices()) {
        let target = m.offset(h32);
        if target > last {
            break;
        }
        months.push(target);
        slices.push(s.clone());
    }
    if months.is_empty() {
        return Err(Error::EmptyAfterLag(h as u32));
    }
    Ok(CharacteristicPanel::from_parts(
        months,
        cp.asset_ids().to_vec(),
        cp.predictor_names().to_vec(),
        cp.predictor_groups().to_vec(),
        slices,
        cp.lag_applied() + h as u32,
    ))
}
