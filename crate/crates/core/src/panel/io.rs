//! Delimited-text readers and writers for the panel file formats.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use csv::StringRecord;

use super::universe::{MetaRow, MonthlyMeta};
use super::{CharacteristicPanel, MonthSlice, PredictorGroup, ReturnPanel};
use crate::error::{Error, Result};
use crate::month::Month;

/// Delimited-text dialect. UTF-8 with a header row.
#[derive(Clone, Copy, Debug)]
pub struct DelimitedFormat {
    pub delimiter: u8,
}

impl Default for DelimitedFormat {
    fn default() -> Self {
        DelimitedFormat { delimiter: b',' }
    }
}

/// Where the market series comes from.
#[derive(Clone, Debug)]
pub enum MarketSource {
    /// A separate `(date, ret)` file.
    File(PathBuf),
    /// Rows of the returns file whose `asset_id` equals this value.
    ReservedAsset(String),
}

fn reader(path: &Path, fmt: DelimitedFormat) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .delimiter(fmt.delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn writer(path: &Path, fmt: DelimitedFormat) -> Result<csv::Writer<BufWriter<File>>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .delimiter(fmt.delimiter)
        .from_writer(BufWriter::new(file)))
}

fn column(headers: &StringRecord, names: &[&str], path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| names.iter().any(|n| h.eq_ignore_ascii_case(n)))
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            row: 1,
            message: format!("missing column {:?}", names[0]),
        })
}

fn line_of(rec: &StringRecord) -> usize {
    rec.position().map(|p| p.line() as usize).unwrap_or(0)
}

fn parse_err(path: &Path, row: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        row,
        message: message.into(),
    }
}

fn is_missing_token(s: &str) -> bool {
    matches!(s, "" | "NA" | "na" | "NaN" | "nan" | "." | "null")
}

/// Parses a numeric cell; missing tokens yield `None`.
fn parse_cell(s: &str, path: &Path, row: usize) -> Result<Option<f64>> {
    if is_missing_token(s) {
        return Ok(None);
    }
    let v: f64 = s
        .parse()
        .map_err(|_| parse_err(path, row, format!("unparseable number {s:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(path, row, format!("non-finite number {s:?}")));
    }
    Ok(Some(v))
}

fn parse_date(s: &str, path: &Path, row: usize) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map_err(|_| parse_err(path, row, format!("unparseable date {s:?}")))
}

fn parse_month(s: &str, path: &Path, row: usize) -> Result<Month> {
    s.parse::<Month>().map_err(|m| parse_err(path, row, m))
}

fn read_date_series(
    path: &Path,
    fmt: DelimitedFormat,
) -> Result<BTreeMap<NaiveDate, (f64, usize)>> {
    let mut rdr = reader(path, fmt)?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    let date_col = column(&headers, &["date"], path)?;
    let ret_col = column(&headers, &["ret", "return", "rf"], path)?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let row = line_of(&rec);
        let date = parse_date(&rec[date_col], path, row)?;
        let v = parse_cell(&rec[ret_col], path, row)?
            .ok_or_else(|| parse_err(path, row, "missing value"))?;
        if let Some((_, first)) = out.insert(date, (v, row)) {
            return Err(Error::DuplicateKey {
                asset: "<series>".into(),
                date: date.to_string(),
                first_row: first,
                second_row: row,
            });
        }
    }
    Ok(out)
}

/// Loads daily excess returns `(date, asset_id, ret)`.
///
/// When `riskfree` is given, its `(date, rf)` rate is subtracted from every
/// asset and market return before storage.
pub fn load_daily_returns(
    path: &Path,
    market: &MarketSource,
    riskfree: Option<&Path>,
    fmt: DelimitedFormat,
) -> Result<ReturnPanel> {
    let mut rdr = reader(path, fmt)?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    let date_col = column(&headers, &["date"], path)?;
    let asset_col = column(&headers, &["asset_id", "asset", "permno"], path)?;
    let ret_col = column(&headers, &["ret", "return"], path)?;

    let reserved = match market {
        MarketSource::ReservedAsset(id) => Some(id.as_str()),
        MarketSource::File(_) => None,
    };
    let mut cells: HashMap<(String, NaiveDate), (Option<f64>, usize)> = HashMap::new();
    let mut market_rows: BTreeMap<NaiveDate, (f64, usize)> = BTreeMap::new();
    let mut listed_dates = BTreeSet::new();
    let mut asset_set = BTreeSet::new();

    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let row = line_of(&rec);
        let date = parse_date(&rec[date_col], path, row)?;
        let asset = rec[asset_col].to_string();
        let value = parse_cell(&rec[ret_col], path, row)?;
        if Some(asset.as_str()) == reserved {
            let v = value.ok_or_else(|| parse_err(path, row, "missing market return"))?;
            if let Some((_, first)) = market_rows.insert(date, (v, row)) {
                return Err(Error::DuplicateKey {
                    asset,
                    date: date.to_string(),
                    first_row: first,
                    second_row: row,
                });
            }
            continue;
        }
        listed_dates.insert(date);
        if let Some((_, first)) = cells.get(&(asset.clone(), date)) {
            return Err(Error::DuplicateKey {
                asset,
                date: date.to_string(),
                first_row: *first,
                second_row: row,
            });
        }
        asset_set.insert(asset.clone());
        cells.insert((asset, date), (value, row));
    }

    if let MarketSource::File(mpath) = market {
        market_rows = read_date_series(mpath, fmt)?;
    }
    if market_rows.is_empty() {
        return Err(Error::MissingMarket("<no market series>".into()));
    }
    for d in &listed_dates {
        if !market_rows.contains_key(d) {
            return Err(Error::MissingMarket(d.to_string()));
        }
    }
    let rf = match riskfree {
        Some(p) => Some(read_date_series(p, fmt)?),
        None => None,
    };
    let rf_on = |d: &NaiveDate| -> Result<f64> {
        match &rf {
            None => Ok(0.0),
            Some(series) => series
                .get(d)
                .map(|(v, _)| *v)
                .ok_or_else(|| Error::InvalidArgument(format!("risk-free rate missing on {d}"))),
        }
    };

    let dates: Vec<NaiveDate> = market_rows.keys().copied().collect();
    let market: Vec<f64> = dates
        .iter()
        .map(|d| Ok(market_rows[d].0 - rf_on(d)?))
        .collect::<Result<_>>()?;
    let asset_ids: Vec<String> = asset_set.into_iter().collect();
    let mut returns = Vec::with_capacity(asset_ids.len());
    for a in &asset_ids {
        let mut series = Vec::with_capacity(dates.len());
        for d in &dates {
            let v = match cells.get(&(a.clone(), *d)) {
                Some((Some(r), _)) => Some(r - rf_on(d)?),
                _ => None,
            };
            series.push(v);
        }
        returns.push(series);
    }
    ReturnPanel::new(asset_ids, dates, returns, market)
}

fn load_group_map(path: &Path, fmt: DelimitedFormat) -> Result<HashMap<String, PredictorGroup>> {
    let mut rdr = reader(path, fmt)?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    let name_col = column(&headers, &["predictor", "name", "acronym"], path)?;
    let group_col = column(&headers, &["group"], path)?;
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        out.insert(rec[name_col].to_string(), rec[group_col].parse()?);
    }
    Ok(out)
}

/// Loads monthly characteristics `(month, asset_id, <P columns>)` and the
/// `(predictor, group)` map. Blank cells are recorded as missing.
pub fn load_characteristics(
    path: &Path,
    group_map_path: &Path,
    fmt: DelimitedFormat,
) -> Result<CharacteristicPanel> {
    let groups = load_group_map(group_map_path, fmt)?;
    let mut rdr = reader(path, fmt)?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    let month_col = column(&headers, &["month", "date"], path)?;
    let asset_col = column(&headers, &["asset_id", "asset", "permno"], path)?;
    let predictor_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != month_col && c != asset_col)
        .collect();
    let predictor_names: Vec<String> = predictor_cols
        .iter()
        .map(|&c| headers[c].to_string())
        .collect();
    let predictor_groups = predictor_names
        .iter()
        .map(|n| {
            groups
                .get(n)
                .copied()
                .ok_or_else(|| Error::UngroupedPredictor(n.clone()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows: BTreeMap<Month, BTreeMap<String, (Vec<Option<f64>>, usize)>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let row = line_of(&rec);
        let month = parse_month(&rec[month_col], path, row)?;
        let asset = rec[asset_col].to_string();
        let vals = predictor_cols
            .iter()
            .map(|&c| parse_cell(&rec[c], path, row))
            .collect::<Result<Vec<_>>>()?;
        let by_asset = rows.entry(month).or_default();
        if let Some((_, first)) = by_asset.get(&asset) {
            return Err(Error::DuplicateKey {
                asset,
                date: month.to_string(),
                first_row: *first,
                second_row: row,
            });
        }
        by_asset.insert(asset, (vals, row));
    }

    let asset_ids: Vec<String> = rows
        .values()
        .flat_map(|m| m.keys().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: HashMap<&str, usize> = asset_ids
        .iter()
        .enumerate()
        .map(|(i, a)| (a.as_str(), i))
        .collect();
    let mut months = Vec::with_capacity(rows.len());
    let mut slices = Vec::with_capacity(rows.len());
    for (m, by_asset) in &rows {
        let mut slice = MonthSlice {
            assets: Vec::new(),
            values: Vec::new(),
            missing: Vec::new(),
        };
        for (a, (vals, _)) in by_asset {
            slice.assets.push(index[a.as_str()]);
            for v in vals {
                slice.values.push(v.unwrap_or(f64::NAN));
                slice.missing.push(v.is_none());
            }
        }
        months.push(*m);
        slices.push(slice);
    }
    CharacteristicPanel::new(months, asset_ids, predictor_names, predictor_groups, slices)
}

/// Loads `(month, asset_id, price, volume, mktcap[, dividend])`.
pub fn load_monthly_meta(path: &Path, fmt: DelimitedFormat) -> Result<MonthlyMeta> {
    let mut rdr = reader(path, fmt)?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    let month_col = column(&headers, &["month", "date"], path)?;
    let asset_col = column(&headers, &["asset_id", "asset", "permno"], path)?;
    let price_col = column(&headers, &["price", "prc"], path)?;
    let vol_col = column(&headers, &["volume", "vol"], path)?;
    let cap_col = column(&headers, &["mktcap", "market_cap", "cap"], path)?;
    let div_col = column(&headers, &["dividend", "cash_flow", "cf"], path).ok();
    let mut meta = MonthlyMeta::default();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let row = line_of(&rec);
        let month = parse_month(&rec[month_col], path, row)?;
        let need = |c: usize, what: &str| -> Result<f64> {
            parse_cell(&rec[c], path, row)?
                .ok_or_else(|| parse_err(path, row, format!("missing {what}")))
        };
        let r = MetaRow {
            price: need(price_col, "price")?,
            volume: need(vol_col, "volume")?,
            mktcap: need(cap_col, "mktcap")?,
            dividend: match div_col {
                Some(c) => parse_cell(&rec[c], path, row)?,
                None => None,
            },
        };
        meta.insert(rec[asset_col].to_string(), month, r);
    }
    Ok(meta)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn finish<W: Write>(mut w: csv::Writer<W>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_daily_returns(path: &Path, rp: &ReturnPanel, fmt: DelimitedFormat) -> Result<()> {
    let mut w = writer(path, fmt)?;
    w.write_record(["date", "asset_id", "ret"])
        .map_err(|e| Error::csv(path, e))?;
    for (d, date) in rp.dates().iter().enumerate() {
        for (a, id) in rp.asset_ids().iter().enumerate() {
            if let Some(r) = rp.asset_returns(a)[d] {
                w.write_record([date.to_string(), id.clone(), r.to_string()])
                    .map_err(|e| Error::csv(path, e))?;
            }
        }
    }
    finish(w, path)
}

pub fn write_market(path: &Path, rp: &ReturnPanel, fmt: DelimitedFormat) -> Result<()> {
    let mut w = writer(path, fmt)?;
    w.write_record(["date", "ret"])
        .map_err(|e| Error::csv(path, e))?;
    for (date, r) in rp.dates().iter().zip(rp.market()) {
        w.write_record([date.to_string(), r.to_string()])
            .map_err(|e| Error::csv(path, e))?;
    }
    finish(w, path)
}

pub fn write_characteristics(
    path: &Path,
    cp: &CharacteristicPanel,
    fmt: DelimitedFormat,
) -> Result<()> {
    let mut w = writer(path, fmt)?;
    let mut header = vec!["month".to_string(), "asset_id".to_string()];
    header.extend(cp.predictor_names().iter().cloned());
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    let p = cp.n_predictors();
    for (m, s) in cp.months().iter().zip(cp.slices()) {
        for (i, &a) in s.assets.iter().enumerate() {
            let mut rec = vec![m.to_string(), cp.asset_ids()[a].clone()];
            for j in 0..p {
                let k = i * p + j;
                rec.push(fmt_opt((!s.missing[k]).then_some(s.values[k])));
            }
            w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
        }
    }
    finish(w, path)
}

pub fn write_group_map(path: &Path, cp: &CharacteristicPanel, fmt: DelimitedFormat) -> Result<()> {
    let mut w = writer(path, fmt)?;
    w.write_record(["predictor", "group"])
        .map_err(|e| Error::csv(path, e))?;
    for (n, g) in cp.predictor_names().iter().zip(cp.predictor_groups()) {
        w.write_record([n.as_str(), g.as_str()])
            .map_err(|e| Error::csv(path, e))?;
    }
    finish(w, path)
}

pub fn write_monthly_meta(path: &Path, meta: &MonthlyMeta, fmt: DelimitedFormat) -> Result<()> {
    let mut w = writer(path, fmt)?;
    w.write_record(["month", "asset_id", "price", "volume", "mktcap", "dividend"])
        .map_err(|e| Error::csv(path, e))?;
    for ((asset, month), r) in meta.iter() {
        w.write_record([
            month.to_string(),
            asset.clone(),
            r.price.to_string(),
            r.volume.to_string(),
            r.mktcap.to_string(),
            fmt_opt(r.dividend),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    finish(w, path)
}
