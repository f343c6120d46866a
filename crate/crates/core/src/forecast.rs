//! Out-of-sample forecast records shared by the pipeline, evaluation,
//! valuation and portfolio stages.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::beta::BetaKind;
use crate::error::{Error, Result};
use crate::month::Month;

/// One forecast of the realized beta of `asset` over the window ending at
/// `target_month`, made from information dated `target_month - horizon`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastRow {
    pub asset: usize,
    pub target_month: Month,
    pub model: String,
    pub kind: BetaKind,
    pub horizon: u32,
    pub forecast: f64,
    pub realization: f64,
    pub benchmark: f64,
}

impl ForecastRow {
    pub fn feature_month(&self) -> Month {
        self.target_month.offset(-(self.horizon as i32))
    }

    pub fn model_error(&self) -> f64 {
        self.realization - self.forecast
    }

    pub fn benchmark_error(&self) -> f64 {
        self.realization - self.benchmark
    }
}

/// Identifies an evaluation cell.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub model: String,
    pub kind: BetaKind,
    pub horizon: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForecastPanel {
    pub asset_ids: Vec<String>,
    pub rows: Vec<ForecastRow>,
}

const HEADER: [&str; 8] = [
    "asset_id",
    "target_month",
    "model",
    "kind",
    "horizon",
    "forecast",
    "realization",
    "benchmark",
];

impl ForecastPanel {
    pub fn new(asset_ids: Vec<String>) -> Self {
        ForecastPanel {
            asset_ids,
            rows: Vec::new(),
        }
    }

    /// Canonical order: model, kind, horizon, target month, asset.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            (&a.model, a.kind, a.horizon, a.target_month, a.asset).cmp(&(
                &b.model,
                b.kind,
                b.horizon,
                b.target_month,
                b.asset,
            ))
        });
    }

    /// The same rows with asset indices into `asset_ids`; rows of assets
    /// not listed there are an error.
    pub fn reindex(&self, asset_ids: &[String]) -> Result<ForecastPanel> {
        let index: BTreeMap<&str, usize> = asset_ids
            .iter()
            .enumerate()
            .map(|(i, a)| (a.as_str(), i))
            .collect();
        let map = self
            .asset_ids
            .iter()
            .map(|a| {
                index.get(a.as_str()).copied().ok_or_else(|| {
                    Error::InvalidArgument(format!("forecast asset {a:?} not in the return panel"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = ForecastPanel::new(asset_ids.to_vec());
        out.rows = self
            .rows
            .iter()
            .map(|r| ForecastRow {
                asset: map[r.asset],
                ..r.clone()
            })
            .collect();
        out.sort();
        Ok(out)
    }

    /// Rows grouped by cell, each group in (target month, asset) order.
    pub fn cells(&self) -> BTreeMap<CellKey, Vec<&ForecastRow>> {
        let mut out: BTreeMap<CellKey, Vec<&ForecastRow>> = BTreeMap::new();
        for r in &self.rows {
            out.entry(CellKey {
                model: r.model.clone(),
                kind: r.kind,
                horizon: r.horizon,
            })
            .or_default()
            .push(r);
        }
        for rows in out.values_mut() {
            rows.sort_by_key(|r| (r.target_month, r.asset));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record(HEADER).map_err(|e| Error::csv(path, e))?;
        for r in &self.rows {
            w.write_record([
                self.asset_ids[r.asset].as_str(),
                &r.target_month.to_string(),
                &r.model,
                r.kind.as_str(),
                &r.horizon.to_string(),
                &r.forecast.to_string(),
                &r.realization.to_string(),
                &r.benchmark.to_string(),
            ])
            .map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(file);
        let mut panel = ForecastPanel::default();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            let row = rec.position().map_or(0, |p| p.line() as usize);
            let bad = |m: String| Error::Parse {
                path: path.to_path_buf(),
                row,
                message: m,
            };
            if rec.len() != HEADER.len() {
                return Err(bad(format!("expected {} columns", HEADER.len())));
            }
            let asset = match index.get(&rec[0]) {
                Some(&a) => a,
                None => {
                    panel.asset_ids.push(rec[0].to_string());
                    index.insert(rec[0].to_string(), panel.asset_ids.len() - 1);
                    panel.asset_ids.len() - 1
                }
            };
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse::<f64>()
                    .map_err(|_| bad(format!("bad {} value {:?}", HEADER[i], &rec[i])))
            };
            panel.rows.push(ForecastRow {
                asset,
                target_month: rec[1].parse().map_err(bad)?,
                model: rec[2].to_string(),
                kind: rec[3].parse()?,
                horizon: rec[4]
                    .parse()
                    .map_err(|_| bad(format!("bad horizon {:?}", &rec[4])))?,
                forecast: num(5)?,
                realization: num(6)?,
                benchmark: num(7)?,
            });
        }
        Ok(panel)
    }
}
