//! Realized CAPM, downside/upside betas and the four semibetas computed
//! from daily returns, plus the identities that rebuild CAPM beta from its
//! asymmetric parts.
//!
//! Discordant semibetas are stored negated so that all four semibetas are
//! weakly positive; `reconstruct_from_semibetas` undoes the sign.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::month::Month;
use crate::panel::ReturnPanel;
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum BetaKind {
    Capm,
    Down,
    Up,
    SemiN,
    SemiP,
    SemiMNeg,
    SemiMPos,
}

impl BetaKind {
    pub const ALL: [BetaKind; 7] = [
        BetaKind::Capm,
        BetaKind::Down,
        BetaKind::Up,
        BetaKind::SemiN,
        BetaKind::SemiP,
        BetaKind::SemiMNeg,
        BetaKind::SemiMPos,
    ];

    pub const SEMIBETAS: [BetaKind; 4] = [
        BetaKind::SemiN,
        BetaKind::SemiP,
        BetaKind::SemiMNeg,
        BetaKind::SemiMPos,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BetaKind::Capm => "capm",
            BetaKind::Down => "down",
            BetaKind::Up => "up",
            BetaKind::SemiN => "semi_n",
            BetaKind::SemiP => "semi_p",
            BetaKind::SemiMNeg => "semi_mneg",
            BetaKind::SemiMPos => "semi_mpos",
        }
    }

    pub fn is_semibeta(self) -> bool {
        BetaKind::SEMIBETAS.contains(&self)
    }
}

impl fmt::Display for BetaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BetaKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        // Separators are optional: "semi_mneg", "semi_m_neg" and "SemiMNeg" agree.
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        BetaKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str().replace('_', "") == key)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown beta kind {s:?}")))
    }
}

impl From<BetaKind> for String {
    fn from(k: BetaKind) -> String {
        k.as_str().to_string()
    }
}

impl TryFrom<String> for BetaKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Minimum daily observations for an `h`-month realized beta.
pub fn min_obs(horizon: u32) -> Result<usize> {
    match horizon {
        1 => Ok(15),
        3 => Ok(50),
        6 => Ok(100),
        12 => Ok(200),
        h => Err(Error::InvalidArgument(format!(
            "horizon {h} not one of 1, 3, 6, 12"
        ))),
    }
}

/// The four semibetas in stored (weakly positive) form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Semibetas {
    pub n: f64,
    pub p: f64,
    pub m_neg: f64,
    pub m_pos: f64,
}

/// Cross-product sums over one window, from which every beta kind follows.
#[derive(Clone, Copy, Debug, Default)]
struct WindowSums {
    n: usize,
    im: f64,
    mm: f64,
    i_mneg: f64,
    mneg2: f64,
    i_mpos: f64,
    mpos2: f64,
    ineg_mneg: f64,
    ipos_mpos: f64,
    ipos_mneg: f64,
    ineg_mpos: f64,
}

impl WindowSums {
    fn push(&mut self, ri: f64, rm: f64) {
        let (mneg, mpos) = (rm.min(0.0), rm.max(0.0));
        let (ineg, ipos) = (ri.min(0.0), ri.max(0.0));
        self.n += 1;
        self.im += ri * rm;
        self.mm += rm * rm;
        self.i_mneg += ri * mneg;
        self.mneg2 += mneg * mneg;
        self.i_mpos += ri * mpos;
        self.mpos2 += mpos * mpos;
        self.ineg_mneg += ineg * mneg;
        self.ipos_mpos += ipos * mpos;
        self.ipos_mneg += ipos * mneg;
        self.ineg_mpos += ineg * mpos;
    }

    fn from_pairs(ri: &[f64], rm: &[f64]) -> Result<Self> {
        if ri.len() != rm.len() {
            return Err(Error::LengthMismatch(ri.len(), rm.len()));
        }
        let mut s = WindowSums::default();
        for (a, m) in ri.iter().zip(rm) {
            s.push(*a, *m);
        }
        Ok(s)
    }

    fn capm(&self) -> Option<f64> {
        (self.mm > 0.0).then(|| self.im / self.mm)
    }

    fn down(&self) -> Option<f64> {
        (self.mneg2 > 0.0).then(|| self.i_mneg / self.mneg2)
    }

    fn up(&self) -> Option<f64> {
        (self.mpos2 > 0.0).then(|| self.i_mpos / self.mpos2)
    }

    fn semibetas(&self) -> Option<Semibetas> {
        (self.mm > 0.0).then(|| Semibetas {
            n: self.ineg_mneg / self.mm,
            p: self.ipos_mpos / self.mm,
            m_neg: -self.ipos_mneg / self.mm,
            m_pos: -self.ineg_mpos / self.mm,
        })
    }

    fn kind(&self, kind: BetaKind) -> Option<f64> {
        match kind {
            BetaKind::Capm => self.capm(),
            BetaKind::Down => self.down(),
            BetaKind::Up => self.up(),
            BetaKind::SemiN => self.semibetas().map(|s| s.n),
            BetaKind::SemiP => self.semibetas().map(|s| s.p),
            BetaKind::SemiMNeg => self.semibetas().map(|s| s.m_neg),
            BetaKind::SemiMPos => self.semibetas().map(|s| s.m_pos),
        }
    }
}

/// `Σ r_i r_m / Σ r_m²`.
pub fn realized_capm(ri: &[f64], rm: &[f64]) -> Result<f64> {
    WindowSums::from_pairs(ri, rm)?
        .capm()
        .ok_or(Error::UndefinedBeta)
}

/// Downside and upside betas with a zero cutoff. A side whose market
/// returns are all on the other side of zero comes back `None`.
pub fn realized_down_up(ri: &[f64], rm: &[f64]) -> Result<(Option<f64>, Option<f64>)> {
    let s = WindowSums::from_pairs(ri, rm)?;
    Ok((s.down(), s.up()))
}

pub fn realized_semibetas(ri: &[f64], rm: &[f64]) -> Result<Semibetas> {
    WindowSums::from_pairs(ri, rm)?
        .semibetas()
        .ok_or(Error::UndefinedBeta)
}

/// Share of the window's squared market variation on down days,
/// `Σ (r_m⁻)² / Σ r_m²`.
pub fn down_weight(rm: &[f64]) -> Result<f64> {
    let mm: f64 = rm.iter().map(|m| m * m).sum();
    if mm <= 0.0 {
        return Err(Error::UndefinedBeta);
    }
    let down: f64 = rm.iter().map(|m| m.min(0.0).powi(2)).sum();
    Ok(down / mm)
}

/// CAPM beta as the variance-weighted mix of downside and upside beta.
pub fn reconstruct_from_down_up(down: f64, up: f64, rm: &[f64]) -> Result<f64> {
    let mm: f64 = rm.iter().map(|m| m * m).sum();
    if mm <= 0.0 {
        return Err(Error::UndefinedBeta);
    }
    let mneg2: f64 = rm.iter().map(|m| m.min(0.0).powi(2)).sum();
    let mpos2: f64 = rm.iter().map(|m| m.max(0.0).powi(2)).sum();
    Ok(down * mneg2 / mm + up * mpos2 / mm)
}

/// CAPM beta as concordant minus (stored, negated) discordant semibetas.
pub fn reconstruct_from_semibetas(s: &Semibetas) -> f64 {
    s.n + s.p - s.m_neg - s.m_pos
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BetaKey {
    pub asset: usize,
    pub month: Month,
    pub kind: BetaKind,
    pub horizon: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaCell {
    pub value: f64,
    pub n_obs: usize,
}

/// Realized betas keyed by `(asset, month, kind, horizon)`. The month is
/// the last month of the estimation window.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RealizedBetaPanel {
    asset_ids: Vec<String>,
    entries: BTreeMap<BetaKey, BetaCell>,
}

impl RealizedBetaPanel {
    pub fn new(asset_ids: Vec<String>) -> Self {
        RealizedBetaPanel {
            asset_ids,
            entries: BTreeMap::new(),
        }
    }

    pub fn asset_ids(&self) -> &[String] {
        &self.asset_ids
    }

    pub fn insert(&mut self, key: BetaKey, cell: BetaCell) {
        self.entries.insert(key, cell);
    }

    pub fn get(&self, asset: usize, month: Month, kind: BetaKind, horizon: u32) -> Option<f64> {
        self.cell(asset, month, kind, horizon).map(|c| c.value)
    }

    pub fn cell(
        &self,
        asset: usize,
        month: Month,
        kind: BetaKind,
        horizon: u32,
    ) -> Option<&BetaCell> {
        self.entries.get(&BetaKey {
            asset,
            month,
            kind,
            horizon,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&BetaKey, &BetaCell)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Values of one `(kind, horizon)` series.
    pub fn values(&self, kind: BetaKind, horizon: u32) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|(k, _)| k.kind == kind && k.horizon == horizon)
            .map(|(_, c)| c.value)
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record(["asset_id", "month", "kind", "horizon", "beta", "n_obs"])
            .map_err(|e| Error::csv(path, e))?;
        for (k, c) in &self.entries {
            w.write_record([
                self.asset_ids[k.asset].clone(),
                k.month.to_string(),
                k.kind.to_string(),
                k.horizon.to_string(),
                c.value.to_string(),
                c.n_obs.to_string(),
            ])
            .map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a panel written by [`RealizedBetaPanel::write_csv`]. Asset
    /// indices follow `asset_ids`; unknown assets are rejected.
    pub fn read_csv(path: &Path, asset_ids: &[String]) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(file);
        let mut panel = RealizedBetaPanel::new(asset_ids.to_vec());
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            let row = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            let bad = |m: String| Error::Parse {
                path: path.to_path_buf(),
                row,
                message: m,
            };
            if rec.len() < 6 {
                return Err(bad("expected 6 columns".into()));
            }
            let asset = asset_ids
                .iter()
                .position(|a| a == &rec[0])
                .ok_or_else(|| bad(format!("unknown asset {:?}", &rec[0])))?;
            let month: Month = rec[1].parse().map_err(bad)?;
            let kind: BetaKind = rec[2].parse()?;
            let horizon: u32 = rec[3].parse().map_err(|_| bad("bad horizon".into()))?;
            let value: f64 = rec[4].parse().map_err(|_| bad("bad beta".into()))?;
            let n_obs: usize = rec[5].parse().map_err(|_| bad("bad n_obs".into()))?;
            panel.insert(
                BetaKey {
                    asset,
                    month,
                    kind,
                    horizon,
                },
                BetaCell { value, n_obs },
            );
        }
        Ok(panel)
    }
}

/// Realized betas for every asset, month and horizon, each computed from
/// the daily returns of months `t-h+1..=t`. Cells with fewer than
/// [`min_obs`] observations, or with an undefined denominator, are absent.
pub fn compute_beta_panel(
    rp: &ReturnPanel,
    kinds: &[BetaKind],
    horizons: &[u32],
) -> Result<RealizedBetaPanel> {
    let thresholds = horizons
        .iter()
        .map(|&h| Ok((h, min_obs(h)?)))
        .collect::<Result<Vec<_>>>()?;
    let months = rp.months();
    let per_asset = par::map_range(rp.n_assets(), |asset| {
        let mut out = Vec::new();
        let series = rp.asset_returns(asset);
        for &(h, need) in &thresholds {
            for &t in months {
                let Some(span) = rp.window_span(t.offset(1 - h as i32), t) else {
                    continue;
                };
                let mut sums = WindowSums::default();
                for d in span {
                    if let Some(r) = series[d] {
                        sums.push(r, rp.market()[d]);
                    }
                }
                if sums.n < need {
                    continue;
                }
                for &kind in kinds {
                    if let Some(value) = sums.kind(kind) {
                        out.push((
                            BetaKey {
                                asset,
                                month: t,
                                kind,
                                horizon: h,
                            },
                            BetaCell {
                                value,
                                n_obs: sums.n,
                            },
                        ));
                    }
                }
            }
        }
        out
    });
    let mut panel = RealizedBetaPanel::new(rp.asset_ids().to_vec());
    for (k, c) in per_asset.into_iter().flatten() {
        panel.insert(k, c);
    }
    Ok(panel)
}

/// Market down-day weight `Σ (r_m⁻)² / Σ r_m²` for the `h`-month window
/// ending at `month`.
pub fn window_down_weight(rp: &ReturnPanel, month: Month, horizon: u32) -> Option<f64> {
    let span = rp.window_span(month.offset(1 - horizon as i32), month)?;
    down_weight(&rp.market()[span]).ok()
}

/// Cross-sectional moments of one `(kind, horizon)` series.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BetaSummary {
    pub kind: BetaKind,
    pub horizon: u32,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    pub kurtosis: f64,
    pub p05: f64,
    pub median: f64,
    pub p95: f64,
}

/// Descriptive moments per `(kind, horizon)` present in the panel.
pub fn describe(panel: &RealizedBetaPanel) -> Vec<BetaSummary> {
    let mut groups: BTreeMap<(BetaKind, u32), Vec<f64>> = BTreeMap::new();
    for (k, c) in panel.iter() {
        groups.entry((k.kind, k.horizon)).or_default().push(c.value);
    }
    groups
        .into_iter()
        .map(|((kind, horizon), mut v)| {
            v.sort_by(f64::total_cmp);
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let m2 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let m3 = v.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
            let m4 = v.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
            let std = m2.sqrt();
            let (skewness, kurtosis) = if m2 > 0.0 {
                (m3 / m2.powf(1.5), m4 / (m2 * m2))
            } else {
                (f64::NAN, f64::NAN)
            };
            BetaSummary {
                kind,
                horizon,
                count: v.len(),
                mean,
                std,
                skewness,
                kurtosis,
                p05: crate::stats::quantile_sorted(&v, 0.05),
                median: crate::stats::quantile_sorted(&v, 0.5),
                p95: crate::stats::quantile_sorted(&v, 0.95),
            }
        })
        .collect()
}
