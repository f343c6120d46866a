//! Rolling-window forecasting protocol: schedule, row selection, tuning on
//! a validation year, refit, out-of-sample forecasts, benchmarks and
//! forecast combinations.

use std::collections::{BTreeMap, HashMap};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::beta::{BetaKind, RealizedBetaPanel};
use crate::error::{Error, Result};
use crate::evaluation::{normalize_importance, permutation_group_importance, SeededPermuter};
use crate::forecast::{ForecastPanel, ForecastRow};
use crate::learners::{
    combine_forecasts, fit, mse, DenseMatrix, EnetGram, Family, FittedModel, HyperGrid,
    HyperParams, ModelParams, RowKey, TrainingSet,
};
use crate::month::Month;
use crate::panel::{
    lag_predictors, preprocess_characteristics, CharacteristicPanel, EligibilityMask,
    PredictorGroup, ReturnPanel,
};
use crate::par;

pub const TRAIN_MONTHS: i32 = 108;
pub const VALIDATION_MONTHS: i32 = 12;
pub const INSAMPLE_MONTHS: i32 = TRAIN_MONTHS + VALIDATION_MONTHS;
pub const OOS_MONTHS: i32 = 12;
pub const STEP_MONTHS: i32 = 12;
/// Trailing in-sample months over which an asset needs returns to train.
pub const AVAILABILITY_MONTHS: i32 = 36;

pub const LINEAR_COMBINATION: &str = "clin";
pub const NONLINEAR_COMBINATION: &str = "cnl";
const LINEAR_MEMBERS: [Family; 3] = [Family::Pcr, Family::Pls, Family::ElasticNet];
const NONLINEAR_MEMBERS: [Family; 3] = [Family::GBoost, Family::RForest, Family::Ffnn];

/// Inclusive range of calendar months.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct MonthRange {
    pub first: Month,
    pub last: Month,
}

impl MonthRange {
    pub fn new(first: Month, last: Month) -> Self {
        MonthRange { first, last }
    }

    pub fn contains(&self, m: Month) -> bool {
        self.first <= m && m <= self.last
    }

    pub fn len(&self) -> i32 {
        self.last.since(self.first) + 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() <= 0
    }

    pub fn months(&self) -> impl Iterator<Item = Month> {
        Month::range_inclusive(self.first, self.last)
    }
}

/// One pass of the rolling window. All ranges are in target months: a row
/// with target month `m` uses predictors observed at `m - h`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Iteration {
    pub index: usize,
    pub horizon: u32,
    pub train: MonthRange,
    pub validation: MonthRange,
    pub insample: MonthRange,
    pub oos: MonthRange,
}

impl Iteration {
    /// First month whose predictors feed an out-of-sample forecast.
    pub fn first_forecast_origin(&self) -> Month {
        self.oos.first.offset(-(self.horizon as i32))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WindowSchedule {
    pub horizon: u32,
    pub iterations: Vec<Iteration>,
}

/// Months of target data needed for one iteration at horizon `h`.
pub fn required_span(h: u32) -> i32 {
    INSAMPLE_MONTHS + h as i32 + OOS_MONTHS
}

/// Rolling schedule over target months `first..=last`. Each in-sample
/// window spans 120 months (108 training, 12 validation); out-of-sample
/// targets are the 12 months starting `h + 1` months after it ends, so
/// that every out-of-sample forecast origin lies after the last in-sample
/// label. Windows advance by 12 months.
pub fn build_schedule(first: Month, last: Month, h: u32) -> Result<WindowSchedule> {
    if h == 0 {
        return Err(Error::InvalidArgument("horizon must be positive".into()));
    }
    let span = last.since(first) + 1;
    let required = required_span(h);
    if span < required {
        return Err(Error::InsufficientSpan { span, required });
    }
    let mut iterations = Vec::new();
    for k in 0.. {
        let start = first.offset(k * STEP_MONTHS);
        let insample_end = start.offset(INSAMPLE_MONTHS - 1);
        let oos_first = insample_end.offset(h as i32 + 1);
        let oos_last = oos_first.offset(OOS_MONTHS - 1);
        if oos_last > last {
            break;
        }
        iterations.push(Iteration {
            index: k as usize,
            horizon: h,
            train: MonthRange::new(start, start.offset(TRAIN_MONTHS - 1)),
            validation: MonthRange::new(start.offset(TRAIN_MONTHS), insample_end),
            insample: MonthRange::new(start, insample_end),
            oos: MonthRange::new(oos_first, oos_last),
        });
    }
    Ok(WindowSchedule {
        horizon: h,
        iterations,
    })
}

/// The h-lagged realized beta of the same kind: the benchmark forecast for
/// target month `target` is the beta over the window ending `h` months
/// earlier.
pub fn benchmark_forecast(
    betas: &RealizedBetaPanel,
    asset: usize,
    target: Month,
    kind: BetaKind,
    h: u32,
) -> Option<f64> {
    betas.get(asset, target.offset(-(h as i32)), kind, h)
}

/// Immutable inputs shared by every cell. Asset indices in the beta panel,
/// eligibility mask and forecast rows refer to `returns`.
#[derive(Clone, Copy)]
pub struct ExperimentData<'a> {
    pub returns: &'a ReturnPanel,
    /// Raw characteristics; preprocessing and lagging happen per cell.
    pub characteristics: &'a CharacteristicPanel,
    pub betas: &'a RealizedBetaPanel,
    pub eligibility: Option<&'a EligibilityMask>,
}

/// Predictors lagged by `h` for one `(kind, h)` pair, with the asset maps
/// between the characteristic and return panels.
#[derive(Clone, Debug)]
pub struct PreparedPredictors {
    pub kind: BetaKind,
    pub horizon: u32,
    pub lagged: CharacteristicPanel,
    char_to_ret: Vec<Option<usize>>,
}

impl PreparedPredictors {
    pub fn groups(&self) -> Vec<(PredictorGroup, Vec<usize>)> {
        self.lagged.group_columns()
    }
}

pub fn lagged_beta_name(kind: BetaKind, h: u32) -> String {
    format!("beta_{}_{}", kind.as_str(), h)
}

/// Preprocesses and lags the characteristics for one cell. With
/// `lagged_beta` the realized beta of the cell's own kind and horizon,
/// observed at the raw month, is appended as a trading-frictions predictor.
pub fn prepare_predictors(
    data: &ExperimentData<'_>,
    kind: BetaKind,
    h: u32,
    lagged_beta: bool,
) -> Result<PreparedPredictors> {
    let cp = data.characteristics;
    let char_to_ret: Vec<Option<usize>> = {
        let index: HashMap<&str, usize> = data
            .returns
            .asset_ids()
            .iter()
            .enumerate()
            .map(|(i, a)| (a.as_str(), i))
            .collect();
        cp.asset_ids()
            .iter()
            .map(|a| index.get(a.as_str()).copied())
            .collect()
    };
    let raw = if lagged_beta {
        let mut values = HashMap::new();
        for (m, s) in cp.months().iter().zip(cp.slices()) {
            for &a in &s.assets {
                if let Some(r) = char_to_ret[a] {
                    values.insert((*m, a), vec![data.betas.get(r, *m, kind, h)]);
                }
            }
        }
        cp.with_extra_columns(
            &[lagged_beta_name(kind, h)],
            &[PredictorGroup::TradingFrictions],
            &values,
        )?
    } else {
        cp.clone()
    };
    let lagged = lag_predictors(&preprocess_characteristics(&raw)?, h as i64)?;
    Ok(PreparedPredictors {
        kind,
        horizon: h,
        lagged,
        char_to_ret,
    })
}

/// Training, validation and out-of-sample rows of one iteration.
#[derive(Clone, Debug)]
pub struct IterationData {
    pub train: TrainingSet,
    pub validation: TrainingSet,
    /// Out-of-sample rows; `y` holds the realizations.
    pub oos: TrainingSet,
    pub oos_benchmark: Vec<f64>,
}

struct Rows {
    x: Vec<f64>,
    y: Vec<f64>,
    keys: Vec<RowKey>,
    bench: Vec<f64>,
}

fn collect_rows(
    data: &ExperimentData<'_>,
    prep: &PreparedPredictors,
    range: MonthRange,
    include: &dyn Fn(usize) -> bool,
    need_benchmark: bool,
) -> Result<Rows> {
    let p = prep.lagged.n_predictors();
    let h = prep.horizon as i32;
    let mut out = Rows {
        x: Vec::new(),
        y: Vec::new(),
        keys: Vec::new(),
        bench: Vec::new(),
    };
    for m in range.months() {
        let Some(slice) = prep.lagged.slice(m) else {
            continue;
        };
        let feature_month = m.offset(-h);
        let eligible = data.eligibility.map(|e| e.get(&feature_month));
        for (i, &ca) in slice.assets.iter().enumerate() {
            let Some(a) = prep.char_to_ret[ca] else {
                continue;
            };
            if !include(a) {
                continue;
            }
            if let Some(mask) = eligible {
                if !mask.is_some_and(|v| v[a]) {
                    continue;
                }
            }
            let Some(y) = data.betas.get(a, m, prep.kind, prep.horizon) else {
                continue;
            };
            let bench = if need_benchmark {
                match benchmark_forecast(data.betas, a, m, prep.kind, prep.horizon) {
                    Some(b) => b,
                    None => continue,
                }
            } else {
                f64::NAN
            };
            out.x.extend_from_slice(slice.row(i, p));
            out.y.push(y);
            out.keys.push(RowKey {
                asset: a,
                feature_month,
                target_month: m,
            });
            out.bench.push(bench);
        }
    }
    Ok(out)
}

fn to_set(rows: Rows, p: usize) -> Result<(TrainingSet, Vec<f64>)> {
    let n = rows.y.len();
    let x = DenseMatrix::new(rows.x, n, p)?;
    Ok((TrainingSet::new(x, rows.y, rows.keys)?, rows.bench))
}

/// Builds the rows of one iteration. Training and validation rows come
/// from assets with at least one daily return in each of the last 36
/// in-sample months; rows need a realized target, and out-of-sample rows
/// also need the benchmark.
pub fn select_rows(
    data: &ExperimentData<'_>,
    prep: &PreparedPredictors,
    it: &Iteration,
) -> Result<IterationData> {
    let window = MonthRange::new(
        it.insample.last.offset(1 - AVAILABILITY_MONTHS),
        it.insample.last,
    );
    let available: Vec<bool> = (0..data.returns.n_assets())
        .map(|a| window.months().all(|m| data.returns.has_return_in(a, m)))
        .collect();
    let insample_ok = |a: usize| available[a];
    let p = prep.lagged.n_predictors();
    let (train, _) = to_set(collect_rows(data, prep, it.train, &insample_ok, false)?, p)?;
    if train.n() == 0 {
        return Err(Error::EmptyTrainingSet(it.index));
    }
    let (validation, _) = to_set(
        collect_rows(data, prep, it.validation, &insample_ok, false)?,
        p,
    )?;
    let (oos, oos_benchmark) = to_set(collect_rows(data, prep, it.oos, &|_| true, true)?, p)?;
    Ok(IterationData {
        train,
        validation,
        oos,
        oos_benchmark,
    })
}

/// Result of tuning one family on one iteration.
#[derive(Clone, Debug)]
pub struct Tuned {
    /// Hyperparameters of the refit model (boosting and networks record
    /// the stopping points found on the validation set).
    pub hyper: HyperParams,
    pub validation_mse: f64,
    pub model: FittedModel,
    /// Forecasts aligned with the out-of-sample rows.
    pub forecasts: Vec<f64>,
}

fn predict_set(model: &FittedModel, set: &TrainingSet) -> Result<Vec<f64>> {
    if set.n() == 0 {
        return Ok(Vec::new());
    }
    model.predict(&set.x)
}

/// Validation scores of every candidate (`None` where fitting failed),
/// together with the hyperparameters to refit for each.
fn score_candidates(
    cands: &[HyperParams],
    data: &IterationData,
    seed: u64,
) -> Vec<Option<(f64, HyperParams)>> {
    let (train, valid) = (&data.train, &data.validation);
    let log_fail = |c: &HyperParams, e: &Error| warn!("candidate {} failed: {e}", c.describe());

    if cands
        .iter()
        .all(|c| matches!(c, HyperParams::ElasticNet { .. }))
    {
        let gram = match EnetGram::new(train) {
            Ok(g) => g,
            Err(e) => {
                cands.iter().for_each(|c| log_fail(c, &e));
                return vec![None; cands.len()];
            }
        };
        let mut warm: Option<Vec<f64>> = None;
        return cands
            .iter()
            .map(|c| {
                let HyperParams::ElasticNet { lambda, alpha } = c else {
                    unreachable!()
                };
                match gram.solve(*lambda, *alpha, warm.as_deref()) {
                    Ok(m) => {
                        let pred: Vec<f64> = (0..valid.n())
                            .map(|i| m.predict_row(valid.x.row(i)))
                            .collect();
                        warm = Some(m.coef.clone());
                        Some((mse(&pred, &valid.y), c.clone()))
                    }
                    Err(e) => {
                        log_fail(c, &e);
                        None
                    }
                }
            })
            .collect();
    }

    // Forests differing only in depth: grow the deepest once and truncate.
    if let Some(HyperParams::RForest {
        trees,
        mtry,
        min_leaf,
        ..
    }) = cands.first()
    {
        let same_shape = cands.iter().all(|c| {
            matches!(c, HyperParams::RForest { trees: t, mtry: m, min_leaf: l, .. }
                if t == trees && m == mtry && l == min_leaf)
        });
        if same_shape {
            let depth_of = |c: &HyperParams| match c {
                HyperParams::RForest { depth, .. } => *depth,
                _ => unreachable!(),
            };
            let deepest = cands.iter().max_by_key(|c| depth_of(c)).unwrap();
            return match fit(deepest, train, Some(valid), seed) {
                Ok(FittedModel {
                    params: ModelParams::Forest(f),
                    ..
                }) => cands
                    .iter()
                    .map(|c| {
                        let t = f.truncated(depth_of(c));
                        let pred: Vec<f64> = (0..valid.n())
                            .map(|i| t.predict_row(valid.x.row(i)))
                            .collect();
                        Some((mse(&pred, &valid.y), c.clone()))
                    })
                    .collect(),
                Ok(_) => unreachable!(),
                Err(e) => {
                    cands.iter().for_each(|c| log_fail(c, &e));
                    vec![None; cands.len()]
                }
            };
        }
    }

    cands
        .iter()
        .map(|c| {
            match fit(c, train, Some(valid), seed).and_then(|m| Ok((predict_set(&m, valid)?, m))) {
                Ok((pred, m)) => Some((mse(&pred, &valid.y), m.hyper)),
                Err(e) => {
                    log_fail(c, &e);
                    None
                }
            }
        })
        .collect()
}

/// Fits every candidate on the training months, picks the lowest pooled
/// validation MSE (ties go to the earliest candidate), refits the winner on
/// the full in-sample window and forecasts the out-of-sample rows.
pub fn tune_fit_forecast(cands: &[HyperParams], data: &IterationData, seed: u64) -> Result<Tuned> {
    if cands.is_empty() {
        return Err(Error::Empty("hyperparameter grid".into()));
    }
    if data.validation.n() == 0 {
        return Err(Error::Empty("validation set".into()));
    }
    let scores = score_candidates(cands, data, seed);
    let mut best: Option<(f64, HyperParams)> = None;
    for s in scores.into_iter().flatten() {
        if s.0.is_finite() && best.as_ref().is_none_or(|b| s.0 < b.0) {
            best = Some(s);
        }
    }
    let (validation_mse, hyper) = best.ok_or(Error::AllCandidatesFailed)?;
    let all = data.train.concat(&data.validation)?;
    let model = fit(&hyper, &all, None, seed)?;
    let forecasts = predict_set(&model, &data.oos)?;
    if forecasts.iter().any(|f| !f.is_finite()) {
        return Err(Error::NonFinite("out-of-sample forecast".into()));
    }
    Ok(Tuned {
        hyper: model.hyper.clone(),
        validation_mse,
        model,
        forecasts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub models: Vec<Family>,
    pub kinds: Vec<BetaKind>,
    pub horizons: Vec<u32>,
    pub grid: HyperGrid,
    pub seed: u64,
    /// Add the cell's own realized beta (lagged like every predictor).
    pub lagged_beta_predictor: bool,
    /// Stop at the first failed cell instead of recording it.
    pub fail_fast: bool,
    pub importance: bool,
    /// Optional bounds on the target months used by the schedule.
    pub first_target: Option<Month>,
    pub last_target: Option<Month>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            models: Family::PIPELINE.to_vec(),
            kinds: BetaKind::ALL.to_vec(),
            horizons: vec![1, 3, 6, 12],
            grid: HyperGrid::default(),
            seed: 0,
            lagged_beta_predictor: false,
            fail_fast: false,
            importance: false,
            first_target: None,
            last_target: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() || self.kinds.is_empty() || self.horizons.is_empty() {
            return Err(Error::Config(
                "at least one model, kind and horizon is required".into(),
            ));
        }
        if let Some(f) = self.models.iter().find(|f| !Family::PIPELINE.contains(f)) {
            return Err(Error::Config(format!(
                "model {f} is not run by the pipeline"
            )));
        }
        for &h in &self.horizons {
            crate::beta::min_obs(h)?;
        }
        self.grid.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChosenHyper {
    pub model: String,
    pub kind: BetaKind,
    pub horizon: u32,
    pub iteration: usize,
    pub hyper: String,
    pub validation_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellFailure {
    pub model: String,
    pub kind: BetaKind,
    pub horizon: u32,
    /// `None` when the failure precedes any iteration.
    pub iteration: Option<usize>,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImportanceRow {
    pub model: String,
    pub kind: BetaKind,
    pub horizon: u32,
    pub group: PredictorGroup,
    pub raw: f64,
    pub importance: f64,
}

/// Look-ahead audit over every row handed to a learner or forecast.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AuditReport {
    pub rows_checked: usize,
    pub violations: Vec<String>,
}

impl AuditReport {
    fn check_set(
        &mut self,
        set: &TrainingSet,
        h: u32,
        range: MonthRange,
        what: &str,
        it: &Iteration,
    ) {
        for k in &set.row_keys {
            self.rows_checked += 1;
            if k.feature_month.offset(h as i32) != k.target_month {
                self.violations.push(format!(
                    "{what} row asset {} feature {} target {} (h={h})",
                    k.asset, k.feature_month, k.target_month
                ));
            }
            if !range.contains(k.target_month) {
                self.violations.push(format!(
                    "{what} row target {} outside {}..{}",
                    k.target_month, range.first, range.last
                ));
            }
            if what == "oos" && k.feature_month <= it.insample.last {
                self.violations.push(format!(
                    "oos origin {} not after in-sample end {}",
                    k.feature_month, it.insample.last
                ));
            }
        }
    }

    fn audit(&mut self, prep: &PreparedPredictors, it: &Iteration, d: &IterationData) {
        if prep.lagged.lag_applied() != prep.horizon {
            self.violations.push(format!(
                "predictors lagged by {} for horizon {}",
                prep.lagged.lag_applied(),
                prep.horizon
            ));
        }
        if it.train.last >= it.validation.first || it.insample.last >= it.oos.first {
            self.violations
                .push(format!("iteration {} windows overlap", it.index));
        }
        let h = prep.horizon;
        self.check_set(&d.train, h, it.train, "train", it);
        self.check_set(&d.validation, h, it.validation, "validation", it);
        self.check_set(&d.oos, h, it.oos, "oos", it);
    }
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentOutput {
    pub panel: ForecastPanel,
    pub chosen: Vec<ChosenHyper>,
    pub failures: Vec<CellFailure>,
    pub importance: Vec<ImportanceRow>,
    pub audit: AuditReport,
    pub schedules: Vec<WindowSchedule>,
}

/// Seed for one `(model, kind, horizon, iteration)` cell.
pub fn cell_seed(run_seed: u64, model: &str, kind: BetaKind, h: u32, iteration: usize) -> u64 {
    let mut x: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            x ^= b as u64;
            x = x.wrapping_mul(0x0100_0000_01b3);
        }
        x ^= 0xff;
        x = x.wrapping_mul(0x0100_0000_01b3);
    };
    eat(&run_seed.to_le_bytes());
    eat(model.as_bytes());
    eat(kind.as_str().as_bytes());
    eat(&h.to_le_bytes());
    eat(&(iteration as u64).to_le_bytes());
    // splitmix64 finalizer
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Target months available for horizon `h`: a target needs lagged
/// predictors and a full beta window.
pub fn target_span(
    data: &ExperimentData<'_>,
    cfg: &ExperimentConfig,
    h: u32,
) -> Result<(Month, Month)> {
    let cm = data.characteristics.months();
    let rm = data.returns.months();
    let (Some(c0), Some(c1), Some(r0), Some(r1)) = (cm.first(), cm.last(), rm.first(), rm.last())
    else {
        return Err(Error::Empty("input panels".into()));
    };
    let h32 = h as i32;
    let mut first = c0.offset(h32).max(r0.offset(h32 - 1));
    let mut last = c1.offset(h32).min(*r1);
    if let Some(f) = cfg.first_target {
        first = first.max(f);
    }
    if let Some(l) = cfg.last_target {
        last = last.min(l);
    }
    Ok((first, last))
}

struct CellOutcome {
    rows: Vec<ForecastRow>,
    chosen: ChosenHyper,
    importance: Option<Vec<(PredictorGroup, f64)>>,
}

/// Runs every `(model, kind, horizon)` cell over its rolling schedule and
/// appends combination forecasts. Cells run in parallel; the output does
/// not depend on scheduling.
pub fn run_experiment(
    data: &ExperimentData<'_>,
    cfg: &ExperimentConfig,
) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let mut out = ExperimentOutput {
        panel: ForecastPanel::new(data.returns.asset_ids().to_vec()),
        ..ExperimentOutput::default()
    };
    let fail = |out: &mut ExperimentOutput, f: CellFailure| -> Result<()> {
        warn!(
            "{} {} h={} iteration {:?}: {}",
            f.model, f.kind, f.horizon, f.iteration, f.error
        );
        if cfg.fail_fast {
            return Err(Error::Config(format!(
                "cell {} {} h={} failed: {}",
                f.model, f.kind, f.horizon, f.error
            )));
        }
        out.failures.push(f);
        Ok(())
    };

    // Schedules and prepared predictors per (kind, h).
    let mut pairs = Vec::new();
    for &h in &cfg.horizons {
        let schedule = match target_span(data, cfg, h).and_then(|(a, b)| build_schedule(a, b, h)) {
            Ok(s) => s,
            Err(e) => {
                for &kind in &cfg.kinds {
                    for m in &cfg.models {
                        fail(
                            &mut out,
                            CellFailure {
                                model: m.id().into(),
                                kind,
                                horizon: h,
                                iteration: None,
                                error: e.to_string(),
                            },
                        )?;
                    }
                }
                continue;
            }
        };
        for &kind in &cfg.kinds {
            pairs.push((kind, h, out.schedules.len()));
        }
        out.schedules.push(schedule);
    }
    let prepared = par::map_slice(&pairs, |&(kind, h, _)| {
        prepare_predictors(data, kind, h, cfg.lagged_beta_predictor)
    });

    // Row sets per (pair, iteration).
    let mut blocks = Vec::new();
    for (pi, (&(kind, h, si), prep)) in pairs.iter().zip(&prepared).enumerate() {
        match prep {
            Ok(_) => {
                for it in 0..out.schedules[si].iterations.len() {
                    blocks.push((pi, it));
                }
            }
            Err(e) => {
                for m in &cfg.models {
                    fail(
                        &mut out,
                        CellFailure {
                            model: m.id().into(),
                            kind,
                            horizon: h,
                            iteration: None,
                            error: e.to_string(),
                        },
                    )?;
                }
            }
        }
    }
    let block_data = par::map_slice(&blocks, |&(pi, it)| {
        let prep = prepared[pi].as_ref().expect("prepared");
        select_rows(data, prep, &out.schedules[pairs[pi].2].iterations[it])
    });
    for (&(pi, it), d) in blocks.iter().zip(&block_data) {
        if let Ok(d) = d {
            let prep = prepared[pi].as_ref().expect("prepared");
            out.audit
                .audit(prep, &out.schedules[pairs[pi].2].iterations[it], d);
        }
    }

    // Jobs: block x model.
    let jobs: Vec<(usize, Family)> = (0..blocks.len())
        .flat_map(|b| cfg.models.iter().map(move |&m| (b, m)))
        .collect();
    let results = par::map_slice(&jobs, |&(b, family)| -> Result<CellOutcome> {
        let (pi, it) = blocks[b];
        let (kind, h, si) = pairs[pi];
        let d = block_data[b]
            .as_ref()
            .map_err(|e| Error::Config(e.to_string()))?;
        let iteration = &out.schedules[si].iterations[it];
        let seed = cell_seed(cfg.seed, family.id(), kind, h, iteration.index);
        let tuned = tune_fit_forecast(&cfg.grid.candidates(family), d, seed)?;
        info!(
            "{} {} h={} iteration {}: {} (validation MSE {:.6})",
            family,
            kind,
            h,
            iteration.index,
            tuned.hyper.describe(),
            tuned.validation_mse
        );
        let rows = d
            .oos
            .row_keys
            .iter()
            .enumerate()
            .map(|(i, k)| ForecastRow {
                asset: k.asset,
                target_month: k.target_month,
                model: family.id().to_string(),
                kind,
                horizon: h,
                forecast: tuned.forecasts[i],
                realization: d.oos.y[i],
                benchmark: d.oos_benchmark[i],
            })
            .collect();
        let importance = if cfg.importance && d.oos.n() > 0 {
            let groups = prepared[pi].as_ref().expect("prepared").groups();
            let mut permuter = SeededPermuter::new(seed ^ 0x5eed);
            let imp = permutation_group_importance(&tuned.model, &d.oos, &groups, &mut permuter)?;
            Some(imp.into_iter().map(|g| (g.group, g.raw)).collect())
        } else {
            None
        };
        Ok(CellOutcome {
            rows,
            chosen: ChosenHyper {
                model: family.id().to_string(),
                kind,
                horizon: h,
                iteration: iteration.index,
                hyper: tuned.hyper.describe(),
                validation_mse: tuned.validation_mse,
            },
            importance,
        })
    });

    let mut by_block: BTreeMap<usize, BTreeMap<Family, Vec<ForecastRow>>> = BTreeMap::new();
    let mut raw_importance: BTreeMap<(String, BetaKind, u32), Vec<Vec<(PredictorGroup, f64)>>> =
        BTreeMap::new();
    for (&(b, family), r) in jobs.iter().zip(results) {
        let (pi, it) = blocks[b];
        let (kind, h, si) = pairs[pi];
        match r {
            Ok(c) => {
                if let Some(imp) = c.importance {
                    raw_importance
                        .entry((family.id().to_string(), kind, h))
                        .or_default()
                        .push(imp);
                }
                out.chosen.push(c.chosen);
                by_block.entry(b).or_default().insert(family, c.rows);
            }
            Err(e) => {
                let iteration = Some(out.schedules[si].iterations[it].index);
                fail(
                    &mut out,
                    CellFailure {
                        model: family.id().into(),
                        kind,
                        horizon: h,
                        iteration,
                        error: e.to_string(),
                    },
                )?
            }
        }
    }

    for (b, fams) in &by_block {
        let d = block_data[*b].as_ref().expect("block with results");
        let (pi, _) = blocks[*b];
        let (kind, h, _) = pairs[pi];
        for (name, members) in [
            (LINEAR_COMBINATION, LINEAR_MEMBERS),
            (NONLINEAR_COMBINATION, NONLINEAR_MEMBERS),
        ] {
            if !members.iter().all(|m| cfg.models.contains(m)) {
                continue;
            }
            let cols: Vec<Vec<Option<f64>>> = members
                .iter()
                .filter_map(|m| fams.get(m))
                .map(|rows| rows.iter().map(|r| Some(r.forecast)).collect())
                .collect();
            if cols.is_empty() {
                continue;
            }
            for (i, f) in combine_forecasts(&cols)?.into_iter().enumerate() {
                let k = &d.oos.row_keys[i];
                out.panel.rows.push(ForecastRow {
                    asset: k.asset,
                    target_month: k.target_month,
                    model: name.to_string(),
                    kind,
                    horizon: h,
                    forecast: f.expect("every member forecasts every row"),
                    realization: d.oos.y[i],
                    benchmark: d.oos_benchmark[i],
                });
            }
        }
        for rows in fams.values() {
            out.panel.rows.extend(rows.iter().cloned());
        }
    }
    out.panel.sort();

    for ((model, kind, horizon), per_iter) in raw_importance {
        let groups: Vec<PredictorGroup> = per_iter[0].iter().map(|g| g.0).collect();
        let mean: Vec<(PredictorGroup, f64)> = groups
            .iter()
            .enumerate()
            .map(|(j, g)| {
                (
                    *g,
                    per_iter.iter().map(|v| v[j].1).sum::<f64>() / per_iter.len() as f64,
                )
            })
            .collect();
        for g in normalize_importance(&mean) {
            out.importance.push(ImportanceRow {
                model: model.clone(),
                kind,
                horizon,
                group: g.group,
                raw: g.raw,
                importance: g.normalized,
            });
        }
    }
    out.chosen.sort_by(|a, b| {
        (&a.model, a.kind, a.horizon, a.iteration).cmp(&(&b.model, b.kind, b.horizon, b.iteration))
    });
    Ok(out)
}
