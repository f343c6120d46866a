//! One function per subcommand. Every artifact lives under the configured
//! output directory; downstream commands read what upstream ones wrote.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use condbeta::beta::{compute_beta_panel, BetaKind, RealizedBetaPanel};
use condbeta::evaluation::{cdfe, clark_west, oos_r2, quintile_report, EvalWeighting};
use condbeta::forecast::ForecastPanel;
use condbeta::panel::{
    apply_universe_filters, load_characteristics, load_daily_returns, load_monthly_meta,
    CharacteristicPanel, MonthlyMeta, ReturnPanel,
};
use condbeta::pipeline::{run_experiment, ExperimentData};
use condbeta::portfolio::form_and_track;
use condbeta::synth;
use condbeta::valuation::value_forecasts;
use log::info;

use crate::config::RunConfig;
use crate::MissingArtifact;

pub const BETAS_FILE: &str = "betas.csv";
pub const FORECASTS_FILE: &str = "forecasts.csv";
pub const HYPERPARAMETERS_FILE: &str = "hyperparameters.csv";
pub const FAILURES_FILE: &str = "failures.csv";
pub const IMPORTANCE_FILE: &str = "importance.csv";
pub const AUDIT_FILE: &str = "audit.csv";
pub const SCHEDULE_FILE: &str = "schedule.csv";
pub const EVALUATION_DIR: &str = "evaluation";
pub const VALUATION_FILE: &str = "valuation.csv";
pub const PORTFOLIO_DIR: &str = "portfolio";
pub const REPORT_FILE: &str = "report.md";

/// Writes a table with a header row; units are part of the column names.
fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn num(x: f64) -> String {
    x.to_string()
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn require(path: PathBuf, producer: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(MissingArtifact { path, producer }.into())
    }
}

struct Inputs {
    returns: ReturnPanel,
    characteristics: CharacteristicPanel,
    meta: Option<MonthlyMeta>,
}

fn load_inputs(cfg: &RunConfig, need_characteristics: bool) -> Result<Inputs> {
    let d = cfg.data_paths();
    let producer = if cfg.data.is_some() {
        "input data"
    } else {
        "synth"
    };
    let fmt = d.format();
    let returns_path = require(d.returns.clone(), producer)?;
    if let Some(m) = &d.market {
        require(m.clone(), producer)?;
    }
    let returns = load_daily_returns(
        &returns_path,
        &d.market_source(),
        d.riskfree.as_deref(),
        fmt,
    )?;
    let characteristics = if need_characteristics {
        let c = require(d.characteristics.clone(), producer)?;
        let g = require(d.groups.clone(), producer)?;
        load_characteristics(&c, &g, fmt)?
    } else {
        CharacteristicPanel::new(
            vec![],
            vec![],
            vec!["_".into()],
            vec![condbeta::panel::PredictorGroup::Intangibles],
            vec![],
        )?
    };
    let meta = match &d.meta {
        Some(p) => Some(load_monthly_meta(&require(p.clone(), producer)?, fmt)?),
        None => None,
    };
    Ok(Inputs {
        returns,
        characteristics,
        meta,
    })
}

fn load_forecasts(cfg: &RunConfig, returns: &ReturnPanel) -> Result<ForecastPanel> {
    let path = require(cfg.output_dir.join(FORECASTS_FILE), "forecast")?;
    Ok(ForecastPanel::read_csv(&path)?.reindex(returns.asset_ids())?)
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let dgp = cfg
        .synth
        .as_ref()
        .context("the synth command needs a [synth] section")?;
    let data = synth::generate(dgp)?;
    let dir = cfg.synth_dir();
    synth::write_dataset(&data, &dir)?;
    info!("wrote synthetic panels to {}", dir.display());
    Ok(())
}

fn beta_horizons(cfg: &RunConfig) -> Vec<u32> {
    let mut h = cfg.experiment.horizons.clone();
    h.sort_unstable();
    h.dedup();
    h
}

pub fn cmd_betas(cfg: &RunConfig) -> Result<()> {
    let inputs = load_inputs(cfg, false)?;
    let panel = compute_beta_panel(&inputs.returns, &BetaKind::ALL, &beta_horizons(cfg))?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join(BETAS_FILE);
    panel.write_csv(&path)?;
    info!("wrote {} realized betas to {}", panel.len(), path.display());
    Ok(())
}

pub fn cmd_forecast(cfg: &RunConfig, fail_fast: bool) -> Result<()> {
    let inputs = load_inputs(cfg, true)?;
    let betas_path = require(cfg.output_dir.join(BETAS_FILE), "betas")?;
    let betas = RealizedBetaPanel::read_csv(&betas_path, inputs.returns.asset_ids())?;
    let eligibility = match (&cfg.universe, &inputs.meta) {
        (Some(f), Some(meta)) => Some(apply_universe_filters(&inputs.returns, meta, f)?),
        (Some(_), None) => anyhow::bail!("[universe] filters need a meta file"),
        _ => None,
    };
    let data = ExperimentData {
        returns: &inputs.returns,
        characteristics: &inputs.characteristics,
        betas: &betas,
        eligibility: eligibility.as_ref(),
    };
    let out = run_experiment(&data, &cfg.experiment_config(fail_fast))?;
    let dir = &cfg.output_dir;
    out.panel.write_csv(&dir.join(FORECASTS_FILE))?;

    let rows: Vec<Vec<String>> = out
        .chosen
        .iter()
        .map(|c| {
            vec![
                c.model.clone(),
                c.kind.to_string(),
                c.horizon.to_string(),
                c.iteration.to_string(),
                c.hyper.clone(),
                num(c.validation_mse),
            ]
        })
        .collect();
    write_table(
        &dir.join(HYPERPARAMETERS_FILE),
        &[
            "model",
            "kind",
            "horizon_months",
            "iteration",
            "hyperparameters",
            "validation_mse_beta_sq",
        ],
        &rows,
    )?;
    let rows: Vec<Vec<String>> = out
        .failures
        .iter()
        .map(|f| {
            vec![
                f.model.clone(),
                f.kind.to_string(),
                f.horizon.to_string(),
                f.iteration.map(|i| i.to_string()).unwrap_or_default(),
                f.error.clone(),
            ]
        })
        .collect();
    write_table(
        &dir.join(FAILURES_FILE),
        &["model", "kind", "horizon_months", "iteration", "error"],
        &rows,
    )?;
    let rows: Vec<Vec<String>> = out
        .importance
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                r.kind.to_string(),
                r.horizon.to_string(),
                r.group.to_string(),
                num(r.raw),
                num(r.importance),
            ]
        })
        .collect();
    write_table(
        &dir.join(IMPORTANCE_FILE),
        &[
            "model",
            "kind",
            "horizon_months",
            "group",
            "mse_increase_beta_sq",
            "importance_pct_of_total",
        ],
        &rows,
    )?;
    let mut rows = vec![vec![
        "rows_checked".to_string(),
        out.audit.rows_checked.to_string(),
    ]];
    rows.push(vec![
        "violations".to_string(),
        out.audit.violations.len().to_string(),
    ]);
    rows.extend(
        out.audit
            .violations
            .iter()
            .map(|v| vec!["violation".to_string(), v.clone()]),
    );
    write_table(&dir.join(AUDIT_FILE), &["item", "value"], &rows)?;
    let rows: Vec<Vec<String>> = out
        .schedules
        .iter()
        .flat_map(|s| {
            s.iterations.iter().map(|it| {
                vec![
                    it.horizon.to_string(),
                    it.index.to_string(),
                    it.train.first.to_string(),
                    it.train.last.to_string(),
                    it.validation.first.to_string(),
                    it.validation.last.to_string(),
                    it.oos.first.to_string(),
                    it.oos.last.to_string(),
                ]
            })
        })
        .collect();
    write_table(
        &dir.join(SCHEDULE_FILE),
        &[
            "horizon_months",
            "iteration",
            "train_first_target",
            "train_last_target",
            "validation_first_target",
            "validation_last_target",
            "oos_first_target",
            "oos_last_target",
        ],
        &rows,
    )?;
    if !out.audit.violations.is_empty() {
        anyhow::bail!(
            "look-ahead audit found {} violations",
            out.audit.violations.len()
        );
    }
    info!(
        "wrote {} forecasts ({} failed cells) to {}",
        out.panel.rows.len(),
        out.failures.len(),
        dir.display()
    );
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let path = require(cfg.output_dir.join(FORECASTS_FILE), "forecast")?;
    let fp = ForecastPanel::read_csv(&path)?;
    let dir = cfg.output_dir.join(EVALUATION_DIR);
    let (mut r2, mut cw, mut cd, mut qs) = (vec![], vec![], vec![], vec![]);
    for (key, rows) in fp.cells() {
        let cell = [
            key.model.clone(),
            key.kind.to_string(),
            key.horizon.to_string(),
        ];
        for w in EvalWeighting::ALL {
            let r = oos_r2(&rows, w)?;
            let mut rec = cell.to_vec();
            rec.extend([
                w.as_str().to_string(),
                opt(r.map(|v| 100.0 * v)),
                rows.len().to_string(),
            ]);
            r2.push(rec);
            let c = clark_west(&rows, w, cfg.evaluation.cw_lags)?;
            let mut rec = cell.to_vec();
            rec.extend([
                w.as_str().to_string(),
                num(c.dbar),
                num(c.hac_se),
                num(c.statistic),
                c.stars().to_string(),
                c.lags.to_string(),
                c.n.to_string(),
            ]);
            cw.push(rec);
        }
        for (m, v) in cdfe(&rows) {
            let mut rec = cell.to_vec();
            rec.extend([m.to_string(), num(v)]);
            cd.push(rec);
        }
        let q = quintile_report(&rows);
        for (i, s) in q.quintiles.iter().enumerate() {
            let mut rec = cell.to_vec();
            rec.extend([
                (i + 1).to_string(),
                num(s.realized),
                num(s.forecast_model),
                num(s.forecast_benchmark),
                num(s.mse_model),
                num(s.mse_benchmark),
                num(100.0 * s.frac_positive_model),
                num(100.0 * s.frac_positive_benchmark),
                q.months_used.to_string(),
                q.months_skipped.to_string(),
            ]);
            qs.push(rec);
        }
    }
    let cell = ["model", "kind", "horizon_months"];
    let with = |extra: &[&'static str]| -> Vec<&'static str> {
        cell.iter().chain(extra).copied().collect()
    };
    write_table(
        &dir.join("r2.csv"),
        &with(&["weighting", "oos_r2_pct", "n_rows"]),
        &r2,
    )?;
    write_table(
        &dir.join("clark_west.csv"),
        &with(&[
            "weighting",
            "mean_adjusted_diff_beta_sq",
            "hac_se",
            "cw_stat",
            "stars",
            "nw_lags",
            "n",
        ]),
        &cw,
    )?;
    write_table(
        &dir.join("cdfe.csv"),
        &with(&["target_month", "cumulative_mse_diff_beta_sq"]),
        &cd,
    )?;
    write_table(
        &dir.join("quintiles.csv"),
        &with(&[
            "quintile",
            "realized_beta",
            "model_forecast_beta",
            "benchmark_forecast_beta",
            "model_mse_beta_sq",
            "benchmark_mse_beta_sq",
            "model_positive_pct",
            "benchmark_positive_pct",
            "months_used",
            "months_skipped",
        ]),
        &qs,
    )?;
    let imp = cfg.output_dir.join(IMPORTANCE_FILE);
    if imp.exists() {
        std::fs::copy(&imp, dir.join(IMPORTANCE_FILE)).context("copying importance table")?;
    }
    info!("wrote evaluation tables to {}", dir.display());
    Ok(())
}

pub fn cmd_value(cfg: &RunConfig) -> Result<()> {
    let inputs = load_inputs(cfg, false)?;
    let meta = inputs
        .meta
        .as_ref()
        .context("valuation needs a meta file with prices and cash flows")?;
    let fp = load_forecasts(cfg, &inputs.returns)?;
    let rows: Vec<Vec<String>> = value_forecasts(&fp, &inputs.returns, meta, &cfg.valuation)?
        .into_iter()
        .map(|r| {
            vec![
                num(100.0 * r.growth_annual),
                num(100.0 * r.premium_annual),
                r.horizon,
                r.model,
                r.source.as_str().to_string(),
                opt(r.r2.map(|v| 100.0 * v)),
                r.n.to_string(),
                r.excluded.to_string(),
            ]
        })
        .collect();
    write_table(
        &cfg.output_dir.join(VALUATION_FILE),
        &[
            "growth_annual_pct",
            "premium_annual_pct",
            "horizon_months",
            "model",
            "capm_source",
            "valuation_r2_pct",
            "n",
            "excluded_rate_le_growth",
        ],
        &rows,
    )?;
    Ok(())
}

pub fn cmd_portfolio(cfg: &RunConfig) -> Result<()> {
    let inputs = load_inputs(cfg, false)?;
    let fp = load_forecasts(cfg, &inputs.returns)?;
    let ids = inputs.returns.asset_ids();
    let dir = cfg.output_dir.join(PORTFOLIO_DIR);
    let mut groups: BTreeMap<(String, u32), Vec<&condbeta::forecast::ForecastRow>> =
        BTreeMap::new();
    for r in fp.rows.iter().filter(|r| r.kind == BetaKind::Capm) {
        groups
            .entry((r.model.clone(), r.horizon))
            .or_default()
            .push(r);
    }
    let (mut summary, mut weights, mut density, mut skipped) = (vec![], vec![], vec![], vec![]);
    let mut benchmark_done = std::collections::BTreeSet::new();
    for ((model, h), rows) in &groups {
        let mut runs = vec![(model.clone(), false)];
        if benchmark_done.insert(*h) {
            runs.push(("benchmark".to_string(), true));
        }
        for (name, use_benchmark) in runs {
            let t = form_and_track(
                rows,
                &inputs.returns,
                inputs.meta.as_ref(),
                ids,
                &cfg.portfolio,
                use_benchmark,
            );
            for m in &t.months {
                summary.push(vec![
                    name.clone(),
                    h.to_string(),
                    m.formation.to_string(),
                    m.target.to_string(),
                    num(m.ex_post_beta),
                    num(m.ex_ante_variance),
                    m.weights.len().to_string(),
                ]);
                for (a, w) in &m.weights {
                    weights.push(vec![
                        name.clone(),
                        h.to_string(),
                        m.formation.to_string(),
                        ids[*a].clone(),
                        num(*w),
                    ]);
                }
            }
            for (m, why) in &t.skipped {
                skipped.push(vec![
                    name.clone(),
                    h.to_string(),
                    m.to_string(),
                    why.clone(),
                ]);
            }
            if let Some(d) = &t.density {
                let mean =
                    t.months.iter().map(|m| m.ex_post_beta).sum::<f64>() / t.months.len() as f64;
                density.push(vec![
                    name.clone(),
                    h.to_string(),
                    num(d.mode),
                    num(mean),
                    num(d.bandwidth),
                    d.degenerate.to_string(),
                    t.months.len().to_string(),
                ]);
            }
        }
    }
    write_table(
        &dir.join("summary.csv"),
        &[
            "source",
            "horizon_months",
            "formation_month",
            "target_month",
            "ex_post_beta",
            "ex_ante_variance_daily_sq",
            "n_assets",
        ],
        &summary,
    )?;
    write_table(
        &dir.join("weights.csv"),
        &[
            "source",
            "horizon_months",
            "formation_month",
            "asset_id",
            "weight_fraction",
        ],
        &weights,
    )?;
    write_table(
        &dir.join("density.csv"),
        &[
            "source",
            "horizon_months",
            "ex_post_beta_mode",
            "ex_post_beta_mean",
            "kde_bandwidth",
            "degenerate",
            "n_months",
        ],
        &density,
    )?;
    write_table(
        &dir.join("skipped.csv"),
        &["source", "horizon_months", "formation_month", "reason"],
        &skipped,
    )?;
    Ok(())
}

/// Fixed-point rendering of a numeric table cell; blanks become "n/a".
fn fixed(cell: &str, digits: usize) -> String {
    cell.parse::<f64>()
        .map(|v| format!("{v:.digits$}"))
        .unwrap_or_else(|_| "n/a".into())
}

/// Consolidated markdown summary of whatever artifacts exist.
pub fn cmd_report(cfg: &RunConfig) -> Result<()> {
    let r2_path = require(
        cfg.output_dir.join(EVALUATION_DIR).join("r2.csv"),
        "evaluate",
    )?;
    let mut out = String::new();
    writeln!(out, "# Conditional beta run summary\n")?;
    writeln!(out, "Output directory: `{}`\n", cfg.output_dir.display())?;
    let table = |path: &Path| -> Result<(Vec<String>, Vec<Vec<String>>)> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok((header, rows))
    };
    let (_, r2) = table(&r2_path)?;
    let (_, cw) = table(&cfg.output_dir.join(EVALUATION_DIR).join("clark_west.csv"))?;
    writeln!(
        out,
        "## Out-of-sample R² (%, pooled panel weighting) with Clark-West significance\n"
    )?;
    writeln!(
        out,
        "| model | kind | horizon (months) | R² (%) | CW stat |"
    )?;
    writeln!(out, "|---|---|---|---|---|")?;
    for (a, b) in r2.iter().zip(&cw).filter(|(a, _)| a[3] == "panel") {
        let s = if b[6].is_empty() {
            "n/a".to_string()
        } else {
            format!("{}{}", fixed(&b[6], 2), b[7])
        };
        writeln!(
            out,
            "| {} | {} | {} | {} | {} |",
            a[0],
            a[1],
            a[2],
            fixed(&a[4], 2),
            s
        )?;
    }
    let val = cfg.output_dir.join(VALUATION_FILE);
    if val.exists() {
        let (_, rows) = table(&val)?;
        writeln!(out, "\n## Valuation R² (%), growth 0%, premium 10%\n")?;
        writeln!(out, "| model | CAPM source | horizon | R² (%) | n |")?;
        writeln!(out, "|---|---|---|---|---|")?;
        for r in rows.iter().filter(|r| r[0] == "0" && r[1] == "10") {
            writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                r[3],
                r[4],
                r[2],
                fixed(&r[5], 2),
                r[6]
            )?;
        }
    }
    let dens = cfg.output_dir.join(PORTFOLIO_DIR).join("density.csv");
    if dens.exists() {
        let (_, rows) = table(&dens)?;
        writeln!(out, "\n## Market-neutral portfolios: ex-post beta\n")?;
        writeln!(
            out,
            "| source | horizon (months) | KDE mode | mean | months |"
        )?;
        writeln!(out, "|---|---|---|---|---|")?;
        for r in rows {
            writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                r[0],
                r[1],
                fixed(&r[2], 3),
                fixed(&r[3], 3),
                r[6]
            )?;
        }
    }
    let path = cfg.output_dir.join(REPORT_FILE);
    std::fs::write(&path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_formatting() {
        assert_eq!(fixed("1.23456", 2), "1.23");
        assert_eq!(fixed("", 2), "n/a");
        assert_eq!(fixed("-0.5", 3), "-0.500");
    }

    #[test]
    fn missing_artifacts_carry_their_path() {
        let err = require(PathBuf::from("/nonexistent/forecasts.csv"), "forecast").unwrap_err();
        let m = err.downcast_ref::<MissingArtifact>().unwrap();
        assert_eq!(m.producer, "forecast");
        assert!(err.to_string().contains("/nonexistent/forecasts.csv"));
    }

    #[test]
    fn tables_have_headers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/t.csv");
        write_table(&p, &["a_pct", "b"], &[vec!["1".into(), "x".into()]]).unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap(), "a_pct,b\n1,x\n");
    }
}
