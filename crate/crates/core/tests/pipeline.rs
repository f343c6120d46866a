use std::collections::BTreeMap;

use condbeta::beta::{compute_beta_panel, BetaKind, RealizedBetaPanel};
use condbeta::evaluation::{clark_west, oos_r2, EvalWeighting, CW_LAGS};
use condbeta::learners::{log_grid, Family, HyperGrid};
use condbeta::pipeline::{run_experiment, ExperimentConfig, ExperimentData};
use condbeta::synth::{generate, DgpConfig, SyntheticData};

fn small_grid() -> HyperGrid {
    HyperGrid {
        pcr_components: vec![1, 2],
        pls_components: vec![1, 2],
        enet_lambdas: log_grid(1e-3, 1e-1, 3),
        enet_alphas: vec![0.5, 1.0],
        ..HyperGrid::default()
    }
}

fn dataset(seed: u64, months: usize) -> (SyntheticData, RealizedBetaPanel) {
    let data = generate(&DgpConfig {
        n_assets: 30,
        n_months: months,
        seed,
        ..DgpConfig::default()
    })
    .unwrap();
    let betas = compute_beta_panel(&data.returns, &BetaKind::ALL, &[1, 3, 6, 12]).unwrap();
    (data, betas)
}

fn inputs<'a>(data: &'a SyntheticData, betas: &'a RealizedBetaPanel) -> ExperimentData<'a> {
    ExperimentData {
        returns: &data.returns,
        characteristics: &data.characteristics,
        betas,
        eligibility: None,
    }
}

#[test]
fn single_cell_config_emits_only_that_cell() {
    let (data, betas) = dataset(1, 140);
    let cfg = ExperimentConfig {
        models: vec![Family::ElasticNet],
        kinds: vec![BetaKind::Down],
        horizons: vec![1],
        grid: small_grid(),
        ..ExperimentConfig::default()
    };
    let out = run_experiment(&inputs(&data, &betas), &cfg).unwrap();
    assert!(!out.panel.rows.is_empty());
    assert!(out
        .panel
        .rows
        .iter()
        .all(|r| r.model == "enet" && r.kind == BetaKind::Down && r.horizon == 1));
    assert!(out.failures.is_empty());
    assert_eq!(out.chosen.len(), 1);
}

#[test]
fn combinations_are_exact_means_and_runs_are_reproducible() {
    let (data, betas) = dataset(2, 140);
    let cfg = ExperimentConfig {
        models: vec![Family::Pcr, Family::Pls, Family::ElasticNet],
        kinds: vec![BetaKind::Capm, BetaKind::SemiN],
        horizons: vec![1],
        grid: small_grid(),
        seed: 9,
        ..ExperimentConfig::default()
    };
    let a = run_experiment(&inputs(&data, &betas), &cfg).unwrap();
    let b = run_experiment(&inputs(&data, &betas), &cfg).unwrap();
    assert_eq!(a.panel, b.panel);

    let mut by_pos: BTreeMap<_, BTreeMap<String, f64>> = BTreeMap::new();
    for r in &a.panel.rows {
        by_pos
            .entry((r.kind, r.horizon, r.target_month, r.asset))
            .or_default()
            .insert(r.model.clone(), r.forecast);
    }
    assert!(!by_pos.is_empty());
    for fs in by_pos.values() {
        let mean = (fs["pcr"] + fs["pls"] + fs["enet"]) / 3.0;
        assert_eq!(fs["clin"], mean);
        assert!(!fs.contains_key("cnl"));
    }
}

#[test]
fn look_ahead_audit_is_clean_across_horizons() {
    let (data, betas) = dataset(3, 160);
    let cfg = ExperimentConfig {
        models: vec![Family::ElasticNet],
        kinds: vec![BetaKind::Capm],
        horizons: vec![1, 3, 6, 12],
        grid: small_grid(),
        lagged_beta_predictor: true,
        ..ExperimentConfig::default()
    };
    let out = run_experiment(&inputs(&data, &betas), &cfg).unwrap();
    assert!(out.audit.rows_checked > 0);
    assert!(
        out.audit.violations.is_empty(),
        "{:?}",
        out.audit.violations
    );
    for h in [1, 3, 6, 12] {
        assert!(
            out.panel.rows.iter().any(|r| r.horizon == h),
            "no rows at h={h}"
        );
    }
    for r in &out.panel.rows {
        assert_eq!(r.feature_month().offset(r.horizon as i32), r.target_month);
    }
}

#[test]
fn insufficient_span_is_recorded_or_fatal() {
    let (data, betas) = dataset(4, 60);
    let mut cfg = ExperimentConfig {
        models: vec![Family::Pcr],
        kinds: vec![BetaKind::Capm],
        horizons: vec![1],
        grid: small_grid(),
        ..ExperimentConfig::default()
    };
    let out = run_experiment(&inputs(&data, &betas), &cfg).unwrap();
    assert_eq!(out.failures.len(), 1);
    assert!(out.failures[0].error.contains("133"));
    cfg.fail_fast = true;
    assert!(run_experiment(&inputs(&data, &betas), &cfg).is_err());
}

#[test]
fn linear_truth_beats_lagged_benchmark() {
    // Betas are an exact linear function of last month's characteristics.
    let data = generate(&DgpConfig {
        n_assets: 40,
        n_months: 140,
        theta: vec![0.4, -0.3, 0.2],
        beta_clip: (-10.0, 10.0),
        idio_vol: 0.01,
        seed: 5,
        ..DgpConfig::default()
    })
    .unwrap();
    let betas = compute_beta_panel(&data.returns, &[BetaKind::Capm], &[1]).unwrap();
    let cfg = ExperimentConfig {
        models: vec![Family::ElasticNet],
        kinds: vec![BetaKind::Capm],
        horizons: vec![1],
        grid: small_grid(),
        ..ExperimentConfig::default()
    };
    let out = run_experiment(&inputs(&data, &betas), &cfg).unwrap();
    let rows: Vec<_> = out.panel.rows.iter().collect();
    let r2 = oos_r2(&rows, EvalWeighting::Panel).unwrap().unwrap();
    assert!(r2 > 0.0, "R2 {r2}");
    let cw = clark_west(&rows, EvalWeighting::Panel, CW_LAGS).unwrap();
    assert!(cw.statistic > 1.645);
}
