//! Panel learners mapping standardized predictors to realized betas.
//!
//! Every family fits through [`fit`] and predicts through
//! [`FittedModel::predict`]. All randomness comes from the explicit seed;
//! identical data, hyperparameters and seed give bit-identical predictions.

mod enet;
mod ffnn;
mod forest;
mod gboost;
mod grid;
mod linear;
mod matrix;
mod tree;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::month::Month;

pub use enet::{fit_elastic_net, EnetGram};
pub use ffnn::{fit_ffnn, BnMode, Mlp, NetworkEnsemble};
pub use forest::{default_mtry, fit_rforest, Forest, ForestOptions};
pub use gboost::{fit_gboost, Boosted};
pub use grid::{log_grid, HyperGrid};
pub use linear::{fit_pcr, fit_pls, LinearModel};
pub use matrix::DenseMatrix;
pub use tree::{fit_tree, Tree};

/// Identifies a training row: the asset, the month its predictors were
/// observed, and the month of the realized beta it is paired with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowKey {
    pub asset: usize,
    pub feature_month: Month,
    pub target_month: Month,
}

/// Stacked panel of predictor rows and realized-beta targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub x: DenseMatrix,
    pub y: Vec<f64>,
    pub row_keys: Vec<RowKey>,
}

impl TrainingSet {
    pub fn new(x: DenseMatrix, y: Vec<f64>, row_keys: Vec<RowKey>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::LengthMismatch(x.rows(), y.len()));
        }
        if row_keys.len() != y.len() {
            return Err(Error::LengthMismatch(row_keys.len(), y.len()));
        }
        Ok(TrainingSet { x, y, row_keys })
    }

    /// A training set without meaningful row keys (tests, ad-hoc fits).
    pub fn unkeyed(x: DenseMatrix, y: Vec<f64>) -> Result<Self> {
        let m = Month::from_index(0);
        let keys = (0..y.len())
            .map(|i| RowKey {
                asset: i,
                feature_month: m,
                target_month: m,
            })
            .collect();
        TrainingSet::new(x, y, keys)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n() == 0 || self.p() == 0 {
            return Err(Error::Empty("training set".into()));
        }
        if !self.x.all_finite() || self.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training data".into()));
        }
        Ok(())
    }

    pub fn concat(&self, other: &TrainingSet) -> Result<TrainingSet> {
        let mut y = self.y.clone();
        y.extend_from_slice(&other.y);
        let mut keys = self.row_keys.clone();
        keys.extend_from_slice(&other.row_keys);
        TrainingSet::new(self.x.vstack(&other.x)?, y, keys)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Family {
    Pcr,
    Pls,
    ElasticNet,
    Tree,
    GBoost,
    RForest,
    Ffnn,
}

impl Family {
    /// Families run by the rolling-window pipeline.
    pub const PIPELINE: [Family; 6] = [
        Family::Pcr,
        Family::Pls,
        Family::ElasticNet,
        Family::GBoost,
        Family::RForest,
        Family::Ffnn,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Family::Pcr => "pcr",
            Family::Pls => "pls",
            Family::ElasticNet => "enet",
            Family::Tree => "tree",
            Family::GBoost => "gbrt",
            Family::RForest => "rf",
            Family::Ffnn => "nn",
        }
    }

    pub fn is_linear(self) -> bool {
        matches!(self, Family::Pcr | Family::Pls | Family::ElasticNet)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl From<Family> for String {
    fn from(f: Family) -> String {
        f.id().to_string()
    }
}

impl TryFrom<String> for Family {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "pcr" | "pca" => Family::Pcr,
            "pls" => Family::Pls,
            "enet" | "elastic_net" | "en" => Family::ElasticNet,
            "tree" => Family::Tree,
            "gbrt" | "gboost" | "gb" => Family::GBoost,
            "rf" | "rforest" | "random_forest" => Family::RForest,
            "nn" | "ffnn" => Family::Ffnn,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown model family {s:?}"
                )))
            }
        })
    }
}

/// One hyperparameter candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum HyperParams {
    Pcr {
        components: usize,
    },
    Pls {
        components: usize,
    },
    ElasticNet {
        lambda: f64,
        alpha: f64,
    },
    Tree {
        depth: usize,
        min_leaf: usize,
    },
    GBoost {
        max_trees: usize,
        depth: usize,
        learning_rate: f64,
        patience: usize,
    },
    RForest {
        trees: usize,
        depth: usize,
        /// Candidate features per split; `None` means `ceil(sqrt(P))`.
        mtry: Option<usize>,
        min_leaf: usize,
    },
    Ffnn {
        learning_rate: f64,
        dropout: f64,
        depth: usize,
        seeds: usize,
        max_epochs: usize,
        patience: usize,
        batch_size: usize,
        /// Per-seed epoch budget used when refitting without a validation set.
        fixed_epochs: Option<Vec<usize>>,
    },
}

impl HyperParams {
    pub fn family(&self) -> Family {
        match self {
            HyperParams::Pcr { .. } => Family::Pcr,
            HyperParams::Pls { .. } => Family::Pls,
            HyperParams::ElasticNet { .. } => Family::ElasticNet,
            HyperParams::Tree { .. } => Family::Tree,
            HyperParams::GBoost { .. } => Family::GBoost,
            HyperParams::RForest { .. } => Family::RForest,
            HyperParams::Ffnn { .. } => Family::Ffnn,
        }
    }

    /// Compact `key=value` rendering for reports.
    pub fn describe(&self) -> String {
        match self {
            HyperParams::Pcr { components } | HyperParams::Pls { components } => {
                format!("K={components}")
            }
            HyperParams::ElasticNet { lambda, alpha } => {
                format!("lambda={lambda:.6e};alpha={alpha}")
            }
            HyperParams::Tree { depth, min_leaf } => format!("D={depth};min_leaf={min_leaf}"),
            HyperParams::GBoost {
                max_trees,
                depth,
                learning_rate,
                ..
            } => format!("K={max_trees};D={depth};v={learning_rate}"),
            HyperParams::RForest { trees, depth, .. } => format!("B={trees};D={depth}"),
            HyperParams::Ffnn {
                learning_rate,
                dropout,
                depth,
                ..
            } => format!("lr={learning_rate};dropout={dropout};depth={depth}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelParams {
    Linear(LinearModel),
    Tree(Tree),
    Boosted(Boosted),
    Forest(Forest),
    Network(NetworkEnsemble),
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// A trained predictor plus the hyperparameters and seed that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub format_version: u32,
    pub hyper: HyperParams,
    pub seed: u64,
    pub n_features: usize,
    pub params: ModelParams,
}

impl FittedModel {
    pub fn family(&self) -> Family {
        self.hyper.family()
    }

    pub fn predict(&self, x: &DenseMatrix) -> Result<Vec<f64>> {
        if x.cols() != self.n_features {
            return Err(Error::ColumnMismatch {
                expected: self.n_features,
                got: x.cols(),
            });
        }
        Ok((0..x.rows()).map(|i| self.predict_row(x.row(i))).collect())
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        match &self.params {
            ModelParams::Linear(m) => m.predict_row(row),
            ModelParams::Tree(t) => t.predict_row(row),
            ModelParams::Boosted(b) => b.predict_row(row),
            ModelParams::Forest(f) => f.predict_row(row),
            ModelParams::Network(n) => n.predict_row(row),
        }
    }

    /// Self-describing JSON blob tagged with [`MODEL_FORMAT_VERSION`].
    pub fn to_blob(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::ModelFormat(e.to_string()))
    }

    pub fn from_blob(blob: &str) -> Result<Self> {
        let m: FittedModel =
            serde_json::from_str(blob).map_err(|e| Error::ModelFormat(e.to_string()))?;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::ModelFormat(format!(
                "unsupported format version {}",
                m.format_version
            )));
        }
        Ok(m)
    }
}

/// Fits one hyperparameter candidate. `valid` drives early stopping for
/// boosting and networks; without it they train to their fixed budgets.
pub fn fit(
    hyper: &HyperParams,
    train: &TrainingSet,
    valid: Option<&TrainingSet>,
    seed: u64,
) -> Result<FittedModel> {
    train.validate()?;
    if let Some(v) = valid {
        v.validate()?;
        if v.p() != train.p() {
            return Err(Error::ColumnMismatch {
                expected: train.p(),
                got: v.p(),
            });
        }
    }
    let (params, hyper) = match hyper {
        HyperParams::Pcr { components } => (
            ModelParams::Linear(fit_pcr(train, *components)?),
            hyper.clone(),
        ),
        HyperParams::Pls { components } => (
            ModelParams::Linear(fit_pls(train, *components)?),
            hyper.clone(),
        ),
        HyperParams::ElasticNet { lambda, alpha } => (
            ModelParams::Linear(fit_elastic_net(train, *lambda, *alpha)?),
            hyper.clone(),
        ),
        HyperParams::Tree { depth, min_leaf } => (
            ModelParams::Tree(fit_tree(train, *depth, *min_leaf)?),
            hyper.clone(),
        ),
        HyperParams::GBoost {
            max_trees,
            depth,
            learning_rate,
            patience,
        } => {
            let b = fit_gboost(train, valid, *max_trees, *depth, *learning_rate, *patience)?;
            let used = HyperParams::GBoost {
                max_trees: b.n_trees().max(1),
                depth: *depth,
                learning_rate: *learning_rate,
                patience: *patience,
            };
            (ModelParams::Boosted(b), used)
        }
        HyperParams::RForest {
            trees,
            depth,
            mtry,
            min_leaf,
        } => {
            let opts = ForestOptions {
                trees: *trees,
                depth: *depth,
                mtry: *mtry,
                min_leaf: *min_leaf,
                bootstrap: true,
            };
            (
                ModelParams::Forest(fit_rforest(train, &opts, seed)?),
                hyper.clone(),
            )
        }
        HyperParams::Ffnn { .. } => {
            let ens = fit_ffnn(train, valid, hyper, seed)?;
            let mut used = hyper.clone();
            if let HyperParams::Ffnn { fixed_epochs, .. } = &mut used {
                *fixed_epochs = Some(ens.epochs_trained().to_vec());
            }
            (ModelParams::Network(ens), used)
        }
    };
    Ok(FittedModel {
        format_version: MODEL_FORMAT_VERSION,
        hyper,
        seed,
        n_features: train.p(),
        params,
    })
}

/// Equal-weighted combination of aligned forecasts; missing entries are
/// skipped position by position, and a position with nothing available
/// stays missing.
pub fn combine_forecasts(forecasts: &[Vec<Option<f64>>]) -> Result<Vec<Option<f64>>> {
    let first = forecasts
        .first()
        .ok_or_else(|| Error::Empty("forecast list".into()))?;
    let n = first.len();
    if let Some(bad) = forecasts.iter().find(|f| f.len() != n) {
        return Err(Error::LengthMismatch(bad.len(), n));
    }
    Ok((0..n)
        .map(|i| {
            let avail: Vec<f64> = forecasts.iter().filter_map(|f| f[i]).collect();
            (!avail.is_empty()).then(|| avail.iter().sum::<f64>() / avail.len() as f64)
        })
        .collect())
}

/// Pooled mean squared error of predictions against targets.
pub fn mse(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter()
        .zip(y)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / y.len() as f64
}
