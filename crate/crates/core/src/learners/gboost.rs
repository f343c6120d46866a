//! Gradient-boosted regression trees under squared loss.

use log::debug;
use serde::{Deserialize, Serialize};

use super::tree::{grow, GrowOptions, Presorted};
use super::{TrainingSet, Tree};
use crate::error::{Error, Result};

/// Weak learners split down to single observations.
const WEAK_MIN_LEAF: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Boosted {
    pub init: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
}

impl Boosted {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.init + self.learning_rate * self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>()
    }
}

/// Stagewise fit of `max_trees` depth-`depth` trees to running residuals,
/// each shrunk by `learning_rate`. With a validation set, stops once the
/// validation error has not improved for `patience` consecutive trees and
/// keeps the best prefix.
pub fn fit_gboost(
    train: &TrainingSet,
    valid: Option<&TrainingSet>,
    max_trees: usize,
    depth: usize,
    learning_rate: f64,
    patience: usize,
) -> Result<Boosted> {
    if depth == 0 {
        return Err(Error::InvalidArgument(
            "tree depth must be at least 1".into(),
        ));
    }
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {learning_rate}"
        )));
    }
    train.validate()?;
    let n = train.n();
    let init = train.y.iter().sum::<f64>() / n as f64;
    let pre = Presorted::new(&train.x);
    let weights = vec![1u32; n];
    let opts = GrowOptions {
        depth,
        min_leaf: WEAK_MIN_LEAF,
        mtry: None,
    };
    let mut fitted = vec![init; n];
    let mut resid = vec![0.0; n];
    let mut valid_pred: Option<Vec<f64>> = valid.map(|v| vec![init; v.n()]);
    let valid_mse = |pred: &[f64], v: &TrainingSet| super::mse(pred, &v.y);
    let mut best = (
        valid.map_or(f64::INFINITY, |v| {
            valid_mse(valid_pred.as_deref().unwrap(), v)
        }),
        0usize,
    );
    let mut trees = Vec::new();
    for k in 1..=max_trees {
        for i in 0..n {
            resid[i] = train.y[i] - fitted[i];
        }
        let tree = grow::<rand_chacha::ChaCha8Rng>(&pre, &resid, &weights, opts, None);
        for (i, f) in fitted.iter_mut().enumerate() {
            *f += learning_rate * tree.predict_row(train.x.row(i));
        }
        if let (Some(v), Some(vp)) = (valid, valid_pred.as_mut()) {
            for (i, f) in vp.iter_mut().enumerate() {
                *f += learning_rate * tree.predict_row(v.x.row(i));
            }
            let e = valid_mse(vp, v);
            trees.push(tree);
            if e < best.0 {
                best = (e, k);
            } else if k - best.1 >= patience {
                debug!(
                    "boosting stopped at {k} trees; best {} (mse {:.6e})",
                    best.1, best.0
                );
                break;
            }
        } else {
            trees.push(tree);
            best.1 = k;
        }
    }
    trees.truncate(best.1);
    Ok(Boosted {
        init,
        learning_rate,
        trees,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::{fit_tree, DenseMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data(n: usize, seed: u64, noise: f64) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let y = rows
            .iter()
            .map(|r| 1.0 + 2.0 * r[0] + noise * rng.random_range(-1.0..1.0))
            .collect();
        TrainingSet::unkeyed(DenseMatrix::from_rows(&rows).unwrap(), y).unwrap()
    }

    #[test]
    fn one_full_step_equals_single_tree() {
        let t = data(50, 1, 0.2);
        let b = fit_gboost(&t, None, 1, 3, 1.0, 50).unwrap();
        let tree = fit_tree(&t, 3, 1).unwrap();
        for i in 0..t.n() {
            assert!((b.predict_row(t.x.row(i)) - tree.predict_row(t.x.row(i))).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_target_stays_constant() {
        let mut t = data(30, 2, 0.0);
        t.y = vec![0.9; 30];
        let b = fit_gboost(&t, None, 20, 2, 0.1, 50).unwrap();
        assert!((b.init - 0.9).abs() < 1e-15);
        for i in 0..t.n() {
            assert!((b.predict_row(t.x.row(i)) - 0.9).abs() < 1e-15);
        }
    }

    #[test]
    fn training_error_is_monotone() {
        let t = data(80, 3, 0.0);
        let b = fit_gboost(&t, None, 500, 1, 0.1, 50).unwrap();
        let mut prev = f64::INFINITY;
        for k in 0..=b.n_trees() {
            let partial = Boosted {
                init: b.init,
                learning_rate: b.learning_rate,
                trees: b.trees[..k].to_vec(),
            };
            let pred: Vec<f64> = (0..t.n())
                .map(|i| partial.predict_row(t.x.row(i)))
                .collect();
            let e = crate::learners::mse(&pred, &t.y);
            assert!(e <= prev + 1e-15, "stage {k}: {e} > {prev}");
            prev = e;
        }
    }

    #[test]
    fn early_stopping_keeps_best_prefix() {
        let t = data(100, 4, 0.5);
        let v = data(60, 5, 0.5);
        let b = fit_gboost(&t, Some(&v), 500, 2, 0.1, 10).unwrap();
        assert!(b.n_trees() < 500);
        let err = |k: usize| {
            let m = Boosted {
                init: b.init,
                learning_rate: b.learning_rate,
                trees: b.trees[..k].to_vec(),
            };
            let pred: Vec<f64> = (0..v.n()).map(|i| m.predict_row(v.x.row(i))).collect();
            crate::learners::mse(&pred, &v.y)
        };
        let best = err(b.n_trees());
        for k in 0..b.n_trees() {
            assert!(err(k) >= best);
        }
    }

    #[test]
    fn in_sample_fit_preserves_target_mean() {
        // Leaf means of residuals keep the residual sum at zero at every
        // stage. (Unlike a forest, the sum of shrunken trees may leave the
        // training target range at the edges of the predictor space.)
        let t = data(120, 6, 0.3);
        let b = fit_gboost(&t, None, 200, 2, 0.1, 50).unwrap();
        let pred: Vec<f64> = (0..t.n()).map(|i| b.predict_row(t.x.row(i))).collect();
        let (pm, ym) = (
            pred.iter().sum::<f64>() / 120.0,
            t.y.iter().sum::<f64>() / 120.0,
        );
        assert!((pm - ym).abs() < 1e-12);
    }
}
