use serde::{Deserialize, Serialize};

use super::{Family, HyperParams};
use crate::error::{Error, Result};

/// Candidate lists per family. Every field can be overridden from the run
/// configuration; defaults follow the published search ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperGrid {
    pub pcr_components: Vec<usize>,
    pub pls_components: Vec<usize>,
    pub enet_lambdas: Vec<f64>,
    pub enet_alphas: Vec<f64>,
    pub gboost_max_trees: usize,
    pub gboost_depths: Vec<usize>,
    pub gboost_learning_rates: Vec<f64>,
    pub gboost_patience: usize,
    pub rforest_trees: usize,
    pub rforest_depths: Vec<usize>,
    pub rforest_min_leaf: usize,
    pub ffnn_learning_rates: Vec<f64>,
    pub ffnn_dropouts: Vec<f64>,
    pub ffnn_depths: Vec<usize>,
    pub ffnn_max_epochs: usize,
    pub ffnn_patience: usize,
    pub ffnn_seeds: usize,
    pub ffnn_batch_size: usize,
}

/// `count` points evenly spaced in log10 between `lo` and `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..count)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64))
        .collect()
}

impl Default for HyperGrid {
    fn default() -> Self {
        HyperGrid {
            pcr_components: (1..=10).collect(),
            pls_components: (1..=10).collect(),
            enet_lambdas: log_grid(1e-3, 1e3, 20),
            enet_alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            gboost_max_trees: 500,
            gboost_depths: vec![1, 2],
            gboost_learning_rates: vec![0.1, 0.01],
            gboost_patience: 50,
            rforest_trees: 200,
            rforest_depths: vec![5, 10, 15, 20],
            rforest_min_leaf: 5,
            ffnn_learning_rates: vec![0.001, 0.01],
            ffnn_dropouts: vec![0.1, 0.2, 0.3],
            ffnn_depths: vec![1, 2, 3],
            ffnn_max_epochs: 100,
            ffnn_patience: 5,
            ffnn_seeds: 10,
            ffnn_batch_size: 256,
        }
    }
}

impl HyperGrid {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("hypergrid: {m}")));
        if self
            .pcr_components
            .iter()
            .chain(&self.pls_components)
            .any(|&k| !(1..=10).contains(&k))
        {
            return bad("component counts must lie in 1..=10");
        }
        if self
            .enet_lambdas
            .iter()
            .any(|&l| !(1e-3 * (1.0 - 1e-12)..=1e3 * (1.0 + 1e-12)).contains(&l))
        {
            return bad("elastic-net lambda must lie in [1e-3, 1e3]");
        }
        if self.enet_alphas.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return bad("elastic-net alpha must lie in [0, 1]");
        }
        if !(1..=500).contains(&self.gboost_max_trees) {
            return bad("boosting tree count must lie in 1..=500");
        }
        if self.gboost_depths.iter().any(|&d| !(1..=2).contains(&d)) {
            return bad("boosting depth must be 1 or 2");
        }
        if self
            .gboost_learning_rates
            .iter()
            .any(|&v| !(v > 0.0 && v <= 1.0))
        {
            return bad("boosting learning rate must lie in (0, 1]");
        }
        if self.rforest_trees == 0 || self.rforest_depths.contains(&0) {
            return bad("forest needs at least one tree and positive depths");
        }
        if self.ffnn_depths.iter().any(|&d| !(1..=3).contains(&d)) {
            return bad("network depth must lie in 1..=3");
        }
        if self.ffnn_dropouts.iter().any(|&p| !(0.0..1.0).contains(&p)) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.ffnn_learning_rates.iter().any(|&v| v <= 0.0)
            || self.ffnn_seeds == 0
            || self.ffnn_batch_size == 0
        {
            return bad("network learning rates, seed count and batch size must be positive");
        }
        Ok(())
    }

    /// Candidates for `family` in enumeration order (ties in validation
    /// loss resolve to the earliest).
    pub fn candidates(&self, family: Family) -> Vec<HyperParams> {
        match family {
            Family::Pcr => self
                .pcr_components
                .iter()
                .map(|&components| HyperParams::Pcr { components })
                .collect(),
            Family::Pls => self
                .pls_components
                .iter()
                .map(|&components| HyperParams::Pls { components })
                .collect(),
            Family::ElasticNet => self
                .enet_lambdas
                .iter()
                .flat_map(|&lambda| {
                    self.enet_alphas
                        .iter()
                        .map(move |&alpha| HyperParams::ElasticNet { lambda, alpha })
                })
                .collect(),
            Family::Tree => self
                .rforest_depths
                .iter()
                .map(|&depth| HyperParams::Tree {
                    depth,
                    min_leaf: self.rforest_min_leaf,
                })
                .collect(),
            Family::GBoost => self
                .gboost_depths
                .iter()
                .flat_map(|&depth| {
                    self.gboost_learning_rates
                        .iter()
                        .map(move |&learning_rate| HyperParams::GBoost {
                            max_trees: self.gboost_max_trees,
                            depth,
                            learning_rate,
                            patience: self.gboost_patience,
                        })
                })
                .collect(),
            Family::RForest => self
                .rforest_depths
                .iter()
                .map(|&depth| HyperParams::RForest {
                    trees: self.rforest_trees,
                    depth,
                    mtry: None,
                    min_leaf: self.rforest_min_leaf,
                })
                .collect(),
            Family::Ffnn => {
                let mut out = Vec::new();
                for &learning_rate in &self.ffnn_learning_rates {
                    for &dropout in &self.ffnn_dropouts {
                        for &depth in &self.ffnn_depths {
                            out.push(HyperParams::Ffnn {
                                learning_rate,
                                dropout,
                                depth,
                                seeds: self.ffnn_seeds,
                                max_epochs: self.ffnn_max_epochs,
                                patience: self.ffnn_patience,
                                batch_size: self.ffnn_batch_size,
                                fixed_epochs: None,
                            });
                        }
                    }
                }
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_sizes_and_ranges() {
        let g = HyperGrid::default();
        g.validate().unwrap();
        assert_eq!(g.candidates(Family::Pcr).len(), 10);
        assert_eq!(g.candidates(Family::ElasticNet).len(), 100);
        assert_eq!(g.candidates(Family::GBoost).len(), 4);
        assert_eq!(g.candidates(Family::RForest).len(), 4);
        assert_eq!(g.candidates(Family::Ffnn).len(), 18);
        assert!((g.enet_lambdas[0] - 1e-3).abs() < 1e-15);
        assert!((g.enet_lambdas[19] - 1e3).abs() < 1e-9);
    }

    #[test]
    fn out_of_range_candidate_rejected() {
        let g = HyperGrid {
            ffnn_depths: vec![4],
            ..Default::default()
        };
        assert!(g.validate().is_err());
        let g = HyperGrid {
            enet_alphas: vec![1.5],
            ..Default::default()
        };
        assert!(g.validate().is_err());
    }
}
