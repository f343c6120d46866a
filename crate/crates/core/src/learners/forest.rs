//! Random forests: bootstrap-aggregated trees with per-split feature
//! subsampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tree::{grow, GrowOptions, Presorted};
use super::{TrainingSet, Tree};
use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Debug, PartialEq)]
pub struct ForestOptions {
    pub trees: usize,
    pub depth: usize,
    /// Candidate features per split; `None` means `ceil(sqrt(P))`.
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    /// Resample rows with replacement for each tree.
    pub bootstrap: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
}

impl Forest {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>() / self.trees.len() as f64
    }

    /// Every tree cut back to `depth`; equals the forest grown with that
    /// depth from the same data, options and seed.
    pub fn truncated(&self, depth: usize) -> Forest {
        Forest {
            trees: self.trees.iter().map(|t| t.truncated(depth)).collect(),
        }
    }
}

/// Generator for tree `index` of a forest seeded with `seed`: one ChaCha
/// stream per tree, so results do not depend on scheduling.
pub(crate) fn tree_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn default_mtry(p: usize) -> usize {
    ((p as f64).sqrt().ceil() as usize).max(1)
}

pub fn fit_rforest(ts: &TrainingSet, opts: &ForestOptions, seed: u64) -> Result<Forest> {
    if opts.trees == 0 {
        return Err(Error::InvalidArgument(
            "forest needs at least one tree".into(),
        ));
    }
    if opts.depth == 0 {
        return Err(Error::InvalidArgument(
            "tree depth must be at least 1".into(),
        ));
    }
    ts.validate()?;
    let (n, p) = (ts.n(), ts.p());
    let mtry = opts.mtry.unwrap_or_else(|| default_mtry(p)).clamp(1, p);
    let pre = Presorted::new(&ts.x);
    let grow_opts = GrowOptions {
        depth: opts.depth,
        min_leaf: opts.min_leaf,
        mtry: Some(mtry),
    };
    let trees = par::map_range(opts.trees, |b| {
        let mut rng = tree_rng(seed, b);
        let mut weights = vec![0u32; n];
        if opts.bootstrap {
            for _ in 0..n {
                weights[rng.random_range(0..n)] += 1;
            }
        } else {
            weights.iter_mut().for_each(|w| *w = 1);
        }
        grow(&pre, &ts.y, &weights, grow_opts, Some(&mut rng))
    });
    Ok(Forest { trees })
}
