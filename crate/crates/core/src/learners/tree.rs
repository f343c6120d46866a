//! Regression trees grown level by level over presorted columns.
//!
//! Every column is sorted once per design matrix; growing a level is then a
//! single pass over each column that accumulates left-hand sums for all
//! open nodes at once. Rows carry integer weights so bootstrap resamples
//! reuse the same ordering.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DenseMatrix, TrainingSet};
use crate::error::{Error, Result};

/// Flat node. A node with `left == 0` is a leaf (the root is never a child).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub feature: usize,
    pub threshold: f64,
    pub left: u32,
    pub right: u32,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Node {
    fn leaf_node(value: f64) -> Self {
        Node {
            feature: 0,
            threshold: 0.0,
            left: 0,
            right: 0,
            value,
        }
    }
}

impl Tree {
    pub fn leaf(value: f64) -> Self {
        Tree {
            nodes: vec![Node::leaf_node(value)],
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut k = 0usize;
        loop {
            let node = &self.nodes[k];
            if node.left == 0 {
                return node.value;
            }
            k = if row[node.feature] <= node.threshold {
                node.left as usize
            } else {
                node.right as usize
            };
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.left == 0).count()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, k: usize) -> usize {
            let n = &t.nodes[k];
            if n.left == 0 {
                0
            } else {
                1 + go(t, n.left as usize).max(go(t, n.right as usize))
            }
        }
        go(self, 0)
    }

    /// The tree cut back to `depth` levels. Growth is level-wise, so this
    /// equals the tree grown with that depth limit from the same inputs.
    pub fn truncated(&self, depth: usize) -> Tree {
        let mut level = vec![0usize; self.nodes.len()];
        let mut keep = 0;
        for (k, n) in self.nodes.iter().enumerate() {
            if level[k] > depth {
                break;
            }
            keep = k + 1;
            if n.left != 0 {
                level[n.left as usize] = level[k] + 1;
                level[n.right as usize] = level[k] + 1;
            }
        }
        let nodes = self.nodes[..keep]
            .iter()
            .zip(&level)
            .map(|(n, &l)| {
                if l == depth {
                    Node::leaf_node(n.value)
                } else {
                    *n
                }
            })
            .collect();
        Tree { nodes }
    }
}

/// Column orderings of a design matrix, shared across trees grown on it.
pub(crate) struct Presorted<'a> {
    x: &'a DenseMatrix,
    order: Vec<Vec<u32>>,
    values: Vec<Vec<f64>>,
}

impl<'a> Presorted<'a> {
    pub(crate) fn new(x: &'a DenseMatrix) -> Self {
        let (n, p) = (x.rows(), x.cols());
        let (order, values) = (0..p)
            .map(|j| {
                let mut idx: Vec<u32> = (0..n as u32).collect();
                idx.sort_by(|&a, &b| {
                    x.get(a as usize, j)
                        .total_cmp(&x.get(b as usize, j))
                        .then(a.cmp(&b))
                });
                let vals = idx.iter().map(|&i| x.get(i as usize, j)).collect();
                (idx, vals)
            })
            .unzip();
        Presorted { x, order, values }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct GrowOptions {
    pub depth: usize,
    pub min_leaf: usize,
    /// Candidate features drawn per node; `None` considers all of them.
    pub mtry: Option<usize>,
}

#[derive(Clone, Copy)]
struct Open {
    tree_idx: usize,
    w: f64,
    s: f64,
    ss: f64,
    splittable: bool,
}

#[derive(Clone, Copy)]
struct Scan {
    wl: f64,
    sl: f64,
    last: f64,
    seen: bool,
}

#[derive(Clone, Copy)]
struct Best {
    gain: f64,
    feature: usize,
    threshold: f64,
}

const CLOSED: u32 = u32::MAX;

/// Grows one tree on `y` with integer row weights (zero drops a row).
pub(crate) fn grow<R: Rng + ?Sized>(
    pre: &Presorted<'_>,
    y: &[f64],
    weights: &[u32],
    opts: GrowOptions,
    mut rng: Option<&mut R>,
) -> Tree {
    let (n, p) = (pre.x.rows(), pre.x.cols());
    let min_leaf = opts.min_leaf.max(1) as f64;
    let mtry = opts.mtry.map(|m| m.clamp(1, p));

    let mut root = Open {
        tree_idx: 0,
        w: 0.0,
        s: 0.0,
        ss: 0.0,
        splittable: false,
    };
    let mut node_of = vec![CLOSED; n];
    for i in 0..n {
        if weights[i] > 0 {
            let w = weights[i] as f64;
            root.w += w;
            root.s += w * y[i];
            root.ss += w * y[i] * y[i];
            node_of[i] = 0;
        }
    }
    let mut nodes = vec![Node {
        feature: 0,
        threshold: 0.0,
        left: 0,
        right: 0,
        value: if root.w > 0.0 { root.s / root.w } else { 0.0 },
    }];
    let mut open = vec![root];

    for _level in 0..opts.depth {
        for o in open.iter_mut() {
            let sse = o.ss - o.s * o.s / o.w;
            o.splittable = o.w >= 2.0 * min_leaf && sse > 1e-12 * o.ss.max(f64::MIN_POSITIVE);
        }
        if !open.iter().any(|o| o.splittable) {
            break;
        }
        let k = open.len();
        // Feature mask per open node.
        let mask: Option<Vec<bool>> = mtry.filter(|&m| m < p).map(|m| {
            let rng = rng
                .as_deref_mut()
                .expect("feature subsampling needs a generator");
            let mut mask = vec![false; k * p];
            for (a, o) in open.iter().enumerate() {
                if o.splittable {
                    for j in sample(rng, p, m) {
                        mask[a * p + j] = true;
                    }
                }
            }
            mask
        });
        let mut best = vec![
            Best {
                gain: 0.0,
                feature: usize::MAX,
                threshold: 0.0,
            };
            k
        ];
        let mut scan = vec![
            Scan {
                wl: 0.0,
                sl: 0.0,
                last: 0.0,
                seen: false,
            };
            k
        ];
        for j in 0..p {
            if let Some(m) = &mask {
                if !(0..k).any(|a| m[a * p + j]) {
                    continue;
                }
            }
            scan.iter_mut().for_each(|s| {
                s.wl = 0.0;
                s.sl = 0.0;
                s.seen = false;
            });
            for (&i, &v) in pre.order[j].iter().zip(&pre.values[j]) {
                let a = node_of[i as usize];
                if a == CLOSED {
                    continue;
                }
                let a = a as usize;
                let o = &open[a];
                if !o.splittable || mask.as_ref().is_some_and(|m| !m[a * p + j]) {
                    continue;
                }
                let sc = &mut scan[a];
                if sc.seen && v > sc.last {
                    let wr = o.w - sc.wl;
                    if sc.wl >= min_leaf && wr >= min_leaf {
                        let sr = o.s - sc.sl;
                        let gain = sc.sl * sc.sl / sc.wl + sr * sr / wr - o.s * o.s / o.w;
                        if gain > best[a].gain {
                            let mid = 0.5 * (sc.last + v);
                            best[a] = Best {
                                gain,
                                feature: j,
                                threshold: if mid < v { mid } else { sc.last },
                            };
                        }
                    }
                }
                let w = weights[i as usize] as f64;
                sc.wl += w;
                sc.sl += w * y[i as usize];
                sc.last = v;
                sc.seen = true;
            }
        }

        // Materialize splits and route rows to the next level.
        let mut child_of = vec![(CLOSED, CLOSED); k];
        let mut next: Vec<Open> = Vec::new();
        for a in 0..k {
            let o = open[a];
            let b = best[a];
            if !o.splittable || b.feature == usize::MAX || b.gain <= 1e-10 * o.ss {
                continue;
            }
            let l = nodes.len();
            for _ in 0..2 {
                nodes.push(Node {
                    feature: 0,
                    threshold: 0.0,
                    left: 0,
                    right: 0,
                    value: 0.0,
                });
                next.push(Open {
                    tree_idx: nodes.len() - 1,
                    w: 0.0,
                    s: 0.0,
                    ss: 0.0,
                    splittable: false,
                });
            }
            let parent = &mut nodes[o.tree_idx];
            parent.feature = b.feature;
            parent.threshold = b.threshold;
            parent.left = l as u32;
            parent.right = l as u32 + 1;
            child_of[a] = (next.len() as u32 - 2, next.len() as u32 - 1);
        }
        if next.is_empty() {
            break;
        }
        for i in 0..n {
            let a = node_of[i];
            if a == CLOSED {
                continue;
            }
            let (cl, cr) = child_of[a as usize];
            if cl == CLOSED {
                node_of[i] = CLOSED;
                continue;
            }
            let parent = &nodes[open[a as usize].tree_idx];
            let c = if pre.x.get(i, parent.feature) <= parent.threshold {
                cl
            } else {
                cr
            };
            node_of[i] = c;
            let w = weights[i] as f64;
            let o = &mut next[c as usize];
            o.w += w;
            o.s += w * y[i];
            o.ss += w * y[i] * y[i];
        }
        for o in &next {
            nodes[o.tree_idx].value = o.s / o.w;
        }
        open = next;
    }
    Tree { nodes }
}

/// Single CART tree on all features.
pub fn fit_tree(ts: &TrainingSet, depth: usize, min_leaf: usize) -> Result<Tree> {
    if depth == 0 {
        return Err(Error::InvalidArgument(
            "tree depth must be at least 1".into(),
        ));
    }
    ts.validate()?;
    let pre = Presorted::new(&ts.x);
    let weights = vec![1u32; ts.n()];
    Ok(grow::<rand_chacha::ChaCha8Rng>(
        &pre,
        &ts.y,
        &weights,
        GrowOptions {
            depth,
            min_leaf,
            mtry: None,
        },
        None,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ts(rows: Vec<Vec<f64>>, y: Vec<f64>) -> TrainingSet {
        TrainingSet::unkeyed(DenseMatrix::from_rows(&rows).unwrap(), y).unwrap()
    }

    fn random(n: usize, p: usize, seed: u64) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..p)
                    .map(|_| (rng.random_range(0..8) as f64) / 2.0)
                    .collect()
            })
            .collect();
        let y = rows
            .iter()
            .map(|r| r[0] * r[0] - r[1] + rng.random_range(-0.5..0.5))
            .collect();
        ts(rows, y)
    }

    /// Exhaustive best single split: every feature, every midpoint.
    fn brute_force_stump(t: &TrainingSet, min_leaf: usize) -> Option<(usize, f64, f64)> {
        let n = t.n();
        let sse = |idx: &[usize]| {
            let m = idx.iter().map(|&i| t.y[i]).sum::<f64>() / idx.len() as f64;
            idx.iter().map(|&i| (t.y[i] - m).powi(2)).sum::<f64>()
        };
        let all: Vec<usize> = (0..n).collect();
        let base = sse(&all);
        let mut best: Option<(usize, f64, f64)> = None;
        for j in 0..t.p() {
            let mut vals: Vec<f64> = t.x.column(j);
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            for w in vals.windows(2) {
                let thr = 0.5 * (w[0] + w[1]);
                let (l, r): (Vec<usize>, Vec<usize>) =
                    all.iter().partition(|&&i| t.x.get(i, j) <= thr);
                if l.len() < min_leaf || r.len() < min_leaf {
                    continue;
                }
                let gain = base - sse(&l) - sse(&r);
                if best.is_none_or(|b| gain > b.2 + 1e-9) {
                    best = Some((j, thr, gain));
                }
            }
        }
        best
    }

    #[test]
    fn two_point_example_splits_at_midpoint() {
        let t = fit_tree(&ts(vec![vec![0.0], vec![1.0]], vec![0.0, 10.0]), 1, 1).unwrap();
        assert_eq!(t.nodes[0].threshold, 0.5);
        assert_eq!(t.predict_row(&[0.0]), 0.0);
        assert_eq!(t.predict_row(&[1.0]), 10.0);
    }

    #[test]
    fn constant_target_is_single_leaf() {
        let mut t = random(30, 3, 1);
        t.y = vec![2.5; 30];
        let tree = fit_tree(&t, 4, 1).unwrap();
        assert_eq!(tree.nodes.len(), 1);
        assert_eq!(tree.predict_row(&[0.0, 0.0, 0.0]), 2.5);
    }

    #[test]
    fn depth_zero_rejected_and_small_sample_is_leaf() {
        let t = random(9, 2, 2);
        assert!(fit_tree(&t, 0, 1).is_err());
        assert_eq!(fit_tree(&t, 3, 5).unwrap().nodes.len(), 1);
    }

    #[test]
    fn stump_matches_brute_force() {
        for seed in 0..20 {
            let t = random(40, 3, seed);
            let tree = fit_tree(&t, 1, 3).unwrap();
            let (j, thr, _) = brute_force_stump(&t, 3).unwrap();
            assert_eq!(tree.nodes[0].feature, j, "seed {seed}");
            assert_eq!(tree.nodes[0].threshold, thr, "seed {seed}");
        }
    }

    #[test]
    fn ties_prefer_lowest_feature() {
        // Two identical columns: the split must use column 0.
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, i as f64]).collect();
        let y = (0..10).map(|i| if i < 5 { 0.0 } else { 1.0 }).collect();
        let tree = fit_tree(&ts(rows, y), 1, 1).unwrap();
        assert_eq!(tree.nodes[0].feature, 0);
        assert_eq!(tree.nodes[0].threshold, 4.5);
    }

    #[test]
    fn respects_depth_and_min_leaf() {
        let t = random(200, 4, 3);
        let tree = fit_tree(&t, 3, 10).unwrap();
        assert!(tree.depth() <= 3);
        for leaf in 0..tree.nodes.len() {
            if tree.nodes[leaf].left == 0 {
                let count = (0..t.n())
                    .filter(|&i| {
                        let mut k = 0;
                        while tree.nodes[k].left != 0 {
                            let nd = &tree.nodes[k];
                            k = if t.x.get(i, nd.feature) <= nd.threshold {
                                nd.left
                            } else {
                                nd.right
                            } as usize;
                        }
                        k == leaf
                    })
                    .count();
                assert!(count >= 10);
            }
        }
    }

    #[test]
    fn weights_equal_row_duplication() {
        let t = random(60, 3, 4);
        let pre = Presorted::new(&t.x);
        let opts = GrowOptions {
            depth: 4,
            min_leaf: 2,
            mtry: None,
        };
        let doubled = grow::<ChaCha8Rng>(&pre, &t.y, &vec![2; 60], opts, None);
        let twice = t.concat(&t).unwrap();
        let dup = fit_tree(&twice, 4, 2).unwrap();
        for i in 0..60 {
            assert!((doubled.predict_row(t.x.row(i)) - dup.predict_row(t.x.row(i))).abs() < 1e-12);
        }
        let mut w = vec![1u32; 60];
        w[..30].iter_mut().for_each(|v| *v = 0);
        let half = grow::<ChaCha8Rng>(&pre, &t.y, &w, opts, None);
        let sub = ts(
            (30..60).map(|i| t.x.row(i).to_vec()).collect(),
            t.y[30..].to_vec(),
        );
        let direct = fit_tree(&sub, 4, 2).unwrap();
        for i in 0..60 {
            assert!((half.predict_row(t.x.row(i)) - direct.predict_row(t.x.row(i))).abs() < 1e-12);
        }
    }

    #[test]
    fn leaves_are_training_means_within_range() {
        let t = random(100, 3, 5);
        let tree = fit_tree(&t, 6, 1).unwrap();
        let (lo, hi) =
            t.y.iter()
                .fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
        for i in 0..t.n() {
            let p = tree.predict_row(t.x.row(i));
            assert!(p >= lo && p <= hi);
        }
    }
}
