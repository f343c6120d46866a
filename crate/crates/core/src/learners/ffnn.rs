//! Feed-forward networks: ReLU hidden layers with batch normalization and
//! dropout, trained by Adam on squared loss, averaged over seeds.

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DenseMatrix, HyperParams, TrainingSet};
use crate::error::{Error, Result};
use crate::par;

pub const LAYER_WIDTHS: [usize; 3] = [32, 16, 8];
const BN_MOMENTUM: f64 = 0.9;
const BN_EPS: f64 = 1e-5;
const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Which statistics batch normalization uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Statistics of the current batch (training).
    Batch,
    /// Running averages accumulated during training (prediction).
    Frozen,
}

/// One network. Parameters live in a single flat vector; hidden layer `l`
/// contributes its weight matrix (out x in, row-major), bias, BN scale and
/// BN shift, followed by the output weights and bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
    running_mean: Vec<Vec<f64>>,
    running_var: Vec<Vec<f64>>,
}

#[derive(Clone, Copy)]
struct LayerIdx {
    fan_in: usize,
    out: usize,
    w: usize,
    b: usize,
    gamma: usize,
    beta: usize,
}

struct LayerCache {
    input: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    act: Vec<f64>,
    /// Combined ReLU and dropout multiplier per element.
    gate: Vec<f64>,
}

impl Mlp {
    /// He-uniform initialization; output bias starts at `bias`.
    pub fn new<R: Rng + ?Sized>(p: usize, depth: usize, bias: f64, rng: &mut R) -> Result<Self> {
        if !(1..=LAYER_WIDTHS.len()).contains(&depth) {
            return Err(Error::InvalidArgument(format!(
                "network depth must be 1..=3, got {depth}"
            )));
        }
        let mut sizes = vec![p];
        sizes.extend_from_slice(&LAYER_WIDTHS[..depth]);
        let mut net = Mlp {
            running_mean: sizes[1..].iter().map(|&o| vec![0.0; o]).collect(),
            running_var: sizes[1..].iter().map(|&o| vec![1.0; o]).collect(),
            params: Vec::new(),
            sizes,
        };
        let total = net.n_params();
        net.params = vec![0.0; total];
        for l in 0..depth {
            let li = net.layer(l);
            let lim = (6.0 / li.fan_in as f64).sqrt();
            for v in &mut net.params[li.w..li.w + li.out * li.fan_in] {
                *v = rng.random_range(-lim..lim);
            }
            net.params[li.gamma..li.gamma + li.out].fill(1.0);
        }
        let (ow, ob) = net.output_idx();
        let last = *net.sizes.last().unwrap();
        let lim = (6.0 / last as f64).sqrt();
        for v in &mut net.params[ow..ow + last] {
            *v = rng.random_range(-lim..lim);
        }
        net.params[ob] = bias;
        Ok(net)
    }

    fn n_params(&self) -> usize {
        let hidden: usize = self.sizes.windows(2).map(|w| w[1] * w[0] + 3 * w[1]).sum();
        hidden + self.sizes.last().unwrap() + 1
    }

    fn layer(&self, l: usize) -> LayerIdx {
        let mut off = 0;
        for w in self.sizes.windows(2).take(l) {
            off += w[1] * w[0] + 3 * w[1];
        }
        let (fan_in, out) = (self.sizes[l], self.sizes[l + 1]);
        let w = off;
        let b = w + out * fan_in;
        LayerIdx {
            fan_in,
            out,
            w,
            b,
            gamma: b + out,
            beta: b + 2 * out,
        }
    }

    fn output_idx(&self) -> (usize, usize) {
        let ow = self.n_params() - self.sizes.last().unwrap() - 1;
        (ow, self.n_params() - 1)
    }

    pub fn depth(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Forward pass over `m` rows laid out contiguously in `x`. With a
    /// generator and positive `dropout`, hidden activations are dropped
    /// (inverted scaling).
    fn forward(
        &self,
        x: &[f64],
        m: usize,
        mode: BnMode,
        dropout: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Vec<f64>, Vec<LayerCache>, Vec<Vec<f64>>) {
        let mut input = x.to_vec();
        let mut caches = Vec::with_capacity(self.depth());
        let mut batch_stats = Vec::new();
        for l in 0..self.depth() {
            let li = self.layer(l);
            let (fi, out) = (li.fan_in, li.out);
            let w = &self.params[li.w..li.w + out * fi];
            let b = &self.params[li.b..li.b + out];
            let mut z = vec![0.0; m * out];
            for i in 0..m {
                let a = &input[i * fi..(i + 1) * fi];
                for o in 0..out {
                    let wr = &w[o * fi..(o + 1) * fi];
                    z[i * out + o] = b[o] + wr.iter().zip(a).map(|(p, q)| p * q).sum::<f64>();
                }
            }
            let (mean, var) = match mode {
                BnMode::Batch => {
                    let mut mean = vec![0.0; out];
                    let mut var = vec![0.0; out];
                    for i in 0..m {
                        for o in 0..out {
                            mean[o] += z[i * out + o];
                        }
                    }
                    mean.iter_mut().for_each(|v| *v /= m as f64);
                    for i in 0..m {
                        for o in 0..out {
                            let d = z[i * out + o] - mean[o];
                            var[o] += d * d;
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= m as f64);
                    (mean, var)
                }
                BnMode::Frozen => (self.running_mean[l].clone(), self.running_var[l].clone()),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let gamma = &self.params[li.gamma..li.gamma + out];
            let beta = &self.params[li.beta..li.beta + out];
            let keep = 1.0 - dropout;
            let mut xhat = vec![0.0; m * out];
            let mut act = vec![0.0; m * out];
            let mut gate = vec![0.0; m * out];
            for i in 0..m {
                for o in 0..out {
                    let k = i * out + o;
                    xhat[k] = (z[k] - mean[o]) * inv_std[o];
                    let u = gamma[o] * xhat[k] + beta[o];
                    let mut g = if u > 0.0 { 1.0 } else { 0.0 };
                    if dropout > 0.0 {
                        if let Some(r) = rng.as_deref_mut() {
                            g = if r.random::<f64>() < keep {
                                g / keep
                            } else {
                                0.0
                            };
                        }
                    }
                    gate[k] = g;
                    act[k] = u * g;
                }
            }
            if mode == BnMode::Batch {
                batch_stats.push(mean);
                batch_stats.push(var);
            }
            caches.push(LayerCache {
                input: std::mem::take(&mut input),
                xhat,
                inv_std,
                act: act.clone(),
                gate,
            });
            input = act;
        }
        let (ow, ob) = self.output_idx();
        let last = *self.sizes.last().unwrap();
        let wo = &self.params[ow..ow + last];
        let yhat = (0..m)
            .map(|i| {
                self.params[ob]
                    + wo.iter()
                        .zip(&input[i * last..(i + 1) * last])
                        .map(|(p, q)| p * q)
                        .sum::<f64>()
            })
            .collect();
        (yhat, caches, batch_stats)
    }

    /// Gradient of the mean squared loss given `dyhat = dL/dyhat`.
    fn backward(&self, caches: &[LayerCache], dyhat: &[f64], mode: BnMode) -> Vec<f64> {
        let m = dyhat.len();
        let mut grad = vec![0.0; self.params.len()];
        let (ow, ob) = self.output_idx();
        let last = *self.sizes.last().unwrap();
        let top = &caches[caches.len() - 1].act;
        let mut dact = vec![0.0; m * last];
        for i in 0..m {
            grad[ob] += dyhat[i];
            for o in 0..last {
                grad[ow + o] += dyhat[i] * top[i * last + o];
                dact[i * last + o] = dyhat[i] * self.params[ow + o];
            }
        }
        for l in (0..self.depth()).rev() {
            let li = self.layer(l);
            let (fi, out) = (li.fan_in, li.out);
            let c = &caches[l];
            let mut dxhat = vec![0.0; m * out];
            for k in 0..m * out {
                let du = dact[k] * c.gate[k];
                let o = k % out;
                grad[li.gamma + o] += du * c.xhat[k];
                grad[li.beta + o] += du;
                dxhat[k] = du * self.params[li.gamma + o];
            }
            let mut dz = vec![0.0; m * out];
            match mode {
                BnMode::Frozen => {
                    for k in 0..m * out {
                        dz[k] = dxhat[k] * c.inv_std[k % out];
                    }
                }
                BnMode::Batch => {
                    let mut sum = vec![0.0; out];
                    let mut sum_x = vec![0.0; out];
                    for k in 0..m * out {
                        sum[k % out] += dxhat[k];
                        sum_x[k % out] += dxhat[k] * c.xhat[k];
                    }
                    let mf = m as f64;
                    for k in 0..m * out {
                        let o = k % out;
                        dz[k] = c.inv_std[o] / mf * (mf * dxhat[k] - sum[o] - c.xhat[k] * sum_x[o]);
                    }
                }
            }
            let mut din = vec![0.0; m * fi];
            for i in 0..m {
                let a = &c.input[i * fi..(i + 1) * fi];
                for o in 0..out {
                    let d = dz[i * out + o];
                    if d == 0.0 {
                        continue;
                    }
                    grad[li.b + o] += d;
                    let wr = li.w + o * fi;
                    for q in 0..fi {
                        grad[wr + q] += d * a[q];
                        din[i * fi + q] += d * self.params[wr + q];
                    }
                }
            }
            dact = din;
        }
        grad
    }

    /// Mean squared loss on `(x, y)` and its gradient, without dropout.
    pub fn loss_and_grad(&self, x: &DenseMatrix, y: &[f64], mode: BnMode) -> (f64, Vec<f64>) {
        let m = x.rows();
        let (yhat, caches, _) = self.forward(x.data(), m, mode, 0.0, None);
        let loss = super::mse(&yhat, y);
        let dy: Vec<f64> = yhat
            .iter()
            .zip(y)
            .map(|(p, t)| 2.0 * (p - t) / m as f64)
            .collect();
        (loss, self.backward(&caches, &dy, mode))
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.forward(row, 1, BnMode::Frozen, 0.0, None).0[0]
    }

    pub fn predict(&self, x: &DenseMatrix) -> Vec<f64> {
        self.forward(x.data(), x.rows(), BnMode::Frozen, 0.0, None)
            .0
    }

    fn update_running(&mut self, stats: &[Vec<f64>]) {
        for l in 0..self.depth() {
            for (r, b) in self.running_mean[l].iter_mut().zip(&stats[2 * l]) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            for (r, b) in self.running_var[l].iter_mut().zip(&stats[2 * l + 1]) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }
}

#[derive(Clone, Debug)]
struct TrainPlan {
    learning_rate: f64,
    dropout: f64,
    depth: usize,
    max_epochs: usize,
    patience: usize,
    batch_size: usize,
}

struct Diverged;

/// Trains one network. Returns it with the number of epochs that produced
/// it: the best validation epoch under early stopping, otherwise the
/// fixed budget.
fn train_member(
    train: &TrainingSet,
    valid: Option<&TrainingSet>,
    plan: &TrainPlan,
    fixed_epochs: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<(Mlp, usize), Diverged> {
    let (n, p) = (train.n(), train.p());
    let ybar = train.y.iter().sum::<f64>() / n as f64;
    let mut net = Mlp::new(p, plan.depth, ybar, rng).expect("depth validated by caller");
    let np = net.params.len();
    let (mut m1, mut m2) = (vec![0.0; np], vec![0.0; np]);
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..n).collect();
    let epochs = fixed_epochs.unwrap_or(plan.max_epochs);
    let early = fixed_epochs.is_none() && valid.is_some();
    let mut best: Option<(f64, Mlp, usize)> = None;
    let mut since = 0usize;
    let mut batch_x = Vec::with_capacity(plan.batch_size * p);
    for epoch in 1..=epochs {
        order.shuffle(rng);
        for chunk in order.chunks(plan.batch_size.max(1)) {
            let m = chunk.len();
            batch_x.clear();
            for &i in chunk {
                batch_x.extend_from_slice(train.x.row(i));
            }
            let (yhat, caches, stats) =
                net.forward(&batch_x, m, BnMode::Batch, plan.dropout, Some(rng));
            let mut dy = Vec::with_capacity(m);
            for (k, &i) in chunk.iter().enumerate() {
                dy.push(2.0 * (yhat[k] - train.y[i]) / m as f64);
            }
            if dy.iter().any(|d| !d.is_finite()) {
                return Err(Diverged);
            }
            let grad = net.backward(&caches, &dy, BnMode::Batch);
            step += 1;
            let c1 = 1.0 - ADAM_B1.powi(step);
            let c2 = 1.0 - ADAM_B2.powi(step);
            for k in 0..np {
                m1[k] = ADAM_B1 * m1[k] + (1.0 - ADAM_B1) * grad[k];
                m2[k] = ADAM_B2 * m2[k] + (1.0 - ADAM_B2) * grad[k] * grad[k];
                net.params[k] -=
                    plan.learning_rate * (m1[k] / c1) / ((m2[k] / c2).sqrt() + ADAM_EPS);
            }
            net.update_running(&stats);
        }
        if net.params.iter().any(|v| !v.is_finite()) {
            return Err(Diverged);
        }
        if early {
            let v = valid.expect("checked");
            let e = super::mse(&net.predict(&v.x), &v.y);
            if !e.is_finite() {
                return Err(Diverged);
            }
            if best.as_ref().is_none_or(|b| e < b.0) {
                best = Some((e, net.clone(), epoch));
                since = 0;
            } else {
                since += 1;
                if since >= plan.patience {
                    break;
                }
            }
        }
    }
    match best {
        Some((_, net, epoch)) => Ok((net, epoch)),
        None => Ok((net, epochs)),
    }
}

/// Seed-averaged network ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkEnsemble {
    pub members: Vec<Mlp>,
    /// Epochs behind each seed slot; 0 marks a seed dropped after diverging.
    pub epochs: Vec<usize>,
}

impl NetworkEnsemble {
    pub fn epochs_trained(&self) -> &[usize] {
        &self.epochs
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.members.iter().map(|m| m.predict_row(row)).sum::<f64>() / self.members.len() as f64
    }
}

pub(crate) fn member_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Trains `seeds` networks from independent streams of `seed`. A seed whose
/// loss turns non-finite is retried once at half the learning rate and
/// dropped if it diverges again.
pub fn fit_ffnn(
    train: &TrainingSet,
    valid: Option<&TrainingSet>,
    hyper: &HyperParams,
    seed: u64,
) -> Result<NetworkEnsemble> {
    let HyperParams::Ffnn {
        learning_rate,
        dropout,
        depth,
        seeds,
        max_epochs,
        patience,
        batch_size,
        fixed_epochs,
    } = hyper
    else {
        return Err(Error::InvalidArgument(
            "network fit needs network hyperparameters".into(),
        ));
    };
    if !(1..=LAYER_WIDTHS.len()).contains(depth) {
        return Err(Error::InvalidArgument(format!(
            "network depth must be 1..=3, got {depth}"
        )));
    }
    if !(0.0..1.0).contains(dropout) || *seeds == 0 || *batch_size == 0 {
        return Err(Error::InvalidArgument(
            "invalid network hyperparameters".into(),
        ));
    }
    if let Some(f) = fixed_epochs {
        if f.len() != *seeds {
            return Err(Error::LengthMismatch(f.len(), *seeds));
        }
    }
    train.validate()?;
    let plan = TrainPlan {
        learning_rate: *learning_rate,
        dropout: *dropout,
        depth: *depth,
        max_epochs: *max_epochs,
        patience: *patience,
        batch_size: *batch_size,
    };
    let results = par::map_range(*seeds, |s| {
        let fixed = fixed_epochs.as_ref().map(|f| f[s]);
        if fixed == Some(0) {
            return None;
        }
        let mut plan = plan.clone();
        for attempt in 0..2 {
            let mut rng = member_rng(seed, s);
            match train_member(train, valid, &plan, fixed, &mut rng) {
                Ok(r) => return Some(r),
                Err(Diverged) if attempt == 0 => {
                    warn!("network seed {s} diverged; retrying at half the learning rate");
                    plan.learning_rate /= 2.0;
                }
                Err(Diverged) => warn!("network seed {s} diverged twice; dropped"),
            }
        }
        None
    });
    let epochs = results
        .iter()
        .map(|r| r.as_ref().map_or(0, |x| x.1))
        .collect();
    let members: Vec<Mlp> = results.into_iter().flatten().map(|r| r.0).collect();
    if members.is_empty() {
        return Err(Error::NoConvergence("every network seed diverged".into()));
    }
    Ok(NetworkEnsemble { members, epochs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(n: usize, p: usize, seed: u64, noise: f64) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..p).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        let y = rows
            .iter()
            .map(|r| {
                1.0 + r
                    .iter()
                    .enumerate()
                    .map(|(j, v)| v * (0.5 - 0.2 * j as f64))
                    .sum::<f64>()
                    + noise * rng.random_range(-1.0..1.0)
            })
            .collect();
        TrainingSet::unkeyed(DenseMatrix::from_rows(&rows).unwrap(), y).unwrap()
    }

    fn hyper(seeds: usize, epochs: usize) -> HyperParams {
        HyperParams::Ffnn {
            learning_rate: 0.01,
            dropout: 0.1,
            depth: 2,
            seeds,
            max_epochs: epochs,
            patience: 5,
            batch_size: 32,
            fixed_epochs: None,
        }
    }

    fn finite_difference_check(net: &Mlp, t: &TrainingSet, mode: BnMode) {
        let (_, grad) = net.loss_and_grad(&t.x, &t.y, mode);
        let h = 1e-6;
        for k in 0..net.params.len() {
            let mut up = net.clone();
            up.params[k] += h;
            let mut dn = net.clone();
            dn.params[k] -= h;
            let fd = (up.loss_and_grad(&t.x, &t.y, mode).0 - dn.loss_and_grad(&t.x, &t.y, mode).0)
                / (2.0 * h);
            let diff = (fd - grad[k]).abs();
            let scale = fd.abs().max(grad[k].abs());
            assert!(
                diff < 1e-8 || diff / scale < 1e-4,
                "param {k}: fd {fd} vs {}",
                grad[k]
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let t = data(5, 3, 1, 0.3);
        for depth in 1..=3 {
            let mut rng = ChaCha8Rng::seed_from_u64(depth as u64);
            let mut net = Mlp::new(3, depth, 0.5, &mut rng).unwrap();
            // Non-trivial BN parameters and running statistics.
            for v in net.params.iter_mut() {
                *v += 0.1 * rng.random_range(-1.0..1.0);
            }
            for l in 0..depth {
                net.running_mean[l]
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-0.5..0.5));
                net.running_var[l]
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(0.5..2.0));
            }
            finite_difference_check(&net, &t, BnMode::Frozen);
            finite_difference_check(&net, &t, BnMode::Batch);
        }
    }

    #[test]
    fn prediction_is_deterministic_without_dropout() {
        let t = data(200, 4, 2, 0.1);
        let ens = fit_ffnn(&t, None, &hyper(2, 5), 3).unwrap();
        let a: Vec<f64> = (0..10).map(|i| ens.predict_row(t.x.row(i))).collect();
        let b: Vec<f64> = (0..10).map(|i| ens.predict_row(t.x.row(i))).collect();
        assert_eq!(a, b);
        let again = fit_ffnn(&t, None, &hyper(2, 5), 3).unwrap();
        assert_eq!(again, ens);
    }

    #[test]
    fn ensemble_is_mean_of_members() {
        let t = data(150, 3, 4, 0.1);
        let ens = fit_ffnn(&t, None, &hyper(3, 4), 5).unwrap();
        for i in 0..20 {
            let row = t.x.row(i);
            let mean = ens.members.iter().map(|m| m.predict_row(row)).sum::<f64>() / 3.0;
            assert!((ens.predict_row(row) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn learns_linear_signal() {
        let t = data(600, 4, 6, 0.1);
        let v = data(200, 4, 7, 0.1);
        let ens = fit_ffnn(&t, Some(&v), &hyper(3, 60), 8).unwrap();
        let pred: Vec<f64> = (0..v.n()).map(|i| ens.predict_row(v.x.row(i))).collect();
        let ybar = v.y.iter().sum::<f64>() / v.n() as f64;
        let var = v.y.iter().map(|y| (y - ybar).powi(2)).sum::<f64>() / v.n() as f64;
        let e = crate::learners::mse(&pred, &v.y);
        assert!(e < 0.5 * var, "mse {e} vs variance {var}");
        assert!(ens.epochs_trained().iter().all(|&e| e >= 1));
    }

    #[test]
    fn fixed_epochs_refit_and_dropped_slots() {
        let t = data(100, 3, 9, 0.1);
        let mut h = hyper(3, 50);
        if let HyperParams::Ffnn { fixed_epochs, .. } = &mut h {
            *fixed_epochs = Some(vec![2, 0, 3]);
        }
        let ens = fit_ffnn(&t, None, &h, 1).unwrap();
        assert_eq!(ens.members.len(), 2);
        assert_eq!(ens.epochs_trained(), &[2, 0, 3]);
    }

    #[test]
    fn diverging_seeds_are_dropped() {
        let mut t = data(50, 2, 10, 0.1);
        t.y.iter_mut().for_each(|y| *y = 1e308);
        let mut h = hyper(2, 3);
        if let HyperParams::Ffnn { learning_rate, .. } = &mut h {
            *learning_rate = 1e6;
        }
        assert!(matches!(
            fit_ffnn(&t, None, &h, 1),
            Err(Error::NoConvergence(_))
        ));
    }

    #[test]
    fn rejects_bad_depth() {
        let t = data(20, 2, 11, 0.1);
        let mut h = hyper(1, 1);
        if let HyperParams::Ffnn { depth, .. } = &mut h {
            *depth = 4;
        }
        assert!(fit_ffnn(&t, None, &h, 0).is_err());
    }
}
