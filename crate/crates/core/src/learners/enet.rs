//! Elastic net by cyclic coordinate descent on the covariance form.
//!
//! Objective: `(1/n) sum (y - b0 - x'theta)^2 + lambda * sum(alpha |theta_j| + (1 - alpha) theta_j^2)`
//! with an unpenalized intercept. The data enter only through the centered
//! Gram matrix and cross-products, so one [`EnetGram`] serves a whole
//! penalty grid.

use super::{LinearModel, TrainingSet};
use crate::error::{Error, Result};

pub const TOLERANCE: f64 = 1e-7;
pub const MAX_SWEEPS: usize = 10_000;

/// Sufficient statistics of a training set for the elastic net.
#[derive(Clone, Debug)]
pub struct EnetGram {
    p: usize,
    x_mean: Vec<f64>,
    y_mean: f64,
    /// `(1/n) Xc'Xc`, row-major.
    gram: Vec<f64>,
    /// `(1/n) Xc'yc`.
    xty: Vec<f64>,
}

impl EnetGram {
    pub fn new(ts: &TrainingSet) -> Result<Self> {
        ts.validate()?;
        let (n, p) = (ts.n(), ts.p());
        let nf = n as f64;
        let mut x_mean = vec![0.0; p];
        for i in 0..n {
            for (m, v) in x_mean.iter_mut().zip(ts.x.row(i)) {
                *m += v;
            }
        }
        x_mean.iter_mut().for_each(|m| *m /= nf);
        let y_mean = ts.y.iter().sum::<f64>() / nf;
        let mut gram = vec![0.0; p * p];
        let mut xty = vec![0.0; p];
        let mut c = vec![0.0; p];
        for i in 0..n {
            for ((cj, v), m) in c.iter_mut().zip(ts.x.row(i)).zip(&x_mean) {
                *cj = v - m;
            }
            let yc = ts.y[i] - y_mean;
            for j in 0..p {
                let cj = c[j];
                xty[j] += cj * yc;
                let row = &mut gram[j * p..j * p + p];
                for k in j..p {
                    row[k] += cj * c[k];
                }
            }
        }
        for j in 0..p {
            xty[j] /= nf;
            for k in j..p {
                let v = gram[j * p + k] / nf;
                gram[j * p + k] = v;
                gram[k * p + j] = v;
            }
        }
        Ok(EnetGram {
            p,
            x_mean,
            y_mean,
            gram,
            xty,
        })
    }

    /// Solves for one `(lambda, alpha)` pair, optionally warm-started.
    pub fn solve(&self, lambda: f64, alpha: f64, warm: Option<&[f64]>) -> Result<LinearModel> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be >= 0, got {lambda}"
            )));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha must lie in [0, 1], got {alpha}"
            )));
        }
        let p = self.p;
        let mut theta = match warm {
            Some(w) if w.len() == p => w.to_vec(),
            _ => vec![0.0; p],
        };
        // g = G theta, maintained incrementally.
        let mut g = vec![0.0; p];
        for j in 0..p {
            if theta[j] != 0.0 {
                for (gk, gjk) in g.iter_mut().zip(&self.gram[j * p..j * p + p]) {
                    *gk += gjk * theta[j];
                }
            }
        }
        let l1 = lambda * alpha / 2.0;
        let l2 = lambda * (1.0 - alpha);
        for _ in 0..MAX_SWEEPS {
            let mut max_change = 0.0f64;
            for j in 0..p {
                let zj = self.gram[j * p + j];
                let old = theta[j];
                let rho = self.xty[j] - g[j] + zj * old;
                let denom = zj + l2;
                let new = if denom > 0.0 {
                    soft_threshold(rho, l1) / denom
                } else {
                    0.0
                };
                let delta = new - old;
                if delta != 0.0 {
                    theta[j] = new;
                    for (gk, gjk) in g.iter_mut().zip(&self.gram[j * p..j * p + p]) {
                        *gk += gjk * delta;
                    }
                    max_change = max_change.max(delta.abs());
                }
            }
            if max_change < TOLERANCE {
                break;
            }
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("elastic-net coefficients".into()));
        }
        let intercept = self.y_mean
            - self
                .x_mean
                .iter()
                .zip(&theta)
                .map(|(m, t)| m * t)
                .sum::<f64>();
        Ok(LinearModel {
            intercept,
            coef: theta,
            components: 0,
        })
    }
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

pub fn fit_elastic_net(ts: &TrainingSet, lambda: f64, alpha: f64) -> Result<LinearModel> {
    EnetGram::new(ts)?.solve(lambda, alpha, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::DenseMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problem(n: usize, p: usize, seed: u64) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..p).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let y = rows
            .iter()
            .map(|r| 1.0 + 0.7 * r[0] - 0.4 * r[p - 1] + rng.random_range(-0.3..0.3))
            .collect();
        TrainingSet::unkeyed(DenseMatrix::from_rows(&rows).unwrap(), y).unwrap()
    }

    fn residuals(ts: &TrainingSet, m: &LinearModel) -> Vec<f64> {
        (0..ts.n())
            .map(|i| ts.y[i] - m.predict_row(ts.x.row(i)))
            .collect()
    }

    #[test]
    fn single_column_soft_threshold_example() {
        // x standardized (mean 0, (1/n) sum x^2 = 1) and (1/n) sum xy = 1.
        let x = [1.0, -1.0, 1.0, -1.0];
        let y = [1.0, -1.0, 1.0, -1.0];
        let rows: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
        let ts = TrainingSet::unkeyed(DenseMatrix::from_rows(&rows).unwrap(), y.to_vec()).unwrap();
        let m = fit_elastic_net(&ts, 0.6, 1.0).unwrap();
        assert!((m.coef[0] - 0.7).abs() < 1e-12);
        let m = fit_elastic_net(&ts, 0.6, 0.5).unwrap();
        assert!((m.coef[0] - 0.85 / 1.3).abs() < 1e-12);
    }

    #[test]
    fn zero_penalty_is_ols() {
        let ts = problem(80, 3, 1);
        let m = fit_elastic_net(&ts, 0.0, 0.5).unwrap();
        // OLS normal equations: X'(y - Xb) = 0 and residuals sum to zero.
        let r = residuals(&ts, &m);
        assert!(r.iter().sum::<f64>().abs() < 1e-8);
        for j in 0..3 {
            let g: f64 = (0..ts.n()).map(|i| ts.x.get(i, j) * r[i]).sum::<f64>() / ts.n() as f64;
            assert!(g.abs() < 1e-6, "{g}");
        }
    }

    #[test]
    fn full_shrinkage_zeroes_coefficients() {
        let ts = problem(50, 4, 2);
        let m = fit_elastic_net(&ts, 1e3, 1.0).unwrap();
        assert!(m.coef.iter().all(|c| *c == 0.0));
        let ybar = ts.y.iter().sum::<f64>() / ts.n() as f64;
        assert!((m.intercept - ybar).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_arguments_and_non_finite_data() {
        let ts = problem(10, 2, 3);
        assert!(fit_elastic_net(&ts, -1.0, 0.5).is_err());
        assert!(fit_elastic_net(&ts, 1.0, 1.5).is_err());
        let mut bad = ts.clone();
        bad.y[0] = f64::NAN;
        assert!(matches!(
            fit_elastic_net(&bad, 0.1, 0.5),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn duplicated_rows_give_same_fit() {
        let ts = problem(40, 3, 4);
        let twice = ts.concat(&ts).unwrap();
        let a = fit_elastic_net(&ts, 0.05, 0.5).unwrap();
        let b = fit_elastic_net(&twice, 0.05, 0.5).unwrap();
        for (x, y) in a.coef.iter().zip(&b.coef) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn kkt_conditions_hold(seed in 0u64..1000, li in 0usize..20, ai in 0usize..5) {
            let ts = problem(60, 5, seed);
            let lambda = crate::learners::grid::log_grid(1e-3, 1e3, 20)[li] / 100.0;
            let alpha = ai as f64 / 4.0;
            let m = fit_elastic_net(&ts, lambda, alpha).unwrap();
            let r = residuals(&ts, &m);
            let n = ts.n() as f64;
            for j in 0..5 {
                let g = 2.0 / n * (0..ts.n()).map(|i| ts.x.get(i, j) * r[i]).sum::<f64>()
                    - 2.0 * lambda * (1.0 - alpha) * m.coef[j];
                if m.coef[j] != 0.0 {
                    prop_assert!((g.abs() - lambda * alpha).abs() < 1e-5, "active {j}: {g}");
                } else {
                    prop_assert!(g.abs() <= lambda * alpha + 1e-5, "inactive {j}: {g}");
                }
            }
        }
    }
}
