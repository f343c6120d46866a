//! Dimension-reduction regressions: principal components (PCR) and
//! partial least squares via SIMPLS. Both collapse to an intercept plus a
//! coefficient vector on the original predictors.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::TrainingSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub coef: Vec<f64>,
    /// Latent components actually used (PCR/PLS); 0 for penalized fits.
    pub components: usize,
}

impl LinearModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.intercept + row.iter().zip(&self.coef).map(|(x, b)| x * b).sum::<f64>()
    }
}

/// Least squares of `y` on `[1, design]`, minimum-norm when rank deficient.
fn ols_with_intercept(design: &DMatrix<f64>, y: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = design.nrows();
    let k = design.ncols();
    let mut a = DMatrix::<f64>::zeros(n, k + 1);
    a.column_mut(0).fill(1.0);
    a.view_mut((0, 1), (n, k)).copy_from(design);
    let b = DVector::from_column_slice(y);
    let svd = a.svd(true, true);
    let tol = svd.singular_values.max() * (n.max(k + 1) as f64) * f64::EPSILON;
    let sol = svd
        .solve(&b, tol)
        .map_err(|e| Error::NoConvergence(format!("least squares: {e}")))?;
    Ok((sol[0], sol.iter().skip(1).copied().collect()))
}

/// Principal components regression: the weight matrix holds the top-`k`
/// right singular vectors of the (uncentered) predictor matrix, each signed
/// so its largest-magnitude loading is positive; the target is then
/// regressed with an intercept on the component scores.
pub fn fit_pcr(ts: &TrainingSet, k: usize) -> Result<LinearModel> {
    if k == 0 {
        return Err(Error::InvalidArgument(
            "PCR needs at least one component".into(),
        ));
    }
    let (n, p) = (ts.n(), ts.p());
    let x = ts.x.to_nalgebra();
    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let smax = order.first().map_or(0.0, |&i| svd.singular_values[i]);
    let tol = smax * (n.max(p) as f64) * f64::EPSILON;
    let rank = order
        .iter()
        .filter(|&&i| svd.singular_values[i] > tol)
        .count();
    let mut k_used = k.min(n).min(p);
    if k_used > rank {
        warn!("PCR: {k} components requested but predictor rank is {rank}; using {rank}");
        k_used = rank;
    }
    if k_used == 0 {
        let intercept = ts.y.iter().sum::<f64>() / n as f64;
        return Ok(LinearModel {
            intercept,
            coef: vec![0.0; p],
            components: 0,
        });
    }
    let mut w = DMatrix::<f64>::zeros(p, k_used);
    for (c, &i) in order.iter().take(k_used).enumerate() {
        let mut col: Vec<f64> = v_t.row(i).iter().copied().collect();
        let lead = col
            .iter()
            .enumerate()
            .fold((0usize, 0.0f64), |best, (j, v)| {
                if v.abs() > best.1.abs() {
                    (j, *v)
                } else {
                    best
                }
            })
            .0;
        if col[lead] < 0.0 {
            col.iter_mut().for_each(|v| *v = -*v);
        }
        w.column_mut(c).copy_from_slice(&col);
    }
    let scores = &x * &w;
    let (intercept, theta) = ols_with_intercept(&scores, &ts.y)?;
    let coef = &w * DVector::from_vec(theta);
    Ok(LinearModel {
        intercept,
        coef: coef.iter().copied().collect(),
        components: k_used,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// SIMPLS partial least squares on centered data. Each weight vector is
/// the dominant direction of the deflated cross-covariance `X'y`, with
/// deflation keeping successive scores orthogonal.
pub fn fit_pls(ts: &TrainingSet, k: usize) -> Result<LinearModel> {
    if k == 0 {
        return Err(Error::InvalidArgument(
            "PLS needs at least one component".into(),
        ));
    }
    let (n, p) = (ts.n(), ts.p());
    let xm: Vec<f64> = (0..p)
        .map(|j| (0..n).map(|i| ts.x.get(i, j)).sum::<f64>() / n as f64)
        .collect();
    let ym = ts.y.iter().sum::<f64>() / n as f64;
    let x0: Vec<Vec<f64>> = (0..n)
        .map(|i| ts.x.row(i).iter().zip(&xm).map(|(a, m)| a - m).collect())
        .collect();
    let y0: Vec<f64> = ts.y.iter().map(|v| v - ym).collect();

    let xt_vec = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; p];
        for (row, &vi) in x0.iter().zip(v) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * vi;
            }
        }
        out
    };
    let mut s = xt_vec(&y0);
    let x_scale = x0.iter().map(|r| dot(r, r)).sum::<f64>().sqrt();
    let s_tol = 1e-12 * x_scale * norm(&y0).max(f64::MIN_POSITIVE);

    let mut coef = vec![0.0; p];
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut used = 0;
    for a in 0..k.min(n).min(p) {
        if norm(&s) <= s_tol {
            if a == 0 {
                warn!("PLS: target orthogonal to predictors; predicting the training mean");
            }
            break;
        }
        let mut r = s.clone();
        let mut t: Vec<f64> = x0.iter().map(|row| dot(row, &r)).collect();
        let nt = norm(&t);
        if nt <= f64::MIN_POSITIVE {
            break;
        }
        t.iter_mut().for_each(|v| *v /= nt);
        r.iter_mut().for_each(|v| *v /= nt);
        let pl = xt_vec(&t);
        let q = dot(&y0, &t);
        let mut v = pl;
        for _ in 0..2 {
            for b in &basis {
                let c = dot(b, &v);
                v.iter_mut().zip(b).for_each(|(vi, bi)| *vi -= c * bi);
            }
        }
        let nv = norm(&v);
        if nv <= f64::MIN_POSITIVE {
            break;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        let c = dot(&v, &s);
        s.iter_mut().zip(&v).for_each(|(si, vi)| *si -= c * vi);
        basis.push(v);
        coef.iter_mut().zip(&r).for_each(|(b, ri)| *b += ri * q);
        used = a + 1;
    }
    let intercept = ym - dot(&xm, &coef);
    Ok(LinearModel {
        intercept,
        coef,
        components: used,
    })
}
