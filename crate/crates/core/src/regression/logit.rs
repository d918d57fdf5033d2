//! Ridge-penalised logistic regression by IRLS (Newton) with a monotone
//! backtracking line search, plus one-vs-rest multinomial fitting.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const LOGIT_RIDGE: f64 = 1e-8;
pub const LOGIT_GRAD_TOL: f64 = 1e-8;
pub const LOGIT_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct LogitFit {
    pub coefficients: DVector<f64>,
    pub iterations: usize,
    /// Penalised objective at the start of each iteration and at the end.
    pub objective_trace: Vec<f64>,
}

/// `log(1 + e^eta)` without overflow.
#[inline]
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Fitted probability for a feature row.
pub fn predict_logit(coefficients: &DVector<f64>, row: &[f64]) -> f64 {
    sigmoid(row.iter().zip(coefficients.iter()).map(|(a, b)| a * b).sum())
}

fn gradient(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, ridge: f64) -> DVector<f64> {
    let eta = x * beta;
    let resid = DVector::from_iterator(y.len(), eta.iter().zip(y).map(|(&e, y)| sigmoid(e) - y));
    x.transpose() * resid / y.len() as f64 + beta * ridge
}

fn objective(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, ridge: f64) -> f64 {
    let eta = x * beta;
    let n = y.len() as f64;
    let loss: f64 = eta.iter().zip(y).map(|(&e, &yi)| softplus(e) - yi * e).sum::<f64>() / n;
    loss + 0.5 * ridge * beta.norm_squared()
}

/// Maximises the ridge-penalised Bernoulli log-likelihood.
///
/// The objective is the mean negative log-likelihood plus
/// `ridge / 2 * |beta|^2` (intercept included). Iteration stops once the
/// sup-norm of its gradient is below `1e-8`.
pub fn fit_logit(features: &DMatrix<f64>, labels: &[bool], ridge: f64) -> Result<LogitFit> {
    let (n, p) = features.shape();
    if n == 0 || p == 0 {
        return Err(Error::EmptyDesign);
    }
    if labels.len() != n {
        return Err(Error::InvalidInput("logit: label count differs from feature rows".into()));
    }
    let ones = labels.iter().filter(|&&l| l).count();
    if ones == 0 || ones == n {
        return Err(Error::SingleClass);
    }
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let nf = n as f64;
    let mut beta = DVector::zeros(p);
    let mut f = objective(features, &y, &beta, ridge);
    let mut trace = vec![f];
    for iter in 0..LOGIT_MAX_ITER {
        let prob: Vec<f64> = (features * &beta).iter().map(|&e| sigmoid(e)).collect();
        let grad = gradient(features, &y, &beta, ridge);
        if grad.amax() < LOGIT_GRAD_TOL {
            return Ok(LogitFit { coefficients: beta, iterations: iter, objective_trace: trace });
        }
        let mut xw = features.clone();
        for (r, p) in prob.iter().enumerate() {
            let w = (p * (1.0 - p)).sqrt();
            xw.row_mut(r).scale_mut(w);
        }
        let mut h = xw.transpose() * &xw / nf;
        for d in 0..p {
            h[(d, d)] += ridge;
        }
        let step = match h.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => {
                for d in 0..p {
                    h[(d, d)] += 1e-10;
                }
                h.lu().solve(&grad).ok_or(Error::NoConvergence { what: "logit Newton step".into(), iterations: iter })?
            }
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &beta - &step * t;
            if cand == beta {
                break;
            }
            let fc = objective(features, &y, &cand, ridge);
            if fc <= f {
                beta = cand;
                f = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        trace.push(f);
        if !accepted {
            // No descent possible at machine precision. Converged if the
            // gradient is small or the Newton decrement predicts a gain
            // below the rounding level of the objective.
            let decrement = grad.dot(&step);
            if grad.amax() < LOGIT_GRAD_TOL || 0.5 * decrement <= 8.0 * f64::EPSILON * f.abs().max(1.0) {
                return Ok(LogitFit { coefficients: beta, iterations: iter + 1, objective_trace: trace });
            }
            return Err(Error::NoConvergence { what: "logit line search".into(), iterations: iter + 1 });
        }
    }
    Err(Error::NoConvergence { what: "logit IRLS".into(), iterations: LOGIT_MAX_ITER })
}

/// One-vs-rest multinomial fit: one binary logit per class.
pub fn fit_multinomial_ovr(
    features: &DMatrix<f64>,
    labels: &[usize],
    classes: usize,
    ridge: f64,
) -> Result<Vec<DVector<f64>>> {
    (0..classes)
        .map(|c| {
            let bin: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            fit_logit(features, &bin, ridge).map(|f| f.coefficients)
        })
        .collect()
}

/// Class probabilities from one-vs-rest fits, renormalised to sum to one.
pub fn predict_multinomial(coefs: &[DVector<f64>], row: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = coefs.iter().map(|c| predict_logit(c, row)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}
