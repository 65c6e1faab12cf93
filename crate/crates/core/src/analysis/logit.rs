//! Logistic regression by iteratively reweighted least squares.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::AnalysisError;

const MAX_ITERATIONS: usize = 100;
const SCORE_TOLERANCE: f64 = 1e-8;
/// Coefficients beyond this magnitude mean the likelihood has no finite maximum.
const DIVERGENCE_BOUND: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub significant: bool,
}

pub(crate) fn coefficient(name: &str, estimate: f64, std_error: f64, alpha: f64) -> Coefficient {
    let normal = Normal::standard();
    let z = if std_error > 0.0 { estimate / std_error } else { 0.0 };
    let critical = normal.inverse_cdf(1.0 - alpha / 2.0);
    let p_value = (2.0 * normal.cdf(-z.abs())).clamp(0.0, 1.0);
    Coefficient {
        name: name.to_string(),
        estimate,
        std_error,
        z,
        p_value,
        ci_low: estimate - critical * std_error,
        ci_high: estimate + critical * std_error,
        significant: p_value < alpha,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitFit {
    pub coefficients: Vec<Coefficient>,
    pub iterations: usize,
    pub log_likelihood: f64,
    /// Max-abs score `Xᵀ(y − p)` at the returned coefficients.
    pub max_abs_score: f64,
    pub n: usize,
}

impl LogitFit {
    pub fn get(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn log_likelihood(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    eta.iter()
        .zip(y.iter())
        .map(|(e, yi)| {
            // log(1 + exp(e)) computed stably.
            let softplus = if *e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            yi * e - softplus
        })
        .sum()
}

/// Score vector `Xᵀ(y − σ(Xβ))`.
pub fn logit_score(rows: &[Vec<f64>], outcome: &[bool], beta: &[f64]) -> Vec<f64> {
    let mut score = vec![0.0; beta.len()];
    for (row, &y) in rows.iter().zip(outcome) {
        let eta: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
        let r = f64::from(u8::from(y)) - sigmoid(eta);
        for (s, v) in score.iter_mut().zip(row) {
            *s += r * v;
        }
    }
    score
}

/// Fits `P(y = 1) = σ(x·β)`. `rows` must include any intercept column.
pub fn fit_logit(rows: &[Vec<f64>], outcome: &[bool], names: &[String], alpha: f64) -> Result<LogitFit, AnalysisError> {
    let n = rows.len();
    let p = names.len();
    if n != outcome.len() || rows.iter().any(|r| r.len() != p) {
        return Err(AnalysisError::ShapeMismatch);
    }
    if !outcome.iter().any(|y| *y) || outcome.iter().all(|y| *y) {
        return Err(AnalysisError::MissingOutcomeClass);
    }
    let x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
    let y = DVector::from_iterator(n, outcome.iter().map(|v| f64::from(u8::from(*v))));
    if x.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::ShapeMismatch);
    }

    let mut beta = DVector::zeros(p);
    let mut ll = log_likelihood(&x, &y, &beta);
    for iteration in 1..=MAX_ITERATIONS {
        let prob = (&x * &beta).map(sigmoid);
        let score = x.transpose() * (&y - &prob);
        let weights = prob.map(|q| q * (1.0 - q));
        let information = x.transpose() * DMatrix::from_fn(n, p, |i, j| weights[i] * x[(i, j)]);
        let Some(chol) = information.clone().cholesky() else {
            return if beta.amax() > 5.0 {
                Err(AnalysisError::SeparationDetected)
            } else {
                Err(AnalysisError::RankDeficientDesign)
            };
        };
        if score.amax() < SCORE_TOLERANCE {
            if (&y - &prob).amax() < 1e-6 {
                return Err(AnalysisError::SeparationDetected);
            }
            let covariance = chol.inverse();
            let coefficients = names
                .iter()
                .enumerate()
                .map(|(j, name)| coefficient(name, beta[j], covariance[(j, j)].max(0.0).sqrt(), alpha))
                .collect();
            return Ok(LogitFit { coefficients, iterations: iteration - 1, log_likelihood: ll, max_abs_score: score.amax(), n });
        }
        let step = chol.solve(&score);
        // Step halving keeps the likelihood monotone.
        let mut scale = 1.0;
        loop {
            let candidate = &beta + &step * scale;
            let candidate_ll = log_likelihood(&x, &y, &candidate);
            if candidate_ll >= ll - 1e-12 || scale < 1e-6 {
                beta = candidate;
                ll = candidate_ll;
                break;
            }
            scale *= 0.5;
        }
        if beta.amax() > DIVERGENCE_BOUND {
            return Err(AnalysisError::SeparationDetected);
        }
    }
    if beta.amax() > 5.0 {
        Err(AnalysisError::SeparationDetected)
    } else {
        Err(AnalysisError::NonConvergence { iterations: MAX_ITERATIONS })
    }
}
