//! Random-intercept linear mixed model fitted by restricted maximum likelihood.
//!
//! `y_ij = x_ij·β + u_i + e_ij`, `u_i ~ N(0, σ_u²)`, `e_ij ~ N(0, σ_e²)`.
//! With `λ = σ_u²/σ_e²` each group's covariance is `σ_e²·H_i`,
//! `H_i = I + λ·11ᵀ`, whose inverse and determinant are closed-form, so β
//! and σ_e² profile out and only a one-dimensional search over `λ` remains:
//!
//! ```text
//!   A(λ) = Σ X_iᵀ H_i⁻¹ X_i,   b(λ) = Σ X_iᵀ H_i⁻¹ y_i,   β(λ) = A⁻¹ b
//!   ℓ_R(λ) = −½ [ (N−p)·ln(rᵀH⁻¹r / (N−p)) + Σ ln(1 + λ n_i) + ln|A| ]
//! ```

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::logit::{coefficient, Coefficient};
use super::AnalysisError;

const GOLDEN_MAX_ITERATIONS: usize = 200;
const MAX_LOG10_RATIO: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalTable {
    pub names: Vec<String>,
    /// Group (user) of each row.
    pub groups: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmEstimate {
    pub coefficients: Vec<Coefficient>,
    pub random_intercept_variance: f64,
    pub residual_variance: f64,
    pub variance_ratio: f64,
    pub reml_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Max-abs GLS score `b − Aβ` at the returned optimum.
    pub max_abs_score: f64,
    pub n_groups: usize,
    pub n_observations: usize,
}

impl LmmEstimate {
    pub fn get(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

/// Per-group sufficient statistics.
struct GroupStats {
    n: f64,
    xtx: DMatrix<f64>,
    xt1: DVector<f64>,
    xty: DVector<f64>,
    sum_y: f64,
    yty: f64,
}

pub struct RemlProblem {
    groups: Vec<GroupStats>,
    n: usize,
    p: usize,
}

struct Profile {
    objective: f64,
    beta: DVector<f64>,
    a_inv: DMatrix<f64>,
    sigma2: f64,
    max_abs_score: f64,
}

impl RemlProblem {
    pub fn new(table: &LongitudinalTable) -> Result<Self, AnalysisError> {
        let p = table.names.len();
        let n = table.y.len();
        if table.rows.len() != n || table.groups.len() != n || table.rows.iter().any(|r| r.len() != p) {
            return Err(AnalysisError::ShapeMismatch);
        }
        if table.rows.iter().flatten().chain(&table.y).any(|v| !v.is_finite()) {
            return Err(AnalysisError::ShapeMismatch);
        }
        let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, g) in table.groups.iter().enumerate() {
            by_group.entry(g.as_str()).or_default().push(i);
        }
        if n <= p || by_group.is_empty() || (n as f64) < 2.0 * by_group.len() as f64 {
            return Err(AnalysisError::TooFewPoints { needed: (2 * by_group.len()).max(p + 1), got: n });
        }
        let mut groups = Vec::with_capacity(by_group.len());
        let mut xtx_total = DMatrix::zeros(p, p);
        for rows in by_group.values() {
            let x = DMatrix::from_fn(rows.len(), p, |i, j| table.rows[rows[i]][j]);
            let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| table.y[i]));
            let xtx = x.transpose() * &x;
            xtx_total += &xtx;
            groups.push(GroupStats {
                n: rows.len() as f64,
                xt1: x.row_sum().transpose(),
                xty: x.transpose() * &y,
                sum_y: y.sum(),
                yty: y.dot(&y),
                xtx,
            });
        }
        let scale = xtx_total.diagonal().map(|v| v.max(f64::MIN_POSITIVE).sqrt());
        let normalized = DMatrix::from_fn(p, p, |i, j| xtx_total[(i, j)] / (scale[i] * scale[j]));
        let eig = normalized.symmetric_eigen();
        if eig.eigenvalues.min() <= 1e-10 * eig.eigenvalues.max().max(1.0) {
            return Err(AnalysisError::RankDeficientDesign);
        }
        Ok(Self { groups, n, p })
    }

    fn profile(&self, ratio: f64) -> Option<Profile> {
        let mut a = DMatrix::zeros(self.p, self.p);
        let mut b = DVector::zeros(self.p);
        let mut yhy = 0.0;
        let mut log_det_h = 0.0;
        for g in &self.groups {
            let c = ratio / (1.0 + ratio * g.n);
            a += &g.xtx - &g.xt1 * g.xt1.transpose() * c;
            b += &g.xty - &g.xt1 * (c * g.sum_y);
            yhy += g.yty - c * g.sum_y * g.sum_y;
            log_det_h += (ratio * g.n).ln_1p();
        }
        let chol = a.clone().cholesky()?;
        let beta = chol.solve(&b);
        let rhr = (yhy - b.dot(&beta)).max(f64::MIN_POSITIVE);
        let dof = (self.n - self.p) as f64;
        let log_det_a: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let objective = -0.5 * (dof * (rhr / dof).ln() + log_det_h + log_det_a);
        let max_abs_score = (&b - &a * &beta).amax();
        Some(Profile { objective, beta, a_inv: chol.inverse(), sigma2: rhr / dof, max_abs_score })
    }

    /// Profiled REML log-likelihood (up to a constant) at variance ratio `λ ≥ 0`.
    pub fn objective(&self, ratio: f64) -> f64 {
        if !(ratio >= 0.0) {
            return f64::NEG_INFINITY;
        }
        self.profile(ratio).map_or(f64::NEG_INFINITY, |p| p.objective)
    }
}

/// Golden-section maximization of `f` on `[lo, hi]`.
fn golden_max<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> (f64, usize, bool) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    for iteration in 1..=GOLDEN_MAX_ITERATIONS {
        if (hi - lo).abs() < tol {
            return ((lo + hi) / 2.0, iteration, true);
        }
        if fc >= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    ((lo + hi) / 2.0, GOLDEN_MAX_ITERATIONS, false)
}

pub fn fit_lmm(table: &LongitudinalTable, alpha: f64) -> Result<LmmEstimate, AnalysisError> {
    let problem = RemlProblem::new(table)?;

    // Coarse grid in log10(λ), plus the boundary λ = 0.
    let grid: Vec<f64> = (0..=96).map(|k| 10f64.powf(-MAX_LOG10_RATIO + k as f64 * 0.125)).collect();
    let values: Vec<f64> = grid.iter().map(|&r| problem.objective(r)).collect();
    let (best, _) = values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc });
    if best == grid.len() - 1 {
        return Err(AnalysisError::NonConvergence { iterations: grid.len() });
    }
    let boundary = problem.objective(0.0);

    let (ratio, iterations, converged) = if best == 0 && boundary >= values[0] {
        let (r, it, ok) = golden_max(|r| problem.objective(r), 0.0, grid[1], 1e-12);
        if problem.objective(r) > boundary {
            (r, it, ok)
        } else {
            (0.0, it, ok)
        }
    } else {
        let lo = grid[best.saturating_sub(1)].log10();
        let hi = grid[best + 1].log10();
        let (l, it, ok) = golden_max(|l| problem.objective(10f64.powf(l)), lo, hi, 1e-10);
        (10f64.powf(l), it, ok)
    };
    if !converged {
        return Err(AnalysisError::NonConvergence { iterations });
    }
    let profile = problem.profile(ratio).ok_or(AnalysisError::RankDeficientDesign)?;
    let coefficients = table
        .names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let se = (profile.sigma2 * profile.a_inv[(j, j)]).max(0.0).sqrt();
            coefficient(name, profile.beta[j], se, alpha)
        })
        .collect();
    Ok(LmmEstimate {
        coefficients,
        random_intercept_variance: ratio * profile.sigma2,
        residual_variance: profile.sigma2,
        variance_ratio: ratio,
        reml_objective: profile.objective,
        iterations,
        converged,
        max_abs_score: profile.max_abs_score,
        n_groups: problem.groups.len(),
        n_observations: problem.n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn simulate(users: usize, weeks: usize, beta: [f64; 2], var_u: f64, var_e: f64, seed: u64) -> LongitudinalTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Normal::new(0.0, var_u.sqrt()).unwrap();
        let e = Normal::new(0.0, var_e.sqrt()).unwrap();
        let mut table = LongitudinalTable {
            names: vec!["intercept".into(), "x".into()],
            groups: vec![],
            rows: vec![],
            y: vec![],
        };
        for i in 0..users {
            let ui = u.sample(&mut rng);
            for _ in 0..weeks {
                let x = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
                table.groups.push(format!("g{i}"));
                table.rows.push(vec![1.0, x]);
                table.y.push(beta[0] + beta[1] * x + ui + e.sample(&mut rng));
            }
        }
        table
    }

    #[test]
    fn recovers_variance_components() {
        let table = simulate(300, 6, [2.0, 3.0], 4.0, 1.0, 3);
        let fit = fit_lmm(&table, 0.1).unwrap();
        assert!((fit.get("x").unwrap().estimate - 3.0).abs() < 0.1);
        assert!((fit.random_intercept_variance - 4.0).abs() < 1.0, "{}", fit.random_intercept_variance);
        assert!((fit.residual_variance - 1.0).abs() < 0.1);
        assert!(fit.max_abs_score < 1e-6);
    }

    #[test]
    fn optimum_beats_neighbours() {
        let table = simulate(100, 4, [0.0, 1.0], 1.0, 1.0, 5);
        let problem = RemlProblem::new(&table).unwrap();
        let fit = fit_lmm(&table, 0.1).unwrap();
        for factor in [0.5, 0.9, 0.99, 1.01, 1.1, 2.0] {
            assert!(fit.reml_objective >= problem.objective(fit.variance_ratio * factor));
        }
    }

    #[test]
    fn balanced_one_way_anova_closed_form() {
        // Balanced design: REML variance components equal the ANOVA
        // method-of-moments estimates when those are positive.
        let table = simulate(50, 4, [1.0, 0.0], 2.0, 1.0, 8);
        let mut t = table.clone();
        t.names.truncate(1);
        t.rows.iter_mut().for_each(|r| r.truncate(1));
        let fit = fit_lmm(&t, 0.1).unwrap();
        let (k, m) = (50.0, 4.0);
        let grand = t.y.iter().sum::<f64>() / (k * m);
        let means: Vec<f64> = t.y.chunks(4).map(|c| c.iter().sum::<f64>() / m).collect();
        let msb = m * means.iter().map(|g| (g - grand).powi(2)).sum::<f64>() / (k - 1.0);
        let msw = t
            .y
            .chunks(4)
            .zip(&means)
            .map(|(c, g)| c.iter().map(|v| (v - g).powi(2)).sum::<f64>())
            .sum::<f64>()
            / (k * (m - 1.0));
        assert!((fit.residual_variance - msw).abs() < 1e-6, "{} vs {}", fit.residual_variance, msw);
        assert!((fit.random_intercept_variance - (msb - msw) / m).abs() < 1e-6);
    }

    #[test]
    fn rank_deficient_design() {
        let mut table = simulate(10, 3, [0.0, 1.0], 1.0, 1.0, 1);
        table.names.push("dup".into());
        table.rows.iter_mut().for_each(|r| r.push(r[1] * 2.0));
        assert_eq!(fit_lmm(&table, 0.1), Err(AnalysisError::RankDeficientDesign));
    }
}
