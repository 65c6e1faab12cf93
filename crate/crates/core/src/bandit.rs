//! Two-arm Bayesian linear contextual bandit.
//!
//! Each arm `k` models the reward as `r = x·w_k + e`, `e ~ N(0, s²)` with a
//! Normal-Inverse-Gamma prior over `(w_k, s²)`:
//!
//! ```text
//!   s²  ~ InvGamma(a, b)
//!   w|s² ~ N(mean, s² · precision⁻¹)
//! ```
//!
//! Updates are conjugate. Assignment is Thompson sampling: draw `(s², w)`
//! from each arm's posterior, score the context, act greedily (ties go to
//! control). [`arm_probability`] and [`sensitivity`] give the analysis view:
//! the probability of assigning treatment and its Jacobian with respect to
//! the context, using a normal approximation with plug-in noise variance
//! `b / (a - 1)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BanditError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("non-finite value in contexts or rewards")]
    NonFiniteInput,
    #[error("precision matrix of the {0:?} arm is not symmetric positive-definite")]
    CholeskyFailure(Arm),
    #[error("analytic arm probability needs shape > 1, got {0}")]
    ShapeTooSmall(f64),
    #[error("sensitivity needs at least 2 participants, got {0}")]
    InsufficientSample(usize),
    #[error("invalid posterior: {0}")]
    InvalidPosterior(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Treat,
    Control,
}

impl Arm {
    pub const ALL: [Arm; 2] = [Arm::Treat, Arm::Control];
}

/// Per-arm prior: mean 0, precision `precision_scale · I`, shape, rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub precision_scale: f64,
    pub shape: f64,
    pub rate: f64,
}

impl Default for Prior {
    fn default() -> Self {
        Self { precision_scale: 1.0, shape: 2.0, rate: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "PosteriorWire", try_from = "PosteriorWire")]
pub struct ArmPosterior {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
    pub shape: f64,
    pub rate: f64,
    pub n_obs: u64,
}

#[derive(Serialize, Deserialize)]
struct PosteriorWire {
    mean: Vec<f64>,
    precision: Vec<Vec<f64>>,
    shape: f64,
    rate: f64,
    n_obs: u64,
}

impl From<ArmPosterior> for PosteriorWire {
    fn from(p: ArmPosterior) -> Self {
        let d = p.mean.len();
        Self {
            mean: p.mean.iter().copied().collect(),
            precision: (0..d).map(|i| (0..d).map(|j| p.precision[(i, j)]).collect()).collect(),
            shape: p.shape,
            rate: p.rate,
            n_obs: p.n_obs,
        }
    }
}

impl TryFrom<PosteriorWire> for ArmPosterior {
    type Error = BanditError;

    fn try_from(w: PosteriorWire) -> Result<Self, Self::Error> {
        let d = w.mean.len();
        if w.precision.len() != d || w.precision.iter().any(|r| r.len() != d) {
            return Err(BanditError::InvalidPosterior("precision must be d x d".into()));
        }
        let posterior = ArmPosterior {
            mean: DVector::from_vec(w.mean),
            precision: DMatrix::from_fn(d, d, |i, j| w.precision[i][j]),
            shape: w.shape,
            rate: w.rate,
            n_obs: w.n_obs,
        };
        posterior.validate()?;
        Ok(posterior)
    }
}

impl ArmPosterior {
    pub fn prior(dimension: usize, prior: &Prior) -> Self {
        Self {
            mean: DVector::zeros(dimension),
            precision: DMatrix::identity(dimension, dimension) * prior.precision_scale,
            shape: prior.shape,
            rate: prior.rate,
            n_obs: 0,
        }
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<(), BanditError> {
        let d = self.dimension();
        if self.precision.nrows() != d || self.precision.ncols() != d {
            return Err(BanditError::InvalidPosterior("precision shape".into()));
        }
        if !(self.shape > 0.0 && self.rate > 0.0 && self.shape.is_finite() && self.rate.is_finite()) {
            return Err(BanditError::InvalidPosterior(format!("shape {} rate {}", self.shape, self.rate)));
        }
        let asym = (&self.precision - self.precision.transpose()).amax();
        if !(asym < 1e-10) {
            return Err(BanditError::InvalidPosterior(format!("precision asymmetry {asym:e}")));
        }
        if self.mean.iter().any(|v| !v.is_finite()) {
            return Err(BanditError::InvalidPosterior("non-finite mean".into()));
        }
        Cholesky::new(self.precision.clone())
            .map(|_| ())
            .ok_or_else(|| BanditError::InvalidPosterior("precision not positive-definite".into()))
    }

    /// Conjugate update with a batch of `(context, reward)` rows.
    ///
    /// ```text
    ///   precision' = precision + XᵀX
    ///   precision'·mean' = precision·mean + Xᵀy
    ///   a' = a + n/2
    ///   b' = b + ½(|y − X·mean'|² + (mean' − mean)ᵀ·precision·(mean' − mean))
    /// ```
    ///
    /// The rate uses the completed-square form, which equals
    /// `b + ½(yᵀy + meanᵀ·precision·mean − mean'ᵀ·precision'·mean')` but is a
    /// sum of non-negative terms.
    pub fn update(&self, contexts: &[Vec<f64>], rewards: &[f64]) -> Result<ArmPosterior, BanditError> {
        let d = self.dimension();
        if contexts.len() != rewards.len() {
            return Err(BanditError::DimensionMismatch { expected: contexts.len(), actual: rewards.len() });
        }
        if let Some(row) = contexts.iter().find(|r| r.len() != d) {
            return Err(BanditError::DimensionMismatch { expected: d, actual: row.len() });
        }
        if contexts.iter().flatten().chain(rewards).any(|v| !v.is_finite()) {
            return Err(BanditError::NonFiniteInput);
        }
        if contexts.is_empty() {
            return Ok(self.clone());
        }
        let n = contexts.len();
        let x = DMatrix::from_fn(n, d, |i, j| contexts[i][j]);
        let y = DVector::from_column_slice(rewards);

        let mut precision = &self.precision + x.transpose() * &x;
        // XᵀX is symmetric in exact arithmetic; remove rounding asymmetry.
        precision = (&precision + precision.transpose()) * 0.5;
        let rhs = &self.precision * &self.mean + x.transpose() * &y;
        let chol = Cholesky::new(precision.clone()).ok_or(BanditError::CholeskyFailure(Arm::Treat))?;
        let mean = chol.solve(&rhs);

        let resid = &y - &x * &mean;
        let shift = &mean - &self.mean;
        let quad = (shift.transpose() * &self.precision * &shift)[(0, 0)];
        let rate = self.rate + 0.5 * (resid.norm_squared() + quad.max(0.0));

        Ok(ArmPosterior {
            mean,
            precision,
            shape: self.shape + n as f64 / 2.0,
            rate,
            n_obs: self.n_obs + n as u64,
        })
    }

    /// Plug-in noise variance `b / (a − 1)`.
    pub fn noise_variance(&self) -> Result<f64, BanditError> {
        if self.shape <= 1.0 {
            return Err(BanditError::ShapeTooSmall(self.shape));
        }
        Ok(self.rate / (self.shape - 1.0))
    }
}

/// Standalone form of [`ArmPosterior::update`].
pub fn posterior_update(posterior: &ArmPosterior, contexts: &[Vec<f64>], rewards: &[f64]) -> Result<ArmPosterior, BanditError> {
    posterior.update(contexts, rewards)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditState {
    pub treat: ArmPosterior,
    pub control: ArmPosterior,
    pub prior: Prior,
    pub seed: u64,
}

impl BanditState {
    pub fn new(dimension: usize, prior: Prior, seed: u64) -> Self {
        Self {
            treat: ArmPosterior::prior(dimension, &prior),
            control: ArmPosterior::prior(dimension, &prior),
            prior,
            seed,
        }
    }

    pub fn dimension(&self) -> usize {
        self.treat.dimension()
    }

    pub fn arm(&self, arm: Arm) -> &ArmPosterior {
        match arm {
            Arm::Treat => &self.treat,
            Arm::Control => &self.control,
        }
    }

    pub fn arm_mut(&mut self, arm: Arm) -> &mut ArmPosterior {
        match arm {
            Arm::Treat => &mut self.treat,
            Arm::Control => &mut self.control,
        }
    }

    pub fn validate(&self) -> Result<(), BanditError> {
        if self.treat.dimension() != self.control.dimension() {
            return Err(BanditError::DimensionMismatch {
                expected: self.treat.dimension(),
                actual: self.control.dimension(),
            });
        }
        self.treat.validate()?;
        self.control.validate()
    }

    /// Factorizes both arms once so that many assignments can share it.
    pub fn snapshot(&self) -> Result<Snapshot, BanditError> {
        self.validate()?;
        Ok(Snapshot {
            treat: FrozenArm::new(&self.treat, Arm::Treat)?,
            control: FrozenArm::new(&self.control, Arm::Control)?,
        })
    }
}

/// Read-only posterior with its precision factorized.
#[derive(Debug, Clone)]
pub struct FrozenArm {
    pub mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    pub shape: f64,
    pub rate: f64,
}

impl FrozenArm {
    pub fn new(posterior: &ArmPosterior, arm: Arm) -> Result<Self, BanditError> {
        let chol = Cholesky::new(posterior.precision.clone()).ok_or(BanditError::CholeskyFailure(arm))?;
        Ok(Self { mean: posterior.mean.clone(), chol, shape: posterior.shape, rate: posterior.rate })
    }

    /// `xᵀ·precision⁻¹·x`.
    pub fn quadratic_form(&self, x: &DVector<f64>) -> f64 {
        let l_inv_x = self
            .chol
            .l_dirty()
            .solve_lower_triangular(x)
            .expect("cholesky factor has a positive diagonal");
        l_inv_x.norm_squared()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn noise_variance(&self) -> Result<f64, BanditError> {
        if self.shape <= 1.0 {
            return Err(BanditError::ShapeTooSmall(self.shape));
        }
        Ok(self.rate / (self.shape - 1.0))
    }

    /// One Thompson draw of the predicted reward at `x`.
    pub fn sample_score<R: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> f64 {
        let gamma = Gamma::new(self.shape, 1.0).expect("validated shape > 0");
        let precision_draw: f64 = gamma.sample(rng);
        let variance = self.rate / precision_draw;
        let d = self.mean.len();
        let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        // precision = L·Lᵀ, so Lᵀ·u = z gives u ~ N(0, precision⁻¹).
        let u = self
            .chol
            .l_dirty()
            .tr_solve_lower_triangular(&z)
            .expect("cholesky factor has a positive diagonal");
        let weights = &self.mean + u * variance.sqrt();
        x.dot(&weights)
    }
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub treat: FrozenArm,
    pub control: FrozenArm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub arm: Arm,
    pub treat_score: f64,
    pub control_score: f64,
}

impl Snapshot {
    pub fn dimension(&self) -> usize {
        self.treat.mean.len()
    }

    fn check(&self, context: &[f64]) -> Result<DVector<f64>, BanditError> {
        if context.len() != self.dimension() {
            return Err(BanditError::DimensionMismatch { expected: self.dimension(), actual: context.len() });
        }
        if context.iter().any(|v| !v.is_finite()) {
            return Err(BanditError::NonFiniteInput);
        }
        Ok(DVector::from_column_slice(context))
    }

    /// Thompson sampling: draws from the treat arm first, then control.
    pub fn assign<R: Rng + ?Sized>(&self, context: &[f64], rng: &mut R) -> Result<Assignment, BanditError> {
        let x = self.check(context)?;
        let treat_score = self.treat.sample_score(&x, rng);
        let control_score = self.control.sample_score(&x, rng);
        let arm = if treat_score > control_score { Arm::Treat } else { Arm::Control };
        Ok(Assignment { arm, treat_score, control_score })
    }

    /// Mean difference `x·(mean_t − mean_c)` and its approximate standard
    /// deviation `s(x)`.
    fn gap_and_scale(&self, x: &DVector<f64>) -> Result<(f64, f64), BanditError> {
        let vt = self.treat.noise_variance()?;
        let vc = self.control.noise_variance()?;
        let gap = x.dot(&(&self.treat.mean - &self.control.mean));
        let s2 = vt * self.treat.quadratic_form(x) + vc * self.control.quadratic_form(x);
        Ok((gap, s2.sqrt()))
    }

    pub fn probability(&self, context: &[f64], method: ProbabilityMethod, rng: &mut impl Rng) -> Result<f64, BanditError> {
        match method {
            ProbabilityMethod::Analytic => self.analytic_probability(context),
            ProbabilityMethod::MonteCarlo(n) => {
                self.check(context)?;
                let mut wins = 0usize;
                for _ in 0..n {
                    if self.assign(context, rng)?.arm == Arm::Treat {
                        wins += 1;
                    }
                }
                Ok(wins as f64 / n.max(1) as f64)
            }
        }
    }

    /// `P(treat) ≈ Φ(x·(mean_t − mean_c) / s(x))` with
    /// `s² = Σ_arms b/(a−1) · xᵀ·precision⁻¹·x`.
    pub fn analytic_probability(&self, context: &[f64]) -> Result<f64, BanditError> {
        let x = self.check(context)?;
        let (gap, scale) = self.gap_and_scale(&x)?;
        if scale <= 0.0 {
            return Ok(match gap.partial_cmp(&0.0) {
                Some(std::cmp::Ordering::Greater) => 1.0,
                Some(std::cmp::Ordering::Less) => 0.0,
                _ => 0.5,
            });
        }
        Ok(normal_cdf(gap / scale))
    }

    /// Gradient of [`Snapshot::analytic_probability`] with respect to the
    /// context, differentiating both the mean gap and `s(x)`:
    ///
    /// ```text
    ///   z = x·δ / s,   s² = xᵀ M x,   M = Σ_arms b/(a−1)·precision⁻¹
    ///   ∂P/∂x = φ(z) · (δ / s − (x·δ) / s³ · M x)
    /// ```
    pub fn probability_jacobian(&self, context: &[f64]) -> Result<Vec<f64>, BanditError> {
        let mixing = self.mixing_matrix()?;
        let x = self.check(context)?;
        Ok(jacobian_with(&mixing, &(&self.treat.mean - &self.control.mean), &x))
    }

    fn mixing_matrix(&self) -> Result<DMatrix<f64>, BanditError> {
        Ok(self.treat.covariance() * self.treat.noise_variance()? + self.control.covariance() * self.control.noise_variance()?)
    }
}

fn jacobian_with(mixing: &DMatrix<f64>, delta: &DVector<f64>, x: &DVector<f64>) -> Vec<f64> {
    let mx = mixing * x;
    let s2 = x.dot(&mx);
    if s2 <= 0.0 {
        return vec![0.0; x.len()];
    }
    let s = s2.sqrt();
    let gap = x.dot(delta);
    let z = gap / s;
    let density = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let grad = delta / s - mx * (gap / (s2 * s));
    (grad * density).iter().copied().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbabilityMethod {
    Analytic,
    MonteCarlo(usize),
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Thompson-sampling assignment against the current state.
pub fn thompson_assign<R: Rng + ?Sized>(state: &BanditState, context: &[f64], rng: &mut R) -> Result<Assignment, BanditError> {
    state.snapshot()?.assign(context, rng)
}

/// Probability that Thompson sampling picks treatment for `context`.
pub fn arm_probability<R: Rng>(
    state: &BanditState,
    context: &[f64],
    method: ProbabilityMethod,
    rng: &mut R,
) -> Result<f64, BanditError> {
    state.snapshot()?.probability(context, method, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSensitivity {
    pub name: String,
    /// Column in the context vector.
    pub column: usize,
    pub raw_mean: f64,
    pub raw_std: f64,
    /// Half the sample standard deviation of the per-participant derivative.
    pub threshold: f64,
    pub soft_thresholded_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub participants: usize,
    pub features: Vec<FeatureSensitivity>,
}

impl SensitivityReport {
    /// Feature with the largest soft-thresholded magnitude.
    pub fn dominant_feature(&self) -> Option<&FeatureSensitivity> {
        self.features
            .iter()
            .max_by(|a, b| a.soft_thresholded_mean.abs().total_cmp(&b.soft_thresholded_mean.abs()))
    }
}

pub fn soft_threshold(value: f64, threshold: f64) -> f64 {
    value.signum() * (value.abs() - threshold).max(0.0)
}

/// Averaged, soft-thresholded Jacobian of `P(treat | x)` across participants.
///
/// `names` labels the context columns; column 0 is the intercept and is not
/// reported (it is constant across participants).
pub fn sensitivity(state: &BanditState, contexts: &[Vec<f64>], names: &[String]) -> Result<SensitivityReport, BanditError> {
    if contexts.len() < 2 {
        return Err(BanditError::InsufficientSample(contexts.len()));
    }
    let snapshot = state.snapshot()?;
    let mixing = snapshot.mixing_matrix()?;
    let delta = &snapshot.treat.mean - &snapshot.control.mean;
    let mut jacobians = Vec::with_capacity(contexts.len());
    for c in contexts {
        let x = snapshot.check(c)?;
        jacobians.push(jacobian_with(&mixing, &delta, &x));
    }
    let d = snapshot.dimension();
    let n = jacobians.len() as f64;
    let features = (1..d)
        .map(|j| {
            let column: Vec<f64> = jacobians.iter().map(|jac| jac[j]).collect();
            let raw_mean = column.iter().sum::<f64>() / n;
            let raw_std = crate::util::sample_variance(&column).sqrt();
            let threshold = 0.5 * raw_std;
            let soft = column.iter().map(|&v| soft_threshold(v, threshold)).sum::<f64>() / n;
            FeatureSensitivity {
                name: names.get(j).cloned().unwrap_or_else(|| format!("x{j}")),
                column: j,
                raw_mean,
                raw_std,
                threshold,
                soft_thresholded_mean: soft,
            }
        })
        .collect();
    Ok(SensitivityReport { participants: contexts.len(), features })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn empty_batch_leaves_posterior_unchanged() {
        let prior = ArmPosterior::prior(3, &Prior::default());
        assert_eq!(prior.update(&[], &[]).unwrap(), prior);
    }

    #[test]
    fn single_observation_matches_hand_computation() {
        let prior = ArmPosterior::prior(1, &Prior::default());
        let post = prior.update(&[vec![1.0]], &[1.0]).unwrap();
        assert!((post.mean[0] - 0.5).abs() < 1e-15);
        assert!((post.precision[(0, 0)] - 2.0).abs() < 1e-15);
        assert_eq!(post.shape, 2.5);
        assert!((post.rate - 1.25).abs() < 1e-15);
        assert_eq!(post.n_obs, 1);
    }

    #[test]
    fn sequential_equals_batch() {
        let prior = ArmPosterior::prior(2, &Prior::default());
        let xs = vec![vec![1.0, 0.3], vec![1.0, -1.2]];
        let ys = vec![2.0, -0.5];
        let batch = prior.update(&xs, &ys).unwrap();
        let seq = prior.update(&xs[..1], &ys[..1]).unwrap().update(&xs[1..], &ys[1..]).unwrap();
        assert!((&batch.mean - &seq.mean).amax() < 1e-10);
        assert!((&batch.precision - &seq.precision).amax() < 1e-10);
        assert!((batch.rate - seq.rate).abs() < 1e-10);
        assert_eq!(batch.shape, seq.shape);
    }

    #[test]
    fn update_rejects_bad_input() {
        let prior = ArmPosterior::prior(2, &Prior::default());
        assert!(matches!(prior.update(&[vec![1.0]], &[1.0]), Err(BanditError::DimensionMismatch { .. })));
        assert_eq!(prior.update(&[vec![1.0, f64::NAN]], &[1.0]), Err(BanditError::NonFiniteInput));
        assert_eq!(prior.update(&[vec![1.0, 0.0]], &[f64::INFINITY]), Err(BanditError::NonFiniteInput));
    }

    fn concentrated(mean: f64) -> ArmPosterior {
        // Tight posterior around weight `mean` on the intercept.
        ArmPosterior {
            mean: DVector::from_vec(vec![mean]),
            precision: DMatrix::from_element(1, 1, 1e12),
            shape: 1e6,
            rate: 1e6,
            n_obs: 0,
        }
    }

    #[test]
    fn dominant_treat_always_chosen() {
        let state = BanditState { treat: concentrated(10.0), control: concentrated(0.0), prior: Prior::default(), seed: 0 };
        let snap = state.snapshot().unwrap();
        let mut r = rng(1);
        let treated = (0..10_000).filter(|_| snap.assign(&[1.0], &mut r).unwrap().arm == Arm::Treat).count();
        assert_eq!(treated, 10_000);
        let p = snap.analytic_probability(&[1.0]).unwrap();
        assert!((p - 1.0).abs() < 1e-6);
    }

    #[test]
    fn identical_posteriors_split_evenly() {
        let state = BanditState::new(3, Prior::default(), 0);
        let snap = state.snapshot().unwrap();
        let ctx = [1.0, 0.4, -0.7];
        let mut r = rng(7);
        let treated = (0..10_000).filter(|_| snap.assign(&ctx, &mut r).unwrap().arm == Arm::Treat).count();
        let frac = treated as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&frac), "{frac}");
        assert_eq!(snap.analytic_probability(&ctx).unwrap(), 0.5);
    }

    #[test]
    fn fixed_seed_reproduces_assignments() {
        let state = BanditState::new(2, Prior::default(), 0);
        let snap = state.snapshot().unwrap();
        let a: Vec<_> = (0..50).map(|_| 0).scan(rng(3), |r, _| Some(snap.assign(&[1.0, 0.5], r).unwrap())).collect();
        let b: Vec<_> = (0..50).map(|_| 0).scan(rng(3), |r, _| Some(snap.assign(&[1.0, 0.5], r).unwrap())).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn analytic_probability_needs_shape_above_one() {
        let mut state = BanditState::new(1, Prior::default(), 0);
        state.treat.shape = 0.9;
        let snap = state.snapshot().unwrap();
        assert_eq!(snap.analytic_probability(&[1.0]), Err(BanditError::ShapeTooSmall(0.9)));
    }

    #[test]
    fn non_spd_precision_is_rejected() {
        let mut state = BanditState::new(2, Prior::default(), 0);
        state.control.precision = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(state.snapshot().is_err());
        assert!(thompson_assign(&state, &[1.0, 0.0], &mut rng(0)).is_err());
    }

    #[test]
    fn symmetric_feature_has_zero_sensitivity() {
        // Same coefficient on feature 1 in both arms, covariance diagonal.
        let mut state = BanditState::new(3, Prior::default(), 0);
        state.treat.mean = DVector::from_vec(vec![1.0, 0.7, 0.2]);
        state.control.mean = DVector::from_vec(vec![0.5, 0.7, -0.3]);
        let contexts = vec![vec![1.0, 0.0, 0.3], vec![1.0, 0.0, -1.0], vec![1.0, 0.0, 0.9]];
        let report = sensitivity(&state, &contexts, &[]).unwrap();
        assert_eq!(report.features[0].raw_mean, 0.0);
        assert_eq!(report.features[0].soft_thresholded_mean, 0.0);
    }

    #[test]
    fn single_shared_context_reports_raw_jacobian() {
        let mut state = BanditState::new(2, Prior::default(), 0);
        state.treat.mean = DVector::from_vec(vec![0.3, 0.8]);
        let ctx = vec![1.0, 0.5];
        let report = sensitivity(&state, &[ctx.clone(), ctx.clone(), ctx.clone()], &[]).unwrap();
        let jac = state.snapshot().unwrap().probability_jacobian(&ctx).unwrap();
        assert_eq!(report.features[0].threshold, 0.0);
        assert!((report.features[0].soft_thresholded_mean - jac[1]).abs() < 1e-15);
    }

    #[test]
    fn sensitivity_needs_two_participants() {
        let state = BanditState::new(2, Prior::default(), 0);
        assert_eq!(sensitivity(&state, &[vec![1.0, 0.0]], &[]), Err(BanditError::InsufficientSample(1)));
    }

    #[test]
    fn posterior_json_round_trip() {
        let state = BanditState::new(2, Prior::default(), 9);
        let updated = state.treat.update(&[vec![1.0, 2.0]], &[3.0]).unwrap();
        let json = serde_json::to_string(&updated).unwrap();
        let back: ArmPosterior = serde_json::from_str(&json).unwrap();
        assert_eq!(back, updated);
        let bad = r#"{"mean":[0.0],"precision":[[-1.0]],"shape":2.0,"rate":1.0,"n_obs":0}"#;
        assert!(serde_json::from_str::<ArmPosterior>(bad).is_err());
    }
}
