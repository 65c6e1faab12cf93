//! Exact t-SNE (no Barnes–Hut approximation); O(n²) per iteration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::AnalysisError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsneOptions {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub momentum_switch_iteration: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Accepted deviation of each point's perplexity from the target.
    pub perplexity_tolerance: f64,
    pub seed: u64,
}

impl Default for TsneOptions {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 4.0,
            exaggeration_iterations: 100,
            momentum_switch_iteration: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            perplexity_tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneResult {
    pub coordinates: Vec<[f64; 2]>,
    /// Perplexity actually targeted (capped below `(n − 1) / 3`).
    pub effective_perplexity: f64,
    pub achieved_perplexity: Vec<f64>,
    pub initial_kl: f64,
    pub final_kl: f64,
}

fn squared_distances(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b).powi(2)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Row `i` of the conditional affinities `p_{j|i}` for precision `beta`,
/// and its Shannon entropy in nats.
fn conditional_row(dist: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let n = out.len();
    let min = (0..n).filter(|&j| j != i).map(|j| dist[j]).fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    for j in 0..n {
        out[j] = if j == i { 0.0 } else { (-(dist[j] - min) * beta).exp() };
        total += out[j];
    }
    let mut entropy = 0.0;
    for j in 0..n {
        out[j] /= total;
        if out[j] > 0.0 {
            entropy -= out[j] * out[j].ln();
        }
    }
    entropy
}

/// Conditional affinities `p_{j|i}` (row-major) with each row's Gaussian
/// precision bisected so that `exp(entropy)` matches `perplexity`.
pub fn conditional_affinities(rows: &[Vec<f64>], perplexity: f64, tolerance: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len();
    let dist = squared_distances(rows);
    let mut p = vec![0.0; n * n];
    let mut achieved = vec![0.0; n];
    for i in 0..n {
        let row = &dist[i * n..(i + 1) * n];
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        let out = &mut p[i * n..(i + 1) * n];
        for _ in 0..200 {
            let perp = conditional_row(row, i, beta, out).exp();
            achieved[i] = perp;
            if (perp - perplexity).abs() < tolerance {
                break;
            }
            if perp > perplexity {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    (p, achieved)
}

/// KL(P‖Q) for the embedding `y`, with `P` the joint affinities.
fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let mut total = 0.0;
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
            let v = 1.0 / (1.0 + d);
            q[i * n + j] = v;
            q[j * n + i] = v;
            total += 2.0 * v;
        }
    }
    let mut kl = 0.0;
    for k in 0..n * n {
        if p[k] > 0.0 {
            kl += p[k] * (p[k] / (q[k] / total).max(1e-300)).ln();
        }
    }
    kl
}

fn jitter_duplicates(rows: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let scale = 1e-8 * (1.0 + rows.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())));
    let mut out: Vec<Vec<f64>> = rows.to_vec();
    let mut seen = std::collections::HashSet::new();
    for row in &mut out {
        let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
        if !seen.insert(key) {
            for v in row.iter_mut() {
                *v += scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    out
}

pub fn tsne_embed(rows: &[Vec<f64>], options: &TsneOptions) -> Result<TsneResult, AnalysisError> {
    let n = rows.len();
    if n < 5 {
        return Err(AnalysisError::TooFewPoints { needed: 5, got: n });
    }
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width || r.iter().any(|v| !v.is_finite())) {
        return Err(AnalysisError::ShapeMismatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let rows = jitter_duplicates(rows, &mut rng);
    let perplexity = options.perplexity.min((n - 1) as f64 / 3.0);
    let (conditional, achieved) = conditional_affinities(&rows, perplexity, options.perplexity_tolerance);

    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((conditional[i * n + j] + conditional[j * n + i]) / (2.0 * n as f64)).max(1e-300);
        }
        p[i * n + i] = 0.0;
    }

    let init = Normal::new(0.0, 1e-2).expect("valid");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut rng), init.sample(&mut rng)]).collect();
    let mut velocity = vec![[0.0f64; 2]; n];
    let initial_kl = kl_divergence(&p, &y);

    let mut num = vec![0.0; n * n];
    for iteration in 0..options.iterations {
        let exaggeration = if iteration < options.exaggeration_iterations { options.early_exaggeration } else { 1.0 };
        let momentum =
            if iteration < options.momentum_switch_iteration { options.initial_momentum } else { options.final_momentum };
        let mut total = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let d = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
                let v = 1.0 / (1.0 + d);
                num[i * n + j] = v;
                num[j * n + i] = v;
                total += 2.0 * v;
            }
        }
        for i in 0..n {
            let mut grad = [0.0f64; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let k = i * n + j;
                let coeff = 4.0 * (exaggeration * p[k] - num[k] / total) * num[k];
                grad[0] += coeff * (y[i][0] - y[j][0]);
                grad[1] += coeff * (y[i][1] - y[j][1]);
            }
            for c in 0..2 {
                velocity[i][c] = momentum * velocity[i][c] - options.learning_rate * grad[c];
            }
        }
        let mut centre = [0.0f64; 2];
        for (point, v) in y.iter_mut().zip(&velocity) {
            point[0] += v[0];
            point[1] += v[1];
            centre[0] += point[0] / n as f64;
            centre[1] += point[1] / n as f64;
        }
        for point in &mut y {
            point[0] -= centre[0];
            point[1] -= centre[1];
        }
    }
    let final_kl = kl_divergence(&p, &y);
    Ok(TsneResult { coordinates: y, effective_perplexity: perplexity, achieved_perplexity: achieved, initial_kl, final_kl })
}

/// Mean silhouette coefficient of a labelled point set (Euclidean).
pub fn silhouette_score(points: &[[f64; 2]], labels: &[usize]) -> f64 {
    let n = points.len();
    let clusters: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if clusters.len() < 2 {
        return 0.0;
    }
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums: std::collections::BTreeMap<usize, (f64, usize)> = std::collections::BTreeMap::new();
        for j in 0..n {
            if i != j {
                let e = sums.entry(labels[j]).or_insert((0.0, 0));
                e.0 += dist(&points[i], &points[j]);
                e.1 += 1;
            }
        }
        let own = sums.get(&labels[i]).copied().unwrap_or((0.0, 0));
        if own.1 == 0 {
            continue;
        }
        let a = own.0 / own.1 as f64;
        let b = sums
            .iter()
            .filter(|(l, _)| **l != labels[i])
            .map(|(_, (s, c))| s / *c as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(per: usize, dims: usize, gap: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            for _ in 0..per {
                rows.push((0..dims).map(|d| rng.sample::<f64, _>(StandardNormal) + if d == 0 { gap * c as f64 } else { 0.0 }).collect());
                labels.push(c);
            }
        }
        (rows, labels)
    }

    #[test]
    fn affinity_rows_are_distributions_with_target_perplexity() {
        let (rows, _) = blobs(40, 5, 3.0, 1);
        let (p, achieved) = conditional_affinities(&rows, 20.0, 1e-4);
        for i in 0..80 {
            let sum: f64 = p[i * 80..(i + 1) * 80].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!((achieved[i] - 20.0).abs() < 1e-3);
        }
    }

    #[test]
    fn too_few_points() {
        let rows = vec![vec![0.0]; 4];
        assert_eq!(tsne_embed(&rows, &TsneOptions::default()), Err(AnalysisError::TooFewPoints { needed: 5, got: 4 }));
    }

    #[test]
    fn separates_clusters_and_reduces_kl() {
        let (rows, labels) = blobs(30, 5, 10.0, 2);
        let options = TsneOptions { iterations: 300, perplexity: 10.0, ..TsneOptions::default() };
        let r = tsne_embed(&rows, &options).unwrap();
        assert!(r.final_kl < r.initial_kl);
        assert!(silhouette_score(&r.coordinates, &labels) > 0.0);
        assert_eq!(r, tsne_embed(&rows, &options).unwrap());
    }

    #[test]
    fn duplicate_rows_are_handled() {
        let rows = vec![vec![1.0, 1.0]; 8];
        let r = tsne_embed(&rows, &TsneOptions { iterations: 50, ..TsneOptions::default() }).unwrap();
        assert!(r.coordinates.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn silhouette_of_obvious_clusters() {
        let points = [[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.1, 0.0]];
        assert!(silhouette_score(&points, &[0, 0, 1, 1]) > 0.9);
    }
}
