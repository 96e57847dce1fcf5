//! 2D projection of segment embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::par::Exec;

/// Seed-deterministic dimensionality reduction to the plane.
pub trait Projector: Send + Sync {
    fn project(&self, embeddings: &[Vec<f32>], seed: u64) -> Result<Vec<[f64; 2]>>;
}

/// Check a batch is non-empty, rectangular and finite; returns `d`.
pub fn validate_embeddings(embeddings: &[Vec<f32>]) -> Result<usize> {
    let first = embeddings.first().ok_or_else(|| invalid("no embeddings to project"))?;
    let d = first.len();
    if d == 0 {
        return Err(invalid("embeddings have zero dimensions"));
    }
    for (i, e) in embeddings.iter().enumerate() {
        if e.len() != d {
            return Err(invalid(format!("embedding {i} has {} dims, expected {d}", e.len())));
        }
        if e.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("embedding {i} has non-finite values")));
        }
    }
    Ok(d)
}

/// Project with the default projector.
pub fn project_embeddings(embeddings: &[Vec<f32>], seed: u64) -> Result<Vec<[f64; 2]>> {
    Tsne::default().project(embeddings, seed)
}

/// Exact t-SNE (O(n²) per iteration), adequate for per-selection projections
/// of a few thousand segments.
#[derive(Clone, Debug)]
pub struct Tsne {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub exec: Exec,
}

impl Default for Tsne {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 500,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 100,
            exec: Exec::default(),
        }
    }
}

impl Tsne {
    /// Row-conditional affinities with per-row bandwidth matched to the
    /// target perplexity by bisection on the precision.
    fn conditional_affinities(&self, dist: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
        let target = perplexity.ln();
        let rows = self.exec.map_range(n, |i| {
            let d = &dist[i * n..(i + 1) * n];
            let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
            let mut row = vec![0.0; n];
            for _ in 0..64 {
                let mut sum = 0.0;
                for j in 0..n {
                    row[j] = if j == i { 0.0 } else { (-d[j] * beta).exp() };
                    sum += row[j];
                }
                if sum <= 0.0 {
                    // bandwidth far too narrow
                    hi = beta;
                    beta = (lo + hi) / 2.0;
                    continue;
                }
                let mut entropy = 0.0;
                for v in row.iter_mut() {
                    *v /= sum;
                    if *v > 0.0 {
                        entropy -= *v * v.ln();
                    }
                }
                let diff = entropy - target;
                if diff.abs() < 1e-5 {
                    break;
                }
                if diff > 0.0 {
                    lo = beta;
                    beta = if hi.is_finite() { (lo + hi) / 2.0 } else { beta * 2.0 };
                } else {
                    hi = beta;
                    beta = (lo + hi) / 2.0;
                }
            }
            row
        });
        rows.concat()
    }
}

impl Projector for Tsne {
    fn project(&self, embeddings: &[Vec<f32>], seed: u64) -> Result<Vec<[f64; 2]>> {
        let d = validate_embeddings(embeddings)?;
        let n = embeddings.len();
        if n == 1 {
            return Ok(vec![[0.0, 0.0]]);
        }
        let x: Vec<f64> = embeddings.iter().flatten().map(|&v| v as f64).collect();
        let dist: Vec<f64> = self
            .exec
            .map_range(n, |i| {
                (0..n)
                    .map(|j| (0..d).map(|k| (x[i * d + k] - x[j * d + k]).powi(2)).sum::<f64>())
                    .collect::<Vec<f64>>()
            })
            .concat();
        let perplexity = self.perplexity.min(((n - 1) as f64 / 3.0).max(1.0));
        let cond = self.conditional_affinities(&dist, n, perplexity);
        let mut p = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..n {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1e-4..1e-4)).collect();
        let mut update = vec![0.0f64; 2 * n];
        let mut gains = vec![1.0f64; 2 * n];

        for iter in 0..self.iterations {
            let exaggeration = if iter < self.exaggeration_iters {
                self.early_exaggeration
            } else {
                1.0
            };
            let momentum = if iter < 250 { 0.5 } else { 0.8 };
            let kernel: Vec<f64> = self
                .exec
                .map_range(n, |i| {
                    (0..n)
                        .map(|j| {
                            if i == j {
                                0.0
                            } else {
                                let dx = y[2 * i] - y[2 * j];
                                let dy = y[2 * i + 1] - y[2 * j + 1];
                                1.0 / (1.0 + dx * dx + dy * dy)
                            }
                        })
                        .collect::<Vec<f64>>()
                })
                .concat();
            let z: f64 = kernel.iter().sum::<f64>().max(f64::MIN_POSITIVE);
            let grad: Vec<[f64; 2]> = self.exec.map_range(n, |i| {
                let mut g = [0.0f64; 2];
                for j in 0..n {
                    let k = kernel[i * n + j];
                    let mult = (exaggeration * p[i * n + j] - k / z) * k;
                    g[0] += mult * (y[2 * i] - y[2 * j]);
                    g[1] += mult * (y[2 * i + 1] - y[2 * j + 1]);
                }
                [4.0 * g[0], 4.0 * g[1]]
            });
            for (i, gi) in grad.iter().enumerate() {
                for (c, &g) in gi.iter().enumerate() {
                    let idx = 2 * i + c;
                    gains[idx] = if (g > 0.0) != (update[idx] > 0.0) {
                        gains[idx] + 0.2
                    } else {
                        (gains[idx] * 0.8).max(0.01)
                    };
                    update[idx] = momentum * update[idx] - self.learning_rate * gains[idx] * g;
                    y[idx] += update[idx];
                }
            }
            let (mx, my) = (0..n).fold((0.0, 0.0), |(a, b), i| (a + y[2 * i], b + y[2 * i + 1]));
            for i in 0..n {
                y[2 * i] -= mx / n as f64;
                y[2 * i + 1] -= my / n as f64;
            }
        }
        Ok((0..n).map(|i| [y[2 * i], y[2 * i + 1]]).collect())
    }
}

/// Projection onto the top two principal components. Ignores the seed.
#[derive(Clone, Debug, Default)]
pub struct Pca;

impl Projector for Pca {
    fn project(&self, embeddings: &[Vec<f32>], _seed: u64) -> Result<Vec<[f64; 2]>> {
        let d = validate_embeddings(embeddings)?;
        let n = embeddings.len();
        let mut mean = vec![0.0f64; d];
        for e in embeddings {
            for (m, &v) in mean.iter_mut().zip(e) {
                *m += v as f64 / n as f64;
            }
        }
        let centered: Vec<Vec<f64>> = embeddings
            .iter()
            .map(|e| e.iter().zip(&mean).map(|(&v, m)| v as f64 - m).collect())
            .collect();
        let mut cov = vec![0.0f64; d * d];
        for row in &centered {
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] += row[a] * row[b];
                }
            }
        }
        let mut components: Vec<Vec<f64>> = Vec::new();
        for c in 0..2 {
            let mut v: Vec<f64> = (0..d).map(|i| 1.0 + (i + c) as f64 * 0.01).collect();
            for _ in 0..200 {
                let mut next: Vec<f64> = (0..d).map(|a| (0..d).map(|b| cov[a * d + b] * v[b]).sum()).collect();
                for prev in &components {
                    let dot: f64 = next.iter().zip(prev).map(|(x, y)| x * y).sum();
                    for (x, y) in next.iter_mut().zip(prev) {
                        *x -= dot * y;
                    }
                }
                let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm < 1e-300 {
                    break;
                }
                v = next.into_iter().map(|x| x / norm).collect();
            }
            components.push(v);
        }
        Ok(centered
            .iter()
            .map(|row| {
                let a = row.iter().zip(&components[0]).map(|(x, y)| x * y).sum();
                let b = if d > 1 {
                    row.iter().zip(&components[1]).map(|(x, y)| x * y).sum()
                } else {
                    0.0
                };
                [a, b]
            })
            .collect())
    }
}
