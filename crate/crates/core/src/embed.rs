//! Exact t-SNE of latent vectors into the plane, and a cluster compactness
//! score for the result.
//!
//! Affinities use a Gaussian kernel per row, with the bandwidth chosen by
//! bisection so the row entropy equals `log2(perplexity)`. The low
//! dimensional kernel is Student-t with one degree of freedom. Optimization
//! is gradient descent with momentum, per-coordinate adaptive gains and an
//! early exaggeration phase.

use std::fmt::Write as _;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fmt::fmt17;
use crate::rng::{self, Stream};

/// Allowed gap between a row's entropy and `log2(perplexity)`, in bits.
pub const ENTROPY_TOLERANCE: f64 = 1e-5;
const MAX_BISECTION_STEPS: usize = 200;
const MIN_GAIN: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Iteration at which momentum switches and exaggeration ends.
    pub exaggeration_iterations: usize,
    pub early_exaggeration: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            exaggeration_iterations: 250,
            early_exaggeration: 12.0,
            init_std: 1e-4,
            seed: 0,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        check_perplexity(self.perplexity, n)?;
        if self.iterations == 0 {
            return Err(Error::config("t-SNE iterations must be positive"));
        }
        if self.early_exaggeration != 1.0 && self.iterations < self.exaggeration_iterations {
            return Err(Error::config(format!(
                "t-SNE needs at least {} iterations with early exaggeration, got {}",
                self.exaggeration_iterations, self.iterations
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("t-SNE learning rate must be > 0"));
        }
        if !(self.init_std > 0.0 && self.early_exaggeration >= 1.0) {
            return Err(Error::config("t-SNE init std must be > 0 and exaggeration >= 1"));
        }
        Ok(())
    }
}

fn check_perplexity(perplexity: f64, n: usize) -> Result<()> {
    if n < 3 {
        return Err(Error::config(format!("t-SNE needs at least 3 points, got {n}")));
    }
    if !(perplexity > 1.0 && perplexity < (n - 1) as f64) {
        return Err(Error::config(format!(
            "perplexity must lie in (1, {}) for {n} points, got {perplexity}",
            n - 1
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Embedding2D {
    pub y: Vec<[f64; 2]>,
    /// `KL(P || Q)` before each update.
    pub kl_trace: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Embedding2D {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,label,y1,y2\n");
        for (i, (p, l)) in self.y.iter().zip(&self.labels).enumerate() {
            let _ = writeln!(out, "{i},{l},{},{}", fmt17(p[0]), fmt17(p[1]));
        }
        out
    }
}

/// Squared Euclidean distances between rows of `[N, D]`.
pub fn squared_distances(x: &Tensor) -> Result<Vec<f64>> {
    if x.shape().len() != 2 {
        return Err(Error::Shape {
            op: "squared_distances",
            lhs: x.shape().to_vec(),
            rhs: vec![],
        });
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let data = x.data();
    let mut out = vec![0.0; n * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let xi = &data[i * d..][..d];
        for (j, slot) in row.iter_mut().enumerate() {
            let xj = &data[j * d..][..d];
            *slot = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    });
    Ok(out)
}

/// Gaussian conditional row for point `i` at precision `beta`, with its
/// entropy in bits. Distances are shifted by the row minimum first, which
/// leaves the normalized row unchanged.
fn gaussian_row(dist: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let dmin = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (j, (&d, o)) in dist.iter().zip(out.iter_mut()).enumerate() {
        if j == i {
            *o = 0.0;
            continue;
        }
        let e = (-beta * (d - dmin)).exp();
        *o = e;
        sum += e;
        weighted += (d - dmin) * e;
    }
    out.iter_mut().for_each(|o| *o /= sum);
    (sum.ln() + beta * weighted / sum) / std::f64::consts::LN_2
}

/// Row-conditional affinities `p_{j|i}` (row major, `[N, N]`), each row at
/// the target entropy.
pub fn conditional_affinities(x: &Tensor, perplexity: f64) -> Result<Vec<f64>> {
    let n = x.shape().first().copied().unwrap_or(0);
    check_perplexity(perplexity, n)?;
    let dist = squared_distances(x)?;
    if dist.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numerical("non-finite pairwise distance".into()));
    }
    let target = perplexity.log2();
    let mut p = vec![0.0; n * n];
    p.par_chunks_mut(n)
        .zip(dist.par_chunks(n))
        .enumerate()
        .map(|(i, (row, d))| search_row(d, i, target, row))
        .collect::<Result<()>>()?;
    Ok(p)
}

fn search_row(dist: &[f64], i: usize, target: f64, row: &mut [f64]) -> Result<()> {
    let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
    let mut h = 0.0;
    for _ in 0..MAX_BISECTION_STEPS {
        h = gaussian_row(dist, i, beta, row);
        if (h - target).abs() <= ENTROPY_TOLERANCE {
            return Ok(());
        }
        if h > target {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    // Ties at the nearest distance cap how low the entropy can go; the row
    // then converges to uniform weight over those neighbours.
    let dmin = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let ties = dist
        .iter()
        .enumerate()
        .filter(|&(j, &d)| j != i && d == dmin)
        .count();
    if (ties as f64).log2() >= target - ENTROPY_TOLERANCE {
        return Ok(());
    }
    Err(Error::config(format!(
        "perplexity infeasible for point {i}: entropy {h:.6} bits, target {target:.6}"
    )))
}

/// Symmetrized joint affinities `p_ij = (p_{j|i} + p_{i|j}) / 2N`.
pub fn compute_affinities(x: &Tensor, perplexity: f64) -> Result<Vec<f64>> {
    let cond = conditional_affinities(x, perplexity)?;
    let n = x.shape()[0];
    let scale = 2.0 * n as f64;
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / scale;
        }
    }
    Ok(p)
}

/// Student-t kernel numerators `1 / (1 + |y_i - y_j|^2)` (zero diagonal)
/// and their sum.
fn student_kernel(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    num.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, slot) in row.iter_mut().enumerate() {
            if i != j {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                *slot = 1.0 / (1.0 + dx * dx + dy * dy);
            }
        }
    });
    let z = num.chunks(n).map(|r| r.iter().sum::<f64>()).sum();
    (num, z)
}

/// `KL(P || Q)` with `Q` induced by the embedding `y`.
pub fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let (num, z) = student_kernel(y);
    kl_from_kernel(p, &num, z)
}

fn kl_from_kernel(p: &[f64], num: &[f64], z: f64) -> f64 {
    p.iter()
        .zip(num)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &nij)| pij * (pij / (nij / z)).ln())
        .sum()
}

/// `dKL/dy_i = 4 sum_j (e*p_ij - q_ij) (y_i - y_j) / (1 + |y_i - y_j|^2)`,
/// where `e` is the exaggeration factor (1 for the true gradient).
pub fn kl_gradient(p: &[f64], y: &[[f64; 2]], exaggeration: f64) -> Vec<[f64; 2]> {
    let (num, z) = student_kernel(y);
    gradient_from_kernel(p, y, &num, z, exaggeration)
}

fn gradient_from_kernel(
    p: &[f64],
    y: &[[f64; 2]],
    num: &[f64],
    z: f64,
    exaggeration: f64,
) -> Vec<[f64; 2]> {
    let n = y.len();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut g = [0.0; 2];
            for j in 0..n {
                let nij = num[i * n + j];
                let m = (exaggeration * p[i * n + j] - nij / z) * nij;
                g[0] += m * (y[i][0] - y[j][0]);
                g[1] += m * (y[i][1] - y[j][1]);
            }
            [4.0 * g[0], 4.0 * g[1]]
        })
        .collect()
}

/// Embeds the rows of `x` (`[N, D]`) in two dimensions.
pub fn tsne(x: &Tensor, labels: &[usize], cfg: &EmbeddingConfig) -> Result<Embedding2D> {
    let n = x.shape().first().copied().unwrap_or(0);
    cfg.validate(n)?;
    if labels.len() != n {
        return Err(Error::Shape {
            op: "tsne",
            lhs: x.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let p = compute_affinities(x, cfg.perplexity)?;

    let mut rng = rng::stream(cfg.seed, Stream::Tsne);
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::config(e.to_string()))?;
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut kl_trace = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let early = it < cfg.exaggeration_iterations;
        let exaggeration = if early { cfg.early_exaggeration } else { 1.0 };
        let momentum = if early { cfg.initial_momentum } else { cfg.final_momentum };

        let (num, z) = student_kernel(&y);
        let kl = kl_from_kernel(&p, &num, z);
        if !kl.is_finite() {
            return Err(Error::Numerical(format!(
                "t-SNE KL divergence became {kl} at iteration {it}"
            )));
        }
        kl_trace.push(kl);
        let grad = gradient_from_kernel(&p, &y, &num, z, exaggeration);

        for ((yi, ui), (gi, gain)) in y
            .iter_mut()
            .zip(update.iter_mut())
            .zip(grad.iter().zip(gains.iter_mut()))
        {
            for d in 0..2 {
                gain[d] = if (gi[d] > 0.0) != (ui[d] > 0.0) {
                    gain[d] + 0.2
                } else {
                    (gain[d] * 0.8).max(MIN_GAIN)
                };
                ui[d] = momentum * ui[d] - cfg.learning_rate * gain[d] * gi[d];
                yi[d] += ui[d];
            }
        }
        let mean = y.iter().fold([0.0; 2], |m, v| [m[0] + v[0], m[1] + v[1]]);
        let mean = [mean[0] / n as f64, mean[1] / n as f64];
        for v in &mut y {
            v[0] -= mean[0];
            v[1] -= mean[1];
        }
    }
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("t-SNE produced non-finite coordinates".into()));
    }
    Ok(Embedding2D {
        y,
        kl_trace,
        labels: labels.to_vec(),
    })
}

/// Mean intra-class pairwise distance over mean inter-class pairwise
/// distance. Lower means tighter, better separated clusters.
pub fn compactness(y: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    if y.len() != labels.len() {
        return Err(Error::Shape {
            op: "compactness",
            lhs: vec![y.len(), 2],
            rhs: vec![labels.len()],
        });
    }
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..y.len() {
        for j in i + 1..y.len() {
            let d = ((y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2)).sqrt();
            if labels[i] == labels[j] {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    if n_inter == 0 {
        return Err(Error::EmptyPopulation("pairs from different classes"));
    }
    if n_intra == 0 {
        return Err(Error::EmptyPopulation("pairs within a class"));
    }
    let inter = inter / n_inter as f64;
    if inter == 0.0 {
        return Err(Error::Numerical("all inter-class distances are zero".into()));
    }
    Ok((intra / n_intra as f64) / inter)
}
