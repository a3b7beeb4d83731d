//! Exact t-SNE to two dimensions.
//!
//! O(n²) memory and time per iteration, hence the point cap.

use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::pca::pca_fit_transform;
use super::DimredError;
use crate::util::seeded_rng;

pub const MAX_POINTS: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneParams {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 42,
        }
    }
}

const ENTROPY_TOL: f64 = 1e-5;
const SEARCH_STEPS: usize = 200;
const MIN_GAIN: f64 = 0.01;
const P_FLOOR: f64 = 1e-12;

fn sq_dists_row(x: &Array2<f64>, i: usize, out: &mut [f64]) {
    let xi = x.row(i);
    for (j, o) in out.iter_mut().enumerate() {
        *o = xi
            .iter()
            .zip(x.row(j).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
    }
}

/// Conditional probabilities of row `i` with the Gaussian precision chosen
/// by bisection so that the entropy matches `ln(perplexity)`.
fn conditional_row(d: &[f64], i: usize, target: f64) -> Vec<f32> {
    let n = d.len();
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut beta = 1.0;
    let mut p = vec![0.0f64; n];
    // shift by the nearest neighbour distance for numerical range
    let dmin = d
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    for _ in 0..SEARCH_STEPS {
        let mut sum = 0.0;
        for j in 0..n {
            p[j] = if j == i { 0.0 } else { (-(d[j] - dmin) * beta).exp() };
            sum += p[j];
        }
        let mut h = 0.0;
        for j in 0..n {
            if j != i && p[j] > 0.0 {
                h += beta * (d[j] - dmin) * p[j];
            }
        }
        h = h / sum + sum.ln();
        let diff = h - target;
        for v in p.iter_mut() {
            *v /= sum;
        }
        if diff.abs() < ENTROPY_TOL {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
        }
    }
    p.into_iter().map(|v| v as f32).collect()
}

fn joint_probabilities(x: &Array2<f64>, perplexity: f64) -> Vec<f32> {
    let n = x.nrows();
    let target = perplexity.ln();
    let rows: Vec<Vec<f32>> = (0..n)
        .into_par_iter()
        .map_init(
            || vec![0.0f64; n],
            |d, i| {
                sq_dists_row(x, i, d);
                conditional_row(d, i, target)
            },
        )
        .collect();
    let mut p = vec![0.0f32; n * n];
    let scale = 1.0 / (2.0 * n as f64);
    for i in 0..n {
        for j in 0..n {
            let v = (f64::from(rows[i][j]) + f64::from(rows[j][i])) * scale;
            p[i * n + j] = v.max(P_FLOOR) as f32;
        }
        p[i * n + i] = 0.0;
    }
    p
}

fn initial_layout(x: ArrayView2<'_, f32>, seed: u64) -> Array2<f64> {
    let n = x.nrows();
    let from_pca = if x.ncols() >= 2 {
        pca_fit_transform(x, 2).ok().filter(|f| f.notices.is_empty())
    } else {
        None
    };
    match from_pca {
        Some(fit) => {
            let col = fit.transformed.column(0);
            let mean = col.mean().unwrap_or(0.0);
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            if std > 0.0 {
                fit.transformed.mapv(|v| v / std * 1e-4)
            } else {
                fit.transformed
            }
        }
        None => {
            let mut rng = seeded_rng(seed);
            Array2::from_shape_fn((n, 2), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * 1e-4
            })
        }
    }
}

/// Embed `x` in two dimensions. Runs are bit-identical for equal inputs and
/// parameters.
pub fn tsne_fit_transform(x: ArrayView2<'_, f32>, params: &TsneParams) -> Result<Array2<f64>, DimredError> {
    let n = x.nrows();
    if n > MAX_POINTS {
        return Err(DimredError::TooManyPoints { n, cap: MAX_POINTS });
    }
    if params.perplexity.is_nan() || params.perplexity <= 0.0 || params.perplexity * 3.0 > n as f64 {
        return Err(DimredError::Perplexity {
            perplexity: params.perplexity,
            n,
        });
    }
    let xf = x.mapv(f64::from);
    let p = joint_probabilities(&xf, params.perplexity);
    let mut y = initial_layout(x, params.seed);
    let mut update = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));

    for iter in 0..params.iterations {
        let exaggeration = if iter < params.exaggeration_iters {
            params.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < params.exaggeration_iters { 0.5 } else { 0.8 };
        let yv = &y;
        let row_sums: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let (a, b) = (yv[[i, 0]], yv[[i, 1]]);
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| {
                        let dx = a - yv[[j, 0]];
                        let dy = b - yv[[j, 1]];
                        1.0 / (1.0 + dx * dx + dy * dy)
                    })
                    .sum()
            })
            .collect();
        let z: f64 = row_sums.iter().sum::<f64>().max(f64::MIN_POSITIVE);
        let grads: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let (a, b) = (yv[[i, 0]], yv[[i, 1]]);
                let prow = &p[i * n..(i + 1) * n];
                let mut g = [0.0f64; 2];
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let dx = a - yv[[j, 0]];
                    let dy = b - yv[[j, 1]];
                    let num = 1.0 / (1.0 + dx * dx + dy * dy);
                    let coeff = (exaggeration * f64::from(prow[j]) - num / z) * num;
                    g[0] += coeff * dx;
                    g[1] += coeff * dy;
                }
                [4.0 * g[0], 4.0 * g[1]]
            })
            .collect();
        for i in 0..n {
            for k in 0..2 {
                let g = grads[i][k];
                let u = update[[i, k]];
                let gain = &mut gains[[i, k]];
                *gain = if u * g < 0.0 { *gain + 0.2 } else { *gain * 0.8 };
                *gain = gain.max(MIN_GAIN);
                let nu = momentum * u - params.learning_rate * *gain * g;
                update[[i, k]] = nu;
                y[[i, k]] += nu;
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(DimredError::NonFinite { iteration: iter });
        }
    }
    Ok(y)
}
