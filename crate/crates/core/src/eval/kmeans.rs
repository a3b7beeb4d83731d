//! Lloyd's k-means with k-means++ seeding and restarts.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;

use super::EvalError;
use crate::util::seeded_rng;

pub const RESTARTS: usize = 10;
pub const MAX_ITER: usize = 300;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment step of the winning restart.
    pub trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus_init(x: &Array2<f64>, k: usize, seed: u64) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut rng = seeded_rng(seed);
    let mut centroids = Array2::zeros((k, d));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&x.row(first));
    let mut chosen = vec![false; n];
    chosen[first] = true;
    let mut best: Vec<f64> = (0..n)
        .map(|i| sq_dist(x.row(i).as_slice().unwrap(), x.row(first).as_slice().unwrap()))
        .collect();
    for c in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in best.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            if best[pick] == 0.0 {
                pick = best.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // every remaining point coincides with a centroid
            chosen.iter().position(|&used| !used).unwrap_or(0)
        };
        chosen[pick] = true;
        centroids.row_mut(c).assign(&x.row(pick));
        let p = x.row(pick);
        let p = p.as_slice().unwrap();
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(x.row(i).as_slice().unwrap(), p));
        }
    }
    centroids
}

fn assign(x: &Array2<f64>, centroids: &Array2<f64>, out: &mut [usize], dist: &mut [f64]) -> f64 {
    let k = centroids.nrows();
    for (i, row) in x.rows().into_iter().enumerate() {
        let r = row.as_slice().unwrap();
        let mut best = (f64::INFINITY, 0);
        for c in 0..k {
            let d = sq_dist(r, centroids.row(c).as_slice().unwrap());
            if d < best.0 {
                best = (d, c);
            }
        }
        out[i] = best.1;
        dist[i] = best.0;
    }
    dist.iter().sum()
}

fn single_run(x: &Array2<f64>, k: usize, seed: u64) -> KMeansResult {
    let (n, d) = x.dim();
    let mut centroids = plus_plus_init(x, k, seed);
    let mut labels = vec![0usize; n];
    let mut dist = vec![0.0f64; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..MAX_ITER {
        iterations += 1;
        trace.push(assign(x, &centroids, &mut labels, &mut dist));
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            sums.row_mut(c).scaled_add(1.0, &x.row(i));
        }
        let mut taken = vec![false; n];
        let mut shift = 0.0f64;
        for (c, &count) in counts.iter().enumerate() {
            let new_row: Vec<f64> = if count > 0 {
                sums.row(c).iter().map(|v| v / count as f64).collect()
            } else {
                // empty cluster: move it onto the worst-served point
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                taken[far] = true;
                dist[far] = 0.0;
                x.row(far).to_vec()
            };
            shift = shift.max(sq_dist(&new_row, centroids.row(c).as_slice().unwrap()).sqrt());
            centroids
                .row_mut(c)
                .iter_mut()
                .zip(new_row)
                .for_each(|(o, v)| *o = v);
        }
        if shift < TOLERANCE {
            break;
        }
    }
    let inertia = assign(x, &centroids, &mut labels, &mut dist);
    trace.push(inertia);
    KMeansResult {
        assignments: labels,
        centroids,
        inertia,
        iterations,
        trace,
    }
}

/// Cluster rows of `x` into `k` groups; the restart with the lowest inertia
/// wins, ties going to the earlier restart.
pub fn kmeans(x: ArrayView2<'_, f32>, k: usize, seed: u64) -> Result<KMeansResult, EvalError> {
    let n = x.nrows();
    if k < 1 || k > n {
        return Err(EvalError::InvalidK { k, n });
    }
    let xf = x.mapv(f64::from);
    let runs: Vec<KMeansResult> = (0..RESTARTS as u64)
        .into_par_iter()
        .map(|r| single_run(&xf, k, seed.wrapping_mul(1_000_003).wrapping_add(r)))
        .collect();
    let best = runs
        .into_iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| a.inertia.total_cmp(&b.inertia).then(i.cmp(j)))
        .map(|(_, r)| r)
        .expect("at least one restart");
    Ok(best)
}
