//! Exact PCA via the eigendecomposition of the covariance matrix.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use super::DimredError;

const CHUNK_ROWS: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaFit {
    /// `(n, out_dim)` projected data.
    pub transformed: Array2<f64>,
    /// `(out_dim, dim)` unit components, strongest first.
    pub components: Array2<f64>,
    pub mean: Array1<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub notices: Vec<String>,
}

impl PcaFit {
    /// Map projected points back to the input space.
    pub fn inverse_transform(&self, y: &Array2<f64>) -> Array2<f64> {
        y.dot(&self.components) + &self.mean
    }
}

fn column_mean(x: ArrayView2<'_, f32>) -> Array1<f64> {
    let d = x.ncols();
    let partial: Vec<Array1<f64>> = x
        .axis_chunks_iter(Axis(0), CHUNK_ROWS)
        .into_par_iter()
        .map(|c| c.mapv(f64::from).sum_axis(Axis(0)))
        .collect();
    let mut sum = Array1::zeros(d);
    for p in partial {
        sum += &p;
    }
    sum / x.nrows() as f64
}

fn covariance(x: ArrayView2<'_, f32>, mean: &Array1<f64>) -> Array2<f64> {
    let d = x.ncols();
    let partial: Vec<Array2<f64>> = x
        .axis_chunks_iter(Axis(0), CHUNK_ROWS)
        .into_par_iter()
        .map(|c| {
            let centered = c.mapv(f64::from) - mean;
            centered.t().dot(&centered)
        })
        .collect();
    let mut cov = Array2::zeros((d, d));
    for p in partial {
        cov += &p;
    }
    cov / (x.nrows() - 1) as f64
}

pub fn pca_fit_transform(x: ArrayView2<'_, f32>, out_dim: usize) -> Result<PcaFit, DimredError> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(DimredError::TooFewPoints { n, need: 2 });
    }
    if out_dim == 0 || out_dim > n.min(d) {
        return Err(DimredError::OutDim { out_dim, n, dim: d });
    }
    let mean = column_mean(x);
    let cov = covariance(x, &mean);
    let total: f64 = cov.diag().sum();
    if total <= 0.0 || !total.is_finite() {
        return Ok(PcaFit {
            transformed: Array2::zeros((n, out_dim)),
            components: Array2::zeros((out_dim, d)),
            mean,
            explained_variance_ratio: vec![0.0; out_dim],
            notices: vec!["input has zero variance; projection is all zeros".into()],
        });
    }
    let m = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Array2::<f64>::zeros((out_dim, d));
    let mut ratios = Vec::with_capacity(out_dim);
    for (k, &i) in order.iter().take(out_dim).enumerate() {
        let v = eig.eigenvectors.column(i);
        let pivot = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(_, &x)| x)
            .unwrap_or(1.0);
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[[k, j]] = sign * v[j];
        }
        ratios.push(eig.eigenvalues[i].max(0.0) / total);
    }
    let mut transformed = Array2::<f64>::zeros((n, out_dim));
    let ct = components.t();
    transformed
        .axis_chunks_iter_mut(Axis(0), CHUNK_ROWS)
        .into_par_iter()
        .enumerate()
        .for_each(|(ci, mut out)| {
            let start = ci * CHUNK_ROWS;
            let rows = x.slice(s![start..start + out.nrows(), ..]);
            let centered = rows.mapv(f64::from) - &mean;
            out.assign(&centered.dot(&ct));
        });
    Ok(PcaFit {
        transformed,
        components,
        mean,
        explained_variance_ratio: ratios,
        notices: Vec::new(),
    })
}
