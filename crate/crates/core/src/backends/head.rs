use ndarray::{Array1, Array2};
use rand_distr::{Distribution, StandardNormal};

use super::{BackendError, ModelSpec};
use crate::util::{fnv1a, seeded_rng};

/// Single fully connected layer with per-class sigmoid outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    weights: Array2<f32>,
    bias: Array1<f32>,
    classes: Vec<String>,
}

impl LinearHead {
    pub fn new(
        weights: Array2<f32>,
        bias: Vec<f32>,
        classes: Vec<String>,
    ) -> Result<Self, BackendError> {
        if weights.ncols() != classes.len() || bias.len() != classes.len() {
            return Err(BackendError::Width {
                expected: classes.len(),
                got: weights.ncols().max(bias.len()),
            });
        }
        Ok(Self {
            weights,
            bias: Array1::from(bias),
            classes,
        })
    }

    /// Fixed toy head: Gaussian weights seeded by the model name, zero bias.
    pub(crate) fn seeded_toy(spec: &ModelSpec, classes: Vec<String>) -> Self {
        let mut rng = seeded_rng(fnv1a(format!("{}/classifier", spec.name).as_bytes()));
        let scale = 4.0 / (spec.embedding_dim as f64).sqrt();
        let weights = Array2::from_shape_fn((spec.embedding_dim, classes.len()), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (z * scale) as f32
        });
        Self {
            bias: Array1::zeros(classes.len()),
            weights,
            classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn weights(&self) -> &Array2<f32> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f32> {
        &self.bias
    }

    pub fn scores(&self, embeddings: &Array2<f32>) -> Result<Array2<f32>, BackendError> {
        if embeddings.ncols() != self.input_dim() {
            return Err(BackendError::Width {
                expected: self.input_dim(),
                got: embeddings.ncols(),
            });
        }
        let mut logits = embeddings.dot(&self.weights);
        logits += &self.bias;
        logits.mapv_inplace(|z| (1.0 / (1.0 + (-f64::from(z)).exp())) as f32);
        Ok(logits)
    }
}
