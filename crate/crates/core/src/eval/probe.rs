//! Stratified splits, kNN probing and linear probing.
//!
//! Test labels stay inside [`SealedTest`]; a probe only sees test features
//! and hands back scores, which the sealed set turns into APs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use ndarray_npy::{ReadNpyExt, WriteNpyExt};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tracing::warn;

use super::metrics::average_precision;
use super::EvalError;
use crate::backends::head::LinearHead;
use crate::labels::GroundTruthMatrix;
use crate::util::{atomic_write, seeded_rng};

pub const MIN_CLASS_POSITIVES: usize = 3;
pub const DEFAULT_KNN_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitOutcome {
    pub splits: Splits,
    /// Ground-truth column indices used for probing.
    pub class_columns: Vec<usize>,
    pub classes: Vec<String>,
    pub excluded_classes: Vec<String>,
}

/// Share `total` by `fractions` with largest-remainder rounding.
fn apportion(total: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let sum: f64 = fractions.iter().sum();
    let exact: Vec<f64> = fractions.iter().map(|f| f / sum * total as f64).collect();
    let mut out = [0usize; 3];
    for (o, e) in out.iter_mut().zip(&exact) {
        *o = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = total - out.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

/// Stratified train/val/test split over annotated rows. Classes with fewer
/// than three positives are excluded; every kept class gets at least one
/// positive in each split.
pub fn split(
    gt: &GroundTruthMatrix,
    fractions: [f64; 3],
    seed: u64,
) -> Result<SplitOutcome, EvalError> {
    let mut class_columns = Vec::new();
    let mut excluded_classes = Vec::new();
    for (c, name) in gt.classes.iter().enumerate() {
        let p = gt.positives(c);
        if p >= MIN_CLASS_POSITIVES {
            class_columns.push(c);
        } else {
            warn!(class = %name, positives = p, "class excluded from probing (needs at least {MIN_CLASS_POSITIVES} positives)");
            excluded_classes.push(name.clone());
        }
    }
    if class_columns.is_empty() {
        return Err(EvalError::NoProbeClasses);
    }
    let stratum = |r: usize| -> Vec<usize> {
        class_columns
            .iter()
            .copied()
            .filter(|&c| gt.matrix[[r, c]])
            .collect()
    };
    let mut rows: Vec<usize> = (0..gt.n_segments())
        .filter(|&r| !stratum(r).is_empty())
        .collect();
    let mut rng = seeded_rng(seed);
    rows.shuffle(&mut rng);
    rows.sort_by_cached_key(|&r| stratum(r));

    let targets = apportion(rows.len(), &fractions);
    let mut parts: [Vec<usize>; 3] = Default::default();
    let mut used = vec![false; rows.len()];
    for &c in &class_columns {
        for part in parts.iter_mut() {
            if part.iter().any(|&r| gt.matrix[[r, c]]) {
                continue;
            }
            if let Some(i) = (0..rows.len()).find(|&i| !used[i] && gt.matrix[[rows[i], c]]) {
                used[i] = true;
                part.push(rows[i]);
            }
        }
    }
    let remaining: Vec<usize> = (0..rows.len()).filter(|&i| !used[i]).map(|i| rows[i]).collect();
    let r_total = remaining.len();
    let mut quotas = [0usize; 3];
    for s in 0..3 {
        quotas[s] = targets[s].saturating_sub(parts[s].len());
    }
    if quotas.iter().sum::<usize>() != r_total {
        quotas = apportion(r_total, &fractions);
    }
    let mut got = [0usize; 3];
    for (t, &row) in remaining.iter().enumerate() {
        let t = (t + 1) as f64;
        let s = (0..3)
            .filter(|&s| got[s] < quotas[s])
            .max_by(|&a, &b| {
                let da = quotas[a] as f64 * t / r_total as f64 - got[a] as f64;
                let db = quotas[b] as f64 * t / r_total as f64 - got[b] as f64;
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("quotas cover every remaining row");
        got[s] += 1;
        parts[s].push(row);
    }
    for part in parts.iter_mut() {
        part.sort_unstable();
    }
    let [train, val, test] = parts;
    Ok(SplitOutcome {
        splits: Splits { train, val, test },
        classes: class_columns.iter().map(|&c| gt.classes[c].clone()).collect(),
        class_columns,
        excluded_classes,
    })
}

/// Test features with their labels held back until scoring.
#[derive(Debug)]
pub struct SealedTest {
    features: Array2<f32>,
    labels: Array2<bool>,
}

impl SealedTest {
    pub fn features(&self) -> ArrayView2<'_, f32> {
        self.features.view()
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    /// Per-class AP of `scores` (rows aligned with `features`). Classes
    /// without test positives are left out with a notice.
    pub fn score(
        self,
        scores: &Array2<f64>,
        classes: &[String],
    ) -> Result<(BTreeMap<String, f64>, Vec<String>), EvalError> {
        score_matrix(scores, &self.labels, classes)
    }
}

pub(crate) fn score_matrix(
    scores: &Array2<f64>,
    labels: &Array2<bool>,
    classes: &[String],
) -> Result<(BTreeMap<String, f64>, Vec<String>), EvalError> {
    if scores.dim() != labels.dim() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    let mut per_class = BTreeMap::new();
    let mut notices = Vec::new();
    for (c, name) in classes.iter().enumerate() {
        let s = scores.column(c).to_vec();
        let l = labels.column(c).to_vec();
        match average_precision(&s, &l)? {
            Some(ap) => {
                per_class.insert(name.clone(), ap);
            }
            None => notices.push(format!("class {name} has no positives; left out of mAP")),
        }
    }
    Ok((per_class, notices))
}

pub fn mean_ap(per_class: &BTreeMap<String, f64>) -> Result<f64, EvalError> {
    if per_class.is_empty() {
        return Err(EvalError::NoPositives);
    }
    Ok(per_class.values().sum::<f64>() / per_class.len() as f64)
}

/// Features and labels arranged by split.
#[derive(Debug)]
pub struct ProbeData {
    pub classes: Vec<String>,
    pub train_x: Array2<f32>,
    pub train_y: Array2<bool>,
    pub val_x: Array2<f32>,
    pub val_y: Array2<bool>,
    pub test: SealedTest,
    pub excluded_classes: Vec<String>,
}

impl ProbeData {
    pub fn new(embeddings: ArrayView2<'_, f32>, gt: &GroundTruthMatrix, outcome: &SplitOutcome) -> Self {
        let labels = gt.matrix.select(Axis(1), &outcome.class_columns);
        let pick = |rows: &[usize]| {
            (
                embeddings.select(Axis(0), rows),
                labels.select(Axis(0), rows),
            )
        };
        let (train_x, train_y) = pick(&outcome.splits.train);
        let (val_x, val_y) = pick(&outcome.splits.val);
        let (features, test_labels) = pick(&outcome.splits.test);
        Self {
            classes: outcome.classes.clone(),
            train_x,
            train_y,
            val_x,
            val_y,
            test: SealedTest {
                features,
                labels: test_labels,
            },
            excluded_classes: outcome.excluded_classes.clone(),
        }
    }

    /// Replace training and validation labels, e.g. with a permuted copy for
    /// a chance baseline. Test labels are untouched.
    pub fn with_training_labels(mut self, train_y: Array2<bool>, val_y: Array2<bool>) -> Self {
        assert_eq!(train_y.dim(), self.train_y.dim());
        assert_eq!(val_y.dim(), self.val_y.dim());
        self.train_y = train_y;
        self.val_y = val_y;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeType {
    Knn,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub model: String,
    pub probe_type: ProbeType,
    pub per_class_ap: BTreeMap<String, f64>,
    pub map_score: f64,
    pub split_sizes: SplitSizes,
    pub excluded_classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    pub notices: Vec<String>,
}

fn sizes(data: &ProbeData) -> SplitSizes {
    SplitSizes {
        train: data.train_x.nrows(),
        val: data.val_x.nrows(),
        test: data.test.len(),
    }
}

fn sq_dist(a: ndarray::ArrayView1<'_, f32>, b: ndarray::ArrayView1<'_, f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum()
}

/// Scores of a kNN classifier: per class, the fraction of the `k` nearest
/// training rows (euclidean, ties by training order) that are positive.
pub fn knn_scores(
    train_x: ArrayView2<'_, f32>,
    train_y: &Array2<bool>,
    query: ArrayView2<'_, f32>,
    k: usize,
) -> Array2<f64> {
    let c = train_y.ncols();
    let mut out = Array2::zeros((query.nrows(), c));
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(train_x.nrows());
    for (q, row) in query.rows().into_iter().enumerate() {
        dists.clear();
        dists.extend(
            train_x
                .rows()
                .into_iter()
                .enumerate()
                .map(|(i, t)| (sq_dist(row, t), i)),
        );
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, i) in &dists[..k] {
            for j in 0..c {
                if train_y[[i, j]] {
                    out[[q, j]] += 1.0;
                }
            }
        }
    }
    out.mapv_inplace(|v| v / k as f64);
    out
}

pub fn knn_probe(model: &str, data: ProbeData, k: usize) -> Result<ProbeResult, EvalError> {
    if data.test.is_empty() {
        return Err(EvalError::EmptySplit("test"));
    }
    if k == 0 || k > data.train_x.nrows() {
        return Err(EvalError::InvalidK {
            k,
            n: data.train_x.nrows(),
        });
    }
    let split_sizes = sizes(&data);
    let scores = knn_scores(data.train_x.view(), &data.train_y, data.test.features(), k);
    let (per_class_ap, notices) = data.test.score(&scores, &data.classes)?;
    Ok(ProbeResult {
        model: model.to_string(),
        probe_type: ProbeType::Knn,
        map_score: mean_ap(&per_class_ap)?,
        per_class_ap,
        split_sizes,
        excluded_classes: data.excluded_classes,
        k: Some(k),
        epochs: None,
        notices,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeHyperparams {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for ProbeHyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            max_epochs: 500,
            patience: 25,
        }
    }
}

/// Trained single-layer multi-label classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub model: String,
    pub classes: Vec<String>,
    /// `(dim, n_classes)`.
    pub weights: Array2<f32>,
    pub bias: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct ProbeSidecar {
    model: String,
    classes: Vec<String>,
    bias: Vec<f32>,
}

pub const PROBE_WEIGHTS_FILE: &str = "linear_probe_weights.npy";
pub const PROBE_META_FILE: &str = "linear_probe.json";

impl LinearProbe {
    pub fn to_head(&self) -> LinearHead {
        LinearHead::new(self.weights.clone(), self.bias.clone(), self.classes.clone())
            .expect("probe shapes are consistent")
    }

    pub fn scores(&self, x: ArrayView2<'_, f32>) -> Array2<f64> {
        let w = self.weights.mapv(f64::from);
        let b = Array1::from_iter(self.bias.iter().map(|&v| f64::from(v)));
        let logits = x.mapv(f64::from).dot(&w) + &b;
        logits.mapv(sigmoid)
    }

    pub fn save(&self, dir: &Path) -> Result<(), EvalError> {
        let io = |path: &Path, e: String| EvalError::Io {
            path: path.to_path_buf(),
            reason: e,
        };
        let weights_path = dir.join(PROBE_WEIGHTS_FILE);
        let mut bytes = Vec::new();
        self.weights
            .write_npy(Cursor::new(&mut bytes))
            .map_err(|e| io(&weights_path, e.to_string()))?;
        atomic_write(&weights_path, &bytes).map_err(|e| io(&weights_path, e.to_string()))?;
        super::write_json(
            &dir.join(PROBE_META_FILE),
            &ProbeSidecar {
                model: self.model.clone(),
                classes: self.classes.clone(),
                bias: self.bias.clone(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self, EvalError> {
        let weights_path = dir.join(PROBE_WEIGHTS_FILE);
        let file = fs::File::open(&weights_path).map_err(|e| EvalError::Io {
            path: weights_path.clone(),
            reason: e.to_string(),
        })?;
        let weights = Array2::<f32>::read_npy(file).map_err(|e| EvalError::Io {
            path: weights_path.clone(),
            reason: e.to_string(),
        })?;
        let meta: ProbeSidecar = super::read_json(&dir.join(PROBE_META_FILE))?;
        if weights.ncols() != meta.classes.len() || meta.bias.len() != meta.classes.len() {
            return Err(EvalError::Io {
                path: weights_path,
                reason: "weights, bias and class list disagree".into(),
            });
        }
        Ok(Self {
            model: meta.model,
            classes: meta.classes,
            weights,
            bias: meta.bias,
        })
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join(PROBE_WEIGHTS_FILE).is_file() && dir.join(PROBE_META_FILE).is_file()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn val_map(w: &Array2<f64>, b: &Array1<f64>, x: &Array2<f64>, y: &Array2<bool>) -> Result<f64, EvalError> {
    let scores = (x.dot(w) + b).mapv(sigmoid);
    let names: Vec<String> = (0..y.ncols()).map(|i| i.to_string()).collect();
    let (per_class, _) = score_matrix(&scores, y, &names)?;
    mean_ap(&per_class)
}

/// Mean binary cross-entropy of probabilities `p` against 0/1 targets.
fn bce(p: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let n = p.nrows().max(1) as f64;
    p.iter()
        .zip(y.iter())
        .map(|(&p, &t)| {
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

/// Full-batch gradient descent on binary cross-entropy from zero weights,
/// keeping the parameters with the best validation mAP.
pub fn train_linear_probe(
    model: &str,
    data: ProbeData,
    hp: &ProbeHyperparams,
) -> Result<(LinearProbe, ProbeResult), EvalError> {
    if data.train_x.nrows() == 0 {
        return Err(EvalError::EmptySplit("train"));
    }
    if data.test.is_empty() {
        return Err(EvalError::EmptySplit("test"));
    }
    let split_sizes = sizes(&data);
    let x = data.train_x.mapv(f64::from);
    let y = data.train_y.mapv(|b| if b { 1.0 } else { 0.0 });
    let vx = data.val_x.mapv(f64::from);
    let (n, d) = x.dim();
    let c = data.classes.len();
    let mut w = Array2::<f64>::zeros((d, c));
    let mut b = Array1::<f64>::zeros(c);
    let has_val = vx.nrows() > 0 && (0..c).any(|j| data.val_y.column(j).iter().any(|&v| v));
    let mut best = (
        if has_val { val_map(&w, &b, &vx, &data.val_y)? } else { f64::NEG_INFINITY },
        w.clone(),
        b.clone(),
        0usize,
    );
    let mut stale = 0;
    let mut epochs = 0;
    for epoch in 1..=hp.max_epochs {
        epochs = epoch;
        let p = (x.dot(&w) + &b).mapv(sigmoid);
        let loss = bce(&p, &y);
        if !loss.is_finite() {
            return Err(EvalError::NonFinite(format!(
                "linear probe loss at epoch {epoch} (lr {}, {n} train rows)",
                hp.learning_rate
            )));
        }
        let err = &p - &y;
        let grad_w = x.t().dot(&err) / n as f64;
        let grad_b = err.sum_axis(Axis(0)) / n as f64;
        w.scaled_add(-hp.learning_rate, &grad_w);
        b.scaled_add(-hp.learning_rate, &grad_b);
        if w.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite(format!("linear probe parameters at epoch {epoch}")));
        }
        if has_val {
            let m = val_map(&w, &b, &vx, &data.val_y)?;
            if m > best.0 {
                best = (m, w.clone(), b.clone(), epoch);
                stale = 0;
            } else {
                stale += 1;
                if stale >= hp.patience {
                    break;
                }
            }
        } else {
            best = (f64::NEG_INFINITY, w.clone(), b.clone(), epoch);
        }
    }
    let probe = LinearProbe {
        model: model.to_string(),
        classes: data.classes.clone(),
        weights: best.1.mapv(|v| v as f32),
        bias: best.2.iter().map(|&v| v as f32).collect(),
    };
    let scores = probe.scores(data.test.features());
    let (per_class_ap, mut notices) = data.test.score(&scores, &data.classes)?;
    notices.push(format!(
        "trained {epochs} epoch(s); kept parameters from epoch {}",
        best.3
    ));
    let result = ProbeResult {
        model: model.to_string(),
        probe_type: ProbeType::Linear,
        map_score: mean_ap(&per_class_ap)?,
        per_class_ap,
        split_sizes,
        excluded_classes: data.excluded_classes,
        k: None,
        epochs: Some(epochs),
        notices,
    };
    Ok((probe, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::TimeSpan;
    use rand_distr::{Distribution, Normal};

    fn gt_from(labels: &[Vec<bool>], classes: &[&str]) -> GroundTruthMatrix {
        let n = labels.len();
        let c = classes.len();
        GroundTruthMatrix {
            classes: classes.iter().map(|s| s.to_string()).collect(),
            matrix: Array2::from_shape_fn((n, c), |(i, j)| labels[i][j]),
            timestamps: (0..n).map(|i| TimeSpan::new(i as f64, i as f64 + 1.0)).collect(),
        }
    }

    fn single_label(n: usize, classes: usize) -> GroundTruthMatrix {
        let labels: Vec<Vec<bool>> = (0..n).map(|i| (0..classes).map(|c| i % classes == c).collect()).collect();
        let names: Vec<String> = (0..classes).map(|c| format!("c{c}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        gt_from(&labels, &refs)
    }

    #[test]
    fn sizes_follow_fractions() {
        let gt = single_label(100, 4);
        let out = split(&gt, [0.7, 0.15, 0.15], 42).unwrap();
        assert_eq!(
            (out.splits.train.len(), out.splits.val.len(), out.splits.test.len()),
            (70, 15, 15)
        );
        let mut all: Vec<usize> = [&out.splits.train, &out.splits.val, &out.splits.test]
            .iter()
            .flat_map(|v| v.iter().copied())
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100);
        assert_eq!(out, split(&gt, [0.7, 0.15, 0.15], 42).unwrap());
        assert_ne!(out.splits, split(&gt, [0.7, 0.15, 0.15], 43).unwrap().splits);
    }

    #[test]
    fn every_split_sees_every_class() {
        // rare class with exactly three positives
        let mut labels: Vec<Vec<bool>> = (0..60).map(|_| vec![true, false]).collect();
        for r in [5, 17, 40] {
            labels[r] = vec![false, true];
        }
        labels.push(vec![false, false]);
        let gt = gt_from(&labels, &["common", "rare"]);
        for seed in 0..20 {
            let out = split(&gt, [0.7, 0.15, 0.15], seed).unwrap();
            for part in [&out.splits.train, &out.splits.val, &out.splits.test] {
                assert!(part.iter().any(|&r| gt.matrix[[r, 1]]), "seed {seed}");
                assert!(!part.contains(&60), "unannotated row leaked");
            }
        }
    }

    #[test]
    fn sparse_classes_are_excluded() {
        let mut labels: Vec<Vec<bool>> = (0..30).map(|_| vec![true, false]).collect();
        labels[0] = vec![false, true];
        labels[1] = vec![false, true];
        let gt = gt_from(&labels, &["a", "b"]);
        let out = split(&gt, [0.7, 0.15, 0.15], 0).unwrap();
        assert_eq!(out.excluded_classes, vec!["b"]);
        assert_eq!(out.classes, vec!["a"]);
        assert_eq!(out.splits.train.len() + out.splits.val.len() + out.splits.test.len(), 28);
        let gt = gt_from(&labels[..2], &["a", "b"]);
        assert!(matches!(split(&gt, [0.7, 0.15, 0.15], 0), Err(EvalError::NoProbeClasses)));
    }

    fn clusters(n_per: usize, spread: f32, seed: u64) -> (Array2<f32>, GroundTruthMatrix) {
        let centers = [[5.0f32, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 5.0]];
        let mut rng = seeded_rng(seed);
        let noise = Normal::new(0.0f32, spread).unwrap();
        let n = 3 * n_per;
        let x = Array2::from_shape_fn((n, 3), |(i, j)| centers[i % 3][j] + noise.sample(&mut rng));
        (x, single_label(n, 3))
    }

    #[test]
    fn knn_identity_and_prior_limit() {
        let x = Array2::from_shape_vec((4, 1), vec![0.0f32, 10.0, 0.0, 10.0]).unwrap();
        let y = Array2::from_shape_vec((2, 2), vec![true, false, false, true]).unwrap();
        let s = knn_scores(x.slice(ndarray::s![..2, ..]), &y, x.slice(ndarray::s![2.., ..]), 1);
        assert_eq!(s, Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let s = knn_scores(x.slice(ndarray::s![..2, ..]), &y, x.slice(ndarray::s![2.., ..]), 2);
        assert!(s.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn knn_on_separated_clusters() {
        let (x, gt) = clusters(60, 0.5, 1);
        let out = split(&gt, [0.7, 0.15, 0.15], 42).unwrap();
        let r = knn_probe("m", ProbeData::new(x.view(), &gt, &out), DEFAULT_KNN_K).unwrap();
        assert!(r.map_score >= 0.95, "{}", r.map_score);
        let mean = r.per_class_ap.values().sum::<f64>() / r.per_class_ap.len() as f64;
        assert!((mean - r.map_score).abs() < 1e-9);
    }

    #[test]
    fn linear_probe_separable_and_zero_epochs() {
        let (x, gt) = clusters(60, 0.3, 2);
        let out = split(&gt, [0.7, 0.15, 0.15], 42).unwrap();
        let (probe, r) = train_linear_probe("m", ProbeData::new(x.view(), &gt, &out), &ProbeHyperparams::default()).unwrap();
        assert!(r.map_score >= 0.99, "{}", r.map_score);
        assert_eq!(probe.classes, gt.classes);
        assert!(probe.weights.iter().all(|v| v.is_finite()));

        let zero = ProbeHyperparams { max_epochs: 0, ..Default::default() };
        let (probe, _) = train_linear_probe("m", ProbeData::new(x.view(), &gt, &out), &zero).unwrap();
        assert!(probe.scores(x.view()).iter().all(|&s| s == 0.5));
    }

    #[test]
    fn probe_persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let probe = LinearProbe {
            model: "m".into(),
            classes: vec!["a".into(), "b".into()],
            weights: Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f32 - 1.5),
            bias: vec![0.25, -0.5],
        };
        probe.save(dir.path()).unwrap();
        assert!(LinearProbe::exists(dir.path()));
        assert_eq!(LinearProbe::load(dir.path()).unwrap(), probe);
        let head = probe.to_head();
        assert_eq!(head.classes(), &probe.classes[..]);
    }
}
