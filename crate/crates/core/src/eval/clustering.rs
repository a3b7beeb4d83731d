//! k-means clustering of embeddings scored against label sets.
//!
//! For each categorical default label set with at least two distinct values,
//! the rows carrying that label are clustered with k equal to the number of
//! distinct values. With ground truth, the annotated rows are clustered
//! against their class combinations, and the whole dataset is clustered with
//! unannotated rows as one extra group.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use tracing::info;

use super::kmeans::{kmeans, KMeansResult};
use super::metrics::{ami, ari};
use super::EvalError;
use crate::labels::{DefaultLabelKind, DefaultLabels, GroundTruthMatrix};

pub const GROUND_TRUTH: &str = "ground_truth";
pub const UNANNOTATED: &str = "unannotated";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusteringScope {
    Full,
    AnnotatedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub ami: f64,
    pub ari: f64,
}

impl Score {
    pub fn of(a: &[String], b: &[String]) -> Result<Self, EvalError> {
        Ok(Self {
            ami: ami(a, b)?,
            ari: ari(a, b)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    /// Label set whose distinct count set k.
    pub target: String,
    pub scope: ClusteringScope,
    pub k: usize,
    /// Dataset rows that were clustered, ascending.
    pub rows: Vec<usize>,
    /// Cluster id per entry of `rows`.
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Agreement of the clustering with every label set defined on `rows`.
    pub scores: BTreeMap<String, Score>,
}

impl ClusteringResult {
    pub fn target_score(&self) -> Option<&Score> {
        self.scores.get(&self.target)
    }

    /// Cluster id for a dataset row, if the row was clustered.
    pub fn cluster_of(&self, row: usize) -> Option<usize> {
        self.rows.binary_search(&row).ok().map(|i| self.assignments[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub model: String,
    pub n_segments: usize,
    pub results: Vec<ClusteringResult>,
    /// Ground truth combinations against each default label set, annotated
    /// rows only.
    pub cross_scores: BTreeMap<String, Score>,
    pub notices: Vec<String>,
}

impl ClusteringReport {
    pub fn find(&self, target: &str, scope: ClusteringScope) -> Option<&ClusteringResult> {
        self.results
            .iter()
            .find(|r| r.target == target && r.scope == scope)
    }
}

struct LabelColumn {
    name: String,
    values: Vec<Option<String>>,
}

fn distinct(values: &[Option<String>], rows: &[usize]) -> usize {
    rows.iter()
        .filter_map(|&r| values[r].as_deref())
        .collect::<BTreeSet<_>>()
        .len()
}

fn take(values: &[Option<String>], rows: &[usize]) -> Option<Vec<String>> {
    rows.iter().map(|&r| values[r].clone()).collect()
}

struct Clusterer<'a> {
    x: ArrayView2<'a, f32>,
    seed: u64,
    cache: HashMap<(usize, Vec<usize>), KMeansResult>,
}

impl Clusterer<'_> {
    fn run(&mut self, rows: &[usize], k: usize) -> Result<&KMeansResult, EvalError> {
        let key = (k, rows.to_vec());
        if !self.cache.contains_key(&key) {
            let sub: Array2<f32> = if rows.len() == self.x.nrows() {
                self.x.to_owned()
            } else {
                self.x.select(Axis(0), rows)
            };
            let result = kmeans(sub.view(), k, self.seed)?;
            self.cache.insert(key.clone(), result);
        }
        Ok(&self.cache[&key])
    }
}

fn score_all(
    columns: &[LabelColumn],
    rows: &[usize],
    assignments: &[usize],
) -> Result<BTreeMap<String, Score>, EvalError> {
    let clusters: Vec<String> = assignments.iter().map(|a| a.to_string()).collect();
    let mut scores = BTreeMap::new();
    for col in columns {
        if let Some(labels) = take(&col.values, rows) {
            scores.insert(col.name.clone(), Score::of(&clusters, &labels)?);
        }
    }
    Ok(scores)
}

/// Cluster and score. A model whose label sets are all degenerate yields an
/// empty result list with a notice.
pub fn run_clustering_task(
    model: &str,
    embeddings: ArrayView2<'_, f32>,
    defaults: &DefaultLabels,
    ground_truth: Option<&GroundTruthMatrix>,
    seed: u64,
) -> Result<ClusteringReport, EvalError> {
    let n = embeddings.nrows();
    let mut notices = Vec::new();
    let mut columns: Vec<LabelColumn> = DefaultLabelKind::CATEGORICAL
        .iter()
        .map(|k| LabelColumn {
            name: k.as_str().to_string(),
            values: defaults.column(*k),
        })
        .collect();
    if defaults.len() != n {
        return Err(EvalError::LengthMismatch(defaults.len(), n));
    }
    if let Some(gt) = ground_truth {
        if gt.n_segments() != n {
            return Err(EvalError::LengthMismatch(gt.n_segments(), n));
        }
        columns.push(LabelColumn {
            name: GROUND_TRUTH.into(),
            values: (0..n).map(|r| gt.combination(r)).collect(),
        });
    }

    let mut clusterer = Clusterer {
        x: embeddings,
        seed,
        cache: HashMap::new(),
    };
    let mut results = Vec::new();
    for col in columns.iter().filter(|c| c.name != GROUND_TRUTH) {
        let rows: Vec<usize> = (0..n).filter(|&r| col.values[r].is_some()).collect();
        let k = distinct(&col.values, &rows);
        if k < 2 {
            notices.push(format!(
                "{}: {} distinct value(s), comparison skipped",
                col.name, k
            ));
            continue;
        }
        let km = clusterer.run(&rows, k)?;
        let (assignments, inertia) = (km.assignments.clone(), km.inertia);
        let scores = score_all(&columns, &rows, &assignments)?;
        results.push(ClusteringResult {
            target: col.name.clone(),
            scope: ClusteringScope::Full,
            k,
            rows,
            assignments,
            inertia,
            scores,
        });
    }

    let mut cross_scores = BTreeMap::new();
    if let Some(gt) = ground_truth {
        let gt_col = columns.last().expect("ground truth column pushed");
        let annotated = gt.annotated_rows();
        let k = distinct(&gt_col.values, &annotated);
        if k >= 2 {
            let km = clusterer.run(&annotated, k)?;
            let (assignments, inertia) = (km.assignments.clone(), km.inertia);
            let scores = score_all(&columns, &annotated, &assignments)?;
            results.push(ClusteringResult {
                target: GROUND_TRUTH.into(),
                scope: ClusteringScope::AnnotatedOnly,
                k,
                rows: annotated.clone(),
                assignments,
                inertia,
                scores,
            });
        } else {
            notices.push(format!(
                "{GROUND_TRUTH}: {k} distinct class combination(s) among annotated segments, comparison skipped"
            ));
        }

        let full: Vec<String> = gt_col
            .values
            .iter()
            .map(|v| v.clone().unwrap_or_else(|| UNANNOTATED.into()))
            .collect();
        let all_rows: Vec<usize> = (0..n).collect();
        let k_full = full.iter().collect::<BTreeSet<_>>().len();
        if k_full >= 2 {
            let km = clusterer.run(&all_rows, k_full)?;
            let (assignments, inertia) = (km.assignments.clone(), km.inertia);
            let clusters: Vec<String> = assignments.iter().map(|a| a.to_string()).collect();
            let mut scores = score_all(&columns, &all_rows, &assignments)?;
            scores.insert(GROUND_TRUTH.into(), Score::of(&clusters, &full)?);
            results.push(ClusteringResult {
                target: GROUND_TRUTH.into(),
                scope: ClusteringScope::Full,
                k: k_full,
                rows: all_rows,
                assignments,
                inertia,
                scores,
            });
        }

        if !annotated.is_empty() {
            let truth = take(&gt_col.values, &annotated).expect("annotated rows have labels");
            for col in columns.iter().filter(|c| c.name != GROUND_TRUTH) {
                if let Some(labels) = take(&col.values, &annotated) {
                    cross_scores.insert(col.name.clone(), Score::of(&truth, &labels)?);
                }
            }
        }
    }
    if results.is_empty() {
        notices.push("clustering skipped: no label set with at least two distinct values".into());
    }
    for notice in &notices {
        info!(model, "{notice}");
    }
    Ok(ClusteringReport {
        model: model.to_string(),
        n_segments: n,
        results,
        cross_scores,
        notices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::TimeSpan;
    use crate::labels::SegmentLabels;

    fn fixture(single_site: bool) -> (Array2<f32>, DefaultLabels, GroundTruthMatrix) {
        // 3 classes of 10 points + 10 unannotated rows far from everything
        let n = 40;
        let x = Array2::from_shape_fn((n, 2), |(i, j)| {
            let g = i / 10;
            let jitter = (i % 10) as f32 * 0.01;
            if j == 0 { g as f32 * 10.0 + jitter } else { jitter }
        });
        let rows = (0..n)
            .map(|i| SegmentLabels {
                time_of_day: None,
                day_of_year: None,
                continuous_timestamp: None,
                parent_directory: if single_site || i % 2 == 0 { "A".into() } else { "B".into() },
                audio_file_name: format!("f{}", i / 20),
            })
            .collect();
        let mut m = Array2::from_elem((n, 3), false);
        for i in 0..30 {
            m[[i, i / 10]] = true;
        }
        let gt = GroundTruthMatrix {
            classes: vec!["a".into(), "b".into(), "c".into()],
            matrix: m,
            timestamps: (0..n).map(|i| TimeSpan::new(i as f64, i as f64 + 1.0)).collect(),
        };
        (x, DefaultLabels { rows }, gt)
    }

    #[test]
    fn both_scopes_present_with_ground_truth() {
        let (x, defaults, gt) = fixture(false);
        let report = run_clustering_task("m", x.view(), &defaults, Some(&gt), 42).unwrap();
        let ann = report.find(GROUND_TRUTH, ClusteringScope::AnnotatedOnly).unwrap();
        assert_eq!(ann.k, 3);
        assert_eq!(ann.rows.len(), 30);
        assert!((ann.target_score().unwrap().ami - 1.0).abs() < 1e-9);
        let full = report.find(GROUND_TRUTH, ClusteringScope::Full).unwrap();
        assert_eq!(full.k, 4);
        assert!((full.target_score().unwrap().ami - 1.0).abs() < 1e-9);
        assert!(report.find("parent_directory", ClusteringScope::Full).is_some());
        assert!(report.cross_scores.contains_key("audio_file_name"));
        assert_eq!(full.cluster_of(5), Some(full.assignments[5]));
        assert_eq!(ann.cluster_of(35), None);
    }

    #[test]
    fn degenerate_sets_are_skipped() {
        let (x, defaults, _) = fixture(true);
        let report = run_clustering_task("m", x.view(), &defaults, None, 42).unwrap();
        assert!(report.find("parent_directory", ClusteringScope::Full).is_none());
        assert!(report.find("time_of_day", ClusteringScope::Full).is_none());
        assert!(report.notices.iter().any(|n| n.starts_with("parent_directory")));
        assert!(report.find("audio_file_name", ClusteringScope::Full).is_some());
        let scores = &report.results[0].scores;
        assert!(scores.values().all(|s| s.ami <= 1.0 + 1e-12 && s.ari <= 1.0 + 1e-12));
    }

    #[test]
    fn nothing_to_compare_gives_notice() {
        let x = Array2::<f32>::zeros((2, 2));
        let defaults = DefaultLabels {
            rows: vec![
                SegmentLabels {
                    time_of_day: None,
                    day_of_year: None,
                    continuous_timestamp: None,
                    parent_directory: "A".into(),
                    audio_file_name: "f".into(),
                };
                2
            ],
        };
        let report = run_clustering_task("m", x.view(), &defaults, None, 1).unwrap();
        assert!(report.results.is_empty());
        assert!(report.notices.last().unwrap().starts_with("clustering skipped"));
    }
}
