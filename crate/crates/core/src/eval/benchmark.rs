//! Classifier predictions scored against mapped ground truth.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use tracing::info;

use super::probe::{mean_ap, score_matrix};
use super::EvalError;
use crate::dataset::EmbeddingSet;
use crate::labels::GroundTruthMatrix;
use crate::predictions::PredictionEvent;

/// Overlap needed for an event to count on a segment; absorbs the
/// millisecond rounding of selection-table times.
const MIN_OVERLAP_S: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub model: String,
    pub source: String,
    pub per_class_ap: BTreeMap<String, f64>,
    pub map_score: f64,
    pub evaluated_classes: Vec<String>,
    /// Prediction classes with no annotation counterpart.
    pub ignored_prediction_classes: Vec<String>,
    /// Annotation classes the predictor cannot emit.
    pub unpredicted_classes: Vec<String>,
    pub notices: Vec<String>,
}

/// Per-segment scores for `classes`: the highest score among events of the
/// class overlapping the segment, else 0. Rows follow `sets` in order.
pub fn segment_scores(
    events: &[PredictionEvent],
    sets: &[EmbeddingSet],
    classes: &[String],
) -> Array2<f64> {
    let class_idx: HashMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let mut by_file: HashMap<&str, Vec<&PredictionEvent>> = HashMap::new();
    for ev in events {
        if class_idx.contains_key(ev.class.as_str()) {
            by_file.entry(ev.audiofilename.as_str()).or_default().push(ev);
        }
    }
    let n: usize = sets.iter().map(|s| s.timestamps.len()).sum();
    let mut out = Array2::zeros((n, classes.len()));
    let mut row = 0;
    for set in sets {
        let evs = by_file.get(set.file.as_str());
        for seg in &set.timestamps {
            for ev in evs.into_iter().flatten() {
                if seg.overlap(&ev.span()) > MIN_OVERLAP_S {
                    let c = class_idx[ev.class.as_str()];
                    out[[row, c]] = f64::max(out[[row, c]], ev.score);
                }
            }
            row += 1;
        }
    }
    out
}

/// Macro mAP of predictions over the classes shared by the predictor and the
/// annotations.
pub fn benchmark(
    model: &str,
    source: &str,
    events: &[PredictionEvent],
    predicted_classes: &[String],
    gt: &GroundTruthMatrix,
    sets: &[EmbeddingSet],
) -> Result<BenchmarkResult, EvalError> {
    let predicted: BTreeSet<&str> = predicted_classes.iter().map(String::as_str).collect();
    let annotated: BTreeSet<&str> = gt.classes.iter().map(String::as_str).collect();
    let shared: Vec<String> = gt
        .classes
        .iter()
        .filter(|c| predicted.contains(c.as_str()))
        .cloned()
        .collect();
    if shared.is_empty() {
        return Err(EvalError::NoClassOverlap {
            predicted: predicted_classes.join(","),
            annotated: gt.classes.join(","),
        });
    }
    let ignored: Vec<String> = predicted
        .difference(&annotated)
        .map(|s| s.to_string())
        .collect();
    let unpredicted: Vec<String> = annotated
        .difference(&predicted)
        .map(|s| s.to_string())
        .collect();
    let mut notices = Vec::new();
    if !ignored.is_empty() {
        notices.push(format!(
            "{} prediction class(es) without annotations ignored: {}",
            ignored.len(),
            ignored.join(", ")
        ));
    }
    if !unpredicted.is_empty() {
        notices.push(format!(
            "annotation class(es) the predictor cannot emit: {}",
            unpredicted.join(", ")
        ));
    }
    let scores = segment_scores(events, sets, &shared);
    let cols: Vec<usize> = shared
        .iter()
        .map(|c| gt.classes.iter().position(|g| g == c).expect("shared class"))
        .collect();
    let labels = gt.matrix.select(ndarray::Axis(1), &cols);
    let (per_class_ap, more) = score_matrix(&scores, &labels, &shared)?;
    notices.extend(more);
    for n in &notices {
        info!(model, source, "{n}");
    }
    Ok(BenchmarkResult {
        model: model.to_string(),
        source: source.to_string(),
        map_score: mean_ap(&per_class_ap)?,
        evaluated_classes: per_class_ap.keys().cloned().collect(),
        per_class_ap,
        ignored_prediction_classes: ignored,
        unpredicted_classes: unpredicted,
        notices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::TimeSpan;
    use crate::predictions::scores_to_events;

    fn fixture() -> (Vec<EmbeddingSet>, GroundTruthMatrix) {
        let n = 30;
        let spans: Vec<TimeSpan> = (0..n).map(|i| TimeSpan::new(i as f64, i as f64 + 1.0)).collect();
        let m = Array2::from_shape_fn((n, 3), |(i, c)| (i / 3 + c) % 4 == 0);
        let gt = GroundTruthMatrix {
            classes: vec!["a".into(), "b".into(), "c".into()],
            matrix: m,
            timestamps: spans.clone(),
        };
        let set = EmbeddingSet {
            file: "f.wav".into(),
            matrix: Array2::zeros((n, 1)),
            timestamps: spans,
        };
        (vec![set], gt)
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let (sets, gt) = fixture();
        let scores = gt.as_f32();
        let events = scores_to_events("f.wav", scores.view(), &gt.timestamps, &gt.classes, 0.5).unwrap();
        let r = benchmark("m", "classifier", &events, &gt.classes, &gt, &sets).unwrap();
        assert_eq!(r.map_score, 1.0);
        assert_eq!(r.evaluated_classes.len(), 3);
    }

    #[test]
    fn name_matching() {
        let (sets, gt) = fixture();
        let mut predicted: Vec<String> = (0..7).map(|i| format!("other{i}")).collect();
        predicted.extend(gt.classes.iter().cloned());
        let r = benchmark("m", "classifier", &[], &predicted, &gt, &sets).unwrap();
        assert_eq!(r.evaluated_classes, gt.classes);
        assert_eq!(r.ignored_prediction_classes.len(), 7);
        let err = benchmark("m", "classifier", &[], &["zzz".to_string()], &gt, &sets).unwrap_err();
        assert!(matches!(err, EvalError::NoClassOverlap { .. }));
    }

    #[test]
    fn touching_events_do_not_leak() {
        let (sets, _) = fixture();
        let ev = PredictionEvent {
            audiofilename: "f.wav".into(),
            start_s: 2.0,
            end_s: 4.0,
            class: "a".into(),
            score: 0.7,
        };
        let s = segment_scores(&[ev], &sets, &["a".to_string()]);
        let col: Vec<f64> = s.column(0).to_vec();
        assert_eq!(&col[..5], &[0.0, 0.0, 0.7, 0.7, 0.0]);
    }
}
