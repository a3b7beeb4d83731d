//! Default labels from file names and folders, ground-truth annotation
//! tables, and their mapping onto model segments.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::OnceLock;

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime, TimeZone, Timelike, Utc};
use ndarray::Array2;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::audio::TimeSpan;
use crate::dataset::{DatasetIndex, EmbeddingSet};

/// Overlap tolerance so that boundary cases such as `1.0 >= 0.5 * 2.0`
/// survive float rounding in the segment grid.
const OVERLAP_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("cannot read annotations {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("annotation table is missing column {0:?}")]
    MissingColumn(String),
    #[error("annotation table needs exactly one label:<name> column, found {0}")]
    LabelColumns(usize),
    #[error("annotation row {row}: {reason}")]
    Row { row: usize, reason: String },
}

fn patterns() -> &'static [Regex; 4] {
    static P: OnceLock<[Regex; 4]> = OnceLock::new();
    P.get_or_init(|| {
        [
            Regex::new(r"(?:^|\D)(\d{4})(\d{2})(\d{2})_(\d{2})(\d{2})(\d{2})(?:\D|$)").unwrap(),
            Regex::new(r"(?:^|\D)(\d{2})(\d{2})(\d{2})_(\d{2})(\d{2})(\d{2})(?:\D|$)").unwrap(),
            Regex::new(r"(\d{4})-(\d{2})-(\d{2})T(\d{2})-(\d{2})-(\d{2})").unwrap(),
            Regex::new(r"^([0-9A-Fa-f]{8})$").unwrap(),
        ]
    })
}

fn civil(caps: &regex::Captures<'_>, century: i32) -> Option<DateTime<Utc>> {
    let n = |i: usize| caps[i].parse::<u32>().ok();
    let date = NaiveDate::from_ymd_opt(century + n(1)? as i32, n(2)?, n(3)?)?;
    let dt: NaiveDateTime = date.and_hms_opt(n(4)?, n(5)?, n(6)?)?;
    Some(Utc.from_utc_datetime(&dt))
}

/// Recording start encoded in a file name. Patterns are tried in order:
/// `YYYYMMDD_HHMMSS`, `YYMMDD_HHMMSS` (20YY), `YYYY-MM-DDTHH-MM-SS`, and an
/// 8-hex-digit UNIX epoch stem. Times are UTC.
pub fn get_dt_filename(filename: &str) -> Option<DateTime<Utc>> {
    let name = filename.rsplit(['/', '\\']).next().unwrap_or(filename);
    let stem = match name.rfind('.') {
        Some(i) if i > 0 => &name[..i],
        _ => name,
    };
    let [long, short, iso, hex] = patterns();
    if let Some(dt) = long.captures(stem).and_then(|c| civil(&c, 0)) {
        return Some(dt);
    }
    if let Some(dt) = short.captures(stem).and_then(|c| civil(&c, 2000)) {
        return Some(dt);
    }
    if let Some(dt) = iso.captures(stem).and_then(|c| civil(&c, 0)) {
        return Some(dt);
    }
    let caps = hex.captures(stem)?;
    let secs = i64::from_str_radix(&caps[1], 16).ok()?;
    Utc.timestamp_opt(secs, 0).single()
}

/// The automatically derived label sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefaultLabelKind {
    TimeOfDay,
    DayOfYear,
    ContinuousTimestamp,
    ParentDirectory,
    AudioFileName,
}

impl DefaultLabelKind {
    pub const ALL: [DefaultLabelKind; 5] = [
        Self::TimeOfDay,
        Self::DayOfYear,
        Self::ContinuousTimestamp,
        Self::ParentDirectory,
        Self::AudioFileName,
    ];

    /// Categorical sets usable as clustering targets.
    pub const CATEGORICAL: [DefaultLabelKind; 4] = [
        Self::TimeOfDay,
        Self::DayOfYear,
        Self::ParentDirectory,
        Self::AudioFileName,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::TimeOfDay => "time_of_day",
            Self::DayOfYear => "day_of_year",
            Self::ContinuousTimestamp => "continuous_timestamp",
            Self::ParentDirectory => "parent_directory",
            Self::AudioFileName => "audio_file_name",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentLabels {
    pub time_of_day: Option<u32>,
    pub day_of_year: Option<u32>,
    /// UTC seconds since the epoch.
    pub continuous_timestamp: Option<f64>,
    pub parent_directory: String,
    pub audio_file_name: String,
}

impl SegmentLabels {
    pub fn value(&self, kind: DefaultLabelKind) -> Option<String> {
        match kind {
            DefaultLabelKind::TimeOfDay => self.time_of_day.map(|v| v.to_string()),
            DefaultLabelKind::DayOfYear => self.day_of_year.map(|v| v.to_string()),
            DefaultLabelKind::ContinuousTimestamp => {
                self.continuous_timestamp.map(|v| format!("{v}"))
            }
            DefaultLabelKind::ParentDirectory => Some(self.parent_directory.clone()),
            DefaultLabelKind::AudioFileName => Some(self.audio_file_name.clone()),
        }
    }
}

/// Default labels for every segment, rows aligned with the stacked
/// embeddings of one model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DefaultLabels {
    pub rows: Vec<SegmentLabels>,
}

impl DefaultLabels {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, kind: DefaultLabelKind) -> Vec<Option<String>> {
        self.rows.iter().map(|r| r.value(kind)).collect()
    }
}

fn segment_labels(
    start: Option<DateTime<Utc>>,
    offset_s: f64,
    parent: &str,
    stem: &str,
) -> SegmentLabels {
    let instant = start.map(|t| {
        let micros = (offset_s * 1e6).round() as i64;
        t + chrono::Duration::microseconds(micros)
    });
    SegmentLabels {
        time_of_day: instant.map(|t| t.hour()),
        day_of_year: instant.map(|t| t.ordinal()),
        continuous_timestamp: instant.map(|t| t.timestamp_micros() as f64 / 1e6),
        parent_directory: parent.to_string(),
        audio_file_name: stem.to_string(),
    }
}

/// Map file-level default labels onto each segment of `sets`.
pub fn create_default_labels(index: &DatasetIndex, sets: &[EmbeddingSet]) -> DefaultLabels {
    let mut rows = Vec::with_capacity(sets.iter().map(|s| s.timestamps.len()).sum());
    for set in sets {
        let mut parts: Vec<&str> = set.file.split('/').collect();
        let name = parts.pop().unwrap_or("");
        let parent = parts.last().copied().unwrap_or(index.dataset_name.as_str());
        let stem = match name.rfind('.') {
            Some(i) if i > 0 => &name[..i],
            _ => name,
        };
        let start = get_dt_filename(name);
        for span in &set.timestamps {
            rows.push(segment_labels(start, span.start_s, parent, stem));
        }
    }
    DefaultLabels { rows }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub audiofilename: String,
    pub start: f64,
    pub end: f64,
    pub label: String,
}

impl Annotation {
    pub fn span(&self) -> TimeSpan {
        TimeSpan::new(self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationTable {
    /// Suffix of the `label:<name>` column, e.g. `species`.
    pub class_set: String,
    pub annotations: Vec<Annotation>,
}

impl AnnotationTable {
    /// Sorted distinct class names.
    pub fn classes(&self) -> Vec<String> {
        self.annotations
            .iter()
            .map(|a| a.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Annotation file references that match no indexed file.
    pub fn unmatched(&self, index: &DatasetIndex) -> Vec<String> {
        self.annotations
            .iter()
            .map(|a| a.audiofilename.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .filter(|f| index.resolve_file(f).is_none())
            .map(str::to_string)
            .collect()
    }
}

/// Parse a ground-truth CSV with columns `audiofilename`, `start`, `end` and
/// exactly one `label:<name>`.
pub fn parse_annotations(path: &Path) -> Result<AnnotationTable, LabelError> {
    let text = std::fs::read(path).map_err(|e| LabelError::Read {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_annotations_bytes(&text)
}

pub fn parse_annotations_bytes(bytes: &[u8]) -> Result<AnnotationTable, LabelError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| LabelError::Read {
            path: "<csv>".into(),
            reason: e.to_string(),
        })?
        .clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| LabelError::MissingColumn(name.to_string()))
    };
    let file_col = find("audiofilename")?;
    let start_col = find("start")?;
    let end_col = find("end")?;
    let label_cols: Vec<(usize, &str)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix("label:").map(|s| (i, s)))
        .collect();
    let (label_col, class_set) = match label_cols.as_slice() {
        [(i, name)] if !name.is_empty() => (*i, name.to_string()),
        [_] => return Err(LabelError::MissingColumn("label:<name>".into())),
        [] => return Err(LabelError::MissingColumn("label:<name>".into())),
        many => return Err(LabelError::LabelColumns(many.len())),
    };

    let mut annotations = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // header is line 1
        let row = i + 2;
        let record = record.map_err(|e| LabelError::Row {
            row,
            reason: e.to_string(),
        })?;
        let field = |c: usize| record.get(c).unwrap_or("");
        let num = |c: usize, what: &str| {
            field(c).parse::<f64>().map_err(|_| LabelError::Row {
                row,
                reason: format!("{what} {:?} is not a number", field(c)),
            })
        };
        let start = num(start_col, "start")?;
        let end = num(end_col, "end")?;
        if !(start.is_finite() && end.is_finite()) || start < 0.0 || start >= end {
            return Err(LabelError::Row {
                row,
                reason: format!("need 0 <= start < end, got start {start} end {end}"),
            });
        }
        let label = field(label_col).to_string();
        if label.is_empty() {
            return Err(LabelError::Row {
                row,
                reason: "empty label".into(),
            });
        }
        let audiofilename = field(file_col).to_string();
        if audiofilename.is_empty() {
            return Err(LabelError::Row {
                row,
                reason: "empty audiofilename".into(),
            });
        }
        annotations.push(Annotation {
            audiofilename,
            start,
            end,
            label,
        });
    }
    Ok(AnnotationTable {
        class_set,
        annotations,
    })
}

/// Whether an annotation marks a segment: overlap of at least `threshold`
/// times the shorter of the two spans.
pub fn overlaps_enough(segment: &TimeSpan, annotation: &TimeSpan, threshold: f64) -> bool {
    let overlap = segment.overlap(annotation);
    overlap > 0.0 && overlap + OVERLAP_EPS >= threshold * segment.len().min(annotation.len())
}

/// Multi-label targets for one model's segments.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMatrix {
    pub classes: Vec<String>,
    /// `(n_segments, n_classes)`.
    pub matrix: Array2<bool>,
    pub timestamps: Vec<TimeSpan>,
}

impl GroundTruthMatrix {
    pub fn n_segments(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_annotated(&self, row: usize) -> bool {
        self.matrix.row(row).iter().any(|&b| b)
    }

    pub fn annotated_rows(&self) -> Vec<usize> {
        (0..self.n_segments()).filter(|&r| self.is_annotated(r)).collect()
    }

    /// Positive classes of a row joined with `+`, or `None` if unannotated.
    pub fn combination(&self, row: usize) -> Option<String> {
        let names: Vec<&str> = self
            .matrix
            .row(row)
            .iter()
            .zip(&self.classes)
            .filter(|(b, _)| **b)
            .map(|(_, c)| c.as_str())
            .collect();
        (!names.is_empty()).then(|| names.join("+"))
    }

    pub fn positives(&self, class: usize) -> usize {
        self.matrix.column(class).iter().filter(|&&b| b).count()
    }

    pub fn as_f32(&self) -> Array2<f32> {
        self.matrix.mapv(|b| if b { 1.0 } else { 0.0 })
    }
}

/// Map annotations onto the segments of `sets` (one model, index order).
/// Rows follow the concatenated sets; files are matched by relative path,
/// then by unique file name. Unmatched references are logged and ignored.
pub fn ground_truth_by_model(
    table: &AnnotationTable,
    index: &DatasetIndex,
    sets: &[EmbeddingSet],
    overlap_threshold: f64,
) -> GroundTruthMatrix {
    let classes = table.classes();
    let class_idx: HashMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let mut by_file: HashMap<&str, Vec<(TimeSpan, usize)>> = HashMap::new();
    let mut unmatched = BTreeSet::new();
    for a in &table.annotations {
        match index.resolve_file(&a.audiofilename) {
            Some(entry) => by_file
                .entry(entry.rel_path.as_str())
                .or_default()
                .push((a.span(), class_idx[a.label.as_str()])),
            None => {
                unmatched.insert(a.audiofilename.as_str());
            }
        }
    }
    for f in unmatched {
        warn!(file = f, "annotation references a file not in the dataset; ignored");
    }

    let n: usize = sets.iter().map(|s| s.timestamps.len()).sum();
    let mut matrix = Array2::from_elem((n, classes.len()), false);
    let mut timestamps = Vec::with_capacity(n);
    let mut row = 0;
    for set in sets {
        let anns = by_file.get(set.file.as_str());
        for seg in &set.timestamps {
            if let Some(anns) = anns {
                for (span, c) in anns {
                    if overlaps_enough(seg, span, overlap_threshold) {
                        matrix[[row, *c]] = true;
                    }
                }
            }
            timestamps.push(*seg);
            row += 1;
        }
    }
    GroundTruthMatrix {
        classes,
        matrix,
        timestamps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::AudioFileEntry;
    use proptest::prelude::*;

    fn utc(y: i32, mo: u32, d: u32, h: u32, mi: u32, s: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(y, mo, d, h, mi, s).unwrap()
    }

    #[test]
    fn filename_patterns() {
        assert_eq!(get_dt_filename("20240501_063000.wav"), Some(utc(2024, 5, 1, 6, 30, 0)));
        assert_eq!(get_dt_filename("site/AM01_20240501_063000.flac"), Some(utc(2024, 5, 1, 6, 30, 0)));
        assert_eq!(get_dt_filename("240501_063000.wav"), Some(utc(2024, 5, 1, 6, 30, 0)));
        assert_eq!(get_dt_filename("rec_2023-12-31T23-59-58.wav"), Some(utc(2023, 12, 31, 23, 59, 58)));
        assert_eq!(get_dt_filename("site_recording_final.wav"), None);
        assert_eq!(get_dt_filename("20241301_063000.wav"), None);
    }

    #[test]
    fn hex_epoch() {
        // independent: 0x5FAD2A80 = 5*16^7 + 15*16^6 + 10*16^5 + 13*16^4 + 2*16^3 + 10*16^2 + 8*16
        let secs: i64 = [5, 15, 10, 13, 2, 10, 8, 0]
            .iter()
            .fold(0i64, |acc, d| acc * 16 + d);
        assert_eq!(secs, 1_605_184_128);
        // 1605184128 = 18578 days + 44928 s; day 18578 after 1970-01-01 is 2020-11-12
        assert_eq!(secs / 86_400, 18_578);
        assert_eq!(secs % 86_400, 12 * 3600 + 28 * 60 + 48);
        assert_eq!(get_dt_filename("5FAD2A80.WAV"), Some(utc(2020, 11, 12, 12, 28, 48)));
        assert_eq!(get_dt_filename("5fad2a80.wav"), Some(utc(2020, 11, 12, 12, 28, 48)));
    }

    fn idx(files: &[&str]) -> DatasetIndex {
        DatasetIndex {
            dataset_name: "data".into(),
            files: files
                .iter()
                .map(|f| AudioFileEntry {
                    rel_path: f.to_string(),
                    size: 1,
                    mtime: 0,
                    duration_s: 7200.0,
                    sample_rate: 16_000,
                })
                .collect(),
            skipped: vec![],
        }
    }

    fn set(file: &str, spans: &[(f64, f64)]) -> EmbeddingSet {
        EmbeddingSet {
            file: file.into(),
            matrix: Array2::zeros((spans.len(), 1)),
            timestamps: spans.iter().map(|&(a, b)| TimeSpan::new(a, b)).collect(),
        }
    }

    #[test]
    fn default_labels_follow_segment_offsets() {
        let index = idx(&["siteA/20240501_063000.wav", "loose.wav"]);
        let sets = [
            set("siteA/20240501_063000.wav", &[(0.0, 3.0), (3600.0, 3603.0)]),
            set("loose.wav", &[(0.0, 3.0)]),
        ];
        let labels = create_default_labels(&index, &sets);
        assert_eq!(labels.len(), 3);
        let r0 = &labels.rows[0];
        assert_eq!(r0.time_of_day, Some(6));
        assert_eq!(r0.continuous_timestamp, Some(utc(2024, 5, 1, 6, 30, 0).timestamp() as f64));
        let r1 = &labels.rows[1];
        assert_eq!(r1.time_of_day, Some(7));
        // Jan 31 + Feb 29 (leap) + Mar 31 + Apr 30 + 1
        assert_eq!(r1.day_of_year, Some(31 + 29 + 31 + 30 + 1));
        assert_eq!(r1.parent_directory, "siteA");
        assert_eq!(r1.audio_file_name, "20240501_063000");
        let r2 = &labels.rows[2];
        assert_eq!(r2.time_of_day, None);
        assert_eq!(r2.parent_directory, "data");
        assert_eq!(r2.audio_file_name, "loose");
    }

    #[test]
    fn csv_contract() {
        let t = parse_annotations_bytes(b"audiofilename,start,end,label:species\na.wav,2.0,4.0,frog\n").unwrap();
        assert_eq!(t.class_set, "species");
        assert_eq!(t.annotations[0].label, "frog");
        let t = parse_annotations_bytes(b"start,end,audiofilename,label:individual,note\n1,2,a.wav,bob,x\n").unwrap();
        assert_eq!(t.class_set, "individual");
        assert_eq!(t.annotations[0].audiofilename, "a.wav");
        assert!(matches!(
            parse_annotations_bytes(b"audiofilename,start,end,label:a,label:b\n"),
            Err(LabelError::LabelColumns(2))
        ));
        assert!(matches!(
            parse_annotations_bytes(b"audiofilename,start,label:a\n"),
            Err(LabelError::MissingColumn(c)) if c == "end"
        ));
        match parse_annotations_bytes(b"audiofilename,start,end,label:a\nx.wav,1,2,a\nx.wav,3,3,a\n") {
            Err(LabelError::Row { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
    }

    fn table(rows: &[(&str, f64, f64, &str)]) -> AnnotationTable {
        AnnotationTable {
            class_set: "species".into(),
            annotations: rows
                .iter()
                .map(|&(f, s, e, l)| Annotation {
                    audiofilename: f.into(),
                    start: s,
                    end: e,
                    label: l.into(),
                })
                .collect(),
        }
    }

    fn grid(file: &str, window: f64, n: usize) -> EmbeddingSet {
        let spans: Vec<(f64, f64)> = (0..n).map(|i| (i as f64 * window, (i + 1) as f64 * window)).collect();
        set(file, &spans)
    }

    #[test]
    fn overlap_rule_examples() {
        let index = idx(&["a.wav"]);
        let sets = [grid("a.wav", 3.0, 4)];
        let gt = ground_truth_by_model(&table(&[("a.wav", 2.0, 4.0, "frog")]), &index, &sets, 0.5);
        assert_eq!(gt.matrix.column(0).to_vec(), vec![true, true, false, false]);
        let gt = ground_truth_by_model(&table(&[("a.wav", 0.0, 3.0, "frog")]), &index, &sets, 0.5);
        assert_eq!(gt.matrix.column(0).to_vec(), vec![true, false, false, false]);
        let gt = ground_truth_by_model(&table(&[("a.wav", 7.4, 7.5, "chirp")]), &index, &sets, 0.5);
        assert_eq!(gt.matrix.column(0).to_vec(), vec![false, false, true, false]);
    }

    #[test]
    fn basename_matching_and_unknown_files() {
        let index = idx(&["siteA/a.wav", "siteB/b.wav"]);
        let sets = [grid("siteA/a.wav", 1.0, 2), grid("siteB/b.wav", 1.0, 2)];
        let t = table(&[("a.wav", 0.0, 1.0, "x"), ("siteB/b.wav", 1.0, 2.0, "y"), ("zzz.wav", 0.0, 1.0, "x")]);
        assert_eq!(t.unmatched(&index), vec!["zzz.wav".to_string()]);
        let gt = ground_truth_by_model(&t, &index, &sets, 0.5);
        assert_eq!(gt.classes, vec!["x", "y"]);
        assert_eq!(gt.annotated_rows(), vec![0, 3]);
        assert_eq!(gt.combination(0).as_deref(), Some("x"));
        assert_eq!(gt.combination(1), None);
    }

    fn overlap_oracle(seg: (f64, f64), ann: (f64, f64), thr: f64) -> bool {
        let ov = seg.1.min(ann.1) - seg.0.max(ann.0);
        ov > 0.0 && ov + 1e-9 >= thr * (seg.1 - seg.0).min(ann.1 - ann.0)
    }

    fn arb_annotations() -> impl Strategy<Value = Vec<(f64, f64, u8)>> {
        proptest::collection::vec((0.0f64..50.0, 0.05f64..10.0, 0u8..3), 0..20)
            .prop_map(|v| v.into_iter().map(|(s, l, c)| (s, s + l, c)).collect())
    }

    fn build(anns: &[(f64, f64, u8)], shift: f64) -> AnnotationTable {
        AnnotationTable {
            class_set: "c".into(),
            annotations: anns
                .iter()
                .map(|&(s, e, c)| Annotation {
                    audiofilename: "f.wav".into(),
                    start: s + shift,
                    end: e + shift,
                    label: format!("c{c}"),
                })
                .collect(),
        }
    }

    proptest! {
        #[test]
        fn rows_align_with_any_window(anns in arb_annotations(), window in prop::sample::select(vec![0.5f64, 0.96, 1.0, 3.0, 5.0])) {
            let n = (60.0 / window).ceil() as usize;
            let index = idx(&["f.wav"]);
            let sets = [grid("f.wav", window, n)];
            let gt = ground_truth_by_model(&build(&anns, 0.0), &index, &sets, 0.5);
            prop_assert_eq!(gt.n_segments(), n);
            for (r, span) in gt.timestamps.iter().enumerate() {
                for (c, class) in gt.classes.iter().enumerate() {
                    let expect = anns.iter().any(|&(s, e, k)| format!("c{k}") == *class
                        && overlap_oracle((span.start_s, span.end_s), (s, e), 0.5));
                    prop_assert_eq!(gt.matrix[[r, c]], expect);
                }
            }
        }

        #[test]
        fn lowering_threshold_keeps_positives(anns in arb_annotations(), hi in 0.05f64..1.0, frac in 0.0f64..1.0) {
            let lo = hi * frac;
            let index = idx(&["f.wav"]);
            let sets = [grid("f.wav", 3.0, 20)];
            let t = build(&anns, 0.0);
            let a = ground_truth_by_model(&t, &index, &sets, hi);
            let b = ground_truth_by_model(&t, &index, &sets, lo.max(1e-6));
            for (x, y) in a.matrix.iter().zip(b.matrix.iter()) {
                prop_assert!(!*x || *y);
            }
        }

        #[test]
        fn common_shift_is_invisible(anns in arb_annotations(), k in 0usize..20) {
            // shift by whole windows so the segment grid maps onto itself
            let window = 3.0;
            let shift = k as f64 * window;
            let index = idx(&["f.wav"]);
            let n = 20;
            let base = ground_truth_by_model(&build(&anns, 0.0), &index, &[grid("f.wav", window, n)], 0.5);
            let spans: Vec<(f64, f64)> = (0..n).map(|i| (i as f64 * window + shift, (i + 1) as f64 * window + shift)).collect();
            let moved = ground_truth_by_model(&build(&anns, shift), &index, &[set("f.wav", &spans)], 0.5);
            prop_assert_eq!(base.matrix, moved.matrix);
        }

        #[test]
        fn default_labels_are_total(names in proptest::collection::vec("[a-z0-9_]{1,12}(/[a-z0-9_]{1,8})?", 1..6)) {
            let files: Vec<String> = names.iter().map(|n| format!("{n}.wav")).collect();
            let refs: Vec<&str> = files.iter().map(String::as_str).collect();
            let index = idx(&refs);
            let sets: Vec<EmbeddingSet> = files.iter().map(|f| grid(f, 1.0, 3)).collect();
            let labels = create_default_labels(&index, &sets);
            prop_assert_eq!(labels.len(), 3 * files.len());
            for r in &labels.rows {
                prop_assert!(!r.parent_directory.is_empty());
                prop_assert!(!r.audio_file_name.is_empty());
                prop_assert_eq!(r.time_of_day.is_some(), r.continuous_timestamp.is_some());
            }
        }
    }
}
