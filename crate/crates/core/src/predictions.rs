//! Classifier scores to events, Raven selection tables, activity heatmaps
//! and selection export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate, Timelike};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::TimeSpan;
use crate::dataset::{ArtifactLayout, DatasetIndex};
use crate::labels::get_dt_filename;
use crate::util::atomic_write;

pub const RAVEN_HEADER: [&str; 9] = [
    "Selection",
    "View",
    "Channel",
    "Begin Time (s)",
    "End Time (s)",
    "Low Freq (Hz)",
    "High Freq (Hz)",
    "Species",
    "Confidence",
];
pub const BEGIN_FILE: &str = "Begin File";
pub const SELECTION_LABEL: &str = "label:selection";

#[derive(Debug, Error)]
pub enum PredictionError {
    #[error("cannot write {path}: {reason}")]
    Write { path: PathBuf, reason: String },
    #[error("cannot read {path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("malformed selection table line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("selection is empty")]
    EmptySelection,
    #[error("score matrix has {rows} rows but {timestamps} timestamps")]
    Shape { rows: usize, timestamps: usize },
}

/// Which head produced a set of predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionSource {
    Classifier,
    LinearProbe,
}

impl PredictionSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Classifier => "classifier",
            Self::LinearProbe => "linear_probe",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "classifier" => Some(Self::Classifier),
            "linear_probe" => Some(Self::LinearProbe),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEvent {
    pub audiofilename: String,
    pub start_s: f64,
    pub end_s: f64,
    pub class: String,
    pub score: f64,
}

impl PredictionEvent {
    pub fn span(&self) -> TimeSpan {
        TimeSpan::new(self.start_s, self.end_s)
    }
}

/// Events for one file: each run of consecutive segments scoring at least
/// `threshold` for a class becomes one event carrying the run's max score.
/// Events are ordered by start time, then class order.
pub fn scores_to_events(
    file: &str,
    scores: ArrayView2<'_, f32>,
    timestamps: &[TimeSpan],
    classes: &[String],
    threshold: f64,
) -> Result<Vec<PredictionEvent>, PredictionError> {
    if scores.nrows() != timestamps.len() {
        return Err(PredictionError::Shape {
            rows: scores.nrows(),
            timestamps: timestamps.len(),
        });
    }
    let mut events: Vec<(usize, PredictionEvent)> = Vec::new();
    for (c, class) in classes.iter().enumerate() {
        let mut open: Option<PredictionEvent> = None;
        for (r, span) in timestamps.iter().enumerate() {
            let s = f64::from(scores[[r, c]]);
            if s >= threshold {
                match open.as_mut() {
                    Some(ev) => {
                        ev.end_s = span.end_s;
                        ev.score = ev.score.max(s);
                    }
                    None => {
                        open = Some(PredictionEvent {
                            audiofilename: file.to_string(),
                            start_s: span.start_s,
                            end_s: span.end_s,
                            class: class.clone(),
                            score: s,
                        })
                    }
                }
            } else if let Some(ev) = open.take() {
                events.push((c, ev));
            }
        }
        if let Some(ev) = open.take() {
            events.push((c, ev));
        }
    }
    events.sort_by(|(ca, a), (cb, b)| a.start_s.total_cmp(&b.start_s).then(ca.cmp(cb)));
    Ok(events.into_iter().map(|(_, e)| e).collect())
}

fn raven_row(out: &mut String, selection: usize, ev: &PredictionEvent, nyquist: u32) {
    let _ = write!(
        out,
        "{selection}\tSpectrogram 1\t1\t{:.3}\t{:.3}\t0\t{nyquist}\t{}\t{:.3}",
        ev.start_s, ev.end_s, ev.class, ev.score
    );
}

/// Raven table text for one file's events.
pub fn raven_table(events: &[PredictionEvent], sample_rate: u32) -> String {
    let mut out = RAVEN_HEADER.join("\t");
    out.push('\n');
    for (i, ev) in events.iter().enumerate() {
        raven_row(&mut out, i + 1, ev, sample_rate / 2);
        out.push('\n');
    }
    out
}

/// Combined table over many files, numbered continuously, with the source
/// file in a trailing `Begin File` column.
pub fn combined_raven_table<'a>(
    files: impl IntoIterator<Item = &'a [PredictionEvent]>,
    sample_rate: u32,
) -> String {
    let mut out = RAVEN_HEADER.join("\t");
    out.push('\t');
    out.push_str(BEGIN_FILE);
    out.push('\n');
    let mut n = 0;
    for events in files {
        for ev in events {
            n += 1;
            raven_row(&mut out, n, ev, sample_rate / 2);
            out.push('\t');
            out.push_str(&ev.audiofilename);
            out.push('\n');
        }
    }
    out
}

/// Write one table per file (header-only when a file has no events) and the
/// combined table. `per_file` must be in dataset order.
pub fn write_raven_tables(
    layout: &ArtifactLayout,
    source: PredictionSource,
    sample_rate: u32,
    per_file: &[(String, Vec<PredictionEvent>)],
) -> Result<Vec<PathBuf>, PredictionError> {
    let mut written = Vec::with_capacity(per_file.len() + 1);
    let write = |path: PathBuf, text: String| {
        atomic_write(&path, text.as_bytes()).map_err(|e| PredictionError::Write {
            reason: e.to_string(),
            path: path.clone(),
        })?;
        Ok::<_, PredictionError>(path)
    };
    for (file, events) in per_file {
        let path = layout.prediction_table_path(source.as_str(), file);
        written.push(write(path, raven_table(events, sample_rate))?);
    }
    let combined = combined_raven_table(per_file.iter().map(|(_, e)| e.as_slice()), sample_rate);
    written.push(write(layout.combined_table_path(source.as_str()), combined)?);
    Ok(written)
}

/// Parse a per-file or combined Raven table. `file` names the audio for
/// per-file tables; combined tables carry their own `Begin File`.
pub fn parse_raven_table(text: &str, file: Option<&str>) -> Result<Vec<PredictionEvent>, PredictionError> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or(PredictionError::Format {
            line: 1,
            reason: "empty table".into(),
        })?
        .split('\t')
        .collect();
    let col = |name: &str| {
        header.iter().position(|h| *h == name).ok_or(PredictionError::Format {
            line: 1,
            reason: format!("missing column {name:?}"),
        })
    };
    let (begin, end, species, conf) = (
        col("Begin Time (s)")?,
        col("End Time (s)")?,
        col("Species")?,
        col("Confidence")?,
    );
    let begin_file = header.iter().position(|h| *h == BEGIN_FILE);
    let mut events = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let n = i + 2;
        let cells: Vec<&str> = line.split('\t').collect();
        let get = |c: usize| {
            cells.get(c).copied().ok_or(PredictionError::Format {
                line: n,
                reason: format!("expected {} cells, got {}", header.len(), cells.len()),
            })
        };
        let num = |c: usize| {
            get(c)?.parse::<f64>().map_err(|_| PredictionError::Format {
                line: n,
                reason: format!("{:?} is not a number", cells[c]),
            })
        };
        let audiofilename = match (begin_file, file) {
            (Some(c), _) => get(c)?.to_string(),
            (None, Some(f)) => f.to_string(),
            (None, None) => {
                return Err(PredictionError::Format {
                    line: n,
                    reason: "no Begin File column and no file given".into(),
                })
            }
        };
        events.push(PredictionEvent {
            audiofilename,
            start_s: num(begin)?,
            end_s: num(end)?,
            class: get(species)?.to_string(),
            score: num(conf)?,
        });
    }
    Ok(events)
}

pub fn read_raven_file(path: &Path, file: Option<&str>) -> Result<Vec<PredictionEvent>, PredictionError> {
    let text = std::fs::read_to_string(path).map_err(|e| PredictionError::Read {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    parse_raven_table(&text, file)
}

/// Event counts per (date, hour) for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGrid {
    pub class: String,
    /// Ascending, one row per calendar date in the dataset's span.
    pub dates: Vec<NaiveDate>,
    pub counts: Vec<[u32; 24]>,
    pub excluded_files: Vec<String>,
    pub notices: Vec<String>,
}

impl HeatmapGrid {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().map(|&c| u64::from(c)).sum()
    }

    pub fn cell(&self, date: NaiveDate, hour: usize) -> Option<u32> {
        let row = self.dates.iter().position(|d| *d == date)?;
        self.counts[row].get(hour).copied()
    }
}

/// Activity grid for `class`: rows cover every date from the earliest
/// recording start to the latest recording end among files with a
/// datetime in their name; an event counts in the hour it starts.
pub fn heatmap(events: &[PredictionEvent], index: &DatasetIndex, class: &str) -> HeatmapGrid {
    let mut starts = BTreeMap::new();
    let mut excluded_files = Vec::new();
    let mut span: Option<(NaiveDate, NaiveDate)> = None;
    for entry in &index.files {
        match get_dt_filename(entry.file_name()) {
            Some(t) => {
                let last = t + Duration::milliseconds((entry.duration_s * 1000.0) as i64);
                let (a, b) = (t.date_naive(), last.date_naive());
                span = Some(match span {
                    Some((lo, hi)) => (lo.min(a), hi.max(b)),
                    None => (a, b),
                });
                starts.insert(entry.rel_path.as_str(), t);
            }
            None => excluded_files.push(entry.rel_path.clone()),
        }
    }
    let mut notices = Vec::new();
    if !excluded_files.is_empty() {
        notices.push(format!(
            "{} file(s) without a datetime in their name excluded",
            excluded_files.len()
        ));
    }
    let dates: Vec<NaiveDate> = match span {
        Some((lo, hi)) => lo.iter_days().take_while(|d| *d <= hi).collect(),
        None => Vec::new(),
    };
    let mut counts = vec![[0u32; 24]; dates.len()];
    let mut seen = 0;
    for ev in events.iter().filter(|e| e.class == class) {
        let Some(t0) = starts.get(ev.audiofilename.as_str()) else {
            continue;
        };
        let t = *t0 + Duration::microseconds((ev.start_s * 1e6).round() as i64);
        if let Some(row) = dates.iter().position(|d| *d == t.date_naive()) {
            counts[row][t.hour() as usize] += 1;
            seen += 1;
        }
    }
    if seen == 0 {
        notices.push(format!("no events for class {class:?}"));
    }
    HeatmapGrid {
        class: class.to_string(),
        dates,
        counts,
        excluded_files,
        notices,
    }
}

/// Selected points as a ground-truth CSV (`label:selection`) accepted by
/// the annotation parser.
pub fn export_selection(points: &[(String, f64, f64)], label: &str) -> Result<String, PredictionError> {
    if points.is_empty() {
        return Err(PredictionError::EmptySelection);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| PredictionError::Write {
        path: PathBuf::from("<selection>"),
        reason: e.to_string(),
    };
    w.write_record(["audiofilename", "start", "end", SELECTION_LABEL])
        .map_err(fail)?;
    for (file, start, end) in points {
        w.write_record([file.clone(), start.to_string(), end.to_string(), label.to_string()])
            .map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| PredictionError::Write {
        path: PathBuf::from("<selection>"),
        reason: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
