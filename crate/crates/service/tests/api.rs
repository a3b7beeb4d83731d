use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use ndarray::Array2;
use serde_json::{json, Value};
use tower::ServiceExt;

use sonoscope::audio::segment;
use sonoscope::dataset::{get_audio_files, layout_for, FileIdentity, Scope};
use sonoscope::dimred::{reduce_and_persist, PcaReducer};
use sonoscope::eval::{self, run_clustering_task, CLUSTERING_FILE, PROBE_KNN_FILE};
use sonoscope::labels::{create_default_labels, parse_annotations_bytes};
use sonoscope::predictions::{write_raven_tables, PredictionEvent, PredictionSource};
use sonoscope::{audio, DatasetIndex, Registry, RunMetadata};
use sonoscope_service::{router, ApiSession};

const ANNOTATIONS: &str = "audiofilename,start,end,label:species\n\
siteA/20240501_063000.wav,0.0,2.0,frog\n\
siteB/20240502_070000.wav,1.0,3.0,owl\n";

fn write_wav(path: &Path, rate: u32, seconds: f64, freq: f64) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    let n = (seconds * f64::from(rate)) as usize;
    for i in 0..n {
        let v = if freq > 0.0 {
            0.5 * (TAU * freq * i as f64 / f64::from(rate)).sin()
        } else {
            0.0
        };
        w.write_sample((v * 32767.0) as i16).unwrap();
    }
    w.finalize().unwrap();
}

struct Fixture {
    _tmp: tempfile::TempDir,
    audio: PathBuf,
    root: PathBuf,
    annotations: PathBuf,
}

impl Fixture {
    /// Audio tree and an indexed dataset root without artifacts.
    fn fresh() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let audio = tmp.path().join("field");
        write_wav(&audio.join("siteA/20240501_063000.wav"), 48_000, 4.0, 1000.0);
        write_wav(&audio.join("siteB/20240502_070000.wav"), 48_000, 4.0, 3000.0);
        write_wav(&audio.join("siteB/long.wav"), 8_000, 125.0, 0.0);
        let out = tmp.path().join("out");
        let index = get_audio_files(&audio).unwrap();
        let root = out.join(&index.dataset_name);
        fs::create_dir_all(&root).unwrap();
        index.save(&root).unwrap();
        let annotations = tmp.path().join("annotations.csv");
        fs::write(&annotations, ANNOTATIONS).unwrap();
        Self {
            _tmp: tmp,
            audio,
            root,
            annotations,
        }
    }

    /// Embeddings, a PCA reduction, clustering, a probe result and
    /// classifier predictions for mel-small.
    fn processed() -> Self {
        let fx = Self::fresh();
        let index = DatasetIndex::load(&fx.root).unwrap();
        let registry = Registry::with_defaults();
        let spec = registry.get("mel-small").unwrap().clone();
        let layout = layout_for(&index, &spec, fx.root.parent().unwrap()).unwrap();
        for (k, e) in index.files.iter().enumerate() {
            let buf = audio::decode(&fx.audio.join(&e.rel_path)).unwrap();
            let ts = segment(&buf, spec.window_s).timestamps();
            let m = Array2::from_shape_fn((ts.len(), spec.embedding_dim), |(i, j)| {
                ((k * 31 + i * 7 + j) as f32 * 0.37).sin() + k as f32
            });
            layout.write_embeddings(&e.rel_path, FileIdentity::of(e), &m, &ts).unwrap();
        }
        let now = chrono::Utc::now();
        layout
            .write_metadata(&RunMetadata {
                model: spec.name.clone(),
                sample_rate: spec.sample_rate,
                window_s: spec.window_s,
                embedding_dim: spec.embedding_dim,
                file_count: index.files.len(),
                segment_count: 133,
                total_duration_s: index.total_duration_s(),
                processing_start: now,
                processing_end: now,
                config_snapshot: None,
            })
            .unwrap();
        reduce_and_persist(&layout, &index, &PcaReducer, spec.embedding_dim).unwrap();

        let sets = layout.read_embeddings(Scope::Dataset, &index).unwrap();
        let defaults = create_default_labels(&index, &sets);
        let stacked = sonoscope::dataset::StackedEmbeddings::stack(sets.clone(), spec.embedding_dim);
        let report = run_clustering_task("mel-small", stacked.matrix.view(), &defaults, None, 1).unwrap();
        eval::write_json(&layout.evaluations_dir().join(CLUSTERING_FILE), &report).unwrap();
        fs::write(
            layout.evaluations_dir().join(PROBE_KNN_FILE),
            r#"{"model":"mel-small","probe_type":"knn","per_class_ap":{"frog":1.0,"owl":0.5},"map_score":0.75}"#,
        )
        .unwrap();

        let per_file: Vec<(String, Vec<PredictionEvent>)> = index
            .files
            .iter()
            .map(|e| {
                let events = if e.rel_path.starts_with("siteA") {
                    (0..3)
                        .map(|i| PredictionEvent {
                            audiofilename: e.rel_path.clone(),
                            start_s: i as f64,
                            end_s: i as f64 + 0.5,
                            class: "frog".into(),
                            score: 0.9,
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                (e.rel_path.clone(), events)
            })
            .collect();
        write_raven_tables(&layout, PredictionSource::Classifier, spec.sample_rate, &per_file).unwrap();
        fx
    }

    fn session(&self, attached: bool) -> ApiSession {
        ApiSession::open(&self.root, attached.then_some(self.audio.as_path()))
            .unwrap()
            .with_annotations(&self.annotations, 0.5)
            .unwrap()
    }
}

async fn send(session: ApiSession, req: Request<Body>) -> (StatusCode, Option<String>, Vec<u8>) {
    let resp = router(Arc::new(session)).oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string());
    let body = to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec();
    (status, ctype, body)
}

async fn get(session: ApiSession, uri: &str) -> (StatusCode, Value) {
    let (status, _, body) = send(session, Request::get(uri).body(Body::empty()).unwrap()).await;
    (status, serde_json::from_slice(&body).unwrap_or(Value::Null))
}

fn model<'a>(v: &'a Value, name: &str) -> &'a Value {
    v["models"]
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["name"] == name)
        .unwrap()
}

#[tokio::test]
async fn models_flags_completed_artifacts() {
    let fresh = Fixture::fresh();
    let (status, v) = get(fresh.session(false), "/models?bogus=1").await;
    assert_eq!(status, StatusCode::OK);
    assert!(v["models"].as_array().unwrap().iter().all(|m| m["completed"] == false));
    assert_eq!(model(&v, "mel-large")["sample_rate"], 48_000);

    let done = Fixture::processed();
    let (_, v) = get(done.session(false), "/models").await;
    let small = model(&v, "mel-small");
    assert_eq!(small["completed"], true);
    assert_eq!(small["reducers"], json!(["pca"]));
    assert_eq!(model(&v, "mel-large")["completed"], false);
}

#[tokio::test]
async fn embeddings_carry_label_payload() {
    let fx = Fixture::processed();
    let (status, v) = get(fx.session(false), "/embeddings/mel-small?reducer=pca").await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let files = v["files"].as_object().unwrap();
    assert_eq!(files.len(), 3);
    let a = &files["siteA/20240501_063000.wav"];
    assert_eq!(a["points"].as_array().unwrap().len(), 4);
    assert_eq!(a["timestamps"][1], json!([1.0, 2.0]));
    let l0 = &a["labels"][0];
    assert_eq!(l0["parent_directory"], "siteA");
    assert_eq!(l0["time_of_day"], 6);
    assert_eq!(l0["day_of_year"], 122);
    assert!(l0["cluster_id"].is_u64());
    assert_eq!(l0["ground_truth"], json!(["frog"]));
    assert_eq!(a["labels"][3]["ground_truth"], json!([]));
    assert!(v["cluster_target"].is_string());
}

#[tokio::test]
async fn missing_reduction_is_actionable_404() {
    let fx = Fixture::processed();
    let (status, v) = get(fx.session(false), "/embeddings/mel-small?reducer=tsne").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(v["error"].as_str().unwrap().contains("reduction"), "{v}");
    assert_eq!(v["missing"].as_array().unwrap().len(), 3);
    let (status, v) = get(fx.session(false), "/embeddings/mel-large").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(!v["missing"].as_array().unwrap().is_empty());
    let (status, _) = get(fx.session(false), "/embeddings/nope").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn spectrogram_peak_at_model_rate() {
    let fx = Fixture::processed();
    let uri = "/spectrogram?file=siteA/20240501_063000.wav&start=0&end=1&model=mel-small";
    let (status, v) = get(fx.session(true), uri).await;
    assert_eq!(status, StatusCode::OK);
    let matrix = v["matrix"].as_array().unwrap();
    assert_eq!(matrix.len(), 513);
    let peak = (0..matrix.len())
        .max_by(|&a, &b| {
            let sum = |r: usize| matrix[r].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum::<f64>();
            sum(a).total_cmp(&sum(b))
        })
        .unwrap();
    // 1 kHz at 16 kHz with a 1024-point FFT
    assert_eq!(peak, 64);
    let freq = v["freq_axis"].as_array().unwrap();
    assert_eq!(freq.last().unwrap().as_f64().unwrap(), 8000.0);
}

#[tokio::test]
async fn spectrogram_png_by_accept_header() {
    let fx = Fixture::processed();
    let req = Request::get("/spectrogram?file=20240502_070000.wav&start=0.5&end=1.5&model=mel-small")
        .header(header::ACCEPT, "image/png")
        .body(Body::empty())
        .unwrap();
    let (status, ctype, body) = send(fx.session(true), req).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("image/png"));
    assert_eq!(&body[..8], b"\x89PNG\r\n\x1a\n");
    let height = u32::from_be_bytes(body[20..24].try_into().unwrap());
    assert_eq!(height, 513);
}

#[tokio::test]
async fn slice_errors() {
    let fx = Fixture::processed();
    let q = "file=siteA/20240501_063000.wav&start=0&end=1&model=mel-small";
    let (status, v) = get(fx.session(false), &format!("/spectrogram?{q}")).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(v["error"].as_str().unwrap().contains("detached"));
    let (status, _) = get(fx.session(false), &format!("/audio?{q}")).await;
    assert_eq!(status, StatusCode::CONFLICT);

    // 4 s file, one 1 s window of padding is viewable
    let pad = "/spectrogram?file=siteA/20240501_063000.wav&start=3&end=5&model=mel-small";
    assert_eq!(get(fx.session(true), pad).await.0, StatusCode::OK);
    let beyond = "/spectrogram?file=siteA/20240501_063000.wav&start=3&end=5.5&model=mel-small";
    assert_eq!(get(fx.session(true), beyond).await.0, StatusCode::RANGE_NOT_SATISFIABLE);
    let zero = "/audio?file=siteA/20240501_063000.wav&start=1&end=1";
    assert_eq!(get(fx.session(true), zero).await.0, StatusCode::RANGE_NOT_SATISFIABLE);
    let long = "/audio?file=siteB/long.wav&start=0&end=121";
    assert_eq!(get(fx.session(true), long).await.0, StatusCode::PAYLOAD_TOO_LARGE);
    let unknown = "/audio?file=nope.wav&start=0&end=1";
    assert_eq!(get(fx.session(true), unknown).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn audio_slice_round_trips() {
    let fx = Fixture::processed();
    let uri = "/audio?file=siteA/20240501_063000.wav&start=0.5&end=3.5&model=mel-large";
    let (status, ctype, body) = send(fx.session(true), Request::get(uri).body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("audio/wav"));
    let mut reader = hound::WavReader::new(std::io::Cursor::new(body)).unwrap();
    assert_eq!(reader.spec().sample_rate, 48_000);
    assert_eq!(reader.spec().sample_format, hound::SampleFormat::Float);
    let got: Vec<f32> = reader.samples::<f32>().map(Result::unwrap).collect();
    assert_eq!(got.len(), 144_000);
    let original = audio::decode(&fx.audio.join("siteA/20240501_063000.wav")).unwrap();
    let expected = &original.samples()[24_000..168_000];
    let worst = got
        .iter()
        .zip(expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(worst < 1e-4, "{worst}");
}

#[tokio::test]
async fn metrics_per_model() {
    let fx = Fixture::processed();
    let (status, v) = get(fx.session(false), "/metrics/clustering?model=mel-small").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["model"], "mel-small");
    assert!(!v["results"].as_array().unwrap().is_empty());
    let (status, v) = get(fx.session(false), "/metrics/probes?model=mel-small").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["knn"]["per_class_ap"]["frog"], 1.0);
    assert!(v.get("linear").is_none());
    let (status, v) = get(fx.session(false), "/metrics/benchmark?model=mel-small").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(v["missing"][0].as_str().unwrap().ends_with("benchmark.json"));
    let (status, _) = get(fx.session(false), "/metrics/clustering?model=mel-large").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(get(fx.session(false), "/metrics/other?model=mel-small").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(fx.session(false), "/metrics/clustering").await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn heatmap_counts_by_date_and_hour() {
    let fx = Fixture::processed();
    let (status, v) = get(fx.session(false), "/heatmap?model=mel-small&class=frog").await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["dates"], json!(["2024-05-01", "2024-05-02"]));
    assert_eq!(v["counts"][0][6], 3);
    assert_eq!(v["counts"][1].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum::<u64>(), 0);
    assert_eq!(v["excluded_files"], json!(["siteB/long.wav"]));

    let (status, v) = get(fx.session(false), "/heatmap?model=mel-small&class=owl").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["dates"].as_array().unwrap().len(), 2);
    let (status, v) = get(fx.session(false), "/heatmap?model=mel-small").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("frog"));
    let (status, _) = get(fx.session(false), "/heatmap?model=mel-small&class=frog&source=linear_probe").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    walkdir(root)
}

fn walkdir(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(walkdir(&p));
        } else {
            out.insert(p.clone(), fs::read(&p).unwrap());
        }
    }
    out
}

#[tokio::test]
async fn gets_are_side_effect_free() {
    let fx = Fixture::processed();
    let before = snapshot(&fx.root);
    for uri in [
        "/models",
        "/embeddings/mel-small",
        "/metrics/clustering?model=mel-small",
        "/heatmap?model=mel-small&class=frog",
        "/audio?file=siteA/20240501_063000.wav&start=0&end=1",
    ] {
        let (status, _) = get(fx.session(true), uri).await;
        assert_eq!(status, StatusCode::OK, "{uri}");
    }
    assert_eq!(snapshot(&fx.root), before);
    // a second session over the same files answers identically
    let a = get(fx.session(false), "/embeddings/mel-small").await.1;
    let b = get(fx.session(false), "/embeddings/mel-small").await.1;
    assert_eq!(a, b);
}

async fn post_export(session: ApiSession, body: Value) -> (StatusCode, Value) {
    let req = Request::post("/selection/export")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (status, _, body) = send(session, req).await;
    (status, serde_json::from_slice(&body).unwrap_or(Value::Null))
}

#[tokio::test]
async fn selection_export_writes_parseable_csv() {
    let fx = Fixture::processed();
    let before = snapshot(&fx.root);
    let points: Vec<Value> = (0..10)
        .map(|i| {
            let file = if i % 2 == 0 { "siteA/20240501_063000.wav" } else { "siteB/20240502_070000.wav" };
            json!({"file": file, "start": (i / 2) as f64 * 0.5, "end": (i / 2) as f64 * 0.5 + 1.0})
        })
        .collect();
    let (status, v) = post_export(fx.session(false), json!({"label": "calls", "points": points})).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["rows"], 10);
    let rel = v["path"].as_str().unwrap();
    assert!(rel.starts_with("evaluations/selections/"), "{rel}");
    let table = parse_annotations_bytes(&fs::read(fx.root.join(rel)).unwrap()).unwrap();
    assert_eq!(table.annotations.len(), 10);
    assert_eq!(table.class_set, "selection");
    let files: std::collections::BTreeSet<_> = table.annotations.iter().map(|a| a.audiofilename.clone()).collect();
    assert_eq!(files.len(), 2);

    let after = snapshot(&fx.root);
    let added: Vec<_> = after.keys().filter(|k| !before.contains_key(*k)).collect();
    assert_eq!(added.len(), 1);
    assert!(added[0].starts_with(fx.root.join("evaluations/selections")));

    let (status, v) = post_export(fx.session(false), json!({"label": "calls", "points": points})).await;
    assert_eq!(status, StatusCode::OK);
    assert_ne!(v["path"].as_str().unwrap(), rel);

    let (status, v) = post_export(fx.session(false), json!({"label": "calls", "points": []})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("empty"));
}
