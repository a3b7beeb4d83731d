use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use sonoscope::config::{config_from_overrides, load_config, load_config_with_settings, LoadedConfig, Overrides};
use sonoscope::EvalTask;
use sonoscope_cli::pipeline::{self, benchmark_table, Context, RunSummary};
use sonoscope_cli::synth::{self, SynthSpec};
use sonoscope_cli::PipelineError;
use sonoscope_service::ApiSession;
use tracing::info;

#[derive(Parser)]
#[command(name = "sonoscope", version, about = "Embed, evaluate and explore bioacoustic recordings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embed, evaluate, then serve the dashboard API when enabled
    Play {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "127.0.0.1:8765")]
        bind: SocketAddr,
    },
    /// Compute missing embeddings only
    Embed {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run evaluation tasks over existing embeddings
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score predictions against annotations and print per-class AP
    Benchmark {
        #[command(flatten)]
        run: RunArgs,
        /// Combined Raven table to score instead of the native classifier's
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Serve the dashboard API over existing artifacts
    Serve {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "127.0.0.1:8765")]
        bind: SocketAddr,
    },
    /// Write a synthetic annotated dataset
    Synthgen(SynthArgs),
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Run config YAML; a settings.yaml next to it is read too
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Settings YAML overriding the sibling lookup
    #[arg(long)]
    settings: Option<PathBuf>,
    #[arg(long)]
    audio_dir: Option<String>,
    /// Comma-separated model names
    #[arg(long)]
    models: Option<String>,
    /// Comma-separated evaluation tasks
    #[arg(long)]
    tasks: Option<String>,
    #[arg(long)]
    dashboard: Option<bool>,
    #[arg(long)]
    device: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Annotation CSV, or "none"
    #[arg(long)]
    annotations: Option<String>,
    /// pca or tsne
    #[arg(long)]
    reducer: Option<String>,
    /// Classifier score threshold for predicted events
    #[arg(long)]
    threshold: Option<f64>,
    /// Fraction of the shorter span an annotation must cover
    #[arg(long)]
    overlap_threshold: Option<f64>,
    #[arg(long)]
    output_root: Option<String>,
    /// Any other config or settings key
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn overrides(&self) -> Result<Overrides, String> {
        let mut o = Overrides::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.insert(k.to_string(), v);
            }
        };
        put("audio_dir", self.audio_dir.clone());
        put("selected_models", self.models.clone());
        put("evaluation_tasks", self.tasks.clone());
        put("dashboard", self.dashboard.map(|b| b.to_string()));
        put("device", self.device.clone());
        put("worker_count", self.workers.map(|n| n.to_string()));
        put("random_seed", self.seed.map(|n| n.to_string()));
        put("annotations_path", self.annotations.clone());
        put("reducer", self.reducer.clone());
        put("detection_threshold", self.threshold.map(|n| n.to_string()));
        put("overlap_threshold", self.overlap_threshold.map(|n| n.to_string()));
        put("output_root", self.output_root.clone());
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            o.insert(k.trim().to_string(), v.to_string());
        }
        Ok(o)
    }

    fn load(&self) -> Result<LoadedConfig, PipelineError> {
        let o = self
            .overrides()
            .map_err(|e| PipelineError::Config(sonoscope::config::ConfigError::invalid("--set", e)))?;
        let loaded = match (&self.config, &self.settings) {
            (Some(c), Some(s)) => load_config_with_settings(c, Some(s), &o)?,
            (Some(c), None) => load_config(c, &o)?,
            (None, s) => config_from_overrides(s.as_deref(), &o)?,
        };
        Ok(loaded)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output folder; audio goes to <out>/<name>, annotations to <out>/annotations.csv
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "synth")]
    name: String,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 12)]
    files: usize,
    /// Seconds per file
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    bursts_per_class: usize,
    #[arg(long, default_value_t = 2)]
    sites: usize,
    #[arg(long, default_value_t = 2)]
    dates: usize,
}

fn finish(summary: &RunSummary) -> ExitCode {
    print!("{summary}");
    if summary.has_failures() {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn fail(e: PipelineError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code())
}

fn serve(ctx: &Context, bind: SocketAddr) -> Result<(), PipelineError> {
    let settings = &ctx.loaded.settings;
    let audio = Some(ctx.loaded.config.audio_dir.as_path()).filter(|p| p.is_dir());
    let to_err = |e: sonoscope_service::ApiError| PipelineError::Missing(e.message);
    let mut session = ApiSession::open(&ctx.dataset_root, audio)
        .map_err(to_err)?
        .with_registry(ctx.registry.clone())
        .with_default_reducer(settings.reducer.as_str());
    if let Some(path) = &settings.annotations_path {
        session = session
            .with_annotations(path, settings.overlap_threshold)
            .map_err(to_err)?;
    }
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| PipelineError::Missing(format!("runtime: {e}")))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(bind)
            .await
            .map_err(|e| PipelineError::Missing(format!("bind {bind}: {e}")))?;
        let addr = listener.local_addr().unwrap_or(bind);
        println!("dashboard API listening on http://{addr} (ctrl-c to stop)");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        sonoscope_service::serve(listener, Arc::new(session), shutdown)
            .await
            .map_err(|e| PipelineError::Missing(format!("server: {e}")))
    })
}

fn require_embeddings(ctx: &Context) -> Result<(), PipelineError> {
    let missing = ctx.incomplete_models();
    if missing.is_empty() {
        return Ok(());
    }
    let list: Vec<String> = missing
        .iter()
        .map(|(m, n)| format!("{m} ({n} files)"))
        .collect();
    Err(PipelineError::Missing(format!(
        "embeddings missing for {}; run `sonoscope embed` with the same config first",
        list.join(", ")
    )))
}

fn play(run: &RunArgs, bind: SocketAddr) -> Result<ExitCode, PipelineError> {
    let ctx = Context::prepare(run.load()?)?;
    let mut summary = RunSummary {
        skipped_files: ctx.index.skipped.len(),
        ..RunSummary::default()
    };
    summary.embedding = Some(pipeline::embed(&ctx)?);
    summary.steps = pipeline::evaluate(&ctx, &ctx.loaded.config.evaluation_tasks)?;
    let code = finish(&summary);
    if ctx.loaded.config.dashboard {
        serve(&ctx, bind)?;
    }
    Ok(code)
}

fn embed(run: &RunArgs) -> Result<ExitCode, PipelineError> {
    let ctx = Context::prepare(run.load()?)?;
    let summary = RunSummary {
        skipped_files: ctx.index.skipped.len(),
        embedding: Some(pipeline::embed(&ctx)?),
        ..RunSummary::default()
    };
    Ok(finish(&summary))
}

fn evaluate(run: &RunArgs) -> Result<ExitCode, PipelineError> {
    let ctx = Context::from_artifacts(run.load()?)?;
    require_embeddings(&ctx)?;
    let summary = RunSummary {
        steps: pipeline::evaluate(&ctx, &ctx.loaded.config.evaluation_tasks)?,
        ..RunSummary::default()
    };
    Ok(finish(&summary))
}

fn print_benchmark(r: &sonoscope::eval::BenchmarkResult) {
    println!("{} ({})", r.model, r.source);
    let width = r.per_class_ap.keys().map(String::len).max().unwrap_or(5).max(5);
    println!("  {:<width$}  AP", "class");
    for (class, ap) in &r.per_class_ap {
        println!("  {class:<width$}  {ap:.4}");
    }
    println!("  {:<width$}  {:.4}", "mAP", r.map_score);
    if !r.ignored_prediction_classes.is_empty() {
        println!("  ignored prediction classes: {}", r.ignored_prediction_classes.join(", "));
    }
    if !r.unpredicted_classes.is_empty() {
        println!("  unpredicted classes: {}", r.unpredicted_classes.join(", "));
    }
}

fn benchmark(run: &RunArgs, predictions: Option<&Path>) -> Result<ExitCode, PipelineError> {
    let ctx = Context::from_artifacts(run.load()?)?;
    require_embeddings(&ctx)?;
    if let Some(table) = predictions {
        let model = &ctx.models()[0];
        let r = benchmark_table(&ctx, model, table, "external")?;
        print_benchmark(&r);
        return Ok(ExitCode::SUCCESS);
    }
    let steps = pipeline::evaluate(&ctx, &[EvalTask::Benchmarking])?;
    for model in ctx.models() {
        let path = ctx.layout(model)?.evaluations_dir().join(sonoscope::eval::BENCHMARK_FILE);
        let done = steps
            .iter()
            .any(|s| &s.model == model && matches!(s.status, pipeline::StepStatus::Done(_)));
        if done {
            if let Ok(r) = sonoscope::eval::read_json(&path) {
                print_benchmark(&r);
            }
        }
    }
    Ok(finish(&RunSummary {
        steps,
        ..RunSummary::default()
    }))
}

fn serve_only(run: &RunArgs, bind: SocketAddr) -> Result<ExitCode, PipelineError> {
    let ctx = Context::from_artifacts(run.load()?)?;
    serve(&ctx, bind)?;
    Ok(ExitCode::SUCCESS)
}

fn synthgen(a: &SynthArgs) -> ExitCode {
    let spec = SynthSpec {
        classes: a.classes,
        files: a.files,
        duration_s: a.duration,
        seed: a.seed,
        bursts_per_class: a.bursts_per_class,
        sites: a.sites,
        dates: a.dates,
    };
    let audio = a.out.join(&a.name);
    let ann = a.out.join("annotations.csv");
    match synth::generate(&spec, &audio, &ann) {
        Ok(out) => {
            println!(
                "wrote {} files to {} and {} annotations to {}",
                out.files.len(),
                audio.display(),
                out.events.len(),
                ann.display()
            );
            info!(seed = a.seed, "synthgen done");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Play { run, bind } => play(run, *bind),
        Command::Embed { run } => embed(run),
        Command::Evaluate { run } => evaluate(run),
        Command::Benchmark { run, predictions } => benchmark(run, predictions.as_deref()),
        Command::Serve { run, bind } => serve_only(run, *bind),
        Command::Synthgen(a) => return synthgen(a),
    };
    result.unwrap_or_else(fail)
}
