use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use foodlens_core::bench::{
    emit_comparison, measure_latency, ComparisonReport, ModelRecord, DEFAULT_RUNS, DEFAULT_TOP5_THRESHOLD, DEFAULT_WARMUP,
};
use foodlens_core::data::{generate_synthetic_dataset, split_dataset, DatasetManifest, ImageSet, SplitSpec};
use foodlens_core::layers::Mode;
use foodlens_core::train::{evaluate, lr_find, train, LrFindConfig, ModelProbe, RunMetrics, TrainConfig};
use foodlens_core::zoo::{build_model, load_checkpoint, save_checkpoint, Model, ModelConfig};
use foodlens_core::Tensor;
use foodlens_serve::ServiceConfig;

/// Food image classification: synthetic data, training, benchmarking and
/// the recognition service.
#[derive(Parser)]
#[command(name = "foodlens", version)]
struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, env = "FOODLENS_WORKDIR", default_value = ".")]
    workdir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic image dataset and its manifest.
    GenData(GenData),
    /// Train one model and write its checkpoint and metrics.
    Train(TrainArgs),
    /// Learning-rate range test; writes the curve as CSV.
    LrFind(LrFindArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Latency, size and activation memory of a model.
    Bench(BenchArgs),
    /// Train and benchmark several families and emit the comparison report.
    Compare(CompareArgs),
    /// Run the HTTP recognition service.
    Serve(ServeArgs),
    /// Render the comparison report from stored run directories.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, env = "FOODLENS_DATA", default_value = "data")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset directory containing manifest.json.
    #[arg(long, env = "FOODLENS_DATA", default_value = "data")]
    data: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    train_fraction: f64,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Architecture family: residual, plain or dense_concat.
    #[arg(long, default_value = "residual")]
    family: String,
    /// Blocks per stage.
    #[arg(long, default_value_t = 1)]
    n: usize,
}

#[derive(Args, Clone)]
struct HyperArgs {
    #[arg(long, default_value_t = 12)]
    cycles: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    /// constant, step or one_cycle.
    #[arg(long, default_value = "step")]
    scheduler: String,
}

impl HyperArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            cycles: self.cycles,
            batch_size: self.batch_size,
            base_lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            scheduler: self.scheduler.clone(),
            seed,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Seeds model init, the split and batch order.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Run directory; defaults to runs/<family>-n<n>.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LrFindArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 1e-5)]
    lr_min: f64,
    #[arg(long, default_value_t = 10.0)]
    lr_max: f64,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "lr_curve.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, env = "FOODLENS_CHECKPOINT")]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Split seed; must match the one used for training.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output JSON; defaults to eval.json next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Trained checkpoint; without it an untrained preset is measured.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = DEFAULT_WARMUP)]
    warmup: usize,
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    runs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "bench.json")]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, value_delimiter = ',', default_value = "residual,plain,dense_concat")]
    families: Vec<String>,
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = DEFAULT_TOP5_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    latency_runs: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "FOODLENS_CHECKPOINT")]
    checkpoint: PathBuf,
    /// Food store JSON; the bundled starter store when omitted.
    #[arg(long, env = "FOODLENS_STORE")]
    store: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: std::net::SocketAddr,
    #[arg(long, default_value_t = 0.6)]
    threshold: f32,
    #[arg(long, default_value_t = 2)]
    stability_k: usize,
    #[arg(long, default_value_t = 500)]
    interval_ms: u64,
    #[arg(long, default_value_t = 300)]
    session_idle_secs: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories written by `train` (each with metrics.json and
    /// model.ckpt).
    #[arg(long, value_delimiter = ',', required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value = "synthetic-20")]
    dataset: String,
    #[arg(long, default_value_t = DEFAULT_TOP5_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn to_json(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serialisable") + "\n"
}

/// Train/test image sets for `seed`.
fn load_split(workdir: &Path, d: &DataArgs, seed: u64) -> Result<(DatasetManifest, ImageSet, ImageSet)> {
    let dir = resolve(workdir, &d.data);
    let m = DatasetManifest::load(&dir)?;
    let all = ImageSet::load(&dir, &m)?;
    let spec = SplitSpec {
        train_fraction: d.train_fraction,
        folds: None,
        seed,
    };
    let (tr, te) = split_dataset(&m, &spec)?;
    Ok((m.clone(), all.subset(&tr), all.subset(&te)))
}

fn new_model(m: &ModelArgs, manifest: &DatasetManifest, seed: u64) -> Result<Model<f32>> {
    let mut model = build_model(&ModelConfig::new(&m.family, m.n, manifest.num_classes()), seed)?;
    model.set_class_names(manifest.class_names.clone())?;
    Ok(model)
}

fn cycles_csv(r: &RunMetrics) -> String {
    let mut out = String::from("cycle,train_loss,test_error_rate,top1_accuracy,top5_accuracy\n");
    for c in &r.cycle_records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            c.cycle, c.train_loss, c.test_error_rate, c.top1_accuracy, c.top5_accuracy
        );
    }
    out
}

fn batch_csv(r: &RunMetrics) -> String {
    let mut out = String::from("batch,loss\n");
    for b in &r.batch_losses {
        let _ = writeln!(out, "{},{}", b.batch, b.loss);
    }
    out
}

fn cmd_gen(workdir: &Path, a: GenData) -> Result<()> {
    let out = resolve(workdir, &a.out);
    let m = generate_synthetic_dataset(&out, a.classes, a.per_class, a.image_size, a.seed)?;
    println!("wrote {} images in {} classes to {}", m.samples.len(), m.num_classes(), out.display());
    Ok(())
}

fn cmd_train(workdir: &Path, a: TrainArgs) -> Result<()> {
    let (manifest, train_set, test_set) = load_split(workdir, &a.data, a.seed)?;
    let mut model = new_model(&a.model, &manifest, a.seed)?;
    let cfg = a.hyper.config(a.seed);
    let metrics = train(&mut model, &train_set, &test_set, &cfg)?;
    let dir = resolve(workdir, &a.out.unwrap_or_else(|| PathBuf::from("runs").join(model.name())));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    save_checkpoint(&model, &dir.join("model.ckpt"))?;
    write(&dir.join("metrics.json"), to_json(&metrics))?;
    write(&dir.join("cycles.csv"), cycles_csv(&metrics))?;
    write(&dir.join("batch_losses.csv"), batch_csv(&metrics))?;
    let last = metrics.cycle_records.last().expect("at least one cycle");
    println!(
        "{}: test error {:.4}, top-5 {:.4} after {} cycles; run saved to {}",
        model.name(),
        last.test_error_rate,
        last.top5_accuracy,
        last.cycle,
        dir.display()
    );
    Ok(())
}

fn cmd_lr_find(workdir: &Path, a: LrFindArgs) -> Result<()> {
    let (manifest, train_set, _) = load_split(workdir, &a.data, a.seed)?;
    let model = new_model(&a.model, &manifest, a.seed)?;
    let cfg = TrainConfig {
        batch_size: a.batch_size,
        seed: a.seed,
        ..Default::default()
    };
    let sweep = LrFindConfig {
        lr_min: a.lr_min,
        lr_max: a.lr_max,
        steps: a.steps,
    };
    let curve = lr_find(&mut ModelProbe::new(&model, &train_set, &cfg), &sweep)?;
    let mut csv = String::from("lr,smoothed_loss\n");
    for (lr, loss) in &curve.points {
        let _ = writeln!(csv, "{lr},{loss}");
    }
    let out = resolve(workdir, &a.out);
    write(&out, csv)?;
    println!("suggested lr {:e} ({} points, curve in {})", curve.suggested_lr, curve.points.len(), out.display());
    Ok(())
}

fn cmd_eval(workdir: &Path, a: EvalArgs) -> Result<()> {
    let ckpt = resolve(workdir, &a.checkpoint);
    let model = load_checkpoint::<f32>(&ckpt)?;
    let (_, _, test_set) = load_split(workdir, &a.data, a.seed)?;
    let eval = evaluate(&model, &test_set)?;
    let out = match a.out {
        Some(p) => resolve(workdir, &p),
        None => ckpt.with_file_name("eval.json"),
    };
    write(&out, to_json(&eval))?;
    println!(
        "{}: error {:.4}, top-1 {:.4}, top-5 {:.4} on {} images",
        model.name(),
        eval.error_rate,
        eval.top1_accuracy,
        eval.top5_accuracy,
        eval.count
    );
    Ok(())
}

fn cmd_bench(workdir: &Path, a: BenchArgs) -> Result<()> {
    let mut model = match &a.checkpoint {
        Some(p) => load_checkpoint::<f32>(&resolve(workdir, p))?,
        None => build_model(&ModelConfig::new(&a.model.family, a.model.n, a.classes), a.seed)?,
    };
    model.set_mode(Mode::Eval);
    let [c, h, w] = model.config().input_size;
    let frame = Tensor::zeros(&[c, h, w]);
    let latency = measure_latency(&model, &frame, a.warmup, a.runs)?;
    let report = serde_json::json!({
        "model": model.name(),
        "param_count": model.param_count(),
        "model_size_bytes": model.size_bytes(),
        "activation_batch": a.batch_size,
        "peak_activation_bytes": model.peak_activation_bytes(a.batch_size)?,
        "timing": { "latency": latency },
    });
    let out = resolve(workdir, &a.out);
    write(&out, to_json(&report))?;
    println!(
        "{}: mean {:.3} ms, median {:.3} ms, p95 {:.3} ms over {} runs",
        model.name(),
        latency.mean_ns / 1e6,
        latency.median_ns / 1e6,
        latency.p95_ns as f64 / 1e6,
        latency.n_runs
    );
    if let Some(w) = &latency.warning {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn cmd_compare(workdir: &Path, a: CompareArgs) -> Result<()> {
    if a.families.is_empty() {
        bail!("no families given");
    }
    let (manifest, train_set, test_set) = load_split(workdir, &a.data, a.seed)?;
    let cfg = a.hyper.config(a.seed);
    let frame = test_set.image(0);
    // training and latency measurement never overlap: each model is timed
    // after its run finishes
    let mut records = Vec::new();
    for family in &a.families {
        let margs = ModelArgs {
            family: family.clone(),
            n: a.n,
        };
        let mut model = new_model(&margs, &manifest, a.seed)?;
        let metrics = train(&mut model, &train_set, &test_set, &cfg)?;
        let mut record = ModelRecord::from_run(&model, &metrics, a.threshold)?;
        record.timing.latency = Some(measure_latency(&model, &frame, DEFAULT_WARMUP, a.latency_runs)?);
        println!(
            "{}: mean error {:.4}, lowest {:.4}",
            record.name, record.error_stats.mean_error, record.error_stats.lowest_error
        );
        records.push(record);
    }
    let dataset = format!("synthetic-{}", manifest.num_classes());
    let report = ComparisonReport::new(&dataset, records);
    let out = resolve(workdir, &a.out);
    emit_comparison(&report, &out)?;
    println!("report with {} records written to {}", report.records.len(), out.display());
    Ok(())
}

fn cmd_serve(workdir: &Path, a: ServeArgs) -> Result<()> {
    let config = ServiceConfig {
        bind: a.bind,
        threshold: a.threshold,
        stability_k: a.stability_k,
        default_interval_ms: a.interval_ms,
        session_idle_secs: a.session_idle_secs,
    };
    let store = a.store.map(|p| resolve(workdir, &p));
    let state = foodlens_serve::load_state(&resolve(workdir, &a.checkpoint), store.as_deref(), config)?;
    let rt = tokio::runtime::Runtime::new()?;
    println!("listening on http://{}", a.bind);
    rt.block_on(foodlens_serve::serve(state))?;
    Ok(())
}

fn cmd_report(workdir: &Path, a: ReportArgs) -> Result<()> {
    let mut records = Vec::new();
    for run in &a.runs {
        let dir = resolve(workdir, run);
        let text = std::fs::read_to_string(dir.join("metrics.json"))
            .with_context(|| format!("reading {}", dir.join("metrics.json").display()))?;
        let metrics: RunMetrics = serde_json::from_str(&text).with_context(|| format!("parsing metrics in {}", dir.display()))?;
        let model = load_checkpoint::<f32>(&dir.join("model.ckpt"))?;
        records.push(ModelRecord::from_run(&model, &metrics, a.threshold)?);
    }
    let report = ComparisonReport::new(&a.dataset, records);
    let out = resolve(workdir, &a.out);
    emit_comparison(&report, &out)?;
    println!("report with {} records written to {}", report.records.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let w = cli.workdir.as_path();
    match cli.command {
        Command::GenData(a) => cmd_gen(w, a),
        Command::Train(a) => cmd_train(w, a),
        Command::LrFind(a) => cmd_lr_find(w, a),
        Command::Eval(a) => cmd_eval(w, a),
        Command::Bench(a) => cmd_bench(w, a),
        Command::Compare(a) => cmd_compare(w, a),
        Command::Serve(a) => cmd_serve(w, a),
        Command::Report(a) => cmd_report(w, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors often embed their source already
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
