use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fusetrack::evalbench::{
    discover_sequences, load_sequence, run_benchmark, Aggregation, EchoTracker, FusionTracker, OffsetTracker,
    SequenceTracker,
};
use fusetrack::features::{load_weight_store, save_weight_store, ConvNet, ConvNetSpec, HogConfig, WeightStore};
use fusetrack::tracker::{TrackerConfig, TrackerModels};
use fusetrack::training::{synthetic_pairs, train_fusion, TrainConfig};
use fusetrack::{verify, Error};

#[derive(Parser, Debug)]
#[command(name = "fusetrack", version, about = "Feature-fusion correlation-filter tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Track one OTB-layout sequence and emit `frame_index,cx,cy,w,h` rows.
    Track {
        seq_dir: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        tracker: TrackerArgs,
        /// Directory for `track.csv`; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one-pass evaluation over every sequence directory in a dataset.
    Bench {
        dataset_dir: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        tracker: TrackerArgs,
        /// Directory for report.json and the CSV curve tables; stdout JSON when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = AggregationArg::PerSequence)]
        aggregation: AggregationArg,
        /// Also write SVG plots of the aggregate curves.
        #[arg(long)]
        plots: bool,
        /// Replace the tracker by a pseudo-tracker for harness checks.
        #[arg(long, value_enum)]
        debug_tracker: Option<DebugTracker>,
        /// Pixel offset added to cx by the `offset` pseudo-tracker.
        #[arg(long, default_value_t = 25.0)]
        debug_offset: f64,
    },
    /// Train fusion and attention parameters on synthetic pairs.
    TrainToy {
        #[command(flatten)]
        model: ModelArgs,
        /// Output directory for `trained.json`, `trained.bin` and `trace.csv`.
        #[arg(long, default_value = "train-out")]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        pairs: usize,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr0: f64,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Correlation-filter regularization.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Finite-difference gradient checks; nonzero exit on any failure.
    Gradcheck,
    /// FFT and closed-form solver checks against direct oracles.
    Selftest,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Weight manifest with conv tensors and optionally attention/fusion parameters.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(2..=3))]
    conv_depth: u8,
    /// JSON network spec; overrides --conv-depth.
    #[arg(long)]
    net_spec: Option<PathBuf>,
    /// Seed for weights that are not loaded from --weights.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Clone)]
struct TrackerArgs {
    #[arg(long)]
    eta_c: Option<f64>,
    #[arg(long)]
    eta_h: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Three ascending scale factors with 1 in the middle, e.g. `0.97,1,1.03`.
    #[arg(long, value_parser = parse_scales)]
    scales: Option<[f64; 3]>,
    #[arg(long, value_enum)]
    window: Option<Toggle>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Toggle {
    On,
    Off,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum AggregationArg {
    PerSequence,
    PerFrame,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum DebugTracker {
    Echo,
    Offset,
}

fn parse_scales(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<f64>| format!("expected 3 scale factors, got {}", v.len()))
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Argument(_) | Error::InvalidBox(_) | Error::Ingest(_) | Error::WeightStore(_) => {
                Failure::Validation(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<fusetrack::IngestError> for Failure {
    fn from(e: fusetrack::IngestError) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<fusetrack::WeightStoreError> for Failure {
    fn from(e: fusetrack::WeightStoreError) -> Self {
        Failure::Validation(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn build_models(args: &ModelArgs) -> CliResult<TrackerModels> {
    Ok(build_models_with_store(args)?.0)
}

/// Models plus the weight store their conv layers came from.
fn build_models_with_store(args: &ModelArgs) -> CliResult<(TrackerModels, WeightStore)> {
    let spec = match &args.net_spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Validation(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<ConvNetSpec>(&text)
                .map_err(|e| Failure::Validation(format!("{}: {e}", p.display())))?
        }
        None => ConvNetSpec::with_depth(args.conv_depth as usize)?,
    };
    let store = match &args.weights {
        Some(p) => load_weight_store(p)?,
        None => WeightStore::random_orthogonal(&spec, args.seed)?,
    };
    let net = ConvNet::new(&spec, &store)?;
    let mut models = TrackerModels::standard(net, HogConfig::default(), args.seed)?;
    if store.get("fusion.scale").is_some() {
        models.load_trained_parameters(&store)?;
    }
    Ok((models, store))
}

fn tracker_config(args: &TrackerArgs) -> CliResult<TrackerConfig> {
    let mut cfg = TrackerConfig::default();
    if let Some(v) = args.eta_c {
        cfg.eta_c = v;
    }
    if let Some(v) = args.eta_h {
        cfg.eta_h = v;
    }
    if let Some(v) = args.lambda {
        cfg.cf.lambda = v;
    }
    if let Some(s) = args.scales {
        cfg.scale_factors = s;
    }
    if let Some(w) = args.window {
        cfg.window_enabled = matches!(w, Toggle::On);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_output(out: Option<&Path>, file: &str, body: &str) -> CliResult<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
            let p = dir.join(file);
            fs::write(&p, body).map_err(|e| io_failure(&p, e))
        }
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Track {
            seq_dir,
            model,
            tracker,
            out,
        } => {
            let seq = load_sequence(&seq_dir)?;
            let cfg = tracker_config(&tracker)?;
            let tracker = FusionTracker {
                config: cfg,
                models: build_models(&model)?,
            };
            let boxes = tracker.track(&seq)?;
            let mut csv = String::from("frame_index,cx,cy,w,h\n");
            for (i, b) in boxes.iter().enumerate() {
                let _ = writeln!(csv, "{i},{},{},{},{}", b.cx, b.cy, b.w, b.h);
            }
            write_output(out.as_deref(), "track.csv", &csv)
        }
        Command::Bench {
            dataset_dir,
            model,
            tracker,
            out,
            aggregation,
            plots,
            debug_tracker,
            debug_offset,
        } => {
            let dirs = discover_sequences(&dataset_dir)?;
            let mode = match aggregation {
                AggregationArg::PerSequence => Aggregation::PerSequence,
                AggregationArg::PerFrame => Aggregation::PerFrame,
            };
            let cfg = tracker_config(&tracker)?;
            let runner: Box<dyn SequenceTracker> = match debug_tracker {
                Some(DebugTracker::Echo) => Box::new(EchoTracker),
                Some(DebugTracker::Offset) => Box::new(OffsetTracker {
                    dx: debug_offset,
                    dy: 0.0,
                }),
                None => Box::new(FusionTracker {
                    config: cfg,
                    models: build_models(&model)?,
                }),
            };
            let report = run_benchmark(&dirs, runner.as_ref(), mode)?;
            match &out {
                Some(dir) => report.write(dir, plots)?,
                None => {
                    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
                    println!("{json}");
                }
            }
            for f in &report.failed {
                eprintln!("failed: {}: {}", f.path.display(), f.error);
            }
            if let Some(a) = &report.aggregate {
                eprintln!(
                    "{} sequences, {} frames: AUC {:.4}, precision@20 {:.4}",
                    a.sequences, a.frames, a.success.auc, a.precision.headline
                );
            }
            Ok(())
        }
        Command::TrainToy {
            model,
            out,
            pairs,
            epochs,
            lr0,
            batch,
            lambda,
        } => {
            let (models, conv_store) = build_models_with_store(&model)?;
            let cfg = TrainConfig {
                epochs,
                lr0,
                batch_size: batch,
                seed: model.seed,
                ..TrainConfig::default()
            };
            cfg.validate()?;
            let mut cf = TrackerConfig::default().cf;
            if let Some(l) = lambda {
                cf.lambda = l;
            }
            cf.validate()?;
            let data = synthetic_pairs(model.seed, pairs, cfg.positive_radius)?;
            let outcome = train_fusion(&data, &cfg, &models, &cf)?;
            let mut trained = models.clone();
            trained.fusion = outcome.model.fusion.clone();
            for (b, a) in trained.branches.iter_mut().zip(&outcome.model.attention) {
                b.attention = a.clone();
            }
            fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
            // Conv tensors ride along so the file works as --weights on its own.
            let mut store = conv_store;
            store.merge(trained.trained_parameters()?);
            save_weight_store(&store, &out.join("trained.json"))?;
            let trace = out.join("trace.csv");
            fs::write(&trace, outcome.trace_csv()).map_err(|e| io_failure(&trace, e))?;
            if let (Some(first), Some(last)) = (outcome.trace.first(), outcome.trace.last()) {
                println!(
                    "epoch {} loss {:.6} -> epoch {} loss {:.6}",
                    first.epoch, first.mean_loss, last.epoch, last.mean_loss
                );
            }
            Ok(())
        }
        Command::Gradcheck => report_suite(verify::gradcheck()?),
        Command::Selftest => report_suite(verify::selftest()?),
    }
}

fn report_suite(report: verify::Report) -> CliResult<()> {
    print!("{}", report.table());
    if report.passed() {
        Ok(())
    } else {
        let failed = report.rows.iter().filter(|r| !r.passed()).count();
        Err(Failure::Runtime(format!("{failed} check(s) failed")))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
