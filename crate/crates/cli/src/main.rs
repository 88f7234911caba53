//! `bevtrack` command-line driver.
//!
//! Every command starts from an experiment spec (defaults, `--config` TOML,
//! then flag overrides). Failures print one JSON line on stderr of the form
//! `{"error": kind, "message": text}` and exit nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bevtrack::association::{AppearanceMode, CostMode, MotionMode, Tracker};
use bevtrack::branches::{load_checkpoint, save_checkpoint};
use bevtrack::experiment::{
    detection_peaks, prepare_scenario, run_experiment, sweep, train_branches, ExperimentSpec, Pooling, SweepAxis,
};
use bevtrack::io::{
    read_detections, read_ground_truth, read_points, group_by_frame, write_cost_dump, write_detections,
    write_ground_truth, write_metric_rows, write_metric_rows_to, write_tracks, MetricRow,
};
use bevtrack::metrics::{evaluate_detection, evaluate_tracking, MetricReport};
use bevtrack::selftest;
use bevtrack::TrackError;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "bevtrack", version, about = "Multi-lag BEV pedestrian tracking experiments")]
struct Cli {
    #[command(flatten)]
    spec: SpecArgs,
    #[command(subcommand)]
    command: Command,
}

/// Flag overrides applied on top of the spec file.
#[derive(Args, Debug, Default)]
struct SpecArgs {
    /// Experiment spec (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "BEVTRACK_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    name: Option<String>,
    /// Comma-separated evaluation seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    gate: Option<f64>,
    #[arg(long, global = true)]
    detection_threshold: Option<f64>,
    #[arg(long, global = true)]
    max_age: Option<usize>,
    #[arg(long, global = true)]
    cost_mode: Option<CostArg>,
    #[arg(long, global = true)]
    motion_mode: Option<MotionArg>,
    #[arg(long, global = true)]
    appearance_mode: Option<AppearanceArg>,
    #[arg(long, global = true)]
    pooling: Option<PoolingArg>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true)]
    training_seed: Option<u64>,
    #[arg(long, global = true)]
    training_scenarios: Option<usize>,
    #[arg(long, global = true)]
    frames: Option<usize>,
    #[arg(long, global = true)]
    pedestrians: Option<usize>,
    #[arg(long, global = true)]
    dump_costs: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum CostArg {
    Fused,
    TmcOnly,
    TacOnly,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MotionArg {
    Attention,
    Kalman,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AppearanceArg {
    Tac,
    Frozen,
    Ema,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PoolingArg {
    None,
    Max,
    Mean,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a scenario and write ground truth and detections.
    Simulate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the branches and write a checkpoint.
    Train {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to `<output_dir>/<name>/model.toml`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Track a detection file.
    Track {
        #[arg(long)]
        detections: PathBuf,
        /// Branch checkpoint; required unless the configuration needs no branches.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Defaults to `<output_dir>/<name>/tracks.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a track file against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        tracks: PathBuf,
        /// Detection file for the detection metrics; they are zero without it.
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Metric CSV; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every seed of the spec and write per-seed and summary CSVs.
    Run,
    /// Run the spec once per value of one axis.
    Sweep {
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Run the oracle suites.
    Selftest,
    /// Print the resolved spec as TOML.
    Config,
}

fn resolve_spec(a: &SpecArgs) -> bevtrack::Result<ExperimentSpec> {
    let mut spec = match &a.config {
        Some(path) => ExperimentSpec::load(path)?,
        None => ExperimentSpec::default(),
    };
    if let Some(v) = &a.output_dir {
        spec.output_dir = v.clone();
    }
    if let Some(v) = &a.name {
        spec.name = v.clone();
    }
    if let Some(v) = &a.seeds {
        spec.seeds = v.clone();
    }
    if let Some(v) = a.k {
        spec.tracker.k = v;
    }
    if let Some(v) = a.alpha {
        spec.tracker.alpha = v;
    }
    if let Some(v) = a.gate {
        spec.tracker.gate = v;
    }
    if let Some(v) = a.detection_threshold {
        spec.tracker.detection_threshold = v;
    }
    if let Some(v) = a.max_age {
        spec.tracker.max_age = Some(v);
    }
    if let Some(v) = a.cost_mode {
        spec.tracker.cost_mode = match v {
            CostArg::Fused => CostMode::Fused,
            CostArg::TmcOnly => CostMode::TmcOnly,
            CostArg::TacOnly => CostMode::TacOnly,
        };
    }
    if let Some(v) = a.motion_mode {
        spec.tracker.motion_mode = match v {
            MotionArg::Attention => MotionMode::Attention,
            MotionArg::Kalman => MotionMode::Kalman,
        };
    }
    if let Some(v) = a.appearance_mode {
        spec.tracker.appearance_mode = match v {
            AppearanceArg::Tac => AppearanceMode::Tac,
            AppearanceArg::Frozen => AppearanceMode::Frozen,
            AppearanceArg::Ema => AppearanceMode::Ema,
        };
    }
    if let Some(v) = a.pooling {
        spec.pooling = match v {
            PoolingArg::None => Pooling::None,
            PoolingArg::Max => Pooling::Max,
            PoolingArg::Mean => Pooling::Mean,
        };
    }
    if let Some(v) = a.steps {
        spec.training.steps = v;
    }
    if let Some(v) = a.learning_rate {
        spec.training.learning_rate = v;
    }
    if let Some(v) = a.training_seed {
        spec.training.seed = v;
    }
    if let Some(v) = a.training_scenarios {
        spec.training.scenarios = v;
    }
    if let Some(v) = a.frames {
        spec.scenario.num_frames = v;
    }
    if let Some(v) = a.pedestrians {
        spec.scenario.num_pedestrians = v;
    }
    spec.dump_costs |= a.dump_costs;
    spec.validate()?;
    Ok(spec)
}

fn run_dir(spec: &ExperimentSpec) -> bevtrack::Result<PathBuf> {
    let dir = spec.output_dir.join(&spec.name);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn ensure_parent(path: &Path) -> bevtrack::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn print_report(name: &str, mean: &[f64; 17], std: &[f64; 17]) {
    println!("{name}");
    for ((field, m), s) in MetricReport::FIELDS.iter().zip(mean).zip(std) {
        println!("  {field:>10} {m:10.3} ± {s:.3}");
    }
}

fn execute(cli: Cli) -> bevtrack::Result<bool> {
    let spec = resolve_spec(&cli.spec)?;
    match cli.command {
        Command::Config => print!("{}", spec.to_toml()?),
        Command::Simulate { seed } => {
            let dir = run_dir(&spec)?.join(format!("scenario_seed{seed}"));
            std::fs::create_dir_all(&dir)?;
            let (gt, frames) = prepare_scenario(&spec, &spec.scenario_for(seed))?;
            write_ground_truth(&dir.join("gt.csv"), &gt)?;
            write_detections(&dir.join("detections.csv"), &frames)?;
            println!("{}", dir.display());
        }
        Command::Train { seed, model } => {
            let path = model.unwrap_or(run_dir(&spec)?.join("model.toml"));
            ensure_parent(&path)?;
            let params = train_branches(&spec, seed)?;
            save_checkpoint(&params, &path)?;
            println!("{}", path.display());
        }
        Command::Track { detections, model, out } => {
            let frames = read_detections(&detections, None)?;
            let params = model.as_deref().map(load_checkpoint).transpose()?;
            let cfg = spec.tracker_config()?;
            let params = if cfg.needs_branches() { params } else { None };
            let mut tracker = Tracker::new(cfg, params)?;
            let outputs = tracker.run(&frames)?;
            let path = out.unwrap_or(run_dir(&spec)?.join("tracks.csv"));
            ensure_parent(&path)?;
            write_tracks(&path, &outputs)?;
            if spec.dump_costs {
                write_cost_dump(&path.with_extension("costs.csv"), &outputs)?;
            }
            println!("{}", path.display());
        }
        Command::Eval { gt, tracks, detections, out } => {
            let truth = read_ground_truth(&gt, None)?;
            let n = truth.len();
            let hyp = group_by_frame(&read_points(&tracks)?, Some(n))?;
            let tracking = evaluate_tracking(&truth, &hyp, &spec.eval)?;
            let detection = match detections {
                Some(path) => {
                    let frames = read_detections(&path, Some(n))?;
                    let points: Vec<Vec<_>> = truth.iter().map(|f| f.iter().map(|(_, p)| *p).collect()).collect();
                    evaluate_detection(&points, &detection_peaks(&spec, &frames)?, &spec.eval)?
                }
                None => Default::default(),
            };
            let report = MetricReport { tracking, detection };
            let row = MetricRow::new(&spec.name, "eval", &spec.config_hash()?, &report);
            match out {
                Some(path) => {
                    ensure_parent(&path)?;
                    write_metric_rows(&path, &[row])?;
                }
                None => write_metric_rows_to(std::io::stdout().lock(), &[row])?,
            }
        }
        Command::Run => {
            let r = run_experiment(&spec)?;
            print_report(&format!("{} ({} seeds, config {})", r.name, r.per_seed.len(), r.config_hash), &r.mean, &r.std);
            println!("results in {}", r.dir.display());
        }
        Command::Sweep { axis, values } => {
            let axis: SweepAxis = axis.parse()?;
            let r = sweep(&spec, axis, &values)?;
            for (v, res) in &r.points {
                let (idf1, s1) = res.metric("idf1").unwrap_or_default();
                let (mota, s2) = res.metric("mota").unwrap_or_default();
                println!("{axis}={v}: idf1 {idf1:.2} ± {s1:.2}, mota {mota:.2} ± {s2:.2}");
            }
            println!("table {}", r.table.display());
            println!("plot {}", r.plot.display());
        }
        Command::Selftest => {
            let checks = selftest::run_all();
            for c in &checks {
                println!("{}", c.line());
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_line("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}", error_line("selftest", "one or more oracle suites failed"));
            ExitCode::from(1)
        }
        Err(e) => {
            let e: TrackError = e;
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::from(1)
        }
    }
}
