use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use quadtrack_core::config::Config;
use quadtrack_core::eval::{evaluate, metrics_to_json, EvalConfig};
use quadtrack_core::io::{read_dataset, read_estimates, write_dataset_file, write_estimates_file};
use quadtrack_core::pipeline::{Pipeline, PipelineConfig};
use quadtrack_core::plot::plot_sweep;
use quadtrack_core::sweep::{read_sweep_csv, run_sweep, write_sweep_csv, NoiseAxis};
use quadtrack_core::{scenario, Error};

/// Object-level SLAM back-end with dual-quadric landmarks.
#[derive(Parser)]
#[command(name = "quadtrack", version)]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides one configuration key; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate(SimulateArgs),
    /// Run the estimator over a dataset.
    Run(RunArgs),
    /// Score estimates against ground truth.
    Eval(EvalArgs),
    /// Noise sweep of the quadric initializers on the static arc.
    Sweep(SweepArgs),
    /// Render a sweep table as SVG.
    Plot(PlotArgs),
    /// Print every configuration key with its effective value.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    StaticArc,
    Dynamic,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    scenario: Scenario,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CameraModeArg {
    Estimate,
    Given,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Overrides `pipeline.camera_mode`.
    #[arg(long, value_enum)]
    camera_mode: Option<CameraModeArg>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Translation,
    Rotation,
    Bbox,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    axis: AxisArg,
    /// Noise levels in percent, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    levels: Vec<f64>,
    /// Trials per seed.
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6,7,8,9")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        e if e.is_numerical() => 4,
        _ => 3,
    }
}

fn load_config(cli: &Cli) -> Result<Config, Error> {
    let mut c = match &cli.config {
        Some(p) => Config::from_file(p)?,
        None => Config::default(),
    };
    for s in &cli.set {
        c.set(s)?;
    }
    Ok(c)
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

fn execute(cli: &Cli) -> Result<(), Error> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Simulate(a) => {
            let frames = match a.scenario {
                Scenario::StaticArc => scenario::static_arc_frames(&cfg, a.seed)?,
                Scenario::Dynamic => scenario::dynamic_frames(&cfg, a.seed)?,
            };
            write_dataset_file(&a.out, &frames)?;
            info!("wrote {} frames to {}", frames.len(), a.out.display());
        }
        Command::Run(a) => {
            match a.camera_mode {
                Some(CameraModeArg::Estimate) => cfg.set("pipeline.camera_mode=estimate")?,
                Some(CameraModeArg::Given) => cfg.set("pipeline.camera_mode=given")?,
                None => {}
            }
            let frames = read_dataset(&a.input)?;
            let mut pipeline = Pipeline::new(PipelineConfig::from_config(&cfg)?);
            let est = pipeline.run(&frames)?;
            write_estimates_file(&a.out, &est)?;
            info!("wrote {} estimates to {}", est.len(), a.out.display());
        }
        Command::Eval(a) => {
            let gt = read_dataset(&a.gt)?;
            let est = read_estimates(&a.est)?;
            let metrics = evaluate(&est, &gt, &EvalConfig::from_config(&cfg)?)?;
            write_text(&a.out, &metrics_to_json(&metrics))?;
        }
        Command::Sweep(a) => {
            let axis = match a.axis {
                AxisArg::Translation => NoiseAxis::Translation,
                AxisArg::Rotation => NoiseAxis::Rotation,
                AxisArg::Bbox => NoiseAxis::Bbox,
            };
            let sc = scenario::sweep(&cfg, axis, a.levels.clone(), a.seeds.clone(), a.trials)?;
            let rows = run_sweep(&sc)?;
            write_sweep_csv(&rows, fs::File::create(&a.out)?)?;
            info!("wrote {} rows to {}", rows.len(), a.out.display());
        }
        Command::Plot(a) => {
            let rows = read_sweep_csv(fs::File::open(&a.input).map_err(|e| missing(&a.input, e))?)?;
            write_text(&a.out, &plot_sweep(&rows)?)?;
        }
        Command::Config => print!("{}", cfg.render()),
    }
    Ok(())
}

fn missing(p: &Path, e: std::io::Error) -> Error {
    Error::MissingInput(format!("{}: {e}", p.display()))
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let mut b = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level));
    if std::env::var_os("NO_COLOR").is_some_and(|v| !v.is_empty()) {
        b.write_style(env_logger::WriteStyle::Never);
    }
    b.init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
