//! `hiprobe`: probe hidden-state dumps, train the anomaly scorer and
//! localize anomalous segments.
//!
//! Exit codes: 0 success, 2 input/format error, 3 data/precondition error,
//! 4 internal error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hiprobe_core::localizer::{DEFAULT_KAPPA, DEFAULT_SIGMA};
use hiprobe_core::saliency::DEFAULT_BINS;
use hiprobe_core::Error;

#[derive(Debug, Parser)]
#[command(
    name = "hiprobe",
    version,
    about = "Hidden-state probing for video anomaly detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score every layer of a labeled dump and select the most salient one.
    Probe(ProbeArgs),
    /// Train the logistic scorer on the layer chosen by `probe`.
    Train(TrainArgs),
    /// Score, smooth, threshold and segment one or more sequence dumps.
    Localize(LocalizeArgs),
    /// Generate a synthetic labeled probing dump.
    SynthProbe(SynthProbeArgs),
    /// Generate a synthetic video stream with planted anomaly windows.
    SynthStream(SynthStreamArgs),
    /// Run probe, train and localize in one go and write a run report.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
struct SubsetArgs {
    /// Fraction of each class used for probing.
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    dump: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    subset: SubsetArgs,
    /// Equal-width histogram bins for the entropy metric.
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Skip the (quadratic-time) silhouette validation metric.
    #[arg(long)]
    no_silhouette: bool,
}

#[derive(Debug, Clone, Args)]
struct TrainFlags {
    #[arg(long, default_value_t = 1000)]
    max_iterations: usize,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-4)]
    l2: f64,
    #[arg(long, default_value_t = 10)]
    history: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    dump: PathBuf,
    /// Saliency report written by `probe`.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the calibration scores (probing-subset probabilities).
    #[arg(long)]
    calibration_out: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Clone, Args)]
struct LocalizeFlags {
    #[arg(long, default_value_t = DEFAULT_KAPPA)]
    kappa: f64,
    /// Gaussian smoothing width in keyframe positions.
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
    /// Keyframes sampled per segment.
    #[arg(long, default_value_t = 8)]
    k: u32,
    /// Worker threads for processing sequences (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Debug, Args)]
struct LocalizeArgs {
    #[arg(required = true)]
    sequences: Vec<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    /// Calibration scores written by `train --calibration-out`.
    #[arg(long)]
    calibration: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also export per-frame curves as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    flags: LocalizeFlags,
}

#[derive(Debug, Clone, Args)]
struct ProfileArgs {
    #[arg(long, default_value_t = 32)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 20)]
    peak: usize,
    /// Class separation at the peak layer, in within-class standard deviations.
    #[arg(long, default_value_t = 4.0)]
    peak_sep: f64,
    /// Largest separation away from the peak.
    #[arg(long, default_value_t = 1.0)]
    background: f64,
    /// Seed for shift directions and probing samples.
    #[arg(long, default_value_t = 0)]
    profile_seed: u64,
}

#[derive(Debug, Args)]
struct SynthProbeArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    n_per_class: usize,
    #[command(flatten)]
    profile: ProfileArgs,
}

#[derive(Debug, Args)]
struct SynthStreamArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    frames: u64,
    /// Inclusive anomaly window `START:END`; repeatable.
    #[arg(long = "window", value_parser = parse_window)]
    windows: Vec<(u64, u64)>,
    #[arg(long, default_value_t = 0)]
    video_id: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    k: u32,
    #[command(flatten)]
    profile: ProfileArgs,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Labeled probing dump.
    dump: PathBuf,
    /// Sequence dumps to localize.
    #[arg(required = true)]
    sequences: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    subset: SubsetArgs,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    #[arg(long)]
    no_silhouette: bool,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    localize: LocalizeFlags,
}

fn parse_window(s: &str) -> Result<(u64, u64), String> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| format!("expected START:END, got {s:?}"))?;
    let start = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let end = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
    Ok((start, end))
}

fn exit_code(err: &Error) -> u8 {
    match err {
        e if e.is_input_error() => 2,
        Error::InvalidArgument(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HIPROBE_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();

    let outcome = std::panic::catch_unwind(|| match cli.command {
        Command::Probe(args) => commands::probe(args),
        Command::Train(args) => commands::train(args),
        Command::Localize(args) => commands::localize(args),
        Command::SynthProbe(args) => commands::synth_probe(args),
        Command::SynthStream(args) => commands::synth_stream(args),
        Command::Report(args) => commands::report(args),
    });
    match outcome {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(err)) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
        Err(_) => ExitCode::from(4),
    }
}
