mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Stop-gradient attention colorization lab.
#[derive(Parser, Debug)]
#[command(name = "sga", version, about)]
struct Cli {
    /// Worker threads for per-file parallelism (default: SGA_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract XDoG line art from every PNG in a directory.
    Sketch(SketchArgs),
    /// Build (sketch, reference, ground truth) triples.
    Triple(TripleArgs),
    /// Train the colorization GAN.
    Train(TrainArgs),
    /// Per-branch gradient cosine histograms for a checkpoint.
    Diagnose(DiagnoseArgs),
    /// Singular-value concentration of features before and after attention.
    Spectrum(SpectrumArgs),
    /// SSIM and Fréchet feature distance between two image directories.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct XdogFlags {
    /// Pin the inner Gaussian std (pixels); drawn from {0.3, 0.4, 0.5} otherwise.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, default_value_t = 1e9)]
    pub phi: f64,
    #[arg(long, default_value_t = 19.0)]
    pub p: f64,
    #[arg(long, default_value_t = 4.5)]
    pub k: f64,
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
}

#[derive(Args, Debug)]
pub struct SketchArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub xdog: XdogFlags,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TripleArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Resize inputs to this square extent first.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Use the jittered target as the reference (no warp).
    #[arg(long)]
    pub self_reference: bool,
    #[command(flatten)]
    pub xdog: XdogFlags,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory of color PNGs.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// `key = value` config file (supports `include = other.cfg`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra overrides, `key=value`, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated subset of rec, adv, perc, style, all.
    #[arg(long, default_value = "all")]
    pub losses: String,
    /// Output directory for histograms.csv and summary.csv.
    #[arg(long)]
    pub output: PathBuf,
    /// Number of batches to sample.
    #[arg(long, default_value_t = 1)]
    pub batches: usize,
    #[arg(long, default_value_t = 80)]
    pub bins: usize,
    /// Epoch label written to the reports.
    #[arg(long, default_value_t = 0)]
    pub epoch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SpectrumArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Optional separate reference image (defaults to the input itself).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub generated: PathBuf,
    #[arg(long)]
    pub ground_truth: PathBuf,
    /// Also score reference images against the ground truth.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { commands::EXIT_USAGE } else { 0 });
        }
    };
    let threads = cli
        .threads
        .or_else(|| std::env::var("SGA_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let code = match cli.command {
        Command::Sketch(a) => commands::sketch(a),
        Command::Triple(a) => commands::triple(a),
        Command::Train(a) => commands::train(a),
        Command::Diagnose(a) => commands::diagnose(a),
        Command::Spectrum(a) => commands::spectrum(a),
        Command::Eval(a) => commands::eval(a),
    };
    ExitCode::from(code)
}
