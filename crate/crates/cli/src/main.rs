//! `stereopose` command-line front end.
//!
//! Exit codes: 0 ok, 2 usage, 3 I/O or unreadable data, 4 data mismatch,
//! 5 degenerate math input, 6 check failure.

mod commands;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stereopose::Error;

#[derive(Parser, Debug)]
#[command(name = "stereopose", version, about = "Stereo disparity, attention fusion and pose recovery toolkit")]
struct Cli {
    /// Worker threads for parallel sections; defaults to all cores.
    #[arg(long, global = true, env = "STEREOPOSE_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a procedural stereo dataset, or verify an existing one regenerates byte for byte.
    Gen(GenArgs),
    /// Score predicted disparity maps against a dataset.
    EvalDisparity(EvalDisparityArgs),
    /// Score predicted poses against a dataset.
    EvalPose(EvalPoseArgs),
    /// Fit a rigid pose to 3-D correspondences.
    Fit(FitArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// FLOP counts and wall time of vanilla attention versus ECAA.
    BenchAttn(BenchArgs),
    /// Train the stereo network on toy pairs or the pose head on a dataset.
    TrainToy(TrainArgs),
    /// Recover poses for dataset samples by keypoint voting.
    Estimate(EstimateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Scale {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = stereopose::scenegen::dataset::DEFAULT_SAMPLES)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Scale::Desk)]
    scale: Scale,
    /// Keypoints per target, `M`.
    #[arg(long, default_value_t = stereopose::pose::DEFAULT_KEYPOINTS)]
    keypoints: usize,
}

#[derive(Args, Debug)]
struct EvalDisparityArgs {
    /// Directory of `NNNNN.pfm` or `NNNNN/disp.pfm` predictions.
    #[arg(long)]
    pred: PathBuf,
    /// Dataset holding the ground truth.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0, 3.0])]
    tau: Vec<f64>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalPoseArgs {
    /// Directory of `NNNNN.json` or `NNNNN/pose.json` predictions.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Text file with one `ox,oy,oz,cx,cy,cz` correspondence per line; `#` starts a comment.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModuleArg {
    All,
    Numkernel,
    Attention,
    #[value(name = "stereo_network")]
    StereoNetwork,
    #[value(name = "pose-head")]
    PoseHead,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = ModuleArg::All)]
    module: ModuleArg,
    #[arg(long, value_delimiter = ',', default_values_t = stereopose::checks::SEEDS)]
    seed: Vec<u64>,
    /// Scales every analytic gradient by `1 + x` (negative control).
    #[arg(long, hide = true, default_value_t = 0.0)]
    corrupt_grad: f64,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [256usize, 512, 1024, 2048, 4096])]
    n: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    d: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// FLOP counts only.
    #[arg(long)]
    no_time: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Stereo,
    Pose,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum LrScheduleArg {
    Const,
    Cyclic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FusionArg {
    RgbToPoint,
    PointToRgb,
    Bidirectional,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum, default_value_t = ModelArg::Stereo)]
    model: ModelArg,
    /// Checkpoint and `loss.csv` destination.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = LrScheduleArg::Cyclic)]
    lr_schedule: LrScheduleArg,
    /// Constant learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr_low: f64,
    #[arg(long, default_value_t = 4e-3)]
    lr_high: f64,
    #[arg(long, default_value_t = 1)]
    lr_cycles: usize,
    /// Stereo: number of textured toy pairs.
    #[arg(long, default_value_t = 8)]
    pairs: usize,
    /// Stereo: disparity bins at quarter resolution.
    #[arg(long)]
    d_max: Option<usize>,
    /// Stereo: update iterations `K`.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    no_seca: bool,
    #[arg(long)]
    no_triplet: bool,
    /// Pose: dataset whose train split supplies the examples.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Pose: points kept per example.
    #[arg(long, default_value_t = 256)]
    points: usize,
    #[arg(long, value_enum, default_value_t = FusionArg::Bidirectional)]
    fusion: FusionArg,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Destination for `NNNNN.json` pose files.
    #[arg(long)]
    out: PathBuf,
    /// Trained head checkpoint; without one, ground-truth offsets plus `--sigma` noise are used.
    #[arg(long)]
    head: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Mean-shift bandwidth as a fraction of the target diameter.
    #[arg(long, default_value_t = 0.05)]
    bandwidth: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Everything that ends a command early, mapped onto the exit-code table.
#[derive(Debug)]
enum Failure {
    Core(Error),
    Usage(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<numkernel::Error> for Failure {
    fn from(e: numkernel::Error) -> Self {
        Failure::Core(Error::Numeric(e))
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Check(_) => 6,
            Failure::Core(e) => match e {
                Error::InvalidArgument(_) => 2,
                Error::Io { .. } | Error::Corrupt { .. } => 3,
                Error::Numeric(numkernel::Error::Io(_) | numkernel::Error::Format(_)) => 3,
                Error::Mismatch(_) | Error::Numeric(_) => 4,
                Error::Degenerate(_) | Error::Empty(_) | Error::BehindCamera(_) | Error::NotRotation(_) => 5,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Usage(m) | Failure::Check(m) => f.write_str(m),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    eprintln!("stereopose: resolved config {cli:#?}");
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::EvalDisparity(a) => commands::eval_disparity(a),
        Command::EvalPose(a) => commands::eval_pose(a),
        Command::Fit(a) => commands::fit(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::BenchAttn(a) => commands::bench_attn(a),
        Command::TrainToy(a) => commands::train_toy(a),
        Command::Estimate(a) => commands::estimate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
