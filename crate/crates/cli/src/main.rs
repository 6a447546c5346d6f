//! `aesfield`: generate scenes, produce teacher maps, distill a feature
//! field, search for viewpoints and evaluate the field.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aesfield::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_MALFORMED: u8 = 4;
pub const EXIT_DIVERGED: u8 = 5;
pub const EXIT_NO_VIEWPOINT: u8 = 6;
pub const EXIT_UNDEFINED: u8 = 7;

/// An error message with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn malformed(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_MALFORMED,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError {
            code: EXIT_IO,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } => EXIT_IO,
            Error::Domain(_) => EXIT_USAGE,
            Error::Decomposition { .. }
            | Error::Parse { .. }
            | Error::Validation { .. }
            | Error::Malformed(_)
            | Error::Shape(_)
            | Error::Contract(_) => EXIT_MALFORMED,
            Error::Diverged { .. } => EXIT_DIVERGED,
            Error::NoViableViewpoint => EXIT_NO_VIEWPOINT,
            Error::UndefinedCorrelation { .. } => EXIT_UNDEFINED,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "aesfield", version, about = "Aesthetic feature fields over Gaussian splat scenes")]
struct Cli {
    /// Seed for every random choice; required.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; 0 lets the runtime decide.
    #[arg(long, global = true, env = "AESFIELD_THREADS")]
    threads: Option<usize>,

    /// TOML run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override a configuration field, e.g. `--set search.top_k=4`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic scene.
    Gen(GenArgs),
    /// Write a ring of cameras looking at a scene.
    Cameras(CamerasArgs),
    /// Render each camera and write procedural teacher maps.
    Teacher(TeacherArgs),
    /// Fit the feature field to teacher maps.
    Distill(DistillArgs),
    /// Score views through the fitted field or the procedural teacher.
    Score(ScoreArgs),
    /// Suggest viewpoints along an input trajectory.
    Search(SearchArgs),
    /// Correlate predicted and teacher scores on held-out views.
    Eval(EvalArgs),
    /// Render cameras to PPM images.
    Render(RenderArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Grid,
    Random,
    SubjectClutter,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    /// Lattice side for `grid`, splat count for `random`, subject splats
    /// for `subject-clutter`.
    #[arg(long)]
    n: Option<usize>,
    /// Clutter splats for `subject-clutter`.
    #[arg(long, default_value_t = 120)]
    clutter: usize,
    /// Feature dimension.
    #[arg(long, default_value_t = aesfield::scene::DEFAULT_FEATURE_DIM)]
    dim: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CamerasArgs {
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Yaw span of the ring; 360 spaces cameras evenly around the scene.
    #[arg(long, default_value_t = 360.0)]
    spread_deg: f64,
    #[arg(long, default_value_t = 10.0)]
    elevation_deg: f64,
    /// Distance from the bounding-box center, as a fraction of its diagonal.
    #[arg(long, default_value_t = 0.7)]
    radius: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TeacherArgs {
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    cameras: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DistillArgs {
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    cameras: Option<PathBuf>,
    /// Directory of `view_NNN.fmap` files, one per camera.
    #[arg(long)]
    maps: Option<PathBuf>,
    /// Initial decoder JSON; a rule-of-thirds decoder by default.
    #[arg(long)]
    decoder: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Fitted scene; the decoder and loss trace go to `<out>.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    cameras: Option<PathBuf>,
    #[arg(long)]
    field: Option<PathBuf>,
    /// Score with the procedural teacher formula on RGB renders instead.
    #[arg(long)]
    teacher: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Input cameras; their order defines the trajectory.
    #[arg(long)]
    cameras: Option<PathBuf>,
    #[arg(long)]
    field: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    neighbors: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    /// Report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Score-colored PLY of the Stage-1 sample positions.
    #[arg(long)]
    ply: Option<PathBuf>,
    /// Render the best `k` suggestions as `top_NNN.ppm`.
    #[arg(long, default_value_t = 0)]
    render_top: usize,
    /// Directory for the renders; the report's directory by default.
    #[arg(long)]
    render_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Fitted scene; repeat with `--cameras` and `--maps` for several scenes.
    #[arg(long)]
    scene: Vec<PathBuf>,
    #[arg(long)]
    cameras: Vec<PathBuf>,
    #[arg(long)]
    maps: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum RenderMode {
    Color,
    Alpha,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    cameras: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = RenderMode::Color)]
    mode: RenderMode,
    /// Output directory for `view_NNN.ppm`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let seed = cli
        .seed
        .ok_or_else(|| CliError::usage("the global flag --seed is required"))?;
    let threads = cli.threads.unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::usage(format!("--threads: {e}")))?;
    let mut cfg = config::load(cli.config.as_deref(), &cli.overrides)?;
    cfg.search.seed = seed;
    let ctx = commands::Context { seed, cfg };
    match cli.command {
        Command::Gen(a) => commands::gen(&ctx, a),
        Command::Cameras(a) => commands::cameras(&ctx, a),
        Command::Teacher(a) => commands::teacher(&ctx, a),
        Command::Distill(a) => commands::distill(ctx, a),
        Command::Score(a) => commands::score(&ctx, a),
        Command::Search(a) => commands::search(ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Render(a) => commands::render(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
