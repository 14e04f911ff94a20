use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use topoforge::mesh::{BcCase, Grid};

#[derive(Debug, Parser)]
#[command(name = "topoforge", version, about = "Topology optimization with transfer-learned predictors")]
pub struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a SIMP ground-truth dataset.
    Gen(GenArgs),
    /// Solve one problem with SIMP.
    Simp(SimpArgs),
    /// Train a source network on a low-resolution dataset.
    TrainSource(TrainSourceArgs),
    /// Build a target network from a source checkpoint and fine-tune it.
    TrainTarget(TrainTargetArgs),
    /// Predict the optimal layout of one problem.
    Predict(PredictArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Run SIMP starting from a predicted layout.
    Refine(RefineArgs),
    /// Serve predictions and SIMP over HTTP.
    Serve(ServeArgs),
}

/// Grid extents written x first: `60,20` (or `60x20`) is 60 elements long
/// and 20 high; a third value adds depth.
pub fn parse_grid(text: &str) -> Result<Grid, String> {
    let parts: Vec<usize> = text
        .split([',', 'x', 'X'])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [nx, ny] if nx > 0 && ny > 0 => Ok(Grid::new_2d(nx, ny)),
        [nx, ny, nz] if nx > 0 && ny > 0 && nz > 0 => Ok(Grid::new_3d(nx, ny, nz)),
        _ => Err(format!("expected 2 or 3 positive extents, got `{text}`")),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coords(pub Vec<usize>);

pub fn parse_coords(text: &str) -> Result<Coords, String> {
    text.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()
        .map(Coords)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Floats(pub Vec<f64>);

pub fn parse_floats(text: &str) -> Result<Floats, String> {
    text.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()
        .map(Floats)
}

/// A problem from a JSON file, or a standard support case with one load.
#[derive(Debug, Args)]
pub struct ProblemArgs {
    /// Problem JSON file.
    #[arg(long, conflicts_with_all = ["dims", "case", "load", "force"])]
    pub problem: Option<PathBuf>,
    /// Grid extents, x first.
    #[arg(long, value_parser = parse_grid)]
    pub dims: Option<Grid>,
    /// Support case: cantilever, simply_supported, constrained_cantilever,
    /// dome_support.
    #[arg(long)]
    pub case: Option<BcCase>,
    /// Load node as grid coordinates `x,y[,z]`; defaults to the middle of
    /// the right face (cantilevers) or of the top face.
    #[arg(long, value_parser = parse_coords)]
    pub load: Option<Coords>,
    /// Force components in N.
    #[arg(long, value_parser = parse_floats, allow_hyphen_values = true)]
    pub force: Option<Floats>,
    #[arg(long, default_value_t = 0.5)]
    pub volfrac: f64,
}

#[derive(Debug, Args)]
pub struct SimpOpts {
    /// Filter radius in elements.
    #[arg(long, default_value_t = 1.5)]
    pub rmin: f64,
    #[arg(long, default_value_t = 3.0)]
    pub penal: f64,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 0.01)]
    pub change_tol: f64,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Grid extents, x first.
    #[arg(long, value_parser = parse_grid, required_unless_present = "domain")]
    pub dims: Option<Grid>,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset; the manifest goes next to it with a `.json` suffix.
    #[arg(long)]
    pub out: PathBuf,
    /// Support cases to draw from (repeatable). Defaults depend on rank.
    #[arg(long = "case")]
    pub cases: Vec<BcCase>,
    #[arg(long, default_value_t = 0.5)]
    pub volfrac: f64,
    /// Held-out sample count; otherwise 20% rounded up.
    #[arg(long)]
    pub test_count: Option<usize>,
    /// Divide stored forces by the force range.
    #[arg(long)]
    pub normalize_forces: bool,
    /// Generation config as JSON; replaces the sampling, split and SIMP
    /// flags. The domain still comes from `--dims` or `--domain`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Problem JSON whose dims and mask define the design domain.
    #[arg(long, conflicts_with = "dims")]
    pub domain: Option<PathBuf>,
    #[command(flatten)]
    pub simp: SimpOpts,
}

#[derive(Debug, Args)]
pub struct SimpArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[command(flatten)]
    pub simp: SimpOpts,
    /// Output prefix: writes `<out>.bin` (f32 densities) and `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a grayscale PGM image (2D only).
    #[arg(long)]
    pub pgm: bool,
}

#[derive(Debug, Args)]
pub struct TrainOpts {
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Stop after this many epochs without validation improvement.
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub validation_fraction: f64,
    /// Add mirror images of samples with symmetric supports.
    #[arg(long)]
    pub augment_mirror: bool,
    /// Train on every sample instead of the dataset's training split.
    #[arg(long)]
    pub all_samples: bool,
}

#[derive(Debug, Args)]
pub struct TrainSourceArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output checkpoint; the training manifest goes to `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Divide every layer width by this factor.
    #[arg(long, default_value_t = 1)]
    pub width_divisor: usize,
    #[command(flatten)]
    pub train: TrainOpts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FreezeArg {
    Frozen,
    Unfrozen,
}

#[derive(Debug, Args)]
pub struct TrainTargetArgs {
    /// Source checkpoint.
    #[arg(long)]
    pub source: PathBuf,
    /// High-resolution dataset.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = FreezeArg::Frozen)]
    pub freeze: FreezeArg,
    /// Train the same architecture from random weights instead.
    #[arg(long)]
    pub scratch: bool,
    #[command(flatten)]
    pub train: TrainOpts,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Output prefix: `<out>.bin` raw, `<out>.binary.bin` thresholded,
    /// `<out>.json` summary.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub pgm: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted raster.
    #[arg(long, requires = "truth", conflicts_with_all = ["model", "data"])]
    pub pred: Option<PathBuf>,
    /// Ground-truth raster.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Problem JSON; enables the compliance error and the active mask.
    #[arg(long)]
    pub problem: Option<PathBuf>,
    /// Evaluate a checkpoint on a dataset's test split instead.
    #[arg(long, requires = "data")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Skip the compliance error (one FEA solve per sample pair).
    #[arg(long)]
    pub no_compliance: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the symmetric difference of the binarized fields as PGM
    /// (single pair, 2D).
    #[arg(long, requires = "pred")]
    pub diff_pgm: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Starting raster; predicted with `--model` when absent.
    #[arg(long, required_unless_present = "model")]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub simp: SimpOpts,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub pgm: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Directory of `.twgt` checkpoints; falls back to TOPOFORGE_MODEL_DIR.
    #[arg(long, env = "TOPOFORGE_MODEL_DIR")]
    pub model_dir: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// SIMP worker threads; defaults to CPU cores minus one (at least 1).
    #[arg(long)]
    pub workers: Option<usize>,
    /// SIMP jobs allowed to wait for a worker before requests get 429.
    #[arg(long, default_value_t = 8)]
    pub queue: usize,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 30.0)]
    pub timeout: f64,
    /// Largest 2D SIMP grid accepted over HTTP, x first.
    #[arg(long, value_parser = parse_grid, default_value = "240,120")]
    pub max_simp_2d: Grid,
    /// Largest 3D SIMP grid accepted over HTTP.
    #[arg(long, value_parser = parse_grid, default_value = "40,40,40")]
    pub max_simp_3d: Grid,
}
