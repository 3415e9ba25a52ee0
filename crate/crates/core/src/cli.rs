//! Subcommands of the `voxslam` executable.
//!
//! Settings are merged as defaults < `--config` file < command-line flags, and
//! the effective configuration is echoed into every log the command writes.
//! Exit codes: 0 success, 2 bad input or configuration, 3 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, Pose};
use crate::dataset::{
    random_smoothed_grid, synth_from_grid, synth_from_primitives, write_color_png, write_depth_png, Dataset,
    RandomGridSpec, SceneSpec, TrajectorySpec,
};
use crate::eval::{evaluate_views, speed_accuracy_sweep, MetricReport, PixelSampling, Trajectory};
use crate::gradients::{random_gradcheck, GradcheckSpec};
use crate::grid::VoxelGrid;
use crate::mapping::{map_scene, MappingConfig};
use crate::parallel::init_thread_pool;
use crate::render::{render_image, RenderSettings};
use crate::tracking::{track_sequence, InitPolicy, TrackingConfig};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "voxslam", version, about = "RGB-D mapping and tracking in a voxel radiance field")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Configuration file (JSON, or TOML by extension) with optional
    /// `mapping`, `tracking`, `eval` and `sweep` tables
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Random seed for every sampler of the command
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads (0 = one per core; default 1 with --deterministic)
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Reproducible run: single worker unless --threads is given, ordered reductions
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Primary output file or directory of the command
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic RGB-D dataset from a scene spec
    Synth(SynthArgs),
    /// Optimize a voxel grid from a posed RGB-D dataset
    Map(MapArgs),
    /// Track every frame of a dataset against a fixed grid
    Track(TrackArgs),
    /// Render color and depth PNGs of a grid from one pose
    Render(RenderArgs),
    /// Score trajectories and/or a grid against a dataset
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on random grids
    Gradcheck(GradcheckArgs),
    /// Track a dataset over a grid of ray budgets and iteration counts
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene spec (JSON or TOML); `generator` selects `primitives` or `grid`
    #[arg(long, value_name = "PATH")]
    pub spec: PathBuf,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    /// Dataset directory with poses
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    /// Optimizer iterations per resolution stage
    #[arg(long, value_name = "N")]
    pub iterations: Option<usize>,
    /// Rays per mini-batch
    #[arg(long, value_name = "N")]
    pub rays: Option<usize>,
    /// Weight of the depth loss (dimensionless; 0 maps from color alone)
    #[arg(long, value_name = "F")]
    pub lambda_d: Option<f64>,
    /// Cells along the longest axis at the final stage
    #[arg(long, value_name = "N")]
    pub resolution: Option<usize>,
    /// Number of resolution doublings
    #[arg(long, value_name = "N")]
    pub upsample_levels: Option<usize>,
    /// Density learning rate (1/m per step)
    #[arg(long, value_name = "F")]
    pub lr_sigma: Option<f64>,
    /// SH coefficient learning rate (per step)
    #[arg(long, value_name = "F")]
    pub lr_sh: Option<f64>,
    /// Use every n-th frame
    #[arg(long, value_name = "N")]
    pub keyframe_stride: Option<usize>,
    /// Training log CSV [default: <out>.csv]
    #[arg(long, value_name = "PATH")]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InitArg {
    Previous,
    ConstantVelocity,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// Grid file
    #[arg(long, value_name = "PATH")]
    pub grid: PathBuf,
    /// Dataset directory; the first frame's pose anchors the trajectory
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    /// Adam iterations per frame
    #[arg(long, value_name = "N")]
    pub iterations: Option<usize>,
    /// Sampled pixels per iteration
    #[arg(long, value_name = "N")]
    pub rays: Option<usize>,
    /// Weight of the depth loss (dimensionless)
    #[arg(long, value_name = "F")]
    pub lambda_d: Option<f64>,
    /// Rotation step size (radians)
    #[arg(long, value_name = "F")]
    pub lr_rotation: Option<f64>,
    /// Translation step size (meters)
    #[arg(long, value_name = "F")]
    pub lr_translation: Option<f64>,
    /// Initial pose of each frame
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    /// Per-frame status CSV [default: <out>.status.csv]
    #[arg(long, value_name = "PATH")]
    pub status: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Grid file
    #[arg(long, value_name = "PATH")]
    pub grid: PathBuf,
    /// Take intrinsics and the ground-truth pose of --frame from this dataset
    #[arg(long, value_name = "DIR", conflicts_with = "pose")]
    pub dataset: Option<PathBuf>,
    /// Frame index within --dataset
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub frame: usize,
    /// Camera-to-world pose "tx ty tz qx qy qz qw" (meters, unit quaternion)
    #[arg(long, value_name = "POSE", allow_hyphen_values = true)]
    pub pose: Option<String>,
    /// Image width (pixels)
    #[arg(long, value_name = "PX", default_value_t = 64)]
    pub width: u32,
    /// Image height (pixels)
    #[arg(long, value_name = "PX", default_value_t = 48)]
    pub height: u32,
    /// Focal length (pixels)
    #[arg(long, value_name = "PX", default_value_t = 60.0)]
    pub focal: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Estimated trajectory (TUM format)
    #[arg(long, value_name = "PATH", requires = "reference")]
    pub estimate: Option<PathBuf>,
    /// Reference trajectory (TUM format)
    #[arg(long, value_name = "PATH", requires = "estimate")]
    pub reference: Option<PathBuf>,
    /// Grid to score against --dataset views
    #[arg(long, value_name = "PATH", requires = "dataset")]
    pub grid: Option<PathBuf>,
    /// Dataset whose frames are the reference views
    #[arg(long, value_name = "DIR")]
    pub dataset: Option<PathBuf>,
    /// Frames sampled for PSNR and depth L1
    #[arg(long, value_name = "N")]
    pub images: Option<usize>,
    /// Pixels sampled per frame
    #[arg(long, value_name = "N")]
    pub pixels: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Cells per axis of the random grids
    #[arg(long, value_name = "N", default_value_t = 4)]
    pub resolution: usize,
    /// Kink-free grid/ray configurations to check
    #[arg(long, value_name = "N", default_value_t = 10)]
    pub cases: usize,
    /// Largest accepted relative error
    #[arg(long, value_name = "F", default_value_t = 1e-4)]
    pub threshold: f64,
    /// Central-difference step for map parameters
    #[arg(long, value_name = "F", default_value_t = 1e-6)]
    pub eps_map: f64,
    /// Central-difference step for ray origin and direction (meters)
    #[arg(long, value_name = "F", default_value_t = 1e-7)]
    pub eps_ray: f64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Grid file
    #[arg(long, value_name = "PATH")]
    pub grid: PathBuf,
    /// Dataset directory with ground-truth poses
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    /// Comma-separated rays per iteration
    #[arg(long, value_name = "N,..", value_delimiter = ',')]
    pub rays: Option<Vec<usize>>,
    /// Comma-separated iterations per frame
    #[arg(long, value_name = "N,..", value_delimiter = ',')]
    pub iterations: Option<Vec<usize>>,
}

/// Settings of `eval`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub sampling: PixelSampling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub rays: Vec<usize>,
    pub iterations: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            rays: vec![128, 256, 512, 1024, 2048],
            iterations: vec![TrackingConfig::default().iterations],
        }
    }
}

/// Everything a command can be configured with.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mapping: MappingConfig,
    pub tracking: TrackingConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        parse_by_extension(path)
    }

    fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.mapping.seed = s;
            self.tracking.seed = s;
            self.eval.sampling.seed = s;
        }
    }
}

fn parse_by_extension<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    if is_toml {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    } else {
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// Camera path and image settings shared by both generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSceneSpec {
    #[serde(default)]
    pub grid: RandomGridSpec,
    /// Load this grid file instead of generating one.
    #[serde(default)]
    pub grid_file: Option<PathBuf>,
    pub trajectory: TrajectorySpec,
    pub frame_count: usize,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    #[serde(default = "default_frame_period")]
    pub frame_period: f64,
}

fn default_frame_period() -> f64 {
    1.0 / 30.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum SynthSpec {
    Primitives(SceneSpec),
    Grid(GridSceneSpec),
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Dataset(_)
        | Error::GridFormat(_)
        | Error::Io { .. }
        | Error::Image { .. }
        | Error::Json { .. }
        | Error::Trajectory(_)
        | Error::InvalidGeometry(_)
        | Error::DegenerateScene(_)
        | Error::PixelOutOfBounds { .. }
        | Error::ResolutionOverflow { .. } => EXIT_INPUT,
        Error::UntrackableFrame
        | Error::NonFiniteLoss { .. }
        | Error::NonFiniteCheck(_)
        | Error::EmptyBatch
        | Error::Metric(_)
        | Error::OutsideGrid(..)
        | Error::NonUnitDirection(_) => EXIT_RUNTIME,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs a parsed command; `Ok` carries the exit code of commands that
/// report failed checks without erroring.
pub fn execute(cli: &Cli) -> Result<i32> {
    let c = &cli.common;
    let threads = c.threads.unwrap_or(if c.deterministic { 1 } else { 0 });
    init_thread_pool(threads);
    let mut config = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    config.apply_seed(c.seed);
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, c),
        Command::Map(a) => cmd_map(a, c, config),
        Command::Track(a) => cmd_track(a, c, config),
        Command::Render(a) => cmd_render(a, c),
        Command::Eval(a) => cmd_eval(a, c, config),
        Command::Gradcheck(a) => cmd_gradcheck(a, c),
        Command::Sweep(a) => cmd_sweep(a, c, config),
    }
}

fn required_out(c: &CommonArgs, what: &str) -> Result<PathBuf> {
    c.out
        .clone()
        .ok_or_else(|| Error::Config(format!("--out {what} is required")))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_synth(a: &SynthArgs, c: &CommonArgs) -> Result<i32> {
    let out = required_out(c, "DIR")?;
    let spec: SynthSpec = parse_by_extension(&a.spec)?;
    let ds = match spec {
        SynthSpec::Primitives(mut s) => {
            if let Some(seed) = c.seed {
                s.seed = seed;
            }
            synth_from_primitives(&s)?.0
        }
        SynthSpec::Grid(mut s) => {
            if let Some(seed) = c.seed {
                s.grid.seed = seed;
            }
            let grid = match &s.grid_file {
                Some(p) => VoxelGrid::load(p)?,
                None => random_smoothed_grid(&s.grid)?,
            };
            let k = CameraIntrinsics::centered(s.width, s.height, s.focal)?;
            let traj = s.trajectory.trajectory(s.frame_count, s.frame_period)?;
            let ds = synth_from_grid(&grid, &traj, &k, &RenderSettings::for_grid(&grid))?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            grid.save(&out.join("scene_grid.vxg"))?;
            ds
        }
    };
    ds.save(&out)?;
    log::info!("wrote {} frames to {}", ds.frames.len(), out.display());
    Ok(EXIT_OK)
}

fn cmd_map(a: &MapArgs, c: &CommonArgs, mut config: RunConfig) -> Result<i32> {
    let out = required_out(c, "PATH (grid file)")?;
    let m = &mut config.mapping;
    if let Some(v) = a.iterations {
        m.iterations_per_stage = v;
    }
    if let Some(v) = a.rays {
        m.rays_per_batch = v;
    }
    if let Some(v) = a.lambda_d {
        m.lambda_d = v;
    }
    if let Some(v) = a.resolution {
        m.resolution = v;
    }
    if let Some(v) = a.upsample_levels {
        m.upsample_levels = v;
    }
    if let Some(v) = a.lr_sigma {
        m.lr_sigma = v;
    }
    if let Some(v) = a.lr_sh {
        m.lr_sh = v;
    }
    if let Some(v) = a.keyframe_stride {
        m.keyframe_stride = v;
    }
    m.validate()?;
    let ds = Dataset::load(&a.dataset)?;
    if !ds.has_poses() {
        return Err(Error::Dataset(format!("{} has no poses; mapping needs them", a.dataset.display())));
    }
    let result = map_scene(&ds, m)?;
    ensure_parent(&out)?;
    result.grid.save(&out)?;
    let log_path = a.log.clone().unwrap_or_else(|| out.with_extension("csv"));
    write_text(&log_path, &result.log.to_csv())?;
    log::info!("grid {} (checksum {})", out.display(), result.grid.checksum());
    Ok(EXIT_OK)
}

fn cmd_track(a: &TrackArgs, c: &CommonArgs, mut config: RunConfig) -> Result<i32> {
    let out = required_out(c, "PATH (trajectory file)")?;
    let t = &mut config.tracking;
    if let Some(v) = a.iterations {
        t.iterations = v;
    }
    if let Some(v) = a.rays {
        t.rays_per_iteration = v;
    }
    if let Some(v) = a.lambda_d {
        t.lambda_d = v;
    }
    if let Some(v) = a.lr_rotation {
        t.lr_rotation = v;
    }
    if let Some(v) = a.lr_translation {
        t.lr_translation = v;
    }
    if let Some(v) = a.init {
        t.init = match v {
            InitArg::Previous => InitPolicy::PreviousPose,
            InitArg::ConstantVelocity => InitPolicy::ConstantVelocity,
        };
    }
    t.validate()?;
    let grid = VoxelGrid::load(&a.grid)?;
    let ds = Dataset::load(&a.dataset)?;
    let seq = track_sequence(&grid, &ds, t)?;
    ensure_parent(&out)?;
    seq.trajectory.save_tum(&out)?;
    let status = format!(
        "# tracking config: {}\n{}",
        serde_json::to_string(t).expect("config serializes"),
        seq.status_csv()
    );
    write_text(&a.status.clone().unwrap_or_else(|| with_suffix(&out, ".status.csv")), &status)?;
    let failed = seq.statuses.iter().filter(|s| s.failed).count();
    if failed > 0 {
        log::warn!("{failed} of {} frames failed to track", seq.statuses.len());
    }
    Ok(EXIT_OK)
}

/// Parses "tx ty tz qx qy qz qw".
pub fn parse_pose(text: &str) -> Result<Pose> {
    let v: Vec<f64> = text
        .split(|ch: char| ch.is_whitespace() || ch == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("pose {text:?}: {e}")))?;
    if v.len() != 7 {
        return Err(Error::Config(format!("pose needs 7 numbers, got {}", v.len())));
    }
    let q = Quaternion::new(v[6], v[3], v[4], v[5]);
    if !(q.norm() > 0.5 && q.norm() < 1.5) {
        return Err(Error::Config(format!("pose quaternion norm {} is not near 1", q.norm())));
    }
    Ok(Pose::new(UnitQuaternion::from_quaternion(q), Vector3::new(v[0], v[1], v[2])))
}

fn cmd_render(a: &RenderArgs, c: &CommonArgs) -> Result<i32> {
    let out = required_out(c, "PATH (color PNG)")?;
    let grid = VoxelGrid::load(&a.grid)?;
    let (k, pose) = match (&a.dataset, &a.pose) {
        (Some(dir), _) => {
            let ds = Dataset::load(dir)?;
            let f = ds
                .frames
                .get(a.frame)
                .ok_or_else(|| Error::Config(format!("frame {} out of range ({} frames)", a.frame, ds.frames.len())))?;
            let pose = f
                .gt_pose
                .ok_or_else(|| Error::Dataset(format!("frame {} has no pose", a.frame)))?;
            (ds.intrinsics, pose)
        }
        (None, Some(p)) => (CameraIntrinsics::centered(a.width, a.height, a.focal)?, parse_pose(p)?),
        (None, None) => return Err(Error::Config("render needs --pose or --dataset".into())),
    };
    let img = render_image(&grid, &k, &pose, 1, &RenderSettings::for_grid(&grid))?;
    ensure_parent(&out)?;
    write_color_png(&out, img.width, img.height, &img.color)?;
    let depth = out.with_file_name(format!(
        "{}_depth.png",
        out.file_stem().and_then(|s| s.to_str()).unwrap_or("render")
    ));
    write_depth_png(&depth, img.width, img.height, &img.depth, k.depth_scale)?;
    Ok(EXIT_OK)
}

fn cmd_eval(a: &EvalArgs, c: &CommonArgs, mut config: RunConfig) -> Result<i32> {
    let mut report = MetricReport::default();
    if let (Some(e), Some(r)) = (&a.estimate, &a.reference) {
        report.add_trajectory(&Trajectory::load_tum(e)?, &Trajectory::load_tum(r)?)?;
    }
    if let (Some(g), Some(d)) = (&a.grid, &a.dataset) {
        let grid = VoxelGrid::load(g)?;
        let ds = Dataset::load(d)?;
        let s = &mut config.eval.sampling;
        if let Some(v) = a.images {
            s.images = v;
        }
        if let Some(v) = a.pixels {
            s.pixels_per_image = v;
        }
        let frames: Vec<_> = ds.frames.iter().collect();
        let views = evaluate_views(&grid, &ds.intrinsics, &frames, s, &RenderSettings::for_grid(&grid))?;
        report.add_views(&views);
    }
    if a.estimate.is_none() && a.grid.is_none() {
        return Err(Error::Config("eval needs --estimate/--reference and/or --grid/--dataset".into()));
    }
    print!("{}", report.to_table());
    if let Some(out) = &c.out {
        write_text(out, &report.to_json())?;
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: &GradcheckArgs, c: &CommonArgs) -> Result<i32> {
    let spec = GradcheckSpec {
        resolution: a.resolution,
        cases: a.cases,
        seed: c.seed.unwrap_or(0),
        eps_map: a.eps_map,
        eps_ray: a.eps_ray,
        ..Default::default()
    };
    if spec.resolution == 0 || spec.cases == 0 {
        return Err(Error::Config("--resolution and --cases must be positive".into()));
    }
    let summary = random_gradcheck(&spec)?;
    let text = summary.to_text();
    match &c.out {
        Some(p) => write_text(p, &text)?,
        None => print!("{text}"),
    }
    let worst = summary.map_max_rel_err.max(summary.ray_max_rel_err);
    if worst > a.threshold {
        eprintln!("gradient check failed: max relative error {worst:.3e} > {:.3e}", a.threshold);
        return Ok(EXIT_RUNTIME);
    }
    Ok(EXIT_OK)
}

fn cmd_sweep(a: &SweepArgs, c: &CommonArgs, mut config: RunConfig) -> Result<i32> {
    let out = required_out(c, "PATH (CSV)")?;
    if let Some(v) = &a.rays {
        config.sweep.rays = v.clone();
    }
    if let Some(v) = &a.iterations {
        config.sweep.iterations = v.clone();
    }
    if config.sweep.rays.is_empty() || config.sweep.iterations.is_empty() {
        return Err(Error::Config("sweep needs at least one ray count and iteration count".into()));
    }
    config.tracking.validate()?;
    let grid = VoxelGrid::load(&a.grid)?;
    let ds = Dataset::load(&a.dataset)?;
    let result = speed_accuracy_sweep(&grid, &ds, &config.sweep.rays, &config.sweep.iterations, &config.tracking)?;
    write_text(&out, &result.to_csv())?;
    log::info!("rays/ATE Spearman correlation {:?}", result.rays_ate_spearman);
    Ok(EXIT_OK)
}
