//! Command-line front end wiring the modules into reproducible pipelines.
//!
//! Five subcommands mirror the pipeline phases: `simulate` produces frames
//! and ground truth, `reconstruct` trains a field, `mesh` extracts geometry
//! from a checkpoint, `eval` scores a mesh and trajectory, and `ablate` runs
//! the loss/pose-refinement variants side by side. Every command writes a
//! `manifest.toml` describing its inputs, seed, artifacts, and timings so a
//! run can be reproduced from the manifest alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::encoder::{Aabb, HashGridConfig};
use crate::geometry::{transform_point, PoseSE3};
use crate::io::{
    read_frames, read_mesh, read_poses, write_frames, write_mesh, write_poses, PointCloudFrame,
};
use crate::mesher::{cull_mesh, extract_mesh, TriangleMesh};
use crate::metrics::{f_score, pose_error, sample_surface, MeshMetrics};
use crate::simulator::{
    fixture, ground_truth_mesh, load_scene, make_trajectory, perturb_poses, save_scene, scan,
    AnalyticScene, ScanPattern, TrajectoryKind,
};
use crate::supervision::LossMode;
use crate::trainer::{load_config, TrainConfig, Trainer};
use crate::{Error, Result};

/// Reconstruct occupancy fields from simulated LiDAR scans.
#[derive(Parser, Debug)]
#[command(name = "occfield", version, about)]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Scan an analytic scene into point-cloud frames plus ground truth.
    Simulate(SimulateArgs),
    /// Train an occupancy field from frames and initial poses.
    Reconstruct(ReconstructArgs),
    /// Extract and cull a triangle mesh from a checkpoint.
    Mesh(MeshArgs),
    /// Score a mesh (and optionally a trajectory) against ground truth.
    Eval(EvalArgs),
    /// Run the loss and pose-refinement variants on one simulated scene.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Fixture name (sphere, box-room, two-wall, corridor) or scene TOML path.
    #[arg(long, default_value = "sphere")]
    pub scene: String,
    /// Extraction bounds as `x0 y0 z0 x1 y1 z1`; required for TOML scenes.
    #[arg(long, num_args = 6, value_names = ["X0", "Y0", "Z0", "X1", "Y1", "Z1"], allow_negative_numbers = true)]
    pub bounds: Option<Vec<f64>>,
    /// Number of frames along the trajectory.
    #[arg(long, default_value_t = 20)]
    pub frames: usize,
    /// Rays per frame.
    #[arg(long, default_value_t = ScanPattern::DEFAULT_RAYS)]
    pub rays: usize,
    /// Trajectory shape: orbit, line, or room-walk.
    #[arg(long, default_value = "orbit")]
    pub trajectory: TrajectoryKind,
    /// Maximum sensor range in meters.
    #[arg(long, default_value_t = 100.0)]
    pub max_range: f64,
    /// Gaussian noise on returned ranges, meters (0 disables).
    #[arg(long, default_value_t = 0.0)]
    pub range_noise_std: f64,
    /// Also write a perturbed pose file: rotation bound (rad), translation bound (m).
    #[arg(long, num_args = 2, value_names = ["ROT", "TRANS"])]
    pub pose_noise: Option<Vec<f64>>,
    /// Marching-cubes resolution for the ground-truth mesh.
    #[arg(long, default_value_t = 256)]
    pub gt_resolution: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    /// Directory of frame_*.ply files.
    #[arg(long)]
    pub frames: PathBuf,
    /// Initial pose file (one `index tx ty tz qx qy qz qw` line per frame).
    #[arg(long)]
    pub poses: PathBuf,
    /// TrainConfig TOML; omitted keys use the built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the configured iteration count.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Override the configured loss: direct, simple-bce, or depth-render.
    #[arg(long)]
    pub loss_mode: Option<LossMode>,
    /// Disable joint pose refinement.
    #[arg(long)]
    pub no_pose_refine: bool,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Padding around the point-cloud bounding box, meters.
    #[arg(long, default_value_t = 0.5)]
    pub margin: f64,
    /// Hash-grid levels.
    #[arg(long)]
    pub levels: Option<usize>,
    /// Hash-table entries per level.
    #[arg(long)]
    pub table_size: Option<usize>,
    /// Coarsest grid resolution.
    #[arg(long)]
    pub base_resolution: Option<usize>,
    /// Finest grid resolution.
    #[arg(long)]
    pub max_resolution: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MeshArgs {
    /// Checkpoint written by `reconstruct`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Marching-cubes grid resolution.
    #[arg(long, default_value_t = 512)]
    pub resolution: usize,
    /// Drop triangles farther than this from the observed points, meters.
    #[arg(long, default_value_t = 0.1)]
    pub cull_radius: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predicted mesh PLY.
    #[arg(long)]
    pub mesh: PathBuf,
    /// Ground-truth mesh PLY.
    #[arg(long)]
    pub gt_mesh: PathBuf,
    /// Estimated pose file (requires --gt-poses).
    #[arg(long, requires = "gt_poses")]
    pub poses: Option<PathBuf>,
    /// Ground-truth pose file (requires --poses).
    #[arg(long, requires = "poses")]
    pub gt_poses: Option<PathBuf>,
    /// F-score distance threshold, meters.
    #[arg(long, default_value_t = crate::metrics::DEFAULT_F_SCORE_THRESHOLD)]
    pub threshold: f64,
    /// Surface samples per mesh.
    #[arg(long, default_value_t = crate::metrics::DEFAULT_SURFACE_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Occlusion fixture to ablate on.
    #[arg(long, default_value = "two-wall")]
    pub scene: String,
    #[arg(long, default_value_t = 10)]
    pub frames: usize,
    #[arg(long, default_value_t = 4000)]
    pub rays: usize,
    #[arg(long, default_value_t = 300)]
    pub iterations: usize,
    /// Marching-cubes resolution for extracted and ground-truth meshes.
    #[arg(long, default_value_t = 128)]
    pub resolution: usize,
    /// Pose noise injected before every variant: rotation (rad), translation (m).
    #[arg(long, num_args = 2, value_names = ["ROT", "TRANS"], default_values_t = [0.05, 0.1])]
    pub pose_noise: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub cull_radius: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// TrainConfig TOML shared by all variants (loss/refinement fields are overridden).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// One record per run: inputs, seed, artifact paths, and phase timings.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    pub timings_s: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
}

impl RunManifest {
    fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            timings_s: BTreeMap::new(),
            config: None,
        }
    }

    fn input(&mut self, key: &str, value: impl ToString) {
        self.inputs.insert(key.to_string(), value.to_string());
    }

    fn artifact(&mut self, key: &str, path: &Path) {
        self.artifacts
            .insert(key.to_string(), path.display().to_string());
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.toml");
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::InvalidInput(format!("manifest serialization: {e}")))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Parses arguments, runs the subcommand, and reports errors on stderr.
///
/// Intended as the whole body of `main`; returns the process exit code.
pub fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            // Single-line diagnostic even for multi-line parser messages.
            let msg = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("error: {msg}");
            std::process::ExitCode::FAILURE
        }
    }
}

/// Dispatches a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    if let Some(workers) = cli.workers {
        // Results are worker-count independent; this only bounds parallelism.
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| Error::InvalidInput(format!("worker pool: {e}")))?;
    }
    match cli.command {
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Reconstruct(args) => cmd_reconstruct(&args),
        Command::Mesh(args) => cmd_mesh(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Ablate(args) => cmd_ablate(&args),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Resolves `--scene` as a fixture name first, then as a scene TOML path.
fn resolve_scene(name: &str, bounds: &Option<Vec<f64>>) -> Result<(AnalyticScene, Aabb)> {
    if let Ok(pair) = fixture(name) {
        return Ok(pair);
    }
    let scene = load_scene(Path::new(name))?;
    let Some(b) = bounds else {
        return Err(Error::InvalidInput(format!(
            "--bounds is required for scene file {name} (only bundled fixtures carry bounds)"
        )));
    };
    Ok((scene, Aabb::new([b[0], b[1], b[2]], [b[3], b[4], b[5]])))
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    ensure_dir(&args.out)?;
    let (scene, bounds) = resolve_scene(&args.scene, &args.bounds)?;
    let mut manifest = RunManifest::new("simulate", args.seed);
    manifest.input("scene", &args.scene);
    manifest.input("frames", args.frames);
    manifest.input("rays", args.rays);
    manifest.input("trajectory", format!("{:?}", args.trajectory));
    manifest.input("range_noise_std", args.range_noise_std);

    let mut rng = ChaCha20Rng::seed_from_u64(args.seed);
    let poses = make_trajectory(args.trajectory, args.frames, &scene, &bounds)?;

    let t_scan = Instant::now();
    let mut frames = Vec::with_capacity(poses.len());
    for pose in &poses {
        let pattern = ScanPattern::uniform(args.rays, args.max_range, &mut rng)?
            .with_noise(args.range_noise_std);
        frames.push(scan(&scene, pose, &pattern, &mut rng));
    }
    manifest
        .timings_s
        .insert("scan".into(), t_scan.elapsed().as_secs_f64());

    let frames_dir = args.out.join("frames");
    ensure_dir(&frames_dir)?;
    write_frames(&frames, &frames_dir)?;
    manifest.artifact("frames", &frames_dir);

    let poses_path = args.out.join("poses_gt.txt");
    write_poses(&poses, &poses_path)?;
    manifest.artifact("poses_gt", &poses_path);

    if let Some(noise) = &args.pose_noise {
        let noisy = perturb_poses(&poses, noise[0], noise[1], &mut rng)?;
        let noisy_path = args.out.join("poses_noisy.txt");
        write_poses(&noisy, &noisy_path)?;
        manifest.artifact("poses_noisy", &noisy_path);
        manifest.input("pose_noise_rot", noise[0]);
        manifest.input("pose_noise_trans", noise[1]);
    }

    let t_mesh = Instant::now();
    let gt = ground_truth_mesh(&scene, &bounds, args.gt_resolution)?;
    manifest
        .timings_s
        .insert("gt_mesh".into(), t_mesh.elapsed().as_secs_f64());
    let gt_path = args.out.join("mesh_gt.ply");
    write_mesh(&gt, &gt_path)?;
    manifest.artifact("mesh_gt", &gt_path);

    let scene_path = args.out.join("scene.toml");
    save_scene(&scene, &scene_path)?;
    manifest.artifact("scene", &scene_path);

    manifest.write(&args.out)?;
    println!(
        "simulated {} frames x {} rays into {}",
        frames.len(),
        args.rays,
        args.out.display()
    );
    Ok(())
}

/// World-space bounds covering all observed points and sensor origins.
fn cloud_bounds(frames: &[PointCloudFrame], poses: &[PoseSE3], margin: f64) -> Result<Aabb> {
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    let mut grow = |p: &Vector3<f64>| {
        for a in 0..3 {
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
    };
    for (frame, pose) in frames.iter().zip(poses) {
        grow(&pose.translation);
        for p in &frame.points {
            if p.iter().all(|c| c.is_finite()) {
                grow(&transform_point(pose, p));
            }
        }
    }
    if !min.iter().all(|v| v.is_finite()) {
        return Err(Error::EmptyInput("no finite points to bound".into()));
    }
    Ok(Aabb::new(min, max).padded(margin))
}

fn build_train_config(args: &ReconstructArgs) -> Result<TrainConfig> {
    let mut config = match &args.config {
        Some(path) => load_config(path)?,
        None => TrainConfig::default(),
    };
    if let Some(iterations) = args.iterations {
        config.iterations = iterations;
    }
    if let Some(mode) = args.loss_mode {
        config.loss_mode = mode;
    }
    if args.no_pose_refine {
        config.pose_refine = false;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn build_grid(args: &ReconstructArgs, bounds: Aabb) -> Result<HashGridConfig> {
    let mut grid = HashGridConfig::with_bounds(bounds);
    if let Some(levels) = args.levels {
        grid.levels = levels;
    }
    if let Some(table_size) = args.table_size {
        grid.table_size = table_size;
    }
    if let Some(base) = args.base_resolution {
        grid.base_resolution = base;
    }
    if let Some(max) = args.max_resolution {
        grid.max_resolution = max;
    }
    grid.validate()?;
    Ok(grid)
}

pub fn cmd_reconstruct(args: &ReconstructArgs) -> Result<()> {
    ensure_dir(&args.out)?;
    let config = build_train_config(args)?;
    let mut manifest = RunManifest::new("reconstruct", config.seed);
    manifest.input("frames", args.frames.display());
    manifest.input("poses", args.poses.display());

    let t_load = Instant::now();
    let frames = read_frames(&args.frames)?;
    let poses = read_poses(&args.poses)?;
    if frames.len() != poses.len() {
        return Err(Error::InvalidInput(format!(
            "{} frames but {} poses",
            frames.len(),
            poses.len()
        )));
    }
    let bounds = cloud_bounds(&frames, &poses, args.margin)?;
    let grid = build_grid(args, bounds)?;
    manifest
        .timings_s
        .insert("load".into(), t_load.elapsed().as_secs_f64());

    let t_train = Instant::now();
    let mut trainer = Trainer::new(&frames, &poses, grid, config.clone())?;
    let outcome = trainer.run();
    manifest
        .timings_s
        .insert("train".into(), t_train.elapsed().as_secs_f64());
    if let Err(Error::Diverged { .. }) = &outcome {
        // Preserve the diverged state for postmortem inspection.
        let diag = args.out.join("diverged.ckpt");
        trainer.save_checkpoint(&diag)?;
        eprintln!("diagnostic checkpoint written to {}", diag.display());
    }
    outcome?;

    let checkpoint = args.out.join("checkpoint.ckpt");
    trainer.save_checkpoint(&checkpoint)?;
    manifest.artifact("checkpoint", &checkpoint);

    let mut refined = poses.clone();
    for (kf, pose) in trainer.keyframes.iter().zip(trainer.refined_poses()) {
        refined[kf.index] = pose;
    }
    let refined_path = args.out.join("poses_refined.txt");
    write_poses(&refined, &refined_path)?;
    manifest.artifact("poses_refined", &refined_path);

    let loss_path = args.out.join("loss.txt");
    let mut loss_text = String::new();
    for l in &trainer.loss_history {
        writeln!(loss_text, "{l}").expect("string write");
    }
    fs::write(&loss_path, loss_text).map_err(|e| Error::io(&loss_path, e))?;
    manifest.artifact("loss_history", &loss_path);

    manifest.config = Some(config);
    manifest.write(&args.out)?;
    println!(
        "trained {} iterations on {} keyframes; checkpoint at {}",
        trainer.iteration,
        trainer.keyframes.len(),
        checkpoint.display()
    );
    Ok(())
}

pub fn cmd_mesh(args: &MeshArgs) -> Result<()> {
    ensure_dir(&args.out)?;
    let mut manifest = RunManifest::new("mesh", 0);
    manifest.input("checkpoint", args.checkpoint.display());
    manifest.input("resolution", args.resolution);
    manifest.input("cull_radius", args.cull_radius);

    let trainer = Trainer::load_checkpoint(&args.checkpoint)?;
    let bounds = trainer.field.grid.bounds.clone();

    let t_extract = Instant::now();
    let field = &trainer.field;
    let mesh = extract_mesh(
        |p| field.evaluate(p).expect("finite grid point"),
        &bounds,
        args.resolution,
    )?;
    manifest
        .timings_s
        .insert("extract".into(), t_extract.elapsed().as_secs_f64());

    // Cull against the observed cloud placed at the refined poses.
    let t_cull = Instant::now();
    let mut cloud = Vec::new();
    for (kf, pose) in trainer.keyframes.iter().zip(trainer.refined_poses()) {
        cloud.extend(kf.points.iter().map(|p| transform_point(&pose, p)));
    }
    let culled = cull_mesh(&mesh, &cloud, args.cull_radius)?;
    manifest
        .timings_s
        .insert("cull".into(), t_cull.elapsed().as_secs_f64());

    let mesh_path = args.out.join("mesh.ply");
    write_mesh(&culled, &mesh_path)?;
    manifest.artifact("mesh", &mesh_path);
    manifest.write(&args.out)?;
    println!(
        "extracted {} vertices / {} triangles ({} before culling) to {}",
        culled.vertices.len(),
        culled.triangles.len(),
        mesh.triangles.len(),
        mesh_path.display()
    );
    Ok(())
}

/// Flat key-value report plus a human-readable two-column table.
fn write_report(report: &BTreeMap<String, f64>, dir: &Path) -> Result<PathBuf> {
    let path = dir.join("report.toml");
    let text = toml::to_string_pretty(report)
        .map_err(|e| Error::InvalidInput(format!("report serialization: {e}")))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let width = report.keys().map(|k| k.len()).max().unwrap_or(0);
    for (key, value) in report {
        println!("{key:width$}  {value:.6}");
    }
    Ok(path)
}

fn mesh_report(metrics: &MeshMetrics) -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("chamfer_l1".to_string(), metrics.chamfer_l1),
        ("f_score".to_string(), metrics.f_score),
        ("precision".to_string(), metrics.precision),
        ("recall".to_string(), metrics.recall),
    ])
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    ensure_dir(&args.out)?;
    let mut manifest = RunManifest::new("eval", args.seed);
    manifest.input("mesh", args.mesh.display());
    manifest.input("gt_mesh", args.gt_mesh.display());
    manifest.input("threshold", args.threshold);
    manifest.input("samples", args.samples);

    let mesh = read_mesh(&args.mesh)?;
    let gt_mesh = read_mesh(&args.gt_mesh)?;
    let t_metrics = Instant::now();
    // Identically seeded streams per mesh: evaluating a mesh against itself
    // then scores identical sample sets (chamfer 0, f-score 1).
    let mut pred_rng = ChaCha20Rng::seed_from_u64(args.seed);
    let mut gt_rng = ChaCha20Rng::seed_from_u64(args.seed);
    let pred_points = sample_surface(&mesh, args.samples, &mut pred_rng)?;
    let gt_points = sample_surface(&gt_mesh, args.samples, &mut gt_rng)?;
    let metrics = f_score(&pred_points, &gt_points, args.threshold)?;
    let mut report = mesh_report(&metrics);

    if let (Some(poses_path), Some(gt_path)) = (&args.poses, &args.gt_poses) {
        manifest.input("poses", poses_path.display());
        manifest.input("gt_poses", gt_path.display());
        let estimated = read_poses(poses_path)?;
        let ground_truth = read_poses(gt_path)?;
        let errors = pose_error(&estimated, &ground_truth)?;
        report.insert("rot_err_mean_deg".into(), errors.rot_mean());
        report.insert("rot_err_median_deg".into(), errors.rot_median());
        report.insert("trans_err_mean_m".into(), errors.trans_mean());
        report.insert("trans_err_median_m".into(), errors.trans_median());
    }
    manifest
        .timings_s
        .insert("metrics".into(), t_metrics.elapsed().as_secs_f64());

    let report_path = write_report(&report, &args.out)?;
    manifest.artifact("report", &report_path);
    manifest.write(&args.out)?;
    Ok(())
}

/// The four Table-style configurations: each variant changes one thing.
const ABLATION_VARIANTS: [(&str, LossMode, bool); 4] = [
    ("full", LossMode::Direct, true),
    ("simple-bce", LossMode::SimpleBce, true),
    ("depth-render", LossMode::DepthRender, true),
    ("no-pose-refine", LossMode::Direct, false),
];

/// Sensor arc on the open side of the two-wall fixture.
///
/// The bundled trajectories circle the scene center, which sits inside the
/// occluder here, so the ablation places its own viewpoints: a lateral sweep
/// in front of the walls that sees around the occluder from both sides.
fn open_side_trajectory(n_frames: usize, bounds: &Aabb) -> Vec<PoseSE3> {
    let extent = bounds.extent();
    let center = bounds.center();
    (0..n_frames)
        .map(|i| {
            let s = if n_frames > 1 {
                i as f64 / (n_frames - 1) as f64
            } else {
                0.5
            };
            let y = center[1] + (s - 0.5) * 0.6 * extent[1];
            let z = center[2] + 0.15 * (s * std::f64::consts::TAU).sin();
            PoseSE3::new(
                nalgebra::Matrix3::identity(),
                Vector3::new(bounds.min[0] + 0.15 * extent[0], y, z),
            )
        })
        .collect()
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    ensure_dir(&args.out)?;
    let (scene, bounds) = fixture(&args.scene)?;
    let mut manifest = RunManifest::new("ablate", args.seed);
    manifest.input("scene", &args.scene);
    manifest.input("frames", args.frames);
    manifest.input("rays", args.rays);
    manifest.input("iterations", args.iterations);
    manifest.input("pose_noise_rot", args.pose_noise[0]);
    manifest.input("pose_noise_trans", args.pose_noise[1]);

    // One shared simulation: every variant trains on identical frames,
    // identical noisy poses, and the same seed.
    let mut rng = ChaCha20Rng::seed_from_u64(args.seed);
    let poses = open_side_trajectory(args.frames, &bounds);
    let mut frames = Vec::with_capacity(poses.len());
    for pose in &poses {
        let pattern = ScanPattern::uniform(args.rays, 100.0, &mut rng)?;
        frames.push(scan(&scene, pose, &pattern, &mut rng));
    }
    let noisy = perturb_poses(&poses, args.pose_noise[0], args.pose_noise[1], &mut rng)?;
    let gt_mesh = ground_truth_mesh(&scene, &bounds, args.resolution)?;
    let mut gt_rng = ChaCha20Rng::seed_from_u64(args.seed ^ 0x5eed);
    let gt_points = sample_surface(&gt_mesh, crate::metrics::DEFAULT_SURFACE_SAMPLES, &mut gt_rng)?;

    let base = match &args.config {
        Some(path) => load_config(path)?,
        None => TrainConfig::default(),
    };
    let mut results: Vec<(&str, MeshMetrics)> = Vec::new();
    for (name, loss_mode, pose_refine) in ABLATION_VARIANTS {
        let config = TrainConfig {
            iterations: args.iterations,
            seed: args.seed,
            loss_mode,
            pose_refine,
            ..base.clone()
        };
        let t_variant = Instant::now();
        let grid = HashGridConfig::with_bounds(bounds.clone());
        let mut trainer = Trainer::new(&frames, &noisy, grid, config)?;
        trainer.run()?;
        let mesh = variant_mesh(&trainer, &bounds, args.resolution, args.cull_radius)?;
        write_mesh(&mesh, &args.out.join(format!("mesh_{name}.ply")))?;
        let metrics = if mesh.is_empty() {
            // A variant that recovered no surface still gets a column.
            eprintln!("warning: variant {name} produced an empty mesh");
            MeshMetrics {
                chamfer_l1: f64::INFINITY,
                f_score: 0.0,
                precision: 0.0,
                recall: 0.0,
                n_pred: 0,
                n_gt: gt_points.len(),
            }
        } else {
            let mut sample_rng = ChaCha20Rng::seed_from_u64(args.seed ^ 0xab1a7e);
            let pred =
                sample_surface(&mesh, crate::metrics::DEFAULT_SURFACE_SAMPLES, &mut sample_rng)?;
            f_score(&pred, &gt_points, crate::metrics::DEFAULT_F_SCORE_THRESHOLD)?
        };
        manifest
            .timings_s
            .insert(name.into(), t_variant.elapsed().as_secs_f64());
        results.push((name, metrics));
    }

    let mut report = BTreeMap::new();
    for (name, metrics) in &results {
        for (key, value) in mesh_report(metrics) {
            report.insert(format!("{name}.{key}"), value);
        }
    }
    let report_path = args.out.join("report.toml");
    let text = toml::to_string_pretty(&report)
        .map_err(|e| Error::InvalidInput(format!("report serialization: {e}")))?;
    fs::write(&report_path, text).map_err(|e| Error::io(&report_path, e))?;
    manifest.artifact("report", &report_path);
    manifest.write(&args.out)?;

    println!("{:14} {:>12} {:>12} {:>12} {:>12}", "metric", results[0].0, results[1].0, results[2].0, results[3].0);
    for key in ["chamfer_l1", "f_score", "precision", "recall"] {
        print!("{key:14}");
        for (_, metrics) in &results {
            let value = match key {
                "chamfer_l1" => metrics.chamfer_l1,
                "f_score" => metrics.f_score,
                "precision" => metrics.precision,
                _ => metrics.recall,
            };
            print!(" {value:>12.6}");
        }
        println!();
    }
    Ok(())
}

fn variant_mesh(
    trainer: &Trainer,
    bounds: &Aabb,
    resolution: usize,
    cull_radius: f64,
) -> Result<TriangleMesh> {
    let field = &trainer.field;
    let mesh = extract_mesh(
        |p| field.evaluate(p).expect("finite grid point"),
        bounds,
        resolution,
    )?;
    let mut cloud = Vec::new();
    for (kf, pose) in trainer.keyframes.iter().zip(trainer.refined_poses()) {
        cloud.extend(kf.points.iter().map(|p| transform_point(&pose, p)));
    }
    cull_mesh(&mesh, &cloud, cull_radius)
}
