//! Command-line front end. Results go to files (and short JSON summaries
//! to stdout); diagnostics go to stderr.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bridge::{serve, Bridge};
use crate::camera::Camera;
use crate::checkpoint::{load_model, write_checkpoint};
use crate::config::RunConfig;
use crate::deform::{pose_splat, GradRequest, SplatModel};
use crate::error::{Error, Result};
use crate::fit::{optimize_external, reconstruct_pose, retarget, FitProblem, FitTarget, MseScorer, TrackSet};
use crate::image::Image;
use crate::kinematics::Pose;
use crate::raster::render;
use crate::robot::parse_urdf;
use crate::synth::{build_blob_robot, generate_dataset, Dataset, DatasetManifest, Split};
use crate::train::{evaluate, evaluate_retrieval, Retrieval, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_TRAINING: i32 = 4;
pub const EXIT_FITTING: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "robosplat", version, about = "Differentiable Gaussian-splat robot renderer")]
pub struct Cli {
    /// Worker threads for rendering and data generation (default: all cores).
    /// Results do not depend on this value.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Print progress to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a blob robot from a URDF and render a training dataset.
    GenData(GenDataArgs),
    /// Run the staged training schedule and evaluate on the test split.
    Train(TrainArgs),
    /// Render a trained model at a pose.
    Render(RenderArgs),
    /// Evaluate a trained model (and optionally retrieval baselines).
    Eval(EvalArgs),
    /// Recover the pose (and optionally the camera) behind an image.
    Reconstruct(ReconstructArgs),
    /// Project tracked Gaussian centres along a pose trajectory.
    MakeTracks(MakeTracksArgs),
    /// Fit a pose sequence to 2D point tracks.
    Retarget(RetargetArgs),
    /// Optimise the pose against an external scorer over the bridge protocol.
    OptimizeExternal(ExternalArgs),
    /// Serve the reference MSE scorer over stdin/stdout or TCP.
    ScoreMse(ScoreArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub urdf: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON run configuration; flags override its dataset section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub poses: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Gaussians on the ground-truth robot.
    #[arg(long)]
    pub blob_points: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Disable the appearance deformation network (ablation).
    #[arg(long)]
    pub no_deform: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Metrics JSON (default: next to the checkpoint).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Line-delimited JSON step log (default: next to the checkpoint).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Steps between resumable checkpoints; 0 disables them.
    #[arg(long, default_value_t = 500)]
    pub checkpoint_every: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Where the camera comes from: a dataset view or a camera JSON file.
#[derive(Debug, Args)]
pub struct CameraArgs {
    /// Dataset directory whose cameras `--view` indexes.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub view: usize,
    /// Camera as JSON (overrides --data/--view).
    #[arg(long)]
    pub camera_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated joint values (default: canonical pose).
    #[arg(long)]
    pub pose: Option<String>,
    #[command(flatten)]
    pub camera: CameraArgs,
    /// Output PNG; a raw float image is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Also evaluate nearest-neighbour and random retrieval.
    #[arg(long)]
    pub baselines: bool,
    /// Method name recorded in the report.
    #[arg(long, default_value = "ours")]
    pub method: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CameraMode {
    Known,
    Free,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Target image (PNG or raw float).
    #[arg(long)]
    pub target: PathBuf,
    #[command(flatten)]
    pub camera: CameraArgs,
    #[arg(long = "camera", value_enum, default_value = "known")]
    pub mode: CameraMode,
    /// Initial pose, comma-separated (default: canonical pose).
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MakeTracksArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON list of poses.
    #[arg(long)]
    pub trajectory: PathBuf,
    #[command(flatten)]
    pub camera: CameraArgs,
    /// Track every n-th Gaussian.
    #[arg(long, default_value_t = 20)]
    pub every: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RetargetArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Track set JSON.
    #[arg(long)]
    pub tracks: PathBuf,
    #[command(flatten)]
    pub camera: CameraArgs,
    /// JSON list of initial poses (default: canonical pose per frame).
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub smoothness: Option<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExternalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scorer command line or `host:port`.
    #[arg(long)]
    pub bridge: String,
    #[command(flatten)]
    pub camera: CameraArgs,
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Target image (PNG or raw float).
    #[arg(long)]
    pub target: PathBuf,
    /// Accept one TCP connection on this address instead of using stdio.
    #[arg(long)]
    pub listen: Option<String>,
}

/// A failed command: exit code plus the underlying error.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: Error,
}

fn classify(error: Error, stage: i32) -> Failure {
    let code = match &error {
        Error::Config(_)
        | Error::Json(_)
        | Error::MalformedXml(_)
        | Error::UnknownLinkRef { .. }
        | Error::CycleDetected(_)
        | Error::UnsupportedJointKind { .. }
        | Error::NoGeometry
        | Error::PoseLengthMismatch { .. } => EXIT_CONFIG,
        Error::Io(_) | Error::IoFailure { .. } | Error::Format { .. } => EXIT_IO,
        _ => stage,
    };
    Failure { code, error }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            require(p, "config file")?;
            RunConfig::load(p)
        }
        None => Ok(RunConfig::default()),
    }
}

fn parse_pose(text: Option<&str>, dof: usize) -> Result<Pose> {
    let Some(text) = text else {
        return Ok(Pose::zeros(dof));
    };
    let values = text
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("pose value `{v}`: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.len() != dof {
        return Err(Error::PoseLengthMismatch {
            expected: dof,
            got: values.len(),
        });
    }
    Ok(Pose(values))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn print_summary<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("summary serialises"));
}

fn model_at(path: &Path) -> Result<SplatModel> {
    require(path, "checkpoint")?;
    load_model(path)
}

fn resolve_camera(args: &CameraArgs) -> Result<(Camera, [f64; 3])> {
    if let Some(f) = &args.camera_file {
        require(f, "camera file")?;
        let cam: Camera = read_json(f)?;
        cam.validate()?;
        return Ok((cam, [0.0; 3]));
    }
    let Some(dir) = &args.data else {
        return Err(Error::Config(
            "a camera is required: pass --camera-file or --data with --view".into(),
        ));
    };
    let manifest_path = dir.join("manifest.json");
    require(&manifest_path, "dataset manifest")?;
    let m = DatasetManifest::read(&manifest_path)?;
    let cam = m
        .cameras
        .get(args.view)
        .copied()
        .ok_or_else(|| Error::Config(format!("view {} out of range ({} cameras)", args.view, m.cameras.len())))?;
    Ok((cam, m.background))
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(ext);
    path.with_file_name(name)
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.error);
            f.code
        }
    }
}

pub fn run(cli: &Cli) -> std::result::Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(classify(
                Error::Config("--threads must be positive".into()),
                EXIT_CONFIG,
            ));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let v = cli.verbose;
    match &cli.command {
        Command::GenData(a) => gen_data(a, v).map_err(|e| classify(e, EXIT_IO)),
        Command::Train(a) => train(a, v).map_err(|e| classify(e, EXIT_TRAINING)),
        Command::Render(a) => render_cmd(a).map_err(|e| classify(e, EXIT_IO)),
        Command::Eval(a) => eval(a).map_err(|e| classify(e, EXIT_TRAINING)),
        Command::Reconstruct(a) => reconstruct(a, v).map_err(|e| classify(e, EXIT_FITTING)),
        Command::MakeTracks(a) => make_tracks(a).map_err(|e| classify(e, EXIT_FITTING)),
        Command::Retarget(a) => retarget_cmd(a, v).map_err(|e| classify(e, EXIT_FITTING)),
        Command::OptimizeExternal(a) => external(a, v).map_err(|e| classify(e, EXIT_FITTING)),
        Command::ScoreMse(a) => score_mse(a).map_err(|e| classify(e, EXIT_FITTING)),
    }
}

#[derive(Serialize)]
struct GenSummary {
    samples: usize,
    train: usize,
    test: usize,
    canonical: usize,
    cameras: usize,
}

fn gen_data(a: &GenDataArgs, verbose: bool) -> Result<()> {
    require(&a.urdf, "URDF")?;
    let mut cfg = load_config(a.config.as_deref())?;
    let d = &mut cfg.dataset;
    d.poses = a.poses.unwrap_or(d.poses);
    d.views = a.views.unwrap_or(d.views);
    d.width = a.width.unwrap_or(d.width);
    d.height = a.height.unwrap_or(d.height);
    d.seed = a.seed.unwrap_or(d.seed);
    cfg.blob_points = a.blob_points.unwrap_or(cfg.blob_points);
    cfg.validate()?;
    let text = fs::read_to_string(&a.urdf).map_err(|e| Error::io(&a.urdf, e))?;
    let robot = parse_urdf(&text)?;
    if verbose {
        for w in &robot.warnings {
            eprintln!("warning: {w:?}");
        }
    }
    let blob = build_blob_robot(&robot, cfg.blob_points, cfg.dataset.seed)?;
    let m = generate_dataset(&blob, &cfg.dataset, &a.out)?;
    print_summary(&GenSummary {
        samples: m.samples.len(),
        train: m.train().count(),
        test: m.test().count(),
        canonical: m.canonical.len(),
        cameras: m.cameras.len(),
    });
    Ok(())
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    checkpoint: &'a Path,
    metrics: &'a Path,
    method: &'a str,
    psnr_mean: Option<f64>,
    chamfer_mean: f64,
    summary: &'a crate::train::TrainSummary,
}

fn train(a: &TrainArgs, verbose: bool) -> Result<()> {
    require(&a.data.join("manifest.json"), "dataset manifest")?;
    if let Some(r) = &a.resume {
        require(r, "resume checkpoint")?;
    }
    let mut cfg = load_config(a.config.as_deref())?.train;
    if a.no_deform {
        cfg.network.appearance = false;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let data = Dataset::load(&a.data)?;
    let mut trainer = match &a.resume {
        Some(r) => {
            let t = Trainer::resume(&data, r)?;
            if verbose && a.config.is_some() {
                eprintln!("resuming: the checkpoint's configuration takes precedence");
            }
            t
        }
        None => Trainer::new(&data, cfg)?,
    };
    let method = if trainer.model.appearance.is_some() {
        "ours"
    } else {
        "no_deform"
    };
    let log_path = a.log.clone().unwrap_or_else(|| with_extension(&a.out, "log.jsonl"));
    let metrics_path = a
        .metrics
        .clone()
        .unwrap_or_else(|| with_extension(&a.out, "metrics.json"));
    let log_file = fs::OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    let mut since_checkpoint = 0;
    while let Some(rec) = trainer.step()? {
        serde_json::to_writer(&mut log, &rec)?;
        log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
        if verbose && (rec.step % 100 == 0 || rec.densified.is_some()) {
            eprintln!(
                "{:?} step {} loss {:.6} gaussians {}",
                rec.stage, rec.step, rec.loss, rec.n_gaussians
            );
        }
        since_checkpoint += 1;
        if a.checkpoint_every > 0 && since_checkpoint >= a.checkpoint_every {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            trainer.save_checkpoint(&a.out)?;
            since_checkpoint = 0;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    trainer.save_checkpoint(&a.out)?;
    let report = evaluate(&trainer.model, &data, Split::Test, method)?;
    write_json(&metrics_path, &report)?;
    print_summary(&TrainOutput {
        checkpoint: &a.out,
        metrics: &metrics_path,
        method,
        psnr_mean: report.psnr_mean.is_finite().then_some(report.psnr_mean),
        chamfer_mean: report.chamfer_mean,
        summary: &trainer.summary,
    });
    Ok(())
}

fn render_cmd(a: &RenderArgs) -> Result<()> {
    let model = model_at(&a.checkpoint)?;
    let (cam, bg) = resolve_camera(&a.camera)?;
    let pose = parse_pose(a.pose.as_deref(), model.robot.dof)?;
    let posed = pose_splat(&model, &pose, GradRequest::NONE, None)?;
    let img = render(&cam, &posed, bg);
    img.write_png(&a.out)?;
    img.write_raw(&with_extension(&a.out, "drim"))?;
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let model = model_at(&a.checkpoint)?;
    require(&a.data.join("manifest.json"), "dataset manifest")?;
    let data = Dataset::load(&a.data)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let report = evaluate(&model, &data, split, &a.method)?;
    if a.baselines {
        let mut all = vec![report];
        for mode in [Retrieval::NearestNeighbour, Retrieval::Random] {
            all.push(evaluate_retrieval(&data, split, mode, 1000, 0)?);
        }
        write_json(&a.out, &all)?;
        print_summary(
            &all.iter()
                .map(|r| (&r.method, r.psnr_mean, r.chamfer_mean))
                .collect::<Vec<_>>(),
        );
    } else {
        write_json(&a.out, &report)?;
        print_summary(&(&report.method, report.psnr_mean, report.chamfer_mean));
    }
    Ok(())
}

fn fit_config(path: Option<&Path>, iters: Option<usize>) -> Result<RunConfig> {
    let mut cfg = load_config(path)?;
    if let Some(n) = iters {
        cfg.fit.max_iters = n;
        cfg.retarget.max_iters = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn reconstruct(a: &ReconstructArgs, verbose: bool) -> Result<()> {
    let model = model_at(&a.checkpoint)?;
    require(&a.target, "target image")?;
    let (cam, bg) = resolve_camera(&a.camera)?;
    let mut cfg = fit_config(a.config.as_deref(), a.iters)?.fit;
    if a.camera.camera_file.is_none() {
        cfg.background = bg;
    }
    let image = Image::read_any(&a.target)?;
    let init_pose = parse_pose(a.init.as_deref(), model.robot.dof)?;
    let problem = FitProblem {
        model: &model,
        targets: vec![FitTarget {
            image,
            camera: cam,
            optimize_camera: a.mode == CameraMode::Free,
        }],
        init_pose,
        config: cfg,
    };
    let r = reconstruct_pose(&problem)?;
    if verbose {
        eprintln!("loss {:.3e} after {} iterations", r.loss, r.iterations);
    }
    write_json(&a.out, &r)
}

fn make_tracks(a: &MakeTracksArgs) -> Result<()> {
    let model = model_at(&a.checkpoint)?;
    require(&a.trajectory, "trajectory")?;
    let (cam, _) = resolve_camera(&a.camera)?;
    let traj: Vec<Pose> = read_json(&a.trajectory)?;
    if a.every == 0 {
        return Err(Error::Config("--every must be positive".into()));
    }
    let indices: Vec<usize> = (0..model.gaussians.len()).step_by(a.every).collect();
    let tracks = TrackSet::from_trajectory(&model, &cam, &traj, &indices)?;
    write_json(&a.out, &tracks)
}

fn retarget_cmd(a: &RetargetArgs, verbose: bool) -> Result<()> {
    let model = model_at(&a.checkpoint)?;
    require(&a.tracks, "track set")?;
    let (cam, _) = resolve_camera(&a.camera)?;
    let mut cfg = fit_config(a.config.as_deref(), a.iters)?.retarget;
    if let Some(s) = a.smoothness {
        cfg.smoothness = s;
    }
    let tracks: TrackSet = read_json(&a.tracks)?;
    let init: Vec<Pose> = match &a.init {
        Some(p) => {
            require(p, "initial poses")?;
            read_json(p)?
        }
        None => vec![Pose::zeros(model.robot.dof); tracks.frames()],
    };
    let r = retarget(&model, &tracks, &cam, &init, &cfg)?;
    if verbose {
        eprintln!("track loss {:.3e}", r.loss);
    }
    write_json(&a.out, &r)
}

fn external(a: &ExternalArgs, verbose: bool) -> Result<()> {
    let model = model_at(&a.checkpoint)?;
    let (cam, bg) = resolve_camera(&a.camera)?;
    let mut cfg = fit_config(a.config.as_deref(), a.iters)?.fit;
    if a.camera.camera_file.is_none() {
        cfg.background = bg;
    }
    let init = parse_pose(a.init.as_deref(), model.robot.dof)?;
    let mut bridge = Bridge::open(&a.bridge)?;
    let r = optimize_external(&model, &cam, &init, &mut bridge, &cfg)?;
    if verbose {
        eprintln!("external loss {:.3e} after {} iterations", r.loss, r.iterations);
    }
    write_json(&a.out, &r)
}

fn score_mse(a: &ScoreArgs) -> Result<()> {
    require(&a.target, "target image")?;
    let mut scorer = MseScorer {
        target: Image::read_any(&a.target)?,
    };
    match &a.listen {
        Some(addr) => {
            let listener = TcpListener::bind(addr).map_err(|e| Error::io(addr, e))?;
            // report the bound port when 0 was requested
            let local = listener.local_addr().map_err(Error::Io)?;
            println!("{local}");
            std::io::stdout().flush().ok();
            let (stream, _) = listener.accept().map_err(Error::Io)?;
            let mut r = BufReader::new(stream.try_clone().map_err(Error::Io)?);
            let mut w = BufWriter::new(stream);
            serve(&mut scorer, &mut r, &mut w)?;
        }
        None => {
            let stdin = std::io::stdin();
            let mut r = stdin.lock();
            let _ = r.fill_buf();
            let mut w = BufWriter::new(std::io::stdout().lock());
            serve(&mut scorer, &mut r, &mut w)?;
        }
    }
    Ok(())
}

/// Writes a checkpoint of `model` without training state.
pub fn export_model(path: &Path, model: &SplatModel) -> Result<()> {
    write_checkpoint(path, model, &[])
}
