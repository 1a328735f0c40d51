//! `xseg`: extreme-point segmentation from the command line.
//!
//! Every command reads and writes `.vvol` volumes and JSON. On failure a
//! `{"code", "message"}` object goes to stderr; the exit code is 2 for usage
//! errors and 1 for everything else.

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use xseg_core::losses::dice_score;
use xseg_core::phantom::{generate_phantom, PhantomSpec, Shape};
use xseg_core::pipeline::manifest::{Manifest, Role};
use xseg_core::pipeline::{default_output_dir, run_pipeline, PipelineConfig, RunDir};
use xseg_core::points::{extract_extreme_points, jitter_points, PointsFile};
use xseg_core::predictor::external::{respond_with_reference, ExternalConfig, DONE_FLAG, REQUEST_FILE};
use xseg_core::random_walker::{random_walker_segment, RwConfig};
use xseg_core::scribbles::{
    background_radius, load_seeds, save_seeds, seeds_from_points, SeedLabel, FOREGROUND_RADIUS,
};
use xseg_core::volume::io::{load_intensity, load_mask, save_mask, save_prob, save_volume};
use xseg_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "xseg", version, about = "Weakly supervised 3D segmentation from six extreme-point clicks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic image and its ground-truth mask.
    Phantom(PhantomArgs),
    /// Derive six extreme points from a mask, optionally jittered.
    SimulatePoints(SimulateArgs),
    /// Foreground scribbles and background seeds from an image and its points.
    Scribble(ScribbleArgs),
    /// Random-walker foreground probability from an image and seeds.
    Rw(RwArgs),
    /// Initialize and refine every case of a run manifest.
    Pipeline(PipelineArgs),
    /// Dice overlap of two masks (probabilities are thresholded at 0.5).
    Eval(EvalArgs),
    /// Serve the annotation HTTP API.
    Serve(ServeArgs),
    /// Answer external-predictor requests with the built-in model.
    Respond(RespondArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ShapeArg {
    Ellipsoid,
    Bean,
}

#[derive(Args)]
struct PhantomArgs {
    /// Phantom description (JSON); defaults apply to missing fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    shape: Option<ShapeArg>,
    /// Noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output intensity volume.
    #[arg(long)]
    image: PathBuf,
    /// Output ground-truth mask.
    #[arg(long)]
    mask: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    mask: PathBuf,
    /// Output points file.
    #[arg(long)]
    out: PathBuf,
    /// Standard deviation of the click jitter, voxels.
    #[arg(long, default_value_t = 1.0)]
    jitter_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ScribbleArgs {
    image: PathBuf,
    points: PathBuf,
    /// Output seed volume (0 unmarked, 1 foreground, 2 background).
    #[arg(long)]
    out: PathBuf,
    /// Foreground scribble dilation radius, voxels.
    #[arg(long, default_value_t = FOREGROUND_RADIUS)]
    fg_radius: usize,
    /// Background dilation radius, voxels [default: scaled with the largest image side].
    #[arg(long)]
    bg_radius: Option<usize>,
}

#[derive(Args)]
struct RwArgs {
    image: PathBuf,
    seeds: PathBuf,
    /// Output probability map.
    #[arg(long)]
    out: PathBuf,
    /// Edge weight sharpness.
    #[arg(long, default_value_t = RwConfig::default().beta)]
    beta: f64,
    /// Relative residual at which the solver stops.
    #[arg(long, default_value_t = RwConfig::default().cg_tolerance)]
    tol: f64,
}

#[derive(Args)]
struct PipelineArgs {
    manifest: PathBuf,
    /// Output directory [default: the manifest path with extension `.out`].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue after the last completed round in the output directory.
    #[arg(long)]
    resume: bool,
    /// Use hardened predictions as the next labels instead of regularizing them.
    #[arg(long)]
    no_rw: bool,
    /// Leave the click channel out of the predictor's features.
    #[arg(long)]
    no_point_channel: bool,
    /// Weight of the point loss.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training rounds after initialization.
    #[arg(long)]
    max_rounds: Option<usize>,
    /// Hand predictions to an external process through this directory.
    #[arg(long)]
    external_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    a: PathBuf,
    b: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Root for volumes opened by path.
    #[arg(long, default_value = ".")]
    data_dir: PathBuf,
    /// Pipeline configuration (JSON) for new sessions.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RespondArgs {
    /// Exchange directory shared with the pipeline.
    dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    poll_ms: u64,
    /// Stop after this many answered requests.
    #[arg(long)]
    max_requests: Option<usize>,
    /// Stop after this many seconds without a new request.
    #[arg(long, default_value_t = 600.0)]
    idle_timeout: f64,
}

fn print_json(v: &Value) {
    println!("{v}");
}

fn phantom(a: PhantomArgs) -> Result<()> {
    let mut spec: PhantomSpec = match &a.spec {
        Some(p) => {
            let text = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_slice(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => PhantomSpec::default(),
    };
    if let Some(s) = a.shape {
        spec.shape = match s {
            ShapeArg::Ellipsoid => Shape::Ellipsoid,
            ShapeArg::Bean => Shape::Bean,
        };
    }
    if let Some(seed) = a.seed {
        spec.rng_seed = seed;
    }
    let (image, mask) = generate_phantom(&spec)?;
    save_volume(&a.image, &image)?;
    save_mask(&a.mask, &mask)?;
    print_json(&json!({ "dims": image.dims(), "spacing": image.spacing(), "foreground_voxels": mask.count() }));
    Ok(())
}

fn simulate_points(a: SimulateArgs) -> Result<()> {
    let mask = load_mask(&a.mask)?;
    let exact = extract_extreme_points(&mask)?;
    let points = jitter_points(&exact, a.jitter_sigma, a.seed, mask.dims())?;
    let text = serde_json::to_string_pretty(&PointsFile::voxel(points))?;
    std::fs::write(&a.out, text).with_context(|| format!("writing {}", a.out.display()))?;
    print_json(&serde_json::to_value(points)?);
    Ok(())
}

fn scribble(a: ScribbleArgs) -> Result<()> {
    let image = load_intensity(&a.image)?;
    let points = xseg_core::pipeline::manifest::read_points(&a.points)?;
    points.validate(image.dims())?;
    let side = image.dims().into_iter().max().unwrap_or(0);
    let bg = a.bg_radius.unwrap_or_else(|| background_radius(side));
    let seeds = seeds_from_points(&image, &points, a.fg_radius, bg)?;
    save_seeds(&a.out, &seeds)?;
    print_json(&json!({
        "foreground": seeds.count_label(SeedLabel::Foreground),
        "background": seeds.count_label(SeedLabel::Background),
        "unmarked": seeds.count_label(SeedLabel::Unmarked),
        "bg_radius": bg,
    }));
    Ok(())
}

fn rw(a: RwArgs) -> Result<()> {
    let image = load_intensity(&a.image)?;
    let seeds = load_seeds(&a.seeds)?;
    let cfg = RwConfig {
        beta: a.beta,
        cg_tolerance: a.tol,
        ..RwConfig::default()
    };
    cfg.validate()?;
    let start = Instant::now();
    let prob = random_walker_segment(&image, &seeds, &cfg)?;
    save_prob(&a.out, &prob)?;
    print_json(&json!({ "dims": prob.dims(), "seconds": start.elapsed().as_secs_f64() }));
    Ok(())
}

fn effective_config(manifest: &Manifest, a: &PipelineArgs) -> PipelineConfig {
    let mut cfg = manifest.config.clone();
    if a.no_rw {
        cfg.rw_regularization = false;
    }
    if a.no_point_channel {
        cfg.point_channel = false;
    }
    if let Some(alpha) = a.alpha {
        cfg.train.loss.alpha = alpha;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(n) = a.max_rounds {
        cfg.max_rounds = n;
    }
    if let Some(dir) = &a.external_dir {
        cfg.external = Some(ExternalConfig {
            dir: dir.clone(),
            ..cfg.external.clone().unwrap_or_default()
        });
    }
    cfg
}

/// Configs that differ only in how many rounds may run describe the same run.
fn same_but_round_cap(a: &Value, b: &Value) -> bool {
    let strip = |v: &Value| {
        let mut v = v.clone();
        if let Some(o) = v.as_object_mut() {
            o.remove("max_rounds");
        }
        v
    };
    strip(a) == strip(b)
}

fn pipeline(a: PipelineArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)
        .with_context(|| format!("loading manifest {}", a.manifest.display()))?;
    let cfg = effective_config(&manifest, &a);
    cfg.validate()?;
    let out = a.out.clone().unwrap_or_else(|| default_output_dir(&a.manifest));
    let info = json!({
        "manifest": a.manifest,
        "config": cfg,
        "variant": cfg.variant(),
        "cases": manifest.cases.iter().map(|c| json!({
            "id": c.id,
            "role": c.role,
        })).collect::<Vec<_>>(),
    });
    let dir = if a.resume {
        let dir = RunDir::open(&out)?;
        let previous = dir.root().join("run.json");
        if previous.exists() {
            let old: Value = serde_json::from_slice(&std::fs::read(&previous)?)
                .with_context(|| format!("parsing {}", previous.display()))?;
            if !same_but_round_cap(&old["config"], &info["config"]) {
                bail!("{} was made with a different configuration; rerun without --resume", out.display());
            }
        }
        dir
    } else {
        RunDir::fresh(&out)?
    };
    dir.write_run_info(&info)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let prepared = manifest.prepare_with(base, &cfg)?;
    let outcome = run_pipeline(prepared.train, prepared.val, &prepared.truth, &cfg, Some(&dir), a.resume)?;
    let first = &outcome.metrics[0];
    let best = &outcome.metrics[outcome.best_round];
    print_json(&json!({
        "out": out,
        "rounds": outcome.metrics.len(),
        "best_round": outcome.best_round,
        "converged": outcome.converged,
        "initial_validation": first.validation.mean,
        "best_validation": best.validation.mean,
        "best_train_fit": best.train_fit.mean,
        "train_cases": manifest.cases.iter().filter(|c| c.role == Role::Train).count(),
    }));
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let x = load_mask(&a.a)?;
    let y = load_mask(&a.b)?;
    print_json(&json!({ "dice": dice_score(&x, &y)? }));
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let pipeline = match &a.config {
        Some(p) => serde_json::from_slice(&std::fs::read(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    let config = ServiceConfig {
        data_dir: a.data_dir,
        pipeline,
    };
    config.pipeline.validate()?;
    let addr = SocketAddr::new(a.host, a.port);
    let runtime = tokio::runtime::Runtime::new()?;
    eprintln!("{}", json!({ "listening": addr.to_string() }));
    runtime
        .block_on(xseg_service::serve(addr, config))
        .with_context(|| format!("serving on {addr}"))
}

/// Round number of a pending request, if one is waiting for an answer.
fn pending_round(dir: &Path) -> Option<u64> {
    if dir.join(DONE_FLAG).exists() {
        return None;
    }
    let bytes = std::fs::read(dir.join(REQUEST_FILE)).ok()?;
    serde_json::from_slice::<Value>(&bytes).ok()?["round"].as_u64()
}

fn respond(a: RespondArgs) -> Result<()> {
    if !(a.idle_timeout.is_finite() && a.idle_timeout >= 0.0) {
        bail!("--idle-timeout must be a finite number of seconds");
    }
    let idle = Duration::from_secs_f64(a.idle_timeout);
    let mut answered = 0usize;
    let mut last_round = None;
    let mut since = Instant::now();
    while a.max_requests.is_none_or(|n| answered < n) {
        match pending_round(&a.dir) {
            Some(r) if last_round != Some(r) => {
                respond_with_reference(&a.dir)?;
                answered += 1;
                last_round = Some(r);
                since = Instant::now();
            }
            _ if since.elapsed() >= idle => break,
            _ => std::thread::sleep(Duration::from_millis(a.poll_ms.max(1))),
        }
    }
    print_json(&json!({ "answered": answered }));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::SimulatePoints(a) => simulate_points(a),
        Command::Scribble(a) => scribble(a),
        Command::Rw(a) => rw(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
        Command::Respond(a) => respond(a),
    }
}

/// The error and its causes, skipping causes the message already spells out.
fn describe(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !out.contains(&text) {
            out = format!("{out}: {text}");
        }
    }
    out
}

fn fail(code: &str, message: String, exit: u8) -> ExitCode {
    eprintln!("{}", json!({ "code": code, "message": message }));
    ExitCode::from(exit)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim_end().to_string(), 2),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail("runtime", describe(&e), 1),
    }
}
