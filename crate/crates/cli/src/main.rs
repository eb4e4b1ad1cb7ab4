use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use selfprior_core::extraction::GridSpec;
use selfprior_core::field::AttentiveField;
use selfprior_core::geometry::{
    load_mesh, load_oriented_cloud, load_point_cloud, normalize_unit, write_obj, write_ply_mesh,
    write_ply_points, write_xyz, NormalizationTransform, PointCloud, TriangleMesh, Vec3,
};
use selfprior_core::metrics::evaluate_meshes;
use selfprior_core::pipeline::{self, artifacts, PipelineConfig, Progress, StageError};

/// Argument and configuration problems.
const EXIT_ARGUMENT: u8 = 2;
/// A pipeline stage failed.
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "selfprior", version, about = "Surface reconstruction from unoriented point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the reduced single-CPU preset instead of the full defaults.
    #[arg(long)]
    desk: bool,
    /// Mesh the neural field directly, skipping RIMLS refinement.
    #[arg(long)]
    no_mls: bool,
    /// Replace cross-attention with a parameter-matched linear lift.
    #[arg(long)]
    no_attention: bool,
    /// Skip inpainting of sparse regions.
    #[arg(long)]
    no_fill: bool,
    /// Configuration override; `--key=value` is accepted as shorthand.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline on a point cloud.
    Reconstruct {
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Normalize a cloud and train a field on it.
    Train {
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Mesh the zero level set of a trained field.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Maps the mesh back to input coordinates.
        #[arg(long)]
        transform: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        resolution: usize,
    },
    /// Fill sparse regions of a cloud from a trained field and assign normals.
    Inpaint {
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Transform written by `train`; the cloud is normalized with it.
        #[arg(long)]
        transform: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Reconstruct a mesh from an oriented cloud with robust implicit MLS.
    Rimls {
        /// Oriented cloud in normalized coordinates (PLY with normals).
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        transform: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Compare a reconstruction against a reference mesh.
    Metrics {
        rec: PathBuf,
        gt: PathBuf,
        /// Also write the report as CSV.
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Corrupt a cloud with noise, subsampling or a removed cap.
    Degrade {
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Gaussian noise, percent of the bounding-box diagonal.
        #[arg(long, conflicts_with_all = ["subsample", "cap"])]
        noise: Option<f64>,
        /// Fraction of points to keep.
        #[arg(long, conflicts_with = "cap")]
        subsample: Option<f64>,
        /// Half-angle in degrees of the cap to remove.
        #[arg(long)]
        cap: Option<f64>,
        /// Cap axis as `x,y,z`.
        #[arg(long, default_value = "0,0,1")]
        axis: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export attention similarity to an anchor as a per-point scalar.
    AttnMap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Anchor position as `x,y,z` in normalized coordinates.
        #[arg(long, allow_hyphen_values = true)]
        anchor: String,
        /// Probe points in normalized coordinates.
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn argument(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_ARGUMENT,
        error: error.into(),
    }
}

fn stage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_STAGE,
        error: error.into(),
    }
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        stage(e)
    }
}

type Outcome = Result<(), Failure>;

/// Rewrites `--key=value` for configuration keys into `--set key=value`.
fn expand_overrides(args: Vec<String>) -> Vec<String> {
    let keys = PipelineConfig::keys();
    let mut out = Vec::with_capacity(args.len());
    for arg in args {
        if let Some((key, value)) = arg.strip_prefix("--").and_then(|a| a.split_once('=')) {
            if keys.iter().any(|k| k == key) {
                out.push("--set".to_string());
                out.push(format!("{key}={value}"));
                continue;
            }
        }
        out.push(arg);
    }
    out
}

fn resolve_config(args: &ConfigArgs) -> Result<PipelineConfig, Failure> {
    let mut cfg = if args.desk { PipelineConfig::desk() } else { PipelineConfig::default() };
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(argument)?;
        cfg.apply_text(&text).map_err(argument)?;
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| argument(anyhow!("override {kv:?} is not key=value")))?;
        cfg.set(k.trim(), v.trim()).map_err(argument)?;
    }
    if args.no_mls {
        cfg.mls = false;
    }
    if args.no_attention {
        cfg.field.attention = false;
    }
    if args.no_fill {
        cfg.fill = false;
    }
    cfg.validate().map_err(argument)?;
    if cfg.threads > 0 {
        // Fails only if a pool already exists, which is harmless here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    Ok(cfg)
}

fn load_cloud(path: &Path) -> Result<PointCloud, Failure> {
    load_point_cloud(path, None)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(argument)
}

fn load_transform(path: &Path) -> Result<NormalizationTransform, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading transform {}", path.display()))
        .map_err(argument)?;
    NormalizationTransform::parse(&text).map_err(argument)
}

fn load_field(path: &Path) -> Result<AttentiveField, Failure> {
    AttentiveField::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(argument)
}

fn parse_vec3(text: &str) -> Result<Vec3, Failure> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| argument(anyhow!("bad vector {text:?}: {e}")))?;
    match parts.as_slice() {
        &[x, y, z] => Ok(Vec3::new(x, y, z)),
        _ => Err(argument(anyhow!("expected x,y,z, got {text:?}"))),
    }
}

fn write_mesh(path: &Path, mesh: &TriangleMesh) -> Outcome {
    let result = match path.extension().and_then(|e| e.to_str()) {
        Some("obj") => write_obj(path, mesh),
        _ => write_ply_mesh(path, mesh),
    };
    result.map_err(stage)
}

fn write_cloud(path: &Path, cloud: &PointCloud) -> Outcome {
    let result = match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => write_ply_points(path, &cloud.points, None, None),
        _ => write_xyz(path, &cloud.points),
    };
    result.map_err(stage)
}

fn create_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(stage)
}

fn write_text(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(stage)
}

fn reconstruct(input: &Path, out: &Path, args: &ConfigArgs) -> Outcome {
    let cfg = resolve_config(args)?;
    let cloud = load_cloud(input)?;
    let start = Instant::now();
    let rec = pipeline::reconstruct(&cloud, &cfg, Some(out), |p| match p {
        Progress::Stage(s) => eprintln!("[{:7.1}s] {s}", start.elapsed().as_secs_f64()),
        Progress::Iteration(row) if row.iteration % 100 == 0 => {
            eprintln!("  iteration {:6}  lr {:.3e}  loss {:.4e}", row.iteration, row.lr, row.loss.total)
        }
        Progress::Iteration(_) => {}
    })?;
    println!(
        "{}: {} vertices, {} faces",
        out.join(artifacts::MESH_PLY).display(),
        rec.mesh.vertices.len(),
        rec.mesh.faces.len()
    );
    Ok(())
}

fn train(input: &Path, out: &Path, args: &ConfigArgs) -> Outcome {
    let cfg = resolve_config(args)?;
    let cloud = load_cloud(input)?;
    create_dir(out)?;
    write_text(&out.join(artifacts::CONFIG), &cfg.to_text())?;
    let (normalized, transform) = normalize_unit(&cloud).map_err(stage)?;
    write_text(&out.join(artifacts::TRANSFORM), &transform.to_text())?;
    let ckpt = out.join(artifacts::CHECKPOINT);
    let (_, log) = pipeline::train_field(&normalized, &cfg, Some(&ckpt), |row| {
        if row.iteration % 100 == 0 {
            eprintln!("  iteration {:6}  lr {:.3e}  loss {:.4e}", row.iteration, row.lr, row.loss.total);
        }
    })?;
    log.write_csv(out.join(artifacts::TRAINING_LOG)).map_err(stage)?;
    println!("{}", ckpt.display());
    Ok(())
}

fn extract(checkpoint: &Path, out: &Path, transform: Option<&Path>, resolution: usize) -> Outcome {
    let mut field = load_field(checkpoint)?;
    let transform = transform.map(load_transform).transpose()?;
    GridSpec::unit(resolution).validate().map_err(argument)?;
    let (mesh, flipped) = pipeline::extract_level_set(&mut field, resolution).map_err(stage)?;
    if flipped {
        eprintln!("field sign flipped so the exterior is positive");
    }
    let mesh = transform.map_or(mesh.clone(), |t| t.invert_mesh(&mesh));
    write_mesh(out, &mesh)?;
    println!("{}: {} faces", out.display(), mesh.faces.len());
    Ok(())
}

fn inpaint(input: &Path, checkpoint: &Path, transform: &Path, out: &Path, args: &ConfigArgs) -> Outcome {
    let cfg = resolve_config(args)?;
    let cloud = load_cloud(input)?;
    let transform = load_transform(transform)?;
    let mut field = load_field(checkpoint)?;
    let normalized = transform.apply_cloud(&cloud);
    let (level_set, _) = pipeline::extract_level_set(&mut field, cfg.level_set_resolution).map_err(stage)?;
    let (oriented, report, dropped) = pipeline::enhance(&normalized, &field, &level_set, &cfg)?;
    create_dir(out)?;
    if let Some(report) = &report {
        report
            .write(out.join(artifacts::FILL_CSV), out.join(artifacts::FILL_SUMMARY))
            .map_err(stage)?;
        eprintln!("kept {} of {} level-set samples", report.fill_count(), report.candidates.len());
    }
    if dropped > 0 {
        eprintln!("dropped {dropped} points with vanishing gradients");
    }
    let path = out.join(artifacts::ORIENTED);
    write_ply_points(&path, &oriented.points, Some(&oriented.normals), None).map_err(stage)?;
    println!("{}", path.display());
    Ok(())
}

fn rimls(input: &Path, out: &Path, transform: Option<&Path>, args: &ConfigArgs) -> Outcome {
    let cfg = resolve_config(args)?;
    let oriented = load_oriented_cloud(input)
        .with_context(|| format!("loading {}", input.display()))
        .map_err(argument)?;
    let transform = transform.map(load_transform).transpose()?;
    let (mesh, radius) = pipeline::refine(&oriented, &cfg).map_err(stage)?;
    let mesh = transform.map_or(mesh.clone(), |t| t.invert_mesh(&mesh));
    write_mesh(out, &mesh)?;
    println!("{}: {} faces (kernel radius {radius:.4e})", out.display(), mesh.faces.len());
    Ok(())
}

fn metrics(rec: &Path, gt: &Path, out: Option<&Path>, args: &ConfigArgs) -> Outcome {
    let cfg = resolve_config(args)?;
    let load = |p: &Path| {
        load_mesh(p)
            .with_context(|| format!("loading {}", p.display()))
            .map_err(argument)
    };
    let (rec, gt) = (load(rec)?, load(gt)?);
    let report = evaluate_meshes(&rec, &gt, &cfg.metrics).map_err(argument)?;
    print!("{}", report.to_table());
    if let Some(path) = out {
        write_text(path, &report.to_csv())?;
    }
    Ok(())
}

fn degrade(
    input: &Path,
    out: &Path,
    noise: Option<f64>,
    fraction: Option<f64>,
    cap: Option<f64>,
    axis: &str,
    seed: u64,
) -> Outcome {
    let cloud = load_cloud(input)?;
    let result = match (noise, fraction, cap) {
        (Some(pct), None, None) => pipeline::add_noise(&cloud, pct, seed),
        (None, Some(f), None) => pipeline::subsample(&cloud, f, seed),
        (None, None, Some(angle)) => pipeline::remove_cap(&cloud, parse_vec3(axis)?, angle).map(|(kept, _)| kept),
        _ => return Err(argument(anyhow!("choose exactly one of --noise, --subsample, --cap"))),
    };
    let degraded = result.map_err(argument)?;
    write_cloud(out, &degraded)?;
    println!("{}: {} points", out.display(), degraded.len());
    Ok(())
}

fn attn_map(checkpoint: &Path, anchor: &str, input: &Path, out: &Path) -> Outcome {
    let field = load_field(checkpoint)?;
    let anchor = parse_vec3(anchor)?;
    let cloud = load_cloud(input)?;
    if !GridSpec::unit(8).contains(&anchor) {
        eprintln!("warning: anchor {anchor:?} lies outside the normalized domain");
    }
    let map = pipeline::attention_map(&field, &anchor, &cloud.points).map_err(stage)?;
    write_ply_points(out, &cloud.points, None, Some(("similarity", &map))).map_err(stage)?;
    println!("{}: {} points", out.display(), map.len());
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Reconstruct { input, out, config } => reconstruct(&input, &out, &config),
        Command::Train { input, out, config } => train(&input, &out, &config),
        Command::Extract {
            checkpoint,
            out,
            transform,
            resolution,
        } => extract(&checkpoint, &out, transform.as_deref(), resolution),
        Command::Inpaint {
            input,
            checkpoint,
            transform,
            out,
            config,
        } => inpaint(&input, &checkpoint, &transform, &out, &config),
        Command::Rimls {
            input,
            out,
            transform,
            config,
        } => rimls(&input, &out, transform.as_deref(), &config),
        Command::Metrics { rec, gt, out, config } => metrics(&rec, &gt, out.as_deref(), &config),
        Command::Degrade {
            input,
            out,
            noise,
            subsample,
            cap,
            axis,
            seed,
        } => degrade(&input, &out, noise, subsample, cap, &axis, seed),
        Command::AttnMap {
            checkpoint,
            anchor,
            input,
            out,
        } => attn_map(&checkpoint, &anchor, &input, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse_from(expand_overrides(std::env::args().collect())) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_ARGUMENT } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}

