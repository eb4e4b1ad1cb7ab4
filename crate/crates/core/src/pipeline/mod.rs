//! End-to-end reconstruction: normalize, train, extract, inpaint, orient,
//! refine, denormalize.

mod config;
mod degrade;

pub use config::PipelineConfig;
pub use degrade::{add_noise, in_cap, remove_cap, subsample};

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::extraction::{assign_normals, inpaint, marching_cubes, sample_level_set, FillReport, GridSpec, ScalarGrid};
use crate::field::AttentiveField;
use crate::geometry::{
    normalize_unit, write_obj, write_ply_mesh, write_ply_points, NormalizationTransform, OrientedPointCloud,
    PointCloud, TriangleMesh, Vec3,
};
use crate::rimls::RimlsField;
use crate::training::{generate_queries, train, LogRow, TrainingLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Normalize,
    Queries,
    Train,
    Extract,
    Inpaint,
    Normals,
    Rimls,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Normalize => "normalize",
            Stage::Queries => "queries",
            Stage::Train => "train",
            Stage::Extract => "extract",
            Stage::Inpaint => "inpaint",
            Stage::Normals => "normals",
            Stage::Rimls => "rimls",
            Stage::Write => "write",
        };
        f.write_str(name)
    }
}

/// A stage failure; artifacts of earlier stages stay on disk.
#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub source: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

/// Progress notifications from [`reconstruct`].
#[derive(Debug)]
pub enum Progress<'a> {
    Stage(Stage),
    Iteration(&'a LogRow),
}

/// Everything produced by one reconstruction.
#[derive(Debug)]
pub struct Reconstruction {
    /// Final mesh in input coordinates.
    pub mesh: TriangleMesh,
    /// Final mesh in normalized coordinates.
    pub normalized_mesh: TriangleMesh,
    pub transform: NormalizationTransform,
    pub field: AttentiveField,
    pub log: TrainingLog,
    /// Level-set mesh of the trained field, normalized coordinates.
    pub level_set: TriangleMesh,
    pub fill: Option<FillReport>,
    /// Enhanced cloud with gradient normals, normalized coordinates.
    pub oriented: OrientedPointCloud,
    pub dropped_normals: usize,
    /// Whether the field was negated to make its exterior positive.
    pub sign_flipped: bool,
    /// RIMLS kernel radius, when refinement ran.
    pub rimls_radius: Option<f64>,
}

/// Artifact file names inside an output directory.
pub mod artifacts {
    pub const CONFIG: &str = "config.cfg";
    pub const TRANSFORM: &str = "transform.txt";
    pub const CHECKPOINT: &str = "field.ckpt";
    pub const TRAINING_LOG: &str = "training_log.csv";
    pub const LEVEL_SET: &str = "level_set.ply";
    pub const FILL_CSV: &str = "fill_report.csv";
    pub const FILL_SUMMARY: &str = "fill_summary.txt";
    pub const ORIENTED: &str = "oriented_cloud.ply";
    pub const MESH_PLY: &str = "mesh.ply";
    pub const MESH_OBJ: &str = "mesh.obj";
    pub const MANIFEST: &str = "manifest.txt";
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains a fresh field on a normalized cloud.
pub fn train_field(
    cloud: &PointCloud,
    cfg: &PipelineConfig,
    checkpoint: Option<&Path>,
    mut progress: impl FnMut(&LogRow),
) -> std::result::Result<(AttentiveField, TrainingLog), StageError> {
    let samples = generate_queries(cloud, &cfg.trainer).at(Stage::Queries)?;
    let mut field = AttentiveField::new(cfg.field, cfg.seed).at(Stage::Train)?;
    match train(&mut field, &samples, &cfg.trainer, checkpoint, &mut progress) {
        Ok(log) => Ok((field, log)),
        Err((source, log)) => {
            if let Some(ckpt) = checkpoint {
                let _ = log.write_csv(ckpt.with_file_name(artifacts::TRAINING_LOG));
            }
            Err(StageError {
                stage: Stage::Train,
                source,
            })
        }
    }
}

/// Samples the field on the unit grid, negating it first if its exterior
/// is mostly negative, and meshes the zero level set.
///
/// Returns the mesh and whether the field was negated.
pub fn extract_level_set(field: &mut AttentiveField, resolution: usize) -> Result<(TriangleMesh, bool)> {
    let mut grid = ScalarGrid::sample(field, GridSpec::unit(resolution))?;
    let boundary = grid.boundary_values();
    let negative = boundary.iter().filter(|v| **v < 0.0).count();
    let flipped = 2 * negative > boundary.len();
    if flipped {
        field.negate_output();
        grid.values.iter_mut().for_each(|v| *v = -*v);
    }
    Ok((marching_cubes(&grid), flipped))
}

/// Augments `cloud` with far level-set samples (when `fill` is set) and
/// assigns gradient normals.
pub fn enhance(
    cloud: &PointCloud,
    field: &AttentiveField,
    level_set: &TriangleMesh,
    cfg: &PipelineConfig,
) -> std::result::Result<(OrientedPointCloud, Option<FillReport>, usize), StageError> {
    let (augmented, report) = if cfg.fill {
        let n = if cfg.fill_samples == 0 { cloud.len() } else { cfg.fill_samples };
        let candidates = sample_level_set(level_set, n, cfg.seed).at(Stage::Inpaint)?;
        let report = inpaint(cloud, &candidates).at(Stage::Inpaint)?;
        (report.augmented(cloud), Some(report))
    } else {
        (cloud.clone(), None)
    };
    let (oriented, dropped) = assign_normals(&augmented, field).at(Stage::Normals)?;
    Ok((oriented, report, dropped))
}

/// Meshes the RIMLS surface of an oriented cloud on the unit grid.
pub fn refine(oriented: &OrientedPointCloud, cfg: &PipelineConfig) -> Result<(TriangleMesh, f64)> {
    let rimls = RimlsField::new(oriented.clone(), cfg.rimls)?;
    let mesh = rimls.reconstruct(GridSpec::unit(cfg.grid_resolution))?;
    Ok((mesh, rimls.radius()))
}

/// Runs the whole pipeline. With `out`, every stage writes its artifacts
/// as soon as it finishes.
pub fn reconstruct(
    input: &PointCloud,
    cfg: &PipelineConfig,
    out: Option<&Path>,
    mut progress: impl FnMut(Progress),
) -> std::result::Result<Reconstruction, StageError> {
    cfg.validate().at(Stage::Normalize)?;
    let path = |name: &str| out.map(|d| d.join(name));
    let emit = |name: &str, text: &str| -> Result<()> {
        match out {
            Some(d) => write_file(&d.join(name), text),
            None => Ok(()),
        }
    };

    progress(Progress::Stage(Stage::Normalize));
    if let Some(d) = out {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e)).at(Stage::Write)?;
    }
    emit(artifacts::CONFIG, &cfg.to_text()).at(Stage::Write)?;
    input.check_finite().at(Stage::Normalize)?;
    let (cloud, transform) = normalize_unit(input).at(Stage::Normalize)?;
    emit(artifacts::TRANSFORM, &transform.to_text()).at(Stage::Write)?;

    progress(Progress::Stage(Stage::Train));
    let ckpt: Option<PathBuf> = path(artifacts::CHECKPOINT);
    let (mut field, log) = train_field(&cloud, cfg, ckpt.as_deref(), |row| progress(Progress::Iteration(row)))?;
    emit(artifacts::TRAINING_LOG, &log.to_csv()).at(Stage::Write)?;

    progress(Progress::Stage(Stage::Extract));
    let (level_set, sign_flipped) = extract_level_set(&mut field, cfg.level_set_resolution).at(Stage::Extract)?;
    if let Some(p) = &ckpt {
        if sign_flipped {
            field.save(p).at(Stage::Write)?;
        }
    }
    if let Some(p) = path(artifacts::LEVEL_SET) {
        write_ply_mesh(p, &level_set).at(Stage::Write)?;
    }

    progress(Progress::Stage(Stage::Inpaint));
    let (oriented, fill, dropped_normals) = enhance(&cloud, &field, &level_set, cfg)?;
    if let (Some(report), Some(d)) = (&fill, out) {
        report
            .write(d.join(artifacts::FILL_CSV), d.join(artifacts::FILL_SUMMARY))
            .at(Stage::Write)?;
    }
    if let Some(p) = path(artifacts::ORIENTED) {
        write_ply_points(p, &oriented.points, Some(&oriented.normals), None).at(Stage::Write)?;
    }

    let (normalized_mesh, rimls_radius) = if cfg.mls {
        progress(Progress::Stage(Stage::Rimls));
        let (mesh, radius) = refine(&oriented, cfg).at(Stage::Rimls)?;
        (mesh, Some(radius))
    } else {
        progress(Progress::Stage(Stage::Extract));
        let mesh = if cfg.grid_resolution == cfg.level_set_resolution {
            level_set.clone()
        } else {
            let grid = ScalarGrid::sample(&field, GridSpec::unit(cfg.grid_resolution)).at(Stage::Extract)?;
            marching_cubes(&grid)
        };
        (mesh, None)
    };

    progress(Progress::Stage(Stage::Write));
    let mesh = transform.invert_mesh(&normalized_mesh);
    if let Some(d) = out {
        write_ply_mesh(d.join(artifacts::MESH_PLY), &mesh).at(Stage::Write)?;
        write_obj(d.join(artifacts::MESH_OBJ), &mesh).at(Stage::Write)?;
    }
    let rec = Reconstruction {
        mesh,
        normalized_mesh,
        transform,
        field,
        log,
        level_set,
        fill,
        oriented,
        dropped_normals,
        sign_flipped,
        rimls_radius,
    };
    emit(artifacts::MANIFEST, &manifest(&rec, input, cfg)).at(Stage::Write)?;
    Ok(rec)
}

fn manifest(rec: &Reconstruction, input: &PointCloud, cfg: &PipelineConfig) -> String {
    let mut out = String::new();
    let r = &cfg.rimls;
    let last = rec.log.rows.last().map(|row| row.loss.total).unwrap_or(f64::NAN);
    let lines = [
        ("input_points", input.len().to_string()),
        ("parameters", rec.field.parameter_count().to_string()),
        ("iterations", rec.log.rows.len().to_string()),
        ("final_loss", format!("{last:e}")),
        ("sign_flipped", rec.sign_flipped.to_string()),
        ("level_set_resolution", cfg.level_set_resolution.to_string()),
        ("level_set_faces", rec.level_set.faces.len().to_string()),
        ("fill", cfg.fill.to_string()),
        ("fill_kept", rec.fill.as_ref().map_or(0, |f| f.fill_count()).to_string()),
        ("fill_sigma", format!("{:e}", rec.fill.as_ref().map_or(0.0, |f| f.sigma))),
        ("oriented_points", rec.oriented.len().to_string()),
        ("dropped_normals", rec.dropped_normals.to_string()),
        ("mls", cfg.mls.to_string()),
        ("rimls_radius", format!("{:e}", rec.rimls_radius.unwrap_or(0.0))),
        ("rimls_radius_factor", format!("{:e}", r.radius_factor)),
        ("rimls_residual_factor", format!("{:e}", r.residual_factor)),
        ("rimls_normal_scale", format!("{:e}", r.normal_scale)),
        ("rimls_iterations", r.max_iterations.to_string()),
        ("rimls_tolerance", format!("{:e}", r.tolerance)),
        ("rimls_doublings", r.max_doublings.to_string()),
        ("rimls_robust", r.robust.to_string()),
        ("grid_resolution", cfg.grid_resolution.to_string()),
        ("grid_min", "-0.55".into()),
        ("grid_max", "0.55".into()),
        ("mesh_vertices", rec.mesh.vertices.len().to_string()),
        ("mesh_faces", rec.mesh.faces.len().to_string()),
    ];
    for (k, v) in lines {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

/// Cosine-normalized attention similarity of every probe to `anchor`, in
/// `[0, 1]`. The anchor itself scores 1.
pub fn attention_map(field: &AttentiveField, anchor: &Vec3, probes: &[Vec3]) -> Result<Vec<f64>> {
    let anchor_w = field.attention_weights(std::slice::from_ref(anchor))?.remove(0);
    let anchor_norm = anchor_w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sims = field.attention_similarity(anchor, probes)?;
    let weights = field.attention_weights(probes)?;
    Ok(sims
        .iter()
        .zip(&weights)
        .map(|(s, w)| {
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt() * anchor_norm;
            if norm > 0.0 {
                (s / norm).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect())
}
