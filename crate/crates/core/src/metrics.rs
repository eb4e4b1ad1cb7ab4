//! Reconstruction quality metrics.
//!
//! Every metric has a brute-force twin in [`oracle`] that walks all pairs
//! with the same distance function, so the two agree bit for bit.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{sample_mesh_surface, SpatialIndex, TriangleMesh, Vec3};

/// Nearest squared distance from each point of `from` to the set `to`.
fn nearest_squared(from: &[Vec3], to: &[Vec3]) -> Result<Vec<f64>> {
    if from.is_empty() || to.is_empty() {
        return Err(Error::Argument("metric input set is empty".into()));
    }
    let index = SpatialIndex::new(to);
    from.par_iter()
        .map(|p| index.nearest(p).map(|n| n.distance_squared))
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sum of the two directed mean squared nearest distances.
pub fn chamfer(gt: &[Vec3], rec: &[Vec3]) -> Result<f64> {
    Ok(mean(&nearest_squared(gt, rec)?) + mean(&nearest_squared(rec, gt)?))
}

/// Mean squared distance from each point of `from` to its nearest in `to`.
pub fn directed_chamfer(from: &[Vec3], to: &[Vec3]) -> Result<f64> {
    Ok(mean(&nearest_squared(from, to)?))
}

/// Symmetric Hausdorff distance.
pub fn hausdorff(gt: &[Vec3], rec: &[Vec3]) -> Result<f64> {
    let worst = |d: Vec<f64>| d.into_iter().fold(0.0f64, f64::max).sqrt();
    Ok(worst(nearest_squared(gt, rec)?).max(worst(nearest_squared(rec, gt)?)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl FScore {
    fn from_parts(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

fn fraction_within(squared: &[f64], tau: f64) -> f64 {
    squared.iter().filter(|&&d| d.sqrt() < tau).count() as f64 / squared.len() as f64
}

/// Precision counts reconstructed points closer than `tau` to the ground
/// truth; recall counts the converse.
pub fn f_score(gt: &[Vec3], rec: &[Vec3], tau: f64) -> Result<FScore> {
    if !(tau > 0.0) {
        return Err(Error::Argument(format!("F-score threshold must be positive, got {tau}")));
    }
    let precision = fraction_within(&nearest_squared(rec, gt)?, tau);
    let recall = fraction_within(&nearest_squared(gt, rec)?, tau);
    Ok(FScore::from_parts(precision, recall))
}

/// For each reconstructed face, the ground-truth face with the nearest
/// centroid (ties to the lower index).
fn matched_normals(rec: &TriangleMesh, gt: &TriangleMesh) -> Result<Vec<(Vec3, Vec3)>> {
    if rec.is_empty() || gt.is_empty() {
        return Err(Error::Argument("metric mesh has no faces".into()));
    }
    let gt_normals = gt.face_normals();
    let index = SpatialIndex::new(&gt.face_centroids());
    (0..rec.faces.len())
        .into_par_iter()
        .map(|f| {
            let nb = index.nearest(&rec.face_centroid(f))?;
            Ok((rec.face_normal(f), gt_normals[nb.index]))
        })
        .collect()
}

/// Mean absolute cosine between matched face normals.
pub fn normal_consistency(rec: &TriangleMesh, gt: &TriangleMesh) -> Result<f64> {
    let pairs = matched_normals(rec, gt)?;
    let dots: Vec<f64> = pairs.iter().map(|(a, b)| a.dot(b).abs()).collect();
    Ok(mean(&dots))
}

fn angle_degrees(a: &Vec3, b: &Vec3) -> f64 {
    a.dot(b).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Root mean squared angle in degrees, orientation included.
///
/// Dot products are clamped to `[-1, 1]` before `acos`.
pub fn rmse_oriented(predicted: &[Vec3], truth: &[Vec3]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Argument(format!(
            "{} predicted normals for {} reference normals",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Argument("no normals to compare".into()));
    }
    let sq: Vec<f64> = predicted
        .iter()
        .zip(truth)
        .map(|(a, b)| angle_degrees(a, b).powi(2))
        .collect();
    Ok(mean(&sq).sqrt())
}

/// Brute-force references for the metrics above.
pub mod oracle {
    use super::{angle_degrees, mean, FScore};
    use crate::geometry::{dist2, TriangleMesh, Vec3};

    fn nearest_squared(from: &[Vec3], to: &[Vec3]) -> Vec<f64> {
        from.iter()
            .map(|p| to.iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min))
            .collect()
    }

    pub fn chamfer(gt: &[Vec3], rec: &[Vec3]) -> f64 {
        mean(&nearest_squared(gt, rec)) + mean(&nearest_squared(rec, gt))
    }

    pub fn hausdorff(gt: &[Vec3], rec: &[Vec3]) -> f64 {
        let a = nearest_squared(gt, rec).into_iter().fold(0.0f64, f64::max);
        let b = nearest_squared(rec, gt).into_iter().fold(0.0f64, f64::max);
        a.sqrt().max(b.sqrt())
    }

    pub fn f_score(gt: &[Vec3], rec: &[Vec3], tau: f64) -> FScore {
        let frac = |d: Vec<f64>| d.iter().filter(|&&x| x.sqrt() < tau).count() as f64 / d.len() as f64;
        FScore::from_parts(frac(nearest_squared(rec, gt)), frac(nearest_squared(gt, rec)))
    }

    pub fn normal_consistency(rec: &TriangleMesh, gt: &TriangleMesh) -> f64 {
        let gc = gt.face_centroids();
        let dots: Vec<f64> = (0..rec.faces.len())
            .map(|f| {
                let c = rec.face_centroid(f);
                let mut best = 0;
                for j in 1..gc.len() {
                    if dist2(&c, &gc[j]) < dist2(&c, &gc[best]) {
                        best = j;
                    }
                }
                rec.face_normal(f).dot(&gt.face_normal(best)).abs()
            })
            .collect();
        mean(&dots)
    }

    pub fn rmse_oriented(predicted: &[Vec3], truth: &[Vec3]) -> f64 {
        let sq: Vec<f64> = predicted
            .iter()
            .zip(truth)
            .map(|(a, b)| angle_degrees(a, b).powi(2))
            .collect();
        mean(&sq).sqrt()
    }
}

/// Sampling budget and thresholds for mesh-to-mesh evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSettings {
    /// Samples per mesh for Chamfer and Hausdorff.
    pub distance_samples: usize,
    /// Samples per mesh for the F-score.
    pub fscore_samples: usize,
    /// F-score threshold as a fraction of the ground-truth bounding-box
    /// diagonal.
    pub tau_fraction: f64,
    pub seed: u64,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            distance_samples: 100_000,
            fscore_samples: 10_000,
            tau_fraction: 0.005,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub cd: f64,
    pub hd: f64,
    pub fscore: FScore,
    pub tau: f64,
    pub nc: f64,
    /// Oriented angular error between matched face normals, in degrees.
    pub rmse_o: f64,
    pub distance_samples: usize,
    pub fscore_samples: usize,
    pub seed: u64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str =
        "cd,hd,precision,recall,f1,tau,nc,rmse_o,distance_samples,fscore_samples,seed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.cd,
            self.hd,
            self.fscore.precision,
            self.fscore.recall,
            self.fscore.f1,
            self.tau,
            self.nc,
            self.rmse_o,
            self.distance_samples,
            self.fscore_samples,
            self.seed
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let rows = [
            ("Chamfer", format!("{:.6e}", self.cd)),
            ("Hausdorff", format!("{:.6e}", self.hd)),
            ("Precision", format!("{:.4}", self.fscore.precision)),
            ("Recall", format!("{:.4}", self.fscore.recall)),
            ("F1", format!("{:.4} (tau {:.3e})", self.fscore.f1, self.tau)),
            ("Normal consistency", format!("{:.4}", self.nc)),
            ("Oriented RMSE (deg)", format!("{:.3}", self.rmse_o)),
            (
                "Samples",
                format!("{} / {} (seed {})", self.distance_samples, self.fscore_samples, self.seed),
            ),
        ];
        for (name, value) in rows {
            let _ = writeln!(out, "{name:<20} {value}");
        }
        out
    }
}

/// Compares a reconstruction against a ground-truth mesh by surface
/// sampling.
pub fn evaluate_meshes(rec: &TriangleMesh, gt: &TriangleMesh, settings: &MetricSettings) -> Result<MetricReport> {
    if rec.is_empty() || gt.is_empty() {
        return Err(Error::Argument("metric mesh has no faces".into()));
    }
    let seed = settings.seed;
    let gt_dense = sample_mesh_surface(gt, settings.distance_samples, seed)?;
    let rec_dense = sample_mesh_surface(rec, settings.distance_samples, seed)?;
    let gt_sparse = sample_mesh_surface(gt, settings.fscore_samples, seed.wrapping_add(1))?;
    let rec_sparse = sample_mesh_surface(rec, settings.fscore_samples, seed.wrapping_add(1))?;

    let diagonal = gt_dense.diagonal();
    let tau = settings.tau_fraction * diagonal;
    let pairs = matched_normals(rec, gt)?;
    let (pred, truth): (Vec<Vec3>, Vec<Vec3>) = pairs.into_iter().unzip();

    Ok(MetricReport {
        cd: chamfer(&gt_dense.points, &rec_dense.points)?,
        hd: hausdorff(&gt_dense.points, &rec_dense.points)?,
        fscore: f_score(&gt_sparse.points, &rec_sparse.points, tau)?,
        tau,
        nc: normal_consistency(rec, gt)?,
        rmse_o: rmse_oriented(&pred, &truth)?,
        distance_samples: settings.distance_samples,
        fscore_samples: settings.fscore_samples,
        seed,
    })
}
