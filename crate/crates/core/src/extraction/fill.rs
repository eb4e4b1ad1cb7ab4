use std::fmt::Write as _;
use std::path::Path;

use super::grid::{GridSpec, ScalarGrid};
use super::mc::marching_cubes;
use crate::error::{Error, Result};
use crate::field::{ImplicitField, GRADIENT_EPS};
use crate::geometry::{sample_mesh_surface, OrientedPointCloud, PointCloud, SpatialIndex, TriangleMesh, Vec3};

/// Largest share of points allowed to have a vanishing gradient.
pub const MAX_DEGENERATE_FRACTION: f64 = 0.01;

/// Extracts the zero level set of `field` and meshes it.
pub fn extract_mesh<F: ImplicitField + ?Sized>(field: &F, spec: GridSpec) -> Result<TriangleMesh> {
    Ok(marching_cubes(&ScalarGrid::sample(field, spec)?))
}

/// Area-uniform samples of an extracted level-set mesh.
pub fn sample_level_set(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Ok(PointCloud::new(Vec::new()));
    }
    if mesh.faces.is_empty() {
        return Err(Error::EmptyLevelSet);
    }
    sample_mesh_surface(mesh, n, seed)
}

/// Outcome of filling sparse regions with level-set samples.
#[derive(Debug, Clone, PartialEq)]
pub struct FillReport {
    /// Population standard deviation of `distances`.
    pub sigma: f64,
    /// Distance from each candidate to the nearest input point.
    pub distances: Vec<f64>,
    pub kept: Vec<bool>,
    pub candidates: Vec<Vec3>,
}

impl FillReport {
    pub fn threshold(&self) -> f64 {
        3.0 * self.sigma
    }

    pub fn fill_points(&self) -> Vec<Vec3> {
        self.candidates
            .iter()
            .zip(&self.kept)
            .filter(|(_, &k)| k)
            .map(|(p, _)| *p)
            .collect()
    }

    pub fn fill_count(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    /// Input points followed by the kept candidates.
    pub fn augmented(&self, input: &PointCloud) -> PointCloud {
        let mut points = input.points.clone();
        points.extend(self.fill_points());
        PointCloud::new(points)
    }

    /// `index,distance,kept` per candidate.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,distance,kept\n");
        for (i, (d, k)) in self.distances.iter().zip(&self.kept).enumerate() {
            let _ = writeln!(out, "{i},{d},{}", u8::from(*k));
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "{{ \"sigma\": {}, \"threshold\": {}, \"candidates\": {}, \"kept\": {} }}\n",
            self.sigma,
            self.threshold(),
            self.candidates.len(),
            self.fill_count()
        )
    }

    pub fn write(&self, csv: impl AsRef<Path>, summary: impl AsRef<Path>) -> Result<()> {
        let (csv, summary) = (csv.as_ref(), summary.as_ref());
        std::fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        std::fs::write(summary, self.summary()).map_err(|e| Error::io(summary, e))
    }
}

/// Keeps the candidates at least three standard deviations of the
/// candidate-to-input distance away from the input.
///
/// A zero standard deviation keeps nothing.
pub fn inpaint(input: &PointCloud, candidates: &PointCloud) -> Result<FillReport> {
    if input.is_empty() || candidates.is_empty() {
        return Err(Error::EmptyInput);
    }
    let index = SpatialIndex::new(&input.points);
    let distances: Vec<f64> = candidates
        .points
        .iter()
        .map(|p| index.nearest(p).map(|n| n.distance))
        .collect::<Result<_>>()?;
    let n = distances.len() as f64;
    let mean = distances.iter().sum::<f64>() / n;
    let sigma = (distances.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
    let kept = distances
        .iter()
        .map(|&d| sigma > 0.0 && d >= 3.0 * sigma)
        .collect();
    Ok(FillReport {
        sigma,
        distances,
        kept,
        candidates: candidates.points.clone(),
    })
}

/// Unit gradient normals at each point.
///
/// Points with a vanishing gradient are dropped; the second value is how
/// many. More than 1% dropped is an error.
pub fn assign_normals<F: ImplicitField + ?Sized>(
    cloud: &PointCloud,
    field: &F,
) -> Result<(OrientedPointCloud, usize)> {
    let (_, grads) = field.values_and_gradients(&cloud.points);
    let mut points = Vec::with_capacity(cloud.len());
    let mut normals = Vec::with_capacity(cloud.len());
    for (p, g) in cloud.points.iter().zip(grads) {
        let n = g.norm();
        if n > GRADIENT_EPS && n.is_finite() {
            points.push(*p);
            normals.push(g / n);
        }
    }
    let degenerate = cloud.len() - points.len();
    if degenerate as f64 > MAX_DEGENERATE_FRACTION * cloud.len() as f64 {
        return Err(Error::NormalQuality {
            degenerate,
            total: cloud.len(),
        });
    }
    Ok((OrientedPointCloud::new(points, normals)?, degenerate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{LinearProbe, SphereProbe};

    #[test]
    fn subset_candidates_fill_nothing() {
        let p = PointCloud::new((0..20).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect());
        let sub = PointCloud::new(p.points[3..9].to_vec());
        let r = inpaint(&p, &sub).unwrap();
        assert_eq!(r.sigma, 0.0);
        assert_eq!(r.fill_count(), 0);
        assert_eq!(r.augmented(&p), p);
    }

    #[test]
    fn single_far_candidate_is_kept() {
        let p = PointCloud::new(vec![Vec3::zeros()]);
        let mut c: Vec<Vec3> = (0..999).map(|i| {
            let t = i as f64 * 0.01;
            Vec3::new(t.cos(), t.sin(), 0.0) * 0.01
        }).collect();
        c.push(Vec3::new(0.5, 0.0, 0.0));
        let r = inpaint(&p, &PointCloud::new(c)).unwrap();
        assert!((r.sigma - 0.0155).abs() < 5e-4, "sigma {}", r.sigma);
        assert_eq!(r.fill_points(), vec![Vec3::new(0.5, 0.0, 0.0)]);
        // The keep set is exactly the threshold filter over the distances.
        for (d, k) in r.distances.iter().zip(&r.kept) {
            assert_eq!(*k, *d >= r.threshold());
        }
        assert!(r.to_csv().lines().count() == 1001);
        assert!(r.summary().contains("\"kept\": 1"));
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let p = PointCloud::new(vec![Vec3::zeros()]);
        let e = PointCloud::new(vec![]);
        assert!(inpaint(&p, &e).is_err());
        assert!(inpaint(&e, &p).is_err());
    }

    #[test]
    fn sphere_level_set_samples() {
        let spec = GridSpec::new(48, Vec3::repeat(-1.0), Vec3::repeat(1.0)).unwrap();
        let sphere = SphereProbe::new(Vec3::zeros(), 0.5);
        let mesh = extract_mesh(&sphere, spec).unwrap();
        let s = sample_level_set(&mesh, 10_000, 1).unwrap();
        assert_eq!(s.len(), 10_000);
        for p in &s.points {
            assert!((p.norm() - 0.5).abs() < 2.0 * spec.cell_size());
        }
        assert_eq!(s, sample_level_set(&mesh, 10_000, 1).unwrap());
        assert!(sample_level_set(&mesh, 0, 1).unwrap().is_empty());
        let empty = TriangleMesh::new(vec![], vec![]).unwrap();
        assert!(matches!(sample_level_set(&empty, 5, 1), Err(Error::EmptyLevelSet)));
    }

    #[test]
    fn sphere_normals_are_radial() {
        let sphere = SphereProbe::new(Vec3::zeros(), 0.5);
        let pts: Vec<Vec3> = (0..500)
            .map(|i| {
                let t = i as f64 * 0.37;
                Vec3::new(t.cos() * (0.3 * t).sin(), t.sin() * (0.3 * t).sin(), (0.3 * t).cos()) * 0.5
            })
            .collect();
        let cloud = PointCloud::new(pts);
        let (oriented, dropped) = assign_normals(&cloud, &sphere).unwrap();
        assert_eq!(dropped, 0);
        assert_eq!(oriented.points, cloud.points);
        for (p, n) in oriented.points.iter().zip(&oriented.normals) {
            assert!(n.dot(&p.normalize()) > 1f64.to_radians().cos());
            assert!((n.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn plane_normals_and_quality_error() {
        let cloud = PointCloud::new(vec![Vec3::new(0.1, 0.2, 0.0), Vec3::new(-0.3, 0.0, 0.0)]);
        let (o, _) = assign_normals(&cloud, &LinearProbe::new(Vec3::z(), 0.0)).unwrap();
        assert!(o.normals.iter().all(|n| *n == Vec3::z()));
        assert!(matches!(
            assign_normals(&cloud, &LinearProbe::new(Vec3::zeros(), 1.0)),
            Err(Error::NormalQuality { degenerate: 2, total: 2 })
        ));
    }
}
