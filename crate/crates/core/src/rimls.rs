//! Robust implicit moving least squares over an oriented point cloud.
//!
//! At a query `x` every neighbour within the kernel radius `h` contributes
//! the signed offset `rᵢ = (x − pᵢ)·nᵢ` with spatial weight
//! `φᵢ = (1 − (‖x − pᵢ‖/h)²)⁴`. The fit starts from the `φ`-weighted means of
//! offsets and normals and is then refined by reweighting each neighbour
//! with `exp(−(rᵢ − f)²/σ_r²) · exp(−‖nᵢ − ∇f‖²/σ_n²)` until `f` moves less
//! than the tolerance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::extraction::{marching_cubes, GridSpec, ScalarGrid};
use crate::geometry::{OrientedPointCloud, SpatialIndex, TriangleMesh, Vec3};

/// Points used to estimate the typical spacing.
const SPACING_SAMPLE: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RimlsParams {
    /// Kernel radius as a multiple of the median nearest-neighbour spacing.
    pub radius_factor: f64,
    /// Absolute kernel radius; overrides `radius_factor` when set.
    pub radius: Option<f64>,
    /// Residual scale as a fraction of the kernel radius.
    pub residual_factor: f64,
    /// Normal-deviation scale.
    pub normal_scale: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Times the radius may double when a query has no neighbours.
    pub max_doublings: usize,
    /// `false` stops after the initial weighted mean (plain IMLS).
    pub robust: bool,
    pub seed: u64,
}

impl Default for RimlsParams {
    fn default() -> Self {
        Self {
            radius_factor: 4.0,
            radius: None,
            residual_factor: 0.5,
            normal_scale: 0.5,
            max_iterations: 10,
            tolerance: 1e-4,
            max_doublings: 3,
            robust: true,
            seed: 0,
        }
    }
}

impl RimlsParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.radius_factor,
            self.residual_factor,
            self.normal_scale,
            self.tolerance,
            self.radius.unwrap_or(1.0),
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("RIMLS scales must be positive: {self:?}")));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("RIMLS needs at least one iteration".into()));
        }
        Ok(())
    }
}

/// Value and gradient estimate at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RimlsSample {
    pub value: f64,
    pub gradient: Vec3,
    pub iterations: usize,
}

pub struct RimlsField {
    cloud: OrientedPointCloud,
    index: SpatialIndex,
    params: RimlsParams,
    radius: f64,
}

impl RimlsField {
    pub fn new(cloud: OrientedPointCloud, params: RimlsParams) -> Result<Self> {
        params.validate()?;
        if cloud.is_empty() {
            return Err(Error::EmptyInput);
        }
        let index = SpatialIndex::new(&cloud.points);
        let radius = match params.radius {
            Some(r) => r,
            None => {
                let spacing = median_spacing(&index, params.seed)?;
                if spacing <= 0.0 {
                    return Err(Error::ZeroScale);
                }
                params.radius_factor * spacing
            }
        };
        Ok(Self {
            cloud,
            index,
            params,
            radius,
        })
    }

    /// Kernel radius before any fallback doubling.
    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn params(&self) -> &RimlsParams {
        &self.params
    }

    pub fn eval(&self, x: &Vec3) -> Result<RimlsSample> {
        let mut h = self.radius;
        let mut neighbors = self.index.within_radius(x, h);
        for _ in 0..self.params.max_doublings {
            if !neighbors.is_empty() {
                break;
            }
            h *= 2.0;
            neighbors = self.index.within_radius(x, h);
        }
        if neighbors.is_empty() {
            return Err(Error::NoSupport([x.x, x.y, x.z]));
        }

        let mut spatial = Vec::with_capacity(neighbors.len());
        let mut offsets = Vec::with_capacity(neighbors.len());
        let mut normals = Vec::with_capacity(neighbors.len());
        for nb in &neighbors {
            let n = self.cloud.normals[nb.index];
            let t = 1.0 - nb.distance_squared / (h * h);
            spatial.push(t.powi(4));
            offsets.push((x - self.cloud.points[nb.index]).dot(&n));
            normals.push(n);
        }

        let fit = |weights: &dyn Fn(usize) -> f64| {
            let (mut sw, mut sf, mut sg) = (0.0, 0.0, Vec3::zeros());
            for i in 0..spatial.len() {
                let w = weights(i);
                sw += w;
                sf += w * offsets[i];
                sg += normals[i] * w;
            }
            (sw, sf / sw, sg / sw)
        };

        let (sw, mut f, mut grad) = fit(&|i| spatial[i]);
        if !(sw > 0.0) {
            return Err(Error::NoSupport([x.x, x.y, x.z]));
        }
        let mut iterations = 0;
        if self.params.robust {
            let sr2 = (self.params.residual_factor * h).powi(2);
            let sn2 = self.params.normal_scale.powi(2);
            for _ in 0..self.params.max_iterations {
                iterations += 1;
                let (f_prev, g_prev) = (f, grad);
                let (sw, f_new, g_new) = fit(&|i| {
                    let dr = offsets[i] - f_prev;
                    let dn = (normals[i] - g_prev).norm_squared();
                    spatial[i] * (-dr * dr / sr2).exp() * (-dn / sn2).exp()
                });
                if !(sw > 0.0) {
                    break;
                }
                f = f_new;
                grad = g_new;
                if (f - f_prev).abs() < self.params.tolerance {
                    break;
                }
            }
        }
        Ok(RimlsSample {
            value: f,
            gradient: grad,
            iterations,
        })
    }

    /// Samples the field on `spec` (unsupported nodes become `+∞`) and
    /// meshes its zero set.
    pub fn reconstruct(&self, spec: GridSpec) -> Result<TriangleMesh> {
        let grid = self.sample_grid(spec)?;
        if grid.values.iter().all(|v| !v.is_finite()) {
            return Err(Error::EmptyReconstruction);
        }
        let mesh = marching_cubes(&grid);
        if mesh.faces.is_empty() {
            return Err(Error::EmptyReconstruction);
        }
        Ok(mesh)
    }

    pub fn sample_grid(&self, spec: GridSpec) -> Result<ScalarGrid> {
        spec.validate()?;
        let n = spec.resolution;
        let values = (0..n)
            .into_par_iter()
            .flat_map_iter(|k| {
                (0..n).flat_map(move |j| {
                    (0..n).map(move |i| match self.eval(&spec.node(i, j, k)) {
                        Ok(s) => s.value,
                        Err(_) => f64::INFINITY,
                    })
                })
            })
            .collect();
        ScalarGrid::new(spec, values)
    }
}

/// Median nearest-neighbour distance over a seeded subsample.
pub fn median_spacing(index: &SpatialIndex, seed: u64) -> Result<f64> {
    let n = index.len();
    if n < 2 {
        return Err(Error::InsufficientPoints { needed: 2, got: n });
    }
    let picks: Vec<usize> = if n > SPACING_SAMPLE {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, n, SPACING_SAMPLE).into_vec()
    } else {
        (0..n).collect()
    };
    let mut d: Vec<f64> = picks
        .iter()
        .map(|&i| index.knn(&index.point(i), 2).map(|nb| nb[1].distance))
        .collect::<Result<_>>()?;
    d.sort_by(f64::total_cmp);
    let m = d.len();
    Ok(if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(n: usize, spacing: f64, z: f64, normal: Vec3) -> (Vec<Vec3>, Vec<Vec3>) {
        let half = n as f64 * spacing / 2.0;
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                pts.push(Vec3::new(i as f64 * spacing - half, j as f64 * spacing - half, z));
            }
        }
        let normals = vec![normal; pts.len()];
        (pts, normals)
    }

    fn field(pts: Vec<Vec3>, normals: Vec<Vec3>, params: RimlsParams) -> RimlsField {
        RimlsField::new(OrientedPointCloud::new(pts, normals).unwrap(), params).unwrap()
    }

    #[test]
    fn plane_offset_is_recovered() {
        let (p, n) = plane(40, 0.05, 0.0, Vec3::z());
        let f = field(p, n, RimlsParams { radius: Some(0.6), ..RimlsParams::default() });
        let s = f.eval(&Vec3::new(0.0, 0.0, 0.3)).unwrap();
        assert!((s.value - 0.3).abs() < 1e-6);
        assert!((s.gradient - Vec3::z()).norm() < 1e-9);
        let below = f.eval(&Vec3::new(0.0, 0.0, -0.3)).unwrap();
        assert!((s.value + below.value).abs() < 1e-6);
    }

    #[test]
    fn data_point_has_zero_offset() {
        let (p, n) = plane(10, 0.1, 0.0, Vec3::z());
        let q = p[55];
        let f = field(p, n, RimlsParams::default());
        assert!(f.eval(&q).unwrap().value.abs() < 1e-4);
    }

    #[test]
    fn plain_mode_is_the_spatial_mean() {
        let pts = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.1, 0.0, 0.02), Vec3::new(0.0, 0.1, -0.01)];
        let normals = vec![Vec3::z(), Vec3::new(0.0, 0.6, 0.8), Vec3::new(0.6, 0.0, 0.8)];
        let params = RimlsParams { radius: Some(0.5), robust: false, ..RimlsParams::default() };
        let f = field(pts.clone(), normals.clone(), params);
        let x = Vec3::new(0.02, 0.03, 0.1);
        let (mut sw, mut sf) = (0.0, 0.0);
        for (p, n) in pts.iter().zip(&normals) {
            let phi = (1.0 - (x - p).norm_squared() / 0.25).powi(4);
            sw += phi;
            sf += phi * (x - p).dot(n);
        }
        let s = f.eval(&x).unwrap();
        assert_eq!(s.value, sf / sw);
        assert_eq!(s.iterations, 0);
    }

    #[test]
    fn support_fallback_and_no_support() {
        let (p, n) = plane(5, 0.1, 0.0, Vec3::z());
        let f = field(p, n, RimlsParams { radius: Some(0.1), ..RimlsParams::default() });
        // Nearest point is ~0.5 away: needs three doublings (0.8).
        assert!(f.eval(&Vec3::new(0.0, 0.0, 0.5)).is_ok());
        assert!(matches!(f.eval(&Vec3::new(0.0, 0.0, 0.9)), Err(Error::NoSupport(_))));
    }

    #[test]
    fn deterministic_values() {
        let (p, n) = plane(12, 0.05, 0.0, Vec3::z());
        let f = field(p, n, RimlsParams::default());
        let x = Vec3::new(0.013, -0.07, 0.04);
        assert_eq!(f.eval(&x).unwrap(), f.eval(&x).unwrap());
    }

    #[test]
    fn median_spacing_of_grid() {
        let (p, _) = plane(20, 0.05, 0.0, Vec3::z());
        let idx = SpatialIndex::new(&p);
        assert!((median_spacing(&idx, 0).unwrap() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn empty_cloud_is_rejected() {
        let cloud = OrientedPointCloud::new(vec![], vec![]).unwrap();
        assert!(RimlsField::new(cloud, RimlsParams::default()).is_err());
    }

    #[test]
    fn flipped_outliers_are_suppressed() {
        let h = 0.35;
        let (p, mut n) = plane(61, 0.02, 0.0, Vec3::z());
        for (i, normal) in n.iter_mut().enumerate() {
            if i % 10 == 3 {
                *normal = -Vec3::z();
            }
        }
        let x = Vec3::new(0.0, 0.0, 0.3);
        let robust = field(p.clone(), n.clone(), RimlsParams { radius: Some(h), ..RimlsParams::default() });
        let plain = field(p, n, RimlsParams { radius: Some(h), robust: false, ..RimlsParams::default() });
        let robust_err = (robust.eval(&x).unwrap().value - 0.3).abs();
        let plain_err = (plain.eval(&x).unwrap().value - 0.3).abs();
        assert!(robust_err < 0.05 * h, "robust {robust_err}");
        assert!(plain_err > 0.15 * h, "plain {plain_err}");
    }

    #[test]
    fn slab_gives_two_sheets() {
        let h = 0.1;
        let (mut p, mut n) = plane(50, 0.025, h / 2.0, Vec3::z());
        let (p2, n2) = plane(50, 0.025, -h / 2.0, -Vec3::z());
        p.extend(p2);
        n.extend(n2);
        let f = field(p, n, RimlsParams { radius: Some(h), ..RimlsParams::default() });
        let spec = GridSpec::new(24, Vec3::new(-0.4, -0.4, -0.3), Vec3::new(0.4, 0.4, 0.3)).unwrap();
        let mesh = f.reconstruct(spec).unwrap();
        assert_eq!(mesh.connected_components(), 2);
    }
}
