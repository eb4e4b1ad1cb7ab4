use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{random_subset, PointCloud, Vec3};

/// Adds isotropic Gaussian noise whose standard deviation is `percent` of
/// the bounding-box diagonal (so each axis gets `σ/√3`).
pub fn add_noise(cloud: &PointCloud, percent: f64, seed: u64) -> Result<PointCloud> {
    if !(percent >= 0.0 && percent.is_finite()) {
        return Err(Error::Argument(format!("noise level must be nonnegative, got {percent}")));
    }
    if percent == 0.0 {
        return Ok(cloud.clone());
    }
    let sigma = percent / 100.0 * cloud.diagonal() / 3f64.sqrt();
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Argument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = cloud
        .points
        .iter()
        .map(|p| p + Vec3::from_fn(|_, _| normal.sample(&mut rng)))
        .collect();
    Ok(PointCloud::new(points))
}

/// Keeps `round(fraction · n)` points chosen uniformly at random.
pub fn subsample(cloud: &PointCloud, fraction: f64, seed: u64) -> Result<PointCloud> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!("subsample fraction must lie in (0, 1], got {fraction}")));
    }
    let count = (fraction * cloud.len() as f64).round() as usize;
    Ok(random_subset(cloud, count, seed))
}

/// Splits off the points whose direction from the bounding-box centre lies
/// within `angle_deg` of `axis`. Returns `(kept, removed)`.
pub fn remove_cap(cloud: &PointCloud, axis: Vec3, angle_deg: f64) -> Result<(PointCloud, PointCloud)> {
    if !(angle_deg > 0.0 && angle_deg < 180.0) {
        return Err(Error::Argument(format!("cap angle must lie in (0, 180), got {angle_deg}")));
    }
    let axis_len = axis.norm();
    if !(axis_len > 0.0 && axis_len.is_finite()) {
        return Err(Error::Argument("cap axis must be nonzero".into()));
    }
    let axis = axis / axis_len;
    let (lo, hi) = cloud.bounds().ok_or(Error::EmptyInput)?;
    let center = (lo + hi) * 0.5;
    let cos_limit = angle_deg.to_radians().cos();
    let (removed, kept): (Vec<Vec3>, Vec<Vec3>) = cloud.points.iter().partition(|p| {
        let d = *p - center;
        let n = d.norm();
        n > 0.0 && d.dot(&axis) / n >= cos_limit
    });
    Ok((PointCloud::new(kept), PointCloud::new(removed)))
}

/// Whether `p` lies in the cap cone of [`remove_cap`] around `center`.
pub fn in_cap(p: &Vec3, center: &Vec3, axis: &Vec3, angle_deg: f64) -> bool {
    let d = p - center;
    let n = d.norm();
    n > 0.0 && d.dot(&axis.normalize()) / n >= angle_deg.to_radians().cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube_cloud(n: usize) -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..n {
            let t = i as f64 / n as f64;
            pts.push(Vec3::new(t, (7.0 * t).fract(), (13.0 * t).fract()));
        }
        PointCloud::new(pts)
    }

    #[test]
    fn zero_noise_is_identity() {
        let c = cube_cloud(100);
        assert_eq!(add_noise(&c, 0.0, 1).unwrap(), c);
        assert!(add_noise(&c, -1.0, 1).is_err());
    }

    #[test]
    fn noise_per_axis_spread() {
        // Unit diagonal: 1.2% noise gives a per-axis std of 0.012/√3.
        let side = 1.0 / 3f64.sqrt();
        let pts: Vec<Vec3> = (0..100_000)
            .map(|i| Vec3::repeat(side * (i % 2) as f64))
            .collect();
        let c = PointCloud::new(pts);
        let noisy = add_noise(&c, 1.2, 9).unwrap();
        let expected = 0.012 / 3f64.sqrt();
        for axis in 0..3 {
            let d: Vec<f64> = noisy.points.iter().zip(&c.points).map(|(a, b)| a[axis] - b[axis]).collect();
            let m = d.iter().sum::<f64>() / d.len() as f64;
            let std = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
            assert!((std / expected - 1.0).abs() < 0.05, "axis {axis}: {std}");
        }
    }

    #[test]
    fn subsample_counts() {
        let c = cube_cloud(10_000);
        assert_eq!(subsample(&c, 0.5, 3).unwrap().len(), 5_000);
        assert_eq!(subsample(&c, 1.0, 3).unwrap(), c);
        assert!(subsample(&c, 0.0, 3).is_err());
        assert!(subsample(&c, 1.5, 3).is_err());
    }

    #[test]
    fn cap_partition() {
        let pts: Vec<Vec3> = (0..1000)
            .map(|i| {
                let z = -1.0 + 2.0 * (i as f64 + 0.5) / 1000.0;
                let r = (1.0 - z * z).sqrt();
                let phi = i as f64 * 2.399963;
                Vec3::new(r * phi.cos(), r * phi.sin(), z)
            })
            .collect();
        let cloud = PointCloud::new(pts);
        let (kept, removed) = remove_cap(&cloud, Vec3::z(), 30.0).unwrap();
        assert_eq!(kept.len() + removed.len(), 1000);
        // Cap area fraction is (1 − cos 30°)/2.
        let expected = (1.0 - 30f64.to_radians().cos()) / 2.0 * 1000.0;
        assert!((removed.len() as f64 - expected).abs() <= 2.0);
        assert!(removed.points.iter().all(|p| p.z >= 30f64.to_radians().cos() - 1e-3));
        assert!(remove_cap(&cloud, Vec3::zeros(), 30.0).is_err());
    }
}
