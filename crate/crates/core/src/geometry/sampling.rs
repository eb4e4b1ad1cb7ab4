use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{PointCloud, TriangleMesh};
use crate::error::{Error, Result};

/// Draws `n` points uniformly by area from the surface of `mesh`.
pub fn sample_mesh_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<PointCloud> {
    mesh.validate()?;
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.face_area(f);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::DegenerateMesh("total surface area is zero".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let target = rng.random::<f64>() * total;
        let face = cumulative
            .partition_point(|&c| c <= target)
            .min(cumulative.len() - 1);
        let [a, b, c] = mesh.corners(face);
        let r1: f64 = rng.random::<f64>().sqrt();
        let r2: f64 = rng.random();
        points.push(a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2));
    }
    Ok(PointCloud::new(points))
}

/// Seeded uniform selection of `count` distinct points, in original order.
pub fn random_subset(cloud: &PointCloud, count: usize, seed: u64) -> PointCloud {
    if count >= cloud.len() {
        return cloud.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, cloud.len(), count).into_vec();
    picked.sort_unstable();
    PointCloud::new(picked.into_iter().map(|i| cloud.points[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    fn barycentric(p: &Vec3, [a, b, c]: [Vec3; 3]) -> (f64, f64, f64, f64) {
        let n = (b - a).cross(&(c - a));
        let area2 = n.norm_squared();
        let u = (c - b).cross(&(p - b)).dot(&n) / area2;
        let v = (a - c).cross(&(p - c)).dot(&n) / area2;
        let w = 1.0 - u - v;
        let plane = (p - a).dot(&n) / n.norm();
        (u, v, w, plane)
    }

    #[test]
    fn samples_stay_inside_triangle() {
        let tri = [
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ];
        let mesh = TriangleMesh::new(tri.to_vec(), vec![[0, 1, 2]]).unwrap();
        let cloud = sample_mesh_surface(&mesh, 1000, 1).unwrap();
        assert_eq!(cloud.len(), 1000);
        for p in &cloud.points {
            let (u, v, w, plane) = barycentric(p, tri);
            assert!(u > -1e-9 && v > -1e-9 && w > -1e-9);
            assert!(plane.abs() < 1e-9);
        }
    }

    #[test]
    fn tilted_triangle_samples_lie_on_plane() {
        let tri = [
            Vec3::new(0.3, -0.2, 0.9),
            Vec3::new(1.1, 0.4, -0.5),
            Vec3::new(-0.7, 1.3, 0.2),
        ];
        let mesh = TriangleMesh::new(tri.to_vec(), vec![[0, 1, 2]]).unwrap();
        for p in &sample_mesh_surface(&mesh, 500, 9).unwrap().points {
            assert!(barycentric(p, tri).3.abs() < 1e-9);
        }
    }

    #[test]
    fn area_proportional_allocation() {
        // Areas 1 and 3.
        let mesh = TriangleMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(2.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(10.0, 0.0, 0.0),
                Vec3::new(13.0, 0.0, 0.0),
                Vec3::new(10.0, 2.0, 0.0),
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap();
        let cloud = sample_mesh_surface(&mesh, 100_000, 5).unwrap();
        let second = cloud.points.iter().filter(|p| p.x >= 10.0).count() as f64;
        assert!((second / 100_000.0 - 0.75).abs() < 0.01);
    }

    #[test]
    fn deterministic_for_seed() {
        let mesh = TriangleMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        assert_eq!(
            sample_mesh_surface(&mesh, 50, 11).unwrap(),
            sample_mesh_surface(&mesh, 50, 11).unwrap()
        );
    }

    #[test]
    fn zero_area_is_rejected() {
        let mesh = TriangleMesh::new(vec![Vec3::zeros(); 3], vec![[0, 1, 2]]).unwrap();
        assert!(matches!(
            sample_mesh_surface(&mesh, 10, 0),
            Err(Error::DegenerateMesh(_))
        ));
    }

    #[test]
    fn subset_is_without_replacement() {
        let cloud = PointCloud::new((0..100).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect());
        let sub = random_subset(&cloud, 30, 4);
        assert_eq!(sub.len(), 30);
        let mut xs: Vec<i64> = sub.points.iter().map(|p| p.x as i64).collect();
        xs.dedup();
        assert_eq!(xs.len(), 30);
        assert_eq!(random_subset(&cloud, 30, 4), sub);
        assert_eq!(random_subset(&cloud, 500, 4), cloud);
    }
}
