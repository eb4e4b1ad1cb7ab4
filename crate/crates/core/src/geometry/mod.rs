//! Point-cloud and mesh containers, spatial indexing, normalization, surface
//! sampling and file I/O.

mod io;
mod kdtree;
mod sampling;

pub use io::{
    load_mesh, load_oriented_cloud, load_point_cloud, write_obj, write_ply_mesh, write_ply_points,
    write_xyz, CloudFormat,
};
pub use kdtree::{Neighbor, SpatialIndex};
pub(crate) use kdtree::dist2;
pub use sampling::{random_subset, sample_mesh_surface};

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Raw, unoriented input samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned bounding box as `(min, max)`. `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        bounds_of(&self.points)
    }

    pub fn diagonal(&self) -> f64 {
        self.bounds().map(|(lo, hi)| (hi - lo).norm()).unwrap_or(0.0)
    }

    pub fn check_finite(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::Argument(format!("point {i} is not finite: {p:?}")));
            }
        }
        Ok(())
    }
}

pub(crate) fn bounds_of(points: &[Vec3]) -> Option<(Vec3, Vec3)> {
    let first = *points.first()?;
    Some(points.iter().fold((first, first), |(lo, hi), p| {
        (lo.inf(p), hi.sup(p))
    }))
}

/// Points paired with unit normals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OrientedPointCloud {
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
}

impl OrientedPointCloud {
    pub fn new(points: Vec<Vec3>, normals: Vec<Vec3>) -> Result<Self> {
        if points.len() != normals.len() {
            return Err(Error::Argument(format!(
                "{} points but {} normals",
                points.len(),
                normals.len()
            )));
        }
        for (i, n) in normals.iter().enumerate() {
            if (n.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::Argument(format!(
                    "normal {i} is not unit length (norm {})",
                    n.norm()
                )));
            }
        }
        Ok(Self { points, normals })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Indexed triangle set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = Self { vertices, faces };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(Error::DegenerateMesh(format!(
                    "face {fi} references vertex out of range ({f:?}, {n} vertices)"
                )));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn corners(&self, face: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[face];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Unnormalized face normal; its length is twice the face area.
    pub fn face_cross(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.corners(face);
        (b - a).cross(&(c - a))
    }

    pub fn face_area(&self, face: usize) -> f64 {
        0.5 * self.face_cross(face).norm()
    }

    pub fn face_centroid(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.corners(face);
        (a + b + c) / 3.0
    }

    /// Unit normal following the counter-clockwise winding; zero for a
    /// degenerate face.
    pub fn face_normal(&self, face: usize) -> Vec3 {
        let n = self.face_cross(face);
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vec3::zeros()
        }
    }

    pub fn face_normals(&self) -> Vec<Vec3> {
        (0..self.faces.len()).map(|f| self.face_normal(f)).collect()
    }

    pub fn face_centroids(&self) -> Vec<Vec3> {
        (0..self.faces.len()).map(|f| self.face_centroid(f)).collect()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Area-weighted vertex normals.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut acc = vec![Vec3::zeros(); self.vertices.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            let n = self.face_cross(fi);
            for &v in f {
                acc[v] += n;
            }
        }
        acc.into_iter()
            .map(|n| {
                let len = n.norm();
                if len > 0.0 {
                    n / len
                } else {
                    n
                }
            })
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        let mut edges: Vec<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|&[a, b, c]| [(a, b), (b, c), (c, a)])
            .map(|(u, v)| (u.min(v), u.max(v)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges.len()
    }

    /// `V - E + F`, counting only vertices referenced by a face.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for f in &self.faces {
            for &v in f {
                used[v] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_count() as i64 + self.faces.len() as i64
    }

    /// Number of face-connected components (faces sharing a vertex).
    pub fn connected_components(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.vertices.len()).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for &[a, b, c] in &self.faces {
            for (u, v) in [(a, b), (b, c)] {
                let (ru, rv) = (find(&mut parent, u), find(&mut parent, v));
                if ru != rv {
                    parent[ru.max(rv)] = ru.min(rv);
                }
            }
        }
        let mut roots: Vec<usize> = self
            .faces
            .iter()
            .map(|f| find(&mut parent, f[0]))
            .collect();
        roots.sort_unstable();
        roots.dedup();
        roots.len()
    }

    pub fn map_vertices(&self, f: impl Fn(&Vec3) -> Vec3) -> Self {
        Self {
            vertices: self.vertices.iter().map(f).collect(),
            faces: self.faces.clone(),
        }
    }
}

/// Uniform scale plus translation mapping a shape into the unit cube.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationTransform {
    pub center: Vec3,
    pub scale: f64,
}

impl NormalizationTransform {
    pub fn identity() -> Self {
        Self {
            center: Vec3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (p - self.center) / self.scale
    }

    pub fn invert(&self, p: &Vec3) -> Vec3 {
        p * self.scale + self.center
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud::new(cloud.points.iter().map(|p| self.apply(p)).collect())
    }

    pub fn invert_cloud(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud::new(cloud.points.iter().map(|p| self.invert(p)).collect())
    }

    pub fn invert_mesh(&self, mesh: &TriangleMesh) -> TriangleMesh {
        mesh.map_vertices(|p| self.invert(p))
    }

    pub fn to_text(&self) -> String {
        format!(
            "center = {:e} {:e} {:e}\nscale = {:e}\n",
            self.center.x, self.center.y, self.center.z, self.scale
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut center = None;
        let mut scale = None;
        for line in text.lines() {
            let Some((key, value)) = line.split_once('=') else {
                continue;
            };
            let nums: Vec<f64> = value
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("transform: {e}")))?;
            match (key.trim(), nums.as_slice()) {
                ("center", &[x, y, z]) => center = Some(Vec3::new(x, y, z)),
                ("scale", &[s]) => scale = Some(s),
                (k, _) => return Err(Error::Config(format!("transform: bad entry {k:?}"))),
            }
        }
        match (center, scale) {
            (Some(center), Some(scale)) if scale > 0.0 => Ok(Self { center, scale }),
            _ => Err(Error::Config("transform: missing center or scale".into())),
        }
    }
}

/// Centers the cloud on its bounding-box center and scales the longest box
/// side to 1.
pub fn normalize_unit(cloud: &PointCloud) -> Result<(PointCloud, NormalizationTransform)> {
    let (lo, hi) = cloud.bounds().ok_or(Error::EmptyInput)?;
    let extent = hi - lo;
    let scale = extent.max();
    if !(scale > 0.0) {
        return Err(Error::ZeroScale);
    }
    let transform = NormalizationTransform {
        center: (lo + hi) * 0.5,
        scale,
    };
    Ok((transform.apply_cloud(cloud), transform))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_two_points() {
        let cloud = PointCloud::new(vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)]);
        let (out, t) = normalize_unit(&cloud).unwrap();
        assert_eq!(out.points[0], Vec3::new(-0.5, 0.0, 0.0));
        assert_eq!(out.points[1], Vec3::new(0.5, 0.0, 0.0));
        assert_eq!(t.center, Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(t.scale, 2.0);
    }

    #[test]
    fn normalize_is_idempotent() {
        let cloud = PointCloud::new(vec![
            Vec3::new(-0.5, -0.2, 0.1),
            Vec3::new(0.5, 0.3, -0.4),
            Vec3::new(0.0, 0.1, 0.0),
        ]);
        let (once, _) = normalize_unit(&cloud).unwrap();
        let (_, t) = normalize_unit(&once).unwrap();
        assert!(t.center.norm() < 1e-9);
        assert!((t.scale - 1.0).abs() < 1e-9);
    }

    #[test]
    fn normalize_rejects_coincident_points() {
        let cloud = PointCloud::new(vec![Vec3::new(1.0, 2.0, 3.0); 4]);
        assert!(matches!(normalize_unit(&cloud), Err(Error::ZeroScale)));
        assert!(matches!(
            normalize_unit(&PointCloud::default()),
            Err(Error::EmptyInput)
        ));
    }

    #[test]
    fn transform_text_round_trip() {
        let t = NormalizationTransform {
            center: Vec3::new(0.1, -2.5, 3.0),
            scale: 0.75,
        };
        assert_eq!(NormalizationTransform::parse(&t.to_text()).unwrap(), t);
    }

    #[test]
    fn oriented_cloud_rejects_non_unit_normals() {
        let err = OrientedPointCloud::new(vec![Vec3::zeros()], vec![Vec3::new(0.0, 0.0, 2.0)]);
        assert!(err.is_err());
        let err = OrientedPointCloud::new(vec![Vec3::zeros()], vec![]);
        assert!(err.is_err());
    }

    #[test]
    fn tetrahedron_topology() {
        let mesh = TriangleMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(0.0, 0.0, 1.0),
            ],
            vec![[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]],
        )
        .unwrap();
        assert_eq!(mesh.euler_characteristic(), 2);
        assert_eq!(mesh.connected_components(), 1);
        assert!(TriangleMesh::new(vec![Vec3::zeros()], vec![[0, 0, 1]]).is_err());
    }
}
