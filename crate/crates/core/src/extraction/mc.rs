use std::collections::HashMap;

use super::grid::ScalarGrid;
use super::tables::{CORNERS, EDGES, TRIANGLES};
use crate::geometry::{SpatialIndex, TriangleMesh, Vec3};

/// Vertices closer than this are merged.
pub const WELD_TOLERANCE: f64 = 1e-9;
/// Faces smaller than this are dropped.
pub const MIN_FACE_AREA: f64 = 1e-14;

/// Triangulates the iso-surface of `grid`.
///
/// Cells with a non-finite corner are skipped. Face winding is chosen so
/// normals point toward increasing field values. A grid without a sign
/// change yields an empty mesh.
pub fn marching_cubes(grid: &ScalarGrid) -> TriangleMesh {
    let spec = &grid.spec;
    let n = spec.resolution;
    let iso = spec.iso;
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    // Keyed by (lower node index, axis) so neighbouring cells share vertices.
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();

    for k in 0..n - 1 {
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let corner_node = |c: usize| {
                    let o = CORNERS[c];
                    (i + o[0], j + o[1], k + o[2])
                };
                let mut vals = [0.0; 8];
                let mut case = 0usize;
                let mut finite = true;
                for (c, v) in vals.iter_mut().enumerate() {
                    let (a, b, d) = corner_node(c);
                    *v = grid.at(a, b, d);
                    finite &= v.is_finite();
                    if *v < iso {
                        case |= 1 << c;
                    }
                }
                if !finite || case == 0 || case == 255 {
                    continue;
                }
                let row = &TRIANGLES[case];
                let mut tri = [0usize; 3];
                for (slot, &e) in row.iter().take_while(|&&e| e >= 0).enumerate() {
                    let [c0, c1] = EDGES[e as usize];
                    let (n0, n1) = (corner_node(c0), corner_node(c1));
                    let (lo, hi, vlo, vhi) = if spec.index(n0.0, n0.1, n0.2)
                        < spec.index(n1.0, n1.1, n1.2)
                    {
                        (n0, n1, vals[c0], vals[c1])
                    } else {
                        (n1, n0, vals[c1], vals[c0])
                    };
                    let axis = if lo.0 != hi.0 {
                        0
                    } else if lo.1 != hi.1 {
                        1
                    } else {
                        2
                    };
                    let key = (spec.index(lo.0, lo.1, lo.2), axis);
                    let id = *edge_vertex.entry(key).or_insert_with(|| {
                        let pa = spec.node(lo.0, lo.1, lo.2);
                        let pb = spec.node(hi.0, hi.1, hi.2);
                        let t = ((iso - vlo) / (vhi - vlo)).clamp(0.0, 1.0);
                        vertices.push(pa + (pb - pa) * t);
                        vertices.len() - 1
                    });
                    tri[slot % 3] = id;
                    if slot % 3 == 2 {
                        faces.push(tri);
                    }
                }
            }
        }
    }

    let mut mesh = cleanup(vertices, faces);
    orient_by_gradient(&mut mesh, grid);
    mesh
}

/// Welds near-coincident vertices, drops tiny or collapsed faces and
/// unreferenced vertices.
pub fn cleanup(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> TriangleMesh {
    let mut rep: Vec<usize> = (0..vertices.len()).collect();
    if !vertices.is_empty() {
        let index = SpatialIndex::new(&vertices);
        for i in 0..vertices.len() {
            for nb in index.within_radius(&vertices[i], WELD_TOLERANCE) {
                if nb.index < i {
                    rep[i] = rep[i].min(rep[nb.index]);
                }
            }
        }
    }
    let welded: Vec<[usize; 3]> = faces
        .into_iter()
        .map(|f| f.map(|v| rep[v]))
        .filter(|f| f[0] != f[1] && f[1] != f[2] && f[0] != f[2])
        .filter(|f| {
            let (a, b, c) = (vertices[f[0]], vertices[f[1]], vertices[f[2]]);
            0.5 * (b - a).cross(&(c - a)).norm() >= MIN_FACE_AREA
        })
        .collect();

    let mut remap = vec![usize::MAX; vertices.len()];
    let mut kept = Vec::new();
    let faces = welded
        .into_iter()
        .map(|f| {
            f.map(|v| {
                if remap[v] == usize::MAX {
                    remap[v] = kept.len();
                    kept.push(vertices[v]);
                }
                remap[v]
            })
        })
        .collect();
    TriangleMesh {
        vertices: kept,
        faces,
    }
}

/// Flips faces whose normal opposes the field gradient at their centroid.
fn orient_by_gradient(mesh: &mut TriangleMesh, grid: &ScalarGrid) {
    for f in 0..mesh.faces.len() {
        let g = grid.gradient_at(&mesh.face_centroid(f));
        if mesh.face_cross(f).dot(&g) < 0.0 {
            mesh.faces[f].swap(1, 2);
        }
    }
}
