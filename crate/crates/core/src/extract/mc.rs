//! Table-driven marching cubes with linear edge interpolation.

use rayon::prelude::*;

use super::tables::{CORNERS, EDGE_CORNERS, TRI_TABLE};
use super::ScalarGrid;
use crate::geometry::TriangleMesh;

/// Global id of the grid edge leaving node `(i, j, k)` along `axis`.
fn edge_key(g: &ScalarGrid, i: usize, j: usize, k: usize, axis: usize) -> u64 {
    (g.index(i, j, k) as u64) * 3 + axis as u64
}

/// Extracts `{v = iso}`. Vertices are numbered by increasing edge id, so the
/// output is independent of traversal order and thread count.
pub fn marching_cubes(g: &ScalarGrid, iso: f64) -> TriangleMesh {
    let [nx, ny, nz] = g.res;
    if nx < 2 || ny < 2 || nz < 2 {
        return TriangleMesh::default();
    }
    let below = |i, j, k| g.values[g.index(i, j, k)] < iso;

    // Crossing edges in key order; each gets one vertex.
    let slabs: Vec<(Vec<u64>, Vec<[f64; 3]>)> = (0..nx)
        .into_par_iter()
        .map(|i| {
            let mut keys = Vec::new();
            let mut verts = Vec::new();
            for j in 0..ny {
                for k in 0..nz {
                    let b0 = below(i, j, k);
                    for (axis, (di, dj, dk)) in [(1, 0, 0), (0, 1, 0), (0, 0, 1)].into_iter().enumerate() {
                        let (i1, j1, k1) = (i + di, j + dj, k + dk);
                        if i1 >= nx || j1 >= ny || k1 >= nz || below(i1, j1, k1) == b0 {
                            continue;
                        }
                        keys.push(edge_key(g, i, j, k, axis));
                        verts.push(edge_vertex(g, [i, j, k], axis, iso));
                    }
                }
            }
            (keys, verts)
        })
        .collect();
    let mut keys = Vec::new();
    let mut vertices = Vec::new();
    for (k, v) in slabs {
        keys.extend(k);
        vertices.extend(v);
    }

    let lookup = |key: u64| keys.binary_search(&key).expect("crossing edge has a vertex") as u32;
    let tris: Vec<Vec<[u32; 3]>> = (0..nx - 1)
        .into_par_iter()
        .map(|i| {
            let mut out = Vec::new();
            for j in 0..ny - 1 {
                for k in 0..nz - 1 {
                    let mut case = 0usize;
                    for (c, o) in CORNERS.iter().enumerate() {
                        if below(i + o[0], j + o[1], k + o[2]) {
                            case |= 1 << c;
                        }
                    }
                    let row = &TRI_TABLE[case];
                    for t in row.chunks(3).take_while(|t| t[0] >= 0) {
                        let tri = [0, 1, 2].map(|m| {
                            let [a, b] = EDGE_CORNERS[t[m] as usize];
                            let (oa, ob) = (CORNERS[a], CORNERS[b]);
                            let axis = (0..3).find(|&d| oa[d] != ob[d]).unwrap();
                            let start = [0, 1, 2].map(|d| oa[d].min(ob[d]));
                            lookup(edge_key(g, i + start[0], j + start[1], k + start[2], axis))
                        });
                        out.push(tri);
                    }
                }
            }
            out
        })
        .collect();
    TriangleMesh { vertices, triangles: tris.into_iter().flatten().collect() }
}

/// Iso crossing on the edge from node `n` along `axis`. Only the coordinate
/// along the edge is interpolated; the other two are copied exactly.
fn edge_vertex(g: &ScalarGrid, n: [usize; 3], axis: usize, iso: f64) -> [f64; 3] {
    let mut m = n;
    m[axis] += 1;
    let v0 = g.values[g.index(n[0], n[1], n[2])] - iso;
    let v1 = g.values[g.index(m[0], m[1], m[2])] - iso;
    let mut p = g.point(n[0], n[1], n[2]);
    let c0 = p[axis];
    let c1 = g.point(m[0], m[1], m[2])[axis];
    // Product form: exact when the field is linear in the coordinate.
    let x = (v1 * c0 - v0 * c1) / (v1 - v0);
    p[axis] = x.clamp(c0.min(c1), c0.max(c1));
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;
    use std::collections::HashMap;

    #[test]
    fn table_edges_cross_the_surface() {
        for case in 0..256usize {
            for &e in TRI_TABLE[case].iter().take_while(|&&e| e >= 0) {
                let [a, b] = EDGE_CORNERS[e as usize];
                assert_ne!((case >> a) & 1, (case >> b) & 1, "case {case} edge {e}");
            }
        }
    }

    #[test]
    fn linear_field_gives_exact_plane() {
        for n in [7, 8, 16] {
            let g = ScalarGrid::from_fn([n, n, n], |p| p[2]);
            let m = marching_cubes(&g, 0.0);
            assert!(!m.is_empty());
            assert!(m.vertices.iter().all(|v| v[2] == 0.0));
            m.validate().unwrap();
        }
    }

    #[test]
    fn positive_grid_is_empty() {
        let g = ScalarGrid::from_fn([5, 6, 7], |p| 1.0 + p[0] * p[0]);
        assert!(marching_cubes(&g, 0.0).is_empty());
    }

    #[test]
    fn sphere_is_close_and_watertight() {
        let g = ScalarGrid::from_fn([64, 64, 64], |p| math::norm(p) - 0.5);
        let m = marching_cubes(&g, 0.0);
        let h = g.spacing[0];
        for v in &m.vertices {
            assert!((math::norm(*v) - 0.5).abs() <= 2.0 * h);
        }
        let mut edges: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &m.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        assert!(edges.values().all(|&c| c == 2));
        // Euler characteristic of a sphere.
        let chi = m.vertices.len() as i64 - edges.len() as i64 + m.triangles.len() as i64;
        assert_eq!(chi, 2);
    }

    #[test]
    fn vertices_interpolate_to_iso() {
        let g = ScalarGrid::from_fn([20, 17, 23], |p| (3.0 * p[0]).sin() + p[1] * p[2] - 0.1);
        let m = marching_cubes(&g, 0.2);
        for v in &m.vertices {
            assert!((g.trilinear(*v) - 0.2).abs() <= 1e-9);
        }
    }

    #[test]
    fn output_is_thread_independent() {
        let g = ScalarGrid::from_fn([24, 24, 24], |p| math::norm(p) - 0.6 + 0.1 * (5.0 * p[0]).sin());
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        assert_eq!(one.install(|| marching_cubes(&g, 0.0)), four.install(|| marching_cubes(&g, 0.0)));
    }
}
