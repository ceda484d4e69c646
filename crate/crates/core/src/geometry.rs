//! Point clouds, triangle meshes and the normalization transform that maps
//! raw input coordinates into the canonical cube `[-1, 1]^3`.

use thiserror::Error;

use crate::math::{self, Vec3};

/// Largest half-extent after normalization. Leaving a margin inside the cube
/// keeps a non-empty exterior for far-field sampling.
pub const NORMALIZED_HALF_EXTENT: f64 = 0.9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point cloud is empty")]
    Empty,
    #[error("all points coincide; cannot normalize a zero-extent cloud")]
    DegenerateExtent,
    #[error("normal count {normals} does not match point count {points}")]
    NormalCount { points: usize, normals: usize },
    #[error("normal {index} has zero or non-finite length")]
    BadNormal { index: usize },
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// Unoriented unit normals, one per point, when available.
    pub normals: Option<Vec<Vec3>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points, normals: None }
    }

    /// Builds a cloud with normals, rescaling each normal to unit length.
    pub fn with_normals(points: Vec<Vec3>, normals: Vec<Vec3>) -> Result<Self, GeometryError> {
        if normals.len() != points.len() {
            return Err(GeometryError::NormalCount { points: points.len(), normals: normals.len() });
        }
        let normals = normals
            .into_iter()
            .enumerate()
            .map(|(index, n)| {
                let len = math::norm(n);
                if len > 0.0 && len.is_finite() {
                    Ok(math::scale(n, 1.0 / len))
                } else {
                    Err(GeometryError::BadNormal { index })
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { points, normals: Some(normals) })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bounding_box(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.points.first()?;
        let mut lo = first;
        let mut hi = first;
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        Some((lo, hi))
    }
}

/// Similarity transform `normalized = raw * scale + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub scale: f64,
    pub translation: Vec3,
}

impl Default for Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Transform {
    pub fn identity() -> Self {
        Self { scale: 1.0, translation: [0.0; 3] }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        [
            p[0] * self.scale + self.translation[0],
            p[1] * self.scale + self.translation[1],
            p[2] * self.scale + self.translation[2],
        ]
    }

    pub fn invert(&self, p: Vec3) -> Vec3 {
        [
            (p[0] - self.translation[0]) / self.scale,
            (p[1] - self.translation[1]) / self.scale,
            (p[2] - self.translation[2]) / self.scale,
        ]
    }

    /// Maps a length measured in normalized units back to raw units.
    pub fn invert_length(&self, d: f64) -> f64 {
        d / self.scale
    }
}

/// Uniform, aspect-preserving normalization: the bounding-box center goes to
/// the origin and the largest half-extent to [`NORMALIZED_HALF_EXTENT`].
pub fn normalize(cloud: &PointCloud) -> Result<(PointCloud, Transform), GeometryError> {
    let (lo, hi) = cloud.bounding_box().ok_or(GeometryError::Empty)?;
    if let Some(index) = cloud.points.iter().position(|p| !math::is_finite(*p)) {
        return Err(GeometryError::NonFinite { index });
    }
    let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])];
    let half = (0..3).map(|a| 0.5 * (hi[a] - lo[a])).fold(0.0, f64::max);
    if !(half > 0.0) {
        return Err(GeometryError::DegenerateExtent);
    }
    let scale = NORMALIZED_HALF_EXTENT / half;
    let transform = Transform { scale, translation: math::scale(center, -scale) };
    // Subtracting the center first keeps symmetric inputs exactly symmetric.
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let q = math::sub(*p, center);
            [(q[0] * scale).clamp(-1.0, 1.0), (q[1] * scale).clamp(-1.0, 1.0), (q[2] * scale).clamp(-1.0, 1.0)]
        })
        .collect();
    Ok((PointCloud { points, normals: cloud.normals.clone() }, transform))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Checks index bounds, coordinate finiteness and degenerate index
    /// triples.
    pub fn validate(&self) -> Result<(), String> {
        if let Some(i) = self.vertices.iter().position(|v| !math::is_finite(*v)) {
            return Err(format!("vertex {i} is not finite"));
        }
        let n = self.vertices.len() as u32;
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&i| i >= n) {
                return Err(format!("triangle {t} indexes past {n} vertices"));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(format!("triangle {t} repeats a vertex index"));
            }
        }
        Ok(())
    }

    pub fn triangle(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle(t);
                0.5 * math::norm(math::cross(math::sub(b, a), math::sub(c, a)))
            })
            .sum()
    }
}

pub fn denormalize_mesh(mesh: &TriangleMesh, t: &Transform) -> TriangleMesh {
    TriangleMesh {
        vertices: mesh.vertices.iter().map(|v| t.invert(*v)).collect(),
        triangles: mesh.triangles.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_points_map_to_margin() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let (n, t) = normalize(&cloud).unwrap();
        assert_eq!(n.points, vec![[-0.9, 0.0, 0.0], [0.9, 0.0, 0.0]]);
        assert_eq!(t.scale, 0.9);
        assert_eq!(t.translation, [-0.9, 0.0, 0.0]);
    }

    #[test]
    fn repeated_point_is_degenerate() {
        let cloud = PointCloud::new(vec![[1.0, 2.0, 3.0]; 5]);
        assert!(matches!(normalize(&cloud), Err(GeometryError::DegenerateExtent)));
    }

    #[test]
    fn empty_cloud_is_rejected() {
        assert!(matches!(normalize(&PointCloud::default()), Err(GeometryError::Empty)));
    }

    #[test]
    fn cube_corners_map_to_uniform_box() {
        let mut pts = Vec::new();
        for i in 0..8 {
            pts.push([2.0 * (i & 1) as f64, 2.0 * ((i >> 1) & 1) as f64, 2.0 * ((i >> 2) & 1) as f64]);
        }
        let (n, _) = normalize(&PointCloud::new(pts)).unwrap();
        for p in n.points {
            for c in p {
                assert_eq!(c.abs(), 0.9);
            }
        }
    }

    #[test]
    fn identity_transform_leaves_mesh_unchanged() {
        let mesh = TriangleMesh {
            vertices: vec![[0.1, 0.2, 0.3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2]],
        };
        assert_eq!(denormalize_mesh(&mesh, &Transform::identity()), mesh);
        assert_eq!(denormalize_mesh(&TriangleMesh::default(), &Transform::identity()), TriangleMesh::default());
    }

    #[test]
    fn normals_are_rescaled_and_checked() {
        let c = PointCloud::with_normals(vec![[0.0; 3]], vec![[0.0, 0.0, 2.0]]).unwrap();
        assert_eq!(c.normals.unwrap()[0], [0.0, 0.0, 1.0]);
        assert!(PointCloud::with_normals(vec![[0.0; 3]], vec![[0.0; 3]]).is_err());
        assert!(PointCloud::with_normals(vec![[0.0; 3]; 2], vec![[1.0, 0.0, 0.0]]).is_err());
    }

    fn cloud_strategy() -> impl Strategy<Value = Vec<Vec3>> {
        prop::collection::vec(prop::array::uniform3(-50.0f64..50.0), 2..40)
            .prop_filter("non-degenerate", |v| v.iter().any(|p| p != &v[0]))
    }

    proptest! {
        #[test]
        fn normalized_points_stay_in_cube_and_round_trip(pts in cloud_strategy()) {
            let raw = PointCloud::new(pts.clone());
            let (n, t) = normalize(&raw).unwrap();
            prop_assert!(t.scale > 0.0);
            let extent = pts.iter().flat_map(|p| p.iter()).fold(0.0f64, |m, c| m.max(c.abs())).max(1.0);
            for (p, q) in pts.iter().zip(&n.points) {
                for a in 0..3 {
                    prop_assert!(q[a].abs() <= 1.0);
                }
                let back = t.invert(*q);
                for a in 0..3 {
                    prop_assert!((back[a] - p[a]).abs() <= 1e-9 * extent);
                }
            }
            let mesh = TriangleMesh { vertices: n.points.clone(), triangles: vec![] };
            let raw_mesh = denormalize_mesh(&mesh, &t);
            for (p, q) in pts.iter().zip(&raw_mesh.vertices) {
                for a in 0..3 {
                    prop_assert!((p[a] - q[a]).abs() <= 1e-9 * extent);
                }
            }
        }

        #[test]
        fn normalization_is_idempotent(pts in cloud_strategy()) {
            let (once, _) = normalize(&PointCloud::new(pts)).unwrap();
            let (twice, t2) = normalize(&once).unwrap();
            prop_assert!(t2.scale >= 0.9 - 1e-12 && t2.scale <= 1.0 + 1e-12);
            for (a, b) in once.points.iter().zip(&twice.points) {
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() <= 1e-12);
                }
            }
        }
    }
}
