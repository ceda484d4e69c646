//! Chamfer distance, point-to-surface distance and mesh surface sampling.
//! Reported values are scaled by 10³.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::TriangleMesh;
use crate::math::{self, Vec3};
use crate::spatial::NearestIndex;

pub const METRIC_SCALE: f64 = 1e3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("{0} is empty")]
    Empty(&'static str),
}

fn mean_nearest(from: &[Vec3], to: &NearestIndex) -> f64 {
    let d: Vec<f64> = from.par_iter().map(|p| to.nearest_distance(*p)).collect();
    d.iter().sum::<f64>() / d.len() as f64
}

/// `10³ · ½ (mean_a d(a, B) + mean_b d(b, A))` with unsquared distances.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64, MetricError> {
    if a.is_empty() {
        return Err(MetricError::Empty("first point set"));
    }
    if b.is_empty() {
        return Err(MetricError::Empty("second point set"));
    }
    let ia = NearestIndex::build(a).expect("non-empty");
    let ib = NearestIndex::build(b).expect("non-empty");
    Ok(METRIC_SCALE * 0.5 * (mean_nearest(a, &ib) + mean_nearest(b, &ia)))
}

/// Closest point of triangle `abc` to `p` by Voronoi-region classification.
pub fn closest_point_on_triangle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Vec3 {
    use math::{add, dot, scale, sub};
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return add(a, scale(ab, v));
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return add(a, scale(ac, w));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return add(b, scale(sub(c, b), w));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    add(a, add(scale(ab, v), scale(ac, w)))
}

pub fn point_triangle_distance(p: Vec3, tri: [Vec3; 3]) -> f64 {
    math::dist2(p, closest_point_on_triangle(p, tri[0], tri[1], tri[2])).sqrt()
}

#[derive(Clone, Copy)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    fn of(points: &[Vec3]) -> Self {
        let mut b = Aabb { lo: [f64::INFINITY; 3], hi: [f64::NEG_INFINITY; 3] };
        for p in points {
            for a in 0..3 {
                b.lo[a] = b.lo[a].min(p[a]);
                b.hi[a] = b.hi[a].max(p[a]);
            }
        }
        b
    }

    fn merge(self, o: Aabb) -> Aabb {
        Aabb { lo: [0, 1, 2].map(|a| self.lo[a].min(o.lo[a])), hi: [0, 1, 2].map(|a| self.hi[a].max(o.hi[a])) }
    }

    fn dist2(&self, p: Vec3) -> f64 {
        let mut d = 0.0;
        for a in 0..3 {
            let e = (self.lo[a] - p[a]).max(0.0).max(p[a] - self.hi[a]);
            d += e * e;
        }
        d
    }
}

enum BvhNode {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

/// Bounding-volume hierarchy over mesh triangles for exact closest-point
/// queries.
pub struct TriangleBvh {
    tris: Vec<[Vec3; 3]>,
    nodes: Vec<BvhNode>,
}

impl TriangleBvh {
    pub fn build(mesh: &TriangleMesh) -> Result<Self, MetricError> {
        if mesh.triangles.is_empty() {
            return Err(MetricError::Empty("mesh"));
        }
        let mut tris: Vec<[Vec3; 3]> = (0..mesh.triangles.len()).map(|t| mesh.triangle(t)).collect();
        let mut nodes = Vec::new();
        let n = tris.len();
        build_bvh(&mut tris, 0, n, &mut nodes);
        Ok(Self { tris, nodes })
    }

    pub fn distance(&self, p: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            match &self.nodes[n] {
                BvhNode::Leaf { bounds, start, end } => {
                    if bounds.dist2(p) > best {
                        continue;
                    }
                    for t in &self.tris[*start..*end] {
                        best = best.min(math::dist2(p, closest_point_on_triangle(p, t[0], t[1], t[2])));
                    }
                }
                BvhNode::Inner { bounds, left, right } => {
                    if bounds.dist2(p) > best {
                        continue;
                    }
                    stack.push(*right);
                    stack.push(*left);
                }
            }
        }
        best.sqrt()
    }
}

fn build_bvh(tris: &mut [[Vec3; 3]], start: usize, end: usize, nodes: &mut Vec<BvhNode>) -> usize {
    let bounds = tris[start..end].iter().map(|t| Aabb::of(t)).reduce(Aabb::merge).unwrap();
    let me = nodes.len();
    if end - start <= 4 {
        nodes.push(BvhNode::Leaf { bounds, start, end });
        return me;
    }
    let axis = (0..3).fold(0, |b, a| if bounds.hi[a] - bounds.lo[a] > bounds.hi[b] - bounds.lo[b] { a } else { b });
    let centroid = |t: &[Vec3; 3]| t[0][axis] + t[1][axis] + t[2][axis];
    let mid = (end - start) / 2;
    tris[start..end].select_nth_unstable_by(mid, |a, b| centroid(a).total_cmp(&centroid(b)));
    nodes.push(BvhNode::Leaf { bounds, start, end });
    let left = build_bvh(tris, start, start + mid, nodes);
    let right = build_bvh(tris, start + mid, end, nodes);
    nodes[me] = BvhNode::Inner { bounds, left, right };
    me
}

/// `10³ ·` mean exact distance from each point to the mesh surface.
pub fn point_to_surface(points: &[Vec3], mesh: &TriangleMesh) -> Result<f64, MetricError> {
    if points.is_empty() {
        return Err(MetricError::Empty("point set"));
    }
    let bvh = TriangleBvh::build(mesh)?;
    let d: Vec<f64> = points.par_iter().map(|p| bvh.distance(*p)).collect();
    Ok(METRIC_SCALE * d.iter().sum::<f64>() / d.len() as f64)
}

/// `n` points distributed uniformly by area over the mesh surface.
pub fn sample_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Vec<Vec3>, MetricError> {
    if mesh.triangles.is_empty() {
        return Err(MetricError::Empty("mesh"));
    }
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        let [a, b, c] = mesh.triangle(t);
        total += 0.5 * math::norm(math::cross(math::sub(b, a), math::sub(c, a)));
        cdf.push(total);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.gen::<f64>() * total;
        let t = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        let [a, b, c] = mesh.triangle(t);
        let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
        let s = r1.sqrt();
        let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
        out.push([0, 1, 2].map(|k| wa * a[k] + wb * b[k] + wc * c[k]));
    }
    Ok(out)
}
