//! Nearest-neighbour index over the input cloud, PCA normals, and the
//! near-band / far-field samplers that feed each optimization step.

use nalgebra::{Matrix3, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::PointCloud;
use crate::math::{self, Vec3};

const LEAF_SIZE: usize = 8;

/// Proposal budget after which a sampler with less than 1% acceptance gives up.
pub const STARVATION_PROPOSALS: usize = 100_000;

#[derive(Debug, Error)]
pub enum SpatialError {
    #[error("cannot index an empty point cloud")]
    EmptyCloud,
    #[error("neighborhood of point {index} has rank < 2 (collinear or coincident neighbors)")]
    DegenerateNeighborhood { index: usize },
    #[error("PCA needs k >= 3 neighbors and at least k points (k = {k}, points = {points})")]
    TooFewNeighbors { k: usize, points: usize },
    #[error("{sampler} sampler starved: {accepted} of {proposals} proposals accepted")]
    Starvation { sampler: &'static str, accepted: usize, proposals: usize },
    #[error("band half-width and jitter must be positive (delta = {delta}, sigma = {sigma})")]
    BadBand { delta: f64, sigma: f64 },
}

enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Balanced kd-tree with median splits along the widest axis.
pub struct NearestIndex {
    points: Vec<Vec3>,
    sorted: Vec<Vec3>,
    ids: Vec<u32>,
    nodes: Vec<Node>,
}

impl NearestIndex {
    pub fn build(points: &[Vec3]) -> Result<Self, SpatialError> {
        if points.is_empty() {
            return Err(SpatialError::EmptyCloud);
        }
        let mut ids: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        build_node(points, &mut ids, 0, points.len(), &mut nodes);
        let sorted = ids.iter().map(|&i| points[i as usize]).collect();
        Ok(Self { points: points.to_vec(), sorted, ids, nodes })
    }

    pub fn from_cloud(cloud: &PointCloud) -> Result<Self, SpatialError> {
        Self::build(&cloud.points)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points in their original order.
    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// Index of the closest point and its squared distance.
    pub fn nearest(&self, q: Vec3) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search_nearest(0, q, &mut best);
        (self.ids[best.0] as usize, best.1)
    }

    /// Exact Euclidean distance to the closest indexed point.
    pub fn nearest_distance(&self, q: Vec3) -> f64 {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search_nearest(0, q, &mut best);
        best.1.sqrt()
    }

    fn search_nearest(&self, node: usize, q: Vec3, best: &mut (usize, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in start..end {
                    let d = math::dist2(q, self.sorted[i]);
                    if d < best.1 {
                        *best = (i, d);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search_nearest(near, q, best);
                if diff * diff < best.1 {
                    self.search_nearest(far, q, best);
                }
            }
        }
    }

    /// The `k` closest points as `(original index, squared distance)`,
    /// sorted by distance then index.
    pub fn k_nearest(&self, q: Vec3, k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.len());
        let mut heap: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.search_knn(0, q, k, &mut heap);
        }
        heap.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        heap.into_iter().map(|(d, i)| (i as usize, d)).collect()
    }

    fn search_knn(&self, node: usize, q: Vec3, k: usize, heap: &mut Vec<(f64, u32)>) {
        let worst = |heap: &Vec<(f64, u32)>| if heap.len() < k { f64::INFINITY } else { heap[0].0 };
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in start..end {
                    let d = math::dist2(q, self.sorted[i]);
                    let cand = (d, self.ids[i]);
                    if heap.len() < k {
                        heap.push(cand);
                        let last = heap.len() - 1;
                        sift_up(heap, last);
                    } else if knn_less(cand, heap[0]) {
                        heap[0] = cand;
                        sift_down(heap, 0);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search_knn(near, q, k, heap);
                if diff * diff <= worst(heap) {
                    self.search_knn(far, q, k, heap);
                }
            }
        }
    }
}

fn knn_less(a: (f64, u32), b: (f64, u32)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

// Max-heap on (distance, id).
fn sift_up(h: &mut [(f64, u32)], mut i: usize) {
    while i > 0 {
        let p = (i - 1) / 2;
        if knn_less(h[p], h[i]) {
            h.swap(p, i);
            i = p;
        } else {
            break;
        }
    }
}

fn sift_down(h: &mut [(f64, u32)], mut i: usize) {
    loop {
        let l = 2 * i + 1;
        let r = l + 1;
        let mut m = i;
        if l < h.len() && knn_less(h[m], h[l]) {
            m = l;
        }
        if r < h.len() && knn_less(h[m], h[r]) {
            m = r;
        }
        if m == i {
            break;
        }
        h.swap(i, m);
        i = m;
    }
}

fn build_node(points: &[Vec3], ids: &mut [u32], start: usize, end: usize, nodes: &mut Vec<Node>) -> usize {
    let me = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return me;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in &ids[start..end] {
        let p = points[i as usize];
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let axis = (0..3).fold(0, |best, a| if hi[a] - lo[a] > hi[best] - lo[best] { a } else { best });
    if hi[axis] - lo[axis] == 0.0 {
        // All coincident; a split would not separate anything.
        nodes.push(Node::Leaf { start, end });
        return me;
    }
    let mid = (end - start) / 2;
    ids[start..end].select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis].total_cmp(&points[b as usize][axis]).then(a.cmp(&b))
    });
    let value = points[ids[start + mid] as usize][axis];
    nodes.push(Node::Leaf { start, end });
    let left = build_node(points, ids, start, start + mid, nodes);
    let right = build_node(points, ids, start + mid, end, nodes);
    nodes[me] = Node::Split { axis, value, left, right };
    me
}

/// Unit normal of the best-fit plane through the `k` nearest neighbours of
/// `p` (eigenvector of the smallest covariance eigenvalue). Sign is arbitrary.
pub fn pca_normal(idx: &NearestIndex, p: Vec3, k: usize) -> Result<Vec3, SpatialError> {
    pca_normal_at(idx, p, k, 0)
}

fn pca_normal_at(idx: &NearestIndex, p: Vec3, k: usize, index: usize) -> Result<Vec3, SpatialError> {
    if k < 3 || idx.len() < k {
        return Err(SpatialError::TooFewNeighbors { k, points: idx.len() });
    }
    let nbrs = idx.k_nearest(p, k);
    let inv = 1.0 / nbrs.len() as f64;
    let mut mean = [0.0; 3];
    for (i, _) in &nbrs {
        mean = math::add(mean, idx.points[*i]);
    }
    mean = math::scale(mean, inv);
    let mut cov = Matrix3::<f64>::zeros();
    for (i, _) in &nbrs {
        let d = math::sub(idx.points[*i], mean);
        for r in 0..3 {
            for c in 0..3 {
                cov[(r, c)] += d[r] * d[c] * inv;
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l_min, l_mid, l_max) =
        (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    let _ = l_min;
    if !(l_max > 0.0) || l_mid <= 1e-10 * l_max {
        return Err(SpatialError::DegenerateNeighborhood { index });
    }
    let v = eig.eigenvectors.column(order[0]);
    let n = [v[0], v[1], v[2]];
    Ok(math::scale(n, 1.0 / math::norm(n)))
}

/// PCA normals for every point of the index.
pub fn estimate_normals(idx: &NearestIndex, k: usize) -> Result<Vec<Vec3>, SpatialError> {
    idx.points.iter().enumerate().map(|(i, p)| pca_normal_at(idx, *p, k, i)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SampleStats {
    pub proposals: usize,
    pub accepted: usize,
}

impl SampleStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            1.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }

    fn starved(&self) -> bool {
        self.proposals >= STARVATION_PROPOSALS && self.accepted * 100 < self.proposals
    }
}

/// Points with `0 < d_X < delta`, proposed by Gaussian jitter of uniformly
/// chosen input samples.
pub fn sample_near_band<R: Rng>(
    idx: &NearestIndex,
    n: usize,
    delta: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<(Vec<Vec3>, SampleStats), SpatialError> {
    if !(delta > 0.0) || !(sigma > 0.0) {
        return Err(SpatialError::BadBand { delta, sigma });
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let mut out = Vec::with_capacity(n);
    let mut stats = SampleStats::default();
    while out.len() < n {
        let p = idx.points[rng.gen_range(0..idx.len())];
        let q = [p[0] + normal.sample(rng), p[1] + normal.sample(rng), p[2] + normal.sample(rng)];
        stats.proposals += 1;
        let d = idx.nearest_distance(q);
        if d > 0.0 && d < delta {
            out.push(q);
            stats.accepted += 1;
        }
        if stats.starved() {
            return Err(SpatialError::Starvation { sampler: "near-band", accepted: stats.accepted, proposals: stats.proposals });
        }
    }
    Ok((out, stats))
}

/// Uniform points in `[-1, 1]^3` with `d_X >= delta`.
pub fn sample_far<R: Rng>(
    idx: &NearestIndex,
    n: usize,
    delta: f64,
    rng: &mut R,
) -> Result<(Vec<Vec3>, SampleStats), SpatialError> {
    if !(delta > 0.0) {
        return Err(SpatialError::BadBand { delta, sigma: f64::NAN });
    }
    let mut out = Vec::with_capacity(n);
    let mut stats = SampleStats::default();
    while out.len() < n {
        let q = uniform_in_cube(rng);
        stats.proposals += 1;
        if idx.nearest_distance(q) >= delta {
            out.push(q);
            stats.accepted += 1;
        }
        if stats.starved() {
            return Err(SpatialError::Starvation { sampler: "far-field", accepted: stats.accepted, proposals: stats.proposals });
        }
    }
    Ok((out, stats))
}

pub fn uniform_in_cube<R: Rng>(rng: &mut R) -> Vec3 {
    [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)]
}

/// Query points for one optimization step.
#[derive(Clone, Debug, Default)]
pub struct SampleBatch {
    /// Samples drawn from the input cloud.
    pub surface: Vec<Vec3>,
    /// Unit (unoriented) normals paired with `surface`.
    pub surface_normals: Option<Vec<Vec3>>,
    /// `0 < d_X < delta`.
    pub near: Vec<Vec3>,
    /// `d_X >= delta`.
    pub far: Vec<Vec3>,
    /// Uniform over the domain; used by the Laplacian prior.
    pub ambient: Vec<Vec3>,
    pub delta: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchSizes {
    pub surface: usize,
    pub near: usize,
    pub far: usize,
    pub ambient: usize,
}

impl SampleBatch {
    pub fn is_empty(&self) -> bool {
        self.surface.is_empty() && self.near.is_empty() && self.far.is_empty() && self.ambient.is_empty()
    }

    pub fn len(&self) -> usize {
        self.surface.len() + self.near.len() + self.far.len() + self.ambient.len()
    }

    /// Draws a fresh batch. `normals`, when given, are indexed like the
    /// cloud held by `idx`.
    pub fn draw<R: Rng>(
        idx: &NearestIndex,
        normals: Option<&[Vec3]>,
        sizes: BatchSizes,
        delta: f64,
        sigma: f64,
        rng: &mut R,
    ) -> Result<Self, SpatialError> {
        let mut surface = Vec::with_capacity(sizes.surface);
        let mut surface_normals = normals.map(|_| Vec::with_capacity(sizes.surface));
        for _ in 0..sizes.surface {
            let i = rng.gen_range(0..idx.len());
            surface.push(idx.points[i]);
            if let (Some(out), Some(n)) = (surface_normals.as_mut(), normals) {
                out.push(n[i]);
            }
        }
        let (near, _) = sample_near_band(idx, sizes.near, delta, sigma, rng)?;
        let (far, _) = sample_far(idx, sizes.far, delta, rng)?;
        let ambient = (0..sizes.ambient).map(|_| uniform_in_cube(rng)).collect();
        Ok(Self { surface, surface_normals, near, far, ambient, delta })
    }

    /// Verifies the band-membership invariants against `idx`.
    pub fn check_membership(&self, idx: &NearestIndex) -> bool {
        self.near.iter().all(|p| {
            let d = idx.nearest_distance(*p);
            d > 0.0 && d < self.delta
        }) && self.far.iter().all(|p| idx.nearest_distance(*p) >= self.delta)
    }
}
