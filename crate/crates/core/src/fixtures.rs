//! Synthetic point clouds used by tests, the acceptance suite and `ablate`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::geometry::PointCloud;
use crate::math::{self, Vec3};

/// Uniform samples on a sphere about the origin, with exact normals.
pub fn sphere(n: usize, radius: f64, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    while points.len() < n {
        let g: Vec3 = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let l = math::norm(g);
        if l < 1e-12 {
            continue;
        }
        let u = math::scale(g, 1.0 / l);
        points.push(math::scale(u, radius));
        normals.push(u);
    }
    PointCloud { points, normals: Some(normals) }
}

/// Uniform samples on the square `[-h, h]²` in the plane `z = 0`.
pub fn sheet(n: usize, half: f64, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n).map(|_| [rng.gen_range(-half..=half), rng.gen_range(-half..=half), 0.0]).collect();
    PointCloud { points, normals: Some(vec![[0.0, 0.0, 1.0]; n]) }
}

/// A closed cube surface with an open square sheet sticking out of one
/// face, the classic mixed closed/open toy shape.
pub fn cube_with_sheet(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 0.4;
    let n_sheet = n / 4;
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n - n_sheet {
        let face = rng.gen_range(0..6);
        let axis = face / 2;
        let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
        let mut p = [rng.gen_range(-c..=c) - 0.3, rng.gen_range(-c..=c), rng.gen_range(-c..=c)];
        p[axis] = sign * c + if axis == 0 { -0.3 } else { 0.0 };
        let mut nn = [0.0; 3];
        nn[axis] = sign;
        points.push(p);
        normals.push(nn);
    }
    // Sheet in z = 0 from the cube's +x face outwards.
    for _ in 0..n_sheet {
        points.push([rng.gen_range(0.1..=0.8), rng.gen_range(-0.3..=0.3), 0.0]);
        normals.push([0.0, 0.0, 1.0]);
    }
    PointCloud { points, normals: Some(normals) }
}
