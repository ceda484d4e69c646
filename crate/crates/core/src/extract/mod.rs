//! Dense-grid evaluation, iso-surface extraction, slices and metrics.

mod mc;
pub mod metrics;
mod slice;
mod tables;

use std::str::FromStr;

use rayon::prelude::*;

use crate::field::{self, Channels, FieldParams};
use crate::math::{self, Vec3};

pub use mc::marching_cubes;
pub use slice::{probe, probe_csv, render_slice, write_ppm, write_slice_csv, Plane, ProbeSample, SliceImage};

/// Which scalar to sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    Phi,
    R,
    Theta,
}

impl FromStr for FieldKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "phi" => Ok(FieldKind::Phi),
            "r" => Ok(FieldKind::R),
            "theta" => Ok(FieldKind::Theta),
            _ => Err(format!("unknown field `{s}` (expected phi, r or theta)")),
        }
    }
}

impl FieldKind {
    fn pick(self, (r, t, phi): (f64, f64, f64)) -> f64 {
        match self {
            FieldKind::Phi => phi,
            FieldKind::R => r,
            FieldKind::Theta => t,
        }
    }
}

/// Values at the nodes of a regular grid over `[-1, 1]^3`, stored row-major
/// with `z` fastest: `values[(i·ny + j)·nz + k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarGrid {
    pub res: [usize; 3],
    pub origin: Vec3,
    pub spacing: Vec3,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    fn layout(res: [usize; 3]) -> (Vec3, Vec3) {
        let spacing = res.map(|n| 2.0 / (n.max(2) - 1) as f64);
        ([-1.0; 3], spacing)
    }

    /// Samples `f` at every node.
    pub fn from_fn(res: [usize; 3], f: impl Fn(Vec3) -> f64 + Sync) -> Self {
        let (origin, spacing) = Self::layout(res);
        let mut g = Self { res, origin, spacing, values: Vec::new() };
        let values: Vec<f64> = (0..res[0] * res[1] * res[2]).into_par_iter().map(|n| f(g.point_of(n))).collect();
        g.values = values;
        g
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.res[1] + j) * self.res[2] + k
    }

    #[inline]
    pub fn point(&self, i: usize, j: usize, k: usize) -> Vec3 {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    fn point_of(&self, n: usize) -> Vec3 {
        let k = n % self.res[2];
        let j = (n / self.res[2]) % self.res[1];
        let i = n / (self.res[1] * self.res[2]);
        self.point(i, j, k)
    }

    /// Trilinear interpolation of the node values.
    pub fn trilinear(&self, p: Vec3) -> f64 {
        let mut base = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let u = (p[a] - self.origin[a]) / self.spacing[a];
            let c = (u.floor().max(0.0) as usize).min(self.res[a] - 2);
            base[a] = c;
            t[a] = (p[a] - self.point(c, c, c)[a]) / self.spacing[a];
        }
        let mut v = 0.0;
        for corner in 0..8 {
            let o = [corner & 1, (corner >> 1) & 1, corner >> 2];
            let mut w = 1.0;
            for a in 0..3 {
                w *= if o[a] == 1 { t[a] } else { 1.0 - t[a] };
            }
            if w != 0.0 {
                v += w * self.values[self.index(base[0] + o[0], base[1] + o[1], base[2] + o[2])];
            }
        }
        v
    }
}

/// Samples a field of the network at every grid node, one `x`-slab at a time.
pub fn evaluate_grid(params: &FieldParams, res: [usize; 3], kind: FieldKind) -> ScalarGrid {
    let (origin, spacing) = ScalarGrid::layout(res);
    let mut g = ScalarGrid { res, origin, spacing, values: Vec::with_capacity(res[0] * res[1] * res[2]) };
    for i in 0..res[0] {
        let xs: Vec<Vec3> =
            (0..res[1]).flat_map(|j| (0..res[2]).map(move |k| (j, k))).map(|(j, k)| g.point(i, j, k)).collect();
        g.values.extend(field::evaluate_values(params, &xs).into_iter().map(|v| kind.pick(v)));
    }
    g
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualStats {
    pub mean: f64,
    pub max: f64,
    pub count: usize,
}

/// Mean and max of `| ‖g‖ − 1 |` over the given gradients.
pub fn residual_stats(grads: impl IntoIterator<Item = Vec3>) -> ResidualStats {
    let mut s = ResidualStats { mean: 0.0, max: 0.0, count: 0 };
    for g in grads {
        let d = (math::norm(g) - 1.0).abs();
        s.mean += d;
        s.max = s.max.max(d);
        s.count += 1;
    }
    if s.count > 0 {
        s.mean /= s.count as f64;
    }
    s
}

/// Eikonal residual of the metric field `r` over band points.
pub fn eikonal_residual_stats(params: &FieldParams, band: &[Vec3]) -> ResidualStats {
    residual_stats(field::evaluate_jets(params, band, Channels::Gradient).into_iter().map(|j| j.grad_r))
}
