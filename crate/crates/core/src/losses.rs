//! Loss terms over evaluated jets, their weights, and the weighted total.
//!
//! Each term has a per-point kernel generic over [`Real`] so the same code
//! yields loss values (with `f64`) and exact per-point adjoints (with
//! [`crate::dual::Dual`]) for the parameter-gradient pass.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dual::Real;
use crate::field::{FieldJet, Jet};
use crate::math::Vec3;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("loss term `{term}` is not finite ({value})")]
    NonFiniteLoss { term: &'static str, value: f64 },
    #[error("normal weight is {weight} but the surface batch carries no normals")]
    MissingNormals { weight: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Zero,
    Align,
    EikR,
    EikPhi,
    Lap,
    Phase,
    Far,
    Normal,
}

impl Term {
    pub const ALL: [Term; 8] =
        [Term::Zero, Term::Align, Term::EikR, Term::EikPhi, Term::Lap, Term::Phase, Term::Far, Term::Normal];

    pub fn name(self) -> &'static str {
        match self {
            Term::Zero => "zero",
            Term::Align => "align",
            Term::EikR => "eik_r",
            Term::EikPhi => "eik_phi",
            Term::Lap => "lap",
            Term::Phase => "phase",
            Term::Far => "far",
            Term::Normal => "normal",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the zero-level term; 1 in the reference objective.
    pub zero: f64,
    pub align: f64,
    pub eik_r: f64,
    pub eik_phi: f64,
    pub lap: f64,
    pub phase: f64,
    pub far: f64,
    /// Only applied when surface normals are available.
    pub normal: f64,
    pub alpha_far: f64,
    pub alpha_align: f64,
    /// Regularizer in `g / (‖g‖ + ε)`.
    pub eps: f64,
    /// The alignment term is switched off before this iteration.
    pub align_start_iter: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            zero: 1.0,
            align: 0.7,
            eik_r: 0.007,
            eik_phi: 0.007,
            lap: 0.0004,
            phase: 0.002,
            far: 0.1,
            normal: 0.15,
            alpha_far: 100.0,
            alpha_align: 100.0,
            eps: 1e-8,
            align_start_iter: 3000,
        }
    }
}

impl LossWeights {
    pub fn get(&self, t: Term) -> f64 {
        match t {
            Term::Zero => self.zero,
            Term::Align => self.align,
            Term::EikR => self.eik_r,
            Term::EikPhi => self.eik_phi,
            Term::Lap => self.lap,
            Term::Phase => self.phase,
            Term::Far => self.far,
            Term::Normal => self.normal,
        }
    }

    pub fn set(&mut self, t: Term, v: f64) {
        match t {
            Term::Zero => self.zero = v,
            Term::Align => self.align = v,
            Term::EikR => self.eik_r = v,
            Term::EikPhi => self.eik_phi = v,
            Term::Lap => self.lap = v,
            Term::Phase => self.phase = v,
            Term::Far => self.far = v,
            Term::Normal => self.normal = v,
        }
    }

    /// Weights in effect at `iteration`, in [`Term::ALL`] order.
    pub fn applied(&self, iteration: usize) -> [f64; 8] {
        Term::ALL.map(|t| if t == Term::Align && iteration < self.align_start_iter { 0.0 } else { self.get(t) })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub iteration: usize,
    /// Unweighted terms in [`Term::ALL`] order.
    pub raw: [f64; 8],
    /// Weights actually applied (after the align gate).
    pub weights: [f64; 8],
    pub weighted: [f64; 8],
    pub total: f64,
    /// No near-band point satisfied `0 < r < δ`.
    pub empty_band: bool,
    pub empty_ambient: bool,
}

impl LossBreakdown {
    pub fn raw(&self, t: Term) -> f64 {
        self.raw[t.index()]
    }

    pub fn weighted(&self, t: Term) -> f64 {
        self.weighted[t.index()]
    }

    pub fn csv_header() -> String {
        let mut s = String::from("iteration");
        for t in Term::ALL {
            write!(s, ",{}", t.name()).unwrap();
        }
        for t in Term::ALL {
            write!(s, ",w_{}", t.name()).unwrap();
        }
        s.push_str(",total");
        s
    }

    pub fn csv_row(&self) -> String {
        let mut s = self.iteration.to_string();
        for v in self.raw.iter().chain(&self.weighted) {
            write!(s, ",{v:.10e}").unwrap();
        }
        write!(s, ",{:.10e}", self.total).unwrap();
        s
    }
}

fn norm<T: Real>(g: [T; 3]) -> T {
    (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt()
}

fn dot<T: Real>(a: [T; 3], b: [T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

// Per-point kernels.

pub fn zero_kernel<T: Real>(j: &Jet<T>) -> T {
    j.r + j.phi.abs()
}

pub fn align_kernel<T: Real>(j: &Jet<T>, alpha: f64, eps: f64) -> T {
    let nr = norm(j.grad_r) + T::cst(eps);
    let nt = norm(j.grad_theta) + T::cst(eps);
    let cosine = dot(j.grad_r, j.grad_theta) / (nr * nt);
    (-j.r).scale(alpha).exp() * (T::cst(1.0) - cosine.abs())
}

pub fn eik_r_kernel<T: Real>(j: &Jet<T>) -> T {
    (norm(j.grad_r) - T::cst(1.0)).abs()
}

/// `(|‖∇φ‖ − 1|, |‖∇θ‖ − 1|)`.
pub fn eik_phi_kernels<T: Real>(j: &Jet<T>) -> (T, T) {
    ((norm(j.grad_phi) - T::cst(1.0)).abs(), (norm(j.grad_theta) - T::cst(1.0)).abs())
}

pub fn lap_kernel<T: Real>(j: &Jet<T>) -> T {
    j.lap_phi.abs()
}

pub fn phase_kernel<T: Real>(j: &Jet<T>) -> T {
    let d = T::cst(1.0) - j.p.abs();
    d * d
}

pub fn far_kernel<T: Real>(j: &Jet<T>, alpha: f64) -> T {
    (-(j.r + j.phi.abs())).scale(alpha).exp()
}

/// `1 − |ĝ_φ · n|`; a vanishing gradient counts as fully misaligned.
pub fn normal_kernel<T: Real>(j: &Jet<T>, n: Vec3) -> T {
    let g = norm(j.grad_phi);
    if g.val() == 0.0 {
        return T::cst(1.0);
    }
    let c = dot(j.grad_phi, n.map(T::cst)) / g;
    T::cst(1.0) - c.abs()
}

/// Whether a near-band jet counts toward the metric Eikonal term.
pub fn in_band(r: f64, delta: f64) -> bool {
    r > 0.0 && r < delta
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let mut n = 0usize;
    let mut s = 0.0;
    for v in it {
        s += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

// Batch terms.

/// Sum (not mean) over the surface batch.
pub fn loss_zero(surface: &[FieldJet]) -> f64 {
    surface.iter().map(zero_kernel).sum()
}

pub fn loss_align(near: &[FieldJet], alpha: f64, eps: f64) -> f64 {
    mean(near.iter().map(|j| align_kernel(j, alpha, eps)))
}

/// Mean over near jets with `0 < r < δ`; the flag is set when none qualify.
pub fn loss_eikonal_r(near: &[FieldJet], delta: f64) -> (f64, bool) {
    let mut count = 0;
    let v = mean(near.iter().filter(|j| in_band(j.r, delta)).inspect(|_| count += 1).map(eik_r_kernel));
    (v, count == 0)
}

pub fn loss_eikonal_phi(surface: &[FieldJet]) -> f64 {
    mean(surface.iter().map(|j| eik_phi_kernels(j).0)) + mean(surface.iter().map(|j| eik_phi_kernels(j).1))
}

pub fn loss_laplacian(ambient: &[FieldJet]) -> (f64, bool) {
    (mean(ambient.iter().map(lap_kernel)), ambient.is_empty())
}

pub fn loss_phase_saturation(far: &[FieldJet]) -> f64 {
    mean(far.iter().map(phase_kernel))
}

pub fn loss_far_field(far: &[FieldJet], alpha: f64) -> f64 {
    mean(far.iter().map(|j| far_kernel(j, alpha)))
}

pub fn loss_normal(surface: &[FieldJet], normals: &[Vec3]) -> f64 {
    mean(surface.iter().zip(normals).map(|(j, n)| normal_kernel(j, *n)))
}

/// Jets of one optimization step, grouped by sample set.
#[derive(Clone, Copy, Debug)]
pub struct JetBatch<'a> {
    pub surface: &'a [FieldJet],
    pub surface_normals: Option<&'a [Vec3]>,
    pub near: &'a [FieldJet],
    pub far: &'a [FieldJet],
    pub ambient: &'a [FieldJet],
    pub delta: f64,
}

/// Weighted objective. Terms whose weight is zero are still evaluated and
/// reported, except the normal term when no normals exist.
pub fn total_loss(b: &JetBatch, w: &LossWeights, iteration: usize) -> Result<LossBreakdown, LossError> {
    let weights = w.applied(iteration);
    if weights[Term::Normal.index()] > 0.0 && b.surface_normals.is_none() {
        return Err(LossError::MissingNormals { weight: w.normal });
    }
    let (eik_r, empty_band) = loss_eikonal_r(b.near, b.delta);
    let (lap, empty_ambient) = loss_laplacian(b.ambient);
    let raw = [
        loss_zero(b.surface),
        loss_align(b.near, w.alpha_align, w.eps),
        eik_r,
        loss_eikonal_phi(b.surface),
        lap,
        loss_phase_saturation(b.far),
        loss_far_field(b.far, w.alpha_far),
        b.surface_normals.map_or(0.0, |n| loss_normal(b.surface, n)),
    ];
    for t in Term::ALL {
        let v = raw[t.index()];
        if !v.is_finite() {
            return Err(LossError::NonFiniteLoss { term: t.name(), value: v });
        }
    }
    let weighted: [f64; 8] = std::array::from_fn(|i| weights[i] * raw[i]);
    let total = weighted.iter().sum();
    Ok(LossBreakdown { iteration, raw, weights, weighted, total, empty_band, empty_ambient })
}
