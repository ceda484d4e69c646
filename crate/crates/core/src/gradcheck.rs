//! Finite-difference verification of every analytic derivative: spatial
//! gradients and Laplacians of the fields, and the parameter gradient of the
//! full training objective.
//!
//! The parameter check perturbs each weight in turn and recomputes only the
//! activations downstream of it. Band membership for the metric Eikonal term
//! is frozen at the unperturbed parameters, so a point crossing the band edge
//! cannot put a jump into a difference quotient.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::field::{
    self, forward, head_columns, init_params, perturbed_heads, Channels, FieldJet, FieldParams, HeadOutputs,
    InitOptions, ObjectiveError, Tape,
};
use crate::fixtures;
use crate::losses::{self, LossWeights, Term};
use crate::math::{self, Vec3};
use crate::spatial::{BatchSizes, NearestIndex, SampleBatch, SpatialError};

pub const SPATIAL_STEP: f64 = 1e-4;
pub const LAPLACIAN_STEP: f64 = 1e-3;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const LAPLACIAN_TOLERANCE: f64 = 1e-3;
pub const PARAMETER_TOLERANCE: f64 = 1e-3;
/// Denominator floor of every relative error.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub seed: u64,
    pub hidden: usize,
    /// Points per sample set; the batch holds four sets.
    pub per_set: usize,
    pub probes: usize,
    pub iteration: usize,
    /// Fault injection: this parameter's analytic gradient is perturbed
    /// before comparison.
    pub corrupt: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { seed: 0, hidden: 256, per_set: 16, probes: 100, iteration: 3000, corrupt: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub worst: f64,
    pub limit: f64,
    /// Where the worst error occurred.
    pub location: String,
    pub count: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst < self.limit
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<18} {} checked={:<7} worst_rel={:.3e} limit={:.0e} at {}",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.count,
            self.worst,
            self.limit,
            self.location
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    /// The failing check with the largest error ratio, if any.
    pub fn worst_failure(&self) -> Option<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed()).max_by(|a, b| (a.worst / a.limit).total_cmp(&(b.worst / b.limit)))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        write!(f, "overall {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

pub fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(ABS_FLOOR)
}

/// Keeps the largest error; ties go to the earliest index.
fn worst_of(errs: impl IntoIterator<Item = (f64, usize)>) -> (f64, usize) {
    errs.into_iter().fold((0.0, 0), |best, e| if e.0 > best.0 || e.0.is_nan() { e } else { best })
}

pub fn random_probes(n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| [0, 1, 2].map(|_| rng.gen_range(-0.9..0.9))).collect()
}

const FIELDS: [&str; 3] = ["r", "theta", "phi"];

fn pick(v: (f64, f64, f64), f: usize) -> f64 {
    [v.0, v.1, v.2][f]
}

/// Values at `x ± h·e_d` for every probe, ordered probe, axis, sign.
fn stencil_values(params: &FieldParams, probes: &[Vec3], h: f64) -> Vec<(f64, f64, f64)> {
    let mut pts = Vec::with_capacity(6 * probes.len());
    for x in probes {
        for d in 0..3 {
            for s in [1.0, -1.0] {
                let mut q = *x;
                q[d] += s * h;
                pts.push(q);
            }
        }
    }
    field::evaluate_values(params, &pts)
}

/// Central differences of `r`, `θ` and `φ` against the analytic gradients.
/// The error of a probe is `‖g − g_fd‖ / max(‖g_fd‖, floor)`.
pub fn spatial_gradient_check(params: &FieldParams, probes: &[Vec3]) -> CheckResult {
    let h = SPATIAL_STEP;
    let jets = field::evaluate_jets(params, probes, Channels::Gradient);
    let vals = stencil_values(params, probes, h);
    let mut errs = Vec::new();
    for (i, j) in jets.iter().enumerate() {
        for (f, g) in [j.grad_r, j.grad_theta, j.grad_phi].into_iter().enumerate() {
            let fd: Vec3 = [0, 1, 2].map(|d| {
                let base = 6 * i + 2 * d;
                (pick(vals[base], f) - pick(vals[base + 1], f)) / (2.0 * h)
            });
            let err = math::norm(math::sub(g, fd)) / math::norm(fd).max(ABS_FLOOR);
            errs.push((err, 3 * i + f));
        }
    }
    let (worst, at) = worst_of(errs);
    CheckResult {
        name: "spatial gradient",
        worst,
        limit: GRADIENT_TOLERANCE,
        location: format!("{} at probe {}", FIELDS[at % 3], at / 3),
        count: 3 * probes.len(),
    }
}

fn stencil_laplacian(params: &FieldParams, probes: &[Vec3], centre: &[(f64, f64, f64)], h: f64) -> Vec<f64> {
    let vals = stencil_values(params, probes, h);
    (0..probes.len())
        .map(|i| {
            let sum: f64 = vals[6 * i..6 * i + 6].iter().map(|v| v.2).sum();
            (sum - 6.0 * centre[i].2) / (h * h)
        })
        .collect()
}

/// Six-point stencil Laplacian of `φ` at step `h` against the analytic one.
///
/// The stencil's own `O(h²)` error is not small next to `Δφ` at probes where
/// `Δφ` happens to nearly vanish, so the error is taken over the whole probe
/// set, `‖Δ − Δ_fd‖ / ‖Δ_fd‖`. The second result compares every probe
/// individually against the Richardson extrapolation of the `h` and `h/2`
/// stencils, which removes the leading error term.
pub fn laplacian_checks(params: &FieldParams, probes: &[Vec3]) -> [CheckResult; 2] {
    let h = LAPLACIAN_STEP;
    let jets = field::evaluate_jets(params, probes, Channels::Laplacian);
    let centre = field::evaluate_values(params, probes);
    let coarse = stencil_laplacian(params, probes, &centre, h);
    let fine = stencil_laplacian(params, probes, &centre, h / 2.0);

    let (mut num, mut den) = (0.0, 0.0);
    for (j, fd) in jets.iter().zip(&coarse) {
        num += (j.lap_phi - fd).powi(2);
        den += fd * fd;
    }
    let per_probe = worst_of(jets.iter().zip(&coarse).enumerate().map(|(i, (j, fd))| (relative_error(j.lap_phi, *fd), i)));
    let aggregate = CheckResult {
        name: "laplacian",
        worst: num.sqrt() / den.sqrt().max(ABS_FLOOR),
        limit: LAPLACIAN_TOLERANCE,
        location: format!("phi over all probes (single probe worst {:.3e} at probe {})", per_probe.0, per_probe.1),
        count: probes.len(),
    };

    let (worst, at) = worst_of(
        jets.iter().zip(coarse.iter().zip(&fine)).enumerate().map(|(i, (j, (c, f)))| {
            (relative_error(j.lap_phi, (4.0 * f - c) / 3.0), i)
        }),
    );
    let extrapolated = CheckResult {
        name: "laplacian (extr.)",
        worst,
        limit: LAPLACIAN_TOLERANCE,
        location: format!("phi at probe {at}"),
        count: probes.len(),
    };
    [aggregate, extrapolated]
}

/// Objective evaluated from head outputs with frozen averaging counts and
/// band mask; equals the training loss at the unperturbed parameters.
struct FrozenObjective<'a> {
    batch: &'a SampleBatch,
    coef: [f64; 8],
    band: Vec<bool>,
    weights: LossWeights,
    k: f64,
}

impl<'a> FrozenObjective<'a> {
    fn new(params: &FieldParams, batch: &'a SampleBatch, outs: &[HeadOutputs; 4], w: &LossWeights, it: usize) -> Self {
        let k = params.arch.softplus_slope;
        let band: Vec<bool> = jets_of(&outs[1], params.beta, k).iter().map(|j| losses::in_band(j.r, batch.delta)).collect();
        let applied = w.applied(it);
        let per = |t: Term, n: usize| if n == 0 { 0.0 } else { applied[t.index()] / n as f64 };
        let mut coef = [0.0; 8];
        coef[Term::Zero.index()] = applied[Term::Zero.index()];
        coef[Term::Align.index()] = per(Term::Align, batch.near.len());
        coef[Term::EikR.index()] = per(Term::EikR, band.iter().filter(|b| **b).count());
        coef[Term::EikPhi.index()] = per(Term::EikPhi, batch.surface.len());
        coef[Term::Lap.index()] = per(Term::Lap, batch.ambient.len());
        coef[Term::Phase.index()] = per(Term::Phase, batch.far.len());
        coef[Term::Far.index()] = per(Term::Far, batch.far.len());
        if batch.surface_normals.is_some() {
            coef[Term::Normal.index()] = per(Term::Normal, batch.surface.len());
        }
        Self { batch, coef, band, weights: *w, k }
    }

    fn eval(&self, outs: &[HeadOutputs; 4], beta: f64) -> f64 {
        let c = |t: Term| self.coef[t.index()];
        let w = &self.weights;
        let mut sum = [0.0; 8];
        for (i, j) in jets_of(&outs[0], beta, self.k).iter().enumerate() {
            sum[Term::Zero.index()] += losses::zero_kernel(j);
            let (a, b) = losses::eik_phi_kernels(j);
            sum[Term::EikPhi.index()] += a + b;
            if let Some(ns) = &self.batch.surface_normals {
                sum[Term::Normal.index()] += losses::normal_kernel(j, ns[i]);
            }
        }
        for (j, &inside) in jets_of(&outs[1], beta, self.k).iter().zip(&self.band) {
            sum[Term::Align.index()] += losses::align_kernel(j, w.alpha_align, w.eps);
            if inside {
                sum[Term::EikR.index()] += losses::eik_r_kernel(j);
            }
        }
        for j in &jets_of(&outs[2], beta, self.k) {
            sum[Term::Phase.index()] += losses::phase_kernel(j);
            sum[Term::Far.index()] += losses::far_kernel(j, w.alpha_far);
        }
        for j in &jets_of(&outs[3], beta, self.k) {
            sum[Term::Lap.index()] += losses::lap_kernel(j);
        }
        Term::ALL.iter().map(|&t| c(t) * sum[t.index()]).sum()
    }
}

fn jets_of(out: &HeadOutputs, beta: f64, k: f64) -> Vec<FieldJet> {
    (0..out.n)
        .map(|p| {
            let (z, t) = head_columns(out, p);
            FieldJet::from_heads(z, t, beta, k)
        })
        .collect()
}

/// Perturbation used for parameter `w`.
pub fn param_step(w: f64) -> f64 {
    1e-5 * w.abs().max(1.0)
}

/// Central differences of the full objective with respect to every network
/// parameter and `β`.
pub fn parameter_check(
    params: &FieldParams,
    batch: &SampleBatch,
    weights: &LossWeights,
    iteration: usize,
    corrupt: Option<usize>,
) -> Result<CheckResult, GradCheckError> {
    let (_, mut grads) = field::loss_param_gradients(params, batch, weights, iteration)?;
    if let Some(i) = corrupt {
        grads.net[i] += 1e-2 * grads.net[i].abs().max(1.0);
    }
    let sets = [
        (&batch.surface, Channels::Gradient),
        (&batch.near, Channels::Gradient),
        (&batch.far, Channels::Value),
        (&batch.ambient, Channels::Laplacian),
    ];
    let recorded: Vec<(Tape, HeadOutputs)> = sets.iter().map(|(xs, ch)| forward(params, xs, *ch)).collect();
    let base: [HeadOutputs; 4] = std::array::from_fn(|s| clone_outputs(&recorded[s].1));
    let obj = FrozenObjective::new(params, batch, &base, weights, iteration);

    let n = params.net.len();
    let eval_at = |i: usize, d: f64| {
        let outs: [HeadOutputs; 4] =
            std::array::from_fn(|s| perturbed_heads(params, &recorded[s].0, &recorded[s].1, i, d));
        obj.eval(&outs, params.beta)
    };
    let errs: Vec<(f64, usize)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let h = param_step(params.net[i]);
            let fd = (eval_at(i, h) - eval_at(i, -h)) / (2.0 * h);
            (relative_error(grads.net[i], fd), i)
        })
        .collect();
    let hb = param_step(params.beta);
    let fd_beta = (obj.eval(&base, params.beta + hb) - obj.eval(&base, params.beta - hb)) / (2.0 * hb);
    let beta_err = relative_error(grads.beta, fd_beta);

    let (worst, at) = worst_of(errs.iter().copied().chain([(beta_err, n)]));
    let location = if at == n { "beta".to_string() } else { params.layout().describe(at) };
    Ok(CheckResult { name: "parameter gradient", worst, limit: PARAMETER_TOLERANCE, location, count: n + 1 })
}

fn clone_outputs(o: &HeadOutputs) -> HeadOutputs {
    HeadOutputs { n: o.n, channels: o.channels, z: o.z.clone(), t: o.t.clone() }
}

/// The batch the parameter check runs on: equal-sized sets drawn around a
/// sphere, with normals.
pub fn check_batch(per_set: usize, seed: u64) -> Result<SampleBatch, SpatialError> {
    let cloud = fixtures::sphere(2000, 0.5, seed);
    let idx = NearestIndex::from_cloud(&cloud)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = BatchSizes { surface: per_set, near: per_set, far: per_set, ambient: per_set };
    let delta = 0.05;
    SampleBatch::draw(&idx, cloud.normals.as_deref(), sizes, delta, delta / 2.0, &mut rng)
}

/// All three checks on freshly initialized parameters with default weights.
pub fn run(opts: &GradCheckOptions) -> Result<GradCheckReport, GradCheckError> {
    let params = init_params(opts.seed, &InitOptions { hidden: opts.hidden, ..Default::default() });
    let probes = random_probes(opts.probes, opts.seed);
    let batch = check_batch(opts.per_set, opts.seed)?;
    let [lap, lap_extrapolated] = laplacian_checks(&params, &probes);
    Ok(GradCheckReport {
        checks: vec![
            spatial_gradient_check(&params, &probes),
            lap,
            lap_extrapolated,
            parameter_check(&params, &batch, &LossWeights::default(), opts.iteration, opts.corrupt)?,
        ],
    })
}
