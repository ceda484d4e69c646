//! The learnable metric–phase field.
//!
//! A sine-activated backbone feeds two heads: the metric head produces `z`,
//! mapped through a sharp softplus to the unsigned field `r >= 0`; the phase
//! head produces the unbounded phase `θ`. They combine into the signed field
//! `φ = r·tanh(βθ) + θ`.

mod network;
mod objective;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dual::Real;
use crate::math::Vec3;

pub use network::{Channels, CHUNK};
pub use objective::{loss_param_gradients, ObjectiveError};
pub(crate) use network::{forward, perturbed_heads, HeadOutputs, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: usize,
    /// Frequency multiplier applied inside every sine activation.
    pub omega0: f64,
    /// Slope `k` of the metric softplus `softplus(k·z)/k`.
    pub softplus_slope: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { hidden: 256, omega0: 30.0, softplus_slope: 100.0 }
    }
}

/// Offsets of each parameter block inside [`FieldParams::net`]. Matrices are
/// row-major `out × in`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub hidden: usize,
    pub w0: usize,
    pub b0: usize,
    pub w1: usize,
    pub b1: usize,
    pub wr1: usize,
    pub br1: usize,
    pub wr2: usize,
    pub br2: usize,
    pub wt1: usize,
    pub bt1: usize,
    pub wt2: usize,
    pub bt2: usize,
    pub len: usize,
}

impl Layout {
    pub fn new(hidden: usize) -> Self {
        let h = hidden;
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let w0 = take(3 * h);
        let b0 = take(h);
        let w1 = take(h * h);
        let b1 = take(h);
        let wr1 = take(h * h);
        let br1 = take(h);
        let wr2 = take(h);
        let br2 = take(1);
        let wt1 = take(h * h);
        let bt1 = take(h);
        let wt2 = take(h);
        let bt2 = take(1);
        Self { hidden, w0, b0, w1, b1, wr1, br1, wr2, br2, wt1, bt1, wt2, bt2, len: at }
    }

    /// Human-readable name of the parameter at flat index `i`.
    pub fn describe(&self, i: usize) -> String {
        let h = self.hidden;
        let blocks = [
            ("backbone.0.weight", self.w0, 3),
            ("backbone.0.bias", self.b0, 0),
            ("backbone.1.weight", self.w1, h),
            ("backbone.1.bias", self.b1, 0),
            ("metric.0.weight", self.wr1, h),
            ("metric.0.bias", self.br1, 0),
            ("metric.1.weight", self.wr2, 0),
            ("metric.1.bias", self.br2, 0),
            ("phase.0.weight", self.wt1, h),
            ("phase.0.bias", self.bt1, 0),
            ("phase.1.weight", self.wt2, 0),
            ("phase.1.bias", self.bt2, 0),
        ];
        for (k, &(name, off, cols)) in blocks.iter().enumerate() {
            let end = blocks.get(k + 1).map_or(self.len, |b| b.1);
            if (off..end).contains(&i) {
                let j = i - off;
                return if cols > 0 { format!("{name}[{}][{}]", j / cols, j % cols) } else { format!("{name}[{j}]") };
            }
        }
        format!("param[{i}]")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldParams {
    pub arch: Architecture,
    /// Network weights laid out as described by [`Layout`].
    pub net: Vec<f64>,
    /// Phase sharpness; kept positive by the optimizer.
    pub beta: f64,
}

impl FieldParams {
    pub fn layout(&self) -> Layout {
        Layout::new(self.arch.hidden)
    }

    pub fn len(&self) -> usize {
        self.net.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitOptions {
    pub hidden: usize,
    pub omega0: f64,
    pub softplus_slope: f64,
    pub beta_init: f64,
    pub phase_bias_init: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        let a = Architecture::default();
        Self { hidden: a.hidden, omega0: a.omega0, softplus_slope: a.softplus_slope, beta_init: 50.0, phase_bias_init: 0.0 }
    }
}

/// Sine-network initialization. The first layer draws from `U(-1/3, 1/3)`;
/// later layers from `U(-√(6/n)/ω₀, √(6/n)/ω₀)` so that the effective
/// pre-activation weights `ω₀·W` are `U(-√(6/n), √(6/n))`. Biases draw from
/// `U(-1/√fan_in, 1/√fan_in)`, except the phase output bias.
pub fn init_params(seed: u64, opts: &InitOptions) -> FieldParams {
    let h = opts.hidden;
    let layout = Layout::new(h);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = vec![0.0; layout.len];
    let mut fill = |range: std::ops::Range<usize>, bound: f64, net: &mut Vec<f64>| {
        let dist = Uniform::new_inclusive(-bound, bound);
        for v in &mut net[range] {
            *v = dist.sample(&mut rng);
        }
    };
    let hidden_w = (6.0 / h as f64).sqrt() / opts.omega0;
    let hidden_b = 1.0 / (h as f64).sqrt();
    fill(layout.w0..layout.b0, 1.0 / 3.0, &mut net);
    fill(layout.b0..layout.w1, 1.0 / 3f64.sqrt(), &mut net);
    fill(layout.w1..layout.b1, hidden_w, &mut net);
    fill(layout.b1..layout.wr1, hidden_b, &mut net);
    fill(layout.wr1..layout.br1, hidden_w, &mut net);
    fill(layout.br1..layout.wr2, hidden_b, &mut net);
    fill(layout.wr2..layout.br2, hidden_w, &mut net);
    fill(layout.br2..layout.wt1, hidden_b, &mut net);
    fill(layout.wt1..layout.bt1, hidden_w, &mut net);
    fill(layout.bt1..layout.wt2, hidden_b, &mut net);
    fill(layout.wt2..layout.bt2, hidden_w, &mut net);
    net[layout.bt2] = opts.phase_bias_init;
    FieldParams {
        arch: Architecture { hidden: h, omega0: opts.omega0, softplus_slope: opts.softplus_slope },
        net,
        beta: opts.beta_init,
    }
}

/// One entry per parameter, shaped like [`FieldParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub net: Vec<f64>,
    pub beta: f64,
}

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Self { net: vec![0.0; len], beta: 0.0 }
    }

    pub fn is_finite(&self) -> bool {
        self.beta.is_finite() && self.net.iter().all(|g| g.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.net.iter().fold(self.beta.abs(), |m, g| m.max(g.abs()))
    }
}

/// `P = tanh(βθ)` and `φ = r·P + θ`.
pub fn compose(r: f64, theta: f64, beta: f64) -> (f64, f64) {
    let p = (beta * theta).tanh();
    (p, r * p + theta)
}

/// `∂φ/∂θ = 1 + r·β·sech²(βθ)`; never below 1 for `r >= 0`.
pub fn dphi_dtheta(r: f64, theta: f64, beta: f64) -> f64 {
    let p = (beta * theta).tanh();
    1.0 + r * beta * (1.0 - p * p)
}

/// Field values and spatial derivatives at one query point.
///
/// `lap_*` entries are only meaningful when the jet was evaluated with
/// [`Channels::Laplacian`]; otherwise they are zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet<T> {
    pub r: T,
    pub grad_r: [T; 3],
    pub lap_r: T,
    pub theta: T,
    pub grad_theta: [T; 3],
    pub lap_theta: T,
    pub p: T,
    pub phi: T,
    pub grad_phi: [T; 3],
    pub lap_phi: T,
}

pub type FieldJet = Jet<f64>;

impl<T: Real> Jet<T> {
    /// Assembles the composite field from the raw head outputs. `z` and `t`
    /// hold (value, ∂x, ∂y, ∂z, Laplacian) of the metric and phase heads.
    pub fn from_heads(z: [T; 5], t: [T; 5], beta: T, k: f64) -> Self {
        let r = z[0].softplus(k);
        let sig = z[0].sigmoid(k);
        let gz = [z[1], z[2], z[3]];
        let gz2 = gz[0] * gz[0] + gz[1] * gz[1] + gz[2] * gz[2];
        let grad_r = [sig * gz[0], sig * gz[1], sig * gz[2]];
        let lap_r = sig * z[4] + (sig * (T::cst(1.0) - sig)).scale(k) * gz2;

        let theta = t[0];
        let grad_theta = [t[1], t[2], t[3]];
        let gt2 = grad_theta[0] * grad_theta[0] + grad_theta[1] * grad_theta[1] + grad_theta[2] * grad_theta[2];
        let p = (beta * theta).tanh();
        let sech2 = T::cst(1.0) - p * p;
        let gate = T::cst(1.0) + r * beta * sech2;
        let grad_p = [beta * sech2 * t[1], beta * sech2 * t[2], beta * sech2 * t[3]];
        let lap_p = beta * sech2 * t[4] - (beta * beta * p * sech2 * gt2).scale(2.0);

        let phi = r * p + theta;
        let grad_phi = [
            p * grad_r[0] + gate * grad_theta[0],
            p * grad_r[1] + gate * grad_theta[1],
            p * grad_r[2] + gate * grad_theta[2],
        ];
        let gr_gp = grad_r[0] * grad_p[0] + grad_r[1] * grad_p[1] + grad_r[2] * grad_p[2];
        let lap_phi = p * lap_r + gr_gp.scale(2.0) + r * lap_p + t[4];
        Self { r, grad_r, lap_r, theta, grad_theta, lap_theta: t[4], p, phi, grad_phi, lap_phi }
    }
}

pub(crate) fn head_columns(out: &HeadOutputs, p: usize) -> ([f64; 5], [f64; 5]) {
    let mut z = [0.0; 5];
    let mut t = [0.0; 5];
    for c in 0..out.channels.count() {
        z[c] = out.z[c * out.n + p];
        t[c] = out.t[c * out.n + p];
    }
    (z, t)
}

/// Jets at many points. Evaluation is chunked and parallel; the result is
/// independent of the thread count.
pub fn evaluate_jets(params: &FieldParams, xs: &[Vec3], channels: Channels) -> Vec<FieldJet> {
    xs.par_chunks(CHUNK)
        .flat_map_iter(|chunk| {
            let out = network::heads(params, chunk, channels);
            (0..chunk.len()).map(move |p| {
                let (z, t) = head_columns(&out, p);
                FieldJet::from_heads(z, t, params.beta, params.arch.softplus_slope)
            })
        })
        .collect()
}

/// Full jet (values, gradients and Laplacians) at a single point.
pub fn evaluate_jet(params: &FieldParams, x: Vec3) -> FieldJet {
    evaluate_jets(params, &[x], Channels::Laplacian)[0]
}

/// Value-only evaluation `(r, θ, φ)`; the fast path for dense grids.
pub fn evaluate_values(params: &FieldParams, xs: &[Vec3]) -> Vec<(f64, f64, f64)> {
    evaluate_jets(params, xs, Channels::Value).into_iter().map(|j| (j.r, j.theta, j.phi)).collect()
}
