//! Total loss and its gradient with respect to every parameter.
//!
//! Two passes over fixed-size chunks: the forward pass records tapes and
//! yields jets, from which the batch-level terms (and band membership) are
//! computed; the backward pass seeds each point's head channels with the
//! exact per-point adjoint of the weighted objective and back-propagates.
//! Per-chunk gradients are summed in chunk order, so the result does not
//! depend on the number of threads.

use rayon::prelude::*;
use thiserror::Error;

use crate::dual::Dual;
use crate::field::network::{backward, forward, Channels, HeadOutputs, Tape, CHUNK};
use crate::field::{head_columns, FieldJet, FieldParams, Gradients, Jet};
use crate::losses::{self, JetBatch, LossBreakdown, LossError, LossWeights, Term};
use crate::math::Vec3;
use crate::spatial::SampleBatch;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("sample batch is empty")]
    EmptyBatch,
    #[error("non-finite gradient from loss term `{term}`")]
    NonFiniteGradient { term: &'static str },
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Set {
    Surface,
    Near,
    Far,
    Ambient,
}

struct Chunk<'a> {
    set: Set,
    offset: usize,
    xs: &'a [Vec3],
    channels: Channels,
}

type D = Dual<11>;

/// Per-term scale factors turning kernel values into contributions to the
/// total (weight divided by the averaging count).
struct Coefficients {
    c: [f64; 8],
    delta: f64,
    alpha_align: f64,
    alpha_far: f64,
    eps: f64,
}

fn point_adjoint(
    set: Set,
    z: [f64; 5],
    t: [f64; 5],
    beta: f64,
    k: f64,
    normal: Option<Vec3>,
    co: &Coefficients,
) -> Result<[f64; 11], ObjectiveError> {
    let zd: [D; 5] = std::array::from_fn(|i| D::seed(z[i], i));
    let td: [D; 5] = std::array::from_fn(|i| D::seed(t[i], 5 + i));
    let j = Jet::from_heads(zd, td, D::seed(beta, 10), k);
    let mut adj = [0.0; 11];
    let mut add = |term: Term, v: D| -> Result<(), ObjectiveError> {
        let c = co.c[term.index()];
        if c == 0.0 {
            return Ok(());
        }
        if !v.is_finite() {
            return Err(ObjectiveError::NonFiniteGradient { term: term.name() });
        }
        for (a, d) in adj.iter_mut().zip(v.d) {
            *a += c * d;
        }
        Ok(())
    };
    match set {
        Set::Surface => {
            add(Term::Zero, losses::zero_kernel(&j))?;
            let (a, b) = losses::eik_phi_kernels(&j);
            add(Term::EikPhi, a)?;
            add(Term::EikPhi, b)?;
            if let Some(n) = normal {
                add(Term::Normal, losses::normal_kernel(&j, n))?;
            }
        }
        Set::Near => {
            add(Term::Align, losses::align_kernel(&j, co.alpha_align, co.eps))?;
            if losses::in_band(j.r.v, co.delta) {
                add(Term::EikR, losses::eik_r_kernel(&j))?;
            }
        }
        Set::Far => {
            add(Term::Phase, losses::phase_kernel(&j))?;
            add(Term::Far, losses::far_kernel(&j, co.alpha_far))?;
        }
        Set::Ambient => add(Term::Lap, losses::lap_kernel(&j))?,
    }
    Ok(adj)
}

fn per_mean(weight: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        weight / n as f64
    }
}

/// Loss breakdown at `iteration` and the gradient of its total.
pub fn loss_param_gradients(
    params: &FieldParams,
    batch: &SampleBatch,
    weights: &LossWeights,
    iteration: usize,
) -> Result<(LossBreakdown, Gradients), ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut chunks = Vec::new();
    for (set, xs, channels) in [
        (Set::Surface, &batch.surface, Channels::Gradient),
        (Set::Near, &batch.near, Channels::Gradient),
        (Set::Far, &batch.far, Channels::Value),
        (Set::Ambient, &batch.ambient, Channels::Laplacian),
    ] {
        for (i, c) in xs.chunks(CHUNK).enumerate() {
            chunks.push(Chunk { set, offset: i * CHUNK, xs: c, channels });
        }
    }

    let k = params.arch.softplus_slope;
    let tapes: Vec<(Tape, HeadOutputs)> = chunks.par_iter().map(|c| forward(params, c.xs, c.channels)).collect();

    let mut jets: [Vec<FieldJet>; 4] = Default::default();
    for (c, (_, out)) in chunks.iter().zip(&tapes) {
        let dst = &mut jets[c.set as usize];
        for p in 0..out.n {
            let (z, t) = head_columns(out, p);
            dst.push(FieldJet::from_heads(z, t, params.beta, k));
        }
    }
    let [surface, near, far, ambient] = &jets;
    let jb = JetBatch {
        surface,
        surface_normals: batch.surface_normals.as_deref(),
        near,
        far,
        ambient,
        delta: batch.delta,
    };
    let breakdown = losses::total_loss(&jb, weights, iteration)?;

    let w = breakdown.weights;
    let band = near.iter().filter(|j| losses::in_band(j.r, batch.delta)).count();
    let mut c = [0.0; 8];
    c[Term::Zero.index()] = w[Term::Zero.index()];
    c[Term::Align.index()] = per_mean(w[Term::Align.index()], near.len());
    c[Term::EikR.index()] = per_mean(w[Term::EikR.index()], band);
    c[Term::EikPhi.index()] = per_mean(w[Term::EikPhi.index()], surface.len());
    c[Term::Lap.index()] = per_mean(w[Term::Lap.index()], ambient.len());
    c[Term::Phase.index()] = per_mean(w[Term::Phase.index()], far.len());
    c[Term::Far.index()] = per_mean(w[Term::Far.index()], far.len());
    if batch.surface_normals.is_some() {
        c[Term::Normal.index()] = per_mean(w[Term::Normal.index()], surface.len());
    }
    let co = Coefficients { c, delta: batch.delta, alpha_align: weights.alpha_align, alpha_far: weights.alpha_far, eps: weights.eps };

    let n_net = params.net.len();
    let parts: Vec<Result<(Vec<f64>, f64), ObjectiveError>> = chunks
        .par_iter()
        .zip(tapes.par_iter())
        .map(|(chunk, (tape, out))| {
            let count = chunk.channels.count();
            let n = out.n;
            let mut zbar = vec![0.0; count * n];
            let mut tbar = vec![0.0; count * n];
            let mut beta_bar = 0.0;
            for p in 0..n {
                let (z, t) = head_columns(out, p);
                let normal = match chunk.set {
                    Set::Surface => batch.surface_normals.as_ref().map(|ns| ns[chunk.offset + p]),
                    _ => None,
                };
                let adj = point_adjoint(chunk.set, z, t, params.beta, k, normal, &co)?;
                for ch in 0..count {
                    zbar[ch * n + p] = adj[ch];
                    tbar[ch * n + p] = adj[5 + ch];
                }
                beta_bar += adj[10];
            }
            let mut g = vec![0.0; n_net];
            backward(params, tape, &zbar, &tbar, &mut g);
            Ok((g, beta_bar))
        })
        .collect();

    let mut grads = Gradients::zeros(n_net);
    for part in parts {
        let (g, b) = part?;
        for (a, v) in grads.net.iter_mut().zip(&g) {
            *a += v;
        }
        grads.beta += b;
    }
    if !grads.is_finite() {
        return Err(ObjectiveError::NonFiniteGradient { term: "network" });
    }
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{init_params, InitOptions};

    fn tiny() -> FieldParams {
        init_params(2, &InitOptions { hidden: 10, ..Default::default() })
    }

    fn batch() -> SampleBatch {
        let pts = |s: f64, n: usize| (0..n).map(|i| [(i as f64 * s).sin() * 0.7, (i as f64 * 1.3 * s).cos() * 0.6, (i as f64 * 0.7).sin() * 0.5]).collect::<Vec<_>>();
        let surface = pts(0.9, 5);
        let normals = surface.iter().map(|p: &Vec3| {
            let l = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            [p[0] / l, p[1] / l, p[2] / l]
        });
        SampleBatch {
            surface_normals: Some(normals.collect()),
            surface,
            near: pts(0.4, 4),
            far: pts(0.2, 3),
            ambient: pts(0.31, 3),
            delta: 0.05,
        }
    }

    fn total(p: &FieldParams, b: &SampleBatch, w: &LossWeights, it: usize) -> f64 {
        loss_param_gradients(p, b, w, it).unwrap().0.total
    }

    #[test]
    fn zero_weights_give_zero_gradients() {
        let mut w = LossWeights::default();
        for t in Term::ALL {
            w.set(t, 0.0);
        }
        let (l, g) = loss_param_gradients(&tiny(), &batch(), &w, 5000).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(g.net.iter().all(|v| *v == 0.0) && g.beta == 0.0);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let b = SampleBatch { delta: 0.05, ..Default::default() };
        assert_eq!(loss_param_gradients(&tiny(), &b, &LossWeights::default(), 0).unwrap_err(), ObjectiveError::EmptyBatch);
    }

    #[test]
    fn loss_matches_jet_evaluation() {
        let p = tiny();
        let b = batch();
        let w = LossWeights::default();
        let (l, _) = loss_param_gradients(&p, &b, &w, 3000).unwrap();
        let ev = |xs: &[Vec3], c| crate::field::evaluate_jets(&p, xs, c);
        let (s, n, f, a) = (ev(&b.surface, Channels::Gradient), ev(&b.near, Channels::Gradient), ev(&b.far, Channels::Value), ev(&b.ambient, Channels::Laplacian));
        let jb = JetBatch { surface: &s, surface_normals: b.surface_normals.as_deref(), near: &n, far: &f, ambient: &a, delta: b.delta };
        assert_eq!(losses::total_loss(&jb, &w, 3000).unwrap(), l);
    }

    #[test]
    fn gradients_match_finite_differences_on_a_small_network() {
        let p0 = tiny();
        let b = batch();
        // α values lowered so every term has a visible slope at this scale.
        let w = LossWeights { alpha_far: 3.0, alpha_align: 2.0, ..Default::default() };
        let (_, g) = loss_param_gradients(&p0, &b, &w, 3000).unwrap();
        let l = p0.layout();
        for i in (0..l.len).step_by(3).chain([l.bt2, l.br2]) {
            let h = 1e-6 * p0.net[i].abs().max(1.0);
            let mut a = p0.clone();
            let mut m = p0.clone();
            a.net[i] += h;
            m.net[i] -= h;
            let fd = (total(&a, &b, &w, 3000) - total(&m, &b, &w, 3000)) / (2.0 * h);
            let rel = (g.net[i] - fd).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-4, "{}: analytic {} vs fd {fd}", l.describe(i), g.net[i]);
        }
        let h = 1e-6 * p0.beta;
        let mut a = p0.clone();
        let mut m = p0.clone();
        a.beta += h;
        m.beta -= h;
        let fd = (total(&a, &b, &w, 3000) - total(&m, &b, &w, 3000)) / (2.0 * h);
        assert!((g.beta - fd).abs() / fd.abs().max(1e-6) < 1e-4, "beta: {} vs {fd}", g.beta);
    }

    #[test]
    fn chunking_does_not_depend_on_threads() {
        let p = init_params(9, &InitOptions { hidden: 12, ..Default::default() });
        let mut b = batch();
        b.near = (0..300).map(|i| [(i as f64 * 0.37).sin() * 0.8, (i as f64 * 0.11).cos() * 0.8, (i as f64 * 0.05).sin() * 0.8]).collect();
        let w = LossWeights::default();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = one.install(|| loss_param_gradients(&p, &b, &w, 3000).unwrap());
        let c = three.install(|| loss_param_gradients(&p, &b, &w, 3000).unwrap());
        assert_eq!(a, c);
    }
}
