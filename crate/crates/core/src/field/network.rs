//! Batched forward-mode jets through the sine network and hand-written
//! reverse accumulation for parameter gradients.
//!
//! Activations for `n` points with `C` channels are stored as row-major
//! `hidden × (C·n)` matrices; column `c·n + p` holds channel `c` of point
//! `p`. Channel 0 is the value, 1..=3 the spatial gradient, 4 the Laplacian.
//! Every affine map is then one matrix product over all channels at once.

use crate::field::{FieldParams, Layout};
use crate::math::Vec3;

/// Points per work unit. Fixed so that results never depend on how work is
/// spread over threads.
pub const CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channels {
    /// Value only.
    Value,
    /// Value and spatial gradient.
    Gradient,
    /// Value, spatial gradient and Laplacian.
    Laplacian,
}

impl Channels {
    pub fn count(self) -> usize {
        match self {
            Channels::Value => 1,
            Channels::Gradient => 4,
            Channels::Laplacian => 5,
        }
    }
}

/// Head outputs, channel-major: `z[c·n + p]`.
pub(crate) struct HeadOutputs {
    pub n: usize,
    pub channels: Channels,
    pub z: Vec<f64>,
    pub t: Vec<f64>,
}

/// Forward intermediates kept for the backward pass.
pub(crate) struct Tape {
    n: usize,
    channels: Channels,
    xs: Vec<Vec3>,
    layers: [SineLayer; 4],
}

#[derive(Default)]
struct SineLayer {
    /// Pre-activation jet (already multiplied by ω₀).
    a: Vec<f64>,
    /// Output jet.
    h: Vec<f64>,
    sin: Vec<f64>,
    cos: Vec<f64>,
}

/// `C = alpha·op(A)·op(B) + beta·C` with row-major operands; `op` transposes
/// when the flag is set. `op(A)` is `m×k`, `op(B)` is `k×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe matrices that lie inside the slices, as
    // checked above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn sine_forward(a: Vec<f64>, hidden: usize, n: usize, channels: Channels) -> SineLayer {
    let cn = channels.count() * n;
    let mut h = vec![0.0; a.len()];
    let mut sin = vec![0.0; hidden * n];
    let mut cos = vec![0.0; hidden * n];
    for i in 0..hidden {
        sine_unit(
            &a[i * cn..(i + 1) * cn],
            &mut h[i * cn..(i + 1) * cn],
            &mut sin[i * n..(i + 1) * n],
            &mut cos[i * n..(i + 1) * n],
            channels,
        );
    }
    SineLayer { a, h, sin, cos }
}

/// Jet of `sin(a)` for one unit, given its pre-activation jet row.
fn sine_unit(ar: &[f64], hr: &mut [f64], sin: &mut [f64], cos: &mut [f64], channels: Channels) {
    let n = sin.len();
    for p in 0..n {
        let (s, c) = ar[p].sin_cos();
        sin[p] = s;
        cos[p] = c;
        hr[p] = s;
        if channels != Channels::Value {
            let (ax, ay, az) = (ar[n + p], ar[2 * n + p], ar[3 * n + p]);
            hr[n + p] = c * ax;
            hr[2 * n + p] = c * ay;
            hr[3 * n + p] = c * az;
            if channels == Channels::Laplacian {
                hr[4 * n + p] = c * ar[4 * n + p] - s * (ax * ax + ay * ay + az * az);
            }
        }
    }
}

/// Turns an output adjoint into a pre-activation adjoint, in place.
fn sine_backward(layer: &SineLayer, bar: &mut [f64], hidden: usize, n: usize, channels: Channels) {
    let cn = channels.count() * n;
    for i in 0..hidden {
        let ar = &layer.a[i * cn..(i + 1) * cn];
        let br = &mut bar[i * cn..(i + 1) * cn];
        for p in 0..n {
            let s = layer.sin[i * n + p];
            let c = layer.cos[i * n + p];
            let hv = br[p];
            if channels == Channels::Value {
                br[p] = hv * c;
                continue;
            }
            let d = [ar[n + p], ar[2 * n + p], ar[3 * n + p]];
            let hd = [br[n + p], br[2 * n + p], br[3 * n + p]];
            let mut val = hv * c - s * (hd[0] * d[0] + hd[1] * d[1] + hd[2] * d[2]);
            let mut dd = [hd[0] * c, hd[1] * c, hd[2] * c];
            if channels == Channels::Laplacian {
                let hl = br[4 * n + p];
                let sq = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                val += hl * (-s * ar[4 * n + p] - c * sq);
                for k in 0..3 {
                    dd[k] -= 2.0 * hl * s * d[k];
                }
                br[4 * n + p] = hl * c;
            }
            br[p] = val;
            br[n + p] = dd[0];
            br[2 * n + p] = dd[1];
            br[3 * n + p] = dd[2];
        }
    }
}

/// `ω₀·(W·U + b)`, with the bias entering value columns only.
fn linear(w: &[f64], b: &[f64], u: &[f64], omega: f64, hidden: usize, n: usize, channels: Channels) -> Vec<f64> {
    let cn = channels.count() * n;
    let mut a = vec![0.0; hidden * cn];
    gemm(hidden, hidden, cn, omega, w, false, u, false, 0.0, &mut a);
    for i in 0..hidden {
        let ob = omega * b[i];
        for v in &mut a[i * cn..i * cn + n] {
            *v += ob;
        }
    }
    a
}

fn first_layer(params: &FieldParams, l: &Layout, xs: &[Vec3], channels: Channels) -> Vec<f64> {
    let (h, n, w) = (l.hidden, xs.len(), params.arch.omega0);
    let cn = channels.count() * n;
    let mut a = vec![0.0; h * cn];
    for i in 0..h {
        let wi = &params.net[l.w0 + 3 * i..l.w0 + 3 * i + 3];
        let bi = params.net[l.b0 + i];
        let row = &mut a[i * cn..(i + 1) * cn];
        for (p, x) in xs.iter().enumerate() {
            row[p] = w * (wi[0] * x[0] + wi[1] * x[1] + wi[2] * x[2] + bi);
        }
        if channels != Channels::Value {
            for d in 0..3 {
                row[(d + 1) * n..(d + 2) * n].fill(w * wi[d]);
            }
        }
    }
    a
}

fn output_row(w: &[f64], bias: f64, h: &[f64], hidden: usize, n: usize, channels: Channels) -> Vec<f64> {
    let cn = channels.count() * n;
    let mut out = vec![0.0; cn];
    gemm(1, hidden, cn, 1.0, w, false, h, false, 0.0, &mut out);
    for v in &mut out[..n] {
        *v += bias;
    }
    out
}

pub(crate) fn forward(params: &FieldParams, xs: &[Vec3], channels: Channels) -> (Tape, HeadOutputs) {
    let l = params.layout();
    let (h, n, w) = (l.hidden, xs.len(), params.arch.omega0);
    let net = &params.net;
    let l0 = sine_forward(first_layer(params, &l, xs, channels), h, n, channels);
    let l1 = sine_forward(linear(&net[l.w1..l.b1], &net[l.b1..l.wr1], &l0.h, w, h, n, channels), h, n, channels);
    let lr = sine_forward(linear(&net[l.wr1..l.br1], &net[l.br1..l.wr2], &l1.h, w, h, n, channels), h, n, channels);
    let lt = sine_forward(linear(&net[l.wt1..l.bt1], &net[l.bt1..l.wt2], &l1.h, w, h, n, channels), h, n, channels);
    let z = output_row(&net[l.wr2..l.br2], net[l.br2], &lr.h, h, n, channels);
    let t = output_row(&net[l.wt2..l.bt2], net[l.bt2], &lt.h, h, n, channels);
    (
        Tape { n, channels, xs: xs.to_vec(), layers: [l0, l1, lr, lt] },
        HeadOutputs { n, channels, z, t },
    )
}

/// Head outputs without keeping a tape.
pub(crate) fn heads(params: &FieldParams, xs: &[Vec3], channels: Channels) -> HeadOutputs {
    forward(params, xs, channels).1
}

/// Accumulates `∂L/∂net` into `grad` given head adjoints laid out like
/// [`HeadOutputs`].
pub(crate) fn backward(params: &FieldParams, tape: &Tape, zbar: &[f64], tbar: &[f64], grad: &mut [f64]) {
    let l = params.layout();
    let (h, n, ch, w) = (l.hidden, tape.n, tape.channels, params.arch.omega0);
    let cn = ch.count() * n;
    let net = &params.net;
    let [l0, l1, lr, lt] = &tape.layers;

    // Output rows: out = w·H + b.
    let mut bar_r = vec![0.0; h * cn];
    let mut bar_t = vec![0.0; h * cn];
    for (layer, bar, out_bar, wo, bo) in [(lr, &mut bar_r, zbar, l.wr2, l.br2), (lt, &mut bar_t, tbar, l.wt2, l.bt2)] {
        gemm(1, cn, h, 1.0, out_bar, false, &layer.h, true, 1.0, &mut grad[wo..wo + h]);
        grad[bo] += out_bar[..n].iter().sum::<f64>();
        for i in 0..h {
            let wi = net[wo + i];
            for (b, o) in bar[i * cn..(i + 1) * cn].iter_mut().zip(out_bar) {
                *b = wi * o;
            }
        }
        sine_backward(layer, bar, h, n, ch);
    }

    // Head sine layers read the backbone output.
    let mut bar1 = vec![0.0; h * cn];
    for (bar, wo, bo) in [(&bar_r, l.wr1, l.br1), (&bar_t, l.wt1, l.bt1)] {
        gemm(h, cn, h, w, bar, false, &l1.h, true, 1.0, &mut grad[wo..wo + h * h]);
        bias_grad(bar, w, h, n, cn, &mut grad[bo..bo + h]);
        gemm(h, h, cn, w, &net[wo..wo + h * h], true, bar, false, 1.0, &mut bar1);
    }
    sine_backward(l1, &mut bar1, h, n, ch);

    gemm(h, cn, h, w, &bar1, false, &l0.h, true, 1.0, &mut grad[l.w1..l.b1]);
    bias_grad(&bar1, w, h, n, cn, &mut grad[l.b1..l.wr1]);
    let mut bar0 = vec![0.0; h * cn];
    gemm(h, h, cn, w, &net[l.w1..l.b1], true, &bar1, false, 0.0, &mut bar0);
    sine_backward(l0, &mut bar0, h, n, ch);

    // First layer: a_val = ω(W0·x + b0), a_d = ω·W0[:, d].
    for i in 0..h {
        let row = &bar0[i * cn..(i + 1) * cn];
        let mut gw = [0.0; 3];
        let mut gb = 0.0;
        for (p, x) in tape.xs.iter().enumerate() {
            let v = row[p];
            gb += v;
            gw[0] += v * x[0];
            gw[1] += v * x[1];
            gw[2] += v * x[2];
        }
        if ch != Channels::Value {
            for (d, g) in gw.iter_mut().enumerate() {
                *g += row[(d + 1) * n..(d + 2) * n].iter().sum::<f64>();
            }
        }
        for d in 0..3 {
            grad[l.w0 + 3 * i + d] += w * gw[d];
        }
        grad[l.b0 + i] += w * gb;
    }
}

/// Head outputs after adding `delta` to parameter `idx`, recomputing only the
/// activations downstream of it. `base` must be the outputs `tape` was
/// recorded with. Backs the finite-difference parameter check, where a full
/// forward pass per parameter would be far too slow.
pub(crate) fn perturbed_heads(
    params: &FieldParams,
    tape: &Tape,
    base: &HeadOutputs,
    idx: usize,
    delta: f64,
) -> HeadOutputs {
    let l = params.layout();
    let (h, n, ch, w) = (l.hidden, tape.n, tape.channels, params.arch.omega0);
    let cn = ch.count() * n;
    let net = &params.net;
    let [l0, l1, lr, lt] = &tape.layers;
    let mut out = HeadOutputs { n, channels: ch, z: base.z.clone(), t: base.t.clone() };

    if idx < l.w1 {
        let mut q = params.clone();
        q.net[idx] += delta;
        return heads(&q, &tape.xs, ch);
    }

    // New jet of unit `i` of `layer` when its pre-activation gains
    // `ω·delta·src` (a weight) or `ω·delta` on value columns (a bias).
    let bumped = |layer: &SineLayer, i: usize, src: Option<&[f64]>| -> Vec<f64> {
        let mut a = layer.a[i * cn..(i + 1) * cn].to_vec();
        match src {
            Some(u) => a.iter_mut().zip(u).for_each(|(v, s)| *v += w * delta * s),
            None => a[..n].iter_mut().for_each(|v| *v += w * delta),
        }
        let mut hr = vec![0.0; cn];
        let (mut s, mut c) = (vec![0.0; n], vec![0.0; n]);
        sine_unit(&a, &mut hr, &mut s, &mut c, ch);
        hr
    };
    fn row(m: &[f64], i: usize, cn: usize) -> &[f64] {
        &m[i * cn..(i + 1) * cn]
    }

    if idx < l.wr1 {
        let (i, src) = if idx < l.b1 {
            let j = (idx - l.w1) % h;
            ((idx - l.w1) / h, Some(row(&l0.h, j, cn)))
        } else {
            (idx - l.b1, None)
        };
        let new = bumped(l1, i, src);
        let dh: Vec<f64> = new.iter().zip(row(&l1.h, i, cn)).map(|(a, b)| a - b).collect();
        let (mut sn, mut cs, mut g2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for (layer, w1, w2, dst) in [(lr, l.wr1, l.wr2, &mut out.z), (lt, l.wt1, l.wt2, &mut out.t)] {
            // Every head unit's pre-activation moves by `c·dh`; update its jet
            // in place from the cached sine and cosine, one channel at a time
            // so the loops vectorize.
            for u in 0..h {
                let c = w * net[w1 + u * h + i];
                let wo = net[w2 + u];
                let (ar, hr) = (row(&layer.a, u, cn), row(&layer.h, u, cn));
                let (s0, c0) = (&layer.sin[u * n..(u + 1) * n], &layer.cos[u * n..(u + 1) * n]);
                let mut large = false;
                for p in 0..n {
                    let d = c * dh[p];
                    large |= d.abs() >= SERIES_LIMIT;
                    let (sd, cd) = small_sin_cos(d);
                    sn[p] = s0[p] * cd + c0[p] * sd;
                    cs[p] = c0[p] * cd - s0[p] * sd;
                }
                if large {
                    for p in 0..n {
                        (sn[p], cs[p]) = shifted_sin_cos(s0[p], c0[p], ar[p], c * dh[p]);
                    }
                }
                for p in 0..n {
                    dst[p] += wo * (sn[p] - hr[p]);
                }
                if ch == Channels::Value {
                    continue;
                }
                g2.iter_mut().for_each(|v| *v = 0.0);
                for d in 1..=3 {
                    let (a, e, o) = (&ar[d * n..(d + 1) * n], &dh[d * n..(d + 1) * n], &hr[d * n..(d + 1) * n]);
                    let out_d = &mut dst[d * n..(d + 1) * n];
                    for p in 0..n {
                        let g = a[p] + c * e[p];
                        g2[p] += g * g;
                        out_d[p] += wo * (cs[p] * g - o[p]);
                    }
                }
                if ch == Channels::Laplacian {
                    let (a, e, o) = (&ar[4 * n..5 * n], &dh[4 * n..5 * n], &hr[4 * n..5 * n]);
                    let out_l = &mut dst[4 * n..5 * n];
                    for p in 0..n {
                        let lap = a[p] + c * e[p];
                        out_l[p] += wo * (cs[p] * lap - sn[p] * g2[p] - o[p]);
                    }
                }
            }
        }
        return out;
    }

    for (layer, w1, b1, w2, b2, dst) in
        [(lr, l.wr1, l.br1, l.wr2, l.br2, &mut out.z), (lt, l.wt1, l.bt1, l.wt2, l.bt2, &mut out.t)]
    {
        if (w1..w2).contains(&idx) {
            let (i, src) = if idx < b1 { ((idx - w1) / h, Some(row(&l1.h, (idx - w1) % h, cn))) } else { (idx - b1, None) };
            let new = bumped(layer, i, src);
            let wo = net[w2 + i];
            for ((v, a), b) in dst.iter_mut().zip(&new).zip(row(&layer.h, i, cn)) {
                *v += wo * (a - b);
            }
        } else if (w2..b2).contains(&idx) {
            for (v, s) in dst.iter_mut().zip(row(&layer.h, idx - w2, cn)) {
                *v += delta * s;
            }
        } else if idx == b2 {
            dst[..n].iter_mut().for_each(|v| *v += delta);
        }
    }
    out
}

/// Shifts below this use the short series in [`small_sin_cos`].
const SERIES_LIMIT: f64 = 1e-2;

/// `sin d` and `cos d` by short series, accurate to rounding for
/// `|d| < SERIES_LIMIT`.
#[inline]
fn small_sin_cos(d: f64) -> (f64, f64) {
    let d2 = d * d;
    let sd = d * (1.0 - d2 / 6.0 * (1.0 - d2 / 20.0 * (1.0 - d2 / 42.0 * (1.0 - d2 / 72.0))));
    let cd = 1.0 - d2 / 2.0 * (1.0 - d2 / 12.0 * (1.0 - d2 / 30.0 * (1.0 - d2 / 56.0 * (1.0 - d2 / 90.0))));
    (sd, cd)
}

/// `sin(a + d)` and `cos(a + d)` from `s = sin a` and `c = cos a`. Small
/// shifts use the angle-addition formulas, large ones recompute directly.
#[inline]
fn shifted_sin_cos(s: f64, c: f64, a: f64, d: f64) -> (f64, f64) {
    if d.abs() >= SERIES_LIMIT {
        return (a + d).sin_cos();
    }
    let (sd, cd) = small_sin_cos(d);
    (s * cd + c * sd, c * cd - s * sd)
}

fn bias_grad(bar: &[f64], w: f64, h: usize, n: usize, cn: usize, out: &mut [f64]) {
    for i in 0..h {
        out[i] += w * bar[i * cn..i * cn + n].iter().sum::<f64>();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{init_params, InitOptions};

    fn params() -> FieldParams {
        init_params(5, &InitOptions { hidden: 12, ..Default::default() })
    }

    fn pts() -> Vec<Vec3> {
        vec![[0.1, -0.3, 0.2], [-0.5, 0.4, 0.05], [0.7, 0.0, -0.6]]
    }

    #[test]
    fn gemm_handles_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]].
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, 1.0, &a, true, &b, true, 0.0, &mut c);
        assert_eq!(c, [23.0, 31.0, 34.0, 46.0]);
    }

    #[test]
    fn channel_counts_do_not_change_values() {
        let p = params();
        let v = heads(&p, &pts(), Channels::Value);
        let g = heads(&p, &pts(), Channels::Gradient);
        let f = heads(&p, &pts(), Channels::Laplacian);
        for i in 0..3 {
            assert!((v.z[i] - f.z[i]).abs() < 1e-13);
            assert!((g.t[i] - f.t[i]).abs() < 1e-13);
            assert!((g.t[3 + i] - f.t[3 + i]).abs() < 1e-13);
        }
    }

    #[test]
    fn head_derivatives_match_finite_differences() {
        let p = params();
        let x = [0.1, -0.3, 0.2];
        let f = heads(&p, &[x], Channels::Laplacian);
        let eval = |q: Vec3| heads(&p, &[q], Channels::Value).z[0];
        let h = 1e-4;
        let mut lap = 0.0;
        for d in 0..3 {
            let mut a = x;
            let mut b = x;
            a[d] += h;
            b[d] -= h;
            let fd = (eval(a) - eval(b)) / (2.0 * h);
            assert!((fd - f.z[1 + d]).abs() < 1e-5 * fd.abs().max(1.0), "d{d}: {fd} vs {}", f.z[1 + d]);
            lap += (eval(a) - 2.0 * eval(x) + eval(b)) / (h * h);
        }
        assert!((lap - f.z[4]).abs() < 1e-3 * lap.abs().max(1.0), "{lap} vs {}", f.z[4]);
    }

    #[test]
    fn shifted_sine_matches_direct_evaluation() {
        for (a, d) in [(0.3f64, 1e-3), (-2.0, -9e-3), (25.0, 3e-7), (1.0, 0.5)] {
            let (s, c) = shifted_sin_cos(a.sin(), a.cos(), a, d);
            assert!((s - (a + d).sin()).abs() < 1e-15 && (c - (a + d).cos()).abs() < 1e-15);
        }
    }

    #[test]
    fn perturbed_heads_match_full_recomputation() {
        let p0 = params();
        let xs = pts();
        let ch = Channels::Laplacian;
        let (tape, base) = forward(&p0, &xs, ch);
        let l = p0.layout();
        for i in (0..l.len).step_by(5).chain([l.b1, l.br1 + 2, l.br2, l.bt2, l.wt2 + 1]) {
            let mut q = p0.clone();
            q.net[i] += 1e-3;
            let full = heads(&q, &xs, ch);
            let inc = perturbed_heads(&p0, &tape, &base, i, 1e-3);
            for (a, b) in full.z.iter().chain(&full.t).zip(inc.z.iter().chain(&inc.t)) {
                assert!((a - b).abs() <= 1e-11 * a.abs().max(1.0), "{}: {a} vs {b}", l.describe(i));
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_on_a_linear_functional() {
        // L = Σ_c Σ_p (wz·z + wt·t) with fixed random coefficients.
        let p0 = params();
        let xs = pts();
        let ch = Channels::Laplacian;
        let cn = ch.count() * xs.len();
        let zbar: Vec<f64> = (0..cn).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.1).collect();
        let tbar: Vec<f64> = (0..cn).map(|i| ((i * 5 % 13) as f64 - 6.0) * 0.07).collect();
        let loss = |q: &FieldParams| {
            let o = heads(q, &xs, ch);
            o.z.iter().zip(&zbar).map(|(a, b)| a * b).sum::<f64>() + o.t.iter().zip(&tbar).map(|(a, b)| a * b).sum::<f64>()
        };
        let (tape, _) = forward(&p0, &xs, ch);
        let mut grad = vec![0.0; p0.net.len()];
        backward(&p0, &tape, &zbar, &tbar, &mut grad);
        let l = p0.layout();
        for i in (0..l.len).step_by(7).chain([l.br2, l.bt2, l.w0, l.b0 + 3]) {
            let mut a = p0.clone();
            let mut b = p0.clone();
            let h = 1e-6;
            a.net[i] += h;
            b.net[i] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-5 * fd.abs().max(1e-2), "{}: {fd} vs {}", l.describe(i), grad[i]);
        }
    }
}
