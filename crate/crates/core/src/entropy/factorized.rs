//! Per-channel learned univariate densities.
//!
//! Each channel owns a monotone cumulative `c(x) = sigmoid(f(x))` where `f`
//! chains three 3-wide stages and a final projection. Stage matrices pass
//! through softplus so they stay positive; each stage adds a
//! `tanh(factor) * tanh(u)` gate, which keeps `f` non-decreasing.

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softplus};
use crate::tensor::{Real, Tensor};

/// Hidden widths of the stages.
pub const FILTERS: [usize; 3] = [3, 3, 3];

const DIMS: [usize; 5] = [1, 3, 3, 3, 1];

pub const PARAM_COUNT: usize = 11;

pub const PARAM_NAMES: [&str; PARAM_COUNT] = [
    "matrix0", "matrix1", "matrix2", "matrix3", "bias0", "bias1", "bias2", "bias3", "factor0",
    "factor1", "factor2",
];

/// Shape of parameter `i` for a density over `channels` channels.
pub fn param_shape(i: usize, channels: usize) -> Vec<usize> {
    match i {
        0..=3 => vec![channels, DIMS[i + 1], DIMS[i]],
        4..=7 => vec![channels, DIMS[i - 3], 1],
        _ => vec![channels, DIMS[i - 7], 1],
    }
}

/// Initial value of parameter `i`: constant matrices giving an overall scale
/// of 10, uniform biases in `[-0.5, 0.5]`, zero gates.
pub fn init_param(i: usize, channels: usize, mut uniform: impl FnMut() -> f32) -> Tensor<f32> {
    let shape = param_shape(i, channels);
    let init_scale: f64 = 10.0;
    let scale = init_scale.powf(1.0 / (FILTERS.len() + 1) as f64);
    match i {
        0..=3 => {
            let v = (1.0 / scale / DIMS[i + 1] as f64).exp_m1().ln();
            Tensor::full(&shape, v as f32)
        }
        4..=7 => Tensor::from_fn(&shape, |_| uniform() - 0.5),
        _ => Tensor::zeros(&shape),
    }
}

/// Intermediate values of one evaluation, kept for the backward pass.
#[derive(Clone, Copy, Default)]
struct Trace<T: Real> {
    /// Inputs to each stage.
    h: [[T; 3]; 4],
    /// Pre-gate outputs of each stage.
    u: [[T; 3]; 4],
}

struct ChannelView<'a, T: Real> {
    m: [&'a [T]; 4],
    b: [&'a [T]; 4],
    f: [&'a [T]; 3],
}

fn view<'a, T: Real>(ps: &[&'a Tensor<T>], c: usize) -> ChannelView<'a, T> {
    let m = std::array::from_fn(|l| {
        let n = DIMS[l + 1] * DIMS[l];
        &ps[l].data()[c * n..(c + 1) * n]
    });
    let b = std::array::from_fn(|l| {
        let n = DIMS[l + 1];
        &ps[4 + l].data()[c * n..(c + 1) * n]
    });
    let f = std::array::from_fn(|l| {
        let n = DIMS[l + 1];
        &ps[8 + l].data()[c * n..(c + 1) * n]
    });
    ChannelView { m, b, f }
}

fn logit<T: Real>(v: &ChannelView<'_, T>, x: T) -> (T, Trace<T>) {
    let mut tr = Trace::<T>::default();
    tr.h[0][0] = x;
    for l in 0..4 {
        let (din, dout) = (DIMS[l], DIMS[l + 1]);
        let mut next = [T::zero(); 3];
        for i in 0..dout {
            let mut acc = v.b[l][i];
            for j in 0..din {
                acc += softplus(v.m[l][i * din + j]) * tr.h[l][j];
            }
            tr.u[l][i] = acc;
            next[i] = if l < 3 {
                acc + v.f[l][i].tanh() * acc.tanh()
            } else {
                acc
            };
        }
        if l < 3 {
            tr.h[l + 1] = next;
        }
    }
    (tr.u[3][0], tr)
}

/// Accumulates parameter gradients for one evaluation and returns d logit / dx scaled by `gl`.
fn logit_backward<T: Real>(
    v: &ChannelView<'_, T>,
    tr: &Trace<T>,
    gl: T,
    gm: &mut [&mut [T]; 4],
    gb: &mut [&mut [T]; 4],
    gf: &mut [&mut [T]; 3],
) -> T {
    let mut gu = [T::zero(); 3];
    gu[0] = gl;
    for l in (0..4).rev() {
        let (din, dout) = (DIMS[l], DIMS[l + 1]);
        let mut gh = [T::zero(); 3];
        for i in 0..dout {
            gb[l][i] += gu[i];
            for j in 0..din {
                let raw = v.m[l][i * din + j];
                gm[l][i * din + j] += gu[i] * tr.h[l][j] * sigmoid(raw);
                gh[j] += softplus(raw) * gu[i];
            }
        }
        if l == 0 {
            return gh[0];
        }
        // gh is the gradient w.r.t. the gated output of stage l - 1
        let p = l - 1;
        for i in 0..DIMS[p + 1] {
            let tu = tr.u[p][i].tanh();
            let tf = v.f[p][i].tanh();
            gf[p][i] += gh[i] * tu * (T::one() - tf * tf);
            gu[i] = gh[i] * (T::one() + tf * (T::one() - tu * tu));
        }
    }
    unreachable!()
}

/// `p = c(x + 0.5) - c(x - 0.5)` computed on whichever tail is numerically safer.
#[inline]
fn bin_from_logits<T: Real>(lower: T, upper: T) -> T {
    let s = if lower + upper > T::zero() { -T::one() } else { T::one() };
    (sigmoid(s * upper) - sigmoid(s * lower)).abs()
}

fn check<T: Real>(q: &Tensor<T>, ps: &[&Tensor<T>]) -> Result<(usize, usize)> {
    let (_, c, h, w) = q.dims4()?;
    if ps.len() != PARAM_COUNT {
        return Err(Error::invalid("factorized density needs eleven parameter tensors"));
    }
    for (i, p) in ps.iter().enumerate() {
        if p.shape() != param_shape(i, c).as_slice() {
            return Err(Error::shape(format!(
                "factorized density: input has {c} channels but {} has shape {:?}",
                PARAM_NAMES[i],
                p.shape()
            )));
        }
    }
    Ok((c, h * w))
}

pub(crate) fn likelihood<T: Real>(q: &Tensor<T>, ps: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (c, plane) = check(q, ps)?;
    let half = T::of(0.5);
    let floor = T::of(super::gaussian::LIKELIHOOD_FLOOR);
    let views: Vec<ChannelView<'_, T>> = (0..c).map(|ch| view(ps, ch)).collect();
    let data = q
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let v = &views[(i / plane) % c];
            let (lo, _) = logit(v, x - half);
            let (up, _) = logit(v, x + half);
            let p = bin_from_logits(lo, up);
            if p > floor {
                p
            } else {
                floor
            }
        })
        .collect();
    Tensor::new(q.shape().to_vec(), data)
}

pub(crate) fn likelihood_backward<T: Real>(
    q: &Tensor<T>,
    ps: &[&Tensor<T>],
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let (c, plane) = check(q, ps)?;
    let half = T::of(0.5);
    let floor = T::of(super::gaussian::LIKELIHOOD_FLOOR);
    let mut grads: Vec<Tensor<T>> = ps.iter().map(|p| p.zeros_like()).collect();
    let mut gq = q.zeros_like();
    for (i, &x) in q.data().iter().enumerate() {
        let ch = (i / plane) % c;
        let v = view(ps, ch);
        let (lo, tlo) = logit(&v, x - half);
        let (up, tup) = logit(&v, x + half);
        if bin_from_logits(lo, up) <= floor {
            continue;
        }
        let gv = g.data()[i];
        let su = sigmoid(up);
        let sl = sigmoid(lo);
        let g_up = gv * su * (T::one() - su);
        let g_lo = -gv * sl * (T::one() - sl);

        let (gm_t, rest) = grads.split_at_mut(4);
        let (gb_t, gf_t) = rest.split_at_mut(4);
        let mut gm: [&mut [T]; 4] = split4(gm_t, ch, |l| DIMS[l + 1] * DIMS[l]);
        let mut gb: [&mut [T]; 4] = split4(gb_t, ch, |l| DIMS[l + 1]);
        let mut gf: [&mut [T]; 3] = split3(gf_t, ch, |l| DIMS[l + 1]);
        let dx_up = logit_backward(&v, &tup, g_up, &mut gm, &mut gb, &mut gf);
        let dx_lo = logit_backward(&v, &tlo, g_lo, &mut gm, &mut gb, &mut gf);
        gq.data_mut()[i] = dx_up + dx_lo;
    }
    Ok((gq, grads))
}

fn split4<T: Real>(ts: &mut [Tensor<T>], ch: usize, n: impl Fn(usize) -> usize) -> [&mut [T]; 4] {
    let mut it = ts.iter_mut().enumerate().map(|(l, t)| {
        let k = n(l);
        &mut t.data_mut()[ch * k..(ch + 1) * k]
    });
    std::array::from_fn(|_| it.next().unwrap())
}

fn split3<T: Real>(ts: &mut [Tensor<T>], ch: usize, n: impl Fn(usize) -> usize) -> [&mut [T]; 3] {
    let mut it = ts.iter_mut().enumerate().map(|(l, t)| {
        let k = n(l);
        &mut t.data_mut()[ch * k..(ch + 1) * k]
    });
    std::array::from_fn(|_| it.next().unwrap())
}

/// Cumulative `c(x)` of one channel.
pub fn cdf<T: Real>(ps: &[&Tensor<T>], channel: usize, x: T) -> T {
    sigmoid(logit(&view(ps, channel), x).0)
}

/// Symbol probabilities over `[lo, hi]` plus the mass outside it, for one channel.
pub fn channel_masses(ps: &[&Tensor<f64>], channel: usize, lo: i32, hi: i32) -> (Vec<f64>, f64) {
    let v = view(ps, channel);
    let logits: Vec<f64> = (lo..=hi + 1).map(|q| logit(&v, q as f64 - 0.5).0).collect();
    let probs = logits
        .windows(2)
        .map(|w| bin_from_logits(w[0], w[1]))
        .collect();
    let escape = sigmoid(logits[0]) + sigmoid(-logits[logits.len() - 1]);
    (probs, escape)
}
