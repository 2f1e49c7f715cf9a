//! Conditional Gaussian model for residual latents.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Smallest probability any symbol is assigned during rate estimation.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

/// Lower bound on predicted scales.
pub const SCALE_BOUND: f64 = 0.04;

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Mass of `[v - 0.5, v + 0.5]` under a zero-mean Gaussian, evaluated on the
/// left tail for accuracy. `v = |q - mu|`.
#[inline]
fn bin_mass(v: f64, sigma: f64) -> f64 {
    std_normal_cdf((0.5 - v) / sigma) - std_normal_cdf((-0.5 - v) / sigma)
}

/// Unclamped probability of integer symbol `q` under `N(mu, sigma)`.
pub fn bin_probability(q: f64, mu: f64, sigma: f64) -> f64 {
    bin_mass((q - mu).abs(), sigma)
}

fn check<T: Real>(q: &Tensor<T>, mu: &Tensor<T>, sigma: &Tensor<T>) -> Result<()> {
    if q.shape() != mu.shape() || q.shape() != sigma.shape() {
        return Err(Error::shape(format!(
            "gaussian likelihood: q {:?}, mu {:?}, sigma {:?}",
            q.shape(),
            mu.shape(),
            sigma.shape()
        )));
    }
    if !mu.is_finite() || !sigma.is_finite() {
        return Err(Error::NonFinite("gaussian likelihood parameters".into()));
    }
    if sigma.data().iter().any(|&s| s <= T::zero()) {
        return Err(Error::invalid("gaussian likelihood: scales must be positive"));
    }
    Ok(())
}

pub fn likelihood<T: Real>(q: &Tensor<T>, mu: &Tensor<T>, sigma: &Tensor<T>) -> Result<Tensor<T>> {
    check(q, mu, sigma)?;
    let data = q
        .data()
        .iter()
        .zip(mu.data())
        .zip(sigma.data())
        .map(|((&qv, &m), &s)| {
            let v = (qv - m).abs().f64();
            T::of(bin_mass(v, s.f64()).max(LIKELIHOOD_FLOOR))
        })
        .collect();
    Tensor::new(q.shape().to_vec(), data)
}

pub(crate) fn likelihood_backward<T: Real>(
    q: &Tensor<T>,
    mu: &Tensor<T>,
    sigma: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    check(q, mu, sigma)?;
    let n = q.numel();
    let mut gq = Vec::with_capacity(n);
    let mut gs = Vec::with_capacity(n);
    for i in 0..n {
        let d = q.data()[i] - mu.data()[i];
        let v = d.abs().f64();
        let s = sigma.data()[i].f64();
        let a = (0.5 - v) / s;
        let b = (-0.5 - v) / s;
        let gv = g.data()[i].f64();
        if std_normal_cdf(a) - std_normal_cdf(b) < LIKELIHOOD_FLOOR {
            gq.push(T::zero());
            gs.push(T::zero());
            continue;
        }
        let (pa, pb) = (std_normal_pdf(a), std_normal_pdf(b));
        let dv = (pb - pa) / s;
        let ds = (b * pb - a * pa) / s;
        let sign = if d > T::zero() {
            1.0
        } else if d < T::zero() {
            -1.0
        } else {
            0.0
        };
        gq.push(T::of(gv * dv * sign));
        gs.push(T::of(gv * ds));
    }
    let gq = Tensor::new(q.shape().to_vec(), gq)?;
    let gm = gq.map(|v| -v);
    let gs = Tensor::new(q.shape().to_vec(), gs)?;
    Ok((gq, gm, gs))
}
