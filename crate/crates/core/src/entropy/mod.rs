//! Quantization, likelihoods, rate estimates and integer frequency tables.

pub mod factorized;
pub mod gaussian;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Smallest symbol with its own table entry.
pub const SUPPORT_MIN: i32 = -64;
/// Largest symbol with its own table entry.
pub const SUPPORT_MAX: i32 = 63;
/// Frequencies of every table sum to `1 << PRECISION`.
pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;

/// Adds i.i.d. `U(-0.5, 0.5)` noise drawn from a generator seeded with `seed`.
pub fn quantize_train(z: &Tensor, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = z.clone();
    for v in out.data_mut() {
        *v += rng.gen::<f32>() - 0.5;
    }
    out
}

/// Rounds to the nearest integer, ties away from zero.
pub fn quantize_infer<T: Real>(z: &Tensor<T>) -> Tensor<T> {
    z.map(|v| v.round())
}

/// `sum(-log2 p)` in bits.
pub fn rate_bits<T: Real>(p: &Tensor<T>) -> f64 {
    p.data().iter().map(|&v| -v.f64().log2()).sum()
}

/// Per-element mean and scale of the conditional Gaussian model.
#[derive(Clone, Debug)]
pub struct DistributionParams {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl DistributionParams {
    pub fn new(mu: Tensor, sigma: Tensor) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(Error::shape(format!(
                "mean {:?} and scale {:?} differ",
                mu.shape(),
                sigma.shape()
            )));
        }
        if !mu.is_finite() || !sigma.is_finite() {
            return Err(Error::NonFinite("distribution parameters".into()));
        }
        let bound = gaussian::SCALE_BOUND as f32;
        if let Some(s) = sigma.data().iter().find(|&&s| s < bound) {
            return Err(Error::invalid(format!("scale {s} below {bound}")));
        }
        Ok(Self { mu, sigma })
    }
}

/// Cumulative frequency table over `[offset, offset + n)` plus a trailing
/// escape symbol. Entry `i` of `cum` is the lower bound of symbol index `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedCdf {
    cum: Vec<u32>,
    offset: i32,
}

impl QuantizedCdf {
    /// Validates a raw cumulative table (escape last).
    pub fn from_cumulative(cum: Vec<u32>, offset: i32) -> Result<Self> {
        if cum.len() < 2 || cum[0] != 0 || *cum.last().unwrap() != TOTAL {
            return Err(Error::invalid("cumulative table must run from 0 to 65536"));
        }
        if cum.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("cumulative table must be strictly increasing"));
        }
        Ok(Self { cum, offset })
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cum
    }

    pub fn offset(&self) -> i32 {
        self.offset
    }

    /// Number of entries including the escape.
    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn escape_index(&self) -> usize {
        self.len() - 1
    }

    pub fn freq(&self, index: usize) -> u32 {
        self.cum[index + 1] - self.cum[index]
    }

    /// Table index of `symbol`, or `None` if it must be escaped.
    pub fn index_of(&self, symbol: i32) -> Option<usize> {
        let i = symbol as i64 - self.offset as i64;
        (i >= 0 && (i as usize) < self.escape_index()).then_some(i as usize)
    }

    /// Index whose interval contains cumulative value `target`.
    pub fn lookup(&self, target: u32) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }

    /// Ideal code length of symbol `index` in bits.
    pub fn cost_bits(&self, index: usize) -> f64 {
        PRECISION as f64 - (self.freq(index) as f64).log2()
    }
}

/// Quantizes symbol masses `probs` (starting at `offset`) and an `escape`
/// mass into a table with total 65536. Every entry receives at least one
/// unit; the rest is shared out by largest remainder, ties to the lower index.
pub fn build_cdf(probs: &[f64], escape: f64, offset: i32) -> Result<QuantizedCdf> {
    let n = probs.len() + 1;
    if n as u32 > TOTAL / 2 {
        return Err(Error::invalid("too many symbols for 16-bit frequencies"));
    }
    let masses: Vec<f64> = probs
        .iter()
        .chain(std::iter::once(&escape))
        .map(|&p| if p.is_finite() && p > 0.0 { p } else { 0.0 })
        .collect();
    let total: f64 = masses.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::invalid("probability mass is zero"));
    }
    let spare = (TOTAL as usize - n) as f64;
    let mut freq = vec![1u32; n];
    let mut rem = Vec::with_capacity(n);
    let mut used = n as u32;
    for (i, &m) in masses.iter().enumerate() {
        let share = m / total * spare;
        let whole = share.floor();
        freq[i] += whole as u32;
        used += whole as u32;
        rem.push((share - whole, i));
    }
    // stable sort keeps lower indices first among equal remainders
    rem.sort_by(|a, b| b.0.total_cmp(&a.0));
    let left = TOTAL.checked_sub(used).expect("floor shares never exceed the total");
    for &(_, i) in rem.iter().cycle().take(left as usize) {
        freq[i] += 1;
    }
    let mut cum = Vec::with_capacity(n + 1);
    cum.push(0);
    let mut acc = 0;
    for f in freq {
        acc += f;
        cum.push(acc);
    }
    QuantizedCdf::from_cumulative(cum, offset)
}

/// Table for one element of the conditional Gaussian model.
pub fn gaussian_cdf(mu: f64, sigma: f64) -> Result<QuantizedCdf> {
    if !mu.is_finite() || !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::NonFinite(format!("gaussian table mu={mu} sigma={sigma}")));
    }
    let probs: Vec<f64> = (SUPPORT_MIN..=SUPPORT_MAX)
        .map(|q| gaussian::bin_probability(q as f64, mu, sigma))
        .collect();
    let escape = gaussian::std_normal_cdf((SUPPORT_MIN as f64 - 0.5 - mu) / sigma)
        + gaussian::std_normal_cdf((mu - SUPPORT_MAX as f64 - 0.5) / sigma);
    build_cdf(&probs, escape, SUPPORT_MIN)
}

/// One table per channel of a factorized density given in `f32` parameters.
pub fn factorized_cdfs(params: &[&Tensor]) -> Result<Vec<QuantizedCdf>> {
    if params.len() != factorized::PARAM_COUNT {
        return Err(Error::invalid("factorized density needs eleven parameter tensors"));
    }
    let p64: Vec<Tensor<f64>> = params.iter().map(|t| t.cast()).collect();
    let refs: Vec<&Tensor<f64>> = p64.iter().collect();
    let channels = params[0].shape()[0];
    (0..channels)
        .map(|c| {
            let (probs, esc) = factorized::channel_masses(&refs, c, SUPPORT_MIN, SUPPORT_MAX);
            build_cdf(&probs, esc, SUPPORT_MIN)
        })
        .collect()
}
