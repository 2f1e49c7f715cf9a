use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Real, Tensor};
use crate::error::Result;

/// A scalar function of some leaf tensors, buildable at any precision.
pub trait Probe {
    fn build<T: Real>(&self, g: &mut Graph<T>, leaves: &[NodeId]) -> Result<NodeId>;
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(leaf, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares `f32` reverse-mode gradients of `probe` against central differences
/// of the same function re-evaluated in `f64`.
///
/// Up to `per_leaf` coordinates are sampled from every leaf. The error of one
/// coordinate is `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<P: Probe>(
    probe: &P,
    leaves: &[Tensor<f32>],
    epsilon: f64,
    per_leaf: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let mut g32 = Graph::<f32>::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| g32.leaf(t.clone(), true)).collect();
    let loss = probe.build(&mut g32, &ids)?;
    let grads = g32.backward(loss)?;

    let base: Vec<Tensor<f64>> = leaves.iter().map(|t| t.cast()).collect();
    let eval = |which: usize, idx: usize, delta: f64| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let ids: Vec<NodeId> = base
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == which {
                    t.data_mut()[idx] += delta;
                }
                g.leaf(t, false)
            })
            .collect();
        let l = probe.build(&mut g, &ids)?;
        Ok(g.value(l).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.numel();
        let picks = sample(&mut rng, n, per_leaf.min(n)).into_vec();
        let analytic = grads.get(ids[li]).expect("trainable leaf has a gradient");
        for idx in picks {
            let a = analytic.data()[idx] as f64;
            let num = (eval(li, idx, epsilon)? - eval(li, idx, -epsilon)?) / (2.0 * epsilon);
            let err = (a - num).abs() / 1f64.max(a.abs()).max(num.abs());
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((li, idx, a, num));
            }
        }
    }
    Ok(report)
}
