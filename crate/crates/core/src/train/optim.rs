//! Adaptive-moment descent with global gradient-norm clipping.

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients are rescaled so their joint L2 norm is at most this.
    pub clip: f64,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64), clip: f64, params: usize) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            clip,
            step: 0,
            m: vec![None; params],
            v: vec![None; params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from `(key, gradient)` pairs and returns the
    /// gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(usize, Tensor)]) -> f64 {
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt();
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (self.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        for (key, g) in grads {
            let p = store.get_mut(*key);
            let m = self.m[*key].get_or_insert_with(|| p.zeros_like());
            let v = self.v[*key].get_or_insert_with(|| p.zeros_like());
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                let gi = gi * scale as f32;
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                pd[i] -= step_size * md[i] / (vd[i].sqrt() / bc2_sqrt + eps);
            }
        }
        norm
    }
}
