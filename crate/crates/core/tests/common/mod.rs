//! Oracles shared by the integration suites and the acceptance run.

#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slimvc::codec::model::Layer;
use slimvc::codec::{decode_sequence, encode_sequence, Container, SlimVcModel};
use slimvc::entropy::{build_cdf, factorized, QuantizedCdf};
use slimvc::rangecoder::{decode_symbols, encode_symbols};
use slimvc::slim::{deconv_targets, Binder, LayerKind, Module, Preset, K, LEAKY_SLOPE};
use slimvc::tensor::{grad_check, same_padding, transposed_padding, Graph, NodeId, Padding, Probe, Real};
use slimvc::train::{build_stage_graph, stage_groups, TrainData, DEFAULT_LAMBDAS};
use slimvc::{Result, Tensor};

pub fn random(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

pub fn same_bits(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits())
}

// ---- slimmed modules against dense copies ----

/// Module input at width `k` for a latent grid of `lh x lw`, and the size
/// its transposed layers must reach.
pub fn module_input(
    model: &SlimVcModel,
    m: Module,
    k: usize,
    (lh, lw): (usize, usize),
    rng: &mut ChaCha8Rng,
) -> (Tensor, Option<(usize, usize)>) {
    let c = &model.table.channels;
    let r = |shape: &[usize], rng: &mut ChaCha8Rng| random(shape, -1.0, 1.0, rng);
    match m {
        Module::Fe => (r(&[1, 3, 12 * lh, 12 * lw], rng), None),
        Module::Fd => (r(&[1, c.latent[k], lh, lw], rng), Some((12 * lh, 12 * lw))),
        Module::He => (r(&[1, 2 * c.latent[k], lh, lw], rng), None),
        Module::Hd => (
            r(&[1, c.hyper[k], lh.div_ceil(4), lw.div_ceil(4)], rng),
            Some((lh, lw)),
        ),
        Module::Tpm => (r(&[1, c.latent[k], lh, lw], rng), None),
        Module::Epm => (r(&[1, 2 * c.prior[k], lh, lw], rng), None),
    }
}

pub fn slim_forward(model: &SlimVcModel, m: Module, k: usize, x: &Tensor, target: Option<(usize, usize)>) -> Tensor {
    let mut g = Graph::<f32>::new();
    let mut bind = Binder::frozen(&model.store);
    let xi = g.input(x.clone());
    let out = model.run_module(&mut g, &mut bind, m, xi, k, target).unwrap();
    g.value(out).clone()
}

/// A plain network whose weights are copies of the width-`k` slices.
pub fn dense_forward(model: &SlimVcModel, m: Module, k: usize, x: &Tensor, target: Option<(usize, usize)>) -> Tensor {
    let layers = model.layers(m);
    let strides: Vec<usize> = layers
        .iter()
        .filter_map(|l| match l {
            Layer::Conv(c) if c.spec.kind == LayerKind::Deconv => Some(c.spec.stride),
            _ => None,
        })
        .collect();
    let mut targets = target.map(|t| deconv_targets(&strides, t).into_iter());
    let mut g = Graph::<f32>::new();
    let mut cur = g.input(x.clone());
    for layer in layers {
        cur = match layer {
            Layer::Conv(c) => {
                let (w, b) = c.slice_weights(&model.store, k).unwrap();
                let (wi, bi) = (g.input(w), g.input(b));
                let (_, _, h, wd) = g.value(cur).dims4().unwrap();
                let (kk, s) = (c.spec.kernel, c.spec.stride);
                if c.spec.kind == LayerKind::Deconv {
                    let (th, tw) = targets
                        .as_mut()
                        .and_then(|t| t.next())
                        .unwrap_or((h * s, wd * s));
                    let (top, bottom) = transposed_padding(h, kk, s, th).unwrap();
                    let (left, right) = transposed_padding(wd, kk, s, tw).unwrap();
                    let pad = Padding { top, bottom, left, right };
                    g.conv_transpose2d(cur, wi, Some(bi), s, pad, (0, 0)).unwrap()
                } else {
                    let (_, top, bottom) = same_padding(h, kk, s);
                    let (_, left, right) = same_padding(wd, kk, s);
                    let pad = Padding { top, bottom, left, right };
                    g.conv2d(cur, wi, Some(bi), s, pad).unwrap()
                }
            }
            Layer::Gdn(gdn) => {
                let (beta, gamma) = gdn.effective(&model.store, k);
                let (b, c) = (g.input(beta), g.input(gamma));
                g.gdn(cur, b, c, gdn.inverse).unwrap()
            }
            Layer::LeakyRelu => g.leaky_relu(cur, LEAKY_SLOPE),
        };
    }
    g.value(cur).clone()
}

/// Runs every module at every width on one random model; counts mismatches.
pub fn slim_vs_dense(seed: u64) -> usize {
    let model = SlimVcModel::new(Preset::Desk, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for m in Module::ALL {
        for k in 0..K {
            let hw = (rng.gen_range(1..4), rng.gen_range(1..4));
            let (x, target) = module_input(&model, m, k, hw, &mut rng);
            let a = slim_forward(&model, m, k, &x, target);
            let b = dense_forward(&model, m, k, &x, target);
            bad += usize::from(!same_bits(&a, &b));
        }
    }
    bad
}

/// Whether every width-`a` slice is the leading block of the width-`b` one.
pub fn slices_nest(seed: u64, m: Module, a: usize, b: usize) -> bool {
    let (k, k2) = (a.min(b), a.max(b));
    let model = SlimVcModel::new(Preset::Desk, seed);
    model.layers(m).iter().all(|layer| match layer {
        Layer::Conv(c) => {
            let (w, bias) = c.slice_weights(&model.store, k).unwrap();
            let (w2, bias2) = c.slice_weights(&model.store, k2).unwrap();
            w2.slice_leading(w.shape()).unwrap() == w && bias2.slice_leading(bias.shape()).unwrap() == bias
        }
        _ => true,
    })
}

/// Every weight entry a slice with leading block `block` does not read.
fn outside_block(shape: &[usize], block: &[usize]) -> Vec<usize> {
    let t = Tensor::from_fn(shape, |i| i as f32);
    let inside: HashSet<usize> = t
        .slice_leading(block)
        .unwrap()
        .data()
        .iter()
        .map(|&v| v as usize)
        .collect();
    (0..t.numel()).filter(|i| !inside.contains(i)).collect()
}

/// Parameters outside the width-`k` slice of `m`, and GDN parameters of other
/// widths, get exactly zero gradient, and overwriting them with large random
/// values leaves the width-`k` output bitwise unchanged.
pub fn inactive_parameters_isolated(seed: u64, m: Module, k: usize) -> bool {
    let model = SlimVcModel::new(Preset::Desk, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let hw = (rng.gen_range(1..3), rng.gen_range(1..3));
    let (x, target) = module_input(&model, m, k, hw, &mut rng);

    let mut g = Graph::<f32>::new();
    let mut bind = Binder::with_trainable(&model.store, vec![true; model.store.len()]);
    let xi = g.input(x.clone());
    let out = model.run_module(&mut g, &mut bind, m, xi, k, target).unwrap();
    let loss = g.sum(out);
    let grads = g.backward(loss).unwrap();
    let grads: HashMap<usize, Tensor> = grads.params().map(|(key, t)| (key, t.clone())).collect();
    let zero = |key: usize, idx: &[usize]| grads.get(&key).is_none_or(|t| idx.iter().all(|&i| t.data()[i] == 0.0));

    let mut perturbed = model.clone();
    for layer in model.layers(m) {
        match layer {
            Layer::Conv(c) => {
                let dead = outside_block(&c.spec.weight_shape(), &c.spec.weight_shape_at(k));
                let live = c.spec.cout[k];
                let nb = perturbed.store.get(c.bias).numel();
                if !zero(c.weight, &dead) || !zero(c.bias, &(live..nb).collect::<Vec<_>>()) {
                    return false;
                }
                let w = perturbed.store.get_mut(c.weight);
                for &i in &dead {
                    w.data_mut()[i] = rng.gen_range(-50.0..50.0);
                }
                for v in &mut perturbed.store.get_mut(c.bias).data_mut()[live..] {
                    *v = rng.gen_range(-50.0..50.0);
                }
            }
            Layer::Gdn(gdn) => {
                for other in (0..K).filter(|&j| j != k) {
                    for key in [gdn.beta[other], gdn.gamma[other]] {
                        let n = perturbed.store.get(key).numel();
                        if !zero(key, &(0..n).collect::<Vec<_>>()) {
                            return false;
                        }
                        for v in perturbed.store.get_mut(key).data_mut() {
                            *v = rng.gen_range(-5.0..5.0);
                        }
                    }
                }
            }
            Layer::LeakyRelu => {}
        }
    }
    same_bits(&slim_forward(&model, m, k, &x, target), &slim_forward(&perturbed, m, k, &x, target))
}

// ---- finite-difference probes ----

pub const GRAD_TOL: f64 = 1e-3;
const EPS: f64 = 1e-6;

fn max_error<P: Probe>(probe: &P, leaves: &[Tensor], per_leaf: usize) -> f64 {
    let r = grad_check(probe, leaves, EPS, per_leaf, 9).unwrap();
    assert!(r.coords_checked > 0, "nothing checked");
    r.max_rel_error
}

struct SquaredConv {
    stride: usize,
    pad: Padding,
    transposed: bool,
}

impl Probe for SquaredConv {
    fn build<T: Real>(&self, g: &mut Graph<T>, l: &[NodeId]) -> Result<NodeId> {
        let y = if self.transposed {
            g.conv_transpose2d(l[0], l[1], Some(l[2]), self.stride, self.pad, (1, 0))?
        } else {
            g.conv2d(l[0], l[1], Some(l[2]), self.stride, self.pad)?
        };
        let sq = g.square(y);
        Ok(g.sum(sq))
    }
}

pub fn grad_conv() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pad = Padding {
        top: 1,
        bottom: 2,
        left: 2,
        right: 1,
    };
    let leaves = [
        random(&[2, 3, 7, 6], -1.0, 1.0, &mut rng),
        random(&[4, 3, 5, 5], -0.5, 0.5, &mut rng),
        random(&[4], -0.5, 0.5, &mut rng),
    ];
    let p = SquaredConv {
        stride: 2,
        pad,
        transposed: false,
    };
    max_error(&p, &leaves, 40)
}

pub fn grad_deconv() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let leaves = [
        random(&[2, 3, 4, 3], -1.0, 1.0, &mut rng),
        random(&[3, 2, 5, 5], -0.5, 0.5, &mut rng),
        random(&[2], -0.5, 0.5, &mut rng),
    ];
    let p = SquaredConv {
        stride: 2,
        pad: Padding::uniform(2),
        transposed: true,
    };
    max_error(&p, &leaves, 40)
}

struct Gdn {
    inverse: bool,
}

impl Probe for Gdn {
    fn build<T: Real>(&self, g: &mut Graph<T>, l: &[NodeId]) -> Result<NodeId> {
        let b2 = g.square(l[1]);
        let beta = g.add_scalar(b2, 1e-6);
        let gamma = g.square(l[2]);
        let y = g.gdn(l[0], beta, gamma, self.inverse)?;
        let sq = g.square(y);
        Ok(g.sum(sq))
    }
}

pub fn grad_gdn(inverse: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let leaves = [
        random(&[2, 4, 3, 3], -2.0, 2.0, &mut rng),
        random(&[4], 0.5, 1.5, &mut rng),
        random(&[4, 4], 0.0, 0.5, &mut rng),
    ];
    max_error(&Gdn { inverse }, &leaves, 30)
}

struct GaussianRate;

impl Probe for GaussianRate {
    fn build<T: Real>(&self, g: &mut Graph<T>, l: &[NodeId]) -> Result<NodeId> {
        let sp = g.softplus(l[2]);
        let sigma = g.lower_bound(sp, 0.04);
        let p = g.gaussian_likelihood(l[0], l[1], sigma)?;
        Ok(g.neg_log2_sum(p))
    }
}

pub fn grad_gaussian() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = Tensor::from_fn(&[1, 3, 4, 4], |_| {
        rng.gen_range(-4i32..=4) as f32 + rng.gen_range(-0.4f32..0.4)
    });
    let leaves = [
        q,
        random(&[1, 3, 4, 4], -3.0, 3.0, &mut rng),
        random(&[1, 3, 4, 4], -1.0, 2.0, &mut rng),
    ];
    max_error(&GaussianRate, &leaves, 48)
}

struct FactorizedRate;

impl Probe for FactorizedRate {
    fn build<T: Real>(&self, g: &mut Graph<T>, l: &[NodeId]) -> Result<NodeId> {
        let p = g.factorized_likelihood(l[0], &l[1..])?;
        Ok(g.neg_log2_sum(p))
    }
}

pub fn grad_factorized() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = 3;
    let mut leaves = vec![random(&[2, c, 3, 3], -6.0, 6.0, &mut rng)];
    for i in 0..factorized::PARAM_COUNT {
        let mut t = factorized::init_param(i, c, || rng.gen::<f32>());
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3f32..0.3);
        }
        leaves.push(t);
    }
    max_error(&FactorizedRate, &leaves, 12)
}

/// Joint loss of one training stage with every in-scope parameter a leaf.
struct StageLoss {
    model: SlimVcModel,
    keys: Vec<usize>,
    stage: u8,
    prev: Tensor,
    cur: Tensor,
}

impl Probe for StageLoss {
    fn build<T: Real>(&self, g: &mut Graph<T>, l: &[NodeId]) -> Result<NodeId> {
        let mut bind = Binder::frozen(&self.model.store);
        for (&key, &node) in self.keys.iter().zip(l) {
            bind.set_override(key, node);
        }
        let widths: Vec<usize> = (0..K).collect();
        let (_, loss) = build_stage_graph(
            &self.model,
            g,
            &mut bind,
            self.stage,
            &self.prev,
            &self.cur,
            &DEFAULT_LAMBDAS,
            &widths,
            17,
        )?;
        Ok(loss)
    }
}

/// Full five-width rate-distortion loss of `stage` on a 48x48 desk batch.
pub fn grad_stage(stage: u8) -> f64 {
    let (prev, cur) = TrainData::Synthetic { seed: 6 }.batch(3, 1, 48);
    let mut model = SlimVcModel::new(Preset::Desk, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(stage as u64);
    let keys = model.keys_of(&stage_groups(stage));
    for &k in &keys {
        for v in model.store.get_mut(k).data_mut() {
            *v += rng.gen_range(-0.02f32..0.02);
        }
    }
    let leaves: Vec<Tensor> = keys.iter().map(|&k| model.store.get(k).clone()).collect();
    let probe = StageLoss {
        model,
        keys,
        stage,
        prev,
        cur,
    };
    max_error(&probe, &leaves, 2)
}

/// Every probe by name.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    vec![
        ("conv2d", grad_conv()),
        ("conv_transpose2d", grad_deconv()),
        ("gdn", grad_gdn(false)),
        ("igdn", grad_gdn(true)),
        ("gaussian", grad_gaussian()),
        ("factorized", grad_factorized()),
        ("stage 1 loss", grad_stage(1)),
        ("stage 2 loss", grad_stage(2)),
    ]
}

// ---- entropy coding ----

/// A table over a random contiguous alphabet, with random masses that range
/// from nearly flat to nearly deterministic.
pub fn random_cdf(rng: &mut ChaCha8Rng) -> QuantizedCdf {
    let n = rng.gen_range(1..200);
    let sharpness = rng.gen_range(0.0..8.0f64);
    let probs: Vec<f64> = (0..n).map(|_| (sharpness * rng.gen::<f64>()).exp()).collect();
    let escape = if rng.gen_bool(0.5) { rng.gen_range(1e-6..1e-2) } else { 0.0 };
    build_cdf(&probs, escape, rng.gen_range(-300..300)).unwrap()
}

/// A symbol drawn from `cdf`, escaped beyond the alphabet now and then.
pub fn draw(cdf: &QuantizedCdf, rng: &mut ChaCha8Rng) -> i32 {
    let esc = cdf.escape_index();
    if rng.gen_bool(0.002) {
        let lo = cdf.offset() - 1 - rng.gen_range(0..1000);
        let hi = cdf.offset() + esc as i32 + rng.gen_range(0..1000);
        return if rng.gen_bool(0.5) { lo } else { hi };
    }
    let idx = cdf.lookup(rng.gen_range(0..cdf.cumulative()[esc]));
    cdf.offset() + idx as i32
}

/// Codes `n` symbols over tables that change every few symbols; returns
/// whether they all decode back.
pub fn fuzz_round_trip(n: usize, seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tables: Vec<QuantizedCdf> = (0..64).map(|_| random_cdf(&mut rng)).collect();
    let mut done = 0;
    while done < n {
        let len = rng.gen_range(1..20_000).min(n - done);
        let cdfs: Vec<&QuantizedCdf> = (0..len).map(|_| &tables[rng.gen_range(0..tables.len())]).collect();
        let symbols: Vec<i32> = cdfs.iter().map(|c| draw(c, &mut rng)).collect();
        let payload = encode_symbols(&symbols, &cdfs).unwrap();
        if decode_symbols(&payload, &cdfs).ok().as_deref() != Some(&symbols[..]) {
            return false;
        }
        done += len;
    }
    true
}

/// Coded bits, ideal bits under the quantized tables, and escape count for
/// one random tensor of symbols.
pub fn coded_vs_ideal(seed: u64) -> (f64, f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tables: Vec<QuantizedCdf> = (0..rng.gen_range(1..8)).map(|_| random_cdf(&mut rng)).collect();
    let n = rng.gen_range(1..4000);
    let cdfs: Vec<&QuantizedCdf> = (0..n).map(|i| &tables[i % tables.len()]).collect();
    let symbols: Vec<i32> = cdfs.iter().map(|c| draw(c, &mut rng)).collect();
    let mut ideal = 0.0;
    let mut escapes = 0;
    for (&s, c) in symbols.iter().zip(&cdfs) {
        match c.index_of(s) {
            Some(i) => ideal += c.cost_bits(i),
            None => {
                ideal += c.cost_bits(c.escape_index());
                escapes += 1;
            }
        }
    }
    let payload = encode_symbols(&symbols, &cdfs).unwrap();
    (8.0 * payload.bytes.len() as f64, ideal, escapes)
}

/// Stated bound on payload length: ideal bits plus 64, plus the 16 raw bits
/// each escape carries.
pub fn within_coder_bound(coded: f64, ideal: f64, escapes: usize) -> bool {
    coded <= ideal + 64.0 + 16.0 * escapes as f64
}

/// Encodes, serializes, parses and decodes `frames`; true when decoded
/// latents match the encoder's exactly and reconstructions bitwise.
pub fn container_round_trip(model: &SlimVcModel, frames: &[Tensor], k: usize, gop: usize) -> bool {
    let enc = encode_sequence(model, frames, k, gop).unwrap();
    let parsed = Container::from_bytes(&enc.container.to_bytes()).unwrap();
    let (recon, latents) = decode_sequence(model, &parsed).unwrap();
    let latents_ok = latents.len() == enc.latents.len()
        && latents.iter().zip(&enc.latents).all(|(a, b)| {
            a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(p, q)| *p as i64 == *q as i64 && p == q)
        });
    let recon_ok = recon.len() == enc.recon.len() && recon.iter().zip(&enc.recon).all(|(a, b)| same_bits(a, b));
    latents_ok && recon_ok
}
