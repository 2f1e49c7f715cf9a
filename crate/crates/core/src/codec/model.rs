use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::entropy::{factorized, gaussian};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::slim::{
    deconv_targets, Binder, ChannelTable, LayerKind, Module, Preset, SlimConv, SwitchableGdn,
    WidthConfig, K, LEAKY_SLOPE,
};
use crate::tensor::{Graph, NodeId, Real, Tensor};

/// Spatial reduction of the feature encoder.
pub const LATENT_STRIDE: usize = 12;
/// Spatial reduction from frame to hyper-latent.
pub const HYPER_STRIDE: usize = 48;

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(SlimConv),
    Gdn(SwitchableGdn),
    LeakyRelu,
}

/// Which factorized prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prior {
    Latent,
    Hyper,
}

/// Trainable parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Module(Module),
    Prior(Prior),
}

/// The six slimmable modules plus per-width factorized priors for the latent
/// (intra frames) and the hyper-latent.
#[derive(Clone, Debug)]
pub struct SlimVcModel {
    pub table: ChannelTable,
    pub widths: WidthConfig,
    pub store: ParamStore,
    stacks: Vec<(Module, Vec<Layer>)>,
    latent_prior: [[usize; factorized::PARAM_COUNT]; K],
    hyper_prior: [[usize; factorized::PARAM_COUNT]; K],
}

impl SlimVcModel {
    pub fn new(preset: Preset, seed: u64) -> Self {
        let table = ChannelTable::new(preset);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = || rng.gen::<f32>();
        let mut stacks = Vec::new();
        for m in Module::ALL {
            let layers = table
                .layers(m)
                .into_iter()
                .enumerate()
                .map(|(i, spec)| {
                    let name = format!("{}.{i}", m.name());
                    match spec.kind {
                        LayerKind::Conv | LayerKind::Deconv => {
                            Layer::Conv(SlimConv::new(&name, spec, &mut store, &mut uniform))
                        }
                        LayerKind::Gdn => {
                            Layer::Gdn(SwitchableGdn::new(&name, spec.cin, false, &mut store))
                        }
                        LayerKind::Igdn => {
                            Layer::Gdn(SwitchableGdn::new(&name, spec.cin, true, &mut store))
                        }
                        LayerKind::LeakyRelu => Layer::LeakyRelu,
                    }
                })
                .collect();
            stacks.push((m, layers));
        }
        let mut prior = |name: &str, channels: [usize; K], store: &mut ParamStore| {
            let mut keys = [[0; factorized::PARAM_COUNT]; K];
            for (k, row) in keys.iter_mut().enumerate() {
                for (i, key) in row.iter_mut().enumerate() {
                    let t = factorized::init_param(i, channels[k], &mut uniform);
                    *key = store.add(format!("{name}.w{k}.{}", factorized::PARAM_NAMES[i]), t);
                }
            }
            keys
        };
        let latent_prior = prior("latent_prior", table.channels.latent, &mut store);
        let hyper_prior = prior("hyper_prior", table.channels.hyper, &mut store);
        Self {
            table,
            widths: WidthConfig::default(),
            store,
            stacks,
            latent_prior,
            hyper_prior,
        }
    }

    pub fn preset(&self) -> Preset {
        self.table.preset
    }

    pub fn layers(&self, m: Module) -> &[Layer] {
        &self
            .stacks
            .iter()
            .find(|(mm, _)| *mm == m)
            .expect("every module is built")
            .1
    }

    /// Parameter keys of the eleven density tensors of `prior` at width `k`.
    pub fn prior_keys(&self, prior: Prior, k: usize) -> &[usize; factorized::PARAM_COUNT] {
        match prior {
            Prior::Latent => &self.latent_prior[k],
            Prior::Hyper => &self.hyper_prior[k],
        }
    }

    /// Every parameter key belonging to `group`.
    pub fn keys(&self, group: Group) -> Vec<usize> {
        match group {
            Group::Module(m) => self
                .layers(m)
                .iter()
                .flat_map(|l| match l {
                    Layer::Conv(c) => vec![c.weight, c.bias],
                    Layer::Gdn(g) => g.beta.iter().chain(&g.gamma).copied().collect(),
                    Layer::LeakyRelu => vec![],
                })
                .collect(),
            Group::Prior(p) => (0..K).flat_map(|k| *self.prior_keys(p, k)).collect(),
        }
    }

    /// Sorted keys of every parameter in `groups`.
    pub fn keys_of(&self, groups: &[Group]) -> Vec<usize> {
        let mask = self.mask(groups);
        (0..mask.len()).filter(|&k| mask[k]).collect()
    }

    /// Trainable mask over all keys for the given groups.
    pub fn mask(&self, groups: &[Group]) -> Vec<bool> {
        let mut m = vec![false; self.store.len()];
        for &g in groups {
            for k in self.keys(g) {
                m[k] = true;
            }
        }
        m
    }

    /// Runs the layer stack of `module` at width `k`. Transposed layers land
    /// on sizes that end at `target`, or double/triple the input without one.
    pub fn run_module<T: Real>(
        &self,
        g: &mut Graph<T>,
        bind: &mut Binder<'_>,
        module: Module,
        mut x: NodeId,
        k: usize,
        target: Option<(usize, usize)>,
    ) -> Result<NodeId> {
        self.widths.check(k)?;
        let layers = self.layers(module);
        let strides: Vec<usize> = layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(c) if c.spec.kind == LayerKind::Deconv => Some(c.spec.stride),
                _ => None,
            })
            .collect();
        let targets = match target {
            Some(t) => deconv_targets(&strides, t).into_iter().map(Some).collect(),
            None => vec![None; strides.len()],
        };
        let mut next_target = targets.into_iter();
        for layer in layers {
            x = match layer {
                Layer::Conv(c) => {
                    let t = if c.spec.kind == LayerKind::Deconv {
                        next_target.next().flatten()
                    } else {
                        None
                    };
                    c.forward(g, bind, x, k, t)?
                }
                Layer::Gdn(gdn) => gdn.forward(g, bind, x, k)?,
                Layer::LeakyRelu => g.leaky_relu(x, LEAKY_SLOPE),
            };
        }
        Ok(x)
    }

    /// `z = f(x)`. Frame sides must be multiples of 12.
    pub fn analyze<T: Real>(
        &self,
        g: &mut Graph<T>,
        bind: &mut Binder<'_>,
        x: NodeId,
        k: usize,
    ) -> Result<NodeId> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != crate::slim::IMAGE_CHANNELS {
            return Err(Error::shape(format!("analysis expects 3 channels, got {c}")));
        }
        if h % LATENT_STRIDE != 0 || w % LATENT_STRIDE != 0 {
            return Err(Error::shape(format!(
                "frame {w}x{h} is not padded to a multiple of {LATENT_STRIDE}"
            )));
        }
        self.run_module(g, bind, Module::Fe, x, k, None)
    }

    /// `x_hat = g(z_hat)`, unclamped. The output is `LATENT_STRIDE` times the latent size.
    pub fn synthesize<T: Real>(
        &self,
        g: &mut Graph<T>,
        bind: &mut Binder<'_>,
        z: NodeId,
        k: usize,
    ) -> Result<NodeId> {
        let (_, _, h, w) = g.value(z).dims4()?;
        self.run_module(g, bind, Module::Fd, z, k, Some((h * LATENT_STRIDE, w * LATENT_STRIDE)))
    }

    /// Hyper-latent from the current and previous quantized latents.
    pub fn hyper_encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        bind: &mut Binder<'_>,
        z_t: NodeId,
        z_prev: NodeId,
        k: usize,
    ) -> Result<NodeId> {
        let both = g.concat_channels(z_t, z_prev)?;
        self.run_module(g, bind, Module::He, both, k, None)
    }

    /// Hyper decoder features at latent resolution `latent_hw`.
    pub fn hyper_decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        bind: &mut Binder<'_>,
        h: NodeId,
        k: usize,
        latent_hw: (usize, usize),
    ) -> Result<NodeId> {
        self.run_module(g, bind, Module::Hd, h, k, Some(latent_hw))
    }

    pub fn temporal_prior<T: Real>(
        &self,
        g: &mut Graph<T>,
        bind: &mut Binder<'_>,
        z_prev: NodeId,
        k: usize,
    ) -> Result<NodeId> {
        self.run_module(g, bind, Module::Tpm, z_prev, k, None)
    }

    /// `(mu, sigma)` of the residual latent.
    pub fn entropy_params<T: Real>(
        &self,
        g: &mut Graph<T>,
        bind: &mut Binder<'_>,
        hd: NodeId,
        tpm: NodeId,
        k: usize,
    ) -> Result<(NodeId, NodeId)> {
        let x = g.concat_channels(hd, tpm)?;
        let out = self.run_module(g, bind, Module::Epm, x, k, None)?;
        let c = self.table.channels.latent[k];
        let mu = g.slice_channels(out, 0, c)?;
        let raw = g.slice_channels(out, c, c)?;
        let sp = g.softplus(raw);
        let sigma = g.lower_bound(sp, gaussian::SCALE_BOUND);
        Ok((mu, sigma))
    }

    /// Bound density parameters of `prior` at width `k`.
    pub fn prior_nodes<T: Real>(
        &self,
        g: &mut Graph<T>,
        bind: &mut Binder<'_>,
        prior: Prior,
        k: usize,
    ) -> Vec<NodeId> {
        self.prior_keys(prior, k)
            .iter()
            .map(|&key| bind.node(g, key))
            .collect()
    }

    /// Per-element likelihood of `q` under `prior` at width `k`.
    pub fn prior_likelihood<T: Real>(
        &self,
        g: &mut Graph<T>,
        bind: &mut Binder<'_>,
        prior: Prior,
        q: NodeId,
        k: usize,
    ) -> Result<NodeId> {
        let ps = self.prior_nodes(g, bind, prior, k);
        g.factorized_likelihood(q, &ps)
    }

    /// Dense `f32` parameters of `prior` at width `k`, in density order.
    pub fn prior_tensors(&self, prior: Prior, k: usize) -> Vec<&Tensor> {
        self.prior_keys(prior, k)
            .iter()
            .map(|&key| self.store.get(key))
            .collect()
    }
}

/// Inference conveniences over `f32` tensors with all parameters frozen.
impl SlimVcModel {
    fn eval1(
        &self,
        x: &Tensor,
        f: impl FnOnce(&Self, &mut Graph<f32>, &mut Binder<'_>, NodeId) -> Result<NodeId>,
        what: &str,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.store);
        let xi = g.input(x.clone());
        let out = f(self, &mut g, &mut b, xi)?;
        let v = g.value(out).clone();
        if !v.is_finite() {
            return Err(Error::NonFinite(what.into()));
        }
        Ok(v)
    }

    pub fn analyze_tensor(&self, x: &Tensor, k: usize) -> Result<Tensor> {
        self.eval1(x, |m, g, b, x| m.analyze(g, b, x, k), "feature encoder")
    }

    /// Reconstruction clamped to `[0, 1]`.
    pub fn synthesize_tensor(&self, z: &Tensor, k: usize) -> Result<Tensor> {
        let y = self.eval1(z, |m, g, b, x| m.synthesize(g, b, x, k), "feature decoder")?;
        Ok(y.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn hyper_encode_tensor(&self, z_t: &Tensor, z_prev: &Tensor, k: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.store);
        let a = g.input(z_t.clone());
        let p = g.input(z_prev.clone());
        let out = self.hyper_encode(&mut g, &mut b, a, p, k)?;
        let v = g.value(out).clone();
        if !v.is_finite() {
            return Err(Error::NonFinite("hyper encoder".into()));
        }
        Ok(v)
    }

    pub fn hyper_decode_tensor(&self, h: &Tensor, k: usize, latent_hw: (usize, usize)) -> Result<Tensor> {
        self.eval1(h, |m, g, b, x| m.hyper_decode(g, b, x, k, latent_hw), "hyper decoder")
    }

    pub fn temporal_prior_tensor(&self, z_prev: &Tensor, k: usize) -> Result<Tensor> {
        self.eval1(z_prev, |m, g, b, x| m.temporal_prior(g, b, x, k), "temporal prior")
    }

    pub fn entropy_params_tensor(
        &self,
        hd: &Tensor,
        tpm: &Tensor,
        k: usize,
    ) -> Result<crate::entropy::DistributionParams> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.store);
        let h = g.input(hd.clone());
        let t = g.input(tpm.clone());
        let (mu, sigma) = self.entropy_params(&mut g, &mut b, h, t, k)?;
        let (mu, sigma) = (g.value(mu).clone(), g.value(sigma).clone());
        if !mu.is_finite() || !sigma.is_finite() {
            return Err(Error::NonFinite("entropy parameter module".into()));
        }
        crate::entropy::DistributionParams::new(mu, sigma)
    }
}
