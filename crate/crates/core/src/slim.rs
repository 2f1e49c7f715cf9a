//! Width configuration, per-module channel tables, and the slimmable layers.

use std::fmt;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{same_padding, transposed_padding, Graph, NodeId, Padding, Real, Tensor};

/// Number of operating points.
pub const K: usize = 5;

pub const WIDTH_FACTORS: [f64; K] = [0.25, 0.375, 0.5, 0.75, 1.0];

/// Negative slope of every leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Added to squared GDN offsets so the denominator never vanishes.
pub const GDN_BETA_MIN: f64 = 1e-6;

/// Channel count of frames.
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct WidthConfig {
    factors: Vec<f64>,
}

impl Default for WidthConfig {
    fn default() -> Self {
        Self {
            factors: WIDTH_FACTORS.to_vec(),
        }
    }
}

impl WidthConfig {
    pub fn new(factors: Vec<f64>) -> Result<Self> {
        if factors.is_empty() || factors.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("width factors must be strictly increasing".into()));
        }
        if *factors.last().unwrap() != 1.0 || factors[0] <= 0.0 {
            return Err(Error::Config("width factors must lie in (0, 1] and end at 1".into()));
        }
        Ok(Self { factors })
    }

    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn check(&self, k: usize) -> Result<()> {
        if k >= self.len() {
            return Err(Error::invalid(format!(
                "width index {k} out of range 0..{}",
                self.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn id(self) -> u8 {
        match self {
            Preset::Paper => 0,
            Preset::Desk => 1,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Preset::Paper),
            1 => Ok(Preset::Desk),
            _ => Err(Error::format(format!("unknown preset id {id}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset '{s}' (expected paper or desk)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Channel counts per width index of every distinct tensor width in the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Channels {
    /// Latent `z`.
    pub latent: [usize; K],
    /// Hyper-latent and hyper path.
    pub hyper: [usize; K],
    /// Output of the hyper decoder and of the temporal prior.
    pub prior: [usize; K],
    pub tpm1: [usize; K],
    pub tpm2: [usize; K],
    pub epm1: [usize; K],
    pub epm2: [usize; K],
}

impl Channels {
    pub fn paper() -> Self {
        Self {
            latent: [48, 72, 96, 144, 192],
            hyper: [64, 96, 128, 192, 256],
            prior: [160, 240, 320, 480, 640],
            tpm1: [107, 160, 213, 320, 426],
            tpm2: [133, 200, 267, 400, 533],
            epm1: [400, 600, 800, 1200, 1600],
            epm2: [320, 480, 640, 960, 1280],
        }
    }

    /// Every full-size count divided by 8, rounded up.
    pub fn desk() -> Self {
        let p = Self::paper();
        let d = |a: [usize; K]| a.map(|c| c.div_ceil(8));
        Self {
            latent: d(p.latent),
            hyper: d(p.hyper),
            prior: d(p.prior),
            tpm1: d(p.tpm1),
            tpm2: d(p.tpm2),
            epm1: d(p.epm1),
            epm2: d(p.epm2),
        }
    }

    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Module {
    Fe,
    Fd,
    He,
    Hd,
    Tpm,
    Epm,
}

impl Module {
    pub const ALL: [Module; 6] = [
        Module::Fe,
        Module::Fd,
        Module::He,
        Module::Hd,
        Module::Tpm,
        Module::Epm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Module::Fe => "fe",
            Module::Fd => "fd",
            Module::He => "he",
            Module::Hd => "hd",
            Module::Tpm => "tpm",
            Module::Epm => "epm",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Module::Fe => "SlimFE",
            Module::Fd => "SlimFD",
            Module::He => "SlimHE",
            Module::Hd => "SlimHD",
            Module::Tpm => "SlimTPM",
            Module::Epm => "SlimEPM",
        }
    }
}

impl std::str::FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Module::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s) || m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown module '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Deconv,
    Gdn,
    Igdn,
    LeakyRelu,
}

/// One layer of a module. For activations and GDNs `cin == cout`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub cin: [usize; K],
    pub cout: [usize; K],
}

impl LayerSpec {
    fn conv(kernel: usize, stride: usize, cin: [usize; K], cout: [usize; K]) -> Self {
        Self {
            kind: LayerKind::Conv,
            kernel,
            stride,
            cin,
            cout,
        }
    }

    fn deconv(kernel: usize, stride: usize, cin: [usize; K], cout: [usize; K]) -> Self {
        Self {
            kind: LayerKind::Deconv,
            ..Self::conv(kernel, stride, cin, cout)
        }
    }

    fn pointwise(kind: LayerKind, c: [usize; K]) -> Self {
        Self {
            kind,
            kernel: 1,
            stride: 1,
            cin: c,
            cout: c,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv | LayerKind::Deconv)
    }

    /// Shape of the full-width weight tensor.
    pub fn weight_shape(&self) -> Vec<usize> {
        self.weight_shape_at(K - 1)
    }

    /// Shape of the leading weight block used at width `k`.
    pub fn weight_shape_at(&self, k: usize) -> Vec<usize> {
        let (i, o, kk) = (self.cin[k], self.cout[k], self.kernel);
        match self.kind {
            LayerKind::Deconv => vec![i, o, kk, kk],
            _ => vec![o, i, kk, kk],
        }
    }
}

/// The full wiring of the model for one preset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelTable {
    pub preset: Preset,
    pub channels: Channels,
}

impl ChannelTable {
    pub fn new(preset: Preset) -> Self {
        Self {
            preset,
            channels: Channels::for_preset(preset),
        }
    }

    pub fn layers(&self, module: Module) -> Vec<LayerSpec> {
        use LayerKind::*;
        let c = &self.channels;
        let img = [IMAGE_CHANNELS; K];
        let two_latent = c.latent.map(|v| 2 * v);
        let two_prior = c.prior.map(|v| 2 * v);
        match module {
            Module::Fe => vec![
                LayerSpec::conv(9, 3, img, c.latent),
                LayerSpec::pointwise(Gdn, c.latent),
                LayerSpec::conv(5, 2, c.latent, c.latent),
                LayerSpec::pointwise(Gdn, c.latent),
                LayerSpec::conv(5, 2, c.latent, c.latent),
                LayerSpec::pointwise(Gdn, c.latent),
            ],
            Module::Fd => vec![
                LayerSpec::pointwise(Igdn, c.latent),
                LayerSpec::deconv(5, 2, c.latent, c.latent),
                LayerSpec::pointwise(Igdn, c.latent),
                LayerSpec::deconv(5, 2, c.latent, c.latent),
                LayerSpec::pointwise(Igdn, c.latent),
                LayerSpec::deconv(9, 3, c.latent, img),
            ],
            Module::He => vec![
                LayerSpec::conv(3, 1, two_latent, c.hyper),
                LayerSpec::pointwise(LeakyRelu, c.hyper),
                LayerSpec::conv(5, 2, c.hyper, c.hyper),
                LayerSpec::pointwise(LeakyRelu, c.hyper),
                LayerSpec::conv(5, 2, c.hyper, c.hyper),
            ],
            Module::Hd => vec![
                LayerSpec::deconv(5, 2, c.hyper, c.hyper),
                LayerSpec::pointwise(LeakyRelu, c.hyper),
                LayerSpec::deconv(5, 2, c.hyper, c.hyper),
                LayerSpec::pointwise(LeakyRelu, c.hyper),
                LayerSpec::conv(3, 1, c.hyper, c.prior),
            ],
            Module::Tpm => vec![
                LayerSpec::conv(5, 1, c.latent, c.tpm1),
                LayerSpec::pointwise(LeakyRelu, c.tpm1),
                LayerSpec::conv(5, 1, c.tpm1, c.tpm2),
                LayerSpec::pointwise(LeakyRelu, c.tpm2),
                LayerSpec::conv(5, 1, c.tpm2, c.prior),
            ],
            Module::Epm => vec![
                LayerSpec::conv(1, 1, two_prior, c.epm1),
                LayerSpec::pointwise(LeakyRelu, c.epm1),
                LayerSpec::conv(1, 1, c.epm1, c.epm2),
                LayerSpec::pointwise(LeakyRelu, c.epm2),
                LayerSpec::conv(1, 1, c.epm2, two_latent),
            ],
        }
    }
}

/// Sizes `(h, w)` produced by each transposed layer of a stack with the given
/// strides so that the last one lands on `target`.
pub fn deconv_targets(strides: &[usize], target: (usize, usize)) -> Vec<(usize, usize)> {
    let mut out = vec![target; strides.len()];
    for i in (0..strides.len().saturating_sub(1)).rev() {
        let (h, w) = out[i + 1];
        out[i] = (h.div_ceil(strides[i + 1]), w.div_ceil(strides[i + 1]));
    }
    out
}

/// Slimmable convolution or transposed convolution whose width-`k` weights are
/// the leading sub-block of one shared full-width tensor.
#[derive(Clone, Debug)]
pub struct SlimConv {
    pub name: String,
    pub spec: LayerSpec,
    pub weight: usize,
    pub bias: usize,
}

impl SlimConv {
    /// Registers full-width weight and bias, Glorot-uniform initialized.
    pub fn new(
        name: &str,
        spec: LayerSpec,
        store: &mut ParamStore,
        uniform: &mut impl FnMut() -> f32,
    ) -> Self {
        let shape = spec.weight_shape();
        let (cout, cin) = (spec.cout[K - 1], spec.cin[K - 1]);
        let rf = spec.kernel * spec.kernel;
        let limit = (6.0 / ((cin + cout) * rf) as f64).sqrt() as f32;
        let w = Tensor::from_fn(&shape, |_| (2.0 * uniform() - 1.0) * limit);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            name: name.to_string(),
            spec,
            weight,
            bias,
        }
    }

    /// Dense weight and bias of width `k`.
    pub fn slice_weights(&self, store: &ParamStore, k: usize) -> Result<(Tensor, Tensor)> {
        if k >= K {
            return Err(Error::invalid(format!("{}: width index {k} out of range", self.name)));
        }
        let w = store.get(self.weight).slice_leading(&self.spec.weight_shape_at(k))?;
        let b = store.get(self.bias).slice_leading(&[self.spec.cout[k]])?;
        Ok((w, b))
    }

    /// Applies the width-`k` slice. Transposed layers land on `target`; plain
    /// convolutions use same padding and ignore it.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        bind: &mut Binder<'_>,
        x: NodeId,
        k: usize,
        target: Option<(usize, usize)>,
    ) -> Result<NodeId> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.spec.cin[k] {
            return Err(Error::shape(format!(
                "{} at width {k}: expected {} input channels, got {c}",
                self.name, self.spec.cin[k]
            )));
        }
        let wf = bind.node(g, self.weight);
        let bf = bind.node(g, self.bias);
        let wk = g.slice_leading(wf, &self.spec.weight_shape_at(k))?;
        let bk = g.slice_leading(bf, &[self.spec.cout[k]])?;
        let (kk, s) = (self.spec.kernel, self.spec.stride);
        match self.spec.kind {
            LayerKind::Deconv => {
                let (th, tw) = target.unwrap_or((h * s, w * s));
                let (top, bottom) = transposed_padding(h, kk, s, th)?;
                let (left, right) = transposed_padding(w, kk, s, tw)?;
                let pad = Padding {
                    top,
                    bottom,
                    left,
                    right,
                };
                g.conv_transpose2d(x, wk, Some(bk), s, pad, (0, 0))
            }
            _ => {
                let (_, top, bottom) = same_padding(h, kk, s);
                let (_, left, right) = same_padding(w, kk, s);
                let pad = Padding {
                    top,
                    bottom,
                    left,
                    right,
                };
                g.conv2d(x, wk, Some(bk), s, pad)
            }
        }
    }
}

/// Divisive normalization with an independent `(beta_raw, gamma_raw)` per width.
#[derive(Clone, Debug)]
pub struct SwitchableGdn {
    pub name: String,
    pub inverse: bool,
    pub beta: [usize; K],
    pub gamma: [usize; K],
}

impl SwitchableGdn {
    /// `beta_raw = 1`, `gamma_raw = 0.1 I` at every width.
    pub fn new(name: &str, channels: [usize; K], inverse: bool, store: &mut ParamStore) -> Self {
        let mut beta = [0; K];
        let mut gamma = [0; K];
        for k in 0..K {
            let c = channels[k];
            beta[k] = store.add(format!("{name}.w{k}.beta"), Tensor::ones(&[c]));
            let g = Tensor::from_fn(&[c, c], |i| if i / c == i % c { 0.1 } else { 0.0 });
            gamma[k] = store.add(format!("{name}.w{k}.gamma"), g);
        }
        Self {
            name: name.to_string(),
            inverse,
            beta,
            gamma,
        }
    }

    /// Effective `(beta, gamma)` at width `k`.
    pub fn effective(&self, store: &ParamStore, k: usize) -> (Tensor, Tensor) {
        let b = store.get(self.beta[k]).map(|v| v * v + GDN_BETA_MIN as f32);
        let g = store.get(self.gamma[k]).map(|v| v * v);
        (b, g)
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        bind: &mut Binder<'_>,
        x: NodeId,
        k: usize,
    ) -> Result<NodeId> {
        let c = g.value(x).dims4()?.1;
        let expected = bind.store.get(self.beta[k]).numel();
        if c != expected {
            return Err(Error::shape(format!(
                "{} at width {k}: expected {expected} channels, got {c}",
                self.name
            )));
        }
        let br = bind.node(g, self.beta[k]);
        let gr = bind.node(g, self.gamma[k]);
        let b2 = g.square(br);
        let beta = g.add_scalar(b2, GDN_BETA_MIN);
        let gamma = g.square(gr);
        g.gdn(x, beta, gamma, self.inverse)
    }
}

/// Binds stored parameters into a graph, optionally substituting caller-owned
/// nodes for some keys (gradient checks) and marking which keys train.
pub struct Binder<'a> {
    pub store: &'a ParamStore,
    trainable: Vec<bool>,
    overrides: Vec<(usize, NodeId)>,
}

impl<'a> Binder<'a> {
    /// Nothing trains.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: vec![false; store.len()],
            overrides: Vec::new(),
        }
    }

    pub fn with_trainable(store: &'a ParamStore, trainable: Vec<bool>) -> Self {
        assert_eq!(trainable.len(), store.len());
        Self {
            store,
            trainable,
            overrides: Vec::new(),
        }
    }

    pub fn set_override(&mut self, key: usize, node: NodeId) {
        self.overrides.push((key, node));
    }

    pub fn node<T: Real>(&mut self, g: &mut Graph<T>, key: usize) -> NodeId {
        if let Some(&(_, n)) = self.overrides.iter().find(|(k, _)| *k == key) {
            return n;
        }
        g.param(key, self.store.get(key), self.trainable[key])
    }
}
