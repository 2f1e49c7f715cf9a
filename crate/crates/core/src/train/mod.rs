//! Rate-distortion training in two stages: first the feature codec with its
//! latent prior, then the hyper and temporal modules on frame pairs with the
//! feature codec frozen.

pub mod checkpoint;
pub mod data;
pub mod optim;

use std::fmt::Write as _;

use crate::codec::{encode_sequence, Group, Prior, SlimVcModel};
use crate::entropy::quantize_infer;
use crate::error::{Error, Result};
use crate::slim::{Binder, Module, Preset, K};
use crate::tensor::{Graph, NodeId, Real, Tensor};

pub use data::{Pattern, SyntheticDataset, TrainData};
pub use optim::Adam;

pub const DEFAULT_LAMBDAS: [f64; K] = [0.20, 0.10, 0.05, 0.025, 0.0125];

/// Learning rate used when a config does not set one. The desk preset trains
/// for only 2000 steps per stage and needs a far larger step than the full model.
pub fn default_lr(preset: Preset) -> f64 {
    match preset {
        Preset::Desk => 1e-3,
        Preset::Paper => 5e-5,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub preset: Preset,
    /// Rate weight per width index, largest at the narrowest width.
    pub lambdas: [f64; K],
    pub lr: f64,
    pub betas: (f64, f64),
    pub clip: f64,
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    pub batch: usize,
    pub crop: usize,
    pub seed: u64,
    pub gop: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            lambdas: DEFAULT_LAMBDAS,
            lr: default_lr(Preset::Desk),
            betas: (0.9, 0.999),
            clip: 1.0,
            steps_stage1: 2000,
            steps_stage2: 2000,
            batch: 8,
            crop: 48,
            seed: 0,
            gop: 10,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Config("every lambda must be positive".into()));
        }
        if self.lambdas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(
                "lambdas must decrease strictly with the width index".into(),
            ));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || self.batch == 0 || self.gop == 0 || self.gop > 255 {
            return Err(Error::Config("lr, batch and gop (<= 255) must be positive".into()));
        }
        if self.crop == 0 || !self.crop.is_multiple_of(crate::codec::HYPER_STRIDE) {
            return Err(Error::Config("crop must be a positive multiple of 48".into()));
        }
        Ok(())
    }

    /// Applies `key=value` lines over the current values. Blank lines and
    /// lines starting with `#` are skipped; unknown keys are errors. Changing
    /// the preset without setting `lr` resets `lr` to that preset's default.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        let (preset, mut lr_set) = (self.preset, false);
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || Error::Config(format!("line {}: bad value '{value}' for {key}", n + 1));
            match key {
                "preset" => self.preset = value.parse()?,
                "steps_stage1" => self.steps_stage1 = value.parse().map_err(|_| bad())?,
                "steps_stage2" => self.steps_stage2 = value.parse().map_err(|_| bad())?,
                "batch" => self.batch = value.parse().map_err(|_| bad())?,
                "seed" => self.seed = value.parse().map_err(|_| bad())?,
                "gop" => self.gop = value.parse().map_err(|_| bad())?,
                "lr" => {
                    self.lr = value.parse().map_err(|_| bad())?;
                    lr_set = true;
                }
                _ => match key.strip_prefix("lambda_").and_then(|k| k.parse::<usize>().ok()) {
                    Some(k) if k < K => self.lambdas[k] = value.parse().map_err(|_| bad())?,
                    _ => return Err(Error::Config(format!("line {}: unknown key '{key}'", n + 1))),
                },
            }
        }
        if self.preset != preset && !lr_set {
            self.lr = default_lr(self.preset);
        }
        self.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply(text)?;
        Ok(c)
    }

    /// Every setting as `key=value` lines, re-parsable by [`TrainingConfig::parse`].
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "preset={}", self.preset);
        for (k, l) in self.lambdas.iter().enumerate() {
            let _ = writeln!(s, "lambda_{k}={l}");
        }
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "steps_stage1={}", self.steps_stage1);
        let _ = writeln!(s, "steps_stage2={}", self.steps_stage2);
        let _ = writeln!(s, "batch={}", self.batch);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "gop={}", self.gop);
        s
    }
}

/// `D + lambda * bits / pixels`.
pub fn rd_loss(mse: f64, bits: f64, lambda: f64, pixels: f64) -> f64 {
    mse + lambda * bits / pixels
}

/// Graph nodes of one width's term in the joint loss.
#[derive(Clone, Copy, Debug)]
pub struct WidthTerm {
    pub k: usize,
    pub mse: NodeId,
    pub bits: NodeId,
    pub loss: NodeId,
}

/// One stage-1 term: noisy latent, reconstruction and latent-prior rate.
pub fn stage1_term<T: Real>(
    model: &SlimVcModel,
    g: &mut Graph<T>,
    bind: &mut Binder<'_>,
    x: NodeId,
    k: usize,
    lambda: f64,
    noise_seed: u64,
) -> Result<WidthTerm> {
    let (b, _, h, w) = g.value(x).dims4()?;
    let z = model.analyze(g, bind, x, k)?;
    let noise = crate::entropy::quantize_train(&Tensor::zeros(g.value(z).shape()), noise_seed);
    let u = g.input(noise.cast());
    let zt = g.add(z, u)?;
    let xh = model.synthesize(g, bind, zt, k)?;
    let mse = g.mse(x, xh)?;
    let p = model.prior_likelihood(g, bind, Prior::Latent, zt, k)?;
    let bits = g.neg_log2_sum(p);
    let rate = g.mul_scalar(bits, lambda / (b * h * w) as f64);
    let loss = g.add(mse, rate)?;
    Ok(WidthTerm { k, mse, bits, loss })
}

/// Per-width fixed inputs of a stage-2 term.
#[derive(Clone, Debug)]
pub struct PairLatents {
    pub k: usize,
    pub prev: Tensor,
    pub cur: Tensor,
    /// Distortion of the frozen feature codec on the current frame.
    pub mse: f64,
}

/// Rounds both frames' latents at width `k` and measures the frozen distortion.
pub fn pair_latents(model: &SlimVcModel, prev: &Tensor, cur: &Tensor, k: usize) -> Result<PairLatents> {
    let zp = quantize_infer(&model.analyze_tensor(prev, k)?);
    let zc = quantize_infer(&model.analyze_tensor(cur, k)?);
    let xh = model.synthesize_tensor(&zc, k)?;
    let mse = crate::codec::pipeline::mse(cur, &xh)?;
    Ok(PairLatents {
        k,
        prev: zp,
        cur: zc,
        mse,
    })
}

/// One stage-2 term: hyper rate under noise plus the exact integer residual's
/// rate under the predicted Gaussian. The distortion is a constant.
pub fn stage2_term<T: Real>(
    model: &SlimVcModel,
    g: &mut Graph<T>,
    bind: &mut Binder<'_>,
    pl: &PairLatents,
    pixels: usize,
    lambda: f64,
    noise_seed: u64,
) -> Result<WidthTerm> {
    let k = pl.k;
    let zp = g.input(pl.prev.cast());
    let zc = g.input(pl.cur.cast());
    let res = g.input(pl.cur.zip_map(&pl.prev, |a, b| a - b)?.cast());
    let h = model.hyper_encode(g, bind, zc, zp, k)?;
    let noise = crate::entropy::quantize_train(&Tensor::zeros(g.value(h).shape()), noise_seed);
    let u = g.input(noise.cast());
    let ht = g.add(h, u)?;
    let ph = model.prior_likelihood(g, bind, Prior::Hyper, ht, k)?;
    let (_, _, lh, lw) = pl.prev.dims4()?;
    let hd = model.hyper_decode(g, bind, ht, k, (lh, lw))?;
    let tp = model.temporal_prior(g, bind, zp, k)?;
    let (mu, sigma) = model.entropy_params(g, bind, hd, tp, k)?;
    let pr = g.gaussian_likelihood(res, mu, sigma)?;
    let bh = g.neg_log2_sum(ph);
    let br = g.neg_log2_sum(pr);
    let bits = g.add(bh, br)?;
    let mse = g.input(Tensor::scalar(T::of(pl.mse)));
    let rate = g.mul_scalar(bits, lambda / pixels as f64);
    let loss = g.add(mse, rate)?;
    Ok(WidthTerm { k, mse, bits, loss })
}

/// Sum of the width terms.
pub fn joint_loss<T: Real>(g: &mut Graph<T>, terms: &[WidthTerm]) -> Result<NodeId> {
    let mut acc = terms
        .first()
        .ok_or_else(|| Error::invalid("joint loss over zero widths"))?
        .loss;
    for t in &terms[1..] {
        acc = g.add(acc, t.loss)?;
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    /// Joint loss summed over widths.
    pub loss: f64,
    /// Rate averaged over widths, bits per pixel.
    pub rate_bpp: f64,
    /// Distortion averaged over widths.
    pub mse: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("step,loss,rate_bpp,mse\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.step, r.loss, r.rate_bpp, r.mse);
    }
    s
}

/// Parameter groups trained in `stage`.
pub fn stage_groups(stage: u8) -> Vec<Group> {
    match stage {
        1 => vec![
            Group::Module(Module::Fe),
            Group::Module(Module::Fd),
            Group::Prior(Prior::Latent),
        ],
        _ => vec![
            Group::Module(Module::He),
            Group::Module(Module::Hd),
            Group::Module(Module::Tpm),
            Group::Module(Module::Epm),
            Group::Prior(Prior::Hyper),
        ],
    }
}

fn step_key(cfg: &TrainingConfig, stage: u8, step: usize) -> u64 {
    data::mix(cfg.seed, stage as u64, step as u64)
}

/// Builds the stage graph for one batch and returns per-width terms and the joint loss.
#[allow(clippy::too_many_arguments)]
pub fn build_stage_graph<T: Real>(
    model: &SlimVcModel,
    g: &mut Graph<T>,
    bind: &mut Binder<'_>,
    stage: u8,
    prev: &Tensor,
    cur: &Tensor,
    lambdas: &[f64; K],
    widths: &[usize],
    key: u64,
) -> Result<(Vec<WidthTerm>, NodeId)> {
    let mut terms = Vec::with_capacity(widths.len());
    if stage == 1 {
        let x = g.input(cur.cast());
        for &k in widths {
            let seed = data::mix(key, 100 + k as u64, 0);
            terms.push(stage1_term(model, g, bind, x, k, lambdas[k], seed)?);
        }
    } else {
        let (b, _, h, w) = cur.dims4()?;
        for &k in widths {
            let pl = pair_latents(model, prev, cur, k)?;
            let seed = data::mix(key, 200 + k as u64, 0);
            terms.push(stage2_term(model, g, bind, &pl, b * h * w, lambdas[k], seed)?);
        }
    }
    let loss = joint_loss(g, &terms)?;
    Ok((terms, loss))
}

/// Runs `steps` optimizer steps of `stage` and returns the loss trace.
pub fn train_stage(
    model: &mut SlimVcModel,
    cfg: &TrainingConfig,
    data: &TrainData,
    stage: u8,
    steps: usize,
) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    data.check(cfg.crop, stage == 2)?;
    let mask = model.mask(&stage_groups(stage));
    let frozen: Vec<(usize, Tensor)> = (0..model.store.len())
        .filter(|&k| !mask[k])
        .map(|k| (k, model.store.get(k).clone()))
        .collect();
    let mut opt = Adam::new(cfg.lr, cfg.betas, cfg.clip, model.store.len());
    let widths: Vec<usize> = (0..K).collect();
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let key = step_key(cfg, stage, step);
        let (prev, cur) = data.batch(key, cfg.batch, cfg.crop);
        let pixels = (cfg.batch * cfg.crop * cfg.crop) as f64;
        let (row, grads) = {
            let mut g = Graph::<f32>::new();
            let mut bind = Binder::with_trainable(&model.store, mask.clone());
            let (terms, loss) =
                build_stage_graph(model, &mut g, &mut bind, stage, &prev, &cur, &cfg.lambdas, &widths, key)?;
            let lv = g.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Diverged { step, loss: lv });
            }
            let n = terms.len() as f64;
            let row = TraceRow {
                step,
                loss: lv,
                rate_bpp: terms.iter().map(|t| g.value(t.bits).data()[0] as f64).sum::<f64>()
                    / pixels
                    / n,
                mse: terms.iter().map(|t| g.value(t.mse).data()[0] as f64).sum::<f64>() / n,
            };
            let grads = g.backward(loss)?;
            let grads: Vec<(usize, Tensor)> = grads.params().map(|(k, t)| (k, t.clone())).collect();
            (row, grads)
        };
        if grads.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::Diverged {
                step,
                loss: f64::NAN,
            });
        }
        opt.step(&mut model.store, &grads);
        trace.push(row);
    }
    for (k, t) in &frozen {
        if model.store.get(*k) != t {
            return Err(Error::invalid(format!(
                "frozen parameter {} changed during stage {stage}",
                model.store.name(*k)
            )));
        }
    }
    Ok(trace)
}

pub fn train_stage1(model: &mut SlimVcModel, cfg: &TrainingConfig, data: &TrainData) -> Result<Vec<TraceRow>> {
    train_stage(model, cfg, data, 1, cfg.steps_stage1)
}

pub fn train_stage2(model: &mut SlimVcModel, cfg: &TrainingConfig, data: &TrainData) -> Result<Vec<TraceRow>> {
    train_stage(model, cfg, data, 2, cfg.steps_stage2)
}

/// Centered moving average with the given window (shrunk at the ends).
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub bpp: Vec<f64>,
    pub mse: Vec<f64>,
    pub psnr: Vec<f64>,
    pub mean_bpp: f64,
    pub mean_mse: f64,
    pub mean_psnr: f64,
}

/// Real coding of `frames` at width `k`: rounded symbols and actual payload lengths.
pub fn evaluate(model: &SlimVcModel, frames: &[Tensor], k: usize, gop: usize) -> Result<EvalReport> {
    let enc = encode_sequence(model, frames, k, gop)?;
    let (_, _, h, w) = frames[0].dims4()?;
    let px = (h * w) as f64;
    let bpp: Vec<f64> = enc.reports.iter().map(|r| r.metrics.bits() as f64 / px).collect();
    let mse: Vec<f64> = enc.reports.iter().map(|r| r.metrics.mse).collect();
    let psnr: Vec<f64> = enc.reports.iter().map(|r| r.metrics.psnr).collect();
    let n = frames.len() as f64;
    let mean_mse = mse.iter().sum::<f64>() / n;
    Ok(EvalReport {
        mean_bpp: bpp.iter().sum::<f64>() / n,
        mean_psnr: crate::codec::pipeline::psnr(mean_mse),
        mean_mse,
        bpp,
        mse,
        psnr,
    })
}
