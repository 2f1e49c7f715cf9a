//! Closed-form parameter, MAC and memory accounting, and wall-clock timing.
//!
//! Counting convention: convolution weights only (no biases), each GDN adds
//! `C^2 + C`, one FLOP is one multiply-accumulate, a convolution costs
//! `kh*kw*Cin*Cout` per output position, a transposed convolution the same per
//! input position, and a GDN `C^2 + 2C` per position.

use std::fmt::Write as _;
use std::time::Instant;

use crate::codec::{decode_frame, encode_frame, FrameState, SlimVcModel, LATENT_STRIDE};
use crate::error::{Error, Result};
use crate::slim::{deconv_targets, ChannelTable, LayerKind, LayerSpec, Module, Preset, K, WIDTH_FACTORS};
use crate::tensor::Tensor;

/// Modules run by the encoder.
pub const ENCODE_MODULES: [Module; 5] = [Module::Fe, Module::He, Module::Hd, Module::Tpm, Module::Epm];
/// Modules run by the decoder.
pub const DECODE_MODULES: [Module; 4] = [Module::Fd, Module::Hd, Module::Tpm, Module::Epm];

pub fn count_params(table: &ChannelTable, module: Module, k: usize) -> u64 {
    table
        .layers(module)
        .iter()
        .map(|l| layer_params(l, k))
        .sum()
}

fn layer_params(l: &LayerSpec, k: usize) -> u64 {
    let (i, o, kk) = (l.cin[k] as u64, l.cout[k] as u64, l.kernel as u64);
    match l.kind {
        LayerKind::Conv | LayerKind::Deconv => kk * kk * i * o,
        LayerKind::Gdn | LayerKind::Igdn => i * i + i,
        LayerKind::LeakyRelu => 0,
    }
}

fn check_resolution(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(LATENT_STRIDE) || !w.is_multiple_of(LATENT_STRIDE) {
        return Err(Error::invalid(format!(
            "resolution {w}x{h} is not a positive multiple of {LATENT_STRIDE}"
        )));
    }
    Ok(())
}

/// Spatial size entering `module` for frames of `h x w`, and the size its
/// transposed layers must land on.
fn module_io(module: Module, h: usize, w: usize) -> ((usize, usize), (usize, usize)) {
    let latent = (h / LATENT_STRIDE, w / LATENT_STRIDE);
    let hyper = (latent.0.div_ceil(2).div_ceil(2), latent.1.div_ceil(2).div_ceil(2));
    match module {
        Module::Fe => ((h, w), (h, w)),
        Module::Fd => (latent, (h, w)),
        Module::Hd => (hyper, latent),
        Module::He | Module::Tpm | Module::Epm => (latent, latent),
    }
}

/// MACs of `module` at width `k` for frames of `h x w` (multiples of 12;
/// odd intermediate sizes round up).
pub fn count_macs(table: &ChannelTable, module: Module, k: usize, h: usize, w: usize) -> Result<u64> {
    check_resolution(h, w)?;
    let layers = table.layers(module);
    let (mut pos, target) = module_io(module, h, w);
    let strides: Vec<usize> = layers
        .iter()
        .filter(|l| l.kind == LayerKind::Deconv)
        .map(|l| l.stride)
        .collect();
    let mut targets = deconv_targets(&strides, target).into_iter();
    let mut total = 0u64;
    for l in &layers {
        let (i, o, kk) = (l.cin[k] as u64, l.cout[k] as u64, l.kernel as u64);
        let area = |p: (usize, usize)| (p.0 * p.1) as u64;
        match l.kind {
            LayerKind::Conv => {
                pos = (pos.0.div_ceil(l.stride), pos.1.div_ceil(l.stride));
                total += area(pos) * kk * kk * i * o;
            }
            LayerKind::Deconv => {
                total += area(pos) * kk * kk * i * o;
                pos = targets.next().expect("one target per transposed layer");
            }
            LayerKind::Gdn | LayerKind::Igdn => total += area(pos) * (i * i + 2 * i),
            LayerKind::LeakyRelu => {}
        }
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModuleCost {
    pub module: Module,
    pub k: usize,
    pub params: u64,
    pub macs: u64,
}

impl ModuleCost {
    pub fn param_bytes(&self) -> u64 {
        4 * self.params
    }

    pub fn macs_encode(&self) -> u64 {
        if ENCODE_MODULES.contains(&self.module) {
            self.macs
        } else {
            0
        }
    }

    pub fn macs_decode(&self) -> u64 {
        if DECODE_MODULES.contains(&self.module) {
            self.macs
        } else {
            0
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Totals {
    pub params: u64,
    pub macs_encode: u64,
    pub macs_decode: u64,
}

/// Costs of every module at every width for one preset and resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub preset: Preset,
    pub resolution: (usize, usize),
    /// Module-major, then width index.
    pub rows: Vec<ModuleCost>,
}

impl CostReport {
    /// `resolution` is `(width, height)`.
    pub fn new(preset: Preset, resolution: (usize, usize)) -> Result<Self> {
        let (w, h) = resolution;
        check_resolution(h, w)?;
        let table = ChannelTable::new(preset);
        let mut rows = Vec::with_capacity(Module::ALL.len() * K);
        for m in Module::ALL {
            for k in 0..K {
                rows.push(ModuleCost {
                    module: m,
                    k,
                    params: count_params(&table, m, k),
                    macs: count_macs(&table, m, k, h, w)?,
                });
            }
        }
        Ok(Self {
            preset,
            resolution,
            rows,
        })
    }

    pub fn get(&self, module: Module, k: usize) -> &ModuleCost {
        self.rows
            .iter()
            .find(|r| r.module == module && r.k == k)
            .expect("every module and width is present")
    }

    pub fn totals(&self, k: usize) -> Totals {
        self.rows.iter().filter(|r| r.k == k).fold(Totals::default(), |t, r| Totals {
            params: t.params + r.params,
            macs_encode: t.macs_encode + r.macs_encode(),
            macs_decode: t.macs_decode + r.macs_decode(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("module,width_factor,params,param_bytes,macs_encode,macs_decode\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.module.label(),
                WIDTH_FACTORS[r.k],
                r.params,
                r.param_bytes(),
                r.macs_encode(),
                r.macs_decode()
            );
        }
        for k in 0..K {
            let t = self.totals(k);
            let _ = writeln!(
                s,
                "total,{},{},{},{},{}",
                WIDTH_FACTORS[k],
                t.params,
                4 * t.params,
                t.macs_encode,
                t.macs_decode
            );
        }
        s
    }

    /// Millions of parameters and GMACs, one row per module and width.
    pub fn to_table(&self) -> String {
        let (w, h) = self.resolution;
        let mut s = format!("{} preset, {w}x{h}\n", self.preset);
        let _ = writeln!(
            s,
            "{:<8} {:>6} {:>10} {:>10} {:>12} {:>12}",
            "module", "width", "params(M)", "MB", "enc GMACs", "dec GMACs"
        );
        let line = |s: &mut String, name: &str, k: usize, p: u64, e: u64, d: u64| {
            let _ = writeln!(
                s,
                "{:<8} {:>6} {:>10.1} {:>10.2} {:>12.2} {:>12.2}",
                name,
                WIDTH_FACTORS[k],
                p as f64 / 1e6,
                (4 * p) as f64 / 1e6,
                e as f64 / 1e9,
                d as f64 / 1e9
            );
        };
        for r in &self.rows {
            line(&mut s, r.module.label(), r.k, r.params, r.macs_encode(), r.macs_decode());
        }
        for k in 0..K {
            let t = self.totals(k);
            line(&mut s, "total", k, t.params, t.macs_encode, t.macs_decode);
        }
        s
    }
}

/// Parameter memory of every module at width `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemoryReport {
    pub k: usize,
    pub bytes: Vec<(Module, u64)>,
}

impl MemoryReport {
    pub fn total(&self) -> u64 {
        self.bytes.iter().map(|b| b.1).sum()
    }

    pub fn largest(&self) -> Module {
        self.bytes.iter().max_by_key(|b| b.1).expect("six modules").0
    }
}

pub fn memory_report(table: &ChannelTable, k: usize) -> MemoryReport {
    MemoryReport {
        k,
        bytes: Module::ALL.iter().map(|&m| (m, 4 * count_params(table, m, k))).collect(),
    }
}

/// Median seconds per frame for encoding and decoding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Latency {
    pub encode: f64,
    pub decode: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `frames` (at least 10) coded as one group of pictures at width `k`,
/// after one untimed warmup frame.
pub fn bench_latency(model: &SlimVcModel, k: usize, frames: &[Tensor]) -> Result<Latency> {
    if frames.len() < 10 {
        return Err(Error::invalid(format!(
            "latency needs at least 10 frames, got {}",
            frames.len()
        )));
    }
    let (_, _, h, w) = frames[0].dims4()?;
    encode_frame(model, &frames[0], &FrameState::default(), k)?;
    let (mut enc, mut dec) = (Vec::new(), Vec::new());
    let (mut es, mut ds) = (FrameState::default(), FrameState::default());
    for f in frames {
        let t = Instant::now();
        let e = encode_frame(model, f, &es, k)?;
        enc.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        let (_, _, next) = decode_frame(model, &e.payloads, &ds, k, (h, w))?;
        dec.push(t.elapsed().as_secs_f64());
        es = e.state;
        ds = next;
    }
    Ok(Latency {
        encode: median(enc),
        decode: median(dec),
    })
}
