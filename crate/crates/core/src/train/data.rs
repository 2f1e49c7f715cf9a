//! Deterministic synthetic clips and training batches.

use std::f32::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pattern {
    Static,
    Translate,
    Brightness,
    Noise,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [
        Pattern::Static,
        Pattern::Translate,
        Pattern::Brightness,
        Pattern::Noise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Static => "static",
            Pattern::Translate => "translate",
            Pattern::Brightness => "brightness",
            Pattern::Noise => "noise",
        }
    }
}

impl std::str::FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pattern '{s}'")))
    }
}

/// Mixes `(seed, a, b)` into one generator seed.
pub(crate) fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 29)
}

#[derive(Clone, Debug)]
struct Wave {
    fx: f32,
    fy: f32,
    phase: f32,
    amp: [f32; 3],
}

#[derive(Clone, Debug)]
struct Block {
    x0: f32,
    y0: f32,
    x1: f32,
    y1: f32,
    color: [f32; 3],
}

/// A smooth random colour field with a few hard-edged blocks, defined on the
/// whole integer plane so shifted windows agree exactly.
#[derive(Clone, Debug)]
pub struct Texture {
    base: [f32; 3],
    waves: Vec<Wave>,
    blocks: Vec<Block>,
}

impl Texture {
    pub fn random(rng: &mut impl Rng) -> Self {
        let base = [0; 3].map(|_| rng.gen_range(0.25..0.75));
        let waves = (0..4)
            .map(|_| {
                let period = rng.gen_range(10.0f32..60.0);
                let angle = rng.gen_range(0.0..TAU);
                Wave {
                    fx: angle.cos() / period,
                    fy: angle.sin() / period,
                    phase: rng.gen_range(0.0..TAU),
                    amp: [0; 3].map(|_| rng.gen_range(-0.12..0.12)),
                }
            })
            .collect();
        let blocks = (0..3)
            .map(|_| {
                let x0 = rng.gen_range(-40.0f32..100.0);
                let y0 = rng.gen_range(-40.0f32..100.0);
                Block {
                    x0,
                    y0,
                    x1: x0 + rng.gen_range(8.0..40.0),
                    y1: y0 + rng.gen_range(8.0..40.0),
                    color: [0; 3].map(|_| rng.gen_range(-0.25..0.25)),
                }
            })
            .collect();
        Self {
            base,
            waves,
            blocks,
        }
    }

    /// Colour at integer position `(x, y)`, quantized to the 8-bit grid.
    pub fn sample(&self, x: i64, y: i64) -> [f32; 3] {
        let (xf, yf) = (x as f32, y as f32);
        let mut c = self.base;
        for w in &self.waves {
            let s = (TAU * (w.fx * xf + w.fy * yf) + w.phase).sin();
            for (ch, a) in c.iter_mut().zip(w.amp) {
                *ch += a * s;
            }
        }
        for b in &self.blocks {
            if xf >= b.x0 && xf < b.x1 && yf >= b.y0 && yf < b.y1 {
                for (ch, a) in c.iter_mut().zip(b.color) {
                    *ch += a;
                }
            }
        }
        c.map(quantize8)
    }
}

fn quantize8(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Seeded synthetic video: clip `c` of every pattern is a pure function of
/// `(seed, c)`, and frame `t` of it a pure function of `(seed, c, t)`.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub pattern: Pattern,
    pub clip_len: usize,
    pub seed: u64,
    /// Per-frame displacement of the translate pattern.
    pub shift: (i64, i64),
    /// Per-frame relative gain change of the brightness pattern.
    pub drift: f32,
    /// Standard deviation of the noise pattern.
    pub noise: f32,
}

impl SyntheticDataset {
    pub fn new(pattern: Pattern, clip_len: usize, seed: u64) -> Self {
        Self {
            pattern,
            clip_len,
            seed,
            shift: (2, 1),
            drift: 0.02,
            noise: 0.02,
        }
    }

    fn texture(&self, clip: u64) -> Texture {
        Texture::random(&mut ChaCha8Rng::seed_from_u64(mix(self.seed, clip, 0)))
    }

    /// Frame `t` of clip `clip` as `[1, 3, h, w]`, window origin at `origin`.
    pub fn frame_at(&self, clip: u64, t: usize, h: usize, w: usize, origin: (i64, i64)) -> Tensor {
        let tex = self.texture(clip);
        let (ox, oy) = match self.pattern {
            Pattern::Translate => (
                origin.0 + t as i64 * self.shift.0,
                origin.1 + t as i64 * self.shift.1,
            ),
            _ => origin,
        };
        let gain = match self.pattern {
            Pattern::Brightness => 1.0 + self.drift * t as f32,
            _ => 1.0,
        };
        let mut noise_rng = ChaCha8Rng::seed_from_u64(mix(self.seed, clip, 1 + t as u64));
        let plane = h * w;
        let mut data = vec![0.0f32; 3 * plane];
        for y in 0..h {
            for x in 0..w {
                let c = tex.sample(ox + x as i64, oy + y as i64);
                for ch in 0..3 {
                    let mut v = c[ch] * gain;
                    if self.pattern == Pattern::Noise {
                        let n: f32 = (0..4).map(|_| noise_rng.gen::<f32>()).sum::<f32>() - 2.0;
                        v += n * self.noise * 1.732;
                    }
                    data[ch * plane + y * w + x] = quantize8(v);
                }
            }
        }
        Tensor::new(vec![1, 3, h, w], data).expect("shape matches data")
    }

    pub fn frame(&self, clip: u64, t: usize, h: usize, w: usize) -> Tensor {
        self.frame_at(clip, t, h, w, (0, 0))
    }

    pub fn clip(&self, clip: u64, h: usize, w: usize) -> Vec<Tensor> {
        (0..self.clip_len).map(|t| self.frame(clip, t, h, w)).collect()
    }
}

/// Where training crops come from.
#[derive(Clone, Debug)]
pub enum TrainData {
    /// Clips from every synthetic pattern in turn.
    Synthetic { seed: u64 },
    /// One sequence of frames, e.g. read from disk.
    Frames(Vec<Tensor>),
}

fn stack(items: &[Tensor]) -> Tensor {
    let mut shape = items[0].shape().to_vec();
    shape[0] = items.len();
    let data = items.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data).expect("equal shapes")
}

fn window(x: &Tensor, top: usize, left: usize, size: usize) -> Tensor {
    let (_, c, h, w) = x.dims4().expect("frames are 4-d");
    let d = x.data();
    Tensor::from_fn(&[1, c, size, size], |i| {
        let xx = i % size;
        let yy = (i / size) % size;
        let ch = i / (size * size);
        d[ch * h * w + (top + yy) * w + left + xx]
    })
}

impl TrainData {
    pub fn check(&self, crop: usize, pairs: bool) -> Result<()> {
        if let TrainData::Frames(f) = self {
            if f.is_empty() || (pairs && f.len() < 2) {
                return Err(Error::Config(format!(
                    "training data has {} frames, need at least {}",
                    f.len(),
                    1 + pairs as usize
                )));
            }
            let (_, _, h, w) = f[0].dims4()?;
            if h < crop || w < crop {
                return Err(Error::Config(format!("frames {w}x{h} are smaller than the {crop} crop")));
            }
            if f.iter().any(|t| t.shape() != f[0].shape()) {
                return Err(Error::Config("training frames differ in size".into()));
            }
        }
        Ok(())
    }

    /// `batch` consecutive-frame pairs `(previous, current)` for `step`.
    /// With `pairs == false` only the current frames are meaningful.
    pub fn batch(&self, step: u64, batch: usize, crop: usize) -> (Tensor, Tensor) {
        let mut prev = Vec::with_capacity(batch);
        let mut cur = Vec::with_capacity(batch);
        for i in 0..batch {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(0x5EED, step, i as u64));
            match self {
                TrainData::Synthetic { seed } => {
                    let pattern = Pattern::ALL[rng.gen_range(0..Pattern::ALL.len())];
                    let mut ds = SyntheticDataset::new(pattern, 2, *seed);
                    ds.shift = (rng.gen_range(-3..=3), rng.gen_range(-3..=3));
                    let clip = rng.gen::<u64>();
                    let origin = (rng.gen_range(-64..64), rng.gen_range(-64..64));
                    let t = rng.gen_range(1..12);
                    prev.push(ds.frame_at(clip, t - 1, crop, crop, origin));
                    cur.push(ds.frame_at(clip, t, crop, crop, origin));
                }
                TrainData::Frames(frames) => {
                    let (_, _, h, w) = frames[0].dims4().expect("checked");
                    let t = if frames.len() > 1 {
                        rng.gen_range(1..frames.len())
                    } else {
                        0
                    };
                    let top = rng.gen_range(0..=h - crop);
                    let left = rng.gen_range(0..=w - crop);
                    prev.push(window(&frames[t.saturating_sub(1)], top, left, crop));
                    cur.push(window(&frames[t], top, left, crop));
                }
            }
        }
        (stack(&prev), stack(&cur))
    }
}
