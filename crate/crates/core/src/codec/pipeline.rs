use crate::codec::bitstream::{Container, FramePayloads, FrameType, Header, VERSION};
use crate::codec::model::{Prior, SlimVcModel, HYPER_STRIDE, LATENT_STRIDE};
use crate::entropy::{factorized, factorized_cdfs, gaussian, gaussian_cdf, quantize_infer, rate_bits, QuantizedCdf};
use crate::error::{Error, Result};
use crate::rangecoder::{RangeDecoder, RangeEncoder};
use crate::tensor::Tensor;

/// Decoder-side memory between frames of one group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameState {
    /// Quantized latent of the previous frame, with the width it was coded at.
    pub prev: Option<(Tensor, usize)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameMetrics {
    pub bits_hyper: usize,
    pub bits_main: usize,
    /// Model information content of the coded symbols.
    pub est_bits_hyper: f64,
    pub est_bits_main: f64,
    pub escapes: usize,
    pub mse: f64,
    pub psnr: f64,
}

impl FrameMetrics {
    pub fn bits(&self) -> usize {
        self.bits_hyper + self.bits_main
    }
}

#[derive(Clone, Debug)]
pub struct EncodedFrame {
    pub payloads: FramePayloads,
    pub state: FrameState,
    pub metrics: FrameMetrics,
    /// Quantized latent `z_hat_t`.
    pub latent: Tensor,
    /// Reconstruction cropped to the input size, in `[0, 1]`.
    pub recon: Tensor,
}

pub fn psnr(mse: f64) -> f64 {
    10.0 * (1.0 / mse).log10()
}

/// Side length after padding to the next multiple of `HYPER_STRIDE`.
pub fn padded_len(n: usize) -> usize {
    n.div_ceil(HYPER_STRIDE) * HYPER_STRIDE
}

fn mirror(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reflect-pads a `[B, C, H, W]` tensor on the bottom and right to `(ph, pw)`.
pub fn pad_reflect(x: &Tensor, ph: usize, pw: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if ph < h || pw < w {
        return Err(Error::shape(format!("cannot pad {w}x{h} to {pw}x{ph}")));
    }
    let src = x.data();
    Ok(Tensor::from_fn(&[b, c, ph, pw], |i| {
        let xx = i % pw;
        let yy = (i / pw) % ph;
        let plane = i / (pw * ph);
        src[plane * h * w + mirror(yy, h) * w + mirror(xx, w)]
    }))
}

/// Top-left `(h, w)` window of a `[B, C, H, W]` tensor.
pub fn crop(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, c, _, _) = x.dims4()?;
    x.slice_leading(&[b, c, h, w])
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("mse: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.numel() as f64)
}

fn channel_of(i: usize, plane: usize, c: usize) -> usize {
    (i / plane) % c
}

fn encode_factorized(q: &Tensor, cdfs: &[QuantizedCdf]) -> Result<(Vec<u8>, usize)> {
    let (_, c, h, w) = q.dims4()?;
    let mut enc = RangeEncoder::new();
    for (i, &v) in q.data().iter().enumerate() {
        enc.encode(v as i32, &cdfs[channel_of(i, h * w, c)])?;
    }
    let esc = enc.escapes();
    Ok((enc.finish().bytes, esc))
}

fn decode_factorized(bytes: &[u8], shape: &[usize], cdfs: &[QuantizedCdf]) -> Result<Tensor> {
    let (c, plane) = (shape[1], shape[2] * shape[3]);
    let n: usize = shape.iter().product();
    let mut dec = RangeDecoder::new(bytes)?;
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        data.push(dec.decode(&cdfs[channel_of(i, plane, c)])? as f32);
    }
    dec.finish()?;
    Tensor::new(shape.to_vec(), data)
}

fn check_width(model: &SlimVcModel, state: &FrameState, k: usize) -> Result<()> {
    model.widths.check(k)?;
    match &state.prev {
        Some((_, pk)) if *pk != k => Err(Error::invalid(format!(
            "reference latent was coded at width {pk}, current width is {k}"
        ))),
        _ => Ok(()),
    }
}

/// Mean and scale of the residual given the decoded hyper-latent and the reference.
fn residual_params(
    model: &SlimVcModel,
    h_hat: &Tensor,
    prev: &Tensor,
    k: usize,
) -> Result<crate::entropy::DistributionParams> {
    let (_, _, lh, lw) = prev.dims4()?;
    let hd = model.hyper_decode_tensor(h_hat, k, (lh, lw))?;
    let tp = model.temporal_prior_tensor(prev, k)?;
    model.entropy_params_tensor(&hd, &tp, k)
}

/// Codes one frame. Without a reference in `state` the frame is intra coded.
pub fn encode_frame(
    model: &SlimVcModel,
    frame: &Tensor,
    state: &FrameState,
    k: usize,
) -> Result<EncodedFrame> {
    check_width(model, state, k)?;
    let (_, _, h, w) = frame.dims4()?;
    let x = pad_reflect(frame, padded_len(h), padded_len(w))?;
    let z_hat = quantize_infer(&model.analyze_tensor(&x, k)?);
    let mut metrics = FrameMetrics::default();
    let payloads = match &state.prev {
        None => {
            let ps = model.prior_tensors(Prior::Latent, k);
            let cdfs = factorized_cdfs(&ps)?;
            let (main, esc) = encode_factorized(&z_hat, &cdfs)?;
            metrics.est_bits_main = rate_bits(&factorized::likelihood(&z_hat, &ps)?);
            metrics.bits_main = 8 * main.len();
            metrics.escapes = esc;
            FramePayloads {
                kind: FrameType::Intra,
                hyper: Vec::new(),
                main,
            }
        }
        Some((prev, _)) => {
            let h_hat = quantize_infer(&model.hyper_encode_tensor(&z_hat, prev, k)?);
            let hps = model.prior_tensors(Prior::Hyper, k);
            let hcdfs = factorized_cdfs(&hps)?;
            let (hyper, hesc) = encode_factorized(&h_hat, &hcdfs)?;
            metrics.est_bits_hyper = rate_bits(&factorized::likelihood(&h_hat, &hps)?);

            let params = residual_params(model, &h_hat, prev, k)?;
            let res = z_hat.zip_map(prev, |a, b| a - b)?;
            let mut enc = RangeEncoder::new();
            for (i, &r) in res.data().iter().enumerate() {
                let cdf = gaussian_cdf(params.mu.data()[i] as f64, params.sigma.data()[i] as f64)?;
                enc.encode(r as i32, &cdf)?;
            }
            metrics.escapes = hesc + enc.escapes();
            let main = enc.finish().bytes;
            metrics.est_bits_main = rate_bits(&gaussian::likelihood(&res, &params.mu, &params.sigma)?);
            metrics.bits_hyper = 8 * hyper.len();
            metrics.bits_main = 8 * main.len();
            FramePayloads {
                kind: FrameType::Inter,
                hyper,
                main,
            }
        }
    };
    let recon = crop(&model.synthesize_tensor(&z_hat, k)?, h, w)?;
    metrics.mse = mse(frame, &recon)?;
    metrics.psnr = psnr(metrics.mse);
    Ok(EncodedFrame {
        payloads,
        state: FrameState {
            prev: Some((z_hat.clone(), k)),
        },
        metrics,
        latent: z_hat,
        recon,
    })
}

/// Inverse of [`encode_frame`] for a frame of true size `(h, w)`.
/// Returns the cropped reconstruction, the decoded latent, and the new state.
pub fn decode_frame(
    model: &SlimVcModel,
    payloads: &FramePayloads,
    state: &FrameState,
    k: usize,
    (h, w): (usize, usize),
) -> Result<(Tensor, Tensor, FrameState)> {
    check_width(model, state, k)?;
    let (ph, pw) = (padded_len(h), padded_len(w));
    let c = model.table.channels.latent[k];
    let latent_shape = [1, c, ph / LATENT_STRIDE, pw / LATENT_STRIDE];
    let z_hat = match (payloads.kind, &state.prev) {
        (FrameType::Intra, _) => {
            if !payloads.hyper.is_empty() {
                return Err(Error::format("intra frame carries a hyper payload"));
            }
            let cdfs = factorized_cdfs(&model.prior_tensors(Prior::Latent, k))?;
            decode_factorized(&payloads.main, &latent_shape, &cdfs)?
        }
        (FrameType::Inter, None) => {
            return Err(Error::format("inter frame without a reference frame"));
        }
        (FrameType::Inter, Some((prev, _))) => {
            if prev.shape() != latent_shape {
                return Err(Error::shape(format!(
                    "reference latent {:?} does not match {:?}",
                    prev.shape(),
                    latent_shape
                )));
            }
            let ch = model.table.channels.hyper[k];
            let hyper_shape = [1, ch, ph / HYPER_STRIDE, pw / HYPER_STRIDE];
            let hcdfs = factorized_cdfs(&model.prior_tensors(Prior::Hyper, k))?;
            let h_hat = decode_factorized(&payloads.hyper, &hyper_shape, &hcdfs)?;
            let params = residual_params(model, &h_hat, prev, k)?;
            let mut dec = RangeDecoder::new(&payloads.main)?;
            let mut data = Vec::with_capacity(prev.numel());
            for (i, &p) in prev.data().iter().enumerate() {
                let cdf = gaussian_cdf(params.mu.data()[i] as f64, params.sigma.data()[i] as f64)?;
                data.push(dec.decode(&cdf)? as f32 + p);
            }
            dec.finish()?;
            Tensor::new(latent_shape.to_vec(), data)?
        }
    };
    let recon = crop(&model.synthesize_tensor(&z_hat, k)?, h, w)?;
    Ok((
        recon,
        z_hat.clone(),
        FrameState {
            prev: Some((z_hat, k)),
        },
    ))
}

#[derive(Clone, Debug)]
pub struct FrameReport {
    pub kind: FrameType,
    pub metrics: FrameMetrics,
}

#[derive(Clone, Debug)]
pub struct EncodedSequence {
    pub container: Container,
    pub reports: Vec<FrameReport>,
    pub latents: Vec<Tensor>,
    pub recon: Vec<Tensor>,
}

impl EncodedSequence {
    /// Payload bits per true pixel over the whole sequence.
    pub fn bpp(&self) -> f64 {
        let h = &self.container.header;
        let bits: usize = self.reports.iter().map(|r| r.metrics.bits()).sum();
        bits as f64 / (h.width as f64 * h.height as f64 * self.reports.len() as f64)
    }

    pub fn mean_mse(&self) -> f64 {
        self.reports.iter().map(|r| r.metrics.mse).sum::<f64>() / self.reports.len() as f64
    }
}

/// Codes `frames` (each `[1, 3, H, W]` in `[0, 1]`) with a group of `gop`
/// frames: frame `t` is intra iff `t % gop == 0`.
pub fn encode_sequence(
    model: &SlimVcModel,
    frames: &[Tensor],
    k: usize,
    gop: usize,
) -> Result<EncodedSequence> {
    if frames.is_empty() {
        return Err(Error::invalid("cannot encode an empty sequence"));
    }
    if gop == 0 || gop > u8::MAX as usize {
        return Err(Error::invalid(format!("gop size {gop} outside 1..=255")));
    }
    model.widths.check(k)?;
    let (_, _, h, w) = frames[0].dims4()?;
    if h > u16::MAX as usize - HYPER_STRIDE || w > u16::MAX as usize - HYPER_STRIDE {
        return Err(Error::invalid(format!("frame {w}x{h} too large")));
    }
    let mut state = FrameState::default();
    let mut out = Vec::with_capacity(frames.len());
    let mut reports = Vec::with_capacity(frames.len());
    let mut latents = Vec::with_capacity(frames.len());
    let mut recon = Vec::with_capacity(frames.len());
    for (t, f) in frames.iter().enumerate() {
        if f.shape() != frames[0].shape() {
            return Err(Error::shape(format!(
                "frame {t} is {:?}, expected {:?}",
                f.shape(),
                frames[0].shape()
            )));
        }
        if t % gop == 0 {
            state = FrameState::default();
        }
        let e = encode_frame(model, f, &state, k)?;
        reports.push(FrameReport {
            kind: e.payloads.kind,
            metrics: e.metrics,
        });
        out.push(e.payloads);
        latents.push(e.latent);
        recon.push(e.recon);
        state = e.state;
    }
    let header = Header {
        version: VERSION,
        width_idx: k as u8,
        gop: gop as u8,
        flags: 0,
        padded_width: padded_len(w) as u16,
        padded_height: padded_len(h) as u16,
        width: w as u16,
        height: h as u16,
        frames: frames.len() as u32,
        preset: model.preset(),
    };
    Ok(EncodedSequence {
        container: Container { header, frames: out },
        reports,
        latents,
        recon,
    })
}

/// Decodes every frame; returns reconstructions and decoded latents.
pub fn decode_sequence(model: &SlimVcModel, c: &Container) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let h = &c.header;
    if h.preset != model.preset() {
        return Err(Error::format(format!(
            "container was coded with the {} preset but the model is {}",
            h.preset,
            model.preset()
        )));
    }
    let k = h.width_idx as usize;
    model.widths.check(k).map_err(|_| Error::format(format!("width index {k} in header is out of range")))?;
    let (ht, wt) = (h.height as usize, h.width as usize);
    if (h.padded_height as usize, h.padded_width as usize) != (padded_len(ht), padded_len(wt)) {
        return Err(Error::format("padded size in header disagrees with the true size"));
    }
    if c.frames.len() != h.frames as usize {
        return Err(Error::format("frame count disagrees with header"));
    }
    let mut state = FrameState::default();
    let mut frames = Vec::with_capacity(c.frames.len());
    let mut latents = Vec::with_capacity(c.frames.len());
    for (t, p) in c.frames.iter().enumerate() {
        if t % h.gop as usize == 0 {
            state = FrameState::default();
        }
        let (x, z, s) = decode_frame(model, p, &state, k, (ht, wt))?;
        frames.push(x);
        latents.push(z);
        state = s;
    }
    Ok((frames, latents))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_padding() {
        let x = Tensor::new(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = pad_reflect(&x, 2, 7).unwrap();
        assert_eq!(&p.data()[..7], &[1.0, 2.0, 3.0, 2.0, 1.0, 2.0, 3.0]);
        assert_eq!(&p.data()[7..], &p.data()[..7]);
        assert_eq!(crop(&p, 1, 3).unwrap(), x);
    }

    #[test]
    fn psnr_formula() {
        assert!((psnr(1e-4) - 40.0).abs() < 1e-12);
    }

    #[test]
    fn padded_lengths() {
        assert_eq!(padded_len(48), 48);
        assert_eq!(padded_len(49), 96);
        assert_eq!(padded_len(1080), 1104);
    }
}
