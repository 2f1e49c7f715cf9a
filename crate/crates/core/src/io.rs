//! Binary PPM (P6, maxval 255) frame files.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `dir/frame_%06d.ppm`.
pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("frame_{index:06}.ppm"))
}

/// Encodes a `[1, 3, H, W]` tensor in `[0, 1]` as P6 bytes.
pub fn encode_ppm(x: &Tensor) -> Result<Vec<u8>> {
    let (b, c, h, w) = x.dims4()?;
    if b != 1 || c != 3 {
        return Err(Error::shape(format!("ppm frames are 1x3xHxW, got {:?}", x.shape())));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = x.data();
    out.reserve(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            out.push((d[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("ppm header ends early"));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let t = token(bytes, pos)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("ppm header has a non-numeric field"))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    if token(bytes, &mut pos)? != b"P6" {
        return Err(Error::format("not a binary ppm (P6)"));
    }
    let w = number(bytes, &mut pos)?;
    let h = number(bytes, &mut pos)?;
    let max = number(bytes, &mut pos)?;
    if max != 255 {
        return Err(Error::format(format!("ppm maxval {max} unsupported")));
    }
    if w == 0 || h == 0 {
        return Err(Error::format("ppm has zero size"));
    }
    pos += 1;
    let plane = w * h;
    let body = bytes
        .get(pos..pos + 3 * plane)
        .ok_or_else(|| Error::Truncated("ppm pixel data".into()))?;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            data[ch * plane + i] = body[3 * i + ch] as f32 / 255.0;
        }
    }
    Tensor::new(vec![1, 3, h, w], data)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_ppm(path: &Path, x: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(x)?).map_err(|e| Error::io(path, e))
}

/// Reads `frame_000000.ppm`, `frame_000001.ppm`, ... until the first gap.
pub fn read_frames(dir: &Path) -> Result<Vec<Tensor>> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let mut out = Vec::new();
    loop {
        let p = frame_path(dir, out.len());
        if !p.exists() {
            break;
        }
        out.push(read_ppm(&p)?);
    }
    if out.is_empty() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no frame_000000.ppm"),
        ));
    }
    Ok(out)
}

pub fn write_frames(dir: &Path, frames: &[Tensor]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        write_ppm(&frame_path(dir, i), f)?;
    }
    Ok(())
}
