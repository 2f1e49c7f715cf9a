//! Container layout, all integers little-endian:
//!
//! ```text
//! "SVC1" version:u8 width_idx:u8 gop:u8 flags:u8
//! padded_w:u16 padded_h:u16 width:u16 height:u16 frames:u32 preset:u8
//! per frame: type:u8 hyper_len:u32 main_len:u32 hyper[..] main[..]
//! ```

use crate::error::{Error, Result};
use crate::slim::Preset;

pub const MAGIC: &[u8; 4] = b"SVC1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 21;
const FRAME_HEADER_LEN: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameType {
    Intra = 0,
    Inter = 1,
}

impl FrameType {
    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(FrameType::Intra),
            1 => Ok(FrameType::Inter),
            _ => Err(Error::format(format!("unknown frame type {b}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FrameType::Intra => "intra",
            FrameType::Inter => "inter",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub width_idx: u8,
    pub gop: u8,
    pub flags: u8,
    pub padded_width: u16,
    pub padded_height: u16,
    pub width: u16,
    pub height: u16,
    pub frames: u32,
    pub preset: Preset,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FramePayloads {
    pub kind: FrameType,
    pub hyper: Vec<u8>,
    pub main: Vec<u8>,
}

impl FramePayloads {
    /// Payload bits, excluding the per-frame header.
    pub fn bits(&self) -> usize {
        8 * (self.hyper.len() + self.main.len())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub header: Header,
    pub frames: Vec<FramePayloads>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(
            HEADER_LEN
                + self
                    .frames
                    .iter()
                    .map(|f| FRAME_HEADER_LEN + f.hyper.len() + f.main.len())
                    .sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&[h.version, h.width_idx, h.gop, h.flags]);
        for v in [h.padded_width, h.padded_height, h.width, h.height] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&h.frames.to_le_bytes());
        out.push(h.preset.id());
        for f in &self.frames {
            out.push(f.kind as u8);
            out.extend_from_slice(&(f.hyper.len() as u32).to_le_bytes());
            out.extend_from_slice(&(f.main.len() as u32).to_le_bytes());
            out.extend_from_slice(&f.hyper);
            out.extend_from_slice(&f.main);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("bad magic, not a SVC1 container"));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported container version {version}")));
        }
        let width_idx = r.u8()?;
        let gop = r.u8()?;
        let flags = r.u8()?;
        let padded_width = r.u16()?;
        let padded_height = r.u16()?;
        let width = r.u16()?;
        let height = r.u16()?;
        let frames = r.u32()?;
        let preset = Preset::from_id(r.u8()?)?;
        if gop == 0 {
            return Err(Error::format("gop size is zero"));
        }
        if width == 0 || height == 0 || width > padded_width || height > padded_height {
            return Err(Error::format(format!(
                "frame {width}x{height} does not fit padded {padded_width}x{padded_height}"
            )));
        }
        let header = Header {
            version,
            width_idx,
            gop,
            flags,
            padded_width,
            padded_height,
            width,
            height,
            frames,
            preset,
        };
        let mut out = Vec::new();
        for i in 0..frames {
            let kind = FrameType::from_byte(r.u8()?)?;
            let expected = if i % gop as u32 == 0 {
                FrameType::Intra
            } else {
                FrameType::Inter
            };
            if kind != expected {
                return Err(Error::format(format!(
                    "frame {i} is {} but the group structure requires {}",
                    kind.name(),
                    expected.name()
                )));
            }
            let hl = r.u32()? as usize;
            let ml = r.u32()? as usize;
            let hyper = r.take(hl)?.to_vec();
            let main = r.take(ml)?.to_vec();
            out.push(FramePayloads { kind, hyper, main });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(format!(
                "{} trailing bytes after the last frame",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { header, frames: out })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Truncated(format!(
                "container ends at byte {} while reading {n} more",
                self.bytes.len()
            ))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
