//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "F4SG" | version u32 | count u32 |
//!   count × [name_len u32 | name | dtype u8 (0 = f32) | ndim u32 | dims u32×ndim | payload f32×∏dims]
//! | crc32 u32 over every preceding byte
//! ```
//!
//! Parameters are held as f64 in memory and stored as f32, so a loaded
//! checkpoint saves back to identical bytes. The `meta.arch` entry records
//! the architecture needed to rebuild the networks.

use std::path::Path;

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::models::{FusionConfig, SegConfig};
use crate::nn::ParamSet;
use crate::tensor::Tensor;
use crate::train::{FusionState, SegState};

pub const MAGIC: &[u8; 4] = b"F4SG";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const ARCH: &str = "meta.arch";

/// Named tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Checkpoint(format!("crc mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("entry name is not utf-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("`{name}`: unknown dtype {dtype}")));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
            entries.push((name, t));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Packs the fusion state and, if given, the segmenter.
    pub fn from_states(fusion: &FusionState, seg: Option<&SegState>) -> Self {
        let mut entries = vec![(ARCH.to_string(), encode_arch(fusion.model.config(), seg.map(|s| s.model.config())))];
        let mut push = |ps: &ParamSet| {
            entries.extend(ps.iter().map(|(n, t)| (n.to_string(), t.clone())));
        };
        push(&fusion.params);
        push(&fusion.disc_params);
        if let Some(s) = seg {
            push(&s.params);
        }
        Checkpoint { entries }
    }

    /// Architecture recorded in `meta.arch`.
    pub fn arch(&self) -> Result<(FusionConfig, Option<SegConfig>)> {
        let t = self.get(ARCH).ok_or_else(|| Error::Checkpoint(format!("missing `{ARCH}`")))?;
        decode_arch(t.data())
    }

    /// Rebuilds the networks and fills every parameter.
    pub fn restore(&self) -> Result<(FusionState, Option<SegState>)> {
        let (fc, sc) = self.arch()?;
        let mut fusion = FusionState::new(fc, 0)?;
        let mut seg = sc.map(|c| SegState::new(c, 0)).transpose()?;
        fill(&mut fusion.params, self)?;
        fill(&mut fusion.disc_params, self)?;
        if let Some(s) = seg.as_mut() {
            fill(&mut s.params, self)?;
        }
        Ok((fusion, seg))
    }
}

fn fill(ps: &mut ParamSet, ck: &Checkpoint) -> Result<()> {
    let names: Vec<String> = ps.iter().map(|(n, _)| n.to_string()).collect();
    for n in names {
        let t = ck.get(&n).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{n}`")))?;
        ps.assign(&n, t.clone()).map_err(|e| Error::Checkpoint(format!("`{n}`: {e}")))?;
    }
    Ok(())
}

fn encode_arch(f: &FusionConfig, s: Option<&SegConfig>) -> Tensor {
    let b = |v: bool| f64::from(u8::from(v));
    let mut v = vec![
        f.channels_low as f64,
        f.channels_high as f64,
        f.inn_blocks as f64,
        f.attn_blocks as f64,
        f.d_k as f64,
        f.high_patch as f64,
        b(f.cross_attention),
        b(f.decoder),
        b(s.is_some()),
    ];
    if let Some(s) = s {
        v.extend(s.widths.iter().map(|&w| w as f64));
        v.extend([s.classes as f64, s.d_k as f64]);
    }
    let n = v.len();
    Tensor::new(vec![n], v).expect("non-empty")
}

fn decode_arch(v: &[f64]) -> Result<(FusionConfig, Option<SegConfig>)> {
    let bad = || Error::Checkpoint("malformed `meta.arch`".into());
    let u = |i: usize| -> Result<usize> {
        let x = *v.get(i).ok_or_else(bad)?;
        if x >= 0.0 && x.fract() == 0.0 {
            Ok(x as usize)
        } else {
            Err(bad())
        }
    };
    let flag = |i: usize| -> Result<bool> {
        match u(i)? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(bad()),
        }
    };
    let f = FusionConfig {
        channels_low: u(0)?,
        channels_high: u(1)?,
        inn_blocks: u(2)?,
        attn_blocks: u(3)?,
        d_k: u(4)?,
        high_patch: u(5)?,
        cross_attention: flag(6)?,
        decoder: flag(7)?,
        zero_init_coupling: false,
    };
    let (s, len) = if flag(8)? {
        (Some(SegConfig { widths: [u(9)?, u(10)?, u(11)?], classes: u(12)?, d_k: u(13)? }), 14)
    } else {
        (None, 9)
    };
    if v.len() != len {
        return Err(bad());
    }
    Ok((f, s))
}
