//! Binary sample files.
//!
//! Little-endian layout: magic `MTIP`, `u32` version, `u32` H, `u32` W,
//! `4·H·W` `f32` phase intensities (phase-major, row-major), `H·W` `u8` mask,
//! 4 `f32` enhancement values, `u8` label.

use std::fs;
use std::path::Path;

use super::{Class, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MTIP";
pub const VERSION: u32 = 1;
const HEADER: usize = 16;

pub fn encoded_len(h: usize, w: usize) -> usize {
    HEADER + 4 * 4 * h * w + h * w + 4 * 4 + 1
}

pub fn encode(sample: &Sample) -> Vec<u8> {
    let (h, w) = sample.dims();
    let mut out = Vec::with_capacity(encoded_len(h, w));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in sample.phases.values() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.extend(sample.mask.values().iter().map(|&m| u8::from(m > 0.5)));
    for v in sample.enhancement {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.push(sample.label.index() as u8);
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn f32_at(bytes: &[u8], at: usize) -> f64 {
    f64::from(f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")))
}

pub fn decode(bytes: &[u8]) -> Result<Sample> {
    if bytes.len() < HEADER {
        return Err(Error::format("header", format!("file has only {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format("magic", format!("expected MTIP, found {:?}", &bytes[..4])));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let (h, w) = (u32_at(bytes, 8) as usize, u32_at(bytes, 12) as usize);
    if h == 0 || w == 0 || h > 4096 || w > 4096 {
        return Err(Error::format("dimensions", format!("implausible extents {h}x{w}")));
    }
    let want = encoded_len(h, w);
    if bytes.len() != want {
        return Err(Error::format(
            "length",
            format!("header declares {h}x{w} ({want} bytes), file has {}", bytes.len()),
        ));
    }
    let n = h * w;
    let mut at = HEADER;
    let mut phases = Vec::with_capacity(4 * n);
    for _ in 0..4 * n {
        phases.push(f32_at(bytes, at));
        at += 4;
    }
    if phases.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("phases", "non-finite intensity"));
    }
    let mut mask = Vec::with_capacity(n);
    for &m in &bytes[at..at + n] {
        match m {
            0 | 1 => mask.push(f64::from(m)),
            other => return Err(Error::format("mask", format!("value {other} is not 0 or 1"))),
        }
    }
    at += n;
    let mut enhancement = [0.0; 4];
    for e in &mut enhancement {
        *e = f32_at(bytes, at);
        at += 4;
    }
    if enhancement.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("enhancement", "non-finite value"));
    }
    let label = Class::from_index(bytes[at] as usize)
        .ok_or_else(|| Error::format("label", format!("unknown class {}", bytes[at])))?;
    Ok(Sample {
        phases: Tensor::new(&[4, h, w], phases).map_err(|e| Error::format("phases", e.to_string()))?,
        mask: Tensor::new(&[h, w], mask).map_err(|e| Error::format("mask", e.to_string()))?,
        enhancement,
        label,
    })
}

pub fn write_sample(path: &Path, sample: &Sample) -> Result<()> {
    fs::write(path, encode(sample)).map_err(|e| Error::io(path, e))
}

pub fn read_sample(path: &Path) -> Result<Sample> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
