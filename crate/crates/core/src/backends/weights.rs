//! Dense layers shared by both backends and the flat weight container.
//!
//! Container layout (little-endian): magic `SKYWGT1`, `u32` array count, then
//! for each array in layer order a `u32` element count followed by `f32`
//! values.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::gemm;

const WEIGHT_MAGIC: &[u8; 7] = b"SKYWGT1";

/// Fully connected layer, `weight` stored `[fan_in, fan_out]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Linear {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let weight = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
        let bias = (0..fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self { weight, bias, fan_in, fan_out }
    }

    /// Applies the layer to `n` row vectors.
    pub fn forward(&self, x: &[f32], n: usize) -> Vec<f32> {
        debug_assert_eq!(x.len(), n * self.fan_in);
        let mut out = gemm(x, &self.weight, n, self.fan_in, self.fan_out);
        for row in out.chunks_exact_mut(self.fan_out) {
            for (o, b) in row.iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        out
    }

    pub fn macs(&self, n: usize) -> u64 {
        (n * self.fan_in * self.fan_out) as u64
    }
}

pub(crate) fn write_arrays<W: Write>(arrays: &[&[f32]], mut out: W) -> Result<()> {
    out.write_all(WEIGHT_MAGIC)?;
    out.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for a in arrays {
        out.write_all(&(a.len() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(a.len() * 4);
        for v in a.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

/// Reads a container and fills `targets` in order; every array length must
/// match the target it lands in.
pub(crate) fn read_arrays_into<R: Read>(mut input: R, targets: &mut [&mut Vec<f32>]) -> Result<()> {
    let mut magic = [0u8; 7];
    input.read_exact(&mut magic)?;
    if &magic != WEIGHT_MAGIC {
        return Err(Error::Frame("bad weight magic".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let count = u32::from_le_bytes(word) as usize;
    if count != targets.len() {
        return Err(Error::Config(format!(
            "weight file has {count} arrays, model expects {}",
            targets.len()
        )));
    }
    for (i, target) in targets.iter_mut().enumerate() {
        input.read_exact(&mut word)?;
        let len = u32::from_le_bytes(word) as usize;
        if len != target.len() {
            return Err(Error::Config(format!(
                "weight array {i} has {len} values, model expects {}",
                target.len()
            )));
        }
        let mut raw = vec![0u8; len * 4];
        input.read_exact(&mut raw)?;
        for (dst, b) in target.iter_mut().zip(raw.chunks_exact(4)) {
            let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            if !v.is_finite() {
                return Err(Error::NonFinite("weight file"));
            }
            *dst = v;
        }
    }
    Ok(())
}
