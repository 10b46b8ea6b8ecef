//! Little-endian wire format.
//!
//! Every frame starts with a 16-byte header:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `SKYM`                            |
//! | 4      | 1    | variant                                 |
//! | 5      | 1    | sender                                  |
//! | 6      | 1    | recipient                               |
//! | 7      | 4    | round                                   |
//! | 11     | 4    | payload length                          |
//! | 15     | 1    | patch index (Refinement), otherwise 0   |
//!
//! Payloads:
//! - TaskAssign: u32 count, then `x0 y0 x1 y1` as u32 per rect.
//! - Refinement: `n` u16 labels then `n` f32 probabilities, row-major. The
//!   patch shape is not sent; the leader knows it from the assignment.
//! - StatShare: per layer a u32 channel count, then that many binary16
//!   means, then that many binary16 variances.
//! - FinalResult: u32 height, u32 width, labels as u16, probabilities as f32.

use half::f16;

use crate::backends::SegPrediction;
use crate::error::{Error, Result};
use crate::numerics::Grid;
use crate::tta::{DeviceId, NormStats, StatSet};
use crate::world::GeoRect;

pub const MAGIC: [u8; 4] = *b"SKYM";
pub const HEADER_LEN: usize = 16;
/// Recipient id for frames that leave the swarm (no modeled receiver).
pub const GROUND: DeviceId = 0xFF;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Variant {
    TaskAssign = 0,
    Refinement = 1,
    StatShare = 2,
    FinalResult = 3,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Self::TaskAssign => "task_assign",
            Self::Refinement => "refinement",
            Self::StatShare => "stat_share",
            Self::FinalResult => "final_result",
        }
    }

    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => Self::TaskAssign,
            1 => Self::Refinement,
            2 => Self::StatShare,
            3 => Self::FinalResult,
            other => return Err(Error::Frame(format!("unknown variant {other}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    TaskAssign { rects: Vec<GeoRect> },
    Refinement { patch_index: u8, labels: Vec<u16>, probs: Vec<f32> },
    /// Per-layer statistics; the publishing peer is the frame's sender.
    StatShare { stats: StatSet },
    FinalResult { prediction: SegPrediction },
}

impl Payload {
    pub fn variant(&self) -> Variant {
        match self {
            Self::TaskAssign { .. } => Variant::TaskAssign,
            Self::Refinement { .. } => Variant::Refinement,
            Self::StatShare { .. } => Variant::StatShare,
            Self::FinalResult { .. } => Variant::FinalResult,
        }
    }

    /// Refinement payload for `prediction`, flattened row-major.
    pub fn refinement(patch_index: u8, prediction: &SegPrediction) -> Self {
        Self::Refinement {
            patch_index,
            labels: prediction.labels().data().to_vec(),
            probs: prediction.probs().data().to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub sender: DeviceId,
    pub recipient: DeviceId,
    pub round: u32,
    pub payload: Payload,
}

impl Message {
    pub fn variant(&self) -> Variant {
        self.payload.variant()
    }

    pub fn payload_len(&self) -> usize {
        match &self.payload {
            Payload::TaskAssign { rects } => 4 + 16 * rects.len(),
            Payload::Refinement { labels, .. } => 6 * labels.len(),
            Payload::StatShare { stats } => stats.iter().map(|s| 4 + 4 * s.channels()).sum(),
            Payload::FinalResult { prediction } => 8 + 6 * prediction.height() * prediction.width(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload_len()
    }
}

/// Rounds every mean and variance to binary16 and back, the precision
/// statistics have after crossing the wire.
pub fn quantize_stats(stats: &[NormStats]) -> Result<StatSet> {
    stats
        .iter()
        .map(|s| {
            let q = |v: &f64| -> Result<f64> { Ok(to_f16(*v)?.to_f64()) };
            let mean = s.mean.iter().map(q).collect::<Result<_>>()?;
            let var = s.var.iter().map(q).collect::<Result<_>>()?;
            Ok(NormStats { mean, var, t: s.t })
        })
        .collect()
}

fn to_f16(v: f64) -> Result<f16> {
    let h = f16::from_f64(v);
    if !h.is_finite() {
        return Err(Error::Encoding(format!("statistic {v} not representable as binary16")));
    }
    Ok(h)
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Encoding(format!("{what} {n} exceeds u32")))
}

pub fn encode(msg: &Message) -> Result<Vec<u8>> {
    let payload_len = len_u32(msg.payload_len(), "payload length")?;
    let mut out = Vec::with_capacity(msg.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(msg.variant() as u8);
    out.push(msg.sender);
    out.push(msg.recipient);
    out.extend_from_slice(&msg.round.to_le_bytes());
    out.extend_from_slice(&payload_len.to_le_bytes());
    out.push(match &msg.payload {
        Payload::Refinement { patch_index, .. } => *patch_index,
        _ => 0,
    });
    debug_assert_eq!(out.len(), HEADER_LEN);

    match &msg.payload {
        Payload::TaskAssign { rects } => {
            out.extend_from_slice(&len_u32(rects.len(), "rect count")?.to_le_bytes());
            for r in rects {
                for v in [r.x0, r.y0, r.x1, r.y1] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Payload::Refinement { labels, probs, .. } => {
            if labels.len() != probs.len() {
                return Err(Error::Encoding(format!(
                    "{} labels but {} probabilities",
                    labels.len(),
                    probs.len()
                )));
            }
            put_grid(&mut out, labels, probs);
        }
        Payload::StatShare { stats } => {
            for s in stats {
                if s.mean.len() != s.var.len() {
                    return Err(Error::Encoding("mean/var length mismatch".into()));
                }
                out.extend_from_slice(&len_u32(s.channels(), "channel count")?.to_le_bytes());
                for v in s.mean.iter().chain(&s.var) {
                    out.extend_from_slice(&to_f16(*v)?.to_le_bytes());
                }
            }
        }
        Payload::FinalResult { prediction } => {
            out.extend_from_slice(&len_u32(prediction.height(), "height")?.to_le_bytes());
            out.extend_from_slice(&len_u32(prediction.width(), "width")?.to_le_bytes());
            put_grid(&mut out, prediction.labels().data(), prediction.probs().data());
        }
    }
    debug_assert_eq!(out.len(), msg.encoded_len());
    Ok(out)
}

fn put_grid(out: &mut Vec<u8>, labels: &[u16], probs: &[f32]) {
    for l in labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    for p in probs {
        out.extend_from_slice(&p.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Frame(format!("truncated: need {n} bytes, have {}", self.buf.len())));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u16s(&mut self, n: usize) -> Result<Vec<u16>> {
        let raw = self.take(n.checked_mul(2).ok_or_else(|| Error::Frame("count overflow".into()))?)?;
        Ok(raw.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Frame("count overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }

    fn f16s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(2).ok_or_else(|| Error::Frame("count overflow".into()))?)?;
        Ok(raw
            .chunks_exact(2)
            .map(|b| f16::from_le_bytes([b[0], b[1]]).to_f64())
            .collect())
    }
}

/// Parses one complete frame. Trailing bytes are rejected.
pub fn decode(bytes: &[u8]) -> Result<Message> {
    let mut cur = Cursor { buf: bytes };
    let header = cur.take(HEADER_LEN)?;
    if header[0..4] != MAGIC {
        return Err(Error::Frame(format!("bad magic {:02x?}", &header[0..4])));
    }
    let variant = Variant::from_u8(header[4])?;
    let (sender, recipient) = (header[5], header[6]);
    let round = u32::from_le_bytes(header[7..11].try_into().expect("4 bytes"));
    let payload_len = u32::from_le_bytes(header[11..15].try_into().expect("4 bytes")) as usize;
    let pad = header[15];
    if cur.buf.len() != payload_len {
        return Err(Error::Frame(format!(
            "payload length {payload_len} but {} bytes follow the header",
            cur.buf.len()
        )));
    }
    if variant != Variant::Refinement && pad != 0 {
        return Err(Error::Frame(format!("non-zero pad byte {pad}")));
    }

    let payload = match variant {
        Variant::TaskAssign => {
            let n = cur.u32()? as usize;
            if cur.buf.len() != n.saturating_mul(16) {
                return Err(Error::Frame(format!("{n} rects do not fit the payload")));
            }
            let rects = (0..n)
                .map(|_| {
                    let (x0, y0, x1, y1) = (cur.u32()?, cur.u32()?, cur.u32()?, cur.u32()?);
                    GeoRect::new(x0, y0, x1, y1).map_err(|e| Error::Frame(format!("bad rect: {e}")))
                })
                .collect::<Result<_>>()?;
            Payload::TaskAssign { rects }
        }
        Variant::Refinement => {
            if !payload_len.is_multiple_of(6) {
                return Err(Error::Frame(format!("refinement payload {payload_len} not a multiple of 6")));
            }
            let n = payload_len / 6;
            Payload::Refinement { patch_index: pad, labels: cur.u16s(n)?, probs: cur.f32s(n)? }
        }
        Variant::StatShare => {
            let mut stats = Vec::new();
            while !cur.buf.is_empty() {
                let c = cur.u32()? as usize;
                let mean = cur.f16s(c)?;
                let var = cur.f16s(c)?;
                stats.push(NormStats::new(mean, var).map_err(|e| Error::Frame(format!("bad statistics: {e}")))?);
            }
            Payload::StatShare { stats }
        }
        Variant::FinalResult => {
            let h = cur.u32()? as usize;
            let w = cur.u32()? as usize;
            let n = h.checked_mul(w).ok_or_else(|| Error::Frame("dims overflow".into()))?;
            if cur.buf.len() != n.saturating_mul(6) {
                return Err(Error::Frame(format!("{h}x{w} result does not fit the payload")));
            }
            let labels = Grid::new(h, w, cur.u16s(n)?).map_err(|e| Error::Frame(e.to_string()))?;
            let probs = Grid::new(h, w, cur.f32s(n)?).map_err(|e| Error::Frame(e.to_string()))?;
            let prediction = SegPrediction::new(labels, probs).map_err(|e| Error::Frame(e.to_string()))?;
            Payload::FinalResult { prediction }
        }
    };
    Ok(Message { sender, recipient, round, payload })
}
