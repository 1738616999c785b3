//! Canonical byte encoding of the two messages that cross site boundaries.
//!
//! Every frame starts with a 16-byte header:
//!
//! | bytes  | field                         |
//! |--------|-------------------------------|
//! | 0..4   | magic `FDEM`                  |
//! | 4..6   | version (u16 LE)              |
//! | 6..8   | message kind (u16 LE)         |
//! | 8..16  | round (u64 LE)                |
//!
//! followed by an 8-byte shape block and little-endian `f64` payload in a
//! fixed field order. A [`GradientReport`] with S classes in d dimensions is
//! `24 + 8·(S − 1 + S·d)` bytes; a [`MeanBroadcast`] is `24 + 8·S·d`.

use std::io::{Read, Write};

use crate::error::{FedMixError, Result};

pub const MAGIC: [u8; 4] = *b"FDEM";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
/// Header plus the shape block that precedes every payload.
pub const FIXED_LEN: usize = HEADER_LEN + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u16)]
pub enum MessageKind {
    GradientReport = 1,
    MeanBroadcast = 2,
}

impl MessageKind {
    fn from_u16(v: u16) -> Result<Self> {
        match v {
            1 => Ok(MessageKind::GradientReport),
            2 => Ok(MessageKind::MeanBroadcast),
            other => Err(FedMixError::Decode(format!("unknown message kind {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub kind: MessageKind,
    pub round: u64,
}

/// Site → lead: the updated mixing weights and ∇_μ Q_j at the current iterate.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub site_id: usize,
    pub round: u64,
    /// λ̃_j^{t+1} as a full weight vector; only the S − 1 free entries travel.
    pub weights: Vec<f64>,
    /// Stacked S·d gradient, component order.
    pub grad_mu: Vec<f64>,
}

/// Lead → sites: the new class means.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanBroadcast {
    pub round: u64,
    pub means: Vec<Vec<f64>>,
}

pub fn gradient_report_len(classes: usize, dim: usize) -> usize {
    FIXED_LEN + 8 * (classes - 1 + classes * dim)
}

pub fn mean_broadcast_len(classes: usize, dim: usize) -> usize {
    FIXED_LEN + 8 * classes * dim
}

fn put_header(buf: &mut Vec<u8>, kind: MessageKind, round: u64) {
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(kind as u16).to_le_bytes());
    buf.extend_from_slice(&round.to_le_bytes());
}

fn shape_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| FedMixError::contract(format!("{what} {v} exceeds u16")))
}

pub fn decode_header(frame: &[u8]) -> Result<Header> {
    if frame.len() < FIXED_LEN {
        return Err(FedMixError::Decode(format!(
            "frame of {} bytes is shorter than the fixed header",
            frame.len()
        )));
    }
    if frame[0..4] != MAGIC {
        return Err(FedMixError::Decode("bad magic".into()));
    }
    let version = u16::from_le_bytes([frame[4], frame[5]]);
    if version != VERSION {
        return Err(FedMixError::Decode(format!("unsupported version {version}")));
    }
    let kind = MessageKind::from_u16(u16::from_le_bytes([frame[6], frame[7]]))?;
    let round = u64::from_le_bytes(frame[8..16].try_into().expect("8 bytes"));
    Ok(Header { kind, round })
}

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}

impl GradientReport {
    pub fn classes(&self) -> usize {
        self.weights.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let s = self.weights.len();
        if s < 2 || self.grad_mu.is_empty() || self.grad_mu.len() % s != 0 {
            return Err(FedMixError::contract(format!(
                "report shape: {} weights, {} gradient entries",
                s,
                self.grad_mu.len()
            )));
        }
        if self.grad_mu.iter().chain(&self.weights).any(|v| !v.is_finite()) {
            return Err(FedMixError::NumericalOverflow(format!(
                "site {} produced a non-finite report",
                self.site_id
            )));
        }
        let d = self.grad_mu.len() / s;
        let site = u32::try_from(self.site_id)
            .map_err(|_| FedMixError::contract("site id exceeds u32"))?;
        let mut buf = Vec::with_capacity(gradient_report_len(s, d));
        put_header(&mut buf, MessageKind::GradientReport, self.round);
        buf.extend_from_slice(&site.to_le_bytes());
        buf.extend_from_slice(&shape_u16(s, "classes")?.to_le_bytes());
        buf.extend_from_slice(&shape_u16(d, "dimension")?.to_le_bytes());
        for w in &self.weights[..s - 1] {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        for g in &self.grad_mu {
            buf.extend_from_slice(&g.to_le_bytes());
        }
        Ok(buf)
    }

    pub fn decode(frame: &[u8]) -> Result<Self> {
        let header = decode_header(frame)?;
        if header.kind != MessageKind::GradientReport {
            return Err(FedMixError::Decode(format!(
                "expected a gradient report, got {:?}",
                header.kind
            )));
        }
        let site_id = u32::from_le_bytes(frame[16..20].try_into().expect("4 bytes")) as usize;
        let s = u16::from_le_bytes([frame[20], frame[21]]) as usize;
        let d = u16::from_le_bytes([frame[22], frame[23]]) as usize;
        if s < 2 || d == 0 || frame.len() != gradient_report_len(s, d) {
            return Err(FedMixError::Decode(format!(
                "report length {} does not match S={s}, d={d}",
                frame.len()
            )));
        }
        let body = read_f64s(&frame[FIXED_LEN..]);
        let (free, grad) = body.split_at(s - 1);
        let mut weights = free.to_vec();
        weights.push(1.0 - free.iter().sum::<f64>());
        Ok(Self {
            site_id,
            round: header.round,
            weights,
            grad_mu: grad.to_vec(),
        })
    }
}

impl MeanBroadcast {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let s = self.means.len();
        let d = self.means.first().map(Vec::len).unwrap_or(0);
        if s < 2 || d == 0 || self.means.iter().any(|m| m.len() != d) {
            return Err(FedMixError::contract("broadcast means have inconsistent shape"));
        }
        let mut buf = Vec::with_capacity(mean_broadcast_len(s, d));
        put_header(&mut buf, MessageKind::MeanBroadcast, self.round);
        buf.extend_from_slice(&shape_u16(s, "classes")?.to_le_bytes());
        buf.extend_from_slice(&shape_u16(d, "dimension")?.to_le_bytes());
        buf.extend_from_slice(&[0u8; 4]);
        for m in &self.means {
            for v in m {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn decode(frame: &[u8]) -> Result<Self> {
        let header = decode_header(frame)?;
        if header.kind != MessageKind::MeanBroadcast {
            return Err(FedMixError::Decode(format!(
                "expected a mean broadcast, got {:?}",
                header.kind
            )));
        }
        let s = u16::from_le_bytes([frame[16], frame[17]]) as usize;
        let d = u16::from_le_bytes([frame[18], frame[19]]) as usize;
        if s < 2 || d == 0 || frame.len() != mean_broadcast_len(s, d) {
            return Err(FedMixError::Decode(format!(
                "broadcast length {} does not match S={s}, d={d}",
                frame.len()
            )));
        }
        let body = read_f64s(&frame[FIXED_LEN..]);
        Ok(Self {
            round: header.round,
            means: body.chunks_exact(d).map(<[f64]>::to_vec).collect(),
        })
    }
}

/// Every frame that crossed the boundary during a fit, in order.
///
/// Serialized as a sequence of `u32` little-endian length prefixes each
/// followed by that many frame bytes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MessageLog {
    frames: Vec<Vec<u8>>,
}

impl MessageLog {
    pub fn push(&mut self, frame: Vec<u8>) {
        self.frames.push(frame);
    }

    pub fn frames(&self) -> &[Vec<u8>] {
        &self.frames
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for f in &self.frames {
            out.write_all(&(f.len() as u32).to_le_bytes())?;
            out.write_all(f)?;
        }
        out.flush()
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| FedMixError::Decode(format!("reading message log: {e}")))?;
        let mut frames = Vec::new();
        let mut at = 0;
        while at < bytes.len() {
            if at + 4 > bytes.len() {
                return Err(FedMixError::Decode("truncated frame length".into()));
            }
            let len = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
            at += 4;
            if at + len > bytes.len() {
                return Err(FedMixError::Decode(format!(
                    "frame at offset {} claims {len} bytes, {} remain",
                    at - 4,
                    bytes.len() - at
                )));
            }
            frames.push(bytes[at..at + len].to_vec());
            at += len;
        }
        Ok(Self { frames })
    }
}
