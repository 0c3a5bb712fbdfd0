//! Lossy tensor codecs for exchange and optimizer-state storage.
//!
//! Three schemes share one chunk type:
//!
//! * `Q8Blockwise`: each block of `block_size` elements stores one f32 scale
//!   and one signed byte per element, `x ≈ code × scale` with
//!   `scale ≈ absmax(block) / 127`.
//! * `F16`: IEEE binary16, round-to-nearest-even.
//! * `F32`: raw little-endian f32, used where exchange must be lossless.
//!
//! Q8 scales are `absmax / 127` truncated to 17 significant bits. With at most
//! 7 bits of code magnitude, `code × scale` is then exact in f32, which makes
//! the per-element error bound `|x - x̂| ≤ scale / 2` hold on the decoded f32
//! values themselves and makes re-quantizing a decoded block reproduce the same
//! bytes.
//!
//! Wire layout (little-endian), [`CHUNK_HEADER_BYTES`] of header then data:
//!
//! ```text
//! magic "TQC1" | scheme u8 | reserved u8×3 | num_elements u64 | block_size u32
//! | scale_count u32 | scales f32×scale_count | payload
//! ```
//!
//! Scheme bytes: 1 = Q8 blockwise, 2 = F16, 3 = F32. `block_size` and
//! `scale_count` are zero for F16 and F32.

use std::ops::Range;

use half::f16;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, Execution};
use crate::tensor::{TensorBuf, TensorError};

pub const CHUNK_MAGIC: [u8; 4] = *b"TQC1";
pub const CHUNK_HEADER_BYTES: usize = 24;
pub const DEFAULT_Q8_THRESHOLD: usize = 1 << 16;
pub const DEFAULT_BLOCK_SIZE: usize = 4096;
/// Largest finite binary16 value.
pub const F16_MAX: f32 = 65504.0;

const SCALE_SIGNIFICANT_BITS: u32 = 17;
const Q8_MAX: f64 = 127.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("non-finite input {value} at index {index}")]
    NonFiniteInput { index: usize, value: f32 },
    #[error("value {value} at index {index} overflows binary16")]
    OverflowToInfinity { index: usize, value: f32 },
    #[error("malformed chunk: {0}")]
    MalformedChunk(String),
    #[error("invalid codec policy: {0}")]
    InvalidPolicy(String),
    #[error("expected {expected:?} chunk, found {found:?}")]
    SchemeMismatch { expected: Scheme, found: Scheme },
    #[error("slice {start}..{end} is not aligned to block size {block_size}")]
    Misaligned {
        start: usize,
        end: usize,
        block_size: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Scheme {
    Q8Blockwise = 1,
    F16 = 2,
    F32 = 3,
}

impl Scheme {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(Scheme::Q8Blockwise),
            2 => Some(Scheme::F16),
            3 => Some(Scheme::F32),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecPolicy {
    pub q8_threshold: usize,
    pub block_size: usize,
}

impl Default for CodecPolicy {
    fn default() -> Self {
        Self {
            q8_threshold: DEFAULT_Q8_THRESHOLD,
            block_size: DEFAULT_BLOCK_SIZE,
        }
    }
}

impl CodecPolicy {
    pub fn validate(&self) -> Result<(), CodecError> {
        if self.q8_threshold == 0 {
            return Err(CodecError::InvalidPolicy("q8_threshold must be >= 1".into()));
        }
        if self.block_size == 0 || self.block_size > u32::MAX as usize {
            return Err(CodecError::InvalidPolicy("block_size must be in 1..=u32::MAX".into()));
        }
        Ok(())
    }
}

/// Q8 for tensors with at least `q8_threshold` elements, F16 otherwise.
pub fn select_scheme(n: usize, policy: &CodecPolicy) -> Scheme {
    if n >= policy.q8_threshold {
        Scheme::Q8Blockwise
    } else {
        Scheme::F16
    }
}

/// How tensors travel between peers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExchangeCodec {
    /// Raw f32; decoding reproduces the input bit for bit.
    Lossless,
    /// Size-threshold selection between Q8 and F16.
    Compressed(CodecPolicy),
}

impl ExchangeCodec {
    pub fn scheme_for(&self, n: usize) -> Scheme {
        match self {
            ExchangeCodec::Lossless => Scheme::F32,
            ExchangeCodec::Compressed(p) => select_scheme(n, p),
        }
    }

    /// Element granularity at which encoded tensors may be sliced.
    pub fn unit_size(&self) -> usize {
        match self {
            ExchangeCodec::Lossless => DEFAULT_BLOCK_SIZE,
            ExchangeCodec::Compressed(p) => p.block_size,
        }
    }

    pub fn encode(&self, t: &TensorBuf) -> Result<QuantizedChunk, CodecError> {
        self.encode_as(self.scheme_for(t.len()), t)
    }

    /// Encodes with a scheme chosen for a larger enclosing tensor, so that a
    /// slice encodes exactly like the matching range of the whole.
    pub fn encode_as(&self, scheme: Scheme, t: &TensorBuf) -> Result<QuantizedChunk, CodecError> {
        match (scheme, self) {
            (Scheme::Q8Blockwise, ExchangeCodec::Compressed(p)) => quantize_q8(t, p.block_size),
            (Scheme::F16, _) => encode_f16(t),
            _ => encode_f32(t),
        }
    }
}

/// An encoded tensor. Shape is carried by the surrounding message.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedChunk {
    scheme: Scheme,
    num_elements: usize,
    block_size: usize,
    scales: Vec<f32>,
    payload: Vec<u8>,
}

impl QuantizedChunk {
    /// Assembles a chunk from parts, checking the structural invariants.
    pub fn from_parts(
        scheme: Scheme,
        num_elements: usize,
        block_size: usize,
        scales: Vec<f32>,
        payload: Vec<u8>,
    ) -> Result<Self, CodecError> {
        let c = Self {
            scheme,
            num_elements,
            block_size,
            scales,
            payload,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn num_elements(&self) -> usize {
        self.num_elements
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    /// Q8 codes as signed bytes.
    pub fn codes(&self) -> impl Iterator<Item = i8> + '_ {
        self.payload.iter().map(|&b| b as i8)
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let n = self.num_elements;
        let malformed = |m: String| Err(CodecError::MalformedChunk(m));
        match self.scheme {
            Scheme::Q8Blockwise => {
                if self.block_size == 0 {
                    return malformed("q8 chunk with zero block size".into());
                }
                let blocks = n.div_ceil(self.block_size);
                if self.scales.len() != blocks {
                    return malformed(format!("{} scales for {} blocks", self.scales.len(), blocks));
                }
                if self.payload.len() != n {
                    return malformed(format!("{} payload bytes for {} elements", self.payload.len(), n));
                }
                if let Some(s) = self.scales.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
                    return malformed(format!("invalid scale {s}"));
                }
            }
            Scheme::F16 | Scheme::F32 => {
                let width = if self.scheme == Scheme::F16 { 2 } else { 4 };
                if !self.scales.is_empty() {
                    return malformed("scales present on a float chunk".into());
                }
                if self.payload.len() != width * n {
                    return malformed(format!("{} payload bytes for {} elements", self.payload.len(), n));
                }
            }
        }
        Ok(())
    }

    /// Payload plus scale bytes, excluding the wire header.
    pub fn data_bytes(&self) -> usize {
        self.payload.len() + 4 * self.scales.len()
    }

    /// Total size in the wire layout.
    pub fn wire_len(&self) -> usize {
        CHUNK_HEADER_BYTES + self.data_bytes()
    }

    pub fn decode(&self) -> Result<TensorBuf, CodecError> {
        match self.scheme {
            Scheme::Q8Blockwise => dequantize_q8(self),
            Scheme::F16 => decode_f16(self),
            Scheme::F32 => decode_f32(self),
        }
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.reserve(self.wire_len());
        out.extend_from_slice(&CHUNK_MAGIC);
        out.push(self.scheme as u8);
        out.extend_from_slice(&[0u8; 3]);
        out.extend_from_slice(&(self.num_elements as u64).to_le_bytes());
        let bs = if self.scheme == Scheme::Q8Blockwise {
            self.block_size as u32
        } else {
            0
        };
        out.extend_from_slice(&bs.to_le_bytes());
        out.extend_from_slice(&(self.scales.len() as u32).to_le_bytes());
        for s in &self.scales {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&self.payload);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        self.write_to(&mut out);
        out
    }

    /// Parses one chunk from the front of `buf`, returning it and the number
    /// of bytes consumed.
    pub fn read_from(buf: &[u8]) -> Result<(Self, usize), CodecError> {
        let malformed = |m: &str| CodecError::MalformedChunk(m.to_string());
        if buf.len() < CHUNK_HEADER_BYTES {
            return Err(malformed("truncated header"));
        }
        if buf[0..4] != CHUNK_MAGIC {
            return Err(malformed("bad magic"));
        }
        let scheme = Scheme::from_byte(buf[4]).ok_or_else(|| malformed("unknown scheme"))?;
        if buf[5..8] != [0, 0, 0] {
            return Err(malformed("reserved bytes set"));
        }
        let n = u64::from_le_bytes(buf[8..16].try_into().unwrap());
        let n = usize::try_from(n).map_err(|_| malformed("element count overflows"))?;
        let block_size = u32::from_le_bytes(buf[16..20].try_into().unwrap()) as usize;
        let scale_count = u32::from_le_bytes(buf[20..24].try_into().unwrap()) as usize;
        let width = match scheme {
            Scheme::Q8Blockwise => 1,
            Scheme::F16 => 2,
            Scheme::F32 => 4,
        };
        let payload_len = n.checked_mul(width).ok_or_else(|| malformed("payload overflows"))?;
        let total = scale_count
            .checked_mul(4)
            .and_then(|s| s.checked_add(payload_len))
            .and_then(|s| s.checked_add(CHUNK_HEADER_BYTES))
            .ok_or_else(|| malformed("length overflows"))?;
        if buf.len() < total {
            return Err(malformed("truncated body"));
        }
        let mut at = CHUNK_HEADER_BYTES;
        let scales = buf[at..at + 4 * scale_count]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        at += 4 * scale_count;
        let payload = buf[at..at + payload_len].to_vec();
        let chunk = Self::from_parts(scheme, n, block_size, scales, payload)?;
        Ok((chunk, total))
    }

    /// Parses a buffer holding exactly one chunk.
    pub fn from_bytes(buf: &[u8]) -> Result<Self, CodecError> {
        let (c, used) = Self::read_from(buf)?;
        if used != buf.len() {
            return Err(CodecError::MalformedChunk(format!(
                "{} trailing bytes",
                buf.len() - used
            )));
        }
        Ok(c)
    }

    /// Sub-chunk covering `elems`. Q8 ranges must start on a block boundary
    /// and end on one or at the end of the chunk.
    pub fn slice(&self, elems: Range<usize>) -> Result<Self, CodecError> {
        let Range { start, end } = elems;
        if start > end || end > self.num_elements {
            return Err(CodecError::MalformedChunk(format!(
                "slice {start}..{end} out of {} elements",
                self.num_elements
            )));
        }
        match self.scheme {
            Scheme::Q8Blockwise => {
                let bs = self.block_size;
                if start % bs != 0 || (end % bs != 0 && end != self.num_elements) {
                    return Err(CodecError::Misaligned {
                        start,
                        end,
                        block_size: bs,
                    });
                }
                Ok(Self {
                    scheme: self.scheme,
                    num_elements: end - start,
                    block_size: bs,
                    scales: self.scales[start / bs..end.div_ceil(bs)].to_vec(),
                    payload: self.payload[start..end].to_vec(),
                })
            }
            Scheme::F16 | Scheme::F32 => {
                let w = if self.scheme == Scheme::F16 { 2 } else { 4 };
                Ok(Self {
                    scheme: self.scheme,
                    num_elements: end - start,
                    block_size: 0,
                    scales: Vec::new(),
                    payload: self.payload[w * start..w * end].to_vec(),
                })
            }
        }
    }

    /// Inverse of slicing: joins consecutive pieces of one encoded tensor.
    pub fn concat(parts: &[QuantizedChunk]) -> Result<Self, CodecError> {
        let first = parts
            .first()
            .ok_or_else(|| CodecError::MalformedChunk("nothing to concatenate".into()))?;
        let mut out = Self {
            scheme: first.scheme,
            num_elements: 0,
            block_size: first.block_size,
            scales: Vec::new(),
            payload: Vec::new(),
        };
        for (i, p) in parts.iter().enumerate() {
            if p.scheme != out.scheme {
                return Err(CodecError::SchemeMismatch {
                    expected: out.scheme,
                    found: p.scheme,
                });
            }
            if out.scheme == Scheme::Q8Blockwise {
                if p.block_size != out.block_size {
                    return Err(CodecError::MalformedChunk("block size differs between parts".into()));
                }
                if i + 1 < parts.len() && p.num_elements % p.block_size != 0 {
                    return Err(CodecError::Misaligned {
                        start: out.num_elements,
                        end: out.num_elements + p.num_elements,
                        block_size: p.block_size,
                    });
                }
            }
            out.num_elements += p.num_elements;
            out.scales.extend_from_slice(&p.scales);
            out.payload.extend_from_slice(&p.payload);
        }
        Ok(out)
    }
}

fn check_input(data: &[f32]) -> Result<(), CodecError> {
    match data.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(CodecError::NonFiniteInput {
            index,
            value: data[index],
        }),
        None => Ok(()),
    }
}

/// `absmax / 127` truncated to [`SCALE_SIGNIFICANT_BITS`] bits.
fn block_scale(absmax: f32) -> f32 {
    if absmax == 0.0 {
        return 0.0;
    }
    let s = absmax as f64 / Q8_MAX;
    let drop = 52 - (SCALE_SIGNIFICANT_BITS - 1);
    let truncated = f64::from_bits(s.to_bits() & !((1u64 << drop) - 1));
    let mut s32 = truncated as f32;
    // Only reachable below the f32 normal range, where the cast rounds.
    if (s32 as f64) < truncated {
        s32 = s32.next_up();
    }
    s32
}

fn quantize_value(x: f32, scale: f32) -> i8 {
    let (x, s) = (x as f64, scale as f64);
    let mut c = (x / s).round_ties_even().clamp(-Q8_MAX, Q8_MAX);
    // `c * s` and the difference below are exact in f64.
    let r = x - c * s;
    if r > s / 2.0 && c < Q8_MAX {
        c += 1.0;
    } else if r < -s / 2.0 && c > -Q8_MAX {
        c -= 1.0;
    }
    c as i8
}

pub fn quantize_q8(t: &TensorBuf, block_size: usize) -> Result<QuantizedChunk, CodecError> {
    quantize_q8_with(t, block_size, Execution::default())
}

/// Blockwise absmax quantization; blocks are independent and may run in
/// parallel.
pub fn quantize_q8_with(t: &TensorBuf, block_size: usize, exec: Execution) -> Result<QuantizedChunk, CodecError> {
    if block_size == 0 || block_size > u32::MAX as usize {
        return Err(CodecError::InvalidPolicy("block_size must be in 1..=u32::MAX".into()));
    }
    let data = t.data();
    check_input(data)?;
    let mut payload = vec![0u8; data.len()];
    let scales = par::zip_chunks_map(exec, &mut payload, data, block_size, |_, out, block| {
        let absmax = block.iter().fold(0.0f32, |m, x| m.max(x.abs()));
        let scale = block_scale(absmax);
        if scale > 0.0 {
            for (o, &x) in out.iter_mut().zip(block) {
                *o = quantize_value(x, scale) as u8;
            }
        }
        scale
    });
    Ok(QuantizedChunk {
        scheme: Scheme::Q8Blockwise,
        num_elements: data.len(),
        block_size,
        scales,
        payload,
    })
}

pub fn dequantize_q8(c: &QuantizedChunk) -> Result<TensorBuf, CodecError> {
    dequantize_q8_with(c, Execution::default())
}

pub fn dequantize_q8_with(c: &QuantizedChunk, exec: Execution) -> Result<TensorBuf, CodecError> {
    if c.scheme != Scheme::Q8Blockwise {
        return Err(CodecError::SchemeMismatch {
            expected: Scheme::Q8Blockwise,
            found: c.scheme,
        });
    }
    c.validate()?;
    let mut out = vec![0.0f32; c.num_elements];
    par::zip_chunks_map(exec, &mut out, &c.payload, c.block_size, |b, out, codes| {
        let scale = c.scales[b];
        for (o, &code) in out.iter_mut().zip(codes) {
            *o = (code as i8) as f32 * scale;
        }
    });
    Ok(TensorBuf::from_vec(out))
}

pub fn encode_f16(t: &TensorBuf) -> Result<QuantizedChunk, CodecError> {
    let data = t.data();
    check_input(data)?;
    let mut payload = Vec::with_capacity(2 * data.len());
    for (index, &value) in data.iter().enumerate() {
        if value.abs() > F16_MAX {
            return Err(CodecError::OverflowToInfinity { index, value });
        }
        payload.extend_from_slice(&f16::from_f32(value).to_bits().to_le_bytes());
    }
    Ok(QuantizedChunk {
        scheme: Scheme::F16,
        num_elements: data.len(),
        block_size: 0,
        scales: Vec::new(),
        payload,
    })
}

pub fn decode_f16(c: &QuantizedChunk) -> Result<TensorBuf, CodecError> {
    if c.scheme != Scheme::F16 {
        return Err(CodecError::SchemeMismatch {
            expected: Scheme::F16,
            found: c.scheme,
        });
    }
    c.validate()?;
    let out: Vec<f32> = c
        .payload
        .chunks_exact(2)
        .map(|b| f16::from_bits(u16::from_le_bytes([b[0], b[1]])).to_f32())
        .collect();
    reject_non_finite(&out)?;
    Ok(TensorBuf::from_vec(out))
}

pub fn encode_f32(t: &TensorBuf) -> Result<QuantizedChunk, CodecError> {
    let data = t.data();
    check_input(data)?;
    let mut payload = Vec::with_capacity(4 * data.len());
    for x in data {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    Ok(QuantizedChunk {
        scheme: Scheme::F32,
        num_elements: data.len(),
        block_size: 0,
        scales: Vec::new(),
        payload,
    })
}

pub fn decode_f32(c: &QuantizedChunk) -> Result<TensorBuf, CodecError> {
    if c.scheme != Scheme::F32 {
        return Err(CodecError::SchemeMismatch {
            expected: Scheme::F32,
            found: c.scheme,
        });
    }
    c.validate()?;
    let out: Vec<f32> = c
        .payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    reject_non_finite(&out)?;
    Ok(TensorBuf::from_vec(out))
}

fn reject_non_finite(out: &[f32]) -> Result<(), CodecError> {
    match out.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(CodecError::MalformedChunk(format!("non-finite value at {i}"))),
        None => Ok(()),
    }
}

/// Wire size in bytes of an `n`-element chunk, header included.
pub fn encoded_size(scheme: Scheme, n: usize, block_size: usize) -> usize {
    CHUNK_HEADER_BYTES
        + match scheme {
            Scheme::Q8Blockwise => n + 4 * n.div_ceil(block_size.max(1)),
            Scheme::F16 => 2 * n,
            Scheme::F32 => 4 * n,
        }
}
