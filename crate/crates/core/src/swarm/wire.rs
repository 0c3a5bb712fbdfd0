//! Length-prefixed protocol messages.
//!
//! ```text
//! frame  = length u32 | type u8 | body        (length counts type + body)
//! chunks = count u32 | chunk*                  (codec chunk layout)
//!
//! 1 JOIN      peer u32 | token_len u16 | token
//! 2 JOIN_ACK  round u64 | chunks (params) | state_len u64 | optimizer checkpoint
//! 3 PROGRESS  round u64 | samples u64 | compute_seconds f64
//! 4 TRIGGER   round u64 | attempt u32 | count u32 | (peer u32 | samples u64 | score f64)*
//! 5 CONTRIB   round u64 | attempt u32 | samples u64 | chunks
//! 6 SLICE     round u64 | attempt u32 | samples u64 | norm f64 | units u32 u32 | chunks
//! 7 GATHER    round u64 | attempt u32 | units u32 u32 | chunks
//! 8 STEP_DONE round u64 | param_hash u64
//! 9 LEAVE     peer u32
//! ```
//!
//! All integers and floats are little-endian.

use std::ops::Range;

use super::{PeerId, SwarmError};
use crate::codec::QuantizedChunk;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Member {
    pub peer: PeerId,
    pub samples: u64,
    pub bandwidth_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Join {
        peer: PeerId,
        token: String,
    },
    JoinAck {
        round_id: u64,
        params: Vec<QuantizedChunk>,
        optimizer: Vec<u8>,
    },
    Progress {
        round_id: u64,
        samples: u64,
        compute_seconds: f64,
    },
    Trigger {
        round_id: u64,
        attempt: u32,
        members: Vec<Member>,
    },
    Contrib {
        round_id: u64,
        attempt: u32,
        samples: u64,
        chunks: Vec<QuantizedChunk>,
    },
    Slice {
        round_id: u64,
        attempt: u32,
        samples: u64,
        norm: f64,
        units: Range<u32>,
        chunks: Vec<QuantizedChunk>,
    },
    Gather {
        round_id: u64,
        attempt: u32,
        units: Range<u32>,
        chunks: Vec<QuantizedChunk>,
    },
    StepDone {
        round_id: u64,
        param_hash: u64,
    },
    Leave {
        peer: PeerId,
    },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Join { .. } => "JOIN",
            Message::JoinAck { .. } => "JOIN_ACK",
            Message::Progress { .. } => "PROGRESS",
            Message::Trigger { .. } => "TRIGGER",
            Message::Contrib { .. } => "CONTRIB",
            Message::Slice { .. } => "SLICE",
            Message::Gather { .. } => "GATHER",
            Message::StepDone { .. } => "STEP_DONE",
            Message::Leave { .. } => "LEAVE",
        }
    }

    fn type_byte(&self) -> u8 {
        match self {
            Message::Join { .. } => 1,
            Message::JoinAck { .. } => 2,
            Message::Progress { .. } => 3,
            Message::Trigger { .. } => 4,
            Message::Contrib { .. } => 5,
            Message::Slice { .. } => 6,
            Message::Gather { .. } => 7,
            Message::StepDone { .. } => 8,
            Message::Leave { .. } => 9,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = vec![0u8; 4];
        b.push(self.type_byte());
        match self {
            Message::Join { peer, token } => {
                put_u32(&mut b, peer.0);
                let t = token.as_bytes();
                let n = t.len().min(u16::MAX as usize);
                b.extend_from_slice(&(n as u16).to_le_bytes());
                b.extend_from_slice(&t[..n]);
            }
            Message::JoinAck {
                round_id,
                params,
                optimizer,
            } => {
                put_u64(&mut b, *round_id);
                put_chunks(&mut b, params);
                put_u64(&mut b, optimizer.len() as u64);
                b.extend_from_slice(optimizer);
            }
            Message::Progress {
                round_id,
                samples,
                compute_seconds,
            } => {
                put_u64(&mut b, *round_id);
                put_u64(&mut b, *samples);
                put_f64(&mut b, *compute_seconds);
            }
            Message::Trigger {
                round_id,
                attempt,
                members,
            } => {
                put_u64(&mut b, *round_id);
                put_u32(&mut b, *attempt);
                put_u32(&mut b, members.len() as u32);
                for m in members {
                    put_u32(&mut b, m.peer.0);
                    put_u64(&mut b, m.samples);
                    put_f64(&mut b, m.bandwidth_score);
                }
            }
            Message::Contrib {
                round_id,
                attempt,
                samples,
                chunks,
            } => {
                put_u64(&mut b, *round_id);
                put_u32(&mut b, *attempt);
                put_u64(&mut b, *samples);
                put_chunks(&mut b, chunks);
            }
            Message::Slice {
                round_id,
                attempt,
                samples,
                norm,
                units,
                chunks,
            } => {
                put_u64(&mut b, *round_id);
                put_u32(&mut b, *attempt);
                put_u64(&mut b, *samples);
                put_f64(&mut b, *norm);
                put_u32(&mut b, units.start);
                put_u32(&mut b, units.end);
                put_chunks(&mut b, chunks);
            }
            Message::Gather {
                round_id,
                attempt,
                units,
                chunks,
            } => {
                put_u64(&mut b, *round_id);
                put_u32(&mut b, *attempt);
                put_u32(&mut b, units.start);
                put_u32(&mut b, units.end);
                put_chunks(&mut b, chunks);
            }
            Message::StepDone { round_id, param_hash } => {
                put_u64(&mut b, *round_id);
                put_u64(&mut b, *param_hash);
            }
            Message::Leave { peer } => put_u32(&mut b, peer.0),
        }
        let len = (b.len() - 4) as u32;
        b[..4].copy_from_slice(&len.to_le_bytes());
        b
    }

    /// Decodes one frame from the front of `buf`, returning the message and
    /// the number of bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(Self, usize), SwarmError> {
        let mut r = Reader { buf, pos: 0 };
        let len = r.u32()? as usize;
        let end = 4usize
            .checked_add(len)
            .filter(|&e| e <= buf.len())
            .ok_or_else(|| SwarmError::Wire(format!("frame of {len} bytes exceeds buffer of {}", buf.len())))?;
        r.buf = &buf[..end];
        let ty = r.u8()?;
        let msg = match ty {
            1 => {
                let peer = PeerId(r.u32()?);
                let n = r.u16()? as usize;
                let token = String::from_utf8(r.bytes(n)?.to_vec()).map_err(|e| SwarmError::Wire(e.to_string()))?;
                Message::Join { peer, token }
            }
            2 => {
                let round_id = r.u64()?;
                let params = r.chunks()?;
                let n = r.u64()? as usize;
                let optimizer = r.bytes(n)?.to_vec();
                Message::JoinAck {
                    round_id,
                    params,
                    optimizer,
                }
            }
            3 => Message::Progress {
                round_id: r.u64()?,
                samples: r.u64()?,
                compute_seconds: r.f64()?,
            },
            4 => {
                let round_id = r.u64()?;
                let attempt = r.u32()?;
                let n = r.u32()? as usize;
                let mut members = Vec::with_capacity(n.min(1 << 16));
                for _ in 0..n {
                    members.push(Member {
                        peer: PeerId(r.u32()?),
                        samples: r.u64()?,
                        bandwidth_score: r.f64()?,
                    });
                }
                Message::Trigger {
                    round_id,
                    attempt,
                    members,
                }
            }
            5 => Message::Contrib {
                round_id: r.u64()?,
                attempt: r.u32()?,
                samples: r.u64()?,
                chunks: r.chunks()?,
            },
            6 => Message::Slice {
                round_id: r.u64()?,
                attempt: r.u32()?,
                samples: r.u64()?,
                norm: r.f64()?,
                units: r.u32()?..r.u32()?,
                chunks: r.chunks()?,
            },
            7 => Message::Gather {
                round_id: r.u64()?,
                attempt: r.u32()?,
                units: r.u32()?..r.u32()?,
                chunks: r.chunks()?,
            },
            8 => Message::StepDone {
                round_id: r.u64()?,
                param_hash: r.u64()?,
            },
            9 => Message::Leave { peer: PeerId(r.u32()?) },
            t => return Err(SwarmError::Wire(format!("unknown message type {t}"))),
        };
        if r.pos != end {
            return Err(SwarmError::Wire(format!("{} trailing bytes in frame", end - r.pos)));
        }
        Ok((msg, end))
    }
}

fn put_u32(b: &mut Vec<u8>, x: u32) {
    b.extend_from_slice(&x.to_le_bytes());
}

fn put_u64(b: &mut Vec<u8>, x: u64) {
    b.extend_from_slice(&x.to_le_bytes());
}

fn put_f64(b: &mut Vec<u8>, x: f64) {
    b.extend_from_slice(&x.to_le_bytes());
}

fn put_chunks(b: &mut Vec<u8>, chunks: &[QuantizedChunk]) {
    put_u32(b, chunks.len() as u32);
    for c in chunks {
        c.write_to(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8], SwarmError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| SwarmError::Wire("truncated frame".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, SwarmError> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, SwarmError> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, SwarmError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, SwarmError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, SwarmError> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn chunks(&mut self) -> Result<Vec<QuantizedChunk>, SwarmError> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let (c, used) = QuantizedChunk::read_from(&self.buf[self.pos..])?;
            self.pos += used;
            out.push(c);
        }
        Ok(out)
    }
}
