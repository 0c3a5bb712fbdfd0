//! Optimizer checkpoint file.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "TOPT" | version u16 (=1) | algorithm u8 (0 adam, 1 lamb)
//! | state_bits u8 (32 or 8) | tier u8 (0 compute, 1 offloaded) | reserved u8
//! | beta1 f32 | beta2 f32 | epsilon f32 | weight_decay f32
//! | trust_clip_min f32 | trust_clip_max f32 | state_block_size u32
//! | step u64 | transfer_bytes u64 | layer_count u32
//! then per layer: name_len u16 | name utf-8 | m chunk | v chunk
//! ```
//!
//! Chunks use the codec wire layout. Full-precision state is stored as F32
//! chunks of `m` and `v`; 8-bit state as Q8 chunks of `m` and `sqrt(v)`.

use std::io::Write;

use super::{Algorithm, Moments, OptimConfig, OptimError, OptimState, StateBits, StorageTier};
use crate::codec::{self, QuantizedChunk, Scheme};
use crate::tensor::TensorBuf;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TOPT";
const VERSION: u16 = 1;

pub fn write_checkpoint(
    out: &mut impl Write,
    cfg: &OptimConfig,
    state: &OptimState,
    layer_names: &[String],
) -> Result<(), OptimError> {
    if layer_names.len() != state.layers.len() {
        return Err(OptimError::Checkpoint(format!(
            "{} names for {} layers",
            layer_names.len(),
            state.layers.len()
        )));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(match cfg.algorithm {
        Algorithm::Adam => 0,
        Algorithm::Lamb => 1,
    });
    buf.push(state.bits().bits());
    buf.push(match state.tier {
        StorageTier::Compute => 0,
        StorageTier::Offloaded => 1,
    });
    buf.push(0);
    for x in [
        cfg.beta1,
        cfg.beta2,
        cfg.epsilon,
        cfg.weight_decay,
        cfg.trust_clip.0,
        cfg.trust_clip.1,
    ] {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf.extend_from_slice(&(state.block_size() as u32).to_le_bytes());
    buf.extend_from_slice(&state.step.to_le_bytes());
    buf.extend_from_slice(&state.transfer_bytes_accumulated.to_le_bytes());
    buf.extend_from_slice(&(state.layers.len() as u32).to_le_bytes());
    for (name, moments) in layer_names.iter().zip(&state.layers) {
        let name_len =
            u16::try_from(name.len()).map_err(|_| OptimError::Checkpoint(format!("layer name too long: {name}")))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        match moments {
            Moments::Full { m, v } => {
                codec::encode_f32(&TensorBuf::from_vec(m.clone()))?.write_to(&mut buf);
                codec::encode_f32(&TensorBuf::from_vec(v.clone()))?.write_to(&mut buf);
            }
            Moments::Packed { m, sqrt_v } => {
                m.write_to(&mut buf);
                sqrt_v.write_to(&mut buf);
            }
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], OptimError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| OptimError::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, OptimError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, OptimError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, OptimError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, OptimError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, OptimError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn chunk(&mut self) -> Result<QuantizedChunk, OptimError> {
        let (c, used) = QuantizedChunk::read_from(&self.buf[self.at..])?;
        self.at += used;
        Ok(c)
    }
}

/// Parses a checkpoint, returning the config, the state and the layer names.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(OptimConfig, OptimState, Vec<String>), OptimError> {
    let bad = |m: &str| OptimError::Checkpoint(m.to_string());
    let mut c = Cursor { buf: bytes, at: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    if c.u16()? != VERSION {
        return Err(bad("unsupported version"));
    }
    let algorithm = match c.u8()? {
        0 => Algorithm::Adam,
        1 => Algorithm::Lamb,
        _ => return Err(bad("unknown algorithm")),
    };
    let bits = StateBits::from_bits(c.u8()?).ok_or_else(|| bad("unknown state bits"))?;
    let tier = match c.u8()? {
        0 => StorageTier::Compute,
        1 => StorageTier::Offloaded,
        _ => return Err(bad("unknown tier")),
    };
    c.u8()?;
    let (beta1, beta2, epsilon, weight_decay) = (c.f32()?, c.f32()?, c.f32()?, c.f32()?);
    let trust_clip = (c.f32()?, c.f32()?);
    let block_size = c.u32()? as usize;
    let step = c.u64()?;
    let transfer = c.u64()?;
    let n_layers = c.u32()? as usize;
    let mut names = Vec::with_capacity(n_layers.min(1 << 16));
    let mut layers = Vec::with_capacity(n_layers.min(1 << 16));
    for _ in 0..n_layers {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?).map_err(|_| bad("layer name is not utf-8"))?;
        names.push(name.to_string());
        let (m, v) = (c.chunk()?, c.chunk()?);
        if m.num_elements() != v.num_elements() {
            return Err(bad("moment lengths differ"));
        }
        let moments = match bits {
            StateBits::Full => {
                if m.scheme() != Scheme::F32 || v.scheme() != Scheme::F32 {
                    return Err(bad("full-precision state must use f32 chunks"));
                }
                Moments::Full {
                    m: m.decode()?.into_data(),
                    v: v.decode()?.into_data(),
                }
            }
            StateBits::Eight => {
                if m.scheme() != Scheme::Q8Blockwise || v.scheme() != Scheme::Q8Blockwise {
                    return Err(bad("8-bit state must use q8 chunks"));
                }
                Moments::Packed { m, sqrt_v: v }
            }
        };
        layers.push(moments);
    }
    if c.at != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let cfg = OptimConfig {
        algorithm,
        beta1,
        beta2,
        epsilon,
        weight_decay,
        trust_clip,
        state_bits: bits,
        state_tier: tier,
        state_block_size: block_size,
    };
    cfg.validate()?;
    let state = OptimState::from_parts(layers, step, tier, transfer, bits, block_size);
    Ok((cfg, state, names))
}
