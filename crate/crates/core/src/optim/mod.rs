//! Adam and LAMB with optional 8-bit state and an offload tier.
//!
//! Moments are always updated in f32. With 8-bit state they are decoded before
//! the update and re-encoded after it; the second moment is stored as
//! `Q8(sqrt(v))` so the symmetric codebook covers a non-negative quantity and
//! `v` stays non-negative after decoding.

mod checkpoint;
mod schedule;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use schedule::ScheduleConfig;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, CodecError, QuantizedChunk, DEFAULT_BLOCK_SIZE};
use crate::par::{self, Execution};
use crate::tensor::{ParamSet, TensorBuf, TensorError};

const UPDATE_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient {value} at {layer}[{index}]")]
    NonFiniteGradient { layer: String, index: usize, value: f32 },
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Adam,
    Lamb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StateBits {
    #[serde(rename = "32")]
    Full,
    #[serde(rename = "8")]
    Eight,
}

impl StateBits {
    pub fn bits(self) -> u8 {
        match self {
            StateBits::Full => 32,
            StateBits::Eight => 8,
        }
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        match bits {
            32 => Some(StateBits::Full),
            8 => Some(StateBits::Eight),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StorageTier {
    Compute,
    Offloaded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub algorithm: Algorithm,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub weight_decay: f32,
    /// LAMB trust ratio bounds (min, max).
    pub trust_clip: (f32, f32),
    pub state_bits: StateBits,
    pub state_tier: StorageTier,
    pub state_block_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self::lamb()
    }
}

impl OptimConfig {
    pub fn adam() -> Self {
        Self {
            algorithm: Algorithm::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            trust_clip: (0.0, 10.0),
            state_bits: StateBits::Full,
            state_tier: StorageTier::Compute,
            state_block_size: DEFAULT_BLOCK_SIZE,
        }
    }

    pub fn lamb() -> Self {
        Self {
            algorithm: Algorithm::Lamb,
            beta2: 0.95,
            ..Self::adam()
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::InvalidConfig(m.into()));
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must be in [0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        let (lo, hi) = self.trust_clip;
        if !(lo >= 0.0 && lo <= hi) {
            return bad("trust_clip must satisfy 0 <= min <= max");
        }
        if self.state_block_size == 0 {
            return bad("state_block_size must be positive");
        }
        Ok(())
    }
}

/// Moment buffers of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Moments {
    Full { m: Vec<f32>, v: Vec<f32> },
    Packed { m: QuantizedChunk, sqrt_v: QuantizedChunk },
}

impl Moments {
    fn len(&self) -> usize {
        match self {
            Moments::Full { m, .. } => m.len(),
            Moments::Packed { m, .. } => m.num_elements(),
        }
    }

    /// Bytes a tier transfer moves: 4 per element per buffer at full
    /// precision, payload plus scales when packed.
    pub fn transfer_bytes(&self) -> u64 {
        match self {
            Moments::Full { m, v } => 4 * (m.len() + v.len()) as u64,
            Moments::Packed { m, sqrt_v } => (m.data_bytes() + sqrt_v.data_bytes()) as u64,
        }
    }

    fn pack(self, block_size: usize) -> Result<Self, OptimError> {
        match self {
            Moments::Full { m, v } => {
                let sqrt_v: Vec<f32> = v.iter().map(|&x| x.max(0.0).sqrt()).collect();
                Ok(Moments::Packed {
                    m: codec::quantize_q8(&TensorBuf::from_vec(m), block_size)?,
                    sqrt_v: codec::quantize_q8(&TensorBuf::from_vec(sqrt_v), block_size)?,
                })
            }
            packed => Ok(packed),
        }
    }

    fn unpack(self) -> Result<Self, OptimError> {
        match self {
            Moments::Packed { m, sqrt_v } => {
                let m = codec::dequantize_q8(&m)?.into_data();
                let v = codec::dequantize_q8(&sqrt_v)?
                    .into_data()
                    .into_iter()
                    .map(|s| s * s)
                    .collect();
                Ok(Moments::Full { m, v })
            }
            full => Ok(full),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub layers: Vec<Moments>,
    pub step: u64,
    pub tier: StorageTier,
    pub transfer_bytes_accumulated: u64,
    bits: StateBits,
    block_size: usize,
}

impl OptimState {
    /// Zero moments matching `params`, encoded per `cfg.state_bits`.
    pub fn zeros(params: &ParamSet, cfg: &OptimConfig) -> Result<Self, OptimError> {
        let layers = params
            .layers()
            .iter()
            .map(|l| Moments::Full {
                m: vec![0.0; l.tensor.len()],
                v: vec![0.0; l.tensor.len()],
            })
            .collect();
        let st = Self {
            layers,
            step: 0,
            tier: cfg.state_tier,
            transfer_bytes_accumulated: 0,
            bits: StateBits::Full,
            block_size: cfg.state_block_size,
        };
        st.pack_state(cfg.state_bits)
    }

    pub fn bits(&self) -> StateBits {
        self.bits
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Re-encodes every layer to `bits`. Packing an already packed state is a
    /// no-op on its bytes.
    pub fn pack_state(mut self, bits: StateBits) -> Result<Self, OptimError> {
        let bs = self.block_size;
        self.layers = self
            .layers
            .into_iter()
            .map(|m| match bits {
                StateBits::Eight => m.pack(bs),
                StateBits::Full => m.unpack(),
            })
            .collect::<Result<_, _>>()?;
        self.bits = bits;
        Ok(self)
    }

    pub fn unpack_state(self) -> Result<Self, OptimError> {
        self.pack_state(StateBits::Full)
    }

    pub fn transfer_size(&self) -> u64 {
        self.layers.iter().map(Moments::transfer_bytes).sum()
    }

    /// Moves the state to `to`, accounting the bytes. Values are untouched.
    pub fn tier_transfer(&mut self, to: StorageTier) -> u64 {
        if self.tier == to {
            return 0;
        }
        let bytes = self.transfer_size();
        self.tier = to;
        self.transfer_bytes_accumulated += bytes;
        bytes
    }

    /// Restores a state from checkpoint parts.
    pub(crate) fn from_parts(
        layers: Vec<Moments>,
        step: u64,
        tier: StorageTier,
        transfer_bytes_accumulated: u64,
        bits: StateBits,
        block_size: usize,
    ) -> Self {
        Self {
            layers,
            step,
            tier,
            transfer_bytes_accumulated,
            bits,
            block_size,
        }
    }
}

fn bias_corrections(cfg: &OptimConfig, t: u64) -> (f32, f32) {
    let t = t.min(i32::MAX as u64) as i32;
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);
    (bc1 as f32, bc2 as f32)
}

/// Updates `m`, `v` and writes the normalized step `m̂ / (sqrt(v̂) + ε)` into `dir`.
#[allow(clippy::too_many_arguments)]
fn moment_update(exec: Execution, dir: &mut [f32], m: &mut [f32], v: &mut [f32], g: &[f32], cfg: &OptimConfig, t: u64) {
    let (bc1, bc2) = bias_corrections(cfg, t);
    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.epsilon);
    par::zip3_mut(exec, dir, m, v, g, UPDATE_CHUNK, |d, m, v, g| {
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            d[i] = m_hat / (v_hat.sqrt() + eps);
        }
    });
}

/// One Adam step on a single layer. `t` is the 1-based step number.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(w: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32], t: u64, cfg: &OptimConfig, lr: f32) {
    adam_step_with(Execution::default(), w, g, m, v, t, cfg, lr)
}

#[allow(clippy::too_many_arguments)]
pub fn adam_step_with(
    exec: Execution,
    w: &mut [f32],
    g: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    t: u64,
    cfg: &OptimConfig,
    lr: f32,
) {
    let mut dir = vec![0.0f32; w.len()];
    moment_update(exec, &mut dir, m, v, g, cfg, t);
    let wd = cfg.weight_decay;
    par::zip_chunks_map(exec, w, &dir, UPDATE_CHUNK, |_, w, d| {
        for (w, &d) in w.iter_mut().zip(d) {
            *w = *w - lr * d - lr * wd * *w;
        }
    });
}

/// LAMB layer scaling: `‖w‖ / ‖r‖` clamped to `clip`, or 1 when either norm
/// is zero.
pub fn trust_ratio(w_norm: f64, r_norm: f64, clip: (f32, f32)) -> f64 {
    if w_norm == 0.0 || r_norm == 0.0 {
        return 1.0;
    }
    (w_norm / r_norm).clamp(clip.0 as f64, clip.1 as f64)
}

/// One LAMB step on a single layer; returns the trust ratio used.
#[allow(clippy::too_many_arguments)]
pub fn lamb_step(w: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32], t: u64, cfg: &OptimConfig, lr: f32) -> f64 {
    lamb_step_with(Execution::default(), w, g, m, v, t, cfg, lr)
}

#[allow(clippy::too_many_arguments)]
pub fn lamb_step_with(
    exec: Execution,
    w: &mut [f32],
    g: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    t: u64,
    cfg: &OptimConfig,
    lr: f32,
) -> f64 {
    let mut r = vec![0.0f32; w.len()];
    moment_update(exec, &mut r, m, v, g, cfg, t);
    let wd = cfg.weight_decay;
    if wd != 0.0 {
        par::zip_chunks_map(exec, &mut r, w, UPDATE_CHUNK, |_, r, w| {
            for (r, &w) in r.iter_mut().zip(w) {
                *r += wd * w;
            }
        });
    }
    let ratio = trust_ratio(
        par::sum_squares(exec, w).sqrt(),
        par::sum_squares(exec, &r).sqrt(),
        cfg.trust_clip,
    );
    let scaled = lr * ratio as f32;
    par::zip_chunks_map(exec, w, &r, UPDATE_CHUNK, |_, w, r| {
        for (w, &r) in w.iter_mut().zip(r) {
            *w -= scaled * r;
        }
    });
    ratio
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimConfig,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig) -> Result<Self, OptimError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    pub fn init_state(&self, params: &ParamSet) -> Result<OptimState, OptimError> {
        OptimState::zeros(params, &self.cfg)
    }

    /// Applies one update to every layer of `params`.
    pub fn step(
        &self,
        params: &mut ParamSet,
        grads: &ParamSet,
        state: &mut OptimState,
        lr: f32,
    ) -> Result<(), OptimError> {
        params
            .check_same_layout(grads)
            .map_err(|e: TensorError| OptimError::ShapeMismatch(e.to_string()))?;
        if state.layers.len() != params.len()
            || state
                .layers
                .iter()
                .zip(params.layers())
                .any(|(s, l)| s.len() != l.tensor.len())
        {
            return Err(OptimError::ShapeMismatch(
                "optimizer state does not match parameters".into(),
            ));
        }
        for g in grads.layers() {
            if let Some(index) = g.tensor.data().iter().position(|x| !x.is_finite()) {
                return Err(OptimError::NonFiniteGradient {
                    layer: g.name.clone(),
                    index,
                    value: g.tensor.data()[index],
                });
            }
        }
        if lr.is_nan() || lr < 0.0 {
            return Err(OptimError::InvalidConfig(format!("learning rate {lr}")));
        }

        let offloaded = self.cfg.state_tier == StorageTier::Offloaded;
        if offloaded {
            state.tier_transfer(StorageTier::Compute);
        }
        let t = state.step + 1;
        let bits = state.bits;
        let bs = state.block_size;
        let layers = std::mem::take(&mut state.layers);
        let mut updated = Vec::with_capacity(layers.len());
        for ((moments, p), g) in layers.into_iter().zip(params.layers_mut()).zip(grads.layers()) {
            let Moments::Full { mut m, mut v } = moments.unpack()? else {
                unreachable!("unpack always yields full moments")
            };
            let w = p.tensor.data_mut();
            let g = g.tensor.data();
            match self.cfg.algorithm {
                Algorithm::Adam => adam_step(w, g, &mut m, &mut v, t, &self.cfg, lr),
                Algorithm::Lamb => {
                    lamb_step(w, g, &mut m, &mut v, t, &self.cfg, lr);
                }
            }
            let full = Moments::Full { m, v };
            updated.push(match bits {
                StateBits::Eight => full.pack(bs)?,
                StateBits::Full => full,
            });
        }
        state.layers = updated;
        state.step = t;
        if offloaded {
            state.tier_transfer(StorageTier::Offloaded);
        }
        Ok(())
    }
}
