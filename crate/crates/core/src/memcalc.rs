//! Memory footprint of training a transformer under memory-saving
//! techniques.
//!
//! All quantities are bytes and all arithmetic is exact `u64`.
//!
//! Parameter count for [`ArchDims`]:
//!
//! ```text
//! per layer   attn 4·d·a (+4·d bias) + ff d·f·g + f·d (+f·g + d bias) + norms·p·d
//! cross attn  per cross layer: attn as above + p·d
//! embeddings  vocab·d, doubled when input and output are untied
//! positions   max_positions·d (0 for rotary / relative)
//! final norm  final_norms·p·d
//! ```
//!
//! `a` is the attention width (usually `d`), `f` the feed-forward width, `g`
//! is 2 for gated (GEGLU / SwiGLU) feed-forward blocks and 1 otherwise, and
//! `p` is 2 for LayerNorm (gain and bias) or 1 for RMSNorm. With `f = 4d`,
//! `a = d` and no gating this is the familiar `12·L·d²` plus embeddings and
//! `2·L·d·p` norm terms.
//!
//! Memory model (master weights fp32):
//!
//! ```text
//! weights     4·N
//! gradients   4·N
//! optimizer   8·N (fp32 m, v)  or  2·N + 8·ceil(N / 4096) (8-bit m, v + f32 scale per block)
//! activations L·b·s·d·act_bytes·c_act
//!             checkpointed: min(ceil(√L) + 1, L)·b·s·d·act_bytes·c_act
//! ```
//!
//! `N` is the stored parameter count `ceil(params / sharing)`. Checkpointing
//! keeps `ceil(√L)` segment boundaries plus one layer being recomputed.
//! These formulas are reconstructions; the defaults `act_bytes = 2` and
//! `c_act = 16` are configurable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const Q8_BLOCK: u64 = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemCalcError {
    #[error("invalid dimension: {0}")]
    InvalidDims(String),
    #[error("invalid technique flags: {0}")]
    InvalidFlags(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("arithmetic overflow")]
    Overflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchDims {
    pub layers: u64,
    pub hidden: u64,
    pub heads: u64,
    /// Attention projection width; 0 means `hidden`.
    #[serde(default)]
    pub attn_dim: u64,
    pub ff_dim: u64,
    #[serde(default)]
    pub gated_ff: bool,
    pub vocab: u64,
    /// Learned positions; 0 for rotary or relative schemes.
    #[serde(default)]
    pub max_positions: u64,
    #[serde(default = "yes")]
    pub tied_embeddings: bool,
    #[serde(default = "yes")]
    pub attn_bias: bool,
    #[serde(default = "yes")]
    pub ff_bias: bool,
    #[serde(default = "two")]
    pub norms_per_layer: u64,
    /// 2 for LayerNorm, 1 for RMSNorm.
    #[serde(default = "two")]
    pub norm_params_per_dim: u64,
    #[serde(default = "one")]
    pub final_norms: u64,
    /// Decoder layers with an extra cross-attention block.
    #[serde(default)]
    pub cross_attn_layers: u64,
}

fn yes() -> bool {
    true
}
fn one() -> u64 {
    1
}
fn two() -> u64 {
    2
}

impl ArchDims {
    /// Decoder-only transformer with biases, LayerNorm and `ff = 4d`.
    pub fn gpt(layers: u64, hidden: u64, heads: u64, vocab: u64, max_positions: u64) -> Self {
        Self {
            layers,
            hidden,
            heads,
            attn_dim: 0,
            ff_dim: 4 * hidden,
            gated_ff: false,
            vocab,
            max_positions,
            tied_embeddings: true,
            attn_bias: true,
            ff_bias: true,
            norms_per_layer: 2,
            norm_params_per_dim: 2,
            final_norms: 1,
            cross_attn_layers: 0,
        }
    }

    pub fn validate(&self) -> Result<(), MemCalcError> {
        for (name, v) in [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("vocab", self.vocab),
        ] {
            if v == 0 {
                return Err(MemCalcError::InvalidDims(format!("{name} must be positive")));
            }
        }
        if self.cross_attn_layers > self.layers {
            return Err(MemCalcError::InvalidDims(
                "more cross-attention layers than layers".into(),
            ));
        }
        Ok(())
    }
}

fn add(a: u64, b: u64) -> Result<u64, MemCalcError> {
    a.checked_add(b).ok_or(MemCalcError::Overflow)
}

fn mul(a: u64, b: u64) -> Result<u64, MemCalcError> {
    a.checked_mul(b).ok_or(MemCalcError::Overflow)
}

fn attn_params(dims: &ArchDims) -> Result<u64, MemCalcError> {
    let d = dims.hidden;
    let a = if dims.attn_dim == 0 { d } else { dims.attn_dim };
    let mut n = mul(4, mul(d, a)?)?;
    if dims.attn_bias {
        n = add(n, add(mul(3, a)?, d)?)?;
    }
    Ok(n)
}

pub fn estimate_param_count(dims: &ArchDims) -> Result<u64, MemCalcError> {
    dims.validate()?;
    let d = dims.hidden;
    let f = dims.ff_dim;
    let g = if dims.gated_ff { 2 } else { 1 };
    let norm = mul(dims.norm_params_per_dim, d)?;

    let attn = attn_params(dims)?;
    let mut ff = add(mul(mul(d, f)?, g)?, mul(f, d)?)?;
    if dims.ff_bias {
        ff = add(ff, add(mul(f, g)?, d)?)?;
    }
    let layer = add(add(attn, ff)?, mul(dims.norms_per_layer, norm)?)?;
    let cross = add(attn, norm)?;

    let emb = mul(mul(dims.vocab, d)?, if dims.tied_embeddings { 1 } else { 2 })?;
    let mut total = mul(dims.layers, layer)?;
    total = add(total, mul(dims.cross_attn_layers, cross)?)?;
    total = add(total, emb)?;
    total = add(total, mul(dims.max_positions, d)?)?;
    add(total, mul(dims.final_norms, norm)?)
}

/// Parameters actually stored when `sharing_factor` layers share weights.
pub fn stored_params(count: u64, sharing_factor: u64) -> Result<u64, MemCalcError> {
    if sharing_factor == 0 {
        return Err(MemCalcError::InvalidFlags("sharing_factor must be ≥ 1".into()));
    }
    Ok(count.div_ceil(sharing_factor))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPreset {
    pub name: String,
    /// Published parameter count; used as N when present.
    pub param_count: Option<u64>,
    pub dims: ArchDims,
}

impl ModelPreset {
    pub fn params(&self) -> Result<u64, MemCalcError> {
        match self.param_count {
            Some(n) => Ok(n),
            None => estimate_param_count(&self.dims),
        }
    }
}

fn preset(name: &str, param_count: Option<u64>, dims: ArchDims) -> ModelPreset {
    ModelPreset {
        name: name.to_string(),
        param_count,
        dims,
    }
}

fn t5(layers_each: u64, d: u64, heads: u64, ff: u64) -> ArchDims {
    ArchDims {
        layers: 2 * layers_each,
        hidden: d,
        heads,
        attn_dim: 0,
        ff_dim: ff,
        gated_ff: false,
        vocab: 32128,
        max_positions: 0,
        tied_embeddings: true,
        attn_bias: false,
        ff_bias: false,
        norms_per_layer: 2,
        norm_params_per_dim: 1,
        final_norms: 2,
        cross_attn_layers: layers_each,
    }
}

/// Built-in presets. Published totals: bert-base 110M, bert-large 340M,
/// t5-base 220M, t5-large 770M, gpt2 124M, gpt2-large 774M, gpt3 175B,
/// gpt-j-6b 6.05B, dall-e-12b 12B; each agrees with
/// [`estimate_param_count`] on its dims within 10%.
pub fn presets() -> Vec<ModelPreset> {
    let bert = |l, d, h| ArchDims {
        // token type embeddings folded into vocab
        max_positions: 512,
        ..ArchDims::gpt(l, d, h, 30522 + 2, 512)
    };
    vec![
        preset("bert-base", Some(110_000_000), bert(12, 768, 12)),
        preset("bert-large", Some(340_000_000), bert(24, 1024, 16)),
        preset("t5-base", Some(220_000_000), t5(12, 768, 12, 3072)),
        preset("t5-large", Some(770_000_000), t5(24, 1024, 16, 4096)),
        preset("gpt2", Some(124_000_000), ArchDims::gpt(12, 768, 12, 50257, 1024)),
        preset(
            "gpt2-large",
            Some(774_000_000),
            ArchDims::gpt(36, 1280, 20, 50257, 1024),
        ),
        preset("gpt3", Some(175_000_000_000), ArchDims::gpt(96, 12288, 96, 50257, 2048)),
        preset(
            "gpt-j-6b",
            Some(6_050_000_000),
            ArchDims {
                tied_embeddings: false,
                attn_bias: false,
                norms_per_layer: 1,
                ..ArchDims::gpt(28, 4096, 16, 50400, 0)
            },
        ),
        preset(
            "dall-e-12b",
            Some(12_000_000_000),
            ArchDims {
                tied_embeddings: false,
                ..ArchDims::gpt(64, 3872, 62, 16384 + 8192, 256 + 1024)
            },
        ),
        preset("dalle-1.1b", None, dalle_run_dims()),
    ]
}

/// The collaboratively trained text-to-image model: 64 layers of width 1024,
/// 16 heads, GEGLU feed-forward, rotary positions, tied text+image
/// embeddings.
pub fn dalle_run_dims() -> ArchDims {
    ArchDims {
        gated_ff: true,
        ..ArchDims::gpt(64, 1024, 16, 16384 + 8192, 0)
    }
}

pub fn find_preset(name: &str) -> Result<ModelPreset, MemCalcError> {
    presets()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| MemCalcError::UnknownPreset(name.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TechniqueFlags {
    pub optimizer_bits: u8,
    pub offload: bool,
    pub checkpointing: bool,
    pub sharing_factor: u64,
}

impl Default for TechniqueFlags {
    fn default() -> Self {
        Self {
            optimizer_bits: 32,
            offload: false,
            checkpointing: false,
            sharing_factor: 1,
        }
    }
}

impl TechniqueFlags {
    pub fn validate(&self) -> Result<(), MemCalcError> {
        if !matches!(self.optimizer_bits, 8 | 32) {
            return Err(MemCalcError::InvalidFlags(format!(
                "optimizer_bits {} (expected 8 or 32)",
                self.optimizer_bits
            )));
        }
        if self.sharing_factor == 0 {
            return Err(MemCalcError::InvalidFlags("sharing_factor must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationModel {
    pub act_bytes: u64,
    pub c_act: u64,
}

impl Default for ActivationModel {
    fn default() -> Self {
        Self {
            act_bytes: 2,
            c_act: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceMemory {
    pub weights: u64,
    pub gradients: u64,
    pub optimizer_state: u64,
    pub activations: u64,
    pub total: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostMemory {
    pub offloaded_state: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub preset: String,
    pub param_count: u64,
    pub stored_params: u64,
    pub device: DeviceMemory,
    pub host: HostMemory,
    pub grand_total: u64,
}

/// Optimizer state bytes for `n` parameters.
pub fn optimizer_state_bytes(n: u64, bits: u8) -> Result<u64, MemCalcError> {
    match bits {
        32 => mul(8, n),
        8 => add(mul(2, n)?, mul(8, n.div_ceil(Q8_BLOCK))?),
        b => Err(MemCalcError::InvalidFlags(format!("optimizer_bits {b}"))),
    }
}

pub fn activation_bytes(
    dims: &ArchDims,
    checkpointing: bool,
    batch: u64,
    seq_len: u64,
    model: &ActivationModel,
) -> Result<u64, MemCalcError> {
    let unit = mul(
        mul(mul(mul(batch, seq_len)?, dims.hidden)?, model.act_bytes)?,
        model.c_act,
    )?;
    let l = dims.layers;
    let kept = if checkpointing { (ceil_sqrt(l) + 1).min(l) } else { l };
    mul(kept, unit)
}

fn ceil_sqrt(n: u64) -> u64 {
    let mut r = (n as f64).sqrt() as u64;
    while r * r > n {
        r -= 1;
    }
    while r * r < n {
        r += 1;
    }
    r
}

pub fn memory_report(
    preset: &ModelPreset,
    flags: &TechniqueFlags,
    batch: u64,
    seq_len: u64,
) -> Result<MemoryReport, MemCalcError> {
    memory_report_with(preset, flags, batch, seq_len, &ActivationModel::default())
}

pub fn memory_report_with(
    preset: &ModelPreset,
    flags: &TechniqueFlags,
    batch: u64,
    seq_len: u64,
    act: &ActivationModel,
) -> Result<MemoryReport, MemCalcError> {
    flags.validate()?;
    preset.dims.validate()?;
    if batch == 0 || seq_len == 0 {
        return Err(MemCalcError::InvalidDims("batch and seq_len must be ≥ 1".into()));
    }
    let n = preset.params()?;
    let stored = stored_params(n, flags.sharing_factor)?;
    let state = optimizer_state_bytes(stored, flags.optimizer_bits)?;
    let (dev_state, host_state) = if flags.offload { (0, state) } else { (state, 0) };
    let mut device = DeviceMemory {
        weights: mul(4, stored)?,
        gradients: mul(4, stored)?,
        optimizer_state: dev_state,
        activations: activation_bytes(&preset.dims, flags.checkpointing, batch, seq_len, act)?,
        total: 0,
    };
    device.total = add(
        add(device.weights, device.gradients)?,
        add(device.optimizer_state, device.activations)?,
    )?;
    let host = HostMemory {
        offloaded_state: host_state,
        total: host_state,
    };
    Ok(MemoryReport {
        preset: preset.name.clone(),
        param_count: n,
        stored_params: stored,
        grand_total: add(device.total, host.total)?,
        device,
        host,
    })
}
