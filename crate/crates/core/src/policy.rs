//! Layer-wise asymmetric bit allocation and the analytic KV-cache memory model.
//!
//! Layers are 0-based. The first `l_k` layers store keys with `high_bits`, the
//! rest with `low_bits`; `l_v` does the same for values.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::CacheConfig;
use crate::quantizer::SUPPORTED_BITS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MatrixKind {
    Key,
    Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AsymConfig {
    pub l_k: usize,
    pub l_v: usize,
    pub high_bits: u8,
    pub low_bits: u8,
    pub layer_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigWarning {
    /// More high-bit value layers than high-bit key layers.
    ValueLayersExceedKeyLayers { l_k: usize, l_v: usize },
}

impl fmt::Display for ConfigWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigWarning::ValueLayersExceedKeyLayers { l_k, l_v } => write!(
                f,
                "l_v exceeds l_k ({l_v} > {l_k}); key quantization usually needs the larger high-bit budget"
            ),
        }
    }
}

impl AsymConfig {
    pub fn new(l_k: usize, l_v: usize, high_bits: u8, low_bits: u8, layer_count: usize) -> Self {
        Self {
            l_k,
            l_v,
            high_bits,
            low_bits,
            layer_count,
        }
    }

    /// Every layer and matrix at `high_bits`.
    pub fn all_high(high_bits: u8, low_bits: u8, layer_count: usize) -> Self {
        Self::new(layer_count, layer_count, high_bits, low_bits, layer_count)
    }

    /// Every layer and matrix at `low_bits`.
    pub fn all_low(high_bits: u8, low_bits: u8, layer_count: usize) -> Self {
        Self::new(0, 0, high_bits, low_bits, layer_count)
    }

    /// Hard errors for out-of-range values, warnings for discouraged choices.
    pub fn validate(&self) -> Result<Vec<ConfigWarning>> {
        if self.layer_count == 0 {
            return Err(Error::Config("layer_count must be positive".into()));
        }
        for (name, l) in [("l_k", self.l_k), ("l_v", self.l_v)] {
            if l > self.layer_count {
                return Err(Error::Config(format!(
                    "{name} = {l} is outside [0, {}]",
                    self.layer_count
                )));
            }
        }
        for (name, b) in [("high_bits", self.high_bits), ("low_bits", self.low_bits)] {
            if !SUPPORTED_BITS.contains(&b) {
                return Err(Error::Config(format!(
                    "{name} = {b} is not one of {SUPPORTED_BITS:?}"
                )));
            }
        }
        if self.high_bits <= self.low_bits {
            return Err(Error::Config(format!(
                "high_bits ({}) must exceed low_bits ({})",
                self.high_bits, self.low_bits
            )));
        }
        let mut warnings = Vec::new();
        if self.l_v > self.l_k {
            warnings.push(ConfigWarning::ValueLayersExceedKeyLayers {
                l_k: self.l_k,
                l_v: self.l_v,
            });
        }
        Ok(warnings)
    }

    pub fn bits_for_layer(&self, layer_index: usize, which: MatrixKind) -> Result<u8> {
        if layer_index >= self.layer_count {
            return Err(Error::Value(format!(
                "layer {layer_index} out of range for {} layers",
                self.layer_count
            )));
        }
        let high_layers = match which {
            MatrixKind::Key => self.l_k,
            MatrixKind::Value => self.l_v,
        };
        Ok(if layer_index < high_layers {
            self.high_bits
        } else {
            self.low_bits
        })
    }

    /// Cache config for one layer: keys per-channel, values per-token.
    pub fn cache_config(
        &self,
        layer_index: usize,
        group_size: usize,
        residual_length: usize,
        head_dim: usize,
    ) -> Result<CacheConfig> {
        CacheConfig::kivi(
            Some(self.bits_for_layer(layer_index, MatrixKind::Key)?),
            Some(self.bits_for_layer(layer_index, MatrixKind::Value)?),
            group_size,
            residual_length,
            head_dim,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelShape {
    pub layer_count: usize,
    /// Key/value width per token per layer (all heads).
    pub h_total: usize,
    pub bytes_per_float: usize,
    pub group_size: usize,
    pub residual_length: usize,
}

impl ModelShape {
    pub fn new(layer_count: usize, h_total: usize, group_size: usize, residual_length: usize) -> Self {
        Self {
            layer_count,
            h_total,
            bytes_per_float: 4,
            group_size,
            residual_length,
        }
    }

    /// Llama-2-7b-like: 32 layers, 4096-wide KV, group 32, residual 128.
    pub fn llama_7b() -> Self {
        Self::new(32, 4096, 32, 128)
    }

    /// Llama-2-13b-like: 40 layers, 5120-wide KV, group 32, residual 128.
    pub fn llama_13b() -> Self {
        Self::new(40, 5120, 32, 128)
    }

    fn validate(&self) -> Result<()> {
        if self.layer_count == 0 || self.h_total == 0 || self.bytes_per_float == 0 || self.group_size == 0 {
            return Err(Error::Config("model shape fields must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct MemoryEstimate {
    pub payload_bytes: u64,
    pub metadata_bytes: u64,
    pub residual_bytes: u64,
    pub total_bytes: u64,
}

impl MemoryEstimate {
    fn add_matrix(&mut self, payload: u64, metadata: u64, residual: u64) {
        self.payload_bytes += payload;
        self.metadata_bytes += metadata;
        self.residual_bytes += residual;
        self.total_bytes += payload + metadata + residual;
    }
}

/// KV-cache bytes for `tokens` tokens and `batch` sequences.
///
/// Per layer and matrix: `residual_length` float rows, and
/// `tokens - residual_length` quantized rows costing `bits / 8` bytes per
/// element plus 8 bytes (f32 scale and zero) per group.
pub fn estimate_memory(
    shape: &ModelShape,
    config: &AsymConfig,
    tokens: usize,
    batch: usize,
) -> Result<MemoryEstimate> {
    shape.validate()?;
    if config.layer_count != shape.layer_count {
        return Err(Error::Config(format!(
            "policy covers {} layers, shape has {}",
            config.layer_count, shape.layer_count
        )));
    }
    config.validate()?;
    if tokens < shape.residual_length {
        return Err(Error::Value(format!(
            "tokens ({tokens}) must be at least residual_length ({})",
            shape.residual_length
        )));
    }
    let quantized_elems = ((tokens - shape.residual_length) * shape.h_total) as u64;
    let residual = (shape.residual_length * shape.h_total * shape.bytes_per_float) as u64;
    let metadata = quantized_elems.div_ceil(shape.group_size as u64) * 8;
    let batch = batch as u64;

    let mut est = MemoryEstimate::default();
    for layer in 0..shape.layer_count {
        for which in [MatrixKind::Key, MatrixKind::Value] {
            let bits = u64::from(config.bits_for_layer(layer, which)?);
            let payload = (quantized_elems * bits).div_ceil(8);
            est.add_matrix(payload * batch, metadata * batch, residual * batch);
        }
    }
    Ok(est)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepPoint {
    pub l_k: usize,
    pub l_v: usize,
    pub estimate: MemoryEstimate,
}

/// Memory along the two-phase trajectory: `l_k` from 0 to L with `l_v = 0`,
/// then `l_v` from 1 to L with `l_k = L`. Yields `2L + 1` points.
pub fn memory_sweep(
    shape: &ModelShape,
    high_bits: u8,
    low_bits: u8,
    tokens: usize,
    batch: usize,
) -> Result<Vec<SweepPoint>> {
    let layers = shape.layer_count;
    let trajectory = sweep_trajectory(layers);
    trajectory
        .into_iter()
        .map(|(l_k, l_v)| {
            let config = AsymConfig::new(l_k, l_v, high_bits, low_bits, layers);
            Ok(SweepPoint {
                l_k,
                l_v,
                estimate: estimate_memory(shape, &config, tokens, batch)?,
            })
        })
        .collect()
}

/// `(l_k, l_v)` pairs of the two-phase sweep.
pub fn sweep_trajectory(layers: usize) -> Vec<(usize, usize)> {
    (0..=layers)
        .map(|l_k| (l_k, 0))
        .chain((1..=layers).map(|l_v| (layers, l_v)))
        .collect()
}
