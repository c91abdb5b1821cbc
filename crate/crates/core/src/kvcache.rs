//! Per-layer KV cache: quantized history blocks plus a float residual tail.
//!
//! New tokens enter the residual tail. Once the tail holds more than
//! `residual_length` rows (and at least one key group), the oldest
//! `key_spec.group_size()` rows are quantized as one immutable block. Keys and
//! values flush together so their rows stay aligned.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::quantizer::{self, Axis, QuantSpec, QuantizedTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Keys,
    Values,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheConfig {
    key_spec: QuantSpec,
    value_spec: QuantSpec,
    residual_length: usize,
    head_dim: usize,
}

impl CacheConfig {
    pub fn new(
        key_spec: QuantSpec,
        value_spec: QuantSpec,
        residual_length: usize,
        head_dim: usize,
    ) -> Result<Self> {
        if head_dim == 0 {
            return Err(Error::Config("head_dim must be positive".into()));
        }
        let flush_rows = key_spec.group_size();
        if !residual_length.is_multiple_of(flush_rows) {
            return Err(Error::Config(format!(
                "residual_length {residual_length} is not a multiple of key group size {flush_rows}"
            )));
        }
        for (name, spec) in [("key", key_spec), ("value", value_spec)] {
            let extent = spec.grouping_extent(flush_rows, head_dim);
            if !spec.is_passthrough() && !extent.is_multiple_of(spec.group_size()) {
                return Err(Error::Config(format!(
                    "{name} spec ({}, group {}) does not tile a {flush_rows}x{head_dim} flush block",
                    spec.axis(),
                    spec.group_size()
                )));
            }
        }
        Ok(Self {
            key_spec,
            value_spec,
            residual_length,
            head_dim,
        })
    }

    /// Keys per-channel and values per-token with a shared group size.
    pub fn kivi(
        key_bits: Option<u8>,
        value_bits: Option<u8>,
        group_size: usize,
        residual_length: usize,
        head_dim: usize,
    ) -> Result<Self> {
        Self::new(
            QuantSpec::with_bits(key_bits, Axis::PerChannel, group_size)?,
            QuantSpec::with_bits(value_bits, Axis::PerToken, group_size)?,
            residual_length,
            head_dim,
        )
    }

    /// Exact-float cache with the given flush cadence.
    pub fn passthrough(group_size: usize, residual_length: usize, head_dim: usize) -> Result<Self> {
        Self::kivi(None, None, group_size, residual_length, head_dim)
    }

    pub fn key_spec(&self) -> QuantSpec {
        self.key_spec
    }

    pub fn value_spec(&self) -> QuantSpec {
        self.value_spec
    }

    pub fn residual_length(&self) -> usize {
        self.residual_length
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn flush_rows(&self) -> usize {
        self.key_spec.group_size()
    }

    fn spec_for(&self, which: Which) -> QuantSpec {
        match which {
            Which::Keys => self.key_spec,
            Which::Values => self.value_spec,
        }
    }
}

/// `(quantized rows, residual rows)` after `token_count` appends.
pub fn flush_split(token_count: usize, residual_length: usize, group_size: usize) -> (usize, usize) {
    let quantized = if residual_length == 0 {
        token_count / group_size * group_size
    } else if token_count > residual_length {
        ((token_count - residual_length - 1) / group_size + 1) * group_size
    } else {
        0
    };
    (quantized, token_count - quantized)
}

#[derive(Debug, Clone, PartialEq)]
enum HistoryBlock {
    Quantized(QuantizedTensor),
    Exact(Matrix),
}

impl HistoryBlock {
    fn encode(rows: Matrix, spec: QuantSpec) -> Result<Self> {
        if spec.is_passthrough() {
            Ok(HistoryBlock::Exact(rows))
        } else {
            Ok(HistoryBlock::Quantized(quantizer::quantize(&rows, spec)?))
        }
    }

    fn decode(&self) -> Result<Matrix> {
        match self {
            HistoryBlock::Quantized(q) => quantizer::dequantize(q),
            HistoryBlock::Exact(m) => Ok(m.clone()),
        }
    }

    fn storage_bytes(&self) -> usize {
        match self {
            HistoryBlock::Quantized(q) => q.storage_bytes(),
            HistoryBlock::Exact(m) => m.data().len() * 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerKVCache {
    config: CacheConfig,
    key_blocks: Vec<HistoryBlock>,
    value_blocks: Vec<HistoryBlock>,
    residual_keys: Vec<f64>,
    residual_values: Vec<f64>,
    token_count: usize,
}

impl LayerKVCache {
    pub fn new(config: CacheConfig) -> Self {
        Self {
            config,
            key_blocks: Vec::new(),
            value_blocks: Vec::new(),
            residual_keys: Vec::new(),
            residual_values: Vec::new(),
            token_count: 0,
        }
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn residual_rows(&self) -> usize {
        self.residual_keys.len() / self.config.head_dim
    }

    pub fn quantized_rows(&self) -> usize {
        self.token_count - self.residual_rows()
    }

    pub fn is_empty(&self) -> bool {
        self.token_count == 0
    }

    /// Appends one token's key and value rows, flushing the oldest group when due.
    pub fn append_token(&mut self, k_vec: &Matrix, v_vec: &Matrix) -> Result<()> {
        let h = self.config.head_dim;
        for (name, v) in [("key", k_vec), ("value", v_vec)] {
            if v.shape() != (1, h) {
                return Err(Error::shape(format!(
                    "{name} row is {}x{}, cache expects 1x{h}",
                    v.rows(),
                    v.cols()
                )));
            }
        }
        self.residual_keys.extend_from_slice(k_vec.data());
        self.residual_values.extend_from_slice(v_vec.data());
        self.token_count += 1;

        let flush = self.config.flush_rows();
        if self.residual_rows() > self.config.residual_length && self.residual_rows() >= flush {
            let keys = Matrix::new(flush, h, self.residual_keys.drain(..flush * h).collect())?;
            let values = Matrix::new(flush, h, self.residual_values.drain(..flush * h).collect())?;
            self.key_blocks
                .push(HistoryBlock::encode(keys, self.config.key_spec)?);
            self.value_blocks
                .push(HistoryBlock::encode(values, self.config.value_spec)?);
        }
        Ok(())
    }

    /// Full `t x h` matrix: decoded history in append order, then the float tail.
    pub fn materialize(&self, which: Which) -> Result<Matrix> {
        if self.is_empty() {
            return Err(Error::State("cannot materialize an empty cache".into()));
        }
        let (blocks, tail) = match which {
            Which::Keys => (&self.key_blocks, &self.residual_keys),
            Which::Values => (&self.value_blocks, &self.residual_values),
        };
        let h = self.config.head_dim;
        let mut data = Vec::with_capacity(self.token_count * h);
        for block in blocks {
            data.extend_from_slice(block.decode()?.data());
        }
        data.extend_from_slice(tail);
        Matrix::new(self.token_count, h, data)
    }

    /// Quantization scale bounding the error of element `(row, col)`, if quantized.
    pub fn scale_at(&self, which: Which, row: usize, col: usize) -> Option<f64> {
        let flush = self.config.flush_rows();
        if row >= self.quantized_rows() {
            return None;
        }
        let blocks = match which {
            Which::Keys => &self.key_blocks,
            Which::Values => &self.value_blocks,
        };
        match &blocks[row / flush] {
            HistoryBlock::Quantized(q) => Some(q.scale_at(row % flush, col)),
            HistoryBlock::Exact(_) => None,
        }
    }

    /// Bytes held: packed codes plus 8 bytes per group, and 4 bytes per float element.
    pub fn storage_bytes(&self) -> usize {
        let history: usize = self
            .key_blocks
            .iter()
            .chain(&self.value_blocks)
            .map(HistoryBlock::storage_bytes)
            .sum();
        history + (self.residual_keys.len() + self.residual_values.len()) * 4
    }

    pub fn spec(&self, which: Which) -> QuantSpec {
        self.config.spec_for(which)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn token(rng: &mut Rng, h: usize) -> Matrix {
        rng.normal_matrix(1, h, 1.0)
    }

    #[test]
    fn first_token_lands_in_residual() {
        let cfg = CacheConfig::kivi(Some(2), Some(2), 4, 4, 4).unwrap();
        let mut cache = LayerKVCache::new(cfg);
        let k = Matrix::row_vector(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        cache.append_token(&k, &k).unwrap();
        assert_eq!(cache.token_count(), 1);
        assert_eq!(cache.residual_rows(), 1);
        assert_eq!(cache.quantized_rows(), 0);
        assert_eq!(cache.materialize(Which::Keys).unwrap(), k);
    }

    #[test]
    fn fifth_append_flushes_one_group() {
        let cfg = CacheConfig::kivi(Some(2), Some(2), 4, 4, 4).unwrap();
        let mut cache = LayerKVCache::new(cfg);
        let mut rng = Rng::new(1);
        for i in 0..5 {
            let t = token(&mut rng, 4);
            cache.append_token(&t, &t).unwrap();
            let expected = if i < 4 { 0 } else { 4 };
            assert_eq!(cache.quantized_rows(), expected);
        }
        assert_eq!(cache.residual_rows(), 1);
    }

    #[test]
    fn zero_residual_quantizes_immediately() {
        let cfg = CacheConfig::kivi(Some(4), Some(4), 1, 0, 4).unwrap();
        let mut cache = LayerKVCache::new(cfg);
        let mut rng = Rng::new(2);
        for _ in 0..6 {
            let t = token(&mut rng, 4);
            cache.append_token(&t, &t).unwrap();
            assert_eq!(cache.residual_rows(), 0);
        }
    }

    #[test]
    fn eight_tokens_rows_split() {
        let cfg = CacheConfig::kivi(Some(2), Some(2), 4, 4, 4).unwrap();
        let mut cache = LayerKVCache::new(cfg);
        let mut rng = Rng::new(3);
        let mut history = Vec::new();
        for _ in 0..9 {
            let t = token(&mut rng, 4);
            cache.append_token(&t, &t).unwrap();
            history.push(t);
        }
        // flushes happen on the 5th and 9th append
        assert_eq!(cache.quantized_rows(), 8);
        let keys = cache.materialize(Which::Keys).unwrap();
        assert_eq!(keys.row(8), history[8].data());
        for (r, exact) in history.iter().take(8).enumerate() {
            for c in 0..4 {
                let err = (keys.get(r, c) - exact.get(0, c)).abs();
                assert!(err <= cache.scale_at(Which::Keys, r, c).unwrap() / 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn eight_tokens_half_exact() {
        let cfg = CacheConfig::kivi(Some(2), Some(2), 4, 4, 4).unwrap();
        let mut cache = LayerKVCache::new(cfg);
        let mut rng = Rng::new(4);
        let mut history = Vec::new();
        for _ in 0..8 {
            let t = token(&mut rng, 4);
            cache.append_token(&t, &t).unwrap();
            history.push(t);
        }
        let values = cache.materialize(Which::Values).unwrap();
        assert_eq!(cache.quantized_rows(), 4);
        for (r, h) in history.iter().enumerate().skip(4) {
            assert_eq!(values.row(r), h.data());
        }
        assert!(cache.scale_at(Which::Values, 0, 0).is_some());
        assert!(cache.scale_at(Which::Values, 5, 0).is_none());
    }

    #[test]
    fn passthrough_is_bit_identical() {
        let cfg = CacheConfig::passthrough(4, 4, 3).unwrap();
        let mut cache = LayerKVCache::new(cfg);
        let mut rng = Rng::new(5);
        let mut acc: Option<Matrix> = None;
        for _ in 0..13 {
            let t = token(&mut rng, 3);
            cache.append_token(&t, &t).unwrap();
            acc = Some(match acc {
                None => t,
                Some(a) => a.vstack(&t).unwrap(),
            });
        }
        assert_eq!(cache.materialize(Which::Keys).unwrap(), acc.clone().unwrap());
        assert_eq!(cache.materialize(Which::Values).unwrap(), acc.unwrap());
    }

    #[test]
    fn errors() {
        let cfg = CacheConfig::kivi(Some(2), Some(2), 4, 4, 4).unwrap();
        let mut cache = LayerKVCache::new(cfg);
        assert!(matches!(cache.materialize(Which::Keys), Err(Error::State(_))));
        let bad = Matrix::zeros(1, 3);
        let good = Matrix::zeros(1, 4);
        assert!(matches!(cache.append_token(&bad, &good), Err(Error::Shape(_))));
        assert!(CacheConfig::kivi(Some(2), Some(2), 4, 6, 4).is_err());
        // per-token values need head_dim divisible by group size
        assert!(CacheConfig::kivi(Some(2), Some(2), 4, 4, 6).is_err());
    }

    #[test]
    fn flush_split_matches_streaming() {
        for (r, gs) in [(0, 1), (0, 4), (4, 4), (8, 4), (8, 8)] {
            let cfg = CacheConfig::kivi(Some(2), Some(2), gs, r, 8).unwrap();
            let mut cache = LayerKVCache::new(cfg);
            let mut rng = Rng::new(9);
            for t in 1..=40 {
                let x = token(&mut rng, 8);
                cache.append_token(&x, &x).unwrap();
                assert_eq!(
                    flush_split(t, r, gs),
                    (cache.quantized_rows(), cache.residual_rows())
                );
                assert!(cache.residual_rows() < r + gs);
                assert_eq!(cache.quantized_rows() % gs, 0);
            }
        }
    }
}
