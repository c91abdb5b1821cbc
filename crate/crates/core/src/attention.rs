//! Single-head decode attention and a residual-only toy decoder stack.
//!
//! The decode step for one layer is
//!
//! ```text
//! x_q = x W^q,  x_k = x W^k,  x_v = x W^v
//! K = cat(K, x_k),  V = cat(V, x_v)
//! out = x + softmax(x_q K^T / sqrt(h)) V
//! ```
//!
//! There are no feed-forward or normalization sublayers.

use crate::error::{Error, Result};
use crate::kvcache::{CacheConfig, LayerKVCache, Which};
use crate::numerics::{matmul, softmax_rows, Matrix, Rng};

/// Scaled logits `x_q K^T / sqrt(h)` as a `1 x t` row.
pub fn attention_logits(x_q: &Matrix, keys: &Matrix) -> Result<Matrix> {
    check_query(x_q, keys.cols())?;
    let h = x_q.cols() as f64;
    let scores = matmul(x_q, &keys.transpose())?;
    scores.map(|v| v / h.sqrt())
}

/// Attention weights `softmax(x_q K^T / sqrt(h))`.
pub fn attention_weights(x_q: &Matrix, keys: &Matrix) -> Result<Matrix> {
    Ok(softmax_rows(&attention_logits(x_q, keys)?))
}

fn check_query(x_q: &Matrix, width: usize) -> Result<()> {
    if x_q.rows() != 1 || x_q.cols() != width {
        return Err(Error::shape(format!(
            "query is {}x{}, expected 1x{width}",
            x_q.rows(),
            x_q.cols()
        )));
    }
    Ok(())
}

pub fn attention_step(x_q: &Matrix, keys: &Matrix, values: &Matrix) -> Result<Matrix> {
    if keys.rows() == 0 {
        return Err(Error::shape("attention over zero tokens"));
    }
    if keys.shape() != values.shape() {
        return Err(Error::shape(format!(
            "keys {}x{} vs values {}x{}",
            keys.rows(),
            keys.cols(),
            values.rows(),
            values.cols()
        )));
    }
    matmul(&attention_weights(x_q, keys)?, values)
}

pub fn quantized_attention_step(x_q: &Matrix, cache: &LayerKVCache) -> Result<Matrix> {
    let keys = cache.materialize(Which::Keys)?;
    let values = cache.materialize(Which::Values)?;
    attention_step(x_q, &keys, &values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub layer_index: usize,
}

impl DecoderLayer {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix, layer_index: usize) -> Result<Self> {
        let h = w_q.rows();
        for w in [&w_q, &w_k, &w_v] {
            if w.shape() != (h, h) {
                return Err(Error::shape("layer weights must be square and equal-sized"));
            }
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            layer_index,
        })
    }

    /// `(x_q, x_k, x_v)` for one hidden row.
    pub fn project(&self, hidden: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
        Ok((
            matmul(hidden, &self.w_q)?,
            matmul(hidden, &self.w_k)?,
            matmul(hidden, &self.w_v)?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    layers: Vec<DecoderLayer>,
    head_dim: usize,
    seed: u64,
}

impl ToyModel {
    /// Weights drawn i.i.d. `N(0, 1/h)` per layer, in `W^q, W^k, W^v` order.
    pub fn seeded(layer_count: usize, head_dim: usize, seed: u64) -> Result<Self> {
        if layer_count == 0 || head_dim == 0 {
            return Err(Error::Config("model needs at least one layer and head_dim > 0".into()));
        }
        let mut rng = Rng::new(seed);
        let std = 1.0 / (head_dim as f64).sqrt();
        let layers = (0..layer_count)
            .map(|i| {
                let w_q = rng.normal_matrix(head_dim, head_dim, std);
                let w_k = rng.normal_matrix(head_dim, head_dim, std);
                let w_v = rng.normal_matrix(head_dim, head_dim, std);
                DecoderLayer::new(w_q, w_k, w_v, i)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            head_dim,
            seed,
        })
    }

    pub fn from_layers(layers: Vec<DecoderLayer>, seed: u64) -> Result<Self> {
        let head_dim = layers
            .first()
            .map(|l| l.w_q.rows())
            .ok_or_else(|| Error::Config("model needs at least one layer".into()))?;
        for (i, l) in layers.iter().enumerate() {
            if l.layer_index != i || l.w_q.rows() != head_dim {
                return Err(Error::Config(format!("layer {i} is mislabeled or mis-sized")));
            }
        }
        Ok(Self {
            layers,
            head_dim,
            seed,
        })
    }

    pub fn layers(&self) -> &[DecoderLayer] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fresh caches, one per layer, from a per-layer config function.
    pub fn new_caches(
        &self,
        mut config_for: impl FnMut(usize) -> Result<CacheConfig>,
    ) -> Result<Vec<LayerKVCache>> {
        (0..self.layer_count())
            .map(|i| config_for(i).map(LayerKVCache::new))
            .collect()
    }
}

const EMBEDDING_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Seeded Gaussian token embeddings, one row per token.
///
/// Drawn from a stream separate from the weight stream of the same seed.
pub fn token_embeddings(seed: u64, tokens: usize, head_dim: usize) -> Matrix {
    Rng::new(seed ^ EMBEDDING_STREAM).normal_matrix(tokens, head_dim, 1.0)
}

/// Runs one token through every layer, appending to each layer's cache.
pub fn decode_token(model: &ToyModel, hidden: &Matrix, caches: &mut [LayerKVCache]) -> Result<Matrix> {
    if caches.len() != model.layer_count() {
        return Err(Error::Config(format!(
            "{} caches for {} layers",
            caches.len(),
            model.layer_count()
        )));
    }
    let mut hidden = hidden.clone();
    for (layer, cache) in model.layers.iter().zip(caches.iter_mut()) {
        let (x_q, x_k, x_v) = layer.project(&hidden)?;
        cache.append_token(&x_k, &x_v)?;
        hidden = hidden.add(&quantized_attention_step(&x_q, cache)?)?;
    }
    Ok(hidden)
}

/// Decodes every row of `embeddings` in order, returning the final hidden row per token.
pub fn decode_sequence(
    model: &ToyModel,
    embeddings: &Matrix,
    caches: &mut [LayerKVCache],
) -> Result<Vec<Matrix>> {
    (0..embeddings.rows())
        .map(|t| decode_token(model, &embeddings.slice_rows(t, t + 1), caches))
        .collect()
}

/// Uncached full-precision decoder that recomputes `K = X W^k` and `V = X W^v`
/// from the stored layer inputs at every step.
#[derive(Debug, Clone)]
pub struct ReferenceDecoder<'m> {
    model: &'m ToyModel,
    inputs: Vec<Option<Matrix>>,
}

impl<'m> ReferenceDecoder<'m> {
    pub fn new(model: &'m ToyModel) -> Self {
        Self {
            model,
            inputs: vec![None; model.layer_count()],
        }
    }

    pub fn step(&mut self, hidden: &Matrix) -> Result<Matrix> {
        let mut hidden = hidden.clone();
        for (layer, inputs) in self.model.layers.iter().zip(self.inputs.iter_mut()) {
            let all = match inputs.take() {
                None => hidden.clone(),
                Some(prev) => prev.vstack(&hidden)?,
            };
            let x_q = matmul(&hidden, &layer.w_q)?;
            let keys = matmul(&all, &layer.w_k)?;
            let values = matmul(&all, &layer.w_v)?;
            let out = attention_step(&x_q, &keys, &values)?;
            *inputs = Some(all);
            hidden = hidden.add(&out)?;
        }
        Ok(hidden)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn symmetric_softmax_example() {
        let out = attention_step(
            &m(&[vec![1.0]]),
            &m(&[vec![0.0], vec![0.0]]),
            &m(&[vec![1.0], vec![2.0]]),
        )
        .unwrap();
        assert_eq!(out.data(), &[1.5]);
    }

    #[test]
    fn ln3_example() {
        let keys = m(&[vec![0.0], vec![3f64.ln()]]);
        let w = attention_weights(&m(&[vec![1.0]]), &keys).unwrap();
        assert!((w.get(0, 0) - 0.25).abs() < 1e-15);
        let out = attention_step(&m(&[vec![1.0]]), &keys, &m(&[vec![1.0], vec![2.0]])).unwrap();
        assert!((out.get(0, 0) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn single_token_returns_value_row() {
        let mut rng = Rng::new(8);
        let x = rng.normal_matrix(1, 5, 3.0);
        let k = rng.normal_matrix(1, 5, 1.0);
        let v = rng.normal_matrix(1, 5, 1.0);
        assert_eq!(attention_step(&x, &k, &v).unwrap(), v);
    }

    #[test]
    fn logits_are_scaled_by_sqrt_h() {
        // h = 4; one key aligned with the query gives logit 4 / 2 = 2.
        let x = m(&[vec![1.0, 1.0, 1.0, 1.0]]);
        let keys = m(&[vec![1.0, 1.0, 1.0, 1.0], vec![0.0; 4]]);
        let w = attention_weights(&x, &keys).unwrap();
        let e2 = 2f64.exp();
        assert!((w.get(0, 0) - e2 / (e2 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let x = Matrix::zeros(1, 3);
        assert!(attention_step(&x, &Matrix::zeros(2, 4), &Matrix::zeros(2, 4)).is_err());
        assert!(attention_step(&x, &Matrix::zeros(2, 3), &Matrix::zeros(3, 3)).is_err());
        assert!(attention_step(&x, &Matrix::zeros(0, 3), &Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn quantized_step_matches_composition() {
        let cfg = CacheConfig::kivi(Some(2), Some(2), 4, 4, 4).unwrap();
        let mut cache = LayerKVCache::new(cfg);
        let mut rng = Rng::new(12);
        for _ in 0..8 {
            cache
                .append_token(&rng.normal_matrix(1, 4, 1.0), &rng.normal_matrix(1, 4, 1.0))
                .unwrap();
        }
        let x = rng.normal_matrix(1, 4, 1.0);
        let got = quantized_attention_step(&x, &cache).unwrap();
        let want = attention_step(
            &x,
            &cache.materialize(Which::Keys).unwrap(),
            &cache.materialize(Which::Values).unwrap(),
        )
        .unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_token_cache_returns_value() {
        let cfg = CacheConfig::kivi(Some(1), Some(1), 4, 4, 4).unwrap();
        let mut cache = LayerKVCache::new(cfg);
        let v = Matrix::row_vector(vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        cache.append_token(&Matrix::zeros(1, 4), &v).unwrap();
        let x = Matrix::row_vector(vec![1.0; 4]).unwrap();
        assert_eq!(quantized_attention_step(&x, &cache).unwrap(), v);
    }

    #[test]
    fn single_layer_passthrough_is_attention_plus_residual() {
        let model = ToyModel::seeded(1, 4, 3).unwrap();
        let mut caches = model
            .new_caches(|_| CacheConfig::passthrough(4, 4, 4))
            .unwrap();
        let x = Rng::new(4).normal_matrix(1, 4, 1.0);
        let out = decode_token(&model, &x, &mut caches).unwrap();
        let layer = &model.layers()[0];
        let (q, k, v) = layer.project(&x).unwrap();
        let expected = x.add(&attention_step(&q, &k, &v).unwrap()).unwrap();
        assert_eq!(out, expected);
    }

    #[test]
    fn zero_weights_are_a_fixed_point() {
        let layers = (0..3)
            .map(|i| DecoderLayer::new(Matrix::zeros(4, 4), Matrix::zeros(4, 4), Matrix::zeros(4, 4), i).unwrap())
            .collect();
        let model = ToyModel::from_layers(layers, 0).unwrap();
        let mut caches = model
            .new_caches(|_| CacheConfig::kivi(Some(2), Some(2), 1, 0, 4))
            .unwrap();
        let x = Matrix::row_vector(vec![1.0, -2.0, 0.5, 4.0]).unwrap();
        for _ in 0..5 {
            assert_eq!(decode_token(&model, &x, &mut caches).unwrap(), x);
        }
    }

    #[test]
    fn two_layer_reference_equals_passthrough_cache() {
        let model = ToyModel::seeded(2, 8, 21).unwrap();
        let emb = token_embeddings(21, 4, 8);
        let mut caches = model
            .new_caches(|_| CacheConfig::passthrough(2, 2, 8))
            .unwrap();
        let cached = decode_sequence(&model, &emb, &mut caches).unwrap();
        let mut reference = ReferenceDecoder::new(&model);
        for (t, c) in cached.iter().enumerate() {
            let r = reference.step(&emb.slice_rows(t, t + 1)).unwrap();
            assert_eq!(&r, c);
        }
    }

    #[test]
    fn cache_count_mismatch() {
        let model = ToyModel::seeded(2, 4, 1).unwrap();
        let mut caches = vec![LayerKVCache::new(CacheConfig::passthrough(1, 0, 4).unwrap())];
        let x = Matrix::zeros(1, 4);
        assert!(matches!(
            decode_token(&model, &x, &mut caches),
            Err(Error::Config(_))
        ));
    }
}
