//! Attention error analysis under key or value quantization.
//!
//! Two closed forms are implemented here and checked against direct
//! differences of attention outputs:
//!
//! - value error: `A^w E^v` with `E^v = V - V*`;
//! - key error: `(A^w ⊙ (1 - sr · exp(E^q / sqrt(h)))) V`, where
//!   `E^q = x_q (K* - K)^T` and `sr = sft / sft*` is the ratio of softmax
//!   denominators under `K` and `K*`.
//!
//! The exponent term is stored with the `K* - K` sign so the key formula is an
//! identity, not an approximation.

use std::fmt;

use crate::attention::{attention_logits, attention_step, attention_weights};
use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp_rows, matmul, mse, softmax_rows, CompensatedSum, Matrix, Rng};
use crate::quantizer::{self, Axis, QuantSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    /// Error of `a · m`, i.e. `a · e`.
    Left,
    /// Error of `m · a`, i.e. `e · a`.
    Right,
}

/// Error of a product when one factor carries error `e`.
pub fn propagate_error(a: &Matrix, e: &Matrix, side: Side) -> Result<Matrix> {
    match side {
        Side::Left => matmul(a, e),
        Side::Right => matmul(e, a),
    }
}

/// Output error `a_w · e_v` caused by value error `e_v`.
pub fn value_error_closed_form(a_w: &Matrix, e_v: &Matrix) -> Result<Matrix> {
    if a_w.rows() != 1 {
        return Err(Error::shape("attention weights must be a single row"));
    }
    propagate_error(a_w, e_v, Side::Left)
}

/// Intermediate quantities of the key-error closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyErrorTerms {
    /// `K - K*`, `t x h`.
    pub e_k: Matrix,
    /// `x_q (K* - K)^T`, `1 x t`.
    pub e_q: Matrix,
    pub sft: f64,
    pub sft_star: f64,
    /// `sft / sft*`, computed from log-sum-exp so it stays finite.
    pub sr: f64,
    /// Attention weights under the exact keys.
    pub a_w: Matrix,
    head_dim: usize,
}

impl KeyErrorTerms {
    pub fn compute(x_q: &Matrix, keys: &Matrix, keys_star: &Matrix) -> Result<Self> {
        if keys.shape() != keys_star.shape() {
            return Err(Error::shape("K and K* differ in shape"));
        }
        let logits = attention_logits(x_q, keys)?;
        let logits_star = attention_logits(x_q, keys_star)?;
        let lse = log_sum_exp_rows(&logits)[0];
        let lse_star = log_sum_exp_rows(&logits_star)[0];
        let e_k = keys.sub(keys_star)?;
        let e_q = matmul(x_q, &keys_star.sub(keys)?.transpose())?;
        Ok(Self {
            e_k,
            e_q,
            sft: lse.exp(),
            sft_star: lse_star.exp(),
            sr: (lse - lse_star).exp(),
            a_w: softmax_rows(&logits),
            head_dim: x_q.cols(),
        })
    }

    /// Per-token attention-weight error `A^w ⊙ (1 - sr · exp(E^q / sqrt(h)))`.
    pub fn weight_error(&self) -> Result<Matrix> {
        let root_h = (self.head_dim as f64).sqrt();
        let factor = self.e_q.map(|e| 1.0 - self.sr * (e / root_h).exp())?;
        self.a_w.hadamard(&factor)
    }
}

/// Closed-form output error `attn(x_q, K, V) - attn(x_q, K*, V)`.
pub fn key_error_closed_form(
    x_q: &Matrix,
    keys: &Matrix,
    keys_star: &Matrix,
    values: &Matrix,
) -> Result<Matrix> {
    if values.rows() != keys.rows() {
        return Err(Error::shape("V must have one row per key"));
    }
    let terms = KeyErrorTerms::compute(x_q, keys, keys_star)?;
    matmul(&terms.weight_error()?, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorSource {
    KeyQuantized,
    ValueQuantized,
}

impl fmt::Display for ErrorSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorSource::KeyQuantized => "key",
            ErrorSource::ValueQuantized => "value",
        })
    }
}

/// Checkpoints of the attention computation at which MSE is recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Dequant,
    QueryKey,
    Softmax,
    Output,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Dequant, Stage::QueryKey, Stage::Softmax, Stage::Output];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Dequant => "dequant",
            Stage::QueryKey => "qk",
            Stage::Softmax => "softmax",
            Stage::Output => "output",
        }
    }
}

/// MSE after each stage when only one of K or V is quantized.
///
/// For [`ErrorSource::ValueQuantized`] the error first enters at the output,
/// so the query-key and softmax stages are 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StagedErrorReport {
    pub source: ErrorSource,
    pub mse_after_dequant: f64,
    pub mse_after_qk: f64,
    pub mse_after_softmax: f64,
    pub mse_after_output: f64,
}

impl StagedErrorReport {
    pub fn stage(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Dequant => self.mse_after_dequant,
            Stage::QueryKey => self.mse_after_qk,
            Stage::Softmax => self.mse_after_softmax,
            Stage::Output => self.mse_after_output,
        }
    }
}

pub fn staged_errors(
    x_q: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    spec: QuantSpec,
    source: ErrorSource,
) -> Result<StagedErrorReport> {
    let output = attention_step(x_q, keys, values)?;
    match source {
        ErrorSource::KeyQuantized => {
            let keys_star = quantizer::reconstruct(keys, spec)?;
            let logits = attention_logits(x_q, keys)?;
            let logits_star = attention_logits(x_q, &keys_star)?;
            let output_star = attention_step(x_q, &keys_star, values)?;
            Ok(StagedErrorReport {
                source,
                mse_after_dequant: mse(keys, &keys_star)?,
                mse_after_qk: mse(&logits, &logits_star)?,
                mse_after_softmax: mse(&softmax_rows(&logits), &softmax_rows(&logits_star))?,
                mse_after_output: mse(&output, &output_star)?,
            })
        }
        ErrorSource::ValueQuantized => {
            let values_star = quantizer::reconstruct(values, spec)?;
            let output_star = attention_step(x_q, keys, &values_star)?;
            Ok(StagedErrorReport {
                source,
                mse_after_dequant: mse(values, &values_star)?,
                mse_after_qk: 0.0,
                mse_after_softmax: 0.0,
                mse_after_output: mse(&output, &output_star)?,
            })
        }
    }
}

/// Key and value quantization specs used by the asymmetry experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsymmetrySetup {
    pub key_spec: QuantSpec,
    pub value_spec: QuantSpec,
}

impl AsymmetrySetup {
    /// Min/max over the whole axis: keys per-channel over all `t` tokens,
    /// values per-token over all `h` channels.
    pub fn whole_axis(bits: Option<u8>, t: usize, h: usize) -> Result<Self> {
        Ok(Self {
            key_spec: QuantSpec::with_bits(bits, Axis::PerChannel, t)?,
            value_spec: QuantSpec::with_bits(bits, Axis::PerToken, h)?,
        })
    }

    /// Keys per-channel and values per-token with a shared group size.
    pub fn grouped(bits: Option<u8>, group_size: usize) -> Result<Self> {
        Ok(Self {
            key_spec: QuantSpec::with_bits(bits, Axis::PerChannel, group_size)?,
            value_spec: QuantSpec::with_bits(bits, Axis::PerToken, group_size)?,
        })
    }

    pub fn bits(&self) -> Option<u8> {
        self.key_spec.bits()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsymmetrySummary {
    pub trials: usize,
    pub t: usize,
    pub h: usize,
    pub bits: Option<u8>,
    pub seed: u64,
    pub key_means: [f64; 4],
    pub value_means: [f64; 4],
    /// Elements of the closed-form key output error, all trials.
    pub key_samples: Vec<f64>,
    /// Elements of the closed-form value output error, all trials.
    pub value_samples: Vec<f64>,
}

impl AsymmetrySummary {
    pub fn mean(&self, source: ErrorSource, stage: Stage) -> f64 {
        let idx = Stage::ALL.iter().position(|s| *s == stage).unwrap();
        match source {
            ErrorSource::KeyQuantized => self.key_means[idx],
            ErrorSource::ValueQuantized => self.value_means[idx],
        }
    }

    /// Key-source over value-source mean MSE; `None` when the denominator is 0.
    pub fn ratio(&self, stage: Stage) -> Option<f64> {
        let v = self.mean(ErrorSource::ValueQuantized, stage);
        (v > 0.0).then(|| self.mean(ErrorSource::KeyQuantized, stage) / v)
    }
}

/// One seeded instance: `x_q` (1 x h), `K` and `V` (t x h), all `N(0, 1)`.
pub fn gaussian_instance(seed: u64, t: usize, h: usize) -> (Matrix, Matrix, Matrix) {
    let mut rng = Rng::new(seed);
    let x_q = rng.normal_matrix(1, h, 1.0);
    let keys = rng.normal_matrix(t, h, 1.0);
    let values = rng.normal_matrix(t, h, 1.0);
    (x_q, keys, values)
}

/// Mean staged MSEs over `trials` Gaussian instances seeded `seed + i`.
pub fn asymmetry_experiment(
    trials: usize,
    t: usize,
    h: usize,
    setup: AsymmetrySetup,
    seed: u64,
) -> Result<AsymmetrySummary> {
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    let mut key_sums = [CompensatedSum::default(); 4];
    let mut value_sums = [CompensatedSum::default(); 4];
    let mut key_samples = Vec::with_capacity(trials * h);
    let mut value_samples = Vec::with_capacity(trials * h);

    for trial in 0..trials {
        let (x_q, keys, values) = gaussian_instance(seed.wrapping_add(trial as u64), t, h);
        let key_report = staged_errors(&x_q, &keys, &values, setup.key_spec, ErrorSource::KeyQuantized)?;
        let value_report =
            staged_errors(&x_q, &keys, &values, setup.value_spec, ErrorSource::ValueQuantized)?;
        for (i, stage) in Stage::ALL.iter().enumerate() {
            key_sums[i].add(key_report.stage(*stage));
            value_sums[i].add(value_report.stage(*stage));
        }

        let keys_star = quantizer::reconstruct(&keys, setup.key_spec)?;
        let values_star = quantizer::reconstruct(&values, setup.value_spec)?;
        let a_w = attention_weights(&x_q, &keys)?;
        key_samples.extend_from_slice(
            key_error_closed_form(&x_q, &keys, &keys_star, &values)?.data(),
        );
        value_samples.extend_from_slice(
            value_error_closed_form(&a_w, &values.sub(&values_star)?)?.data(),
        );
    }

    let n = trials as f64;
    Ok(AsymmetrySummary {
        trials,
        t,
        h,
        bits: setup.bits(),
        seed,
        key_means: key_sums.map(|s| s.value() / n),
        value_means: value_sums.map(|s| s.value() / n),
        key_samples,
        value_samples,
    })
}

pub const VALUE_ORACLE_TOL: f64 = 1e-12;
pub const KEY_ORACLE_REL_TOL: f64 = 1e-9;
/// Absolute floor for the key oracle, used when the direct error is (near) 0.
pub const KEY_ORACLE_ABS_TOL: f64 = 1e-12;
pub const WEIGHT_ORACLE_TOL: f64 = 1e-12;

/// How `K*` is derived from `K` in the oracle suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyPerturbation {
    /// `K* = K`.
    Identity,
    /// `K* = K + 0.1 · N(0, 1)`.
    Random,
    /// `K*` is the RTN reconstruction of `K` (per-channel, whole token axis).
    Rtn,
    /// Alternates RTN and random perturbations by trial parity.
    Mixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSuite {
    pub seed: u64,
    pub trials: usize,
    pub max_t: usize,
    pub max_h: usize,
    /// Draw `t` in `[1, max_t]` and `h` in `[1, max_h]` per trial instead of using the maxima.
    pub vary_dims: bool,
    pub bits: Option<u8>,
    pub perturbation: KeyPerturbation,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OracleReport {
    pub trials: usize,
    pub max_value_abs_dev: f64,
    pub max_key_rel_dev: f64,
    pub max_weight_abs_dev: f64,
}

impl OracleReport {
    pub fn value_pass(&self) -> bool {
        self.max_value_abs_dev <= VALUE_ORACLE_TOL
    }

    pub fn key_pass(&self) -> bool {
        self.max_key_rel_dev <= KEY_ORACLE_REL_TOL
    }

    pub fn weight_pass(&self) -> bool {
        self.max_weight_abs_dev <= WEIGHT_ORACLE_TOL
    }

    pub fn pass(&self) -> bool {
        self.value_pass() && self.key_pass() && self.weight_pass()
    }
}

/// Deviations of one instance: `(value abs, key relative, weight abs)`.
pub fn oracle_deviations(
    x_q: &Matrix,
    keys: &Matrix,
    keys_star: &Matrix,
    values: &Matrix,
    values_star: &Matrix,
) -> Result<(f64, f64, f64)> {
    let a_w = attention_weights(x_q, keys)?;
    let exact = attention_step(x_q, keys, values)?;

    let value_direct = exact.sub(&attention_step(x_q, keys, values_star)?)?;
    let value_closed = value_error_closed_form(&a_w, &values.sub(values_star)?)?;
    let value_dev = value_closed.sub(&value_direct)?.max_abs();

    let key_direct = exact.sub(&attention_step(x_q, keys_star, values)?)?;
    let key_closed = key_error_closed_form(x_q, keys, keys_star, values)?;
    let diff = key_closed.sub(&key_direct)?.max_abs();
    // below the floor the check is effectively absolute at KEY_ORACLE_ABS_TOL
    let key_dev = diff / key_direct.max_abs().max(KEY_ORACLE_ABS_TOL / KEY_ORACLE_REL_TOL);

    let terms = KeyErrorTerms::compute(x_q, keys, keys_star)?;
    let weight_direct = a_w.sub(&attention_weights(x_q, keys_star)?)?;
    let weight_dev = terms.weight_error()?.sub(&weight_direct)?.max_abs();

    Ok((value_dev, key_dev, weight_dev))
}

impl OracleSuite {
    pub fn run(&self) -> Result<OracleReport> {
        if self.trials == 0 || self.max_t == 0 || self.max_h == 0 {
            return Err(Error::Config("trials, t and h must be positive".into()));
        }
        let mut report = OracleReport {
            trials: self.trials,
            ..Default::default()
        };
        for trial in 0..self.trials {
            let trial_seed = self.seed.wrapping_add(trial as u64);
            let mut rng = Rng::new(trial_seed);
            let (t, h) = if self.vary_dims {
                (rng.range_inclusive(1, self.max_t), rng.range_inclusive(1, self.max_h))
            } else {
                (self.max_t, self.max_h)
            };
            let x_q = rng.normal_matrix(1, h, 1.0);
            let keys = rng.normal_matrix(t, h, 1.0);
            let values = rng.normal_matrix(t, h, 1.0);

            let rtn = match self.perturbation {
                KeyPerturbation::Rtn => true,
                KeyPerturbation::Mixed => trial % 2 == 0,
                _ => false,
            };
            let keys_star = match self.perturbation {
                KeyPerturbation::Identity => keys.clone(),
                _ if rtn => {
                    quantizer::reconstruct(&keys, QuantSpec::with_bits(self.bits, Axis::PerChannel, t)?)?
                }
                _ => keys.add(&rng.normal_matrix(t, h, 0.1))?,
            };
            let values_star =
                quantizer::reconstruct(&values, QuantSpec::with_bits(self.bits, Axis::PerToken, h)?)?;

            let (v, k, w) = oracle_deviations(&x_q, &keys, &keys_star, &values, &values_star)?;
            report.max_value_abs_dev = report.max_value_abs_dev.max(v);
            report.max_key_rel_dev = report.max_key_rel_dev.max(k);
            report.max_weight_abs_dev = report.max_weight_abs_dev.max(w);
        }
        Ok(report)
    }
}

/// The `h = 1` worked instance: `x_q = [1]`, `K = [[0],[0]]`, `K* = [[0],[ln 3]]`, `V = [[1],[2]]`.
pub fn hand_instance() -> (Matrix, Matrix, Matrix, Matrix) {
    let x_q = Matrix::from_rows(&[vec![1.0]]).unwrap();
    let keys = Matrix::from_rows(&[vec![0.0], vec![0.0]]).unwrap();
    let keys_star = Matrix::from_rows(&[vec![0.0], vec![3f64.ln()]]).unwrap();
    let values = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
    (x_q, keys, keys_star, values)
}
