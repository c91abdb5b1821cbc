//! Command bodies behind the CLI. Each returns structured results; the CSV
//! helpers render them deterministically.

use std::fmt::Write as _;

use crate::attention::{attention_step, decode_token, token_embeddings, ToyModel};
use crate::error::{Error, Result};
use crate::error_analysis::{
    hand_instance, key_error_closed_form, AsymmetrySummary, ErrorSource, KeyPerturbation, OracleReport,
    OracleSuite, Stage,
};
use crate::harness::config::ExperimentConfig;
use crate::harness::bits_label;
use crate::numerics::{mse, CompensatedSum, Matrix};
use crate::policy::{estimate_memory, sweep_trajectory, ModelShape, SweepPoint};
use crate::quantizer::{dequantize, quantize, QuantSpec, QuantizedTensor};

/// Tolerance on the hand instance's closed-form key error.
pub const HAND_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizeStats {
    pub rows: usize,
    pub cols: usize,
    pub groups: usize,
    pub max_abs_error: f64,
    pub mse: f64,
    /// Largest `s / 2` over all groups.
    pub max_half_scale: f64,
}

pub fn quantize_tensor(m: &Matrix, spec: QuantSpec) -> Result<(QuantizedTensor, QuantizeStats)> {
    let q = quantize(m, spec)?;
    let back = dequantize(&q)?;
    let max_half_scale = q.scales().iter().fold(0.0f64, |acc, s| acc.max(s / 2.0));
    let stats = QuantizeStats {
        rows: m.rows(),
        cols: m.cols(),
        groups: q.group_count(),
        max_abs_error: m.sub(&back)?.max_abs(),
        mse: mse(m, &back)?,
        max_half_scale,
    };
    Ok((q, stats))
}

impl QuantizeStats {
    pub fn render(&self) -> String {
        format!(
            "rows={} cols={} groups={}\nmax_abs_error={:e}\nmse={:e}\nmax_half_scale={:e}\n",
            self.rows, self.cols, self.groups, self.max_abs_error, self.mse, self.max_half_scale
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoremCheck {
    pub hand_closed: f64,
    pub hand_direct: f64,
    pub suite: OracleReport,
}

impl TheoremCheck {
    pub fn hand_pass(&self) -> bool {
        (self.hand_closed - self.hand_direct).abs() <= HAND_TOL && (self.hand_closed + 0.25).abs() <= HAND_TOL
    }

    pub fn pass(&self) -> bool {
        self.hand_pass() && self.suite.pass()
    }

    pub fn render(&self) -> String {
        let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "hand instance: closed={:.15} direct={:.15} {}",
            self.hand_closed,
            self.hand_direct,
            verdict(self.hand_pass())
        );
        let _ = writeln!(out, "trials={}", self.suite.trials);
        let _ = writeln!(
            out,
            "value max_abs_dev={:e} {}",
            self.suite.max_value_abs_dev,
            verdict(self.suite.value_pass())
        );
        let _ = writeln!(
            out,
            "key max_rel_dev={:e} {}",
            self.suite.max_key_rel_dev,
            verdict(self.suite.key_pass())
        );
        let _ = writeln!(
            out,
            "weights max_abs_dev={:e} {}",
            self.suite.max_weight_abs_dev,
            verdict(self.suite.weight_pass())
        );
        let _ = writeln!(out, "{}", verdict(self.pass()));
        out
    }
}

pub fn hand_check() -> Result<(f64, f64)> {
    let (x_q, keys, keys_star, values) = hand_instance();
    let closed = key_error_closed_form(&x_q, &keys, &keys_star, &values)?.get(0, 0);
    let direct = attention_step(&x_q, &keys, &values)?.get(0, 0) - attention_step(&x_q, &keys_star, &values)?.get(0, 0);
    Ok((closed, direct))
}

pub fn theorem_check(
    seed: u64,
    trials: usize,
    t: usize,
    h: usize,
    bits: Option<u8>,
    perturbation: KeyPerturbation,
) -> Result<TheoremCheck> {
    let (hand_closed, hand_direct) = hand_check()?;
    let suite = OracleSuite {
        seed,
        trials,
        max_t: t,
        max_h: h,
        vary_dims: true,
        bits,
        perturbation,
    }
    .run()?;
    Ok(TheoremCheck {
        hand_closed,
        hand_direct,
        suite,
    })
}

/// `source,stage,mean_mse,trials,t,h,bits,seed,ratio`, key rows first.
pub fn asymmetry_csv(summary: &AsymmetrySummary) -> String {
    let mut out = String::from("source,stage,mean_mse,trials,t,h,bits,seed,ratio\n");
    for source in [ErrorSource::KeyQuantized, ErrorSource::ValueQuantized] {
        for stage in Stage::ALL {
            let ratio = summary
                .ratio(stage)
                .map_or_else(|| "undefined".to_string(), |r| format!("{r:e}"));
            let _ = writeln!(
                out,
                "{source},{},{:e},{},{},{},{},{},{ratio}",
                stage.name(),
                summary.mean(source, stage),
                summary.trials,
                summary.t,
                summary.h,
                bits_label(summary.bits),
                summary.seed,
            );
        }
    }
    out
}

/// Per-element output errors: `source,index,error`.
pub fn samples_csv(summary: &AsymmetrySummary) -> String {
    let mut out = String::from("source,index,error\n");
    for (source, samples) in [
        (ErrorSource::KeyQuantized, &summary.key_samples),
        (ErrorSource::ValueQuantized, &summary.value_samples),
    ] {
        for (i, e) in samples.iter().enumerate() {
            let _ = writeln!(out, "{source},{i},{e:e}");
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRun {
    pub seed: u64,
    /// Hidden-state MSE after each generated token.
    pub per_step_mse: Vec<f64>,
}

impl GenerationRun {
    pub fn final_mse(&self) -> f64 {
        *self.per_step_mse.last().expect("gen_len >= 1")
    }
}

/// Decodes prompt and generated tokens twice, once through exact caches and
/// once through the configured quantized caches, and compares the final
/// hidden rows of every generated token.
///
/// With `generation.feedback`, each run feeds its own last hidden row back
/// in after the prompt.
pub fn run_generation(cfg: &ExperimentConfig, seed: u64) -> Result<GenerationRun> {
    cfg.validate()?;
    let model = ToyModel::seeded(cfg.model.layers, cfg.model.head_dim, seed)?;
    let embeddings = token_embeddings(seed, cfg.total_tokens(), cfg.model.head_dim);
    let mut exact = model.new_caches(|_| cfg.full_precision_cache_config())?;
    let mut quantized = model.new_caches(|i| cfg.cache_config(i))?;
    let mut per_step_mse = Vec::with_capacity(cfg.generation.gen_len);
    let mut fed_back: Option<(Matrix, Matrix)> = None;
    for t in 0..cfg.total_tokens() {
        let fresh = embeddings.slice_rows(t, t + 1);
        let (x_exact, x_quant) = match fed_back.take() {
            Some(pair) if cfg.generation.feedback && t >= cfg.generation.prompt_len => pair,
            _ => (fresh.clone(), fresh),
        };
        let reference = decode_token(&model, &x_exact, &mut exact)?;
        let hidden = decode_token(&model, &x_quant, &mut quantized)?;
        fed_back = Some((reference.clone(), hidden.clone()));
        if t >= cfg.generation.prompt_len {
            let err = mse(&hidden, &reference)?;
            if !err.is_finite() {
                return Err(Error::NonFinite(t));
            }
            per_step_mse.push(err);
        }
    }
    Ok(GenerationRun { seed, per_step_mse })
}

/// Runs `cfg.trials` generations seeded `cfg.seed + i`.
pub fn run_trials(cfg: &ExperimentConfig) -> Result<Vec<GenerationRun>> {
    (0..cfg.trials)
        .map(|i| run_generation(cfg, cfg.seed.wrapping_add(i as u64)))
        .collect()
}

pub fn mean_final_mse(runs: &[GenerationRun]) -> f64 {
    let mut sum = CompensatedSum::default();
    for r in runs {
        sum.add(r.final_mse());
    }
    sum.value() / runs.len() as f64
}

/// `step,mse` where step counts generated tokens from 1.
pub fn generation_csv(run: &GenerationRun) -> String {
    let mut out = String::from("step,mse\n");
    for (i, e) in run.per_step_mse.iter().enumerate() {
        let _ = writeln!(out, "{},{e:e}", i + 1);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// `(0..=L, 0)` then `(L, 1..=L)`.
    Trajectory,
    /// Every `(l_k, l_v)` in `[0, L]^2`.
    Grid,
    /// `(0..=L, 0)` only.
    Keys,
    /// `(0, 0..=L)` only.
    Values,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trajectory" => Ok(Self::Trajectory),
            "grid" => Ok(Self::Grid),
            "keys" => Ok(Self::Keys),
            "values" => Ok(Self::Values),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

pub fn sweep_points(layers: usize, axis: SweepAxis) -> Vec<(usize, usize)> {
    match axis {
        SweepAxis::Trajectory => sweep_trajectory(layers),
        SweepAxis::Grid => (0..=layers)
            .flat_map(|k| (0..=layers).map(move |v| (k, v)))
            .collect(),
        SweepAxis::Keys => (0..=layers).map(|k| (k, 0)).collect(),
        SweepAxis::Values => (0..=layers).map(|v| (0, v)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub l_k: usize,
    pub l_v: usize,
    pub total_bytes: u64,
    pub mean_mse: f64,
}

pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis) -> Result<Vec<SweepRow>> {
    let shape = cfg.model_shape();
    sweep_points(cfg.model.layers, axis)
        .into_iter()
        .map(|(l_k, l_v)| {
            let point = cfg.with_policy(l_k, l_v);
            let estimate = estimate_memory(&shape, &point.asym_config(), cfg.total_tokens(), 1)?;
            Ok(SweepRow {
                l_k,
                l_v,
                total_bytes: estimate.total_bytes,
                mean_mse: mean_final_mse(&run_trials(&point)?),
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("l_k,l_v,total_bytes,mean_mse\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{:e}", r.l_k, r.l_v, r.total_bytes, r.mean_mse);
    }
    out
}

pub fn memory_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("l_k,l_v,payload_bytes,metadata_bytes,residual_bytes,total_bytes\n");
    for p in points {
        let e = &p.estimate;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            p.l_k, p.l_v, e.payload_bytes, e.metadata_bytes, e.residual_bytes, e.total_bytes
        );
    }
    out
}

/// Shape, token count and batch for the `memory` command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryPreset {
    pub shape: ModelShape,
    pub tokens: usize,
    pub batch: usize,
}

impl std::str::FromStr for MemoryPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self {
                shape: ModelShape::new(2, 8, 4, 0),
                tokens: 4,
                batch: 1,
            }),
            "llama-7b" => Ok(Self {
                shape: ModelShape::llama_7b(),
                tokens: 4096,
                batch: 1,
            }),
            "llama-13b" => Ok(Self {
                shape: ModelShape::llama_13b(),
                tokens: 4096,
                batch: 1,
            }),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}
