use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use asymkv::error_analysis::{asymmetry_experiment, AsymmetrySetup, KeyPerturbation};
use asymkv::harness::commands::{self, MemoryPreset, SweepAxis};
use asymkv::harness::{parse_bits, read_tensor, write_quantized, ExperimentConfig};
use asymkv::policy::{memory_sweep, ModelShape};
use asymkv::{Axis, Error, QuantSpec, Result};

#[derive(Parser)]
#[command(name = "asymkv", version, about = "KV-cache quantization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a tensor file and print error statistics.
    Quantize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "2")]
        bits: String,
        #[arg(long, default_value = "per-token")]
        axis: Axis,
        #[arg(long, default_value_t = 32)]
        group_size: usize,
        /// Write the quantized dump here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the closed-form attention errors with direct differences.
    TheoremCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 16)]
        t: usize,
        #[arg(long, default_value_t = 8)]
        h: usize,
        #[arg(long, default_value = "2")]
        bits: String,
        /// identity, random, rtn or mixed
        #[arg(long, default_value = "mixed")]
        perturbation: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Staged key-vs-value quantization error on Gaussian attention instances.
    Asymmetry {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 64)]
        t: usize,
        #[arg(long, default_value_t = 32)]
        h: usize,
        #[arg(long, default_value = "2")]
        bits: String,
        /// Use fixed-size groups instead of whole-axis statistics.
        #[arg(long)]
        group_size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-element output errors here.
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// End-to-end hidden-state error of one quantized toy-model run.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        l_k: Option<usize>,
        #[arg(long)]
        l_v: Option<usize>,
        #[arg(long)]
        passthrough: bool,
        /// Feed hidden states back in after the prompt.
        #[arg(long)]
        feedback: bool,
        /// Write the per-step CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Memory and mean end-to-end error over a set of layer policies.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        /// trajectory, grid, keys or values
        #[arg(long, default_value = "trajectory")]
        axis: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic KV-cache memory along the layer-policy sweep.
    Memory {
        /// toy, llama-7b or llama-13b
        #[arg(long, default_value = "llama-7b")]
        preset: String,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        h_total: Option<usize>,
        #[arg(long)]
        group_size: Option<usize>,
        #[arg(long)]
        residual_length: Option<usize>,
        #[arg(long)]
        tokens: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, default_value_t = 2)]
        high_bits: u8,
        #[arg(long, default_value_t = 1)]
        low_bits: u8,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Outcome {
    Ok,
    ToleranceFailure,
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn parse_perturbation(s: &str) -> Result<KeyPerturbation> {
    match s {
        "identity" => Ok(KeyPerturbation::Identity),
        "random" => Ok(KeyPerturbation::Random),
        "rtn" => Ok(KeyPerturbation::Rtn),
        "mixed" => Ok(KeyPerturbation::Mixed),
        other => Err(Error::Config(format!("unknown perturbation {other:?}"))),
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    path.map_or_else(|| Ok(ExperimentConfig::default()), ExperimentConfig::load)
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Quantize {
            input,
            bits,
            axis,
            group_size,
            out,
        } => {
            let bits = parse_bits(&bits)?.ok_or_else(|| Error::Spec("quantize needs a bit width".into()))?;
            let m = read_tensor(&input)?;
            let (q, stats) = commands::quantize_tensor(&m, QuantSpec::new(bits, axis, group_size)?)?;
            if let Some(path) = out {
                write_quantized(&path, &q)?;
            }
            print!("{}", stats.render());
            if stats.max_abs_error > stats.max_half_scale + 1e-9 {
                return Ok(Outcome::ToleranceFailure);
            }
        }
        Command::TheoremCheck {
            seed,
            trials,
            t,
            h,
            bits,
            perturbation,
            out,
        } => {
            let check =
                commands::theorem_check(seed, trials, t, h, parse_bits(&bits)?, parse_perturbation(&perturbation)?)?;
            emit(out.as_deref(), &check.render())?;
            if !check.pass() {
                return Ok(Outcome::ToleranceFailure);
            }
        }
        Command::Asymmetry {
            seed,
            trials,
            t,
            h,
            bits,
            group_size,
            out,
            samples,
        } => {
            let bits = parse_bits(&bits)?;
            let setup = match group_size {
                Some(gs) => AsymmetrySetup::grouped(bits, gs)?,
                None => AsymmetrySetup::whole_axis(bits, t, h)?,
            };
            let summary = asymmetry_experiment(trials, t, h, setup, seed)?;
            emit(out.as_deref(), &commands::asymmetry_csv(&summary))?;
            if let Some(path) = samples {
                fs::write(path, commands::samples_csv(&summary))?;
            }
        }
        Command::Generate {
            config,
            seed,
            l_k,
            l_v,
            passthrough,
            feedback,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(l_k) = l_k {
                cfg.policy.l_k = Some(l_k);
            }
            if let Some(l_v) = l_v {
                cfg.policy.l_v = l_v;
            }
            cfg.cache.passthrough |= passthrough;
            cfg.generation.feedback |= feedback;
            for warning in cfg.validate()? {
                eprintln!("warning: {warning}");
            }
            let run = commands::run_generation(&cfg, cfg.seed)?;
            emit(out.as_deref(), &commands::generation_csv(&run))?;
            if out.is_some() {
                println!("final_mse={:e}", run.final_mse());
            }
        }
        Command::Sweep {
            config,
            seed,
            trials,
            axis,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(trials) = trials {
                cfg.trials = trials;
            }
            cfg.validate()?;
            let axis: SweepAxis = axis.parse()?;
            emit(out.as_deref(), &commands::sweep_csv(&commands::sweep(&cfg, axis)?))?;
        }
        Command::Memory {
            preset,
            layers,
            h_total,
            group_size,
            residual_length,
            tokens,
            batch,
            high_bits,
            low_bits,
            out,
        } => {
            let base: MemoryPreset = preset.parse()?;
            let shape = ModelShape::new(
                layers.unwrap_or(base.shape.layer_count),
                h_total.unwrap_or(base.shape.h_total),
                group_size.unwrap_or(base.shape.group_size),
                residual_length.unwrap_or(base.shape.residual_length),
            );
            let points = memory_sweep(
                &shape,
                high_bits,
                low_bits,
                tokens.unwrap_or(base.tokens),
                batch.unwrap_or(base.batch),
            )?;
            emit(out.as_deref(), &commands::memory_csv(&points))?;
        }
    }
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::ToleranceFailure) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
