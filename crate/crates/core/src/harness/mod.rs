//! Experiment harness: file formats, configs and the CLI command bodies.

pub mod commands;
pub mod config;
pub mod tensor_file;

pub use config::ExperimentConfig;
pub use tensor_file::{read_quantized, read_tensor, write_quantized, write_tensor};

/// Parses a bit-width flag: `1`, `2`, `4`, `8`, or `none` for passthrough.
pub fn parse_bits(s: &str) -> crate::Result<Option<u8>> {
    match s {
        "none" | "passthrough" | "float" => Ok(None),
        other => {
            let bits: u8 = other
                .parse()
                .map_err(|_| crate::Error::Spec(format!("bad bit width {other:?}")))?;
            if crate::quantizer::SUPPORTED_BITS.contains(&bits) {
                Ok(Some(bits))
            } else {
                Err(crate::Error::Spec(format!("bits must be 1, 2, 4, 8 or none, got {bits}")))
            }
        }
    }
}

pub fn bits_label(bits: Option<u8>) -> String {
    bits.map_or_else(|| "none".to_string(), |b| b.to_string())
}
