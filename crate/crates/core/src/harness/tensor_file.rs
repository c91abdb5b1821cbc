//! Binary tensor and quantized-dump files.
//!
//! Both formats start with a single JSON header line terminated by `\n`,
//! followed by little-endian binary payload.
//!
//! Tensor file payload: `rows * cols` IEEE-754 f32 values, row-major.
//!
//! Quantized dump payload: `code_bytes` packed code bytes, then for each group
//! its scale and zero-point as f32.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::quantizer::{Axis, QuantSpec, QuantizedTensor};

pub const TENSOR_FORMAT: &str = "asymkv-tensor";
pub const QUANTIZED_FORMAT: &str = "asymkv-quantized";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorHeader {
    pub format: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizedHeader {
    pub format: String,
    pub rows: usize,
    pub cols: usize,
    pub bits: u8,
    pub axis: Axis,
    pub group_size: usize,
    pub groups: usize,
    pub code_bytes: usize,
}

fn split_header(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(bytes.len(), "missing header terminator"))?;
    Ok((&bytes[..nl], &bytes[nl + 1..]))
}

fn parse_header<T: for<'de> Deserialize<'de>>(line: &[u8]) -> Result<T> {
    serde_json::from_slice(line).map_err(|e| {
        // serde_json reports 1-based columns on a single line
        Error::format(e.column().saturating_sub(1), format!("bad header: {e}"))
    })
}

fn f32_at(bytes: &[u8], offset: usize) -> f32 {
    f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

pub fn encode_tensor(m: &Matrix) -> Vec<u8> {
    let header = TensorHeader {
        format: TENSOR_FORMAT.into(),
        rows: m.rows(),
        cols: m.cols(),
        dtype: "f32".into(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Matrix> {
    let (line, payload) = split_header(bytes)?;
    let header: TensorHeader = parse_header(line)?;
    let base = line.len() + 1;
    if header.format != TENSOR_FORMAT {
        return Err(Error::format(0, format!("unknown format {:?}", header.format)));
    }
    if header.dtype != "f32" {
        return Err(Error::format(0, format!("unsupported dtype {:?}", header.dtype)));
    }
    let expected = header.rows * header.cols * 4;
    if payload.len() != expected {
        return Err(Error::format(
            base + payload.len().min(expected),
            format!("payload has {} bytes, header implies {expected}", payload.len()),
        ));
    }
    let mut data = Vec::with_capacity(header.rows * header.cols);
    for i in 0..header.rows * header.cols {
        let v = f32_at(payload, i * 4);
        if !v.is_finite() {
            return Err(Error::format(base + i * 4, "non-finite element"));
        }
        data.push(f64::from(v));
    }
    Matrix::new(header.rows, header.cols, data)
}

pub fn write_tensor(path: &Path, m: &Matrix) -> Result<()> {
    fs::write(path, encode_tensor(m))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Matrix> {
    decode_tensor(&fs::read(path)?)
}

pub fn encode_quantized(q: &QuantizedTensor) -> Vec<u8> {
    let spec = q.spec();
    let header = QuantizedHeader {
        format: QUANTIZED_FORMAT.into(),
        rows: q.rows(),
        cols: q.cols(),
        bits: q.bits(),
        axis: spec.axis(),
        group_size: spec.group_size(),
        groups: q.group_count(),
        code_bytes: q.packed_codes().len(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.extend_from_slice(q.packed_codes());
    for (s, z) in q.scales().iter().zip(q.zeros()) {
        out.extend_from_slice(&(*s as f32).to_le_bytes());
        out.extend_from_slice(&(*z as f32).to_le_bytes());
    }
    out
}

/// Decodes a dump; scales and zero-points come back at f32 precision.
pub fn decode_quantized(bytes: &[u8]) -> Result<QuantizedTensor> {
    let (line, payload) = split_header(bytes)?;
    let header: QuantizedHeader = parse_header(line)?;
    let base = line.len() + 1;
    if header.format != QUANTIZED_FORMAT {
        return Err(Error::format(0, format!("unknown format {:?}", header.format)));
    }
    let spec = QuantSpec::new(header.bits, header.axis, header.group_size)?;
    let expected = header.code_bytes + header.groups * 8;
    if payload.len() != expected {
        return Err(Error::format(
            base + payload.len().min(expected),
            format!("payload has {} bytes, header implies {expected}", payload.len()),
        ));
    }
    let codes = payload[..header.code_bytes].to_vec();
    let meta = &payload[header.code_bytes..];
    let scales = (0..header.groups).map(|g| f64::from(f32_at(meta, g * 8))).collect();
    let zeros = (0..header.groups).map(|g| f64::from(f32_at(meta, g * 8 + 4))).collect();
    QuantizedTensor::from_parts(header.rows, header.cols, spec, codes, scales, zeros).map_err(|e| match e {
        Error::Format { offset, msg } => Error::format(base + offset, msg),
        other => other,
    })
}

pub fn write_quantized(path: &Path, q: &QuantizedTensor) -> Result<()> {
    fs::write(path, encode_quantized(q))?;
    Ok(())
}

pub fn read_quantized(path: &Path) -> Result<QuantizedTensor> {
    decode_quantized(&fs::read(path)?)
}
