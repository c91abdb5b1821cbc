//! Group-wise round-to-nearest (RTN) quantization.
//!
//! Each group of `group_size` elements shares a zero-point `z` (the group
//! minimum) and scale `s = (max - min) / (2^b - 1)`. Codes are
//! `clamp(round((x - z) / s), 0, 2^b - 1)` and reconstruct as `code * s + z`.
//!
//! Group layout for a `tokens x channels` matrix:
//!
//! - [`Axis::PerToken`]: groups run along channels within one token;
//!   group `g = row * (cols / group_size) + col / group_size`.
//! - [`Axis::PerChannel`]: groups run along tokens within one channel;
//!   group `g = (row / group_size) * cols + col`.
//!
//! The code stream stores group `g` at positions `[g * group_size, (g + 1) * group_size)`,
//! elements in traversal order, packed LSB-first.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const SUPPORTED_BITS: [u8; 4] = [1, 2, 4, 8];
pub const DEFAULT_GROUP_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    /// Statistics along the token axis, one channel at a time (keys).
    PerChannel,
    /// Statistics along the channel axis, one token at a time (values).
    PerToken,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::PerChannel => "per-channel",
            Axis::PerToken => "per-token",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-channel" | "channel" => Ok(Axis::PerChannel),
            "per-token" | "token" => Ok(Axis::PerToken),
            other => Err(Error::Spec(format!("unknown axis {other:?}"))),
        }
    }
}

/// Bit width, grouping axis and group size.
///
/// `bits == None` is the passthrough sentinel: data is kept as exact floats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantSpec {
    bits: Option<u8>,
    axis: Axis,
    group_size: usize,
}

impl QuantSpec {
    pub fn new(bits: u8, axis: Axis, group_size: usize) -> Result<Self> {
        validate_bits(bits)?;
        if group_size == 0 {
            return Err(Error::Spec("group_size must be at least 1".into()));
        }
        Ok(Self {
            bits: Some(bits),
            axis,
            group_size,
        })
    }

    pub fn passthrough(axis: Axis, group_size: usize) -> Result<Self> {
        if group_size == 0 {
            return Err(Error::Spec("group_size must be at least 1".into()));
        }
        Ok(Self {
            bits: None,
            axis,
            group_size,
        })
    }

    /// Builds either a quantizing or a passthrough spec.
    pub fn with_bits(bits: Option<u8>, axis: Axis, group_size: usize) -> Result<Self> {
        match bits {
            Some(b) => Self::new(b, axis, group_size),
            None => Self::passthrough(axis, group_size),
        }
    }

    pub fn bits(&self) -> Option<u8> {
        self.bits
    }

    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn is_passthrough(&self) -> bool {
        self.bits.is_none()
    }

    pub fn with_axis(self, axis: Axis) -> Self {
        Self { axis, ..self }
    }

    pub fn with_group_size(self, group_size: usize) -> Result<Self> {
        Self::with_bits(self.bits, self.axis, group_size)
    }

    /// Extent of the axis groups run along, for a `rows x cols` matrix.
    pub fn grouping_extent(&self, rows: usize, cols: usize) -> usize {
        match self.axis {
            Axis::PerChannel => rows,
            Axis::PerToken => cols,
        }
    }

    pub fn group_count(&self, rows: usize, cols: usize) -> usize {
        rows * cols / self.group_size
    }

    fn check_shape(&self, rows: usize, cols: usize) -> Result<()> {
        let extent = self.grouping_extent(rows, cols);
        if extent == 0 || !extent.is_multiple_of(self.group_size) {
            return Err(Error::shape(format!(
                "{} grouping extent {extent} is not a positive multiple of group size {}",
                self.axis, self.group_size
            )));
        }
        Ok(())
    }
}

fn validate_bits(bits: u8) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::Spec(format!(
            "bits must be one of {SUPPORTED_BITS:?}, got {bits}"
        )))
    }
}

fn max_code(bits: u8) -> u8 {
    ((1u16 << bits) - 1) as u8
}

/// Packed codes plus per-group scale and zero-point.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    spec: QuantSpec,
    codes: Vec<u8>,
    scales: Vec<f64>,
    zeros: Vec<f64>,
}

impl QuantizedTensor {
    /// Reassembles a tensor from its serialized parts, validating lengths.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        spec: QuantSpec,
        codes: Vec<u8>,
        scales: Vec<f64>,
        zeros: Vec<f64>,
    ) -> Result<Self> {
        let bits = spec
            .bits
            .ok_or_else(|| Error::Spec("passthrough spec has no codes".into()))?;
        spec.check_shape(rows, cols)?;
        let groups = spec.group_count(rows, cols);
        let needed = packed_len(rows * cols, bits);
        if codes.len() != needed {
            return Err(Error::format(
                codes.len().min(needed),
                format!("code stream has {} bytes, expected {needed}", codes.len()),
            ));
        }
        if scales.len() != groups || zeros.len() != groups {
            return Err(Error::format(
                needed,
                format!(
                    "expected {groups} groups, got {} scales and {} zeros",
                    scales.len(),
                    zeros.len()
                ),
            ));
        }
        if let Some(g) = scales.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Value(format!("group {g} has non-positive scale")));
        }
        if let Some(g) = zeros.iter().position(|z| !z.is_finite()) {
            return Err(Error::Value(format!("group {g} has non-finite zero-point")));
        }
        Ok(Self {
            rows,
            cols,
            spec,
            codes,
            scales,
            zeros,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn spec(&self) -> QuantSpec {
        self.spec
    }

    pub fn bits(&self) -> u8 {
        self.spec.bits.expect("quantized tensor always has bits")
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zeros(&self) -> &[f64] {
        &self.zeros
    }

    pub fn group_count(&self) -> usize {
        self.scales.len()
    }

    /// Group index of element `(row, col)`.
    pub fn group_of(&self, row: usize, col: usize) -> usize {
        group_of(&self.spec, self.cols, row, col)
    }

    /// Position of element `(row, col)` in the code stream.
    pub fn code_index(&self, row: usize, col: usize) -> usize {
        code_index(&self.spec, self.cols, row, col)
    }

    pub fn scale_at(&self, row: usize, col: usize) -> f64 {
        self.scales[self.group_of(row, col)]
    }

    /// Unpacked codes as a `rows x cols` grid in row-major order.
    pub fn code_grid(&self) -> Result<Vec<u8>> {
        let stream = unpack_codes(&self.codes, self.bits(), self.rows * self.cols)?;
        let mut grid = vec![0u8; stream.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                grid[r * self.cols + c] = stream[self.code_index(r, c)];
            }
        }
        Ok(grid)
    }

    /// Bytes used by codes plus 32-bit scale and zero per group.
    pub fn storage_bytes(&self) -> usize {
        self.codes.len() + self.group_count() * 8
    }
}

fn group_of(spec: &QuantSpec, cols: usize, row: usize, col: usize) -> usize {
    let gs = spec.group_size;
    match spec.axis {
        Axis::PerToken => row * (cols / gs) + col / gs,
        Axis::PerChannel => (row / gs) * cols + col,
    }
}

fn code_index(spec: &QuantSpec, cols: usize, row: usize, col: usize) -> usize {
    let gs = spec.group_size;
    match spec.axis {
        Axis::PerToken => row * cols + col,
        Axis::PerChannel => ((row / gs) * cols + col) * gs + row % gs,
    }
}

/// Group member `(row, col)` pairs in stream order.
fn group_members(spec: &QuantSpec, cols: usize, group: usize) -> impl Iterator<Item = (usize, usize)> {
    let gs = spec.group_size;
    let axis = spec.axis;
    (0..gs).map(move |pos| match axis {
        Axis::PerToken => {
            let per_row = cols / gs;
            (group / per_row, (group % per_row) * gs + pos)
        }
        Axis::PerChannel => ((group / cols) * gs + pos, group % cols),
    })
}

fn packed_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

/// Quantizes `m` (tokens x channels) group-wise with round-half-away-from-zero.
pub fn quantize(m: &Matrix, spec: QuantSpec) -> Result<QuantizedTensor> {
    let bits = spec
        .bits
        .ok_or_else(|| Error::Spec("cannot quantize with a passthrough spec".into()))?;
    let (rows, cols) = m.shape();
    spec.check_shape(rows, cols)?;

    let groups = spec.group_count(rows, cols);
    let top = max_code(bits);
    let mut stream = Vec::with_capacity(rows * cols);
    let mut scales = Vec::with_capacity(groups);
    let mut zeros = Vec::with_capacity(groups);

    for g in 0..groups {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (r, c) in group_members(&spec, cols, g) {
            let v = m.get(r, c);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let scale = if hi > lo { (hi - lo) / f64::from(top) } else { 1.0 };
        for (r, c) in group_members(&spec, cols, g) {
            let q = ((m.get(r, c) - lo) / scale).round();
            stream.push(q.clamp(0.0, f64::from(top)) as u8);
        }
        scales.push(scale);
        zeros.push(lo);
    }

    stream.resize(packed_len(rows * cols, bits) * 8 / bits as usize, 0);
    let codes = pack_codes(&stream, bits)?;
    Ok(QuantizedTensor {
        rows,
        cols,
        spec,
        codes,
        scales,
        zeros,
    })
}

/// Reconstructs `code * s + z` for every element.
pub fn dequantize(q: &QuantizedTensor) -> Result<Matrix> {
    let stream = unpack_codes(&q.codes, q.bits(), q.rows * q.cols)?;
    let mut out = vec![0.0; q.rows * q.cols];
    for r in 0..q.rows {
        for c in 0..q.cols {
            let g = q.group_of(r, c);
            let code = stream[q.code_index(r, c)];
            out[r * q.cols + c] = f64::from(code) * q.scales[g] + q.zeros[g];
        }
    }
    Matrix::new(q.rows, q.cols, out)
}

/// `dequantize(quantize(m))`, or an exact copy under a passthrough spec.
pub fn reconstruct(m: &Matrix, spec: QuantSpec) -> Result<Matrix> {
    if spec.is_passthrough() {
        return Ok(m.clone());
    }
    dequantize(&quantize(m, spec)?)
}

/// Error matrix `m - dequantize(quantize(m))`.
pub fn quant_error(m: &Matrix, spec: QuantSpec) -> Result<Matrix> {
    m.sub(&reconstruct(m, spec)?)
}

/// Packs codes LSB-first: code `j` occupies bits `[j*bits, (j+1)*bits)`.
pub fn pack_codes(codes: &[u8], bits: u8) -> Result<Vec<u8>> {
    validate_bits(bits)?;
    let width = bits as usize;
    if !(codes.len() * width).is_multiple_of(8) {
        return Err(Error::Value(format!(
            "{} codes of {bits} bits do not fill whole bytes",
            codes.len()
        )));
    }
    let top = max_code(bits);
    let mut out = vec![0u8; codes.len() * width / 8];
    for (j, &code) in codes.iter().enumerate() {
        if code > top {
            return Err(Error::Value(format!(
                "code {code} at position {j} exceeds {bits}-bit range"
            )));
        }
        let bit = j * width;
        out[bit / 8] |= code << (bit % 8);
    }
    Ok(out)
}

/// Inverse of [`pack_codes`] on the first `count` codes.
pub fn unpack_codes(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u8>> {
    validate_bits(bits)?;
    let width = bits as usize;
    let needed = (count * width).div_ceil(8);
    if needed > bytes.len() {
        return Err(Error::format(
            bytes.len(),
            format!("need {needed} bytes for {count} {bits}-bit codes"),
        ));
    }
    let mask = max_code(bits);
    Ok((0..count)
        .map(|j| {
            let bit = j * width;
            (bytes[bit / 8] >> (bit % 8)) & mask
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Matrix {
        Matrix::row_vector(v.to_vec()).unwrap()
    }

    fn unpacked(q: &QuantizedTensor) -> Vec<u8> {
        q.code_grid().unwrap()
    }

    #[test]
    fn one_bit_example() {
        let spec = QuantSpec::new(1, Axis::PerToken, 4).unwrap();
        let q = quantize(&row(&[0.0, 0.4, 0.6, 1.0]), spec).unwrap();
        assert_eq!(q.zeros(), &[0.0]);
        assert_eq!(q.scales(), &[1.0]);
        assert_eq!(unpacked(&q), vec![0, 0, 1, 1]);
        assert_eq!(dequantize(&q).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn two_bit_lattice_example() {
        let spec = QuantSpec::new(2, Axis::PerToken, 4).unwrap();
        let m = row(&[1.0, 3.0, 5.0, 7.0]);
        let q = quantize(&m, spec).unwrap();
        assert_eq!(q.zeros(), &[1.0]);
        assert_eq!(q.scales(), &[2.0]);
        assert_eq!(unpacked(&q), vec![0, 1, 2, 3]);
        assert_eq!(q.packed_codes(), &[0xE4]);
        assert_eq!(dequantize(&q).unwrap(), m);
    }

    #[test]
    fn constant_group_is_degenerate() {
        for bits in SUPPORTED_BITS {
            let spec = QuantSpec::new(bits, Axis::PerToken, 4).unwrap();
            let m = row(&[2.0; 4]);
            let q = quantize(&m, spec).unwrap();
            assert_eq!(q.zeros(), &[2.0]);
            assert_eq!(q.scales(), &[1.0]);
            assert_eq!(unpacked(&q), vec![0; 4]);
            assert_eq!(dequantize(&q).unwrap(), m);
        }
    }

    #[test]
    fn quant_error_examples() {
        let spec = QuantSpec::new(1, Axis::PerToken, 4).unwrap();
        let e = quant_error(&row(&[0.0, 0.4, 0.6, 1.0]), spec).unwrap();
        let expected = [0.0, 0.4, -0.4, 0.0];
        for (g, x) in e.data().iter().zip(expected) {
            assert!((g - x).abs() < 1e-15);
        }
        let c = Matrix::new(4, 4, vec![-1.5; 16]).unwrap();
        let spec = QuantSpec::new(2, Axis::PerChannel, 4).unwrap();
        assert_eq!(quant_error(&c, spec).unwrap(), Matrix::zeros(4, 4));
    }

    #[test]
    fn half_step_bound_on_random_matrix() {
        let mut rng = crate::numerics::Rng::new(11);
        let m = rng.normal_matrix(8, 8, 1.0);
        for bits in SUPPORTED_BITS {
            for axis in [Axis::PerChannel, Axis::PerToken] {
                let spec = QuantSpec::new(bits, axis, 4).unwrap();
                let q = quantize(&m, spec).unwrap();
                let d = dequantize(&q).unwrap();
                for r in 0..8 {
                    for c in 0..8 {
                        let err = (m.get(r, c) - d.get(r, c)).abs();
                        assert!(err <= q.scale_at(r, c) / 2.0 + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn pack_examples() {
        assert_eq!(pack_codes(&[0, 1, 2, 3], 2).unwrap(), vec![0xE4]);
        assert_eq!(pack_codes(&[1, 0, 1, 1, 0, 0, 0, 1], 1).unwrap(), vec![0x8D]);
        assert_eq!(pack_codes(&[7, 255], 8).unwrap(), vec![0x07, 0xFF]);
        assert_eq!(unpack_codes(&[0xE4], 2, 4).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(
            unpack_codes(&[0x8D], 1, 8).unwrap(),
            vec![1, 0, 1, 1, 0, 0, 0, 1]
        );
        assert!(unpack_codes(&[0xAB, 0xCD], 4, 0).unwrap().is_empty());
    }

    #[test]
    fn pack_errors() {
        assert!(matches!(pack_codes(&[4, 0, 0, 0], 2), Err(Error::Value(_))));
        assert!(matches!(pack_codes(&[1, 0, 1], 1), Err(Error::Value(_))));
        assert!(matches!(pack_codes(&[0], 3), Err(Error::Spec(_))));
        assert!(matches!(
            unpack_codes(&[0xFF], 4, 3),
            Err(Error::Format { offset: 1, .. })
        ));
    }

    #[test]
    fn spec_and_shape_errors() {
        assert!(matches!(QuantSpec::new(3, Axis::PerToken, 4), Err(Error::Spec(_))));
        assert!(matches!(QuantSpec::new(2, Axis::PerToken, 0), Err(Error::Spec(_))));
        let spec = QuantSpec::new(2, Axis::PerToken, 4).unwrap();
        assert!(matches!(quantize(&row(&[1.0; 6]), spec), Err(Error::Shape(_))));
        let spec = QuantSpec::new(2, Axis::PerChannel, 4).unwrap();
        assert!(matches!(
            quantize(&Matrix::zeros(3, 8), spec),
            Err(Error::Shape(_))
        ));
        let pass = QuantSpec::passthrough(Axis::PerToken, 4).unwrap();
        assert!(matches!(quantize(&row(&[1.0; 4]), pass), Err(Error::Spec(_))));
        assert_eq!(quant_error(&row(&[0.3; 4]), pass).unwrap(), Matrix::zeros(1, 4));
    }

    #[test]
    fn corrupted_stream_is_rejected() {
        let spec = QuantSpec::new(2, Axis::PerToken, 4).unwrap();
        let q = quantize(&row(&[1.0, 3.0, 5.0, 7.0]), spec).unwrap();
        let bad = QuantizedTensor::from_parts(
            1,
            4,
            spec,
            vec![],
            q.scales().to_vec(),
            q.zeros().to_vec(),
        );
        assert!(matches!(bad, Err(Error::Format { .. })));
    }

    #[test]
    fn group_layout_per_channel() {
        // 8 tokens x 2 channels, groups of 4 along tokens.
        let spec = QuantSpec::new(8, Axis::PerChannel, 4).unwrap();
        let data: Vec<f64> = (0..16).map(f64::from).collect();
        let q = quantize(&Matrix::new(8, 2, data).unwrap(), spec).unwrap();
        assert_eq!(q.group_count(), 4);
        assert_eq!(q.group_of(0, 0), 0);
        assert_eq!(q.group_of(3, 1), 1);
        assert_eq!(q.group_of(4, 0), 2);
        assert_eq!(q.zeros(), &[0.0, 1.0, 8.0, 9.0]);
    }

    #[test]
    fn odd_bit_budget_is_padded() {
        let spec = QuantSpec::new(1, Axis::PerToken, 1).unwrap();
        let m = row(&[0.5, 1.5, 2.5]);
        let q = quantize(&m, spec).unwrap();
        assert_eq!(q.packed_codes().len(), 1);
        assert_eq!(dequantize(&q).unwrap(), m);
    }
}
