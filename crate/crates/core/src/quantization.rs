//! INT4 affine blocks for residual factors and FP16 payloads for bases.

use std::io::{Read, Write};

use half::f16;

use crate::error::{MoeError, Result};
use crate::io::{read_f64, read_u16, read_u64, read_u8, write_f64, write_u16, write_u64, write_u8};
use crate::numerics::Matrix;

pub const INT4_LEVELS: u8 = 16;
const MAX_CODE: f64 = 15.0;

/// One shared scale and zero point for every element of the block.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantBlock {
    /// Two codes per byte, even index in the low nibble.
    pub packed: Vec<u8>,
    pub scale: f64,
    pub zero_point: u8,
    pub count: usize,
}

impl QuantBlock {
    /// A zero-length block (a group whose residuals are all pruned).
    pub fn empty() -> Self {
        Self { packed: Vec::new(), scale: 1.0, zero_point: 0, count: 0 }
    }

    pub fn codes(&self) -> Vec<u8> {
        unpack_nibbles(&self.packed, self.count)
    }

    pub fn payload_bytes(&self) -> usize {
        self.packed.len()
    }

    pub(crate) fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_f64(w, self.scale)?;
        write_u8(w, self.zero_point)?;
        write_u64(w, self.count as u64)?;
        w.write_all(&self.packed)?;
        Ok(())
    }

    pub(crate) fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let scale = read_f64(r)?;
        let zero_point = read_u8(r)?;
        let count = read_u64(r)? as usize;
        if !(scale.is_finite() && scale > 0.0) || zero_point > 15 {
            return Err(MoeError::Format(format!("bad quant header: scale {scale}, zero point {zero_point}")));
        }
        let mut packed = vec![0u8; count.div_ceil(2)];
        r.read_exact(&mut packed)?;
        if count % 2 == 1 && packed[count / 2] >> 4 != 0 {
            return Err(MoeError::Format("nonzero padding nibble".into()));
        }
        Ok(Self { packed, scale, zero_point, count })
    }

    pub(crate) fn encoded_len(count: usize) -> usize {
        8 + 1 + 8 + count.div_ceil(2)
    }
}

/// Packs 4-bit codes two per byte; an odd tail leaves the high nibble zero.
pub fn pack_nibbles(codes: &[u8]) -> Result<Vec<u8>> {
    if let Some(c) = codes.iter().find(|&&c| c > 15) {
        return Err(MoeError::invalid(format!("code {c} does not fit in 4 bits")));
    }
    Ok(codes
        .chunks(2)
        .map(|pair| pair[0] | pair.get(1).map_or(0, |hi| hi << 4))
        .collect())
}

pub fn unpack_nibbles(packed: &[u8], count: usize) -> Vec<u8> {
    (0..count)
        .map(|i| {
            let byte = packed[i / 2];
            if i % 2 == 0 {
                byte & 0x0F
            } else {
                byte >> 4
            }
        })
        .collect()
}

/// Asymmetric INT4 quantization of one group's residual elements.
///
/// The range is widened to contain 0 so that the zero-point code decodes to
/// exactly 0.0 and no element is clipped; for blocks that already straddle 0
/// this is the plain min/max scheme. Rounding is half-to-even.
pub fn quantize_group(values: &[f64]) -> Result<QuantBlock> {
    if values.is_empty() {
        return Err(MoeError::invalid("cannot quantize an empty block"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(MoeError::NonFinite("quantization input".into()));
    }
    let lo = values.iter().copied().fold(0.0f64, f64::min);
    let hi = values.iter().copied().fold(0.0f64, f64::max);
    let scale = if hi > lo { (hi - lo) / MAX_CODE } else { 1.0 };
    let zero_point = (-lo / scale).round_ties_even().clamp(0.0, MAX_CODE);
    let codes: Vec<u8> = values
        .iter()
        .map(|&v| (v / scale + zero_point).round_ties_even().clamp(0.0, MAX_CODE) as u8)
        .collect();
    Ok(QuantBlock { packed: pack_nibbles(&codes)?, scale, zero_point: zero_point as u8, count: values.len() })
}

pub fn dequantize_group(q: &QuantBlock) -> Vec<f64> {
    let zp = f64::from(q.zero_point);
    q.codes().into_iter().map(|c| q.scale * (f64::from(c) - zp)).collect()
}

/// Binary16 encoding of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Fp16Payload {
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<u16>,
    /// Entries clamped to ±65504 on encode.
    pub saturated: usize,
}

impl Fp16Payload {
    pub(crate) fn write_bits<W: Write>(&self, w: &mut W) -> Result<()> {
        for &b in &self.bits {
            write_u16(w, b)?;
        }
        Ok(())
    }

    pub(crate) fn read_bits<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Self> {
        let bits = (0..rows * cols).map(|_| read_u16(r)).collect::<Result<Vec<_>>>()?;
        if bits.iter().any(|&b| !f16::from_bits(b).is_finite()) {
            return Err(MoeError::Format("non-finite half value".into()));
        }
        Ok(Self { rows, cols, bits, saturated: 0 })
    }
}

/// Round-to-nearest-even conversion; out-of-range values saturate.
pub fn encode_fp16(m: &Matrix) -> Fp16Payload {
    let max = f64::from(f16::MAX);
    let mut saturated = 0;
    let bits = m
        .as_slice()
        .iter()
        .map(|&v| {
            let v = if v.abs() > max {
                saturated += 1;
                v.signum() * max
            } else {
                v
            };
            f16::from_f64(v).to_bits()
        })
        .collect();
    Fp16Payload { rows: m.rows(), cols: m.cols(), bits, saturated }
}

pub fn decode_fp16(p: &Fp16Payload) -> Matrix {
    let data = p.bits.iter().map(|&b| f64::from(f16::from_bits(b))).collect();
    Matrix::new(p.rows, p.cols, data).expect("finite half values")
}

/// Value a matrix takes after an FP16 round trip.
pub fn round_fp16(m: &Matrix) -> Matrix {
    decode_fp16(&encode_fp16(m))
}
