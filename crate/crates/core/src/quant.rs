//! Blockwise 4-bit absmax quantization.
//!
//! Elements are split into row-major blocks of `block_size`. Each block stores
//! one `f32` scale (`absmax / 7`) and one 4-bit code per element, packed two
//! per byte with the even element in the low nibble. Codes `0..=14` decode to
//! `(code - 7) * scale`; code 15 is never produced and is rejected on load.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

pub const DEFAULT_BLOCK_SIZE: usize = 64;
pub const ZERO_CODE: u8 = 7;
const MAX_LEVEL: f32 = 7.0;

/// Decoding table mapping a 4-bit code to a multiple of the block scale.
///
/// The linear symmetric table is the default and the only one with a
/// checkpoint dtype tag. Other tables (e.g. NF4-style) can be plugged in for
/// in-memory use; quantization then picks the nearest level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub levels: [f32; 16],
    linear: bool,
}

impl Codebook {
    pub const fn linear_symmetric() -> Self {
        let mut levels = [0.0f32; 16];
        let mut i = 0;
        while i < 15 {
            levels[i] = i as f32 - 7.0;
            i += 1;
        }
        Codebook {
            levels,
            linear: true,
        }
    }

    /// A custom table. Levels are multiples of the block scale and should lie
    /// in `[-7, 7]`; entry 7 must be 0 so zero blocks round trip.
    pub fn custom(levels: [f32; 16]) -> Result<Self> {
        if levels[ZERO_CODE as usize] != 0.0 || levels.iter().any(|l| !l.is_finite()) {
            return Err(Error::Config("codebook needs finite levels and level 7 == 0".into()));
        }
        Ok(Codebook {
            levels,
            linear: false,
        })
    }

    pub fn is_linear(&self) -> bool {
        self.linear
    }

    #[inline]
    pub fn decode(&self, code: u8, scale: f32) -> f32 {
        if self.linear {
            (code as f32 - MAX_LEVEL) * scale
        } else {
            self.levels[code as usize] * scale
        }
    }

    /// Code for `value` in a block whose largest magnitude is `absmax`. The
    /// ratio is taken against the exact scale `absmax / 7` in f64, so ties
    /// are real ties and not artifacts of the rounded f32 scale.
    fn encode(&self, value: f32, absmax: f32) -> u8 {
        if absmax == 0.0 {
            return ZERO_CODE;
        }
        let ratio = value as f64 * MAX_LEVEL as f64 / absmax as f64;
        if self.linear {
            // f64::round is half-away-from-zero.
            (ratio.round().clamp(-7.0, 7.0) + 7.0) as u8
        } else {
            let mut best = ZERO_CODE;
            let mut best_d = f64::INFINITY;
            for (c, &l) in self.levels.iter().enumerate().take(15) {
                let d = (ratio - l as f64).abs();
                if d < best_d {
                    best = c as u8;
                    best_d = d;
                }
            }
            best
        }
    }
}

impl Default for Codebook {
    fn default() -> Self {
        Self::linear_symmetric()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub block_size: usize,
    /// Packed codes, `ceil(rows*cols/2)` bytes.
    pub codes: Vec<u8>,
    pub scales: Vec<f32>,
    #[serde(default)]
    pub codebook: Codebook,
}

pub fn packed_len(n: usize) -> usize {
    n.div_ceil(2)
}

pub fn num_blocks(n: usize, block_size: usize) -> usize {
    n.div_ceil(block_size)
}

/// Payload bytes of a quantized `n`-element matrix: packed codes plus one
/// `f32` scale per block.
pub fn storage_bytes(n: usize, block_size: usize) -> usize {
    packed_len(n) + 4 * num_blocks(n, block_size)
}

pub fn pack_codes(codes: &[u8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|pair| (pair[0] & 0x0f) | (pair.get(1).copied().unwrap_or(0) << 4))
        .collect()
}

pub fn unpack_codes(packed: &[u8], n: usize) -> Result<Vec<u8>> {
    if packed.len() != packed_len(n) {
        return Err(Error::Format(format!(
            "{} code bytes for {n} elements",
            packed.len()
        )));
    }
    let mut out = Vec::with_capacity(n);
    for (i, &byte) in packed.iter().enumerate() {
        out.push(byte & 0x0f);
        if 2 * i + 1 < n {
            out.push(byte >> 4);
        } else if byte >> 4 != 0 {
            return Err(Error::Format("non-zero padding nibble".into()));
        }
    }
    if let Some(bad) = out.iter().position(|&c| c > 14) {
        return Err(Error::Format(format!("invalid code 15 at element {bad}")));
    }
    Ok(out)
}

/// Quantizes a flat slice into codes and scales with the given codebook.
pub(crate) fn quantize_blocks(
    values: &[f32],
    block_size: usize,
    codebook: &Codebook,
) -> Result<(Vec<u8>, Vec<f32>)> {
    if block_size == 0 {
        return Err(Error::Config("block_size must be >= 1".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quantize_4bit input".into()));
    }
    let mut codes = Vec::with_capacity(values.len());
    let mut scales = Vec::with_capacity(num_blocks(values.len(), block_size));
    for block in values.chunks(block_size) {
        let absmax = block.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let scale = absmax / MAX_LEVEL;
        scales.push(scale);
        codes.extend(block.iter().map(|&v| codebook.encode(v, absmax)));
    }
    Ok((codes, scales))
}

/// Quantizes a 2-D tensor with the default linear codebook.
pub fn quantize_4bit(m: &Tensor, block_size: usize) -> Result<QuantizedMatrix> {
    quantize_with(m, block_size, Codebook::linear_symmetric())
}

pub fn quantize_with(m: &Tensor, block_size: usize, codebook: Codebook) -> Result<QuantizedMatrix> {
    let (rows, cols) = match m.shape.as_slice() {
        [r, c] => (*r, *c),
        [n] => (1, *n),
        s => return Err(Error::dim("quantize_4bit", format!("expected a matrix, got {s:?}"))),
    };
    let (codes, scales) = quantize_blocks(&m.data, block_size, &codebook)?;
    Ok(QuantizedMatrix {
        rows,
        cols,
        block_size,
        codes: pack_codes(&codes),
        scales,
        codebook,
    })
}

impl QuantizedMatrix {
    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn storage_bytes(&self) -> usize {
        storage_bytes(self.numel(), self.block_size)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.numel();
        if self.block_size == 0 {
            return Err(Error::Format("block_size 0".into()));
        }
        if self.scales.len() != num_blocks(n, self.block_size) {
            return Err(Error::Format(format!(
                "{} scales for {} blocks",
                self.scales.len(),
                num_blocks(n, self.block_size)
            )));
        }
        if self.scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Format("scales must be finite and non-negative".into()));
        }
        unpack_codes(&self.codes, n).map(|_| ())
    }

    /// Unpacked codes in element order.
    pub fn codes(&self) -> Result<Vec<u8>> {
        unpack_codes(&self.codes, self.numel())
    }

    /// Decodes into a flat row-major buffer.
    pub fn dequantize_flat(&self) -> Result<Vec<f32>> {
        self.validate()?;
        let codes = self.codes()?;
        Ok(codes
            .iter()
            .enumerate()
            .map(|(i, &c)| self.codebook.decode(c, self.scales[i / self.block_size]))
            .collect())
    }

    pub fn dequantize(&self) -> Result<Tensor> {
        Tensor::new(vec![self.rows, self.cols], self.dequantize_flat()?)
    }

    /// Payload in the checkpoint layout: packed codes then little-endian scales.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.storage_bytes());
        out.extend_from_slice(&self.codes);
        for s in &self.scales {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(rows: usize, cols: usize, block_size: usize, bytes: &[u8]) -> Result<Self> {
        let n = rows * cols;
        if block_size == 0 || bytes.len() != storage_bytes(n, block_size) {
            return Err(Error::Format(format!(
                "{} payload bytes for a {rows}x{cols} q4 tensor",
                bytes.len()
            )));
        }
        let split = packed_len(n);
        let scales = bytes[split..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let q = QuantizedMatrix {
            rows,
            cols,
            block_size,
            codes: bytes[..split].to_vec(),
            scales,
            codebook: Codebook::linear_symmetric(),
        };
        q.validate()?;
        Ok(q)
    }
}

pub fn dequantize(q: &QuantizedMatrix) -> Result<Tensor> {
    q.dequantize()
}

/// `x[m×k] · dequant(q)[k×n]`. Bitwise equal to the dequantize-then-matmul
/// reference because it is that path.
pub fn qmatmul(x: &Tensor, q: &QuantizedMatrix) -> Result<Tensor> {
    if x.shape.len() != 2 || x.shape[1] != q.rows {
        return Err(Error::dim(
            "qmatmul",
            format!("{:?} x {}x{}", x.shape, q.rows, q.cols),
        ));
    }
    matmul(x, &q.dequantize()?)
}
