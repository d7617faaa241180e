//! Adam with both moment buffers held in blockwise 4-bit form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{pack_codes, quantize_blocks, Codebook, QuantizedMatrix, DEFAULT_BLOCK_SIZE, ZERO_CODE};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second Adam moments for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedOptimState {
    pub step: u64,
    pub m: QuantizedMatrix,
    pub v: QuantizedMatrix,
}

fn zero_state(rows: usize, cols: usize, block_size: usize) -> QuantizedMatrix {
    let n = rows * cols;
    QuantizedMatrix {
        rows,
        cols,
        block_size,
        codes: pack_codes(&vec![ZERO_CODE; n]),
        scales: vec![0.0; n.div_ceil(block_size)],
        codebook: Codebook::linear_symmetric(),
    }
}

fn requantize(values: &[f32], like: &QuantizedMatrix, keep_positive: bool) -> Result<QuantizedMatrix> {
    let (mut codes, scales) = quantize_blocks(values, like.block_size, &like.codebook)?;
    if keep_positive {
        // A second moment that rounds to zero while the first moment does not
        // turns the update into m / eps. Positive entries keep the smallest
        // positive level instead.
        for (c, &v) in codes.iter_mut().zip(values) {
            if v > 0.0 && *c == ZERO_CODE {
                *c = ZERO_CODE + 1;
            }
        }
    }
    Ok(QuantizedMatrix {
        rows: like.rows,
        cols: like.cols,
        block_size: like.block_size,
        codes: pack_codes(&codes),
        scales,
        codebook: like.codebook,
    })
}

impl QuantizedOptimState {
    pub fn new(shape: &[usize]) -> Self {
        Self::with_block_size(shape, DEFAULT_BLOCK_SIZE)
    }

    pub fn with_block_size(shape: &[usize], block_size: usize) -> Self {
        let (rows, cols) = match shape {
            [r, c] => (*r, *c),
            _ => (1, shape.iter().product()),
        };
        QuantizedOptimState {
            step: 0,
            m: zero_state(rows, cols, block_size),
            v: zero_state(rows, cols, block_size),
        }
    }

    pub fn numel(&self) -> usize {
        self.m.numel()
    }

    pub fn storage_bytes(&self) -> usize {
        self.m.storage_bytes() + self.v.storage_bytes()
    }
}

/// One Adam update on `param` in place.
///
/// Moments are dequantized, advanced with the usual bias-corrected rule, used
/// for the update at full precision, then stored back as 4-bit blocks.
pub fn adam_step_quantized(
    param: &mut [f32],
    grad: &[f32],
    state: &mut QuantizedOptimState,
    hp: &AdamParams,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.numel() {
        return Err(Error::dim(
            "adam_step_quantized",
            format!("param {} / grad {} / state {}", param.len(), grad.len(), state.numel()),
        ));
    }
    if !(hp.lr >= 0.0) || !hp.lr.is_finite() {
        return Err(Error::Config(format!("learning rate {}", hp.lr)));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let mut m = state.m.dequantize_flat()?;
    let mut v = state.v.dequantize_flat()?;
    let t = state.step + 1;
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    state.m = requantize(&m, &state.m, false)?;
    state.v = requantize(&v, &state.v, true)?;
    state.step = t;
    Ok(())
}
