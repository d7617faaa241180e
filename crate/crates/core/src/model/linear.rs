use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::lora::{LoraConfig, LoraPair};
use crate::quant::{quantize_4bit, QuantizedMatrix};
use crate::tensor::{Element, Tensor};

/// Frozen or trainable base weight of a projection, laid out `[out × in]`.
#[derive(Clone, Debug, PartialEq)]
pub enum BaseWeight {
    Dense(Tensor),
    Quantized(QuantizedMatrix),
}

/// Which projection of a block a [`Linear`] is. Used for LoRA targeting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjKind {
    QProj,
    KProj,
    VProj,
    OProj,
    GateProj,
    UpProj,
    DownProj,
}

impl ProjKind {
    pub const ALL: [ProjKind; 7] = [
        ProjKind::QProj,
        ProjKind::KProj,
        ProjKind::VProj,
        ProjKind::OProj,
        ProjKind::GateProj,
        ProjKind::UpProj,
        ProjKind::DownProj,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProjKind::QProj => "q_proj",
            ProjKind::KProj => "k_proj",
            ProjKind::VProj => "v_proj",
            ProjKind::OProj => "o_proj",
            ProjKind::GateProj => "gate_proj",
            ProjKind::UpProj => "up_proj",
            ProjKind::DownProj => "down_proj",
        }
    }
}

/// A bias-free projection `y = x·Wᵀ`, optionally with a LoRA adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub kind: ProjKind,
    pub weight: BaseWeight,
    pub lora: Option<LoraPair>,
}

impl Linear {
    pub fn new(kind: ProjKind, weight: Tensor) -> Self {
        Linear {
            kind,
            weight: BaseWeight::Dense(weight),
            lora: None,
        }
    }

    pub fn out_features(&self) -> usize {
        match &self.weight {
            BaseWeight::Dense(t) => t.shape[0],
            BaseWeight::Quantized(q) => q.rows,
        }
    }

    pub fn in_features(&self) -> usize {
        match &self.weight {
            BaseWeight::Dense(t) => t.shape[1],
            BaseWeight::Quantized(q) => q.cols,
        }
    }

    pub fn base_numel(&self) -> usize {
        self.out_features() * self.in_features()
    }

    /// Bytes held by the base weight: 4 per element when dense, the packed
    /// code and scale payload when quantized.
    pub fn base_bytes(&self) -> usize {
        match &self.weight {
            BaseWeight::Dense(t) => 4 * t.numel(),
            BaseWeight::Quantized(q) => q.storage_bytes(),
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self.weight, BaseWeight::Quantized(_))
    }

    /// Dense `f32` copy of the base weight.
    pub fn base_dense(&self) -> Result<Tensor> {
        match &self.weight {
            BaseWeight::Dense(t) => Ok(t.clone()),
            BaseWeight::Quantized(q) => q.dequantize(),
        }
    }

    pub fn quantize(&mut self, block_size: usize) -> Result<()> {
        if let BaseWeight::Dense(t) = &self.weight {
            self.weight = BaseWeight::Quantized(quantize_4bit(t, block_size)?);
        }
        Ok(())
    }

    pub fn freeze_base(&mut self, frozen: bool) {
        if let BaseWeight::Dense(t) = &mut self.weight {
            t.requires_grad = !frozen;
        }
    }

    pub(crate) fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        name: &str,
        x: Var,
        lora: Option<&LoraConfig>,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let w = match &self.weight {
            BaseWeight::Dense(t) => g.param(&format!("{name}.weight"), t)?,
            BaseWeight::Quantized(q) => g.constant_f32(vec![q.rows, q.cols], &q.dequantize_flat()?)?,
        };
        let y = g.matmul_nt(x, w)?;
        let (Some(pair), Some(cfg)) = (&self.lora, lora) else {
            return Ok(y);
        };
        let mut input = x;
        if let Some(rng) = rng.as_deref_mut() {
            if cfg.dropout > 0.0 {
                let keep = 1.0 - cfg.dropout as f64;
                let n = g.value(x).len();
                let mask: Vec<T> = (0..n)
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            T::lit(1.0 / keep)
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let m = g.constant(g.shape(x).to_vec(), mask)?;
                input = g.mul(x, m)?;
            }
        }
        let a = g.param(&format!("{name}.lora_a"), &pair.a)?;
        let b = g.param(&format!("{name}.lora_b"), &pair.b)?;
        let h = g.matmul_nt(input, a)?;
        let d = g.matmul_nt(h, b)?;
        let d = g.scale(d, T::widen(cfg.scaling()))?;
        g.add(y, d)
    }

    pub(crate) fn check_shape(&self, name: &str, out: usize, inp: usize) -> Result<()> {
        if self.out_features() != out || self.in_features() != inp {
            return Err(Error::Integrity(format!(
                "{name}: expected {out}x{inp}, found {}x{}",
                self.out_features(),
                self.in_features()
            )));
        }
        if let Some(p) = &self.lora {
            if p.a.shape.len() != 2 || p.a.shape[1] != inp || p.b.shape != [out, p.a.shape[0]] {
                return Err(Error::Integrity(format!("{name}: adapter shapes do not fit")));
            }
        }
        Ok(())
    }
}
