//! Low-rank adapters over frozen projections.
//!
//! An adapted projection computes `W·x + (alpha / r)·B·(A·x)` where `W` is
//! frozen, `A` is `r × d_in` and `B` is `d_out × r`. `B` starts at zero, so a
//! freshly attached adapter does not change the model.

use std::collections::BTreeSet;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Linear, ProjKind};
use crate::tensor::{mm, Tensor};

/// Targets that unfreeze `f32` modules outright instead of adapting them.
pub const ROUTER_TARGET: &str = "router";
pub const NORM_TARGET: &str = "norm";
pub const EMBED_TARGET: &str = "embed";
pub const HEAD_TARGET: &str = "lm_head";
pub const MODULE_TARGETS: [&str; 4] = [ROUTER_TARGET, NORM_TARGET, EMBED_TARGET, HEAD_TARGET];
pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
    pub targets: BTreeSet<String>,
    pub dropout: f32,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 16.0,
            targets: ProjKind::ALL.iter().map(|k| k.as_str().to_string()).collect(),
            dropout: 0.05,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be >= 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("LoRA alpha must be > 0".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("LoRA targets must not be empty".into()));
        }
        let known: BTreeSet<&str> = ProjKind::ALL
            .iter()
            .map(|k| k.as_str())
            .chain(MODULE_TARGETS)
            .collect();
        if let Some(bad) = self.targets.iter().find(|t| !known.contains(t.as_str())) {
            return Err(Error::Config(format!("unknown LoRA target {bad:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("LoRA dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub fn targets_kind(&self, kind: ProjKind) -> bool {
        self.targets.contains(kind.as_str())
    }

    /// Whether the module target `name` (see [`MODULE_TARGETS`]) is unfrozen.
    pub fn unfreezes(&self, name: &str) -> bool {
        self.targets.contains(name)
    }
}

/// Trainable rank-decomposition matrices for one projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    /// `r × d_in`
    pub a: Tensor,
    /// `d_out × r`
    pub b: Tensor,
}

impl LoraPair {
    pub fn init(d_out: usize, d_in: usize, rank: usize, rng: &mut impl Rng) -> Self {
        LoraPair {
            a: Tensor::randn(&[rank, d_in], INIT_STD, rng).with_grad(true),
            b: Tensor::zeros(&[d_out, rank]).with_grad(true),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.shape[0]
    }

    pub fn numel(&self) -> usize {
        self.a.numel() + self.b.numel()
    }
}

/// Adapted projection of a single vector. Passing an RNG selects training
/// mode, which applies dropout to the adapter branch input.
pub fn lora_forward(
    x: &[f32],
    linear: &Linear,
    cfg: &LoraConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<Vec<f32>> {
    let (d_out, d_in) = (linear.out_features(), linear.in_features());
    if x.len() != d_in {
        return Err(Error::dim("lora_forward", format!("input {} vs d_in {d_in}", x.len())));
    }
    let w = linear.base_dense()?;
    let mut y = mm(&w.data, x, d_out, d_in, 1);
    let Some(pair) = &linear.lora else {
        return Ok(y);
    };
    linear.check_shape("lora_forward", d_out, d_in)?;
    let r = pair.rank();
    let input: Vec<f32> = match rng {
        Some(rng) if cfg.dropout > 0.0 => {
            let keep = 1.0 - cfg.dropout;
            x.iter()
                .map(|&v| if rng.random::<f32>() < keep { v / keep } else { 0.0 })
                .collect()
        }
        _ => x.to_vec(),
    };
    let h = mm(&pair.a.data, &input, r, d_in, 1);
    let delta = mm(&pair.b.data, &h, d_out, r, 1);
    let s = cfg.scaling();
    for (yi, di) in y.iter_mut().zip(delta) {
        *yi += s * di;
    }
    Ok(y)
}

/// Folds the adapter into a dense weight: `W + (alpha / r)·B·A`.
pub fn merge_lora(linear: &Linear, cfg: &LoraConfig) -> Result<Tensor> {
    let mut w = linear.base_dense()?;
    w.requires_grad = false;
    w.grad = None;
    let Some(pair) = &linear.lora else {
        return Ok(w);
    };
    linear.check_shape("merge_lora", linear.out_features(), linear.in_features())?;
    let (d_out, d_in, r) = (linear.out_features(), linear.in_features(), pair.rank());
    let ba = mm(&pair.b.data, &pair.a.data, d_out, r, d_in);
    let s = cfg.scaling();
    for (wi, d) in w.data.iter_mut().zip(ba) {
        *wi += s * d;
    }
    Ok(w)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub trainable: usize,
    pub frozen: usize,
    pub ratio: f32,
}

impl ParameterReport {
    pub(crate) fn new(trainable: usize, frozen: usize) -> Self {
        let total = trainable + frozen;
        ParameterReport {
            trainable,
            frozen,
            ratio: if total == 0 {
                0.0
            } else {
                (trainable as f64 / total as f64) as f32
            },
        }
    }
}

/// Trainable-vs-frozen census for a single projection.
pub fn linear_parameter_report(linear: &Linear) -> ParameterReport {
    let trainable = linear.lora.as_ref().map_or(0, LoraPair::numel);
    ParameterReport::new(trainable, linear.base_numel())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (Linear, LoraConfig) {
        let mut lin = Linear::new(ProjKind::QProj, Tensor::zeros(&[2, 2]));
        lin.lora = Some(LoraPair {
            a: Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(),
            b: Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap(),
        });
        let cfg = LoraConfig {
            rank: 1,
            alpha: 1.0,
            dropout: 0.0,
            ..LoraConfig::default()
        };
        (lin, cfg)
    }

    #[test]
    fn hand_computed_rank_one_case() {
        let (lin, cfg) = toy();
        assert_eq!(lora_forward(&[3.0, 5.0], &lin, &cfg, None).unwrap(), vec![3.0, 0.0]);
        let merged = merge_lora(&lin, &cfg).unwrap();
        assert_eq!(merged.data, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn doubling_alpha_doubles_the_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let mut lin = Linear::new(ProjKind::UpProj, w);
        let mut pair = LoraPair::init(3, 4, 2, &mut rng);
        pair.b = Tensor::randn(&[3, 2], 1.0, &mut rng);
        lin.lora = Some(pair);
        let x = [0.5, -1.0, 2.0, 0.25];
        let cfg1 = LoraConfig {
            rank: 2,
            alpha: 2.0,
            dropout: 0.0,
            ..LoraConfig::default()
        };
        let cfg2 = LoraConfig { alpha: 4.0, ..cfg1.clone() };
        let base = mm(&lin.base_dense().unwrap().data, &x, 3, 4, 1);
        let y1 = lora_forward(&x, &lin, &cfg1, None).unwrap();
        let y2 = lora_forward(&x, &lin, &cfg2, None).unwrap();
        for i in 0..3 {
            assert!(((y2[i] - base[i]) - 2.0 * (y1[i] - base[i])).abs() < 1e-5);
        }
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::randn(&[5, 7], 1.0, &mut rng);
        let mut lin = Linear::new(ProjKind::KProj, w.clone());
        lin.lora = Some(LoraPair::init(5, 7, 4, &mut rng));
        let cfg = LoraConfig::default();
        let x: Vec<f32> = (0..7).map(|i| i as f32 * 0.3 - 1.0).collect();
        let plain = mm(&w.data, &x, 5, 7, 1);
        assert_eq!(lora_forward(&x, &lin, &cfg, None).unwrap(), plain);
        assert_eq!(merge_lora(&lin, &cfg).unwrap().data, w.data);
    }

    #[test]
    fn report_counts_adapter_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lin = Linear::new(ProjKind::VProj, Tensor::zeros(&[4, 6]));
        assert_eq!(linear_parameter_report(&lin).trainable, 0);
        lin.lora = Some(LoraPair::init(4, 6, 2, &mut rng));
        let r = linear_parameter_report(&lin);
        assert_eq!(r.trainable, 2 * 6 + 4 * 2);
        assert_eq!(r.frozen, 24);
    }

    #[test]
    fn config_validation() {
        assert!(LoraConfig::default().validate().is_ok());
        assert!(LoraConfig { rank: 0, ..Default::default() }.validate().is_err());
        assert!(LoraConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(LoraConfig { targets: BTreeSet::new(), ..Default::default() }.validate().is_err());
        assert!(LoraConfig { dropout: 1.0, ..Default::default() }.validate().is_err());
    }
}
