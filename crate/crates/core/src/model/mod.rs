//! Decoder-only transformer whose feed-forward blocks are sparse MoE layers.

mod linear;
mod moe;

pub use linear::{BaseWeight, Linear, ProjKind};
pub use moe::{moe_forward, route_logits, route_top_k, Expert, MoeLayer, RoutingDecision};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Var};
use crate::lora::{LoraConfig, LoraPair, ParameterReport, EMBED_TARGET, HEAD_TARGET, NORM_TARGET, ROUTER_TARGET};
use crate::tensor::{Element, Tensor};
use crate::tokenizer::VOCAB_SIZE;

/// Standard deviation `1/sqrt(fan_in)` used for projection, router and head
/// weights. Embeddings draw from N(0, 1).
pub fn fan_in_std(fan_in: usize) -> f32 {
    1.0 / (fan_in as f32).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Hidden width of each expert.
    pub d_ff: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub norm_eps: f32,
    /// SiLU pairs with RMSNorm, GeLU with LayerNorm.
    pub activation: Activation,
    pub rope_theta: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 256,
            n_experts: 8,
            top_k: 2,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 512,
            norm_eps: 1e-5,
            activation: Activation::Silu,
            rope_theta: 10_000.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.vocab_size == 0 {
            return fail("layer count, widths and vocabulary must be positive");
        }
        if self.n_experts == 0 || self.top_k == 0 || self.top_k > self.n_experts {
            return fail("need 1 <= top_k <= n_experts");
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail("d_model must be divisible by n_heads");
        }
        if !(self.d_model / self.n_heads).is_multiple_of(2) {
            return fail("head width must be even for rotary embeddings");
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be positive");
        }
        if !(self.norm_eps > 0.0) || !(self.rope_theta > 0.0) {
            return fail("norm_eps and rope_theta must be positive");
        }
        Ok(())
    }
}

/// RMSNorm (weight only) or LayerNorm (weight and bias).
#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Norm {
    fn new(d: usize, act: Activation) -> Self {
        Norm {
            weight: Tensor::full(&[d], 1.0).with_grad(true),
            bias: match act {
                Activation::Silu => None,
                Activation::Gelu => Some(Tensor::zeros(&[d]).with_grad(true)),
            },
        }
    }

    fn forward<T: Element>(&self, g: &mut Graph<T>, name: &str, x: Var, eps: f32) -> Result<Var> {
        let w = g.param(&format!("{name}.weight"), &self.weight)?;
        match &self.bias {
            None => g.rms_norm(x, w, eps),
            Some(b) => {
                let b = g.param(&format!("{name}.bias"), b)?;
                g.layer_norm(x, w, b, eps)
            }
        }
    }

    fn numel(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }

    fn set_trainable(&mut self, on: bool) {
        self.weight.requires_grad = on;
        if let Some(b) = &mut self.bias {
            b.requires_grad = on;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub attn_norm: Norm,
    pub attn: Attention,
    pub ffn_norm: Norm,
    pub moe: MoeLayer,
}

/// Per-call forward settings.
pub struct ForwardCtx<'a> {
    /// Rows per sequence; the token list is `batch × seq_len` flattened.
    pub seq_len: usize,
    /// Present in training mode; drives adapter dropout.
    pub rng: Option<&'a mut dyn RngCore>,
}

impl ForwardCtx<'_> {
    pub fn eval(seq_len: usize) -> Self {
        ForwardCtx { seq_len, rng: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeTransformer {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: Norm,
    /// `vocab × d_model`
    pub lm_head: Tensor,
    pub lora: Option<LoraConfig>,
}

impl MoeTransformer {
    /// Random initialization; every tensor starts trainable.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let act = config.activation;
        let embed = Tensor::randn(&[config.vocab_size, d], 1.0, &mut rng).with_grad(true);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let attn_norm = Norm::new(d, act);
            let mut proj = |kind| Linear::new(kind, Tensor::randn(&[d, d], fan_in_std(d), &mut rng).with_grad(true));
            let attn = Attention {
                q: proj(ProjKind::QProj),
                k: proj(ProjKind::KProj),
                v: proj(ProjKind::VProj),
                o: proj(ProjKind::OProj),
            };
            let ffn_norm = Norm::new(d, act);
            let moe = MoeLayer::init(d, config.d_ff, config.n_experts, config.top_k, &mut rng);
            layers.push(DecoderLayer {
                attn_norm,
                attn,
                ffn_norm,
                moe,
            });
        }
        let final_norm = Norm::new(d, act);
        let lm_head = Tensor::randn(&[config.vocab_size, d], fan_in_std(d), &mut rng).with_grad(true);
        Ok(MoeTransformer {
            config,
            embed,
            layers,
            final_norm,
            lm_head,
            lora: None,
        })
    }

    /// Records the forward pass and returns logits `[tokens × vocab]`.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, tokens: &[u32], ctx: &mut ForwardCtx) -> Result<Var> {
        let cfg = &self.config;
        let seq_len = ctx.seq_len;
        if seq_len == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(seq_len) {
            return Err(Error::dim(
                "decoder_forward",
                format!("{} tokens with seq_len {seq_len}", tokens.len()),
            ));
        }
        if seq_len > cfg.max_seq_len {
            return Err(Error::Length {
                len: seq_len,
                max: cfg.max_seq_len,
            });
        }
        let lora = self.lora.as_ref();
        let rng = &mut ctx.rng;
        let embed = g.param("embed", &self.embed)?;
        let mut x = g.embedding(embed, tokens)?;
        for (li, layer) in self.layers.iter().enumerate() {
            let p = format!("layers.{li}");
            let h = layer.attn_norm.forward(g, &format!("{p}.attn_norm"), x, cfg.norm_eps)?;
            let a = &layer.attn;
            let q = a.q.forward(g, &format!("{p}.attn.q_proj"), h, lora, rng)?;
            let k = a.k.forward(g, &format!("{p}.attn.k_proj"), h, lora, rng)?;
            let v = a.v.forward(g, &format!("{p}.attn.v_proj"), h, lora, rng)?;
            let q = g.rope(q, cfg.n_heads, seq_len, cfg.rope_theta)?;
            let k = g.rope(k, cfg.n_heads, seq_len, cfg.rope_theta)?;
            let att = g.causal_attention(q, k, v, cfg.n_heads, seq_len)?;
            let o = a.o.forward(g, &format!("{p}.attn.o_proj"), att, lora, rng)?;
            x = g.add(x, o)?;
            let h = layer.ffn_norm.forward(g, &format!("{p}.ffn_norm"), x, cfg.norm_eps)?;
            let m = layer.moe.forward(g, &format!("{p}.moe"), h, cfg.activation, lora, rng)?;
            x = g.add(x, m)?;
        }
        let x = self.final_norm.forward(g, "final_norm", x, cfg.norm_eps)?;
        let head = g.param("lm_head", &self.lm_head)?;
        g.matmul_nt(x, head)
    }

    /// Eval-mode logits for one sequence.
    pub fn logits(&self, tokens: &[u32]) -> Result<Tensor> {
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Length {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        let mut g = Graph::<f32>::new();
        let out = self.forward(&mut g, tokens, &mut ForwardCtx::eval(tokens.len()))?;
        Ok(g.tensor(out))
    }

    pub fn visit_linears(&self, f: &mut dyn FnMut(&str, &Linear)) {
        for (li, layer) in self.layers.iter().enumerate() {
            let a = &layer.attn;
            for lin in [&a.q, &a.k, &a.v, &a.o] {
                f(&format!("layers.{li}.attn.{}", lin.kind.as_str()), lin);
            }
            for (ei, e) in layer.moe.experts.iter().enumerate() {
                for lin in e.linears() {
                    f(&format!("layers.{li}.moe.experts.{ei}.{}", lin.kind.as_str()), lin);
                }
            }
        }
    }

    pub fn visit_linears_mut(&mut self, f: &mut dyn FnMut(&str, &mut Linear)) {
        for (li, layer) in self.layers.iter_mut().enumerate() {
            let a = &mut layer.attn;
            for lin in [&mut a.q, &mut a.k, &mut a.v, &mut a.o] {
                let name = format!("layers.{li}.attn.{}", lin.kind.as_str());
                f(&name, lin);
            }
            for (ei, e) in layer.moe.experts.iter_mut().enumerate() {
                for lin in e.linears_mut() {
                    let name = format!("layers.{li}.moe.experts.{ei}.{}", lin.kind.as_str());
                    f(&name, lin);
                }
            }
        }
    }

    /// Every `f32` tensor in a fixed order, including dense projection
    /// weights and adapter matrices, under the names the graph uses.
    pub fn visit_tensors(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("embed", &self.embed);
        for (li, layer) in self.layers.iter().enumerate() {
            let p = format!("layers.{li}");
            visit_norm(&layer.attn_norm, &format!("{p}.attn_norm"), f);
            let a = &layer.attn;
            for lin in [&a.q, &a.k, &a.v, &a.o] {
                visit_linear(lin, &format!("{p}.attn.{}", lin.kind.as_str()), f);
            }
            visit_norm(&layer.ffn_norm, &format!("{p}.ffn_norm"), f);
            f(&format!("{p}.moe.router"), &layer.moe.router);
            for (ei, e) in layer.moe.experts.iter().enumerate() {
                for lin in e.linears() {
                    visit_linear(lin, &format!("{p}.moe.experts.{ei}.{}", lin.kind.as_str()), f);
                }
            }
        }
        visit_norm(&self.final_norm, "final_norm", f);
        f("lm_head", &self.lm_head);
    }

    pub fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("embed", &mut self.embed);
        for (li, layer) in self.layers.iter_mut().enumerate() {
            let p = format!("layers.{li}");
            visit_norm_mut(&mut layer.attn_norm, &format!("{p}.attn_norm"), f);
            let a = &mut layer.attn;
            for lin in [&mut a.q, &mut a.k, &mut a.v, &mut a.o] {
                let name = format!("{p}.attn.{}", lin.kind.as_str());
                visit_linear_mut(lin, &name, f);
            }
            visit_norm_mut(&mut layer.ffn_norm, &format!("{p}.ffn_norm"), f);
            f(&format!("{p}.moe.router"), &mut layer.moe.router);
            for (ei, e) in layer.moe.experts.iter_mut().enumerate() {
                for lin in e.linears_mut() {
                    let name = format!("{p}.moe.experts.{ei}.{}", lin.kind.as_str());
                    visit_linear_mut(lin, &name, f);
                }
            }
        }
        visit_norm_mut(&mut self.final_norm, "final_norm", f);
        f("lm_head", &mut self.lm_head);
    }

    /// Sets `requires_grad` on every tensor.
    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.visit_tensors_mut(&mut |_, t| t.requires_grad = trainable);
    }

    /// Names and element counts of tensors that currently require grad.
    pub fn trainable_tensors(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit_tensors(&mut |name, t| {
            if t.requires_grad {
                out.push((name.to_string(), t.numel()));
            }
        });
        out
    }

    pub fn zero_grad(&mut self) {
        self.visit_tensors_mut(&mut |_, t| t.grad = None);
    }

    /// Base parameter count (adapters excluded) and the share a single token
    /// touches: everything outside the experts plus `top_k / n_experts` of
    /// the expert weights.
    pub fn count_active_params(&self) -> (usize, usize) {
        let mut total = self.embed.numel() + self.lm_head.numel() + self.final_norm.numel();
        let mut active = total;
        for layer in &self.layers {
            let a = &layer.attn;
            let dense = layer.attn_norm.numel()
                + layer.ffn_norm.numel()
                + [&a.q, &a.k, &a.v, &a.o].iter().map(|l| l.base_numel()).sum::<usize>()
                + layer.moe.router.numel();
            let experts = layer.moe.expert_params();
            let per_expert = experts / layer.moe.n_experts();
            total += dense + experts;
            active += dense + per_expert * layer.moe.top_k;
        }
        (total, active)
    }

    /// Freezes the model, attaches a fresh adapter to every targeted
    /// projection and unfreezes any module targets. `A` draws from
    /// N(0, 0.02²); `B` is zero.
    pub fn attach_lora(&mut self, cfg: LoraConfig, seed: u64) -> Result<()> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.set_all_trainable(false);
        let rank = cfg.rank;
        self.visit_linears_mut(&mut |_, lin| {
            if cfg.targets_kind(lin.kind) {
                lin.lora = Some(LoraPair::init(lin.out_features(), lin.in_features(), rank, &mut rng));
            } else {
                lin.lora = None;
            }
        });
        let router = cfg.unfreezes(ROUTER_TARGET);
        let norms = cfg.unfreezes(NORM_TARGET);
        self.embed.requires_grad = cfg.unfreezes(EMBED_TARGET);
        self.lm_head.requires_grad = cfg.unfreezes(HEAD_TARGET);
        for layer in &mut self.layers {
            layer.moe.router.requires_grad = router;
            layer.attn_norm.set_trainable(norms);
            layer.ffn_norm.set_trainable(norms);
        }
        self.final_norm.set_trainable(norms);
        self.lora = Some(cfg);
        Ok(())
    }

    /// Folds every adapter into its base weight, leaving dense frozen weights.
    pub fn merge_adapters(&mut self) -> Result<()> {
        let Some(cfg) = self.lora.clone() else {
            return Ok(());
        };
        let mut err = None;
        self.visit_linears_mut(&mut |_, lin| {
            if err.is_some() || lin.lora.is_none() {
                return;
            }
            match crate::lora::merge_lora(lin, &cfg) {
                Ok(w) => {
                    lin.weight = BaseWeight::Dense(w);
                    lin.lora = None;
                }
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        self.lora = None;
        Ok(())
    }

    /// Replaces every dense projection base with its 4-bit form. Embeddings,
    /// norms, router, head and adapters stay `f32`.
    pub fn quantize_base(&mut self, block_size: usize) -> Result<()> {
        let mut err = None;
        self.visit_linears_mut(&mut |_, lin| {
            if err.is_none() {
                if let Err(e) = lin.quantize(block_size) {
                    err = Some(e);
                }
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Bytes held by projection base weights.
    pub fn projection_bytes(&self) -> usize {
        let mut total = 0;
        self.visit_linears(&mut |_, lin| total += lin.base_bytes());
        total
    }

    /// Trainable elements (adapters plus any unfrozen base tensors) against
    /// frozen base elements.
    pub fn parameter_report(&self) -> ParameterReport {
        let (total, _) = self.count_active_params();
        let mut adapters = 0;
        self.visit_linears(&mut |_, lin| adapters += lin.lora.as_ref().map_or(0, LoraPair::numel));
        let mut trainable = 0;
        self.visit_tensors(&mut |_, t| {
            if t.requires_grad {
                trainable += t.numel();
            }
        });
        let base_trainable = trainable.saturating_sub(adapters);
        ParameterReport::new(trainable, total - base_trainable)
    }

    /// Checks every tensor against the shapes `config` implies.
    pub fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let expect = |name: &str, t: &Tensor, shape: &[usize]| -> Result<()> {
            if t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Integrity(format!(
                    "{name}: expected {shape:?}, found {:?}",
                    t.shape
                )));
            }
            Ok(())
        };
        let d = c.d_model;
        expect("embed", &self.embed, &[c.vocab_size, d])?;
        expect("lm_head", &self.lm_head, &[c.vocab_size, d])?;
        if self.layers.len() != c.n_layers {
            return Err(Error::Integrity(format!(
                "{} layers for n_layers {}",
                self.layers.len(),
                c.n_layers
            )));
        }
        let norm_ok = |name: &str, n: &Norm| -> Result<()> {
            expect(name, &n.weight, &[d])?;
            match (&n.bias, c.activation) {
                (None, Activation::Silu) => Ok(()),
                (Some(b), Activation::Gelu) => expect(name, b, &[d]),
                _ => Err(Error::Integrity(format!("{name}: norm kind does not match activation"))),
            }
        };
        norm_ok("final_norm", &self.final_norm)?;
        for (li, layer) in self.layers.iter().enumerate() {
            norm_ok("attn_norm", &layer.attn_norm)?;
            norm_ok("ffn_norm", &layer.ffn_norm)?;
            let a = &layer.attn;
            for lin in [&a.q, &a.k, &a.v, &a.o] {
                lin.check_shape(&format!("layers.{li}.attn.{}", lin.kind.as_str()), d, d)?;
            }
            expect("router", &layer.moe.router, &[d, c.n_experts])?;
            if layer.moe.n_experts() != c.n_experts || layer.moe.top_k != c.top_k {
                return Err(Error::Integrity(format!("layer {li}: expert count or top_k mismatch")));
            }
            for e in &layer.moe.experts {
                e.gate.check_shape("gate_proj", c.d_ff, d)?;
                e.up.check_shape("up_proj", c.d_ff, d)?;
                e.down.check_shape("down_proj", d, c.d_ff)?;
            }
        }
        Ok(())
    }
}

fn visit_norm(n: &Norm, name: &str, f: &mut dyn FnMut(&str, &Tensor)) {
    f(&format!("{name}.weight"), &n.weight);
    if let Some(b) = &n.bias {
        f(&format!("{name}.bias"), b);
    }
}

fn visit_norm_mut(n: &mut Norm, name: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
    f(&format!("{name}.weight"), &mut n.weight);
    if let Some(b) = &mut n.bias {
        f(&format!("{name}.bias"), b);
    }
}

fn visit_linear(lin: &Linear, name: &str, f: &mut dyn FnMut(&str, &Tensor)) {
    if let BaseWeight::Dense(t) = &lin.weight {
        f(&format!("{name}.weight"), t);
    }
    if let Some(p) = &lin.lora {
        f(&format!("{name}.lora_a"), &p.a);
        f(&format!("{name}.lora_b"), &p.b);
    }
}

fn visit_linear_mut(lin: &mut Linear, name: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
    if let BaseWeight::Dense(t) = &mut lin.weight {
        f(&format!("{name}.weight"), t);
    }
    if let Some(p) = &mut lin.lora {
        f(&format!("{name}.lora_a"), &mut p.a);
        f(&format!("{name}.lora_b"), &mut p.b);
    }
}

/// Eval-mode logits `[T × vocab]` for `token_ids`.
pub fn decoder_forward(token_ids: &[u32], model: &MoeTransformer) -> Result<Tensor> {
    model.logits(token_ids)
}
