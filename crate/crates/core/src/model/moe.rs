//! Sparse mixture-of-experts feed-forward block with top-k routing.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::graph::{top_k_indices, Activation, Graph, Var};
use crate::lora::LoraConfig;
use crate::model::fan_in_std;
use crate::model::linear::{Linear, ProjKind};
use crate::tensor::{mm, softmax_in_place, Element, Tensor};

/// Gated feed-forward expert: `down(act(gate(x)) * up(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    pub gate: Linear,
    pub up: Linear,
    pub down: Linear,
}

impl Expert {
    /// Weights drawn from N(0, 1/fan_in).
    pub fn init(d_model: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        let (s_in, s_ff) = (fan_in_std(d_model), fan_in_std(d_ff));
        Expert {
            gate: Linear::new(ProjKind::GateProj, Tensor::randn(&[d_ff, d_model], s_in, rng).with_grad(true)),
            up: Linear::new(ProjKind::UpProj, Tensor::randn(&[d_ff, d_model], s_in, rng).with_grad(true)),
            down: Linear::new(ProjKind::DownProj, Tensor::randn(&[d_model, d_ff], s_ff, rng).with_grad(true)),
        }
    }

    pub fn linears(&self) -> [&Linear; 3] {
        [&self.gate, &self.up, &self.down]
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 3] {
        [&mut self.gate, &mut self.up, &mut self.down]
    }

    pub(crate) fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        prefix: &str,
        x: Var,
        act: Activation,
        lora: Option<&LoraConfig>,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let gate = self.gate.forward(g, &format!("{prefix}.gate_proj"), x, lora, rng)?;
        let up = self.up.forward(g, &format!("{prefix}.up_proj"), x, lora, rng)?;
        let a = g.activation(gate, act)?;
        let h = g.mul(a, up)?;
        self.down.forward(g, &format!("{prefix}.down_proj"), h, lora, rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer {
    /// `d_model × n_experts`; logits are `hiddenᵀ · router`.
    pub router: Tensor,
    pub experts: Vec<Expert>,
    pub top_k: usize,
}

/// Experts chosen for one token and their combination weights.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub expert_ids: Vec<usize>,
    pub gate_weights: Vec<f32>,
}

/// Picks the `top_k` highest logits (ties to the lower index) and takes a
/// softmax over just those.
pub fn route_logits(logits: &[f32], top_k: usize) -> Result<RoutingDecision> {
    if top_k == 0 || top_k > logits.len() {
        return Err(Error::Config(format!(
            "top_k {top_k} with {} experts",
            logits.len()
        )));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("router logits".into()));
    }
    let expert_ids = top_k_indices(logits, top_k);
    let mut gate_weights: Vec<f32> = expert_ids.iter().map(|&i| logits[i]).collect();
    softmax_in_place(&mut gate_weights);
    Ok(RoutingDecision {
        expert_ids,
        gate_weights,
    })
}

impl MoeLayer {
    pub fn init(
        d_model: usize,
        d_ff: usize,
        n_experts: usize,
        top_k: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let router = Tensor::randn(&[d_model, n_experts], fan_in_std(d_model), rng).with_grad(true);
        let experts = (0..n_experts).map(|_| Expert::init(d_model, d_ff, rng)).collect();
        MoeLayer {
            router,
            experts,
            top_k,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn d_model(&self) -> usize {
        self.router.shape[0]
    }

    pub fn router_logits(&self, hidden: &[f32]) -> Result<Vec<f32>> {
        let d = self.d_model();
        if hidden.len() != d {
            return Err(Error::dim("router", format!("hidden {} vs d_model {d}", hidden.len())));
        }
        Ok(mm(hidden, &self.router.data, 1, d, self.n_experts()))
    }

    pub fn expert_params(&self) -> usize {
        self.experts
            .iter()
            .flat_map(|e| e.linears())
            .map(Linear::base_numel)
            .sum()
    }

    /// Records the block on `g`. Each token runs only through its selected
    /// experts; their outputs are summed with the gate weights.
    pub(crate) fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        prefix: &str,
        h: Var,
        act: Activation,
        lora: Option<&LoraConfig>,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let n_tokens = g.shape(h)[0];
        let d = g.shape(h)[1];
        let e = self.n_experts();
        let router = g.param(&format!("{prefix}.router"), &self.router)?;
        let logits = g.matmul(h, router)?;
        let gates = g.top_k_gate(logits, self.top_k)?;

        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); e];
        {
            let lv = g.value(logits);
            for t in 0..n_tokens {
                for i in top_k_indices(&lv[t * e..(t + 1) * e], self.top_k) {
                    assigned[i].push(t);
                }
            }
        }
        let mut parts = Vec::new();
        for (i, rows) in assigned.into_iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let xe = g.gather_rows(h, &rows)?;
            let ye = self.experts[i].forward(g, &format!("{prefix}.experts.{i}"), xe, act, lora, rng)?;
            let ge = g.gather_col(gates, &rows, i)?;
            let weighted = g.mul_col(ye, ge)?;
            parts.push((rows, weighted));
        }
        g.scatter_rows(n_tokens, d, parts)
    }
}

/// Routing for a single hidden vector through `layer`'s router.
pub fn route_top_k(hidden: &[f32], layer: &MoeLayer, top_k: usize) -> Result<RoutingDecision> {
    if top_k > layer.n_experts() {
        return Err(Error::Config(format!(
            "top_k {top_k} exceeds {} experts",
            layer.n_experts()
        )));
    }
    if hidden.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("hidden state".into()));
    }
    route_logits(&layer.router_logits(hidden)?, top_k)
}

/// Runs `layer` on `hidden_states[T×d_model]` outside of training.
pub fn moe_forward(hidden_states: &Tensor, layer: &MoeLayer, act: Activation) -> Result<Tensor> {
    if hidden_states.shape.len() != 2 || hidden_states.shape[1] != layer.d_model() || hidden_states.shape[0] == 0 {
        return Err(Error::dim(
            "moe_forward",
            format!("{:?} with d_model {}", hidden_states.shape, layer.d_model()),
        ));
    }
    let mut g = Graph::<f32>::new();
    let h = g.constant_f32(hidden_states.shape.clone(), &hidden_states.data)?;
    let out = layer.forward(&mut g, "moe", h, act, None, &mut None)?;
    Ok(g.tensor(out))
}
