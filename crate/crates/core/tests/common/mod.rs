//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use moetune::data::{render_tokens, ChatSample, Source, TokenizedSample};
use moetune::graph::{Activation, Graph, Var};
use moetune::model::{ForwardCtx, MoeLayer};
use moetune::{ModelConfig, MoeTransformer, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const GRAD_REL_TOL: f64 = 1e-3;
pub const GRAD_INSTANCES: u64 = 20;

/// Resolves from either workspace crate, since this module is shared.
fn tests_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests")
}

pub fn fixtures() -> PathBuf {
    tests_dir().join("fixtures")
}

pub fn golden() -> PathBuf {
    tests_dir().join("golden")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect()
}

pub fn normal_f32(rng: &mut impl Rng, n: usize, std: f32) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal) * std).collect()
}

/// Two layers, four experts with top-2 routing, 16-wide.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        n_experts: 4,
        top_k: 2,
        max_seq_len: 64,
        ..ModelConfig::default()
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let denom = norm(analytic).max(norm(numeric));
    if denom == 0.0 {
        0.0
    } else {
        norm(&diff) / denom
    }
}

/// An f64 leaf to differentiate with respect to.
pub struct Input {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Input {
    pub fn normal(rng: &mut impl Rng, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Input {
            shape: shape.to_vec(),
            data: normal_vec(rng, n, 1.0),
        }
    }
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// `sum(build(inputs) ⊙ r)` for a fixed random `r`, so every output element
/// contributes to the checked gradient.
fn projected_loss(inputs: &[Input], r: &[f64], build: &Build) -> Result<(Graph<f64>, Var, Vec<Var>)> {
    let mut g = Graph::<f64>::new();
    let vars = inputs
        .iter()
        .map(|i| g.leaf(i.shape.clone(), i.data.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    let shape = g.shape(out).to_vec();
    let rv = g.constant(shape, r[..g.value(out).len()].to_vec())?;
    let prod = g.mul(out, rv)?;
    let loss = g.sum(prod)?;
    Ok((g, loss, vars))
}

/// Central-difference check of every input of `build`. Returns the largest
/// relative error over the inputs.
pub fn gradcheck(seed: u64, inputs: Vec<Input>, build: &Build) -> f64 {
    let mut r_rng = rng(seed ^ 0x5eed);
    let r = normal_vec(&mut r_rng, 1 << 16, 1.0);
    let (g, loss, vars) = projected_loss(&inputs, &r, build).expect("forward");
    let grads = g.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(v, i)| grads.get(*v).map_or_else(|| vec![0.0; i.data.len()], <[f64]>::to_vec))
        .collect();
    let h = 1e-6;
    let mut inputs = inputs;
    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        let mut numeric = vec![0.0; inputs[k].data.len()];
        for j in 0..numeric.len() {
            let orig = inputs[k].data[j];
            inputs[k].data[j] = orig + h;
            let (g1, l1, _) = projected_loss(&inputs, &r, build).expect("forward");
            inputs[k].data[j] = orig - h;
            let (g2, l2, _) = projected_loss(&inputs, &r, build).expect("forward");
            inputs[k].data[j] = orig;
            numeric[j] = (g1.value(l1)[0] - g2.value(l2)[0]) / (2.0 * h);
        }
        worst = worst.max(rel_error(&analytic[k], &numeric));
    }
    worst
}

/// Masked next-token loss of `model` on one sequence, computed in f64.
pub fn model_loss_f64(model: &MoeTransformer, tokens: &[u32], mask: &[u8]) -> f64 {
    let mut g = Graph::<f64>::new();
    let n = tokens.len() - 1;
    let logits = model
        .forward(&mut g, &tokens[..n], &mut ForwardCtx::eval(n))
        .expect("forward");
    let loss = g
        .masked_cross_entropy(logits, &tokens[1..], &mask[1..])
        .expect("loss");
    g.value(loss)[0]
}

/// Checks the end-to-end loss gradient of `model` on `n_coords` random
/// parameter coordinates. Parameters are stored in f32, so each probe uses
/// the perturbation actually representable at that coordinate.
pub fn model_gradcheck(model: &MoeTransformer, tokens: &[u32], mask: &[u8], seed: u64, n_coords: usize) -> f64 {
    let mut g = Graph::<f64>::new();
    let n = tokens.len() - 1;
    let logits = model.forward(&mut g, &tokens[..n], &mut ForwardCtx::eval(n)).unwrap();
    let loss = g.masked_cross_entropy(logits, &tokens[1..], &mask[1..]).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic = g.param_grads(&grads);

    let mut names: Vec<(String, usize)> = Vec::new();
    model.visit_tensors(&mut |name, t| {
        if t.requires_grad {
            names.push((name.to_string(), t.numel()));
        }
    });
    let mut r = rng(seed);
    let h = 2f32.powi(-12);
    let mut a = Vec::with_capacity(n_coords);
    let mut num = Vec::with_capacity(n_coords);
    let mut probe = model.clone();
    for _ in 0..n_coords {
        let (name, len) = names[r.random_range(0..names.len())].clone();
        let idx = r.random_range(0..len);
        let mut orig = 0.0f32;
        probe.visit_tensors_mut(&mut |nm, t| {
            if nm == name {
                orig = t.data[idx];
            }
        });
        let set = |m: &mut MoeTransformer, v: f32| {
            m.visit_tensors_mut(&mut |nm, t| {
                if nm == name {
                    t.data[idx] = v;
                }
            })
        };
        let (up, down) = (orig + h, orig - h);
        set(&mut probe, up);
        let lu = model_loss_f64(&probe, tokens, mask);
        set(&mut probe, down);
        let ld = model_loss_f64(&probe, tokens, mask);
        set(&mut probe, orig);
        num.push((lu - ld) / (up as f64 - down as f64));
        a.push(analytic.get(&name).map_or(0.0, |g| g[idx] as f64));
    }
    rel_error(&a, &num)
}

/// Dense-dispatch reference: every expert runs on every token and the
/// outputs are mixed with the router's top-k softmax weights, in f64.
pub fn dense_moe_oracle(layer: &MoeLayer, hidden: &Tensor, act: Activation) -> Vec<f64> {
    let d = layer.d_model();
    let e = layer.n_experts();
    let mut out = Vec::with_capacity(hidden.data.len());
    for row in hidden.data.chunks(d) {
        let logits: Vec<f64> = (0..e)
            .map(|j| (0..d).map(|i| row[i] as f64 * layer.router.data[i * e + j] as f64).sum())
            .collect();
        let mut order: Vec<usize> = (0..e).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        let sel = &order[..layer.top_k];
        let max = sel.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = sel.iter().map(|&i| (logits[i] - max).exp()).sum();
        let mut acc = vec![0.0f64; d];
        for (j, expert) in layer.experts.iter().enumerate() {
            let y = ffn_f64(expert, row, act);
            let w = if sel.contains(&j) { (logits[j] - max).exp() / z } else { 0.0 };
            for (a, v) in acc.iter_mut().zip(y) {
                *a += w * v;
            }
        }
        out.extend(acc);
    }
    out
}

fn linear_f64(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let (o, i) = (w.shape[0], w.shape[1]);
    (0..o)
        .map(|r| (0..i).map(|c| w.data[r * i + c] as f64 * x[c]).sum())
        .collect()
}

fn act_f64(act: Activation, x: f64) -> f64 {
    match act {
        Activation::Silu => x / (1.0 + (-x).exp()),
        Activation::Gelu => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
        }
    }
}

pub fn ffn_f64(expert: &moetune::model::Expert, x: &[f32], act: Activation) -> Vec<f64> {
    let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let dense = |l: &moetune::model::Linear| l.base_dense().expect("dense weight");
    let g = linear_f64(&dense(&expert.gate), &x);
    let u = linear_f64(&dense(&expert.up), &x);
    let h: Vec<f64> = g.iter().zip(&u).map(|(&a, &b)| act_f64(act, a) * b).collect();
    linear_f64(&dense(&expert.down), &h)
}

/// Plain SwiGLU feed-forward in f32 with sequential dot products.
pub fn plain_ffn_f32(expert: &moetune::model::Expert, x: &[f32]) -> Vec<f32> {
    let lin = |w: &Tensor, x: &[f32]| -> Vec<f32> {
        let (o, i) = (w.shape[0], w.shape[1]);
        (0..o)
            .map(|r| {
                let mut acc = 0.0f32;
                for c in 0..i {
                    acc += x[c] * w.data[r * i + c];
                }
                acc
            })
            .collect()
    };
    let dense = |l: &moetune::model::Linear| l.base_dense().expect("dense weight");
    let g = lin(&dense(&expert.gate), x);
    let u = lin(&dense(&expert.up), x);
    let h: Vec<f32> = g.iter().zip(&u).map(|(&a, &b)| a / (1.0 + (-a).exp()) * b).collect();
    lin(&dense(&expert.down), &h)
}

/// `n` question/answer pairs: "q{i}" answered by "answer {7i}".
pub fn toy_samples(n: usize) -> Vec<ChatSample> {
    (0..n)
        .map(|i| ChatSample::single(Source::AlpacaZh, format!("q{i}"), format!("answer {}", 7 * i)))
        .collect()
}

pub fn toy_corpus(n: usize) -> Vec<TokenizedSample> {
    toy_samples(n).iter().map(render_tokens).collect()
}

/// Index of the nearest level `(c − 7)·scale` to `x`, computed exhaustively.
pub fn nearest_code(x: f32, scale: f32) -> (u8, f64) {
    let mut best = (7u8, f64::INFINITY);
    for c in 0..15u8 {
        let d = ((c as f32 - 7.0) * scale - x).abs() as f64;
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Model used for the memorization runs.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        d_ff: 64,
        ..tiny_config()
    }
}

/// Adapters on every projection with the router, norms, embedding and head
/// unfrozen, no dropout.
pub fn full_targets_lora() -> moetune::lora::LoraConfig {
    let mut cfg = moetune::lora::LoraConfig {
        dropout: 0.0,
        ..Default::default()
    };
    cfg.targets.extend(moetune::lora::MODULE_TARGETS.iter().map(|t| t.to_string()));
    cfg
}

/// Quantized toy model with adapters attached, ready to train.
pub fn toy_trainable(seed: u64) -> MoeTransformer {
    let mut m = MoeTransformer::new(toy_model_config(), seed).unwrap();
    m.quantize_base(64).unwrap();
    m.attach_lora(full_targets_lora(), seed).unwrap();
    m
}

/// Settings under which 32 toy samples are memorized within 200 steps.
pub fn memorize_config() -> moetune::train::TrainConfig {
    moetune::train::TrainConfig {
        epochs: 50,
        lr: 1e-2,
        batch_size: 8,
        warmup_steps: 10,
        schedule: moetune::train::Schedule::Cosine,
        max_steps: Some(200),
        ..Default::default()
    }
}
