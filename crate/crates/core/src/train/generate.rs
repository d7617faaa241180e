use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::top_k_indices;
use crate::model::MoeTransformer;
use crate::tokenizer::EOT;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Decode {
    Greedy,
    Temperature { tau: f32, seed: u64 },
    /// Nucleus sampling at temperature `tau` over the smallest set of tokens
    /// whose probability mass reaches `p`.
    TopP { p: f32, tau: f32, seed: u64 },
}

impl Decode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Decode::Greedy => Ok(()),
            Decode::Temperature { tau, .. } if tau > 0.0 && tau.is_finite() => Ok(()),
            Decode::TopP { p, tau, .. } if p > 0.0 && p <= 1.0 && tau > 0.0 && tau.is_finite() => Ok(()),
            _ => Err(Error::Config(format!("invalid decoding settings {self:?}"))),
        }
    }

    fn seed(&self) -> u64 {
        match *self {
            Decode::Greedy => 0,
            Decode::Temperature { seed, .. } | Decode::TopP { seed, .. } => seed,
        }
    }
}

/// Softmax of `logits / tau` in f64.
fn tempered(logits: &[f32], tau: f32) -> Vec<f64> {
    let tau = tau as f64;
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64 / tau));
    let mut p: Vec<f64> = logits.iter().map(|&x| (x as f64 / tau - max).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

fn sample(probs: &[f64], candidates: &[usize], rng: &mut impl Rng) -> usize {
    let total: f64 = candidates.iter().map(|&i| probs[i]).sum();
    let mut u = rng.random::<f64>() * total;
    for &i in candidates {
        u -= probs[i];
        if u < 0.0 {
            return i;
        }
    }
    *candidates.last().expect("at least one candidate")
}

/// Picks the next token from one row of logits.
pub fn select_token(logits: &[f32], decode: &Decode, rng: &mut impl Rng) -> u32 {
    match *decode {
        Decode::Greedy => top_k_indices(logits, 1)[0] as u32,
        Decode::Temperature { tau, .. } => {
            let p = tempered(logits, tau);
            let all: Vec<usize> = (0..p.len()).collect();
            sample(&p, &all, rng) as u32
        }
        Decode::TopP { p: top_p, tau, .. } => {
            let p = tempered(logits, tau);
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
            let mut mass = 0.0;
            let mut keep = 0;
            for &i in &order {
                mass += p[i];
                keep += 1;
                if mass >= top_p as f64 {
                    break;
                }
            }
            sample(&p, &order[..keep], rng) as u32
        }
    }
}

/// Autoregressive decoding. Stops after `max_new` tokens or at `<eot>`; the
/// returned tokens exclude `<eot>`. `on_token` sees each token as it is chosen.
pub fn generate_with(
    model: &MoeTransformer,
    prompt: &[u32],
    max_new: usize,
    decode: &Decode,
    on_token: &mut dyn FnMut(u32),
) -> Result<Vec<u32>> {
    decode.validate()?;
    let max = model.config.max_seq_len;
    if prompt.is_empty() {
        return Err(Error::Config("empty prompt".into()));
    }
    if prompt.len() + max_new > max {
        return Err(Error::Length {
            len: prompt.len() + max_new,
            max,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(decode.seed());
    let mut tokens = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let logits = model.logits(&tokens)?;
        let last = logits.row(tokens.len() - 1);
        let next = select_token(last, decode, &mut rng);
        if next == EOT {
            break;
        }
        on_token(next);
        tokens.push(next);
        out.push(next);
    }
    Ok(out)
}

pub fn generate(model: &MoeTransformer, prompt: &[u32], max_new: usize, decode: &Decode) -> Result<Vec<u32>> {
    generate_with(model, prompt, max_new, decode, &mut |_| {})
}
