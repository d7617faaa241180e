//! Central finite differences against the reverse pass, in f64.

mod common;

use common::{gradcheck, rng, tiny_config, Input, GRAD_INSTANCES, GRAD_REL_TOL};
use moetune::data::render_tokens;
use moetune::graph::{Activation, Graph, Var};
use moetune::lora::LoraConfig;
use moetune::{MoeTransformer, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn check(
    op: &str,
    make: impl Fn(&mut ChaCha8Rng) -> Vec<Input>,
    build: impl Fn(&mut Graph<f64>, &[Var], &mut ChaCha8Rng) -> Result<Var>,
) {
    for seed in 0..GRAD_INSTANCES {
        let mut r = rng(seed * 7919 + op.len() as u64);
        let inputs = make(&mut r);
        let aux_seed: u64 = r.random();
        let err = gradcheck(seed, inputs, &|g, v| build(g, v, &mut rng(aux_seed)));
        assert!(err < GRAD_REL_TOL, "{op} seed {seed}: relative error {err:e}");
    }
}

fn shapes(r: &mut ChaCha8Rng, shapes: &[&[usize]]) -> Vec<Input> {
    shapes.iter().map(|s| Input::normal(r, s)).collect()
}

#[cfg_attr(not(acceptance), test)]
pub fn matmul() {
    check("matmul", |r| shapes(r, &[&[3, 4], &[4, 5]]), |g, v, _| g.matmul(v[0], v[1]));
}

#[cfg_attr(not(acceptance), test)]
pub fn matmul_nt() {
    check("matmul_nt", |r| shapes(r, &[&[3, 4], &[5, 4]]), |g, v, _| g.matmul_nt(v[0], v[1]));
}

#[cfg_attr(not(acceptance), test)]
pub fn add_mul_scale() {
    check("add", |r| shapes(r, &[&[3, 4], &[3, 4]]), |g, v, _| g.add(v[0], v[1]));
    check("mul", |r| shapes(r, &[&[3, 4], &[3, 4]]), |g, v, _| g.mul(v[0], v[1]));
    check("scale", |r| shapes(r, &[&[2, 5]]), |g, v, _| g.scale(v[0], -1.7));
    check("mul_col", |r| shapes(r, &[&[4, 3], &[4, 1]]), |g, v, _| g.mul_col(v[0], v[1]));
}

#[cfg_attr(not(acceptance), test)]
pub fn activations() {
    check("silu", |r| shapes(r, &[&[4, 6]]), |g, v, _| g.silu(v[0]));
    check("gelu", |r| shapes(r, &[&[4, 6]]), |g, v, _| g.gelu(v[0]));
}

#[cfg_attr(not(acceptance), test)]
pub fn norms() {
    check("rms_norm", |r| shapes(r, &[&[3, 8], &[8]]), |g, v, _| g.rms_norm(v[0], v[1], 1e-5));
    check(
        "layer_norm",
        |r| shapes(r, &[&[3, 8], &[8], &[8]]),
        |g, v, _| g.layer_norm(v[0], v[1], v[2], 1e-5),
    );
}

#[cfg_attr(not(acceptance), test)]
pub fn embedding_and_gathers() {
    check(
        "embedding",
        |r| shapes(r, &[&[6, 4]]),
        |g, v, r| {
            let ids: Vec<u32> = (0..5).map(|_| r.random_range(0..6)).collect();
            g.embedding(v[0], &ids)
        },
    );
    check(
        "gather_rows",
        |r| shapes(r, &[&[5, 3]]),
        |g, v, r| {
            let rows: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
            g.gather_rows(v[0], &rows)
        },
    );
    check(
        "gather_col",
        |r| shapes(r, &[&[5, 3]]),
        |g, v, r| {
            let rows: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
            g.gather_col(v[0], &rows, r.random_range(0..3))
        },
    );
    check(
        "scatter_rows",
        |r| shapes(r, &[&[3, 4], &[2, 4]]),
        |g, v, r| {
            let mut rows: Vec<usize> = (0..5).collect();
            rows.shuffle(r);
            // Row sets overlap so accumulation into one row is covered.
            let a = rows[..3].to_vec();
            let b = vec![rows[2], rows[3]];
            g.scatter_rows(5, 4, vec![(a, v[0]), (b, v[1])])
        },
    );
}

#[cfg_attr(not(acceptance), test)]
pub fn rope_and_attention() {
    check("rope", |r| shapes(r, &[&[6, 8]]), |g, v, _| g.rope(v[0], 2, 3, 10_000.0));
    check(
        "causal_attention",
        |r| shapes(r, &[&[6, 8], &[6, 8], &[6, 8]]),
        |g, v, _| g.causal_attention(v[0], v[1], v[2], 2, 3),
    );
}

#[cfg_attr(not(acceptance), test)]
pub fn softmax_and_gate() {
    check("row_softmax", |r| shapes(r, &[&[3, 5]]), |g, v, _| g.row_softmax(v[0]));
    // Logits are kept well apart so a probe cannot change the selection.
    check(
        "top_k_gate",
        |r| {
            let mut data = Vec::new();
            for _ in 0..4 {
                let mut row: Vec<f64> = (0..6).map(|i| i as f64 * 0.5).collect();
                row.shuffle(r);
                data.extend(row.into_iter().map(|x| x + r.random_range(-0.1..0.1)));
            }
            vec![Input {
                shape: vec![4, 6],
                data,
            }]
        },
        |g, v, _| g.top_k_gate(v[0], 2),
    );
}

#[cfg_attr(not(acceptance), test)]
pub fn cross_entropy_sum_transpose_concat() {
    check(
        "masked_cross_entropy",
        |r| shapes(r, &[&[5, 7]]),
        |g, v, r| {
            let targets: Vec<u32> = (0..5).map(|_| r.random_range(0..7)).collect();
            let mut mask: Vec<u8> = (0..5).map(|_| r.random_range(0..2)).collect();
            mask[r.random_range(0..5)] = 1;
            g.masked_cross_entropy(v[0], &targets, &mask)
        },
    );
    check("sum", |r| shapes(r, &[&[3, 4]]), |g, v, _| g.sum(v[0]));
    check("transpose", |r| shapes(r, &[&[3, 4]]), |g, v, _| g.transpose(v[0]));
    check(
        "concat_cols",
        |r| shapes(r, &[&[3, 2], &[3, 4], &[3, 1]]),
        |g, v, _| g.concat_cols(&[v[0], v[1], v[2]]),
    );
}

#[cfg_attr(not(acceptance), test)]
pub fn composite_expert_block() {
    check(
        "expert",
        |r| shapes(r, &[&[3, 4], &[6, 4], &[6, 4], &[4, 6]]),
        |g, v, _| {
            let gate = g.matmul_nt(v[0], v[1])?;
            let up = g.matmul_nt(v[0], v[2])?;
            let a = g.activation(gate, Activation::Silu)?;
            let h = g.mul(a, up)?;
            g.matmul_nt(h, v[3])
        },
    );
}

fn sample_tokens() -> (Vec<u32>, Vec<u8>) {
    let s = moetune::data::ChatSample::single(moetune::data::Source::AlpacaZh, "hi", "ok!");
    let t = render_tokens(&s);
    (t.token_ids, t.loss_mask)
}

#[cfg_attr(not(acceptance), test)]
pub fn tiny_model_loss() {
    let (tokens, mask) = sample_tokens();
    for seed in 0..GRAD_INSTANCES {
        let model = MoeTransformer::new(tiny_config(), seed).unwrap();
        let err = common::model_gradcheck(&model, &tokens, &mask, seed, 40);
        assert!(err < GRAD_REL_TOL, "seed {seed}: relative error {err:e}");
    }
}

#[cfg_attr(not(acceptance), test)]
pub fn tiny_model_loss_with_adapters() {
    let (tokens, mask) = sample_tokens();
    for seed in 0..GRAD_INSTANCES {
        let mut model = MoeTransformer::new(tiny_config(), seed).unwrap();
        let cfg = LoraConfig {
            rank: 2,
            dropout: 0.0,
            ..LoraConfig::default()
        };
        model.attach_lora(cfg, seed).unwrap();
        // Non-zero B so gradients reach A as well.
        let mut r = rng(seed);
        model.visit_linears_mut(&mut |_, lin| {
            if let Some(p) = &mut lin.lora {
                p.b.data = common::normal_f32(&mut r, p.b.numel(), 0.1);
            }
        });
        let err = common::model_gradcheck(&model, &tokens, &mask, seed, 40);
        assert!(err < GRAD_REL_TOL, "seed {seed}: relative error {err:e}");
    }
}
