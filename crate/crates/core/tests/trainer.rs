//! Fine-tuning loop: memorization, resumption, accumulation and padding.

mod common;

use common::{memorize_config, tiny_config, toy_corpus, toy_samples, toy_trainable};
use moetune::data::{render_prompt, render_tokens, ChatSample, Source};
use moetune::lora::LoraConfig;
use moetune::tokenizer::decode;
use moetune::train::{
    corpus_loss, generate, load_checkpoint, per_sample_losses, save_checkpoint, Decode, TrainConfig, Trainer,
};
use moetune::MoeTransformer;

fn snapshot(m: &MoeTransformer) -> Vec<(String, Vec<f32>)> {
    let mut out = Vec::new();
    m.visit_tensors(&mut |n, t| out.push((n.to_string(), t.data.clone())));
    out
}

fn small_run(max_steps: u64) -> TrainConfig {
    TrainConfig {
        epochs: 10,
        lr: 1e-3,
        batch_size: 4,
        warmup_steps: 2,
        max_steps: Some(max_steps),
        ..Default::default()
    }
}

fn adapted_tiny(seed: u64) -> MoeTransformer {
    adapted_tiny_with(seed, LoraConfig::default())
}

fn adapted_tiny_with(seed: u64, lora: LoraConfig) -> MoeTransformer {
    let mut m = MoeTransformer::new(tiny_config(), seed).unwrap();
    m.quantize_base(64).unwrap();
    m.attach_lora(lora, seed).unwrap();
    m
}

#[cfg_attr(not(acceptance), test)]
pub fn memorizes_toy_corpus() {
    let data = toy_corpus(32);
    let mut t = Trainer::new(toy_trainable(0), data.clone(), memorize_config()).unwrap();
    let records = t.run(None).unwrap();
    assert!(records.len() <= 200);
    let last = records.last().unwrap().loss;
    let full = corpus_loss(&t.model, &data, 8).unwrap();
    assert!(last < 0.1 && full < 0.1, "last step {last}, corpus {full}");

    // Greedy decoding reproduces a memorized answer.
    let mut model = t.model;
    model.merge_adapters().unwrap();
    for (i, s) in toy_samples(32).iter().enumerate().step_by(8) {
        let prompt = render_prompt(None, &[], &s.turns[0].text);
        let out = generate(&model, &prompt, 16, &Decode::Greedy).unwrap();
        assert_eq!(decode(&out), format!("answer {}", 7 * i));
    }
}

#[cfg_attr(not(acceptance), test)]
pub fn loss_decreases_on_average() {
    let mut t = Trainer::new(toy_trainable(1), toy_corpus(32), memorize_config()).unwrap();
    t.config.max_steps = Some(60);
    let losses: Vec<f32> = t.run(None).unwrap().iter().map(|r| r.loss).collect();
    let mean = |s: &[f32]| s.iter().sum::<f32>() / s.len() as f32;
    assert!(mean(&losses[50..]) < 0.5 * mean(&losses[..10]));
}

#[cfg_attr(not(acceptance), test)]
pub fn zero_learning_rate_changes_nothing() {
    let model = adapted_tiny(3);
    let before = snapshot(&model);
    let cfg = TrainConfig {
        lr: 0.0,
        ..small_run(6)
    };
    let mut t = Trainer::new(model, toy_corpus(16), cfg).unwrap();
    assert_eq!(t.run(None).unwrap().len(), 6);
    assert_eq!(snapshot(&t.model), before);
}

#[cfg_attr(not(acceptance), test)]
pub fn frozen_base_is_untouched_by_training() {
    let model = adapted_tiny(4);
    let frozen = |m: &MoeTransformer| {
        let mut out = Vec::new();
        m.visit_linears(&mut |n, l| out.push((n.to_string(), l.base_dense().unwrap().data)));
        out
    };
    let before = frozen(&model);
    let mut t = Trainer::new(model, toy_corpus(16), small_run(50)).unwrap();
    t.run(None).unwrap();
    assert_eq!(frozen(&t.model), before);
}

#[cfg_attr(not(acceptance), test)]
pub fn split_resume_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_corpus(12);
    let cfg = small_run(10);

    let mut straight = Trainer::new(adapted_tiny(5), data.clone(), cfg.clone()).unwrap();
    let full = straight.run(None).unwrap();

    let mut first = Trainer::new(adapted_tiny(5), data.clone(), cfg.clone()).unwrap();
    for _ in 0..5 {
        first.step().unwrap().unwrap();
    }
    let path = dir.path().join("mid.aurc");
    save_checkpoint(&first.checkpoint(), &path).unwrap();
    drop(first);
    let mut second = Trainer::resume(load_checkpoint(&path).unwrap(), data, None).unwrap();
    let rest = second.run(None).unwrap();

    assert_eq!(rest.len(), 5);
    assert_eq!(rest[4].step, 10);
    assert_eq!(rest[4].loss.to_bits(), full[9].loss.to_bits());
    assert_eq!(&rest[..], &full[5..]);
    assert_eq!(snapshot(&second.model), snapshot(&straight.model));
}

#[cfg_attr(not(acceptance), test)]
pub fn run_writes_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        save_every: 3,
        ..small_run(7)
    };
    let mut t = Trainer::new(adapted_tiny(6), toy_corpus(8), cfg).unwrap();
    t.run(Some(dir.path())).unwrap();
    let log = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 8);
    assert!(log.starts_with("step,epoch,loss,lr\n"));
    for name in ["step-000003.aurc", "step-000006.aurc", "final.aurc"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let last = load_checkpoint(&dir.path().join("final.aurc")).unwrap();
    assert_eq!(last.state.unwrap().step, 7);
}

#[cfg_attr(not(acceptance), test)]
pub fn gradient_accumulation_matches_large_batch() {
    let data = toy_corpus(16);
    let whole = TrainConfig {
        batch_size: 8,
        grad_accum_steps: 1,
        ..small_run(4)
    };
    let split = TrainConfig {
        batch_size: 2,
        grad_accum_steps: 4,
        ..whole.clone()
    };
    // Dropout masks are drawn per micro-batch, so they are disabled here.
    let lora = LoraConfig {
        dropout: 0.0,
        ..LoraConfig::default()
    };
    let mut a = Trainer::new(adapted_tiny_with(7, lora.clone()), data.clone(), whole).unwrap();
    let mut b = Trainer::new(adapted_tiny_with(7, lora), data, split).unwrap();
    let (wa, la) = a.window_gradients().unwrap();
    let (wb, lb) = b.window_gradients().unwrap();
    assert_eq!(wa, wb);
    assert!((la - lb).abs() < 1e-4);
    let grads = |m: &MoeTransformer| {
        let mut out = Vec::new();
        m.visit_tensors(&mut |_, t| out.extend(t.grad.clone().unwrap_or_default()));
        out
    };
    let (ga, gb) = (grads(&a.model), grads(&b.model));
    assert_eq!(ga.len(), gb.len());
    assert!(!ga.is_empty());
    let worst = ga.iter().zip(&gb).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(worst < 1e-4, "max gradient difference {worst}");

    a.model.zero_grad();
    b.model.zero_grad();
    let ra = a.run(None).unwrap();
    let rb = b.run(None).unwrap();
    for (x, y) in ra.iter().zip(&rb) {
        assert!((x.loss - y.loss).abs() < 1e-4, "step {}: {} vs {}", x.step, x.loss, y.loss);
    }
}

#[cfg_attr(not(acceptance), test)]
pub fn padding_does_not_change_a_samples_loss() {
    let model = adapted_tiny(8);
    let short = render_tokens(&ChatSample::single(Source::AlpacaZh, "hi", "ok"));
    let long = render_tokens(&ChatSample::single(Source::AlpacaZh, "a much longer question", "and answer"));
    let alone = per_sample_losses(&model, &[&short]).unwrap()[0];
    let padded = per_sample_losses(&model, &[&short, &long]).unwrap()[0];
    assert!((alone - padded).abs() < 1e-5, "{alone} vs {padded}");
}

#[cfg_attr(not(acceptance), test)]
pub fn same_seed_same_checkpoint_bytes() {
    let run = || {
        let mut t = Trainer::new(adapted_tiny(9), toy_corpus(8), small_run(4)).unwrap();
        t.run(None).unwrap();
        moetune::train::encode_checkpoint(&t.checkpoint()).unwrap()
    };
    assert_eq!(run(), run());
}
