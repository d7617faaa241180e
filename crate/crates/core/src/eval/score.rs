use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::prompt::{FewShotPrompt, PromptTemplate};
use crate::eval::{Benchmark, BenchmarkSpec, McqItem, Split};
use crate::model::MoeTransformer;
use crate::tokenizer::{self, BOS, VOCAB_SIZE};

/// Byte ids of `A`, `B`, `C`, `D`.
pub const LETTER_IDS: [u32; 4] = [b'A' as u32, b'B' as u32, b'C' as u32, b'D' as u32];

/// Anything that yields next-token logits for a token prefix.
pub trait NextTokenModel: Sync {
    fn max_seq_len(&self) -> usize;

    /// Logits over the vocabulary for the token after `tokens`.
    fn next_token_logits(&self, tokens: &[u32]) -> Result<Vec<f32>>;
}

impl NextTokenModel for MoeTransformer {
    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn next_token_logits(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        let logits = self.logits(tokens)?;
        Ok(logits.row(tokens.len() - 1).to_vec())
    }
}

/// Softmax over the four letter logits only.
pub fn letter_probabilities(logits: &[f32]) -> Result<[f32; 4]> {
    if let Some(&id) = LETTER_IDS.iter().find(|&&id| id as usize >= logits.len()) {
        return Err(Error::Vocab { id, vocab: logits.len() });
    }
    let l = LETTER_IDS.map(|id| logits[id as usize] as f64);
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = l.map(|x| (x - max).exp());
    let s: f64 = e.iter().sum();
    Ok(e.map(|x| (x / s) as f32))
}

/// Index of the largest probability; ties go to the earliest letter.
pub fn predict(probs: &[f32; 4]) -> usize {
    let mut best = 0;
    for i in 1..4 {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    best
}

fn encode_prompt(prompt: &str) -> Vec<u32> {
    std::iter::once(BOS).chain(tokenizer::encode_bytes(prompt)).collect()
}

/// One forward pass on `<bos>` + `prompt`; probabilities of the four letters
/// as the next token.
pub fn score_choices(model: &dyn NextTokenModel, prompt: &str) -> Result<[f32; 4]> {
    let tokens = encode_prompt(prompt);
    if tokens.len() > model.max_seq_len() {
        return Err(Error::Length {
            len: tokens.len(),
            max: model.max_seq_len(),
        });
    }
    letter_probabilities(&model.next_token_logits(&tokens)?)
}

/// Scores a few-shot prompt, dropping the oldest exemplars until it fits.
/// Returns the probabilities and how many exemplars were dropped.
pub fn score_prompt(model: &dyn NextTokenModel, prompt: &FewShotPrompt) -> Result<([f32; 4], usize)> {
    let max = model.max_seq_len();
    for skip in 0..=prompt.exemplars.len() {
        let text = prompt.render(skip);
        if text.len() < max {
            return Ok((score_choices(model, &text)?, skip));
        }
    }
    Err(Error::Length {
        len: prompt.render(prompt.exemplars.len()).len() + 1,
        max,
    })
}

/// Test doubles for harness checks without a trained model.
#[derive(Clone, Debug, PartialEq)]
pub enum StubModel {
    /// Puts +10 on the correct letter of any known question.
    Oracle { blocks: Vec<(String, usize)> },
    /// All logits equal.
    Uniform,
    /// Letter logits drawn from a generator keyed by the seed and the prompt.
    Random { seed: u64 },
}

impl StubModel {
    pub fn oracle(items: &[McqItem], spec: &BenchmarkSpec) -> Self {
        let tpl = PromptTemplate::for_spec(spec);
        StubModel::Oracle {
            blocks: items.iter().map(|i| (tpl.block(i, None), i.answer)).collect(),
        }
    }

    /// Parses `oracle:<name>`, `uniform:` or `random:<seed>`. Returns `None`
    /// for anything else, which callers treat as a checkpoint path.
    pub fn from_uri(uri: &str, bench: &Benchmark, spec: &BenchmarkSpec) -> Result<Option<Self>> {
        let Some((scheme, rest)) = uri.split_once(':') else {
            return Ok(None);
        };
        Ok(Some(match scheme {
            "oracle" => {
                let items: Vec<McqItem> = bench.split(Split::Test).cloned().collect();
                Self::oracle(&items, spec)
            }
            "uniform" => StubModel::Uniform,
            "random" => StubModel::Random {
                seed: rest
                    .parse()
                    .map_err(|_| Error::Config(format!("random stub needs an integer seed, got {rest:?}")))?,
            },
            _ => return Ok(None),
        }))
    }
}

impl NextTokenModel for StubModel {
    fn max_seq_len(&self) -> usize {
        usize::MAX
    }

    fn next_token_logits(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        let mut logits = vec![0.0f32; VOCAB_SIZE];
        match self {
            StubModel::Uniform => {}
            StubModel::Oracle { blocks } => {
                let text = tokenizer::decode_bytes(tokens);
                let hit = blocks
                    .iter()
                    .filter(|(b, _)| text.ends_with(b.as_bytes()))
                    .max_by_key(|(b, _)| b.len());
                let (_, answer) = hit.ok_or_else(|| Error::Config("oracle does not know this question".into()))?;
                logits[LETTER_IDS[*answer] as usize] = 10.0;
            }
            StubModel::Random { seed } => {
                let mut h = Sha256::new();
                h.update(seed.to_le_bytes());
                for t in tokens {
                    h.update(t.to_le_bytes());
                }
                let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
                for id in LETTER_IDS {
                    logits[id as usize] = rng.random::<f32>();
                }
            }
        }
        Ok(logits)
    }
}
