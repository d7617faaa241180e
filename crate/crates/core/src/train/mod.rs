//! Supervised fine-tuning: batching, masked next-token loss, clipped 4-bit
//! Adam updates, periodic checkpoints and a per-step loss log.

mod checkpoint;
mod config;
mod generate;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, TrainState, MAGIC,
    VERSION,
};
pub use config::{Schedule, TrainConfig};
pub use generate::{generate, generate_with, select_token, Decode};

use crate::data::TokenizedSample;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{ForwardCtx, MoeTransformer};
use crate::optim::{adam_step_quantized, QuantizedOptimState};
use crate::tokenizer::PAD;

pub const LOSS_LOG: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.aurc";
const LOSS_HEADER: &str = "step,epoch,loss,lr";

const DOMAIN_SHUFFLE: u64 = 1;
const DOMAIN_DROPOUT: u64 = 2;

/// Independent stream `index` of generator `domain` under `seed`.
fn rng_for(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Sample order for one epoch.
pub fn epoch_permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_for(seed, DOMAIN_SHUFFLE, epoch as u64));
    perm
}

pub fn periodic_checkpoint_name(step: u64) -> String {
    format!("step-{step:06}.aurc")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f32,
    pub lr: f32,
}

impl LossRecord {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.step, self.epoch, self.loss, self.lr)
    }
}

/// Rows of next-token pairs, right-padded with `<pad>` to a common length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub mask: Vec<u8>,
    pub rows: usize,
    pub seq_len: usize,
}

impl Batch {
    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }
}

pub fn collate(samples: &[&TokenizedSample]) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.len() < 2 || s.loss_mask.len() != s.len()) {
        return Err(Error::Config(format!(
            "sample of {} tokens cannot form a next-token pair",
            s.len()
        )));
    }
    let seq_len = samples.iter().map(|s| s.len() - 1).max().unwrap();
    let rows = samples.len();
    let mut b = Batch {
        inputs: vec![PAD; rows * seq_len],
        targets: vec![PAD; rows * seq_len],
        mask: vec![0; rows * seq_len],
        rows,
        seq_len,
    };
    for (r, s) in samples.iter().enumerate() {
        let n = s.len() - 1;
        let o = r * seq_len;
        b.inputs[o..o + n].copy_from_slice(&s.token_ids[..n]);
        b.targets[o..o + n].copy_from_slice(&s.token_ids[1..]);
        b.mask[o..o + n].copy_from_slice(&s.loss_mask[1..]);
    }
    Ok(b)
}

/// Mean masked loss of each sample, computed from a single padded batch.
pub fn per_sample_losses(model: &MoeTransformer, samples: &[&TokenizedSample]) -> Result<Vec<f32>> {
    let b = collate(samples)?;
    let mut g = Graph::<f32>::new();
    let logits = model.forward(&mut g, &b.inputs, &mut ForwardCtx::eval(b.seq_len))?;
    let mut out = Vec::with_capacity(b.rows);
    for r in 0..b.rows {
        let mut mask = vec![0u8; b.mask.len()];
        let span = r * b.seq_len..(r + 1) * b.seq_len;
        mask[span.clone()].copy_from_slice(&b.mask[span]);
        let l = g.masked_cross_entropy(logits, &b.targets, &mask)?;
        out.push(g.value(l)[0]);
    }
    Ok(out)
}

/// Mean masked loss over `samples` in eval mode, one batch at a time.
pub fn corpus_loss(model: &MoeTransformer, samples: &[TokenizedSample], batch_size: usize) -> Result<f32> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&TokenizedSample> = chunk.iter().collect();
        let b = collate(&refs)?;
        let mut g = Graph::<f32>::new();
        let logits = model.forward(&mut g, &b.inputs, &mut ForwardCtx::eval(b.seq_len))?;
        let n = b.masked_count();
        let l = g.masked_cross_entropy_scaled(logits, &b.targets, &b.mask, 1.0)?;
        total += g.value(l)[0] as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((total / count as f64) as f32)
}

pub struct Trainer {
    pub model: MoeTransformer,
    pub config: TrainConfig,
    pub state: TrainState,
    pub optimizer: BTreeMap<String, QuantizedOptimState>,
    data: Vec<TokenizedSample>,
    perm: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    pub fn new(model: MoeTransformer, data: Vec<TokenizedSample>, config: TrainConfig) -> Result<Self> {
        let state = TrainState {
            seed: config.seed,
            ..TrainState::default()
        };
        Self::with_state(model, data, config, state, BTreeMap::new())
    }

    /// Resumes from a checkpoint. `config` overrides the stored training
    /// config when given.
    pub fn resume(ckpt: Checkpoint, data: Vec<TokenizedSample>, config: Option<TrainConfig>) -> Result<Self> {
        let config = config
            .or(ckpt.train)
            .ok_or_else(|| Error::Config("checkpoint carries no training config".into()))?;
        let state = ckpt.state.unwrap_or(TrainState {
            seed: config.seed,
            ..TrainState::default()
        });
        Self::with_state(ckpt.model, data, config, state, ckpt.optimizer)
    }

    fn with_state(
        model: MoeTransformer,
        data: Vec<TokenizedSample>,
        config: TrainConfig,
        state: TrainState,
        optimizer: BTreeMap<String, QuantizedOptimState>,
    ) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        let max = model.config.max_seq_len;
        for s in &data {
            if s.len() < 2 || s.loss_mask.len() != s.len() || s.loss_mask[1..].iter().all(|&m| m == 0) {
                return Err(Error::Config("every sample needs at least one supervised token".into()));
            }
            if s.len() - 1 > max {
                return Err(Error::Length { len: s.len() - 1, max });
            }
        }
        if model.trainable_tensors().is_empty() {
            return Err(Error::Config("model has no trainable tensors".into()));
        }
        if state.position > data.len() {
            return Err(Error::Config("data cursor lies beyond the corpus".into()));
        }
        Ok(Trainer {
            model,
            config,
            state,
            optimizer,
            data,
            perm: None,
        })
    }

    pub fn samples_per_step(&self) -> usize {
        self.config.batch_size * self.config.grad_accum_steps
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.data.len().div_ceil(self.samples_per_step()) as u64
    }

    /// Optimizer steps the run will take in total.
    pub fn total_steps(&self) -> u64 {
        let full = self.config.epochs as u64 * self.steps_per_epoch();
        self.config.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps() || self.state.epoch >= self.config.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: Some(self.config.clone()),
            state: Some(self.state),
            optimizer: self.optimizer.clone(),
        }
    }

    fn window(&mut self) -> Vec<usize> {
        let epoch = self.state.epoch;
        if self.perm.as_ref().is_none_or(|(e, _)| *e != epoch) {
            self.perm = Some((epoch, epoch_permutation(self.state.seed, epoch, self.data.len())));
        }
        let perm = &self.perm.as_ref().unwrap().1;
        let start = self.state.position;
        let end = (start + self.samples_per_step()).min(perm.len());
        perm[start..end].to_vec()
    }

    /// Accumulates the gradient of the next step's window into the trainable
    /// tensors without updating them. Returns the window and its mean loss.
    pub fn window_gradients(&mut self) -> Result<(Vec<usize>, f32)> {
        let step = self.state.step;
        let at_step = |e: Error| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {}", step + 1)),
            other => other,
        };
        let idx = self.window();
        let supervised: usize = idx
            .iter()
            .map(|&i| self.data[i].loss_mask[1..].iter().filter(|&&m| m != 0).count())
            .sum();
        let scale = 1.0 / supervised as f32;
        let mut loss = 0.0f32;
        for (mi, chunk) in idx.chunks(self.config.batch_size).enumerate() {
            let refs: Vec<&TokenizedSample> = chunk.iter().map(|&i| &self.data[i]).collect();
            let b = collate(&refs)?;
            let mut rng = rng_for(
                self.state.seed,
                DOMAIN_DROPOUT,
                step * self.config.grad_accum_steps as u64 + mi as u64,
            );
            let mut g = Graph::<f32>::new();
            let mut ctx = ForwardCtx {
                seq_len: b.seq_len,
                rng: Some(&mut rng),
            };
            let logits = self.model.forward(&mut g, &b.inputs, &mut ctx).map_err(at_step)?;
            let l = g
                .masked_cross_entropy_scaled(logits, &b.targets, &b.mask, scale)
                .map_err(at_step)?;
            loss += g.value(l)[0];
            let grads = g.backward(l).map_err(at_step)?;
            let named = g.param_grads(&grads);
            accumulate(&mut self.model, &named);
        }
        Ok((idx, loss))
    }

    /// One optimizer step. Returns `None` once the run is complete.
    pub fn step(&mut self) -> Result<Option<LossRecord>> {
        if self.is_done() {
            return Ok(None);
        }
        let step = self.state.step;
        let at_step = |e: Error| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {}", step + 1)),
            other => other,
        };
        let (idx, loss) = self.window_gradients()?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", step + 1)));
        }
        let lr = self.config.lr_at(step, self.total_steps());
        self.apply_update(lr).map_err(at_step)?;

        let epoch = self.state.epoch;
        self.state.step += 1;
        self.state.position += idx.len();
        if self.state.position >= self.data.len() {
            self.state.epoch += 1;
            self.state.position = 0;
        }
        Ok(Some(LossRecord {
            step: self.state.step,
            epoch,
            loss,
            lr,
        }))
    }

    fn apply_update(&mut self, lr: f32) -> Result<()> {
        let mut sq = 0.0f64;
        self.model.visit_tensors(&mut |_, t| {
            if let (true, Some(g)) = (t.requires_grad, &t.grad) {
                sq += g.iter().map(|&x| x as f64 * x as f64).sum::<f64>();
            }
        });
        let norm = sq.sqrt();
        let max = self.config.max_grad_norm as f64;
        let clip = if max > 0.0 && norm > max { (max / (norm + 1e-6)) as f32 } else { 1.0 };
        let hp = self.config.adam(lr);
        let optimizer = &mut self.optimizer;
        let mut err = None;
        self.model.visit_tensors_mut(&mut |name, t| {
            if !t.requires_grad || err.is_some() {
                return;
            }
            let mut g = t.grad.take().unwrap_or_else(|| vec![0.0; t.numel()]);
            if clip != 1.0 {
                g.iter_mut().for_each(|x| *x *= clip);
            }
            let st = optimizer
                .entry(name.to_string())
                .or_insert_with(|| QuantizedOptimState::new(&t.shape));
            if let Err(e) = adam_step_quantized(&mut t.data, &g, st, &hp) {
                err = Some(e);
            }
        });
        self.model.zero_grad();
        err.map_or(Ok(()), Err)
    }

    /// Runs to completion. With `out_dir`, appends to `loss.csv` every step,
    /// writes a checkpoint every `save_every` steps and `final.aurc` at the end.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<Vec<LossRecord>> {
        let mut log = match out_dir {
            Some(dir) => Some(LossLog::open(dir, self.state.step == 0)?),
            None => None,
        };
        let mut records = Vec::new();
        while let Some(rec) = self.step()? {
            if let (Some(log), Some(dir)) = (&mut log, out_dir) {
                log.write(&rec)?;
                if rec.step % self.config.save_every == 0 {
                    save_checkpoint(&self.checkpoint(), &dir.join(periodic_checkpoint_name(rec.step)))?;
                }
            }
            records.push(rec);
        }
        if let Some(dir) = out_dir {
            save_checkpoint(&self.checkpoint(), &dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(records)
    }
}

fn accumulate(model: &mut MoeTransformer, named: &HashMap<String, Vec<f32>>) {
    model.visit_tensors_mut(&mut |name, t| {
        if t.requires_grad {
            if let Some(g) = named.get(name) {
                t.accumulate_grad(g);
            }
        }
    });
}

struct LossLog {
    path: PathBuf,
    w: BufWriter<File>,
}

impl LossLog {
    fn open(dir: &Path, fresh: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOSS_LOG);
        let new_file = fresh || !path.exists();
        let file = if new_file {
            File::create(&path)
        } else {
            OpenOptions::new().append(true).open(&path)
        }
        .map_err(|e| Error::io(&path, e))?;
        let mut log = LossLog {
            w: BufWriter::new(file),
            path,
        };
        if new_file {
            log.line(LOSS_HEADER)?;
        }
        Ok(log)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.w, "{s}")
            .and_then(|_| self.w.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    fn write(&mut self, r: &LossRecord) -> Result<()> {
        self.line(&r.csv_line())
    }
}
