use std::fs::File;
use std::io::{self, BufRead, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use moetune::data::render_prompt;
use moetune::tokenizer::{decode, decode_bytes};
use moetune::train::{generate_with, load_checkpoint, Decode};
use moetune::MoeTransformer;

use crate::config::UsageError;

#[derive(Args)]
pub struct ChatArgs {
    #[arg(long)]
    model: PathBuf,
    /// System message placed before the conversation.
    #[arg(long)]
    system: Option<String>,
    /// Always pick the most likely token.
    #[arg(long, conflicts_with_all = ["temperature", "top_p"])]
    greedy: bool,
    #[arg(long, default_value_t = 0.7)]
    temperature: f32,
    /// Nucleus sampling mass; sampling uses the full distribution when absent.
    #[arg(long)]
    top_p: Option<f32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    max_new: usize,
    /// Append every rendered prompt to this file as JSON lines.
    #[arg(long)]
    dump_prompt: Option<PathBuf>,
}

impl ChatArgs {
    fn decode(&self, turn: u64) -> Decode {
        let seed = self.seed.wrapping_add(turn);
        if self.greedy {
            Decode::Greedy
        } else if let Some(p) = self.top_p {
            Decode::TopP {
                p,
                tau: self.temperature,
                seed,
            }
        } else {
            Decode::Temperature {
                tau: self.temperature,
                seed,
            }
        }
    }
}

#[derive(Serialize)]
struct DumpedPrompt<'a> {
    turn: u64,
    dropped_rounds: usize,
    tokens: usize,
    prompt: &'a str,
}

/// Prompt for `user` that leaves room for `max_new` tokens, dropping the
/// oldest rounds of `history` as needed. Returns the prompt and how many
/// rounds were dropped, or `None` if even the bare message does not fit.
fn fit_prompt(
    model: &MoeTransformer,
    system: Option<&str>,
    history: &[(String, String)],
    user: &str,
    max_new: usize,
) -> Option<(Vec<u32>, usize)> {
    let budget = model.config.max_seq_len.checked_sub(max_new)?;
    (0..=history.len()).find_map(|drop| {
        let p = render_prompt(system, &history[drop..], user);
        (p.len() <= budget).then_some((p, drop))
    })
}

pub fn run(a: ChatArgs) -> Result<()> {
    a.decode(0).validate()?;
    let model = load_checkpoint(&a.model)
        .with_context(|| format!("loading {}", a.model.display()))?
        .model;
    if a.max_new >= model.config.max_seq_len {
        return Err(UsageError(format!(
            "--max-new {} leaves no room for a prompt in a {}-token context",
            a.max_new, model.config.max_seq_len
        ))
        .into());
    }
    let mut dump = match &a.dump_prompt {
        Some(p) => Some(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => None,
    };
    let system = a.system.as_deref();
    let mut history: Vec<(String, String)> = Vec::new();
    let stdin = io::stdin();
    let mut stdout = io::stdout().lock();
    let mut turn = 0u64;
    eprintln!("type /reset to clear the conversation, /exit to quit");
    for line in stdin.lock().lines() {
        let line = line?;
        let user = line.trim_end_matches('\r');
        match user.trim() {
            "" => continue,
            "/exit" => break,
            "/reset" => {
                history.clear();
                eprintln!("conversation cleared");
                continue;
            }
            _ => {}
        }
        let Some((prompt, dropped)) = fit_prompt(&model, system, &history, user, a.max_new) else {
            eprintln!("warning: message does not fit the context window; not sent");
            continue;
        };
        if dropped > 0 {
            eprintln!("warning: dropped {dropped} oldest round(s) to fit the context window");
            history.drain(..dropped);
        }
        if let Some(f) = dump.as_mut() {
            let text = decode(&prompt);
            let rec = DumpedPrompt {
                turn,
                dropped_rounds: dropped,
                tokens: prompt.len(),
                prompt: &text,
            };
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
            f.flush()?;
        }
        let mut write_err = None;
        let reply = generate_with(&model, &prompt, a.max_new, &a.decode(turn), &mut |t| {
            if write_err.is_none() {
                if let Err(e) = stdout.write_all(&decode_bytes(&[t])).and_then(|_| stdout.flush()) {
                    write_err = Some(e);
                }
            }
        })?;
        if let Some(e) = write_err {
            return Err(e.into());
        }
        writeln!(stdout)?;
        stdout.flush()?;
        history.push((user.to_string(), decode(&reply)));
        turn += 1;
    }
    Ok(())
}
