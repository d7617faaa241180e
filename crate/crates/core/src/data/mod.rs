//! Instruction data: ingest, clean, render and summarize chat corpora.

mod clean;
mod ingest;
mod stats;
mod template;

pub use clean::{
    clean_filter, normalize_text, CleanRules, RejectionReport, RULE_BAD_ROLES, RULE_DUPLICATE, RULE_EMPTY_TURN, RULE_TOO_LONG,
};
pub use ingest::{ingest_alpaca, ingest_sharegpt, Ingested, SkippedRecord};
pub use stats::{dataset_stats, LengthPercentiles, SourceStats, StatsReport};
pub use template::{render_prompt, render_template, render_text, render_tokens, TokenizedSample};

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    AlpacaZh,
    AlpacaGpt4Zh,
    Sharegpt,
}

impl Source {
    /// Fixed merge order.
    pub const ALL: [Source; 3] = [Source::AlpacaZh, Source::AlpacaGpt4Zh, Source::Sharegpt];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::AlpacaZh => "alpaca_zh",
            Source::AlpacaGpt4Zh => "alpaca_gpt4_zh",
            Source::Sharegpt => "sharegpt",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn new(role: Role, text: impl Into<String>) -> Self {
        Turn {
            role,
            text: text.into(),
        }
    }
}

/// One conversation in the unified corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatSample {
    pub turns: Vec<Turn>,
    pub source: Source,
    #[serde(default)]
    pub category: Option<String>,
}

impl ChatSample {
    pub fn single(source: Source, user: impl Into<String>, assistant: impl Into<String>) -> Self {
        ChatSample {
            turns: vec![Turn::new(Role::User, user), Turn::new(Role::Assistant, assistant)],
            source,
            category: None,
        }
    }

    /// Number of (user, assistant) pairs.
    pub fn n_rounds(&self) -> usize {
        self.turns.iter().filter(|t| t.role == Role::Assistant).count()
    }

    pub fn system(&self) -> Option<&str> {
        self.turns
            .first()
            .filter(|t| t.role == Role::System)
            .map(|t| t.text.as_str())
    }

    /// Role layout check: optional leading system turn, then strictly
    /// alternating user/assistant, ending on assistant.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let body = match self.turns.first() {
            Some(t) if t.role == Role::System => &self.turns[1..],
            _ => &self.turns[..],
        };
        if body.is_empty() {
            return Err("no user/assistant turns".into());
        }
        for (i, t) in body.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if t.role != expected {
                return Err(format!("turn {i} is {:?}, expected {:?}", t.role, expected));
            }
        }
        if body.len() % 2 != 0 {
            return Err("conversation does not end with an assistant turn".into());
        }
        Ok(())
    }
}

/// Writes one sample per line.
pub fn write_corpus(path: &Path, samples: &[ChatSample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(s).expect("samples serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Vec<ChatSample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: ChatSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            location: format!("line {}", i + 1),
            message: e.to_string(),
        })?;
        sample.validate().map_err(|message| Error::Record {
            path: path.to_path_buf(),
            index: i,
            message,
        })?;
        out.push(sample);
    }
    Ok(out)
}
