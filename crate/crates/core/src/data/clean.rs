use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::template::render_tokens;
use crate::data::{ChatSample, Role};

pub const RULE_EMPTY_TURN: &str = "empty_turn";
pub const RULE_DUPLICATE: &str = "duplicate";
pub const RULE_TOO_LONG: &str = "too_long";
pub const RULE_BAD_ROLES: &str = "bad_roles";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleanRules {
    /// Samples whose rendered token count exceeds this are dropped.
    /// `None` keeps every length.
    pub max_seq_len: Option<usize>,
}

impl Default for CleanRules {
    fn default() -> Self {
        CleanRules {
            max_seq_len: Some(512),
        }
    }
}

/// Rejections per rule and source, plus what went in and what survived.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RejectionReport {
    pub input: BTreeMap<String, usize>,
    pub kept: BTreeMap<String, usize>,
    pub rejected: BTreeMap<String, BTreeMap<String, usize>>,
}

impl RejectionReport {
    pub fn rejected_by(&self, rule: &str) -> usize {
        self.rejected.get(rule).map_or(0, |m| m.values().sum())
    }

    fn reject(&mut self, rule: &str, source: &str) {
        *self
            .rejected
            .entry(rule.to_string())
            .or_default()
            .entry(source.to_string())
            .or_default() += 1;
    }
}

/// Drops control characters other than `\n` and `\t`, then trims whitespace.
pub fn normalize_text(s: &str) -> String {
    let filtered: String = s
        .chars()
        .filter(|&c| !c.is_control() || c == '\n' || c == '\t')
        .collect();
    filtered.trim().to_string()
}

fn dedup_key(sample: &ChatSample) -> [u8; 32] {
    let mut h = Sha256::new();
    for t in &sample.turns {
        let tag: &[u8] = match t.role {
            Role::System => b"S",
            Role::User => b"U",
            Role::Assistant => b"A",
        };
        h.update(tag);
        h.update((t.text.len() as u64).to_le_bytes());
        h.update(t.text.as_bytes());
    }
    h.finalize().into()
}

/// Normalizes text, then rejects samples with a broken role layout, an
/// empty turn, exact duplicates (first occurrence wins) and over-long renderings, in that
/// order. Idempotent.
pub fn clean_filter(samples: Vec<ChatSample>, rules: &CleanRules) -> (Vec<ChatSample>, RejectionReport) {
    let mut report = RejectionReport::default();
    let mut seen = HashSet::new();
    let mut kept = Vec::with_capacity(samples.len());
    for mut s in samples {
        let src = s.source.as_str();
        *report.input.entry(src.to_string()).or_default() += 1;
        for t in &mut s.turns {
            t.text = normalize_text(&t.text);
        }
        s.turns.retain(|t| !(t.role == Role::System && t.text.is_empty()));
        if s.validate().is_err() {
            report.reject(RULE_BAD_ROLES, src);
            continue;
        }
        if s.turns.iter().any(|t| t.text.is_empty()) {
            report.reject(RULE_EMPTY_TURN, src);
            continue;
        }
        if !seen.insert(dedup_key(&s)) {
            report.reject(RULE_DUPLICATE, src);
            continue;
        }
        if let Some(max) = rules.max_seq_len {
            if render_tokens(&s).len() > max {
                report.reject(RULE_TOO_LONG, src);
                continue;
            }
        }
        *report.kept.entry(src.to_string()).or_default() += 1;
        kept.push(s);
    }
    (kept, report)
}
