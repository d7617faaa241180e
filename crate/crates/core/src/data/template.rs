//! Chat template rendering with assistant-only loss masks.
//!
//! ```text
//! <bos>[<|system|>\n{system}\n]{<|user|>\n{user}\n<|assistant|>\n{assistant}<eot>\n}*
//! ```

use serde::{Deserialize, Serialize};

use crate::data::{ChatSample, Role};
use crate::error::{Error, Result};
use crate::tokenizer::{self, ASSISTANT, BOS, EOT, SYSTEM, USER};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedSample {
    pub token_ids: Vec<u32>,
    pub loss_mask: Vec<u8>,
}

impl TokenizedSample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m != 0).count()
    }
}

struct Builder {
    ids: Vec<u32>,
    mask: Vec<u8>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            ids: vec![BOS],
            mask: vec![0],
        }
    }

    fn special(&mut self, id: u32, m: u8) {
        self.ids.push(id);
        self.mask.push(m);
    }

    fn text(&mut self, s: &str, m: u8) {
        for b in tokenizer::encode_bytes(s) {
            self.ids.push(b);
            self.mask.push(m);
        }
    }
}

/// Tokens and mask for a full conversation. Empty system turns are omitted.
pub fn render_tokens(sample: &ChatSample) -> TokenizedSample {
    let mut b = Builder::new();
    for turn in &sample.turns {
        match turn.role {
            Role::System => {
                if !turn.text.is_empty() {
                    b.special(SYSTEM, 0);
                    b.text("\n", 0);
                    b.text(&turn.text, 0);
                    b.text("\n", 0);
                }
            }
            Role::User => {
                b.special(USER, 0);
                b.text("\n", 0);
                b.text(&turn.text, 0);
                b.text("\n", 0);
            }
            Role::Assistant => {
                b.special(ASSISTANT, 0);
                b.text("\n", 0);
                b.text(&turn.text, 1);
                b.special(EOT, 1);
                b.text("\n", 0);
            }
        }
    }
    TokenizedSample {
        token_ids: b.ids,
        loss_mask: b.mask,
    }
}

/// [`render_tokens`] with a length limit.
pub fn render_template(sample: &ChatSample, max_seq_len: usize) -> Result<TokenizedSample> {
    let t = render_tokens(sample);
    if t.len() > max_seq_len {
        return Err(Error::Length {
            len: t.len(),
            max: max_seq_len,
        });
    }
    Ok(t)
}

/// The rendered template as text, specials spelled out.
pub fn render_text(sample: &ChatSample) -> String {
    tokenizer::decode(&render_tokens(sample).token_ids)
}

/// Prompt for generating the next assistant turn: history rounds, then the
/// new user message and an open assistant header.
pub fn render_prompt(system: Option<&str>, history: &[(String, String)], user: &str) -> Vec<u32> {
    let mut b = Builder::new();
    if let Some(s) = system.filter(|s| !s.is_empty()) {
        b.special(SYSTEM, 0);
        b.text("\n", 0);
        b.text(s, 0);
        b.text("\n", 0);
    }
    for (u, a) in history {
        b.special(USER, 0);
        b.text("\n", 0);
        b.text(u, 0);
        b.text("\n", 0);
        b.special(ASSISTANT, 0);
        b.text("\n", 0);
        b.text(a, 0);
        b.special(EOT, 0);
        b.text("\n", 0);
    }
    b.special(USER, 0);
    b.text("\n", 0);
    b.text(user, 0);
    b.text("\n", 0);
    b.special(ASSISTANT, 0);
    b.text("\n", 0);
    b.ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Source, Turn};

    #[test]
    fn single_turn_layout_and_mask() {
        let s = ChatSample::single(Source::AlpacaZh, "hi", "yo");
        let t = render_tokens(&s);
        assert_eq!(render_text(&s), "<bos><|user|>\nhi\n<|assistant|>\nyo<eot>\n");
        // <bos> <|user|> \n h i \n <|assistant|> \n y o <eot> \n
        assert_eq!(t.loss_mask, vec![0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 0]);
        assert_eq!(t.token_ids[10], EOT);
    }

    #[test]
    fn empty_system_turn_is_omitted() {
        let mut s = ChatSample::single(Source::Sharegpt, "a", "b");
        let plain = render_tokens(&s);
        s.turns.insert(0, Turn::new(Role::System, ""));
        assert_eq!(render_tokens(&s), plain);
        s.turns[0].text = "be brief".into();
        assert!(render_text(&s).starts_with("<bos><|system|>\nbe brief\n<|user|>"));
    }

    #[test]
    fn length_limit() {
        let s = ChatSample::single(Source::AlpacaZh, "hello", "world");
        assert!(render_template(&s, 10).is_err());
        assert!(render_template(&s, 100).is_ok());
    }

    #[test]
    fn prompt_matches_rendered_prefix() {
        let s = ChatSample {
            turns: vec![
                Turn::new(Role::System, "sys"),
                Turn::new(Role::User, "q1"),
                Turn::new(Role::Assistant, "a1"),
                Turn::new(Role::User, "q2"),
                Turn::new(Role::Assistant, "a2"),
            ],
            source: Source::Sharegpt,
            category: None,
        };
        let full = render_tokens(&s).token_ids;
        let prompt = render_prompt(Some("sys"), &[("q1".into(), "a1".into())], "q2");
        assert_eq!(&full[..prompt.len()], prompt.as_slice());
    }
}
