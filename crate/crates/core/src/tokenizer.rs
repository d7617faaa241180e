//! Byte-level tokenizer: ids 0..=255 are raw UTF-8 bytes, six specials follow.

pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOT: u32 = 258;
pub const SYSTEM: u32 = 259;
pub const USER: u32 = 260;
pub const ASSISTANT: u32 = 261;
pub const VOCAB_SIZE: usize = 262;

pub fn special_text(id: u32) -> Option<&'static str> {
    Some(match id {
        PAD => "<pad>",
        BOS => "<bos>",
        EOT => "<eot>",
        SYSTEM => "<|system|>",
        USER => "<|user|>",
        ASSISTANT => "<|assistant|>",
        _ => return None,
    })
}

pub fn encode_bytes(text: &str) -> impl Iterator<Item = u32> + '_ {
    text.bytes().map(u32::from)
}

/// Raw bytes of a token sequence, specials spelled out as their marker text.
/// Ids outside the vocabulary are dropped.
pub fn decode_bytes(ids: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        if id < 256 {
            out.push(id as u8);
        } else if let Some(s) = special_text(id) {
            out.extend_from_slice(s.as_bytes());
        }
    }
    out
}

pub fn decode(ids: &[u32]) -> String {
    String::from_utf8_lossy(&decode_bytes(ids)).into_owned()
}
