//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by four specials.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const SEP: u32 = 259;
pub const VOCAB_SIZE: usize = 260;

pub fn is_special(token: u32) -> bool {
    token >= 256
}

pub fn encode(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| u32::from(b)).collect()
}

pub fn encode_str(s: &str) -> Vec<u32> {
    encode(s.as_bytes())
}

/// Byte tokens back to bytes; special tokens are dropped.
pub fn decode(tokens: &[u32]) -> Vec<u8> {
    tokens
        .iter()
        .filter(|&&t| !is_special(t))
        .map(|&t| t as u8)
        .collect()
}

pub fn decode_lossy(tokens: &[u32]) -> String {
    String::from_utf8_lossy(&decode(tokens)).into_owned()
}

/// Generated tokens up to (not including) the first EOS.
pub fn strip_eos(tokens: &[u32]) -> &[u32] {
    match tokens.iter().position(|&t| t == EOS) {
        Some(i) => &tokens[..i],
        None => tokens,
    }
}
