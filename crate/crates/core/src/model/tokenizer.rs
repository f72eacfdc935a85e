//! Byte-level tokenizer: token id = UTF-8 byte, plus a BOS marker.

pub const BYTE_VOCAB: usize = 256;
pub const N_SPECIAL: usize = 1;
pub const BOS: u32 = 256;

/// BOS followed by the UTF-8 bytes of `text`.
pub fn tokenize(text: &str) -> Vec<u32> {
    let mut out = Vec::with_capacity(text.len() + 1);
    out.push(BOS);
    out.extend(text.bytes().map(u32::from));
    out
}

/// Drops special tokens and decodes the remaining bytes. Invalid UTF-8
/// (possible in sampled continuations) is replaced with U+FFFD.
pub fn detokenize(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|&&t| (t as usize) < BYTE_VOCAB)
        .map(|&t| t as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
