// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level tokenizer used by the bundled toy models.

use crate::transformer::inference::TokenId;

/// Bytes map to ids `0..256`, followed by three special tokens.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const BOS: TokenId = 256;
    pub const EOS: TokenId = 257;
    pub const PAD: TokenId = 258;
    pub const VOCAB_SIZE: usize = 259;

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.bytes().map(TokenId::from).collect()
    }

    /// `BOS` followed by the bytes of `text`.
    pub fn encode_prompt(&self, text: &str) -> Vec<TokenId> {
        let mut ids = Vec::with_capacity(text.len() + 1);
        ids.push(Self::BOS);
        ids.extend(self.encode(text));
        ids
    }

    /// Decodes byte ids as (lossy) UTF-8, dropping special tokens.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let bytes: Vec<u8> = ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_specials() {
        let tok = ByteTokenizer;
        let ids = tok.encode_prompt("héllo");
        assert_eq!(ids[0], ByteTokenizer::BOS);
        assert_eq!(tok.decode(&ids), "héllo");
        assert_eq!(tok.decode(&[104, ByteTokenizer::EOS, 105]), "hi");
    }
}
