// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reading token sequences from disk.

use std::path::Path;

use crate::error::{LaserError, Result};
use crate::transformer::inference::TokenId;

/// Parses either an inline JSON array (`[1, 2, 3]`) or newline-delimited
/// integers. Blank lines are ignored.
pub fn parse_token_sequence(text: &str) -> Result<Vec<TokenId>> {
    let trimmed = text.trim();
    if trimmed.starts_with('[') {
        return Ok(serde_json::from_str(trimmed)?);
    }
    trimmed
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<TokenId>().map_err(|e| {
                LaserError::invalid(format!(
                    "line {}: invalid token id {:?}: {e}",
                    i + 1,
                    l.trim()
                ))
            })
        })
        .collect()
}

pub fn read_token_sequence(path: &Path) -> Result<Vec<TokenId>> {
    let text = std::fs::read_to_string(path).map_err(|e| LaserError::io(path, e))?;
    parse_token_sequence(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_formats() {
        assert_eq!(parse_token_sequence("[1, 2,3]").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_token_sequence("4\n\n5\n6\n").unwrap(), vec![4, 5, 6]);
        assert!(parse_token_sequence("4\nx\n").is_err());
    }
}
