//! Fixed 64-symbol vocabulary with whitespace tokenization.

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const EOS: usize = 1;

const SYMBOLS: [&str; 64] = [
    "<pad>", "<eos>", "|", "?", //
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", //
    "a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l", "m", "n", "o", "p", //
    "yes", "no", "true", "false", "even", "odd", "count", "last", "first", "most", //
    "is", "the", "of", "in", "sorted", "order", "pattern", "contains", "symbol", "which", //
    "answer", "not", "it", "up", "down", "same", "number", "copy", "majority", "parity", //
    "sequence", "does", "has", "what",
];

pub const VOCAB_SIZE: usize = SYMBOLS.len();

pub fn symbols() -> &'static [&'static str] {
    &SYMBOLS
}

pub fn token_id(symbol: &str) -> Option<usize> {
    SYMBOLS.iter().position(|&s| s == symbol)
}

/// Splits on whitespace and maps each word to its id.
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .enumerate()
        .map(|(i, w)| {
            token_id(w).ok_or_else(|| Error::Template(format!("word {w:?} at position {i} is not in the vocabulary")))
        })
        .collect()
}

pub fn detokenize(ids: &[usize]) -> Result<String> {
    let words = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            SYMBOLS.get(id).copied().ok_or(Error::Input {
                token: id,
                position: i,
                vocab_size: VOCAB_SIZE,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(words.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symbols_are_unique() {
        let mut s = SYMBOLS.to_vec();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 64);
    }

    #[test]
    fn roundtrip() {
        let ids = tokenize("a b | parity of a ?").unwrap();
        assert_eq!(detokenize(&ids).unwrap(), "a b | parity of a ?");
        assert!(tokenize("a zebra").is_err());
    }
}
