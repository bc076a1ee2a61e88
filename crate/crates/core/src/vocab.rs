//! Token space and fixed-length token sequences.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

pub type Token = usize;

/// The token index space `0..size`, with display symbols and an optional
/// mask token for absorbing-state models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<String>,
    mask_index: Option<Token>,
}

impl Vocabulary {
    pub fn new(symbols: Vec<String>, mask_index: Option<Token>) -> Result<Self> {
        if symbols.len() < 2 {
            return domain(format!("vocabulary needs at least 2 symbols, got {}", symbols.len()));
        }
        if let Some(m) = mask_index {
            if m >= symbols.len() {
                return domain(format!("mask index {m} outside vocabulary of size {}", symbols.len()));
            }
        }
        let mut seen = HashSet::new();
        for s in &symbols {
            if !seen.insert(s.as_str()) {
                return domain(format!("duplicate vocabulary symbol {s:?}"));
            }
        }
        Ok(Self { symbols, mask_index })
    }

    /// Vocabulary of single ASCII letters `a, b, ...` (digits beyond 26).
    pub fn alphabetic(n: usize) -> Result<Self> {
        Self::new(default_symbols(n), None)
    }

    /// `n` data symbols plus a trailing mask token `#`, so `size() == n + 1`.
    pub fn alphabetic_with_mask(n: usize) -> Result<Self> {
        let mut symbols = default_symbols(n);
        symbols.push("#".to_string());
        Self::new(symbols, Some(n))
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn mask_index(&self) -> Option<Token> {
        self.mask_index
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, token: Token) -> Option<&str> {
        self.symbols.get(token).map(String::as_str)
    }

    /// Number of tokens that can appear in clean data (all but the mask).
    pub fn data_size(&self) -> usize {
        self.size() - usize::from(self.mask_index.is_some())
    }

    /// Parses the vocabulary file format: either a bare JSON list of symbols,
    /// or `{"symbols": [...], "mask": "<symbol>"}` where the mask symbol is
    /// appended after the data symbols.
    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            List(Vec<String>),
            Object {
                symbols: Vec<String>,
                #[serde(default)]
                mask: Option<String>,
            },
        }
        match serde_json::from_str::<Repr>(text)? {
            Repr::List(symbols) => Self::new(symbols, None),
            Repr::Object { mut symbols, mask } => match mask {
                Some(m) => {
                    symbols.push(m);
                    let idx = symbols.len() - 1;
                    Self::new(symbols, Some(idx))
                }
                None => Self::new(symbols, None),
            },
        }
    }

    pub fn to_json(&self) -> String {
        let value = match self.mask_index {
            Some(m) => {
                let data: Vec<&String> =
                    self.symbols.iter().enumerate().filter(|(i, _)| *i != m).map(|(_, s)| s).collect();
                serde_json::json!({ "symbols": data, "mask": self.symbols[m] })
            }
            None => serde_json::json!(self.symbols),
        };
        value.to_string()
    }
}

fn default_symbols(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            if i < 26 {
                char::from(b'a' + i as u8).to_string()
            } else {
                format!("{}", i - 26)
            }
        })
        .collect()
}

/// A sequence of `L >= 1` token indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sequence(Vec<Token>);

impl Sequence {
    pub fn new(tokens: Vec<Token>, vocab_size: usize) -> Result<Self> {
        if tokens.is_empty() {
            return domain("sequence must have length >= 1");
        }
        if let Some(bad) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::Domain(format!("token {bad} outside vocabulary of size {vocab_size}")));
        }
        Ok(Self(tokens))
    }

    pub(crate) fn from_raw(tokens: Vec<Token>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_tokens(self) -> Vec<Token> {
        self.0
    }
}

impl AsRef<[Token]> for Sequence {
    fn as_ref(&self) -> &[Token] {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicates_and_tiny_vocab() {
        assert!(Vocabulary::new(vec!["a".into()], None).is_err());
        assert!(Vocabulary::new(vec!["a".into(), "a".into()], None).is_err());
        assert!(Vocabulary::new(vec!["a".into(), "b".into()], Some(2)).is_err());
    }

    #[test]
    fn json_forms() {
        let v = Vocabulary::from_json(r#"["x","y","z"]"#).unwrap();
        assert_eq!(v.size(), 3);
        assert_eq!(v.mask_index(), None);
        let m = Vocabulary::from_json(r#"{"symbols":["x","y"],"mask":"_"}"#).unwrap();
        assert_eq!(m.size(), 3);
        assert_eq!(m.mask_index(), Some(2));
        assert_eq!(m.data_size(), 2);
        assert_eq!(Vocabulary::from_json(&m.to_json()).unwrap(), m);
        assert_eq!(Vocabulary::from_json(&v.to_json()).unwrap(), v);
    }

    #[test]
    fn sequence_bounds() {
        assert!(Sequence::new(vec![], 3).is_err());
        assert!(Sequence::new(vec![0, 3], 3).is_err());
        assert_eq!(Sequence::new(vec![0, 2], 3).unwrap().len(), 2);
    }
}
