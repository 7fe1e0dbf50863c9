//! Character-level token inventory with the reserved ids the models need:
//! blank (always id 0) for CTC, an unknown marker, and one shared
//! start/end-of-sentence id used by the attention decoder and the LM.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const BLANK_TOKEN: &str = "<blank>";
pub const UNK_TOKEN: &str = "<unk>";
pub const SOS_EOS_TOKEN: &str = "<sos/eos>";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from the real (non-reserved) tokens, in order. Layout:
    /// `[<blank>, <unk>, tokens..., <sos/eos>]`.
    pub fn new<S: AsRef<str>>(real_tokens: &[S]) -> Result<Self> {
        let mut tokens = Vec::with_capacity(real_tokens.len() + 3);
        tokens.push(BLANK_TOKEN.to_string());
        tokens.push(UNK_TOKEN.to_string());
        for t in real_tokens {
            tokens.push(t.as_ref().to_string());
        }
        tokens.push(SOS_EOS_TOKEN.to_string());
        Self::from_tokens(tokens)
    }

    /// Rebuild from a full token list (checkpoint loading path).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 {
            return Err(Error::Config("vocabulary needs at least one real token".to_string()));
        }
        if tokens[0] != BLANK_TOKEN || tokens[1] != UNK_TOKEN || tokens.last().map(String::as_str) != Some(SOS_EOS_TOKEN) {
            return Err(Error::Config(
                "vocabulary must be [<blank>, <unk>, tokens..., <sos/eos>]".to_string(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate token {t:?} in vocabulary")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// One real token per character of `chars`.
    pub fn from_chars(chars: &str) -> Result<Self> {
        let toks: Vec<String> = chars.chars().map(|c| c.to_string()).collect();
        Self::new(&toks)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn blank(&self) -> usize {
        0
    }

    pub fn unk(&self) -> usize {
        1
    }

    pub fn sos_eos(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn is_reserved(&self, id: usize) -> bool {
        id == self.blank() || id == self.unk() || id == self.sos_eos()
    }

    /// Character-level encoding; whitespace is dropped, unknown characters
    /// map to the unk id.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| self.index.get(c.to_string().as_str()).copied().unwrap_or(self.unk()))
            .collect()
    }

    /// Inverse of `encode` for real tokens; reserved ids are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !self.is_reserved(i))
            .filter_map(|&i| self.token(i))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_reserved_ids() {
        let v = Vocabulary::from_chars("abc").unwrap();
        assert_eq!(v.size(), 6);
        assert_eq!(v.blank(), 0);
        assert_eq!(v.unk(), 1);
        assert_eq!(v.sos_eos(), 5);
        assert_eq!(v.id("a"), Some(2));
    }

    #[test]
    fn encode_decode_roundtrip_with_unk() {
        let v = Vocabulary::from_chars("ab").unwrap();
        let ids = v.encode("a bz");
        assert_eq!(ids, vec![2, 3, v.unk()]);
        assert_eq!(v.decode(&[2, 3]), "ab");
    }

    #[test]
    fn rejects_duplicates() {
        assert!(Vocabulary::new(&["a", "a"]).is_err());
    }
}
