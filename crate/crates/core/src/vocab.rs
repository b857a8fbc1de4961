//! Character-level vocabulary with a fixed block of special tokens.

use crate::error::{LadError, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const REJECT: TokenId = 4;
pub const SPECIAL_COUNT: usize = 5;

const SPECIAL_NAMES: [&str; SPECIAL_COUNT] = ["[PAD]", "[BOS]", "[EOS]", "[UNK]", "[Reject]"];

/// Immutable mapping between characters and token ids.
///
/// Ids `0..5` are the specials (`PAD`, `BOS`, `EOS`, `UNK`, `REJECT`); every
/// other id maps to exactly one character, assigned in first-seen order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    chars: Vec<char>,
    ids: HashMap<char, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    chars: String,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = LadError;

    fn try_from(f: VocabFile) -> Result<Self> {
        let v = Vocabulary::build(f.chars.chars())?;
        if v.chars.len() != f.chars.chars().count() {
            return Err(LadError::Config("vocabulary has duplicate characters".into()));
        }
        Ok(v)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile {
            chars: v.chars.iter().collect(),
        }
    }
}

impl Vocabulary {
    pub fn build(source: impl IntoIterator<Item = char>) -> Result<Self> {
        let mut chars = Vec::new();
        let mut ids = HashMap::new();
        for c in source {
            if let std::collections::hash_map::Entry::Vacant(e) = ids.entry(c) {
                e.insert((SPECIAL_COUNT + chars.len()) as TokenId);
                chars.push(c);
            }
        }
        if chars.is_empty() {
            return Err(LadError::InvalidInput(
                "vocabulary source has no characters".into(),
            ));
        }
        Ok(Self { chars, ids })
    }

    pub fn len(&self) -> usize {
        SPECIAL_COUNT + self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id_of(&self, c: char) -> Option<TokenId> {
        self.ids.get(&c).copied()
    }

    pub fn contains(&self, c: char) -> bool {
        self.ids.contains_key(&c)
    }

    /// Characters outside the vocabulary become `UNK`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.chars()
            .map(|c| self.id_of(c).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            out.push_str(&self.token_text(id)?);
        }
        Ok(out)
    }

    /// Text of a single token; specials render as bracketed names.
    pub fn token_text(&self, id: TokenId) -> Result<String> {
        let i = id as usize;
        if i < SPECIAL_COUNT {
            Ok(SPECIAL_NAMES[i].to_string())
        } else {
            self.chars
                .get(i - SPECIAL_COUNT)
                .map(|c| c.to_string())
                .ok_or(LadError::UnknownId(id))
        }
    }

    /// Decode a completion: stops at `EOS`, skips `BOS`/`PAD`.
    pub fn decode_completion(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            match id {
                EOS => break,
                BOS | PAD => {}
                _ => out.push_str(&self.token_text(id)?),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn size_counts_specials() {
        let v = Vocabulary::build("ab".chars()).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id_of('a'), Some(5));
        assert_eq!(v.id_of('b'), Some(6));
    }

    #[test]
    fn duplicates_collapse() {
        let v = Vocabulary::build("abba".chars()).unwrap();
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn deterministic_assignment() {
        let a = Vocabulary::build("hello world".chars()).unwrap();
        let b = Vocabulary::build("hello world".chars()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_source_is_error() {
        assert!(Vocabulary::build("".chars()).is_err());
    }

    #[test]
    fn encode_edge_cases() {
        let v = Vocabulary::build("abc".chars()).unwrap();
        assert!(v.encode("").is_empty());
        assert_eq!(v.decode(&v.encode("abc")).unwrap(), "abc");
        assert_eq!(v.encode("az"), vec![5, UNK]);
        assert_eq!(v.decode(&[REJECT]).unwrap(), "[Reject]");
        assert!(matches!(v.decode(&[99]), Err(LadError::UnknownId(99))));
    }

    #[test]
    fn serde_roundtrip() {
        let v = Vocabulary::build("xyz ".chars()).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(v, back);
    }

    proptest! {
        #[test]
        fn roundtrip_over_alphabet(s in "[a-f ]{0,40}") {
            let v = Vocabulary::build("abcdef ".chars()).unwrap();
            let ids = v.encode(&s);
            prop_assert_eq!(v.decode(&ids).unwrap(), s);
            prop_assert!(ids.iter().all(|&i| i as usize >= SPECIAL_COUNT));
        }

        #[test]
        fn encode_never_emits_control_specials(s in "\\PC{0,30}") {
            let v = Vocabulary::build("abc".chars()).unwrap();
            for id in v.encode(&s) {
                prop_assert!(id != PAD && id != BOS && id != EOS && id != REJECT);
            }
        }
    }
}
