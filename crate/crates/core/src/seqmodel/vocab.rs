use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const START: &str = "<start>";
pub const END: &str = "<end>";
pub const UNK: &str = "<unk>";

/// Token table. Indices 0, 1, 2 are `<start>`, `<end>`, `<unk>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const START_ID: usize = 0;
    pub const END_ID: usize = 1;
    pub const UNK_ID: usize = 2;

    /// Builds a vocabulary from words, sorted, after the reserved tokens.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = words.into_iter().filter(|w| ![START, END, UNK].contains(w)).collect();
        let tokens = [START, END, UNK].into_iter().chain(set).map(str::to_owned).collect();
        Self::from_tokens(tokens).expect("distinct by construction")
    }

    /// Takes a full token list (reserved tokens first, as written to disk).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[0] != START || tokens[1] != END || tokens[2] != UNK {
            return Err(Error::Parse("vocabulary must start with <start>, <end>, <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Parse(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Parse(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps whitespace-separated words to ids; unknown words become `<unk>`.
    pub fn encode(&self, sentence: &str) -> TokenSequence {
        TokenSequence {
            ids: sentence
                .split_whitespace()
                .map(|w| self.id(w).unwrap_or(Self::UNK_ID))
                .collect(),
        }
    }

    pub fn decode(&self, seq: &TokenSequence) -> String {
        seq.ids
            .iter()
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// A caption as vocabulary ids, without sentinels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Checks ids against the vocabulary, the sentinel rule and `max_len`.
    pub fn validate(&self, vocab: &Vocabulary, max_len: usize) -> Result<()> {
        if self.ids.len() > max_len {
            return Err(Error::invalid(format!(
                "sequence of length {} exceeds max length {max_len}",
                self.ids.len()
            )));
        }
        for &id in &self.ids {
            if id >= vocab.len() {
                return Err(Error::IndexOutOfRange {
                    index: id,
                    len: vocab.len(),
                });
            }
            if id == Vocabulary::START_ID || id == Vocabulary::END_ID {
                return Err(Error::invalid("sentinel token inside a sequence"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_first_and_bijective() {
        let v = Vocabulary::from_words(["the", "dog", "the", "runs"]);
        assert_eq!(&v.tokens()[..3], &[START, END, UNK]);
        assert_eq!(v.len(), 6);
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i));
        }
        let seq = v.encode("the dog flies");
        assert_eq!(seq.ids[2], Vocabulary::UNK_ID);
        assert_eq!(v.decode(&v.encode("the dog runs")), "the dog runs");
    }

    #[test]
    fn rejects_bad_token_lists() {
        assert!(Vocabulary::from_tokens(vec!["a".into()]).is_err());
        let dup = vec![START, END, UNK, "a", "a"].into_iter().map(String::from).collect();
        assert!(Vocabulary::from_tokens(dup).is_err());
    }

    #[test]
    fn sequence_validation() {
        let v = Vocabulary::from_words(["a", "b"]);
        assert!(TokenSequence::new(vec![3, 4]).validate(&v, 5).is_ok());
        assert!(TokenSequence::new(vec![3, 4]).validate(&v, 1).is_err());
        assert!(TokenSequence::new(vec![0]).validate(&v, 5).is_err());
        assert!(TokenSequence::new(vec![9]).validate(&v, 5).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::from_words(["x", "y", "z"]);
        v.write(&path).unwrap();
        assert_eq!(Vocabulary::read(&path).unwrap(), v);
    }
}
