//! Whitespace tokenizer with a character fallback.
//!
//! Words found in the vocabulary map to a single id. Unknown words are
//! spelled out character by character when every character is known, and
//! otherwise become `<unk>`.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const SEP: &str = "<sep>";
pub const EOA: &str = "<eoa>";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const EOA_ID: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Tokenizer {
    /// Build a vocabulary from text: specials first, then whitespace words
    /// in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Tokenizer {
        let words: BTreeSet<&str> = texts.into_iter().flat_map(str::split_whitespace).collect();
        let mut tokens: Vec<String> = [PAD, UNK, SEP, EOA].iter().map(|s| s.to_string()).collect();
        tokens.extend(
            words
                .into_iter()
                .filter(|w| ![PAD, UNK, SEP, EOA].contains(w))
                .map(String::from),
        );
        Tokenizer::from_tokens(tokens).expect("specials are unique")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Tokenizer> {
        for (i, s) in [PAD, UNK, SEP, EOA].iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("vocabulary must start with {s}"),
                });
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("invalid token {t:?}"),
                });
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate token {t:?}"),
                });
            }
        }
        Ok(Tokenizer { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK, String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for w in text.split_whitespace() {
            if let Some(id) = self.id(w) {
                out.push(id);
                continue;
            }
            let mut buf = [0u8; 4];
            let chars: Option<Vec<usize>> = w
                .chars()
                .map(|c| self.id(c.encode_utf8(&mut buf)))
                .collect();
            match chars {
                Some(ids) => out.extend(ids),
                None => out.push(UNK_ID),
            }
        }
        out
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line index is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Tokenizer> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        Tokenizer::from_tokens(text.lines().map(String::from).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_and_words() {
        let t = Tokenizer::build(["b a", "a c"]);
        assert_eq!(t.len(), 7);
        assert_eq!(t.id(PAD), Some(PAD_ID));
        assert_eq!(t.id(EOA), Some(EOA_ID));
        assert_eq!(t.encode("a b c"), vec![4, 5, 6]);
        assert_eq!(t.decode(&[4, 6]), "a c");
    }

    #[test]
    fn character_fallback() {
        let t = Tokenizer::build(["a b ab"]);
        assert_eq!(t.encode("ba"), vec![t.id("b").unwrap(), t.id("a").unwrap()]);
        assert_eq!(t.encode("bz"), vec![UNK_ID]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let t = Tokenizer::build(["x y z"]);
        t.save(&p).unwrap();
        assert_eq!(Tokenizer::load(&p).unwrap(), t);
    }
}
