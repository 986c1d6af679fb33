//! Token vocabularies with reserved sentence-boundary and unknown symbols.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const BOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const UNK_ID: usize = 2;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Dense index map; ids 0, 1, 2 are BOS, EOS and UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in [BOS, EOS, UNK] {
            v.insert(t);
        }
        v
    }
}

impl Vocab {
    /// Builds a vocabulary from tokens in first-seen order.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocab::default();
        for t in tokens {
            v.insert(t.as_ref());
        }
        v
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
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

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the index.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, VocabError> {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for (i, line) in text.lines().enumerate() {
            let tok = line.trim_end_matches('\r');
            let err = |msg: &str| VocabError::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(err("token must be non-empty and contain no whitespace"));
            }
            if v.index.contains_key(tok) {
                return Err(err("duplicate token"));
            }
            v.insert(tok);
        }
        for (id, t) in [(BOS_ID, BOS), (EOS_ID, EOS), (UNK_ID, UNK)] {
            if v.token(id) != Some(t) {
                return Err(VocabError::Parse {
                    line: id + 1,
                    msg: format!("expected reserved token {t}"),
                });
            }
        }
        Ok(v)
    }

    pub fn read(path: &Path) -> Result<Self, VocabError> {
        let text = std::fs::read_to_string(path).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<(), VocabError> {
        std::fs::write(path, self.to_file_string()).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_dense_indices() {
        let v = Vocab::from_tokens(["a", "b", "a", "c"]);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id(BOS), Some(BOS_ID));
        assert_eq!(v.id("a"), Some(3));
        assert_eq!(v.id("c"), Some(5));
        assert_eq!(v.id_or_unk("zzz"), UNK_ID);
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i));
        }
    }

    #[test]
    fn file_round_trip() {
        let v = Vocab::from_tokens(["query@3", "Paris@s"]);
        assert_eq!(Vocab::parse(&v.to_file_string()).unwrap(), v);
        assert!(Vocab::parse("<s>\n</s>\n<unk>\na\na\n").is_err());
        assert!(Vocab::parse("a\nb\n").is_err());
        assert!(Vocab::parse("<s>\n</s>\n<unk>\n\n").is_err());
    }
}
