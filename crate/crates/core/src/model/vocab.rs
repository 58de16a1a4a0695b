use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK_TOKEN: &str = "<unk>";

/// Token strings indexed by id; the id of a token is its line number in the
/// vocabulary file.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary entry {t:?} at line {}", i + 1)));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
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

    /// Whitespace-tokenizes `text`; unknown words map to `<unk>` when the
    /// vocabulary has it and are an error otherwise.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let unk = self.id(UNK_TOKEN);
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .or(unk)
                    .ok_or_else(|| Error::Input(format!("word {w:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&i| self.token(i).ok_or_else(|| Error::Input(format!("id {i} outside vocabulary of {}", self.len()))))
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "<pad>\n<s>\n</s>\ncat\nsat\n").unwrap();
        let v = Vocab::load(&path).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.encode("cat sat cat").unwrap(), vec![3, 4, 3]);
        assert_eq!(v.decode(&[3, 4]).unwrap(), "cat sat");
        assert!(v.encode("dog").is_err());
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
    }

    #[test]
    fn unknown_words_use_unk_when_present() {
        let v = Vocab::new(vec!["<pad>".into(), UNK_TOKEN.into(), "a".into()]).unwrap();
        assert_eq!(v.encode("a b").unwrap(), vec![2, 1]);
        assert!(Vocab::new(vec!["a".into(), "a".into()]).is_err());
    }
}
