use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Id every out-of-vocabulary word maps to.
pub const UNK_ID: usize = 0;
pub const UNK_TOKEN: &str = "<unk>";

/// Word list; the position of a word is its id. Id 0 is reserved for `<unk>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        Vocabulary::from_list(words)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    /// Builds a vocabulary from `words`; `<unk>` is prepended and duplicates dropped.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut list = vec![UNK_TOKEN.to_string()];
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !list.contains(&w) {
                list.push(w);
            }
        }
        Self::from_list(list)
    }

    fn from_list(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocabulary { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    /// One word per line; line number (from 0) is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.words.join("\n");
        s.push('\n');
        crate::motion::io::write_atomic(path, s.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        if words.first().map(String::as_str) != Some(UNK_TOKEN) {
            return Err(Error::Format {
                path: path.into(),
                line: 1,
                msg: format!("first vocabulary entry must be {UNK_TOKEN}"),
            });
        }
        Ok(Self::from_list(words))
    }
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Raw prompt plus its token ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextPrompt {
    pub raw: String,
    pub ids: Vec<usize>,
}

impl TextPrompt {
    pub fn tokenize(raw: &str, vocab: &Vocabulary) -> Self {
        TextPrompt {
            raw: raw.to_string(),
            ids: split_words(raw).iter().map(|w| vocab.id(w)).collect(),
        }
    }

    /// True when every word was out of vocabulary.
    pub fn all_unknown(&self) -> bool {
        self.ids.iter().all(|&i| i == UNK_ID)
    }
}
