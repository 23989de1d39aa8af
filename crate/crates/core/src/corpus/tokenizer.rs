//! Word-level tokenizer with a closed vocabulary.
//!
//! Base words are the sorted union of the caption word pool and the
//! instruction-template word pool, so any text the corpus can generate
//! tokenizes without `<unk>`. The eight special tokens sit at the highest
//! ids, in a fixed order, so embedding rows can be partitioned into a
//! "base" block and a "special" block by a single split index.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPECIALS: [&str; 8] =
    ["<pad>", "<bos>", "<eos>", "<som>", "<eom>", "<mholder_in>", "<mholder_out>", "<unk>"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build the standard vocabulary from the closed word pools.
    pub fn standard() -> Self {
        let mut base: Vec<&str> = super::captions::caption_word_pool();
        base.extend(super::instruction::instruction_word_pool());
        base.sort_unstable();
        base.dedup();
        let mut words: Vec<String> = base.into_iter().map(str::to_owned).collect();
        words.extend(SPECIALS.iter().map(|s| s.to_string()));
        Self::from_words(words)
    }

    fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().cloned().enumerate().map(|(i, w)| (w, i)).collect();
        Self { words, index }
    }

    /// Rebuild from a saved word list, validating the special-token block.
    pub fn from_saved_words(words: Vec<String>) -> Result<Self> {
        if words.len() < SPECIALS.len() {
            return Err(Error::config("vocab word list shorter than the special block".to_string()));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            let at = words.len() - SPECIALS.len() + i;
            if words.get(at).map(String::as_str) != Some(*s) {
                return Err(Error::config(format!(
                    "vocab word list is malformed: expected special '{s}' at id {at}"
                )));
            }
        }
        Ok(Self::from_words(words))
    }

    /// The full word list, for embedding into checkpoints.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Number of non-special words; special ids are `n_base()..len()`.
    pub fn n_base(&self) -> usize {
        self.words.len() - SPECIALS.len()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn pad(&self) -> usize {
        self.n_base()
    }
    pub fn bos(&self) -> usize {
        self.n_base() + 1
    }
    pub fn eos(&self) -> usize {
        self.n_base() + 2
    }
    pub fn som(&self) -> usize {
        self.n_base() + 3
    }
    pub fn eom(&self) -> usize {
        self.n_base() + 4
    }
    pub fn mholder_in(&self) -> usize {
        self.n_base() + 5
    }
    pub fn mholder_out(&self) -> usize {
        self.n_base() + 6
    }
    pub fn unk(&self) -> usize {
        self.n_base() + 7
    }

    /// Lowercase, split on whitespace, map unknown words to `<unk>`.
    /// Literal special-token spellings map to their ids.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|raw| {
                let w = raw.to_lowercase();
                self.id(&w).unwrap_or_else(|| self.unk())
            })
            .collect()
    }

    /// Join words with single spaces; inverse of `tokenize` for in-pool text.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.words)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::config(format!("cannot read vocab {}: {e}", path.display())))?;
        let words: Vec<String> = serde_json::from_slice(&bytes)?;
        Self::from_saved_words(words)
            .map_err(|e| Error::config(format!("vocab file {}: {}", path.display(), e.message)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_occupy_the_highest_ids_in_order() {
        let v = Vocab::standard();
        assert_eq!(v.word(v.pad()), "<pad>");
        assert_eq!(v.word(v.bos()), "<bos>");
        assert_eq!(v.word(v.eos()), "<eos>");
        assert_eq!(v.word(v.som()), "<som>");
        assert_eq!(v.word(v.eom()), "<eom>");
        assert_eq!(v.word(v.mholder_in()), "<mholder_in>");
        assert_eq!(v.word(v.mholder_out()), "<mholder_out>");
        assert_eq!(v.word(v.unk()), "<unk>");
        assert_eq!(v.unk(), v.len() - 1);
        assert!(v.len() > 100 && v.len() < 200, "vocab size {}", v.len());
    }

    #[test]
    fn tokenize_round_trips_pool_text() {
        let v = Vocab::standard();
        let text = "a person walks to the left slowly";
        let ids = v.tokenize(text);
        assert_eq!(v.detokenize(&ids), text);
        assert!(!ids.contains(&v.unk()));
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocab::standard();
        let ids = v.tokenize("a zebra walks");
        assert_eq!(ids[1], v.unk());
        assert_eq!(ids[0], v.id("a").unwrap());
        assert_eq!(ids[2], v.id("walks").unwrap());
    }

    #[test]
    fn save_load_round_trip_preserves_ids() {
        let v = Vocab::standard();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        v.save(&path).unwrap();
        let w = Vocab::load(&path).unwrap();
        assert_eq!(v.len(), w.len());
        for i in 0..v.len() {
            assert_eq!(v.word(i), w.word(i));
        }
    }
}
