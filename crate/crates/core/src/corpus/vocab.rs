use std::collections::{BTreeSet, HashMap};

use super::grammar::{expansions, CONNECTORS, EVENT_BANK, STYLES};
use super::CorpusError;
use crate::metrics::tokenize;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

/// Word-level vocabulary covering every caption the grammar can produce.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let set: BTreeSet<String> = words.into_iter().collect();
        all.extend(set.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())));
        let index = all.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words: all, index }
    }

    /// Vocabulary of the full grammar: all templates, connectors and style wrappers.
    pub fn grammar() -> Self {
        let mut words = Vec::new();
        for ev in EVENT_BANK {
            for t in ev.paired.iter().chain(&ev.withheld) {
                for e in expansions(t) {
                    words.extend(tokenize(&e));
                }
            }
        }
        words.extend(CONNECTORS.iter().map(|c| c.to_string()));
        for (_, pre, post) in STYLES {
            words.extend(tokenize(pre));
            words.extend(tokenize(post));
        }
        Self::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    /// Word ids of `caption`; any unknown word is an error.
    pub fn encode(&self, caption: &str) -> Result<Vec<usize>, CorpusError> {
        tokenize(caption).into_iter().map(|w| self.id(&w).ok_or(CorpusError::UnknownWord(w))).collect()
    }

    /// Space-joined words, stopping at the first end-of-sequence and skipping specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().take_while(|&&i| i != EOS).filter(|&&i| i > EOS).map(|&i| self.words[i].as_str()).collect::<Vec<_>>().join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar_vocabulary_is_small_and_complete() {
        let v = Vocabulary::grammar();
        assert!((100..200).contains(&v.len()), "{}", v.len());
        assert_eq!(v.id("<eos>"), Some(EOS));
        let ids = v.encode("Breaking news: a dog barks, more at eleven").unwrap();
        assert_eq!(v.decode(&ids), "breaking news a dog barks more at eleven");
        assert!(v.encode("a zebra").is_err());
    }
}
