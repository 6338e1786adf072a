//! Whitespace word-level tokenizer over a fixed toy vocabulary.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// The text template wrapped around every class name.
pub const TEMPLATE: &str = "a photo of a";

/// Fixed vocabulary. Word ids are assigned by position in the sorted
/// unique word list; SOS and EOS take the two ids after the words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn build<I, S>(words: I) -> Vocab
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = words.into_iter().map(Into::into).collect();
        for w in TEMPLATE.split_whitespace() {
            all.push(w.to_string());
        }
        all.sort();
        all.dedup();
        let index = all
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab { words: all, index }
    }

    /// Words plus the SOS/EOS specials.
    pub fn size(&self) -> usize {
        self.words.len() + 2
    }

    pub fn sos(&self) -> usize {
        self.words.len()
    }

    pub fn eos(&self) -> usize {
        self.words.len() + 1
    }

    pub fn word_id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::invalid("tokenize", format!("unknown word {word:?}")))
    }

    /// Token ids of a whitespace-separated phrase (no specials).
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.word_id(w)).collect()
    }

    pub fn template_ids(&self) -> Vec<usize> {
        self.encode(TEMPLATE).expect("template words are always in the vocabulary")
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Class-name registry: maps class ids to their tokenized names.
#[derive(Debug, Clone, Default)]
pub struct ClassSet {
    entries: Vec<(usize, String, Vec<usize>)>,
}

impl ClassSet {
    pub fn register(vocab: &Vocab, classes: &[(usize, String)]) -> Result<ClassSet> {
        let mut entries = Vec::with_capacity(classes.len());
        for (id, name) in classes {
            entries.push((*id, name.clone(), vocab.encode(name)?));
        }
        Ok(ClassSet { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Position of a class id within this set.
    pub fn position(&self, class_id: usize) -> Option<usize> {
        self.entries.iter().position(|(id, _, _)| *id == class_id)
    }

    pub fn tokens(&self, class_id: usize) -> Result<&[usize]> {
        self.entries
            .iter()
            .find(|(id, _, _)| *id == class_id)
            .map(|(_, _, t)| t.as_slice())
            .ok_or_else(|| Error::invalid("class-set", format!("unknown class id {class_id}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &str, &[usize])> {
        self.entries
            .iter()
            .map(|(id, name, toks)| (*id, name.as_str(), toks.as_slice()))
    }

    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|(id, _, _)| *id).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_follow_sorted_order() {
        let v = Vocab::build(["red square", "blue circle"].iter().flat_map(|s| s.split(' ')));
        // sorted: a, blue, circle, of, photo, red, square
        assert_eq!(v.word_id("a").unwrap(), 0);
        assert_eq!(v.word_id("blue").unwrap(), 1);
        assert_eq!(v.word_id("square").unwrap(), 6);
        assert_eq!(v.sos(), 7);
        assert_eq!(v.eos(), 8);
        assert_eq!(v.size(), 9);
    }

    #[test]
    fn unknown_word_rejected() {
        let v = Vocab::build(["red"]);
        assert!(v.encode("green").is_err());
    }

    #[test]
    fn class_set_lookup() {
        let v = Vocab::build(["red", "square", "blue", "circle"]);
        let cs = ClassSet::register(
            &v,
            &[(3, "red square".into()), (7, "blue circle".into())],
        )
        .unwrap();
        assert_eq!(cs.len(), 2);
        assert_eq!(cs.position(7), Some(1));
        assert!(cs.tokens(5).is_err());
        assert_eq!(cs.tokens(3).unwrap().len(), 2);
    }
}
