use std::collections::HashMap;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Word-level vocabulary with reserved PAD (id 0) and UNK (id 1).
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from `words`, lowercased, in first-seen order
    /// after the two reserved entries.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocab {
            words: Vec::new(),
            ids: HashMap::new(),
        };
        vocab.insert(PAD_TOKEN);
        vocab.insert(UNK_TOKEN);
        for w in words {
            vocab.insert(&w.as_ref().to_lowercase());
        }
        vocab
    }

    fn insert(&mut self, word: &str) {
        if !self.ids.contains_key(word) {
            self.ids.insert(word.to_string(), self.words.len());
            self.words.push(word.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Whitespace-split, lowercased, mapped through the vocabulary, then
    /// truncated or PAD-filled to exactly `max_seq_len` ids.
    pub fn tokenize(&self, caption: &str, max_seq_len: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = caption
            .split_whitespace()
            .take(max_seq_len)
            .map(|w| self.id(&w.to_lowercase()))
            .collect();
        ids.resize(max_seq_len, PAD);
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pads_and_maps() {
        let v = Vocab::new(["red", "cross", "arena"]);
        let ids = v.tokenize("red cross arena", 4);
        assert_eq!(ids, vec![v.id("red"), v.id("cross"), v.id("arena"), PAD]);
        assert_eq!(v.tokenize("", 5), vec![PAD; 5]);
        assert_eq!(v.tokenize("RED Mystery", 2), vec![v.id("red"), UNK]);
    }

    #[test]
    fn truncates_long_captions() {
        let v = Vocab::new(["w"]);
        let caption = vec!["w"; 200].join(" ");
        let ids = v.tokenize(&caption, 121);
        assert_eq!(ids.len(), 121);
        assert!(ids.iter().all(|&i| i == v.id("w")));
    }
}
