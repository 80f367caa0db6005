//! Closed vocabulary of the expression grammar and the whitespace tokenizer.

use std::collections::HashMap;

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const UNK: &str = "[UNK]";

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const UNK_ID: usize = 2;

pub const SIZES: [&str; 2] = ["small", "large"];
pub const COLORS: [&str; 8] = [
    "red", "green", "blue", "yellow", "cyan", "magenta", "white", "black",
];
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
const FUNCTION_WORDS: [&str; 9] = [
    "the", "left", "right", "of", "in", "top", "bottom", "above", "below",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = vec![PAD.into(), CLS.into(), UNK.into()];
        for w in words {
            let w = w.into();
            if !all.contains(&w) {
                all.push(w);
            }
        }
        let ids = all.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words: all, ids }
    }

    /// Specials plus every word the scene grammar can emit.
    pub fn standard() -> Self {
        Self::from_words(
            FUNCTION_WORDS
                .iter()
                .chain(&SIZES)
                .chain(&COLORS)
                .chain(&SHAPES)
                .copied(),
        )
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Lowercases, splits on whitespace, maps through the vocabulary, prepends
    /// `[CLS]` and pads or truncates to exactly `max_len` ids.
    pub fn tokenize(&self, expression: &str, max_len: usize) -> Vec<usize> {
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS_ID);
        ids.extend(
            expression
                .to_lowercase()
                .split_whitespace()
                .map(|w| self.id(w)),
        );
        ids.resize(max_len, PAD_ID);
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_expression_is_cls_then_padding() {
        let v = Vocab::standard();
        let ids = v.tokenize("", 20);
        assert_eq!(ids[0], CLS_ID);
        assert!(ids[1..].iter().all(|&i| i == PAD_ID));
        assert_eq!(ids.len(), 20);
    }

    #[test]
    fn known_words_and_padding() {
        let v = Vocab::standard();
        let ids = v.tokenize("The RED circle", 20);
        assert_eq!(ids.len(), 20);
        assert_eq!(&ids[..4], &[CLS_ID, v.id("the"), v.id("red"), v.id("circle")]);
        assert!(ids[1..4].iter().all(|&i| i > UNK_ID));
        assert!(ids[4..].iter().all(|&i| i == PAD_ID));
    }

    #[test]
    fn unknown_words_map_to_unk_and_long_input_truncates() {
        let v = Vocab::standard();
        let ids = v.tokenize("the purple circle", 20);
        assert_eq!(ids[2], UNK_ID);
        let ids = v.tokenize("red red red red red", 4);
        assert_eq!(ids.len(), 4);
        assert_eq!(ids[0], CLS_ID);
    }
}
