//! Word/character hybrid tokenizer.
//!
//! Id layout: `0` pad, `1` begin, `2` end, `3` unknown character, then one
//! id per printable ASCII character (space through `~`), then one id per
//! vocabulary word. Text is lowercased and split into alphanumeric runs and
//! single punctuation characters; whitespace carries no token. Known runs
//! become word ids, everything else character ids.

use std::collections::HashMap;

use clipladder_core::error::{Error, Result};
use clipladder_core::eval::Tokenizer;

pub const PAD: usize = 0;
pub const BEGIN: usize = 1;
pub const END: usize = 2;
pub const UNKNOWN_CHAR: usize = 3;
const CHAR_BASE: usize = 4;
const FIRST_CHAR: u8 = b' ';
const LAST_CHAR: u8 = b'~';
const WORD_BASE: usize = CHAR_BASE + (LAST_CHAR - FIRST_CHAR) as usize + 1;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece<'a> {
    Word(&'a str),
    Char(char),
}

#[derive(Debug, Clone)]
pub struct WordTokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
    context_length: usize,
}

impl WordTokenizer {
    /// Words are lowercased; duplicates and non-alphanumeric words are rejected.
    pub fn new<S: AsRef<str>>(words: &[S], context_length: usize) -> Result<Self> {
        if context_length < 3 {
            return Err(Error::Config(format!("context_length must be at least 3, got {context_length}")));
        }
        let mut index = HashMap::new();
        let mut list = Vec::with_capacity(words.len());
        for w in words {
            let w = w.as_ref().to_lowercase();
            if w.is_empty() || !w.chars().all(|c| c.is_ascii_alphanumeric()) {
                return Err(Error::Config(format!("vocabulary word `{w}` must be non-empty ASCII alphanumeric")));
            }
            if index.insert(w.clone(), WORD_BASE + list.len()).is_some() {
                return Err(Error::Config(format!("vocabulary word `{w}` listed twice")));
            }
            list.push(w);
        }
        Ok(Self { words: list, index, context_length })
    }

    pub fn vocab_size(&self) -> usize {
        WORD_BASE + self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    fn pieces(text: &str) -> Vec<Piece<'_>> {
        let mut out = Vec::new();
        let mut start = None;
        for (i, c) in text.char_indices() {
            if c.is_ascii_alphanumeric() {
                start.get_or_insert(i);
                continue;
            }
            if let Some(s) = start.take() {
                out.push(Piece::Word(&text[s..i]));
            }
            if !c.is_whitespace() {
                out.push(Piece::Char(c));
            }
        }
        if let Some(s) = start {
            out.push(Piece::Word(&text[s..]));
        }
        out
    }

    fn char_id(c: char) -> usize {
        match u8::try_from(c) {
            Ok(b) if (FIRST_CHAR..=LAST_CHAR).contains(&b) => CHAR_BASE + (b - FIRST_CHAR) as usize,
            _ => UNKNOWN_CHAR,
        }
    }

    /// Content ids without begin, end or padding.
    pub fn content_ids(&self, text: &str) -> Vec<usize> {
        let lower = text.to_lowercase();
        let mut ids = Vec::new();
        for p in Self::pieces(&lower) {
            match p {
                Piece::Word(w) => match self.index.get(w) {
                    Some(&id) => ids.push(id),
                    None => ids.extend(w.chars().map(Self::char_id)),
                },
                Piece::Char(c) => ids.push(Self::char_id(c)),
            }
        }
        ids
    }

    /// `[begin, content.., end, pad..]` of exactly `context_length` ids;
    /// over-long content is cut so that the end token survives.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.context_length);
        ids.push(BEGIN);
        let content = self.content_ids(text);
        ids.extend(content.into_iter().take(self.context_length - 2));
        ids.push(END);
        ids.resize(self.context_length, PAD);
        ids
    }

    /// Inverse up to whitespace: words are space separated, consecutive
    /// character ids are glued together.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        let mut last_word = false;
        for &id in ids {
            match id {
                PAD | BEGIN => {}
                END => break,
                UNKNOWN_CHAR => {
                    if last_word {
                        out.push(' ');
                    }
                    out.push('\u{fffd}');
                    last_word = false;
                }
                id if id < WORD_BASE => {
                    if last_word {
                        out.push(' ');
                    }
                    out.push((FIRST_CHAR + (id - CHAR_BASE) as u8) as char);
                    last_word = false;
                }
                id => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(self.words.get(id - WORD_BASE).map_or("", String::as_str));
                    last_word = true;
                }
            }
        }
        out
    }
}

impl Tokenizer for WordTokenizer {
    fn context_length(&self) -> usize {
        self.context_length
    }

    fn encoded_len(&self, text: &str) -> usize {
        self.content_ids(text).len() + 2
    }

    fn encode(&self, text: &str) -> Result<Vec<usize>> {
        Ok(self.tokenize(text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> WordTokenizer {
        WordTokenizer::new(&["a", "red", "circle", "photo", "of"], 8).unwrap()
    }

    #[test]
    fn empty_text() {
        assert_eq!(tok().tokenize(""), vec![BEGIN, END, PAD, PAD, PAD, PAD, PAD, PAD]);
    }

    #[test]
    fn words_and_characters() {
        let t = tok();
        let ids = t.tokenize("A red zq.");
        assert_eq!(ids[1], WORD_BASE);
        assert_eq!(ids[2], WORD_BASE + 1);
        assert_eq!(ids[3], WordTokenizer::char_id('z'));
        assert_eq!(ids[5], WordTokenizer::char_id('.'));
        assert_eq!(t.detokenize(&ids), "a red zq.");
    }

    #[test]
    fn truncation_keeps_end() {
        let ids = tok().tokenize("a photo of a red circle a red circle");
        assert_eq!(ids.len(), 8);
        assert_eq!(*ids.last().unwrap(), END);
    }

    #[test]
    fn short_context_rejected() {
        assert!(matches!(WordTokenizer::new(&["a"], 2), Err(Error::Config(_))));
    }
}
