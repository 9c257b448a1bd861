use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SEP: usize = 2;
const RESERVED: [&str; 3] = ["[PAD]", "[UNK]", "[SEP]"];

/// Whitespace-token vocabulary. Ids 0..3 are PAD, UNK, SEP; the rest are
/// ordered by descending corpus frequency, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

fn ranked_tokens<S: AsRef<str>>(corpus: &[S], skip: &HashMap<String, usize>) -> Vec<String> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for doc in corpus {
        for tok in doc.as_ref().split_whitespace() {
            if !skip.contains_key(tok) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.into_iter().map(|(t, _)| t.to_string()).collect()
}

/// Builds a vocabulary of at most `max_size` entries (reserved ids included).
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::EmptyDataset("vocabulary corpus".into()));
    }
    if max_size < RESERVED.len() {
        return Err(Error::Config(format!(
            "vocabulary size {max_size} cannot hold the {} reserved tokens",
            RESERVED.len()
        )));
    }
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    let reserved: HashMap<String, usize> = tokens.iter().cloned().zip(0..).collect();
    tokens.extend(ranked_tokens(corpus, &reserved));
    tokens.truncate(max_size);
    Ok(Vocab::from(tokens))
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Appends tokens unseen so far, leaving every existing id unchanged.
    /// Returns how many were added.
    pub fn extend<S: AsRef<str>>(&mut self, corpus: &[S], max_size: usize) -> usize {
        let before = self.tokens.len();
        for tok in ranked_tokens(corpus, &self.index) {
            if self.tokens.len() >= max_size {
                break;
            }
            self.index.insert(tok.clone(), self.tokens.len());
            self.tokens.push(tok);
        }
        self.tokens.len() - before
    }
}

/// Which half of a (prompt, response) pair a token came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Prompt,
    Response,
}

/// Byte range of a token in its source text.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextSpan {
    pub part: Part,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// `false` marks padding that attention must ignore.
    pub mask: Vec<bool>,
    /// Source span per position; `None` for SEP and padding.
    pub spans: Vec<Option<TextSpan>>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Extends with masked PAD tokens up to `len`.
    pub fn padded(mut self, len: usize) -> Self {
        while self.ids.len() < len {
            self.ids.push(PAD);
            self.mask.push(false);
            self.spans.push(None);
        }
        self
    }
}

fn words(text: &str, part: Part) -> impl Iterator<Item = (&str, TextSpan)> {
    text.split_whitespace().map(move |w| {
        let start = w.as_ptr() as usize - text.as_ptr() as usize;
        (
            w,
            TextSpan {
                part,
                start,
                end: start + w.len(),
            },
        )
    })
}

/// `prompt tokens + SEP + response tokens`, truncated from the right to
/// `max_len`. Unknown words map to UNK.
pub fn tokenize(prompt: &str, response: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    let mut ids = Vec::new();
    let mut spans = Vec::new();
    for (w, span) in words(prompt, Part::Prompt) {
        ids.push(vocab.id(w));
        spans.push(Some(span));
    }
    ids.push(SEP);
    spans.push(None);
    for (w, span) in words(response, Part::Response) {
        ids.push(vocab.id(w));
        spans.push(Some(span));
    }
    ids.truncate(max_len);
    spans.truncate(max_len);
    let mask = vec![true; ids.len()];
    TokenSequence { ids, mask, spans }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order_with_reserved_prefix() {
        let v = build_vocab(&["a b", "a"], 10).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.token(0), Some("[PAD]"));
        assert_eq!(v.id("a"), 3);
        assert_eq!(v.id("b"), 4);
    }

    #[test]
    fn truncation_floor_is_reserved_only() {
        let v = build_vocab(&["a b c"], 3).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.id("a"), UNK);
        assert!(build_vocab(&["a"], 2).is_err());
        assert!(build_vocab::<&str>(&[], 10).is_err());
    }

    #[test]
    fn duplicated_corpus_keeps_order() {
        let one = ["x y y z", "z z q"];
        let two = ["x y y z", "z z q", "x y y z", "z z q"];
        assert_eq!(
            build_vocab(&one, 50).unwrap(),
            build_vocab(&two, 50).unwrap()
        );
    }

    #[test]
    fn tokenize_layout() {
        let v = build_vocab(&["a b"], 10).unwrap();
        let t = tokenize("a", "b", &v, 16);
        assert_eq!(t.ids, vec![v.id("a"), SEP, v.id("b")]);
        assert_eq!(tokenize("", "", &v, 16).ids, vec![SEP]);
        assert_eq!(tokenize("a zzz", "", &v, 16).ids, vec![v.id("a"), UNK, SEP]);
        let long = tokenize("a a a", "b b b", &v, 4);
        assert_eq!(long.ids, vec![3, 3, 3, SEP]);
        assert_eq!(long.mask.len(), 4);
    }

    #[test]
    fn spans_point_into_source() {
        let v = build_vocab(&["hello world"], 10).unwrap();
        let t = tokenize("  hello", "world ", &v, 8);
        let s = t.spans[0].unwrap();
        assert_eq!(
            (s.part, &"  hello"[s.start..s.end]),
            (Part::Prompt, "hello")
        );
        assert!(t.spans[1].is_none());
        let r = t.spans[2].unwrap();
        assert_eq!(&"world "[r.start..r.end], "world");
    }

    #[test]
    fn extend_keeps_existing_ids() {
        let mut v = build_vocab(&["a b b"], 20).unwrap();
        let before = v.clone();
        assert_eq!(v.extend(&["c c a d"], 20), 2);
        for id in 0..before.len() {
            assert_eq!(v.token(id), before.token(id));
        }
        assert_eq!(v.id("c"), 5);
        assert_eq!(v.id("d"), 6);
    }
}
