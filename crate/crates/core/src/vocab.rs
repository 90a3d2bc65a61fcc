//! Closed symbol vocabulary and token sequences.
//!
//! Content symbols take ids `0..K`; the four reserved markers follow in the
//! order blank, speaker change, end of sentence, pad. A CTC grid therefore
//! indexes its `K + 1` columns with vocabulary ids directly (blank = `K`).
//! Decoder outputs cover content plus `<sc>` and `<eos>`; use
//! [`Vocabulary::to_output`] / [`Vocabulary::from_output`] to move between the
//! two index spaces.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const BLANK_SYMBOL: &str = "<blank>";
pub const SC_SYMBOL: &str = "<sc>";
pub const EOS_SYMBOL: &str = "<eos>";
pub const PAD_SYMBOL: &str = "<pad>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Vocabulary {
    content: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from distinct content symbols.
    pub fn build<S: AsRef<str>>(symbols: &[S]) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        let mut content = Vec::with_capacity(symbols.len());
        for s in symbols {
            let s = s.as_ref();
            if [BLANK_SYMBOL, SC_SYMBOL, EOS_SYMBOL, PAD_SYMBOL].contains(&s) {
                return Err(Error::ReservedSymbol { symbol: s.to_owned() });
            }
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!(
                    "symbol {s:?} must be non-empty and whitespace free"
                )));
            }
            if index.insert(s.to_owned(), content.len()).is_some() {
                return Err(Error::DuplicateSymbol(s.to_owned()));
            }
            content.push(s.to_owned());
        }
        if content.len() < 2 {
            return Err(Error::VocabularyTooSmall(content.len()));
        }
        Ok(Vocabulary { content, index })
    }

    /// Synthetic vocabulary `w0 .. w{n-1}`.
    pub fn numbered(n: usize) -> Result<Self> {
        let symbols: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        Self::build(&symbols)
    }

    pub fn content_size(&self) -> usize {
        self.content.len()
    }

    /// Total number of ids, reserved markers included.
    pub fn len(&self) -> usize {
        self.content.len() + 4
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn blank_id(&self) -> TokenId {
        self.content.len()
    }

    pub fn sc_id(&self) -> TokenId {
        self.content.len() + 1
    }

    pub fn eos_id(&self) -> TokenId {
        self.content.len() + 2
    }

    pub fn pad_id(&self) -> TokenId {
        self.content.len() + 3
    }

    /// Columns of a CTC grid: content plus blank.
    pub fn ctc_size(&self) -> usize {
        self.content.len() + 1
    }

    /// Columns of a decoder output row: content plus `<sc>` and `<eos>`.
    pub fn output_size(&self) -> usize {
        self.content.len() + 2
    }

    pub fn is_content(&self, id: TokenId) -> bool {
        id < self.content.len()
    }

    /// Decoder output column for `id`; `None` for blank and pad.
    pub fn to_output(&self, id: TokenId) -> Option<usize> {
        let k = self.content.len();
        match id {
            i if i < k => Some(i),
            i if i == self.sc_id() => Some(k),
            i if i == self.eos_id() => Some(k + 1),
            _ => None,
        }
    }

    pub fn from_output(&self, column: usize) -> TokenId {
        let k = self.content.len();
        match column {
            c if c < k => c,
            c if c == k => self.sc_id(),
            c if c == k + 1 => self.eos_id(),
            c => panic!("decoder output column {c} out of range"),
        }
    }

    pub fn symbol(&self, id: TokenId) -> &str {
        let k = self.content.len();
        match id {
            i if i < k => &self.content[i],
            i if i == k => BLANK_SYMBOL,
            i if i == k + 1 => SC_SYMBOL,
            i if i == k + 2 => EOS_SYMBOL,
            i if i == k + 3 => PAD_SYMBOL,
            i => panic!("token id {i} out of range"),
        }
    }

    pub fn id_of(&self, symbol: &str) -> Option<TokenId> {
        match symbol {
            BLANK_SYMBOL => Some(self.blank_id()),
            SC_SYMBOL => Some(self.sc_id()),
            EOS_SYMBOL => Some(self.eos_id()),
            PAD_SYMBOL => Some(self.pad_id()),
            s => self.index.get(s).copied(),
        }
    }

    pub fn content_symbols(&self) -> &[String] {
        &self.content
    }

    /// Encodes a whitespace-separated plain transcript of content symbols.
    pub fn encode_transcript(&self, text: &str) -> Result<TokenSequence> {
        let mut ids = Vec::new();
        for (i, tok) in text.split_whitespace().enumerate() {
            match self.index.get(tok) {
                Some(&id) => ids.push(id),
                None => {
                    return Err(Error::UnknownSymbol {
                        symbol: tok.to_owned(),
                        position: i + 1,
                    })
                }
            }
        }
        Ok(TokenSequence(ids))
    }

    /// Encodes any symbols, reserved markers included.
    pub fn encode_symbols(&self, text: &str) -> Result<TokenSequence> {
        let mut ids = Vec::new();
        for (i, tok) in text.split_whitespace().enumerate() {
            match self.id_of(tok) {
                Some(id) => ids.push(id),
                None => {
                    return Err(Error::UnknownSymbol {
                        symbol: tok.to_owned(),
                        position: i + 1,
                    })
                }
            }
        }
        Ok(TokenSequence(ids))
    }

    pub fn decode(&self, seq: &TokenSequence) -> String {
        seq.0.iter().map(|&id| self.symbol(id)).collect::<Vec<_>>().join(" ")
    }

    /// Checks that a sequence is a plain transcript (content tokens only).
    pub fn check_content(&self, seq: &TokenSequence) -> Result<()> {
        match seq.0.iter().find(|&&id| !self.is_content(id)) {
            Some(&id) => Err(Error::NotContent(id)),
            None => Ok(()),
        }
    }

    pub(crate) fn reindex(&mut self) {
        self.index = self.content.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    }

    /// One symbol per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.content {
            out.push_str(s);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let symbols: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        Self::build(&symbols)
    }
}

/// Ordered token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TokenSequence(Vec<TokenId>);

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSequence(ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.0
    }

    /// Splits on `separator`; a trailing separator yields a trailing empty segment.
    pub fn split_on(&self, separator: TokenId) -> Vec<TokenSequence> {
        self.0
            .split(|&id| id == separator)
            .map(|s| TokenSequence(s.to_vec()))
            .collect()
    }

    pub fn without(&self, id: TokenId) -> TokenSequence {
        TokenSequence(self.0.iter().copied().filter(|&x| x != id).collect())
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(ids: Vec<TokenId>) -> Self {
        TokenSequence(ids)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            content: Vec<String>,
        }
        let raw = Raw::deserialize(d)?;
        let mut v = Vocabulary {
            content: raw.content,
            index: HashMap::new(),
        };
        v.reindex();
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sizes_count_reserved_markers() {
        assert_eq!(Vocabulary::build(&["a", "b"]).unwrap().len(), 6);
        assert_eq!(Vocabulary::numbered(10).unwrap().len(), 14);
    }

    #[test]
    fn duplicate_is_named() {
        let err = Vocabulary::build(&["a", "a"]).unwrap_err();
        assert!(matches!(err, Error::DuplicateSymbol(ref s) if s == "a"));
        assert!(err.to_string().contains("duplicate"));
        let err = Vocabulary::build(&["a", "b", "c", "b"]).unwrap_err();
        assert!(matches!(err, Error::DuplicateSymbol(ref s) if s == "b"));
    }

    #[test]
    fn reserved_ids_are_distinct_and_follow_content() {
        let v = Vocabulary::build(&["x", "y", "z"]).unwrap();
        let ids = [v.blank_id(), v.sc_id(), v.eos_id(), v.pad_id()];
        assert_eq!(ids, [3, 4, 5, 6]);
        for id in 0..v.len() {
            assert_eq!(v.id_of(v.symbol(id)), Some(id));
        }
        assert!(Vocabulary::build(&["a", "<sc>"]).is_err());
        assert!(Vocabulary::build(&["a"]).is_err());
    }

    #[test]
    fn output_columns_round_trip() {
        let v = Vocabulary::numbered(4).unwrap();
        assert_eq!(v.output_size(), 6);
        for c in 0..v.output_size() {
            assert_eq!(v.to_output(v.from_output(c)), Some(c));
        }
        assert_eq!(v.to_output(v.blank_id()), None);
        assert_eq!(v.to_output(v.pad_id()), None);
    }

    #[test]
    fn encode_examples() {
        let v = Vocabulary::build(&["a", "b"]).unwrap();
        assert_eq!(v.encode_transcript("a b a").unwrap().ids(), &[0, 1, 0]);
        assert!(v.encode_transcript("").unwrap().is_empty());
        match v.encode_transcript("a z").unwrap_err() {
            Error::UnknownSymbol { symbol, position } => {
                assert_eq!(symbol, "z");
                assert_eq!(position, 2);
            }
            e => panic!("unexpected {e}"),
        }
        // markers are not transcript content
        assert!(v.encode_transcript("a <sc>").is_err());
        assert_eq!(v.encode_symbols("a <sc> <eos>").unwrap().ids(), &[0, 3, 4]);
    }

    #[test]
    fn split_keeps_trailing_empty_segment() {
        let s = TokenSequence::new(vec![0, 9, 1, 9]);
        let parts = s.split_on(9);
        assert_eq!(parts.len(), 3);
        assert!(parts[2].is_empty());
    }

    #[test]
    fn text_and_json_round_trip() {
        let v = Vocabulary::build(&["hello", "world", "x"]).unwrap();
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id_of("world"), Some(1));
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(idx in proptest::collection::vec(0usize..5, 0..12)) {
            let v = Vocabulary::build(&["alpha", "b", "c3", "dd", "e"]).unwrap();
            let text = idx.iter().map(|&i| v.content_symbols()[i].clone()).collect::<Vec<_>>().join(" ");
            let seq = v.encode_transcript(&text).unwrap();
            prop_assert_eq!(v.decode(&seq), text);
        }
    }
}
