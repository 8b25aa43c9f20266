//! Wordpiece sub-tokenization against a fixed vocabulary, with span
//! bookkeeping from sub-tokens back to source words.
//!
//! The vocabulary is a plain text file, one sub-token per line, id = line
//! number. Continuation pieces carry the standard `##` prefix. Tokenization
//! is uncased: `tokenize_words` lowercases before segmenting.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// Words longer than this are mapped straight to `[UNK]`.
pub const MAX_WORD_CHARS: usize = 100;

/// An immutable sub-token vocabulary with cached control-token ids.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pad: usize,
    unk: usize,
    cls: usize,
    sep: usize,
    mask: usize,
}

impl Vocab {
    /// Build a vocabulary from sub-token strings, id = position.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::InvalidInput(format!("empty vocab entry at id {id}")));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::InvalidInput(format!("duplicate vocab entry `{tok}`")));
            }
        }
        let control = |name: &str| -> Result<usize> {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::InvalidInput(format!("vocab is missing control token {name}")))
        };
        Ok(Vocab {
            pad: control(PAD)?,
            unk: control(UNK)?,
            cls: control(CLS)?,
            sep: control(SEP)?,
            mask: control(MASK)?,
            tokens,
            index,
        })
    }

    /// Load a vocabulary file: one sub-token per line, id = line number.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).filter(|l| !l.is_empty()))
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

    /// The surface string of `id`. Panics on out-of-range ids.
    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn pad_id(&self) -> usize {
        self.pad
    }
    pub fn unk_id(&self) -> usize {
        self.unk
    }
    pub fn cls_id(&self) -> usize {
        self.cls
    }
    pub fn sep_id(&self) -> usize {
        self.sep
    }
    pub fn mask_id(&self) -> usize {
        self.mask
    }

    pub fn is_control(&self, id: usize) -> bool {
        id == self.pad || id == self.unk || id == self.cls || id == self.sep || id == self.mask
    }
}

/// Sub-token ids with one half-open `(start, end)` span per source word.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SubtokenSeq {
    pub ids: Vec<usize>,
    pub word_spans: Vec<(usize, usize)>,
}

impl SubtokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Greedy longest-match-first Wordpiece segmentation of one word.
///
/// The caller lowercases. Continuation pieces are looked up with the `##`
/// prefix. If any suffix cannot be matched, the whole word collapses to
/// `[UNK]`, as do words longer than [`MAX_WORD_CHARS`] characters.
pub fn wordpiece(word: &str, v: &Vocab) -> Vec<usize> {
    if word.is_empty() {
        return Vec::new();
    }
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        return vec![v.unk_id()];
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut matched = None;
        let mut end = chars.len();
        while end > start {
            let mut piece = String::new();
            if start > 0 {
                piece.push_str("##");
            }
            piece.extend(&chars[start..end]);
            if let Some(id) = v.id(&piece) {
                matched = Some(id);
                break;
            }
            end -= 1;
        }
        match matched {
            Some(id) => {
                pieces.push(id);
                start = end;
            }
            None => return vec![v.unk_id()],
        }
    }
    pieces
}

/// Tokenize a word list (lowercasing first), recording one span per word.
pub fn tokenize_words(words: &[String], v: &Vocab) -> SubtokenSeq {
    let mut seq = SubtokenSeq::default();
    for word in words {
        let start = seq.ids.len();
        seq.ids.extend(wordpiece(&word.to_lowercase(), v));
        seq.word_spans.push((start, seq.ids.len()));
    }
    seq
}

#[cfg(test)]
pub(crate) fn test_vocab() -> Vocab {
    let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP, MASK, "|", "is", "olympic", "##s", "2005", "host", "city"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for c in 'a'..='z' {
        tokens.push(c.to_string());
        tokens.push(format!("##{c}"));
    }
    for d in '0'..='9' {
        tokens.push(d.to_string());
        tokens.push(format!("##{d}"));
    }
    let mut seen = std::collections::HashSet::new();
    tokens.retain(|t| seen.insert(t.clone()));
    Vocab::from_tokens(tokens).unwrap()
}
