use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases and splits on whitespace, with punctuation marks as their own
/// tokens.
pub fn normalize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
        } else if ch.is_ascii_punctuation() && ch != '-' && ch != '\'' {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(ch.to_string());
        } else {
            word.push(ch);
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Bijective token/id mapping with four reserved ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Reserved tokens followed by every normalized corpus token in sorted
    /// order.
    pub fn from_corpus<S: AsRef<str>>(sentences: &[S]) -> Self {
        let words: BTreeSet<String> = sentences.iter().flat_map(|s| normalize(s.as_ref())).collect();
        let tokens = RESERVED.iter().map(|s| s.to_string()).chain(words.into_iter().filter(|w| !RESERVED.contains(&w.as_str())));
        Self::from_tokens(tokens.collect()).expect("corpus vocabulary is well formed")
    }

    /// Tokens in id order; the first four must be the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(Error::Checkpoint("vocabulary must start with <pad> <bos> <eos> <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Checkpoint(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(RESERVED[UNK as usize])
    }

    /// `{"token": id, ...}`.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, u32> = self.tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i as u32)).collect();
        serde_json::to_string_pretty(&map).expect("string map serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, u32> = serde_json::from_str(text)?;
        let mut tokens = vec![None; map.len()];
        for (t, i) in map {
            match tokens.get_mut(i as usize) {
                Some(slot @ None) => *slot = Some(t),
                _ => return Err(Error::Checkpoint(format!("vocabulary ids are not a permutation (id {i})"))),
            }
        }
        Self::from_tokens(tokens.into_iter().map(|t| t.expect("filled")).collect())
    }
}

/// Token ids ending with the first end-of-sentence id.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    /// Truncates after the first end-of-sentence id.
    pub fn new(mut ids: Vec<u32>) -> Self {
        if let Some(p) = ids.iter().position(|&i| i == EOS) {
            ids.truncate(p + 1);
        }
        TokenSequence { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids before the end-of-sentence marker.
    pub fn words(&self) -> &[u32] {
        match self.ids.last() {
            Some(&EOS) => &self.ids[..self.ids.len() - 1],
            _ => &self.ids,
        }
    }
}

/// Normalized tokens plus end-of-sentence, capped at `max_len` ids (the cap
/// keeps the end-of-sentence id).
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let mut ids: Vec<u32> = normalize(text).iter().map(|t| vocab.id(t)).collect();
    ids.truncate(max_len.saturating_sub(1));
    ids.push(EOS);
    TokenSequence { ids }
}

/// Space-joined tokens up to the end-of-sentence id; reserved ids other
/// than unknown are dropped.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocabulary) -> String {
    seq.ids
        .iter()
        .take_while(|&&i| i != EOS)
        .filter(|&&i| i != PAD && i != BOS)
        .map(|&i| vocab.token(i))
        .collect::<Vec<_>>()
        .join(" ")
}
