use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases and collapses whitespace.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Token/id bijection with reserved ids 0..=3.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    min_freq: usize,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Keeps tokens seen at least `min_freq` times, ordered by descending
    /// frequency then token. `max_size` caps the total including reserved ids.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        min_freq: usize,
        max_size: Option<usize>,
    ) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut docs = 0;
        for doc in corpus {
            docs += 1;
            for tok in normalize_text(doc).split(' ').filter(|t| !t.is_empty()) {
                *counts.entry(tok.to_string()).or_default() += 1;
            }
        }
        if docs == 0 || counts.is_empty() {
            return Err(Error::Empty("vocabulary corpus"));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if let Some(cap) = max_size {
            kept.truncate(cap.saturating_sub(RESERVED.len()));
        }
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Ok(Self::from_tokens(tokens, min_freq))
    }

    fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            tokens,
            min_freq,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn is_special(id: usize) -> bool {
        id < RESERVED.len()
    }

    /// `[BOS, ids.., EOS]`
    pub fn tokenize(&self, report: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(
            normalize_text(report)
                .split(' ')
                .filter(|t| !t.is_empty())
                .map(|t| self.id(t)),
        );
        ids.push(EOS);
        ids
    }

    /// Joins tokens up to the first EOS, skipping BOS and PAD.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != BOS && i != PAD)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Vocab = serde_json::from_str(text)?;
        if raw.tokens.len() < RESERVED.len()
            || raw.tokens[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b)
        {
            return Err(Error::Invalid("vocabulary lacks the reserved tokens".into()));
        }
        Ok(Self::from_tokens(raw.tokens, raw.min_freq))
    }
}
