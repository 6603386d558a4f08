//! Whitespace vocabulary, `[CLS] ... [SEP]` sequences and masked-token
//! corruption for the language stream.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
pub const RESERVED: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

/// Label value for positions that were not selected for corruption.
pub const IGNORE: usize = usize::MAX;

pub const MLM_RATIO: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(words: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Lowercased whitespace tokens ordered by descending frequency, ties
    /// broken lexicographically.
    pub fn build<S: AsRef<str>>(captions: &[S]) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for c in captions {
            for w in split(c.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(words.into_iter().map(|(w, _)| w).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// One non-reserved token per line; line `k` holds id `k + 5`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for tok in &self.tokens[RESERVED.len()..] {
            s.push_str(tok);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// `[CLS] tokens [SEP]` right-padded to `max_len`. Captions too long for
    /// `max_len` are truncated before `[SEP]`.
    pub fn encode(&self, caption: &str, max_len: usize) -> Result<TokenSequence> {
        if max_len < 3 {
            return Err(Error::Config(format!("max sequence length {max_len} is below 3")));
        }
        let mut ids = vec![CLS];
        ids.extend(split(caption).take(max_len - 2).map(|w| self.id(&w)));
        ids.push(SEP);
        let attention_len = ids.len();
        ids.resize(max_len, PAD);
        Ok(TokenSequence {
            mlm_labels: vec![IGNORE; ids.len()],
            ids,
            attention_len,
        })
    }
}

fn split(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

pub fn tokenize(caption: &str) -> Vec<String> {
    split(caption).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// Original id at corrupted positions, [`IGNORE`] elsewhere.
    pub mlm_labels: Vec<usize>,
    /// Count of non-pad positions; `ids[attention_len - 1]` is `[SEP]`.
    pub attention_len: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions strictly between `[CLS]` and `[SEP]`.
    pub fn content_range(&self) -> std::ops::Range<usize> {
        1..self.attention_len.saturating_sub(1)
    }

    pub fn masked_count(&self) -> usize {
        self.mlm_labels.iter().filter(|&&l| l != IGNORE).count()
    }

    /// Undo corruption using the recorded labels.
    pub fn restore(&self) -> Vec<usize> {
        self.ids
            .iter()
            .zip(&self.mlm_labels)
            .map(|(&id, &l)| if l == IGNORE { id } else { l })
            .collect()
    }
}

/// Select each content position with probability `ratio`; a selected token
/// becomes `[MASK]` 80% of the time, id 0 10% of the time and is kept
/// otherwise. The original id is recorded in `mlm_labels`.
pub fn apply_mlm_mask<R: Rng + ?Sized>(seq: &TokenSequence, ratio: f64, rng: &mut R) -> TokenSequence {
    let mut out = seq.clone();
    out.mlm_labels = vec![IGNORE; seq.len()];
    for i in seq.content_range() {
        if rng.gen::<f64>() >= ratio {
            continue;
        }
        out.mlm_labels[i] = seq.ids[i];
        let r: f64 = rng.gen();
        if r < 0.8 {
            out.ids[i] = MASK;
        } else if r < 0.9 {
            out.ids[i] = PAD;
        }
    }
    out
}
