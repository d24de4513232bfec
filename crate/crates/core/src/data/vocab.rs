use std::collections::HashMap;
use std::path::Path;

use super::Example;
use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const SEP_ID: usize = 3;

pub const RESERVED: [&str; 4] = ["[PAD]", "[CLS]", "[UNK]", "[SEP]"];

/// Whitespace-token vocabulary with the four reserved ids first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Ids are assigned by descending corpus frequency, ties broken
    /// lexicographically, so rebuilding from the same corpus is stable.
    pub fn build<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for ex in examples {
            let texts = std::iter::once(ex.text_a.as_str()).chain(ex.text_b.as_deref());
            for tok in texts.flat_map(str::split_whitespace) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|(t, _)| !RESERVED.contains(t)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens).expect("reserved prefix present")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Schema(
                "vocabulary must start with [PAD], [CLS], [UNK], [SEP]".into(),
            ));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// One token per line; the line index is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    /// `[CLS] a.. ([SEP] b..)`, cut to `max_len` and right-padded with `[PAD]`.
    pub fn tokenize(&self, ex: &Example, max_len: usize) -> Vec<usize> {
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS_ID);
        ids.extend(ex.text_a.split_whitespace().map(|t| self.id(t)));
        if let Some(b) = &ex.text_b {
            ids.push(SEP_ID);
            ids.extend(b.split_whitespace().map(|t| self.id(t)));
        }
        ids.truncate(max_len);
        ids.resize(max_len, PAD_ID);
        ids
    }
}

/// Drops trailing `[PAD]` ids. Padding is masked out of attention, so this
/// never changes the classification-token states.
pub fn trim_padding(ids: &[usize]) -> &[usize] {
    let end = ids.iter().rposition(|&i| i != PAD_ID).map_or(0, |p| p + 1);
    &ids[..end]
}
