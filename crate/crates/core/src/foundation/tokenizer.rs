use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const OOV_ID: usize = 1;

/// Closed vocabulary of the templated reports and class prompts.
pub const REPORT_VOCABULARY: [&str; 60] = [
    "ct",
    "pet",
    "scan",
    "shows",
    "with",
    "no",
    "normal",
    "lesion",
    "mass",
    "abnormality",
    "measuring",
    "mm",
    "uptake",
    "of",
    "in",
    "the",
    "and",
    "chest",
    "neck",
    "head",
    "clear",
    "right",
    "left",
    "upper",
    "lower",
    "lobe",
    "lung",
    "oropharynx",
    "larynx",
    "hypopharynx",
    "nasopharynx",
    "tonsil",
    "tongue",
    "base",
    "tiny",
    "small",
    "medium",
    "large",
    "bulky",
    "low",
    "moderate",
    "high",
    "intense",
    "patient",
    "follow",
    "up",
    "findings",
    "seen",
    "6",
    "8",
    "10",
    "12",
    "14",
    "16",
    "18",
    "20",
    "22",
    "24",
    "26",
    "28",
];

/// Lowercase whitespace tokenizer. Id 0 is padding, id 1 the OOV bucket,
/// vocabulary words start at 2.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    ids: HashMap<String, usize>,
    max_tokens: usize,
}

impl Tokenizer {
    pub fn new(words: &[&str], vocab_size: usize, max_tokens: usize) -> Result<Self> {
        if words.len() + 2 > vocab_size {
            return Err(Error::Config(format!(
                "{} words do not fit a vocabulary of {vocab_size}",
                words.len()
            )));
        }
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.to_lowercase(), i + 2))
            .collect();
        Ok(Self { ids, max_tokens })
    }

    pub fn report(vocab_size: usize, max_tokens: usize) -> Result<Self> {
        Self::new(&REPORT_VOCABULARY, vocab_size, max_tokens)
    }

    /// Encodes at most `max_tokens` ids, without padding.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .take(self.max_tokens)
            .map(|w| *self.ids.get(&w.to_lowercase()).unwrap_or(&OOV_ID))
            .collect()
    }

    /// Encodes and right-pads with [`PAD_ID`] to exactly `max_tokens`.
    pub fn encode_padded(&self, text: &str) -> Vec<usize> {
        let mut ids = self.encode(text);
        ids.resize(self.max_tokens, PAD_ID);
        ids
    }
}

/// Drops trailing padding; an all-padding sequence keeps one pad token.
/// Padding positions are excluded from attention and pooling, which is
/// equivalent to evaluating the trimmed sequence.
pub fn trim_padding(ids: &[usize]) -> &[usize] {
    let end = ids.iter().rposition(|&i| i != PAD_ID).map_or(1, |p| p + 1);
    if ids.is_empty() {
        &[PAD_ID]
    } else {
        &ids[..end]
    }
}
