use std::collections::HashMap;

use crate::error::{PsptError, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Lowercases and splits on whitespace; every non-alphanumeric character is a
/// token of its own.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            cur.push(ch);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Token strings mapped to contiguous ids, with PAD/UNK/BOS/EOS reserved at 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from raw tokens (specials are prepended).
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let all: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(tokens.into_iter().map(Into::into))
            .collect();
        Self::from_full_list(all)
    }

    /// Restores a vocabulary whose id order is given explicitly, specials included.
    pub fn from_full_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len()
            || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s)
        {
            return Err(PsptError::Data(
                "vocabulary must start with <pad>, <unk>, <bos>, <eos>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(PsptError::Data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Frequency-ranked vocabulary over `texts`, capped at `cap` entries
    /// including specials. Tokens of `required` texts are always kept.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        required: &[&str],
        cap: usize,
    ) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in split_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut chosen: Vec<String> = Vec::new();
        for text in required {
            for w in split_words(text) {
                if !chosen.contains(&w) {
                    chosen.push(w);
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !chosen.contains(w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = cap.saturating_sub(SPECIALS.len() + chosen.len());
        chosen.extend(ranked.into_iter().take(room).map(|(w, _)| w));
        if SPECIALS.len() + chosen.len() > cap {
            return Err(PsptError::Config(format!(
                "vocabulary cap {cap} too small for the required tokens"
            )));
        }
        Self::from_tokens(chosen)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps text to ids; out-of-vocabulary words become [`UNK`].
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    pub fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.len()) {
            Some(&id) => Err(PsptError::Vocabulary {
                id,
                vocab_size: self.len(),
            }),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vocabulary {
        Vocabulary::from_tokens(["the", "cat", "sat", "."]).unwrap()
    }

    #[test]
    fn empty_text() {
        assert!(fixture().tokenize("").is_empty());
    }

    #[test]
    fn sentence_with_punctuation() {
        let v = fixture();
        let ids = v.tokenize("The cat sat.");
        let expected: Vec<u32> = ["the", "cat", "sat", "."]
            .iter()
            .map(|w| v.id(w).unwrap())
            .collect();
        assert_eq!(ids, expected);
        assert_eq!(expected, vec![4, 5, 6, 7]);
    }

    #[test]
    fn unknown_word() {
        assert_eq!(fixture().tokenize("zzzunknownzzz"), vec![UNK]);
    }

    #[test]
    fn split_keeps_punctuation_separate() {
        assert_eq!(
            split_words("Question: who?  A-B"),
            vec!["question", ":", "who", "?", "a", "-", "b"]
        );
    }

    #[test]
    fn build_ranks_by_frequency_then_lexicographically() {
        let v = Vocabulary::build(["b a b c", "c b"], &["zeta"], 7).unwrap();
        assert_eq!(&v.tokens()[4..], &["zeta", "b", "c"]);
    }

    #[test]
    fn reserved_ids() {
        let v = fixture();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
    }

    #[test]
    fn out_of_range_id() {
        assert!(matches!(
            fixture().check_ids(&[4, 8]),
            Err(PsptError::Vocabulary { id: 8, vocab_size: 8 })
        ));
    }
}
