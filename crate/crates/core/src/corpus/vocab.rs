use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SEP: usize = 4;
pub const SPECIALS: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<sep>"];

/// Dense token ids; the five specials occupy ids 0..5.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: BTreeMap<String, usize>,
    min_freq: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    min_freq: usize,
    tokens: Vec<String>,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = Error;

    fn try_from(r: VocabularyRepr) -> Result<Self> {
        Self::from_tokens(r.tokens, r.min_freq)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        Self {
            min_freq: v.min_freq,
            tokens: v.id_to_token,
        }
    }
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_freq` times, most frequent first, ties
    /// in lexicographic order.
    pub fn build<'a, I>(tokens: I, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if min_freq == 0 {
            return Err(Error::InvalidArgument("min_freq must be at least 1".to_string()));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && !SPECIALS.contains(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let all = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(all, min_freq)
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::InvalidArgument("vocabulary must start with the special tokens".to_string()));
        }
        let mut token_to_id = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self {
            id_to_token: tokens,
            token_to_id,
            min_freq,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    /// Unknown tokens map to UNK.
    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK]).to_string())
            .collect()
    }

    /// FNV-1a over the id-ordered token list, as 16 hex digits.
    pub fn fingerprint(&self) -> String {
        use core::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        for t in &self.id_to_token {
            h.write(t.as_bytes());
            h.write_u8(0);
        }
        format!("{:016x}", h.finish())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orders_by_frequency_then_lexically() {
        let v = Vocabulary::build(["b", "a", "a"], 1).unwrap();
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("b"), 6);
        let w = Vocabulary::build(["c", "b", "a"], 1).unwrap();
        assert_eq!(&w.tokens()[5..], ["a", "b", "c"]);
    }

    #[test]
    fn min_freq_cutoff_maps_to_unk() {
        let v = Vocabulary::build(["a", "a", "b"], 2).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn empty_input_gives_specials_only() {
        let v = Vocabulary::build(core::iter::empty(), 1).unwrap();
        assert_eq!(v.tokens(), SPECIALS);
        assert_eq!((v.id("<pad>"), v.id("<sep>")), (PAD, SEP));
    }

    #[test]
    fn rejects_zero_min_freq_and_bad_lists() {
        assert!(Vocabulary::build(["a"], 0).is_err());
        assert!(Vocabulary::from_tokens(alloc::vec!["a".into()], 1).is_err());
        let mut dup: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        dup.push("x".into());
        dup.push("x".into());
        assert!(Vocabulary::from_tokens(dup, 1).is_err());
    }

    #[test]
    fn fingerprint_tracks_contents() {
        let a = Vocabulary::build(["a"], 1).unwrap();
        let b = Vocabulary::build(["b"], 1).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
    }
}
