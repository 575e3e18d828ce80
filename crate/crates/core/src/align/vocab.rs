use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::AlignError;
use crate::metrics::tokenize_text;

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
const BYTE_BASE: u32 = 3;
const SPECIALS: u32 = BYTE_BASE + 256;

/// Word-level vocabulary built from a training corpus, with one fallback
/// token per byte for words outside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    words: Vec<String>,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        Vocab::from_words(r.words)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr { words: v.words }
    }
}

impl Vocab {
    fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), SPECIALS + i as u32))
            .collect();
        Self { words, index }
    }

    /// Most frequent words first (ties alphabetical) until `cap` ids are used.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        cap: usize,
    ) -> Result<Self, AlignError> {
        if cap < SPECIALS as usize {
            return Err(AlignError::InvalidConfig(format!(
                "vocabulary cap {cap} is below the {SPECIALS} reserved ids"
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for w in tokenize_text(text).tokens() {
                *counts.entry(w.clone()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cap - SPECIALS as usize);
        Ok(Self::from_words(
            ranked.into_iter().map(|(w, _)| w).collect(),
        ))
    }

    pub fn len(&self) -> usize {
        SPECIALS as usize + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for w in tokenize_text(text).tokens() {
            match self.index.get(w) {
                Some(&id) => out.push(id),
                None => out.extend(w.bytes().map(|b| BYTE_BASE + b as u32)),
            }
        }
        out
    }

    /// Space-joined words; runs of byte tokens form one word. Specials are
    /// skipped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut words: Vec<String> = Vec::new();
        let mut bytes: Vec<u8> = Vec::new();
        let flush = |bytes: &mut Vec<u8>, words: &mut Vec<String>| {
            if !bytes.is_empty() {
                words.push(String::from_utf8_lossy(bytes).into_owned());
                bytes.clear();
            }
        };
        for &id in ids {
            if (BYTE_BASE..SPECIALS).contains(&id) {
                bytes.push((id - BYTE_BASE) as u8);
                continue;
            }
            flush(&mut bytes, &mut words);
            if id >= SPECIALS {
                if let Some(w) = self.words.get((id - SPECIALS) as usize) {
                    words.push(w.clone());
                }
            }
        }
        flush(&mut bytes, &mut words);
        words.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_known_and_unknown() {
        let v = Vocab::build(["a piece in c major", "a piece in 3/4"], 300).unwrap();
        assert_eq!(v.words()[0], "a");
        let ids = v.encode("A piece in zzz major");
        assert_eq!(v.decode(&ids), "a piece in zzz major");
        let mut with_eos = v.encode("in 3/4");
        with_eos.push(EOS);
        assert_eq!(v.decode(&with_eos), "in 3 / 4");
    }

    #[test]
    fn cap_limits_words() {
        let v = Vocab::build(["b b a c"], SPECIALS as usize + 2).unwrap();
        assert_eq!(v.words(), &["b".to_string(), "a".to_string()]);
        assert_eq!(v.len(), SPECIALS as usize + 2);
        assert!(Vocab::build(["x"], 10).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocab::build(["one two two"], 400).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&s).unwrap(), v);
    }
}
