//! Word-level vocabulary with character fallback.
//!
//! Known words map to one id. Anything else is spelled out as its first
//! character followed by `##c` continuation pieces, so every input can be
//! encoded. Decoding glues continuation pieces back onto the previous piece.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::text::words;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const SEP: &str = "[SEP]";
const SPECIALS: [&str; 5] = [PAD, UNK, BOS, EOS, SEP];
const CONT: &str = "##";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Vocabulary from the words of `texts`: specials, then every character
    /// seen (plain and `##` forms), then words with count >= `min_count`
    /// ordered by count then spelling, capped at `max_words`.
    pub fn fit<S: AsRef<str>>(texts: &[S], min_count: usize, max_words: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in words(t.as_ref()) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut chars: Vec<char> = counts.keys().flat_map(|w| w.chars()).collect();
        chars.sort_unstable();
        chars.dedup();
        let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for c in &chars {
            pieces.push(c.to_string());
            pieces.push(format!("{CONT}{c}"));
        }
        let mut ranked: Vec<(&String, &usize)> = counts.iter().filter(|(w, c)| **c >= min_count && w.chars().count() > 1).collect();
        ranked.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
        pieces.extend(ranked.into_iter().take(max_words).map(|(w, _)| w.clone()));
        Self::from_pieces(pieces).expect("fitted pieces are unique")
    }

    pub fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if pieces.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Config(format!("tokenizer piece {i} must be {s}")));
            }
        }
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if index.insert(p.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate tokenizer piece {p:?}")));
            }
        }
        Ok(Self { pieces, index })
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> &str {
        self.pieces.get(id as usize).map(String::as_str).unwrap_or(UNK)
    }

    pub fn pad_id(&self) -> u32 {
        0
    }
    pub fn unk_id(&self) -> u32 {
        1
    }
    pub fn bos_id(&self) -> u32 {
        2
    }
    pub fn eos_id(&self) -> u32 {
        3
    }
    pub fn sep_id(&self) -> u32 {
        4
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for w in words(text) {
            if let Some(id) = self.id(&w) {
                out.push(id);
                continue;
            }
            for (i, c) in w.chars().enumerate() {
                let piece = if i == 0 { c.to_string() } else { format!("{CONT}{c}") };
                out.push(self.id(&piece).unwrap_or(self.unk_id()));
            }
        }
        out
    }

    /// Space-joined words; special tokens are skipped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if self.is_special(id) && id != self.unk_id() {
                continue;
            }
            let p = self.piece(id);
            if let Some(rest) = p.strip_prefix(CONT) {
                out.push_str(rest);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(p);
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.pieces)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let pieces: Vec<String> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_pieces(pieces)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::fit(&["i am a nurse .", "i like dogs , i am happy"], 1, 100)
    }

    #[test]
    fn specials_first() {
        let t = tok();
        assert_eq!(t.piece(t.bos_id()), BOS);
        assert_eq!(t.piece(t.sep_id()), SEP);
        assert_eq!(t.piece(t.eos_id()), EOS);
    }

    #[test]
    fn known_words_round_trip() {
        let t = tok();
        let ids = t.encode("I am a Nurse.");
        assert_eq!(ids.len(), 5);
        assert_eq!(t.decode(&ids), "i am a nurse .");
    }

    #[test]
    fn unknown_words_fall_back_to_characters() {
        let t = tok();
        let ids = t.encode("mad");
        assert_eq!(ids.len(), 3);
        assert_eq!(t.decode(&ids), "mad");
        // 'z' never seen
        assert!(t.encode("z").contains(&t.unk_id()));
    }

    #[test]
    fn save_load() {
        let t = tok();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tok.json");
        t.save(&p).unwrap();
        assert_eq!(Tokenizer::load(&p).unwrap(), t);
    }

    #[test]
    fn fit_is_deterministic_and_capped() {
        let a = Tokenizer::fit(&["b a b c", "c c"], 1, 1);
        let b = Tokenizer::fit(&["b a b c", "c c"], 1, 1);
        assert_eq!(a, b);
        // single-character words are already covered by character pieces
        assert!(a.id("c").is_some());
        assert!(Tokenizer::fit(&["dd ee ee"], 1, 1).id("ee").is_some());
        assert!(Tokenizer::fit(&["dd ee ee"], 1, 1).id("dd").is_none());
    }
}
