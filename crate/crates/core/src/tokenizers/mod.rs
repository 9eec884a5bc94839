//! Residue-level (SAA), residue-pair (DAA) and byte-pair (BPE) tokenizers.
//!
//! All three share the same five special tokens at ids 0..=4 followed by the
//! 20 canonical residues, so an SAA vocabulary is a prefix of the other two.

mod bpe;
mod io;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{is_canonical, CANONICAL_RESIDUES};
use crate::error::{Error, Result};

pub use bpe::{bpe_train, BpeModel, Merge};
pub use io::{load_tokenizer, load_vocab, merges_path_for, save_tokenizer, save_vocab};

pub const PAD: &str = "<pad>";
pub const START: &str = "<s>";
pub const END: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const MASK: &str = "<mask>";

/// Rendering of the unknown token in decoded strings.
pub const UNK_PLACEHOLDER: char = 'X';

/// Default maximum sequence length including start/end tokens.
pub const DEFAULT_MAX_POSITIONS: usize = 150;

pub const SAA_VOCAB_SIZE: usize = 25;
pub const DAA_VOCAB_SIZE: usize = 425;
/// Upper bound on the BPE vocabulary size.
pub const DEFAULT_BPE_VOCAB_SIZE: usize = 10_260;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabKind {
    Saa,
    Daa,
    Bpe,
}

impl VocabKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            VocabKind::Saa => "saa",
            VocabKind::Daa => "daa",
            VocabKind::Bpe => "bpe",
        }
    }
}

impl fmt::Display for VocabKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VocabKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "saa" => Ok(VocabKind::Saa),
            "daa" => Ok(VocabKind::Daa),
            "bpe" => Ok(VocabKind::Bpe),
            other => Err(Error::Argument(format!("unknown tokenizer kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub pad: u32,
    pub start: u32,
    pub end: u32,
    pub unk: u32,
    pub mask: u32,
}

impl Specials {
    pub fn ids(&self) -> [u32; 5] {
        [self.pad, self.start, self.end, self.unk, self.mask]
    }

    pub fn contains(&self, id: u32) -> bool {
        self.ids().contains(&id)
    }
}

/// Dense token table; array index is the token id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    kind: VocabKind,
    tokens: Vec<String>,
    token_to_id: HashMap<String, u32>,
    specials: Specials,
}

impl Vocab {
    /// Builds a vocabulary from an id-ordered token list.
    pub fn from_tokens(kind: VocabKind, tokens: Vec<String>) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Argument(format!("duplicate token {t:?}")));
            }
        }
        let find = |name: &str| {
            token_to_id
                .get(name)
                .copied()
                .ok_or_else(|| Error::Argument(format!("vocabulary lacks special token {name}")))
        };
        let specials = Specials {
            pad: find(PAD)?,
            start: find(START)?,
            end: find(END)?,
            unk: find(UNK)?,
            mask: find(MASK)?,
        };
        let expected = match kind {
            VocabKind::Saa => Some(SAA_VOCAB_SIZE),
            VocabKind::Daa => Some(DAA_VOCAB_SIZE),
            VocabKind::Bpe => None,
        };
        if let Some(n) = expected {
            if tokens.len() != n {
                return Err(Error::Argument(format!(
                    "{kind} vocabulary must have {n} tokens, got {}",
                    tokens.len()
                )));
            }
        }
        Ok(Self {
            kind,
            tokens,
            token_to_id,
            specials,
        })
    }

    /// Specials at ids 0..=4, then A..Y.
    pub fn saa() -> Self {
        Self::from_tokens(VocabKind::Saa, base_tokens()).expect("static SAA table is valid")
    }

    /// SAA tokens followed by the 400 dipeptides in lexicographic order.
    pub fn daa() -> Self {
        let mut tokens = base_tokens();
        for a in CANONICAL_RESIDUES {
            for b in CANONICAL_RESIDUES {
                tokens.push(format!("{a}{b}"));
            }
        }
        Self::from_tokens(VocabKind::Daa, tokens).expect("static DAA table is valid")
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> &Specials {
        &self.specials
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(&self, id: u32) -> bool {
        self.specials.contains(id)
    }

    /// Ids eligible as random MLM replacements.
    pub fn non_special_ids(&self) -> Vec<u32> {
        (0..self.tokens.len() as u32)
            .filter(|&id| !self.is_special(id))
            .collect()
    }

    pub(crate) fn push_token(&mut self, token: String) -> Result<u32> {
        if self.token_to_id.contains_key(&token) {
            return Err(Error::Argument(format!("duplicate token {token:?}")));
        }
        let id = self.tokens.len() as u32;
        self.token_to_id.insert(token.clone(), id);
        self.tokens.push(token);
        Ok(id)
    }

    pub(crate) fn with_kind(mut self, kind: VocabKind) -> Self {
        self.kind = kind;
        self
    }

    fn residue_id(&self, c: char) -> u32 {
        if is_canonical(c) {
            let mut buf = [0u8; 4];
            self.id(c.encode_utf8(&mut buf))
                .unwrap_or(self.specials.unk)
        } else {
            self.specials.unk
        }
    }
}

fn base_tokens() -> Vec<String> {
    [PAD, START, END, UNK, MASK]
        .iter()
        .map(|s| s.to_string())
        .chain(CANONICAL_RESIDUES.iter().map(|c| c.to_string()))
        .collect()
}

/// Token ids of one sequence, wrapped in start/end.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedSeq {
    pub ids: Vec<u32>,
    /// Residue count of the source string.
    pub source_len: usize,
}

impl TokenizedSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids between the start and end tokens.
    pub fn payload(&self) -> &[u32] {
        &self.ids[1..self.ids.len() - 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tokenizer {
    Saa(Vocab),
    Daa(Vocab),
    Bpe(BpeModel),
}

impl Tokenizer {
    pub fn saa() -> Self {
        Tokenizer::Saa(Vocab::saa())
    }

    pub fn daa() -> Self {
        Tokenizer::Daa(Vocab::daa())
    }

    pub fn kind(&self) -> VocabKind {
        self.vocab().kind()
    }

    pub fn vocab(&self) -> &Vocab {
        match self {
            Tokenizer::Saa(v) | Tokenizer::Daa(v) => v,
            Tokenizer::Bpe(m) => m.vocab(),
        }
    }

    /// Token ids without start/end.
    pub fn encode_payload(&self, seq: &str) -> Vec<u32> {
        match self {
            Tokenizer::Saa(v) => seq.chars().map(|c| v.residue_id(c)).collect(),
            Tokenizer::Daa(v) => {
                let residues: Vec<char> = seq.chars().collect();
                residues
                    .chunks(2)
                    .map(|pair| {
                        if pair.iter().all(|c| is_canonical(*c)) {
                            let token: String = pair.iter().collect();
                            v.id(&token).unwrap_or(v.specials.unk)
                        } else {
                            v.specials.unk
                        }
                    })
                    .collect()
            }
            Tokenizer::Bpe(m) => m.apply(seq),
        }
    }

    pub fn encode(&self, seq: &str, max_positions: usize) -> Result<TokenizedSeq> {
        if seq.is_empty() {
            return Err(Error::Argument("cannot encode an empty sequence".into()));
        }
        let specials = self.vocab().specials;
        let payload = self.encode_payload(seq);
        let len = payload.len() + 2;
        if len > max_positions {
            return Err(Error::Length {
                id: sequence_label(seq),
                len,
                max: max_positions,
            });
        }
        let mut ids = Vec::with_capacity(len);
        ids.push(specials.start);
        ids.extend(payload);
        ids.push(specials.end);
        Ok(TokenizedSeq {
            ids,
            source_len: seq.chars().count(),
        })
    }

    /// Concatenates token strings; pad/start/end/mask are dropped and unk
    /// becomes [`UNK_PLACEHOLDER`].
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let vocab = self.vocab();
        let specials = vocab.specials;
        let mut out = String::with_capacity(ids.len() * 2);
        for &id in ids {
            let token = vocab.token(id).ok_or(Error::Decode {
                id,
                vocab_size: vocab.len(),
            })?;
            if id == specials.unk {
                out.push(UNK_PLACEHOLDER);
            } else if !specials.contains(id) {
                out.push_str(token);
            }
        }
        Ok(out)
    }
}

fn sequence_label(seq: &str) -> String {
    const SHOWN: usize = 16;
    if seq.chars().count() > SHOWN {
        let head: String = seq.chars().take(SHOWN).collect();
        format!("{head}...")
    } else {
        seq.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saa_layout() {
        let v = Vocab::saa();
        assert_eq!(v.len(), 25);
        assert_eq!(v.id("A"), Some(5));
        assert_eq!(v.id("Y"), Some(24));
        assert_eq!(v.specials().pad, 0);
        assert_eq!(v.specials().mask, 4);
        assert_eq!(v.token(1), Some(START));
    }

    #[test]
    fn daa_layout() {
        let v = Vocab::daa();
        assert_eq!(v.len(), 425);
        assert!(v.id("A").is_some() && v.id("AA").is_some());
        assert_ne!(v.id("A"), v.id("AA"));
        let dipeptides = v
            .tokens()
            .iter()
            .filter(|t| t.len() == 2 && !t.starts_with('<'))
            .count();
        assert_eq!(dipeptides, 400);
        assert_eq!(v.id("AA"), Some(25));
        assert_eq!(v.id("YY"), Some(424));
    }

    #[test]
    fn saa_encode() {
        let t = Tokenizer::saa();
        let v = t.vocab();
        let enc = t.encode("ACD", 150).unwrap();
        assert_eq!(
            enc.ids,
            vec![
                1,
                v.id("A").unwrap(),
                v.id("C").unwrap(),
                v.id("D").unwrap(),
                2
            ]
        );
        assert_eq!(enc.source_len, 3);

        let enc = t.encode("AXZ", 150).unwrap();
        assert_eq!(enc.ids, vec![1, 5, 3, 3, 2]);
    }

    #[test]
    fn daa_encode_pairs_without_overlap() {
        let t = Tokenizer::daa();
        let v = t.vocab();
        let enc = t.encode("ACDE", 150).unwrap();
        assert_eq!(
            enc.ids,
            vec![1, v.id("AC").unwrap(), v.id("DE").unwrap(), 2]
        );
        let enc = t.encode("ACD", 150).unwrap();
        assert_eq!(enc.ids, vec![1, v.id("AC").unwrap(), v.id("D").unwrap(), 2]);
    }

    #[test]
    fn decode_rules() {
        let t = Tokenizer::saa();
        assert_eq!(t.decode(&[1, 2]).unwrap(), "");
        let enc = t.encode("AXC", 150).unwrap();
        assert_eq!(t.decode(&enc.ids).unwrap(), "AXC");
        let enc = t.encode("ABC", 150).unwrap();
        assert_eq!(t.decode(&enc.ids).unwrap(), "AXC");
        assert!(matches!(
            t.decode(&[1, 99]),
            Err(Error::Decode { id: 99, .. })
        ));
        for t in [Tokenizer::saa(), Tokenizer::daa()] {
            let enc = t.encode("QVQLVQ", 150).unwrap();
            assert_eq!(t.decode(&enc.ids).unwrap(), "QVQLVQ");
        }
    }

    #[test]
    fn length_limit() {
        let t = Tokenizer::saa();
        assert!(t.encode(&"A".repeat(148), 150).is_ok());
        assert!(matches!(
            t.encode(&"A".repeat(149), 150),
            Err(Error::Length {
                len: 151,
                max: 150,
                ..
            })
        ));
        // DAA halves the length
        assert!(Tokenizer::daa().encode(&"A".repeat(296), 150).is_ok());
    }

    #[test]
    fn empty_sequence_rejected() {
        assert!(Tokenizer::saa().encode("", 150).is_err());
    }
}
