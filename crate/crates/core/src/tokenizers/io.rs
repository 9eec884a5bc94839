//! Vocabulary JSON and BPE merges files.
//!
//! The vocabulary file is `{"kind", "specials", "tokens"}` with array index as
//! id. A BPE model additionally has a merges file next to it
//! (`<stem>.merges.txt`), one `LEFT RIGHT` rule per line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{BpeModel, Merge, Specials, Tokenizer, Vocab, VocabKind};

#[derive(Serialize, Deserialize)]
struct VocabFile {
    kind: VocabKind,
    specials: Specials,
    tokens: Vec<String>,
}

/// Byte offset of a serde_json error within `text`.
fn json_offset(text: &str, err: &serde_json::Error) -> usize {
    if err.line() == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(err.line() - 1)
        .map(str::len)
        .sum();
    (line_start + err.column().saturating_sub(1)).min(text.len())
}

impl Vocab {
    pub fn to_json(&self) -> String {
        let file = VocabFile {
            kind: self.kind(),
            specials: *self.specials(),
            tokens: self.tokens().to_vec(),
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            offset: json_offset(text, &e),
            message: e.to_string(),
        })?;
        let vocab = Vocab::from_tokens(file.kind, file.tokens).map_err(|e| Error::Parse {
            offset: text.len(),
            message: e.to_string(),
        })?;
        if *vocab.specials() != file.specials {
            return Err(Error::Parse {
                offset: text.find("\"specials\"").unwrap_or(0),
                message: format!(
                    "specials {:?} disagree with token positions {:?}",
                    file.specials,
                    vocab.specials()
                ),
            });
        }
        Ok(vocab)
    }
}

/// Serializes merges, one `LEFT RIGHT` per line.
pub fn merges_to_text(merges: &[Merge]) -> String {
    let mut out = String::with_capacity(merges.len() * 8);
    for (l, r) in merges {
        out.push_str(l);
        out.push(' ');
        out.push_str(r);
        out.push('\n');
    }
    out
}

pub fn parse_merges(text: &str) -> Result<Vec<Merge>> {
    let mut merges = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let content = line.trim_end_matches(['\n', '\r']);
        if !content.is_empty() {
            let mut parts = content.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_string(), r.to_string()))
                }
                _ => {
                    return Err(Error::Parse {
                        offset,
                        message: format!("expected `LEFT RIGHT`, found {content:?}"),
                    })
                }
            }
        }
        offset += line.len();
    }
    Ok(merges)
}

impl BpeModel {
    /// Rebuilds a model from its vocabulary JSON and merges text, checking
    /// that replaying the merges yields exactly the stored vocabulary.
    pub fn parse(vocab_json: &str, merges_text: &str) -> Result<Self> {
        let vocab = Vocab::from_json(vocab_json)?;
        if vocab.kind() != VocabKind::Bpe {
            return Err(Error::Parse {
                offset: 0,
                message: format!("expected a bpe vocabulary, found {}", vocab.kind()),
            });
        }
        let merges = parse_merges(merges_text)?;
        let n = merges.len();
        let model = BpeModel::from_merges(merges).map_err(|e| Error::Parse {
            offset: merges_text.len(),
            message: e.to_string(),
        })?;
        if model.vocab().tokens() != vocab.tokens() {
            return Err(Error::Parse {
                offset: merges_text.len(),
                message: format!(
                    "{n} merges rebuild {} tokens but the vocabulary lists {}",
                    model.vocab().len(),
                    vocab.len()
                ),
            });
        }
        Ok(model)
    }
}

/// `vocab.json` → `vocab.merges.txt`.
pub fn merges_path_for(vocab_path: &Path) -> PathBuf {
    let stem = vocab_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "vocab".into());
    vocab_path.with_file_name(format!("{stem}.merges.txt"))
}

pub fn save_vocab(vocab: &Vocab, path: &Path) -> Result<()> {
    fs::write(path, vocab.to_json()).map_err(|e| Error::io(path, e))
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Vocab::from_json(&text)
}

/// Writes the vocabulary and, for BPE, the merges file beside it.
pub fn save_tokenizer(tok: &Tokenizer, vocab_path: &Path) -> Result<()> {
    save_vocab(tok.vocab(), vocab_path)?;
    if let Tokenizer::Bpe(model) = tok {
        let merges_path = merges_path_for(vocab_path);
        fs::write(&merges_path, merges_to_text(model.merges()))
            .map_err(|e| Error::io(merges_path, e))?;
    }
    Ok(())
}

pub fn load_tokenizer(vocab_path: &Path) -> Result<Tokenizer> {
    let text = fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
    let vocab = Vocab::from_json(&text)?;
    Ok(match vocab.kind() {
        VocabKind::Saa => Tokenizer::Saa(vocab),
        VocabKind::Daa => Tokenizer::Daa(vocab),
        VocabKind::Bpe => {
            let merges_path = merges_path_for(vocab_path);
            let merges =
                fs::read_to_string(&merges_path).map_err(|e| Error::io(&merges_path, e))?;
            Tokenizer::Bpe(BpeModel::parse(&text, &merges)?)
        }
    })
}
