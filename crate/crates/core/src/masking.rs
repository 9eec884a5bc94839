//! Dynamic masked-language-model corruption.
//!
//! Every non-special position is selected independently with probability
//! `p_select`; a selected position becomes `<mask>` with probability
//! `p_mask`, a random non-special token with probability `p_random`, and is
//! left as is otherwise. Randomness for row `r`, position `j` comes from a
//! ChaCha stream keyed by `(seed, r)` at a fixed offset for `j`, so rows can
//! be corrupted independently and results never depend on batch layout
//! beyond the row index.

use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizers::{TokenizedSeq, Vocab};

/// Label value for positions that carry no supervision.
pub const IGNORE_INDEX: i64 = -100;

/// ChaCha 32-bit words consumed per position: three u64 draws.
const WORDS_PER_POSITION: u128 = 3 * 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub p_select: f64,
    pub p_mask: f64,
    pub p_random: f64,
    pub p_keep: f64,
    /// Never draw the original token as a random replacement.
    #[serde(default)]
    pub exclude_original: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            p_select: 0.15,
            p_mask: 0.8,
            p_random: 0.1,
            p_keep: 0.1,
            exclude_original: false,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.p_select, self.p_mask, self.p_random, self.p_keep];
        if all.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Argument(format!(
                "masking probabilities must lie in [0, 1], got {all:?}"
            )));
        }
        let sum = self.p_mask + self.p_random + self.p_keep;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!(
                "p_mask + p_random + p_keep must equal 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// Padded token ids and attention mask, without supervision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedBatch {
    pub input_ids: Array2<u32>,
    /// 1 for real tokens, 0 for padding.
    pub attention_mask: Array2<u8>,
}

impl EncodedBatch {
    /// Right-pads every sequence to the longest one.
    pub fn from_sequences(seqs: &[TokenizedSeq], pad_id: u32) -> Self {
        let width = seqs.iter().map(TokenizedSeq::len).max().unwrap_or(0);
        let mut input_ids = Array2::from_elem((seqs.len(), width), pad_id);
        let mut attention_mask = Array2::zeros((seqs.len(), width));
        for (row, seq) in seqs.iter().enumerate() {
            for (j, &id) in seq.ids.iter().enumerate() {
                input_ids[[row, j]] = id;
                attention_mask[[row, j]] = 1;
            }
        }
        Self {
            input_ids,
            attention_mask,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.input_ids.nrows()
    }

    pub fn seq_len(&self) -> usize {
        self.input_ids.ncols()
    }

    /// Number of real tokens in `row`.
    pub fn row_len(&self, row: usize) -> usize {
        self.attention_mask
            .row(row)
            .iter()
            .filter(|&&m| m != 0)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub input_ids: Array2<u32>,
    /// Original id at selected positions, [`IGNORE_INDEX`] elsewhere.
    pub labels: Array2<i64>,
    pub attention_mask: Array2<u8>,
}

impl MaskedBatch {
    pub fn batch_size(&self) -> usize {
        self.input_ids.nrows()
    }

    pub fn seq_len(&self) -> usize {
        self.input_ids.ncols()
    }

    pub fn supervised_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_INDEX).count()
    }

    pub fn encoded(&self) -> EncodedBatch {
        EncodedBatch {
            input_ids: self.input_ids.clone(),
            attention_mask: self.attention_mask.clone(),
        }
    }

    /// Uncorrupted ids: labels where supervised, inputs elsewhere.
    pub fn reconstruct_original(&self) -> Array2<u32> {
        let mut out = self.input_ids.clone();
        ndarray::Zip::from(&mut out)
            .and(&self.labels)
            .for_each(|slot, &label| {
                if label != IGNORE_INDEX {
                    *slot = label as u32;
                }
            });
        out
    }
}

fn unit(word: u64) -> f64 {
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Maps a uniform 64-bit word onto `0..n`.
fn below(word: u64, n: usize) -> usize {
    ((word as u128 * n as u128) >> 64) as usize
}

/// Applies dynamic MLM corruption to a batch of encoded sequences.
pub fn mask_batch(
    batch: &[TokenizedSeq],
    cfg: &MaskingConfig,
    vocab: &Vocab,
    seed: u64,
) -> Result<MaskedBatch> {
    cfg.validate()?;
    let encoded = EncodedBatch::from_sequences(batch, vocab.specials().pad);
    let candidates = vocab.non_special_ids();
    let mut input_ids = encoded.input_ids.clone();
    let mut labels = Array2::from_elem(input_ids.dim(), IGNORE_INDEX);
    let mask_id = vocab.specials().mask;

    for (row, seq) in batch.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(row as u64);
        for (j, &id) in seq.ids.iter().enumerate() {
            rng.set_word_pos(j as u128 * WORDS_PER_POSITION);
            let select = unit(rng.next_u64());
            let action = unit(rng.next_u64());
            let pick = rng.next_u64();
            if vocab.is_special(id) || select >= cfg.p_select {
                continue;
            }
            labels[[row, j]] = i64::from(id);
            input_ids[[row, j]] = if action < cfg.p_mask {
                mask_id
            } else if action < cfg.p_mask + cfg.p_random {
                random_replacement(&candidates, id, pick, cfg.exclude_original)
            } else {
                id
            };
        }
    }
    Ok(MaskedBatch {
        input_ids,
        labels,
        attention_mask: encoded.attention_mask,
    })
}

fn random_replacement(candidates: &[u32], original: u32, word: u64, exclude_original: bool) -> u32 {
    match candidates.iter().position(|&c| c == original) {
        Some(pos) if exclude_original && candidates.len() > 1 => {
            let k = below(word, candidates.len() - 1);
            candidates[if k >= pos { k + 1 } else { k }]
        }
        _ => candidates[below(word, candidates.len())],
    }
}
