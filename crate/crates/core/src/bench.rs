//! Tokenizer throughput and length-reduction report.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizers::Tokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub tokenizer: String,
    pub vocab_size: usize,
    pub payload_tokens: u64,
    /// Payload tokens per sequence, specials excluded.
    pub mean_tokens: f64,
    /// Payload tokens relative to one token per residue.
    pub compression_ratio: f64,
    pub seconds: f64,
    pub sequences_per_sec: f64,
    pub tokens_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub sequences: usize,
    pub residues: u64,
    pub rows: Vec<BenchRow>,
}

/// Encodes every sequence with each tokenizer `rounds` times and reports
/// lengths and throughput.
pub fn bench_tokenizers<S: AsRef<str>>(
    sequences: &[S],
    tokenizers: &[(String, &Tokenizer)],
    rounds: usize,
) -> Result<BenchReport> {
    if sequences.is_empty() {
        return Err(Error::Dataset("benchmark corpus is empty".into()));
    }
    let rounds = rounds.max(1);
    let residues: u64 = sequences
        .iter()
        .map(|s| s.as_ref().chars().count() as u64)
        .sum();
    let n = sequences.len();
    let rows = tokenizers
        .iter()
        .map(|(name, tok)| {
            let mut payload_tokens = 0u64;
            let start = Instant::now();
            for _ in 0..rounds {
                payload_tokens = sequences
                    .iter()
                    .map(|s| tok.encode_payload(s.as_ref()).len() as u64)
                    .sum();
            }
            let seconds = start.elapsed().as_secs_f64() / rounds as f64;
            let per_sec = |count: f64| {
                if seconds > 0.0 {
                    count / seconds
                } else {
                    f64::INFINITY
                }
            };
            BenchRow {
                tokenizer: name.clone(),
                vocab_size: tok.vocab().len(),
                payload_tokens,
                mean_tokens: payload_tokens as f64 / n as f64,
                compression_ratio: payload_tokens as f64 / residues as f64,
                seconds,
                sequences_per_sec: per_sec(n as f64),
                tokens_per_sec: per_sec(payload_tokens as f64),
            }
        })
        .collect();
    Ok(BenchReport {
        sequences: n,
        residues,
        rows,
    })
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        let mut out = format!("{} sequences, {} residues\n", self.sequences, self.residues);
        let _ = writeln!(
            out,
            "{:<12} {:>7} {:>12} {:>10} {:>14} {:>14}",
            "tokenizer", "vocab", "mean tokens", "ratio", "seqs/sec", "tokens/sec"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<12} {:>7} {:>12.3} {:>10.4} {:>14.0} {:>14.0}",
                r.tokenizer,
                r.vocab_size,
                r.mean_tokens,
                r.compression_ratio,
                r.sequences_per_sec,
                r.tokens_per_sec
            );
        }
        out
    }
}
