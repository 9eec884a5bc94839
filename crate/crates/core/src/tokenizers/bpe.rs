//! Byte-pair encoding over residue strings.
//!
//! Sequences have no internal word boundaries, so each whole sequence is one
//! symbol string. Non-canonical residues become `<unk>` and split the
//! sequence: pairs are never formed across them.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap, HashMap};

use crate::data::is_canonical;
use crate::error::{Error, Result};

use super::{Vocab, VocabKind, SAA_VOCAB_SIZE};

/// One merge rule, `left + right`.
pub type Merge = (String, String);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    vocab: Vocab,
    merges: Vec<Merge>,
    /// (left id, right id) → (rank, merged id)
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

impl BpeModel {
    /// Rebuilds a model by replaying `merges` on top of the SAA vocabulary.
    pub fn from_merges(merges: Vec<Merge>) -> Result<Self> {
        let mut vocab = Vocab::saa().with_kind(VocabKind::Bpe);
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (left, right)) in merges.iter().enumerate() {
            let unknown = |t: &str| Error::Argument(format!("merge {rank}: unknown token {t:?}"));
            let l = vocab.id(left).ok_or_else(|| unknown(left))?;
            let r = vocab.id(right).ok_or_else(|| unknown(right))?;
            if vocab.is_special(l) || vocab.is_special(r) {
                return Err(Error::Argument(format!(
                    "merge {rank}: special tokens cannot be merged"
                )));
            }
            let merged = vocab.push_token(format!("{left}{right}"))?;
            if ranks.insert((l, r), (rank, merged)).is_some() {
                return Err(Error::Argument(format!(
                    "merge {rank}: pair ({left}, {right}) repeated"
                )));
            }
        }
        Ok(Self {
            vocab,
            merges,
            ranks,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    /// Model restricted to its first `n` merges.
    pub fn truncated(&self, n: usize) -> Self {
        Self::from_merges(self.merges[..n.min(self.merges.len())].to_vec())
            .expect("prefix of a valid merge list is valid")
    }

    /// Applies merges in learned order: the lowest-ranked adjacent pair is
    /// merged everywhere (left to right) until no ranked pair remains.
    pub(crate) fn apply(&self, seq: &str) -> Vec<u32> {
        let mut symbols: Vec<u32> = seq.chars().map(|c| self.vocab.residue_id(c)).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| {
                    self.ranks
                        .get(&(w[0], w[1]))
                        .map(|&(rank, _)| (rank, w[0], w[1]))
                })
                .min();
            let Some((_, l, r)) = best else { break };
            let merged = self.ranks[&(l, r)].1;
            symbols = merge_pair(&symbols, l, r, merged);
        }
        symbols
    }
}

fn merge_pair(symbols: &[u32], left: u32, right: u32, merged: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(merged);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}

/// Heap entry: highest count first, then lexicographically smallest
/// `(left, right)` token strings.
#[derive(Debug, PartialEq, Eq)]
struct Candidate {
    count: u64,
    left: String,
    right: String,
    pair: (u32, u32),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count.cmp(&other.count).then_with(|| {
            Reverse((&self.left, &self.right)).cmp(&Reverse((&other.left, &other.right)))
        })
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Word {
    symbols: Vec<u32>,
    count: u64,
}

fn add_pairs(
    word: &Word,
    idx: usize,
    counts: &mut HashMap<(u32, u32), u64>,
    index: &mut HashMap<(u32, u32), BTreeSet<usize>>,
    touched: &mut BTreeSet<(u32, u32)>,
) {
    for w in word.symbols.windows(2) {
        let p = (w[0], w[1]);
        *counts.entry(p).or_insert(0) += word.count;
        index.entry(p).or_default().insert(idx);
        touched.insert(p);
    }
}

fn remove_pairs(
    word: &Word,
    counts: &mut HashMap<(u32, u32), u64>,
    touched: &mut BTreeSet<(u32, u32)>,
) {
    for w in word.symbols.windows(2) {
        let p = (w[0], w[1]);
        if let Some(c) = counts.get_mut(&p) {
            *c -= word.count;
            if *c == 0 {
                counts.remove(&p);
            }
        }
        touched.insert(p);
    }
}

/// Learns merges starting from the 25-token SAA vocabulary until the
/// vocabulary reaches `target_vocab` or no pair occurs at least twice.
///
/// Pairs whose concatenation is already a vocabulary entry are skipped so
/// every merge adds exactly one token.
pub fn bpe_train<I, S>(corpus: I, target_vocab: usize) -> Result<BpeModel>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if target_vocab < SAA_VOCAB_SIZE {
        return Err(Error::Argument(format!(
            "target vocabulary {target_vocab} is smaller than the {SAA_VOCAB_SIZE} base tokens"
        )));
    }
    let mut vocab = Vocab::saa().with_kind(VocabKind::Bpe);

    // Deduplicate canonical segments; counts weight the pair statistics.
    let mut segment_counts: HashMap<Vec<u32>, u64> = HashMap::new();
    let mut n_sequences = 0usize;
    for seq in corpus {
        n_sequences += 1;
        let mut current = Vec::new();
        for c in seq.as_ref().chars() {
            if is_canonical(c) {
                current.push(vocab.residue_id(c));
            } else if !current.is_empty() {
                *segment_counts
                    .entry(std::mem::take(&mut current))
                    .or_insert(0) += 1;
            }
        }
        if !current.is_empty() {
            *segment_counts.entry(current).or_insert(0) += 1;
        }
    }
    if n_sequences == 0 {
        return Err(Error::Training("BPE corpus is empty".into()));
    }
    let mut words: Vec<Word> = segment_counts
        .into_iter()
        .map(|(symbols, count)| Word { symbols, count })
        .collect();
    words.sort_by(|a, b| a.symbols.cmp(&b.symbols));

    let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut index: HashMap<(u32, u32), BTreeSet<usize>> = HashMap::new();
    let mut touched = BTreeSet::new();
    for (i, w) in words.iter().enumerate() {
        add_pairs(w, i, &mut counts, &mut index, &mut touched);
    }

    let candidate = |vocab: &Vocab, pair: (u32, u32), count: u64| Candidate {
        count,
        left: vocab.token(pair.0).expect("known id").to_string(),
        right: vocab.token(pair.1).expect("known id").to_string(),
        pair,
    };
    let mut heap: BinaryHeap<Candidate> = counts
        .iter()
        .map(|(&p, &c)| candidate(&vocab, p, c))
        .collect();

    let mut merges: Vec<Merge> = Vec::new();
    while vocab.len() < target_vocab {
        let Some(top) = heap.pop() else { break };
        // stale entry: the count changed after this was pushed
        if counts.get(&top.pair).copied() != Some(top.count) {
            continue;
        }
        if top.count < 2 {
            break;
        }
        let merged_token = format!("{}{}", top.left, top.right);
        if vocab.id(&merged_token).is_some() {
            continue;
        }
        let merged = vocab.push_token(merged_token)?;
        merges.push((top.left, top.right));

        let (l, r) = top.pair;
        let affected = index.remove(&top.pair).unwrap_or_default();
        let mut touched = BTreeSet::new();
        for idx in affected {
            let word = &words[idx];
            if !word.symbols.windows(2).any(|w| w[0] == l && w[1] == r) {
                continue;
            }
            remove_pairs(word, &mut counts, &mut touched);
            let symbols = merge_pair(&word.symbols, l, r, merged);
            words[idx].symbols = symbols;
            add_pairs(&words[idx], idx, &mut counts, &mut index, &mut touched);
        }
        for p in touched {
            if let Some(&c) = counts.get(&p) {
                heap.push(candidate(&vocab, p, c));
            }
        }
    }
    log::debug!("bpe: {} merges, vocabulary {}", merges.len(), vocab.len());
    BpeModel::from_merges(merges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizers::Tokenizer;

    #[test]
    fn first_merge_is_most_frequent_pair() {
        // AC occurs 3 times, CA and CD once each.
        let m = bpe_train(["ACAC", "ACD"], SAA_VOCAB_SIZE + 1).unwrap();
        assert_eq!(m.merges(), &[("A".to_string(), "C".to_string())]);
        assert_eq!(m.vocab().len(), 26);
        assert_eq!(m.vocab().id("AC"), Some(25));
    }

    #[test]
    fn ties_break_lexicographically() {
        // CD and AE both occur twice; (A, E) sorts first.
        let m = bpe_train(["CDAE", "AECD"], SAA_VOCAB_SIZE + 1).unwrap();
        assert_eq!(m.merges()[0], ("A".to_string(), "E".to_string()));
    }

    #[test]
    fn base_target_gives_saa() {
        let m = bpe_train(["QVQLVQ"], SAA_VOCAB_SIZE).unwrap();
        assert!(m.merges().is_empty());
        assert_eq!(m.vocab().tokens(), Vocab::saa().tokens());
    }

    #[test]
    fn stops_without_repeated_pairs() {
        let m = bpe_train(["ACDEFG"], 100).unwrap();
        assert!(m.merges().is_empty());
    }

    #[test]
    fn repeated_corpus_is_deterministic() {
        let corpus = vec!["QVQLVQ"; 1000];
        let a = bpe_train(corpus.iter(), SAA_VOCAB_SIZE + 2).unwrap();
        let b = bpe_train(corpus.iter(), SAA_VOCAB_SIZE + 2).unwrap();
        assert_eq!(a.merges(), b.merges());
        assert_eq!(a.merges().len(), 2);
        // VQ occurs twice per sequence; afterwards (Q,VQ), (VQ,L), (L,VQ)
        // tie and L sorts first.
        assert_eq!(a.merges()[0], ("V".to_string(), "Q".to_string()));
        assert_eq!(a.merges()[1], ("L".to_string(), "VQ".to_string()));
    }

    #[test]
    fn empty_corpus_and_small_target_rejected() {
        assert!(matches!(
            bpe_train(Vec::<String>::new(), 30),
            Err(Error::Training(_))
        ));
        assert!(matches!(bpe_train(["AC"], 24), Err(Error::Argument(_))));
    }

    #[test]
    fn merges_regenerate_vocab() {
        let corpus = [
            "QVQLVQSGAEVKKPGAS",
            "EVQLVESGGGLVQPGGS",
            "QVQLQESGPGLVKPSET",
        ];
        let m = bpe_train(corpus, 60).unwrap();
        let rebuilt = BpeModel::from_merges(m.merges().to_vec()).unwrap();
        assert_eq!(rebuilt.vocab().tokens(), m.vocab().tokens());
        for (i, (l, r)) in m.merges().iter().enumerate() {
            assert_eq!(
                m.vocab().token((SAA_VOCAB_SIZE + i) as u32).unwrap(),
                format!("{l}{r}")
            );
        }
    }

    #[test]
    fn encode_roundtrip_and_unk_split() {
        let corpus = ["QVQLVQSGAEVKKPGAS", "EVQLVESGGGLVQPGGS"];
        let t = Tokenizer::Bpe(bpe_train(corpus, 40).unwrap());
        for s in corpus {
            let enc = t.encode(s, 150).unwrap();
            assert!(enc.payload().len() < s.len());
            assert_eq!(t.decode(&enc.ids).unwrap(), s);
        }
        let enc = t.encode("QVQXLVQ", 150).unwrap();
        assert!(enc.ids.contains(&3));
        assert_eq!(t.decode(&enc.ids).unwrap(), "QVQXLVQ");
    }

    #[test]
    fn duplicate_merge_result_rejected() {
        let merges = vec![
            ("A".to_string(), "C".to_string()),
            ("C".to_string(), "D".to_string()),
            ("AC".to_string(), "D".to_string()),
            ("A".to_string(), "CD".to_string()),
        ];
        assert!(BpeModel::from_merges(merges).is_err());
    }
}
