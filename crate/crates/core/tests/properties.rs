mod common;

use std::sync::OnceLock;

use ndarray::Array2;
use proptest::prelude::*;

use abtok::data::{split_dataset, SplitRatios, CANONICAL_RESIDUES};
use abtok::masking::{mask_batch, EncodedBatch, MaskingConfig, IGNORE_INDEX};
use abtok::metrics::{auroc_binary, auroc_multiclass, confusion_and_accuracy, macro_prf};
use abtok::model::{init_model, Checkpoint, ModelConfig};
use abtok::tokenizers::{bpe_train, BpeModel, Tokenizer, Vocab};

fn residues(max_len: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop::sample::select(CANONICAL_RESIDUES.to_vec()),
        1..=max_len,
    )
    .prop_map(|cs| cs.into_iter().collect())
}

fn bpe() -> &'static BpeModel {
    static MODEL: OnceLock<BpeModel> = OnceLock::new();
    MODEL.get_or_init(|| bpe_train(common::heavy_chains(300, 42), 120).unwrap())
}

proptest! {
    #[test]
    fn every_tokenizer_roundtrips(seq in residues(148)) {
        for t in [Tokenizer::saa(), Tokenizer::daa(), Tokenizer::Bpe(bpe().clone())] {
            let enc = t.encode(&seq, 150).unwrap();
            prop_assert_eq!(t.decode(&enc.ids).unwrap(), seq.clone());
        }
    }

    #[test]
    fn payload_lengths(seq in residues(200)) {
        let n = seq.len();
        prop_assert_eq!(Tokenizer::saa().encode_payload(&seq).len(), n);
        prop_assert_eq!(Tokenizer::daa().encode_payload(&seq).len(), n.div_ceil(2));
        let b = Tokenizer::Bpe(bpe().clone()).encode_payload(&seq).len();
        prop_assert!(b >= 1 && b <= n);
    }

    #[test]
    fn split_is_a_seeded_partition(n in 0usize..300, seed in any::<u64>(), test in 0.0f64..0.5) {
        let ratios = SplitRatios::new(1.0 - test, test / 2.0, test / 2.0).unwrap();
        let items: Vec<usize> = (0..n).collect();
        let a = split_dataset(items.clone(), ratios, seed).unwrap();
        let b = split_dataset(items, ratios, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let (tr, te, va) = ratios.sizes(n);
        prop_assert_eq!((a.train.len(), a.test.len(), a.valid.len()), (tr, te, va));
        let mut all: Vec<usize> = a.train.iter().chain(&a.test).chain(&a.valid).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn masking_keeps_structure(
        seqs in prop::collection::vec(residues(40), 1..8),
        seed in any::<u64>(),
        p_select in 0.0f64..=1.0,
    ) {
        let t = Tokenizer::saa();
        let vocab = t.vocab();
        let encoded: Vec<_> = seqs.iter().map(|s| t.encode(s, 64).unwrap()).collect();
        let cfg = MaskingConfig { p_select, ..Default::default() };
        let batch = mask_batch(&encoded, &cfg, vocab, seed).unwrap();
        let plain = EncodedBatch::from_sequences(&encoded, vocab.specials().pad);
        prop_assert_eq!(&batch.attention_mask, &plain.attention_mask);
        prop_assert_eq!(batch.reconstruct_original(), plain.input_ids.clone());
        for ((idx, &orig), &label) in plain.input_ids.indexed_iter().zip(batch.labels.iter()) {
            let now = batch.input_ids[idx];
            if label == IGNORE_INDEX {
                prop_assert_eq!(now, orig);
            } else {
                prop_assert!(!vocab.is_special(orig));
                prop_assert_eq!(label, i64::from(orig));
                prop_assert!(now == vocab.specials().mask || !vocab.is_special(now));
            }
        }
        prop_assert_eq!(mask_batch(&encoded, &cfg, vocab, seed).unwrap(), batch);
    }

    #[test]
    fn auroc_is_antisymmetric_and_rank_based(
        pos in prop::collection::vec(0u8..10, 1..30),
        neg in prop::collection::vec(0u8..10, 1..30),
    ) {
        let f = |v: &[u8], g: fn(f64) -> f64| v.iter().map(|&x| g(f64::from(x))).collect::<Vec<f64>>();
        let (p, n) = (f(&pos, |x| x), f(&neg, |x| x));
        let a = auroc_binary(&p, &n).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a + auroc_binary(&n, &p).unwrap() - 1.0).abs() < 1e-12);
        let (pe, ne) = (f(&pos, |x| (x / 3.0).exp()), f(&neg, |x| (x / 3.0).exp()));
        prop_assert_eq!(auroc_binary(&pe, &ne).unwrap(), a);
    }

    #[test]
    fn one_hot_truth_scores_perfectly(labels in prop::collection::vec(0usize..4, 8..40)) {
        prop_assume!((0..4).all(|c| labels.contains(&c)));
        let scores = Array2::from_shape_fn((labels.len(), 4), |(i, c)| f64::from(u8::from(labels[i] == c)));
        prop_assert_eq!(auroc_multiclass(scores.view(), &labels).unwrap(), 1.0);
    }

    #[test]
    fn confusion_totals(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..80),
    ) {
        let (labels, preds): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let (cm, acc) = confusion_and_accuracy(&preds, &labels, 5).unwrap();
        prop_assert_eq!(cm.total(), labels.len() as u64);
        let hits = labels.iter().zip(&preds).filter(|(a, b)| a == b).count();
        prop_assert_eq!(acc, hits as f64 / labels.len() as f64);
        let m = macro_prf(&cm).unwrap();
        for v in [m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoint_bytes_roundtrip(seed in any::<u64>(), classes in prop::option::of(2usize..6)) {
        let cfg = ModelConfig::toy(25);
        let mut params = init_model(&cfg, seed).unwrap();
        let mut class_names = Vec::new();
        if let Some(k) = classes {
            params.attach_classifier(&cfg, k, seed ^ 1).unwrap();
            class_names = (0..k).map(|i| format!("c{i}")).collect();
        }
        let ckpt = Checkpoint { config: cfg, class_names, params };
        prop_assert_eq!(Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap(), ckpt);
    }

    #[test]
    fn vocab_json_roundtrip(target in 26usize..80) {
        let model = bpe().truncated(target - 25);
        let v: &Vocab = model.vocab();
        prop_assert_eq!(&Vocab::from_json(&v.to_json()).unwrap(), v);
    }
}
