//! Masked-LM pretraining and classification fine-tuning loops.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::masking::{mask_batch, EncodedBatch, MaskedBatch, MaskingConfig, IGNORE_INDEX};
use crate::metrics::{argmax, evaluate, EvalReport};
use crate::tokenizers::{TokenizedSeq, Tokenizer};

use super::config::ModelConfig;
use super::encoder::{backward_classify, backward_mlm, forward_classify, forward_mlm, Mode};
use super::optim::{adamw_step, lr_at, AdamState, OptimizerConfig};
use super::params::{init_model, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub seconds: f64,
    /// Learning rate used by the epoch's last update.
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn last_eval(&self) -> Option<&EvalReport> {
        self.epochs.last().and_then(|e| e.eval.as_ref())
    }

    /// One `{epoch, loss, seconds, lr}` object per line.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Line {
            epoch: usize,
            loss: f64,
            seconds: f64,
            lr: f64,
        }
        self.epochs
            .iter()
            .map(|e| {
                let line = Line {
                    epoch: e.epoch,
                    loss: e.loss,
                    seconds: e.seconds,
                    lr: e.lr,
                };
                serde_json::to_string(&line).expect("log line serializes") + "\n"
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub masking: MaskingConfig,
    /// `total_steps` is overwritten with `epochs × batches`.
    pub optimizer: OptimizerConfig,
}

impl Default for MlmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 32,
            seed: 0,
            masking: MaskingConfig::default(),
            optimizer: OptimizerConfig::pretrain_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    /// `total_steps` is overwritten with `epochs × batches`.
    pub optimizer: OptimizerConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            eval_batch_size: 16,
            seed: 0,
            optimizer: OptimizerConfig::finetune_default(),
        }
    }
}

/// SplitMix64 finalizer over a seed and a path of indices.
fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut x = seed;
    for &p in path {
        x ^= p
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(x << 6)
            .wrapping_add(x >> 2);
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

fn schedule(ocfg: &OptimizerConfig, total_steps: u64) -> Result<OptimizerConfig> {
    let mut o = *ocfg;
    o.total_steps = total_steps;
    if o.warmup_steps > total_steps {
        log::warn!(
            "warmup_steps {} exceeds the {total_steps} scheduled steps; clamping",
            o.warmup_steps
        );
        o.warmup_steps = total_steps;
    }
    o.validate()?;
    Ok(o)
}

fn check_batch_size(batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::Argument("batch_size must be positive".into()));
    }
    Ok(())
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

fn encode_all<S: AsRef<str>>(
    seqs: &[S],
    tokenizer: &Tokenizer,
    max_positions: usize,
) -> Result<Vec<TokenizedSeq>> {
    seqs.iter()
        .map(|s| tokenizer.encode(s.as_ref(), max_positions))
        .collect()
}

/// Pretrains a fresh encoder with dynamic masking: every epoch reshuffles
/// the data and draws a new corruption pattern for every batch.
pub fn train_mlm<S: AsRef<str>>(
    sequences: &[S],
    tokenizer: &Tokenizer,
    mcfg: &ModelConfig,
    tcfg: &MlmTrainConfig,
) -> Result<(ModelParams<f32>, TrainHistory)> {
    let params = init_model(mcfg, tcfg.seed)?;
    continue_mlm(params, sequences, tokenizer, mcfg, tcfg)
}

/// [`train_mlm`] starting from existing parameters.
pub fn continue_mlm<S: AsRef<str>>(
    mut params: ModelParams<f32>,
    sequences: &[S],
    tokenizer: &Tokenizer,
    mcfg: &ModelConfig,
    tcfg: &MlmTrainConfig,
) -> Result<(ModelParams<f32>, TrainHistory)> {
    mcfg.validate()?;
    tcfg.masking.validate()?;
    check_batch_size(tcfg.batch_size)?;
    let vocab = tokenizer.vocab();
    if vocab.len() != mcfg.vocab_size {
        return Err(Error::Argument(format!(
            "tokenizer has {} tokens but the model expects {}",
            vocab.len(),
            mcfg.vocab_size
        )));
    }
    let mut history = TrainHistory::default();
    if tcfg.epochs == 0 {
        return Ok((params, history));
    }
    if sequences.is_empty() {
        return Err(Error::Dataset("no sequences to train on".into()));
    }
    let encoded = encode_all(sequences, tokenizer, mcfg.max_positions)?;
    let batches = encoded.len().div_ceil(tcfg.batch_size);
    let ocfg = schedule(&tcfg.optimizer, (tcfg.epochs * batches) as u64)?;
    let mut state = AdamState::new(&params);
    let (mut step, mut updates) = (0u64, 0u64);
    log::info!(
        "pretraining {} parameters on {} sequences for {} epochs ({} steps)",
        params.num_parameters(),
        encoded.len(),
        tcfg.epochs,
        ocfg.total_steps
    );

    for epoch in 0..tcfg.epochs {
        let start = Instant::now();
        let order = shuffled(encoded.len(), derive_seed(tcfg.seed, &[1, epoch as u64]));
        let mut losses = Vec::with_capacity(batches);
        let mut lr = 0.0;
        for (b, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let seqs: Vec<TokenizedSeq> = chunk.iter().map(|&i| encoded[i].clone()).collect();
            let path = [epoch as u64, b as u64];
            let batch = mask_batch(
                &seqs,
                &tcfg.masking,
                vocab,
                derive_seed(tcfg.seed, &[2, path[0], path[1]]),
            )?;
            lr = lr_at(step, &ocfg);
            step += 1;
            if batch.supervised_count() == 0 {
                log::debug!(
                    "epoch {} batch {b}: nothing selected for masking, skipped",
                    epoch + 1
                );
                continue;
            }
            let mode = Mode::Train {
                seed: derive_seed(tcfg.seed, &[3, path[0], path[1]]),
            };
            let (out, grads) = backward_mlm(&params, mcfg, &batch, mode)?;
            if !out.loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss in epoch {}",
                    epoch + 1
                )));
            }
            updates += 1;
            adamw_step(&mut params, &grads, &mut state, &ocfg, updates, lr)?;
            losses.push(f64::from(out.loss));
        }
        let loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            loss,
            seconds: start.elapsed().as_secs_f64(),
            lr,
            eval: None,
        };
        log::info!(
            "epoch {} loss {:.5} lr {:.3e} ({:.2}s)",
            record.epoch,
            loss,
            lr,
            record.seconds
        );
        history.epochs.push(record);
    }
    Ok((params, history))
}

/// Fraction of supervised positions whose arg-max prediction equals the label.
pub fn masked_token_accuracy(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    batches: &[MaskedBatch],
) -> Result<f64> {
    let (mut correct, mut total) = (0usize, 0usize);
    for batch in batches {
        if batch.supervised_count() == 0 {
            continue;
        }
        let out = forward_mlm(params, cfg, batch, Mode::Eval)?;
        for ((row, j), &label) in batch.labels.indexed_iter() {
            if label == IGNORE_INDEX {
                continue;
            }
            let pred = argmax(
                out.logits
                    .slice(ndarray::s![row, j, ..])
                    .iter()
                    .map(|&v| f64::from(v)),
            );
            correct += usize::from(pred as i64 == label);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::UndefinedMetric("no supervised positions".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Raw classifier logits, `N × K`.
pub fn predict_logits<S: AsRef<str>>(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    tokenizer: &Tokenizer,
    sequences: &[S],
    batch_size: usize,
) -> Result<Array2<f64>> {
    check_batch_size(batch_size)?;
    let k = params
        .num_classes()
        .ok_or_else(|| Error::Argument("model has no classifier head".into()))?;
    let encoded = encode_all(sequences, tokenizer, cfg.max_positions)?;
    let pad = tokenizer.vocab().specials().pad;
    let mut logits = Array2::zeros((encoded.len(), k));
    for (b, chunk) in encoded.chunks(batch_size).enumerate() {
        let batch = EncodedBatch::from_sequences(chunk, pad);
        let out = forward_classify(params, cfg, &batch, &vec![0; chunk.len()], Mode::Eval)?;
        let start = b * batch_size;
        logits
            .slice_mut(ndarray::s![start..start + chunk.len(), ..])
            .assign(&out.logits.mapv(f64::from));
    }
    Ok(logits)
}

/// Softmax class probabilities, `N × K`.
pub fn predict_scores<S: AsRef<str>>(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    tokenizer: &Tokenizer,
    sequences: &[S],
    batch_size: usize,
) -> Result<Array2<f64>> {
    let mut scores = predict_logits(params, cfg, tokenizer, sequences, batch_size)?;
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    Ok(scores)
}

fn sequences_of(ds: &LabeledDataset) -> Vec<&str> {
    ds.records.iter().map(|r| r.sequence.as_str()).collect()
}

/// Fine-tunes a pretrained encoder with a freshly initialized `K`-way head,
/// evaluating on `eval` after every epoch when given.
pub fn finetune(
    train: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    tokenizer: &Tokenizer,
    pretrained: &ModelParams<f32>,
    mcfg: &ModelConfig,
    fcfg: &FinetuneConfig,
) -> Result<(ModelParams<f32>, TrainHistory)> {
    mcfg.validate()?;
    check_batch_size(fcfg.batch_size)?;
    check_batch_size(fcfg.eval_batch_size)?;
    if pretrained.token_embeddings.dim() != (mcfg.vocab_size, mcfg.hidden_size)
        || pretrained.layers.len() != mcfg.num_layers
    {
        return Err(Error::Argument(
            "pretrained parameters do not match the model config".into(),
        ));
    }
    if tokenizer.vocab().len() != mcfg.vocab_size {
        return Err(Error::Argument(format!(
            "tokenizer has {} tokens but the model expects {}",
            tokenizer.vocab().len(),
            mcfg.vocab_size
        )));
    }
    if let Some(ev) = eval {
        if ev.class_names != train.class_names {
            return Err(Error::Argument(format!(
                "evaluation classes {:?} differ from training classes {:?}",
                ev.class_names, train.class_names
            )));
        }
    }
    let k = train.num_classes();
    let mut params = pretrained.clone();
    params.attach_classifier(mcfg, k, derive_seed(fcfg.seed, &[0]))?;
    let mut history = TrainHistory::default();
    if fcfg.epochs == 0 {
        return Ok((params, history));
    }
    if train.records.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }

    let labels = train.label_indices()?;
    let encoded = encode_all(&sequences_of(train), tokenizer, mcfg.max_positions)?;
    let eval_data = match eval {
        Some(ev) => Some((sequences_of(ev), ev.label_indices()?)),
        None => None,
    };
    let pad = tokenizer.vocab().specials().pad;
    let batches = encoded.len().div_ceil(fcfg.batch_size);
    let ocfg = schedule(&fcfg.optimizer, (fcfg.epochs * batches) as u64)?;
    let mut state = AdamState::new(&params);
    let mut step = 0u64;
    log::info!(
        "fine-tuning on {} records, {k} classes, {} epochs ({} steps)",
        encoded.len(),
        fcfg.epochs,
        ocfg.total_steps
    );

    for epoch in 0..fcfg.epochs {
        let start = Instant::now();
        let order = shuffled(encoded.len(), derive_seed(fcfg.seed, &[1, epoch as u64]));
        let mut losses = Vec::with_capacity(batches);
        let mut lr = 0.0;
        for (b, chunk) in order.chunks(fcfg.batch_size).enumerate() {
            let seqs: Vec<TokenizedSeq> = chunk.iter().map(|&i| encoded[i].clone()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let batch = EncodedBatch::from_sequences(&seqs, pad);
            let mode = Mode::Train {
                seed: derive_seed(fcfg.seed, &[3, epoch as u64, b as u64]),
            };
            let (out, grads) = backward_classify(&params, mcfg, &batch, &ys, mode)?;
            if !out.loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss in epoch {}",
                    epoch + 1
                )));
            }
            lr = lr_at(step, &ocfg);
            step += 1;
            adamw_step(&mut params, &grads, &mut state, &ocfg, step, lr)?;
            losses.push(f64::from(out.loss));
        }
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let eval_report = match &eval_data {
            Some((seqs, ys)) => {
                let scores = predict_scores(&params, mcfg, tokenizer, seqs, fcfg.eval_batch_size)?;
                match evaluate(scores.view(), ys, &train.class_names) {
                    Ok(r) => Some(r),
                    Err(e) => {
                        log::warn!("epoch {}: evaluation skipped: {e}", epoch + 1);
                        None
                    }
                }
            }
            None => None,
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            loss,
            seconds: start.elapsed().as_secs_f64(),
            lr,
            eval: eval_report,
        };
        match &record.eval {
            Some(r) => log::info!(
                "epoch {} loss {:.5} auroc {:.4} acc {:.4} ({:.2}s)",
                record.epoch,
                loss,
                r.auroc,
                r.accuracy,
                record.seconds
            ),
            None => log::info!(
                "epoch {} loss {:.5} ({:.2}s)",
                record.epoch,
                loss,
                record.seconds
            ),
        }
        history.epochs.push(record);
    }
    Ok((params, history))
}
