//! Forward and backward passes.
//!
//! Rows of a batch never interact, so each row runs through the encoder on
//! its own and gradients are summed over rows in order. Padded key
//! positions get a score of −∞ before the softmax.
//!
//! Post-LN block:
//!
//! ```text
//! y   = LN(x + Drop(Attn(x)·Wo + bo))
//! out = LN(y + Drop(GELU(y·W1 + b1)·W2 + b2))
//! ```

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::masking::{EncodedBatch, MaskedBatch, IGNORE_INDEX};

use super::config::ModelConfig;
use super::params::{LayerNorm, Linear, ModelParams};
use super::scalar::Scalar;

/// Dropout on (`Train`) or off (`Eval`). The seed keys every dropout mask,
/// together with the row index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

struct Dropout {
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    fn new(mode: Mode, row: usize) -> Self {
        let rng = match mode {
            Mode::Eval => None,
            Mode::Train { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(row as u64);
                Some(rng)
            }
        };
        Self { rng }
    }

    /// Inverted-dropout mask with entries 0 or 1/(1-p).
    fn mask<T: Scalar>(&mut self, p: f64, shape: (usize, usize)) -> Option<Array2<T>> {
        let rng = self.rng.as_mut()?;
        if p <= 0.0 {
            return None;
        }
        let keep = T::of(1.0 / (1.0 - p));
        Some(Array2::from_shape_fn(shape, |_| {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        }))
    }
}

fn apply_mask<T: Scalar>(x: &mut Array2<T>, mask: &Option<Array2<T>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

fn linear<T: Scalar>(x: &ArrayView2<T>, l: &Linear<T>) -> Array2<T> {
    x.dot(&l.weight) + &l.bias
}

/// Accumulates parameter gradients and returns the input gradient.
fn linear_backward<T: Scalar>(
    x: &ArrayView2<T>,
    dy: &Array2<T>,
    l: &Linear<T>,
    g: &mut Linear<T>,
) -> Array2<T> {
    g.weight += &x.t().dot(dy);
    g.bias += &dy.sum_axis(Axis(0));
    dy.dot(&l.weight.t())
}

struct NormCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

fn layer_norm<T: Scalar>(x: &Array2<T>, ln: &LayerNorm<T>, eps: f64) -> (Array2<T>, NormCache<T>) {
    let width = T::of(x.ncols() as f64);
    let eps = T::of(eps);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / width;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / width;
        *r = T::one() / (var + eps).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let y = &xhat * &ln.gamma + &ln.beta;
    (y, NormCache { xhat, rstd })
}

fn layer_norm_backward<T: Scalar>(
    dy: &Array2<T>,
    cache: &NormCache<T>,
    ln: &LayerNorm<T>,
    g: &mut LayerNorm<T>,
) -> Array2<T> {
    g.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    g.beta += &dy.sum_axis(Axis(0));
    let dxhat = dy * &ln.gamma;
    let width = T::of(dy.ncols() as f64);
    let mut dx = Array2::zeros(dy.dim());
    for (((mut out, dh), xh), &rs) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows())
        .zip(cache.rstd.iter())
    {
        let mean_dh = dh.sum() / width;
        let mean_dh_xh = dh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / width;
        Zip::from(&mut out)
            .and(&dh)
            .and(&xh)
            .for_each(|o, &d, &x| *o = rs * (d - mean_dh - x * mean_dh_xh));
    }
    dx
}

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Row-wise softmax of `scores + key_bias`.
fn masked_softmax<T: Scalar>(scores: &mut Array2<T>, key_bias: &Array1<T>) {
    for mut row in scores.rows_mut() {
        row += key_bias;
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

struct LayerCache<T> {
    input: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    probs_mask: Vec<Option<Array2<T>>>,
    context: Array2<T>,
    attn_mask: Option<Array2<T>>,
    attn_norm: NormCache<T>,
    mid: Array2<T>,
    ffn_pre: Array2<T>,
    ffn_act: Array2<T>,
    ffn_mask: Option<Array2<T>>,
    ffn_norm: NormCache<T>,
}

struct RowCache<T> {
    ids: Vec<u32>,
    emb_norm: NormCache<T>,
    emb_mask: Option<Array2<T>>,
    layers: Vec<LayerCache<T>>,
}

/// Final hidden states (`n × H`) of one row.
fn encode_row<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    ids: &[u32],
    attention: &[u8],
    dropout: &mut Dropout,
) -> (Array2<T>, RowCache<T>) {
    let n = ids.len();
    let h = cfg.hidden_size;
    let d = cfg.head_dim();
    let scale = T::of(1.0 / (d as f64).sqrt());

    let mut emb = Array2::zeros((n, h));
    for (i, &id) in ids.iter().enumerate() {
        let mut row = emb.row_mut(i);
        row += &params.token_embeddings.row(id as usize);
        row += &params.position_embeddings.row(i);
    }
    let (mut x, emb_norm) = layer_norm(&emb, &params.embedding_norm, cfg.layer_norm_eps);
    let emb_mask = dropout.mask(cfg.hidden_dropout, (n, h));
    apply_mask(&mut x, &emb_mask);

    let key_bias: Array1<T> = attention
        .iter()
        .map(|&m| if m != 0 { T::zero() } else { T::neg_infinity() })
        .collect();

    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let xv = x.view();
        let q = linear(&xv, &layer.query);
        let k = linear(&xv, &layer.key);
        let v = linear(&xv, &layer.value);
        let mut context = Array2::zeros((n, h));
        let mut probs = Vec::with_capacity(cfg.num_heads);
        let mut probs_mask = Vec::with_capacity(cfg.num_heads);
        for head in 0..cfg.num_heads {
            let cols = s![.., head * d..(head + 1) * d];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            masked_softmax(&mut scores, &key_bias);
            let mask = dropout.mask(cfg.attention_dropout, (n, n));
            let ctx = match &mask {
                Some(m) => (&scores * m).dot(&v.slice(cols)),
                None => scores.dot(&v.slice(cols)),
            };
            context.slice_mut(cols).assign(&ctx);
            probs.push(scores);
            probs_mask.push(mask);
        }
        let mut attn = linear(&context.view(), &layer.attn_out);
        let attn_mask = dropout.mask(cfg.hidden_dropout, (n, h));
        apply_mask(&mut attn, &attn_mask);
        let (mid, attn_norm) = layer_norm(&(&x + &attn), &layer.attn_norm, cfg.layer_norm_eps);

        let ffn_pre = linear(&mid.view(), &layer.ffn_in);
        let ffn_act = ffn_pre.mapv(gelu);
        let mut ffn = linear(&ffn_act.view(), &layer.ffn_out);
        let ffn_mask = dropout.mask(cfg.hidden_dropout, (n, h));
        apply_mask(&mut ffn, &ffn_mask);
        let (out, ffn_norm) = layer_norm(&(&mid + &ffn), &layer.ffn_norm, cfg.layer_norm_eps);

        layers.push(LayerCache {
            input: x,
            q,
            k,
            v,
            probs,
            probs_mask,
            context,
            attn_mask,
            attn_norm,
            mid,
            ffn_pre,
            ffn_act,
            ffn_mask,
            ffn_norm,
        });
        x = out;
    }
    (
        x,
        RowCache {
            ids: ids.to_vec(),
            emb_norm,
            emb_mask,
            layers,
        },
    )
}

fn encode_row_backward<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    cache: &RowCache<T>,
    mut dx: Array2<T>,
    grads: &mut ModelParams<T>,
) {
    let d = cfg.head_dim();
    let scale = T::of(1.0 / (d as f64).sqrt());
    for ((layer, g), c) in params
        .layers
        .iter()
        .zip(grads.layers.iter_mut())
        .zip(cache.layers.iter())
        .rev()
    {
        // feed-forward sublayer
        let dsum = layer_norm_backward(&dx, &c.ffn_norm, &layer.ffn_norm, &mut g.ffn_norm);
        let mut dffn = dsum.clone();
        apply_mask(&mut dffn, &c.ffn_mask);
        let dact = linear_backward(&c.ffn_act.view(), &dffn, &layer.ffn_out, &mut g.ffn_out);
        let mut dpre = dact;
        Zip::from(&mut dpre)
            .and(&c.ffn_pre)
            .for_each(|dp, &x| *dp *= gelu_grad(x));
        let mut dmid = dsum;
        dmid += &linear_backward(&c.mid.view(), &dpre, &layer.ffn_in, &mut g.ffn_in);

        // attention sublayer
        let dsum = layer_norm_backward(&dmid, &c.attn_norm, &layer.attn_norm, &mut g.attn_norm);
        let mut dattn = dsum.clone();
        apply_mask(&mut dattn, &c.attn_mask);
        let dcontext = linear_backward(&c.context.view(), &dattn, &layer.attn_out, &mut g.attn_out);

        let mut dq = Array2::zeros(c.q.dim());
        let mut dk = Array2::zeros(c.k.dim());
        let mut dv = Array2::zeros(c.v.dim());
        for head in 0..cfg.num_heads {
            let cols = s![.., head * d..(head + 1) * d];
            let probs = &c.probs[head];
            let dctx = dcontext.slice(cols);
            let vh = c.v.slice(cols);
            let dropped = match &c.probs_mask[head] {
                Some(m) => probs * m,
                None => probs.clone(),
            };
            dv.slice_mut(cols).assign(&dropped.t().dot(&dctx));
            let mut dprobs = dctx.dot(&vh.t());
            apply_mask(&mut dprobs, &c.probs_mask[head]);
            // softmax backward: dS = P ⊙ (dP − rowsum(dP ⊙ P))
            let mut dscores = dprobs;
            for (mut ds, p) in dscores.rows_mut().into_iter().zip(probs.rows()) {
                let dot = ds.iter().zip(p.iter()).map(|(&a, &b)| a * b).sum::<T>();
                Zip::from(&mut ds)
                    .and(&p)
                    .for_each(|v, &pv| *v = pv * (*v - dot) * scale);
            }
            dq.slice_mut(cols).assign(&dscores.dot(&c.k.slice(cols)));
            dk.slice_mut(cols)
                .assign(&dscores.t().dot(&c.q.slice(cols)));
        }
        let input = c.input.view();
        let mut dinput = dsum;
        dinput += &linear_backward(&input, &dq, &layer.query, &mut g.query);
        dinput += &linear_backward(&input, &dk, &layer.key, &mut g.key);
        dinput += &linear_backward(&input, &dv, &layer.value, &mut g.value);
        dx = dinput;
    }

    apply_mask(&mut dx, &cache.emb_mask);
    let demb = layer_norm_backward(
        &dx,
        &cache.emb_norm,
        &params.embedding_norm,
        &mut grads.embedding_norm,
    );
    for (i, &id) in cache.ids.iter().enumerate() {
        let row = demb.row(i);
        let mut t = grads.token_embeddings.row_mut(id as usize);
        t += &row;
        let mut p = grads.position_embeddings.row_mut(i);
        p += &row;
    }
}

struct MlmHeadCache<T> {
    dense_out: Array2<T>,
    norm: NormCache<T>,
    normed: Array2<T>,
}

fn mlm_head<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    hidden: &Array2<T>,
) -> (Array2<T>, MlmHeadCache<T>) {
    let head = &params.mlm_head;
    let dense_out = linear(&hidden.view(), &head.dense);
    let act = dense_out.mapv(gelu);
    let (normed, norm) = layer_norm(&act, &head.norm, cfg.layer_norm_eps);
    // decoder is tied to the token embeddings
    let logits = normed.dot(&params.token_embeddings.t()) + &head.bias;
    (
        logits,
        MlmHeadCache {
            dense_out,
            norm,
            normed,
        },
    )
}

fn mlm_head_backward<T: Scalar>(
    params: &ModelParams<T>,
    hidden: &Array2<T>,
    cache: &MlmHeadCache<T>,
    dlogits: &Array2<T>,
    grads: &mut ModelParams<T>,
) -> Array2<T> {
    grads.token_embeddings += &dlogits.t().dot(&cache.normed);
    grads.mlm_head.bias += &dlogits.sum_axis(Axis(0));
    let dnormed = dlogits.dot(&params.token_embeddings);
    let mut dact = layer_norm_backward(
        &dnormed,
        &cache.norm,
        &params.mlm_head.norm,
        &mut grads.mlm_head.norm,
    );
    Zip::from(&mut dact)
        .and(&cache.dense_out)
        .for_each(|d, &x| *d *= gelu_grad(x));
    linear_backward(
        &hidden.view(),
        &dact,
        &params.mlm_head.dense,
        &mut grads.mlm_head.dense,
    )
}

/// `-log softmax(logits)[target]` and the softmax itself.
fn cross_entropy<T: Scalar>(logits: ndarray::ArrayView1<T>, target: usize) -> (T, Array1<T>) {
    let max = logits.fold(T::neg_infinity(), |m, &v| m.max(v));
    let exp = logits.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    let loss = sum.ln() + max - logits[target];
    (loss, exp / sum)
}

fn check_ids<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    ids: &Array2<u32>,
    mask: &Array2<u8>,
) -> Result<()> {
    if ids.dim() != mask.dim() {
        return Err(Error::Argument(format!(
            "input ids {:?} and attention mask {:?} differ in shape",
            ids.dim(),
            mask.dim()
        )));
    }
    if ids.ncols() > cfg.max_positions {
        return Err(Error::Argument(format!(
            "sequence length {} exceeds max_positions {}",
            ids.ncols(),
            cfg.max_positions
        )));
    }
    let vocab = params.token_embeddings.nrows();
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab) {
        return Err(Error::Argument(format!(
            "token id {bad} outside vocabulary of {vocab}"
        )));
    }
    if params.layers.len() != cfg.num_layers || params.token_embeddings.ncols() != cfg.hidden_size {
        return Err(Error::Argument(
            "parameters do not match the model config".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmOutput<T> {
    /// `B × L × V`
    pub logits: Array3<T>,
    /// Mean cross-entropy over supervised positions.
    pub loss: T,
}

fn mlm_pass<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &MaskedBatch,
    mode: Mode,
    with_grads: bool,
) -> Result<(MlmOutput<T>, Option<ModelParams<T>>)> {
    check_ids(params, cfg, &batch.input_ids, &batch.attention_mask)?;
    let supervised = batch.supervised_count();
    if supervised == 0 {
        return Err(Error::Argument(
            "batch has no supervised positions; MLM loss is undefined".into(),
        ));
    }
    let vocab = cfg.vocab_size;
    if let Some(&bad) = batch
        .labels
        .iter()
        .find(|&&l| l != IGNORE_INDEX && (l < 0 || l as usize >= vocab))
    {
        return Err(Error::Argument(format!(
            "label {bad} outside vocabulary of {vocab}"
        )));
    }
    let (b, l) = batch.input_ids.dim();
    let norm = T::of(1.0 / supervised as f64);

    let row_pass = |row: usize, grads: Option<&mut ModelParams<T>>| -> (Array2<T>, T) {
        let ids = batch.input_ids.row(row).to_vec();
        let attention = batch.attention_mask.row(row).to_vec();
        let mut dropout = Dropout::new(mode, row);
        let (hidden, cache) = encode_row(params, cfg, &ids, &attention, &mut dropout);
        let (logits, head_cache) = mlm_head(params, cfg, &hidden);
        let mut loss = T::zero();
        let mut dlogits = Array2::zeros(logits.dim());
        for (j, &label) in batch.labels.row(row).iter().enumerate() {
            if label == IGNORE_INDEX {
                continue;
            }
            let (ce, probs) = cross_entropy(logits.row(j), label as usize);
            loss += ce;
            let mut d = dlogits.row_mut(j);
            d.assign(&(probs * norm));
            d[label as usize] -= norm;
        }
        if let Some(grads) = grads {
            let dhidden = mlm_head_backward(params, &hidden, &head_cache, &dlogits, grads);
            encode_row_backward(params, cfg, &cache, dhidden, grads);
        }
        (logits, loss)
    };

    let mut logits = Array3::zeros((b, l, vocab));
    let mut total = T::zero();
    let grads = if with_grads {
        let mut grads = params.zeros_like();
        for row in 0..b {
            let (lg, loss) = row_pass(row, Some(&mut grads));
            logits.slice_mut(s![row, .., ..]).assign(&lg);
            total += loss;
        }
        Some(grads)
    } else {
        let rows: Vec<(Array2<T>, T)> = (0..b)
            .into_par_iter()
            .map(|row| row_pass(row, None))
            .collect();
        for (row, (lg, loss)) in rows.into_iter().enumerate() {
            logits.slice_mut(s![row, .., ..]).assign(&lg);
            total += loss;
        }
        None
    };
    Ok((
        MlmOutput {
            logits,
            loss: total * norm,
        },
        grads,
    ))
}

/// Masked-LM logits at every position and the mean loss over supervised
/// positions.
pub fn forward_mlm<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &MaskedBatch,
    mode: Mode,
) -> Result<MlmOutput<T>> {
    mlm_pass(params, cfg, batch, mode, false).map(|(out, _)| out)
}

/// Forward pass plus exact gradients of the MLM loss for every parameter.
pub fn backward_mlm<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &MaskedBatch,
    mode: Mode,
) -> Result<(MlmOutput<T>, ModelParams<T>)> {
    let (out, grads) = mlm_pass(params, cfg, batch, mode, true)?;
    Ok((out, grads.expect("gradients requested")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyOutput<T> {
    /// `B × K`
    pub logits: Array2<T>,
    /// Mean cross-entropy over the batch.
    pub loss: T,
}

fn classify_pass<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &EncodedBatch,
    labels: &[usize],
    mode: Mode,
    with_grads: bool,
) -> Result<(ClassifyOutput<T>, Option<ModelParams<T>>)> {
    check_ids(params, cfg, &batch.input_ids, &batch.attention_mask)?;
    let head = params
        .classifier
        .as_ref()
        .ok_or_else(|| Error::Argument("model has no classifier head".into()))?;
    let k = head.num_classes();
    let b = batch.batch_size();
    if labels.len() != b {
        return Err(Error::Argument(format!(
            "{} labels for {b} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Argument(format!("label {bad} outside 0..{k}")));
    }
    if b == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    let norm = T::of(1.0 / b as f64);

    let row_pass = |row: usize, grads: Option<&mut ModelParams<T>>| -> (Array1<T>, T) {
        let ids = batch.input_ids.row(row).to_vec();
        let attention = batch.attention_mask.row(row).to_vec();
        let mut dropout = Dropout::new(mode, row);
        let (hidden, cache) = encode_row(params, cfg, &ids, &attention, &mut dropout);

        let mut pooled = hidden.slice(s![0..1, ..]).to_owned();
        let pooled_mask = dropout.mask(cfg.hidden_dropout, pooled.dim());
        apply_mask(&mut pooled, &pooled_mask);
        let activated = linear(&pooled.view(), &head.dense).mapv(|v| v.tanh());
        let mut dense = activated.clone();
        let dense_mask = dropout.mask(cfg.hidden_dropout, dense.dim());
        apply_mask(&mut dense, &dense_mask);
        let logits = linear(&dense.view(), &head.out);
        let (loss, probs) = cross_entropy(logits.row(0), labels[row]);

        if let Some(grads) = grads {
            let mut dlogits = probs.insert_axis(Axis(0)) * norm;
            dlogits[[0, labels[row]]] -= norm;
            let g = grads
                .classifier
                .as_mut()
                .expect("gradient buffer mirrors params");
            let mut ddense = linear_backward(&dense.view(), &dlogits, &head.out, &mut g.out);
            apply_mask(&mut ddense, &dense_mask);
            Zip::from(&mut ddense)
                .and(&activated)
                .for_each(|d, &t| *d *= T::one() - t * t);
            let mut dpooled = linear_backward(&pooled.view(), &ddense, &head.dense, &mut g.dense);
            apply_mask(&mut dpooled, &pooled_mask);
            let mut dhidden = Array2::zeros(hidden.dim());
            dhidden.slice_mut(s![0..1, ..]).assign(&dpooled);
            encode_row_backward(params, cfg, &cache, dhidden, grads);
        }
        (logits.row(0).to_owned(), loss)
    };

    let mut logits = Array2::zeros((b, k));
    let mut total = T::zero();
    let grads = if with_grads {
        let mut grads = params.zeros_like();
        for row in 0..b {
            let (lg, loss) = row_pass(row, Some(&mut grads));
            logits.row_mut(row).assign(&lg);
            total += loss;
        }
        Some(grads)
    } else {
        let rows: Vec<(Array1<T>, T)> = (0..b)
            .into_par_iter()
            .map(|row| row_pass(row, None))
            .collect();
        for (row, (lg, loss)) in rows.into_iter().enumerate() {
            logits.row_mut(row).assign(&lg);
            total += loss;
        }
        None
    };
    Ok((
        ClassifyOutput {
            logits,
            loss: total * norm,
        },
        grads,
    ))
}

/// Class logits from the start-token state and the mean cross-entropy.
pub fn forward_classify<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &EncodedBatch,
    labels: &[usize],
    mode: Mode,
) -> Result<ClassifyOutput<T>> {
    classify_pass(params, cfg, batch, labels, mode, false).map(|(out, _)| out)
}

pub fn backward_classify<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &EncodedBatch,
    labels: &[usize],
    mode: Mode,
) -> Result<(ClassifyOutput<T>, ModelParams<T>)> {
    let (out, grads) = classify_pass(params, cfg, batch, labels, mode, true)?;
    Ok((out, grads.expect("gradients requested")))
}

/// Final-layer hidden states (`L × H` per row) with dropout off.
pub fn encode_hidden<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &EncodedBatch,
) -> Result<Vec<Array2<T>>> {
    check_ids(params, cfg, &batch.input_ids, &batch.attention_mask)?;
    Ok((0..batch.batch_size())
        .into_par_iter()
        .map(|row| {
            let ids = batch.input_ids.row(row).to_vec();
            let attention = batch.attention_mask.row(row).to_vec();
            encode_row(
                params,
                cfg,
                &ids,
                &attention,
                &mut Dropout::new(Mode::Eval, row),
            )
            .0
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{mask_batch, MaskingConfig};
    use crate::model::params::{init_model, ParamKind};
    use crate::tokenizers::Tokenizer;

    fn toy_batch(seed: u64) -> (ModelConfig, MaskedBatch) {
        let t = Tokenizer::saa();
        let seqs: Vec<_> = ["QVQLVQSG", "EVQLVESGGGLV"]
            .iter()
            .map(|s| t.encode(s, 32).unwrap())
            .collect();
        let cfg = MaskingConfig {
            p_select: 0.5,
            ..Default::default()
        };
        (
            ModelConfig::toy(25),
            mask_batch(&seqs, &cfg, t.vocab(), seed).unwrap(),
        )
    }

    #[test]
    fn logits_shape() {
        let (cfg, batch) = toy_batch(1);
        let params: ModelParams<f32> = init_model(&cfg, 0).unwrap();
        let out = forward_mlm(&params, &cfg, &batch, Mode::Eval).unwrap();
        assert_eq!(out.logits.dim(), (2, 14, 25));
        assert!(out.loss.is_finite() && out.loss > 0.0);
    }

    #[test]
    fn zero_weights_give_uniform_loss() {
        let (cfg, batch) = toy_batch(2);
        let mut params: ModelParams<f64> = init_model(&cfg, 0).unwrap();
        for t in params.tensors_mut() {
            if t.kind.decays() {
                t.data.fill(0.0);
            }
        }
        let out = forward_mlm(&params, &cfg, &batch, Mode::Eval).unwrap();
        assert!((out.loss - 25f64.ln()).abs() < 1e-12);
        assert!((25f64.ln() - 3.21888).abs() < 1e-5);
    }

    #[test]
    fn eval_is_deterministic() {
        let (cfg, batch) = toy_batch(3);
        let params: ModelParams<f32> = init_model(&cfg, 4).unwrap();
        let a = forward_mlm(&params, &cfg, &batch, Mode::Eval).unwrap();
        let b = forward_mlm(&params, &cfg, &batch, Mode::Eval).unwrap();
        assert_eq!(a.loss, b.loss);
    }

    #[test]
    fn dropout_changes_train_loss() {
        let (mut cfg, batch) = toy_batch(3);
        cfg.hidden_dropout = 0.1;
        cfg.attention_dropout = 0.1;
        let params: ModelParams<f32> = init_model(&cfg, 4).unwrap();
        let a = forward_mlm(&params, &cfg, &batch, Mode::Train { seed: 1 }).unwrap();
        let b = forward_mlm(&params, &cfg, &batch, Mode::Train { seed: 2 }).unwrap();
        let c = forward_mlm(&params, &cfg, &batch, Mode::Train { seed: 1 }).unwrap();
        assert_ne!(a.loss, b.loss);
        assert_eq!(a.loss, c.loss);
    }

    #[test]
    fn unsupervised_batch_rejected() {
        let (cfg, mut batch) = toy_batch(3);
        batch.labels.fill(IGNORE_INDEX);
        let params: ModelParams<f32> = init_model(&cfg, 0).unwrap();
        assert!(matches!(
            forward_mlm(&params, &cfg, &batch, Mode::Eval),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn gradient_shapes_and_linearity() {
        let (cfg, batch) = toy_batch(5);
        let params: ModelParams<f64> = init_model(&cfg, 1).unwrap();
        let (_, grads) = backward_mlm(&params, &cfg, &batch, Mode::Eval).unwrap();
        for (p, g) in params.tensors().iter().zip(grads.tensors()) {
            assert_eq!(p.shape, g.shape);
            assert_eq!(p.name, g.name);
        }
        // doubling the batch duplicates every term and leaves the mean unchanged
        let mut doubled = grads.clone();
        doubled.add_scaled(&grads, 1.0);
        for (a, b) in doubled.tensors().iter().zip(grads.tensors()) {
            for (x, y) in a.data.iter().zip(b.data) {
                assert!((x - 2.0 * y).abs() < 1e-15);
            }
        }
        assert!(grads
            .tensors()
            .iter()
            .filter(|t| t.kind == ParamKind::Weight)
            .all(|t| t.data.iter().any(|v| *v != 0.0)));
    }

    #[test]
    fn classify_shapes_and_uniform_loss() {
        let (cfg, batch) = toy_batch(6);
        let mut params: ModelParams<f64> = init_model(&cfg, 1).unwrap();
        params.attach_classifier(&cfg, 5, 2).unwrap();
        let enc = batch.encoded();
        let out = forward_classify(&params, &cfg, &enc, &[0, 4], Mode::Eval).unwrap();
        assert_eq!(out.logits.dim(), (2, 5));
        assert!(forward_classify(&params, &cfg, &enc, &[0, 5], Mode::Eval).is_err());

        for t in params.tensors_mut() {
            if t.kind.decays() {
                t.data.fill(0.0);
            }
        }
        let out = forward_classify(&params, &cfg, &enc, &[0, 4], Mode::Eval).unwrap();
        assert!((out.loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gelu_reference_values() {
        // GELU(1) = Φ(1) = 0.841344746...
        assert!((gelu(1.0f64) - 0.8413447460685429).abs() < 1e-12);
        assert_eq!(gelu(0.0f64), 0.0);
        let h = 1e-6;
        for x in [-2.0f64, -0.3, 0.0, 0.7, 3.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut scores = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.37 - 1.0);
        let bias = Array1::from(vec![0.0, 0.0, f64::NEG_INFINITY, 0.0]);
        masked_softmax(&mut scores, &bias);
        for row in scores.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert_eq!(row[2], 0.0);
        }
    }
}
