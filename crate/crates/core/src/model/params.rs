use ndarray::{Array, Array1, Array2, Dimension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

use super::config::ModelConfig;
use super::scalar::Scalar;

/// Role of a tensor; decides weight decay and initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Weight,
    Bias,
    Norm,
}

impl ParamKind {
    pub fn decays(&self) -> bool {
        matches!(self, ParamKind::Embedding | ParamKind::Weight)
    }
}

pub struct ParamRef<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

pub struct ParamMut<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

fn param_ref<'a, T, D: Dimension>(
    name: String,
    kind: ParamKind,
    a: &'a Array<T, D>,
) -> ParamRef<'a, T> {
    ParamRef {
        name,
        kind,
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("parameters are contiguous"),
    }
}

fn param_mut<'a, T, D: Dimension>(
    name: String,
    kind: ParamKind,
    a: &'a mut Array<T, D>,
) -> ParamMut<'a, T> {
    let shape = a.shape().to_vec();
    ParamMut {
        name,
        kind,
        shape,
        data: a.as_slice_mut().expect("parameters are contiguous"),
    }
}

/// Affine map `x·W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        out.push(param_ref(
            format!("{prefix}.weight"),
            ParamKind::Weight,
            &self.weight,
        ));
        out.push(param_ref(
            format!("{prefix}.bias"),
            ParamKind::Bias,
            &self.bias,
        ));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        out.push(param_mut(
            format!("{prefix}.weight"),
            ParamKind::Weight,
            &mut self.weight,
        ));
        out.push(param_mut(
            format!("{prefix}.bias"),
            ParamKind::Bias,
            &mut self.bias,
        ));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(size: usize) -> Self {
        Self {
            gamma: Array1::ones(size),
            beta: Array1::zeros(size),
        }
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        out.push(param_ref(
            format!("{prefix}.gamma"),
            ParamKind::Norm,
            &self.gamma,
        ));
        out.push(param_ref(
            format!("{prefix}.beta"),
            ParamKind::Norm,
            &self.beta,
        ));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        out.push(param_mut(
            format!("{prefix}.gamma"),
            ParamKind::Norm,
            &mut self.gamma,
        ));
        out.push(param_mut(
            format!("{prefix}.beta"),
            ParamKind::Norm,
            &mut self.beta,
        ));
    }
}

/// One post-LN encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub attn_out: Linear<T>,
    pub attn_norm: LayerNorm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
    pub ffn_norm: LayerNorm<T>,
}

impl<T: Scalar> EncoderLayer<T> {
    fn new(cfg: &ModelConfig) -> Self {
        let h = cfg.hidden_size;
        Self {
            query: Linear::zeros(h, h),
            key: Linear::zeros(h, h),
            value: Linear::zeros(h, h),
            attn_out: Linear::zeros(h, h),
            attn_norm: LayerNorm::new(h),
            ffn_in: Linear::zeros(h, cfg.intermediate_size),
            ffn_out: Linear::zeros(cfg.intermediate_size, h),
            ffn_norm: LayerNorm::new(h),
        }
    }
}

/// Dense + GELU + LayerNorm, then the tied decoder (token embeddings) plus
/// an output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmHead<T> {
    pub dense: Linear<T>,
    pub norm: LayerNorm<T>,
    pub bias: Array1<T>,
}

/// Start-token state → dense + tanh → K-way projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T> {
    pub dense: Linear<T>,
    pub out: Linear<T>,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn zeros(hidden: usize, num_classes: usize) -> Self {
        Self {
            dense: Linear::zeros(hidden, hidden),
            out: Linear::zeros(hidden, num_classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.out.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub token_embeddings: Array2<T>,
    pub position_embeddings: Array2<T>,
    pub embedding_norm: LayerNorm<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub mlm_head: MlmHead<T>,
    pub classifier: Option<ClassifierHead<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// All weights zero, layer norms at identity.
    pub fn zeros(cfg: &ModelConfig, num_classes: Option<usize>) -> Self {
        let h = cfg.hidden_size;
        Self {
            token_embeddings: Array2::zeros((cfg.vocab_size, h)),
            position_embeddings: Array2::zeros((cfg.max_positions, h)),
            embedding_norm: LayerNorm::new(h),
            layers: (0..cfg.num_layers)
                .map(|_| EncoderLayer::new(cfg))
                .collect(),
            mlm_head: MlmHead {
                dense: Linear::zeros(h, h),
                norm: LayerNorm::new(h),
                bias: Array1::zeros(cfg.vocab_size),
            },
            classifier: num_classes.map(|k| ClassifierHead::zeros(h, k)),
        }
    }

    /// Same shapes, every entry zero (gradient buffers, optimizer moments).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(T::zero());
        }
        z
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.classifier.as_ref().map(ClassifierHead::num_classes)
    }

    /// Every tensor in a fixed order with a stable dotted name.
    pub fn tensors(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        out.push(param_ref(
            "embeddings.token".into(),
            ParamKind::Embedding,
            &self.token_embeddings,
        ));
        out.push(param_ref(
            "embeddings.position".into(),
            ParamKind::Embedding,
            &self.position_embeddings,
        ));
        self.embedding_norm.collect("embeddings.norm", &mut out);
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            l.query.collect(&format!("{p}.attention.query"), &mut out);
            l.key.collect(&format!("{p}.attention.key"), &mut out);
            l.value.collect(&format!("{p}.attention.value"), &mut out);
            l.attn_out
                .collect(&format!("{p}.attention.output"), &mut out);
            l.attn_norm
                .collect(&format!("{p}.attention.norm"), &mut out);
            l.ffn_in.collect(&format!("{p}.ffn.input"), &mut out);
            l.ffn_out.collect(&format!("{p}.ffn.output"), &mut out);
            l.ffn_norm.collect(&format!("{p}.ffn.norm"), &mut out);
        }
        self.mlm_head.dense.collect("mlm.dense", &mut out);
        self.mlm_head.norm.collect("mlm.norm", &mut out);
        out.push(param_ref(
            "mlm.bias".into(),
            ParamKind::Bias,
            &self.mlm_head.bias,
        ));
        if let Some(c) = &self.classifier {
            c.dense.collect("classifier.dense", &mut out);
            c.out.collect("classifier.out", &mut out);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        out.push(param_mut(
            "embeddings.token".into(),
            ParamKind::Embedding,
            &mut self.token_embeddings,
        ));
        out.push(param_mut(
            "embeddings.position".into(),
            ParamKind::Embedding,
            &mut self.position_embeddings,
        ));
        self.embedding_norm.collect_mut("embeddings.norm", &mut out);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("layers.{i}");
            l.query
                .collect_mut(&format!("{p}.attention.query"), &mut out);
            l.key.collect_mut(&format!("{p}.attention.key"), &mut out);
            l.value
                .collect_mut(&format!("{p}.attention.value"), &mut out);
            l.attn_out
                .collect_mut(&format!("{p}.attention.output"), &mut out);
            l.attn_norm
                .collect_mut(&format!("{p}.attention.norm"), &mut out);
            l.ffn_in.collect_mut(&format!("{p}.ffn.input"), &mut out);
            l.ffn_out.collect_mut(&format!("{p}.ffn.output"), &mut out);
            l.ffn_norm.collect_mut(&format!("{p}.ffn.norm"), &mut out);
        }
        self.mlm_head.dense.collect_mut("mlm.dense", &mut out);
        self.mlm_head.norm.collect_mut("mlm.norm", &mut out);
        out.push(param_mut(
            "mlm.bias".into(),
            ParamKind::Bias,
            &mut self.mlm_head.bias,
        ));
        if let Some(c) = &mut self.classifier {
            c.dense.collect_mut("classifier.dense", &mut out);
            c.out.collect_mut("classifier.out", &mut out);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Element-wise conversion to another scalar type.
    pub fn cast<U: Scalar>(&self, cfg: &ModelConfig) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(cfg, self.num_classes());
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            debug_assert_eq!(dst.name, src.name);
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d = U::of(s.f64());
            }
        }
        out
    }

    /// Adds `scale · other` to every tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &s) in dst.data.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }

    /// Replaces the classifier with a freshly initialized `num_classes`-way head.
    pub fn attach_classifier(
        &mut self,
        cfg: &ModelConfig,
        num_classes: usize,
        seed: u64,
    ) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::Argument(format!(
                "classifier needs at least 2 classes, got {num_classes}"
            )));
        }
        let mut head = ClassifierHead::zeros(cfg.hidden_size, num_classes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        fill_truncated_normal(&mut head.dense.weight, cfg.initializer_range, &mut rng);
        fill_truncated_normal(&mut head.out.weight, cfg.initializer_range, &mut rng);
        self.classifier = Some(head);
        Ok(())
    }
}

/// N(0, std²) truncated at ±2σ, by rejection.
fn truncated_normal(std: f64, rng: &mut impl Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn fill_truncated_normal<T: Scalar, D: Dimension>(
    a: &mut Array<T, D>,
    std: f64,
    rng: &mut impl Rng,
) {
    a.mapv_inplace(|_| T::of(truncated_normal(std, rng)));
}

/// Random encoder + MLM head; weights from a truncated normal, biases zero,
/// layer norms at identity. No classifier head is attached.
pub fn init_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut params = ModelParams::zeros(cfg, None);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.tensors_mut() {
        if t.kind.decays() {
            for v in t.data.iter_mut() {
                *v = T::of(truncated_normal(cfg.initializer_range, &mut rng));
            }
        }
    }
    log::debug!(
        "initialized model with {} parameters",
        params.num_parameters()
    );
    Ok(params)
}
