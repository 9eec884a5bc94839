//! Synthetic antibody-like data shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use abtok::data::CANONICAL_RESIDUES;
use abtok::model::{init_model, ModelConfig, ModelParams};

pub const FR1: [&str; 3] = [
    "QVQLVQSGAEVKKPGASVKVSCKASGYTFT",
    "EVQLVESGGGLVQPGGSLRLSCAASGFTFS",
    "QVQLQESGPGLVKPSETLSLTCTVSGGSIS",
];
pub const FR2: &str = "WVRQAPGQGLEWMG";
pub const FR3: &str = "RVTMTRDTSTSTVYMELSSLRSEDTAVYYCAR";
pub const FR4: &str = "WGQGTLVTVSS";

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_residues(rng: &mut impl Rng, len: usize) -> String {
    (0..len)
        .map(|_| CANONICAL_RESIDUES[rng.random_range(0..20)])
        .collect()
}

/// Heavy-chain-shaped sequence: fixed frameworks around random CDRs.
pub fn heavy_chain(rng: &mut impl Rng) -> String {
    let fr1 = FR1[rng.random_range(0..FR1.len())];
    let mut cdr = |lo: usize, hi: usize| {
        let len = rng.random_range(lo..=hi);
        random_residues(rng, len)
    };
    let (cdr1, cdr2, cdr3) = (cdr(5, 8), cdr(8, 10), cdr(5, 15));
    format!("{fr1}{cdr1}{FR2}{cdr2}{FR3}{cdr3}{FR4}")
}

pub fn heavy_chains(n: usize, seed: u64) -> Vec<String> {
    let mut r = rng(seed);
    (0..n).map(|_| heavy_chain(&mut r)).collect()
}

const FD_STEP: f64 = 1e-4;

/// Toy model with every tensor (biases and norms included) perturbed, so
/// no coordinate sits at a symmetric point.
pub fn perturbed_toy(seed: u64) -> (ModelConfig, ModelParams<f64>) {
    let cfg = ModelConfig {
        initializer_range: 0.3,
        ..ModelConfig::toy(25)
    };
    let mut params: ModelParams<f64> = init_model(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for t in params.tensors_mut() {
        for v in t.data.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    (cfg, params)
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error over `samples` coordinates drawn uniformly from
/// all parameters.
pub fn gradient_error(
    params: &ModelParams<f64>,
    grads: &ModelParams<f64>,
    samples: usize,
    seed: u64,
    loss: impl Fn(&ModelParams<f64>) -> f64,
) -> f64 {
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
    let total: usize = sizes.iter().sum();
    let flat_grads: Vec<f64> = grads
        .tensors()
        .iter()
        .flat_map(|t| t.data.to_vec())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let idx = rng.random_range(0..total);
        let (mut tensor, mut offset) = (0, idx);
        while offset >= sizes[tensor] {
            offset -= sizes[tensor];
            tensor += 1;
        }
        let mut p = params.clone();
        p.tensors_mut()[tensor].data[offset] += FD_STEP;
        let up = loss(&p);
        p.tensors_mut()[tensor].data[offset] -= 2.0 * FD_STEP;
        let down = loss(&p);
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(flat_grads[idx], numeric));
    }
    worst
}
