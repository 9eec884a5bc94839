//! Antibody sequence language-model toolkit.
//!
//! The crate covers the whole workflow for a RoBERTa-style antibody encoder
//! at desk scale:
//!
//! - [`data`]: OAS-style CSV ingestion, region-length filtering, seeded splits
//!   and labeled classification datasets.
//! - [`tokenizers`]: single-residue (SAA), residue-pair (DAA) and byte-pair
//!   (BPE) vocabularies with encode/decode.
//! - [`masking`]: dynamic masked-language-model corruption (15% / 80-10-10).
//! - [`model`]: post-LN transformer encoder with MLM and classification heads,
//!   hand-written backpropagation, AdamW and a linear warmup schedule.
//! - [`metrics`]: tie-aware AUROC, one-vs-rest macro AUROC, accuracy and
//!   macro precision/recall/F1.
//! - [`embed`]: pooled sequence embeddings and CSV export.
//! - [`bench`]: tokenizer throughput and length-reduction report.

pub mod bench;
pub mod data;
pub mod embed;
pub mod error;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod tokenizers;

pub use error::{Error, Result};
