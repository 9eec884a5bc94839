//! Pooled sequence embeddings and their CSV export.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Chain, SequenceRecord, Task};
use crate::error::{Error, Result};
use crate::masking::EncodedBatch;
use crate::model::{encode_hidden, ModelConfig, ModelParams};
use crate::tokenizers::Tokenizer;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Average over payload positions (no start/end/pad).
    #[default]
    Mean,
    /// Start-token state.
    FirstToken,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::FirstToken => "first",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "first" | "first_token" => Ok(Pooling::FirstToken),
            other => Err(Error::Argument(format!(
                "unknown pooling {other:?} (mean, first)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMeta {
    pub id: String,
    pub chain: Chain,
    pub labels: BTreeMap<Task, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    /// `N × H`
    pub vectors: Array2<f64>,
    pub rows: Vec<RowMeta>,
    pub pooling: Pooling,
}

/// Embeds `records` in order; `ids[i]` names row `i` (defaults to its index).
pub fn extract_embeddings(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    records: &[SequenceRecord],
    ids: Option<&[String]>,
    tokenizer: &Tokenizer,
    pooling: Pooling,
    batch_size: usize,
) -> Result<EmbeddingMatrix> {
    if batch_size == 0 {
        return Err(Error::Argument("batch_size must be positive".into()));
    }
    let ids: Vec<String> = match ids {
        Some(ids) if ids.len() == records.len() => ids.to_vec(),
        Some(ids) => {
            return Err(Error::Argument(format!(
                "{} ids for {} records",
                ids.len(),
                records.len()
            )))
        }
        None => (0..records.len()).map(|i| i.to_string()).collect(),
    };
    let encoded = records
        .iter()
        .zip(&ids)
        .map(|(r, id)| {
            tokenizer
                .encode(&r.sequence, cfg.max_positions)
                .map_err(|e| match e {
                    Error::Length { len, max, .. } => Error::Length {
                        id: id.clone(),
                        len,
                        max,
                    },
                    other => Error::Dataset(format!("sequence {id}: {other}")),
                })
        })
        .collect::<Result<Vec<_>>>()?;

    let pad = tokenizer.vocab().specials().pad;
    let mut vectors = Array2::zeros((records.len(), cfg.hidden_size));
    for (b, chunk) in encoded.chunks(batch_size).enumerate() {
        let batch = EncodedBatch::from_sequences(chunk, pad);
        let hidden = encode_hidden(params, cfg, &batch)?;
        for (i, (h, seq)) in hidden.iter().zip(chunk).enumerate() {
            let pooled = match pooling {
                Pooling::FirstToken => h.row(0).mapv(f64::from),
                Pooling::Mean => h
                    .slice(s![1..seq.len() - 1, ..])
                    .mapv(f64::from)
                    .mean_axis(ndarray::Axis(0))
                    .expect("payload is never empty"),
            };
            vectors.row_mut(b * batch_size + i).assign(&pooled);
        }
    }
    if vectors.iter().any(|v| !v.is_finite()) {
        return Err(Error::Training("non-finite embedding".into()));
    }
    let rows = records
        .iter()
        .zip(ids)
        .map(|(r, id)| RowMeta {
            id,
            chain: r.chain,
            labels: r.labels.clone(),
        })
        .collect();
    Ok(EmbeddingMatrix {
        vectors,
        rows,
        pooling,
    })
}

/// `n` distinct indices drawn uniformly from `0..len`, in increasing order.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    if n >= len {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, len, n).into_vec();
    picked.sort_unstable();
    picked
}

const META_COLUMNS: [&str; 5] = ["id", "chain", "antigen_label", "bcell_label", "vgene_label"];

/// Writes `id, chain, antigen_label, bcell_label, vgene_label, e0..` with
/// nine significant digits per value.
pub fn export_embeddings<W: Write>(m: &EmbeddingMatrix, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header: Vec<String> = META_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..m.vectors.ncols()).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    for (meta, vec) in m.rows.iter().zip(m.vectors.rows()) {
        let label = |t: Task| meta.labels.get(&t).cloned().unwrap_or_default();
        let mut record = vec![
            meta.id.clone(),
            meta.chain.as_str().to_string(),
            label(Task::Antigen),
            label(Task::BcellType),
            label(Task::GermlineV),
        ];
        record.extend(vec.iter().map(|v| format!("{v:.8e}")));
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io("<embeddings>", e))?;
    Ok(())
}

/// Reads a file produced by [`export_embeddings`].
pub fn read_embeddings<R: Read>(source: R) -> Result<(Vec<RowMeta>, Array2<f64>)> {
    let mut r = csv::Reader::from_reader(source);
    let header = r.headers()?.clone();
    if header.len() < META_COLUMNS.len() || header.iter().zip(META_COLUMNS).any(|(a, b)| a != b) {
        return Err(Error::Schema(format!(
            "expected leading columns {META_COLUMNS:?}, found {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let dim = header.len() - META_COLUMNS.len();
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row_err = |message: String| Error::Row {
            row: i + 1,
            message,
        };
        let chain = rec[1]
            .parse::<Chain>()
            .map_err(|e| row_err(e.to_string()))?;
        let mut labels = BTreeMap::new();
        for (task, col) in [
            (Task::Antigen, 2),
            (Task::BcellType, 3),
            (Task::GermlineV, 4),
        ] {
            if !rec[col].is_empty() {
                labels.insert(task, rec[col].to_string());
            }
        }
        for field in rec.iter().skip(META_COLUMNS.len()) {
            values.push(
                field
                    .parse::<f64>()
                    .map_err(|e| row_err(format!("{field:?}: {e}")))?,
            );
        }
        rows.push(RowMeta {
            id: rec[0].to_string(),
            chain,
            labels,
        });
    }
    let vectors = Array2::from_shape_vec((rows.len(), dim), values)
        .map_err(|e| Error::Dataset(e.to_string()))?;
    Ok((rows, vectors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn record(seq: &str) -> SequenceRecord {
        SequenceRecord {
            sequence: seq.into(),
            chain: Chain::Heavy,
            species: "human".into(),
            fwr1: String::new(),
            fwr4: String::new(),
            labels: BTreeMap::from([(Task::Antigen, "HIV".to_string())]),
        }
    }

    fn setup() -> (ModelConfig, ModelParams<f32>, Tokenizer) {
        let cfg = ModelConfig::toy(25);
        let params = init_model(&cfg, 5).unwrap();
        (cfg, params, Tokenizer::saa())
    }

    #[test]
    fn shapes_and_purity() {
        let (cfg, params, t) = setup();
        let recs = vec![record("QVQLVQ"), record("EVQ"), record("QVQLVQ")];
        let m = extract_embeddings(&params, &cfg, &recs, None, &t, Pooling::Mean, 2).unwrap();
        assert_eq!(m.vectors.dim(), (3, 8));
        assert_eq!(m.vectors.row(0), m.vectors.row(2));
        assert_eq!(m.rows[1].id, "1");
    }

    #[test]
    fn single_residue_mean_is_its_state() {
        let (cfg, params, t) = setup();
        let recs = vec![record("W")];
        let mean = extract_embeddings(&params, &cfg, &recs, None, &t, Pooling::Mean, 1).unwrap();
        let first =
            extract_embeddings(&params, &cfg, &recs, None, &t, Pooling::FirstToken, 1).unwrap();
        let batch = EncodedBatch::from_sequences(&[t.encode("W", 32).unwrap()], 0);
        let hidden = encode_hidden(&params, &cfg, &batch).unwrap();
        for j in 0..8 {
            assert_eq!(mean.vectors[[0, j]], f64::from(hidden[0][[1, j]]));
            assert_eq!(first.vectors[[0, j]], f64::from(hidden[0][[0, j]]));
        }
    }

    #[test]
    fn padding_does_not_change_pooled_vectors() {
        let (cfg, params, t) = setup();
        let recs = vec![record("QVQLVQSGAEV"), record("CAR")];
        let batched = extract_embeddings(&params, &cfg, &recs, None, &t, Pooling::Mean, 2).unwrap();
        let alone =
            extract_embeddings(&params, &cfg, &recs[1..], None, &t, Pooling::Mean, 1).unwrap();
        for (a, b) in batched.vectors.row(1).iter().zip(alone.vectors.row(0)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn too_long_sequence_named() {
        let (cfg, params, t) = setup();
        let recs = vec![record("A"), record(&"A".repeat(40))];
        let ids = vec!["ok".to_string(), "long-one".to_string()];
        let err =
            extract_embeddings(&params, &cfg, &recs, Some(&ids), &t, Pooling::Mean, 4).unwrap_err();
        assert!(err.to_string().contains("long-one"), "{err}");
    }

    #[test]
    fn csv_roundtrip() {
        let (cfg, params, t) = setup();
        let recs = vec![record("QVQ"), record("EVQLV")];
        let m = extract_embeddings(&params, &cfg, &recs, None, &t, Pooling::Mean, 2).unwrap();
        let mut buf = Vec::new();
        export_embeddings(&m, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("id,chain,antigen_label,bcell_label,vgene_label,e0,"));
        assert_eq!(text.lines().count(), 3);
        let (rows, vectors) = read_embeddings(buf.as_slice()).unwrap();
        assert_eq!(rows, m.rows);
        let diff = (&vectors - &m.vectors)
            .mapv(f64::abs)
            .fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-6);
    }

    #[test]
    fn empty_matrix_is_header_only() {
        let m = EmbeddingMatrix {
            vectors: Array2::zeros((0, 4)),
            rows: vec![],
            pooling: Pooling::Mean,
        };
        let mut buf = Vec::new();
        export_embeddings(&m, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1);
    }

    #[test]
    fn sampling_is_seeded_and_sorted() {
        let a = sample_indices(100, 10, 7);
        assert_eq!(a, sample_indices(100, 10, 7));
        assert_ne!(a, sample_indices(100, 10, 8));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_indices(5, 10, 0), vec![0, 1, 2, 3, 4]);
    }
}
