//! OAS-style sequence ingestion, filtering and dataset construction.
//!
//! Input files are comma-delimited with a header row. The default column
//! names follow the OAS unpaired export:
//!
//! ```text
//! sequence_aa,chain,species,fwr1_aa,fwr4_aa,antigen_label,bcell_label,vgene_label
//! ```
//!
//! Region lengths are measured directly on the `fwr1_aa` / `fwr4_aa` columns;
//! no numbering-scheme alignment is performed.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The 20 canonical amino acids in alphabetical order.
pub const CANONICAL_RESIDUES: [char; 20] = [
    'A', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'K', 'L', 'M', 'N', 'P', 'Q', 'R', 'S', 'T', 'V', 'W',
    'Y',
];

/// Minimum framework-1 length; shorter regions are dropped.
pub const MIN_FR1_LEN: usize = 20;
/// Minimum framework-4 length; shorter regions are dropped.
pub const MIN_FR4_LEN: usize = 10;

pub fn is_canonical(c: char) -> bool {
    CANONICAL_RESIDUES.binary_search(&c).is_ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Chain {
    Heavy,
    Light,
}

impl Chain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Chain::Heavy => "heavy",
            Chain::Light => "light",
        }
    }
}

impl fmt::Display for Chain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Chain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "heavy" | "h" | "vh" => Ok(Chain::Heavy),
            "light" | "l" | "vl" | "kappa" | "lambda" => Ok(Chain::Light),
            other => Err(Error::Argument(format!("unknown chain {other:?}"))),
        }
    }
}

/// Classification tasks carried as optional label columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Antigen,
    BcellType,
    GermlineV,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Antigen, Task::BcellType, Task::GermlineV];

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Antigen => "antigen",
            Task::BcellType => "bcell_type",
            Task::GermlineV => "germline_v",
        }
    }

    /// Number of classes the task defines for a chain.
    pub fn class_count(&self, chain: Chain) -> usize {
        match (self, chain) {
            (Task::Antigen, _) => 5,
            (Task::BcellType, Chain::Heavy) => 4,
            (Task::BcellType, Chain::Light) => 3,
            (Task::GermlineV, Chain::Heavy) => 7,
            (Task::GermlineV, Chain::Light) => 16,
        }
    }

    /// Reference class list, usable as a fixed class order.
    pub fn canonical_classes(&self, chain: Chain) -> Vec<String> {
        let names: Vec<String> = match (self, chain) {
            (Task::Antigen, _) => ["HIV", "SARS-CoV-2", "MuSK", "AChR", "CMV"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            (Task::BcellType, Chain::Heavy) => {
                ["naive", "memory", "plasmablast", "germinal_center"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect()
            }
            (Task::BcellType, Chain::Light) => ["naive", "memory", "plasmablast"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            (Task::GermlineV, Chain::Heavy) => (1..=7).map(|i| format!("VH{i}")).collect(),
            (Task::GermlineV, Chain::Light) => (1..=6)
                .map(|i| format!("VK{i}"))
                .chain((1..=10).map(|i| format!("VL{i}")))
                .collect(),
        };
        debug_assert_eq!(names.len(), self.class_count(chain));
        names
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "antigen" => Ok(Task::Antigen),
            "bcell" | "bcell_type" | "b_cell" => Ok(Task::BcellType),
            "germline" | "germline_v" | "vgene" => Ok(Task::GermlineV),
            other => Err(Error::Argument(format!("unknown task {other:?}"))),
        }
    }
}

/// One antibody variable-region sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub sequence: String,
    pub chain: Chain,
    pub species: String,
    pub fwr1: String,
    pub fwr4: String,
    #[serde(default)]
    pub labels: BTreeMap<Task, String>,
}

impl SequenceRecord {
    pub fn label(&self, task: Task) -> Option<&str> {
        self.labels.get(&task).map(String::as_str)
    }

    /// Positions holding one of B, J, O, U, X, Z (or any other non-canonical letter).
    pub fn non_canonical_positions(&self) -> Vec<usize> {
        self.sequence
            .chars()
            .enumerate()
            .filter(|(_, c)| !is_canonical(*c))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn has_non_canonical(&self) -> bool {
        self.sequence.chars().any(|c| !is_canonical(c))
    }
}

/// Column names of the record file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordSchema {
    pub sequence: String,
    pub chain: String,
    pub species: String,
    pub fwr1: String,
    pub fwr4: String,
    pub antigen_label: String,
    pub bcell_label: String,
    pub vgene_label: String,
}

impl Default for RecordSchema {
    fn default() -> Self {
        Self {
            sequence: "sequence_aa".into(),
            chain: "chain".into(),
            species: "species".into(),
            fwr1: "fwr1_aa".into(),
            fwr4: "fwr4_aa".into(),
            antigen_label: "antigen_label".into(),
            bcell_label: "bcell_label".into(),
            vgene_label: "vgene_label".into(),
        }
    }
}

impl RecordSchema {
    pub fn label_column(&self, task: Task) -> &str {
        match task {
            Task::Antigen => &self.antigen_label,
            Task::BcellType => &self.bcell_label,
            Task::GermlineV => &self.vgene_label,
        }
    }

    fn header(&self) -> [&str; 8] {
        [
            &self.sequence,
            &self.chain,
            &self.species,
            &self.fwr1,
            &self.fwr4,
            &self.antigen_label,
            &self.bcell_label,
            &self.vgene_label,
        ]
    }
}

#[derive(Debug, Clone, Copy)]
struct ColumnIndex {
    sequence: usize,
    chain: usize,
    species: usize,
    fwr1: usize,
    fwr4: usize,
    labels: [usize; 3],
}

/// Streaming reader yielding one item per data row, in file order.
///
/// Malformed rows surface as [`Error::Row`] carrying the 1-based data-row
/// index; the caller decides whether to skip or abort.
pub struct RecordReader<R> {
    rows: csv::StringRecordsIntoIter<R>,
    columns: ColumnIndex,
    row: usize,
}

/// Opens a record stream, validating the header against `schema`.
pub fn parse_records<R: Read>(source: R, schema: &RecordSchema) -> Result<RecordReader<R>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let position: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let missing: Vec<&str> = schema
        .header()
        .into_iter()
        .filter(|c| !position.contains_key(c))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Schema(format!(
            "missing required column(s): {}",
            missing.join(", ")
        )));
    }
    let col = |name: &str| position[name];
    let columns = ColumnIndex {
        sequence: col(&schema.sequence),
        chain: col(&schema.chain),
        species: col(&schema.species),
        fwr1: col(&schema.fwr1),
        fwr4: col(&schema.fwr4),
        labels: [
            col(&schema.antigen_label),
            col(&schema.bcell_label),
            col(&schema.vgene_label),
        ],
    };
    Ok(RecordReader {
        rows: reader.into_records(),
        columns,
        row: 0,
    })
}

impl<R: Read> RecordReader<R> {
    fn convert(&self, raw: &csv::StringRecord) -> std::result::Result<SequenceRecord, String> {
        let c = &self.columns;
        let field = |i: usize| raw.get(i).unwrap_or("");
        let sequence = normalize_residues(field(c.sequence), "sequence")?;
        if sequence.is_empty() {
            return Err("empty sequence".into());
        }
        let chain: Chain = field(c.chain).parse().map_err(|e: Error| e.to_string())?;
        let fwr1 = normalize_residues(field(c.fwr1), "fwr1")?;
        let fwr4 = normalize_residues(field(c.fwr4), "fwr4")?;
        if !sequence.contains(&fwr1) {
            return Err("fwr1 region is not a substring of the sequence".into());
        }
        if !sequence.contains(&fwr4) {
            return Err("fwr4 region is not a substring of the sequence".into());
        }
        let mut labels = BTreeMap::new();
        for (task, idx) in Task::ALL.iter().zip(c.labels) {
            let value = field(idx);
            if !value.is_empty() {
                labels.insert(*task, value.to_string());
            }
        }
        Ok(SequenceRecord {
            sequence,
            chain,
            species: field(c.species).to_string(),
            fwr1,
            fwr4,
            labels,
        })
    }
}

impl<R: Read> Iterator for RecordReader<R> {
    type Item = Result<SequenceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let raw = self.rows.next()?;
        self.row += 1;
        let row = self.row;
        Some(match raw {
            Ok(raw) => self
                .convert(&raw)
                .map_err(|message| Error::Row { row, message }),
            Err(e) => Err(Error::Row {
                row,
                message: e.to_string(),
            }),
        })
    }
}

fn normalize_residues(raw: &str, what: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(raw.len());
    for (i, c) in raw.chars().enumerate() {
        if !c.is_ascii_alphabetic() {
            return Err(format!(
                "non-alphabetic character {c:?} in {what} at position {i}"
            ));
        }
        out.push(c.to_ascii_uppercase());
    }
    Ok(out)
}

/// Collects a stream, splitting it into parsed records and row errors.
pub fn read_all<R: Read>(
    source: R,
    schema: &RecordSchema,
) -> Result<(Vec<SequenceRecord>, Vec<Error>)> {
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for item in parse_records(source, schema)? {
        match item {
            Ok(r) => records.push(r),
            Err(e @ Error::Row { .. }) => errors.push(e),
            Err(e) => return Err(e),
        }
    }
    Ok((records, errors))
}

/// Writes records in the same column layout they were read with.
pub fn write_records<'a, W: Write>(
    sink: W,
    schema: &RecordSchema,
    records: impl IntoIterator<Item = &'a SequenceRecord>,
) -> Result<()> {
    let mut writer = csv::Writer::from_writer(sink);
    writer.write_record(schema.header())?;
    for r in records {
        writer.write_record([
            r.sequence.as_str(),
            r.chain.as_str(),
            r.species.as_str(),
            r.fwr1.as_str(),
            r.fwr4.as_str(),
            r.label(Task::Antigen).unwrap_or(""),
            r.label(Task::BcellType).unwrap_or(""),
            r.label(Task::GermlineV).unwrap_or(""),
        ])?;
    }
    writer.flush().map_err(|e| Error::io("<record sink>", e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    NonHuman,
    Fr1Short,
    Fr4Short,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterDecision {
    Keep,
    Drop(DropReason),
}

impl FilterDecision {
    pub fn is_keep(&self) -> bool {
        matches!(self, FilterDecision::Keep)
    }
}

/// Applies the human-only and framework-length rules; the first failing rule
/// is reported.
pub fn filter_record(r: &SequenceRecord) -> FilterDecision {
    if !r.species.trim().eq_ignore_ascii_case("human") {
        FilterDecision::Drop(DropReason::NonHuman)
    } else if r.fwr1.chars().count() < MIN_FR1_LEN {
        FilterDecision::Drop(DropReason::Fr1Short)
    } else if r.fwr4.chars().count() < MIN_FR4_LEN {
        FilterDecision::Drop(DropReason::Fr4Short)
    } else {
        FilterDecision::Keep
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    pub non_human: usize,
    pub fr1_short: usize,
    pub fr4_short: usize,
    pub parse_error: usize,
}

impl DropCounts {
    pub fn total(&self) -> usize {
        self.non_human + self.fr1_short + self.fr4_short + self.parse_error
    }
}

/// Sidecar report written by the filter command.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: usize,
    pub dropped: DropCounts,
}

impl FilterReport {
    pub fn record(&mut self, decision: FilterDecision) {
        match decision {
            FilterDecision::Keep => self.kept += 1,
            FilterDecision::Drop(DropReason::NonHuman) => self.dropped.non_human += 1,
            FilterDecision::Drop(DropReason::Fr1Short) => self.dropped.fr1_short += 1,
            FilterDecision::Drop(DropReason::Fr4Short) => self.dropped.fr4_short += 1,
        }
    }

    pub fn record_parse_error(&mut self) {
        self.dropped.parse_error += 1;
    }
}

/// Streams `source`, keeping records that pass [`filter_record`].
///
/// Row-level parse errors are counted and skipped; schema errors abort.
pub fn filter_stream<R: Read>(
    source: R,
    schema: &RecordSchema,
) -> Result<(Vec<SequenceRecord>, FilterReport, Vec<Error>)> {
    let mut kept = Vec::new();
    let mut report = FilterReport::default();
    let mut errors = Vec::new();
    for item in parse_records(source, schema)? {
        match item {
            Ok(r) => {
                let decision = filter_record(&r);
                report.record(decision);
                if decision.is_keep() {
                    kept.push(r);
                }
            }
            Err(e @ Error::Row { .. }) => {
                report.record_parse_error();
                errors.push(e);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((kept, report, errors))
}

/// Train / test / valid fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub test: f64,
    pub valid: f64,
}

impl Default for SplitRatios {
    /// 402M / 86M / 86M of 574M sequences.
    fn default() -> Self {
        Self {
            train: 0.70,
            test: 0.15,
            valid: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, test: f64, valid: f64) -> Result<Self> {
        let r = Self { train, test, valid };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.test, self.valid];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Argument(format!(
                "split ratios must be non-negative, got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!(
                "split ratios must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    /// Partition sizes: floor(n * r) for test and valid, remainder to train.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let test = (n as f64 * self.test).floor() as usize;
        let valid = (n as f64 * self.valid).floor() as usize;
        let test = test.min(n);
        let valid = valid.min(n - test);
        (n - test - valid, test, valid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit<T = SequenceRecord> {
    pub train: Vec<T>,
    pub test: Vec<T>,
    pub valid: Vec<T>,
    pub seed: u64,
    pub ratios: SplitRatios,
}

/// Seeded random partition of `items`.
pub fn split_dataset<T>(items: Vec<T>, ratios: SplitRatios, seed: u64) -> Result<DatasetSplit<T>> {
    ratios.validate()?;
    let n = items.len();
    let (n_train, n_test, _) = ratios.sizes(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |range: std::ops::Range<usize>| -> Vec<T> {
        order[range]
            .iter()
            .map(|&i| slots[i].take().expect("permutation visits each index once"))
            .collect()
    };
    let train = take(0..n_train);
    let test = take(n_train..n_train + n_test);
    let valid = take(n_train + n_test..n);
    Ok(DatasetSplit {
        train,
        test,
        valid,
        seed,
        ratios,
    })
}

/// How class names of a labeled dataset are ordered.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum ClassOrder {
    /// Order of first appearance; the class count must match the task.
    #[default]
    FirstAppearance,
    /// The task's reference class list.
    Canonical,
    /// Caller-supplied list; every label must appear in it.
    Fixed(Vec<String>),
}

/// Records carrying a label for one classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub records: Vec<SequenceRecord>,
    pub task: Task,
    pub class_names: Vec<String>,
    pub chain: Chain,
}

impl LabeledDataset {
    /// Checks that every record carries a `task` label drawn from `class_names`.
    pub fn new(
        records: Vec<SequenceRecord>,
        task: Task,
        class_names: Vec<String>,
        chain: Chain,
    ) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(Error::Dataset(format!(
                "{task} needs at least two classes, got {}",
                class_names.len()
            )));
        }
        let ds = Self {
            records,
            task,
            class_names,
            chain,
        };
        ds.label_indices()?;
        Ok(ds)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    /// Label of every record as an index into `class_names`.
    pub fn label_indices(&self) -> Result<Vec<usize>> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let label = r.label(self.task).ok_or_else(|| {
                    Error::Dataset(format!("record {i} has no {} label", self.task))
                })?;
                self.class_index(label).ok_or_else(|| {
                    Error::Dataset(format!(
                        "unknown {} class {label:?} (record {i}); expected one of {:?}",
                        self.task, self.class_names
                    ))
                })
            })
            .collect()
    }

    /// Shuffles the records into train, test and validation parts.
    pub fn split(self, ratios: SplitRatios, seed: u64) -> Result<DatasetSplit<SequenceRecord>> {
        split_dataset(self.records, ratios, seed)
    }

    pub fn with_records(&self, records: Vec<SequenceRecord>) -> Result<Self> {
        Self::new(records, self.task, self.class_names.clone(), self.chain)
    }
}

/// Reads a labeled file, keeping rows of `chain`.
pub fn load_labeled_dataset<R: Read>(
    source: R,
    schema: &RecordSchema,
    task: Task,
    chain: Chain,
    order: ClassOrder,
) -> Result<LabeledDataset> {
    let mut records = Vec::new();
    for item in parse_records(source, schema)? {
        let r = item?;
        if r.chain != chain {
            continue;
        }
        if r.label(task).is_none() {
            return Err(Error::Dataset(format!(
                "record {} carries no {} label",
                records.len(),
                task
            )));
        }
        records.push(r);
    }
    let class_names = match order {
        ClassOrder::Fixed(names) => names,
        ClassOrder::Canonical => task.canonical_classes(chain),
        ClassOrder::FirstAppearance => {
            let mut names: Vec<String> = Vec::new();
            for r in &records {
                let label = r.label(task).expect("checked above");
                if !names.iter().any(|n| n == label) {
                    names.push(label.to_string());
                }
            }
            let expected = task.class_count(chain);
            if names.len() != expected {
                return Err(Error::Dataset(format!(
                    "{task} ({chain}) defines {expected} classes, file contains {}: {names:?}",
                    names.len()
                )));
            }
            names
        }
    };
    LabeledDataset::new(records, task, class_names, chain)
}
