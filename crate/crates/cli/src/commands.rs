use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use anyhow::{anyhow, bail, ensure, Context, Result};
use ndarray::Array2;
use serde::Serialize;
use serde_json::json;

use abtok::bench::bench_tokenizers;
use abtok::data::{
    filter_stream, load_labeled_dataset, parse_records, split_dataset, write_records, Chain,
    ClassOrder, LabeledDataset, RecordSchema, SequenceRecord, SplitRatios,
};
use abtok::embed::{export_embeddings, extract_embeddings, sample_indices};
use abtok::masking::MaskingConfig;
use abtok::metrics::{evaluate as eval_report, EvalReport, SeedSummary};
use abtok::model::{
    finetune as run_finetune, load_checkpoint, predict_logits, predict_scores, save_checkpoint,
    train_mlm, Checkpoint, FinetuneConfig, MlmTrainConfig, ModelConfig, OptimizerConfig,
};
use abtok::tokenizers::{bpe_train, load_tokenizer, save_tokenizer, Tokenizer, VocabKind};

use crate::manifest::{sibling, write_json, RunManifest};
use crate::{
    BenchArgs, BuildVocabArgs, EmbedArgs, EvaluateArgs, FilterArgs, FinetuneArgs, ModelArgs,
    OptimArgs, Preset, PretrainArgs, ScoreKind, SplitArgs,
};

const MANIFEST: &str = ".manifest.json";

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn guard_inputs(inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
    for i in inputs {
        for o in outputs {
            ensure!(
                !same_file(i, o),
                "output {} would overwrite an input",
                o.display()
            );
        }
    }
    Ok(())
}

/// Parsed records with their 0-based data-row index; malformed rows are
/// logged and skipped.
fn read_records(path: &Path, chain: Option<Chain>) -> Result<Vec<(usize, SequenceRecord)>> {
    let mut out = Vec::new();
    let mut skipped = 0;
    let reader = parse_records(open(path)?, &RecordSchema::default())
        .with_context(|| format!("reading {}", path.display()))?;
    for (i, item) in reader.enumerate() {
        match item {
            Ok(r) if chain.is_none_or(|c| c == r.chain) => out.push((i, r)),
            Ok(_) => {}
            Err(e @ abtok::Error::Row { .. }) => {
                log::debug!("{}: {e}", path.display());
                skipped += 1;
            }
            Err(e) => return Err(anyhow!(e).context(format!("reading {}", path.display()))),
        }
    }
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} malformed rows", path.display());
    }
    Ok(out)
}

pub fn filter(a: &FilterArgs) -> Result<()> {
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| sibling(&a.output, ".report.json"));
    guard_inputs(&[&a.input], &[&a.output, &report_path])?;
    let schema = RecordSchema::default();
    let (kept, report, errors) = filter_stream(open(&a.input)?, &schema)
        .with_context(|| format!("reading {}", a.input.display()))?;
    for e in &errors {
        log::warn!("{}: {e}", a.input.display());
    }
    write_records(create(&a.output)?, &schema, &kept)?;
    write_json(&report_path, &report)?;
    log::info!("kept {}, dropped {}", report.kept, report.dropped.total());
    RunManifest::new("filter", a)?
        .input("records", &a.input)
        .output("records", &a.output)
        .output("report", &report_path)
        .write(&sibling(&a.output, MANIFEST))
}

pub fn split(a: &SplitArgs) -> Result<()> {
    let ratios = SplitRatios::new(a.train, a.test, a.valid)?;
    let records: Vec<SequenceRecord> = read_records(&a.input, None)?
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    let parts = split_dataset(records, ratios, a.seed)?;
    let schema = RecordSchema::default();
    let mut manifest = RunManifest::new("split", a)?
        .seeds([a.seed])
        .input("records", &a.input);
    for (name, part) in [
        ("train", &parts.train),
        ("test", &parts.test),
        ("valid", &parts.valid),
    ] {
        let path = a.out_dir.join(format!("{name}.csv"));
        guard_inputs(&[&a.input], &[&path])?;
        write_records(create(&path)?, &schema, part)?;
        log::info!("{name}: {} records", part.len());
        manifest = manifest.output(name, &path);
    }
    manifest.write(&a.out_dir.join("manifest.json"))
}

pub fn build_vocab(a: &BuildVocabArgs) -> Result<()> {
    let tokenizer = match a.kind {
        VocabKind::Saa => Tokenizer::saa(),
        VocabKind::Daa => Tokenizer::daa(),
        VocabKind::Bpe => {
            let corpus = a
                .corpus
                .as_ref()
                .ok_or_else(|| anyhow!("--kind bpe needs --corpus"))?;
            let seqs: Vec<String> = read_records(corpus, a.chain)?
                .into_iter()
                .map(|(_, r)| r.sequence)
                .collect();
            ensure!(
                !seqs.is_empty(),
                "{} holds no usable sequences",
                corpus.display()
            );
            Tokenizer::Bpe(bpe_train(&seqs, a.target)?)
        }
    };
    if let Some(corpus) = &a.corpus {
        guard_inputs(&[corpus], &[&a.output])?;
    }
    if let Some(dir) = a.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_tokenizer(&tokenizer, &a.output)?;
    log::info!(
        "{} vocabulary with {} tokens",
        a.kind,
        tokenizer.vocab().len()
    );
    let mut manifest = RunManifest::new("build-vocab", a)?.output("vocab", &a.output);
    if let Some(corpus) = &a.corpus {
        manifest = manifest.input("corpus", corpus);
    }
    manifest.write(&sibling(&a.output, MANIFEST))
}

fn model_config(m: &ModelArgs, vocab_size: usize) -> Result<ModelConfig> {
    let mut cfg = match m.preset {
        Preset::Roberta => ModelConfig::roberta(vocab_size),
        Preset::Toy => ModelConfig::toy(vocab_size),
    };
    if let Some(v) = m.hidden_size {
        cfg.hidden_size = v;
    }
    if let Some(v) = m.layers {
        cfg.num_layers = v;
    }
    if let Some(v) = m.heads {
        cfg.num_heads = v;
    }
    if let Some(v) = m.intermediate_size {
        cfg.intermediate_size = v;
    }
    if let Some(v) = m.max_positions {
        cfg.max_positions = v;
    }
    if let Some(p) = m.dropout {
        cfg.hidden_dropout = p;
        cfg.attention_dropout = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn optimizer(o: &OptimArgs, base: OptimizerConfig) -> Result<OptimizerConfig> {
    let cfg = OptimizerConfig {
        learning_rate: o.lr.unwrap_or(base.learning_rate),
        beta1: o.beta1.unwrap_or(base.beta1),
        beta2: o.beta2.unwrap_or(base.beta2),
        epsilon: o.epsilon.unwrap_or(base.epsilon),
        weight_decay: o.weight_decay.unwrap_or(base.weight_decay),
        warmup_steps: o.warmup_steps.unwrap_or(base.warmup_steps),
        total_steps: base.total_steps,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn pretrain(a: &PretrainArgs) -> Result<()> {
    let log_path = sibling(&a.output, ".log.jsonl");
    guard_inputs(&[&a.input, &a.vocab], &[&a.output, &log_path])?;
    let tokenizer = load_tokenizer(&a.vocab)?;
    let cfg = model_config(&a.model, tokenizer.vocab().len())?;
    let tcfg = MlmTrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        masking: MaskingConfig {
            p_select: a.p_select,
            p_mask: a.p_mask,
            p_random: a.p_random,
            p_keep: a.p_keep,
            exclude_original: a.exclude_original,
        },
        optimizer: optimizer(&a.optim, OptimizerConfig::pretrain_default())?,
    };
    let seqs: Vec<String> = read_records(&a.input, a.chain)?
        .into_iter()
        .map(|(_, r)| r.sequence)
        .collect();
    log::info!("pretraining on {} sequences", seqs.len());
    let (params, history) = train_mlm(&seqs, &tokenizer, &cfg, &tcfg)?;
    let ckpt = Checkpoint {
        config: cfg.clone(),
        class_names: Vec::new(),
        params,
    };
    log::info!("{} parameters", ckpt.params.num_parameters());
    if let Some(dir) = a.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(&ckpt, &a.output)?;
    fs::write(&log_path, history.to_jsonl())?;
    RunManifest::new(
        "pretrain",
        json!({"args": a, "model": cfg, "training": tcfg}),
    )?
    .seeds([a.seed])
    .input("records", &a.input)
    .input("vocab", &a.vocab)
    .output("checkpoint", &a.output)
    .output("log", &log_path)
    .write(&sibling(&a.output, MANIFEST))
}

#[derive(Serialize)]
struct SeedRun {
    seed: u64,
    report: EvalReport,
}

#[derive(Serialize)]
struct FinetuneSummary {
    task: String,
    chain: String,
    class_names: Vec<String>,
    seeds: Vec<u64>,
    #[serde(flatten)]
    summary: SeedSummary,
    runs: Vec<SeedRun>,
}

fn summary_table(s: &SeedSummary) -> String {
    let cell = |m: &abtok::metrics::MeanSd| format!("{:.3} ± {:.3}", m.mean, m.sd);
    format!(
        "{:<15} {:<15} {:<15} {:<15} {:<15}\n{:<15} {:<15} {:<15} {:<15} {:<15}\n",
        "AUROC",
        "ACC",
        "F1",
        "Precision",
        "Recall",
        cell(&s.auroc),
        cell(&s.acc),
        cell(&s.f1),
        cell(&s.precision),
        cell(&s.recall)
    )
}

pub fn finetune(a: &FinetuneArgs) -> Result<()> {
    let tokenizer = load_tokenizer(&a.vocab)?;
    let pretrained = load_checkpoint(&a.checkpoint)?;
    let schema = RecordSchema::default();
    let order = match (&a.classes, a.canonical_classes) {
        (Some(names), _) => ClassOrder::Fixed(names.clone()),
        (None, true) => ClassOrder::Canonical,
        (None, false) => ClassOrder::FirstAppearance,
    };
    let train = load_labeled_dataset(open(&a.train)?, &schema, a.task, a.chain, order)
        .with_context(|| format!("reading {}", a.train.display()))?;
    let eval = load_labeled_dataset(
        open(&a.eval)?,
        &schema,
        a.task,
        a.chain,
        ClassOrder::Fixed(train.class_names.clone()),
    )
    .with_context(|| format!("reading {}", a.eval.display()))?;
    let optim = optimizer(&a.optim, OptimizerConfig::finetune_default())?;
    let cfg = pretrained.config.clone();
    let mut encoder = pretrained.params;
    encoder.classifier = None;

    let summary_path = a.out_dir.join("summary.json");
    guard_inputs(
        &[&a.train, &a.eval, &a.checkpoint, &a.vocab],
        &[&summary_path],
    )?;
    fs::create_dir_all(&a.out_dir)?;
    let mut manifest = RunManifest::new(
        "finetune",
        json!({"args": a, "model": cfg, "optimizer": optim}),
    )?
    .seeds(a.seeds.0.iter().copied())
    .input("train", &a.train)
    .input("eval", &a.eval)
    .input("checkpoint", &a.checkpoint)
    .input("vocab", &a.vocab);

    let mut runs = Vec::new();
    for &seed in &a.seeds.0 {
        let fcfg = FinetuneConfig {
            epochs: a.epochs,
            batch_size: a.batch_size,
            eval_batch_size: a.eval_batch_size,
            seed,
            optimizer: optim,
        };
        log::info!("seed {seed}");
        let (params, history) =
            run_finetune(&train, Some(&eval), &tokenizer, &encoder, &cfg, &fcfg)?;
        let report = history
            .last_eval()
            .cloned()
            .ok_or_else(|| anyhow!("seed {seed}: the final evaluation could not be computed"))?;
        let dir = a.out_dir.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir)?;
        let ckpt_path = dir.join("model.ckpt");
        save_checkpoint(
            &Checkpoint {
                config: cfg.clone(),
                class_names: train.class_names.clone(),
                params,
            },
            &ckpt_path,
        )?;
        fs::write(dir.join("train_log.jsonl"), history.to_jsonl())?;
        write_json(&dir.join("eval.json"), &report)?;
        manifest = manifest.output(&format!("seed-{seed}"), &dir);
        runs.push(SeedRun { seed, report });
    }
    let reports: Vec<EvalReport> = runs.iter().map(|r| r.report.clone()).collect();
    let summary = FinetuneSummary {
        task: a.task.to_string(),
        chain: a.chain.to_string(),
        class_names: train.class_names.clone(),
        seeds: a.seeds.0.clone(),
        summary: SeedSummary::from_reports(&reports),
        runs,
    };
    print!("{}", summary_table(&summary.summary));
    write_json(&summary_path, &summary)?;
    manifest
        .output("summary", &summary_path)
        .write(&a.out_dir.join("manifest.json"))
}

/// Labels and an `N × K` score matrix from a predictions file.
fn read_predictions(path: &Path) -> Result<(Vec<String>, Vec<usize>, Array2<f64>)> {
    let mut r = csv::Reader::from_reader(open(path)?);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let label_col = header.iter().position(|h| h == "label").ok_or_else(|| {
        abtok::Error::Schema(format!(
            "{}: no `label` column in {header:?}",
            path.display()
        ))
    })?;
    let rows: Vec<csv::StringRecord> = r.records().collect::<Result<_, _>>()?;
    let labels_raw: Vec<&str> = rows.iter().map(|row| &row[label_col]).collect();

    if let Some(pred_col) = header.iter().position(|h| h == "prediction") {
        let mut classes: Vec<String> = Vec::new();
        for name in labels_raw
            .iter()
            .copied()
            .chain(rows.iter().map(|row| &row[pred_col]))
        {
            if !classes.iter().any(|c| c == name) {
                classes.push(name.to_string());
            }
        }
        let index = |name: &str| {
            classes
                .iter()
                .position(|c| c == name)
                .expect("collected above")
        };
        let labels = labels_raw.iter().map(|l| index(l)).collect();
        let mut scores = Array2::zeros((rows.len(), classes.len()));
        for (i, row) in rows.iter().enumerate() {
            scores[[i, index(&row[pred_col])]] = 1.0;
        }
        return Ok((classes, labels, scores));
    }

    let score_cols: Vec<usize> = (0..header.len()).filter(|&c| c != label_col).collect();
    let classes: Vec<String> = score_cols.iter().map(|&c| header[c].clone()).collect();
    let labels = labels_raw
        .iter()
        .enumerate()
        .map(|(i, l)| {
            classes
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| anyhow!("row {}: label {l:?} has no score column", i + 1))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut scores = Array2::zeros((rows.len(), classes.len()));
    for (i, row) in rows.iter().enumerate() {
        for (k, &c) in score_cols.iter().enumerate() {
            scores[[i, k]] = row[c]
                .trim()
                .parse()
                .map_err(|e| anyhow!("row {}, column {}: {e}", i + 1, header[c]))?;
        }
    }
    Ok((classes, labels, scores))
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let mut manifest = RunManifest::new("evaluate", a)?;
    let report = if let Some(pred) = &a.predictions {
        guard_inputs(&[pred], &[&a.output])?;
        manifest = manifest.input("predictions", pred);
        let (classes, labels, scores) = read_predictions(pred)?;
        ensure!(
            classes.len() >= 2,
            "need at least two classes, found {classes:?}"
        );
        eval_report(scores.view(), &labels, &classes)?
    } else {
        let (Some(ckpt_path), Some(input), Some(vocab), Some(task)) =
            (&a.checkpoint, &a.input, &a.vocab, a.task)
        else {
            bail!("pass --predictions, or --checkpoint with --input, --vocab and --task");
        };
        guard_inputs(&[ckpt_path, input, vocab], &[&a.output])?;
        manifest = manifest
            .input("checkpoint", ckpt_path)
            .input("records", input)
            .input("vocab", vocab);
        let ckpt = load_checkpoint(ckpt_path)?;
        ensure!(
            !ckpt.class_names.is_empty(),
            "{} has no classifier; evaluate a fine-tuned checkpoint",
            ckpt_path.display()
        );
        let tokenizer = load_tokenizer(vocab)?;
        let ds: LabeledDataset = load_labeled_dataset(
            open(input)?,
            &RecordSchema::default(),
            task,
            a.chain,
            ClassOrder::Fixed(ckpt.class_names.clone()),
        )
        .with_context(|| format!("reading {}", input.display()))?;
        let seqs: Vec<&str> = ds.records.iter().map(|r| r.sequence.as_str()).collect();
        let scores = match a.scores {
            ScoreKind::Softmax => {
                predict_scores(&ckpt.params, &ckpt.config, &tokenizer, &seqs, a.batch_size)?
            }
            ScoreKind::Logits => {
                predict_logits(&ckpt.params, &ckpt.config, &tokenizer, &seqs, a.batch_size)?
            }
        };
        eval_report(scores.view(), &ds.label_indices()?, &ds.class_names)?
    };
    println!(
        "AUROC {:.4}  ACC {:.4}  F1 {:.4}  Precision {:.4}  Recall {:.4}",
        report.auroc, report.accuracy, report.f1_macro, report.precision_macro, report.recall_macro
    );
    if let Some(dir) = a.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_json(&a.output, &report)?;
    manifest
        .output("report", &a.output)
        .write(&sibling(&a.output, MANIFEST))
}

pub fn embed(a: &EmbedArgs) -> Result<()> {
    guard_inputs(&[&a.checkpoint, &a.vocab, &a.input], &[&a.output])?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let tokenizer = load_tokenizer(&a.vocab)?;
    let mut rows = read_records(&a.input, a.chain)?;
    if let Some(n) = a.sample {
        let keep = sample_indices(rows.len(), n, a.seed);
        let mut all: Vec<Option<(usize, SequenceRecord)>> = rows.into_iter().map(Some).collect();
        rows = keep
            .into_iter()
            .map(|i| all[i].take().expect("indices are distinct"))
            .collect();
    }
    let ids: Vec<String> = rows.iter().map(|(i, _)| i.to_string()).collect();
    let records: Vec<SequenceRecord> = rows.into_iter().map(|(_, r)| r).collect();
    let m = extract_embeddings(
        &ckpt.params,
        &ckpt.config,
        &records,
        Some(&ids),
        &tokenizer,
        a.pooling,
        a.batch_size,
    )?;
    export_embeddings(&m, create(&a.output)?)?;
    log::info!(
        "{} embeddings of dimension {}",
        m.vectors.nrows(),
        m.vectors.ncols()
    );
    let mut manifest = RunManifest::new("embed", a)?
        .input("checkpoint", &a.checkpoint)
        .input("vocab", &a.vocab)
        .input("records", &a.input)
        .output("embeddings", &a.output);
    if a.sample.is_some() {
        manifest = manifest.seeds([a.seed]);
    }
    manifest.write(&sibling(&a.output, MANIFEST))
}

fn bench_tokenizer(arg: &str) -> Result<(String, Tokenizer)> {
    match arg.split_once('=') {
        Some((name, path)) => Ok((name.to_string(), load_tokenizer(Path::new(path))?)),
        None => match arg.parse::<VocabKind>()? {
            VocabKind::Saa => Ok(("saa".into(), Tokenizer::saa())),
            VocabKind::Daa => Ok(("daa".into(), Tokenizer::daa())),
            VocabKind::Bpe => bail!("give a BPE tokenizer as name=path/to/vocab.json"),
        },
    }
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    guard_inputs(&[&a.input], &[&a.output])?;
    let tokenizers = a
        .tokenizers
        .iter()
        .map(|s| bench_tokenizer(s))
        .collect::<Result<Vec<_>>>()?;
    let seqs: Vec<String> = read_records(&a.input, None)?
        .into_iter()
        .map(|(_, r)| r.sequence)
        .collect();
    let named: Vec<(String, &Tokenizer)> = tokenizers.iter().map(|(n, t)| (n.clone(), t)).collect();
    let report = bench_tokenizers(&seqs, &named, a.rounds)?;
    print!("{}", report.to_table());
    if let Some(dir) = a.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_json(&a.output, &report)?;
    RunManifest::new("bench", a)?
        .input("records", &a.input)
        .output("report", &a.output)
        .write(&sibling(&a.output, MANIFEST))
}
