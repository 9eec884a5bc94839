use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const HEADER: &str =
    "sequence_aa,chain,species,fwr1_aa,fwr4_aa,antigen_label,bcell_label,vgene_label\n";
const FR1: &str = "QVQLVQSGAEVKKPGASVKVSCKAS";
const FR4: &str = "WGQGTLVTVSS";

fn abtok(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abtok"))
        .args(args)
        .env("ABTOK_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = abtok(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn row(seq: &str, species: &str, fr1: &str, fr4: &str, antigen: &str) -> String {
    format!("{seq},heavy,{species},{fr1},{fr4},{antigen},,\n")
}

/// 10 rows: 2 mouse, 1 with a 19-residue FR1.
fn filter_fixture(dir: &Path) -> PathBuf {
    let mut text = HEADER.to_string();
    for i in 0..10 {
        let species = if i < 2 { "mouse" } else { "human" };
        let fr1 = if i == 2 { &FR1[..19] } else { FR1 };
        let seq = format!("{FR1}{}{FR4}", "A".repeat(i + 1));
        text += &row(&seq, species, fr1, FR4, "");
    }
    let path = dir.join("raw.csv");
    fs::write(&path, text).unwrap();
    path
}

/// Two motif classes at a fixed offset, `n` rows; region columns are left
/// empty to keep the sequences short.
fn motif_fixture(path: &Path, n: usize, salt: usize) {
    let fillers = ["ACDEFGHIKL", "MNPQRSTVYA", "LKIHGFEDCA", "YVTSRQPNMA"];
    let mut text = HEADER.to_string();
    for i in 0..n {
        let (motif, label) = if i % 2 == 0 {
            ("WWCC", "pos")
        } else {
            ("GGSS", "neg")
        };
        let f = fillers[(i / 2 + salt) % 4];
        let seq = format!("{}{motif}{}", &f[..6], &fillers[(i + salt + 1) % 4][..8]);
        text += &row(&seq, "human", "", "", label);
    }
    fs::write(path, text).unwrap();
}

#[test]
fn filter_counts_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let input = filter_fixture(dir.path());
    let before = fs::read(&input).unwrap();
    let out = dir.path().join("kept.csv");
    ok(&["filter", "--input", p(&input), "--output", p(&out)]);

    let report = json(&dir.path().join("kept.csv.report.json"));
    assert_eq!(report["kept"], 7);
    assert_eq!(report["dropped"]["non_human"], 2);
    assert_eq!(report["dropped"]["fr1_short"], 1);
    assert_eq!(report["dropped"]["fr4_short"], 0);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 8);
    assert_eq!(fs::read(&input).unwrap(), before, "input untouched");

    let manifest = json(&dir.path().join("kept.csv.manifest.json"));
    assert_eq!(manifest["command"], "filter");
    assert_eq!(manifest["inputs"]["records"], p(&input));
    assert!(manifest["version"].is_string());

    let again = dir.path().join("again.csv");
    ok(&["filter", "--input", p(&out), "--output", p(&again)]);
    assert_eq!(fs::read(&again).unwrap(), fs::read(&out).unwrap());
    assert_eq!(
        json(&dir.path().join("again.csv.report.json"))["dropped"]["non_human"],
        0
    );
}

#[test]
fn missing_column_exits_two_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.csv");
    fs::write(&input, "sequence_aa,chain,species\nQVQ,heavy,human\n").unwrap();
    let out = dir.path().join("out.csv");
    let res = abtok(&["filter", "--input", p(&input), "--output", p(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert_eq!(stderr.trim().lines().count(), 1, "{stderr}");
}

#[test]
fn refuses_to_overwrite_input() {
    let dir = tempfile::tempdir().unwrap();
    let input = filter_fixture(dir.path());
    let before = fs::read(&input).unwrap();
    let res = abtok(&["filter", "--input", p(&input), "--output", p(&input)]);
    assert!(!res.status.success());
    assert_eq!(fs::read(&input).unwrap(), before);
}

#[test]
fn split_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("m.csv");
    motif_fixture(&input, 40, 0);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&[
        "split",
        "--input",
        p(&input),
        "--out-dir",
        p(&a),
        "--seed",
        "3",
    ]);
    ok(&[
        "split",
        "--input",
        p(&input),
        "--out-dir",
        p(&b),
        "--seed",
        "3",
    ]);
    let lines = |d: &Path, f: &str| fs::read_to_string(d.join(f)).unwrap().lines().count() - 1;
    assert_eq!(
        (
            lines(&a, "train.csv"),
            lines(&a, "test.csv"),
            lines(&a, "valid.csv")
        ),
        (28, 6, 6)
    );
    for f in ["train.csv", "test.csv", "valid.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    assert_eq!(json(&a.join("manifest.json"))["seeds"][0], 3);
}

#[test]
fn build_vocab_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let saa = dir.path().join("saa.json");
    ok(&["build-vocab", "--kind", "saa", "--output", p(&saa)]);
    assert_eq!(json(&saa)["tokens"].as_array().unwrap().len(), 25);
    let daa = dir.path().join("daa.json");
    ok(&["build-vocab", "--kind", "daa", "--output", p(&daa)]);
    assert_eq!(json(&daa)["tokens"].as_array().unwrap().len(), 425);

    let corpus = dir.path().join("m.csv");
    motif_fixture(&corpus, 40, 0);
    let bpe = dir.path().join("bpe.json");
    ok(&[
        "build-vocab",
        "--kind",
        "bpe",
        "--corpus",
        p(&corpus),
        "--target",
        "40",
        "--output",
        p(&bpe),
    ]);
    let n = json(&bpe)["tokens"].as_array().unwrap().len();
    assert!(n > 25 && n <= 40);
    assert!(dir.path().join("bpe.merges.txt").exists());

    let res = abtok(&[
        "build-vocab",
        "--kind",
        "bpe",
        "--output",
        p(&dir.path().join("x.json")),
    ]);
    assert!(!res.status.success());
}

#[test]
fn evaluate_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("preds.csv");
    fs::write(
        &preds,
        "label,prediction\nHIV,HIV\nCMV,CMV\nMuSK,MuSK\nHIV,HIV\n",
    )
    .unwrap();
    let out = dir.path().join("eval.json");
    ok(&["evaluate", "--predictions", p(&preds), "--output", p(&out)]);
    let r = json(&out);
    for key in ["auroc", "acc", "f1", "precision", "recall"] {
        assert_eq!(r[key], 1.0, "{key}");
    }

    let scores = dir.path().join("scores.csv");
    fs::write(
        &scores,
        "label,neg,pos\npos,0.1,0.9\npos,0.6,0.4\nneg,0.5,0.5\nneg,0.7,0.3\n",
    )
    .unwrap();
    ok(&["evaluate", "--predictions", p(&scores), "--output", p(&out)]);
    assert_eq!(json(&out)["auroc"], 0.75);
}

#[test]
fn bench_reports_every_tokenizer() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("m.csv");
    motif_fixture(&input, 20, 0);
    let out = dir.path().join("bench.json");
    let table = ok(&["bench", "--input", p(&input), "--output", p(&out)]);
    assert!(table.contains("saa") && table.contains("daa"));
    let r = json(&out);
    let rows = r["rows"].as_array().unwrap();
    assert_eq!(rows[0]["compression_ratio"], 1.0);
    assert_eq!(rows[1]["compression_ratio"], 0.5);
}

#[test]
fn pretrain_finetune_evaluate_embed() {
    let dir = tempfile::tempdir().unwrap();
    let d = |f: &str| dir.path().join(f);
    motif_fixture(&d("train.csv"), 32, 0);
    motif_fixture(&d("eval.csv"), 12, 1);
    ok(&[
        "build-vocab",
        "--kind",
        "saa",
        "--output",
        p(&d("vocab.json")),
    ]);

    let (train, vocab, pre) = (d("train.csv"), d("vocab.json"), d("pre.ckpt"));
    let mut args = vec![
        "pretrain",
        "--input",
        p(&train),
        "--vocab",
        p(&vocab),
        "--output",
        p(&pre),
    ];
    args.extend([
        "--preset",
        "toy",
        "--epochs",
        "2",
        "--batch-size",
        "8",
        "--warmup-steps",
        "0",
        "--seed",
        "4",
    ]);
    ok(&args);
    let log = fs::read_to_string(d("pre.ckpt.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let line: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["epoch", "loss", "seconds", "lr"] {
        assert!(line.get(key).is_some(), "{key}");
    }
    let manifest = json(&d("pre.ckpt.manifest.json"));
    assert_eq!(manifest["config"]["model"]["hidden_size"], 8);
    assert_eq!(manifest["config"]["training"]["optimizer"]["beta2"], 0.98);

    // reproducible from the same arguments
    let mut again = args.clone();
    let other = d("pre2.ckpt");
    again[6] = p(&other);
    ok(&again);
    assert_eq!(fs::read(d("pre.ckpt")).unwrap(), fs::read(&other).unwrap());

    let out = d("ft");
    ok(&[
        "finetune",
        "--train",
        p(&d("train.csv")),
        "--eval",
        p(&d("eval.csv")),
        "--task",
        "antigen",
        "--checkpoint",
        p(&d("pre.ckpt")),
        "--vocab",
        p(&d("vocab.json")),
        "--out-dir",
        p(&out),
        "--seeds",
        "2",
        "--epochs",
        "2",
        "--classes",
        "neg,pos",
    ]);
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["seeds"], serde_json::json!([1, 2]));
    for key in ["auroc", "acc", "f1", "precision", "recall"] {
        assert!(summary[key]["mean"].is_number(), "{key}");
        assert!(summary[key]["sd"].is_number(), "{key}");
    }
    assert_eq!(
        json(&out.join("manifest.json"))["config"]["optimizer"]["epsilon"],
        1e-16
    );

    let ckpt = out.join("seed-1").join("model.ckpt");
    let report = d("eval.json");
    ok(&[
        "evaluate",
        "--checkpoint",
        p(&ckpt),
        "--input",
        p(&d("eval.csv")),
        "--vocab",
        p(&d("vocab.json")),
        "--task",
        "antigen",
        "--output",
        p(&report),
    ]);
    assert_eq!(
        json(&report)["auroc"],
        json(&out.join("seed-1").join("eval.json"))["auroc"]
    );

    let emb = d("emb.csv");
    ok(&[
        "embed",
        "--checkpoint",
        p(&d("pre.ckpt")),
        "--vocab",
        p(&d("vocab.json")),
        "--input",
        p(&d("eval.csv")),
        "--output",
        p(&emb),
        "--sample",
        "5",
        "--seed",
        "2",
        "--pooling",
        "first",
    ]);
    let text = fs::read_to_string(&emb).unwrap();
    assert_eq!(text.lines().count(), 6);
    let mut expected = "id,chain,antigen_label,bcell_label,vgene_label".to_string();
    for i in 0..8 {
        let _ = write!(expected, ",e{i}");
    }
    assert_eq!(text.lines().next().unwrap(), expected);
}
