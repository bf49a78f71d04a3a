use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use meshgen::data::{write_corpus, write_embeddings};
use meshgen::synthetic::two_stage_corpus;

fn meshgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meshgen"))
        .args(args)
        .env_remove("MESHGEN_LOG")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture(dir: &Path, n: usize) {
    let (records, emb) = two_stage_corpus(n, 24, 3);
    write_corpus(&dir.join("corpus.tsv"), &records).unwrap();
    write_embeddings(&dir.join("emb.bin"), &emb).unwrap();
}

const TINY_CNN: &[&str] = &[
    "--embed-dim",
    "4",
    "--filter-widths",
    "1,2",
    "--maps-per-width",
    "2",
    "--branch-dense-units",
    "2",
    "--epochs",
    "1",
    "--batch-size",
    "8",
];

#[test]
fn gold_subset_larger_than_the_train_pool_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 30);
    let corpus = dir.path().join("corpus.tsv");
    let out = dir.path().join("out");
    let mut args = vec![
        "train-concepts",
        "--corpus",
        p(&corpus),
        "--out",
        p(&out),
        "--validation-count",
        "5",
        "--test-count",
        "5",
        "--gold-subset-size",
        "25",
    ];
    args.extend_from_slice(TINY_CNN);
    let o = meshgen(&args);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn loss_weights_must_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 30);
    let corpus = dir.path().join("corpus.tsv");
    let out = dir.path().join("out");
    let mut args = vec![
        "train-concepts",
        "--corpus",
        p(&corpus),
        "--out",
        p(&out),
        "--validation-count",
        "5",
        "--test-count",
        "5",
        "--gold-subset-size",
        "10",
        "--lambda",
        "0.5",
        "0.5",
        "0.5",
    ];
    args.extend_from_slice(TINY_CNN);
    let o = meshgen(&args);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn train_concepts_writes_its_outputs_and_a_reloadable_config() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 30);
    let corpus = dir.path().join("corpus.tsv");
    let out = dir.path().join("out");
    let mut args = vec![
        "train-concepts",
        "--corpus",
        p(&corpus),
        "--out",
        p(&out),
        "--validation-count",
        "5",
        "--test-count",
        "5",
        "--gold-subset-size",
        "10",
    ];
    args.extend_from_slice(TINY_CNN);
    let o = meshgen(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "metrics.tsv",
        "history.tsv",
        "gold_ids.txt",
        "model.ckpt",
        "config.toml",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(
        fs::read_to_string(out.join("gold_ids.txt")).unwrap().lines().count(),
        10
    );

    let again = dir.path().join("again");
    let o = meshgen(&[
        "train-concepts",
        "--config",
        p(&out.join("config.toml")),
        "--out",
        p(&again),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics.tsv", "history.tsv", "gold_ids.txt"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn rnn0_rejects_a_combine_mode() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 10);
    let o = meshgen(&[
        "train-generator",
        "--annotations",
        p(&dir.path().join("corpus.tsv")),
        "--embeddings",
        p(&dir.path().join("emb.bin")),
        "--out",
        p(&dir.path().join("g")),
        "--variant",
        "rnn0",
        "--combine",
        "sum",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_embedding_is_a_data_error_naming_the_image() {
    let dir = tempfile::tempdir().unwrap();
    let (records, mut emb) = two_stage_corpus(12, 24, 3);
    let dropped = emb.records.pop().unwrap().id;
    write_corpus(&dir.path().join("corpus.tsv"), &records).unwrap();
    write_embeddings(&dir.path().join("emb.bin"), &emb).unwrap();
    let o = meshgen(&[
        "train-generator",
        "--annotations",
        p(&dir.path().join("corpus.tsv")),
        "--embeddings",
        p(&dir.path().join("emb.bin")),
        "--out",
        p(&dir.path().join("g")),
        "--validation-count",
        "2",
        "--test-count",
        "2",
        "--hidden",
        "4",
        "--word-dim",
        "4",
        "--transition-dim",
        "4",
        "--epochs",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains(&dropped), "{}", stderr(&o));
}

#[test]
fn generator_round_trip_through_generate() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 16);
    let g = dir.path().join("g");
    let o = meshgen(&[
        "train-generator",
        "--annotations",
        p(&dir.path().join("corpus.tsv")),
        "--embeddings",
        p(&dir.path().join("emb.bin")),
        "--out",
        p(&g),
        "--validation-count",
        "2",
        "--test-count",
        "2",
        "--hidden",
        "4",
        "--word-dim",
        "4",
        "--transition-dim",
        "4",
        "--epochs",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let gen = dir.path().join("gen");
    let o = meshgen(&[
        "generate",
        "--model",
        p(&g.join("model.ckpt")),
        "--embeddings",
        p(&dir.path().join("emb.bin")),
        "--ids",
        p(&g.join("test_ids.txt")),
        "--out",
        p(&gen),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let captions = fs::read_to_string(gen.join("captions.tsv")).unwrap();
    assert_eq!(captions.lines().next(), Some("meshgen-captions v1"));
    assert_eq!(captions.lines().count(), 3);
}

#[test]
fn empty_prediction_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 5);
    let pred = dir.path().join("pred.tsv");
    fs::write(&pred, "meshgen-captions v1\n").unwrap();
    let o = meshgen(&[
        "evaluate",
        "--pred",
        p(&pred),
        "--truth",
        p(&dir.path().join("corpus.tsv")),
        "--out",
        p(&dir.path().join("e")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    fs::write(&pred, "").unwrap();
    let o = meshgen(&[
        "evaluate",
        "--pred",
        p(&pred),
        "--truth",
        p(&dir.path().join("corpus.tsv")),
        "--out",
        p(&dir.path().join("e")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

fn metric_values(path: &Path) -> Vec<(String, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let (k, v) = l.split_once('\t').unwrap();
            (k.to_string(), v.parse().unwrap())
        })
        .collect()
}

#[test]
fn predictions_equal_to_truth_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 8);
    let corpus = dir.path().join("corpus.tsv");

    let e = dir.path().join("labels");
    let o = meshgen(&["evaluate", "--pred", p(&corpus), "--truth", p(&corpus), "--out", p(&e)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for (k, v) in metric_values(&e.join("metrics.tsv")) {
        if k.starts_with("precision") || k.starts_with("recall") || k == "accuracy" || k.starts_with("f1") {
            assert_eq!(v, 1.0, "{k}");
        }
    }

    let captions = dir.path().join("captions.tsv");
    let text = fs::read_to_string(&corpus).unwrap();
    let mut out = String::from("meshgen-captions v1\n");
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        out.push_str(&format!("{}\t{}\n", cols[3], cols[2]));
    }
    fs::write(&captions, out).unwrap();
    let e = dir.path().join("bleu");
    let o = meshgen(&[
        "evaluate",
        "--pred",
        p(&captions),
        "--truth",
        p(&corpus),
        "--out",
        p(&e),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = metric_values(&e.join("metrics.tsv"));
    assert!(m.iter().any(|(k, v)| k == "bleu_1" && *v == 1.0), "{m:?}");
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let o = meshgen(&["evaluate", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert_eq!(meshgen(&["evaluate", "--bleu-mode", "nonsense"]).status.code(), Some(2));
    assert_eq!(meshgen(&["evaluate"]).status.code(), Some(2));
}

#[test]
fn gradcheck_detects_a_corrupted_backward_pass() {
    let ok = meshgen(&["gradcheck", "--module", "seqgen"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    let bad = meshgen(&["gradcheck", "--module", "seqgen", "--corrupt-backward", "sigmoid"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}
