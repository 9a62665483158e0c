use std::fs;

use rlcp::data::generate_corpus;
use rlcp::error::Error;
use rlcp::metrics::{METRICS_HEADER, PROP1_HEADER};
use rlcp::model::{ModelConfig, ModelParams};
use rlcp::run::{self, AnalyzeOptions, Run};
use rlcp::trainer::{Mode, TrainConfig};

fn tiny_model(vocab: usize) -> ModelParams {
    let cfg = ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        tap_layer: 1,
        ..ModelConfig::desk(vocab)
    };
    ModelParams::init(&cfg, 1).unwrap()
}

#[test]
fn run_directory_round_trips_and_lists_only_existing_files() {
    let corpus = generate_corpus(4, 2, 1, 2, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = TrainConfig { epochs: 2, eval_every: 1, ..TrainConfig::new(Mode::Rlcp) };
    let manifest = run::train_run(&out, tiny_model(corpus.vocab.len()), &corpus, &cfg, false).unwrap();
    for p in manifest.checkpoints.iter().chain(&manifest.metrics) {
        assert!(out.join(p).exists(), "{}", p.display());
    }
    assert!(manifest.run_id.starts_with("rlcp-s0-"));
    let text = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
    assert_eq!(text.lines().count(), 1 + 3);

    let loaded = Run::load(&out).unwrap();
    assert_eq!(loaded.manifest, manifest);
    assert_eq!(loaded.train, cfg);
    assert_eq!(loaded.corpus, corpus);
    assert!(loaded.adversarial_probe().unwrap().is_some());
    let snap = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(snap.contains("lambda_adv=2\n") && snap.contains("d_model=8\n"));

    // collision policy
    let again = run::train_run(&out, tiny_model(corpus.vocab.len()), &corpus, &cfg, false);
    assert!(matches!(again, Err(Error::Collision(_))));
    let forced = run::train_run(&out, tiny_model(corpus.vocab.len()), &corpus, &cfg, true).unwrap();
    assert_eq!(forced.run_id, manifest.run_id);
}

#[test]
fn analysis_files_have_their_documented_shapes() {
    let corpus = generate_corpus(8, 2, 1, 2, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::new(Mode::Rlcp) };
    run::train_run(&out, tiny_model(corpus.vocab.len()), &corpus, &cfg, false).unwrap();
    let r = Run::load(&out).unwrap();
    let opts = AnalyzeOptions { prop1: true, attention: true, cosine: true, emit_hidden: true };
    let files = run::analyze(&r, opts).unwrap();
    let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into()).collect();
    assert_eq!(names, ["prop1.csv", "attention.csv", "cosine.csv", "hidden.csv"]);

    let prop1 = fs::read_to_string(out.join("prop1.csv")).unwrap();
    assert_eq!(prop1.lines().next().unwrap(), PROP1_HEADER);
    assert_eq!(prop1.lines().filter(|l| l.starts_with("fact,")).count(), 3);
    assert_eq!(prop1.lines().filter(|l| l.starts_with("composite,")).count(), 3);

    let hidden = fs::read_to_string(out.join("hidden.csv")).unwrap();
    let header: Vec<&str> = hidden.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 2 + 8);
    assert_eq!(&header[..3], ["fact_id", "class", "h0"]);
    assert_eq!(hidden.lines().count(), 1 + 8);

    let cosine = fs::read_to_string(out.join("cosine.csv")).unwrap();
    assert_eq!(cosine.lines().count(), 1 + run::COSINE_PAIRS + 2);

    // one batch per epoch leaves no pair to compare
    let one = generate_corpus(4, 2, 0, 2, 0).unwrap();
    let out1 = dir.path().join("one");
    run::train_run(&out1, tiny_model(one.vocab.len()), &one, &cfg, false).unwrap();
    let r1 = Run::load(&out1).unwrap();
    assert!(run::analyze(&r1, AnalyzeOptions { cosine: true, ..Default::default() }).is_err());
}

#[test]
fn single_run_compares_to_a_one_row_table() {
    let corpus = generate_corpus(4, 2, 0, 2, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pre");
    let cfg = TrainConfig { pretrain_lr: 1e-2, ..TrainConfig::new(Mode::PretrainFacts) }.with_mode_overrides();
    run::train_run(&out, tiny_model(corpus.vocab.len()), &corpus, &cfg, false).unwrap();
    let rows = run::compare(&[Run::load(&out).unwrap()]).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].arm, "Original");
    assert_eq!(rows[0].zero_shot_recall, 1.0);
    let table = run::compare_table(&rows);
    assert_eq!(table.lines().count(), 2);
    let head: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(head, ["Method", "RAG", "Recall", "Probe"]);
    assert_eq!(run::compare_csv(&rows).lines().next().unwrap(), run::COMPARE_HEADER);
}

#[test]
fn missing_artifacts_fail_to_load() {
    let corpus = generate_corpus(4, 2, 0, 2, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::new(Mode::JustRag) }.with_mode_overrides();
    run::train_run(&out, tiny_model(corpus.vocab.len()), &corpus, &cfg, false).unwrap();
    fs::remove_file(out.join("final.ckpt")).unwrap();
    assert!(Run::load(&out).is_err());
}
