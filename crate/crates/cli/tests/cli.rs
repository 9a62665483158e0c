use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rlcp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlcp")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gen_data_defaults_to_fifteen_facts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let o = rlcp(&["gen-data", "--out", p(&out)]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(fs::read_to_string(out.join("corpus.tsv")).unwrap().lines().count(), 15);
}

#[test]
fn gen_data_accepts_a_two_fact_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let o = rlcp(&["gen-data", "--n-facts", "2", "--out", p(&out)]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(fs::read_to_string(out.join("corpus.tsv")).unwrap().lines().count(), 2);
}

#[test]
fn gen_data_is_byte_stable_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(rlcp(&["gen-data", "--seed", "5", "--out", p(&a)]).status.success());
    assert!(rlcp(&["gen-data", "--seed", "5", "--out", p(&b)]).status.success());
    for f in ["corpus.tsv", "vocab.tsv", "auxiliary.tsv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let again = rlcp(&["gen-data", "--seed", "5", "--out", p(&a)]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert!(rlcp(&["gen-data", "--seed", "5", "--out", p(&a), "--force"]).status.success());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    assert_eq!(rlcp(&["train", "--mode", "forget", "--out", p(&out)]).status.code(), Some(2));
    assert_eq!(rlcp(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(rlcp(&["analyze", "--run", p(&out)]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    assert_eq!(rlcp(&["compare", "--runs", p(&missing)]).status.code(), Some(1));
    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "epochs=-3\n").unwrap();
    let out = dir.path().join("r");
    let o = rlcp(&["train", "--mode", "rlcp", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn rlcp_defaults_land_in_the_config_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let o = rlcp(&["train", "--mode", "rlcp", "--out", p(&out)]);
    assert!(o.status.success(), "{o:?}");
    let snap = fs::read_to_string(out.join("config.txt")).unwrap();
    for line in ["lambda_adv=2", "lambda_rag=1", "lambda_kl=5", "unlikelihood_coeff=0.5", "epochs=50", "batch_size=4"] {
        assert!(snap.lines().any(|l| l == line), "missing {line}");
    }
}

#[test]
fn pipeline_compare_and_analyze_work_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.txt");
    fs::write(&cfg, "epochs=2\nd_model=16\nn_layers=2\nn_heads=2\nd_ff=32\ntap_layer=1\n").unwrap();
    let corpus = dir.path().join("c");
    assert!(rlcp(&["gen-data", "--n-facts", "6", "--n-attrs", "3", "--seed", "1", "--out", p(&corpus)]).status.success());
    let pl = dir.path().join("pl");
    let o = rlcp(&["pipeline", "--config", p(&cfg), "--corpus", p(&corpus), "--out", p(&pl)]);
    assert!(o.status.success(), "{o:?}");
    let table = stdout(&o);
    let arms: Vec<&str> = table.lines().skip(1).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(arms, ["Original", "Just-RAG", "Unlikelihood", "RLCP"]);

    let jr = fs::read_to_string(pl.join("just-rag/config.txt")).unwrap();
    assert!(jr.lines().any(|l| l == "lambda_adv=0"));
    assert!(jr.lines().any(|l| l == "lambda_kl=5"));

    let csv = dir.path().join("t.csv");
    let o = rlcp(&["compare", "--runs", p(&pl.join("rlcp")), "--csv", p(&csv)]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 2);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 2);

    let run = pl.join("rlcp");
    let o = rlcp(&["analyze", "--run", p(&run), "--prop1", "--attention", "--cosine", "--emit-hidden"]);
    assert!(o.status.success(), "{o:?}");
    for f in ["prop1.csv", "attention.csv", "cosine.csv", "hidden.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }

    // a second training arm from the pretrained run, then the collision rule
    let extra = dir.path().join("extra");
    let pre = pl.join("pretrain");
    let args = ["train", "--mode", "just-rag", "--config", p(&cfg), "--corpus", p(&corpus), "--from", p(&pre), "--out", p(&extra)];
    assert!(rlcp(&args).status.success());
    assert_eq!(rlcp(&args).status.code(), Some(1));
    let mut forced = args.to_vec();
    forced.push("--force");
    assert!(rlcp(&forced).status.success());
}
