use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand};
use rlcp::checkpoint;
use rlcp::data::{self, Corpus};
use rlcp::kv::KvMap;
use rlcp::model::{ModelConfig, ModelParams};
use rlcp::run::{self, AnalyzeOptions, Run};
use rlcp::trainer::{Mode, TrainConfig};

#[derive(Parser)]
#[command(name = "rlcp", version, about = "Adversarial fact unlearning experiments on a tiny transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic fact corpus.
    GenData(GenData),
    /// Train one arm and write a run directory.
    Train(Train),
    /// Tabulate RAG accuracy, recall and probe accuracy across runs.
    Compare(Compare),
    /// Write analysis CSVs for a finished run.
    Analyze(Analyze),
    /// Pretrain, run all three unlearning arms and compare them.
    Pipeline(Pipeline),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = data::DEFAULT_FACTS)]
    n_facts: usize,
    /// Defaults to 8, capped at the number of facts.
    #[arg(long)]
    n_attrs: Option<usize>,
    #[arg(long, default_value_t = data::DEFAULT_DISTRACTORS)]
    n_distractors: usize,
    #[arg(long, default_value_t = data::DEFAULT_READERS)]
    n_readers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Common {
    /// key=value file with model and training overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory from gen-data; generated from the seed when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Train {
    #[arg(long, value_parser = parse_mode)]
    mode: Mode,
    /// Starting checkpoint, or a run directory whose final.ckpt is used.
    #[arg(long)]
    from: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Compare {
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// CSV destination; defaults to stdout only.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("outputs").required(true).multiple(true).args(["prop1", "attention", "cosine", "emit_hidden"])))]
struct Analyze {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    prop1: bool,
    #[arg(long)]
    attention: bool,
    #[arg(long)]
    cosine: bool,
    /// Export tap-layer hidden states per fact.
    #[arg(long)]
    emit_hidden: bool,
}

#[derive(Args)]
struct Pipeline {
    #[command(flatten)]
    common: Common,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: rlcp::error::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Compare(a) => compare(a),
        Command::Analyze(a) => analyze(a),
        Command::Pipeline(a) => pipeline(a),
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let n_attrs = a.n_attrs.unwrap_or(data::DEFAULT_ATTRIBUTES.min(a.n_facts));
    let corpus = data::generate_corpus(a.n_facts, n_attrs, a.n_distractors, a.n_readers, a.seed)?;
    run::prepare_out(&a.out, a.force)?;
    corpus.export(&a.out)?;
    println!("wrote {} facts to {}", corpus.n_facts(), a.out.display());
    Ok(())
}

/// Config file (if any) with the `--seed` override applied.
fn load_kv(common: &Common) -> Result<KvMap> {
    let mut kv = match &common.config {
        Some(p) => KvMap::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => KvMap::new(),
    };
    if let Some(seed) = common.seed {
        kv.set("seed", seed);
    }
    Ok(kv)
}

fn load_corpus(common: &Common, seed: u64) -> Result<Corpus> {
    Ok(match &common.corpus {
        Some(dir) => Corpus::import(dir).with_context(|| format!("loading corpus from {}", dir.display()))?,
        None => data::generate_corpus(
            data::DEFAULT_FACTS,
            data::DEFAULT_ATTRIBUTES,
            data::DEFAULT_DISTRACTORS,
            data::DEFAULT_READERS,
            seed,
        )?,
    })
}

fn load_subject(from: &Path) -> Result<ModelParams> {
    let path = if from.is_dir() { from.join("final.ckpt") } else { from.to_path_buf() };
    checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn train(a: Train) -> Result<()> {
    let kv = load_kv(&a.common)?;
    let cfg = TrainConfig::from_kv(&kv, a.mode)?;
    let corpus = load_corpus(&a.common, cfg.seed)?;
    let subject = match &a.from {
        Some(from) => {
            let p = load_subject(from)?;
            if p.config.vocab_size != corpus.vocab.len() {
                bail!(
                    "checkpoint vocab {} does not match corpus vocab {}",
                    p.config.vocab_size,
                    corpus.vocab.len()
                );
            }
            p
        }
        None => {
            if a.mode.is_metabolize() {
                eprintln!("warning: --mode {} without --from starts from a random model", a.mode);
            }
            ModelParams::init(&ModelConfig::from_kv(&kv, &ModelConfig::desk(corpus.vocab.len()))?, cfg.seed)?
        }
    };
    let manifest = run::train_run(&a.common.out, subject, &corpus, &cfg, a.common.force)?;
    let r = Run::load(&a.common.out)?;
    let m = r.last_metrics()?;
    println!(
        "{}: recall {:.3}  rag {:.3}  probe {:.3}  -> {}",
        manifest.run_id,
        m.zero_shot_recall,
        m.rag_accuracy,
        m.posthoc_probe_acc,
        a.common.out.display()
    );
    Ok(())
}

fn compare(a: Compare) -> Result<()> {
    let runs = a
        .runs
        .iter()
        .map(|d| Run::load(d).with_context(|| format!("loading run {}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    let rows = run::compare(&runs)?;
    print!("{}", run::compare_table(&rows));
    if let Some(p) = a.csv {
        fs::write(&p, run::compare_csv(&rows)).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn analyze(a: Analyze) -> Result<()> {
    let opts = AnalyzeOptions {
        prop1: a.prop1,
        attention: a.attention,
        cosine: a.cosine,
        emit_hidden: a.emit_hidden,
    };
    let r = Run::load(&a.run).with_context(|| format!("loading run {}", a.run.display()))?;
    for p in run::analyze(&r, opts)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn pipeline(a: Pipeline) -> Result<()> {
    let kv = load_kv(&a.common)?;
    let base = TrainConfig::from_kv(&kv, Mode::Rlcp)?;
    let corpus = load_corpus(&a.common, base.seed)?;
    let model = ModelConfig::from_kv(&kv, &ModelConfig::desk(corpus.vocab.len()))?;
    let runs = run::pipeline(&a.common.out, &corpus, &model, &base, a.common.force)?;
    print!("{}", run::compare_table(&run::compare(&runs)?));
    Ok(())
}
