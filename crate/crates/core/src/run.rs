//! Run directories: what a training run writes to disk and how analysis and
//! comparison read it back.
//!
//! ```text
//! <run>/config.txt         model + training config, key=value
//! <run>/manifest.txt       run id, hashes and every artifact path
//! <run>/corpus/            corpus.tsv, vocab.tsv, auxiliary.tsv, templates.txt
//! <run>/checkpoints/       step_<n>.ckpt at each snapshot
//! <run>/initial.ckpt       the starting parameters (the KL reference)
//! <run>/final.ckpt
//! <run>/adversarial_probe.txt   metabolize modes only
//! <run>/metrics.csv
//! <run>/probe_report.csv
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::data::{Corpus, PromptBatch};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::metrics::{self, MetricsRecord};
use crate::model::{ModelConfig, ModelParams};
use crate::probe::{self, ProbeParams};
use crate::trainer::{run_training, Mode, TrainConfig};

pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PROBE_REPORT_FILE: &str = "probe_report.csv";
pub const PROBE_FILE: &str = "adversarial_probe.txt";
pub const PROP1_ETAS: [f64; 3] = [1e-3, 5e-4, 2.5e-4];

/// Index of a finished run. Paths are relative to the run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub run_id: String,
    pub mode: Mode,
    pub seed: u64,
    pub config: KvMap,
    pub corpus_hash: String,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: Vec<PathBuf>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut kv = KvMap::new();
        kv.set("run_id", &self.run_id);
        kv.set("mode", self.mode);
        kv.set("seed", self.seed);
        kv.set("corpus_hash", &self.corpus_hash);
        kv.set("checkpoints", join_paths(&self.checkpoints));
        kv.set("metrics", join_paths(&self.metrics));
        kv.to_text()
    }

    /// Parses `manifest.txt`; the config comes from `config.txt`.
    pub fn from_text(text: &str, config: KvMap) -> Result<Self> {
        let kv = KvMap::parse(text)?;
        let paths = |k: &str| -> Result<Vec<PathBuf>> {
            Ok(kv
                .require::<String>(k)?
                .split(',')
                .filter(|p| !p.is_empty())
                .map(PathBuf::from)
                .collect())
        };
        Ok(Self {
            run_id: kv.require("run_id")?,
            mode: kv.require("mode")?,
            seed: kv.require("seed")?,
            config,
            corpus_hash: kv.require("corpus_hash")?,
            checkpoints: paths("checkpoints")?,
            metrics: paths("metrics")?,
        })
    }

    /// Every named path exists under `dir`.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for p in self.checkpoints.iter().chain(&self.metrics) {
            if !dir.join(p).exists() {
                return Err(Error::Contract(format!("manifest names missing file {}", p.display())));
            }
        }
        Ok(())
    }
}

fn join_paths(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")
}

/// Creates `dir` for a fresh run. An existing non-empty directory is an
/// error unless `force`, in which case it is removed first.
pub fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = !dir.is_dir() || fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return Err(Error::Collision(dir.to_path_buf()));
        }
        if dir.is_dir() {
            fs::remove_dir_all(dir)?;
        } else {
            fs::remove_file(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Full config snapshot: model keys then training keys.
pub fn config_snapshot(model: &ModelConfig, cfg: &TrainConfig) -> KvMap {
    let mut kv = KvMap::new();
    model.to_kv(&mut kv);
    cfg.to_kv(&mut kv);
    kv
}

/// Run id derived from the mode, seed, config snapshot and corpus, so a
/// rerun with identical inputs gets the same id.
fn run_id(mode: Mode, seed: u64, config: &KvMap, corpus_hash: &str) -> String {
    let mut h = Sha256::new();
    h.update(config.to_text().as_bytes());
    h.update(corpus_hash.as_bytes());
    format!("{mode}-s{seed}-{}", &hex::encode(h.finalize())[..12])
}

/// Trains `subject` on `corpus` under `cfg` and writes a complete run
/// directory at `out`.
pub fn train_run(out: &Path, subject: ModelParams, corpus: &Corpus, cfg: &TrainConfig, force: bool) -> Result<RunManifest> {
    cfg.validate()?;
    subject.config.validate()?;
    prepare_out(out, force)?;
    let config = config_snapshot(&subject.config, cfg);
    fs::write(out.join(CONFIG_FILE), config.to_text())?;
    corpus.export(&out.join("corpus"))?;
    checkpoint::save(&subject, &out.join("initial.ckpt"))?;

    let outcome = run_training(subject, corpus, cfg, Some(&out.join("checkpoints")))?;
    checkpoint::save(&outcome.params, &out.join("final.ckpt"))?;
    fs::write(out.join(METRICS_FILE), metrics::metrics_csv(&outcome.metrics))?;
    if let Some(p) = &outcome.probe {
        fs::write(out.join(PROBE_FILE), p.to_text())?;
    }
    fs::write(out.join(PROBE_REPORT_FILE), probe_report(&outcome.params, outcome.probe.as_ref(), corpus, cfg.seed)?)?;

    let mut checkpoints: Vec<PathBuf> = outcome
        .metrics
        .iter()
        .map(|r| PathBuf::from(format!("checkpoints/step_{:06}.ckpt", r.step)))
        .collect();
    checkpoints.dedup();
    checkpoints.push("initial.ckpt".into());
    checkpoints.push("final.ckpt".into());
    let corpus_hash = corpus.content_hash();
    let manifest = RunManifest {
        run_id: run_id(cfg.mode, cfg.seed, &config, &corpus_hash),
        mode: cfg.mode,
        seed: cfg.seed,
        config,
        corpus_hash,
        checkpoints,
        metrics: vec![METRICS_FILE.into(), PROBE_REPORT_FILE.into()],
    };
    fs::write(out.join(MANIFEST_FILE), manifest.to_text())?;
    manifest.verify(out)?;
    Ok(manifest)
}

pub const PROBE_REPORT_HEADER: &str =
    "checkpoint,posthoc_probe_acc,posthoc_best_acc,posthoc_final_loss,posthoc_converged,adversarial_probe_acc";

fn probe_report(params: &ModelParams, adversarial: Option<&ProbeParams>, corpus: &Corpus, seed: u64) -> Result<String> {
    let fit = probe::fit_posthoc_probe(params, corpus, seed)?;
    let adv = match adversarial {
        Some(p) => {
            let feats = probe::probe_features(params, corpus)?;
            let labels: Vec<usize> = corpus.facts.iter().map(|f| f.probe_class).collect();
            format!("{:.9}", p.accuracy(&feats, &labels)?)
        }
        None => String::new(),
    };
    Ok(format!(
        "{PROBE_REPORT_HEADER}\nfinal.ckpt,{:.9},{:.9},{:.9},{},{adv}\n",
        fit.accuracy, fit.best_accuracy, fit.final_loss, fit.converged
    ))
}

/// A run directory loaded back into memory.
#[derive(Clone, Debug)]
pub struct Run {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub train: TrainConfig,
    pub corpus: Corpus,
    pub metrics: Vec<MetricsRecord>,
}

impl Run {
    pub fn load(dir: &Path) -> Result<Self> {
        let config = KvMap::parse(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        let manifest = RunManifest::from_text(&fs::read_to_string(dir.join(MANIFEST_FILE))?, config)?;
        manifest.verify(dir)?;
        let train = TrainConfig::from_kv(&manifest.config, manifest.mode)?;
        let corpus = Corpus::import(&dir.join("corpus"))?;
        if corpus.content_hash() != manifest.corpus_hash {
            return Err(Error::Contract(format!("corpus in {} does not match its manifest hash", dir.display())));
        }
        let metrics = metrics::parse_metrics_csv(&fs::read_to_string(dir.join(METRICS_FILE))?)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            train,
            corpus,
            metrics,
        })
    }

    pub fn final_params(&self) -> Result<ModelParams> {
        checkpoint::load(&self.dir.join("final.ckpt"))
    }

    pub fn initial_params(&self) -> Result<ModelParams> {
        checkpoint::load(&self.dir.join("initial.ckpt"))
    }

    pub fn adversarial_probe(&self) -> Result<Option<ProbeParams>> {
        let p = self.dir.join(PROBE_FILE);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(ProbeParams::from_text(&fs::read_to_string(p)?)?))
    }

    pub fn last_metrics(&self) -> Result<&MetricsRecord> {
        self.metrics
            .last()
            .ok_or_else(|| Error::Contract(format!("{} has no metrics rows", self.dir.display())))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AnalyzeOptions {
    pub prop1: bool,
    pub attention: bool,
    pub cosine: bool,
    pub emit_hidden: bool,
}

pub const COSINE_PAIRS: usize = 10;

/// Writes the requested analysis CSVs into the run directory and returns
/// their paths, in the order prop1, attention, cosine, hidden.
pub fn analyze(run: &Run, opts: AnalyzeOptions) -> Result<Vec<PathBuf>> {
    let params = run.final_params()?;
    let corpus = &run.corpus;
    let mut written = Vec::new();
    let mut write = |name: &str, text: String| -> Result<()> {
        let p = run.dir.join(name);
        fs::write(&p, text)?;
        written.push(p);
        Ok(())
    };
    if opts.prop1 {
        let ids: Vec<usize> = (0..corpus.n_facts()).collect();
        let all = PromptBatch::build(corpus, &ids, None)?;
        let mut rows: Vec<(&str, metrics::BoundCheckReport)> = metrics::check_prop1_bound(&params, &PROP1_ETAS, &all, &all)?
            .into_iter()
            .map(|r| ("fact", r))
            .collect();
        if let Some(probe) = run.adversarial_probe()? {
            let reference = run.initial_params()?.clone_frozen();
            let composite =
                metrics::check_composite_bound(&params, &reference, &probe, &all, &all, &run.train, 1.0, &PROP1_ETAS)?;
            rows.extend(composite.into_iter().map(|r| ("composite", r)));
        }
        write("prop1.csv", metrics::prop1_csv(&rows))?;
    }
    if opts.attention {
        let rows = metrics::attention_profile(&params, corpus, params.config.tap_layer)?;
        write("attention.csv", metrics::attention_csv(&rows))?;
    }
    if opts.cosine {
        let (mean, std, values) =
            metrics::cosine_protocol(&params, corpus, run.train.batch_size, COSINE_PAIRS, run.train.seed)?;
        let mut s = String::from("pair,cosine\n");
        for (i, v) in values.iter().enumerate() {
            let _ = writeln!(s, "{i},{v:.9}");
        }
        let _ = writeln!(s, "mean,{mean:.9}\nstd,{std:.9}");
        write("cosine.csv", s)?;
    }
    if opts.emit_hidden {
        write("hidden.csv", hidden_csv(&params, corpus)?)?;
    }
    Ok(written)
}

/// `fact_id,class,h0..h{d-1}`: tap-layer state at the answer-predicting
/// position of every context-free prompt.
pub fn hidden_csv(params: &ModelParams, corpus: &Corpus) -> Result<String> {
    let feats = probe::probe_features(params, corpus)?;
    let d = params.config.d_model;
    let mut s = String::from("fact_id,class");
    for i in 0..d {
        let _ = write!(s, ",h{i}");
    }
    s.push('\n');
    for (i, (f, h)) in corpus.facts.iter().zip(&feats).enumerate() {
        let _ = write!(s, "{i},{}", f.probe_class);
        for v in h {
            let _ = write!(s, ",{v:.9}");
        }
        s.push('\n');
    }
    Ok(s)
}

/// One row of the arm comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub arm: String,
    pub run_id: String,
    pub rag_accuracy: f64,
    pub zero_shot_recall: f64,
    pub posthoc_probe_acc: f64,
}

pub fn arm_name(mode: Mode) -> &'static str {
    match mode {
        Mode::PretrainFacts => "Original",
        Mode::JustRag => "Just-RAG",
        Mode::UnlikelihoodOnly => "Unlikelihood",
        Mode::Rlcp => "RLCP",
    }
}

pub fn compare(runs: &[Run]) -> Result<Vec<CompareRow>> {
    runs.iter()
        .map(|r| {
            let m = r.last_metrics()?;
            Ok(CompareRow {
                arm: arm_name(r.manifest.mode).to_string(),
                run_id: r.manifest.run_id.clone(),
                rag_accuracy: m.rag_accuracy,
                zero_shot_recall: m.zero_shot_recall,
                posthoc_probe_acc: m.posthoc_probe_acc,
            })
        })
        .collect()
}

pub const COMPARE_HEADER: &str = "arm,run_id,rag_accuracy,zero_shot_recall,posthoc_probe_acc";

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut s = format!("{COMPARE_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6}",
            r.arm, r.run_id, r.rag_accuracy, r.zero_shot_recall, r.posthoc_probe_acc
        );
    }
    s
}

/// Fixed-width table with RAG, recall and probe columns as percentages.
pub fn compare_table(rows: &[CompareRow]) -> String {
    let w = rows.iter().map(|r| r.arm.len()).max().unwrap_or(0).max(6);
    let mut s = format!("{:<w$}  {:>8}  {:>8}  {:>8}\n", "Method", "RAG", "Recall", "Probe");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<w$}  {:>7.1}%  {:>7.1}%  {:>7.1}%",
            r.arm,
            100.0 * r.rag_accuracy,
            100.0 * r.zero_shot_recall,
            100.0 * r.posthoc_probe_acc
        );
    }
    s
}

/// Paths of the four arms inside a pipeline directory.
pub fn pipeline_runs(out: &Path) -> Vec<PathBuf> {
    [Mode::PretrainFacts, Mode::JustRag, Mode::UnlikelihoodOnly, Mode::Rlcp]
        .iter()
        .map(|m| out.join(m.as_str()))
        .collect()
}

/// Pretrains on `corpus`, then runs the three unlearning arms from the
/// pretrained model. `base` supplies every non-mode setting.
pub fn pipeline(out: &Path, corpus: &Corpus, model: &ModelConfig, base: &TrainConfig, force: bool) -> Result<Vec<Run>> {
    prepare_out(out, force)?;
    corpus.export(&out.join("corpus"))?;
    let dirs = pipeline_runs(out);
    let pre_cfg = TrainConfig { mode: Mode::PretrainFacts, ..base.clone() }.with_mode_overrides();
    train_run(&dirs[0], ModelParams::init(model, base.seed)?, corpus, &pre_cfg, false)?;
    let pretrained = Run::load(&dirs[0])?.final_params()?;
    for (mode, dir) in [Mode::JustRag, Mode::UnlikelihoodOnly, Mode::Rlcp].into_iter().zip(&dirs[1..]) {
        let cfg = TrainConfig { mode, ..base.clone() }.with_mode_overrides();
        train_run(dir, pretrained.clone(), corpus, &cfg, false)?;
    }
    let runs = dirs.iter().map(|d| Run::load(d)).collect::<Result<Vec<_>>>()?;
    fs::write(out.join("compare.csv"), compare_csv(&compare(&runs)?))?;
    Ok(runs)
}
