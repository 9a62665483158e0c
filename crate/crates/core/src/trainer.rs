//! Pretraining, the four-stream unlearning step and the baseline arms.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::{GradScale, Tape, Var};
use crate::checkpoint;
use crate::data::{make_batches, Corpus, PromptBatch};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::metrics::{self, MetricsRecord};
use crate::model::{forward_batch, forward_tape, ModelParams, ParamVars};
use crate::optim::{clip_global_norm, Adam};
use crate::probe::{probe_forward, ProbeParams, ProbeVars};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    PretrainFacts,
    Rlcp,
    JustRag,
    UnlikelihoodOnly,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::PretrainFacts, Mode::JustRag, Mode::UnlikelihoodOnly, Mode::Rlcp];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::PretrainFacts => "pretrain",
            Mode::Rlcp => "rlcp",
            Mode::JustRag => "just-rag",
            Mode::UnlikelihoodOnly => "unlikelihood",
        }
    }

    pub fn uses_probe(self) -> bool {
        self == Mode::Rlcp
    }

    pub fn uses_rag(self) -> bool {
        matches!(self, Mode::Rlcp | Mode::JustRag)
    }

    pub fn uses_unlikelihood(self) -> bool {
        matches!(self, Mode::Rlcp | Mode::UnlikelihoodOnly)
    }

    pub fn is_metabolize(self) -> bool {
        self != Mode::PretrainFacts
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Mode::PretrainFacts),
            "rlcp" => Ok(Mode::Rlcp),
            "just-rag" => Ok(Mode::JustRag),
            "unlikelihood" => Ok(Mode::UnlikelihoodOnly),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?} (expected pretrain, rlcp, just-rag or unlikelihood)"
            ))),
        }
    }
}

/// Which `x_no` positions the KL anchor averages over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlPositions {
    /// Every non-pad position.
    AllPrompt,
    /// Every non-pad position except the answer-predicting one.
    ExcludeAnswer,
}

impl fmt::Display for KlPositions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KlPositions::AllPrompt => "all-prompt",
            KlPositions::ExcludeAnswer => "exclude-answer",
        })
    }
}

impl FromStr for KlPositions {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-prompt" => Ok(KlPositions::AllPrompt),
            "exclude-answer" => Ok(KlPositions::ExcludeAnswer),
            _ => Err(Error::Config(format!("unknown kl_positions {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub lambda_adv: f64,
    pub lambda_rag: f64,
    pub lambda_kl: f64,
    pub unlikelihood_coeff: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub probe_lr: f64,
    /// φ updates per θ update; the extra ones refit the probe on the step's
    /// detached tap states.
    pub probe_steps: usize,
    /// Re-initialize the adversarial probe every this many steps (0 = never).
    pub probe_reinit_every: usize,
    pub schedule_gain: f64,
    pub clip_norm: f64,
    pub kl_positions: KlPositions,
    pub pretrain_lr: f64,
    pub pretrain_max_epochs: usize,
    pub pretrain_recall_target: f64,
    pub pretrain_loss_target: f64,
    /// Adds a context-reading CE term on reader entities during pretraining.
    pub pretrain_reading: bool,
    /// Steps between metrics snapshots.
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            seed: 0,
            lambda_adv: 2.0,
            lambda_rag: 1.0,
            lambda_kl: 5.0,
            unlikelihood_coeff: 0.5,
            epochs: 50,
            batch_size: 4,
            lr: 3e-4,
            probe_lr: 1e-3,
            probe_steps: 1,
            probe_reinit_every: 0,
            schedule_gain: 10.0,
            clip_norm: 1.0,
            kl_positions: KlPositions::ExcludeAnswer,
            pretrain_lr: 1e-3,
            pretrain_max_epochs: 400,
            pretrain_recall_target: 0.99,
            pretrain_loss_target: 0.05,
            pretrain_reading: true,
            eval_every: 50,
        }
        .with_mode_overrides()
    }

    /// Zeroes the coefficients of streams the mode does not run.
    pub fn with_mode_overrides(mut self) -> Self {
        if !self.mode.uses_probe() {
            self.lambda_adv = 0.0;
        }
        if !self.mode.uses_rag() {
            self.lambda_rag = 0.0;
        }
        if !self.mode.uses_unlikelihood() {
            self.unlikelihood_coeff = 0.0;
        }
        if !self.mode.is_metabolize() {
            self.lambda_kl = 0.0;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_adv", self.lambda_adv),
            ("lambda_rag", self.lambda_rag),
            ("lambda_kl", self.lambda_kl),
            ("unlikelihood_coeff", self.unlikelihood_coeff),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [
            ("lr", self.lr),
            ("probe_lr", self.probe_lr),
            ("pretrain_lr", self.pretrain_lr),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 || self.probe_steps == 0 || self.eval_every == 0 || self.pretrain_max_epochs == 0 {
            return Err(Error::Config(
                "epochs, batch_size, probe_steps, eval_every and pretrain_max_epochs must be >= 1".into(),
            ));
        }
        if *self != self.clone().with_mode_overrides() {
            return Err(Error::Config(format!(
                "mode {} requires its unused stream coefficients to be 0",
                self.mode
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut KvMap) {
        kv.set("mode", self.mode);
        kv.set("seed", self.seed);
        kv.set("lambda_adv", self.lambda_adv);
        kv.set("lambda_rag", self.lambda_rag);
        kv.set("lambda_kl", self.lambda_kl);
        kv.set("unlikelihood_coeff", self.unlikelihood_coeff);
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.lr);
        kv.set("probe_lr", self.probe_lr);
        kv.set("probe_steps", self.probe_steps);
        kv.set("probe_reinit_every", self.probe_reinit_every);
        kv.set("schedule_gain", self.schedule_gain);
        kv.set("clip_norm", self.clip_norm);
        kv.set("kl_positions", self.kl_positions);
        kv.set("pretrain_lr", self.pretrain_lr);
        kv.set("pretrain_max_epochs", self.pretrain_max_epochs);
        kv.set("pretrain_recall_target", self.pretrain_recall_target);
        kv.set("pretrain_loss_target", self.pretrain_loss_target);
        kv.set("pretrain_reading", self.pretrain_reading);
        kv.set("eval_every", self.eval_every);
    }

    /// Reads training keys over the defaults of `mode`, then applies the
    /// mode's overrides.
    pub fn from_kv(kv: &KvMap, mode: Mode) -> Result<Self> {
        let d = Self::new(mode);
        let cfg = Self {
            mode,
            seed: kv.get_or("seed", d.seed)?,
            lambda_adv: kv.get_or("lambda_adv", 2.0)?,
            lambda_rag: kv.get_or("lambda_rag", 1.0)?,
            lambda_kl: kv.get_or("lambda_kl", 5.0)?,
            unlikelihood_coeff: kv.get_or("unlikelihood_coeff", 0.5)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            lr: kv.get_or("lr", d.lr)?,
            probe_lr: kv.get_or("probe_lr", d.probe_lr)?,
            probe_steps: kv.get_or("probe_steps", d.probe_steps)?,
            probe_reinit_every: kv.get_or("probe_reinit_every", d.probe_reinit_every)?,
            schedule_gain: kv.get_or("schedule_gain", d.schedule_gain)?,
            clip_norm: kv.get_or("clip_norm", d.clip_norm)?,
            kl_positions: kv.get_or("kl_positions", d.kl_positions)?,
            pretrain_lr: kv.get_or("pretrain_lr", d.pretrain_lr)?,
            pretrain_max_epochs: kv.get_or("pretrain_max_epochs", d.pretrain_max_epochs)?,
            pretrain_recall_target: kv.get_or("pretrain_recall_target", d.pretrain_recall_target)?,
            pretrain_loss_target: kv.get_or("pretrain_loss_target", d.pretrain_loss_target)?,
            pretrain_reading: kv.get_or("pretrain_reading", d.pretrain_reading)?,
            eval_every: kv.get_or("eval_every", d.eval_every)?,
        }
        .with_mode_overrides();
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `2 / (1 + exp(-gain·p)) - 1`.
pub fn alpha_schedule(p: f64, gain: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Contract(format!("progress {p} outside [0, 1]")));
    }
    Ok(2.0 / (1.0 + (-gain * p).exp()) - 1.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_rag: f64,
    pub l_probe: f64,
    pub l_unlike: f64,
    pub l_kl: f64,
    pub l_total: f64,
    pub alpha: f64,
    pub progress: f64,
    /// `x_rag` was forwarded.
    pub rag_evaluated: bool,
    /// The probe stream went through the gradient reversal layer.
    pub grl_applied: bool,
}

impl LossBreakdown {
    /// `l_total` recomputed from its parts.
    pub fn recompose(&self, cfg: &TrainConfig) -> f64 {
        cfg.lambda_rag * self.l_rag + cfg.lambda_adv * self.l_probe + self.l_unlike + cfg.lambda_kl * self.l_kl
    }

    /// The objective θ actually descends: the probe term enters with `-α`.
    pub fn theta_objective(&self, cfg: &TrainConfig) -> f64 {
        cfg.lambda_rag * self.l_rag - self.alpha * cfg.lambda_adv * self.l_probe
            + self.l_unlike
            + cfg.lambda_kl * self.l_kl
    }
}

/// Reference logits `[B·T × V]` for the `x_no` prompts of `batch`.
pub fn reference_logits(reference: &ModelParams, batch: &PromptBatch) -> Result<Tensor> {
    let traces = forward_batch(reference, &batch.x_no, false)?;
    let v = reference.config.vocab_size;
    let rows: usize = traces.iter().map(|t| t.logits.shape()[0]).sum();
    let data = traces.into_iter().flat_map(|t| t.logits.into_data()).collect();
    Tensor::new(vec![rows, v], data)
}

/// Loss scalars of one composite graph.
#[derive(Clone, Copy, Debug)]
pub struct CompositeVars {
    pub l_rag: Option<Var>,
    pub l_probe: Option<Var>,
    pub l_unlike: Option<Var>,
    pub l_kl: Option<Var>,
    pub total: Var,
    pub alpha: f64,
    pub probe_input: Option<Var>,
}

/// Streams of the composite loss, used to backpropagate one at a time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Rag,
    Probe,
    Unlikelihood,
    Kl,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Rag, Component::Probe, Component::Unlikelihood, Component::Kl];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Rag => "rag",
            Component::Probe => "probe",
            Component::Unlikelihood => "unlikelihood",
            Component::Kl => "kl",
        }
    }
}

impl CompositeVars {
    /// Weighted loss of one stream, as it appears in the total.
    pub fn weighted(&self, tape: &mut Tape, c: Component, cfg: &TrainConfig) -> Result<Option<Var>> {
        let (var, w) = match c {
            Component::Rag => (self.l_rag, cfg.lambda_rag),
            Component::Probe => (self.l_probe, cfg.lambda_adv),
            Component::Unlikelihood => (self.l_unlike, 1.0),
            Component::Kl => (self.l_kl, cfg.lambda_kl),
        };
        var.map(|v| tape.scale(v, w)).transpose()
    }

    pub fn breakdown(&self, tape: &Tape, progress: f64) -> LossBreakdown {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.item(v));
        LossBreakdown {
            l_rag: get(self.l_rag),
            l_probe: get(self.l_probe),
            l_unlike: get(self.l_unlike),
            l_kl: get(self.l_kl),
            l_total: tape.item(self.total),
            alpha: self.alpha,
            progress,
            rag_evaluated: self.l_rag.is_some(),
            grl_applied: self.l_probe.is_some(),
        }
    }
}

/// Records the full loss graph of one unlearning step on `tape`.
pub fn build_composite(
    tape: &mut Tape,
    vars: &ParamVars,
    probe: Option<ProbeVars>,
    ref_logits: &Tensor,
    batch: &PromptBatch,
    cfg: &TrainConfig,
    progress: f64,
) -> Result<CompositeVars> {
    let mode = cfg.mode;
    if !mode.is_metabolize() {
        return Err(Error::Contract("composite loss requires a metabolize mode".into()));
    }
    let alpha = alpha_schedule(progress, cfg.schedule_gain)?;
    let no = forward_tape(tape, vars, &batch.x_no, false)?;

    let mut probe_input = None;
    let l_probe = if mode.uses_probe() {
        let probe = probe.ok_or_else(|| Error::Contract("rlcp mode needs a probe".into()))?;
        let h = tape.gather_rows(no.tap_hidden, &batch.last_rows_no())?;
        probe_input = Some(h);
        let reversed = tape.grad_reverse(h, GradScale::new(alpha)?)?;
        let out = probe_forward(tape, probe, reversed)?;
        Some(tape.cross_entropy(out, &batch.y_probe, &vec![true; batch.len()])?)
    } else {
        None
    };

    let (targets, answer_mask) = batch.answer_targets_no();
    let l_unlike = if mode.uses_unlikelihood() {
        let ce = tape.cross_entropy(no.logits, &targets, &answer_mask)?;
        Some(tape.scale(ce, -cfg.unlikelihood_coeff)?)
    } else {
        None
    };

    let mut kl_mask = batch.nonpad_mask_no();
    if cfg.kl_positions == KlPositions::ExcludeAnswer {
        for (m, &a) in kl_mask.iter_mut().zip(&answer_mask) {
            *m &= !a;
        }
    }
    let r = tape.constant(ref_logits.clone())?;
    let l_kl = Some(tape.kl_divergence(r, no.logits, &kl_mask)?);

    let l_rag = if mode.uses_rag() {
        let rag = forward_tape(tape, vars, &batch.x_rag, false)?;
        let (t, m) = batch.answer_targets_rag();
        Some(tape.cross_entropy(rag.logits, &t, &m)?)
    } else {
        None
    };

    let mut terms = Vec::new();
    for (v, w) in [
        (l_rag, cfg.lambda_rag),
        (l_probe, cfg.lambda_adv),
        (l_unlike, 1.0),
        (l_kl, cfg.lambda_kl),
    ] {
        if let Some(v) = v {
            terms.push(tape.scale(v, w)?);
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(CompositeVars {
        l_rag,
        l_probe,
        l_unlike,
        l_kl,
        total,
        alpha,
        probe_input,
    })
}

/// Gradients of one composite evaluation, without any parameter update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepGrads {
    pub breakdown: LossBreakdown,
    pub theta: Vec<Vec<f64>>,
    pub probe: Vec<Vec<f64>>,
    /// Tap states the probe saw, `[B × d_model]`.
    pub probe_input: Option<Tensor>,
}

fn check_reference(params: &ModelParams, reference: &ModelParams) -> Result<()> {
    if !reference.is_frozen() {
        return Err(Error::Contract("reference model must be frozen".into()));
    }
    if params.is_frozen() {
        return Err(Error::Contract("trained model must not be frozen".into()));
    }
    Ok(())
}

pub fn composite_gradients(
    params: &ModelParams,
    reference: &ModelParams,
    probe: &ProbeParams,
    batch: &PromptBatch,
    cfg: &TrainConfig,
    progress: f64,
) -> Result<StepGrads> {
    check_reference(params, reference)?;
    let ref_logits = reference_logits(reference, batch)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape)?;
    let pv = probe.register(&mut tape)?;
    let c = build_composite(&mut tape, &vars, Some(pv), &ref_logits, batch, cfg, progress)?;
    tape.backward(c.total)?;
    Ok(StepGrads {
        breakdown: c.breakdown(&tape, progress),
        theta: vars.grads(&tape),
        probe: vec![tape.grad_or_zeros(pv.weight), tape.grad_or_zeros(pv.bias)],
        probe_input: c.probe_input.map(|h| tape.value(h).clone()),
    })
}

/// Loss breakdown of the composite objective; nothing is differentiated.
pub fn composite_losses(
    params: &ModelParams,
    reference: &ModelParams,
    probe: &ProbeParams,
    batch: &PromptBatch,
    cfg: &TrainConfig,
    progress: f64,
) -> Result<LossBreakdown> {
    if !reference.is_frozen() {
        return Err(Error::Contract("reference model must be frozen".into()));
    }
    let ref_logits = reference_logits(reference, batch)?;
    let mut tape = Tape::new();
    let vars = params.clone_frozen().register(&mut tape)?;
    let pv = probe.register(&mut tape)?;
    let c = build_composite(&mut tape, &vars, Some(pv), &ref_logits, batch, cfg, progress)?;
    Ok(c.breakdown(&tape, progress))
}

/// Flat θ-gradient of a single weighted stream of the composite loss.
pub fn component_gradient(
    params: &ModelParams,
    reference: &ModelParams,
    probe: &ProbeParams,
    batch: &PromptBatch,
    cfg: &TrainConfig,
    progress: f64,
    component: Component,
) -> Result<Option<Vec<f64>>> {
    check_reference(params, reference)?;
    let ref_logits = reference_logits(reference, batch)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape)?;
    let pv = probe.register(&mut tape)?;
    let c = build_composite(&mut tape, &vars, Some(pv), &ref_logits, batch, cfg, progress)?;
    match c.weighted(&mut tape, component, cfg)? {
        None => Ok(None),
        Some(root) => {
            tape.backward(root)?;
            Ok(Some(vars.flat_grad(&tape)))
        }
    }
}

/// Optimizer state of a metabolize run.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub theta: Adam,
    pub probe: Adam,
}

impl Optimizers {
    pub fn new(params: &ModelParams, probe: &ProbeParams, cfg: &TrainConfig) -> Self {
        let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.numel()).collect();
        Self {
            theta: Adam::new(cfg.lr, &sizes),
            probe: Adam::new(cfg.probe_lr, &probe.sizes()),
        }
    }
}

/// One step: composite backward, clipped Adam update on θ, Adam update on φ.
pub fn rlcp_step(
    params: &mut ModelParams,
    reference: &ModelParams,
    probe: &mut ProbeParams,
    opts: &mut Optimizers,
    batch: &PromptBatch,
    cfg: &TrainConfig,
    progress: f64,
) -> Result<LossBreakdown> {
    let StepGrads {
        breakdown,
        mut theta,
        probe: probe_grads,
        probe_input,
    } = composite_gradients(params, reference, probe, batch, cfg, progress)?;
    clip_global_norm(&mut theta, cfg.clip_norm);
    opts.theta.step(params.tensors_mut()?, &theta)?;
    if let Some(h) = probe_input {
        opts.probe.step(probe.tensors_mut(), &probe_grads)?;
        let mask = vec![true; batch.len()];
        for _ in 1..cfg.probe_steps {
            let mut tape = Tape::new();
            let pv = probe.register(&mut tape)?;
            let x = tape.constant(h.clone())?;
            let out = probe_forward(&mut tape, pv, x)?;
            let ce = tape.cross_entropy(out, &batch.y_probe, &mask)?;
            let loss = tape.scale(ce, cfg.lambda_adv)?;
            tape.backward(loss)?;
            let g = vec![tape.grad_or_zeros(pv.weight), tape.grad_or_zeros(pv.bias)];
            opts.probe.step(probe.tensors_mut(), &g)?;
        }
    }
    Ok(breakdown)
}

/// Result of fact pretraining.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub params: ModelParams,
    /// Mean fact CE per epoch.
    pub loss_trace: Vec<f64>,
    pub steps: usize,
    pub recall: f64,
    /// Reader-entity context accuracy, `None` without the reading term.
    pub reading: Option<f64>,
}

/// One step on fact CE, plus reading CE when `reading` is given. Returns the
/// fact CE.
fn pretrain_step(
    params: &mut ModelParams,
    opt: &mut Adam,
    batch: &PromptBatch,
    reading: Option<&PromptBatch>,
    clip: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape)?;
    let out = forward_tape(&mut tape, &vars, &batch.x_no, false)?;
    let (t, m) = batch.answer_targets_no();
    let fact = tape.cross_entropy(out.logits, &t, &m)?;
    let mut loss = fact;
    if let Some(rb) = reading {
        let out = forward_tape(&mut tape, &vars, &rb.x_rag, false)?;
        let (t, m) = rb.answer_targets_rag();
        let read = tape.cross_entropy(out.logits, &t, &m)?;
        loss = tape.add(fact, read)?;
    }
    tape.backward(loss)?;
    let mut grads = vars.grads(&tape);
    clip_global_norm(&mut grads, clip);
    opt.step(params.tensors_mut()?, &grads)?;
    Ok(tape.item(fact))
}

/// CE on `x_no → y_lm` (plus reader-entity context reading when enabled)
/// until the mean epoch fact loss, recall and reading accuracy meet their
/// targets. `on_step` sees `(completed_steps, &params, last_fact_loss)`.
pub fn pretrain_with<F>(mut params: ModelParams, corpus: &Corpus, cfg: &TrainConfig, mut on_step: F) -> Result<Pretrained>
where
    F: FnMut(usize, &ModelParams, f64) -> Result<()>,
{
    if cfg.mode != Mode::PretrainFacts {
        return Err(Error::Contract("pretraining requires mode=pretrain".into()));
    }
    cfg.validate()?;
    if cfg.pretrain_reading && corpus.readers.is_empty() {
        return Err(Error::Config("pretrain_reading needs a corpus with reader entities".into()));
    }
    let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = Adam::new(cfg.pretrain_lr, &sizes);
    let stream = make_batches(corpus, cfg.batch_size, cfg.seed)?;
    let mut read_rng = rng::stream(cfg.seed, "reading");
    let mut trace = Vec::new();
    let mut steps = 0;
    let mut status = String::new();
    for epoch in 0..cfg.pretrain_max_epochs {
        let mut sum = 0.0;
        let batches = stream.epoch(epoch)?;
        for b in &batches {
            let rb = if cfg.pretrain_reading {
                Some(PromptBatch::reading(corpus, &mut read_rng, cfg.batch_size)?)
            } else {
                None
            };
            let loss = pretrain_step(&mut params, &mut opt, b, rb.as_ref(), cfg.clip_norm)?;
            sum += loss;
            steps += 1;
            on_step(steps, &params, loss)?;
        }
        let mean = sum / batches.len() as f64;
        trace.push(mean);
        if mean > cfg.pretrain_loss_target {
            continue;
        }
        let recall = metrics::zero_shot_recall(&params, corpus)?;
        let reading = if cfg.pretrain_reading {
            Some(metrics::reading_accuracy(&params, corpus)?)
        } else {
            None
        };
        status = format!("recall {recall:.3}, reading {reading:?}");
        if recall >= cfg.pretrain_recall_target && reading.is_none_or(|r| r >= cfg.pretrain_recall_target) {
            return Ok(Pretrained {
                params,
                loss_trace: trace,
                steps,
                recall,
                reading,
            });
        }
    }
    if status.is_empty() {
        status = format!("recall {:.3}", metrics::zero_shot_recall(&params, corpus)?);
    }
    Err(Error::Convergence {
        msg: format!(
            "{status} after {} epochs (target {})",
            cfg.pretrain_max_epochs, cfg.pretrain_recall_target
        ),
        trace,
    })
}

pub fn pretrain_facts(params: ModelParams, corpus: &Corpus, cfg: &TrainConfig) -> Result<Pretrained> {
    pretrain_with(params, corpus, cfg, |_, _, _| Ok(()))
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub probe: Option<ProbeParams>,
    pub metrics: Vec<MetricsRecord>,
    pub steps: usize,
}

/// Trains `subject` under `cfg.mode`, snapshotting metrics at step 0, every
/// `cfg.eval_every` steps and at the end. Checkpoints go to
/// `checkpoint_dir/step_<n>.ckpt` at each snapshot when a directory is given.
pub fn run_training(
    subject: ModelParams,
    corpus: &Corpus,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if subject.config.vocab_size != corpus.vocab.len() {
        return Err(Error::Contract(format!(
            "model vocab {} does not match corpus vocab {}",
            subject.config.vocab_size,
            corpus.vocab.len()
        )));
    }
    let save = |params: &ModelParams, step: usize| -> Result<()> {
        if let Some(dir) = checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            checkpoint::save(params, &dir.join(format!("step_{step:06}.ckpt")))?;
        }
        Ok(())
    };

    if cfg.mode == Mode::PretrainFacts {
        let mut records = vec![metrics::snapshot(&subject, corpus, None, 0, cfg, None)?];
        save(&subject, 0)?;
        let mut last = (0, 0.0);
        let out = pretrain_with(subject, corpus, cfg, |step, params, loss| {
            last = (step, loss);
            if step % cfg.eval_every == 0 {
                let losses = LossBreakdown {
                    l_total: loss,
                    ..Default::default()
                };
                records.push(metrics::snapshot(params, corpus, None, step, cfg, Some(losses))?);
                save(params, step)?;
            }
            Ok(())
        })?;
        if last.0 % cfg.eval_every != 0 {
            let losses = LossBreakdown {
                l_total: last.1,
                ..Default::default()
            };
            records.push(metrics::snapshot(&out.params, corpus, None, out.steps, cfg, Some(losses))?);
            save(&out.params, out.steps)?;
        }
        return Ok(TrainOutcome {
            params: out.params,
            probe: None,
            metrics: records,
            steps: out.steps,
        });
    }

    let mut params = subject;
    params.set_frozen(false);
    let reference = params.clone_frozen();
    let mut probe = ProbeParams::init(
        params.config.d_model,
        corpus.n_facts(),
        cfg.seed,
        "adversarial-probe",
    );
    let mut opts = Optimizers::new(&params, &probe, cfg);
    let stream = make_batches(corpus, cfg.batch_size, cfg.seed)?;
    let total = cfg.epochs * stream.batches_per_epoch();
    let snap = |params: &ModelParams, probe: &ProbeParams, step: usize| -> Result<MetricsRecord> {
        metrics::snapshot(params, corpus, Some((&reference, probe)), step, cfg, None)
    };
    let mut records = vec![snap(&params, &probe, 0)?];
    save(&params, 0)?;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in stream.epoch(epoch)? {
            if cfg.probe_reinit_every > 0 && step > 0 && step % cfg.probe_reinit_every == 0 {
                probe = ProbeParams::init(
                    params.config.d_model,
                    corpus.n_facts(),
                    cfg.seed,
                    &format!("adversarial-probe/{step}"),
                );
                opts.probe = Adam::new(cfg.probe_lr, &probe.sizes());
            }
            let p = (step + 1) as f64 / total as f64;
            rlcp_step(&mut params, &reference, &mut probe, &mut opts, &batch, cfg, p)?;
            step += 1;
            if step % cfg.eval_every == 0 || step == total {
                records.push(snap(&params, &probe, step)?);
                save(&params, step)?;
            }
        }
    }
    Ok(TrainOutcome {
        params,
        probe: Some(probe),
        metrics: records,
        steps: step,
    })
}
