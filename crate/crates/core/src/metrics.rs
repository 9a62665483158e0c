//! Behavioral, attention and gradient-geometry diagnostics.

use std::fmt::Write as _;

use crate::autodiff::Tape;
use crate::data::{Corpus, PromptBatch};
use crate::error::{Error, Result};
use crate::model::{forward_batch, forward_tape, ForwardTrace, ModelParams};
use crate::probe::{fit_posthoc_probe, ProbeParams};
use crate::tensor::{argmax, dot, norm};
use crate::trainer::{component_gradient, composite_losses, Component, LossBreakdown, Mode, TrainConfig};

fn all_facts(corpus: &Corpus) -> Result<PromptBatch> {
    let ids: Vec<usize> = (0..corpus.n_facts()).collect();
    PromptBatch::build(corpus, &ids, None)
}

fn answer_hits(traces: &[ForwardTrace], batch: &PromptBatch, targets: &[usize], rag: bool) -> f64 {
    let hits = traces
        .iter()
        .enumerate()
        .filter(|(r, t)| {
            let pos = if rag {
                batch.answer_position_rag(*r)
            } else {
                batch.answer_position_no(*r)
            };
            argmax(t.logits.row(pos)) == targets[*r]
        })
        .count();
    hits as f64 / traces.len() as f64
}

/// Fraction of context-free prompts whose greedy answer is the true attribute.
pub fn zero_shot_recall(params: &ModelParams, corpus: &Corpus) -> Result<f64> {
    let batch = all_facts(corpus)?;
    let traces = forward_batch(params, &batch.x_no, false)?;
    Ok(answer_hits(&traces, &batch, &batch.y_lm, false))
}

/// As [`zero_shot_recall`] on the context-prefixed prompts.
pub fn rag_accuracy(params: &ModelParams, corpus: &Corpus) -> Result<f64> {
    let batch = all_facts(corpus)?;
    let traces = forward_batch(params, &batch.x_rag, false)?;
    Ok(answer_hits(&traces, &batch, &batch.y_lm, true))
}

/// Accuracy on every reader-entity × attribute context prompt.
pub fn reading_accuracy(params: &ModelParams, corpus: &Corpus) -> Result<f64> {
    let batch = PromptBatch::reading_eval(corpus)?;
    let traces = forward_batch(params, &batch.x_rag, false)?;
    Ok(answer_hits(&traces, &batch, &batch.y_lm, true))
}

/// For each fact, the next distinct attribute in first-appearance order.
pub fn swapped_attributes(corpus: &Corpus) -> Vec<String> {
    let attrs = corpus.attributes();
    corpus
        .facts
        .iter()
        .map(|f| {
            let i = attrs.iter().position(|a| *a == f.attribute).expect("attribute listed");
            attrs[(i + 1) % attrs.len()].clone()
        })
        .collect()
}

/// Fraction of prompts whose answer follows a wrong context attribute.
pub fn counterfactual_follow_rate(params: &ModelParams, corpus: &Corpus) -> Result<f64> {
    let ids: Vec<usize> = (0..corpus.n_facts()).collect();
    let swapped = swapped_attributes(corpus);
    let batch = PromptBatch::build(corpus, &ids, Some(&swapped))?;
    let targets = swapped
        .iter()
        .map(|a| corpus.vocab.id(a))
        .collect::<Result<Vec<_>>>()?;
    let traces = forward_batch(params, &batch.x_rag, false)?;
    Ok(answer_hits(&traces, &batch, &targets, true))
}

fn layer_heads(trace: &ForwardTrace, layer: usize) -> Result<&[crate::tensor::Tensor]> {
    let a = trace
        .attention
        .as_ref()
        .ok_or_else(|| Error::Contract("trace has no captured attention".into()))?;
    if layer == 0 || layer > a.len() {
        return Err(Error::Index {
            what: "layer",
            index: layer,
            bound: a.len() + 1,
        });
    }
    Ok(&a[layer - 1])
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

fn span_distribution(row: &[f64], span: (usize, usize)) -> Vec<f64> {
    let s: f64 = row[span.0..span.1].iter().sum();
    row[span.0..span.1].iter().map(|x| x / s).collect()
}

fn check_span(trace: &ForwardTrace, row: usize, span: (usize, usize)) -> Result<()> {
    if span.0 >= span.1 {
        return Err(Error::Contract("empty context span".into()));
    }
    if row < span.1 || row >= trace.logits.shape()[0] {
        return Err(Error::Contract(format!(
            "query row {row} must lie at or after the context span {span:?}"
        )));
    }
    Ok(())
}

/// Entropy (nats) of the query row's attention renormalized over `span`,
/// per head. `layer` is 1-based.
pub fn attention_entropy_per_head(
    trace: &ForwardTrace,
    layer: usize,
    row: usize,
    span: (usize, usize),
) -> Result<Vec<f64>> {
    check_span(trace, row, span)?;
    Ok(layer_heads(trace, layer)?
        .iter()
        .map(|a| entropy(&span_distribution(a.row(row), span)))
        .collect())
}

/// Entropy of the head-averaged attention distribution over the context span.
pub fn attention_entropy(trace: &ForwardTrace, layer: usize, row: usize, span: (usize, usize)) -> Result<f64> {
    check_span(trace, row, span)?;
    let heads = layer_heads(trace, layer)?;
    let mut mean = vec![0.0; span.1 - span.0];
    for a in heads {
        for (m, x) in mean.iter_mut().zip(span_distribution(a.row(row), span)) {
            *m += x / heads.len() as f64;
        }
    }
    Ok(entropy(&mean))
}

pub fn evidence_attention_per_head(trace: &ForwardTrace, layer: usize, row: usize, evidence: usize) -> Result<Vec<f64>> {
    let heads = layer_heads(trace, layer)?;
    let t = trace.logits.shape()[0];
    if evidence >= t || row >= t {
        return Err(Error::Index {
            what: "attention position",
            index: evidence.max(row),
            bound: t,
        });
    }
    Ok(heads.iter().map(|a| a.get2(row, evidence)).collect())
}

/// Head-averaged attention mass from `row` onto `evidence`.
pub fn evidence_attention(trace: &ForwardTrace, layer: usize, row: usize, evidence: usize) -> Result<f64> {
    let per = evidence_attention_per_head(trace, layer, row, evidence)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRow {
    pub fact_id: usize,
    pub entropy: f64,
    pub evidence_weight: f64,
    pub head_entropy: Vec<f64>,
    pub head_evidence: Vec<f64>,
}

/// Attention diagnostics of the answer-predicting query of every
/// context-prefixed prompt at `layer`.
pub fn attention_profile(params: &ModelParams, corpus: &Corpus, layer: usize) -> Result<Vec<AttentionRow>> {
    let batch = all_facts(corpus)?;
    let traces = forward_batch(params, &batch.x_rag, true)?;
    traces
        .iter()
        .enumerate()
        .map(|(r, t)| {
            let row = batch.answer_position_rag(r);
            let span = batch.context_span(r, &corpus.vocab)?;
            let ev = batch.evidence_position(r, &corpus.vocab)?;
            Ok(AttentionRow {
                fact_id: batch.fact_ids[r],
                entropy: attention_entropy(t, layer, row, span)?,
                evidence_weight: evidence_attention(t, layer, row, ev)?,
                head_entropy: attention_entropy_per_head(t, layer, row, span)?,
                head_evidence: evidence_attention_per_head(t, layer, row, ev)?,
            })
        })
        .collect()
}

pub fn attention_csv(rows: &[AttentionRow]) -> String {
    let heads = rows.first().map_or(0, |r| r.head_entropy.len());
    let mut s = String::from("fact_id,attn_entropy_H,evidence_attn_weight");
    for h in 0..heads {
        let _ = write!(s, ",head{h}_entropy");
    }
    for h in 0..heads {
        let _ = write!(s, ",head{h}_evidence");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{:.9},{:.9}", r.fact_id, r.entropy, r.evidence_weight);
        for v in r.head_entropy.iter().chain(&r.head_evidence) {
            let _ = write!(s, ",{v:.9}");
        }
        s.push('\n');
    }
    s
}

/// Differentiable scalar used by the gradient-geometry checks.
#[derive(Clone, Debug, PartialEq)]
pub enum LossSpec {
    /// CE of the true attribute on context-free prompts.
    FactCe,
    /// CE of the true attribute on context-prefixed prompts.
    RagCe,
    Negated(Box<LossSpec>),
    Scaled(f64, Box<LossSpec>),
}

fn spec_on_tape(
    tape: &mut Tape,
    vars: &crate::model::ParamVars,
    spec: &LossSpec,
    batch: &PromptBatch,
) -> Result<crate::autodiff::Var> {
    match spec {
        LossSpec::FactCe => {
            let out = forward_tape(tape, vars, &batch.x_no, false)?;
            let (t, m) = batch.answer_targets_no();
            tape.cross_entropy(out.logits, &t, &m)
        }
        LossSpec::RagCe => {
            let out = forward_tape(tape, vars, &batch.x_rag, false)?;
            let (t, m) = batch.answer_targets_rag();
            tape.cross_entropy(out.logits, &t, &m)
        }
        LossSpec::Negated(inner) => {
            let v = spec_on_tape(tape, vars, inner, batch)?;
            tape.neg(v)
        }
        LossSpec::Scaled(c, inner) => {
            let v = spec_on_tape(tape, vars, inner, batch)?;
            tape.scale(v, *c)
        }
    }
}

/// Loss value and flat θ-gradient.
pub fn loss_and_grad(params: &ModelParams, spec: &LossSpec, batch: &PromptBatch) -> Result<(f64, Vec<f64>)> {
    let mut live = params.clone();
    live.set_frozen(false);
    let mut tape = Tape::new();
    let vars = live.register(&mut tape)?;
    let loss = spec_on_tape(&mut tape, &vars, spec, batch)?;
    tape.backward(loss)?;
    Ok((tape.item(loss), vars.flat_grad(&tape)))
}

pub fn loss_value(params: &ModelParams, spec: &LossSpec, batch: &PromptBatch) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.clone_frozen().register(&mut tape)?;
    let loss = spec_on_tape(&mut tape, &vars, spec, batch)?;
    Ok(tape.item(loss))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Contract("cosine undefined for a zero-norm gradient".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine between the full θ-gradients of two losses.
pub fn gradient_cosine(
    params: &ModelParams,
    loss_a: &LossSpec,
    loss_b: &LossSpec,
    batch_a: &PromptBatch,
    batch_b: &PromptBatch,
) -> Result<f64> {
    let (_, ga) = loss_and_grad(params, loss_a, batch_a)?;
    let (_, gb) = loss_and_grad(params, loss_b, batch_b)?;
    cosine(&ga, &gb)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentDelta {
    pub name: String,
    pub delta: f64,
    pub grad_norm: f64,
    /// `η·δ_i·‖g_i‖·‖∇logic‖`.
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundCheckReport {
    pub eta: f64,
    /// `|L_logic(θ+Δθ) − L_logic(θ)|`.
    pub lhs: f64,
    /// First-order bound; for a composite update the sum over components.
    pub bound: f64,
    /// `|ΔL_logic − (−η⟨∇logic, g⟩)|`, the part not explained to first order.
    pub residual: f64,
    pub delta: f64,
    /// `residual / η²`.
    pub c_fit: f64,
    pub components: Vec<ComponentDelta>,
}

type LossFn<'a> = dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)> + 'a;

/// Proposition-style bound check of a step along `-η·direction` on the
/// logic loss, for each `η`.
pub fn check_step_bound(
    theta: &[f64],
    direction: &[f64],
    logic: &LossFn<'_>,
    etas: &[f64],
    components: &[(String, Vec<f64>)],
) -> Result<Vec<BoundCheckReport>> {
    if etas.iter().any(|&e| e.is_nan() || e <= 0.0) {
        return Err(Error::Contract("step sizes must be positive".into()));
    }
    let (l0, gl) = logic(theta)?;
    let delta = cosine(direction, &gl)?.abs();
    let (nd, nl) = (norm(direction), norm(&gl));
    let inner = dot(&gl, direction);
    etas.iter()
        .map(|&eta| {
            let moved: Vec<f64> = theta.iter().zip(direction).map(|(x, g)| x - eta * g).collect();
            let (l1, _) = logic(&moved)?;
            let change = l1 - l0;
            let residual = (change + eta * inner).abs();
            let comps = components
                .iter()
                .map(|(name, g)| {
                    let d = cosine(g, &gl).map(f64::abs).unwrap_or(0.0);
                    let n = norm(g);
                    ComponentDelta {
                        name: name.clone(),
                        delta: d,
                        grad_norm: n,
                        bound: eta * d * n * nl,
                    }
                })
                .collect::<Vec<_>>();
            let bound = if comps.is_empty() {
                eta * delta * nd * nl
            } else {
                comps.iter().map(|c| c.bound).sum()
            };
            Ok(BoundCheckReport {
                eta,
                lhs: change.abs(),
                bound,
                residual,
                delta,
                c_fit: residual / (eta * eta),
                components: comps,
            })
        })
        .collect()
}

/// Bound check for `Δθ = −η∇L_fact` against `L_logic`, over flat parameters.
pub fn check_prop1(theta: &[f64], fact: &LossFn<'_>, logic: &LossFn<'_>, etas: &[f64]) -> Result<Vec<BoundCheckReport>> {
    let (_, gf) = fact(theta)?;
    check_step_bound(theta, &gf, logic, etas, &[])
}

fn flat_loss<'a>(params: &'a ModelParams, spec: LossSpec, batch: &'a PromptBatch) -> Box<LossFn<'a>> {
    Box::new(move |flat: &[f64]| {
        let mut p = params.clone();
        p.set_frozen(false);
        p.set_flat(flat)?;
        loss_and_grad(&p, &spec, batch)
    })
}

/// Fact CE on `batch_fact` against RAG CE on `batch_logic` at `params`.
pub fn check_prop1_bound(
    params: &ModelParams,
    etas: &[f64],
    batch_fact: &PromptBatch,
    batch_logic: &PromptBatch,
) -> Result<Vec<BoundCheckReport>> {
    let fact = flat_loss(params, LossSpec::FactCe, batch_fact);
    let logic = flat_loss(params, LossSpec::RagCe, batch_logic);
    check_prop1(&params.flatten(), &*fact, &*logic, etas)
}

/// Composite-update version: the step is the full unlearning θ-gradient and
/// the bound is summed over its streams.
#[allow(clippy::too_many_arguments)]
pub fn check_composite_bound(
    params: &ModelParams,
    reference: &ModelParams,
    probe: &ProbeParams,
    batch: &PromptBatch,
    batch_logic: &PromptBatch,
    cfg: &TrainConfig,
    progress: f64,
    etas: &[f64],
) -> Result<Vec<BoundCheckReport>> {
    let mut live = params.clone();
    live.set_frozen(false);
    let mut comps = Vec::new();
    for c in Component::ALL {
        if let Some(g) = component_gradient(&live, reference, probe, batch, cfg, progress, c)? {
            comps.push((c.as_str().to_string(), g));
        }
    }
    if comps.is_empty() {
        return Err(Error::Contract("composite update has no active stream".into()));
    }
    let mut direction = vec![0.0; comps[0].1.len()];
    for (_, g) in &comps {
        for (d, x) in direction.iter_mut().zip(g) {
            *d += x;
        }
    }
    let logic = flat_loss(params, LossSpec::RagCe, batch_logic);
    check_step_bound(&params.flatten(), &direction, &*logic, etas, &comps)
}

pub const PROP1_HEADER: &str =
    "kind,eta,lhs,bound,residual,delta,c_fit,delta_rag,delta_probe,delta_unlikelihood,delta_kl";

pub fn prop1_csv(rows: &[(&str, BoundCheckReport)]) -> String {
    let mut s = format!("{PROP1_HEADER}\n");
    for (kind, r) in rows {
        let _ = write!(
            s,
            "{kind},{:e},{:e},{:e},{:e},{:.9},{:e}",
            r.eta, r.lhs, r.bound, r.residual, r.delta, r.c_fit
        );
        for c in Component::ALL {
            match r.components.iter().find(|d| d.name == c.as_str()) {
                Some(d) => {
                    let _ = write!(s, ",{:.9}", d.delta);
                }
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

/// Cosine between fact-CE and RAG-CE gradients over `pairs` disjoint
/// batch pairs drawn from successive shuffles. Returns `(mean, std, values)`.
pub fn cosine_protocol(
    params: &ModelParams,
    corpus: &Corpus,
    batch_size: usize,
    pairs: usize,
    seed: u64,
) -> Result<(f64, f64, Vec<f64>)> {
    let stream = crate::data::make_batches(corpus, batch_size, seed)?;
    if stream.batches_per_epoch() < 2 || pairs == 0 {
        return Err(Error::Contract(format!(
            "cosine protocol needs at least two batches per epoch and one pair, got {} and {pairs}",
            stream.batches_per_epoch()
        )));
    }
    let mut values = Vec::with_capacity(pairs);
    let mut epoch = 0;
    while values.len() < pairs {
        let batches = stream.epoch(epoch)?;
        for pair in batches.chunks(2) {
            if let [a, b] = pair {
                if values.len() < pairs {
                    values.push(gradient_cosine(params, &LossSpec::FactCe, &LossSpec::RagCe, a, b)?);
                }
            }
        }
        epoch += 1;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    Ok((mean, var.sqrt(), values))
}

/// One row of metrics.csv.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub mode: Mode,
    pub losses: LossBreakdown,
    pub zero_shot_recall: f64,
    pub rag_accuracy: f64,
    pub posthoc_probe_acc: f64,
    pub attn_entropy_h: f64,
    pub evidence_attn_weight: f64,
    pub grad_cosine_delta: f64,
}

pub const METRICS_HEADER: &str = "step,mode,l_rag,l_probe,l_unlike,l_kl,l_total,alpha,zero_shot_recall,rag_accuracy,posthoc_probe_acc,attn_entropy_H,evidence_attn_weight,grad_cosine_delta";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.6},{:.6},{:.6},{:.9},{:.9},{:.9}",
            self.step,
            self.mode,
            l.l_rag,
            l.l_probe,
            l.l_unlike,
            l.l_kl,
            l.l_total,
            l.alpha,
            self.zero_shot_recall,
            self.rag_accuracy,
            self.posthoc_probe_acc,
            self.attn_entropy_h,
            self.evidence_attn_weight,
            self.grad_cosine_delta
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let cols: Vec<&str> = line.trim().split(',').collect();
        if cols.len() != 14 {
            return Err(Error::Parse(format!("metrics row has {} columns, expected 14", cols.len())));
        }
        let f = |i: usize| -> Result<f64> {
            cols[i]
                .parse()
                .map_err(|_| Error::Parse(format!("bad metrics value {:?}", cols[i])))
        };
        Ok(Self {
            step: cols[0].parse().map_err(|_| Error::Parse("bad step".into()))?,
            mode: cols[1].parse()?,
            losses: LossBreakdown {
                l_rag: f(2)?,
                l_probe: f(3)?,
                l_unlike: f(4)?,
                l_kl: f(5)?,
                l_total: f(6)?,
                alpha: f(7)?,
                ..Default::default()
            },
            zero_shot_recall: f(8)?,
            rag_accuracy: f(9)?,
            posthoc_probe_acc: f(10)?,
            attn_entropy_h: f(11)?,
            evidence_attn_weight: f(12)?,
            grad_cosine_delta: f(13)?,
        })
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        _ => return Err(Error::Parse("metrics.csv header mismatch".into())),
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricsRecord::parse_row).collect()
}

/// Full evaluation snapshot. `adversary` carries the frozen reference and the
/// current adversarial probe of a metabolize run; the loss breakdown is then
/// evaluated on the whole fact set at `step / total` progress.
pub fn snapshot(
    params: &ModelParams,
    corpus: &Corpus,
    adversary: Option<(&ModelParams, &ProbeParams)>,
    step: usize,
    cfg: &TrainConfig,
    losses: Option<LossBreakdown>,
) -> Result<MetricsRecord> {
    let batch = all_facts(corpus)?;
    let losses = match (losses, adversary) {
        (Some(l), _) => l,
        (None, Some((reference, probe))) => {
            let total = cfg.epochs * corpus.n_facts().div_ceil(cfg.batch_size);
            let p = (step as f64 / total as f64).min(1.0);
            composite_losses(params, reference, probe, &batch, cfg, p)?
        }
        (None, None) => LossBreakdown {
            l_total: loss_value(params, &LossSpec::FactCe, &batch)?,
            ..Default::default()
        },
    };
    let layer = params.config.tap_layer;
    let attn = attention_profile(params, corpus, layer)?;
    let n = attn.len() as f64;
    let cos = match gradient_cosine(params, &LossSpec::FactCe, &LossSpec::RagCe, &batch, &batch) {
        Ok(c) => c,
        Err(Error::Contract(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok(MetricsRecord {
        step,
        mode: cfg.mode,
        losses,
        zero_shot_recall: zero_shot_recall(params, corpus)?,
        rag_accuracy: rag_accuracy(params, corpus)?,
        posthoc_probe_acc: fit_posthoc_probe(params, corpus, cfg.seed)?.accuracy,
        attn_entropy_h: attn.iter().map(|r| r.entropy).sum::<f64>() / n,
        evidence_attn_weight: attn.iter().map(|r| r.evidence_weight).sum::<f64>() / n,
        grad_cosine_delta: cos,
    })
}
