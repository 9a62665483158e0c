//! Linear probes over tap-layer hidden states.

use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::data::{Corpus, PromptBatch};
use crate::error::{Error, Result};
use crate::model::{forward_batch, ModelParams};
use crate::optim::Adam;
use crate::rng;
use crate::tensor::{argmax, Tensor};

pub const POSTHOC_STEPS: usize = 500;
pub const POSTHOC_LR: f64 = 1e-2;
const INIT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeParams {
    /// `[d_model × n_classes]`.
    pub weight: Tensor,
    /// `[n_classes]`.
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct ProbeVars {
    pub weight: Var,
    pub bias: Var,
}

impl ProbeParams {
    pub fn zeros(d_model: usize, n_classes: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![d_model, n_classes]),
            bias: Tensor::zeros(vec![n_classes]),
        }
    }

    /// Small seeded normal weights, zero bias.
    pub fn init(d_model: usize, n_classes: usize, seed: u64, label: &str) -> Self {
        let mut rng = rng::stream(seed, label);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let data = (0..d_model * n_classes).map(|_| normal.sample(&mut rng)).collect();
        Self {
            weight: Tensor::new(vec![d_model, n_classes], data).expect("shape matches"),
            bias: Tensor::zeros(vec![n_classes]),
        }
    }

    pub fn d_model(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn n_classes(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn register(&self, tape: &mut Tape) -> Result<ProbeVars> {
        Ok(ProbeVars {
            weight: tape.leaf(self.weight.clone(), true)?,
            bias: tape.leaf(self.bias.clone(), true)?,
        })
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn sizes(&self) -> [usize; 2] {
        [self.weight.numel(), self.bias.numel()]
    }

    /// Class logits for one hidden vector.
    pub fn logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        let (d, c) = self.weight.dims2();
        if h.len() != d {
            return Err(Error::Dimension {
                op: "probe",
                lhs: vec![h.len()],
                rhs: vec![d, c],
            });
        }
        let w = self.weight.data();
        Ok((0..c)
            .map(|j| self.bias.data()[j] + (0..d).map(|i| h[i] * w[i * c + j]).sum::<f64>())
            .collect())
    }

    pub fn predict(&self, h: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(h)?))
    }

    /// Fraction of rows of `hidden` classified as `labels`.
    pub fn accuracy(&self, hidden: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        let mut correct = 0;
        for (h, &y) in hidden.iter().zip(labels) {
            if self.predict(h)? == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / labels.len() as f64)
    }
}

impl ProbeParams {
    /// `d_model n_classes` on the first line, then weight rows, then the bias.
    pub fn to_text(&self) -> String {
        let (d, c) = self.weight.dims2();
        let mut s = format!("{d} {c}\n");
        for row in self.weight.data().chunks(c) {
            s.push_str(&join(row));
        }
        s.push_str(&join(self.bias.data()));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Parse(format!("probe text: {m}"));
        let mut lines = text.lines();
        let dims: Vec<usize> = lines
            .next()
            .ok_or_else(|| bad("empty"))?
            .split_whitespace()
            .map(|x| x.parse().map_err(|_| bad("dimension line")))
            .collect::<Result<_>>()?;
        let [d, c] = dims[..] else { return Err(bad("dimension line")) };
        let values: Vec<f64> = lines
            .flat_map(str::split_whitespace)
            .map(|x| x.parse().map_err(|_| bad(&format!("value {x:?}"))))
            .collect::<Result<_>>()?;
        if values.len() != d * c + c {
            return Err(bad(&format!("expected {} values, found {}", d * c + c, values.len())));
        }
        Ok(Self {
            weight: Tensor::new(vec![d, c], values[..d * c].to_vec())?,
            bias: Tensor::new(vec![c], values[d * c..].to_vec())?,
        })
    }
}

fn join(xs: &[f64]) -> String {
    let mut s = xs.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
    s.push('\n');
    s
}

/// Affine probe on the tape: `h [N × d] → [N × n_classes]`.
pub fn probe_forward(tape: &mut Tape, probe: ProbeVars, h: Var) -> Result<Var> {
    let z = tape.matmul(h, probe.weight)?;
    tape.add_row(z, probe.bias)
}

/// Tap-layer state at the final `x_no` position of every fact, in fact order.
pub fn probe_features(params: &ModelParams, corpus: &Corpus) -> Result<Vec<Vec<f64>>> {
    let ids: Vec<usize> = (0..corpus.n_facts()).collect();
    let batch = PromptBatch::build(corpus, &ids, None)?;
    let traces = forward_batch(params, &batch.x_no, true)?;
    Ok(traces
        .iter()
        .enumerate()
        .map(|(r, t)| {
            t.tap_hidden
                .as_ref()
                .expect("captured")
                .row(batch.answer_position_no(r))
                .to_vec()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosthocProbe {
    pub probe: ProbeParams,
    /// Held-in accuracy at the end of training.
    pub accuracy: f64,
    pub best_accuracy: f64,
    pub final_loss: f64,
    /// Loss decreased by less than 1e-6 over the last 50 steps.
    pub converged: bool,
    pub loss_trace: Vec<f64>,
}

/// Trains a fresh linear probe by full-batch Adam on fixed features.
pub fn fit_probe(
    features: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    seed: u64,
    steps: usize,
    lr: f64,
) -> Result<PosthocProbe> {
    let d = features
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Contract("no probe features".into()))?;
    let x = Tensor::new(
        vec![features.len(), d],
        features.iter().flatten().copied().collect(),
    )?;
    let mut probe = ProbeParams::init(d, n_classes, seed, "posthoc-probe");
    let mut opt = Adam::new(lr, &probe.sizes());
    let mask = vec![true; labels.len()];
    let mut trace = Vec::with_capacity(steps);
    let mut best = probe.accuracy(features, labels)?;
    for _ in 0..steps {
        let mut tape = Tape::new();
        let pv = probe.register(&mut tape)?;
        let h = tape.constant(x.clone())?;
        let logits = probe_forward(&mut tape, pv, h)?;
        let loss = tape.cross_entropy(logits, labels, &mask)?;
        tape.backward(loss)?;
        trace.push(tape.item(loss));
        let grads = vec![tape.grad_or_zeros(pv.weight), tape.grad_or_zeros(pv.bias)];
        opt.step(probe.tensors_mut(), &grads)?;
        best = best.max(probe.accuracy(features, labels)?);
    }
    let accuracy = probe.accuracy(features, labels)?;
    let final_loss = trace.last().copied().unwrap_or(f64::NAN);
    let converged = trace.len() > 50 && trace[trace.len() - 51] - final_loss < 1e-6;
    Ok(PosthocProbe {
        probe,
        accuracy,
        best_accuracy: best,
        final_loss,
        converged,
        loss_trace: trace,
    })
}

/// Fresh probe on the frozen checkpoint's tap states; labels are the facts'
/// probe classes.
pub fn fit_posthoc_probe(params: &ModelParams, corpus: &Corpus, seed: u64) -> Result<PosthocProbe> {
    let features = probe_features(params, corpus)?;
    let labels: Vec<usize> = corpus.facts.iter().map(|f| f.probe_class).collect();
    fit_probe(&features, &labels, corpus.n_facts(), seed, POSTHOC_STEPS, POSTHOC_LR)
}
