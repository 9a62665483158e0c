use super::ops::{log_softmax_rows, softmax_rows};
use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl Tape {
    /// Mean over unmasked rows of `-log softmax(logits_t)[target_t]`.
    ///
    /// `targets` and `mask` have one entry per row of `logits`; targets at
    /// masked rows are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, vocab) = self.value(logits).dims2();
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let mut picked = Vec::with_capacity(rows);
        for (&t, &on) in targets.iter().zip(mask) {
            if !on {
                picked.push(None);
                continue;
            }
            if t >= vocab {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    bound: vocab,
                });
            }
            picked.push(Some(t));
        }
        let count = picked.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::EmptyLoss("cross_entropy"));
        }
        let lv = self.value(logits).data();
        let logp = log_softmax_rows(lv, vocab);
        let loss = picked
            .iter()
            .enumerate()
            .filter_map(|(r, t)| t.map(|t| -logp[r * vocab + t]))
            .sum::<f64>()
            / count as f64;
        let probs = logp.iter().map(|v| v.exp()).collect();
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets: picked,
                count,
            },
        )
    }

    /// Forward KL `KL(p_ref || p_model)` averaged over unmasked rows.
    ///
    /// `ref_logits` is read as a constant: no gradient ever reaches it.
    pub fn kl_divergence(&mut self, ref_logits: Var, model_logits: Var, mask: &[bool]) -> Result<Var> {
        let rv = self.value(ref_logits);
        let mv = self.value(model_logits);
        if rv.shape() != mv.shape() {
            return Err(Error::Dimension {
                op: "kl_divergence",
                lhs: rv.shape().to_vec(),
                rhs: mv.shape().to_vec(),
            });
        }
        let (rows, vocab) = mv.dims2();
        if mask.len() != rows {
            return Err(Error::Dimension {
                op: "kl_divergence",
                lhs: mv.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLoss("kl_divergence"));
        }
        let ref_logp = log_softmax_rows(rv.data(), vocab);
        let model_logp = log_softmax_rows(mv.data(), vocab);
        let mut total = 0.0;
        for (r, &on) in mask.iter().enumerate() {
            if !on {
                continue;
            }
            for j in r * vocab..(r + 1) * vocab {
                let p = ref_logp[j].exp();
                if p > 0.0 {
                    total += p * (ref_logp[j] - model_logp[j]);
                }
            }
        }
        let ref_probs = softmax_rows(rv.data(), vocab);
        let model_probs = model_logp.iter().map(|v| v.exp()).collect();
        self.push(
            "kl_divergence",
            Tensor::scalar(total / count as f64),
            Op::KlDivergence {
                logits: model_logits,
                ref_probs,
                model_probs,
                mask: mask.to_vec(),
                count,
            },
        )
    }
}
