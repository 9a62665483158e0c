//! One finite-difference case per autodiff primitive. `grad_reverse` is
//! absent here: its backward is not the derivative of its forward
//! and is checked against the paired-graph law instead.

#![allow(dead_code)]

use super::gradcheck::random_tensor;
use rlcp::autodiff::{Tape, Var};
use rlcp::error::Result;
use rlcp::tensor::Tensor;

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub build: Build,
    pub inputs: Vec<Tensor>,
}

/// Contracts a non-scalar output against fixed random weights so every output
/// entry contributes a distinct coefficient to the scalar.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = random_tensor(tape.shape(out).to_vec(), seed ^ 0xABCD, 1.0);
    let w = tape.constant(w)?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

pub fn cases(seed: u64) -> Vec<Case> {
    let r = |shape: Vec<usize>, k: u64| random_tensor(shape, seed * 131 + k, 1.0);
    let mut out: Vec<Case> = Vec::new();

    out.push(Case {
        name: "matmul",
        build: Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, seed)
        }),
        inputs: vec![r(vec![3, 4], 1), r(vec![4, 2], 2)],
    });
    out.push(Case {
        name: "transpose",
        build: Box::new(move |t, v| {
            let y = t.transpose(v[0])?;
            project(t, y, seed)
        }),
        inputs: vec![r(vec![3, 5], 3)],
    });
    out.push(Case {
        name: "add",
        build: Box::new(move |t, v| {
            let y = t.add(v[0], v[1])?;
            let y = t.mul(y, y)?;
            project(t, y, seed)
        }),
        inputs: vec![r(vec![2, 3], 4), r(vec![2, 3], 5)],
    });
    out.push(Case {
        name: "mul",
        build: Box::new(move |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, seed)
        }),
        inputs: vec![r(vec![3, 3], 6), r(vec![3, 3], 7)],
    });
    out.push(Case {
        name: "add_row",
        build: Box::new(move |t, v| {
            let y = t.add_row(v[0], v[1])?;
            let y = t.mul(y, y)?;
            project(t, y, seed)
        }),
        inputs: vec![r(vec![4, 3], 8), r(vec![3], 9)],
    });
    out.push(Case {
        name: "mul_row",
        build: Box::new(move |t, v| {
            let y = t.mul_row(v[0], v[1])?;
            project(t, y, seed)
        }),
        inputs: vec![r(vec![4, 3], 10), r(vec![3], 11)],
    });
    out.push(Case {
        name: "scale",
        build: Box::new(move |t, v| {
            let y = t.scale(v[0], -1.7)?;
            let y = t.mul(y, v[0])?;
            project(t, y, seed)
        }),
        inputs: vec![r(vec![2, 4], 12)],
    });
    out.push(Case {
        name: "mean",
        build: Box::new(move |t, v| {
            let y = t.mul(v[0], v[0])?;
            t.mean(y)
        }),
        inputs: vec![r(vec![3, 4], 13)],
    });
    out.push(Case {
        name: "softmax",
        build: Box::new(move |t, v| {
            let y = t.softmax(v[0])?;
            project(t, y, seed)
        }),
        inputs: vec![r(vec![3, 5], 14)],
    });
    out.push(Case {
        name: "log_softmax",
        build: Box::new(move |t, v| {
            let y = t.log_softmax(v[0])?;
            project(t, y, seed)
        }),
        inputs: vec![r(vec![3, 5], 15)],
    });
    out.push(Case {
        name: "rms_norm",
        build: Box::new(move |t, v| {
            let y = t.rms_norm(v[0], v[1], 1e-6)?;
            project(t, y, seed)
        }),
        inputs: vec![r(vec![3, 6], 16), r(vec![6], 17)],
    });
    out.push(Case {
        name: "gelu",
        build: Box::new(move |t, v| {
            let y = t.gelu(v[0])?;
            project(t, y, seed)
        }),
        inputs: vec![random_tensor(vec![4, 4], seed * 131 + 18, 3.0)],
    });
    out.push(Case {
        name: "gather_rows",
        build: Box::new(move |t, v| {
            let y = t.gather_rows(v[0], &[2, 0, 2, 3])?;
            let y = t.mul(y, y)?;
            project(t, y, seed)
        }),
        inputs: vec![r(vec![5, 3], 19)],
    });
    out.push(Case {
        name: "causal_mask",
        build: Box::new(move |t, v| {
            let y = t.causal_mask(v[0])?;
            let y = t.softmax(y)?;
            project(t, y, seed)
        }),
        inputs: vec![r(vec![4, 4], 20)],
    });
    out.push(Case {
        name: "slice_concat",
        build: Box::new(move |t, v| {
            let a = t.slice_cols(v[0], 1, 2)?;
            let b = t.slice_rows(v[0], 1, 2)?;
            let bt = t.transpose(b)?;
            let c = t.concat_cols(&[a, bt])?;
            let d = t.concat_rows(&[c, c])?;
            let d = t.mul(d, d)?;
            project(t, d, seed)
        }),
        inputs: vec![r(vec![4, 4], 21)],
    });
    out.push(Case {
        name: "cross_entropy",
        build: Box::new(move |t, v| {
            t.cross_entropy(v[0], &[1, 0, 6, 3], &[true, true, false, true])
        }),
        inputs: vec![random_tensor(vec![4, 7], seed * 131 + 23, 2.0)],
    });
    out.push(Case {
        name: "kl_divergence",
        build: Box::new(move |t, v| {
            let reference = t.constant(random_tensor(vec![3, 5], seed * 131 + 24, 2.0))?;
            t.kl_divergence(reference, v[0], &[true, false, true])
        }),
        inputs: vec![random_tensor(vec![3, 5], seed * 131 + 25, 2.0)],
    });
    out
}
