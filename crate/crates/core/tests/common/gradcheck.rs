//! Central finite-difference oracle for tape gradients.
//!
//! Shared between unit tests (via `#[path]`) and the integration suites, so it
//! only touches the crate's public API.

#![allow(dead_code)]

use rlcp::autodiff::{Tape, Var};
use rlcp::error::Result;
use rlcp::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a floor on the denominator so that gradients which are
/// numerically zero are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn eval<F>(build: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    Ok(tape.item(out))
}

pub fn analytic<F>(build: &F, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    Ok(vars.iter().map(|&v| tape.grad_or_zeros(v)).collect())
}

pub fn numeric<F>(build: &F, inputs: &[Tensor], step: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = vec![0.0; inputs[k].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= step;
            *gj = (eval(build, &plus)? - eval(build, &minus)?) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Largest elementwise relative error between analytic and central-difference
/// gradients over every input.
pub fn max_rel_error<F>(build: F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let a = analytic(&build, inputs)?;
    let n = numeric(&build, inputs, FD_STEP)?;
    Ok(a.iter()
        .flatten()
        .zip(n.iter().flatten())
        .map(|(x, y)| rel_err(*x, *y))
        .fold(0.0, f64::max))
}

/// Deterministic pseudo-random tensor (splitmix64) with entries in `[-scale, scale)`.
pub fn random_tensor(shape: Vec<usize>, seed: u64, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
    let data = (0..n)
        .map(|_| {
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            ((z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) * scale
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}
