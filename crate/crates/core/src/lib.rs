//! Adversarial unlearning of targeted factual associations in a tiny
//! decoder-only transformer, with the diagnostics used to evaluate it.

extern crate self as rlcp;

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod probe;
pub mod rng;
pub mod run;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
#[path = "../tests/common/mod.rs"]
pub(crate) mod test_support;
