//! Pre-norm decoder-only transformer with a tap layer.
//!
//! Each block is `h = x + Attn(RmsNorm(x)); y = h + Mlp(RmsNorm(h))` with
//! learned absolute position embeddings. The tap layer's block output (the
//! residual stream after the block) is exposed for probing, and post-softmax
//! attention weights can be captured for every layer and head.

use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::rng;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// 1-based index of the block whose output feeds the probe.
    pub tap_layer: usize,
    pub tied_head: bool,
}

impl ModelConfig {
    /// Desk-scale default: six blocks, tap at block four.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 32,
            n_layers: 6,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 24,
            tap_layer: 4,
            tied_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.tap_layer < 1 || self.tap_layer > self.n_layers {
            return Err(Error::Config(format!(
                "tap_layer {} outside 1..={}",
                self.tap_layer, self.n_layers
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn param_count(&self) -> usize {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        let per_layer = 2 * d + 4 * d * d + 2 * d * f;
        let head = if self.tied_head { 0 } else { d * v };
        v * d + self.max_seq_len * d + self.n_layers * per_layer + d + head
    }

    pub fn to_kv(&self, kv: &mut KvMap) {
        kv.set("vocab_size", self.vocab_size);
        kv.set("d_model", self.d_model);
        kv.set("n_layers", self.n_layers);
        kv.set("n_heads", self.n_heads);
        kv.set("d_ff", self.d_ff);
        kv.set("max_seq_len", self.max_seq_len);
        kv.set("tap_layer", self.tap_layer);
        kv.set("tied_head", self.tied_head);
    }

    /// Reads model keys, falling back to `base` for any that are absent.
    pub fn from_kv(kv: &KvMap, base: &ModelConfig) -> Result<Self> {
        let cfg = Self {
            vocab_size: kv.get_or("vocab_size", base.vocab_size)?,
            d_model: kv.get_or("d_model", base.d_model)?,
            n_layers: kv.get_or("n_layers", base.n_layers)?,
            n_heads: kv.get_or("n_heads", base.n_heads)?,
            d_ff: kv.get_or("d_ff", base.d_ff)?,
            max_seq_len: kv.get_or("max_seq_len", base.max_seq_len)?,
            tap_layer: kv.get_or("tap_layer", base.tap_layer)?,
            tied_head: kv.get_or("tied_head", base.tied_head)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_in: Tensor,
    pub w_out: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: Tensor,
    /// Output projection `[d_model × vocab]`; `None` when tied to `tok_emb`.
    pub head: Option<Tensor>,
    frozen: bool,
}

fn normal(shape: Vec<usize>, rng: &mut impl rand::Rng) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).expect("valid normal");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).expect("non-empty")
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "init");
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let tok_emb = normal(vec![v, d], &mut rng);
        let pos_emb = normal(vec![config.max_seq_len, d], &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: ones(d),
                wq: normal(vec![d, d], &mut rng),
                wk: normal(vec![d, d], &mut rng),
                wv: normal(vec![d, d], &mut rng),
                wo: normal(vec![d, d], &mut rng),
                mlp_norm: ones(d),
                w_in: normal(vec![d, f], &mut rng),
                w_out: normal(vec![f, d], &mut rng),
            })
            .collect();
        let head = (!config.tied_head).then(|| normal(vec![d, v], &mut rng));
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_norm: ones(d),
            head,
            frozen: false,
        })
    }

    /// Deep copy that refuses gradient registration and optimizer updates.
    pub fn clone_frozen(&self) -> Self {
        let mut copy = self.clone();
        copy.frozen = true;
        copy
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Parameter tensors in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.attn_norm"), &l.attn_norm));
            out.push((format!("layer{i}.wq"), &l.wq));
            out.push((format!("layer{i}.wk"), &l.wk));
            out.push((format!("layer{i}.wv"), &l.wv));
            out.push((format!("layer{i}.wo"), &l.wo));
            out.push((format!("layer{i}.mlp_norm"), &l.mlp_norm));
            out.push((format!("layer{i}.w_in"), &l.w_in));
            out.push((format!("layer{i}.w_out"), &l.w_out));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        if let Some(h) = &self.head {
            out.push(("head".to_string(), h));
        }
        out
    }

    /// Mutable tensors in the order of [`named_tensors`](Self::named_tensors).
    /// Fails on a frozen copy.
    pub fn tensors_mut(&mut self) -> Result<Vec<&mut Tensor>> {
        if self.frozen {
            return Err(Error::Contract("attempt to mutate frozen parameters".into()));
        }
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.mlp_norm,
                &mut l.w_in,
                &mut l.w_out,
            ]);
        }
        out.push(&mut self.final_norm);
        if let Some(h) = &mut self.head {
            out.push(h);
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.named_tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension {
                op: "set_flat",
                lhs: vec![self.param_count()],
                rhs: vec![flat.len()],
            });
        }
        let mut offset = 0;
        for t in self.tensors_mut()? {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// SHA-256 over the raw little-endian bytes of every parameter.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.named_tensors() {
            hasher.update(name.as_bytes());
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub(crate) fn from_parts(config: ModelConfig, tensors: Vec<(String, Tensor)>, frozen: bool) -> Result<Self> {
        let mut params = Self::init(&config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != tensors.len() {
            return Err(Error::Parse(format!(
                "checkpoint has {} tensors, config implies {}",
                tensors.len(),
                expected.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&tensors) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Parse(format!(
                    "checkpoint tensor {got_name} {:?} does not match {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        for (slot, (_, t)) in params.tensors_mut()?.into_iter().zip(tensors) {
            *slot = t;
        }
        params.frozen = frozen;
        Ok(params)
    }

    /// Records every parameter as a tape leaf. Frozen parameters do not
    /// require gradients.
    pub fn register(&self, tape: &mut Tape) -> Result<ParamVars> {
        let rg = !self.frozen;
        let tok_emb = tape.leaf(self.tok_emb.clone(), rg)?;
        let pos_emb = tape.leaf(self.pos_emb.clone(), rg)?;
        let mut all = vec![tok_emb, pos_emb];
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let lv = LayerVars {
                attn_norm: tape.leaf(l.attn_norm.clone(), rg)?,
                wq: tape.leaf(l.wq.clone(), rg)?,
                wk: tape.leaf(l.wk.clone(), rg)?,
                wv: tape.leaf(l.wv.clone(), rg)?,
                wo: tape.leaf(l.wo.clone(), rg)?,
                mlp_norm: tape.leaf(l.mlp_norm.clone(), rg)?,
                w_in: tape.leaf(l.w_in.clone(), rg)?,
                w_out: tape.leaf(l.w_out.clone(), rg)?,
            };
            all.extend([
                lv.attn_norm, lv.wq, lv.wk, lv.wv, lv.wo, lv.mlp_norm, lv.w_in, lv.w_out,
            ]);
            layers.push(lv);
        }
        let final_norm = tape.leaf(self.final_norm.clone(), rg)?;
        all.push(final_norm);
        let head = match &self.head {
            Some(h) => {
                let v = tape.leaf(h.clone(), rg)?;
                all.push(v);
                HeadVar::Untied(v)
            }
            None => HeadVar::Tied,
        };
        Ok(ParamVars {
            config: self.config.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            head,
            all,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    attn_norm: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    mlp_norm: Var,
    w_in: Var,
    w_out: Var,
}

#[derive(Clone, Copy, Debug)]
enum HeadVar {
    Tied,
    Untied(Var),
}

/// Tape handles for one registration of [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    config: ModelConfig,
    tok_emb: Var,
    pos_emb: Var,
    layers: Vec<LayerVars>,
    final_norm: Var,
    head: HeadVar,
    all: Vec<Var>,
}

impl ParamVars {
    /// Leaves in the order of [`ModelParams::named_tensors`].
    pub fn all(&self) -> &[Var] {
        &self.all
    }

    /// Flattened gradient in canonical order.
    pub fn flat_grad(&self, tape: &Tape) -> Vec<f64> {
        self.all.iter().flat_map(|&v| tape.grad_or_zeros(v)).collect()
    }

    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.all.iter().map(|&v| tape.grad_or_zeros(v)).collect()
    }
}

/// Outputs of a batched forward on a tape. Rows are `batch × seq_len`,
/// sequence-major.
#[derive(Clone, Debug)]
pub struct TapeForward {
    pub logits: Var,
    pub tap_hidden: Var,
    pub batch: usize,
    pub seq_len: usize,
    /// Post-softmax attention, indexed `[layer][head][sequence]`.
    pub attention: Option<Vec<Vec<Vec<Var>>>>,
}

fn check_tokens(cfg: &ModelConfig, batch: &[Vec<usize>]) -> Result<usize> {
    let t = batch
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    if t == 0 {
        return Err(Error::Contract("empty sequence".into()));
    }
    for seq in batch {
        if seq.len() != t {
            return Err(Error::Contract("batch rows must be padded to equal length".into()));
        }
        if seq.len() > cfg.max_seq_len {
            return Err(Error::Length {
                len: seq.len(),
                max: cfg.max_seq_len,
            });
        }
        if let Some(&bad) = seq.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::Index {
                what: "token id",
                index: bad,
                bound: cfg.vocab_size,
            });
        }
    }
    Ok(t)
}

/// Causal forward of a batch of equal-length sequences.
pub fn forward_tape(
    tape: &mut Tape,
    vars: &ParamVars,
    batch: &[Vec<usize>],
    capture: bool,
) -> Result<TapeForward> {
    let cfg = &vars.config;
    let t = check_tokens(cfg, batch)?;
    let b = batch.len();
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let flat_tokens: Vec<usize> = batch.iter().flatten().copied().collect();
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
    let tok = tape.gather_rows(vars.tok_emb, &flat_tokens)?;
    let pos = tape.gather_rows(vars.pos_emb, &positions)?;
    let mut x = tape.add(tok, pos)?;

    let mut attention = capture.then(Vec::new);
    let mut tap_hidden = None;
    for (li, lv) in vars.layers.iter().enumerate() {
        let xn = tape.rms_norm(x, lv.attn_norm, NORM_EPS)?;
        let q = tape.matmul(xn, lv.wq)?;
        let k = tape.matmul(xn, lv.wk)?;
        let v = tape.matmul(xn, lv.wv)?;
        let mut layer_maps = vec![Vec::with_capacity(b); cfg.n_heads];
        let mut seq_outs = Vec::with_capacity(b);
        for s in 0..b {
            let qs = tape.slice_rows(q, s * t, t)?;
            let ks = tape.slice_rows(k, s * t, t)?;
            let vs = tape.slice_rows(v, s * t, t)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for (h, maps) in layer_maps.iter_mut().enumerate() {
                let qh = tape.slice_cols(qs, h * dh, dh)?;
                let kh = tape.slice_cols(ks, h * dh, dh)?;
                let vh = tape.slice_cols(vs, h * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, scale)?;
                let masked = tape.causal_mask(scores)?;
                let attn = tape.softmax(masked)?;
                maps.push(attn);
                heads.push(tape.matmul(attn, vh)?);
            }
            seq_outs.push(tape.concat_cols(&heads)?);
        }
        let mixed = tape.concat_rows(&seq_outs)?;
        let proj = tape.matmul(mixed, lv.wo)?;
        let h = tape.add(x, proj)?;

        let hn = tape.rms_norm(h, lv.mlp_norm, NORM_EPS)?;
        let up = tape.matmul(hn, lv.w_in)?;
        let act = tape.gelu(up)?;
        let down = tape.matmul(act, lv.w_out)?;
        x = tape.add(h, down)?;

        if li + 1 == cfg.tap_layer {
            tap_hidden = Some(x);
        }
        if let Some(a) = attention.as_mut() {
            a.push(layer_maps);
        }
    }
    let xf = tape.rms_norm(x, vars.final_norm, NORM_EPS)?;
    let head = match vars.head {
        HeadVar::Untied(h) => h,
        HeadVar::Tied => tape.transpose(vars.tok_emb)?,
    };
    let logits = tape.matmul(xf, head)?;
    Ok(TapeForward {
        logits,
        tap_hidden: tap_hidden.expect("tap_layer validated"),
        batch: b,
        seq_len: t,
        attention,
    })
}

/// Plain-value forward results for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `[T × vocab]`.
    pub logits: Tensor,
    /// `[T × d_model]`, block output of the tap layer. Empty unless captured.
    pub tap_hidden: Option<Tensor>,
    /// `[layer][head]` of `[T × T]` post-softmax weights. Empty unless captured.
    pub attention: Option<Vec<Vec<Tensor>>>,
}

impl ForwardTrace {
    pub fn attention_row(&self, layer: usize, head: usize, row: usize) -> Option<&[f64]> {
        self.attention.as_ref().map(|a| a[layer][head].row(row))
    }
}

/// Evaluation forward over equal-length sequences; nothing is differentiated.
pub fn forward_batch(params: &ModelParams, batch: &[Vec<usize>], capture: bool) -> Result<Vec<ForwardTrace>> {
    let mut tape = Tape::new();
    let frozen = params.clone_frozen();
    let vars = frozen.register(&mut tape)?;
    let out = forward_tape(&mut tape, &vars, batch, capture)?;
    let (t, v, d) = (out.seq_len, params.config.vocab_size, params.config.d_model);
    let logits = tape.value(out.logits).data();
    let hidden = tape.value(out.tap_hidden).data();
    let mut traces = Vec::with_capacity(out.batch);
    for s in 0..out.batch {
        let attention = out.attention.as_ref().map(|layers| {
            layers
                .iter()
                .map(|heads| heads.iter().map(|maps| tape.value(maps[s]).clone()).collect())
                .collect()
        });
        traces.push(ForwardTrace {
            logits: Tensor::new(vec![t, v], logits[s * t * v..(s + 1) * t * v].to_vec())?,
            tap_hidden: capture
                .then(|| Tensor::new(vec![t, d], hidden[s * t * d..(s + 1) * t * d].to_vec()))
                .transpose()?,
            attention,
        });
    }
    Ok(traces)
}

pub fn forward(params: &ModelParams, tokens: &[usize], capture: bool) -> Result<ForwardTrace> {
    Ok(forward_batch(params, &[tokens.to_vec()], capture)?.remove(0))
}
