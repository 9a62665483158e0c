use super::{GradScale, Op, Tape, TensorNode, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fill value written above the diagonal by [`Tape::causal_mask`]. Finite, but
/// far enough below any real score that softmax maps it to exactly zero.
pub const MASK_FILL: f64 = -1e30;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub(crate) fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        orow.iter_mut().for_each(|o| *o /= sum);
    }
    out
}

pub(crate) fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Dimension {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok(t.dims2())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = require_2d("matmul", av)?;
        let (k2, n) = require_2d("matmul", bv)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = require_2d("transpose", self.value(x))?;
        let out = transpose_raw(self.value(x).data(), m, n);
        self.push("transpose", Tensor::new(vec![n, m], out)?, Op::Transpose(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("add", Tensor::new(shape, out)?, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", Tensor::new(shape, out)?, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, n) = require_2d("add_row", self.value(x))?;
        if self.value(row).numel() != n {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|xr| xr.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("add_row", Tensor::new(shape, out)?, Op::AddRow(x, row))
    }

    /// Multiplies every row of an `m × n` matrix elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, n) = require_2d("mul_row", self.value(x))?;
        if self.value(row).numel() != n {
            return Err(Error::Dimension {
                op: "mul_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|xr| xr.iter().zip(r).map(|(a, b)| a * b))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("mul_row", Tensor::new(shape, out)?, Op::MulRow(x, row))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", Tensor::new(shape, out)?, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2();
        let out = softmax_rows(self.value(x).data(), n);
        let shape = self.shape(x).to_vec();
        self.push("softmax", Tensor::new(shape, out)?, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2();
        let out = log_softmax_rows(self.value(x).data(), n);
        let shape = self.shape(x).to_vec();
        self.push("log_softmax", Tensor::new(shape, out)?, Op::LogSoftmax(x))
    }

    /// `x / rms(x) * gain` per row, with `rms = sqrt(mean(x^2) + eps)`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if self.value(gain).numel() != n {
            return Err(Error::Dimension {
                op: "rms_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let mut out = vec![0.0; m * n];
        let mut inv_rms = Vec::with_capacity(m);
        for (row, orow) in xv.chunks(n).zip(out.chunks_mut(n)) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..n {
                orow[j] = row[j] * inv * gv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            "rms_norm",
            Tensor::new(shape, out)?,
            Op::RmsNorm { x, gain, inv_rms },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("gelu", Tensor::new(shape, out)?, Op::Gelu(x))
    }

    /// Selects rows of a matrix; backward scatter-adds. Embedding lookup is
    /// this op applied to the embedding table.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.value(src).dims2();
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let sv = self.value(src).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    bound: m,
                });
            }
            out.extend_from_slice(&sv[i * n..(i + 1) * n]);
        }
        self.push(
            "gather_rows",
            Tensor::new(vec![idx.len(), n], out)?,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
        )
    }

    /// Replaces entries strictly above the diagonal of a square matrix with
    /// [`MASK_FILL`].
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let (m, n) = require_2d("causal_mask", self.value(x))?;
        if m != n {
            return Err(Error::Dimension {
                op: "causal_mask",
                lhs: vec![m],
                rhs: vec![n],
            });
        }
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            for j in i + 1..n {
                out[i * n + j] = MASK_FILL;
            }
        }
        self.push("causal_mask", Tensor::new(vec![m, n], out)?, Op::CausalMask(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = require_2d("slice_cols", self.value(x))?;
        if len == 0 || start + len > n {
            return Err(Error::Index {
                what: "slice_cols",
                index: start + len,
                bound: n,
            });
        }
        let xv = self.value(x).data();
        let out: Vec<f64> = (0..m)
            .flat_map(|i| xv[i * n + start..i * n + start + len].iter().copied())
            .collect();
        self.push(
            "slice_cols",
            Tensor::new(vec![m, len], out)?,
            Op::SliceCols { x, start },
        )
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let m = self.value(xs[0]).dims2().0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = require_2d("concat_cols", self.value(x))?;
            if r != m {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(xs[0]).to_vec(),
                    rhs: self.shape(x).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::new(vec![m, total], out)?,
            Op::ConcatCols(xs.to_vec()),
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = require_2d("slice_rows", self.value(x))?;
        if len == 0 || start + len > m {
            return Err(Error::Index {
                what: "slice_rows",
                index: start + len,
                bound: m,
            });
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        self.push(
            "slice_rows",
            Tensor::new(vec![len, n], out)?,
            Op::SliceRows { x, start },
        )
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let n = self.value(xs[0]).dims2().1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let (r, c) = require_2d("concat_rows", self.value(x))?;
            if c != n {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(xs[0]).to_vec(),
                    rhs: self.shape(x).to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(self.value(x).data());
        }
        self.push(
            "concat_rows",
            Tensor::new(vec![rows, n], out)?,
            Op::ConcatRows(xs.to_vec()),
        )
    }

    /// Identity forward; multiplies the upstream gradient by `-alpha` backward.
    pub fn grad_reverse(&mut self, x: Var, alpha: GradScale) -> Result<Var> {
        let value = self.value(x).clone();
        self.push(
            "grad_reverse",
            value,
            Op::GradReverse {
                x,
                alpha: alpha.alpha(),
            },
        )
    }
}

fn accum(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Propagates the adjoint `g` of node `i` into the adjoints of its parents.
pub(crate) fn backprop(
    nodes: &[TensorNode],
    i: usize,
    g: &[f64],
    adj: &mut [Option<Vec<f64>>],
) -> Result<()> {
    let node = &nodes[i];
    let val = |v: Var| &nodes[v.0].value;
    let req = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2();
            let n = val(*b).dims2().1;
            if req(*a) {
                let bt = transpose_raw(val(*b).data(), k, n);
                let ga = matmul_raw(g, &bt, m, n, k);
                let acc = accum(adj, *a, m * k);
                acc.iter_mut().zip(&ga).for_each(|(x, y)| *x += y);
            }
            if req(*b) {
                let at = transpose_raw(val(*a).data(), m, k);
                let gb = matmul_raw(&at, g, k, m, n);
                let acc = accum(adj, *b, k * n);
                acc.iter_mut().zip(&gb).for_each(|(x, y)| *x += y);
            }
        }
        Op::Transpose(x) => {
            if req(*x) {
                let (m, n) = val(*x).dims2();
                let gt = transpose_raw(g, n, m);
                let acc = accum(adj, *x, m * n);
                acc.iter_mut().zip(&gt).for_each(|(a, b)| *a += b);
            }
        }
        Op::Add(a, b) => {
            for p in [*a, *b] {
                if req(p) {
                    let acc = accum(adj, p, g.len());
                    acc.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Mul(a, b) => {
            if req(*a) {
                let bv = val(*b).data();
                let acc = accum(adj, *a, g.len());
                for k in 0..g.len() {
                    acc[k] += g[k] * bv[k];
                }
            }
            if req(*b) {
                let av = val(*a).data();
                let acc = accum(adj, *b, g.len());
                for k in 0..g.len() {
                    acc[k] += g[k] * av[k];
                }
            }
        }
        Op::AddRow(x, row) => {
            let n = val(*row).numel();
            if req(*x) {
                let acc = accum(adj, *x, g.len());
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            if req(*row) {
                let acc = accum(adj, *row, n);
                for grow in g.chunks(n) {
                    acc.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::MulRow(x, row) => {
            let n = val(*row).numel();
            let rv = val(*row).data();
            let xv = val(*x).data();
            if req(*x) {
                let acc = accum(adj, *x, g.len());
                for (k, a) in acc.iter_mut().enumerate() {
                    *a += g[k] * rv[k % n];
                }
            }
            if req(*row) {
                let acc = accum(adj, *row, n);
                for (k, gk) in g.iter().enumerate() {
                    acc[k % n] += gk * xv[k];
                }
            }
        }
        Op::Scale(x, c) => {
            if req(*x) {
                let acc = accum(adj, *x, g.len());
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b * c);
            }
        }
        Op::Sum(x) => {
            if req(*x) {
                let n = val(*x).numel();
                accum(adj, *x, n).iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::Mean(x) => {
            if req(*x) {
                let n = val(*x).numel();
                let s = g[0] / n as f64;
                accum(adj, *x, n).iter_mut().for_each(|a| *a += s);
            }
        }
        Op::Softmax(x) => {
            if req(*x) {
                let y = node.value.data();
                let n = node.value.dims2().1;
                let acc = accum(adj, *x, g.len());
                for ((yr, gr), ar) in y.chunks(n).zip(g.chunks(n)).zip(acc.chunks_mut(n)) {
                    let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        ar[j] += yr[j] * (gr[j] - dotp);
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            if req(*x) {
                let y = node.value.data();
                let n = node.value.dims2().1;
                let acc = accum(adj, *x, g.len());
                for ((yr, gr), ar) in y.chunks(n).zip(g.chunks(n)).zip(acc.chunks_mut(n)) {
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..n {
                        ar[j] += gr[j] - yr[j].exp() * gsum;
                    }
                }
            }
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let n = val(*gain).numel();
            let xv = val(*x).data();
            let gv = val(*gain).data();
            if req(*gain) {
                let acc = accum(adj, *gain, n);
                for (r, (xr, gr)) in xv.chunks(n).zip(g.chunks(n)).enumerate() {
                    for j in 0..n {
                        acc[j] += gr[j] * xr[j] * inv_rms[r];
                    }
                }
            }
            if req(*x) {
                let acc = accum(adj, *x, xv.len());
                for (r, ((xr, gr), ar)) in xv
                    .chunks(n)
                    .zip(g.chunks(n))
                    .zip(acc.chunks_mut(n))
                    .enumerate()
                {
                    let inv = inv_rms[r];
                    // d/dx of x*inv: inv*(gn - xhat * mean(gn * xhat))
                    let mut proj = 0.0;
                    for j in 0..n {
                        proj += gr[j] * gv[j] * xr[j] * inv;
                    }
                    proj /= n as f64;
                    for j in 0..n {
                        let xhat = xr[j] * inv;
                        ar[j] += inv * (gr[j] * gv[j] - xhat * proj);
                    }
                }
            }
        }
        Op::Gelu(x) => {
            if req(*x) {
                let xv = val(*x).data();
                let acc = accum(adj, *x, g.len());
                for k in 0..g.len() {
                    let v = xv[k];
                    let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                    let d = 0.5 * (1.0 + t)
                        + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                    acc[k] += g[k] * d;
                }
            }
        }
        Op::GatherRows { src, idx } => {
            if req(*src) {
                let n = val(*src).dims2().1;
                let numel = val(*src).numel();
                let acc = accum(adj, *src, numel);
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        acc[i * n + j] += g[r * n + j];
                    }
                }
            }
        }
        Op::CausalMask(x) => {
            if req(*x) {
                let (m, n) = val(*x).dims2();
                let acc = accum(adj, *x, m * n);
                for i in 0..m {
                    for j in 0..=i {
                        acc[i * n + j] += g[i * n + j];
                    }
                }
            }
        }
        Op::SliceCols { x, start } => {
            if req(*x) {
                let (m, n) = val(*x).dims2();
                let len = node.value.dims2().1;
                let acc = accum(adj, *x, m * n);
                for i in 0..m {
                    for j in 0..len {
                        acc[i * n + start + j] += g[i * len + j];
                    }
                }
            }
        }
        Op::ConcatCols(xs) => {
            let (m, total) = node.value.dims2();
            let mut offset = 0;
            for &x in xs {
                let w = val(x).dims2().1;
                if req(x) {
                    let acc = accum(adj, x, m * w);
                    for i in 0..m {
                        for j in 0..w {
                            acc[i * w + j] += g[i * total + offset + j];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::SliceRows { x, start } => {
            if req(*x) {
                let (m, n) = val(*x).dims2();
                let acc = accum(adj, *x, m * n);
                let off = start * n;
                acc[off..off + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
        }
        Op::ConcatRows(xs) => {
            let mut offset = 0;
            for &x in xs {
                let len = val(x).numel();
                if req(x) {
                    let acc = accum(adj, x, len);
                    acc.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(a, b)| *a += b);
                }
                offset += len;
            }
        }
        Op::GradReverse { x, alpha } => {
            if req(*x) {
                let acc = accum(adj, *x, g.len());
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += -alpha * b);
            }
        }
        Op::CrossEntropy {
            logits,
            probs,
            targets,
            count,
        } => {
            if req(*logits) {
                let n = val(*logits).dims2().1;
                let s = g[0] / *count as f64;
                let acc = accum(adj, *logits, probs.len());
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..n {
                        acc[r * n + j] += s * probs[r * n + j];
                    }
                    acc[r * n + t] -= s;
                }
            }
        }
        Op::KlDivergence {
            logits,
            ref_probs,
            model_probs,
            mask,
            count,
        } => {
            if req(*logits) {
                let n = val(*logits).dims2().1;
                let s = g[0] / *count as f64;
                let acc = accum(adj, *logits, model_probs.len());
                for (r, &on) in mask.iter().enumerate() {
                    if !on {
                        continue;
                    }
                    for j in 0..n {
                        acc[r * n + j] += s * (model_probs[r * n + j] - ref_probs[r * n + j]);
                    }
                }
            }
        }
    }
    Ok(())
}
