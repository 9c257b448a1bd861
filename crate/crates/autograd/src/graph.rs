//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every value computed during one forward pass. Nodes are
//! appended in evaluation order, so reverse index order is a valid
//! topological order for backprop.

use crate::error::TensorError;
use crate::kernels::{gemm, Layout};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous run of rows that forms one sequence in a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

pub const LAYER_NORM_EPS: f32 = 1e-5;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    MaskMul(Var, Vec<f32>),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Log(Var),
    /// Row softmax; covers both dense and top-k-restricted rows because
    /// dropped entries have zero output and therefore zero gradient.
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        rows: Vec<usize>,
    },
    Pick {
        x: Var,
        coords: Vec<(usize, usize)>,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    SumRows(Var),
    SumAll(Var),
    MeanAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    CvSquared(Var),
    Attention(Box<AttentionCache>),
}

struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    segments: Vec<Segment>,
    heads: usize,
    key_mask: Vec<bool>,
    /// Per (segment, head): `len * len` row-major probabilities.
    probs: Vec<Vec<f32>>,
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

fn mat(rows: usize, cols: usize, data: Vec<f32>) -> Tensor {
    Tensor::new(vec![rows, cols], data).expect("internal shape")
}

fn gelu_parts(x: f32) -> (f32, f32) {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    const A: f32 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f32 {
        let t = &self.nodes[v.0].value;
        assert_eq!(t.numel(), 1, "item() on non-scalar {:?}", t.shape());
        t.data()[0]
    }

    /// Accumulated gradient, if backward has written one.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Accumulated gradient as a tensor; zeros when nothing was written.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        let data = self.nodes[v.0]
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; value.numel()]);
        Tensor::new(value.shape().to_vec(), data).expect("grad shape")
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- forward primitives -------------------------------------------

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            (m, k, n),
            ta.data(),
            Layout::row_major(k),
            tb.data(),
            Layout::row_major(n),
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(mat(m, n, out), Op::MatMul(a, b), rg))
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        if tb.cols() != k {
            return Err(mismatch("matmul_t", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            (m, k, n),
            ta.data(),
            Layout::row_major(k),
            tb.data(),
            Layout::transposed(k),
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(mat(m, n, out), Op::MatMulT(a, b), rg))
    }

    /// Affine map `x[n,in] · w[out,in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, k, out) = (tx.rows(), tx.cols(), tw.rows());
        if tw.cols() != k {
            return Err(mismatch("linear", tx, tw));
        }
        let mut y = vec![0.0; n * out];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.numel() != out {
                return Err(mismatch("linear(bias)", tw, tb));
            }
            for row in y.chunks_exact_mut(out) {
                row.copy_from_slice(tb.data());
            }
        }
        let tx = self.value(x);
        let tw = self.value(w);
        gemm(
            (n, k, out),
            tx.data(),
            Layout::row_major(k),
            tw.data(),
            Layout::transposed(k),
            &mut y,
            if b.is_some() { 1.0 } else { 0.0 },
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(mat(n, out, y), Op::Linear { x, w, b }, rg))
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Elementwise product with a constant mask (no gradient to the mask).
    pub fn mask_mul(&mut self, a: Var, mask: Vec<f32>) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if mask.len() != ta.numel() {
            return Err(invalid(
                "mask_mul",
                format!("mask has {} values for shape {:?}", mask.len(), ta.shape()),
            ));
        }
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::MaskMul(a, mask), rg))
    }

    /// Inverted dropout: zero each entry with probability `p`, scale
    /// survivors by `1/(1-p)`. Identity when `p == 0`.
    pub fn dropout(
        &mut self,
        a: Var,
        p: f32,
        rng: &mut impl rand::Rng,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid("dropout", format!("rate {p} outside [0,1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(a).numel();
        let mask = (0..n)
            .map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep })
            .collect();
        self.mask_mul(a, mask)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, |x| gelu_parts(x).0, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln(1 + e^x)`, stable for large `|x|`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f32::ln, Op::Log(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = ta.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push(mat(r, c, out), Op::Softmax(a), rg)
    }

    /// Row softmax restricted to `keep[row]` columns; every other entry is
    /// exactly zero.
    pub fn sparse_softmax_rows(&mut self, a: Var, keep: &[Vec<usize>]) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if keep.len() != r {
            return Err(invalid(
                "sparse_softmax_rows",
                format!("{} keep lists for {r} rows", keep.len()),
            ));
        }
        let mut out = vec![0.0; r * c];
        for (i, cols) in keep.iter().enumerate() {
            if cols.is_empty() || cols.iter().any(|&j| j >= c) {
                return Err(invalid("sparse_softmax_rows", format!("bad columns {cols:?}")));
            }
            let row = ta.row_slice(i);
            let mut vals: Vec<f32> = cols.iter().map(|&j| row[j]).collect();
            softmax_in_place(&mut vals);
            for (&j, v) in cols.iter().zip(vals) {
                out[i * c + j] = v;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(mat(r, c, out), Op::Softmax(a), rg))
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (r, c) = (tx.rows(), tx.cols());
        if tg.numel() != c || tb.numel() != c {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = tx.row_slice(i);
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            mat(r, c, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Rows of `table[V,d]` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tt = self.value(table);
        let (v, d) = (tt.rows(), tt.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(invalid("embedding", format!("id {bad} outside table of {v} rows")));
        }
        if ids.is_empty() {
            return Err(invalid("embedding", "empty id list"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tt.row_slice(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            mat(ids.len(), d, out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (r, d) = (tx.rows(), tx.cols());
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return Err(invalid("gather_rows", format!("rows {rows:?} for {r}-row input")));
        }
        let mut out = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            out.extend_from_slice(tx.row_slice(i));
        }
        let rg = self.rg(x);
        Ok(self.push(
            mat(rows.len(), d, out),
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Places row `i` of `x` at row `rows[i]` of a zero `[total, d]` output;
    /// duplicate targets accumulate.
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], total: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let d = tx.cols();
        if rows.len() != tx.rows() || rows.iter().any(|&i| i >= total) {
            return Err(invalid("scatter_rows", format!("rows {rows:?} into {total}")));
        }
        let mut out = vec![0.0; total * d];
        for (i, &t) in rows.iter().enumerate() {
            for (o, v) in out[t * d..(t + 1) * d].iter_mut().zip(tx.row_slice(i)) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            mat(total, d, out),
            Op::ScatterRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Selected `(row, col)` entries as an `[n, 1]` column.
    pub fn pick(&mut self, x: Var, coords: &[(usize, usize)]) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if coords.is_empty() || coords.iter().any(|&(i, j)| i >= r || j >= c) {
            return Err(invalid("pick", format!("coords {coords:?} for [{r},{c}]")));
        }
        let out = coords.iter().map(|&(i, j)| tx.data()[i * c + j]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            mat(coords.len(), 1, out),
            Op::Pick {
                x,
                coords: coords.to_vec(),
            },
            rg,
        ))
    }

    /// `x[m,d]` with row `i` multiplied by `s[i,0]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let (tx, ts) = (self.value(x), self.value(s));
        let (m, d) = (tx.rows(), tx.cols());
        if ts.numel() != m {
            return Err(mismatch("scale_rows", tx, ts));
        }
        let mut out = tx.data().to_vec();
        for (row, &f) in out.chunks_exact_mut(d).zip(ts.data()) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(mat(m, d, out), Op::ScaleRows { x, s }, rg))
    }

    /// Column sums, `[m,n] -> [1,n]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = vec![0.0; c];
        for row in tx.data().chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        self.push(mat(1, c, out), Op::SumRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f32>() / t.numel() as f32;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Mean softmax cross-entropy of `logits[S,C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let tl = self.value(logits);
        let (s, c) = (tl.rows(), tl.cols());
        if targets.len() != s || targets.iter().any(|&t| t >= c) {
            return Err(invalid(
                "cross_entropy",
                format!("{} targets for [{s},{c}] logits", targets.len()),
            ));
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0f64;
        for (row, &t) in probs.chunks_exact_mut(c).zip(targets) {
            softmax_in_place(row);
            loss -= f64::from(row[t].max(f32::MIN_POSITIVE)).ln();
        }
        let value = Tensor::scalar((loss / s as f64) as f32);
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Squared coefficient of variation `var(x) / mean(x)^2` over all
    /// entries (population variance).
    pub fn cv_squared(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (mean, var) = mean_var(tx.data());
        if mean == 0.0 {
            return Err(invalid("cv_squared", "zero mean"));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(var / (mean * mean)), Op::CvSquared(x), rg))
    }

    /// Multi-head scaled dot-product self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[N, d]`; each [`Segment`] is an independent sequence
    /// (block-diagonal attention). Keys whose `key_mask` entry is false get
    /// zero weight. A segment with no visible key produces zero output.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
        key_mask: &[bool],
    ) -> Result<Var, TensorError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(mismatch("attention", tq, tk));
        }
        let (n, d) = (tq.rows(), tq.cols());
        if heads == 0 || d % heads != 0 {
            return Err(invalid("attention", format!("{heads} heads for width {d}")));
        }
        if key_mask.len() != n {
            return Err(invalid("attention", format!("mask length {} for {n} rows", key_mask.len())));
        }
        if segments.iter().any(|s| s.len == 0 || s.start + s.len > n) {
            return Err(invalid("attention", "segment out of range"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for seg in segments {
            let l = seg.len;
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![0.0f32; l * l];
                for i in 0..l {
                    let qi = &qd[(seg.start + i) * d + off..][..dh];
                    let row = &mut p[i * l..(i + 1) * l];
                    let mut max = f32::NEG_INFINITY;
                    for j in 0..l {
                        if !key_mask[seg.start + j] {
                            continue;
                        }
                        let kj = &kd[(seg.start + j) * d + off..][..dh];
                        let s = dot(qi, kj) * scale;
                        row[j] = s;
                        max = max.max(s);
                    }
                    if max == f32::NEG_INFINITY {
                        row.iter_mut().for_each(|x| *x = 0.0);
                        continue;
                    }
                    let mut total = 0.0;
                    for j in 0..l {
                        if key_mask[seg.start + j] {
                            row[j] = (row[j] - max).exp();
                            total += row[j];
                        } else {
                            row[j] = 0.0;
                        }
                    }
                    row.iter_mut().for_each(|x| *x /= total);
                    let oi = &mut out[(seg.start + i) * d + off..][..dh];
                    for (j, &pij) in row.iter().enumerate() {
                        if pij != 0.0 {
                            let vj = &vd[(seg.start + j) * d + off..][..dh];
                            for (o, x) in oi.iter_mut().zip(vj) {
                                *o += pij * x;
                            }
                        }
                    }
                }
                probs.push(p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let cache = AttentionCache {
            q,
            k,
            v,
            segments: segments.to_vec(),
            heads,
            key_mask: key_mask.to_vec(),
            probs,
        };
        Ok(self.push(mat(n, d, out), Op::Attention(Box::new(cache)), rg))
    }

    /// Attention distributions recorded by an [`Graph::attention`] node:
    /// one `len x len` row-major matrix per (segment, head).
    pub fn attention_probs(&self, v: Var) -> Option<Vec<(Segment, &[f32])>> {
        match &self.nodes[v.0].op {
            Op::Attention(c) => Some(
                c.probs
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (c.segments[i / c.heads], p.as_slice()))
                    .collect(),
            ),
            _ => None,
        }
    }

    // ---- backward ------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every leaf that requires grad.
    ///
    /// Leaf gradients accumulate across calls; intermediate gradients are
    /// recomputed each time.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        if !self.rg(loss) {
            return Ok(());
        }
        accumulate(&mut self.nodes, loss, |g| g[0] += 1.0);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = node.grad.take() else { continue };
            backprop(before, &node.op, &node.value, &g);
            node.grad = Some(g);
        }
        Ok(())
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

fn mean_var(xs: &[f32]) -> (f32, f32) {
    let n = xs.len() as f32;
    let mean = xs.iter().sum::<f32>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    (mean, var)
}

fn accumulate(nodes: &mut [Node], v: Var, f: impl FnOnce(&mut [f32])) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let n = node.value.numel();
    let g = node.grad.get_or_insert_with(|| vec![0.0; n]);
    f(g);
}

fn add_into(nodes: &mut [Node], v: Var, src: &[f32], c: f32) {
    accumulate(nodes, v, |g| {
        for (a, b) in g.iter_mut().zip(src) {
            *a += c * b;
        }
    });
}

fn backprop(nodes: &mut [Node], op: &Op, out: &Tensor, g: &[f32]) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
            let n = out.cols();
            if nodes[a.0].requires_grad {
                let bv = nodes[b.0].value.data().to_vec();
                accumulate(nodes, *a, |ga| {
                    gemm((m, n, k), g, Layout::row_major(n), &bv, Layout::transposed(n), ga, 1.0)
                });
            }
            if nodes[b.0].requires_grad {
                let av = nodes[a.0].value.data().to_vec();
                accumulate(nodes, *b, |gb| {
                    gemm((k, m, n), &av, Layout::transposed(k), g, Layout::row_major(n), gb, 1.0)
                });
            }
        }
        Op::MatMulT(a, b) | Op::Linear { x: a, w: b, .. } => {
            let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
            let n = out.cols();
            if nodes[a.0].requires_grad {
                let bv = nodes[b.0].value.data().to_vec();
                accumulate(nodes, *a, |ga| {
                    gemm((m, n, k), g, Layout::row_major(n), &bv, Layout::row_major(k), ga, 1.0)
                });
            }
            if nodes[b.0].requires_grad {
                let av = nodes[a.0].value.data().to_vec();
                accumulate(nodes, *b, |gb| {
                    gemm((n, m, k), g, Layout::transposed(n), &av, Layout::row_major(k), gb, 1.0)
                });
            }
            if let Op::Linear { b: Some(bias), .. } = op {
                accumulate(nodes, *bias, |gb| {
                    for row in g.chunks_exact(n) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                });
            }
        }
        Op::Add(a, b) => {
            add_into(nodes, *a, g, 1.0);
            add_into(nodes, *b, g, 1.0);
        }
        Op::Sub(a, b) => {
            add_into(nodes, *a, g, 1.0);
            add_into(nodes, *b, g, -1.0);
        }
        Op::Mul(a, b) => {
            let av = nodes[a.0].value.data().to_vec();
            let bv = nodes[b.0].value.data().to_vec();
            accumulate(nodes, *a, |ga| {
                for ((x, gi), bi) in ga.iter_mut().zip(g).zip(&bv) {
                    *x += gi * bi;
                }
            });
            accumulate(nodes, *b, |gb| {
                for ((x, gi), ai) in gb.iter_mut().zip(g).zip(&av) {
                    *x += gi * ai;
                }
            });
        }
        Op::Scale(a, c) => add_into(nodes, *a, g, *c),
        Op::MaskMul(a, mask) => accumulate(nodes, *a, |ga| {
            for ((x, gi), m) in ga.iter_mut().zip(g).zip(mask) {
                *x += gi * m;
            }
        }),
        Op::Gelu(a) | Op::Sigmoid(a) | Op::Softplus(a) | Op::Log(a) => {
            let input = nodes[a.0].value.data().to_vec();
            let y = out.data();
            accumulate(nodes, *a, |ga| {
                for i in 0..ga.len() {
                    let d = match op {
                        Op::Gelu(_) => gelu_parts(input[i]).1,
                        Op::Sigmoid(_) => y[i] * (1.0 - y[i]),
                        Op::Softplus(_) => sigmoid(input[i]),
                        _ => 1.0 / input[i],
                    };
                    ga[i] += g[i] * d;
                }
            });
        }
        Op::Softmax(a) => {
            let c = out.cols();
            accumulate(nodes, *a, |ga| {
                for ((gar, yr), gr) in ga
                    .chunks_exact_mut(c)
                    .zip(out.data().chunks_exact(c))
                    .zip(g.chunks_exact(c))
                {
                    let s = dot(yr, gr);
                    for j in 0..c {
                        gar[j] += yr[j] * (gr[j] - s);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let c = out.cols();
            let gv = nodes[gain.0].value.data().to_vec();
            accumulate(nodes, *gain, |gg| {
                for (hr, gr) in xhat.chunks_exact(c).zip(g.chunks_exact(c)) {
                    for j in 0..c {
                        gg[j] += gr[j] * hr[j];
                    }
                }
            });
            accumulate(nodes, *bias, |gb| {
                for gr in g.chunks_exact(c) {
                    for j in 0..c {
                        gb[j] += gr[j];
                    }
                }
            });
            accumulate(nodes, *x, |gx| {
                let mut dh = vec![0.0; c];
                for (i, ((gxr, hr), gr)) in gx
                    .chunks_exact_mut(c)
                    .zip(xhat.chunks_exact(c))
                    .zip(g.chunks_exact(c))
                    .enumerate()
                {
                    for j in 0..c {
                        dh[j] = gr[j] * gv[j];
                    }
                    let m1 = dh.iter().sum::<f32>() / c as f32;
                    let m2 = dot(&dh, hr) / c as f32;
                    for j in 0..c {
                        gxr[j] += inv_std[i] * (dh[j] - m1 - hr[j] * m2);
                    }
                }
            });
        }
        Op::Embedding { table: x, ids: rows } | Op::GatherRows { x, rows } => {
            let d = out.cols();
            accumulate(nodes, *x, |gx| {
                for (r, gr) in rows.iter().zip(g.chunks_exact(d)) {
                    for (a, v) in gx[r * d..(r + 1) * d].iter_mut().zip(gr) {
                        *a += v;
                    }
                }
            });
        }
        Op::ScatterRows { x, rows } => {
            let d = out.cols();
            accumulate(nodes, *x, |gx| {
                for (i, &r) in rows.iter().enumerate() {
                    for (a, v) in gx[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *a += v;
                    }
                }
            });
        }
        Op::Pick { x, coords } => {
            let c = nodes[x.0].value.cols();
            accumulate(nodes, *x, |gx| {
                for (&(i, j), gi) in coords.iter().zip(g) {
                    gx[i * c + j] += gi;
                }
            });
        }
        Op::ScaleRows { x, s } => {
            let d = out.cols();
            let xv = nodes[x.0].value.data().to_vec();
            let sv = nodes[s.0].value.data().to_vec();
            accumulate(nodes, *x, |gx| {
                for ((gxr, gr), f) in gx.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(&sv) {
                    for (a, v) in gxr.iter_mut().zip(gr) {
                        *a += v * f;
                    }
                }
            });
            accumulate(nodes, *s, |gs| {
                for ((a, gr), xr) in gs.iter_mut().zip(g.chunks_exact(d)).zip(xv.chunks_exact(d)) {
                    *a += dot(gr, xr);
                }
            });
        }
        Op::SumRows(x) => {
            let c = out.cols();
            accumulate(nodes, *x, |gx| {
                for row in gx.chunks_exact_mut(c) {
                    for (a, v) in row.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            });
        }
        Op::SumAll(x) => accumulate(nodes, *x, |gx| gx.iter_mut().for_each(|a| *a += g[0])),
        Op::MeanAll(x) => {
            let n = nodes[x.0].value.numel() as f32;
            accumulate(nodes, *x, |gx| gx.iter_mut().for_each(|a| *a += g[0] / n));
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let c = nodes[logits.0].value.cols();
            let s = targets.len() as f32;
            accumulate(nodes, *logits, |gl| {
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[i * c + j] += g[0] * (probs[i * c + j] - onehot) / s;
                    }
                }
            });
        }
        Op::CvSquared(x) => {
            let xv = nodes[x.0].value.data().to_vec();
            let n = xv.len() as f32;
            let (mean, var) = mean_var(&xv);
            let m2 = mean * mean;
            accumulate(nodes, *x, |gx| {
                for (a, xi) in gx.iter_mut().zip(&xv) {
                    let d = 2.0 * (xi - mean) / (n * m2) - 2.0 * var / (m2 * mean * n);
                    *a += g[0] * d;
                }
            });
        }
        Op::Attention(c) => attention_backward(nodes, c, out.cols(), g),
    }
}

fn attention_backward(nodes: &mut [Node], c: &AttentionCache, d: usize, g: &[f32]) {
    let n = nodes[c.q.0].value.rows();
    let dh = d / c.heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let qd = nodes[c.q.0].value.data().to_vec();
    let kd = nodes[c.k.0].value.data().to_vec();
    let vd = nodes[c.v.0].value.data().to_vec();
    let mut gq = vec![0.0; n * d];
    let mut gk = vec![0.0; n * d];
    let mut gv = vec![0.0; n * d];
    for (si, seg) in c.segments.iter().enumerate() {
        let l = seg.len;
        for h in 0..c.heads {
            let p = &c.probs[si * c.heads + h];
            let off = h * dh;
            let mut dp = vec![0.0; l];
            for i in 0..l {
                let gi = &g[(seg.start + i) * d + off..][..dh];
                let row = &p[i * l..(i + 1) * l];
                for j in 0..l {
                    if !c.key_mask[seg.start + j] {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vj = &vd[(seg.start + j) * d + off..][..dh];
                    dp[j] = dot(gi, vj);
                    let gvj = &mut gv[(seg.start + j) * d + off..][..dh];
                    for (a, x) in gvj.iter_mut().zip(gi) {
                        *a += row[j] * x;
                    }
                }
                let s = dot(row, &dp);
                for j in 0..l {
                    if row[j] == 0.0 {
                        continue;
                    }
                    let ds = row[j] * (dp[j] - s) * scale;
                    let qi = (seg.start + i) * d + off;
                    let kj = (seg.start + j) * d + off;
                    for t in 0..dh {
                        gq[qi + t] += ds * kd[kj + t];
                        gk[kj + t] += ds * qd[qi + t];
                    }
                }
            }
        }
    }
    add_into(nodes, c.q, &gq, 1.0);
    add_into(nodes, c.k, &gk, 1.0);
    add_into(nodes, c.v, &gv, 1.0);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = g.constant(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let y = g.softmax_rows(x);
        assert!(close(g.value(y).data(), &[1.0 / 3.0; 3], 1e-7));
    }

    #[test]
    fn layer_norm_closed_form() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[1.0, 2.0, 3.0]));
        let gain = g.constant(Tensor::ones(&[3]));
        let bias = g.constant(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        // (x - 2) / sqrt(2/3)
        assert!(close(g.value(y).data(), &[-1.2247, 0.0, 1.2247], 1e-3));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let w = g.param(Tensor::row(&[1.0, 2.0]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
        // a second call accumulates into leaves
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn constant_loss_writes_no_gradients() {
        let mut g = Graph::new();
        let w = g.param(Tensor::row(&[1.0]));
        let c = g.constant(Tensor::scalar(3.0));
        let loss = g.sum(c);
        g.backward(loss).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad_tensor(w).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.param(Tensor::row(&[1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn disconnected_leaf_stays_zero() {
        let mut g = Graph::new();
        let used = g.param(Tensor::row(&[1.0, 2.0]));
        let unused = g.param(Tensor::row(&[5.0]));
        let loss = g.sum(used);
        g.backward(loss).unwrap();
        assert_eq!(g.grad_tensor(unused).data(), &[0.0]);
    }

    #[test]
    fn sparse_softmax_keeps_only_selected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[2.0, 1.0, 0.0]));
        let y = g.sparse_softmax_rows(x, &[vec![0, 1]]).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.731_059).abs() < 1e-5 && (v[1] - 0.268_941).abs() < 1e-5);
        assert_eq!(v[2], 0.0);
    }

    #[test]
    fn attention_rows_are_distributions_and_respect_mask() {
        let mut rng = rng::stream(3, "attn");
        let mut g = Graph::new();
        let n = 7;
        let d = 8;
        let data = |rng: &mut rng::StreamRng| {
            Tensor::new(vec![n, d], (0..n * d).map(|_| rng::normal(rng)).collect()).unwrap()
        };
        let q = g.constant(data(&mut rng));
        let k = g.constant(data(&mut rng));
        let v = g.constant(data(&mut rng));
        let mask = [true, true, true, false, true, true, false];
        let segs = [Segment { start: 0, len: 4 }, Segment { start: 4, len: 3 }];
        let y = g.attention(q, k, v, &segs, 2, &mask).unwrap();
        for (seg, p) in g.attention_probs(y).unwrap() {
            for i in 0..seg.len {
                let row = &p[i * seg.len..(i + 1) * seg.len];
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
                for (j, &pj) in row.iter().enumerate() {
                    if !mask[seg.start + j] {
                        assert_eq!(pj, 0.0);
                    }
                }
            }
        }
    }
}
