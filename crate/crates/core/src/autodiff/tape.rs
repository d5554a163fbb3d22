//! Eager operation tape for reverse-mode differentiation. Every value is a
//! row-major matrix of 64-bit floats; forward results are computed at record
//! time and the tape is replayed backward for gradients.

use std::sync::Arc;

use super::tensor::{sigmoid_scalar, Tensor};

/// Index of a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValId(usize);

/// Boolean attention mask over an `n x n` score matrix; `true` = may attend.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    pub n: usize,
    pub allow: Vec<bool>,
}

impl AttnMask {
    pub fn full(n: usize) -> Self {
        AttnMask { n, allow: vec![true; n * n] }
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.n + j]
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { requires_grad: bool },
    /// out = a @ b
    Matmul { a: ValId, b: ValId },
    /// out = a @ b^T
    MatmulTb { a: ValId, b: ValId },
    Add { a: ValId, b: ValId },
    Sub { a: ValId, b: ValId },
    MulElem { a: ValId, b: ValId },
    Scale { a: ValId, c: f64 },
    /// out[i] = a[i] + v (v is a single row)
    AddRow { a: ValId, v: ValId },
    /// rows of `a` stacked `times` times
    TileRows { a: ValId, times: usize },
    /// each row of `a` repeated `times` times consecutively
    RepeatEachRow { a: ValId, times: usize },
    SliceRows { a: ValId, start: usize, len: usize },
    SliceCols { a: ValId, start: usize, len: usize },
    ConcatRows { parts: Vec<ValId> },
    ConcatCols { parts: Vec<ValId> },
    SoftmaxRows { a: ValId, mask: Option<Arc<AttnMask>> },
    Sigmoid { a: ValId },
    Gelu { a: ValId },
    /// row-wise layer norm with affine gain/bias (single-row values)
    LayerNorm { x: ValId, gamma: ValId, beta: ValId },
    MeanRows { a: ValId },
    SumAll { a: ValId },
    MeanAll { a: ValId },
    Ln { a: ValId },
    Clamp { a: ValId, lo: f64, hi: f64 },
    /// out[i] = table[indices[i]]
    EmbedRows { table: ValId, indices: Arc<Vec<usize>> },
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by `ValId`.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ValId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn take(&mut self, id: ValId) -> Option<Vec<f64>> {
        self.grads[id.0].take()
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn scalar(&self, id: ValId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn dims(&self, id: ValId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op) -> ValId {
        debug_assert_eq!(rows * cols, data.len());
        let needs_grad = match &op {
            Op::Leaf { requires_grad } => *requires_grad,
            other => self.inputs_need_grad(other),
        };
        self.nodes.push(Node { rows, cols, data, op, needs_grad });
        ValId(self.nodes.len() - 1)
    }

    fn inputs_need_grad(&self, op: &Op) -> bool {
        let mut needs = false;
        self.for_each_input(op, |id| needs |= self.nodes[id.0].needs_grad);
        needs
    }

    fn for_each_input(&self, op: &Op, mut f: impl FnMut(ValId)) {
        match op {
            Op::Leaf { .. } => {}
            Op::Matmul { a, b }
            | Op::MatmulTb { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::MulElem { a, b } => {
                f(*a);
                f(*b);
            }
            Op::AddRow { a, v } => {
                f(*a);
                f(*v);
            }
            Op::Scale { a, .. }
            | Op::TileRows { a, .. }
            | Op::RepeatEachRow { a, .. }
            | Op::SliceRows { a, .. }
            | Op::SliceCols { a, .. }
            | Op::SoftmaxRows { a, .. }
            | Op::Sigmoid { a }
            | Op::Gelu { a }
            | Op::MeanRows { a }
            | Op::SumAll { a }
            | Op::MeanAll { a }
            | Op::Ln { a }
            | Op::Clamp { a, .. } => f(*a),
            Op::LayerNorm { x, gamma, beta } => {
                f(*x);
                f(*gamma);
                f(*beta);
            }
            Op::ConcatRows { parts } | Op::ConcatCols { parts } => {
                for p in parts {
                    f(*p);
                }
            }
            Op::EmbedRows { table, .. } => f(*table),
        }
    }

    // ---- leaves ------------------------------------------------------

    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> ValId {
        self.push(rows, cols, data, Op::Leaf { requires_grad })
    }

    pub fn leaf_tensor(&mut self, t: &Tensor) -> ValId {
        let (rows, cols) = t
            .matrix_dims()
            .expect("tape leaves must be 1-D or 2-D tensors");
        self.leaf(rows, cols, t.data.clone(), t.requires_grad)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> ValId {
        self.leaf(rows, cols, data, false)
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: ValId, b: ValId) -> ValId {
        let (m, ka) = self.dims(a);
        let (kb, n) = self.dims(b);
        assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
        let data = matmul(self.value(a), self.value(b), m, ka, n);
        self.push(m, n, data, Op::Matmul { a, b })
    }

    pub fn matmul_tb(&mut self, a: ValId, b: ValId) -> ValId {
        let (m, ka) = self.dims(a);
        let (n, kb) = self.dims(b);
        assert_eq!(ka, kb, "matmul_tb inner dims {ka} vs {kb}");
        let data = matmul_tb(self.value(a), self.value(b), m, ka, n);
        self.push(m, n, data, Op::MatmulTb { a, b })
    }

    pub fn add(&mut self, a: ValId, b: ValId) -> ValId {
        let (r, c) = self.same_dims(a, b, "add");
        let data = zip2(self.value(a), self.value(b), |x, y| x + y);
        self.push(r, c, data, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: ValId, b: ValId) -> ValId {
        let (r, c) = self.same_dims(a, b, "sub");
        let data = zip2(self.value(a), self.value(b), |x, y| x - y);
        self.push(r, c, data, Op::Sub { a, b })
    }

    pub fn mul_elem(&mut self, a: ValId, b: ValId) -> ValId {
        let (r, c) = self.same_dims(a, b, "mul_elem");
        let data = zip2(self.value(a), self.value(b), |x, y| x * y);
        self.push(r, c, data, Op::MulElem { a, b })
    }

    pub fn scale(&mut self, a: ValId, c: f64) -> ValId {
        let (r, cc) = self.dims(a);
        let data = self.value(a).iter().map(|x| x * c).collect();
        self.push(r, cc, data, Op::Scale { a, c })
    }

    pub fn add_row(&mut self, a: ValId, v: ValId) -> ValId {
        let (r, c) = self.dims(a);
        let (vr, vc) = self.dims(v);
        assert_eq!((vr, vc), (1, c), "add_row expects a [1 x {c}] row, got [{vr} x {vc}]");
        let row = self.value(v).to_vec();
        let mut data = self.value(a).to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, y) in chunk.iter_mut().zip(&row) {
                *x += y;
            }
        }
        self.push(r, c, data, Op::AddRow { a, v })
    }

    pub fn tile_rows(&mut self, a: ValId, times: usize) -> ValId {
        let (r, c) = self.dims(a);
        let src = self.value(a);
        let mut data = Vec::with_capacity(r * c * times);
        for _ in 0..times {
            data.extend_from_slice(src);
        }
        self.push(r * times, c, data, Op::TileRows { a, times })
    }

    pub fn repeat_each_row(&mut self, a: ValId, times: usize) -> ValId {
        let (r, c) = self.dims(a);
        let src = self.value(a).to_vec();
        let mut data = Vec::with_capacity(r * c * times);
        for row in src.chunks(c) {
            for _ in 0..times {
                data.extend_from_slice(row);
            }
        }
        self.push(r * times, c, data, Op::RepeatEachRow { a, times })
    }

    pub fn slice_rows(&mut self, a: ValId, start: usize, len: usize) -> ValId {
        let (r, c) = self.dims(a);
        assert!(start + len <= r, "slice_rows {start}+{len} out of {r}");
        let data = self.value(a)[start * c..(start + len) * c].to_vec();
        self.push(len, c, data, Op::SliceRows { a, start, len })
    }

    pub fn slice_cols(&mut self, a: ValId, start: usize, len: usize) -> ValId {
        let (r, c) = self.dims(a);
        assert!(start + len <= c, "slice_cols {start}+{len} out of {c}");
        let src = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push(r, len, data, Op::SliceCols { a, start, len })
    }

    pub fn concat_rows(&mut self, parts: &[ValId]) -> ValId {
        assert!(!parts.is_empty());
        let (_, c) = self.dims(parts[0]);
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims(p);
            assert_eq!(pc, c, "concat_rows col mismatch");
            rows += pr;
            data.extend_from_slice(self.value(p));
        }
        self.push(rows, c, data, Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn concat_cols(&mut self, parts: &[ValId]) -> ValId {
        assert!(!parts.is_empty());
        let (r, _) = self.dims(parts[0]);
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pr, pc) = self.dims(p);
                assert_eq!(pr, r, "concat_cols row mismatch");
                pc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).to_vec();
            for i in 0..r {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push(r, total, data, Op::ConcatCols { parts: parts.to_vec() })
    }

    // ---- nonlinearities ----------------------------------------------

    pub fn softmax_rows(&mut self, a: ValId, mask: Option<Arc<AttnMask>>) -> ValId {
        let (r, c) = self.dims(a);
        if let Some(m) = &mask {
            assert_eq!(m.n, c, "mask size {} vs cols {c}", m.n);
            assert_eq!(r, c, "masked softmax expects square score matrix");
        }
        let src = self.value(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let allowed = |j: usize| mask.as_ref().map_or(true, |m| m.allowed(i, j));
            let mut max = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if allowed(j) && x > max {
                    max = x;
                }
            }
            assert!(max > f64::NEG_INFINITY, "softmax row {i} has no allowed entries");
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (x - max).exp();
                    data[i * c + j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        self.push(r, c, data, Op::SoftmaxRows { a, mask })
    }

    pub fn sigmoid(&mut self, a: ValId) -> ValId {
        let (r, c) = self.dims(a);
        let data = self.value(a).iter().map(|&x| sigmoid_scalar(x)).collect();
        self.push(r, c, data, Op::Sigmoid { a })
    }

    pub fn gelu(&mut self, a: ValId) -> ValId {
        let (r, c) = self.dims(a);
        let data = self.value(a).iter().map(|&x| gelu_scalar(x)).collect();
        self.push(r, c, data, Op::Gelu { a })
    }

    pub fn layer_norm(&mut self, x: ValId, gamma: ValId, beta: ValId) -> ValId {
        let (r, c) = self.dims(x);
        let (gr, gc) = self.dims(gamma);
        let (br, bc) = self.dims(beta);
        assert_eq!((gr, gc), (1, c), "layer_norm gamma shape");
        assert_eq!((br, bc), (1, c), "layer_norm beta shape");
        let g = self.value(gamma).to_vec();
        let b = self.value(beta).to_vec();
        let src = self.value(x);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let (mean, inv_std) = row_stats(row);
            for j in 0..c {
                data[i * c + j] = g[j] * (row[j] - mean) * inv_std + b[j];
            }
        }
        self.push(r, c, data, Op::LayerNorm { x, gamma, beta })
    }

    pub fn mean_rows(&mut self, a: ValId) -> ValId {
        let (r, c) = self.dims(a);
        let src = self.value(a);
        let mut data = vec![0.0; c];
        for row in src.chunks(c) {
            for (d, x) in data.iter_mut().zip(row) {
                *d += x;
            }
        }
        for d in &mut data {
            *d /= r as f64;
        }
        self.push(1, c, data, Op::MeanRows { a })
    }

    pub fn sum_all(&mut self, a: ValId) -> ValId {
        let s: f64 = self.value(a).iter().sum();
        self.push(1, 1, vec![s], Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: ValId) -> ValId {
        let n = self.value(a).len();
        let s: f64 = self.value(a).iter().sum();
        self.push(1, 1, vec![s / n as f64], Op::MeanAll { a })
    }

    pub fn ln(&mut self, a: ValId) -> ValId {
        let (r, c) = self.dims(a);
        let data = self.value(a).iter().map(|&x| x.ln()).collect();
        self.push(r, c, data, Op::Ln { a })
    }

    pub fn clamp(&mut self, a: ValId, lo: f64, hi: f64) -> ValId {
        let (r, c) = self.dims(a);
        let data = self.value(a).iter().map(|&x| x.clamp(lo, hi)).collect();
        self.push(r, c, data, Op::Clamp { a, lo, hi })
    }

    pub fn embed_rows(&mut self, table: ValId, indices: Arc<Vec<usize>>) -> ValId {
        let (v, d) = self.dims(table);
        let src = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &ix in indices.iter() {
            assert!(ix < v, "embedding index {ix} out of vocabulary {v}");
            data.extend_from_slice(&src[ix * d..(ix + 1) * d]);
        }
        self.push(indices.len(), d, data, Op::EmbedRows { table, indices })
    }

    fn same_dims(&self, a: ValId, b: ValId, what: &str) -> (usize, usize) {
        let da = self.dims(a);
        let db = self.dims(b);
        assert_eq!(da, db, "{what}: shape {da:?} vs {db:?}");
        da
    }

    // ---- backward ----------------------------------------------------

    /// Reverse-accumulate gradients from a scalar loss.
    pub fn backward(&self, loss: ValId) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].data.len(),
            1,
            "backward expects a scalar loss"
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let d_out = grads[idx].take().unwrap();
            self.backward_op(idx, &d_out, &mut grads);
            grads[idx] = Some(d_out);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: ValId, delta: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (x, d) in g.iter_mut().zip(delta) {
                    *x += d;
                }
            }
            None => grads[id.0] = Some(delta.to_vec()),
        }
    }

    fn backward_op(&self, idx: usize, d_out: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf { .. } => {}

            Op::Matmul { a, b } => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                // d_a = d_out @ b^T ; d_b = a^T @ d_out
                let d_a = matmul_tb(d_out, self.value(*b), m, n, k);
                self.accumulate(grads, *a, &d_a);
                let d_b = matmul_ta(self.value(*a), d_out, m, k, n);
                self.accumulate(grads, *b, &d_b);
            }

            Op::MatmulTb { a, b } => {
                let (m, k) = self.dims(*a);
                let (n, _) = self.dims(*b);
                // out = a @ b^T : d_a = d_out @ b ; d_b = d_out^T @ a
                let d_a = matmul(d_out, self.value(*b), m, n, k);
                self.accumulate(grads, *a, &d_a);
                let d_b = matmul_ta(d_out, self.value(*a), m, n, k);
                self.accumulate(grads, *b, &d_b);
            }

            Op::Add { a, b } => {
                self.accumulate(grads, *a, d_out);
                self.accumulate(grads, *b, d_out);
            }

            Op::Sub { a, b } => {
                self.accumulate(grads, *a, d_out);
                let neg: Vec<f64> = d_out.iter().map(|x| -x).collect();
                self.accumulate(grads, *b, &neg);
            }

            Op::MulElem { a, b } => {
                let d_a = zip2(d_out, self.value(*b), |d, y| d * y);
                self.accumulate(grads, *a, &d_a);
                let d_b = zip2(d_out, self.value(*a), |d, x| d * x);
                self.accumulate(grads, *b, &d_b);
            }

            Op::Scale { a, c } => {
                let d_a: Vec<f64> = d_out.iter().map(|d| d * c).collect();
                self.accumulate(grads, *a, &d_a);
            }

            Op::AddRow { a, v } => {
                self.accumulate(grads, *a, d_out);
                let (_, c) = self.dims(*a);
                let mut d_v = vec![0.0; c];
                for chunk in d_out.chunks(c) {
                    for (g, d) in d_v.iter_mut().zip(chunk) {
                        *g += d;
                    }
                }
                self.accumulate(grads, *v, &d_v);
            }

            Op::TileRows { a, times } => {
                let (r, c) = self.dims(*a);
                let mut d_a = vec![0.0; r * c];
                for t in 0..*times {
                    for (g, d) in d_a.iter_mut().zip(&d_out[t * r * c..(t + 1) * r * c]) {
                        *g += d;
                    }
                }
                self.accumulate(grads, *a, &d_a);
            }

            Op::RepeatEachRow { a, times } => {
                let (r, c) = self.dims(*a);
                let mut d_a = vec![0.0; r * c];
                for i in 0..r {
                    for t in 0..*times {
                        let src = &d_out[(i * times + t) * c..(i * times + t + 1) * c];
                        for (g, d) in d_a[i * c..(i + 1) * c].iter_mut().zip(src) {
                            *g += d;
                        }
                    }
                }
                self.accumulate(grads, *a, &d_a);
            }

            Op::SliceRows { a, start, len } => {
                let (r, c) = self.dims(*a);
                let mut d_a = vec![0.0; r * c];
                d_a[start * c..(start + len) * c].copy_from_slice(d_out);
                self.accumulate(grads, *a, &d_a);
            }

            Op::SliceCols { a, start, len } => {
                let (r, c) = self.dims(*a);
                let mut d_a = vec![0.0; r * c];
                for i in 0..r {
                    d_a[i * c + start..i * c + start + len]
                        .copy_from_slice(&d_out[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *a, &d_a);
            }

            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let (pr, pc) = self.dims(p);
                    self.accumulate(grads, p, &d_out[off..off + pr * pc]);
                    off += pr * pc;
                }
            }

            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
                let mut off = 0;
                for &p in parts {
                    let (pr, pc) = self.dims(p);
                    let mut d_p = vec![0.0; pr * pc];
                    for i in 0..pr {
                        d_p[i * pc..(i + 1) * pc]
                            .copy_from_slice(&d_out[i * total + off..i * total + off + pc]);
                    }
                    self.accumulate(grads, p, &d_p);
                    off += pc;
                }
            }

            Op::SoftmaxRows { a, mask } => {
                let (r, c) = self.dims(*a);
                let y = &node.data;
                let mut d_a = vec![0.0; r * c];
                for i in 0..r {
                    let allowed =
                        |j: usize| mask.as_ref().map_or(true, |m| m.allowed(i, j));
                    let mut dot = 0.0;
                    for j in 0..c {
                        if allowed(j) {
                            dot += d_out[i * c + j] * y[i * c + j];
                        }
                    }
                    for j in 0..c {
                        if allowed(j) {
                            d_a[i * c + j] = y[i * c + j] * (d_out[i * c + j] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, &d_a);
            }

            Op::Sigmoid { a } => {
                let d_a = zip2(d_out, &node.data, |d, y| d * y * (1.0 - y));
                self.accumulate(grads, *a, &d_a);
            }

            Op::Gelu { a } => {
                let d_a = zip2(d_out, self.value(*a), |d, x| d * gelu_grad_scalar(x));
                self.accumulate(grads, *a, &d_a);
            }

            Op::LayerNorm { x, gamma, beta } => {
                let (r, c) = self.dims(*x);
                let g = self.value(*gamma);
                let src = self.value(*x);
                let mut d_x = vec![0.0; r * c];
                let mut d_g = vec![0.0; c];
                let mut d_b = vec![0.0; c];
                for i in 0..r {
                    let row = &src[i * c..(i + 1) * c];
                    let dy = &d_out[i * c..(i + 1) * c];
                    let (mean, inv_std) = row_stats(row);
                    let xhat: Vec<f64> =
                        row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let dxh = dy[j] * g[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[j];
                        d_g[j] += dy[j] * xhat[j];
                        d_b[j] += dy[j];
                    }
                    mean_dxhat /= c as f64;
                    mean_dxhat_xhat /= c as f64;
                    for j in 0..c {
                        let dxh = dy[j] * g[j];
                        d_x[i * c + j] =
                            (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat) * inv_std;
                    }
                }
                self.accumulate(grads, *x, &d_x);
                self.accumulate(grads, *gamma, &d_g);
                self.accumulate(grads, *beta, &d_b);
            }

            Op::MeanRows { a } => {
                let (r, c) = self.dims(*a);
                let scale = 1.0 / r as f64;
                let mut d_a = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d_a[i * c + j] = d_out[j] * scale;
                    }
                }
                self.accumulate(grads, *a, &d_a);
            }

            Op::SumAll { a } => {
                let (r, c) = self.dims(*a);
                let d_a = vec![d_out[0]; r * c];
                self.accumulate(grads, *a, &d_a);
            }

            Op::MeanAll { a } => {
                let (r, c) = self.dims(*a);
                let d = d_out[0] / (r * c) as f64;
                let d_a = vec![d; r * c];
                self.accumulate(grads, *a, &d_a);
            }

            Op::Ln { a } => {
                let d_a = zip2(d_out, self.value(*a), |d, x| d / x);
                self.accumulate(grads, *a, &d_a);
            }

            Op::Clamp { a, lo, hi } => {
                let d_a = zip2(d_out, self.value(*a), |d, x| {
                    if x > *lo && x < *hi {
                        d
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, &d_a);
            }

            Op::EmbedRows { table, indices } => {
                let (v, d) = self.dims(*table);
                let mut d_t = vec![0.0; v * d];
                for (row, &ix) in indices.iter().enumerate() {
                    for j in 0..d {
                        d_t[ix * d + j] += d_out[row * d + j];
                    }
                }
                self.accumulate(grads, *table, &d_t);
            }
        }
    }
}

// ---- kernels ----------------------------------------------------------

/// C = A @ B with A [m x k], B [k x n].
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// C = A @ B^T with A [m x k], B [n x k].
pub fn matmul_tb(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// C = A^T @ B with A [m x k], B [m x n].
pub fn matmul_ta(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let o_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

fn zip2(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_kernels_agree_on_small_case() {
        // A [2x3], B [3x2]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let c = matmul(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
        // B^T is [2x3]; A @ (B^T)^T must equal A @ B
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        assert_eq!(matmul_tb(&a, &bt, 2, 3, 2), c);
        // A^T @ D with A [2x3], D [2x2]
        let d = [7.0, 8.0, 9.0, 10.0];
        let at_d = matmul_ta(&a, &d, 2, 3, 2);
        assert_eq!(at_d, vec![43.0, 48.0, 59.0, 66.0, 75.0, 84.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let a = tape.constant(3, 4, (0..12).map(|i| i as f64 * 0.7 - 3.0).collect());
        let s = tape.softmax_rows(a, None);
        for row in tape.value(s).chunks(4) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_matches_per_block_softmax() {
        // 4 tokens in 2 frames of 2; spatial mask = block diagonal.
        let n = 4;
        let mut allow = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                if i / 2 == j / 2 {
                    allow[i * n + j] = true;
                }
            }
        }
        let scores: Vec<f64> = vec![
            0.3, -1.0, 5.0, 2.0, //
            1.2, 0.4, -2.0, 0.0, //
            0.0, 3.0, 0.5, 0.25, //
            -1.0, 2.0, 1.5, 1.5,
        ];
        let mut tape = Tape::new();
        let s = tape.constant(n, n, scores.clone());
        let p = tape.softmax_rows(s, Some(Arc::new(AttnMask { n, allow })));
        let out = tape.value(p);
        // Row 0 restricted to cols 0..2.
        let m = scores[0].max(scores[1]);
        let e0 = (scores[0] - m).exp();
        let e1 = (scores[1] - m).exp();
        assert!((out[0] - e0 / (e0 + e1)).abs() < 1e-15);
        assert!((out[1] - e1 / (e0 + e1)).abs() < 1e-15);
        assert_eq!(out[2], 0.0);
        assert_eq!(out[3], 0.0);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let build = || {
            let mut tape = Tape::new();
            let x = tape.constant(2, 3, vec![0.1, -0.4, 2.0, 1.0, 0.0, -1.0]);
            let w = tape.leaf(2, 3, vec![0.5; 6], true);
            let y = tape.matmul_tb(x, w);
            let z = tape.sigmoid(y);
            let l = tape.mean_all(z);
            tape.scalar(l).to_bits()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn backward_through_chain_accumulates() {
        // loss = mean(x * x + x) -> d/dx = (2x + 1)/n
        let mut tape = Tape::new();
        let x = tape.leaf(1, 3, vec![1.0, -2.0, 0.5], true);
        let sq = tape.mul_elem(x, x);
        let s = tape.add(sq, x);
        let loss = tape.mean_all(s);
        let grads = tape.backward(loss);
        let g = grads.get(x).unwrap();
        for (gi, xi) in g.iter().zip([1.0, -2.0, 0.5]) {
            assert!((gi - (2.0 * xi + 1.0) / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(1, 2, vec![1.0, 2.0], false);
        let w = tape.leaf(1, 2, vec![3.0, 4.0], true);
        let p = tape.mul_elem(x, w);
        let loss = tape.sum_all(p);
        let grads = tape.backward(loss);
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap(), &[1.0, 2.0]);
    }
}
