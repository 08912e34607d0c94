//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Each operation appends one node holding its forward value plus enough
//! saved state to run the backward rule. `backward` walks the tape in
//! reverse and accumulates gradients per node. Values are computed eagerly,
//! so a `Var` can always be inspected mid-graph.

use super::tensor::Tensor;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

const LN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
struct ConvDims {
    in_h: usize,
    in_w: usize,
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvDims {
    fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k) / self.stride + 1
    }
    fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k) / self.stride + 1
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Matmul(usize, usize),
    MatmulTb(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    SoftmaxRows(usize),
    LayerNormRows { x: usize, gain: usize, bias: usize },
    Conv2d { x: usize, w: usize, b: usize, dims: ConvDims },
    MeanDim0(usize),
    MaxDim0 { x: usize, argmax: Vec<usize> },
    MeanDim1(usize),
    MaxDim1 { x: usize, argmax: Vec<usize> },
    SumAll(usize),
    MeanAll(usize),
    Abs(usize),
    MinElem(usize, usize),
    MaxElem(usize, usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Ln(usize),
    ConcatRows(Vec<usize>),
    SliceRows { x: usize, start: usize, end: usize },
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize, end: usize },
    SelectRows { x: usize, idx: Vec<usize> },
    L2NormalizeRows(usize),
    GradReverse { x: usize, strength: f64 },
    StraightThrough(usize),
    CrossEntropyRows { logits: usize, targets: Vec<usize>, class_weights: Option<Vec<f64>> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by `Var`.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient w.r.t. `v`, zero-filled if the loss never touched it.
    pub fn get(&self, v: Var, tape: &Tape) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let val = tape.value(v);
                Tensor::zeros(val.rows, val.cols)
            }
        }
    }

    pub fn get_opt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.all_finite() || matches!(op, Op::Leaf), "non-finite op output");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Insert a constant or parameter value as a leaf node.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert!(x.same_shape(y), "add shape mismatch");
        let mut out = x.clone();
        out.add_assign(y);
        self.push(out, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert!(x.same_shape(y), "sub shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p - q).collect();
        let out = Tensor { rows: x.rows, cols: x.cols, data };
        self.push(out, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert!(x.same_shape(y), "mul shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let out = Tensor { rows: x.rows, cols: x.cols, data };
        self.push(out, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert!(x.same_shape(y), "div shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p / q).collect();
        let out = Tensor { rows: x.rows, cols: x.cols, data };
        self.push(out, Op::Div(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a.0, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push(out, Op::AddScalar(a.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::Matmul(a.0, b.0))
    }

    /// `a @ b^T`.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_tb(self.value(b));
        self.push(out, Op::MatmulTb(a.0, b.0))
    }

    /// Matrix plus broadcast row vector `[1 x n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows, 1, "add_row needs a row vector");
        assert_eq!(x.cols, r.cols, "add_row width mismatch");
        let mut out = x.clone();
        for i in 0..out.rows {
            for j in 0..out.cols {
                out.data[i * out.cols + j] += r.data[j];
            }
        }
        self.push(out, Op::AddRow(a.0, row.0))
    }

    /// Matrix times broadcast row vector (per-column scaling).
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows, 1, "mul_row needs a row vector");
        assert_eq!(x.cols, r.cols, "mul_row width mismatch");
        let mut out = x.clone();
        for i in 0..out.rows {
            for j in 0..out.cols {
                out.data[i * out.cols + j] *= r.data[j];
            }
        }
        self.push(out, Op::MulRow(a.0, row.0))
    }

    /// Matrix times broadcast column vector `[m x 1]` (per-row scaling).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (x, c) = (self.value(a), self.value(col));
        assert_eq!(c.cols, 1, "mul_col needs a column vector");
        assert_eq!(x.rows, c.rows, "mul_col height mismatch");
        let mut out = x.clone();
        for i in 0..out.rows {
            let s = c.data[i];
            for j in 0..out.cols {
                out.data[i * out.cols + j] *= s;
            }
        }
        self.push(out, Op::MulCol(a.0, col.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(stable_sigmoid);
        self.push(out, Op::Sigmoid(a.0))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for i in 0..out.rows {
            softmax_in_place(out.row_mut(i));
        }
        self.push(out, Op::SoftmaxRows(a.0))
    }

    /// Row-wise layer norm with learned gain/bias (`[1 x n]` each).
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        assert_eq!(g.rows, 1);
        assert_eq!(b.rows, 1);
        assert_eq!(xv.cols, g.cols);
        assert_eq!(xv.cols, b.cols);
        let n = xv.cols as f64;
        let mut out = xv.clone();
        for i in 0..out.rows {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g.data[j] + b.data[j];
            }
        }
        self.push(out, Op::LayerNormRows { x: x.0, gain: gain.0, bias: bias.0 })
    }

    /// 2D convolution over a `[H*W x C_in]` pixel-rows tensor.
    /// Weights are `[C_out x k*k*C_in]`, bias `[1 x C_out]`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        in_h: usize,
        in_w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows, in_h * in_w, "conv2d input rows != H*W");
        let in_c = xv.cols;
        let wv = self.value(w);
        assert_eq!(wv.cols, k * k * in_c, "conv2d weight cols != k*k*C_in");
        let out_c = wv.rows;
        let bv = self.value(b);
        assert_eq!(bv.cols, out_c, "conv2d bias width != C_out");
        let dims = ConvDims { in_h, in_w, in_c, out_c, k, stride, pad };
        let out = conv_forward(xv, wv, bv, &dims);
        self.push(out, Op::Conv2d { x: x.0, w: w.0, b: b.0, dims })
    }

    /// Column means: `[m x n] -> [1 x n]`.
    pub fn mean_dim0(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(1, x.cols);
        for i in 0..x.rows {
            for j in 0..x.cols {
                out.data[j] += x.at(i, j);
            }
        }
        let inv = 1.0 / x.rows as f64;
        for v in out.data.iter_mut() {
            *v *= inv;
        }
        self.push(out, Op::MeanDim0(a.0))
    }

    /// Column maxima: `[m x n] -> [1 x n]`. Ties resolve to the lowest row.
    pub fn max_dim0(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(x.rows > 0);
        let mut out = Tensor::zeros(1, x.cols);
        let mut argmax = vec![0usize; x.cols];
        for j in 0..x.cols {
            let mut best = x.at(0, j);
            let mut bi = 0;
            for i in 1..x.rows {
                if x.at(i, j) > best {
                    best = x.at(i, j);
                    bi = i;
                }
            }
            out.data[j] = best;
            argmax[j] = bi;
        }
        self.push(out, Op::MaxDim0 { x: a.0, argmax })
    }

    /// Row means: `[m x n] -> [m x 1]`.
    pub fn mean_dim1(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let inv = 1.0 / x.cols as f64;
        let data = (0..x.rows).map(|i| x.row(i).iter().sum::<f64>() * inv).collect();
        let out = Tensor { rows: x.rows, cols: 1, data };
        self.push(out, Op::MeanDim1(a.0))
    }

    /// Row maxima: `[m x n] -> [m x 1]`. Ties resolve to the lowest column.
    pub fn max_dim1(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(x.cols > 0);
        let mut data = Vec::with_capacity(x.rows);
        let mut argmax = vec![0usize; x.rows];
        for i in 0..x.rows {
            let row = x.row(i);
            let mut best = row[0];
            let mut bj = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    bj = j;
                }
            }
            data.push(best);
            argmax[i] = bj;
        }
        let out = Tensor { rows: x.rows, cols: 1, data };
        self.push(out, Op::MaxDim1 { x: a.0, argmax })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data.iter().sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a.0))
    }

    pub fn min_elem(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert!(x.same_shape(y), "min_elem shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p.min(*q)).collect();
        let out = Tensor { rows: x.rows, cols: x.cols, data };
        self.push(out, Op::MinElem(a.0, b.0))
    }

    pub fn max_elem(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert!(x.same_shape(y), "max_elem shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p.max(*q)).collect();
        let out = Tensor { rows: x.rows, cols: x.cols, data };
        self.push(out, Op::MaxElem(a.0, b.0))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp { x: a.0, lo, hi })
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Ln(a.0))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat_rows width mismatch");
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        self.push(Tensor { rows, cols, data }, Op::ConcatRows(parts.iter().map(|v| v.0).collect()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        assert!(start <= end && end <= x.rows, "slice_rows out of range");
        let data = x.data[start * x.cols..end * x.cols].to_vec();
        let out = Tensor { rows: end - start, cols: x.cols, data };
        self.push(out, Op::SliceRows { x: a.0, start, end })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows, rows, "concat_cols height mismatch");
            for i in 0..rows {
                out.data[i * cols + off..i * cols + off + t.cols].copy_from_slice(t.row(i));
            }
            off += t.cols;
        }
        self.push(out, Op::ConcatCols(parts.iter().map(|v| v.0).collect()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        assert!(start <= end && end <= x.cols, "slice_cols out of range");
        let mut out = Tensor::zeros(x.rows, end - start);
        for i in 0..x.rows {
            out.row_mut(i).copy_from_slice(&x.row(i)[start..end]);
        }
        self.push(out, Op::SliceCols { x: a.0, start, end })
    }

    /// Gather rows by index (duplicates allowed).
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(idx.len(), x.cols);
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < x.rows, "select_rows index out of range");
            out.row_mut(r).copy_from_slice(x.row(i));
        }
        self.push(out, Op::SelectRows { x: a.0, idx: idx.to_vec() })
    }

    /// Each row divided by `max(||row||_2, 1e-6)`.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for i in 0..out.rows {
            let row = out.row_mut(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        self.push(out, Op::L2NormalizeRows(a.0))
    }

    /// Identity forward; backward multiplies the gradient by `-strength`.
    pub fn grad_reverse(&mut self, a: Var, strength: f64) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::GradReverse { x: a.0, strength })
    }

    /// Emits `value` in the forward pass while routing the gradient to
    /// `grad_to` unchanged. Shapes must agree.
    pub fn straight_through(&mut self, grad_to: Var, value: Tensor) -> Var {
        assert!(self.value(grad_to).same_shape(&value), "straight_through shape mismatch");
        self.push(value, Op::StraightThrough(grad_to.0))
    }

    /// Weighted-mean cross entropy over rows of logits. `targets[i]` is the
    /// class index for row i; `class_weights`, when present, weights each row
    /// by its target class and normalizes by the total weight.
    pub fn cross_entropy_rows(
        &mut self,
        logits: Var,
        targets: &[usize],
        class_weights: Option<&[f64]>,
    ) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rows, targets.len(), "cross_entropy targets length mismatch");
        for &t in targets {
            assert!(t < x.cols, "cross_entropy target class out of range");
        }
        let mut total = 0.0;
        let mut wsum = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = x.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let w = class_weights.map_or(1.0, |cw| cw[t]);
            total += w * (lse - row[t]);
            wsum += w;
        }
        let loss = if wsum > 0.0 { total / wsum } else { 0.0 };
        let op = Op::CrossEntropyRows {
            logits: logits.0,
            targets: targets.to_vec(),
            class_weights: class_weights.map(|c| c.to_vec()),
        };
        self.push(Tensor::scalar(loss), op)
    }

    /// Reverse pass from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.apply_backward(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }

    fn accum(grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
        match &mut grads[id] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn apply_backward(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        use Op::*;
        let val = &self.nodes[id].value;
        match &self.nodes[id].op {
            Leaf => {}
            Add(a, b) => {
                Self::accum(grads, *a, g.clone());
                Self::accum(grads, *b, g.clone());
            }
            Sub(a, b) => {
                Self::accum(grads, *a, g.clone());
                Self::accum(grads, *b, g.map(|v| -v));
            }
            Mul(a, b) => {
                let (xa, xb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let da = Tensor { rows: g.rows, cols: g.cols, data: g.data.iter().zip(&xb.data).map(|(p, q)| p * q).collect() };
                let db = Tensor { rows: g.rows, cols: g.cols, data: g.data.iter().zip(&xa.data).map(|(p, q)| p * q).collect() };
                Self::accum(grads, *a, da);
                Self::accum(grads, *b, db);
            }
            Div(a, b) => {
                let (xa, xb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let da = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().zip(&xb.data).map(|(p, q)| p / q).collect(),
                };
                let db = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g
                        .data
                        .iter()
                        .zip(xa.data.iter().zip(&xb.data))
                        .map(|(p, (u, v))| -p * u / (v * v))
                        .collect(),
                };
                Self::accum(grads, *a, da);
                Self::accum(grads, *b, db);
            }
            Scale(a, s) => Self::accum(grads, *a, g.map(|v| v * s)),
            AddScalar(a) => Self::accum(grads, *a, g.clone()),
            Matmul(a, b) => {
                let (xa, xb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                Self::accum(grads, *a, g.matmul_tb(xb));
                Self::accum(grads, *b, xa.matmul_ta(g));
            }
            MatmulTb(a, b) => {
                let (xa, xb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                Self::accum(grads, *a, g.matmul(xb));
                Self::accum(grads, *b, g.matmul_ta(xa));
            }
            AddRow(a, r) => {
                Self::accum(grads, *a, g.clone());
                let mut dr = Tensor::zeros(1, g.cols);
                for i in 0..g.rows {
                    for j in 0..g.cols {
                        dr.data[j] += g.at(i, j);
                    }
                }
                Self::accum(grads, *r, dr);
            }
            MulRow(a, r) => {
                let (xa, xr) = (&self.nodes[*a].value, &self.nodes[*r].value);
                let mut da = g.clone();
                let mut dr = Tensor::zeros(1, g.cols);
                for i in 0..g.rows {
                    for j in 0..g.cols {
                        da.data[i * g.cols + j] *= xr.data[j];
                        dr.data[j] += g.at(i, j) * xa.at(i, j);
                    }
                }
                Self::accum(grads, *a, da);
                Self::accum(grads, *r, dr);
            }
            MulCol(a, c) => {
                let (xa, xc) = (&self.nodes[*a].value, &self.nodes[*c].value);
                let mut da = g.clone();
                let mut dc = Tensor::zeros(g.rows, 1);
                for i in 0..g.rows {
                    for j in 0..g.cols {
                        da.data[i * g.cols + j] *= xc.data[i];
                        dc.data[i] += g.at(i, j) * xa.at(i, j);
                    }
                }
                Self::accum(grads, *a, da);
                Self::accum(grads, *c, dc);
            }
            Relu(a) => {
                let xa = &self.nodes[*a].value;
                let data = g.data.iter().zip(&xa.data).map(|(p, q)| if *q > 0.0 { *p } else { 0.0 }).collect();
                Self::accum(grads, *a, Tensor { rows: g.rows, cols: g.cols, data });
            }
            Sigmoid(a) => {
                let data = g.data.iter().zip(&val.data).map(|(p, s)| p * s * (1.0 - s)).collect();
                Self::accum(grads, *a, Tensor { rows: g.rows, cols: g.cols, data });
            }
            SoftmaxRows(a) => {
                let mut da = Tensor::zeros(g.rows, g.cols);
                for i in 0..g.rows {
                    let s = val.row(i);
                    let gr = g.row(i);
                    let dot: f64 = s.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..g.cols {
                        da.data[i * g.cols + j] = s[j] * (gr[j] - dot);
                    }
                }
                Self::accum(grads, *a, da);
            }
            LayerNormRows { x, gain, bias } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gain].value;
                let n = xv.cols as f64;
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                let mut dg = Tensor::zeros(1, xv.cols);
                let mut db = Tensor::zeros(1, xv.cols);
                for i in 0..xv.rows {
                    let row = xv.row(i);
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let gr = g.row(i);
                    let mut sum_gdy = 0.0;
                    let mut sum_gdy_xhat = 0.0;
                    for j in 0..xv.cols {
                        let xhat = (row[j] - mean) * inv;
                        let gdy = gv.data[j] * gr[j];
                        sum_gdy += gdy;
                        sum_gdy_xhat += gdy * xhat;
                        dg.data[j] += gr[j] * xhat;
                        db.data[j] += gr[j];
                    }
                    for j in 0..xv.cols {
                        let xhat = (row[j] - mean) * inv;
                        let gdy = gv.data[j] * gr[j];
                        dx.data[i * xv.cols + j] = inv * (gdy - sum_gdy / n - xhat * sum_gdy_xhat / n);
                    }
                }
                Self::accum(grads, *x, dx);
                Self::accum(grads, *gain, dg);
                Self::accum(grads, *bias, db);
            }
            Conv2d { x, w, b, dims } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let (dx, dw, dbias) = conv_backward(xv, wv, g, dims);
                Self::accum(grads, *x, dx);
                Self::accum(grads, *w, dw);
                Self::accum(grads, *b, dbias);
            }
            MeanDim0(a) => {
                let xa = &self.nodes[*a].value;
                let inv = 1.0 / xa.rows as f64;
                let mut da = Tensor::zeros(xa.rows, xa.cols);
                for i in 0..xa.rows {
                    for j in 0..xa.cols {
                        da.data[i * xa.cols + j] = g.data[j] * inv;
                    }
                }
                Self::accum(grads, *a, da);
            }
            MaxDim0 { x, argmax } => {
                let xa = &self.nodes[*x].value;
                let mut da = Tensor::zeros(xa.rows, xa.cols);
                for (j, &i) in argmax.iter().enumerate() {
                    da.data[i * xa.cols + j] = g.data[j];
                }
                Self::accum(grads, *x, da);
            }
            MeanDim1(a) => {
                let xa = &self.nodes[*a].value;
                let inv = 1.0 / xa.cols as f64;
                let mut da = Tensor::zeros(xa.rows, xa.cols);
                for i in 0..xa.rows {
                    for j in 0..xa.cols {
                        da.data[i * xa.cols + j] = g.data[i] * inv;
                    }
                }
                Self::accum(grads, *a, da);
            }
            MaxDim1 { x, argmax } => {
                let xa = &self.nodes[*x].value;
                let mut da = Tensor::zeros(xa.rows, xa.cols);
                for (i, &j) in argmax.iter().enumerate() {
                    da.data[i * xa.cols + j] = g.data[i];
                }
                Self::accum(grads, *x, da);
            }
            SumAll(a) => {
                let xa = &self.nodes[*a].value;
                Self::accum(grads, *a, Tensor::full(xa.rows, xa.cols, g.item()));
            }
            MeanAll(a) => {
                let xa = &self.nodes[*a].value;
                Self::accum(grads, *a, Tensor::full(xa.rows, xa.cols, g.item() / xa.len() as f64));
            }
            Abs(a) => {
                let xa = &self.nodes[*a].value;
                let data = g
                    .data
                    .iter()
                    .zip(&xa.data)
                    .map(|(p, q)| if *q > 0.0 { *p } else if *q < 0.0 { -*p } else { 0.0 })
                    .collect();
                Self::accum(grads, *a, Tensor { rows: g.rows, cols: g.cols, data });
            }
            MinElem(a, b) => {
                let (xa, xb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let mut da = Tensor::zeros(g.rows, g.cols);
                let mut db = Tensor::zeros(g.rows, g.cols);
                for i in 0..g.len() {
                    if xa.data[i] <= xb.data[i] {
                        da.data[i] = g.data[i];
                    } else {
                        db.data[i] = g.data[i];
                    }
                }
                Self::accum(grads, *a, da);
                Self::accum(grads, *b, db);
            }
            MaxElem(a, b) => {
                let (xa, xb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let mut da = Tensor::zeros(g.rows, g.cols);
                let mut db = Tensor::zeros(g.rows, g.cols);
                for i in 0..g.len() {
                    if xa.data[i] >= xb.data[i] {
                        da.data[i] = g.data[i];
                    } else {
                        db.data[i] = g.data[i];
                    }
                }
                Self::accum(grads, *a, da);
                Self::accum(grads, *b, db);
            }
            Clamp { x, lo, hi } => {
                let xa = &self.nodes[*x].value;
                let data = g
                    .data
                    .iter()
                    .zip(&xa.data)
                    .map(|(p, q)| if *q >= *lo && *q <= *hi { *p } else { 0.0 })
                    .collect();
                Self::accum(grads, *x, Tensor { rows: g.rows, cols: g.cols, data });
            }
            Ln(a) => {
                let xa = &self.nodes[*a].value;
                let data = g.data.iter().zip(&xa.data).map(|(p, q)| p / q).collect();
                Self::accum(grads, *a, Tensor { rows: g.rows, cols: g.cols, data });
            }
            ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.rows;
                    let cols = self.nodes[p].value.cols;
                    let data = g.data[start * cols..(start + rows) * cols].to_vec();
                    Self::accum(grads, p, Tensor { rows, cols, data });
                    start += rows;
                }
            }
            SliceRows { x, start, end } => {
                let xa = &self.nodes[*x].value;
                let mut da = Tensor::zeros(xa.rows, xa.cols);
                da.data[start * xa.cols..end * xa.cols].copy_from_slice(&g.data);
                Self::accum(grads, *x, da);
            }
            ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let t = &self.nodes[p].value;
                    let mut dp = Tensor::zeros(t.rows, t.cols);
                    for i in 0..t.rows {
                        dp.row_mut(i).copy_from_slice(&g.row(i)[off..off + t.cols]);
                    }
                    Self::accum(grads, p, dp);
                    off += t.cols;
                }
            }
            SliceCols { x, start, end } => {
                let xa = &self.nodes[*x].value;
                let mut da = Tensor::zeros(xa.rows, xa.cols);
                for i in 0..xa.rows {
                    da.row_mut(i)[*start..*end].copy_from_slice(g.row(i));
                }
                Self::accum(grads, *x, da);
            }
            SelectRows { x, idx } => {
                let xa = &self.nodes[*x].value;
                let mut da = Tensor::zeros(xa.rows, xa.cols);
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..xa.cols {
                        da.data[i * xa.cols + j] += g.at(r, j);
                    }
                }
                Self::accum(grads, *x, da);
            }
            L2NormalizeRows(a) => {
                let xa = &self.nodes[*a].value;
                let mut da = Tensor::zeros(xa.rows, xa.cols);
                for i in 0..xa.rows {
                    let row = xa.row(i);
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let d = n.max(NORM_FLOOR);
                    let gr = g.row(i);
                    let dot: f64 = row.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..xa.cols {
                        let mut v = gr[j] / d;
                        if n > NORM_FLOOR {
                            v -= row[j] * dot / (n * d * d);
                        }
                        da.data[i * xa.cols + j] = v;
                    }
                }
                Self::accum(grads, *a, da);
            }
            GradReverse { x, strength } => {
                Self::accum(grads, *x, g.map(|v| -strength * v));
            }
            StraightThrough(a) => {
                Self::accum(grads, *a, g.clone());
            }
            CrossEntropyRows { logits, targets, class_weights } => {
                let xv = &self.nodes[*logits].value;
                let gscale = g.item();
                let mut wsum = 0.0;
                for &t in targets {
                    wsum += class_weights.as_ref().map_or(1.0, |cw| cw[t]);
                }
                let mut da = Tensor::zeros(xv.rows, xv.cols);
                if wsum > 0.0 {
                    for (i, &t) in targets.iter().enumerate() {
                        let row = xv.row(i);
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
                        let w = class_weights.as_ref().map_or(1.0, |cw| cw[t]);
                        for j in 0..xv.cols {
                            let p = (row[j] - m).exp() / denom;
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            da.data[i * xv.cols + j] = gscale * w * (p - onehot) / wsum;
                        }
                    }
                }
                Self::accum(grads, *logits, da);
            }
        }
    }
}

#[inline]
fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, d: &ConvDims) -> Tensor {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut out = Tensor::zeros(oh * ow, d.out_c);
    for oy in 0..oh {
        for ox in 0..ow {
            let orow = (oy * ow + ox) * d.out_c;
            for oc in 0..d.out_c {
                let wrow = oc * w.cols;
                let mut s = b.data[oc];
                for ky in 0..d.k {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.in_h as isize {
                        continue;
                    }
                    for kx in 0..d.k {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix < 0 || ix >= d.in_w as isize {
                            continue;
                        }
                        let xoff = (iy as usize * d.in_w + ix as usize) * d.in_c;
                        let woff = wrow + (ky * d.k + kx) * d.in_c;
                        for ic in 0..d.in_c {
                            s += x.data[xoff + ic] * w.data[woff + ic];
                        }
                    }
                }
                out.data[orow + oc] = s;
            }
        }
    }
    out
}

fn conv_backward(x: &Tensor, w: &Tensor, g: &Tensor, d: &ConvDims) -> (Tensor, Tensor, Tensor) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut dx = Tensor::zeros(x.rows, x.cols);
    let mut dw = Tensor::zeros(w.rows, w.cols);
    let mut db = Tensor::zeros(1, d.out_c);
    for oy in 0..oh {
        for ox in 0..ow {
            let orow = (oy * ow + ox) * d.out_c;
            for oc in 0..d.out_c {
                let go = g.data[orow + oc];
                if go == 0.0 {
                    continue;
                }
                db.data[oc] += go;
                let wrow = oc * w.cols;
                for ky in 0..d.k {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.in_h as isize {
                        continue;
                    }
                    for kx in 0..d.k {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix < 0 || ix >= d.in_w as isize {
                            continue;
                        }
                        let xoff = (iy as usize * d.in_w + ix as usize) * d.in_c;
                        let woff = wrow + (ky * d.k + kx) * d.in_c;
                        for ic in 0..d.in_c {
                            dx.data[xoff + ic] += go * w.data[woff + ic];
                            dw.data[woff + ic] += go * x.data[xoff + ic];
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}
