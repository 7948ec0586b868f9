//! Tensor-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass. [`Tape::backward`] then walks the record in reverse and
//! returns the gradient of a scalar output with respect to every node.
//! Parameters are borrowed from a [`ParamSet`] and never copied.

use std::borrow::Cow;

use crate::params::{ParamGrads, ParamId, ParamSet};
use crate::tensor::{self, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Pow(Var, f64),
    Gather(Var, Vec<usize>),
    ScatterAdd(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>, usize),
    HeadDot(Var, Var, usize),
    HeadScale(Var, Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix, inv_std: Vec<f64> },
    MeanRows(Var),
    SumRows(Var),
    SumAll(Var),
    PlackettLuce(Var),
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    values: Vec<Cow<'p, Matrix>>,
    ops: Vec<Op>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self { params, values: Vec::with_capacity(256), ops: Vec::with_capacity(256), param_vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.values.push(Cow::Owned(value));
        self.ops.push(op);
        Var(self.ops.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.values[v.0]
    }

    /// Leaf node holding an owned matrix. Its gradient is available after backward.
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input)
    }

    /// Leaf node that borrows a matrix for the tape's lifetime.
    pub fn input_ref(&mut self, m: &'p Matrix) -> Var {
        self.values.push(Cow::Borrowed(m));
        self.ops.push(Op::Input);
        Var(self.ops.len() - 1)
    }

    /// Node for a named parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        let i = id.index();
        if let Some(v) = self.param_vars[i] {
            return v;
        }
        self.values.push(Cow::Borrowed(self.params.get(id)));
        self.ops.push(Op::Param);
        let v = Var(self.ops.len() - 1);
        self.param_vars[i] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = tensor::matmul(self.value(a), self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = tensor::matmul_nt(self.value(a), self.value(b));
        self.push(out, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Matrix::from_vec(x.rows(), x.cols(), data);
        self.push(out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Matrix::from_vec(x.rows(), x.cols(), data);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1 x m` row to every row of an `n x m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        let mut out = self.value(a).clone();
        assert_eq!(out.cols(), r.cols());
        let rd = r.data().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&rd) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let c = self.value(col);
        assert_eq!(c.cols(), 1);
        let mut out = self.value(a).clone();
        assert_eq!(out.rows(), c.rows());
        let cd = c.data().to_vec();
        for (i, s) in cd.iter().enumerate() {
            for o in out.row_mut(i) {
                *o *= s;
            }
        }
        self.push(out, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|v| tensor::leaky_relu(v, slope));
        self.push(out, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(tensor::sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Elementwise power; inputs must be positive when `p` is fractional.
    pub fn pow(&mut self, a: Var, p: f64) -> Var {
        let out = self.value(a).map(|v| v.powf(p));
        self.push(out, Op::Pow(a, p))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let out = self.value(a).gather_rows(&idx);
        self.push(out, Op::Gather(a, idx))
    }

    /// Sums row `e` of `a` into row `idx[e]` of an `n_out x m` result.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Vec<usize>, n_out: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows(), idx.len());
        let mut out = Matrix::zeros(n_out, x.cols());
        for (e, &t) in idx.iter().enumerate() {
            for (o, v) in out.row_mut(t).iter_mut().zip(x.row(e)) {
                *o += v;
            }
        }
        self.push(out, Op::ScatterAdd(a, idx))
    }

    /// Column-wise softmax over the rows sharing a segment id.
    pub fn segment_softmax(&mut self, a: Var, seg: Vec<usize>, n_seg: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows(), seg.len());
        let k = x.cols();
        let mut maxes = vec![f64::NEG_INFINITY; n_seg * k];
        for (e, &s) in seg.iter().enumerate() {
            for c in 0..k {
                let m = &mut maxes[s * k + c];
                *m = m.max(x.get(e, c));
            }
        }
        let mut out = Matrix::zeros(x.rows(), k);
        let mut sums = vec![0.0; n_seg * k];
        for (e, &s) in seg.iter().enumerate() {
            for c in 0..k {
                let v = (x.get(e, c) - maxes[s * k + c]).exp();
                out.set(e, c, v);
                sums[s * k + c] += v;
            }
        }
        for (e, &s) in seg.iter().enumerate() {
            for c in 0..k {
                let v = out.get(e, c) / sums[s * k + c];
                out.set(e, c, v);
            }
        }
        self.push(out, Op::SegmentSoftmax(a, seg, n_seg))
    }

    /// Per-head dot product: `out[e, h] = Σ_{c ∈ head h} a[e, c] · w[c]` for a `1 x d` weight row.
    pub fn head_dot(&mut self, a: Var, w: Var, heads: usize) -> Var {
        let (x, wv) = (self.value(a), self.value(w));
        assert_eq!(wv.rows(), 1);
        assert_eq!(x.cols(), wv.cols());
        assert_eq!(x.cols() % heads, 0);
        let dh = x.cols() / heads;
        let mut out = Matrix::zeros(x.rows(), heads);
        for e in 0..x.rows() {
            let row = x.row(e);
            for h in 0..heads {
                let s = tensor::dot(&row[h * dh..(h + 1) * dh], &wv.data()[h * dh..(h + 1) * dh]);
                out.set(e, h, s);
            }
        }
        self.push(out, Op::HeadDot(a, w, heads))
    }

    /// Scales each head block of row `e` by `s[e, h]`.
    pub fn head_scale(&mut self, a: Var, s: Var, heads: usize) -> Var {
        let (x, sv) = (self.value(a), self.value(s));
        assert_eq!(sv.shape(), (x.rows(), heads));
        let dh = x.cols() / heads;
        let mut out = x.clone();
        for e in 0..x.rows() {
            let row = out.row_mut(e);
            for h in 0..heads {
                let f = sv.get(e, h);
                for v in &mut row[h * dh..(h + 1) * dh] {
                    *v *= f;
                }
            }
        }
        self.push(out, Op::HeadScale(a, s, heads))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols());
        let mut out = Matrix::zeros(x.rows(), len);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in &parts {
                let x = self.value(p);
                assert_eq!(x.rows(), rows);
                out.row_mut(r)[off..off + x.cols()].copy_from_slice(x.row(r));
                off += x.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let x = self.value(p);
            assert_eq!(x.cols(), cols);
            data.extend_from_slice(x.data());
            rows += x.rows();
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Row-wise layer normalization with `1 x m` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let (n, m) = xv.shape();
        let mut xhat = Matrix::zeros(n, m);
        let mut inv_std = Vec::with_capacity(n);
        let mut out = Matrix::zeros(n, m);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is);
            for c in 0..m {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g.get(0, c) + b.get(0, c));
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (o, v) in out.row_mut(0).iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        out.scale_assign(1.0 / x.rows() as f64);
        self.push(out, Op::MeanRows(a))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (o, v) in out.row_mut(0).iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        self.push(out, Op::SumRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Matrix::scalar(s), Op::SumAll(a))
    }

    /// Negative log Plackett-Luce likelihood of an `n x 1` column of
    /// log-scores listed in ranked order (best first).
    pub fn plackett_luce_nll(&mut self, scores: Var) -> Var {
        let s = self.value(scores);
        assert_eq!(s.cols(), 1);
        let suffix = suffix_log_sum_exp(s.data());
        let loss: f64 = s.data().iter().zip(&suffix).map(|(v, l)| l - v).sum();
        self.push(Matrix::scalar(loss), Op::PlackettLuce(scores))
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar output");
        self.backward_seeded(output, Matrix::scalar(1.0))
    }

    /// Backward pass seeded with an arbitrary upstream gradient for `output`.
    pub fn backward_seeded(&self, output: Var, seed: Matrix) -> Gradients {
        assert_eq!(self.value(output).shape(), seed.shape());
        let mut grads: Vec<Option<Matrix>> = vec![None; self.ops.len()];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Folds the parameter gradients of a backward pass into `acc`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, acc: &mut ParamGrads) {
        for (pid, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = grads.wrt(*v) {
                    acc.add(ParamId::from_index(pid), g);
                }
            }
        }
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &self.ops[i] {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = Matrix::zeros(av.rows(), av.cols());
                tensor::matmul_nt_acc(g, bv, &mut da);
                acc(grads, *a, da);
                let mut db = Matrix::zeros(bv.rows(), bv.cols());
                tensor::matmul_tn_acc(av, g, &mut db);
                acc(grads, *b, db);
            }
            Op::MatMulNt(a, b) => {
                // c = a bᵀ : da = g b, db = gᵀ a
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = tensor::matmul(g, bv);
                acc(grads, *a, da);
                let mut db = Matrix::zeros(bv.rows(), bv.cols());
                tensor::matmul_tn_acc(g, av, &mut db);
                acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = zip_map(g, bv, |p, q| p * q);
                let db = zip_map(g, av, |p, q| p * q);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                let mut dr = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in dr.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(grads, *row, dr);
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                let mut da = g.clone();
                let mut dc = Matrix::zeros(cv.rows(), 1);
                for r in 0..g.rows() {
                    let s = cv.get(r, 0);
                    dc.set(r, 0, tensor::dot(g.row(r), av.row(r)));
                    for v in da.row_mut(r) {
                        *v *= s;
                    }
                }
                acc(grads, *a, da);
                acc(grads, *col, dc);
            }
            Op::Scale(a, c) => acc(grads, *a, g.map(|v| v * c)),
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let da = zip_map(g, x, |gv, xv| if xv > 0.0 { gv } else { gv * slope });
                acc(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = self.value(Var(i));
                let da = zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv));
                acc(grads, *a, da);
            }
            Op::Pow(a, p) => {
                let x = self.value(*a);
                let da = zip_map(g, x, |gv, xv| gv * p * xv.powf(p - 1.0));
                acc(grads, *a, da);
            }
            Op::Gather(a, idx) => {
                let x = self.value(*a);
                let mut da = Matrix::zeros(x.rows(), x.cols());
                for (e, &t) in idx.iter().enumerate() {
                    for (o, v) in da.row_mut(t).iter_mut().zip(g.row(e)) {
                        *o += v;
                    }
                }
                acc(grads, *a, da);
            }
            Op::ScatterAdd(a, idx) => acc(grads, *a, g.gather_rows(idx)),
            Op::SegmentSoftmax(a, seg, n_seg) => {
                let y = self.value(Var(i));
                let k = y.cols();
                let mut dots = vec![0.0; n_seg * k];
                for (e, &s) in seg.iter().enumerate() {
                    for c in 0..k {
                        dots[s * k + c] += y.get(e, c) * g.get(e, c);
                    }
                }
                let mut da = Matrix::zeros(y.rows(), k);
                for (e, &s) in seg.iter().enumerate() {
                    for c in 0..k {
                        da.set(e, c, y.get(e, c) * (g.get(e, c) - dots[s * k + c]));
                    }
                }
                acc(grads, *a, da);
            }
            Op::HeadDot(a, w, heads) => {
                let (x, wv) = (self.value(*a), self.value(*w));
                let dh = x.cols() / heads;
                let mut da = Matrix::zeros(x.rows(), x.cols());
                let mut dw = Matrix::zeros(1, x.cols());
                for e in 0..x.rows() {
                    for c in 0..x.cols() {
                        let ge = g.get(e, c / dh);
                        da.set(e, c, ge * wv.get(0, c));
                        dw.data_mut()[c] += ge * x.get(e, c);
                    }
                }
                acc(grads, *a, da);
                acc(grads, *w, dw);
            }
            Op::HeadScale(a, s, heads) => {
                let (x, sv) = (self.value(*a), self.value(*s));
                let dh = x.cols() / heads;
                let mut da = Matrix::zeros(x.rows(), x.cols());
                let mut ds = Matrix::zeros(x.rows(), *heads);
                for e in 0..x.rows() {
                    for c in 0..x.cols() {
                        let h = c / dh;
                        da.set(e, c, g.get(e, c) * sv.get(e, h));
                        let cur = ds.get(e, h);
                        ds.set(e, h, cur + g.get(e, c) * x.get(e, c));
                    }
                }
                acc(grads, *a, da);
                acc(grads, *s, ds);
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let mut da = Matrix::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    da.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Matrix::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    acc(grads, p, dp);
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.value(p).shape();
                    let dp = Matrix::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec());
                    acc(grads, p, dp);
                    off += r;
                }
            }
            Op::SoftmaxRows(a) => {
                let y = self.value(Var(i));
                let mut da = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let d = tensor::dot(y.row(r), g.row(r));
                    for c in 0..y.cols() {
                        da.set(r, c, y.get(r, c) * (g.get(r, c) - d));
                    }
                }
                acc(grads, *a, da);
            }
            Op::LogSoftmaxRows(a) => {
                let y = self.value(Var(i));
                let mut da = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gs: f64 = g.row(r).iter().sum();
                    for c in 0..y.cols() {
                        da.set(r, c, g.get(r, c) - y.get(r, c).exp() * gs);
                    }
                }
                acc(grads, *a, da);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = self.value(*gain);
                let (n, m) = xhat.shape();
                let mut dx = Matrix::zeros(n, m);
                let mut dg = Matrix::zeros(1, m);
                let mut db = Matrix::zeros(1, m);
                let mut dxhat = vec![0.0; m];
                for r in 0..n {
                    for c in 0..m {
                        let gr = g.get(r, c);
                        dg.data_mut()[c] += gr * xhat.get(r, c);
                        db.data_mut()[c] += gr;
                        dxhat[c] = gr * gv.get(0, c);
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / m as f64;
                    let mean_dx = dxhat.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                    for c in 0..m {
                        dx.set(r, c, inv_std[r] * (dxhat[c] - mean_d - xhat.get(r, c) * mean_dx));
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gain, dg);
                acc(grads, *bias, db);
            }
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let scale = 1.0 / x.rows() as f64;
                let mut da = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for (o, v) in da.row_mut(r).iter_mut().zip(g.row(0)) {
                        *o = v * scale;
                    }
                }
                acc(grads, *a, da);
            }
            Op::SumRows(a) => {
                let x = self.value(*a);
                let mut da = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    da.row_mut(r).copy_from_slice(g.row(0));
                }
                acc(grads, *a, da);
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                acc(grads, *a, Matrix::filled(x.rows(), x.cols(), g.item()));
            }
            Op::PlackettLuce(a) => {
                let s = self.value(*a);
                let n = s.rows();
                let suffix = suffix_log_sum_exp(s.data());
                let up = g.item();
                let mut da = Matrix::zeros(n, 1);
                for j in 0..n {
                    // d/ds_j Σ_k lse(s_k..s_N) = Σ_{k ≤ j} exp(s_j − lse_k)
                    let mut d = -1.0;
                    for lse in suffix.iter().take(j + 1) {
                        d += (s.data()[j] - lse).exp();
                    }
                    da.set(j, 0, up * d);
                }
                acc(grads, *a, da);
            }
        }
    }
}

fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

/// `out[k] = log Σ_{j ≥ k} exp(s_j)`
fn suffix_log_sum_exp(s: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; s.len()];
    let mut running = f64::NEG_INFINITY;
    for k in (0..s.len()).rev() {
        let (hi, lo) = if running > s[k] { (running, s[k]) } else { (s[k], running) };
        running = if lo == f64::NEG_INFINITY { hi } else { hi + (lo - hi).exp().ln_1p() };
        out[k] = running;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central finite-difference check of d(sum(w ∘ f(x)))/dx for every input.
    fn check(inputs: Vec<Matrix>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let params = ParamSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |xs: &[Matrix], weights: Option<&Matrix>| -> (f64, Matrix, Vec<Option<Matrix>>) {
            let mut tape = Tape::new(&params);
            let vars: Vec<Var> = xs.iter().map(|m| tape.input(m.clone())).collect();
            let out = f(&mut tape, &vars);
            let shape = tape.value(out).shape();
            let w = weights.cloned().unwrap_or_else(|| Matrix::filled(shape.0, shape.1, 1.0));
            let value: f64 = tape.value(out).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
            let grads = tape.backward_seeded(out, w.clone());
            (value, w, vars.iter().map(|v| grads.wrt(*v).cloned()).collect())
        };
        let shape_probe = eval(&inputs, None).1;
        let weights = random(&mut rng, shape_probe.rows(), shape_probe.cols());
        let (_, _, analytic) = eval(&inputs, Some(&weights));
        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            for j in 0..x.data().len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[j] -= h;
                let fd = (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * h);
                let an = analytic[k].as_ref().map_or(0.0, |g| g.data()[j]);
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "input {k} entry {j}: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn matmul_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2)], |t, v| t.matmul(v[0], v[1]));
        check(vec![random(&mut rng, 3, 4), random(&mut rng, 5, 4)], |t, v| t.matmul_nt(v[0], v[1]));
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 3, 4);
        check(vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
        check(vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
        check(vec![a.clone()], |t, v| t.sigmoid(v[0]));
        check(vec![a.clone()], |t, v| t.leaky_relu(v[0], 0.2));
        check(vec![a.map(|x| x.abs() + 0.5)], |t, v| t.pow(v[0], -0.5));
        check(vec![a.clone(), random(&mut rng, 1, 4)], |t, v| t.add_row(v[0], v[1]));
        check(vec![a.clone(), random(&mut rng, 3, 1)], |t, v| t.mul_col(v[0], v[1]));
    }

    #[test]
    fn indexing_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 4, 3);
        check(vec![a.clone()], |t, v| t.gather_rows(v[0], vec![3, 0, 3, 1]));
        check(vec![a.clone()], |t, v| t.scatter_add_rows(v[0], vec![1, 0, 1, 1], 2));
        check(vec![a.clone()], |t, v| t.segment_softmax(v[0], vec![0, 1, 0, 0], 2));
        check(vec![a.clone()], |t, v| t.slice_cols(v[0], 1, 2));
        check(vec![a.clone(), random(&mut rng, 4, 2)], |t, v| t.concat_cols(vec![v[0], v[1]]));
        check(vec![a.clone(), random(&mut rng, 2, 3)], |t, v| t.concat_rows(vec![v[0], v[1]]));
    }

    #[test]
    fn head_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(vec![random(&mut rng, 3, 6), random(&mut rng, 1, 6)], |t, v| t.head_dot(v[0], v[1], 2));
        check(vec![random(&mut rng, 3, 6), random(&mut rng, 3, 3)], |t, v| t.head_scale(v[0], v[1], 3));
    }

    #[test]
    fn normalizations_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, 3, 5);
        check(vec![a.clone()], |t, v| t.softmax_rows(v[0]));
        check(vec![a.clone()], |t, v| t.log_softmax_rows(v[0]));
        check(vec![a.clone(), random(&mut rng, 1, 5), random(&mut rng, 1, 5)], |t, v| t.layer_norm(v[0], v[1], v[2]));
        check(vec![a.clone()], |t, v| t.mean_rows(v[0]));
        check(vec![a.clone()], |t, v| t.sum_rows(v[0]));
        check(vec![a.clone()], |t, v| t.sum_all(v[0]));
        check(vec![random(&mut rng, 5, 1)], |t, v| t.plackett_luce_nll(v[0]));
    }

    #[test]
    fn plackett_luce_matches_hand_value() {
        let params = ParamSet::default();
        let mut tape = Tape::new(&params);
        let s = tape.input(Matrix::column(vec![0.8f64.ln(), 0.4f64.ln()]));
        let l = tape.plackett_luce_nll(s);
        let expected = -(0.8f64 / 1.2).ln();
        assert!((tape.value(l).item() - expected).abs() < 1e-12);
        assert!((expected - 0.4055).abs() < 1e-4);
    }

    #[test]
    fn shared_node_gradients_accumulate() {
        let params = ParamSet::default();
        let mut tape = Tape::new(&params);
        let x = tape.input(Matrix::scalar(3.0));
        let y = tape.mul(x, x);
        let g = tape.backward(y);
        assert_eq!(g.wrt(x).unwrap().item(), 6.0);
    }
}
