//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value and the recipe
//! for its vector-Jacobian product. Nodes only reference earlier nodes, so the
//! tape is always in topological order and `backward` is a single reverse
//! sweep.

use crate::error::{shape_err, Error, Result};
use crate::params::ParamId;
use crate::scalar::Scalar;
use crate::tensor::{
    gemm_nn, gemm_nt, gemm_tn, log_softmax_in_place, min_max, normalize_stats, sigmoid,
    softmax_in_place, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulCol(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    MeanRows(Var),
    MaxRows {
        x: Var,
        arg: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    MinMaxRows {
        x: Var,
        // (argmin, argmax, span) per row; span 0 marks a degenerate row
        stats: Vec<(usize, usize, T)>,
    },
    CosineRows {
        a: Var,
        b: Var,
        norms_a: Vec<T>,
        norm_b: T,
    },
    Nll {
        logp: Var,
        targets: Vec<Option<usize>>,
    },
    Bce {
        p: Var,
        y: Vec<T>,
    },
    Mse {
        x: Var,
        target: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Floor applied to vector norms in cosine similarity.
pub const NORM_FLOOR: f64 = 1e-12;
/// Probability clamp for binary cross entropy.
pub const PROB_CLAMP: f64 = 1e-12;

/// Recorded computation graph of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. It is differentiated iff `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let g = value.requires_grad();
        self.push(value, Op::Leaf, g)
    }

    /// Records a constant input that never receives a gradient.
    pub fn constant(&mut self, mut value: Tensor<T>) -> Var {
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, false)
    }

    /// Binds a model parameter, reusing the node if already bound.
    pub fn param(&mut self, id: ParamId, value: &Tensor<T>) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param, true);
        self.params.push((id, v));
        v
    }

    pub fn bound_params(&self) -> &[(ParamId, Var)] {
        &self.params
    }

    /// Same value, no gradient path back to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return shape_err("matmul", self.shape(a), self.shape(b));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out, false);
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), g))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return shape_err("matmul_nt", self.shape(a), self.shape(b));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), &mut out, false);
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b), g))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return shape_err(name, self.shape(a), self.shape(b));
        }
        let (m, n) = self.dims(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, data)?, op, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(row) != (1, n) {
            return shape_err("add_row", self.shape(a), self.shape(row));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n.max(1)) {
            for (x, &b) in chunk.iter_mut().zip(r) {
                *x += b;
            }
        }
        let g = self.needs(a) || self.needs(row);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::AddRow(a, row), g))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let g = self.needs(a);
        self.push(value, Op::Scale(a, c), g)
    }

    /// Multiplies row `i` of an `m x n` matrix by entry `i` of an `m x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(col) != (m, 1) {
            return shape_err("mul_col", self.shape(a), self.shape(col));
        }
        let c = self.value(col).data();
        let mut data = self.value(a).data().to_vec();
        for (i, chunk) in data.chunks_mut(n.max(1)).enumerate().take(m) {
            for x in chunk.iter_mut() {
                *x *= c[i];
            }
        }
        let g = self.needs(a) || self.needs(col);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::MulCol(a, col), g))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let g = self.needs(a);
        self.push(value, Op::Relu(a), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let g = self.needs(a);
        self.push(value, Op::Sigmoid(a), g)
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n.max(1)).take(m) {
            softmax_in_place(row);
        }
        let g = self.needs(a);
        let value = Tensor::matrix(m, n, data).expect("same extent");
        self.push(value, Op::Softmax(a), g)
    }

    /// Row-wise softmax where entry `(i, j)` is masked out whenever
    /// `j > i + offset`. Masked logits are replaced by a large negative
    /// constant so the result stays finite and their weights are exactly 0.
    pub fn causal_softmax_rows(&mut self, a: Var, offset: usize) -> Var {
        let (m, n) = self.dims(a);
        let mut data = self.value(a).data().to_vec();
        for (i, row) in data.chunks_mut(n.max(1)).enumerate().take(m) {
            let keep = (i + offset + 1).min(n);
            softmax_in_place(&mut row[..keep]);
            for x in &mut row[keep..] {
                *x = T::zero();
            }
        }
        let g = self.needs(a);
        let value = Tensor::matrix(m, n, data).expect("same extent");
        // masked entries have zero output, so the shared softmax VJP gives
        // them zero gradient as well
        self.push(value, Op::Softmax(a), g)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n.max(1)).take(m) {
            log_softmax_in_place(row);
        }
        let g = self.needs(a);
        let value = Tensor::matrix(m, n, data).expect("same extent");
        self.push(value, Op::LogSoftmax(a), g)
    }

    /// Layer normalization of every row with shared `1 x n` gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(gain) != (1, n) || self.dims(bias) != (1, n) {
            return shape_err("layer_norm", self.shape(x), self.shape(gain));
        }
        if n < 2 {
            return Err(Error::Invalid(format!(
                "layer norm needs at least 2 channels, got {n}"
            )));
        }
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let (h, inv) = normalize_stats(self.value(x).row_slice(i), eps);
            xhat.extend(h);
            inv_std.push(inv);
        }
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gv[i % n] + bv[i % n])
            .collect();
        let g = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            g,
        ))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start > end || end > m {
            return shape_err("slice_rows", self.shape(a), &[start, end]);
        }
        let data = self.value(a).data()[start * n..end * n].to_vec();
        let g = self.needs(a);
        Ok(self.push(Tensor::matrix(end - start, n, data)?, Op::SliceRows(a, start), g))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start > end || end > n {
            return shape_err("slice_cols", self.shape(a), &[start, end]);
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let g = self.needs(a);
        Ok(self.push(Tensor::matrix(m, w, data)?, Op::SliceCols(a, start), g))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map(|&p| self.dims(p).1).ok_or(Error::Empty("concat_rows"))?;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return shape_err("concat_rows", self.shape(parts[0]), self.shape(p));
            }
            data.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let g = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::ConcatRows(parts.to_vec()), g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts.first().map(|&p| self.dims(p).0).ok_or(Error::Empty("concat_cols"))?;
        let mut n = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return shape_err("concat_cols", self.shape(parts[0]), self.shape(p));
            }
            n += pn;
        }
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let g = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::ConcatCols(parts.to_vec()), g))
    }

    /// Builds output row `r` by concatenating input rows
    /// `index[r * group .. (r + 1) * group]`. With `group == 1` this is an
    /// embedding lookup; larger groups express non-overlapping patch
    /// convolutions as gather + matmul.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>, group: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if group == 0 || !index.len().is_multiple_of(group) {
            return Err(Error::Invalid(format!(
                "gather of {} indices in groups of {group}",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(Error::IndexOutOfRange {
                what: "gather row",
                index: bad,
                len: m,
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in &index {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rows = index.len() / group;
        let g = self.needs(x);
        Ok(self.push(
            Tensor::matrix(rows, group * n, data)?,
            Op::Gather { x, index },
            g,
        ))
    }

    /// Column means as a `1 x n` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if m == 0 {
            return Err(Error::Empty("mean_rows"));
        }
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(self.value(a).row_slice(i)) {
                *o += v;
            }
        }
        let inv = T::one() / T::from_usize(m).unwrap();
        out.iter_mut().for_each(|v| *v *= inv);
        let g = self.needs(a);
        Ok(self.push(Tensor::row(out), Op::MeanRows(a), g))
    }

    /// Column maxima as a `1 x n` row. Ties route the gradient to the first row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if m == 0 {
            return Err(Error::Empty("max_rows"));
        }
        let v = self.value(a);
        let mut out = v.row_slice(0).to_vec();
        let mut arg = vec![0; n];
        for i in 1..m {
            for (j, &x) in v.row_slice(i).iter().enumerate() {
                if x > out[j] {
                    out[j] = x;
                    arg[j] = i;
                }
            }
        }
        let g = self.needs(a);
        Ok(self.push(Tensor::row(out), Op::MaxRows { x: a, arg }, g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let g = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::Empty("mean"));
        }
        let s = self.value(a).data().iter().copied().sum::<T>() / T::from_usize(n).unwrap();
        let g = self.needs(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), g))
    }

    /// Row-wise ReLU then min-max normalization; rows that are constant after
    /// the ReLU become zero (and pass no gradient).
    pub fn relu_min_max_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        let mut stats = Vec::with_capacity(m);
        for i in 0..m {
            let row: Vec<T> = src[i * n..(i + 1) * n]
                .iter()
                .map(|v| v.max(T::zero()))
                .collect();
            let (lo, hi) = min_max(&row);
            let span = hi - lo;
            let lo_i = row.iter().position(|&v| v == lo).unwrap_or(0);
            let hi_i = row.iter().position(|&v| v == hi).unwrap_or(0);
            if span > T::zero() {
                for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&row) {
                    *o = (v - lo) / span;
                }
                stats.push((lo_i, hi_i, span));
            } else {
                stats.push((lo_i, hi_i, T::zero()));
            }
        }
        let g = self.needs(a);
        let value = Tensor::matrix(m, n, out).expect("same extent");
        self.push(value, Op::MinMaxRows { x: a, stats }, g)
    }

    /// Cosine similarity of every row of `a` (`m x d`) with the row `b`
    /// (`1 x d`), as an `m x 1` column. Norms are floored at [`NORM_FLOOR`].
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = self.dims(a);
        if self.dims(b) != (1, d) {
            return shape_err("cosine_rows", self.shape(a), self.shape(b));
        }
        let floor = T::lit(NORM_FLOOR);
        let bv = self.value(b).data();
        let norm_b = bv.iter().map(|&x| x * x).sum::<T>().sqrt();
        let mut norms_a = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let r = self.value(a).row_slice(i);
            let na = r.iter().map(|&x| x * x).sum::<T>().sqrt();
            let dot: T = r.iter().zip(bv).map(|(&x, &y)| x * y).sum();
            out.push(dot / (na.max(floor) * norm_b.max(floor)));
            norms_a.push(na);
        }
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::matrix(m, 1, out)?,
            Op::CosineRows {
                a,
                b,
                norms_a,
                norm_b,
            },
            g,
        ))
    }

    /// Mean negative log-likelihood over rows with a target.
    pub fn nll(&mut self, logp: Var, targets: Vec<Option<usize>>) -> Result<Var> {
        let (m, n) = self.dims(logp);
        if targets.len() != m {
            return shape_err("nll", self.shape(logp), &[targets.len()]);
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Empty("nll targets"));
        }
        let v = self.value(logp).data();
        let mut total = T::zero();
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= n {
                    return Err(Error::IndexOutOfRange {
                        what: "target",
                        index: t,
                        len: n,
                    });
                }
                total -= v[i * n + t];
            }
        }
        let loss = total / T::from_usize(count).unwrap();
        let g = self.needs(logp);
        Ok(self.push(Tensor::scalar(loss), Op::Nll { logp, targets }, g))
    }

    /// Mean binary cross entropy of probabilities against 0/1 targets.
    pub fn bce(&mut self, p: Var, y: Vec<T>) -> Result<Var> {
        let pv = self.value(p).data();
        if pv.len() != y.len() {
            return shape_err("bce", self.shape(p), &[y.len()]);
        }
        if y.is_empty() {
            return Err(Error::Empty("bce"));
        }
        let loss = bce_value(pv, &y);
        let g = self.needs(p);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { p, y }, g))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: Vec<T>) -> Result<Var> {
        let xv = self.value(x).data();
        if xv.len() != target.len() {
            return shape_err("mse", self.shape(x), &[target.len()]);
        }
        if target.is_empty() {
            return Err(Error::Empty("mse"));
        }
        let loss = xv
            .iter()
            .zip(&target)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / T::from_usize(target.len()).unwrap();
        let g = self.needs(x);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { x, target }, g))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let seed = &self.nodes[loss.0].value;
        if seed.numel() != 1 {
            return Err(Error::NonScalarSeed(seed.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.vjp(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn vjp(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let (m, n) = node.value.dims2();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (_, k) = self.dims(*a);
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    gemm_nt(m, n, k, g, bv, self.acc(grads, *a), true);
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    gemm_tn(k, m, n, av, g, self.acc(grads, *b), true);
                }
            }
            Op::MatMulNt(a, b) => {
                let (_, k) = self.dims(*a);
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    gemm_nn(m, n, k, g, bv, self.acc(grads, *a), true);
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    gemm_tn(n, m, k, g, av, self.acc(grads, *b), true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        add_into(self.acc(grads, v), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    add_into(self.acc(grads, *a), g);
                }
                if self.needs(*b) {
                    for (d, &x) in self.acc(grads, *b).iter_mut().zip(g) {
                        *d -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    for ((d, &x), &y) in self.acc(grads, *a).iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    for ((d, &x), &y) in self.acc(grads, *b).iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    add_into(self.acc(grads, *a), g);
                }
                if self.needs(*row) {
                    let d = self.acc(grads, *row);
                    for chunk in g.chunks(n.max(1)) {
                        add_into(d, chunk);
                    }
                }
            }
            Op::Scale(a, c) => {
                for (d, &x) in self.acc(grads, *a).iter_mut().zip(g) {
                    *d += x * *c;
                }
            }
            Op::MulCol(a, col) => {
                if self.needs(*a) {
                    let c = self.value(*col).data();
                    let d = self.acc(grads, *a);
                    for r in 0..m {
                        for j in 0..n {
                            d[r * n + j] += g[r * n + j] * c[r];
                        }
                    }
                }
                if self.needs(*col) {
                    let av = self.value(*a).data();
                    let d = self.acc(grads, *col);
                    for r in 0..m {
                        let mut s = T::zero();
                        for j in 0..n {
                            s += g[r * n + j] * av[r * n + j];
                        }
                        d[r] += s;
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                for ((d, &x), &v) in self.acc(grads, *a).iter_mut().zip(g).zip(av) {
                    if v > T::zero() {
                        *d += x;
                    }
                }
            }
            Op::Sigmoid(a) => {
                for ((d, &x), &y) in self.acc(grads, *a).iter_mut().zip(g).zip(out) {
                    *d += x * y * (T::one() - y);
                }
            }
            Op::Softmax(a) => {
                let d = self.acc(grads, *a);
                for r in 0..m {
                    let row = r * n..(r + 1) * n;
                    let dot: T = g[row.clone()].iter().zip(&out[row.clone()]).map(|(&x, &y)| x * y).sum();
                    for j in row {
                        d[j] += out[j] * (g[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let d = self.acc(grads, *a);
                for r in 0..m {
                    let row = r * n..(r + 1) * n;
                    let gs: T = g[row.clone()].iter().copied().sum();
                    for j in row {
                        d[j] += g[j] - out[j].exp() * gs;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if self.needs(*gain) {
                    let d = self.acc(grads, *gain);
                    for (idx, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                        d[idx % n] += gv * h;
                    }
                }
                if self.needs(*bias) {
                    let d = self.acc(grads, *bias);
                    for (idx, &gv) in g.iter().enumerate() {
                        d[idx % n] += gv;
                    }
                }
                if self.needs(*x) {
                    let gainv = self.value(*gain).data();
                    let nf = T::from_usize(n).unwrap();
                    let d = self.acc(grads, *x);
                    for r in 0..m {
                        let row = r * n..(r + 1) * n;
                        let dh: Vec<T> = g[row.clone()]
                            .iter()
                            .zip(gainv)
                            .map(|(&a, &b)| a * b)
                            .collect();
                        let s1: T = dh.iter().copied().sum();
                        let s2: T = dh.iter().zip(&xhat[row.clone()]).map(|(&a, &b)| a * b).sum();
                        for (j, idx) in row.enumerate() {
                            d[idx] += inv_std[r] / nf * (nf * dh[j] - s1 - xhat[idx] * s2);
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let d = self.acc(grads, *a);
                add_into(&mut d[start * n..(start + m) * n], g);
            }
            Op::SliceCols(a, start) => {
                let (_, an) = self.dims(*a);
                let d = self.acc(grads, *a);
                for r in 0..m {
                    add_into(&mut d[r * an + start..r * an + start + n], &g[r * n..(r + 1) * n]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.needs(p) {
                        add_into(self.acc(grads, p), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let (_, pn) = self.dims(p);
                    if self.needs(p) {
                        let d = self.acc(grads, p);
                        for r in 0..m {
                            add_into(&mut d[r * pn..(r + 1) * pn], &g[r * n + col..r * n + col + pn]);
                        }
                    }
                    col += pn;
                }
            }
            Op::Gather { x, index, .. } => {
                let (_, xn) = self.dims(*x);
                let d = self.acc(grads, *x);
                for (k, &src) in index.iter().enumerate() {
                    add_into(&mut d[src * xn..(src + 1) * xn], &g[k * xn..(k + 1) * xn]);
                }
            }
            Op::MeanRows(a) => {
                let (am, _) = self.dims(*a);
                let inv = T::one() / T::from_usize(am).unwrap();
                let d = self.acc(grads, *a);
                for r in 0..am {
                    for j in 0..n {
                        d[r * n + j] += g[j] * inv;
                    }
                }
            }
            Op::MaxRows { x, arg } => {
                let d = self.acc(grads, *x);
                for (j, &r) in arg.iter().enumerate() {
                    d[r * n + j] += g[j];
                }
            }
            Op::Sum(a) => {
                for d in self.acc(grads, *a).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean(a) => {
                let len = self.value(*a).numel();
                let s = g[0] / T::from_usize(len).unwrap();
                for d in self.acc(grads, *a).iter_mut() {
                    *d += s;
                }
            }
            Op::MinMaxRows { x, stats } => {
                let xv = self.value(*x).data();
                let d = self.acc(grads, *x);
                for (r, &(lo, hi, span)) in stats.iter().enumerate() {
                    if !(span > T::zero()) {
                        continue;
                    }
                    let row = r * n..(r + 1) * n;
                    let mut dr = vec![T::zero(); n];
                    let mut to_hi = T::zero();
                    let mut to_lo = T::zero();
                    for (j, idx) in row.clone().enumerate() {
                        dr[j] += g[idx] / span;
                        to_hi -= g[idx] * out[idx] / span;
                        to_lo += g[idx] * (out[idx] - T::one()) / span;
                    }
                    dr[hi] += to_hi;
                    dr[lo] += to_lo;
                    for (j, idx) in row.enumerate() {
                        if xv[idx] > T::zero() {
                            d[idx] += dr[j];
                        }
                    }
                }
            }
            Op::CosineRows {
                a,
                b,
                norms_a,
                norm_b,
            } => {
                let floor = T::lit(NORM_FLOOR);
                let (_, dim) = self.dims(*a);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let nb = norm_b.max(floor);
                if self.needs(*a) {
                    let d = self.acc(grads, *a);
                    for r in 0..m {
                        let na = norms_a[r].max(floor);
                        let s = out[r];
                        for j in 0..dim {
                            let mut v = bv[j] / (na * nb);
                            if norms_a[r] > floor {
                                v -= s * av[r * dim + j] / (na * na);
                            }
                            d[r * dim + j] += g[r] * v;
                        }
                    }
                }
                if self.needs(*b) {
                    let d = self.acc(grads, *b);
                    for r in 0..m {
                        let na = norms_a[r].max(floor);
                        let s = out[r];
                        for j in 0..dim {
                            let mut v = av[r * dim + j] / (na * nb);
                            if *norm_b > floor {
                                v -= s * bv[j] / (nb * nb);
                            }
                            d[j] += g[r] * v;
                        }
                    }
                }
            }
            Op::Nll { logp, targets } => {
                let (_, vn) = self.dims(*logp);
                let count = T::from_usize(targets.iter().flatten().count()).unwrap();
                let d = self.acc(grads, *logp);
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        d[r * vn + t] -= g[0] / count;
                    }
                }
            }
            Op::Bce { p, y } => {
                let lo = T::lit(PROB_CLAMP);
                let hi = T::one() - lo;
                let pv = self.value(*p).data();
                let count = T::from_usize(y.len()).unwrap();
                let d = self.acc(grads, *p);
                for (j, (&pj, &yj)) in pv.iter().zip(y).enumerate() {
                    if pj > lo && pj < hi {
                        d[j] += g[0] * (-yj / pj + (T::one() - yj) / (T::one() - pj)) / count;
                    }
                }
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x).data();
                let count = T::from_usize(target.len()).unwrap();
                let two = T::lit(2.0);
                let d = self.acc(grads, *x);
                for (j, (&a, &b)) in xv.iter().zip(target).enumerate() {
                    d[j] += g[0] * two * (a - b) / count;
                }
            }
        }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut [T] {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Clamped mean binary cross entropy.
pub fn bce_value<T: Scalar>(p: &[T], y: &[T]) -> T {
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    let total: T = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.max(lo).min(hi);
            -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
        })
        .sum();
    total / T::from_usize(p.len()).unwrap()
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; exactly zero when `v` is unreachable.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn is_reachable(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }

    /// Gradients for every parameter bound on `tape`, indexed by parameter id.
    /// Parameters never bound keep `None`.
    pub fn param_grads(&self, tape: &Tape<T>, count: usize) -> Vec<Option<Tensor<T>>> {
        let mut out = vec![None; count];
        for &(id, v) in tape.bound_params() {
            out[id.index()] = Some(self.wrt(v));
        }
        out
    }
}
