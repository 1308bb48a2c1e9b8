//! Dense row-major tensors and the value-level primitives.
//!
//! Everything here is a plain function of values. The differentiable
//! counterparts live on [`crate::tape::Tape`] and share these kernels.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Layer normalization epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    #[serde(default)]
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err("tensor construction", &shape, &[data.len()]);
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    /// `rows x cols` matrix from a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// `1 x n` row vector.
    pub fn row(data: Vec<T>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
            requires_grad: false,
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return shape_err("from_rows", &[cols], &[r.len()]);
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Matrix view of the shape: rank 0/1 tensors are single rows.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [m, n] => (*m, *n),
            s => {
                let n = *s.last().unwrap();
                (self.data.len() / n.max(1), n)
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row_slice(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err("reshape", &self.shape, &shape);
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let (m, n) = self.dims2();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self {
            shape: vec![n, m],
            data: out,
            requires_grad: false,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }

    /// Converts element type, e.g. for serializing `f32` parameters as doubles.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::from_f64(x.as_f64()).expect("cast"))
                .collect(),
            requires_grad: self.requires_grad,
        }
    }
}

/// Standard matrix product of an `m x k` and a `k x n` matrix.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if k != k2 {
        return shape_err("matmul", a.shape(), b.shape());
    }
    let mut out = vec![T::zero(); m * n];
    gemm_nn(m, k, n, a.data(), b.data(), &mut out, false);
    Tensor::matrix(m, n, out)
}

/// `out (+)= a[m,k] * b[k,n]`
pub(crate) fn gemm_nn<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    out: &mut [T],
    accumulate: bool,
) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        (k as isize, 1),
        b,
        (n as isize, 1),
        beta,
        out,
        (n as isize, 1),
    );
}

/// `out (+)= a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    out: &mut [T],
    accumulate: bool,
) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        (k as isize, 1),
        b,
        (1, k as isize),
        beta,
        out,
        (n as isize, 1),
    );
}

/// `out (+)= a[k,m]^T * b[k,n]`
pub(crate) fn gemm_tn<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    out: &mut [T],
    accumulate: bool,
) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        (1, m as isize),
        b,
        (n as isize, 1),
        beta,
        out,
        (n as isize, 1),
    );
}

/// Max-subtracted softmax of a single vector.
pub fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(x: &mut [T]) {
    if x.is_empty() {
        return;
    }
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn log_softmax_in_place<T: Scalar>(x: &mut [T]) {
    if x.is_empty() {
        return;
    }
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = x.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    for v in x.iter_mut() {
        *v -= lse;
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `(x - mean) / sqrt(var + eps) * gain + bias` over one vector.
pub fn layer_normalize<T: Scalar>(x: &[T], gain: &[T], bias: &[T], eps: T) -> Result<Vec<T>> {
    if x.len() != gain.len() || x.len() != bias.len() {
        return shape_err("layer_normalize", &[x.len()], &[gain.len(), bias.len()]);
    }
    if x.len() < 2 {
        return Err(Error::Invalid(format!(
            "layer_normalize needs at least 2 channels, got {}",
            x.len()
        )));
    }
    let (xhat, _) = normalize_stats(x, eps);
    Ok(xhat
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(&h, (&g, &b))| h * g + b)
        .collect())
}

/// Returns the standardized vector and `1/sqrt(var + eps)`.
pub(crate) fn normalize_stats<T: Scalar>(x: &[T], eps: T) -> (Vec<T>, T) {
    let n = T::from_usize(x.len()).unwrap();
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv = T::one() / (var + eps).sqrt();
    (x.iter().map(|&v| (v - mean) * inv).collect(), inv)
}

/// ReLU followed by min-max normalization to `[0, 1]`.
///
/// A map that is constant after the ReLU (including all non-positive input)
/// carries no discriminative evidence and normalizes to all zeros.
pub fn relu_min_max<T: Scalar>(x: &[T]) -> Vec<T> {
    let r: Vec<T> = x.iter().map(|v| v.max(T::zero())).collect();
    let (lo, hi) = min_max(&r);
    let span = hi - lo;
    if !(span > T::zero()) {
        return vec![T::zero(); r.len()];
    }
    r.iter().map(|&v| (v - lo) / span).collect()
}

pub(crate) fn min_max<T: Scalar>(x: &[T]) -> (T, T) {
    x.iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Index of the first maximal entry.
pub fn argmax<T: Scalar>(x: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in x.iter().enumerate() {
        match best {
            Some((_, b)) if !(v > b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[&[1., 2.], &[3., 4.]]);
        let out = matmul(&Tensor::identity(2), &a).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_hand_product() {
        let out = matmul(&t(&[&[1., 2.], &[3., 4.]]), &t(&[&[5.], &[6.]])).unwrap();
        assert_eq!(out.data(), &[17., 39.]);
        assert_eq!(out.shape(), &[2, 1]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let b = t(&[&[1., -2., 3.], &[0.5, 7., -1.]]);
        let out = matmul(&Tensor::zeros(&[4, 2]), &b).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let err = matmul(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_f32() {
        let a = Tensor::<f32>::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0f64, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[0.0f64, 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        let p = softmax(&[1000.0f64, 1000.0]);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::row(vec![-1.0f64, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert!(relu(&Tensor::row(vec![-3.0f64, -0.1])).data().iter().all(|&v| v == 0.0));
        let pos = Tensor::row(vec![0.3f64, 4.0]);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn layer_normalize_examples() {
        let z = layer_normalize(&[3.0f64; 4], &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let y = layer_normalize(&[1.0f64, 3.0], &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(y, vec![-1.0, 1.0]);
        let b = layer_normalize(&[1.0f64, 5.0, 2.0], &[0.0; 3], &[0.1, 0.2, 0.3], 1e-5).unwrap();
        assert_eq!(b, vec![0.1, 0.2, 0.3]);
        assert!(layer_normalize(&[1.0f64], &[1.0], &[0.0], 1e-5).is_err());
    }

    #[test]
    fn relu_min_max_rules() {
        assert_eq!(
            relu_min_max(&[-2.0f64, 0.0, 1.0, 3.0]),
            vec![0.0, 0.0, 1.0 / 3.0, 1.0]
        );
        assert_eq!(relu_min_max(&[-1.0f64, -5.0, 0.0]), vec![0.0; 3]);
        assert_eq!(relu_min_max(&[2.0f64, 2.0]), vec![0.0; 2]);
    }

    #[test]
    fn argmax_first_wins_ties() {
        assert_eq!(argmax(&[1.0f64, 3.0, 3.0]), Some(1));
        assert_eq!(argmax::<f64>(&[]), None);
    }
}
