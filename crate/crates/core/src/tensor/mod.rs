//! Dense row-major tensors, the forward kernels used by the model, and a
//! tape-based reverse-mode differentiator over them.
//!
//! Everything is generic over [`Scalar`] so that the same model code runs in
//! `f32` for training and inference and in `f64` for finite-difference
//! gradient checks.

mod gradcheck;
mod graph;
mod param;

pub use gradcheck::{check_gradients, check_param_gradients, GradReport};
pub use graph::{Grads, Graph, KeyLayout, Var};
pub use param::{ParamId, ParamStore, Parameter};

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumCast};
use thiserror::Error;

/// Norm below which a row is treated as degenerate by cosine similarity.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    Length { len: usize, shape: Vec<usize> },
    #[error("{op}: axis {axis} invalid for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: empty extent along the reduction axis")]
    EmptyAxis { op: &'static str },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Floating-point element type of a tensor.
pub trait Scalar:
    Float + FromPrimitive + Sum + Debug + Default + Send + Sync + 'static
{
    fn erf(self) -> Self;

    /// Lossy conversion from an `f64` constant.
    fn lit(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite literal")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Length {
                len: data.len(),
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(TensorError::Shape {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::Length {
                len: self.data.len(),
                shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64_lossy()).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
pub(crate) fn axis_split(
    op: &'static str,
    shape: &[usize],
    axis: usize,
) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (p, q) = a.dims2("matmul")?;
    let (q2, r) = b.dims2("matmul")?;
    if q != q2 {
        return Err(TensorError::Shape {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); p * r];
    for i in 0..p {
        let arow = &a.data[i * q..(i + 1) * q];
        let orow = &mut out[i * r..(i + 1) * r];
        for (k, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b.data[k * r..(k + 1) * r];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::new(vec![p, r], out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (p, q) = a.dims2("transpose")?;
    let mut out = vec![T::zero(); p * q];
    for i in 0..p {
        for j in 0..q {
            out[j * p + i] = a.data[i * q + j];
        }
    }
    Tensor::new(vec![q, p], out)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, extent, inner) = axis_split("softmax", &x.shape, axis)?;
    if extent == 0 {
        return Err(TensorError::EmptyAxis { op: "softmax" });
    }
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * extent + k) * inner + i;
            let max = (0..extent)
                .map(|k| x.data[idx(k)])
                .fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for k in 0..extent {
                let e = (x.data[idx(k)] - max).exp();
                out[idx(k)] = e;
                total = total + e;
            }
            for k in 0..extent {
                out[idx(k)] = out[idx(k)] / total;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Standard normal CDF via the error function.
pub fn normal_cdf<T: Scalar>(v: T) -> T {
    T::lit(0.5) * (T::one() + (v / T::lit(std::f64::consts::SQRT_2)).erf())
}

pub fn gelu_scalar<T: Scalar>(v: T) -> T {
    v * normal_cdf(v)
}

/// Exact (erf-based) GeLU.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

fn row_norms<T: Scalar>(t: &Tensor<T>) -> Vec<T> {
    (0..t.shape[0])
        .map(|i| t.row(i).iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect()
}

/// Pairwise cosine similarity between the rows of `a` and the rows of `b`.
///
/// Rows whose norm is at most [`NORM_FLOOR`] produce similarity 0.
pub fn cosine_sim_matrix<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (p, d) = a.dims2("cosine_sim_matrix")?;
    let (q, d2) = b.dims2("cosine_sim_matrix")?;
    if d != d2 {
        return Err(TensorError::Shape {
            op: "cosine_sim_matrix",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let na = row_norms(a);
    let nb = row_norms(b);
    let floor = T::lit(NORM_FLOOR);
    let mut out = vec![T::zero(); p * q];
    for i in 0..p {
        if na[i] <= floor {
            continue;
        }
        for j in 0..q {
            if nb[j] <= floor {
                continue;
            }
            let dot: T = a.row(i).iter().zip(b.row(j)).map(|(&x, &y)| x * y).sum();
            let c = dot / (na[i] * nb[j]);
            out[i * q + j] = c.max(-T::one()).min(T::one());
        }
    }
    Tensor::new(vec![p, q], out)
}

/// Indices of `values` ordered by descending value, ties by lower index.
pub fn descending_order<T: Scalar>(values: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// The `k` largest entries, sorted descending with ties broken by lower index.
pub fn topk<T: Scalar>(values: &[T], k: usize) -> Result<(Vec<usize>, Vec<T>)> {
    if k < 1 || k > values.len() {
        return Err(TensorError::Param(format!(
            "topk: K={k} must lie in [1, {}]",
            values.len()
        )));
    }
    let mut idx = descending_order(values);
    idx.truncate(k);
    let vals = idx.iter().map(|&i| values[i]).collect();
    Ok((idx, vals))
}

/// Position of the maximum, lowest index on ties.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
