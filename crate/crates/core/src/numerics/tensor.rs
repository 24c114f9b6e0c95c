use std::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::flops::FlopCounter;
use crate::error::{dim_err, Error, Result};

/// Element type of a [`Tensor`]. Implemented for `f64` (default) and `f32`.
pub trait Scalar:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + std::iter::Sum + 'static
{
    fn from_real(v: f64) -> Self;
    fn to_real(self) -> f64;
}

impl Scalar for f64 {
    #[inline]
    fn from_real(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_real(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_real(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_real(self) -> f64 {
        self as f64
    }
}

/// Dense row-major array. Every extent is positive and the buffer length is
/// the product of the extents.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(dim_err!("tensor rank must be at least 1"));
    }
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(dim_err!("extent {pos} of {shape:?} is zero"));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(dim_err!(
                "shape {shape:?} needs {n} elements, buffer has {}",
                data.len()
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self { shape: shape.to_vec(), data: vec![value; n] })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() })
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn eye(n: usize) -> Result<Self> {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    /// Builds a 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(dim_err!("ragged rows"));
        }
        Self::new(&[m, n], rows.concat())
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// First element; the value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &e)| {
                debug_assert!(i < e);
                acc * e + i
            })
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(dim_err!("shape {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, what: &str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Casts to another element type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_real(v.to_real())).collect(),
        }
    }

    fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(dim_err!("{what} expects a 2-D tensor, got {:?}", self.shape)),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self { shape: vec![n, m], data: out })
    }

    /// Matrix product. Adds `m*k*n` multiply-accumulates to `flops`.
    pub fn matmul(&self, rhs: &Self, flops: &mut FlopCounter) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(dim_err!("matmul inner extents {k} and {k2} disagree"));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(&self.data, &rhs.data, &mut out, m, k, n);
        flops.add((m * k * n) as u64);
        Self::new(&[m, n], out)?.ensure_finite("matmul")
    }

    /// Batched product of `[b, m, k]` by `[b, k, n]`.
    pub fn batch_matmul(&self, rhs: &Self, flops: &mut FlopCounter) -> Result<Self> {
        let (b, m, k, n) = batch_dims(&self.shape, &rhs.shape)?;
        let mut out = vec![T::zero(); b * m * n];
        for p in 0..b {
            gemm_acc(
                &self.data[p * m * k..(p + 1) * m * k],
                &rhs.data[p * k * n..(p + 1) * k * n],
                &mut out[p * m * n..(p + 1) * m * n],
                m,
                k,
                n,
            );
        }
        flops.add((b * m * k * n) as u64);
        Self::new(&[b, m, n], out)?.ensure_finite("batch_matmul")
    }

    /// Numerically stable softmax along `axis` (max subtracted per slice).
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = axis_split(&self.shape, axis)?;
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for a in 0..len {
                    max = max.max(out[base + a * inner]);
                }
                let mut total = T::zero();
                for a in 0..len {
                    let e = (out[base + a * inner] - max).exp();
                    out[base + a * inner] = e;
                    total = total + e;
                }
                for a in 0..len {
                    out[base + a * inner] = out[base + a * inner] / total;
                }
            }
        }
        Self::new(&self.shape, out)?.ensure_finite("softmax")
    }
}

/// `(outer, axis extent, inner)` for iterating slices along `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(dim_err!("axis {axis} out of range for rank {}", shape.len()));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn batch_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (a, b) {
        ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => Ok((*b1, *m, *k, *n)),
        _ => Err(dim_err!("batch_matmul shapes {a:?} and {b:?} disagree")),
    }
}

/// `out += a[m×k] · b[k×n]`, i-k-j order.
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: T = a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
            out[i * n + j] = out[i * n + j] + dot;
        }
    }
}

/// `out += a[k×m]ᵀ · b[k×n]`.
pub(crate) fn gemm_tn_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Activation applied between MLP layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "identity" | "none" => Ok(Self::Identity),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Affine layers `x·W + b` with `activation` between layers; the last layer
/// stays linear. Weights are stored `[in, out]`.
pub fn mlp<T: Scalar>(
    x: &Tensor<T>,
    layers: &[(Tensor<T>, Tensor<T>)],
    activation: Activation,
    flops: &mut FlopCounter,
) -> Result<Tensor<T>> {
    let mut h = x.clone();
    for (idx, (w, b)) in layers.iter().enumerate() {
        let (_, out) = w.dims2("mlp weight")?;
        if b.len() != out {
            return Err(dim_err!("layer {idx}: bias width {} vs weight width {out}", b.len()));
        }
        if h.shape().last() != w.shape().first() {
            return Err(dim_err!(
                "layer {idx}: input width {:?} does not chain into weight {:?}",
                h.shape().last(),
                w.shape()
            ));
        }
        let mut z = h.matmul(w, flops)?;
        for row in z.data.chunks_mut(out) {
            for (v, &bv) in row.iter_mut().zip(&b.data) {
                *v = *v + bv;
            }
        }
        if idx + 1 < layers.len() && activation == Activation::Relu {
            z = z.map(|v| v.max(T::zero()));
        }
        h = z;
    }
    Ok(h)
}
