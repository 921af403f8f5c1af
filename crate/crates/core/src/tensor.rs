//! Dense row-major tensors of rank 1 to 3.
//!
//! A rank-3 tensor `[B, N, C]` is treated by most row-wise operations as a
//! `(B·N) × C` matrix: tokens are rows, channels are the trailing axis.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_rank(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 3 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("rank must be 1..=3, got {}", shape.len()),
        });
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_rank(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {expected} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        check_rank(&shape)?;
        let n = shape.iter().product();
        Ok(Self {
            shape,
            data: vec![T::zero(); n],
        })
    }

    pub fn full(shape: Vec<usize>, value: T) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        t.data.iter_mut().for_each(|v| *v = value);
        Ok(t)
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::InvalidShape {
                    shape: vec![rows.len(), cols],
                    reason: format!("row {i} has {} entries", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    /// Convenience for literals in tests and fixtures.
    pub fn from_f64_rows(rows: &[&[f64]]) -> Result<Self> {
        let rows: Vec<Vec<T>> = rows.iter().map(|r| r.iter().map(|&v| T::of(v)).collect()).collect();
        Self::from_rows(&rows)
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self {
            shape: vec![n, n],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Storage footprint in bytes.
    pub fn nbytes(&self) -> usize {
        self.data.len() * T::BYTES
    }

    /// Size of the trailing (channel) axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    /// Number of rows when viewed as a `rows × cols` matrix.
    pub fn rows(&self) -> usize {
        self.shape[..self.shape.len() - 1].iter().product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        let c = self.cols().max(1);
        self.data.chunks(c).take(self.rows())
    }

    /// Element of a rank-2 tensor.
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    /// Leading batch size for rank-3 tensors, 1 otherwise.
    pub fn batch(&self) -> usize {
        if self.rank() == 3 {
            self.shape[0]
        } else {
            1
        }
    }

    /// The `b`-th `N × C` slice of a rank-3 tensor (or the tensor itself).
    pub fn sample(&self, b: usize) -> Result<Self> {
        match self.rank() {
            3 => {
                let (n, c) = (self.shape[1], self.shape[2]);
                let stride = n * c;
                Self::new(vec![n, c], self.data[b * stride..(b + 1) * stride].to_vec())
            }
            _ if b == 0 => Ok(self.clone()),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("sample {b} requested from a non-batched tensor"),
            }),
        }
    }

    /// Stacks equally shaped rank-2 tensors into a rank-3 batch.
    pub fn stack(samples: &[Self]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "cannot stack zero samples".into(),
        })?;
        if first.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: first.shape.clone(),
                reason: "only rank-2 samples can be stacked".into(),
            });
        }
        let mut data = Vec::with_capacity(first.len() * samples.len());
        for s in samples {
            if s.shape != first.shape {
                return Err(Error::Shape {
                    op: "stack",
                    lhs: first.shape.clone(),
                    rhs: s.shape.clone(),
                });
            }
            data.extend_from_slice(&s.data);
        }
        Self::new(vec![samples.len(), first.shape[0], first.shape[1]], data)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Same data with a new trailing width; leading axes are kept.
    pub(crate) fn with_cols(&self, cols: usize, data: Vec<T>) -> Result<Self> {
        let mut shape = self.shape.clone();
        *shape.last_mut().expect("rank >= 1") = cols;
        Self::new(shape, data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn neg(&self) -> Self {
        self.map(|v| -v)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some(i) => Err(Error::NonFinite(i)),
            None => Ok(()),
        }
    }

    pub fn abs_max(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    /// Sum of squares, accumulated left to right.
    pub fn sum_sq(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "transpose needs rank 2".into(),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(vec![n, m], data)
    }

    /// Standard matrix product `[M×K]·[K×P]`. The inner sum runs left to right
    /// over K so results are reproducible bit for bit.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, p) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * p];
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..p {
                let mut acc = T::zero();
                for (kk, &av) in a.iter().enumerate() {
                    acc += av * other.data[kk * p + j];
                }
                out[i * p + j] = acc;
            }
        }
        Self::new(vec![m, p], out)
    }

    /// Row-wise `x · wᵀ` for `x: [.., K]` and `w: [P×K]`, keeping leading axes.
    /// This is the linear-layer product with weights stored out×in.
    pub fn matmul_t(&self, w: &Self) -> Result<Self> {
        if w.rank() != 2 || self.cols() != w.shape[1] {
            return Err(Error::Shape {
                op: "matmul_t",
                lhs: self.shape.clone(),
                rhs: w.shape.clone(),
            });
        }
        let (k, p) = (w.shape[1], w.shape[0]);
        let rows = self.rows();
        let mut out = Vec::with_capacity(rows * p);
        for i in 0..rows {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..p {
                let wr = &w.data[j * k..(j + 1) * k];
                out.push(a.iter().zip(wr).fold(T::zero(), |acc, (&x, &y)| acc + x * y));
            }
        }
        self.with_cols(p, out)
    }

    /// Per-slice maximum of absolute values along `axis`; the axis is
    /// dropped. Reducing a vector yields a one-element vector.
    pub fn reduce_absmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("axis {axis} out of range"),
            });
        }
        if self.shape[axis] == 0 {
            return Err(Error::EmptyAxis(axis));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    let v = self.data[base + i].abs();
                    let slot = &mut out[o * inner + i];
                    if v > *slot {
                        *slot = v;
                    }
                }
            }
        }
        let mut shape: Vec<usize> = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Self::new(shape, out)
    }

    /// Per-channel absmax over every row (all leading axes).
    pub fn channel_absmax(&self) -> Vec<T> {
        let c = self.cols();
        let mut out = vec![T::zero(); c];
        for row in self.row_iter() {
            for (o, &v) in out.iter_mut().zip(row) {
                if v.abs() > *o {
                    *o = v.abs();
                }
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.widen())).collect(),
        }
    }
}
