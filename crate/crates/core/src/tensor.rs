//! Dense row-major tensors.
//!
//! A [`Tensor`] is an immutable value: every operation returns a new tensor.
//! There is no broadcasting; every shape mismatch is an error.

use std::fmt;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Self {
        Shape(dims.into())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl From<Vec<usize>> for Shape {
    fn from(v: Vec<usize>) -> Self {
        Shape(v)
    }
}

impl From<&[usize]> for Shape {
    fn from(v: &[usize]) -> Self {
        Shape(v.to_vec())
    }
}

impl<const N: usize> From<[usize; N]> for Shape {
    fn from(v: [usize; N]) -> Self {
        Shape(v.to_vec())
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 64 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} elements]", self.shape, self.data.len())
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != data.len() {
            return shape_err(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                shape.numel(),
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        let data = vec![value; shape.numel()];
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Shape::new([1]), data: vec![value] }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor { shape: Shape::new([data.len()]), data }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn diag(values: &[T]) -> Self {
        let n = values.len();
        let mut t = Self::zeros([n, n]);
        for (i, &v) in values.iter().enumerate() {
            t.data[i * n + i] = v;
        }
        t
    }

    /// Builds a matrix from row slices; all rows must have equal length.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new([rows.len(), cols], data)
    }

    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let data = (0..shape.numel()).map(&mut f).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return shape_err(format!("item() on shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    fn matrix_dims(&self, what: &str) -> Result<(usize, usize)> {
        match *self.dims() {
            [r, c] => Ok((r, c)),
            _ => shape_err(format!("{what} expects a matrix, got shape {:?}", self.shape)),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims().first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.dims().get(1).copied().unwrap_or(1)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn reshape(&self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != self.numel() {
            return shape_err(format!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    /// Reinterprets a `W × H × D` activation map as an `N × D` matrix with
    /// `N = W·H`; row `k` is the fiber at spatial site `k` in row-major order.
    pub fn reshape_activations(&self) -> Result<Self> {
        match *self.dims() {
            [w, h, d] => self.reshape([w * h, d]),
            _ => shape_err(format!(
                "activation map must have 3 dims, got {:?}",
                self.shape
            )),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.matrix_dims("transpose")?;
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Self::new([c, r], out)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (n, m) = self.matrix_dims("matmul")?;
        let (m2, p) = other.matrix_dims("matmul")?;
        if m != m2 {
            return shape_err(format!(
                "matmul inner dims disagree: {:?} x {:?}",
                self.shape, other.shape
            ));
        }
        let mut out = vec![T::zero(); n * p];
        let b = &other.data;
        for i in 0..n {
            let row = &mut out[i * p..(i + 1) * p];
            for k in 0..m {
                let a = self.data[i * m + k];
                if a == T::zero() {
                    continue;
                }
                let brow = &b[k * p..(k + 1) * p];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        Self::new([n, p], out)
    }

    fn zip_with(&self, other: &Self, what: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// In-place `self += other`.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!(
                "accumulate: shapes {:?} and {:?} differ",
                self.shape, other.shape
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(A + Aᵀ) / 2` for a square matrix.
    pub fn symmetrize(&self) -> Result<Self> {
        let (r, c) = self.matrix_dims("symmetrize")?;
        if r != c {
            return shape_err(format!("symmetrize needs a square matrix, got {:?}", self.shape));
        }
        let half = T::of(0.5);
        Ok(Tensor::from_fn([r, r], |idx| {
            let (i, j) = (idx / r, idx % r);
            half * (self.data[i * r + j] + self.data[j * r + i])
        }))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (n, m, p) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros([n, p]);
        for i in 0..n {
            for j in 0..p {
                let mut s = 0.0;
                for k in 0..m {
                    s += a.at(i, k) * b.at(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn matrix(rows: usize, cols: usize, vals: &[f64]) -> Tensor {
        Tensor::from_fn([rows, cols], |i| vals[i % vals.len()])
    }

    #[test]
    fn reshape_single_site_is_the_fiber() {
        let act = Tensor::new([1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let x = act.reshape_activations().unwrap();
        assert_eq!(x.dims(), &[1, 3]);
        assert_eq!(x.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn reshape_resnet_sized_map() {
        let act: Tensor = Tensor::zeros([7, 7, 2048]);
        assert_eq!(act.reshape_activations().unwrap().dims(), &[49, 2048]);
    }

    #[test]
    fn reshape_layout_is_row_major() {
        let act = Tensor::new([2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = act.reshape_activations().unwrap();
        assert_eq!(x, Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    }

    #[test]
    fn reshape_wrong_rank_errors() {
        let t: Tensor = Tensor::zeros([4, 4]);
        assert!(t.reshape_activations().is_err());
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
        let ones = Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap();
        assert_eq!(a.matmul(&ones).unwrap().data(), &[3.0, 7.0]);
        let b: Tensor = Tensor::zeros([2, 3]);
        let c: Tensor = Tensor::zeros([4, 2]);
        assert!(b.matmul(&c).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let a = Tensor::from_rows(&[&[1.0, -2.0, 3.0], &[0.5, 0.0, 7.0]]).unwrap();
        assert_eq!(a.hadamard(&Tensor::ones([2, 3])).unwrap(), a);
        assert_eq!(a.transpose().unwrap().transpose().unwrap(), a);
        let r = Tensor::vector(vec![-1.0, 2.0]).map(|v: f64| v.max(0.0));
        assert_eq!(r.data(), &[0.0, 2.0]);
        assert!(a.add(&Tensor::zeros([3, 2])).is_err());
        assert!(Tensor::<f64>::new([2, 2], vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn transpose_of_product(n in 1usize..=8, m in 1usize..=8, p in 1usize..=8,
                                va in prop::collection::vec(-10.0f64..10.0, 64),
                                vb in prop::collection::vec(-10.0f64..10.0, 64)) {
            let a = matrix(n, m, &va);
            let b = matrix(m, p, &vb);
            let lhs = a.matmul(&b).unwrap().transpose().unwrap();
            let rhs = b.transpose().unwrap().matmul(&a.transpose().unwrap()).unwrap();
            prop_assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
        }

        #[test]
        fn matmul_matches_triple_loop(n in 1usize..=16, m in 1usize..=16, p in 1usize..=16,
                                      va in prop::collection::vec(-10.0f64..10.0, 256),
                                      vb in prop::collection::vec(-10.0f64..10.0, 256)) {
            let a = matrix(n, m, &va);
            let b = matrix(m, p, &vb);
            let diff = a.matmul(&b).unwrap().sub(&naive_matmul(&a, &b)).unwrap();
            prop_assert!(diff.max_abs() < 1e-12);
        }

        #[test]
        fn reshape_round_trip_is_bit_exact(w in 1usize..=6, h in 1usize..=6, d in 1usize..=6,
                                           v in prop::collection::vec(any::<f64>(), 216)) {
            let data: Vec<f64> = v[..w * h * d].to_vec();
            let act = Tensor::new([w, h, d], data.clone()).unwrap();
            let back = act.reshape_activations().unwrap().reshape([w, h, d]).unwrap();
            let same = back.data().iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
