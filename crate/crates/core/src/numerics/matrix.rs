use std::fmt;
use std::iter::Sum;
use std::ops::Range;

use num_traits::{Float, NumAssign};

use crate::error::{Error, Result};

/// Floating point element type. Production code runs on `f32`; the
/// finite-difference checks instantiate the same code at `f64`.
pub trait Scalar:
    Float + NumAssign + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn lit(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense row-major matrix. Rows are tokens, columns are features.
#[derive(Clone, PartialEq)]
pub struct Matrix<T: Scalar = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            for r in 0..self.rows {
                write!(f, "\n  {:?}", self.row(r))?;
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("from_vec", (rows, cols), (data.len(), 1)));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape("from_rows", (i, r.len()), (rows.len(), cols)));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(values: &[T]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    /// Bytes held by the element buffer.
    pub fn payload_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<T>()
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::lit(x.to_f64())).collect(),
        }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_bt(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.cols {
            return Err(Error::shape("matmul_bt", self.shape(), other.shape()));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_at(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.rows != other.rows {
            return Err(Error::shape("matmul_at", self.shape(), other.shape()));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        let n = other.cols;
        for r in 0..self.rows {
            let b = other.row(r);
            for (i, &a) in self.row(r).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &bv) in out.data[i * n..(i + 1) * n].iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(out)
    }

    /// Row vector `v · self` for `v` of length `rows`.
    pub fn vec_mul(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.rows {
            return Err(Error::shape("vec_mul", (1, v.len()), self.shape()));
        }
        let mut out = vec![T::zero(); self.cols];
        for (k, &a) in v.iter().enumerate() {
            for (o, &b) in out.iter_mut().zip(self.row(k)) {
                *o += a * b;
            }
        }
        Ok(out)
    }

    /// Row vector `v · selfᵀ` for `v` of length `cols`.
    pub fn vec_mul_t(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.cols {
            return Err(Error::shape("vec_mul_t", (1, v.len()), self.shape()));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    pub fn transpose(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Adds a 1×cols bias row to every row.
    pub fn add_row_broadcast(&mut self, bias: &Matrix<T>) -> Result<()> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::shape("add_row_broadcast", self.shape(), bias.shape()));
        }
        for r in 0..self.rows {
            for (x, &b) in self.row_mut(r).iter_mut().zip(&bias.data) {
                *x += b;
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add_assign", self.shape(), other.shape()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// 1×cols vector of column sums.
    pub fn col_sums(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, &x) in out.data.iter_mut().zip(self.row(r)) {
                *o += x;
            }
        }
        out
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Matrix<T> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn slice_rows(&self, range: Range<usize>) -> Matrix<T> {
        Matrix {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }

    pub fn push_row(&mut self, row: &[T]) -> Result<()> {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        if row.len() != self.cols {
            return Err(Error::shape("push_row", self.shape(), (1, row.len())));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Matrix<T>) -> Result<T> {
        if self.shape() != other.shape() {
            return Err(Error::shape("max_abs_diff", self.shape(), other.shape()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `out += s * x`.
#[inline]
pub fn axpy<T: Scalar>(out: &mut [T], s: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += s * v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn m(rows: &[&[f32]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_is_neutral() {
        let mut rng = Rng::new(3);
        let a: Matrix = crate::numerics::seeded_normal(&mut rng, 5, 4, 1.0).unwrap();
        assert_eq!(a.matmul(&Matrix::identity(4)).unwrap(), a);
        assert_eq!(Matrix::identity(5).matmul(&a).unwrap(), a);
    }

    #[test]
    fn hand_computed_product() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(a.matmul(&b).unwrap(), m(&[&[2.0, 1.0], &[4.0, 3.0]]));
    }

    #[test]
    fn mismatched_shapes_name_both() {
        let a = Matrix::<f32>::zeros(2, 3);
        let b = Matrix::<f32>::zeros(4, 2);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("(4, 2)"), "{msg}");
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = Rng::new(9);
        let a: Matrix = crate::numerics::seeded_normal(&mut rng, 3, 5, 1.0).unwrap();
        let b = crate::numerics::seeded_normal(&mut rng, 4, 5, 1.0).unwrap();
        let direct = a.matmul(&b.transpose()).unwrap();
        assert!(direct.max_abs_diff(&a.matmul_bt(&b).unwrap()).unwrap() < 1e-6);
        let c = crate::numerics::seeded_normal(&mut rng, 3, 2, 1.0).unwrap();
        let direct = a.transpose().matmul(&c).unwrap();
        assert!(direct.max_abs_diff(&a.matmul_at(&c).unwrap()).unwrap() < 1e-6);
    }

    #[test]
    fn empty_matrices_multiply() {
        let a = Matrix::<f32>::zeros(0, 3);
        let b = Matrix::<f32>::zeros(3, 2);
        assert_eq!(a.matmul(&b).unwrap().shape(), (0, 2));
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), p in 1usize..6, q in 1usize..6, r in 1usize..6, s in 1usize..6) {
            let mut rng = Rng::new(seed);
            let a: Matrix = crate::numerics::seeded_normal(&mut rng, p, q, 1.0).unwrap();
            let b = crate::numerics::seeded_normal(&mut rng, q, r, 1.0).unwrap();
            let c = crate::numerics::seeded_normal(&mut rng, r, s, 1.0).unwrap();
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.data().iter().fold(1.0f32, |m, x| m.max(x.abs()));
            prop_assert!(left.max_abs_diff(&right).unwrap() / scale < 1e-4);
        }
    }
}
