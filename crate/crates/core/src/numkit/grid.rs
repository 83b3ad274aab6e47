use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Grid2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Grid2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Grid2D({}x{}) [", self.rows, self.cols)?;
        for r in 0..self.rows.min(4) {
            write!(f, "{:?}", &self.row(r)[..self.cols.min(6)])?;
        }
        if self.rows > 4 {
            write!(f, " ...")?;
        }
        write!(f, "]")
    }
}

/// Whether an operand is read as-is or transposed by [`gemm`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

impl Grid2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::argument(format!(
                "grid {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::argument("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A single row holding `values`.
    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    /// A single column holding `values`.
    pub fn column_vector(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Rows selected by index, in order.
    pub fn gather_rows(&self, index: &[usize]) -> Self {
        let mut data = Vec::with_capacity(index.len() * self.cols);
        for &i in index {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: index.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Grid2D) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::Shape {
                op: "vstack",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    fn check_same(&self, other: &Grid2D, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Grid2D) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Grid2D) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Grid2D) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn zip_with(
        &self,
        other: &Grid2D,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        self.check_same(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    /// `self += k * other`.
    pub fn axpy(&mut self, k: f64, other: &Grid2D) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Grid2D) -> Result<()> {
        self.axpy(1.0, other)
    }

    /// Adds `bias` (length `cols`) to every row.
    pub fn add_row_broadcast(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::Shape {
                op: "add_row_broadcast",
                left: self.shape(),
                right: (1, bias.len()),
            });
        }
        for r in 0..self.rows {
            for (v, b) in self.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    /// Multiplies row `r` by `weights[r]`.
    pub fn scale_rows(&self, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.rows {
            return Err(Error::Shape {
                op: "scale_rows",
                left: self.shape(),
                right: (weights.len(), 1),
            });
        }
        let mut out = self.clone();
        for (r, &w) in weights.iter().enumerate() {
            for v in out.row_mut(r) {
                *v *= w;
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn sum_rows(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }

    /// Column sums (length `cols`).
    pub fn sum_cols(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Grid2D) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Grid2D) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`, with transposes expressed as strides.
pub fn gemm(
    alpha: f64,
    a: &Grid2D,
    ta: Trans,
    b: &Grid2D,
    tb: Trans,
    beta: f64,
    c: &mut Grid2D,
) -> Result<()> {
    let (m, k) = match ta {
        Trans::No => (a.rows, a.cols),
        Trans::Yes => (a.cols, a.rows),
    };
    let (k2, n) = match tb {
        Trans::No => (b.rows, b.cols),
        Trans::Yes => (b.cols, b.rows),
    };
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            left: (m, k),
            right: (k2, n),
        });
    }
    if c.shape() != (m, n) {
        return Err(Error::Shape {
            op: "matmul output",
            left: (m, n),
            right: c.shape(),
        });
    }
    if m == 0 || n == 0 {
        return Ok(());
    }
    if k == 0 {
        for v in c.data.iter_mut() {
            *v *= beta;
        }
        return Ok(());
    }
    let (rsa, csa) = match ta {
        Trans::No => (a.cols as isize, 1),
        Trans::Yes => (1, a.cols as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (b.cols as isize, 1),
        Trans::Yes => (1, b.cols as isize),
    };
    // SAFETY: dimensions and strides were derived from the buffers above and
    // checked for consistency; `c` does not alias `a` or `b` (borrowck).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
    Ok(())
}

fn product(a: &Grid2D, ta: Trans, b: &Grid2D, tb: Trans) -> Result<Grid2D> {
    let m = if ta == Trans::No { a.rows } else { a.cols };
    let n = if tb == Trans::No { b.cols } else { b.rows };
    let mut c = Grid2D::zeros(m, n);
    gemm(1.0, a, ta, b, tb, 0.0, &mut c)?;
    Ok(c)
}

/// `a · b`.
pub fn matmul(a: &Grid2D, b: &Grid2D) -> Result<Grid2D> {
    product(a, Trans::No, b, Trans::No)
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Grid2D, b: &Grid2D) -> Result<Grid2D> {
    product(a, Trans::No, b, Trans::Yes)
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Grid2D, b: &Grid2D) -> Result<Grid2D> {
    product(a, Trans::Yes, b, Trans::No)
}

/// Row-wise softmax of `m / scale`, max-subtracted.
pub fn softmax_rows(m: &Grid2D, scale: f64) -> Grid2D {
    debug_assert!(scale > 0.0);
    let mut out = m.clone();
    let inv = 1.0 / scale;
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r), inv);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64], inv_scale: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp((*v - max) * inv_scale);
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn sigmoid(m: &Grid2D) -> Grid2D {
    m.map(sigmoid_scalar)
}

/// Mean squared error over all entries.
pub fn mse(a: &Grid2D, b: &Grid2D) -> Result<f64> {
    let d = a.sub(b)?;
    Ok(d.data.iter().map(|v| v * v).sum::<f64>() / d.len().max(1) as f64)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Grid2D, b: &Grid2D) -> Grid2D {
        Grid2D::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
        })
    }

    #[test]
    fn matmul_hand_case() {
        let a = Grid2D::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Grid2D::from_rows(&[&[5.0], &[6.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let m = Grid2D::from_fn(2, 3, |r, c| (r * 3 + c) as f64 - 2.5);
        assert_eq!(matmul(&Grid2D::identity(2), &m).unwrap(), m);
        let z = matmul(&Grid2D::zeros(2, 3), &Grid2D::filled(3, 4, 7.0)).unwrap();
        assert_eq!(z, Grid2D::zeros(2, 4));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Grid2D::zeros(2, 3), &Grid2D::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn transposed_products_match_naive() {
        let a = Grid2D::from_fn(5, 3, |r, c| ((r * 7 + c * 3) % 5) as f64 - 1.7);
        let b = Grid2D::from_fn(4, 3, |r, c| ((r * 2 + c * 5) % 7) as f64 * 0.3);
        let nt = matmul_nt(&a, &b).unwrap();
        assert!(nt.max_abs_diff(&naive(&a, &b.transpose())) < 1e-12);
        let c = Grid2D::from_fn(5, 2, |r, c| (r + c) as f64 * 0.1);
        let tn = matmul_tn(&a, &c).unwrap();
        assert!(tn.max_abs_diff(&naive(&a.transpose(), &c)) < 1e-12);
    }

    #[test]
    fn softmax_closed_form() {
        let m = Grid2D::row_vector(&[0.0, 3f64.ln()]);
        let s = softmax_rows(&m, 1.0);
        assert!((s.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-15);
        let u = softmax_rows(&Grid2D::filled(2, 5, 3.3), 2.0);
        assert!(u.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((sigmoid_scalar(3f64.ln()) - 0.75).abs() < 1e-15);
        let big = sigmoid_scalar(30.0);
        assert!(big > 0.5 && big <= 1.0);
        assert!(sigmoid_scalar(40.0) >= sigmoid_scalar(30.0));
        assert!(sigmoid_scalar(-800.0).is_finite());
    }

    #[test]
    fn scale_rows_and_broadcast() {
        let m = Grid2D::filled(2, 2, 1.0);
        let s = m.scale_rows(&[2.0, 0.0]).unwrap();
        assert_eq!(s.data(), &[2.0, 2.0, 0.0, 0.0]);
        assert!(m.scale_rows(&[1.0]).is_err());
        let mut b = Grid2D::zeros(2, 3);
        b.add_row_broadcast(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(b.sum_cols(), vec![2.0, 4.0, 6.0]);
    }
}
