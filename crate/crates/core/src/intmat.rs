//! Dense matrices over arbitrary-precision integers.
//!
//! Everything here is exact: products are plain BigInt arithmetic and the
//! determinant uses fraction-free (Bareiss) elimination, so unimodularity can
//! be certified rather than estimated.

use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};

use crate::error::{Error, Result};
use crate::mat::Mat;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntMat {
    n: usize,
    data: Vec<BigInt>,
}

impl IntMat {
    pub fn zeros(n: usize) -> Self {
        IntMat { n, data: vec![BigInt::zero(); n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = IntMat::zeros(n);
        for i in 0..n {
            m[(i, i)] = BigInt::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<BigInt>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::ShapeMismatch("integer matrix must be square".into()));
        }
        Ok(IntMat { n, data: rows.iter().flatten().cloned().collect() })
    }

    pub fn from_i64_rows(rows: &[Vec<i64>]) -> Result<Self> {
        let big: Vec<Vec<BigInt>> = rows
            .iter()
            .map(|r| r.iter().map(|&v| BigInt::from(v)).collect())
            .collect();
        IntMat::from_rows(&big)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[BigInt] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn to_row_vecs(&self) -> Vec<Vec<BigInt>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_identity(&self) -> bool {
        *self == IntMat::identity(self.n)
    }

    pub fn mul(&self, other: &IntMat) -> IntMat {
        assert_eq!(self.n, other.n, "integer matmul dimension mismatch");
        let n = self.n;
        let mut out = IntMat::zeros(n);
        for i in 0..n {
            for p in 0..n {
                let a = &self.data[i * n + p];
                if a.is_zero() {
                    continue;
                }
                for j in 0..n {
                    let b = &other.data[p * n + j];
                    if !b.is_zero() {
                        out.data[i * n + j] += a * b;
                    }
                }
            }
        }
        out
    }

    /// `row_r += t * row_s`
    pub fn row_axpy(&mut self, r: usize, t: &BigInt, s: usize) {
        let n = self.n;
        for c in 0..n {
            let add = t * &self.data[s * n + c];
            self.data[r * n + c] += add;
        }
    }

    /// `col_c += t * col_s`
    pub fn col_axpy(&mut self, c: usize, t: &BigInt, s: usize) {
        let n = self.n;
        for r in 0..n {
            let add = t * &self.data[r * n + s];
            self.data[r * n + c] += add;
        }
    }

    pub fn negate_col(&mut self, c: usize) {
        let n = self.n;
        for r in 0..n {
            let v = -&self.data[r * n + c];
            self.data[r * n + c] = v;
        }
    }

    pub fn swap_cols(&mut self, a: usize, b: usize) {
        for r in 0..self.n {
            self.data.swap(r * self.n + a, r * self.n + b);
        }
    }

    pub fn to_f64(&self) -> Mat {
        let mut m = Mat::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                m[(i, j)] = big_to_f64(&self[(i, j)]);
            }
        }
        m
    }

    /// Exact determinant by fraction-free (Bareiss) elimination.
    pub fn det(&self) -> BigInt {
        let n = self.n;
        if n == 0 {
            return BigInt::one();
        }
        let mut a = self.data.clone();
        let mut sign = 1i32;
        let mut prev = BigInt::one();
        for k in 0..n - 1 {
            if a[k * n + k].is_zero() {
                // pivot search below row k
                match (k + 1..n).find(|&r| !a[r * n + k].is_zero()) {
                    Some(r) => {
                        for c in 0..n {
                            a.swap(k * n + c, r * n + c);
                        }
                        sign = -sign;
                    }
                    None => return BigInt::zero(),
                }
            }
            for i in k + 1..n {
                for j in k + 1..n {
                    let num = &a[i * n + j] * &a[k * n + k] - &a[i * n + k] * &a[k * n + j];
                    // exact division is the fraction-free invariant
                    a[i * n + j] = num / &prev;
                }
                a[i * n + k] = BigInt::zero();
            }
            prev = a[k * n + k].clone();
        }
        let d = a[(n - 1) * n + (n - 1)].clone();
        if sign < 0 {
            -d
        } else {
            d
        }
    }
}

impl std::ops::Index<(usize, usize)> for IntMat {
    type Output = BigInt;
    fn index(&self, (i, j): (usize, usize)) -> &BigInt {
        &self.data[i * self.n + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for IntMat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut BigInt {
        &mut self.data[i * self.n + j]
    }
}

pub(crate) fn big_to_f64(v: &BigInt) -> f64 {
    use num_traits::ToPrimitive;
    v.to_f64().unwrap_or(if v.is_negative() { f64::NEG_INFINITY } else { f64::INFINITY })
}
