//! Row-major dense matrix used for parameters and activations.

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row_vector(data: Vec<T>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Mat<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Mat<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max)
    }
}

/// How a matrix operand is read by [`gemm_into`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    N,
    T,
}

fn view<T>(m: &Mat<T>, op: Op) -> (usize, usize, isize, isize) {
    match op {
        Op::N => (m.rows, m.cols, m.cols as isize, 1),
        Op::T => (m.cols, m.rows, 1, m.cols as isize),
    }
}

/// `c = op(a) * op(b) + beta * c`.
pub fn gemm_into<T: Real>(a: &Mat<T>, opa: Op, b: &Mat<T>, opb: Op, beta: T, c: &mut Mat<T>) {
    let (m, k, rsa, csa) = view(a, opa);
    let (kb, n, rsb, csb) = view(b, opb);
    assert_eq!(k, kb, "gemm inner dims");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output dims");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c.data {
            *v = beta * *v;
        }
        return;
    }
    // SAFETY: the views above describe exactly the buffers of `a`, `b` and
    // `c`, and `c` is borrowed mutably so it cannot alias the inputs.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm_into(a, Op::N, b, Op::N, T::zero(), &mut c);
    c
}

/// Row vector times matrix: `x * w` for a single activation row.
pub fn vecmat<T: Real>(x: &[T], w: &Mat<T>) -> Vec<T> {
    assert_eq!(x.len(), w.rows);
    let mut out = vec![T::zero(); w.cols];
    for (i, &xi) in x.iter().enumerate() {
        if xi == T::zero() {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(w.row(i)) {
            *o = *o + xi * wv;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
        let mut c = Mat::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut s = 0.0;
                for k in 0..a.cols {
                    s += a.at(i, k) * b.at(k, j);
                }
                c.data[i * b.cols + j] = s;
            }
        }
        c
    }

    fn seq(rows: usize, cols: usize, off: f64) -> Mat<f64> {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|i| (i as f64 * 0.37 + off).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn gemm_transposes_match_naive() {
        let a = seq(3, 4, 0.1);
        let b = seq(4, 5, 0.7);
        let expect = naive(&a, &b);
        assert!(matmul(&a, &b).max_abs_diff(&expect) < 1e-12);

        let at = seq(4, 3, 0.2);
        let mut c = Mat::zeros(3, 5);
        gemm_into(&at, Op::T, &b, Op::N, 0.0, &mut c);
        let at_t = Mat::from_vec(3, 4, (0..12).map(|i| at.at(i % 4, i / 4)).collect()).unwrap();
        assert!(c.max_abs_diff(&naive(&at_t, &b)) < 1e-12);

        let bt = seq(5, 4, 0.3);
        let mut c2 = Mat::zeros(3, 5);
        gemm_into(&a, Op::N, &bt, Op::T, 0.0, &mut c2);
        let bt_t = Mat::from_vec(4, 5, (0..20).map(|i| bt.at(i % 5, i / 5)).collect()).unwrap();
        assert!(c2.max_abs_diff(&naive(&a, &bt_t)) < 1e-12);
    }

    #[test]
    fn vecmat_matches_matmul() {
        let x = seq(1, 4, 0.5);
        let w = seq(4, 6, 0.9);
        let v = vecmat(x.row(0), &w);
        assert!(Mat::row_vector(v).max_abs_diff(&matmul(&x, &w)) < 1e-12);
    }

    #[test]
    fn shape_errors() {
        assert!(Mat::<f32>::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert!(Mat::<f32>::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
