//! Small dense kernels: complex LU with log-determinant, a row-major GEMM
//! wrapper and a real Cholesky solver.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Pivots whose magnitude falls below this are treated as exact zeros.
pub const SINGULAR_PIVOT: f64 = 1e-300;

/// Dense complex square matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CMatrix {
    pub n: usize,
    pub data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![Complex64::new(0.0, 0.0); n * n],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: Complex64) {
        self.data[i * self.n + j] = v;
    }
}

/// LU factorization `P A = L U` with partial pivoting.
#[derive(Clone, Debug)]
pub struct ComplexLu {
    n: usize,
    lu: Vec<Complex64>,
    perm: Vec<usize>,
    log_abs_det: f64,
    phase: f64,
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_phase(x: f64) -> f64 {
    use std::f64::consts::PI;
    let mut y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    y
}

impl ComplexLu {
    pub fn factor(a: &CMatrix) -> Result<Self> {
        let n = a.n;
        let mut lu = a.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut log_abs = 0.0;
        let mut phase = 0.0;
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].norm();
            for i in (k + 1)..n {
                let v = lu[i * n + k].norm();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !(best >= SINGULAR_PIVOT) {
                return Err(Error::Singular(if best > 0.0 { best.ln() } else { f64::NEG_INFINITY }));
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                phase += std::f64::consts::PI;
            }
            let pivot = lu[k * n + k];
            log_abs += best.ln();
            phase += pivot.arg();
            let inv = 1.0 / pivot;
            for i in (k + 1)..n {
                let f = lu[i * n + k] * inv;
                lu[i * n + k] = f;
                if f.re != 0.0 || f.im != 0.0 {
                    for j in (k + 1)..n {
                        let u = lu[k * n + j];
                        lu[i * n + j] -= f * u;
                    }
                }
            }
        }
        Ok(Self {
            n,
            lu,
            perm,
            log_abs_det: log_abs,
            phase: wrap_phase(phase),
        })
    }

    pub fn log_abs_det(&self) -> f64 {
        self.log_abs_det
    }

    /// Phase of the determinant in `(-π, π]`.
    pub fn phase(&self) -> f64 {
        self.phase
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [Complex64]) {
        let n = self.n;
        let mut x: Vec<Complex64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in (i + 1)..n {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s / self.lu[i * n + i];
        }
        b.copy_from_slice(&x);
    }

    /// Full inverse, row-major.
    pub fn inverse(&self) -> CMatrix {
        let n = self.n;
        let mut inv = CMatrix::zeros(n);
        let mut col = vec![Complex64::new(0.0, 0.0); n];
        for j in 0..n {
            col.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            col[j] = Complex64::new(1.0, 0.0);
            self.solve_in_place(&mut col);
            for i in 0..n {
                inv.set(i, j, col[i]);
            }
        }
        inv
    }
}

/// `C = A · B` (or `C += A · B` when `accumulate`), all row-major.
/// `A` is `m×k`, `B` is `k×n`.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `C = A · Wᵀ` where `W` is stored row-major as `n×k` (the usual layout of a
/// linear layer's weight with `n` outputs and `k` inputs).
pub fn gemm_bt(m: usize, k: usize, n: usize, a: &[f64], w: &[f64], c: &mut [f64], accumulate: bool) {
    debug_assert!(a.len() >= m * k && w.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            w.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Solves the symmetric positive-definite system `A x = b` by Cholesky.
pub fn cholesky_solve(a: &[f64], n: usize, b: &[f64]) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Numerical("matrix is not positive definite".into()));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn lu_log_det_matches_direct_3x3() {
        let mut a = CMatrix::zeros(3);
        let vals = [
            c(0.1, 1.0),
            c(2.0, 0.0),
            c(0.3, -0.2),
            c(1.5, 0.5),
            c(-0.7, 0.1),
            c(0.0, 2.0),
            c(0.4, 0.4),
            c(1.1, -1.0),
            c(-2.0, 0.3),
        ];
        a.data.copy_from_slice(&vals);
        let g = |i: usize, j: usize| vals[i * 3 + j];
        let det = g(0, 0) * (g(1, 1) * g(2, 2) - g(1, 2) * g(2, 1))
            - g(0, 1) * (g(1, 0) * g(2, 2) - g(1, 2) * g(2, 0))
            + g(0, 2) * (g(1, 0) * g(2, 1) - g(1, 1) * g(2, 0));
        let lu = ComplexLu::factor(&a).unwrap();
        assert!((lu.log_abs_det() - det.norm().ln()).abs() < 1e-13);
        assert!((wrap_phase(lu.phase() - det.arg())).abs() < 1e-13);

        let inv = lu.inverse();
        for i in 0..3 {
            for j in 0..3 {
                let s: Complex64 = (0..3).map(|k| a.get(i, k) * inv.get(k, j)).sum();
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((s - c(e, 0.0)).norm() < 1e-13);
            }
        }
    }

    #[test]
    fn singular_matrix_is_reported() {
        let mut a = CMatrix::zeros(2);
        a.set(0, 0, c(1.0, 0.0));
        a.set(0, 1, c(2.0, 0.0));
        a.set(1, 0, c(2.0, 0.0));
        a.set(1, 1, c(4.0, 0.0));
        assert!(matches!(ComplexLu::factor(&a), Err(Error::Singular(_))));
    }

    #[test]
    fn gemm_variants_agree_with_loops() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|x| x as f64 * 0.3 - 1.0).collect();
        let w: Vec<f64> = (0..n * k).map(|x| (x as f64).sin()).collect();
        let mut out = vec![0.0; m * n];
        gemm_bt(m, k, n, &a, &w, &mut out, false);
        for i in 0..m {
            for j in 0..n {
                let s: f64 = (0..k).map(|p| a[i * k + p] * w[j * k + p]).sum();
                assert!((out[i * n + j] - s).abs() < 1e-12);
            }
        }
        let b: Vec<f64> = (0..k * n).map(|x| (x as f64).cos()).collect();
        gemm(m, k, n, &a, &b, &mut out, false);
        for i in 0..m {
            for j in 0..n {
                let s: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((out[i * n + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let a = [4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let b = [1.0, -2.0, 0.5];
        let x = cholesky_solve(&a, 3, &b).unwrap();
        for i in 0..3 {
            let s: f64 = (0..3).map(|j| a[i * 3 + j] * x[j]).sum();
            assert!((s - b[i]).abs() < 1e-12);
        }
        assert!(cholesky_solve(&[1.0, 2.0, 2.0, 1.0], 2, &[1.0, 1.0]).is_err());
    }
}
