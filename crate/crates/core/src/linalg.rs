//! Dense solves with an explicit singularity tolerance.
//!
//! Every solve in the crate is relative to the largest diagonal entry of the
//! system matrix: a pivot at or below `SINGULAR_RTOL * max|diag|` is treated
//! as singular rather than silently producing huge coefficients.

use nalgebra::{DMatrix, DVector};

/// Relative pivot tolerance shared by the ridge solves and the inversion of
/// the average shrinkage matrix.
pub const SINGULAR_RTOL: f64 = 1e-12;

fn max_abs_diag(a: &DMatrix<f64>) -> f64 {
    a.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    l: DMatrix<f64>,
}

impl SpdFactor {
    /// Factorizes `a`, returning `None` when a pivot falls below the
    /// relative tolerance.
    pub fn new(a: &DMatrix<f64>) -> Option<Self> {
        let n = a.nrows();
        debug_assert_eq!(n, a.ncols());
        let tol = SINGULAR_RTOL * max_abs_diag(a);
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > tol) || !d.is_finite() {
                return None;
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Some(Self { l })
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            self.solve_in_place(col.as_mut_slice());
        }
        x
    }

    fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.l.nrows();
        // forward: L y = b
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.l[(i, k)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        // backward: L' x = y
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
    }
}

/// Inverse of a general square matrix by full-pivot LU, `None` when the
/// smallest pivot falls below the relative tolerance.
pub fn invert_general(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let scale = max_abs_diag(a);
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    let lu = a.clone().full_piv_lu();
    let u = lu.u();
    let min_pivot = u
        .diagonal()
        .iter()
        .fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if !(min_pivot > SINGULAR_RTOL * scale) {
        return None;
    }
    lu.try_inverse()
}

/// Neumaier-compensated accumulator for matrices of fixed shape, so that
/// averages over individuals are insensitive to summation order.
#[derive(Debug, Clone)]
pub struct CompensatedSum {
    sum: DMatrix<f64>,
    comp: DMatrix<f64>,
}

impl CompensatedSum {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            sum: DMatrix::zeros(nrows, ncols),
            comp: DMatrix::zeros(nrows, ncols),
        }
    }

    pub fn add(&mut self, x: &DMatrix<f64>) {
        for ((s, c), &v) in self.sum.iter_mut().zip(self.comp.iter_mut()).zip(x.iter()) {
            let t = *s + v;
            if s.abs() >= v.abs() {
                *c += (*s - t) + v;
            } else {
                *c += (v - t) + *s;
            }
            *s = t;
        }
    }

    pub fn add_vec(&mut self, x: &DVector<f64>) {
        let m = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        self.add(&m);
    }

    pub fn total(&self) -> DMatrix<f64> {
        &self.sum + &self.comp
    }
}
