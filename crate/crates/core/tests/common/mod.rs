//! Reference computations that share no code with the library's solvers.
#![allow(dead_code)]

use eti_core::estimator::PanelSeries;
use nalgebra::{DMatrix, DVector};

pub fn design(series: &PanelSeries) -> (DMatrix<f64>, DVector<f64>) {
    let rows = series.rows();
    let p = series.dim();
    let x = DMatrix::from_fn(rows.len(), p, |i, j| rows[i].row.values[j]);
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|o| o.y));
    (x, y)
}

/// Least squares through Householder QR.
pub fn qr_lstsq(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let qr = x.clone().qr();
    let qty = qr.q().transpose() * y;
    qr.r()
        .solve_upper_triangular(&qty)
        .expect("full column rank")
}

pub fn ols(series: &PanelSeries) -> DVector<f64> {
    let (x, y) = design(series);
    qr_lstsq(&x, &y)
}

pub fn average_ols(panel: &[PanelSeries]) -> DVector<f64> {
    let p = panel[0].dim();
    let mut acc = DVector::zeros(p);
    for s in panel {
        acc += ols(s);
    }
    acc / panel.len() as f64
}

/// OLS on the stacked panel with one common intercept.
pub fn pooled_ols(panel: &[PanelSeries]) -> DVector<f64> {
    let p = panel[0].dim();
    let total: usize = panel.iter().map(|s| s.len()).sum();
    let mut x = DMatrix::zeros(total, p);
    let mut y = DVector::zeros(total);
    let mut r = 0;
    for s in panel {
        for o in s.rows() {
            for j in 0..p {
                x[(r, j)] = o.row.values[j];
            }
            y[r] = o.y;
            r += 1;
        }
    }
    qr_lstsq(&x, &y)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Standard error of the mean.
pub fn sem(v: &[f64]) -> f64 {
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0);
    (var / v.len() as f64).sqrt()
}

/// Two-sample Kolmogorov-Smirnov statistic and its asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0_f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        p += 2.0 * (-1.0_f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
    }
    (d, p.clamp(0.0, 1.0))
}
