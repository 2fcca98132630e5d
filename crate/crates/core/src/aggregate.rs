//! Debiased averaging of individual ridge fits.
//!
//! With `W̄ = (1/n) Σ W_i`, the debiased average is `β̃ = W̄⁻¹ (1/n) Σ β̂_i`.
//! Its variance for `√n (β̃ − β₀)` is estimated from the influence terms
//! `ψ_i = W̄⁻¹ (β̂_i − W_i β̃)`, and reported standard errors are
//! `sqrt(diag(V̂) / n)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::budget::Spec;
use crate::error::{Error, Result};
use crate::estimator::{Moments, PanelSeries, PenaltyMode, RidgeFit, DEFAULT_PENALTY_FLOOR};
use crate::linalg::{invert_general, CompensatedSum};

/// The regularization grid swept by default.
pub const DEFAULT_LAMBDA_GRID: [f64; 15] = [
    0.0, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 0.01, 0.1, 0.2, 0.3, 0.4, 0.5, 1.0, 2.0, 3.0,
];

/// λ used for the identification diagnostic by default.
pub const DEFAULT_ZETA_LAMBDA: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationOptions {
    pub penalty: PenaltyMode,
    pub floor: f64,
    /// Multiply `V̂` by `n / (n − 1)`.
    pub dof_correction: bool,
}

impl Default for EstimationOptions {
    fn default() -> Self {
        Self {
            penalty: PenaltyMode::Scaled,
            floor: DEFAULT_PENALTY_FLOOR,
            dof_correction: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasReport {
    pub lambda: f64,
    pub n: usize,
    /// `(1/n) Σ β̂_i`, the average of the ridge coefficients.
    pub naive_avg: Vec<f64>,
    /// `W̄`, row-major.
    pub w_bar: Vec<Vec<f64>>,
    pub beta_tilde: Vec<f64>,
    /// `V̂`, row-major.
    pub v_hat: Vec<Vec<f64>>,
    pub std_errors: Vec<f64>,
    pub dof_corrected: bool,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let p = rows.len();
    DMatrix::from_fn(p, rows.first().map_or(0, Vec::len), |i, j| rows[i][j])
}

impl DebiasReport {
    pub fn dim(&self) -> usize {
        self.beta_tilde.len()
    }

    pub fn w_bar_matrix(&self) -> DMatrix<f64> {
        from_rows(&self.w_bar)
    }

    pub fn v_hat_matrix(&self) -> DMatrix<f64> {
        from_rows(&self.v_hat)
    }

    /// `|β̃_k| / se_k ≥ z`.
    pub fn is_significant(&self, coord: usize, z: f64) -> bool {
        let se = self.std_errors[coord];
        (se > 0.0 && self.beta_tilde[coord].abs() / se >= z)
            || (se == 0.0 && self.beta_tilde[coord] != 0.0)
    }
}

fn check_fits(fits: &[RidgeFit]) -> Result<(usize, f64)> {
    let first = fits
        .first()
        .ok_or_else(|| Error::DomainError("no individual fits to aggregate".into()))?;
    let (p, lambda) = (first.dim(), first.lambda);
    for f in fits {
        if f.dim() != p {
            return Err(Error::DomainError("fits have different dimensions".into()));
        }
        if f.lambda != lambda {
            return Err(Error::DomainError(
                "fits use different lambda values".into(),
            ));
        }
    }
    Ok((p, lambda))
}

fn w_bar_inverse(fits: &[RidgeFit], p: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut acc = CompensatedSum::zeros(p, p);
    for f in fits {
        acc.add(&f.w);
    }
    let w_bar = acc.total() / fits.len() as f64;
    let inv = invert_general(&w_bar).ok_or_else(|| {
        Error::NonInvertibleWbar(format!(
            "W̄ is singular at λ = {}; too many individuals share a null direction",
            fits[0].lambda
        ))
    })?;
    Ok((w_bar, inv))
}

/// Debiased average with the default options.
pub fn debias(fits: &[RidgeFit]) -> Result<DebiasReport> {
    debias_with(fits, false)
}

pub fn debias_with(fits: &[RidgeFit], dof_correction: bool) -> Result<DebiasReport> {
    let (p, lambda) = check_fits(fits)?;
    let n = fits.len();
    let (w_bar, w_inv) = w_bar_inverse(fits, p)?;

    let mut beta_acc = CompensatedSum::zeros(p, 1);
    for f in fits {
        beta_acc.add_vec(&f.beta_hat);
    }
    let naive = DVector::from_column_slice((beta_acc.total() / n as f64).as_slice());
    let beta_tilde = &w_inv * &naive;

    let mut v_acc = CompensatedSum::zeros(p, p);
    for f in fits {
        let psi = &w_inv * (&f.beta_hat - &f.w * &beta_tilde);
        v_acc.add(&(&psi * psi.transpose()));
    }
    let mut v_hat = v_acc.total() / n as f64;
    if dof_correction && n > 1 {
        v_hat *= n as f64 / (n as f64 - 1.0);
    }
    let std_errors = (0..p)
        .map(|k| (v_hat[(k, k)].max(0.0) / n as f64).sqrt())
        .collect();

    Ok(DebiasReport {
        lambda,
        n,
        naive_avg: naive.iter().copied().collect(),
        w_bar: to_rows(&w_bar),
        beta_tilde: beta_tilde.iter().copied().collect(),
        v_hat: to_rows(&v_hat),
        std_errors,
        dof_corrected: dof_correction && n > 1,
    })
}

/// Largest elementwise gap between `V̂` and the sandwich form
/// `W̄⁻¹ [(1/n) Σ u_i u_i'] W̄⁻¹'` with `u_i = β̂_i − W_i β̃`.
pub fn variance_alt_check(fits: &[RidgeFit], report: &DebiasReport) -> Result<f64> {
    let (p, _) = check_fits(fits)?;
    let n = fits.len();
    let (_, w_inv) = w_bar_inverse(fits, p)?;
    let beta_tilde = DVector::from_column_slice(&report.beta_tilde);
    let mut acc = CompensatedSum::zeros(p, p);
    for f in fits {
        let u = &f.beta_hat - &f.w * &beta_tilde;
        acc.add(&(&u * u.transpose()));
    }
    let mut alt = &w_inv * (acc.total() / n as f64) * w_inv.transpose();
    if report.dof_corrected {
        alt *= n as f64 / (n as f64 - 1.0);
    }
    Ok((alt - report.v_hat_matrix()).amax())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub lambda: f64,
    pub report: Result<DebiasReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub spec: Spec,
    pub options: EstimationOptions,
    pub entries: Vec<SweepEntry>,
}

impl Sweep {
    /// First λ (ascending) at which coordinate `coord` is significant at `z`.
    pub fn first_significant(&self, coord: usize, z: f64) -> Option<f64> {
        self.entries.iter().find_map(|e| match &e.report {
            Ok(r) if r.is_significant(coord, z) => Some(e.lambda),
            _ => None,
        })
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::ConfigError("lambda grid is empty".into()));
    }
    if grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(Error::ConfigError(
            "lambda values must be finite and >= 0".into(),
        ));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::ConfigError(
            "lambda grid must be strictly ascending".into(),
        ));
    }
    Ok(())
}

fn panel_spec(panel: &[PanelSeries]) -> Result<Spec> {
    let first = panel
        .first()
        .ok_or_else(|| Error::ConfigError("panel has no individuals".into()))?;
    let spec = first.spec();
    if panel.iter().any(|s| s.spec() != spec) {
        return Err(Error::DomainError("panel mixes regressor specs".into()));
    }
    Ok(spec)
}

/// Per-individual moments, computed in parallel in panel order.
pub fn panel_moments(panel: &[PanelSeries]) -> Vec<Moments> {
    panel.par_iter().map(Moments::from_series).collect()
}

/// Fits every individual at one λ. The first failure in panel order wins.
pub fn fit_all(
    moments: &[Moments],
    lambda: f64,
    options: &EstimationOptions,
) -> Result<Vec<RidgeFit>> {
    let fits: Vec<Result<RidgeFit>> = moments
        .par_iter()
        .map(|m| m.fit(lambda, options.penalty, options.floor))
        .collect();
    fits.into_iter().collect()
}

/// Debiased averages over a λ grid. Moments are computed once; a failure at
/// one λ is recorded and the sweep continues.
pub fn sweep(panel: &[PanelSeries], grid: &[f64], options: &EstimationOptions) -> Result<Sweep> {
    check_grid(grid)?;
    let spec = panel_spec(panel)?;
    let moments = panel_moments(panel);
    let entries = grid
        .iter()
        .map(|&lambda| SweepEntry {
            lambda,
            report: fit_all(&moments, lambda, options)
                .and_then(|fits| debias_with(&fits, options.dof_correction)),
        })
        .collect();
    Ok(Sweep {
        spec,
        options: *options,
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZetaDiagnostic {
    pub coord: usize,
    pub lambda: f64,
    /// `ζ_i` in panel order.
    pub values: Vec<f64>,
    /// `(p, ζ_(p))` for `p = 0.00, 0.01, …, 1.00`.
    pub quantiles: Vec<(f64, f64)>,
}

impl ZetaDiagnostic {
    /// Indices of individuals whose `ζ_i` exceeds `threshold`.
    pub fn weakly_identified(&self, threshold: f64) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, z)| **z > threshold)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Linear-interpolation quantile of sorted data (Hyndman–Fan type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Identification score per individual:
/// `ζ_i = ‖ê_i − e‖ / sqrt(2‖ê_i‖² + 2)` with `ê_i = e' W̄⁻¹ W_i`.
pub fn zeta_diagnostic(fits: &[RidgeFit], coord: usize) -> Result<ZetaDiagnostic> {
    let (p, lambda) = check_fits(fits)?;
    if coord >= p {
        return Err(Error::DomainError(format!(
            "coordinate {coord} out of range for dimension {p}"
        )));
    }
    let (_, w_inv) = w_bar_inverse(fits, p)?;
    let selector = w_inv.row(coord).into_owned();
    let values: Vec<f64> = fits
        .iter()
        .map(|f| {
            let mut e_hat = &selector * &f.w;
            let norm_sq = e_hat.norm_squared();
            e_hat[coord] -= 1.0;
            (e_hat.norm() / (2.0 * norm_sq + 2.0).sqrt()).min(1.0)
        })
        .collect();
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    let quantiles = (0..=100)
        .map(|k| {
            let prob = k as f64 / 100.0;
            (prob, quantile_sorted(&sorted, prob))
        })
        .collect();
    Ok(ZetaDiagnostic {
        coord,
        lambda,
        values,
        quantiles,
    })
}

/// Within (entity-demeaned) pooled OLS. Returns the slope coefficients, i.e.
/// every regressor but the constant.
pub fn fixed_effects_oracle(panel: &[PanelSeries]) -> Result<DVector<f64>> {
    let spec = panel_spec(panel)?;
    let k = spec.dim() - 1;
    let n_obs: usize = panel.iter().map(PanelSeries::len).sum();
    let mut x = DMatrix::<f64>::zeros(n_obs, k);
    let mut y = DVector::<f64>::zeros(n_obs);
    let mut r = 0;
    for s in panel {
        let t = s.len() as f64;
        let y_mean = s.rows().iter().map(|o| o.y).sum::<f64>() / t;
        let x_mean: Vec<f64> = (0..k)
            .map(|j| s.rows().iter().map(|o| o.row.values[j + 1]).sum::<f64>() / t)
            .collect();
        for o in s.rows() {
            y[r] = o.y - y_mean;
            for j in 0..k {
                x[(r, j)] = o.row.values[j + 1] - x_mean[j];
            }
            r += 1;
        }
    }
    if n_obs < k {
        return Err(Error::SingularSystem(
            "fewer observations than slope regressors".into(),
        ));
    }
    let col_scale = (0..k).fold(0.0_f64, |m, j| m.max(x.column(j).norm()));
    let qr = x.qr();
    let rmat = qr.r();
    let min_r = rmat
        .diagonal()
        .iter()
        .fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if !(min_r > 1e-10 * col_scale) {
        return Err(Error::SingularSystem(
            "within-transformed regressors are collinear".into(),
        ));
    }
    let qty = qr.q().transpose() * y;
    rmat.solve_upper_triangular(&qty)
        .ok_or_else(|| Error::SingularSystem("within regression could not be solved".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncomeEffectInterval {
    /// `γ̂ ± z·se` on the elasticity scale.
    pub elasticity: (f64, f64),
    /// The same interval times `Y/R`, on the `dY/dR` scale.
    pub income_effect: (f64, f64),
}

pub fn income_effect_interval(
    gamma_hat: f64,
    se: f64,
    y_over_r: f64,
    z: f64,
) -> Result<IncomeEffectInterval> {
    if !(se >= 0.0) {
        return Err(Error::DomainError(format!(
            "standard error must be >= 0, got {se}"
        )));
    }
    if !(y_over_r > 0.0) {
        return Err(Error::DomainError(format!(
            "Y/R must be positive, got {y_over_r}"
        )));
    }
    let (lo, hi) = (gamma_hat - z * se, gamma_hat + z * se);
    Ok(IncomeEffectInterval {
        elasticity: (lo, hi),
        income_effect: (lo * y_over_r, hi * y_over_r),
    })
}
