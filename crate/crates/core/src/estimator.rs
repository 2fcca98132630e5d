//! Per-individual ridge regression.
//!
//! For one individual with regressor rows `b_t` and log incomes `ỹ_t`, the fit
//! solves `(Q + λS) β = (1/T) Σ b_t ỹ_t` with `Q = (1/T) Σ b_t b_t'`, and
//! reports the shrinkage matrix `W = (Q + λS)⁻¹ Q` that the aggregation step
//! needs for debiasing.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::budget::{RegressorRow, Spec};
use crate::error::{Error, Result};
use crate::linalg::SpdFactor;

/// Diagonal entries of `Q` below this are treated as a degenerate regressor
/// in [`PenaltyMode::Scaled`].
pub const DEFAULT_PENALTY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub t: i64,
    /// Log taxable income.
    pub y: f64,
    pub row: RegressorRow,
}

/// One individual's time-indexed observations.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelSeries {
    id: String,
    rows: Vec<Observation>,
}

impl PanelSeries {
    pub fn new(id: impl Into<String>, rows: Vec<Observation>) -> Result<Self> {
        let id = id.into();
        let Some(first) = rows.first() else {
            return Err(Error::DomainError(format!(
                "series `{id}` has no observations"
            )));
        };
        let spec = first.row.spec;
        let mut seen = HashSet::with_capacity(rows.len());
        for obs in &rows {
            if obs.row.spec != spec {
                return Err(Error::DomainError(format!(
                    "series `{id}` mixes regressor specs"
                )));
            }
            if obs.row.values.len() != spec.dim() || obs.row.values[0] != 1.0 {
                return Err(Error::DomainError(format!(
                    "series `{id}`: regressor row must have length {} and start with 1",
                    spec.dim()
                )));
            }
            if !obs.y.is_finite() || obs.row.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::DomainError(format!(
                    "series `{id}`: non-finite value at t = {}",
                    obs.t
                )));
            }
            if !seen.insert(obs.t) {
                return Err(Error::DomainError(format!(
                    "series `{id}`: duplicate period t = {}",
                    obs.t
                )));
            }
        }
        Ok(Self { id, rows })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn spec(&self) -> Spec {
        self.rows[0].row.spec
    }

    pub fn dim(&self) -> usize {
        self.spec().dim()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyMode {
    /// `S = diag(0, 1, …, 1)`.
    Unit,
    /// `S = diag(0, Q_22, …, Q_pp)`, with 1 in place of degenerate diagonals.
    #[default]
    Scaled,
}

impl std::str::FromStr for PenaltyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unit" => Ok(PenaltyMode::Unit),
            "scaled" => Ok(PenaltyMode::Scaled),
            other => Err(Error::ConfigError(format!(
                "unknown penalty `{other}`, expected unit or scaled"
            ))),
        }
    }
}

/// `Q = (1/T) Σ b_t b_t'`.
pub fn second_moment(series: &PanelSeries) -> DMatrix<f64> {
    Moments::from_series(series).q
}

/// Diagonal of the ridge penalty `S`; the intercept is never penalized.
pub fn penalty(q: &DMatrix<f64>, mode: PenaltyMode, floor: f64) -> DVector<f64> {
    let p = q.nrows();
    DVector::from_fn(p, |j, _| match (j, mode) {
        (0, _) => 0.0,
        (_, PenaltyMode::Unit) => 1.0,
        (_, PenaltyMode::Scaled) => {
            let qjj = q[(j, j)];
            if qjj < floor {
                1.0
            } else {
                qjj
            }
        }
    })
}

/// The sufficient statistics of one individual: `Q`, the cross-moment
/// `(1/T) Σ b_t ỹ_t`, and `T`. Computed once and reused across a λ grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub q: DMatrix<f64>,
    pub qy: DVector<f64>,
    pub periods: usize,
}

impl Moments {
    pub fn from_series(series: &PanelSeries) -> Self {
        let p = series.dim();
        let mut q = DMatrix::<f64>::zeros(p, p);
        let mut qy = DVector::<f64>::zeros(p);
        for obs in series.rows() {
            let b = &obs.row.values;
            for i in 0..p {
                qy[i] += b[i] * obs.y;
                for j in 0..=i {
                    q[(i, j)] += b[i] * b[j];
                }
            }
        }
        let inv_t = 1.0 / series.len() as f64;
        for i in 0..p {
            qy[i] *= inv_t;
            for j in 0..=i {
                q[(i, j)] *= inv_t;
                q[(j, i)] = q[(i, j)];
            }
        }
        Self {
            q,
            qy,
            periods: series.len(),
        }
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn fit(&self, lambda: f64, mode: PenaltyMode, floor: f64) -> Result<RidgeFit> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::DomainError(format!(
                "lambda must be finite and >= 0, got {lambda}"
            )));
        }
        let s = penalty(&self.q, mode, floor);
        let mut a = self.q.clone();
        for j in 0..a.nrows() {
            a[(j, j)] += lambda * s[j];
        }
        let factor = SpdFactor::new(&a).ok_or_else(|| {
            Error::SingularSystem(format!(
                "Q + λS is not positive definite at λ = {lambda}; raise λ or drop the individual"
            ))
        })?;
        let beta_hat = factor.solve_vec(&self.qy);
        let w = if lambda == 0.0 {
            DMatrix::identity(self.dim(), self.dim())
        } else {
            factor.solve_mat(&self.q)
        };
        Ok(RidgeFit {
            q: self.q.clone(),
            s,
            beta_hat,
            w,
            lambda,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    pub q: DMatrix<f64>,
    /// Diagonal of the penalty matrix.
    pub s: DVector<f64>,
    pub beta_hat: DVector<f64>,
    /// Shrinkage matrix `(Q + λS)⁻¹ Q`.
    pub w: DMatrix<f64>,
    pub lambda: f64,
}

impl RidgeFit {
    pub fn dim(&self) -> usize {
        self.beta_hat.len()
    }
}

/// Ridge fit with the default penalty floor.
pub fn ridge_fit(series: &PanelSeries, lambda: f64, mode: PenaltyMode) -> Result<RidgeFit> {
    Moments::from_series(series).fit(lambda, mode, DEFAULT_PENALTY_FLOOR)
}

/// `ỹ_t − b_t' β̂` in row order.
pub fn fitted_residuals(series: &PanelSeries, fit: &RidgeFit) -> Vec<f64> {
    series
        .rows()
        .iter()
        .map(|obs| {
            let pred: f64 = obs
                .row
                .values
                .iter()
                .zip(fit.beta_hat.iter())
                .map(|(b, beta)| b * beta)
                .sum();
            obs.y - pred
        })
        .collect()
}
