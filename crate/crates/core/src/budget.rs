//! Convex piecewise-linear budget sets and the regressors built from them.
//!
//! A budget set is an ordered list of segments. Segment `j` has net-of-tax
//! slope `ρ_j`, right kink `K_j` (the last kink is `+∞`) and virtual income
//! `R_j`, the intercept of the segment's extended line. Continuity of
//! consumption at each kink pins the virtual incomes down once `R_1` is known:
//!
//! ```text
//! R_{j+1} = R_j + (ρ_j − ρ_{j+1}) · K_j
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance for the virtual-income recursion check.
pub const RECURSION_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Net-of-tax slope, `1 − marginal rate`.
    pub slope: f64,
    /// Income at which the segment ends; `f64::INFINITY` for the last one.
    pub right_kink: f64,
    pub virtual_income: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetSet {
    segments: Vec<Segment>,
}

/// One violated invariant reported by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum BudgetViolation {
    Empty,
    NonPositiveSlope {
        segment: usize,
    },
    /// Slopes must strictly decrease from one segment to the next.
    ConvexityViolation {
        segment: usize,
    },
    KinkOrder {
        segment: usize,
    },
    /// The last segment's right kink must be `+∞`.
    FiniteLastKink,
    NonPositiveVirtualIncome {
        segment: usize,
    },
    RecursionViolation {
        segment: usize,
        gap: f64,
    },
}

impl std::fmt::Display for BudgetViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BudgetViolation::Empty => write!(f, "budget set has no segments"),
            BudgetViolation::NonPositiveSlope { segment } => {
                write!(f, "segment {segment}: slope must be positive")
            }
            BudgetViolation::ConvexityViolation { segment } => write!(
                f,
                "segment {segment}: slope does not decrease from the previous segment"
            ),
            BudgetViolation::KinkOrder { segment } => write!(
                f,
                "segment {segment}: kink must be positive and above the previous kink"
            ),
            BudgetViolation::FiniteLastKink => write!(f, "last segment must be unbounded"),
            BudgetViolation::NonPositiveVirtualIncome { segment } => {
                write!(f, "segment {segment}: virtual income must be positive")
            }
            BudgetViolation::RecursionViolation { segment, gap } => write!(
                f,
                "segment {segment}: virtual income off the continuity recursion by {gap:e}"
            ),
        }
    }
}

impl BudgetViolation {
    fn into_error(self) -> Error {
        match self {
            BudgetViolation::ConvexityViolation { .. } => {
                Error::ConvexityViolation(self.to_string())
            }
            other => Error::DomainError(other.to_string()),
        }
    }
}

/// Returns every violated invariant; an empty list means the set is valid.
pub fn validate(budget: &BudgetSet) -> Vec<BudgetViolation> {
    let segs = &budget.segments;
    let mut out = Vec::new();
    if segs.is_empty() {
        out.push(BudgetViolation::Empty);
        return out;
    }
    for (j, s) in segs.iter().enumerate() {
        if !(s.slope > 0.0) || !s.slope.is_finite() {
            out.push(BudgetViolation::NonPositiveSlope { segment: j });
        }
        if !(s.virtual_income > 0.0) || !s.virtual_income.is_finite() {
            out.push(BudgetViolation::NonPositiveVirtualIncome { segment: j });
        }
        if j + 1 < segs.len() {
            let lower = if j == 0 { 0.0 } else { segs[j - 1].right_kink };
            if !(s.right_kink > lower) || !s.right_kink.is_finite() {
                out.push(BudgetViolation::KinkOrder { segment: j });
            }
        }
    }
    if segs.last().map(|s| s.right_kink) != Some(f64::INFINITY) {
        out.push(BudgetViolation::FiniteLastKink);
    }
    for j in 1..segs.len() {
        let (prev, cur) = (&segs[j - 1], &segs[j]);
        if !(cur.slope < prev.slope) {
            out.push(BudgetViolation::ConvexityViolation { segment: j });
        }
        let expected = prev.virtual_income + (prev.slope - cur.slope) * prev.right_kink;
        let gap = (cur.virtual_income - expected).abs();
        if !(gap <= RECURSION_RTOL * prev.virtual_income.abs().max(1.0)) {
            out.push(BudgetViolation::RecursionViolation { segment: j, gap });
        }
    }
    out
}

impl BudgetSet {
    /// Builds a validated budget set from explicit segments.
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let b = Self { segments };
        match validate(&b).into_iter().next() {
            None => Ok(b),
            Some(v) => Err(v.into_error()),
        }
    }

    /// Wraps segments without checking any invariant. Pair with [`validate`].
    pub fn from_segments_unchecked(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    /// Builds a budget set from slopes, the `J − 1` finite kinks and the first
    /// virtual income; later virtual incomes follow from continuity.
    pub fn from_slopes(slopes: &[f64], kinks: &[f64], first_virtual_income: f64) -> Result<Self> {
        if slopes.is_empty() {
            return Err(BudgetViolation::Empty.into_error());
        }
        if kinks.len() + 1 != slopes.len() {
            return Err(Error::DomainError(format!(
                "{} slopes need {} kinks, got {}",
                slopes.len(),
                slopes.len() - 1,
                kinks.len()
            )));
        }
        let mut segments = Vec::with_capacity(slopes.len());
        let mut r = first_virtual_income;
        for (j, &slope) in slopes.iter().enumerate() {
            if j > 0 {
                r += (slopes[j - 1] - slope) * kinks[j - 1];
            }
            let right_kink = kinks.get(j).copied().unwrap_or(f64::INFINITY);
            segments.push(Segment {
                slope,
                right_kink,
                virtual_income: r,
            });
        }
        Self::new(segments)
    }

    /// A linear budget set: one segment.
    pub fn linear(slope: f64, virtual_income: f64) -> Result<Self> {
        Self::from_slopes(&[slope], &[], virtual_income)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Segment count `J`.
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn first(&self) -> &Segment {
        &self.segments[0]
    }

    pub fn last(&self) -> &Segment {
        &self.segments[self.segments.len() - 1]
    }

    /// Finite kinks `K_1 … K_{J−1}`.
    pub fn kinks(&self) -> impl Iterator<Item = f64> + '_ {
        self.segments[..self.segments.len().saturating_sub(1)]
            .iter()
            .map(|s| s.right_kink)
    }

    /// Consumption on the frontier at taxable income `y`.
    pub fn consumption(&self, y: f64) -> f64 {
        let seg = self
            .segments
            .iter()
            .find(|s| y <= s.right_kink)
            .unwrap_or_else(|| self.last());
        seg.virtual_income + seg.slope * y
    }
}

/// One bracket of a marginal-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bracket {
    /// Income at which the bracket starts.
    pub threshold: f64,
    pub marginal_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxSchedule {
    pub brackets: Vec<Bracket>,
    /// Nonlabor income; the virtual income of the first segment.
    pub nonlabor_income: f64,
}

/// Converts a bracket schedule into its budget set.
///
/// Adjacent brackets with equal rates are merged. Rates that fall from one
/// bracket to the next make the set non-convex and are rejected.
pub fn budget_from_schedule(schedule: &TaxSchedule) -> Result<BudgetSet> {
    let brackets = &schedule.brackets;
    if brackets.is_empty() {
        return Err(Error::DomainError("schedule has no brackets".into()));
    }
    if !(schedule.nonlabor_income > 0.0) || !schedule.nonlabor_income.is_finite() {
        return Err(Error::DomainError(format!(
            "nonlabor income must be positive, got {}",
            schedule.nonlabor_income
        )));
    }
    if brackets[0].threshold != 0.0 {
        return Err(Error::DomainError(format!(
            "first threshold must be 0, got {}",
            brackets[0].threshold
        )));
    }
    for (j, b) in brackets.iter().enumerate() {
        if !(0.0..1.0).contains(&b.marginal_rate) {
            return Err(Error::DomainError(format!(
                "bracket {j}: marginal rate {} outside [0, 1)",
                b.marginal_rate
            )));
        }
        if j > 0 {
            let prev = &brackets[j - 1];
            if !(b.threshold > prev.threshold) || !b.threshold.is_finite() {
                return Err(Error::DomainError(format!(
                    "bracket {j}: thresholds must strictly increase"
                )));
            }
            if b.marginal_rate < prev.marginal_rate {
                return Err(Error::ConvexityViolation(format!(
                    "bracket {j}: marginal rate {} below previous {}",
                    b.marginal_rate, prev.marginal_rate
                )));
            }
        }
    }

    let mut slopes = vec![1.0 - brackets[0].marginal_rate];
    let mut kinks = Vec::new();
    for b in &brackets[1..] {
        let slope = 1.0 - b.marginal_rate;
        if slope == *slopes.last().unwrap() {
            continue;
        }
        kinks.push(b.threshold);
        slopes.push(slope);
    }
    BudgetSet::from_slopes(&slopes, &kinks, schedule.nonlabor_income)
}

/// Which budget-set regression a row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spec {
    /// Slope terms and a trend, no income effect (4 regressors).
    A,
    /// Adds last-segment virtual income and its difference (6 regressors).
    B,
}

impl Spec {
    pub fn dim(self) -> usize {
        match self {
            Spec::A => 4,
            Spec::B => 6,
        }
    }

    /// Coefficient names in regressor order.
    pub fn coefficient_names(self) -> &'static [&'static str] {
        match self {
            Spec::A => &["a", "theta", "c", "d"],
            Spec::B => &["a", "theta", "gamma", "c", "c_hat", "d"],
        }
    }

    /// Position of the slope elasticity.
    pub const THETA: usize = 1;

    /// Position of the income elasticity, when the spec has one.
    pub fn gamma_index(self) -> Option<usize> {
        match self {
            Spec::A => None,
            Spec::B => Some(2),
        }
    }
}

impl std::str::FromStr for Spec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(Spec::A),
            "b" => Ok(Spec::B),
            other => Err(Error::ConfigError(format!(
                "unknown spec `{other}`, expected a or b"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorRow {
    pub values: Vec<f64>,
    pub spec: Spec,
    /// Periods since the individual's base period.
    pub t: i64,
}

fn checked_ln(x: f64, what: &str) -> Result<f64> {
    if x > 0.0 && x.is_finite() {
        Ok(x.ln())
    } else {
        Err(Error::DomainError(format!(
            "{what} must be positive, got {x}"
        )))
    }
}

/// `[1, ln ρ_J, ln ρ_J − ln ρ_1, t]`.
pub fn regressors_spec_a(budget: &BudgetSet, t: i64) -> Result<RegressorRow> {
    if budget.is_empty() {
        return Err(Error::DomainError("empty budget set".into()));
    }
    let last = checked_ln(budget.last().slope, "slope")?;
    let first = checked_ln(budget.first().slope, "slope")?;
    Ok(RegressorRow {
        values: vec![1.0, last, last - first, t as f64],
        spec: Spec::A,
        t,
    })
}

/// `[1, ln ρ_J, ln R_J, ln ρ_J − ln ρ_1, ln R_J − ln R_1, t]`.
pub fn regressors_spec_b(budget: &BudgetSet, t: i64) -> Result<RegressorRow> {
    if budget.is_empty() {
        return Err(Error::DomainError("empty budget set".into()));
    }
    for s in budget.segments() {
        checked_ln(s.virtual_income, "virtual income")?;
    }
    let rho_last = checked_ln(budget.last().slope, "slope")?;
    let rho_first = checked_ln(budget.first().slope, "slope")?;
    let r_last = budget.last().virtual_income.ln();
    let r_first = budget.first().virtual_income.ln();
    Ok(RegressorRow {
        values: vec![
            1.0,
            rho_last,
            r_last,
            rho_last - rho_first,
            r_last - r_first,
            t as f64,
        ],
        spec: Spec::B,
        t,
    })
}

pub fn regressors(budget: &BudgetSet, t: i64, spec: Spec) -> Result<RegressorRow> {
    match spec {
        Spec::A => regressors_spec_a(budget, t),
        Spec::B => regressors_spec_b(budget, t),
    }
}
