//! Ground-truth panels for verifying the estimator.
//!
//! Two generators are available. `Reduced` writes log income directly as the
//! linear budget-set regression plus mean-zero noise, so every individual's
//! coefficient vector is known exactly. `Structural` draws a preference shock
//! `η`, applies productivity growth `φ(t) = e^{α t}`, and picks the
//! utility-maximizing point on the piecewise-linear frontier.
//!
//! Every random draw comes from a ChaCha stream keyed on
//! `(seed, individual, period)`, so panels are identical no matter how the
//! work is scheduled across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::budget::{budget_from_schedule, regressors, Bracket, BudgetSet, Spec, TaxSchedule};
use crate::error::{Error, Result};
use crate::estimator::{Observation, PanelSeries};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic RNG for one `(individual, period)` cell.
pub fn stream_rng(seed: u64, individual: u64, period: u64) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ individual) ^ period);
    ChaCha8Rng::seed_from_u64(key)
}

/// Period key reserved for individual-level draws.
const PARAMS_STREAM: u64 = u64::MAX;

/// `ln η ~ N(mu, sigma²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormal {
    pub mu: f64,
    pub sigma: f64,
}

impl LogNormal {
    pub fn sample_ln<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.mu + self.sigma * z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Choice {
    Interior(usize),
    Kink(usize),
}

fn locate(budget: &BudgetSet, theta: f64, ln_eta: f64, ln_phi: f64) -> (Choice, f64) {
    let segs = budget.segments();
    let shift = (1.0 + theta) * ln_phi + ln_eta;
    for (j, s) in segs.iter().enumerate() {
        let ln_y = shift + theta * s.slope.ln();
        if j + 1 == segs.len() || ln_y <= s.right_kink.ln() {
            if j > 0 && ln_y < segs[j - 1].right_kink.ln() {
                return (Choice::Kink(j - 1), segs[j - 1].right_kink.ln());
            }
            return (Choice::Interior(j), ln_y);
        }
    }
    unreachable!("the last segment always accepts")
}

/// Taxable income chosen under isoelastic quasi-linear utility on a convex
/// budget set with productivity level `phi`.
///
/// Each segment's unconstrained optimum is `φ (φ ρ_j)^θ η`; these fall as
/// `j` grows, so the optimum is either the one candidate inside its own
/// segment or the kink where consecutive candidates straddle.
pub fn utility_max_income(budget: &BudgetSet, theta: f64, eta: f64, phi: f64) -> f64 {
    match locate(budget, theta, eta.ln(), phi.ln()).0 {
        Choice::Interior(j) => phi * (phi * budget.segments()[j].slope).powf(theta) * eta,
        Choice::Kink(j) => budget.segments()[j].right_kink,
    }
}

/// Log of [`utility_max_income`], computed in log space.
pub fn utility_max_log_income(budget: &BudgetSet, theta: f64, ln_eta: f64, ln_phi: f64) -> f64 {
    locate(budget, theta, ln_eta, ln_phi).1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndividualParams {
    pub theta: f64,
    /// Income elasticity; only enters the income-effect regression.
    pub gamma: f64,
    /// Productivity growth rate.
    pub alpha: f64,
    pub a: f64,
    /// Slope of the linear `ξ`; `c = θ c̄`, `ĉ = γ c̄`.
    pub c_bar: f64,
    /// Preference shock distribution, identical in every period.
    pub eta: LogNormal,
}

impl IndividualParams {
    pub fn c(&self) -> f64 {
        self.theta * self.c_bar
    }

    pub fn c_hat(&self) -> f64 {
        self.gamma * self.c_bar
    }

    pub fn d(&self) -> f64 {
        self.alpha * (self.theta + 1.0)
    }

    /// Coefficients in regressor order.
    pub fn beta(&self, spec: Spec) -> Vec<f64> {
        match spec {
            Spec::A => vec![self.a, self.theta, self.c(), self.d()],
            Spec::B => vec![
                self.a,
                self.theta,
                self.gamma,
                self.c(),
                self.c_hat(),
                self.d(),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    #[default]
    Reduced,
    Structural,
}

impl std::str::FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "reduced" => Ok(Generator::Reduced),
            "structural" => Ok(Generator::Structural),
            other => Err(Error::ConfigError(format!(
                "unknown generator `{other}`, expected reduced or structural"
            ))),
        }
    }
}

/// How tax schedules are drawn each period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetDesign {
    pub max_segments: usize,
    pub first_rate: (f64, f64),
    /// Increase in the marginal rate from one bracket to the next.
    pub rate_step: (f64, f64),
    /// Income units; kinks and nonlabor income scale with it.
    pub income_scale: f64,
    /// First kink as a fraction of `income_scale`.
    pub first_kink: (f64, f64),
    /// Ratio between consecutive kinks.
    pub kink_growth: (f64, f64),
    /// Median nonlabor income as a fraction of `income_scale`.
    pub nonlabor_share: f64,
    /// Log-scale dispersion of nonlabor income across periods.
    pub nonlabor_sigma: f64,
    /// Marginal-rate shift per unit of `a_i − a_ref`.
    pub endogeneity: f64,
    pub a_ref: f64,
    /// Marginal-rate shift per unit of `θ_i − theta_ref`.
    pub theta_endogeneity: f64,
    pub theta_ref: f64,
}

impl Default for BudgetDesign {
    fn default() -> Self {
        Self {
            max_segments: 3,
            first_rate: (0.0, 0.25),
            rate_step: (0.05, 0.2),
            income_scale: 10f64.exp(),
            first_kink: (0.4, 1.0),
            kink_growth: (1.4, 2.2),
            nonlabor_share: 0.2,
            nonlabor_sigma: 0.5,
            endogeneity: 0.0,
            a_ref: 10.0,
            theta_endogeneity: 0.0,
            theta_ref: 0.6,
        }
    }
}

/// Draws one period's budget set. Marginal rates shift with `a_i` and `θ_i`
/// according to the design's endogeneity strengths; the draw never depends
/// on the period's income shock.
pub fn endogenous_budget_draw<R: Rng + ?Sized>(
    individual: &IndividualParams,
    design: &BudgetDesign,
    rng: &mut R,
) -> Result<BudgetSet> {
    let segments = rng.random_range(1..=design.max_segments.max(1));
    let shift = design.endogeneity * (individual.a - design.a_ref)
        + design.theta_endogeneity * (individual.theta - design.theta_ref);
    let mut rate = uniform(rng, design.first_rate) + shift;
    let mut kink = design.income_scale * uniform(rng, design.first_kink);
    let mut brackets = Vec::with_capacity(segments);
    for j in 0..segments {
        if j > 0 {
            rate += uniform(rng, design.rate_step);
        }
        brackets.push(Bracket {
            threshold: if j == 0 { 0.0 } else { kink },
            marginal_rate: rate.clamp(0.0, 0.9),
        });
        if j > 0 {
            kink *= uniform(rng, design.kink_growth);
        }
    }
    let z: f64 = rng.sample(StandardNormal);
    let nonlabor_income =
        design.income_scale * design.nonlabor_share * (design.nonlabor_sigma * z).exp();
    budget_from_schedule(&TaxSchedule {
        brackets,
        nonlabor_income,
    })
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Noise {
    pub sd: f64,
    /// Scale the noise by `1 + 2|ln ρ_J|`, so its variance depends on the
    /// budget set.
    pub heteroskedastic: bool,
}

impl Default for Noise {
    fn default() -> Self {
        Self {
            sd: 0.2,
            heteroskedastic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    pub n: usize,
    pub periods: usize,
    pub spec: Spec,
    pub generator: Generator,
    /// Mean of the log-normal `θ_i`.
    pub theta_mean: f64,
    pub theta_log_sd: f64,
    pub alpha_mean: f64,
    pub alpha_sd: f64,
    pub a_mean: f64,
    pub a_sd: f64,
    pub c_bar_mean: f64,
    pub c_bar_sd: f64,
    pub gamma_mean: f64,
    pub gamma_sd: f64,
    /// Force `γ_i ≤ 0` (with `θ_i > 0` this satisfies the Slutsky condition).
    pub slutsky: bool,
    /// Dispersion of `ln η` in the structural generator.
    pub eta_sigma: f64,
    pub noise: Noise,
    pub budget: BudgetDesign,
    /// Give every individual the mean parameters.
    pub homogeneous: bool,
    /// Share of individuals facing the same linear budget every period, so
    /// their slope regressor has no within variation.
    pub weak_id_share: f64,
    pub base_year: i64,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            n: 300,
            periods: 15,
            spec: Spec::A,
            generator: Generator::Reduced,
            theta_mean: 0.6,
            theta_log_sd: 0.3,
            alpha_mean: 0.01,
            alpha_sd: 0.005,
            a_mean: 10.0,
            a_sd: 0.5,
            c_bar_mean: 0.3,
            c_bar_sd: 0.1,
            gamma_mean: -0.05,
            gamma_sd: 0.02,
            slutsky: true,
            eta_sigma: 0.3,
            noise: Noise::default(),
            budget: BudgetDesign::default(),
            homogeneous: false,
            weak_id_share: 0.0,
            base_year: 1977,
            seed: 1,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigError(m.to_string()));
        if self.n == 0 || self.periods == 0 {
            return bad("n and periods must be at least 1");
        }
        if !(self.theta_mean > 0.0) {
            return bad("theta_mean must be positive");
        }
        if self.theta_log_sd < 0.0
            || self.alpha_sd < 0.0
            || self.a_sd < 0.0
            || self.c_bar_sd < 0.0
            || self.gamma_sd < 0.0
        {
            return bad("dispersion parameters must be non-negative");
        }
        if !(self.eta_sigma >= 0.0) || !(self.noise.sd >= 0.0) {
            return bad("eta_sigma and noise sd must be non-negative");
        }
        if self.slutsky && self.gamma_mean > 0.0 && self.homogeneous {
            return bad("homogeneous gamma must be <= 0 when slutsky is on");
        }
        if !(0.0..=1.0).contains(&self.weak_id_share) {
            return bad("weak_id_share must lie in [0, 1]");
        }
        if self.budget.max_segments == 0 {
            return bad("budget.max_segments must be at least 1");
        }
        if self.generator == Generator::Structural && self.spec == Spec::B {
            return bad(
                "the structural generator has no closed form with income effects; use spec a",
            );
        }
        Ok(())
    }

    /// Draws (or, when homogeneous, fixes) individual `index`'s parameters.
    pub fn individual(&self, index: usize) -> IndividualParams {
        let mut rng = stream_rng(self.seed, index as u64, PARAMS_STREAM);
        let mut z = || -> f64 {
            if self.homogeneous {
                0.0
            } else {
                rng.sample(StandardNormal)
            }
        };
        let s = self.theta_log_sd;
        let theta = self.theta_mean * (s * z() - 0.5 * s * s).exp();
        let alpha = self.alpha_mean + self.alpha_sd * z();
        let a = self.a_mean + self.a_sd * z();
        let c_bar = self.c_bar_mean + self.c_bar_sd * z();
        let mut gamma = self.gamma_mean + self.gamma_sd * z();
        if self.slutsky {
            gamma = -gamma.abs();
        }
        IndividualParams {
            theta,
            gamma,
            alpha,
            a,
            c_bar,
            eta: LogNormal {
                mu: a,
                sigma: self.eta_sigma,
            },
        }
    }

    fn is_weak(&self, index: usize) -> bool {
        // ⌈share·n⌉ individuals spread evenly over the panel
        let k = (self.weak_id_share * self.n as f64).ceil() as usize;
        if k == 0 {
            return false;
        }
        let stride = (self.n / k).max(1);
        index.is_multiple_of(stride) && index / stride < k
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimPeriod {
    pub year: i64,
    pub t: i64,
    pub budget: BudgetSet,
    pub log_income: f64,
    /// The preference shock, structural generator only.
    pub ln_eta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimIndividual {
    pub id: String,
    pub params: IndividualParams,
    /// True regression coefficients. Under the structural generator the
    /// `ξ` slope is not identified unless every budget is linear, and is
    /// recorded as NaN.
    pub beta: Vec<f64>,
    pub weak_id: bool,
    pub periods: Vec<SimPeriod>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPanel {
    pub spec: Spec,
    pub individuals: Vec<SimIndividual>,
}

impl SimulatedPanel {
    pub fn series(&self) -> Result<Vec<PanelSeries>> {
        self.individuals
            .iter()
            .map(|ind| {
                let rows = ind
                    .periods
                    .iter()
                    .map(|p| {
                        Ok(Observation {
                            t: p.t,
                            y: p.log_income,
                            row: regressors(&p.budget, p.t, self.spec)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                PanelSeries::new(ind.id.clone(), rows)
            })
            .collect()
    }

    /// Sample average of the true coefficient vectors.
    pub fn mean_beta(&self) -> Vec<f64> {
        let p = self.spec.dim();
        let n = self.individuals.len() as f64;
        (0..p)
            .map(|k| self.individuals.iter().map(|i| i.beta[k]).sum::<f64>() / n)
            .collect()
    }
}

/// Generates a panel with known coefficients.
pub fn generate_panel(cfg: &DgpConfig) -> Result<SimulatedPanel> {
    cfg.validate()?;
    let width = cfg.n.to_string().len();
    let individuals = (0..cfg.n)
        .into_par_iter()
        .map(|i| simulate_individual(cfg, i, width))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimulatedPanel {
        spec: cfg.spec,
        individuals,
    })
}

fn simulate_individual(cfg: &DgpConfig, index: usize, width: usize) -> Result<SimIndividual> {
    let params = cfg.individual(index);
    let weak_id = cfg.is_weak(index);
    let fixed_rate = {
        let mut rng = stream_rng(cfg.seed, index as u64, PARAMS_STREAM - 1);
        uniform(&mut rng, cfg.budget.first_rate).clamp(0.0, 0.9)
    };
    let beta_true = params.beta(cfg.spec);
    let mut periods = Vec::with_capacity(cfg.periods);
    for t in 0..cfg.periods {
        let mut rng = stream_rng(cfg.seed, index as u64, t as u64);
        let budget = if weak_id {
            let z: f64 = rng.sample(StandardNormal);
            let r1 = cfg.budget.income_scale
                * cfg.budget.nonlabor_share
                * (cfg.budget.nonlabor_sigma * z).exp();
            BudgetSet::linear(1.0 - fixed_rate, r1)?
        } else {
            endogenous_budget_draw(&params, &cfg.budget, &mut rng)?
        };
        let (log_income, ln_eta) = match cfg.generator {
            Generator::Reduced => {
                let row = regressors(&budget, t as i64, cfg.spec)?;
                let mean: f64 = row.values.iter().zip(&beta_true).map(|(b, c)| b * c).sum();
                let scale = if cfg.noise.heteroskedastic {
                    1.0 + 2.0 * budget.last().slope.ln().abs()
                } else {
                    1.0
                };
                let z: f64 = rng.sample(StandardNormal);
                (mean + cfg.noise.sd * scale * z, None)
            }
            Generator::Structural => {
                let ln_eta = params.eta.sample_ln(&mut rng);
                let ln_phi = params.alpha * t as f64;
                (
                    utility_max_log_income(&budget, params.theta, ln_eta, ln_phi),
                    Some(ln_eta),
                )
            }
        };
        periods.push(SimPeriod {
            year: cfg.base_year + t as i64,
            t: t as i64,
            budget,
            log_income,
            ln_eta,
        });
    }
    let mut beta = beta_true;
    if cfg.generator == Generator::Structural && !periods.iter().all(|p| p.budget.len() == 1) {
        beta[2] = f64::NAN;
    }
    Ok(SimIndividual {
        id: format!("{:0width$}", index + 1),
        params,
        beta,
        weak_id,
        periods,
    })
}

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
}

/// `E[ln Y | budget]` by simulation over `η`.
pub fn mc_expected_log_income(
    budget: &BudgetSet,
    theta: f64,
    eta: LogNormal,
    ln_phi: f64,
    draws: usize,
    rng: &mut ChaCha8Rng,
) -> McEstimate {
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    // shift by the deterministic part to keep the variance accumulation well conditioned
    let center = theta * budget.last().slope.ln() + eta.mu;
    for _ in 0..draws {
        let v = utility_max_log_income(budget, theta, eta.sample_ln(rng), ln_phi) - center;
        sum += v;
        sum_sq += v * v;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    McEstimate {
        mean: mean + center,
        se: (var / n).sqrt(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XiCheckConfig {
    pub theta: f64,
    pub eta: LogNormal,
    /// Second-segment slope of the calibration budgets.
    pub calibration_slope: f64,
    /// Interpolation range for the argument of `ξ`.
    pub v_range: (f64, f64),
    pub nodes: usize,
    pub draws: usize,
    pub seed: u64,
}

impl XiCheckConfig {
    /// A grid spanning ±3σ of `ln η` around its mean.
    pub fn centered(theta: f64, eta: LogNormal, draws: usize, seed: u64) -> Self {
        Self {
            theta,
            eta,
            calibration_slope: 0.6,
            v_range: (eta.mu - 3.0 * eta.sigma, eta.mu + 3.0 * eta.sigma),
            nodes: 101,
            draws,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct XiCheckReport {
    pub grid: Vec<f64>,
    /// `ξ` on the grid, anchored to 0 at the grid midpoint.
    pub xi: Vec<f64>,
    pub intercept: f64,
    /// Simulated minus predicted `E[ln Y]` per held-out budget.
    pub gaps: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub max_gap: f64,
    /// `max |gap| / se` over held-out budgets.
    pub max_ratio: f64,
}

/// Checks the telescoping form of expected log income on two-segment
/// budgets without assuming a shape for `ξ`.
///
/// For `J = 2`, `E[ln Y] = a + θ ρ̃_2 + ξ(l̃ − θ ρ̃_1) − ξ(l̃ − θ ρ̃_2)`.
/// Holding `ρ_2` and the kink fixed and moving `ρ_1` traces out `ξ` up to a
/// constant; the node with `ρ_1 = ρ_2` (a linear budget) gives `a`. The
/// estimated pieces then predict held-out budgets, whose simulated means
/// must agree within Monte Carlo error.
pub fn xi_structure_check(cfg: &XiCheckConfig, held_out: &[BudgetSet]) -> Result<XiCheckReport> {
    let (v_lo, v_hi) = cfg.v_range;
    if cfg.nodes < 50 {
        return Err(Error::ConfigError(format!(
            "need at least 50 grid nodes, got {}",
            cfg.nodes
        )));
    }
    if !(v_hi > v_lo) || cfg.draws < 2 || !(cfg.theta > 0.0) || !(cfg.calibration_slope > 0.0) {
        return Err(Error::ConfigError("invalid xi check configuration".into()));
    }
    let theta = cfg.theta;
    let arguments = |b: &BudgetSet| -> Result<(f64, f64)> {
        if b.len() != 2 {
            return Err(Error::DomainError(format!(
                "held-out budgets need 2 segments, got {}",
                b.len()
            )));
        }
        let l = b.first().right_kink.ln();
        Ok((
            l - theta * b.first().slope.ln(),
            l - theta * b.last().slope.ln(),
        ))
    };
    let held_args = held_out.iter().map(arguments).collect::<Result<Vec<_>>>()?;
    for &(v1, v2) in &held_args {
        for v in [v1, v2] {
            if v < v_lo || v > v_hi {
                return Err(Error::GridError(format!(
                    "argument {v} outside the grid [{v_lo}, {v_hi}]"
                )));
            }
        }
    }

    let h = (v_hi - v_lo) / (cfg.nodes - 1) as f64;
    let grid: Vec<f64> = (0..cfg.nodes).map(|k| v_lo + k as f64 * h).collect();
    let rho2_ln = cfg.calibration_slope.ln();
    let log_kink = v_hi + theta * rho2_ln;
    let node_budgets = grid
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            if k + 1 == cfg.nodes {
                BudgetSet::linear(cfg.calibration_slope, 1.0)
            } else {
                let rho1 = ((log_kink - v) / theta).exp();
                BudgetSet::from_slopes(&[rho1, cfg.calibration_slope], &[log_kink.exp()], 1.0)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let simulate = |budgets: &[BudgetSet], offset: usize| -> Vec<McEstimate> {
        budgets
            .par_iter()
            .enumerate()
            .map(|(k, b)| {
                let mut rng = stream_rng(cfg.seed, (offset + k) as u64, 0);
                mc_expected_log_income(b, theta, cfg.eta, 0.0, cfg.draws, &mut rng)
            })
            .collect()
    };
    let nodes = simulate(&node_budgets, 0);
    let held = simulate(held_out, cfg.nodes);

    let top = cfg.nodes - 1;
    let mid = cfg.nodes / 2;
    let intercept = nodes[top].mean - theta * rho2_ln;
    let xi: Vec<f64> = nodes.iter().map(|m| m.mean - nodes[mid].mean).collect();

    // weights of the interpolant at v on the node means
    let weights = |v: f64| -> [(usize, f64); 2] {
        let pos = ((v - v_lo) / h).clamp(0.0, (cfg.nodes - 1) as f64);
        let k = (pos.floor() as usize).min(cfg.nodes - 2);
        let w = pos - k as f64;
        [(k, 1.0 - w), (k + 1, w)]
    };

    let mut gaps = Vec::with_capacity(held_out.len());
    let mut std_errors = Vec::with_capacity(held_out.len());
    for ((b, &(v1, v2)), sim) in held_out.iter().zip(&held_args).zip(&held) {
        let mut coef = vec![0.0; cfg.nodes];
        coef[top] += 1.0;
        for (k, w) in weights(v1) {
            coef[k] += w;
        }
        for (k, w) in weights(v2) {
            coef[k] -= w;
        }
        // intercept + θρ̃_2 + ξ(v1) − ξ(v2); the anchor constant cancels
        let predicted = coef
            .iter()
            .zip(&nodes)
            .map(|(c, m)| c * m.mean)
            .sum::<f64>()
            - theta * rho2_ln
            + theta * b.last().slope.ln();
        let var = sim.se * sim.se
            + coef
                .iter()
                .zip(&nodes)
                .map(|(c, m)| c * c * m.se * m.se)
                .sum::<f64>();
        gaps.push(sim.mean - predicted);
        std_errors.push(var.sqrt());
    }
    let max_gap = gaps.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
    let max_ratio = gaps
        .iter()
        .zip(&std_errors)
        .fold(0.0_f64, |m, (g, s)| m.max(g.abs() / s));
    Ok(XiCheckReport {
        grid,
        xi,
        intercept,
        gaps,
        std_errors,
        max_gap,
        max_ratio,
    })
}
