//! Batch front end: configuration, CSV ingestion, and report files.
//!
//! Input formats (headers must match exactly):
//!
//! - panel: `id,year,income` with income in levels, `> 0`
//! - budgets: `id,year,segment,slope,right_kink,virtual_income`, one row per
//!   segment, segments numbered from 1, `right_kink` empty on the last one
//! - schedules: `id,year,threshold,marginal_rate,nonlabor_income`, one row
//!   per bracket, the first threshold 0
//!
//! The time trend is `t = year − (earliest year in the panel file)`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::aggregate::{
    fit_all, panel_moments, sweep, zeta_diagnostic, DebiasReport, EstimationOptions, Sweep,
    ZetaDiagnostic, DEFAULT_LAMBDA_GRID, DEFAULT_ZETA_LAMBDA,
};
use crate::budget::{
    budget_from_schedule, regressors, Bracket, BudgetSet, Segment, Spec, TaxSchedule,
};
use crate::error::{Error, Result};
use crate::estimator::{Observation, PanelSeries, PenaltyMode, DEFAULT_PENALTY_FLOOR};
use crate::synthetic::{generate_panel, DgpConfig, SimulatedPanel};

pub const PANEL_HEADER: [&str; 3] = ["id", "year", "income"];
pub const BUDGET_HEADER: [&str; 6] = [
    "id",
    "year",
    "segment",
    "slope",
    "right_kink",
    "virtual_income",
];
pub const SCHEDULE_HEADER: [&str; 5] = [
    "id",
    "year",
    "threshold",
    "marginal_rate",
    "nonlabor_income",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub panel: Option<PathBuf>,
    pub budgets: Option<PathBuf>,
    pub schedule: Option<PathBuf>,
    pub spec: Spec,
    pub penalty: PenaltyMode,
    pub lambda_grid: Vec<f64>,
    pub min_obs: usize,
    pub z: f64,
    pub dof_correction: bool,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub zeta_lambda: f64,
    pub zeta_threshold: f64,
    pub simulate: DgpConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            panel: None,
            budgets: None,
            schedule: None,
            spec: Spec::A,
            penalty: PenaltyMode::Scaled,
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            min_obs: 15,
            z: 1.96,
            dof_correction: false,
            out: PathBuf::from("out"),
            seed: None,
            zeta_lambda: DEFAULT_ZETA_LAMBDA,
            zeta_threshold: 0.5,
            simulate: DgpConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigError(e.to_string()))
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn options(&self) -> EstimationOptions {
        EstimationOptions {
            penalty: self.penalty,
            floor: DEFAULT_PENALTY_FLOOR,
            dof_correction: self.dof_correction,
        }
    }

    /// Checks what estimation and diagnostics need.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigError(m));
        if self.lambda_grid.is_empty() {
            return bad("lambda grid is empty".into());
        }
        if self
            .lambda_grid
            .iter()
            .any(|l| !(*l >= 0.0) || !l.is_finite())
        {
            return bad("lambda values must be finite and >= 0".into());
        }
        if self.lambda_grid.windows(2).any(|w| !(w[0] < w[1])) {
            return bad("lambda grid must be strictly ascending".into());
        }
        let uses_zero = self.lambda_grid[0] == 0.0 || self.zeta_lambda == 0.0;
        if uses_zero && self.min_obs < self.spec.dim() {
            return bad(format!(
                "min_obs {} is below the {} regressors, so lambda = 0 fits would be singular",
                self.min_obs,
                self.spec.dim()
            ));
        }
        if !(self.z > 0.0) {
            return bad("z must be positive".into());
        }
        if !(self.zeta_lambda >= 0.0) {
            return bad("zeta_lambda must be >= 0".into());
        }
        if self.panel.is_none() {
            return bad("no panel file given".into());
        }
        match (&self.budgets, &self.schedule) {
            (Some(_), Some(_)) => bad("give either budgets or schedule, not both".into()),
            (None, None) => bad("no budgets or schedule file given".into()),
            _ => Ok(()),
        }
    }
}

fn parse_err(file: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::ParseError {
        file: file.display().to_string(),
        line,
        message: message.into(),
    }
}

fn open_csv(path: &Path, header: &[&str]) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let found = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    if found.iter().ne(header.iter().copied()) {
        return Err(parse_err(
            path,
            1,
            format!(
                "expected header `{}`, found `{}`",
                header.join(","),
                found.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    Ok(reader)
}

/// Iterates records with their 1-based line numbers.
fn records(path: &Path, header: &[&str]) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut reader = open_csv(path, header)?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        out.push((line, rec));
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(
    path: &Path,
    line: u64,
    rec: &csv::StringRecord,
    idx: usize,
    name: &str,
) -> Result<T> {
    let raw = rec.get(idx).unwrap_or("");
    raw.parse()
        .map_err(|_| parse_err(path, line, format!("{name}: cannot parse `{raw}`")))
}

fn finite(path: &Path, line: u64, rec: &csv::StringRecord, idx: usize, name: &str) -> Result<f64> {
    let v: f64 = field(path, line, rec, idx, name)?;
    if !v.is_finite() {
        return Err(parse_err(
            path,
            line,
            format!("{name} must be finite, got {v}"),
        ));
    }
    Ok(v)
}

fn positive(
    path: &Path,
    line: u64,
    rec: &csv::StringRecord,
    idx: usize,
    name: &str,
) -> Result<f64> {
    let v = finite(path, line, rec, idx, name)?;
    if v <= 0.0 {
        return Err(parse_err(
            path,
            line,
            format!("{name} must be positive, got {v}"),
        ));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelRecord {
    pub id: String,
    pub year: i64,
    pub income: f64,
    pub line: u64,
}

pub fn read_panel_csv(path: &Path) -> Result<Vec<PanelRecord>> {
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for (line, rec) in records(path, &PANEL_HEADER)? {
        let id = rec[0].to_string();
        let year: i64 = field(path, line, &rec, 1, "year")?;
        let income = positive(path, line, &rec, 2, "income")?;
        if let Some(prev) = seen.insert((id.clone(), year), line) {
            return Err(parse_err(
                path,
                line,
                format!("duplicate ({id}, {year}), first seen on line {prev}"),
            ));
        }
        out.push(PanelRecord {
            id,
            year,
            income,
            line,
        });
    }
    Ok(out)
}

pub type BudgetTable = HashMap<(String, i64), BudgetSet>;

pub fn read_budget_csv(path: &Path) -> Result<BudgetTable> {
    // (line, segment number, segment) per (id, year)
    type Rows = Vec<(u64, usize, Segment)>;
    let mut groups: IndexMap<(String, i64), Rows> = IndexMap::new();
    for (line, rec) in records(path, &BUDGET_HEADER)? {
        let id = rec[0].to_string();
        let year: i64 = field(path, line, &rec, 1, "year")?;
        let index: usize = field(path, line, &rec, 2, "segment")?;
        let slope = positive(path, line, &rec, 3, "slope")?;
        let right_kink = if rec[4].is_empty() {
            f64::INFINITY
        } else {
            positive(path, line, &rec, 4, "right_kink")?
        };
        let virtual_income = positive(path, line, &rec, 5, "virtual_income")?;
        groups.entry((id, year)).or_default().push((
            line,
            index,
            Segment {
                slope,
                right_kink,
                virtual_income,
            },
        ));
    }
    let mut table = HashMap::with_capacity(groups.len());
    for (key, mut rows) in groups {
        rows.sort_by_key(|r| r.1);
        let line = rows[0].0;
        if rows.iter().enumerate().any(|(k, r)| r.1 != k + 1) {
            return Err(parse_err(
                path,
                line,
                format!(
                    "segments for ({}, {}) must be numbered 1..J without gaps",
                    key.0, key.1
                ),
            ));
        }
        let segments = rows.into_iter().map(|r| r.2).collect();
        let budget = BudgetSet::new(segments).map_err(|e| {
            parse_err(
                path,
                line,
                format!("budget for ({}, {}): {e}", key.0, key.1),
            )
        })?;
        table.insert(key, budget);
    }
    Ok(table)
}

pub fn read_schedule_csv(path: &Path) -> Result<BudgetTable> {
    let mut groups: IndexMap<(String, i64), (u64, TaxSchedule)> = IndexMap::new();
    for (line, rec) in records(path, &SCHEDULE_HEADER)? {
        let id = rec[0].to_string();
        let year: i64 = field(path, line, &rec, 1, "year")?;
        let threshold = finite(path, line, &rec, 2, "threshold")?;
        let marginal_rate = finite(path, line, &rec, 3, "marginal_rate")?;
        let nonlabor_income = positive(path, line, &rec, 4, "nonlabor_income")?;
        let entry = groups.entry((id, year)).or_insert_with(|| {
            (
                line,
                TaxSchedule {
                    brackets: Vec::new(),
                    nonlabor_income,
                },
            )
        });
        if entry.1.nonlabor_income != nonlabor_income {
            return Err(parse_err(
                path,
                line,
                "nonlabor_income differs between brackets of one schedule",
            ));
        }
        entry.1.brackets.push(Bracket {
            threshold,
            marginal_rate,
        });
    }
    let mut table = HashMap::with_capacity(groups.len());
    for (key, (line, schedule)) in groups {
        let budget = budget_from_schedule(&schedule).map_err(|e| {
            parse_err(
                path,
                line,
                format!("schedule for ({}, {}): {e}", key.0, key.1),
            )
        })?;
        table.insert(key, budget);
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub panel: Vec<PanelSeries>,
    /// Ids dropped for having fewer than `min_obs` rows.
    pub dropped: Vec<String>,
    pub base_year: i64,
}

pub fn ingest(cfg: &RunConfig) -> Result<Ingested> {
    let panel_path = cfg
        .panel
        .as_deref()
        .ok_or_else(|| Error::ConfigError("no panel file given".into()))?;
    let budgets = match (&cfg.budgets, &cfg.schedule) {
        (Some(p), None) => read_budget_csv(p)?,
        (None, Some(p)) => read_schedule_csv(p)?,
        _ => {
            return Err(Error::ConfigError(
                "give exactly one of budgets or schedule".into(),
            ))
        }
    };
    let rows = read_panel_csv(panel_path)?;
    assemble(&rows, &budgets, cfg.spec, cfg.min_obs, panel_path)
}

fn assemble(
    rows: &[PanelRecord],
    budgets: &BudgetTable,
    spec: Spec,
    min_obs: usize,
    path: &Path,
) -> Result<Ingested> {
    let base_year = rows.iter().map(|r| r.year).min().unwrap_or(0);
    let mut by_id: IndexMap<&str, Vec<&PanelRecord>> = IndexMap::new();
    for r in rows {
        by_id.entry(r.id.as_str()).or_default().push(r);
    }
    let mut panel = Vec::new();
    let mut dropped = Vec::new();
    for (id, recs) in by_id {
        if recs.len() < min_obs {
            dropped.push(id.to_string());
            continue;
        }
        let mut obs = Vec::with_capacity(recs.len());
        for r in recs {
            let budget = budgets.get(&(r.id.clone(), r.year)).ok_or_else(|| {
                Error::JoinError(format!(
                    "{}:{}: no budget set for id {} in {}",
                    path.display(),
                    r.line,
                    r.id,
                    r.year
                ))
            })?;
            let t = r.year - base_year;
            obs.push(Observation {
                t,
                y: r.income.ln(),
                row: regressors(budget, t, spec)?,
            });
        }
        panel.push(PanelSeries::new(id, obs)?);
    }
    if !dropped.is_empty() {
        log::info!(
            "dropped {} individuals with fewer than {min_obs} observations",
            dropped.len()
        );
    }
    log::info!("ingested {} individuals", panel.len());
    Ok(Ingested {
        panel,
        dropped,
        base_year,
    })
}

/// Formats a number with 17 significant digits.
pub fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

/// Writes `contents` to a sibling temp file, then renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub lambda: f64,
    pub report: Option<DebiasReport>,
    pub error: Option<String>,
}

/// Everything `estimate` writes, in the form stored in `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub spec: Spec,
    pub coefficients: Vec<String>,
    pub options: EstimationOptions,
    pub z: f64,
    pub lambda_grid: Vec<f64>,
    pub individuals: usize,
    pub dropped: usize,
    /// First λ at which each reported elasticity is significant at `z`.
    pub first_significant_lambda: IndexMap<String, Option<f64>>,
    pub entries: Vec<ReportEntry>,
}

impl EstimateReport {
    pub fn from_sweep(sweep: &Sweep, z: f64, dropped: usize, individuals: usize) -> Self {
        let mut first = IndexMap::new();
        for (name, idx) in reported_coefficients(sweep.spec) {
            first.insert(name.to_string(), sweep.first_significant(idx, z));
        }
        Self {
            spec: sweep.spec,
            coefficients: sweep
                .spec
                .coefficient_names()
                .iter()
                .map(|s| s.to_string())
                .collect(),
            options: sweep.options,
            z,
            lambda_grid: sweep.entries.iter().map(|e| e.lambda).collect(),
            individuals,
            dropped,
            first_significant_lambda: first,
            entries: sweep
                .entries
                .iter()
                .map(|e| ReportEntry {
                    lambda: e.lambda,
                    report: e.report.as_ref().ok().cloned(),
                    error: e.report.as_ref().err().map(|e| e.to_string()),
                })
                .collect(),
        }
    }
}

/// The elasticities shown in the summary table: θ, plus γ for spec B.
pub fn reported_coefficients(spec: Spec) -> Vec<(&'static str, usize)> {
    let mut out = vec![("theta", Spec::THETA)];
    if let Some(g) = spec.gamma_index() {
        out.push(("gamma", g));
    }
    out
}

fn estimate_table(report: &EstimateReport, coefs: &[(&str, usize)]) -> String {
    let mut s = String::from("lambda");
    for (name, _) in coefs {
        write!(s, ",nondebiased_{name},debiased_{name},se_{name}").unwrap();
    }
    s.push('\n');
    for e in &report.entries {
        s.push_str(&fmt_num(e.lambda));
        for &(_, k) in coefs {
            let (naive, debiased, se) = match &e.report {
                Some(r) => (r.naive_avg[k], r.beta_tilde[k], r.std_errors[k]),
                None => (f64::NAN, f64::NAN, f64::NAN),
            };
            write!(
                s,
                ",{},{},{}",
                fmt_num(naive),
                fmt_num(debiased),
                fmt_num(se)
            )
            .unwrap();
        }
        s.push('\n');
    }
    s
}

/// Files written by `estimate`.
pub const ESTIMATES_FILE: &str = "estimates.csv";
pub const ESTIMATES_FULL_FILE: &str = "estimates_full.csv";
pub const REPORT_FILE: &str = "report.json";

/// Ingests, sweeps the λ grid, and writes `estimates.csv` (the elasticity
/// table), `estimates_full.csv` (every coefficient) and `report.json`.
pub fn run_estimate(cfg: &RunConfig) -> Result<EstimateReport> {
    cfg.validate()?;
    let data = ingest(cfg)?;
    let sweep = sweep(&data.panel, &cfg.lambda_grid, &cfg.options())?;
    for e in &sweep.entries {
        if let Err(err) = &e.report {
            log::warn!("lambda {}: {err}", e.lambda);
        }
    }
    let report = EstimateReport::from_sweep(&sweep, cfg.z, data.dropped.len(), data.panel.len());
    write_estimate_files(&report, &cfg.out)?;
    Ok(report)
}

pub fn write_estimate_files(report: &EstimateReport, out: &Path) -> Result<()> {
    let all: Vec<(&str, usize)> = report
        .spec
        .coefficient_names()
        .iter()
        .enumerate()
        .map(|(k, n)| (*n, k))
        .collect();
    write_atomic(
        &out.join(ESTIMATES_FILE),
        estimate_table(report, &reported_coefficients(report.spec)).as_bytes(),
    )?;
    write_atomic(
        &out.join(ESTIMATES_FULL_FILE),
        estimate_table(report, &all).as_bytes(),
    )?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Io(e.to_string()))?;
    write_atomic(&out.join(REPORT_FILE), json.as_bytes())
}

pub fn read_report(path: &Path) -> Result<EstimateReport> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.line() as u64, e.to_string()))
}

pub const ZETA_QUANTILES_FILE: &str = "zeta_quantiles.csv";
pub const ZETA_INDIVIDUALS_FILE: &str = "zeta_individuals.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseOutput {
    pub ids: Vec<String>,
    pub diagnostic: ZetaDiagnostic,
    /// Ids with ζ above the threshold.
    pub flagged: Vec<String>,
}

/// ζ for the slope elasticity at `cfg.zeta_lambda`.
pub fn run_diagnose(cfg: &RunConfig) -> Result<DiagnoseOutput> {
    cfg.validate()?;
    let data = ingest(cfg)?;
    let fits = fit_all(&panel_moments(&data.panel), cfg.zeta_lambda, &cfg.options())?;
    let diagnostic = zeta_diagnostic(&fits, Spec::THETA)?;
    let ids: Vec<String> = data.panel.iter().map(|s| s.id().to_string()).collect();
    let flagged: Vec<String> = diagnostic
        .weakly_identified(cfg.zeta_threshold)
        .into_iter()
        .map(|i| ids[i].clone())
        .collect();

    let mut q = String::from("p,zeta\n");
    for (p, z) in &diagnostic.quantiles {
        writeln!(q, "{:.2},{}", p, fmt_num(*z)).unwrap();
    }
    let mut per = String::from("id,zeta,weak_id\n");
    for (id, z) in ids.iter().zip(&diagnostic.values) {
        writeln!(per, "{id},{},{}", fmt_num(*z), *z > cfg.zeta_threshold).unwrap();
    }
    write_atomic(&cfg.out.join(ZETA_QUANTILES_FILE), q.as_bytes())?;
    write_atomic(&cfg.out.join(ZETA_INDIVIDUALS_FILE), per.as_bytes())?;
    log::info!(
        "{} of {} individuals have zeta above {}",
        flagged.len(),
        ids.len(),
        cfg.zeta_threshold
    );
    Ok(DiagnoseOutput {
        ids,
        diagnostic,
        flagged,
    })
}

pub const SIM_PANEL_FILE: &str = "panel.csv";
pub const SIM_BUDGETS_FILE: &str = "budgets.csv";
pub const SIM_TRUTH_FILE: &str = "truth.csv";
pub const SIM_TRUTH_SUMMARY_FILE: &str = "truth_summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSummary {
    pub config: DgpConfig,
    pub coefficients: Vec<String>,
    /// Sample average of the individual coefficients.
    pub mean_beta: Vec<f64>,
}

/// Generates a panel from `cfg.simulate` and writes it in the formats
/// [`ingest`] reads, plus the true coefficients.
pub fn run_simulate(cfg: &RunConfig) -> Result<SimulatedPanel> {
    let mut dgp = cfg.simulate.clone();
    dgp.spec = cfg.spec;
    if let Some(seed) = cfg.seed {
        dgp.seed = seed;
    }
    let sim = generate_panel(&dgp)?;

    let mut panel = String::from("id,year,income\n");
    let mut budgets = budget_csv_header();
    for ind in &sim.individuals {
        for p in &ind.periods {
            writeln!(
                panel,
                "{},{},{}",
                ind.id,
                p.year,
                fmt_num(p.log_income.exp())
            )
            .unwrap();
            push_budget_rows(&mut budgets, &ind.id, p.year, &p.budget);
        }
    }
    let names = sim.spec.coefficient_names();
    let mut truth = format!("id,weak_id,{}\n", names.join(","));
    for ind in &sim.individuals {
        let vals: Vec<String> = ind.beta.iter().map(|v| fmt_num(*v)).collect();
        writeln!(truth, "{},{},{}", ind.id, ind.weak_id, vals.join(",")).unwrap();
    }
    let summary = TruthSummary {
        config: dgp,
        coefficients: names.iter().map(|s| s.to_string()).collect(),
        mean_beta: sim.mean_beta(),
    };
    let summary = serde_json::to_string_pretty(&summary).map_err(|e| Error::Io(e.to_string()))?;

    write_atomic(&cfg.out.join(SIM_PANEL_FILE), panel.as_bytes())?;
    write_atomic(&cfg.out.join(SIM_BUDGETS_FILE), budgets.as_bytes())?;
    write_atomic(&cfg.out.join(SIM_TRUTH_FILE), truth.as_bytes())?;
    write_atomic(&cfg.out.join(SIM_TRUTH_SUMMARY_FILE), summary.as_bytes())?;
    log::info!(
        "simulated {} individuals into {}",
        sim.individuals.len(),
        cfg.out.display()
    );
    Ok(sim)
}

fn budget_csv_header() -> String {
    format!("{}\n", BUDGET_HEADER.join(","))
}

fn push_budget_rows(out: &mut String, id: &str, year: i64, budget: &BudgetSet) {
    for (j, s) in budget.segments().iter().enumerate() {
        let kink = if s.right_kink.is_finite() {
            fmt_num(s.right_kink)
        } else {
            String::new()
        };
        writeln!(
            out,
            "{id},{year},{},{},{kink},{}",
            j + 1,
            fmt_num(s.slope),
            fmt_num(s.virtual_income)
        )
        .unwrap();
    }
}

/// Converts a schedule file into a budget file, keeping the input order.
pub fn run_budget(schedule: &Path, out: &Path) -> Result<usize> {
    let mut keys: IndexMap<(String, i64), ()> = IndexMap::new();
    for (line, rec) in records(schedule, &SCHEDULE_HEADER)? {
        let year: i64 = field(schedule, line, &rec, 1, "year")?;
        keys.insert((rec[0].to_string(), year), ());
    }
    let table = read_schedule_csv(schedule)?;
    let mut text = budget_csv_header();
    for (id, year) in keys.keys() {
        push_budget_rows(&mut text, id, *year, &table[&(id.clone(), *year)]);
    }
    write_atomic(out, text.as_bytes())?;
    Ok(keys.len())
}

#[derive(Debug, Parser)]
#[command(
    name = "eti",
    version,
    about = "Debiased ridge estimates of taxable-income elasticities"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sweep the λ grid and write estimate tables.
    Estimate(CommonArgs),
    /// Per-individual identification scores.
    Diagnose {
        #[command(flatten)]
        common: CommonArgs,
        /// λ for the diagnostic fits.
        #[arg(long)]
        lambda: Option<f64>,
        /// ζ above this flags an individual as weakly identified.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Write a synthetic panel with known coefficients.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        periods: Option<usize>,
        /// reduced | structural
        #[arg(long)]
        generator: Option<String>,
    },
    /// Convert a tax-schedule CSV into a budget-set CSV.
    Budget {
        #[arg(long)]
        schedule: PathBuf,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub panel: Option<PathBuf>,
    #[arg(long)]
    pub budgets: Option<PathBuf>,
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    /// a | b
    #[arg(long)]
    pub spec: Option<String>,
    /// unit | scaled
    #[arg(long)]
    pub penalty: Option<String>,
    /// Comma-separated, ascending.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub lambda_grid: Option<Vec<String>>,
    #[arg(long)]
    pub min_obs: Option<usize>,
    #[arg(long)]
    pub z: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_toml_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(p) = &self.panel {
            cfg.panel = Some(p.clone());
        }
        if let Some(p) = &self.budgets {
            cfg.budgets = Some(p.clone());
            cfg.schedule = None;
        }
        if let Some(p) = &self.schedule {
            cfg.schedule = Some(p.clone());
            if self.budgets.is_none() {
                cfg.budgets = None;
            }
        }
        if let Some(s) = &self.spec {
            cfg.spec = s.parse()?;
        }
        if let Some(s) = &self.penalty {
            cfg.penalty = s.parse()?;
        }
        if let Some(grid) = &self.lambda_grid {
            cfg.lambda_grid = grid
                .iter()
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::ConfigError(format!("bad lambda `{v}`")))
                })
                .collect::<Result<_>>()?;
        }
        if let Some(m) = self.min_obs {
            cfg.min_obs = m;
        }
        if let Some(z) = self.z {
            cfg.z = z;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        Ok(cfg)
    }
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Estimate(args) => {
            let report = run_estimate(&args.resolve()?)?;
            for (name, lambda) in &report.first_significant_lambda {
                match lambda {
                    Some(l) => println!("{name}: first significant at lambda = {l}"),
                    None => println!("{name}: not significant on the grid"),
                }
            }
        }
        Command::Diagnose {
            common,
            lambda,
            threshold,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(l) = lambda {
                cfg.zeta_lambda = *l;
            }
            if let Some(t) = threshold {
                cfg.zeta_threshold = *t;
            }
            let out = run_diagnose(&cfg)?;
            println!(
                "{} of {} individuals weakly identified",
                out.flagged.len(),
                out.ids.len()
            );
        }
        Command::Simulate {
            common,
            n,
            periods,
            generator,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(n) = n {
                cfg.simulate.n = *n;
            }
            if let Some(p) = periods {
                cfg.simulate.periods = *p;
            }
            if let Some(g) = generator {
                cfg.simulate.generator = g.parse()?;
            }
            run_simulate(&cfg)?;
        }
        Command::Budget { schedule, out } => {
            let n = run_budget(schedule, out)?;
            println!("wrote {n} budget sets to {}", out.display());
        }
    }
    Ok(())
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
