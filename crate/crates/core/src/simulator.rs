//! Portfolio simulation: risky asset plus an additive hedging overlay.
//!
//! A decision dated `t` (computed from observations through `t`) sets the
//! exposures for the day `t + 1 + lag` return and is held until the next
//! decision takes over. Daily return:
//!
//! `risky + Σ exposure_i · strategy_i − cost · Σ |exposure_i − previous_i|`

use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::features::MarketData;
use crate::policy::AllocationDecision;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    /// Extra days between decision and effect: 0 or 1.
    pub lag: usize,
    /// Cost per unit of exposure turnover.
    pub cost_rate: f64,
    pub leverage_cap: f64,
    pub initial_value: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            lag: 1,
            cost_rate: 5e-4,
            leverage_cap: 3.0,
            initial_value: 1.0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lag > 1 {
            bail!(Config, "action lag must be 0 or 1, got {}", self.lag);
        }
        if !(self.cost_rate >= 0.0 && self.cost_rate.is_finite()) {
            bail!(Config, "cost rate must be non-negative, got {}", self.cost_rate);
        }
        if !(self.leverage_cap > 0.0 && self.leverage_cap.is_finite()) {
            bail!(Config, "leverage cap must be positive, got {}", self.leverage_cap);
        }
        if !(self.initial_value > 0.0 && self.initial_value.is_finite()) {
            bail!(Config, "initial value must be positive, got {}", self.initial_value);
        }
        Ok(())
    }

    /// Days from a decision's date to the return it first earns.
    pub fn delay(&self) -> usize {
        1 + self.lag
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatedDecision {
    pub date: NaiveDate,
    pub decision: AllocationDecision<f64>,
}

/// Exposures in force on each day of a window.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureSchedule {
    pub dates: Vec<NaiveDate>,
    pub exposures: Vec<Vec<f64>>,
    /// Exposure in force the day before the window opens.
    pub prior: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioPath {
    /// `dates[0]` is the base date carrying the initial value; the rest are
    /// the simulated days.
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
    /// One per simulated day (aligned with `dates[1..]`).
    pub returns: Vec<f64>,
    pub exposures: Vec<Vec<f64>>,
    pub turnover: Vec<f64>,
    pub cost: Vec<f64>,
    /// Set when a value reached zero or below.
    pub blown_up: bool,
}

impl PortfolioPath {
    pub fn days(&self) -> usize {
        self.returns.len()
    }

    /// Trailing sub-path over the last `days` simulated days, rebased on
    /// the value just before them.
    pub fn tail(&self, days: usize) -> PortfolioPath {
        let n = self.days();
        let start = n - days.min(n);
        PortfolioPath {
            dates: self.dates[start..].to_vec(),
            values: self.values[start..].to_vec(),
            returns: self.returns[start..].to_vec(),
            exposures: self.exposures[start..].to_vec(),
            turnover: self.turnover[start..].to_vec(),
            cost: self.cost[start..].to_vec(),
            blown_up: self.blown_up,
        }
    }
}

fn check_decisions(decisions: &[DatedDecision], data: &MarketData, cfg: &EpisodeConfig) -> Result<Vec<usize>> {
    let mut idx = Vec::with_capacity(decisions.len());
    for d in decisions {
        let i = match data.dates.binary_search(&d.date) {
            Ok(i) => i,
            Err(_) => bail!(Contract, "decision dated {} is not on the returns calendar", d.date),
        };
        if idx.last().is_some_and(|&prev| prev >= i) {
            bail!(Contract, "decisions must be strictly increasing in date (at {})", d.date);
        }
        if d.decision.weights.len() != data.strategy_count() {
            bail!(
                Contract,
                "decision on {} has {} weights for {} strategies",
                d.date,
                d.decision.weights.len(),
                data.strategy_count()
            );
        }
        d.decision
            .validate(cfg.leverage_cap)
            .map_err(|e| Error::Contract(format!("decision on {}: {e}", d.date)))?;
        idx.push(i);
    }
    Ok(idx)
}

/// Exposures effective on returns days `first..=last`.
pub fn exposure_schedule(
    decisions: &[DatedDecision],
    data: &MarketData,
    first: usize,
    last: usize,
    cfg: &EpisodeConfig,
) -> Result<ExposureSchedule> {
    cfg.validate()?;
    if first == 0 || first > last || last >= data.len() {
        bail!(
            Contract,
            "episode window {first}..={last} must lie in 1..{} of the returns calendar",
            data.len()
        );
    }
    let idx = check_decisions(decisions, data, cfg)?;
    let l = data.strategy_count();
    let delay = cfg.delay();
    // Latest decision whose effect date is on or before `day`.
    let in_force = |day: usize| -> Vec<f64> {
        let n = idx.partition_point(|&i| i + delay <= day);
        match n {
            0 => vec![0.0; l],
            k => decisions[k - 1].decision.exposures(),
        }
    };
    Ok(ExposureSchedule {
        dates: data.dates[first..=last].to_vec(),
        exposures: (first..=last).map(in_force).collect(),
        prior: in_force(first - 1),
    })
}

/// Simulates returns days `first..=last`; the base value sits on day
/// `first − 1`.
pub fn run_episode(
    decisions: &[DatedDecision],
    data: &MarketData,
    first: usize,
    last: usize,
    cfg: &EpisodeConfig,
) -> Result<PortfolioPath> {
    let schedule = exposure_schedule(decisions, data, first, last, cfg)?;
    Ok(simulate_schedule(&schedule, data, first, cfg))
}

/// Applies an exposure schedule that starts on returns day `first`.
pub fn simulate_schedule(
    schedule: &ExposureSchedule,
    data: &MarketData,
    first: usize,
    cfg: &EpisodeConfig,
) -> PortfolioPath {
    let n = schedule.exposures.len();
    let mut path = PortfolioPath {
        dates: std::iter::once(data.dates[first - 1])
            .chain(schedule.dates.iter().copied())
            .collect(),
        values: Vec::with_capacity(n + 1),
        returns: Vec::with_capacity(n),
        exposures: schedule.exposures.clone(),
        turnover: Vec::with_capacity(n),
        cost: Vec::with_capacity(n),
        blown_up: false,
    };
    path.values.push(cfg.initial_value);
    let mut prev = &schedule.prior;
    for (k, e) in schedule.exposures.iter().enumerate() {
        let s = first + k;
        let overlay: f64 = e
            .iter()
            .zip(&data.strategies)
            .map(|(ei, strat)| ei * strat.values[s])
            .sum();
        let turnover: f64 = e.iter().zip(prev).map(|(a, b)| (a - b).abs()).sum();
        let cost = cfg.cost_rate * turnover;
        let r = data.risky[s] + overlay - cost;
        let v = path.values[k] * (1.0 + r);
        if v <= 0.0 {
            path.blown_up = true;
        }
        path.values.push(v);
        path.returns.push(r);
        path.turnover.push(turnover);
        path.cost.push(cost);
        prev = e;
    }
    if path.blown_up {
        log::warn!("portfolio value reached zero within {}..={}", path.dates[0], path.dates[n]);
    }
    path
}

/// Writes `date,value,return,turnover,cost`; the base row carries the
/// initial value and zeros.
pub fn write_path_csv(path: impl AsRef<Path>, p: &PortfolioPath) -> Result<()> {
    let file = path.as_ref();
    let mut w = csv::Writer::from_path(file).map_err(|e| Error::csv(file, e))?;
    w.write_record(["date", "value", "return", "turnover", "cost"])
        .map_err(|e| Error::csv(file, e))?;
    for (i, d) in p.dates.iter().enumerate() {
        let (r, t, c) = match i {
            0 => (0.0, 0.0, 0.0),
            _ => (p.returns[i - 1], p.turnover[i - 1], p.cost[i - 1]),
        };
        w.write_record([
            d.format("%Y-%m-%d").to_string(),
            format!("{}", p.values[i]),
            format!("{r}"),
            format!("{t}"),
            format!("{c}"),
        ])
        .map_err(|e| Error::csv(file, e))?;
    }
    w.flush().map_err(|e| Error::io(file, e))
}

/// Reads a path CSV back (exposures are not stored and come back empty).
pub fn read_path_csv(path: impl AsRef<Path>) -> Result<PortfolioPath> {
    let file = path.as_ref();
    let mut r = csv::Reader::from_path(file).map_err(|e| Error::csv(file, e))?;
    let mut p = PortfolioPath {
        dates: vec![],
        values: vec![],
        returns: vec![],
        exposures: vec![],
        turnover: vec![],
        cost: vec![],
        blown_up: false,
    };
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(file, e))?;
        let line = i + 2;
        let bad = || Error::Data(format!("{}:{line}: malformed path row", file.display()));
        if rec.len() != 5 {
            return Err(bad());
        }
        p.dates
            .push(NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d").map_err(|_| bad())?);
        let nums: Vec<f64> = (1..5)
            .map(|j| rec[j].parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        p.values.push(nums[0]);
        if i > 0 {
            p.returns.push(nums[1]);
            p.turnover.push(nums[2]);
            p.cost.push(nums[3]);
        }
    }
    if p.dates.is_empty() {
        bail!(Data, "{}: empty path file", file.display());
    }
    p.blown_up = p.values.iter().any(|v| *v <= 0.0);
    Ok(p)
}
